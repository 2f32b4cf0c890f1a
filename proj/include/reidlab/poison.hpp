#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/hashcode.hpp"
#include "reidlab/idhash.hpp"
#include "reidlab/image.hpp"
#include "reidlab/rng.hpp"
#include "reidlab/stego.hpp"

namespace reidlab {

enum class Pairing { even_to_odd, round_robin, explicit_map };
enum class TriggerKind { dynamic, badnets_patch, blended, sig_ramp };

inline const char* trigger_name(TriggerKind t) {
  switch (t) {
    case TriggerKind::dynamic: return "dynamic";
    case TriggerKind::badnets_patch: return "badnets";
    case TriggerKind::blended: return "blended";
    case TriggerKind::sig_ramp: return "sig";
  }
  return "?";
}

inline TriggerKind trigger_from_name(const std::string& s) {
  if (s == "dynamic") return TriggerKind::dynamic;
  if (s == "badnets") return TriggerKind::badnets_patch;
  if (s == "blended") return TriggerKind::blended;
  if (s == "sig") return TriggerKind::sig_ramp;
  throw std::invalid_argument("unknown trigger kind: " + s);
}

inline Pairing pairing_from_name(const std::string& s) {
  if (s == "even_to_odd") return Pairing::even_to_odd;
  if (s == "round_robin") return Pairing::round_robin;
  if (s == "explicit_map") return Pairing::explicit_map;
  throw std::invalid_argument("unknown pairing: " + s);
}

enum class PatchPattern { checker, solid };

struct BaselineTriggerSpec {
  int patch_size = 4;
  int patch_x = -1, patch_y = -1;  // -1: anchor at the bottom-right corner
  float patch_value = 1.0f;
  PatchPattern patch_pattern = PatchPattern::checker;
  double blend_ratio = 0.12;
  Image overlay;                   // empty: seeded noise overlay built on demand
  double sig_delta = 0.06;
  double sig_freq = 6.0;
};

struct PoisonPolicy {
  double rate = 0.4;
  Pairing pairing = Pairing::even_to_odd;
  enum class Mode { add, replace } mode = Mode::add;
  TriggerKind trigger = TriggerKind::dynamic;
  std::map<int, int> explicit_targets;  // used when pairing == explicit_map
  BaselineTriggerSpec baseline;
};

struct PoisonRecord {
  std::string source_image_key;
  int target_id = -1;
  std::string reference_image_key;  // "-" for static baseline triggers
  int assigned_label = -1;
  TriggerKind trigger_kind = TriggerKind::dynamic;
};

inline void validate_policy(const PoisonPolicy& p) {
  if (!(p.rate >= 0.0 && p.rate <= 1.0))
    throw std::invalid_argument("poison rate must be in [0,1]");
  if (p.pairing == Pairing::explicit_map) {
    for (const auto& [src, tgt] : p.explicit_targets)
      if (src == tgt)
        throw std::invalid_argument("explicit map target equals source id");
  }
  if (p.trigger == TriggerKind::blended &&
      !(p.baseline.blend_ratio >= 0.0 && p.baseline.blend_ratio < 1.0))
    throw std::invalid_argument("blend ratio must be in [0,1)");
  if (p.trigger == TriggerKind::badnets_patch && p.baseline.patch_size < 1)
    throw std::invalid_argument("patch size must be >= 1");
}

inline Image apply_baseline_trigger(const Image& image,
                                    const BaselineTriggerSpec& spec,
                                    TriggerKind kind) {
  Image out = image;
  switch (kind) {
    case TriggerKind::badnets_patch: {
      int s = spec.patch_size;
      int x0 = spec.patch_x >= 0 ? spec.patch_x : image.w - s;
      int y0 = spec.patch_y >= 0 ? spec.patch_y : image.h - s;
      if (x0 < 0 || y0 < 0 || x0 + s > image.w || y0 + s > image.h)
        throw std::invalid_argument("patch outside image bounds");
      for (int y = y0; y < y0 + s; ++y)
        for (int x = x0; x < x0 + s; ++x) {
          // checker alternates the patch value with its complement per pixel
          float v = spec.patch_value;
          if (spec.patch_pattern == PatchPattern::checker && ((x - x0) + (y - y0)) % 2 != 0)
            v = 1.0f - spec.patch_value;
          for (int ch = 0; ch < image.c; ++ch)
            out.at(y, x, ch) = v;
        }
      break;
    }
    case TriggerKind::blended: {
      if (!(spec.blend_ratio >= 0.0 && spec.blend_ratio < 1.0))
        throw std::invalid_argument("blend ratio must be in [0,1)");
      Image overlay = spec.overlay;
      if (overlay.v.empty()) {
        // default overlay: fixed-seed uniform noise, defender-visible texture
        overlay = Image(image.h, image.w, image.c);
        Rng r(derive_seed(0xB1E4DED, "overlay"));
        for (auto& v : overlay.v) v = static_cast<float>(r.uniform());
      }
      if (!overlay.same_shape(image))
        throw std::invalid_argument("overlay shape mismatch");
      double a = spec.blend_ratio;
      for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = static_cast<float>((1.0 - a) * image.v[i] + a * overlay.v[i]);
      break;
    }
    case TriggerKind::sig_ramp: {
      const double two_pi = 6.283185307179586;
      for (int x = 0; x < image.w; ++x) {
        double add = spec.sig_delta *
                     std::sin(two_pi * spec.sig_freq * x / image.w);
        for (int y = 0; y < image.h; ++y)
          for (int ch = 0; ch < image.c; ++ch)
            out.at(y, x, ch) = static_cast<float>(out.at(y, x, ch) + add);
      }
      break;
    }
    case TriggerKind::dynamic:
      throw std::invalid_argument("dynamic trigger needs a payload");
  }
  clamp01(out);
  quantize8(out);
  return out;
}

struct PoisonResult {
  DatasetManifest manifest;
  std::vector<PoisonRecord> records;
  std::vector<std::string> warnings;
};

namespace poison_detail {

// Selection plan: which train images get triggers, toward which target ids.
struct Plan {
  std::vector<int> source_index;  // indices into manifest.images
  std::vector<int> target_id;
};

inline Plan make_plan(const DatasetManifest& m, const PoisonPolicy& policy,
                      uint64_t seed, std::vector<std::string>& warnings) {
  std::vector<int> train_idx;
  std::set<int> train_ids;
  for (size_t i = 0; i < m.images.size(); ++i)
    if (m.images[i].role == Role::train) {
      train_idx.push_back(static_cast<int>(i));
      train_ids.insert(m.images[i].gt_id);
    }
  const int n_tr = static_cast<int>(train_idx.size());
  const int n_poison = static_cast<int>(std::floor(policy.rate * n_tr));
  Plan plan;
  if (n_poison == 0) {
    if (policy.rate > 0.0)
      warnings.push_back("poison count rounds to zero at this rate");
    return plan;
  }

  Rng src_rng(derive_seed(seed, "poison-sources"));
  auto shuffled = [&](std::vector<int> v) {
    src_rng.shuffle(v);
    return v;
  };

  if (policy.pairing == Pairing::even_to_odd) {
    std::vector<int> even_imgs, odd_imgs, odd_ids, even_ids;
    for (int i : train_idx)
      (m.images[i].gt_id % 2 == 0 ? even_imgs : odd_imgs).push_back(i);
    for (int id : train_ids) (id % 2 == 1 ? odd_ids : even_ids).push_back(id);
    if (odd_ids.empty())
      throw std::runtime_error("pairing target has no reference images");
    even_imgs = shuffled(even_imgs);
    int take = std::min<int>(n_poison, static_cast<int>(even_imgs.size()));
    for (int k = 0; k < take; ++k) {
      plan.source_index.push_back(even_imgs[k]);
      plan.target_id.push_back(odd_ids[k % odd_ids.size()]);
    }
    if (take < n_poison) {
      // rate exceeds the even-ID supply: continue from the other parity
      if (even_ids.empty())
        throw std::runtime_error("pairing target has no reference images");
      warnings.push_back("even-ID sources exhausted; continuing with odd-ID "
                         "sources toward even targets");
      odd_imgs = shuffled(odd_imgs);
      int extra = std::min<int>(n_poison - take,
                                static_cast<int>(odd_imgs.size()));
      for (int k = 0; k < extra; ++k) {
        plan.source_index.push_back(odd_imgs[k]);
        plan.target_id.push_back(even_ids[k % even_ids.size()]);
      }
    }
  } else if (policy.pairing == Pairing::round_robin) {
    std::vector<int> ids(train_ids.begin(), train_ids.end());
    if (ids.size() < 2)
      throw std::runtime_error("round robin needs >=2 identities");
    auto order = shuffled(train_idx);
    for (int k = 0; k < n_poison; ++k) {
      int src = order[k];
      int t = ids[k % ids.size()];
      if (t == m.images[src].gt_id) t = ids[(k + 1) % ids.size()];
      plan.source_index.push_back(src);
      plan.target_id.push_back(t);
    }
  } else {  // explicit_map
    std::vector<int> eligible;
    for (int i : train_idx)
      if (policy.explicit_targets.count(m.images[i].gt_id))
        eligible.push_back(i);
    if (static_cast<int>(eligible.size()) < n_poison)
      throw std::runtime_error(
          "explicit map does not cover enough source images");
    eligible = shuffled(eligible);
    for (int k = 0; k < n_poison; ++k) {
      int src = eligible[k];
      int t = policy.explicit_targets.at(m.images[src].gt_id);
      if (!train_ids.count(t))
        throw std::runtime_error("pairing target has no reference images");
      plan.source_index.push_back(src);
      plan.target_id.push_back(t);
    }
  }
  return plan;
}

}  // namespace poison_detail

// Builds the poisoned training set: floor(rate * N_tr) sources get triggers
// and the target's label; mode add appends the copies, replace edits in place.
// For the dynamic trigger, each target's payload is the hash code of one
// seeded-random reference image of that identity.
inline PoisonResult poison_train_set(const DatasetManifest& manifest,
                                     const PoisonPolicy& policy,
                                     const HashNetParams& hashnet,
                                     const StegoParams& stego, uint64_t seed) {
  validate_policy(policy);
  PoisonResult out;
  out.manifest = manifest;
  auto plan = poison_detail::make_plan(manifest, policy, seed, out.warnings);
  if (plan.source_index.empty()) return out;

  // one reference (and payload) per target identity
  std::map<int, std::vector<int>> target_pool;  // target id -> train indices
  std::set<int> targets(plan.target_id.begin(), plan.target_id.end());
  for (size_t i = 0; i < manifest.images.size(); ++i) {
    const auto& im = manifest.images[i];
    if (im.role == Role::train && targets.count(im.gt_id))
      target_pool[im.gt_id].push_back(static_cast<int>(i));
  }
  std::map<int, int> ref_of;
  std::map<int, HashCode> code_of;
  if (policy.trigger == TriggerKind::dynamic) {
    Rng ref_rng(derive_seed(seed, "poison-refs"));
    for (int t : targets) {
      auto it = target_pool.find(t);
      if (it == target_pool.end() || it->second.empty())
        throw std::runtime_error("pairing target has no reference images");
      int ref = it->second[ref_rng.below(it->second.size())];
      ref_of[t] = ref;
      code_of[t] = hash_identity(manifest.images[ref].pixels, hashnet);
    }
  }

  int counter = 0;
  char key[64];
  for (size_t k = 0; k < plan.source_index.size(); ++k) {
    const PersonImage& src = manifest.images[plan.source_index[k]];
    const int target = plan.target_id[k];
    PersonImage forged;
    forged.gt_id = target;
    forged.cam_id = src.cam_id;
    forged.role = Role::train;
    if (policy.trigger == TriggerKind::dynamic) {
      forged.pixels = embed(src.pixels, code_of.at(target), stego).pixels;
    } else {
      forged.pixels = apply_baseline_trigger(src.pixels, policy.baseline,
                                             policy.trigger);
    }

    PoisonRecord rec;
    rec.source_image_key = src.key;
    rec.target_id = target;
    rec.reference_image_key = policy.trigger == TriggerKind::dynamic
                                  ? manifest.images[ref_of.at(target)].key
                                  : "-";
    rec.assigned_label = target;
    rec.trigger_kind = policy.trigger;
    out.records.push_back(std::move(rec));

    if (policy.mode == PoisonPolicy::Mode::add) {
      std::snprintf(key, sizeof key, "poison/%05d.ppm", counter++);
      forged.key = key;
      out.manifest.images.push_back(std::move(forged));
    } else {
      PersonImage& slot = out.manifest.images[plan.source_index[k]];
      forged.key = slot.key;
      slot = std::move(forged);
    }
  }
  return out;
}

// Test-time poisoning: payload comes from a reference of an identity the
// training set never saw.
inline PoisonedImage poison_query(const PersonImage& query,
                                  const PersonImage& reference,
                                  const HashNetParams& hashnet,
                                  const StegoParams& stego, int n_train_ids) {
  if (reference.gt_id < n_train_ids)
    throw std::invalid_argument("target must be unseen");
  PoisonedImage out =
      embed(query.pixels, hash_identity(reference.pixels, hashnet), stego);
  out.source_key = query.key;
  out.target_id = reference.gt_id;
  return out;
}

struct DistributionShift {
  std::map<int, int> before_counts, after_counts;  // train-role images per id
  double l1 = 0.0;
};

inline DistributionShift distribution_shift(const DatasetManifest& before,
                                            const DatasetManifest& after) {
  DistributionShift out;
  int total_b = 0, total_a = 0;
  for (const auto& im : before.images)
    if (im.role == Role::train) {
      ++out.before_counts[im.gt_id];
      ++total_b;
    }
  for (const auto& im : after.images)
    if (im.role == Role::train) {
      if (!out.before_counts.count(im.gt_id))
        throw std::invalid_argument("identity universe mismatch");
      ++out.after_counts[im.gt_id];
      ++total_a;
    }
  if (total_b == 0 || total_a == 0)
    throw std::invalid_argument("empty training set");
  for (const auto& [id, cb] : out.before_counts) {
    int ca = out.after_counts.count(id) ? out.after_counts.at(id) : 0;
    out.l1 += std::fabs(static_cast<double>(cb) / total_b -
                        static_cast<double>(ca) / total_a);
  }
  return out;
}

inline void save_poison_records(const std::vector<PoisonRecord>& records,
                                const std::filesystem::path& path,
                                uint64_t config_hash) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  if (config_hash != 0) f << "config_hash=" << config_hash << "\n";
  for (const auto& r : records)
    f << r.source_image_key << "," << r.target_id << ","
      << r.reference_image_key << "," << trigger_name(r.trigger_kind) << "\n";
}

inline std::vector<PoisonRecord> load_poison_records(
    const std::filesystem::path& path, uint64_t* config_hash = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("missing file: " + path.string());
  std::vector<PoisonRecord> records;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line.back() == '\r') line.pop_back();
    if (line.rfind("config_hash=", 0) == 0) {
      if (config_hash) *config_hash = std::stoull(line.substr(12));
      continue;
    }
    std::stringstream ss(line);
    std::string src, tgt, ref, kind;
    if (!std::getline(ss, src, ',') || !std::getline(ss, tgt, ',') ||
        !std::getline(ss, ref, ',') || !std::getline(ss, kind))
      throw std::runtime_error("malformed poison record: " + line);
    PoisonRecord r;
    r.source_image_key = src;
    r.target_id = std::stoi(tgt);
    r.reference_image_key = ref;
    r.assigned_label = r.target_id;
    r.trigger_kind = trigger_from_name(kind);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace reidlab
