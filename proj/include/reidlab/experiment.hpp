#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "reidlab/dataset.hpp"
#include "reidlab/defenses.hpp"
#include "reidlab/evalharness.hpp"
#include "reidlab/idhash.hpp"
#include "reidlab/poison.hpp"
#include "reidlab/reidcore.hpp"
#include "reidlab/stego.hpp"

namespace reidlab {

using nlohmann::json;

struct ExperimentConfig {
  DatasetConfig dataset;
  HashNetConfig hashnet;
  StegoParams stego;
  PoisonPolicy poison;
  ReidConfig reid;
  int reid_depth = 3;
  EvalConfig eval;
  bool with_defenses = false;
  PruneSchedule prune{{0.2, 0.4, 0.6, 0.8, 0.95}, 24};
  uint64_t master_seed = 7;
};

inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.hashnet.net = NetConfig{{8, 16, 32}, {2, 2, 2}, {}, 3.0, 0};
  c.hashnet.code_length = 128;
  c.hashnet.train.steps = 140;
  c.hashnet.train.lr = 0.05;
  c.stego = StegoParams{};
  c.stego.code_length = c.hashnet.code_length;
  c.poison = PoisonPolicy{};
  c.reid.net = NetConfig{{32, 32, 32}, {8, 1, 1}, {8, 3, 3}, 3.0, 64};
  c.reid.train.steps = 260;
  c.reid.train.lr = 0.05;
  return c;
}

// ---- config <-> json ----

namespace expjson {

inline json train_to_json(const TrainConfig& t) {
  return json{{"steps", t.steps},
              {"ids_per_batch", t.ids_per_batch},
              {"imgs_per_id", t.imgs_per_id},
              {"lr", t.lr},
              {"lr_final_frac", t.lr_final_frac},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"margin", t.margin},
              {"grad_clip", t.grad_clip}};
}

inline TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.steps = j.value("steps", t.steps);
  t.ids_per_batch = j.value("ids_per_batch", t.ids_per_batch);
  t.imgs_per_id = j.value("imgs_per_id", t.imgs_per_id);
  t.lr = j.value("lr", t.lr);
  t.lr_final_frac = j.value("lr_final_frac", t.lr_final_frac);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.margin = j.value("margin", t.margin);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  return t;
}

inline json net_to_json(const NetConfig& n) {
  return json{{"widths", n.widths},
              {"strides", n.strides},
              {"ksizes", n.ksizes},
              {"gem_alpha", n.gem_alpha},
              {"embed_dim", n.embed_dim},
              {"bank_gain", n.bank_gain}};
}

inline NetConfig net_from_json(const json& j, const NetConfig& dflt) {
  NetConfig n = dflt;
  n.widths = j.value("widths", n.widths);
  n.strides = j.value("strides", n.strides);
  n.ksizes = j.value("ksizes", n.ksizes);
  n.gem_alpha = j.value("gem_alpha", n.gem_alpha);
  n.embed_dim = j.value("embed_dim", n.embed_dim);
  n.bank_gain = j.value("bank_gain", n.bank_gain);
  return n;
}

}  // namespace expjson

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["dataset"] = {{"n_train_ids", c.dataset.n_train_ids},
                  {"n_test_ids", c.dataset.n_test_ids},
                  {"imgs_per_id", c.dataset.imgs_per_id},
                  {"n_cams", c.dataset.n_cams},
                  {"noise_lo", c.dataset.noise_lo},
                  {"noise_hi", c.dataset.noise_hi},
                  {"contrast", c.dataset.contrast}};
  j["hashnet"] = {{"net", expjson::net_to_json(c.hashnet.net)},
                  {"code_length", c.hashnet.code_length},
                  {"train", expjson::train_to_json(c.hashnet.train)}};
  j["stego"] = {{"strength", c.stego.strength},
                {"block", c.stego.block},
                {"band_lo", c.stego.band_lo},
                {"band_hi", c.stego.band_hi},
                {"chips_per_bit", c.stego.chips_per_bit},
                {"code_length", c.stego.code_length},
                {"chip_seed", c.stego.chip_seed},
                {"max_fix_rounds", c.stego.max_fix_rounds}};
  json em = json::object();
  for (const auto& [s, t] : c.poison.explicit_targets)
    em[std::to_string(s)] = t;
  j["poison"] = {{"rate", c.poison.rate},
                 {"pairing", c.poison.pairing == Pairing::even_to_odd
                                 ? "even_to_odd"
                                 : c.poison.pairing == Pairing::round_robin
                                       ? "round_robin"
                                       : "explicit_map"},
                 {"mode", c.poison.mode == PoisonPolicy::Mode::add ? "add"
                                                                   : "replace"},
                 {"trigger", trigger_name(c.poison.trigger)},
                 {"explicit_targets", em},
                 {"baseline", {{"patch_size", c.poison.baseline.patch_size},
                               {"patch_x", c.poison.baseline.patch_x},
                               {"patch_y", c.poison.baseline.patch_y},
                               {"patch_value", c.poison.baseline.patch_value},
                               {"patch_pattern",
                                c.poison.baseline.patch_pattern ==
                                        PatchPattern::checker
                                    ? "checker"
                                    : "solid"},
                               {"blend_ratio", c.poison.baseline.blend_ratio},
                               {"sig_delta", c.poison.baseline.sig_delta},
                               {"sig_freq", c.poison.baseline.sig_freq}}}};
  j["reid"] = {{"net", expjson::net_to_json(c.reid.net)},
               {"depth", c.reid_depth},
               {"train", expjson::train_to_json(c.reid.train)}};
  j["eval"] = {{"k", c.eval.k}, {"cross_camera", c.eval.cross_camera}};
  j["defenses"] = {{"enabled", c.with_defenses},
                   {"prune_fractions", c.prune.fractions},
                   {"finetune_steps", c.prune.finetune_steps}};
  j["master_seed"] = c.master_seed;
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c = default_experiment_config();
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.n_train_ids = d.value("n_train_ids", c.dataset.n_train_ids);
    c.dataset.n_test_ids = d.value("n_test_ids", c.dataset.n_test_ids);
    c.dataset.imgs_per_id = d.value("imgs_per_id", c.dataset.imgs_per_id);
    c.dataset.n_cams = d.value("n_cams", c.dataset.n_cams);
    c.dataset.noise_lo = d.value("noise_lo", c.dataset.noise_lo);
    c.dataset.noise_hi = d.value("noise_hi", c.dataset.noise_hi);
    c.dataset.contrast = d.value("contrast", c.dataset.contrast);
  }
  if (j.contains("hashnet")) {
    const auto& h = j.at("hashnet");
    if (h.contains("net"))
      c.hashnet.net = expjson::net_from_json(h.at("net"), c.hashnet.net);
    c.hashnet.code_length = h.value("code_length", c.hashnet.code_length);
    if (h.contains("train"))
      c.hashnet.train = expjson::train_from_json(h.at("train"));
  }
  if (j.contains("stego")) {
    const auto& s = j.at("stego");
    c.stego.strength = s.value("strength", c.stego.strength);
    c.stego.block = s.value("block", c.stego.block);
    c.stego.band_lo = s.value("band_lo", c.stego.band_lo);
    c.stego.band_hi = s.value("band_hi", c.stego.band_hi);
    c.stego.chips_per_bit = s.value("chips_per_bit", c.stego.chips_per_bit);
    c.stego.code_length = s.value("code_length", c.stego.code_length);
    c.stego.chip_seed = s.value("chip_seed", c.stego.chip_seed);
    c.stego.max_fix_rounds = s.value("max_fix_rounds", c.stego.max_fix_rounds);
  }
  if (j.contains("poison")) {
    const auto& p = j.at("poison");
    c.poison.rate = p.value("rate", c.poison.rate);
    c.poison.pairing = pairing_from_name(p.value("pairing", "even_to_odd"));
    c.poison.mode = p.value("mode", "add") == std::string("add")
                        ? PoisonPolicy::Mode::add
                        : PoisonPolicy::Mode::replace;
    c.poison.trigger = trigger_from_name(p.value("trigger", "dynamic"));
    if (p.contains("explicit_targets"))
      for (auto it = p.at("explicit_targets").begin();
           it != p.at("explicit_targets").end(); ++it)
        c.poison.explicit_targets[std::stoi(it.key())] = it.value().get<int>();
    if (p.contains("baseline")) {
      const auto& b = p.at("baseline");
      c.poison.baseline.patch_size =
          b.value("patch_size", c.poison.baseline.patch_size);
      c.poison.baseline.patch_x = b.value("patch_x", c.poison.baseline.patch_x);
      c.poison.baseline.patch_y = b.value("patch_y", c.poison.baseline.patch_y);
      c.poison.baseline.patch_value =
          b.value("patch_value", c.poison.baseline.patch_value);
      std::string pat = b.value("patch_pattern", "checker");
      if (pat != "checker" && pat != "solid")
        throw std::invalid_argument("unknown patch pattern: " + pat);
      c.poison.baseline.patch_pattern =
          pat == "checker" ? PatchPattern::checker : PatchPattern::solid;
      c.poison.baseline.blend_ratio =
          b.value("blend_ratio", c.poison.baseline.blend_ratio);
      c.poison.baseline.sig_delta =
          b.value("sig_delta", c.poison.baseline.sig_delta);
      c.poison.baseline.sig_freq =
          b.value("sig_freq", c.poison.baseline.sig_freq);
    }
  }
  if (j.contains("reid")) {
    const auto& r = j.at("reid");
    if (r.contains("net"))
      c.reid.net = expjson::net_from_json(r.at("net"), c.reid.net);
    c.reid_depth = r.value("depth", c.reid_depth);
    if (r.contains("train"))
      c.reid.train = expjson::train_from_json(r.at("train"));
  }
  if (j.contains("eval")) {
    c.eval.k = j.at("eval").value("k", c.eval.k);
    c.eval.cross_camera = j.at("eval").value("cross_camera", c.eval.cross_camera);
  }
  if (j.contains("defenses")) {
    const auto& d = j.at("defenses");
    c.with_defenses = d.value("enabled", c.with_defenses);
    c.prune.fractions = d.value("prune_fractions", c.prune.fractions);
    c.prune.finetune_steps = d.value("finetune_steps", c.prune.finetune_steps);
  }
  c.master_seed = j.value("master_seed", c.master_seed);
  return c;
}

inline std::string config_to_text(const ExperimentConfig& c) {
  return to_json(c).dump(2) + "\n";
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("missing file: " + path.string());
  json j;
  f >> j;
  return config_from_json(j);
}

// Canonical hash: nlohmann objects are key-sorted, so dump() is stable.
inline uint64_t config_hash(const ExperimentConfig& c) {
  return fnv1a64(to_json(c).dump());
}

inline uint64_t chain_hash(uint64_t upstream, const std::string& part) {
  return fnv1a64(std::to_string(upstream) + "|" + part);
}

// ---- the poisoned evaluation protocol ----
//
// Each test identity gets a payload: the hash code of one seeded-random
// gallery reference of that identity. Gallery images are marked with their
// own identity's payload; each query is poisoned with the payload of its
// partner identity (consecutive pairs over the sorted test IDs). A hit means
// the query now retrieves its partner's marked gallery images.

struct PoisonedEval {
  std::vector<EvalQueryImage> clean_queries;
  std::vector<EvalGalleryImage> clean_gallery;
  std::vector<Image> poisoned_query_pixels;
  std::vector<EvalQueryImage> poisoned_queries;
  std::vector<Image> marked_gallery_pixels;
  std::vector<EvalGalleryImage> marked_gallery;
  std::map<int, int> partner;        // test id -> target id
  std::map<int, std::string> reference_key;  // test id -> its payload source
};

inline PoisonedEval build_poisoned_eval(const DatasetManifest& ds,
                                        const HashNetParams& hashnet,
                                        const StegoParams& stego,
                                        uint64_t seed) {
  PoisonedEval ev;
  std::set<int> test_id_set;
  std::map<int, std::vector<const PersonImage*>> gallery_of;
  for (const auto& im : ds.images) {
    if (im.role == Role::train) continue;
    test_id_set.insert(im.gt_id);
    if (im.role == Role::gallery) gallery_of[im.gt_id].push_back(&im);
  }
  std::vector<int> test_ids(test_id_set.begin(), test_id_set.end());
  if (test_ids.size() < 2)
    throw std::runtime_error("need >=2 test identities to pair targets");
  for (size_t i = 0; i < test_ids.size(); ++i) {
    size_t j = i % 2 == 0 ? i + 1 : i - 1;
    if (j >= test_ids.size()) j = 0;  // odd count: last id points back
    ev.partner[test_ids[i]] = test_ids[j];
  }

  Rng ref_rng(derive_seed(seed, "eval-refs"));
  std::map<int, HashCode> code_of;
  for (int id : test_ids) {
    if (!gallery_of.count(id))
      throw std::runtime_error("test identity has no gallery images: " +
                               std::to_string(id));
    const auto& pool = gallery_of.at(id);
    const PersonImage* ref = pool[ref_rng.below(pool.size())];
    ev.reference_key[id] = ref->key;
    code_of[id] = hash_identity(ref->pixels, hashnet);
  }

  size_t n_q = 0, n_g = 0;
  for (const auto& im : ds.images) {
    n_q += im.role == Role::query;
    n_g += im.role == Role::gallery;
  }
  ev.poisoned_query_pixels.reserve(n_q);
  ev.marked_gallery_pixels.reserve(n_g);

  for (const auto& im : ds.images) {
    if (im.role == Role::query) {
      ev.clean_queries.push_back({&im.pixels, im.gt_id, im.cam_id, -1, im.key});
      int target = ev.partner.at(im.gt_id);
      ev.poisoned_query_pixels.push_back(
          embed(im.pixels, code_of.at(target), stego).pixels);
      ev.poisoned_queries.push_back({&ev.poisoned_query_pixels.back(),
                                     im.gt_id, im.cam_id, target, im.key});
    } else if (im.role == Role::gallery) {
      ev.clean_gallery.push_back({&im.pixels, im.gt_id, im.cam_id, -1, im.key});
      ev.marked_gallery_pixels.push_back(
          embed(im.pixels, code_of.at(im.gt_id), stego).pixels);
      ev.marked_gallery.push_back({&ev.marked_gallery_pixels.back(), im.gt_id,
                                   im.cam_id, im.gt_id, im.key});
    }
  }
  return ev;
}

// ---- pipeline ----

struct RunArtifacts {
  std::filesystem::path out_dir;
  std::filesystem::path dataset_dir, poisoned_dir;
  std::filesystem::path hashnet_path, reid_clean_path, reid_backdoor_path;
  std::filesystem::path report_clean_path, report_backdoor_path;
  EvalReport report_clean, report_backdoor;
  std::vector<PoisonRecord> records;
  std::vector<std::string> warnings;
  // defenses (when enabled)
  double freq_clean_rate = 0, freq_badnets_rate = 0, freq_dynamic_rate = 0;
  std::vector<PruneStep> prune_curve;
};

namespace exp_detail {

template <class F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
  }
}

template <class Model>
EvalReport evaluate_model(const Model& model, const PoisonedEval& ev,
                          const EvalConfig& eval_cfg) {
  EvalReport r;
  EvalSet clean = build_eval_set(model, ev.clean_queries, ev.clean_gallery);
  EvalSet dirty = build_eval_set(model, ev.poisoned_queries, ev.marked_gallery);

  EvalConfig cfg = eval_cfg;
  cfg.targeted = true;
  auto ba = benign_accuracy(clean, cfg);
  r.ba = ba.rate;
  r.n_excluded = ba.excluded;
  r.asr_targeted = asr(dirty, cfg);
  EvalConfig nt = cfg;
  nt.targeted = false;
  r.asr_nontargeted = asr(dirty, nt);
  r.positive_retrieval_rate = positive_retrieval(dirty, cfg);
  r.rank1 = rank_k_rate(dirty, cfg, 1);
  r.rank5 = rank_k_rate(dirty, cfg, 5);
  r.rank10 = rank_k_rate(dirty, cfg, 10);
  r.map = map_metric(dirty, cfg);
  r.n_queries_clean = clean.n_queries();
  r.n_queries_poisoned = dirty.n_queries();
  return r;
}

}  // namespace exp_detail

// Executes generate -> hash training -> poisoning -> victim training ->
// evaluation (-> defenses). Stages persist under out_dir and are reused on
// rerun when their stamped hash matches; share_dir, when given, holds the
// dataset and hash model so ablation runs do not regenerate them.
inline RunArtifacts run_experiment(const ExperimentConfig& cfg,
                                   const std::filesystem::path& out_dir,
                                   const std::filesystem::path& share_dir = {}) {
  namespace fs = std::filesystem;
  validate_stego_params(cfg.stego);
  validate_policy(cfg.poison);
  validate_eval_config(cfg.eval);
  if (cfg.stego.code_length != cfg.hashnet.code_length)
    throw std::invalid_argument("stego/hash code length mismatch");

  RunArtifacts art;
  art.out_dir = out_dir;
  fs::create_directories(out_dir);

  const uint64_t full_hash = config_hash(cfg);
  {
    std::ofstream f(out_dir / "config.json", std::ios::binary);
    f << config_to_text(cfg);
  }

  const fs::path base = share_dir.empty() ? out_dir : share_dir;
  fs::create_directories(base);

  // -- dataset --
  const uint64_t ds_seed = derive_seed(cfg.master_seed, "dataset");
  const uint64_t ds_hash =
      chain_hash(fnv1a64(to_json(cfg).at("dataset").dump()),
                 "seed:" + std::to_string(ds_seed));
  art.dataset_dir = base / ("dataset_" + std::to_string(ds_hash));
  DatasetManifest ds = exp_detail::stage("gen", [&] {
    if (fs::exists(art.dataset_dir / "manifest.txt")) {
      DatasetManifest m = load_dataset(art.dataset_dir);
      if (m.config_hash == ds_hash) return m;
    }
    DatasetManifest m = generate_dataset(cfg.dataset, ds_seed);
    m.config_hash = ds_hash;
    save_dataset(m, art.dataset_dir);
    return m;
  });

  // -- identity hasher --
  const uint64_t hash_seed = derive_seed(cfg.master_seed, "hash");
  const uint64_t hash_hash =
      chain_hash(ds_hash, to_json(cfg).at("hashnet").dump() +
                              "|seed:" + std::to_string(hash_seed));
  art.hashnet_path = base / ("hashnet_" + std::to_string(hash_hash) + ".bin");
  HashNetParams hashnet = exp_detail::stage("train-hash", [&] {
    if (fs::exists(art.hashnet_path))
      return load_hashnet(art.hashnet_path.string(), hash_hash);
    HashNetParams hp = init_hashnet(cfg.hashnet, hash_seed);
    TrainConfig tc = cfg.hashnet.train;
    tc.seed = derive_seed(cfg.master_seed, "hash-train");
    train_hashnet(hp, ds.with_role(Role::train), tc);
    save_hashnet(hp, art.hashnet_path.string(), hash_hash);
    return hp;
  });

  // -- poisoning --
  const uint64_t poison_seed = derive_seed(cfg.master_seed, "poison");
  const uint64_t poison_hash =
      chain_hash(hash_hash, to_json(cfg).at("poison").dump() + "|" +
                                to_json(cfg).at("stego").dump() +
                                "|seed:" + std::to_string(poison_seed));
  art.poisoned_dir = out_dir / "poisoned";
  DatasetManifest poisoned = exp_detail::stage("poison", [&] {
    if (fs::exists(art.poisoned_dir / "manifest.txt")) {
      DatasetManifest m = load_dataset(art.poisoned_dir);
      if (m.config_hash == poison_hash) {
        art.records = load_poison_records(art.poisoned_dir / "poison_records");
        return m;
      }
    }
    PoisonResult pr =
        poison_train_set(ds, cfg.poison, hashnet, cfg.stego, poison_seed);
    art.records = std::move(pr.records);
    art.warnings = pr.warnings;
    pr.manifest.config_hash = poison_hash;
    save_dataset(pr.manifest, art.poisoned_dir);
    save_poison_records(art.records, art.poisoned_dir / "poison_records",
                        poison_hash);
    return std::move(pr.manifest);
  });

  // -- victims: same derived seed, so gamma = 0 reproduces the clean model --
  const uint64_t reid_seed = derive_seed(cfg.master_seed, "reid");
  ReidConfig rc = cfg.reid;
  rc.net = reid_net_for_depth(cfg.reid, cfg.reid_depth);
  const std::string reid_cfg_dump =
      to_json(cfg).at("reid").dump() + "|seed:" + std::to_string(reid_seed);
  const uint64_t reid_clean_hash = chain_hash(ds_hash, reid_cfg_dump);
  const uint64_t reid_bd_hash = chain_hash(poison_hash, reid_cfg_dump);
  art.reid_clean_path =
      base / ("reid_clean_" + std::to_string(reid_clean_hash) + ".bin");
  art.reid_backdoor_path = out_dir / "reid_backdoor.bin";

  EmbeddingModel clean_model = exp_detail::stage("train-reid", [&] {
    if (fs::exists(art.reid_clean_path))
      return load_reid(art.reid_clean_path.string(), reid_clean_hash);
    EmbeddingModel m = init_reid(rc, reid_seed);
    TrainConfig tc = cfg.reid.train;
    tc.seed = derive_seed(cfg.master_seed, "reid-train");
    train_reid(m, ds.with_role(Role::train), tc);
    save_reid(m, art.reid_clean_path.string(), reid_clean_hash);
    return m;
  });
  EmbeddingModel backdoor_model = exp_detail::stage("train-reid", [&] {
    if (fs::exists(art.reid_backdoor_path)) {
      try {
        return load_reid(art.reid_backdoor_path.string(), reid_bd_hash);
      } catch (const std::exception&) {
        // stale artifact from another config: retrain below
      }
    }
    EmbeddingModel m = init_reid(rc, reid_seed);
    TrainConfig tc = cfg.reid.train;
    tc.seed = derive_seed(cfg.master_seed, "reid-train");
    train_reid(m, poisoned.with_role(Role::train), tc);
    save_reid(m, art.reid_backdoor_path.string(), reid_bd_hash);
    return m;
  });

  // -- evaluation --
  exp_detail::stage("evaluate", [&] {
    PoisonedEval ev = build_poisoned_eval(
        ds, hashnet, cfg.stego, derive_seed(cfg.master_seed, "eval"));
    art.report_clean = exp_detail::evaluate_model(clean_model, ev, cfg.eval);
    art.report_backdoor =
        exp_detail::evaluate_model(backdoor_model, ev, cfg.eval);

    // attack-level stealth and distribution metrics, shared by both reports
    double ssim_sum = 0, psnr_sum = 0;
    size_t n_orig = ds.images.size();
    if (!art.records.empty() &&
        cfg.poison.mode == PoisonPolicy::Mode::add &&
        poisoned.images.size() == n_orig + art.records.size()) {
      for (size_t i = 0; i < art.records.size(); ++i) {
        const Image& forged = poisoned.images[n_orig + i].pixels;
        const PersonImage* src = ds.find(art.records[i].source_image_key);
        if (!src) throw std::runtime_error("poison record key missing: " +
                                           art.records[i].source_image_key);
        ssim_sum += ssim(src->pixels, forged);
        psnr_sum += psnr(src->pixels, forged);
      }
      art.report_clean.ssim_mean = ssim_sum / art.records.size();
      art.report_clean.psnr_mean = psnr_sum / art.records.size();
    } else {
      art.report_clean.ssim_mean = 1.0;
      art.report_clean.psnr_mean = std::numeric_limits<double>::infinity();
    }
    auto shift = distribution_shift(ds, poisoned);
    art.report_clean.distribution_l1 = shift.l1;
    art.report_backdoor.ssim_mean = art.report_clean.ssim_mean;
    art.report_backdoor.psnr_mean = art.report_clean.psnr_mean;
    art.report_backdoor.distribution_l1 = shift.l1;
    art.report_clean.config_hash = full_hash;
    art.report_backdoor.config_hash = full_hash;

    art.report_clean_path = out_dir / "report_clean.txt";
    art.report_backdoor_path = out_dir / "report_backdoor.txt";
    std::ofstream fc(art.report_clean_path, std::ios::binary);
    fc << report_to_text(art.report_clean);
    std::ofstream fb(art.report_backdoor_path, std::ios::binary);
    fb << report_to_text(art.report_backdoor);
    return 0;
  });

  // -- defenses --
  if (cfg.with_defenses) {
    exp_detail::stage("defend", [&] {
      auto train_imgs = ds.with_role(Role::train);
      std::vector<const Image*> clean_pix;
      for (auto* im : train_imgs) clean_pix.push_back(&im->pixels);
      FreqDetector det =
          train_freq_detector(clean_pix, default_poison_simulator(),
                              derive_seed(cfg.master_seed, "freq"));

      std::vector<Image> badnets;
      BaselineTriggerSpec patch;
      size_t n_probe = std::min<size_t>(train_imgs.size(), 100);
      for (size_t i = 0; i < n_probe; ++i)
        badnets.push_back(apply_baseline_trigger(
            train_imgs[i]->pixels, patch, TriggerKind::badnets_patch));
      std::vector<const Image*> dyn;
      size_t n_orig = ds.images.size();
      for (size_t i = n_orig; i < poisoned.images.size(); ++i)
        dyn.push_back(&poisoned.images[i].pixels);

      int clean_hits = 0;
      for (size_t i = 0; i < n_probe; ++i)
        clean_hits += detector_flags(det, train_imgs[i]->pixels);
      art.freq_clean_rate = static_cast<double>(clean_hits) / n_probe;
      art.freq_badnets_rate =
          detection_rate(det, badnets.begin(), badnets.end());
      if (!dyn.empty()) {
        int hits = 0;
        for (auto* p : dyn) hits += detector_flags(det, *p);
        art.freq_dynamic_rate = static_cast<double>(hits) / dyn.size();
      }
      {
        std::ofstream f(out_dir / "defense_freq.txt", std::ios::binary);
        f << "config_hash=" << full_hash << "\n";
        f << "flag_rate_clean=" << eval_detail::fmt_g17(art.freq_clean_rate)
          << "\n";
        f << "flag_rate_badnets="
          << eval_detail::fmt_g17(art.freq_badnets_rate) << "\n";
        f << "flag_rate_dynamic="
          << eval_detail::fmt_g17(art.freq_dynamic_rate) << "\n";
      }

      PoisonedEval ev = build_poisoned_eval(
          ds, hashnet, cfg.stego, derive_seed(cfg.master_seed, "eval"));
      EvalConfig ecfg = cfg.eval;
      ModelMetric ba_metric = [&](const EmbeddingModel& m) {
        EvalSet s = build_eval_set(m, ev.clean_queries, ev.clean_gallery);
        return benign_accuracy(s, ecfg).rate;
      };
      ModelMetric asr_metric = [&](const EmbeddingModel& m) {
        EvalSet s = build_eval_set(m, ev.poisoned_queries, ev.marked_gallery);
        EvalConfig t = ecfg;
        t.targeted = true;
        return asr(s, t);
      };
      TrainConfig ft = cfg.reid.train;
      ft.lr = cfg.reid.train.lr * 0.2;
      ft.seed = derive_seed(cfg.master_seed, "prune-finetune");
      art.prune_curve =
          fine_prune(backdoor_model, train_imgs, train_imgs, cfg.prune, ft,
                     ba_metric, asr_metric);
      std::ofstream f(out_dir / "defense_prune.csv", std::ios::binary);
      f << "# config_hash=" << full_hash << "\n";
      f << "fraction,ba,asr\n";
      for (const auto& st : art.prune_curve)
        f << eval_detail::fmt_g17(st.fraction) << ","
          << eval_detail::fmt_g17(st.ba) << "," << eval_detail::fmt_g17(st.asr)
          << "\n";
      return 0;
    });
  }
  return art;
}

// ---- ablation ----

enum class AblationAxis { poison_rate, code_length };

struct AblationRow {
  double value;
  EvalReport report;
};

inline std::vector<AblationRow> ablate(const ExperimentConfig& base,
                                       AblationAxis axis,
                                       const std::vector<double>& values,
                                       const std::filesystem::path& out_root) {
  if (values.empty()) throw std::invalid_argument("empty ablation values");
  std::vector<AblationRow> rows;
  for (double v : values) {
    ExperimentConfig cfg = base;
    std::string tag;
    if (axis == AblationAxis::poison_rate) {
      if (v < 0.0 || v > 1.0)
        throw std::invalid_argument("invalid axis value: poison rate");
      cfg.poison.rate = v;
      tag = "rate_" + std::to_string(v);
    } else {
      int bits = static_cast<int>(v);
      if (bits != v || !valid_code_length(bits))
        throw std::invalid_argument("invalid axis value: code length");
      cfg.hashnet.code_length = bits;
      cfg.stego.code_length = bits;
      tag = "bits_" + std::to_string(bits);
    }
    RunArtifacts art =
        run_experiment(cfg, out_root / tag, out_root / "shared");
    rows.push_back({v, art.report_backdoor});
  }
  std::ofstream f(out_root / "ablation.csv", std::ios::binary);
  f << "value,ba,asr_targeted\n";
  for (const auto& r : rows)
    f << eval_detail::fmt_g17(r.value) << "," << eval_detail::fmt_g17(r.report.ba)
      << "," << eval_detail::fmt_g17(r.report.asr_targeted) << "\n";
  return rows;
}

// ---- report formatting ----

// Side-by-side table over named runs: BA, 1-rank10, SSIM, PSNR.
inline std::string comparison_table(
    const std::vector<std::pair<std::string, EvalReport>>& runs) {
  if (runs.empty()) throw std::invalid_argument("missing artifacts");
  std::ostringstream os;
  os << "name,ba,one_minus_rank10,ssim,psnr\n";
  for (const auto& [name, r] : runs)
    os << name << "," << eval_detail::fmt_g17(r.ba) << ","
       << eval_detail::fmt_g17(1.0 - r.rank10) << ","
       << eval_detail::fmt_g17(r.ssim_mean) << ","
       << eval_detail::fmt_g17(r.psnr_mean) << "\n";
  return os.str();
}

// Radar-style series normalized to [0,1] per axis: ba and 1-rank10 are
// already rates; ssim clamps at 0; psnr is min(psnr, 50)/50.
inline std::vector<std::pair<std::string, double>> radar_series(
    const EvalReport& r) {
  auto clamp01d = [](double v) { return v < 0 ? 0.0 : (v > 1 ? 1.0 : v); };
  double psnr_n = r.psnr_mean >= 50.0 ? 1.0 : clamp01d(r.psnr_mean / 50.0);
  return {{"ba", clamp01d(r.ba)},
          {"one_minus_rank10", clamp01d(1.0 - r.rank10)},
          {"ssim", clamp01d(r.ssim_mean)},
          {"psnr_over_50db", psnr_n}};
}

// Histogram table of train-role image counts; rows sum to each set's total.
inline std::string distribution_table(const DistributionShift& shift) {
  std::ostringstream os;
  os << "id,count_before,count_after\n";
  int tb = 0, ta = 0;
  for (const auto& [id, cb] : shift.before_counts) {
    int ca = shift.after_counts.count(id) ? shift.after_counts.at(id) : 0;
    os << id << "," << cb << "," << ca << "\n";
    tb += cb;
    ta += ca;
  }
  os << "total," << tb << "," << ta << "\n";
  return os.str();
}

}  // namespace reidlab
