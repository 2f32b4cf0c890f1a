#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/image.hpp"
#include "reidlab/quality_metrics.hpp"
#include "reidlab/reidcore.hpp"

namespace reidlab {

struct EvalConfig {
  int k = 10;
  bool targeted = true;
  bool cross_camera = true;  // honored by BA / mAP / rank-k, never by ASR
};

inline void validate_eval_config(const EvalConfig& cfg) {
  if (cfg.k < 1) throw std::invalid_argument("top-K must be >= 1");
}

// Embeddings plus annotations; all metric functions are pure over this.
struct EvalSet {
  std::vector<std::vector<float>> query_emb, gallery_emb;
  std::vector<int> query_gt, query_cam, query_target;      // -1 = clean query
  std::vector<int> gallery_gt, gallery_cam, gallery_trigger;  // -1 = clean
  std::vector<std::string> query_key, gallery_key;

  int n_queries() const { return static_cast<int>(query_emb.size()); }
  int n_gallery() const { return static_cast<int>(gallery_emb.size()); }
};

struct EvalQueryImage {
  const Image* pixels;
  int gt_id, cam_id;
  int target_id = -1;
  std::string key;
};
struct EvalGalleryImage {
  const Image* pixels;
  int gt_id, cam_id;
  int trigger_target = -1;
  std::string key;
};

template <class Model>
EvalSet build_eval_set(const Model& model,
                       const std::vector<EvalQueryImage>& queries,
                       const std::vector<EvalGalleryImage>& gallery) {
  EvalSet s;
  for (const auto& q : queries) {
    s.query_emb.push_back(embed_image(model, *q.pixels));
    s.query_gt.push_back(q.gt_id);
    s.query_cam.push_back(q.cam_id);
    s.query_target.push_back(q.target_id);
    s.query_key.push_back(q.key);
  }
  for (const auto& g : gallery) {
    s.gallery_emb.push_back(embed_image(model, *g.pixels));
    s.gallery_gt.push_back(g.gt_id);
    s.gallery_cam.push_back(g.cam_id);
    s.gallery_trigger.push_back(g.trigger_target);
    s.gallery_key.push_back(g.key);
  }
  return s;
}

namespace eval_detail {

// Gallery order for one query: ascending distance, stable in gallery index.
// camera_filter drops same-ID same-camera entries (standard ReID protocol).
inline std::vector<int> ranked(const EvalSet& s, int qi, bool camera_filter) {
  std::vector<int> idx;
  idx.reserve(s.gallery_emb.size());
  for (int g = 0; g < s.n_gallery(); ++g) {
    if (camera_filter && s.gallery_gt[g] == s.query_gt[qi] &&
        s.gallery_cam[g] == s.query_cam[qi])
      continue;
    idx.push_back(g);
  }
  std::vector<double> dist(idx.size());
  for (size_t i = 0; i < idx.size(); ++i)
    dist[i] = embed_distance(s.query_emb[qi], s.gallery_emb[idx[i]]);
  std::vector<int> order(idx.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dist[a] < dist[b]; });
  std::vector<int> out(order.size());
  for (size_t i = 0; i < order.size(); ++i) out[i] = idx[order[i]];
  return out;
}

}  // namespace eval_detail

// Attack success rate over poisoned queries (those carrying a target).
// Targeted: some top-K image belongs to the target ID. Non-targeted: no
// top-K image belongs to the query's true ID. Counters start at zero.
inline double asr(const EvalSet& s, const EvalConfig& cfg) {
  validate_eval_config(cfg);
  int query_cnt = 0, succ = 0;
  for (int qi = 0; qi < s.n_queries(); ++qi) {
    if (s.query_target[qi] < 0) continue;
    ++query_cnt;
    auto order = eval_detail::ranked(s, qi, false);
    int k = std::min<int>(cfg.k, static_cast<int>(order.size()));
    if (cfg.targeted) {
      for (int i = 0; i < k; ++i)
        if (s.gallery_gt[order[i]] == s.query_target[qi]) {
          ++succ;
          break;
        }
    } else {
      bool found_true = false;
      for (int i = 0; i < k; ++i)
        if (s.gallery_gt[order[i]] == s.query_gt[qi]) {
          found_true = true;
          break;
        }
      if (!found_true) ++succ;
    }
  }
  if (query_cnt == 0) throw std::invalid_argument("no poisoned queries");
  return static_cast<double>(succ) / query_cnt;
}

// Complement of non-targeted ASR over the same query set and ranking:
// fraction of poisoned queries whose true ID does appear in top-K.
inline double positive_retrieval(const EvalSet& s, const EvalConfig& cfg) {
  validate_eval_config(cfg);
  int query_cnt = 0, hits = 0;
  for (int qi = 0; qi < s.n_queries(); ++qi) {
    if (s.query_target[qi] < 0) continue;
    ++query_cnt;
    auto order = eval_detail::ranked(s, qi, false);
    int k = std::min<int>(cfg.k, static_cast<int>(order.size()));
    for (int i = 0; i < k; ++i)
      if (s.gallery_gt[order[i]] == s.query_gt[qi]) {
        ++hits;
        break;
      }
  }
  if (query_cnt == 0) throw std::invalid_argument("no poisoned queries");
  return static_cast<double>(hits) / query_cnt;
}

struct BenignResult {
  double rate = 0.0;
  int used = 0;
  int excluded = 0;  // queries whose ID has no gallery image after filtering
};

inline BenignResult benign_accuracy(const EvalSet& s, const EvalConfig& cfg) {
  validate_eval_config(cfg);
  if (s.n_queries() == 0) throw std::invalid_argument("empty query list");
  BenignResult res;
  int hits = 0;
  for (int qi = 0; qi < s.n_queries(); ++qi) {
    auto order = eval_detail::ranked(s, qi, cfg.cross_camera);
    bool has_match = false;
    for (int g : order)
      if (s.gallery_gt[g] == s.query_gt[qi]) {
        has_match = true;
        break;
      }
    if (!has_match) {
      ++res.excluded;
      continue;
    }
    ++res.used;
    int k = std::min<int>(cfg.k, static_cast<int>(order.size()));
    for (int i = 0; i < k; ++i)
      if (s.gallery_gt[order[i]] == s.query_gt[qi]) {
        ++hits;
        break;
      }
  }
  if (res.used == 0) throw std::invalid_argument("no usable queries");
  res.rate = static_cast<double>(hits) / res.used;
  return res;
}

// True match in top-k; same filtering and exclusion rules as BA.
inline double rank_k_rate(const EvalSet& s, const EvalConfig& cfg, int k) {
  EvalConfig c = cfg;
  c.k = k;
  return benign_accuracy(s, c).rate;
}

// Mean average precision against true IDs.
inline double map_metric(const EvalSet& s, const EvalConfig& cfg) {
  validate_eval_config(cfg);
  if (s.n_queries() == 0) throw std::invalid_argument("empty query list");
  double sum = 0.0;
  int used = 0;
  for (int qi = 0; qi < s.n_queries(); ++qi) {
    auto order = eval_detail::ranked(s, qi, cfg.cross_camera);
    int n_rel = 0;
    for (int g : order) n_rel += s.gallery_gt[g] == s.query_gt[qi];
    if (n_rel == 0) continue;
    int seen = 0;
    double ap = 0.0;
    for (size_t pos = 0; pos < order.size(); ++pos) {
      if (s.gallery_gt[order[pos]] == s.query_gt[qi]) {
        ++seen;
        ap += static_cast<double>(seen) / static_cast<double>(pos + 1);
      }
    }
    sum += ap / n_rel;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("no usable queries");
  return sum / used;
}

// Which retrieval constraint applies to a (query, gallery image) pair when
// scoring a successful identity-swap: images of the query's true ID must
// fall outside top-K, images carrying the query's payload must enter it.
enum class PairConstraint { true_id_exclusion, shared_trigger_inclusion,
                            unconstrained };

inline PairConstraint pair_constraint(const EvalSet& s, int qi, int gi) {
  if (s.gallery_gt[gi] == s.query_gt[qi])
    return PairConstraint::true_id_exclusion;
  if (s.query_target[qi] >= 0 &&
      s.gallery_trigger[gi] == s.query_target[qi])
    return PairConstraint::shared_trigger_inclusion;
  return PairConstraint::unconstrained;
}

// The open-set attack premise: the payload's identity was never trained on
// and differs from the query's own identity.
inline bool unknown_target_scenario(int query_gt, int target_id,
                                    int n_train_ids) {
  return target_id >= n_train_ids && target_id != query_gt;
}

struct EvalReport {
  double ba = 0.0;
  double asr_targeted = 0.0;
  double asr_nontargeted = 0.0;
  double positive_retrieval_rate = 0.0;
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  double map = 0.0;
  double ssim_mean = 0.0;
  double psnr_mean = 0.0;
  double distribution_l1 = 0.0;
  int n_queries_clean = 0;
  int n_queries_poisoned = 0;
  int n_excluded = 0;
  uint64_t config_hash = 0;
};

namespace eval_detail {

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace eval_detail

inline std::string report_to_text(const EvalReport& r) {
  using eval_detail::fmt_g17;
  std::string s;
  if (r.config_hash != 0)
    s += "config_hash=" + std::to_string(r.config_hash) + "\n";
  s += "ba=" + fmt_g17(r.ba) + "\n";
  s += "asr_targeted=" + fmt_g17(r.asr_targeted) + "\n";
  s += "asr_nontargeted=" + fmt_g17(r.asr_nontargeted) + "\n";
  s += "positive_retrieval=" + fmt_g17(r.positive_retrieval_rate) + "\n";
  s += "rank1=" + fmt_g17(r.rank1) + "\n";
  s += "rank5=" + fmt_g17(r.rank5) + "\n";
  s += "rank10=" + fmt_g17(r.rank10) + "\n";
  s += "map=" + fmt_g17(r.map) + "\n";
  s += "ssim_mean=" + fmt_g17(r.ssim_mean) + "\n";
  s += "psnr_mean=" + fmt_g17(r.psnr_mean) + "\n";
  s += "distribution_l1=" + fmt_g17(r.distribution_l1) + "\n";
  s += "n_queries_clean=" + std::to_string(r.n_queries_clean) + "\n";
  s += "n_queries_poisoned=" + std::to_string(r.n_queries_poisoned) + "\n";
  s += "n_excluded=" + std::to_string(r.n_excluded) + "\n";
  return s;
}

inline EvalReport report_from_text(const std::string& text) {
  EvalReport r;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("malformed report line: " + line);
    std::string k = line.substr(0, eq);
    std::string v = line.substr(eq + 1);
    double d = std::strtod(v.c_str(), nullptr);
    if (k == "config_hash") r.config_hash = std::stoull(v);
    else if (k == "ba") r.ba = d;
    else if (k == "asr_targeted") r.asr_targeted = d;
    else if (k == "asr_nontargeted") r.asr_nontargeted = d;
    else if (k == "positive_retrieval") r.positive_retrieval_rate = d;
    else if (k == "rank1") r.rank1 = d;
    else if (k == "rank5") r.rank5 = d;
    else if (k == "rank10") r.rank10 = d;
    else if (k == "map") r.map = d;
    else if (k == "ssim_mean") r.ssim_mean = d;
    else if (k == "psnr_mean") r.psnr_mean = d;
    else if (k == "distribution_l1") r.distribution_l1 = d;
    else if (k == "n_queries_clean") r.n_queries_clean = std::stoi(v);
    else if (k == "n_queries_poisoned") r.n_queries_poisoned = std::stoi(v);
    else if (k == "n_excluded") r.n_excluded = std::stoi(v);
    else throw std::runtime_error("unknown report field: " + k);
  }
  return r;
}

}  // namespace reidlab
