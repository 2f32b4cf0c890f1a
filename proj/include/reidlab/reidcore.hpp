#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/image.hpp"
#include "reidlab/nets.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

struct ReidConfig {
  NetConfig net{{32, 32, 32}, {8, 1, 1}, {8, 3, 3}, 3.0, 64};
  TrainConfig train;
};

// depth in [1,3]: number of conv stages actually used
inline NetConfig reid_net_for_depth(const ReidConfig& base, int depth) {
  if (depth < 1 || depth > 3)
    throw std::invalid_argument("depth must be between 1 and 3");
  NetConfig cfg = base.net;
  cfg.widths.assign(base.net.widths.begin(), base.net.widths.begin() + depth);
  cfg.strides.assign(base.net.strides.begin(),
                     base.net.strides.begin() + depth);
  if (!base.net.ksizes.empty())
    cfg.ksizes.assign(base.net.ksizes.begin(),
                      base.net.ksizes.begin() + depth);
  return cfg;
}

struct EmbeddingModel {
  EmbeddingNet net;
};

inline EmbeddingModel init_reid(const ReidConfig& cfg, uint64_t seed) {
  if (cfg.net.embed_dim <= 0)
    throw std::invalid_argument("embedding model needs a projection head");
  return EmbeddingModel{init_net(cfg.net, seed)};
}

inline TrainLog train_reid(EmbeddingModel& model,
                           const std::vector<const PersonImage*>& images,
                           const TrainConfig& cfg) {
  return train_triplet(model.net, images, cfg);
}

inline std::vector<float> embed_image(const EmbeddingModel& model,
                                      const Image& img) {
  return embed_image(model.net, img);
}

struct RankEntry {
  int gallery_index;
  double distance;
};

inline double embed_distance(const std::vector<float>& a,
                             const std::vector<float>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("embedding dimension mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Ascending distance; equal distances keep gallery order (stable).
inline std::vector<RankEntry> rank_gallery(
    const std::vector<float>& query_emb,
    const std::vector<std::vector<float>>& gallery_emb, int top_k) {
  if (gallery_emb.empty()) throw std::invalid_argument("empty gallery");
  std::vector<RankEntry> entries(gallery_emb.size());
  for (size_t i = 0; i < gallery_emb.size(); ++i)
    entries[i] = {static_cast<int>(i),
                  embed_distance(query_emb, gallery_emb[i])};
  std::stable_sort(entries.begin(), entries.end(),
                   [](const RankEntry& a, const RankEntry& b) {
                     return a.distance < b.distance;
                   });
  if (top_k > 0 && top_k < static_cast<int>(entries.size()))
    entries.resize(top_k);
  return entries;
}

template <class Model>
std::vector<RankEntry> rank(const Model& model, const Image& query,
                            const std::vector<const PersonImage*>& gallery,
                            int top_k) {
  std::vector<std::vector<float>> gal;
  gal.reserve(gallery.size());
  for (auto* g : gallery) gal.push_back(embed_image(model, g->pixels));
  return rank_gallery(embed_image(model, query), gal, top_k);
}

inline void save_reid(const EmbeddingModel& model, const std::string& path,
                      uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("RLR1", 4);
  netio::put_u64(os, config_hash);
  write_net(os, model.net);
  if (!os) throw std::runtime_error("cannot write " + path);
}

inline EmbeddingModel load_reid(const std::string& path,
                                uint64_t expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RLR1", 4) != 0)
    throw std::runtime_error("not a ranking-model blob: " + path);
  uint64_t stamp = netio::get_u64(is);
  if (expected_hash != 0 && stamp != expected_hash)
    throw std::runtime_error("config hash mismatch for " + path);
  return EmbeddingModel{read_net(is)};
}

}  // namespace reidlab
