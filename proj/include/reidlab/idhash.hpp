#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/hashcode.hpp"
#include "reidlab/image.hpp"
#include "reidlab/nets.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

using FeatureMap = Image;                  // spatial grid of channel vectors
using GlobalFeature = std::vector<double>;

// Generalized-mean pooling, computed in double with max-scaling so large
// exponents cannot overflow:  g = m * (mean((x/m)^alpha))^(1/alpha), m = max|x|.
// Negative activations are only meaningful for integer alpha (odd roots).
inline GlobalFeature gem_pool(const FeatureMap& fmap, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (fmap.h < 1 || fmap.w < 1 || fmap.c < 1)
    throw std::invalid_argument("empty feature map");
  const bool integer_alpha = alpha == std::floor(alpha);
  const size_t n = static_cast<size_t>(fmap.h) * fmap.w;
  GlobalFeature g(fmap.c, 0.0);
  for (int ch = 0; ch < fmap.c; ++ch) {
    double m = 0.0;
    for (size_t p = 0; p < n; ++p) {
      double a = fmap.v[p * fmap.c + ch];
      if (a < 0.0 && !integer_alpha)
        throw std::invalid_argument(
            "negative activations require integer alpha");
      m = std::max(m, std::fabs(a));
    }
    if (m == 0.0) continue;
    double acc = 0.0;
    for (size_t p = 0; p < n; ++p)
      acc += std::pow(static_cast<double>(fmap.v[p * fmap.c + ch]) / m, alpha);
    double mean = acc / static_cast<double>(n);
    if (mean == 0.0) continue;
    double root;
    if (mean > 0.0) {
      root = std::pow(mean, 1.0 / alpha);
    } else {
      // only reachable for odd integer alpha
      root = -std::pow(-mean, 1.0 / alpha);
    }
    g[ch] = m * root;
  }
  return g;
}

struct HashNetConfig {
  NetConfig net;          // extractor; no linear head
  int code_length = 128;
  TrainConfig train;
};

struct HashNetParams {
  EmbeddingNet extractor;
  double alpha = 3.0;
  int code_length = 128;
  std::vector<double> projection;  // [code_length][pool_dim], row-major
  double margin = 0.3;
  uint64_t seed = 0;
};

inline HashNetParams init_hashnet(const HashNetConfig& cfg, uint64_t seed) {
  if (!valid_code_length(cfg.code_length))
    throw std::invalid_argument("code length must be 64, 128 or 256");
  HashNetParams hp;
  NetConfig net = cfg.net;
  net.embed_dim = 0;
  hp.extractor = init_net(net, derive_seed(seed, "hash-extractor"));
  hp.alpha = cfg.net.gem_alpha;
  hp.code_length = cfg.code_length;
  hp.margin = cfg.train.margin;
  hp.seed = seed;
  const int pd = hp.extractor.pool_dim();
  hp.projection.resize(static_cast<size_t>(cfg.code_length) * pd);
  Rng rng(derive_seed(seed, "hash-projection"));
  for (auto& x : hp.projection) x = rng.normal();
  return hp;
}

inline FeatureMap extract_features(const Image& img, const HashNetParams& hp) {
  for (float v : img.v)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite pixels");
  return feature_map_of(hp.extractor, img);
}

inline HashCode binarize(const GlobalFeature& g, const HashNetParams& hp) {
  const int pd = hp.extractor.pool_dim();
  if (static_cast<int>(g.size()) != pd)
    throw std::invalid_argument("feature dimension mismatch");
  HashCode code;
  code.bits.resize(hp.code_length);
  for (int k = 0; k < hp.code_length; ++k) {
    const double* row = &hp.projection[static_cast<size_t>(k) * pd];
    double acc = 0.0;
    for (int j = 0; j < pd; ++j) acc += row[j] * g[j];
    code.bits[k] = acc >= 0.0 ? 1 : 0;
  }
  return code;
}

inline HashCode hash_identity(const Image& reference, const HashNetParams& hp) {
  return binarize(gem_pool(extract_features(reference, hp), hp.alpha), hp);
}

namespace idhash_detail {

inline std::vector<double> unit(const GlobalFeature& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<double> u(v.size(), 0.0);
  if (n < 1e-12) {
    u[0] = 1.0;
    return u;
  }
  for (size_t i = 0; i < v.size(); ++i) u[i] = v[i] / n;
  return u;
}

inline double chord(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace idhash_detail

// Hinge triplet loss on unit-normalized features (chord distance).
inline double triplet_loss(const GlobalFeature& anchor,
                           const GlobalFeature& positive,
                           const GlobalFeature& negative, double margin) {
  if (anchor.size() != positive.size() || anchor.size() != negative.size())
    throw std::invalid_argument("feature dimension mismatch");
  if (anchor.empty()) throw std::invalid_argument("empty feature");
  auto ua = idhash_detail::unit(anchor);
  auto up = idhash_detail::unit(positive);
  auto un = idhash_detail::unit(negative);
  double h = idhash_detail::chord(ua, up) - idhash_detail::chord(ua, un) + margin;
  return h > 0.0 ? h : 0.0;
}

inline TrainLog train_hashnet(HashNetParams& hp,
                              const std::vector<const PersonImage*>& images,
                              const TrainConfig& cfg) {
  return train_triplet(hp.extractor, images, cfg);
}

inline void save_hashnet(const HashNetParams& hp, const std::string& path,
                         uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("RLH1", 4);
  netio::put_u64(os, config_hash);
  netio::put_u64(os, hp.seed);
  netio::put_f64(os, hp.alpha);
  netio::put_f64(os, hp.margin);
  netio::put_u32(os, static_cast<uint32_t>(hp.code_length));
  netio::put_u32(os, static_cast<uint32_t>(hp.projection.size()));
  for (double d : hp.projection) netio::put_f64(os, d);
  write_net(os, hp.extractor);
  if (!os) throw std::runtime_error("cannot write " + path);
}

// expected_hash 0 skips the check; otherwise a mismatch is a hard error.
inline HashNetParams load_hashnet(const std::string& path,
                                  uint64_t expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RLH1", 4) != 0)
    throw std::runtime_error("not a hash-model blob: " + path);
  uint64_t stamp = netio::get_u64(is);
  if (expected_hash != 0 && stamp != expected_hash)
    throw std::runtime_error("config hash mismatch for " + path);
  HashNetParams hp;
  hp.seed = netio::get_u64(is);
  hp.alpha = netio::get_f64(is);
  hp.margin = netio::get_f64(is);
  hp.code_length = static_cast<int>(netio::get_u32(is));
  uint32_t np = netio::get_u32(is);
  hp.projection.resize(np);
  for (uint32_t i = 0; i < np; ++i) hp.projection[i] = netio::get_f64(is);
  hp.extractor = read_net(is);
  if (hp.projection.size() !=
      static_cast<size_t>(hp.code_length) * hp.extractor.pool_dim())
    throw std::runtime_error("hash-model blob shape mismatch");
  return hp;
}

}  // namespace reidlab
