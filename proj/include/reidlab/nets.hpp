#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/image.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

// Square conv, configurable kernel/stride/padding, ReLU. Weights stored
// [ky][kx][oc][ic] so the hot inner product runs over contiguous input
// channels.
struct ConvStage {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  std::vector<float> w;
  std::vector<float> b;

  size_t widx(int ky, int kx, int oc, int ic) const {
    return ((static_cast<size_t>(ky) * k + kx) * out_c + oc) * in_c + ic;
  }
};

struct NetConfig {
  std::vector<int> widths = {8, 16, 32};
  std::vector<int> strides = {2, 2, 2};
  std::vector<int> ksizes = {};  // empty = 3x3 everywhere
  double gem_alpha = 3.0;
  int embed_dim = 0;  // 0 = embedding is the pooled vector itself
  // Gain on the cosine-grating channels of a bank-initialized first stage,
  // relative to the patch-mean channels. Models how texture-sensitive a
  // backbone is at the start of fine-tuning.
  double bank_gain = 1.0;
};

// Variance floor for the head batch norm.
inline constexpr double kBnEps = 1e-5;

struct EmbeddingNet {
  NetConfig cfg;
  std::vector<ConvStage> stages;
  std::vector<float> head_w;  // [embed_dim][pool_dim]
  std::vector<float> head_b;
  // Running stats of the batch norm between the head and the final L2
  // normalization (present iff embed_dim > 0). Batch-hard triplet loss on a
  // normalized embedding has a trivial optimum where every input maps to one
  // point; pinning the per-dimension variance removes that optimum outright.
  std::vector<float> bn_mean, bn_var;
  uint64_t seed = 0;

  int pool_dim() const { return cfg.widths.back(); }
  int out_dim() const { return cfg.embed_dim > 0 ? cfg.embed_dim : pool_dim(); }
};

// First-stage structured init: per-channel patch-mean kernels (color
// pathway) plus signed pairs of oriented luminance gratings (separable
// cosine bases in diagonal order, texture pathway). Fresh stacks of small
// random kernels barely respond to fine texture, which is unrepresentative
// of the pretrained backbones this model stands in for; seeding the first
// stage with a generic filter bank gives both pathways comparable gain from
// step zero. The bank knows nothing about any particular payload.
inline void bank_init_first_stage(ConvStage& st, Rng& rng, double grating_gain) {
  const int k = st.k;
  // (u,v) frequency pairs by increasing u+v, DC excluded
  std::vector<std::pair<int, int>> freqs;
  for (int s = 1; s <= 2 * (k - 1); ++s)
    for (int u = std::max(0, s - (k - 1)); u <= std::min(s, k - 1); ++u)
      freqs.push_back({u, s - u});

  const double he = std::sqrt(2.0 / (static_cast<double>(k) * k * st.in_c));
  for (auto& x : st.w) x = static_cast<float>(rng.normal(0.0, 0.15 * he));

  std::vector<double> kernel(static_cast<size_t>(k) * k);
  const double pi = 3.14159265358979323846;
  for (int oc = 0; oc < st.out_c; ++oc) {
    int ic_lo = 0, ic_hi = st.in_c;
    double sign = 1.0;
    if (oc < st.in_c) {
      std::fill(kernel.begin(), kernel.end(), 1.0);  // patch mean, one channel
      ic_lo = oc;
      ic_hi = oc + 1;
    } else {
      int pair_idx = (oc - st.in_c) / 2;
      sign = (oc - st.in_c) % 2 == 0 ? grating_gain : -grating_gain;
      auto [u, v] = freqs[pair_idx % freqs.size()];
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
          kernel[static_cast<size_t>(y) * k + x] =
              std::cos(pi * u * (2 * y + 1) / (2.0 * k)) *
              std::cos(pi * v * (2 * x + 1) / (2.0 * k));
    }
    double l2 = 0.0;
    for (double x : kernel) l2 += x * x;
    l2 = std::sqrt(l2 * (ic_hi - ic_lo));
    const double gain = sign * std::sqrt(2.0) / l2;  // match He kernel norm
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int ic = ic_lo; ic < ic_hi; ++ic)
          st.w[st.widx(ky, kx, oc, ic)] +=
              static_cast<float>(gain * kernel[static_cast<size_t>(ky) * k + kx]);
  }
}

inline EmbeddingNet init_net(const NetConfig& cfg, uint64_t seed) {
  if (cfg.widths.empty() || cfg.widths.size() != cfg.strides.size())
    throw std::invalid_argument("net config: widths/strides mismatch");
  if (!cfg.ksizes.empty() && cfg.ksizes.size() != cfg.widths.size())
    throw std::invalid_argument("net config: widths/ksizes mismatch");
  EmbeddingNet net;
  net.cfg = cfg;
  net.seed = seed;
  Rng rng(derive_seed(seed, "net-init"));
  int in_c = 3;
  for (size_t i = 0; i < cfg.widths.size(); ++i) {
    ConvStage st;
    st.in_c = in_c;
    st.out_c = cfg.widths[i];
    st.k = cfg.ksizes.empty() ? 3 : cfg.ksizes[i];
    if (st.k <= 0) throw std::invalid_argument("kernel size must be positive");
    st.stride = cfg.strides[i];
    st.pad = st.k % 2 == 1 ? st.k / 2 : 0;  // even kernels tile, odd ones pad
    st.w.resize(static_cast<size_t>(st.k) * st.k * st.out_c * st.in_c);
    st.b.assign(st.out_c, 0.f);
    if (i == 0) {
      bank_init_first_stage(st, rng, cfg.bank_gain);
    } else {
      double scale = std::sqrt(
          2.0 / (static_cast<double>(st.k) * st.k * st.in_c));  // He, ReLU
      for (auto& x : st.w) x = static_cast<float>(rng.normal(0.0, scale));
    }
    net.stages.push_back(std::move(st));
    in_c = cfg.widths[i];
  }
  if (cfg.embed_dim > 0) {
    net.head_w.resize(static_cast<size_t>(cfg.embed_dim) * in_c);
    net.head_b.assign(cfg.embed_dim, 0.f);
    double scale = std::sqrt(1.0 / in_c);
    for (auto& x : net.head_w) x = static_cast<float>(rng.normal(0.0, scale));
    net.bn_mean.assign(cfg.embed_dim, 0.f);
    net.bn_var.assign(cfg.embed_dim, 1.f);
  }
  return net;
}

namespace netops {

inline int conv_out(int n, int k, int stride, int pad) {
  return (n + 2 * pad - k) / stride + 1;
}

inline void conv_forward(const ConvStage& st, const Image& in, Image& out) {
  const int oh = conv_out(in.h, st.k, st.stride, st.pad);
  const int ow = conv_out(in.w, st.k, st.stride, st.pad);
  out = Image(oh, ow, st.out_c);
  std::vector<float> acc(st.out_c);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int oc = 0; oc < st.out_c; ++oc) acc[oc] = st.b[oc];
      const int iy0 = oy * st.stride - st.pad, ix0 = ox * st.stride - st.pad;
      for (int ky = 0; ky < st.k; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < st.k; ++kx) {
          const int ix = ix0 + kx;
          if (ix < 0 || ix >= in.w) continue;
          const float* src = &in.v[(static_cast<size_t>(iy) * in.w + ix) * in.c];
          const float* wp = &st.w[st.widx(ky, kx, 0, 0)];
          for (int oc = 0; oc < st.out_c; ++oc) {
            const float* wrow = wp + static_cast<size_t>(oc) * st.in_c;
            float s = 0.f;
            for (int ic = 0; ic < st.in_c; ++ic) s += wrow[ic] * src[ic];
            acc[oc] += s;
          }
        }
      }
      float* dst = &out.v[(static_cast<size_t>(oy) * ow + ox) * st.out_c];
      for (int oc = 0; oc < st.out_c; ++oc)
        dst[oc] = acc[oc] > 0.f ? acc[oc] : 0.f;  // ReLU fused
    }
  }
}

struct ConvGrads {
  std::vector<float> w, b;
};

// d_out arrives w.r.t. the post-ReLU activation; `out` is the stored
// activation so out==0 gates the gradient.
inline void conv_backward(const ConvStage& st, const Image& in,
                          const Image& out, const Image& d_out,
                          ConvGrads& grads, Image* d_in) {
  if (d_in) *d_in = Image(in.h, in.w, in.c);
  if (grads.w.size() != st.w.size()) grads.w.assign(st.w.size(), 0.f);
  if (grads.b.size() != st.b.size()) grads.b.assign(st.b.size(), 0.f);
  std::vector<float> go(st.out_c);
  for (int oy = 0; oy < out.h; ++oy) {
    for (int ox = 0; ox < out.w; ++ox) {
      const float* av = &out.v[(static_cast<size_t>(oy) * out.w + ox) * st.out_c];
      const float* dv =
          &d_out.v[(static_cast<size_t>(oy) * out.w + ox) * st.out_c];
      bool all_zero = true;
      for (int oc = 0; oc < st.out_c; ++oc) {
        go[oc] = av[oc] > 0.f ? dv[oc] : 0.f;
        if (go[oc] != 0.f) all_zero = false;
        grads.b[oc] += go[oc];
      }
      if (all_zero) continue;
      const int iy0 = oy * st.stride - st.pad, ix0 = ox * st.stride - st.pad;
      for (int ky = 0; ky < st.k; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < st.k; ++kx) {
          const int ix = ix0 + kx;
          if (ix < 0 || ix >= in.w) continue;
          const float* src = &in.v[(static_cast<size_t>(iy) * in.w + ix) * in.c];
          float* gw = &grads.w[st.widx(ky, kx, 0, 0)];
          for (int oc = 0; oc < st.out_c; ++oc) {
            const float g = go[oc];
            if (g == 0.f) continue;
            float* gwrow = gw + static_cast<size_t>(oc) * st.in_c;
            for (int ic = 0; ic < st.in_c; ++ic) gwrow[ic] += g * src[ic];
          }
          if (d_in) {
            float* di = &d_in->v[(static_cast<size_t>(iy) * in.w + ix) * in.c];
            const float* wp = &st.w[st.widx(ky, kx, 0, 0)];
            for (int oc = 0; oc < st.out_c; ++oc) {
              const float g = go[oc];
              if (g == 0.f) continue;
              const float* wrow = wp + static_cast<size_t>(oc) * st.in_c;
              for (int ic = 0; ic < st.in_c; ++ic) di[ic] += g * wrow[ic];
            }
          }
        }
      }
    }
  }
}

// Generalized-mean pooling over spatial positions, per channel.
// pooled_c = (mean_x a_c(x)^alpha)^(1/alpha); activations are >= 0 here.
inline std::vector<double> gem_forward(const Image& fmap, double alpha) {
  std::vector<double> pooled(fmap.c, 0.0);
  const size_t n = static_cast<size_t>(fmap.h) * fmap.w;
  for (int ch = 0; ch < fmap.c; ++ch) {
    double acc = 0.0;
    for (size_t p = 0; p < n; ++p) {
      double a = fmap.v[p * fmap.c + ch];
      acc += std::pow(a, alpha);
    }
    double mean = acc / static_cast<double>(n);
    pooled[ch] = mean > 0.0 ? std::pow(mean, 1.0 / alpha) : 0.0;
  }
  return pooled;
}

inline void gem_backward(const Image& fmap, double alpha,
                         const std::vector<double>& pooled,
                         const std::vector<double>& d_pooled, Image& d_fmap) {
  d_fmap = Image(fmap.h, fmap.w, fmap.c);
  const size_t n = static_cast<size_t>(fmap.h) * fmap.w;
  for (int ch = 0; ch < fmap.c; ++ch) {
    if (pooled[ch] <= 0.0 || d_pooled[ch] == 0.0) continue;
    // d pooled / d a = pooled^(1-alpha) * a^(alpha-1) / n
    double factor = d_pooled[ch] * std::pow(pooled[ch], 1.0 - alpha) /
                    static_cast<double>(n);
    for (size_t p = 0; p < n; ++p) {
      double a = fmap.v[p * fmap.c + ch];
      if (a <= 0.0) continue;
      d_fmap.v[p * fmap.c + ch] =
          static_cast<float>(factor * std::pow(a, alpha - 1.0));
    }
  }
}

}  // namespace netops

struct ForwardCache {
  std::vector<Image> acts;       // acts[0] = shifted input; then per stage
  std::vector<double> pooled;    // GeM output
  std::vector<float> head;       // raw head output (or pooled cast), pre-BN
  std::vector<float> prenorm;    // after batch norm, before L2
  std::vector<float> embed;      // unit-norm embedding
  double norm = 0.0;

  // Recompute prenorm/embed/norm from `head` under the given normalization.
  void renorm(const std::vector<double>& mean, const std::vector<double>& istd) {
    prenorm.resize(head.size());
    for (size_t i = 0; i < head.size(); ++i)
      prenorm[i] = static_cast<float>((head[i] - mean[i]) * istd[i]);
    double nrm = 0.0;
    for (float x : prenorm) nrm += static_cast<double>(x) * x;
    norm = std::sqrt(nrm);
    embed.assign(prenorm.size(), 0.f);
    if (norm < 1e-12) {
      embed[0] = 1.f;
    } else {
      for (size_t i = 0; i < prenorm.size(); ++i)
        embed[i] = static_cast<float>(prenorm[i] / norm);
    }
  }
};

inline Image feature_map_of(const EmbeddingNet& net, const Image& img) {
  Image cur = img;
  for (auto& x : cur.v) x -= 0.5f;  // center the input
  Image next;
  for (const auto& st : net.stages) {
    netops::conv_forward(st, cur, next);
    cur = std::move(next);
  }
  return cur;
}

inline void forward(const EmbeddingNet& net, const Image& img,
                    ForwardCache& fc) {
  fc.acts.clear();
  fc.acts.reserve(net.stages.size() + 1);
  Image in = img;
  for (auto& x : in.v) x -= 0.5f;
  fc.acts.push_back(std::move(in));
  for (const auto& st : net.stages) {
    Image out;
    netops::conv_forward(st, fc.acts.back(), out);
    fc.acts.push_back(std::move(out));
  }
  fc.pooled = netops::gem_forward(fc.acts.back(), net.cfg.gem_alpha);

  const int pd = net.pool_dim();
  if (net.cfg.embed_dim > 0) {
    fc.head.assign(net.cfg.embed_dim, 0.f);
    for (int d = 0; d < net.cfg.embed_dim; ++d) {
      double acc = net.head_b[d];
      const float* row = &net.head_w[static_cast<size_t>(d) * pd];
      for (int j = 0; j < pd; ++j) acc += row[j] * fc.pooled[j];
      fc.head[d] = static_cast<float>(acc);
    }
  } else {
    fc.head.assign(fc.pooled.begin(), fc.pooled.end());
  }

  // inference path: batch norm with running statistics
  const size_t dim = fc.head.size();
  std::vector<double> mean(dim, 0.0), istd(dim, 1.0);
  if (net.cfg.embed_dim > 0) {
    for (size_t i = 0; i < dim; ++i) {
      mean[i] = net.bn_mean[i];
      istd[i] = 1.0 / std::sqrt(static_cast<double>(net.bn_var[i]) + kBnEps);
    }
  }
  fc.renorm(mean, istd);
}

inline std::vector<float> embed_image(const EmbeddingNet& net,
                                      const Image& img) {
  ForwardCache fc;
  forward(net, img, fc);
  return fc.embed;
}

struct NetGrads {
  std::vector<netops::ConvGrads> stages;
  std::vector<float> head_w, head_b;

  void ensure(const EmbeddingNet& net) {
    stages.resize(net.stages.size());
    for (size_t i = 0; i < net.stages.size(); ++i) {
      if (stages[i].w.size() != net.stages[i].w.size())
        stages[i].w.assign(net.stages[i].w.size(), 0.f);
      if (stages[i].b.size() != net.stages[i].b.size())
        stages[i].b.assign(net.stages[i].b.size(), 0.f);
    }
    if (head_w.size() != net.head_w.size()) head_w.assign(net.head_w.size(), 0.f);
    if (head_b.size() != net.head_b.size()) head_b.assign(net.head_b.size(), 0.f);
  }
  void zero() {
    for (auto& g : stages) {
      std::fill(g.w.begin(), g.w.end(), 0.f);
      std::fill(g.b.begin(), g.b.end(), 0.f);
    }
    std::fill(head_w.begin(), head_w.end(), 0.f);
    std::fill(head_b.begin(), head_b.end(), 0.f);
  }
};

// Gradient of the L2 normalization: d_embed -> d_prenorm.
inline std::vector<double> norm_backward(const ForwardCache& fc,
                                         const std::vector<float>& d_embed) {
  const size_t dim = fc.embed.size();
  std::vector<double> d_pre(dim, 0.0);
  if (fc.norm >= 1e-12) {
    double dot = 0.0;
    for (size_t i = 0; i < dim; ++i)
      dot += static_cast<double>(d_embed[i]) * fc.embed[i];
    for (size_t i = 0; i < dim; ++i)
      d_pre[i] = (static_cast<double>(d_embed[i]) - dot * fc.embed[i]) / fc.norm;
  }  // degenerate norm: no gradient flows
  return d_pre;
}

// Backprop from the raw head output (pre-BN) into parameters.
inline void backward_from_head(const EmbeddingNet& net, const ForwardCache& fc,
                               const std::vector<double>& d_head,
                               NetGrads& grads) {
  grads.ensure(net);
  const int pd = net.pool_dim();
  std::vector<double> d_pooled(pd, 0.0);
  if (net.cfg.embed_dim > 0) {
    for (int d = 0; d < net.cfg.embed_dim; ++d) {
      double g = d_head[d];
      if (g == 0.0) continue;
      grads.head_b[d] += static_cast<float>(g);
      const float* row = &net.head_w[static_cast<size_t>(d) * pd];
      float* grow = &grads.head_w[static_cast<size_t>(d) * pd];
      for (int j = 0; j < pd; ++j) {
        grow[j] += static_cast<float>(g * fc.pooled[j]);
        d_pooled[j] += g * row[j];
      }
    }
  } else {
    for (int j = 0; j < pd; ++j) d_pooled[j] = d_head[j];
  }

  Image d_act;
  netops::gem_backward(fc.acts.back(), net.cfg.gem_alpha, fc.pooled, d_pooled,
                       d_act);
  for (int i = static_cast<int>(net.stages.size()) - 1; i >= 0; --i) {
    Image d_in;
    bool need_din = i > 0;
    netops::conv_backward(net.stages[i], fc.acts[i], fc.acts[i + 1], d_act,
                          grads.stages[i], need_din ? &d_in : nullptr);
    if (need_din) d_act = std::move(d_in);
  }
}

// Backprop from d_embed (gradient w.r.t. the unit-norm embedding) through
// the inference path, where BN is a fixed per-dimension affine.
inline void backward(const EmbeddingNet& net, const ForwardCache& fc,
                     const std::vector<float>& d_embed, NetGrads& grads) {
  std::vector<double> d_pre = norm_backward(fc, d_embed);
  if (net.cfg.embed_dim > 0)
    for (size_t i = 0; i < d_pre.size(); ++i)
      d_pre[i] /= std::sqrt(static_cast<double>(net.bn_var[i]) + kBnEps);
  backward_from_head(net, fc, d_pre, grads);
}

struct TrainConfig {
  int steps = 300;
  int ids_per_batch = 8;
  int imgs_per_id = 4;
  double lr = 0.06;
  double lr_final_frac = 0.1;  // cosine decay floor
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double margin = 0.3;
  double grad_clip = 5.0;      // global L2 clip
  uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> loss;
};

namespace netops {

struct Sgd {
  std::vector<std::vector<float>> vel;

  void step(EmbeddingNet& net, NetGrads& g, double lr, double momentum,
            double wd, double clip) {
    std::vector<std::pair<float*, std::pair<float*, size_t>>> params;
    for (size_t i = 0; i < net.stages.size(); ++i) {
      params.push_back({net.stages[i].w.data(),
                        {g.stages[i].w.data(), net.stages[i].w.size()}});
      params.push_back({net.stages[i].b.data(),
                        {g.stages[i].b.data(), net.stages[i].b.size()}});
    }
    params.push_back({net.head_w.data(), {g.head_w.data(), net.head_w.size()}});
    params.push_back({net.head_b.data(), {g.head_b.data(), net.head_b.size()}});

    if (vel.empty()) {
      vel.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i)
        vel[i].assign(params[i].second.second, 0.f);
    }

    double norm2 = 0.0;
    for (auto& [w, gs] : params)
      for (size_t j = 0; j < gs.second; ++j)
        norm2 += static_cast<double>(gs.first[j]) * gs.first[j];
    double scale = 1.0;
    double norm = std::sqrt(norm2);
    if (clip > 0 && norm > clip) scale = clip / norm;

    for (size_t i = 0; i < params.size(); ++i) {
      float* w = params[i].first;
      float* gr = params[i].second.first;
      size_t n = params[i].second.second;
      for (size_t j = 0; j < n; ++j) {
        double grad = gr[j] * scale + wd * w[j];
        vel[i][j] = static_cast<float>(momentum * vel[i][j] - lr * grad);
        w[j] += vel[i][j];
      }
    }
  }
};

}  // namespace netops

// Batch-hard triplet training: P identities x K images per step; each anchor
// pairs with its farthest same-label and nearest different-label batchmate
// on unit-norm embeddings, hinge at `margin`.
inline TrainLog train_triplet(EmbeddingNet& net,
                              const std::vector<const PersonImage*>& images,
                              const TrainConfig& cfg) {
  std::map<int, std::vector<const PersonImage*>> by_id;
  for (auto* im : images) by_id[im->gt_id].push_back(im);
  int rich = 0;
  for (auto& [id, v] : by_id) rich += v.size() >= 2;
  if (by_id.size() < 2 || rich < 2)
    throw std::invalid_argument(
        "training needs >=2 identities with >=2 images each");

  std::vector<int> all_ids;
  for (auto& [id, v] : by_id) all_ids.push_back(id);

  TrainLog log;
  if (cfg.steps <= 0) return log;

  Rng rng(cfg.seed);
  netops::Sgd opt;
  NetGrads grads;
  grads.ensure(net);

  const int P = std::min<int>(cfg.ids_per_batch, static_cast<int>(all_ids.size()));
  const int K = cfg.imgs_per_id;
  const double pi = 3.14159265358979323846;

  std::vector<ForwardCache> caches(static_cast<size_t>(P) * K);
  std::vector<int> labels(static_cast<size_t>(P) * K);
  std::vector<const PersonImage*> batch(static_cast<size_t>(P) * K);

  for (int step = 0; step < cfg.steps; ++step) {
    // cosine learning-rate decay
    double t = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 0;
    double lr = cfg.lr * (cfg.lr_final_frac +
                          (1 - cfg.lr_final_frac) * 0.5 * (1 + std::cos(pi * t)));

    std::vector<int> ids = all_ids;
    rng.shuffle(ids);
    ids.resize(P);
    int n = 0;
    for (int p = 0; p < P; ++p) {
      auto& pool = by_id[ids[p]];
      for (int k = 0; k < K; ++k) {
        const PersonImage* pick;
        if (static_cast<int>(pool.size()) >= K) {
          // without replacement: rotate a shuffled copy
          if (k == 0) rng.shuffle(pool);
          pick = pool[k];
        } else {
          pick = pool[rng.below(pool.size())];
        }
        batch[n] = pick;
        labels[n] = ids[p];
        ++n;
      }
    }

    for (int i = 0; i < n; ++i) forward(net, batch[i]->pixels, caches[i]);

    const bool bn = net.cfg.embed_dim > 0;
    const size_t dim = caches[0].head.size();
    std::vector<double> mu(dim, 0.0), istd(dim, 1.0);
    if (bn) {
      // normalize with this batch's statistics, then fold them into the
      // running estimates used at inference
      for (int i = 0; i < n; ++i)
        for (size_t d = 0; d < dim; ++d) mu[d] += caches[i].head[d];
      for (size_t d = 0; d < dim; ++d) mu[d] /= n;
      std::vector<double> var(dim, 0.0);
      for (int i = 0; i < n; ++i)
        for (size_t d = 0; d < dim; ++d) {
          double c = caches[i].head[d] - mu[d];
          var[d] += c * c;
        }
      for (size_t d = 0; d < dim; ++d) {
        var[d] /= n;
        istd[d] = 1.0 / std::sqrt(var[d] + kBnEps);
        net.bn_mean[d] = static_cast<float>(0.9 * net.bn_mean[d] + 0.1 * mu[d]);
        net.bn_var[d] = static_cast<float>(0.9 * net.bn_var[d] + 0.1 * var[d]);
      }
      for (int i = 0; i < n; ++i) caches[i].renorm(mu, istd);
    }

    // pairwise distances on embeddings
    std::vector<double> dist(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        double acc = 0;
        const auto& a = caches[i].embed;
        const auto& b = caches[j].embed;
        for (size_t d = 0; d < a.size(); ++d) {
          double diff = static_cast<double>(a[d]) - b[d];
          acc += diff * diff;
        }
        double dd = std::sqrt(acc);
        dist[static_cast<size_t>(i) * n + j] = dd;
        dist[static_cast<size_t>(j) * n + i] = dd;
      }

    std::vector<std::vector<float>> d_embed(
        n, std::vector<float>(caches[0].embed.size(), 0.f));
    double loss = 0.0;
    int active = 0, anchors = 0;
    struct Hinge { int a, p, ng; };
    std::vector<Hinge> hinges;
    for (int a = 0; a < n; ++a) {
      int hp = -1, hn = -1;
      for (int j = 0; j < n; ++j) {
        if (j == a) continue;
        double d = dist[static_cast<size_t>(a) * n + j];
        if (labels[j] == labels[a]) {
          if (hp < 0 || d > dist[static_cast<size_t>(a) * n + hp]) hp = j;
        } else {
          if (hn < 0 || d < dist[static_cast<size_t>(a) * n + hn]) hn = j;
        }
      }
      if (hp < 0 || hn < 0) continue;
      ++anchors;
      double h = dist[static_cast<size_t>(a) * n + hp] -
                 dist[static_cast<size_t>(a) * n + hn] + cfg.margin;
      if (h > 0) {
        loss += h;
        ++active;
        hinges.push_back({a, hp, hn});
      }
    }
    if (anchors == 0) continue;
    loss /= anchors;
    if (!std::isfinite(loss))
      throw std::runtime_error("training diverged at step " +
                               std::to_string(step));
    log.loss.push_back(loss);

    double inv = 1.0 / anchors;
    for (const auto& hg : hinges) {
      const auto& ea = caches[hg.a].embed;
      const auto& ep = caches[hg.p].embed;
      const auto& en = caches[hg.ng].embed;
      double dap = std::max(dist[static_cast<size_t>(hg.a) * n + hg.p], 1e-9);
      double dan = std::max(dist[static_cast<size_t>(hg.a) * n + hg.ng], 1e-9);
      for (size_t d = 0; d < ea.size(); ++d) {
        double uap = (static_cast<double>(ea[d]) - ep[d]) / dap;
        double uan = (static_cast<double>(ea[d]) - en[d]) / dan;
        d_embed[hg.a][d] += static_cast<float>(inv * (uap - uan));
        d_embed[hg.p][d] += static_cast<float>(-inv * uap);
        d_embed[hg.ng][d] += static_cast<float>(inv * uan);
      }
    }

    grads.zero();
    if (bn) {
      // batch-statistics BN backward: every batch member couples through
      // the shared mean and variance
      std::vector<std::vector<double>> d_pre(n);
      std::vector<double> s1(dim, 0.0), s2(dim, 0.0);
      for (int i = 0; i < n; ++i) {
        d_pre[i] = norm_backward(caches[i], d_embed[i]);
        for (size_t d = 0; d < dim; ++d) {
          s1[d] += d_pre[i][d];
          s2[d] += d_pre[i][d] * caches[i].prenorm[d];
        }
      }
      std::vector<double> d_head(dim);
      for (int i = 0; i < n; ++i) {
        for (size_t d = 0; d < dim; ++d)
          d_head[d] = istd[d] * (d_pre[i][d] - (s1[d] + caches[i].prenorm[d] * s2[d]) / n);
        backward_from_head(net, caches[i], d_head, grads);
      }
      // BN cancels any shared bias exactly, so the parameter is dead weight
      std::fill(grads.head_b.begin(), grads.head_b.end(), 0.f);
    } else {
      for (int i = 0; i < n; ++i) {
        bool any = false;
        for (float g : d_embed[i])
          if (g != 0.f) { any = true; break; }
        if (any) backward(net, caches[i], d_embed[i], grads);
      }
    }
    opt.step(net, grads, lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip);
  }
  return log;
}

// ---- serialization: versioned binary blob with seed + shape header ----

namespace netio {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}
inline void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline void put_floats(std::ostream& os, const std::vector<float>& v) {
  put_u32(os, static_cast<uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("model blob truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}
inline uint64_t get_u64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}
inline double get_f64(std::istream& is) {
  uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}
inline std::vector<float> get_floats(std::istream& is) {
  uint32_t n = get_u32(is);
  std::vector<float> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw std::runtime_error("model blob truncated");
  return v;
}

}  // namespace netio

inline void write_net(std::ostream& os, const EmbeddingNet& net) {
  os.write("RLN1", 4);
  netio::put_u32(os, 3);  // version
  netio::put_u64(os, net.seed);
  netio::put_u32(os, static_cast<uint32_t>(net.stages.size()));
  for (size_t i = 0; i < net.stages.size(); ++i) {
    netio::put_u32(os, static_cast<uint32_t>(net.cfg.widths[i]));
    netio::put_u32(os, static_cast<uint32_t>(net.cfg.strides[i]));
    netio::put_u32(os, static_cast<uint32_t>(net.stages[i].k));
  }
  netio::put_f64(os, net.cfg.gem_alpha);
  netio::put_u32(os, static_cast<uint32_t>(net.cfg.embed_dim));
  for (const auto& st : net.stages) {
    netio::put_floats(os, st.w);
    netio::put_floats(os, st.b);
  }
  netio::put_floats(os, net.head_w);
  netio::put_floats(os, net.head_b);
  netio::put_floats(os, net.bn_mean);
  netio::put_floats(os, net.bn_var);
}

inline EmbeddingNet read_net(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RLN1", 4) != 0)
    throw std::runtime_error("not a model blob");
  uint32_t version = netio::get_u32(is);
  if (version != 3) throw std::runtime_error("unsupported model version");
  uint64_t seed = netio::get_u64(is);
  uint32_t n_stages = netio::get_u32(is);
  NetConfig cfg;
  cfg.widths.resize(n_stages);
  cfg.strides.resize(n_stages);
  cfg.ksizes.resize(n_stages);
  for (uint32_t i = 0; i < n_stages; ++i) {
    cfg.widths[i] = static_cast<int>(netio::get_u32(is));
    cfg.strides[i] = static_cast<int>(netio::get_u32(is));
    cfg.ksizes[i] = static_cast<int>(netio::get_u32(is));
  }
  cfg.gem_alpha = netio::get_f64(is);
  cfg.embed_dim = static_cast<int>(netio::get_u32(is));
  EmbeddingNet net = init_net(cfg, seed);
  for (auto& st : net.stages) {
    st.w = netio::get_floats(is);
    st.b = netio::get_floats(is);
    if (st.w.size() != static_cast<size_t>(st.k) * st.k * st.out_c * st.in_c)
      throw std::runtime_error("model blob shape mismatch");
  }
  net.head_w = netio::get_floats(is);
  net.head_b = netio::get_floats(is);
  net.bn_mean = netio::get_floats(is);
  net.bn_var = netio::get_floats(is);
  const size_t want = cfg.embed_dim > 0 ? static_cast<size_t>(cfg.embed_dim) : 0;
  if (net.bn_mean.size() != want || net.bn_var.size() != want)
    throw std::runtime_error("model blob shape mismatch");
  return net;
}

}  // namespace reidlab
