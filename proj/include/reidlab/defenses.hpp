#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "reidlab/dataset.hpp"
#include "reidlab/dct.hpp"
#include "reidlab/image.hpp"
#include "reidlab/nets.hpp"
#include "reidlab/poison.hpp"
#include "reidlab/reidcore.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

// ---- frequency-artifact detector ----
//
// Per 8x8 luminance block: energy in the top-quartile zigzag DCT
// coefficients. A logistic classifier over the (mean, variance) of those
// block energies, trained on clean images vs simulated trigger families
// (never the real embedding codec: the defender does not know it).

struct FreqDetector {
  std::array<double, 2> w{0, 0};
  double b = 0.0;
  std::array<double, 2> feat_mean{0, 0};
  std::array<double, 2> feat_std{1, 1};
  double threshold = 0.0;  // on the logit; calibrated for a fixed FPR
  uint64_t seed = 0;
};

namespace freq_detail {

inline std::array<double, 2> block_energy_stats(const Image& img) {
  const auto& zz = zigzag_order();
  const Dct8& dct = Dct8::instance();
  std::vector<double> energies;
  std::array<double, 64> block, coef;
  for (int by = 0; by + 8 <= img.h; by += 8) {
    for (int bx = 0; bx + 8 <= img.w; bx += 8) {
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double lum = 0;
          for (int ch = 0; ch < img.c; ++ch) lum += img.at(by + y, bx + x, ch);
          block[y * 8 + x] = lum / img.c;
        }
      dct.forward(block.data(), coef.data());
      double e = 0;
      for (int zi = 48; zi < 64; ++zi) {  // top quartile of the zigzag walk
        double c = coef[zz[zi]];
        e += c * c;
      }
      energies.push_back(e);
    }
  }
  if (energies.empty()) throw std::invalid_argument("image smaller than 8x8");
  double mean = 0;
  for (double e : energies) mean += e;
  mean /= energies.size();
  double var = 0;
  for (double e : energies) var += (e - mean) * (e - mean);
  var /= energies.size();
  // log compression keeps the one-outlier-block case linearly separable
  return {std::log(mean + 1e-12), std::log(var + 1e-24)};
}

}  // namespace freq_detail

using PoisonSimulator = std::function<Image(const Image&, Rng&)>;

// The defender's guess at trigger families: patch, blend, ramp, and raw
// high-frequency noise. Deliberately excludes the actual codec.
inline PoisonSimulator default_poison_simulator() {
  return [](const Image& img, Rng& rng) -> Image {
    BaselineTriggerSpec spec;
    switch (rng.below(4)) {
      case 0: {
        spec.patch_size = 3 + static_cast<int>(rng.below(4));
        spec.patch_x = static_cast<int>(rng.below(img.w - spec.patch_size));
        spec.patch_y = static_cast<int>(rng.below(img.h - spec.patch_size));
        spec.patch_value = rng.uniform() < 0.5 ? 0.f : 1.f;
        return apply_baseline_trigger(img, spec, TriggerKind::badnets_patch);
      }
      case 1: {
        spec.blend_ratio = rng.uniform(0.08, 0.2);
        Image overlay(img.h, img.w, img.c);
        for (auto& v : overlay.v) v = static_cast<float>(rng.uniform());
        spec.overlay = std::move(overlay);
        return apply_baseline_trigger(img, spec, TriggerKind::blended);
      }
      case 2: {
        spec.sig_delta = rng.uniform(0.04, 0.1);
        spec.sig_freq = 4 + rng.below(8);
        return apply_baseline_trigger(img, spec, TriggerKind::sig_ramp);
      }
      default: {
        Image out = img;
        double sigma = rng.uniform(0.02, 0.05);
        for (auto& v : out.v)
          v = static_cast<float>(v + rng.normal(0.0, sigma));
        clamp01(out);
        quantize8(out);
        return out;
      }
    }
  };
}

inline double detector_score(const FreqDetector& d, const Image& img) {
  auto f = freq_detail::block_energy_stats(img);
  double z = d.b;
  for (int i = 0; i < 2; ++i)
    z += d.w[i] * (f[i] - d.feat_mean[i]) / d.feat_std[i];
  return z;
}

inline bool detector_flags(const FreqDetector& d, const Image& img) {
  return detector_score(d, img) > d.threshold;
}

inline FreqDetector train_freq_detector(const std::vector<const Image*>& clean,
                                        const PoisonSimulator& simulate,
                                        uint64_t seed, double target_fpr = 0.05) {
  if (clean.size() < 100)
    throw std::invalid_argument("need >=100 clean images");
  Rng rng(derive_seed(seed, "freq-detector"));

  // hold out a quarter of the clean pool for threshold calibration
  std::vector<int> order = rng.permutation(clean.size());
  size_t n_holdout = clean.size() / 4;
  std::vector<std::array<double, 2>> feats;
  std::vector<int> labels;
  std::vector<std::array<double, 2>> holdout;
  for (size_t i = 0; i < order.size(); ++i) {
    const Image& img = *clean[order[i]];
    auto fc = freq_detail::block_energy_stats(img);
    if (i < n_holdout) {
      holdout.push_back(fc);
    } else {
      feats.push_back(fc);
      labels.push_back(0);
      Image forged = simulate(img, rng);
      feats.push_back(freq_detail::block_energy_stats(forged));
      labels.push_back(1);
    }
  }

  bool any_pos = false, any_neg = false;
  for (int l : labels) (l ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg)
    throw std::runtime_error("degenerate training data");

  FreqDetector det;
  det.seed = seed;
  bool collapsed = true;
  for (int j = 0; j < 2; ++j) {
    double m = 0;
    for (auto& f : feats) m += f[j];
    m /= feats.size();
    double v = 0;
    for (auto& f : feats) v += (f[j] - m) * (f[j] - m);
    v /= feats.size();
    det.feat_mean[j] = m;
    if (std::sqrt(v) > 1e-9) {
      det.feat_std[j] = std::sqrt(v);
      collapsed = false;
    } else {
      det.feat_std[j] = 1.0;
    }
  }
  // constant features across clean and forged: nothing to separate on
  if (collapsed) throw std::runtime_error("degenerate training data");

  // full-batch logistic regression; tiny and deterministic
  const double lr = 0.5;
  for (int it = 0; it < 800; ++it) {
    double gw0 = 0, gw1 = 0, gb = 0;
    for (size_t i = 0; i < feats.size(); ++i) {
      double x0 = (feats[i][0] - det.feat_mean[0]) / det.feat_std[0];
      double x1 = (feats[i][1] - det.feat_mean[1]) / det.feat_std[1];
      double z = det.w[0] * x0 + det.w[1] * x1 + det.b;
      double p = 1.0 / (1.0 + std::exp(-z));
      double err = p - labels[i];
      gw0 += err * x0;
      gw1 += err * x1;
      gb += err;
    }
    double inv = 1.0 / feats.size();
    det.w[0] -= lr * (gw0 * inv + 1e-4 * det.w[0]);
    det.w[1] -= lr * (gw1 * inv + 1e-4 * det.w[1]);
    det.b -= lr * gb * inv;
  }

  // threshold: the held-out clean quantile at the requested FPR
  std::vector<double> scores;
  for (auto& f : holdout) {
    double z = det.b;
    z += det.w[0] * (f[0] - det.feat_mean[0]) / det.feat_std[0];
    z += det.w[1] * (f[1] - det.feat_mean[1]) / det.feat_std[1];
    scores.push_back(z);
  }
  std::sort(scores.begin(), scores.end());
  size_t cut = static_cast<size_t>(
      std::ceil((1.0 - target_fpr) * scores.size()));
  if (cut >= scores.size()) cut = scores.size() - 1;
  det.threshold = scores[cut];
  return det;
}

template <class It>
double detection_rate(const FreqDetector& d, It first, It last) {
  int n = 0, hits = 0;
  for (It it = first; it != last; ++it) {
    ++n;
    hits += detector_flags(d, *it);
  }
  if (n == 0) throw std::invalid_argument("no images to score");
  return static_cast<double>(hits) / n;
}

// ---- fine-pruning ----

struct PruneSchedule {
  std::vector<double> fractions;  // increasing, within [0, 0.95]
  int finetune_steps = 30;
};

struct PruneStep {
  double fraction;
  double ba;
  double asr;
};

inline void validate_schedule(const PruneSchedule& s) {
  if (s.fractions.empty()) throw std::invalid_argument("empty prune schedule");
  double prev = -1.0;
  for (double f : s.fractions) {
    if (f < 0.0 || f > 0.95)
      throw std::invalid_argument("prune fraction out of range");
    if (f <= prev && prev >= 0.0)
      throw std::invalid_argument("prune fractions must increase");
    prev = f;
  }
}

// Embedding dimensions ordered by mean absolute pre-norm activation on the
// clean probe set, weakest first. Ranked once so later cuts nest earlier ones.
inline std::vector<int> prune_order(const EmbeddingModel& model,
                                    const std::vector<const PersonImage*>& probes) {
  if (probes.empty()) throw std::invalid_argument("empty probe set");
  const int dim = model.net.out_dim();
  std::vector<double> mean_abs(dim, 0.0);
  ForwardCache fc;
  for (auto* p : probes) {
    forward(model.net, p->pixels, fc);
    for (int d = 0; d < dim; ++d) mean_abs[d] += std::fabs(fc.prenorm[d]);
  }
  std::vector<int> order(dim);
  for (int d = 0; d < dim; ++d) order[d] = d;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return mean_abs[a] < mean_abs[b]; });
  return order;
}

inline void zero_dims(EmbeddingModel& model, const std::vector<int>& dims) {
  const int pd = model.net.pool_dim();
  for (int d : dims) {
    for (int j = 0; j < pd; ++j)
      model.net.head_w[static_cast<size_t>(d) * pd + j] = 0.f;
    model.net.head_b[d] = 0.f;
  }
}

using ModelMetric = std::function<double(const EmbeddingModel&)>;

// Prune weakest dims, briefly finetune on clean data with the cut dims held
// at zero, and measure BA/ASR at each schedule point.
inline std::vector<PruneStep> fine_prune(
    const EmbeddingModel& model, const std::vector<const PersonImage*>& probes,
    const std::vector<const PersonImage*>& finetune_data,
    const PruneSchedule& schedule, const TrainConfig& ft_base,
    const ModelMetric& ba_metric, const ModelMetric& asr_metric) {
  validate_schedule(schedule);
  auto order = prune_order(model, probes);
  const int dim = model.net.out_dim();

  std::vector<PruneStep> curve;
  for (double frac : schedule.fractions) {
    int n_zero = static_cast<int>(std::floor(frac * dim));
    if (n_zero == 0) {
      curve.push_back({frac, ba_metric(model), asr_metric(model)});
      continue;
    }
    EmbeddingModel pruned = model;
    std::vector<int> cut(order.begin(), order.begin() + n_zero);
    zero_dims(pruned, cut);
    // one step per call so the cut stays pinned at zero throughout
    for (int step = 0; step < schedule.finetune_steps; ++step) {
      TrainConfig ft = ft_base;
      ft.steps = 1;
      ft.seed = derive_seed(ft_base.seed,
                            "finetune:" + std::to_string(step));
      double t = schedule.finetune_steps > 1
                     ? static_cast<double>(step) / (schedule.finetune_steps - 1)
                     : 0.0;
      ft.lr = ft_base.lr * (1.0 - 0.9 * t);
      ft.lr_final_frac = 1.0;
      train_triplet(pruned.net, finetune_data, ft);
      zero_dims(pruned, cut);
    }
    curve.push_back({frac, ba_metric(pruned), asr_metric(pruned)});
  }
  return curve;
}

inline double pearson(const std::vector<double>& a,
                      const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("pearson needs two equal series");
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0)
    throw std::invalid_argument("pearson undefined for a constant series");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace reidlab
