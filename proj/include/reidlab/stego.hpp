#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "reidlab/dct.hpp"
#include "reidlab/hashcode.hpp"
#include "reidlab/image.hpp"
#include "reidlab/quality_metrics.hpp"
#include "reidlab/rng.hpp"

namespace reidlab {

struct StegoParams {
  double strength = 0.03;   // per-coefficient correlation target
  int block = 8;
  int band_lo = 6;          // zigzag positions, inclusive; DC excluded
  int band_hi = 17;
  int chips_per_bit = 4;
  int code_length = 128;
  uint64_t chip_seed = 0xC0DEC5EEDULL;
  int max_fix_rounds = 12;  // clamp/re-embed fix-point iterations
};

struct PoisonedImage {
  Image pixels;
  HashCode payload;
  std::string source_key;
  int target_id = -1;
};

struct QualityGate {
  double lambda_r = 1.5;  // reconstruction (MSE)
  double lambda_p = 2.0;  // perceptual (1 - SSIM)
  double lambda_c = 1.0;  // containment (max abs residual)
  double threshold = 0.45;
};

struct QualityResult {
  double l_r = 0, l_p = 0, l_c = 0, score = 0;
  bool pass = false;
};

inline void validate_stego_params(const StegoParams& p) {
  if (!(p.strength > 0))
    throw std::invalid_argument("strength must be positive");
  if (p.block != 8) throw std::invalid_argument("block size must be 8");
  if (p.band_lo < 1) throw std::invalid_argument("band must exclude DC");
  if (p.band_hi > 63 || p.band_lo > p.band_hi)
    throw std::invalid_argument("bad zigzag band");
  if (p.chips_per_bit < 1)
    throw std::invalid_argument("chips_per_bit must be >= 1");
  if (!valid_code_length(p.code_length))
    throw std::invalid_argument("code_length must be 64, 128 or 256");
}

namespace stego_detail {

struct ChipPlan {
  int blocks_x = 0, blocks_y = 0;
  // used_blocks[i] = block raster index; block_slot_of maps compactly.
  std::vector<int> used_blocks;
  struct Slot {
    int compact_block;  // index into used_blocks
    int coef;           // row-major 0..63
    double chip;        // +1 / -1
  };
  // per bit: chips_per_bit slots
  std::vector<std::vector<Slot>> bit_slots;
};

// The plan depends only on geometry and chip_seed, so embedder and extractor
// rebuild it identically. Every block holds floor(band / chips_per_bit)
// bit instances; instances are dealt round-robin over the bits from a seeded
// shuffle, so each bit repeats in several home blocks as a coherent signed
// local texture (chips on seeded band coefficients of that block). The
// repetition buys decode margin and keeps the payload a position-free
// texture rather than a position code. A bit's correlation is read across
// all of its instances.
inline ChipPlan make_plan(int h, int w, const StegoParams& p) {
  ChipPlan plan;
  plan.blocks_x = w / p.block;
  plan.blocks_y = h / p.block;
  const int nblocks = plan.blocks_x * plan.blocks_y;
  const int band = p.band_hi - p.band_lo + 1;
  const int per_block = band / p.chips_per_bit;  // instances a block can hold
  const long instances = static_cast<long>(nblocks) * per_block;
  if (instances < p.code_length)
    throw std::invalid_argument("embedding capacity exceeded");

  Rng rng(p.chip_seed);
  std::vector<int> inst_perm(instances);
  for (long i = 0; i < instances; ++i) inst_perm[i] = static_cast<int>(i);
  rng.shuffle(inst_perm);
  std::vector<std::vector<int>> band_perm(nblocks);
  for (int b = 0; b < nblocks; ++b) band_perm[b] = rng.permutation(band);

  const auto& zz = zigzag_order();
  std::vector<int> compact(nblocks, -1);
  plan.bit_slots.resize(p.code_length);
  for (long i = 0; i < instances; ++i) {
    int bit = static_cast<int>(i % p.code_length);
    int inst = inst_perm[i];
    int blk = inst / per_block;
    int row = inst % per_block;  // which chip group of the block
    if (compact[blk] < 0) {
      compact[blk] = static_cast<int>(plan.used_blocks.size());
      plan.used_blocks.push_back(blk);
    }
    for (int j = 0; j < p.chips_per_bit; ++j) {
      int z = p.band_lo + band_perm[blk][row * p.chips_per_bit + j];
      plan.bit_slots[bit].push_back({compact[blk], zz[z], rng.sign()});
    }
  }
  return plan;
}

inline std::vector<double> lum_d(const Image& img) {
  std::vector<double> y(static_cast<size_t>(img.h) * img.w);
  const double inv = 1.0 / img.c;
  for (size_t pix = 0; pix < y.size(); ++pix) {
    double s = 0;
    for (int ch = 0; ch < img.c; ++ch) s += img.v[pix * img.c + ch];
    y[pix] = s * inv;
  }
  return y;
}

inline void dct_used_blocks(const std::vector<double>& y, int w,
                            const ChipPlan& plan, int blk_size,
                            std::vector<std::array<double, 64>>& coefs) {
  const auto& d = Dct8::instance();
  coefs.resize(plan.used_blocks.size());
  double block[64];
  for (size_t i = 0; i < plan.used_blocks.size(); ++i) {
    int blk = plan.used_blocks[i];
    int by = blk / plan.blocks_x, bx = blk % plan.blocks_x;
    for (int r = 0; r < blk_size; ++r)
      for (int c = 0; c < blk_size; ++c)
        block[r * 8 + c] = y[(by * blk_size + r) * static_cast<size_t>(w) +
                             bx * blk_size + c];
    d.forward(block, coefs[i].data());
  }
}

inline double correlation(const std::vector<std::array<double, 64>>& coefs,
                          const std::vector<ChipPlan::Slot>& slots) {
  double acc = 0;
  for (const auto& s : slots) acc += coefs[s.compact_block][s.coef] * s.chip;
  return acc / static_cast<double>(slots.size());
}

// One correction pass: push every deficient bit's correlation to its signed
// target. Returns whether anything needed fixing. margin_frac < 1 relaxes
// the trigger threshold so already-good bits are left alone on later rounds.
inline bool fix_correlations(std::vector<std::array<double, 64>>& coefs,
                             const ChipPlan& plan, const HashCode& code,
                             double strength, double margin_frac,
                             std::vector<char>& touched) {
  bool any = false;
  for (int k = 0; k < code.length(); ++k) {
    const auto& slots = plan.bit_slots[k];
    double rho = correlation(coefs, slots);
    double target = code.bits[k] ? strength : -strength;
    bool bad = code.bits[k] ? (rho < strength * margin_frac)
                            : (rho > -strength * margin_frac);
    if (!bad) continue;
    any = true;
    double delta = target - rho;
    for (const auto& s : slots) {
      coefs[s.compact_block][s.coef] += s.chip * delta;
      touched[s.compact_block] = 1;
    }
  }
  return any;
}

// Inverse-transform touched blocks and add the luminance delta to every
// channel (keeps chrominance differences intact), clamped to [0,1].
inline void apply_delta(Image& img, const std::vector<double>& y_before,
                        const std::vector<std::array<double, 64>>& coefs,
                        const ChipPlan& plan, int blk_size,
                        const std::vector<char>& touched) {
  const auto& d = Dct8::instance();
  double block[64];
  for (size_t i = 0; i < plan.used_blocks.size(); ++i) {
    if (!touched[i]) continue;
    int blk = plan.used_blocks[i];
    int by = blk / plan.blocks_x, bx = blk % plan.blocks_x;
    d.inverse(coefs[i].data(), block);
    for (int r = 0; r < blk_size; ++r)
      for (int c = 0; c < blk_size; ++c) {
        size_t pix = (by * blk_size + r) * static_cast<size_t>(img.w) +
                     bx * blk_size + c;
        double dy = block[r * 8 + c] - y_before[pix];
        for (int ch = 0; ch < img.c; ++ch) {
          float& px = img.v[pix * img.c + ch];
          px = static_cast<float>(
              std::min(1.0, std::max(0.0, static_cast<double>(px) + dy)));
        }
      }
  }
}

}  // namespace stego_detail

inline HashCode extract(const Image& pixels, const StegoParams& params) {
  validate_stego_params(params);
  auto plan = stego_detail::make_plan(pixels.h, pixels.w, params);
  auto y = stego_detail::lum_d(pixels);
  std::vector<std::array<double, 64>> coefs;
  stego_detail::dct_used_blocks(y, pixels.w, plan, params.block, coefs);
  HashCode code(params.code_length);
  for (int k = 0; k < params.code_length; ++k)
    code.bits[k] =
        stego_detail::correlation(coefs, plan.bit_slots[k]) >= 0 ? 1 : 0;
  return code;
}

// Spread-spectrum embedding over mid-band block-DCT coefficients of the
// luminance channel. Each bit owns chips_per_bit seeded +-1 chips; embedding
// moves the chip correlation to the signed strength target (bits whose host
// correlation already clears the target are left untouched). Clamping and
// the final 8-bit quantization are folded into a fix-point loop so the
// stored raster still decodes exactly.
inline PoisonedImage embed(const Image& image, const HashCode& code,
                           const StegoParams& params) {
  validate_stego_params(params);
  if (code.length() != params.code_length)
    throw std::invalid_argument("code length does not match params");
  auto plan = stego_detail::make_plan(image.h, image.w, params);

  Image cur = image;
  std::vector<std::array<double, 64>> coefs;
  for (int round = 0; round < params.max_fix_rounds; ++round) {
    auto y = stego_detail::lum_d(cur);
    stego_detail::dct_used_blocks(y, cur.w, plan, params.block, coefs);
    std::vector<char> touched(plan.used_blocks.size(), 0);
    // First round embeds to the full target; later rounds only repair bits
    // that clamping pushed back under 85% of the margin.
    double margin_frac = round == 0 ? 1.0 : 0.85;
    bool any = stego_detail::fix_correlations(coefs, plan, code,
                                              params.strength, margin_frac,
                                              touched);
    if (!any) break;
    stego_detail::apply_delta(cur, y, coefs, plan, params.block, touched);
  }
  quantize8(cur);

  // Quantization can nudge a borderline correlation; repair on the grid.
  for (int repair = 0; repair < 4; ++repair) {
    if (extract(cur, params) == code) break;
    auto y = stego_detail::lum_d(cur);
    stego_detail::dct_used_blocks(y, cur.w, plan, params.block, coefs);
    std::vector<char> touched(plan.used_blocks.size(), 0);
    stego_detail::fix_correlations(coefs, plan, code, params.strength, 0.85,
                                   touched);
    stego_detail::apply_delta(cur, y, coefs, plan, params.block, touched);
    quantize8(cur);
  }

  PoisonedImage out;
  out.pixels = std::move(cur);
  out.payload = code;
  return out;
}

// Weighted stealth gate: reconstruction error, perceptual loss and the
// worst-pixel residual, each with its own weight.
inline QualityResult quality(const Image& original, const Image& poisoned,
                             const QualityGate& gate) {
  require_same_shape(original, poisoned, "quality");
  QualityResult r;
  r.l_r = mse(original, poisoned);
  r.l_p = 1.0 - ssim(original, poisoned);
  r.l_c = max_abs_residual(original, poisoned);
  r.score = gate.lambda_r * r.l_r + gate.lambda_p * r.l_p + gate.lambda_c * r.l_c;
  r.pass = r.score <= gate.threshold;
  return r;
}

}  // namespace reidlab
