// Poisoning pipeline: selection plans, parity pairing with spillover,
// payload/reference consistency, baseline triggers, the train-time label
// rule, query poisoning, and label-distribution stealth.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "reidlab/poison.hpp"
#include "reidlab/quality_metrics.hpp"

using namespace reidlab;

namespace {

// 10 train ids x 10 images on the standard raster
DatasetManifest base_manifest() {
  DatasetConfig cfg;
  cfg.n_train_ids = 10;
  cfg.n_test_ids = 4;
  cfg.imgs_per_id = 10;
  cfg.n_cams = 2;
  return generate_dataset(cfg, 77);
}

HashNetParams small_hashnet() {
  HashNetConfig cfg;
  cfg.net.widths = {4};
  cfg.net.strides = {4};
  cfg.code_length = 64;
  return init_hashnet(cfg, 5);
}

StegoParams small_stego() {
  StegoParams p;
  p.code_length = 64;
  return p;
}

int count_train(const DatasetManifest& m) {
  int n = 0;
  for (const auto& im : m.images) n += im.role == Role::train;
  return n;
}

}  // namespace

TEST(PoisonPolicy, Validation) {
  PoisonPolicy p;
  p.rate = -0.1;
  EXPECT_THROW(validate_policy(p), std::invalid_argument);
  p.rate = 1.1;
  EXPECT_THROW(validate_policy(p), std::invalid_argument);
  p.rate = 0.4;
  EXPECT_NO_THROW(validate_policy(p));

  p.pairing = Pairing::explicit_map;
  p.explicit_targets = {{3, 3}};
  EXPECT_THROW(validate_policy(p), std::invalid_argument);
  p.explicit_targets = {{3, 5}};
  EXPECT_NO_THROW(validate_policy(p));

  p.pairing = Pairing::even_to_odd;
  p.trigger = TriggerKind::blended;
  p.baseline.blend_ratio = 1.0;
  EXPECT_THROW(validate_policy(p), std::invalid_argument);
  p.baseline.blend_ratio = 0.0;
  EXPECT_NO_THROW(validate_policy(p));

  p.trigger = TriggerKind::badnets_patch;
  p.baseline.patch_size = 0;
  EXPECT_THROW(validate_policy(p), std::invalid_argument);
}

TEST(PoisonPolicy, NameRoundTrip) {
  for (auto k : {TriggerKind::dynamic, TriggerKind::badnets_patch,
                 TriggerKind::blended, TriggerKind::sig_ramp})
    EXPECT_EQ(trigger_from_name(trigger_name(k)), k);
  EXPECT_THROW(trigger_from_name("wavelet"), std::invalid_argument);
  EXPECT_EQ(pairing_from_name("even_to_odd"), Pairing::even_to_odd);
  EXPECT_THROW(pairing_from_name("odd_to_even"), std::invalid_argument);
}

TEST(Poison, RateZeroIsNoOp) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.0;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 1);
  EXPECT_EQ(res.manifest.images.size(), m.images.size());
  EXPECT_TRUE(res.records.empty());
  EXPECT_TRUE(res.warnings.empty());
}

TEST(Poison, CountingUsesFloorOfOriginalTrainSize) {
  auto m = base_manifest();
  ASSERT_EQ(count_train(m), 100);
  PoisonPolicy policy;
  policy.rate = 0.4;
  auto hp = small_hashnet();
  auto res = poison_train_set(m, policy, hp, small_stego(), 2);
  EXPECT_EQ(res.records.size(), 40u);
  EXPECT_EQ(count_train(res.manifest), 140);
  EXPECT_EQ(res.manifest.images.size(), m.images.size() + 40);

  // floor, not round: 0.415 * 100 -> 41
  policy.rate = 0.415;
  auto res2 = poison_train_set(m, policy, hp, small_stego(), 2);
  EXPECT_EQ(res2.records.size(), 41u);
}

TEST(Poison, ParityRuleHoldsBelowEvenSupply) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.4;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 3);
  ASSERT_EQ(res.records.size(), 40u);
  EXPECT_TRUE(res.warnings.empty());

  std::map<int, int> per_target;
  for (const auto& r : res.records) {
    const PersonImage* src = m.find(r.source_image_key);
    ASSERT_NE(src, nullptr);
    EXPECT_EQ(src->gt_id % 2, 0) << "source must be an even identity";
    EXPECT_EQ(r.target_id % 2, 1) << "target must be an odd identity";
    ++per_target[r.target_id];
  }
  // 5 odd targets, round-robin: exactly 8 each
  EXPECT_EQ(per_target.size(), 5u);
  for (const auto& [t, n] : per_target) EXPECT_EQ(n, 8) << "target " << t;
}

TEST(Poison, SpilloverBeyondEvenSupplyWarnsAndFillsFromOtherParity) {
  auto m = base_manifest();  // 50 even-ID train images available
  PoisonPolicy policy;
  policy.rate = 0.6;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 4);
  ASSERT_EQ(res.records.size(), 60u);
  ASSERT_EQ(res.warnings.size(), 1u);
  EXPECT_NE(res.warnings[0].find("even-ID sources exhausted"),
            std::string::npos);

  int even_src = 0, odd_src = 0;
  for (const auto& r : res.records) {
    const PersonImage* src = m.find(r.source_image_key);
    ASSERT_NE(src, nullptr);
    if (src->gt_id % 2 == 0) {
      ++even_src;
      EXPECT_EQ(r.target_id % 2, 1);
    } else {
      ++odd_src;
      EXPECT_EQ(r.target_id % 2, 0);
    }
  }
  EXPECT_EQ(even_src, 50);
  EXPECT_EQ(odd_src, 10);
}

TEST(Poison, TargetSpreadStaysBalanced) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.33;  // 33 poisons over 5 odd targets: 7 or 6 each
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 5);
  std::map<int, int> per_target;
  for (const auto& r : res.records) ++per_target[r.target_id];
  int lo = 1 << 30, hi = 0;
  for (const auto& [t, n] : per_target) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  EXPECT_LE(hi - lo, 1);
}

TEST(Poison, ForgedEntriesCarryTargetLabelAndDecodablePayload) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.1;
  auto hp = small_hashnet();
  auto sp = small_stego();
  auto res = poison_train_set(m, policy, hp, sp, 6);
  ASSERT_EQ(res.records.size(), 10u);

  std::map<int, std::string> ref_of;
  for (size_t k = 0; k < res.records.size(); ++k) {
    const auto& rec = res.records[k];
    const PersonImage& forged = res.manifest.images[m.images.size() + k];

    char expect_key[32];
    std::snprintf(expect_key, sizeof expect_key, "poison/%05zu.ppm", k);
    EXPECT_EQ(forged.key, expect_key);
    EXPECT_EQ(forged.gt_id, rec.target_id);
    EXPECT_EQ(forged.role, Role::train);
    EXPECT_EQ(rec.assigned_label, rec.target_id);

    // the reference is an image of the target identity, fixed per target
    const PersonImage* ref = m.find(rec.reference_image_key);
    ASSERT_NE(ref, nullptr);
    EXPECT_EQ(ref->gt_id, rec.target_id);
    auto it = ref_of.find(rec.target_id);
    if (it != ref_of.end())
      EXPECT_EQ(it->second, rec.reference_image_key);
    else
      ref_of[rec.target_id] = rec.reference_image_key;

    // the trigger is the reference identity's code, recoverable exactly
    HashCode expected = hash_identity(ref->pixels, hp);
    EXPECT_EQ(extract(forged.pixels, sp).to_hex(), expected.to_hex());
  }
}

TEST(Poison, ReplaceModeEditsInPlace) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.2;
  policy.mode = PoisonPolicy::Mode::replace;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 7);
  ASSERT_EQ(res.records.size(), 20u);
  EXPECT_EQ(res.manifest.images.size(), m.images.size());
  EXPECT_EQ(count_train(res.manifest), 100);

  for (const auto& rec : res.records) {
    const PersonImage* slot = res.manifest.find(rec.source_image_key);
    ASSERT_NE(slot, nullptr);
    EXPECT_EQ(slot->gt_id, rec.target_id);  // label flipped in place
    const PersonImage* orig = m.find(rec.source_image_key);
    EXPECT_NE(slot->pixels.v, orig->pixels.v);
  }
}

TEST(Poison, RoundRobinNeverTargetsSelf) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.5;
  policy.pairing = Pairing::round_robin;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 8);
  ASSERT_EQ(res.records.size(), 50u);
  for (const auto& r : res.records) {
    const PersonImage* src = m.find(r.source_image_key);
    EXPECT_NE(src->gt_id, r.target_id);
  }
}

TEST(Poison, ExplicitMapFollowsMapping) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.pairing = Pairing::explicit_map;
  policy.explicit_targets = {{0, 9}, {2, 9}};
  policy.rate = 0.15;  // 15 poisons from 20 eligible images
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 9);
  ASSERT_EQ(res.records.size(), 15u);
  for (const auto& r : res.records) {
    const PersonImage* src = m.find(r.source_image_key);
    EXPECT_TRUE(src->gt_id == 0 || src->gt_id == 2);
    EXPECT_EQ(r.target_id, 9);
  }

  policy.rate = 0.3;  // 30 poisons, only 20 eligible
  EXPECT_THROW(poison_train_set(m, policy, small_hashnet(), small_stego(), 9),
               std::runtime_error);
}

TEST(BaselineTrigger, BlendedRatioZeroIsIdentity) {
  auto m = base_manifest();
  BaselineTriggerSpec spec;
  spec.blend_ratio = 0.0;
  Image out = apply_baseline_trigger(m.images[0].pixels, spec,
                                     TriggerKind::blended);
  EXPECT_EQ(out.v, m.images[0].pixels.v);
}

TEST(BaselineTrigger, PatchPaintsExactlyItsFootprint) {
  Image gray(16, 12, 3, 0.4f);  // 0.4 sits on the 8-bit grid (102/255)
  BaselineTriggerSpec spec;     // 4x4 checkerboard, bottom-right
  Image out = apply_baseline_trigger(gray, spec, TriggerKind::badnets_patch);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 12; ++x) {
      bool inside = y >= 12 && x >= 8;
      float want = !inside       ? 0.4f
                   : (x + y) % 2 ? 0.f   // (x-8)+(y-12) keeps parity of x+y
                                 : 1.f;
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(out.at(y, x, ch), want);
    }
}

TEST(BaselineTrigger, SolidPatchFillsUniformly) {
  Image black(16, 12, 3, 0.f);
  BaselineTriggerSpec spec;
  spec.patch_pattern = PatchPattern::solid;
  Image out = apply_baseline_trigger(black, spec, TriggerKind::badnets_patch);
  int ones = 0;
  for (float v : out.v) ones += v == 1.f;
  EXPECT_EQ(ones, 4 * 4 * 3);
  for (int y = 12; y < 16; ++y)
    for (int x = 8; x < 12; ++x)
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(out.at(y, x, ch), 1.f);
}

TEST(BaselineTrigger, PatchBoundsChecked) {
  Image img(8, 8, 3, 0.5f);
  BaselineTriggerSpec spec;
  spec.patch_x = 6;  // 4 wide from x=6 overruns w=8
  spec.patch_y = 0;
  EXPECT_THROW(apply_baseline_trigger(img, spec, TriggerKind::badnets_patch),
               std::invalid_argument);
}

TEST(BaselineTrigger, SigRampHasSinusoidalColumnProfile) {
  Image gray(32, 64, 3, 0.5f);
  BaselineTriggerSpec spec;
  Image out = apply_baseline_trigger(gray, spec, TriggerKind::sig_ramp);
  const double two_pi = 6.283185307179586;
  for (int x = 0; x < 64; ++x) {
    double mean = 0.0;
    for (int y = 0; y < 32; ++y)
      for (int ch = 0; ch < 3; ++ch) mean += out.at(y, x, ch) - 0.5;
    mean /= 32 * 3;
    double expect = spec.sig_delta * std::sin(two_pi * spec.sig_freq * x / 64);
    EXPECT_NEAR(mean, expect, 1.0 / 255.0) << "column " << x;
  }
}

TEST(BaselineTrigger, OverlayShapeMismatchAndDynamicRejected) {
  Image img(16, 12, 3, 0.5f);
  BaselineTriggerSpec spec;
  spec.overlay = Image(8, 8, 3, 0.1f);
  EXPECT_THROW(apply_baseline_trigger(img, spec, TriggerKind::blended),
               std::invalid_argument);
  EXPECT_THROW(apply_baseline_trigger(img, spec, TriggerKind::dynamic),
               std::invalid_argument);
}

TEST(Poison, BaselineTriggerRunsThroughPipeline) {
  auto m = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.1;
  policy.trigger = TriggerKind::badnets_patch;
  auto res = poison_train_set(m, policy, small_hashnet(), small_stego(), 10);
  ASSERT_EQ(res.records.size(), 10u);
  for (const auto& rec : res.records) {
    EXPECT_EQ(rec.reference_image_key, "-");
    EXPECT_EQ(rec.trigger_kind, TriggerKind::badnets_patch);
  }
  // checker patch present on the forged copies: half its cells are 1.0
  const PersonImage& forged = res.manifest.images[m.images.size()];
  int whites = 0;
  for (float v : forged.pixels.v) whites += v == 1.f;
  EXPECT_GE(whites, 4 * 4 * 3 / 2);
}

TEST(PoisonQuery, RequiresUnseenTargetAndSharedPayload) {
  auto m = base_manifest();
  auto hp = small_hashnet();
  auto sp = small_stego();
  const int n_train_ids = m.n_train_ids;

  const PersonImage* query = nullptr;
  const PersonImage *ref_seen = nullptr, *ref_unseen = nullptr;
  const PersonImage* query2 = nullptr;
  for (const auto& im : m.images) {
    if (im.role == Role::query && !query) query = &im;
    else if (im.role == Role::query && !query2) query2 = &im;
    if (im.role == Role::train && !ref_seen) ref_seen = &im;
    if (im.role == Role::gallery && !ref_unseen) ref_unseen = &im;
  }
  ASSERT_TRUE(query && query2 && ref_seen && ref_unseen);

  EXPECT_THROW(poison_query(*query, *ref_seen, hp, sp, n_train_ids),
               std::invalid_argument);

  auto a = poison_query(*query, *ref_unseen, hp, sp, n_train_ids);
  auto b = poison_query(*query2, *ref_unseen, hp, sp, n_train_ids);
  EXPECT_EQ(a.target_id, ref_unseen->gt_id);
  EXPECT_EQ(a.source_key, query->key);
  EXPECT_EQ(a.payload.to_hex(), b.payload.to_hex());
  EXPECT_EQ(a.payload.to_hex(), hash_identity(ref_unseen->pixels, hp).to_hex());
  EXPECT_EQ(extract(a.pixels, sp).to_hex(), a.payload.to_hex());
}

TEST(Distribution, AllToOneConcentrationOracle) {
  auto before = base_manifest();
  DatasetManifest after = before;
  // 40 extra images, all labeled id 1
  for (int k = 0; k < 40; ++k) {
    PersonImage im;
    im.gt_id = 1;
    im.role = Role::train;
    im.key = "x" + std::to_string(k);
    im.pixels = Image(8, 8, 3, 0.5f);
    after.images.push_back(std::move(im));
  }
  auto shift = distribution_shift(before, after);
  EXPECT_EQ(shift.before_counts.at(1), 10);
  EXPECT_EQ(shift.after_counts.at(1), 50);
  // share of the swollen id: 50/140; every other id: 10/140
  EXPECT_NEAR(50.0 / 140.0, 0.35714285714285715, 1e-15);
  EXPECT_NEAR(shift.l1, 36.0 / 70.0, 1e-12);  // 0.5142857...
}

TEST(Distribution, SpreadPairingStaysFlat) {
  auto before = base_manifest();
  PoisonPolicy policy;
  policy.rate = 0.4;
  auto res = poison_train_set(before, policy, small_hashnet(), small_stego(),
                              11);
  auto shift = distribution_shift(before, res.manifest);

  // five odd ids at 18/140 each, five even at 10/140: L1 = 2/7
  double max_share = 0.0;
  int total = count_train(res.manifest);
  for (const auto& [id, n] : shift.after_counts)
    max_share = std::max(max_share, static_cast<double>(n) / total);
  EXPECT_NEAR(max_share, 18.0 / 140.0, 1e-12);  // 0.12857...
  EXPECT_NEAR(shift.l1, 2.0 / 7.0, 1e-12);      // 0.285714...

  // the spread profile is strictly flatter than the all-to-one profile
  EXPECT_LT(shift.l1, 36.0 / 70.0);
}

TEST(Distribution, UniverseAndEmptinessChecks) {
  auto before = base_manifest();
  DatasetManifest stranger = before;
  PersonImage alien;
  alien.gt_id = 999;
  alien.role = Role::train;
  alien.key = "alien";
  alien.pixels = Image(8, 8, 3, 0.f);
  stranger.images.push_back(std::move(alien));
  EXPECT_THROW(distribution_shift(before, stranger), std::invalid_argument);

  DatasetManifest empty;
  EXPECT_THROW(distribution_shift(before, empty), std::invalid_argument);
}

TEST(PoisonRecords, FileRoundTrip) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "poison_records_test";
  fs::create_directories(dir);
  fs::path path = dir / "records.csv";

  std::vector<PoisonRecord> records(3);
  records[0] = {"img/00001.ppm", 5, "img/00051.ppm", 5, TriggerKind::dynamic};
  records[1] = {"img/00002.ppm", 7, "-", 7, TriggerKind::badnets_patch};
  records[2] = {"img/00003.ppm", 3, "img/00033.ppm", 3, TriggerKind::sig_ramp};
  save_poison_records(records, path, 0xFEED);

  uint64_t stamp = 0;
  auto back = load_poison_records(path, &stamp);
  EXPECT_EQ(stamp, 0xFEEDu);
  ASSERT_EQ(back.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].source_image_key, records[i].source_image_key);
    EXPECT_EQ(back[i].target_id, records[i].target_id);
    EXPECT_EQ(back[i].reference_image_key, records[i].reference_image_key);
    EXPECT_EQ(back[i].trigger_kind, records[i].trigger_kind);
  }
  EXPECT_THROW(load_poison_records(dir / "absent.csv"), std::runtime_error);
  fs::remove_all(dir);
}
