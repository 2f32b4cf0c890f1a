#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "reidlab/experiment.hpp"

using namespace reidlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "reidlab_exp_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  EXPECT_TRUE(f.good()) << p;
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// small enough to train in well under a second per victim
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.dataset.n_train_ids = 6;
  c.dataset.n_test_ids = 4;
  c.dataset.imgs_per_id = 4;
  c.hashnet.net = NetConfig{{4}, {4}, {}, 3.0, 0};
  c.hashnet.code_length = 64;
  c.hashnet.train.steps = 5;
  c.hashnet.train.ids_per_batch = 4;
  c.hashnet.train.imgs_per_id = 2;
  c.stego.code_length = 64;
  c.reid.net = NetConfig{{4, 8}, {2, 2}, {}, 3.0, 16};
  c.reid_depth = 2;
  c.reid.train.steps = 6;
  c.reid.train.ids_per_batch = 4;
  c.reid.train.imgs_per_id = 2;
  c.master_seed = 11;
  return c;
}

}  // namespace

TEST(ExperimentConfig, JsonRoundTripPreservesEveryField) {
  ExperimentConfig c = default_experiment_config();
  c.dataset.n_train_ids = 13;
  c.dataset.noise_hi = 0.04;
  c.hashnet.code_length = 256;
  c.hashnet.net.widths = {4, 8};
  c.hashnet.train.lr = 0.125;
  c.stego.strength = 0.07;
  c.stego.chip_seed = 42;
  c.poison.rate = 0.33;
  c.poison.pairing = Pairing::explicit_map;
  c.poison.mode = PoisonPolicy::Mode::replace;
  c.poison.trigger = TriggerKind::sig_ramp;
  c.poison.explicit_targets = {{0, 3}, {2, 5}};
  c.poison.baseline.patch_size = 6;
  c.poison.baseline.patch_pattern = PatchPattern::solid;
  c.poison.baseline.blend_ratio = 0.19;
  c.reid_depth = 2;
  c.reid.net.embed_dim = 32;
  c.eval.k = 7;
  c.eval.cross_camera = false;
  c.with_defenses = true;
  c.prune.fractions = {0.1, 0.3};
  c.prune.finetune_steps = 5;
  c.master_seed = 99;

  ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.poison.explicit_targets, c.poison.explicit_targets);
  EXPECT_EQ(back.poison.baseline.patch_pattern, PatchPattern::solid);
}

TEST(ExperimentConfig, PartialJsonKeepsDefaultsElsewhere) {
  json j = {{"poison", {{"rate", 0.25}}}, {"master_seed", 5}};
  ExperimentConfig c = config_from_json(j);
  EXPECT_DOUBLE_EQ(c.poison.rate, 0.25);
  EXPECT_EQ(c.master_seed, 5u);
  ExperimentConfig d = default_experiment_config();
  EXPECT_EQ(c.hashnet.code_length, d.hashnet.code_length);
  EXPECT_EQ(c.reid.train.steps, d.reid.train.steps);
}

TEST(ExperimentConfig, RejectsUnknownEnumNames) {
  EXPECT_THROW(
      config_from_json(json{{"poison", {{"pairing", "alphabetical"}}}}),
      std::invalid_argument);
  EXPECT_THROW(config_from_json(json{{"poison", {{"trigger", "wanet"}}}}),
               std::invalid_argument);
  EXPECT_THROW(
      config_from_json(
          json{{"poison", {{"baseline", {{"patch_pattern", "plaid"}}}}}}),
      std::invalid_argument);
}

TEST(ExperimentConfig, HashIsStableAndSeedSensitive) {
  ExperimentConfig a = default_experiment_config();
  ExperimentConfig b = default_experiment_config();
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.master_seed = 8;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = default_experiment_config();
  b.stego.strength += 1e-6;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(ExperimentConfig, LoadMissingFileThrows) {
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), std::runtime_error);
}

TEST(PoisonedEval, PartnerPairingIsAnInvolutionOverTestIds) {
  ExperimentConfig c = tiny_config();
  auto ds = generate_dataset(c.dataset, 3);
  auto hp = init_hashnet(c.hashnet, 4);
  PoisonedEval ev = build_poisoned_eval(ds, hp, c.stego, 5);

  ASSERT_EQ(ev.partner.size(), 4u);  // test ids 6..9
  for (const auto& [id, tgt] : ev.partner) {
    EXPECT_NE(id, tgt);
    EXPECT_EQ(ev.partner.at(tgt), id);
    EXPECT_GE(id, c.dataset.n_train_ids);
  }
}

TEST(PoisonedEval, PayloadsComeFromOneGalleryReferencePerId) {
  ExperimentConfig c = tiny_config();
  auto ds = generate_dataset(c.dataset, 3);
  auto hp = init_hashnet(c.hashnet, 4);
  PoisonedEval ev = build_poisoned_eval(ds, hp, c.stego, 5);

  std::map<int, HashCode> code_of;
  for (const auto& [id, key] : ev.reference_key) {
    const PersonImage* ref = ds.find(key);
    ASSERT_NE(ref, nullptr);
    EXPECT_EQ(ref->gt_id, id);
    EXPECT_EQ(ref->role, Role::gallery);
    code_of[id] = hash_identity(ref->pixels, hp);
  }

  // queries carry the partner's code, gallery images their own id's code
  ASSERT_EQ(ev.poisoned_queries.size(), ev.clean_queries.size());
  for (size_t i = 0; i < ev.poisoned_queries.size(); ++i) {
    const auto& q = ev.poisoned_queries[i];
    EXPECT_EQ(q.target_id, ev.partner.at(q.gt_id));
    EXPECT_EQ(extract(*q.pixels, c.stego), code_of.at(q.target_id));
  }
  ASSERT_EQ(ev.marked_gallery.size(), ev.clean_gallery.size());
  for (const auto& g : ev.marked_gallery)
    EXPECT_EQ(extract(*g.pixels, c.stego), code_of.at(g.gt_id));
}

TEST(PoisonedEval, FewerThanTwoTestIdsRejected) {
  ExperimentConfig c = tiny_config();
  auto ds = generate_dataset(c.dataset, 3);
  DatasetManifest one = ds;
  int keep = c.dataset.n_train_ids;  // first test id
  std::erase_if(one.images, [&](const PersonImage& im) {
    return im.role != Role::train && im.gt_id != keep;
  });
  EXPECT_THROW(build_poisoned_eval(one, init_hashnet(c.hashnet, 4), c.stego, 5),
               std::runtime_error);
}

TEST(PoisonedEval, TestIdWithoutGalleryRejected) {
  ExperimentConfig c = tiny_config();
  auto ds = generate_dataset(c.dataset, 3);
  int victim = c.dataset.n_train_ids;
  for (auto& im : ds.images)
    if (im.gt_id == victim && im.role == Role::gallery) im.role = Role::query;
  EXPECT_THROW(build_poisoned_eval(ds, init_hashnet(c.hashnet, 4), c.stego, 5),
               std::runtime_error);
}

TEST(RunExperiment, MismatchedCodeLengthsRejected) {
  ExperimentConfig c = tiny_config();
  c.stego.code_length = 128;  // hashnet stays 64
  EXPECT_THROW(run_experiment(c, scratch_dir("mismatch")),
               std::invalid_argument);
}

TEST(RunExperiment, GammaZeroBackdoorEqualsCleanModel) {
  ExperimentConfig c = tiny_config();
  c.poison.rate = 0.0;
  fs::path dir = scratch_dir("gamma0");
  RunArtifacts art = run_experiment(c, dir);

  EXPECT_EQ(report_to_text(art.report_clean),
            report_to_text(art.report_backdoor));
  EXPECT_EQ(art.report_clean.ssim_mean, 1.0);
  EXPECT_TRUE(std::isinf(art.report_clean.psnr_mean));
  EXPECT_EQ(art.report_clean.distribution_l1, 0.0);
  EXPECT_TRUE(art.records.empty());
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_EQ(slurp(art.report_clean_path), report_to_text(art.report_clean));
  fs::remove_all(dir);
}

TEST(RunExperiment, RerunReusesArtifactsAndFreshDirReproduces) {
  ExperimentConfig c = tiny_config();
  fs::path dir_a = scratch_dir("rerun_a");
  RunArtifacts first = run_experiment(c, dir_a);
  auto backdoor_mtime = fs::last_write_time(first.reid_backdoor_path);
  std::string report1 = slurp(first.report_backdoor_path);

  RunArtifacts second = run_experiment(c, dir_a);
  EXPECT_EQ(fs::last_write_time(second.reid_backdoor_path), backdoor_mtime);
  EXPECT_EQ(slurp(second.report_backdoor_path), report1);

  fs::path dir_b = scratch_dir("rerun_b");
  RunArtifacts third = run_experiment(c, dir_b);
  EXPECT_EQ(slurp(third.report_backdoor_path), report1);
  EXPECT_EQ(report_to_text(third.report_clean),
            report_to_text(first.report_clean));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST(Ablation, SharesDatasetAndHasherAcrossRates) {
  ExperimentConfig c = tiny_config();
  fs::path root = scratch_dir("ablate_rate");
  auto rows = ablate(c, AblationAxis::poison_rate, {0.2, 0.4}, root);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].value, 0.2);
  EXPECT_DOUBLE_EQ(rows[1].value, 0.4);

  int datasets = 0, hashers = 0;
  for (const auto& e : fs::directory_iterator(root / "shared")) {
    std::string n = e.path().filename().string();
    datasets += n.rfind("dataset_", 0) == 0;
    hashers += n.rfind("hashnet_", 0) == 0;
  }
  EXPECT_EQ(datasets, 1);
  EXPECT_EQ(hashers, 1);

  std::string csv = slurp(root / "ablation.csv");
  EXPECT_NE(csv.find("value,ba,asr_targeted\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  fs::remove_all(root);
}

TEST(Ablation, RejectsBadAxisValues) {
  ExperimentConfig c = tiny_config();
  fs::path root = scratch_dir("ablate_bad");
  EXPECT_THROW(ablate(c, AblationAxis::poison_rate, {}, root),
               std::invalid_argument);
  EXPECT_THROW(ablate(c, AblationAxis::poison_rate, {1.5}, root),
               std::invalid_argument);
  EXPECT_THROW(ablate(c, AblationAxis::code_length, {100}, root),
               std::invalid_argument);
  EXPECT_THROW(ablate(c, AblationAxis::code_length, {64.5}, root),
               std::invalid_argument);
  fs::remove_all(root);
}

TEST(Reporting, ComparisonTableFormatsRunsPerRow) {
  EvalReport r;
  r.ba = 0.5;
  r.rank10 = 0.25;
  r.ssim_mean = 1.0;
  r.psnr_mean = std::numeric_limits<double>::infinity();
  std::string t = comparison_table({{"ours", r}});
  EXPECT_EQ(t, "name,ba,one_minus_rank10,ssim,psnr\nours,0.5,0.75,1,inf\n");
  EXPECT_THROW(comparison_table({}), std::invalid_argument);
}

TEST(Reporting, RadarSeriesNormalizesEachAxisToUnitRange) {
  EvalReport r;
  r.ba = 0.8;
  r.rank10 = 0.1;
  r.ssim_mean = 0.97;
  r.psnr_mean = 25.0;
  auto s = radar_series(r);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0].first, "ba");
  EXPECT_DOUBLE_EQ(s[0].second, 0.8);
  EXPECT_DOUBLE_EQ(s[1].second, 0.9);
  EXPECT_DOUBLE_EQ(s[2].second, 0.97);
  EXPECT_DOUBLE_EQ(s[3].second, 0.5);

  r.psnr_mean = std::numeric_limits<double>::infinity();
  r.ssim_mean = -0.2;
  auto t = radar_series(r);
  EXPECT_DOUBLE_EQ(t[2].second, 0.0);
  EXPECT_DOUBLE_EQ(t[3].second, 1.0);
}

TEST(Reporting, DistributionTableRowsSumToTotals) {
  DistributionShift shift;
  shift.before_counts = {{0, 3}, {1, 2}};
  shift.after_counts = {{0, 3}};
  EXPECT_EQ(distribution_table(shift),
            "id,count_before,count_after\n0,3,3\n1,2,0\ntotal,5,3\n");
}
