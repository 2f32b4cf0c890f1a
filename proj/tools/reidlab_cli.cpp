// Command-line front end for the poisoning laboratory: dataset generation,
// hashing, steganography, poisoning, victim training, evaluation, defenses,
// ablations and report aggregation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "reidlab/dataset.hpp"
#include "reidlab/defenses.hpp"
#include "reidlab/evalharness.hpp"
#include "reidlab/experiment.hpp"
#include "reidlab/idhash.hpp"
#include "reidlab/poison.hpp"
#include "reidlab/reidcore.hpp"
#include "reidlab/stego.hpp"

namespace fs = std::filesystem;
using namespace reidlab;

namespace {

ExperimentConfig load_or_default(const std::string& config_path,
                                 uint64_t seed_override, bool seed_set) {
  ExperimentConfig cfg = config_path.empty()
                             ? default_experiment_config()
                             : load_config(config_path);
  if (seed_set) cfg.master_seed = seed_override;
  return cfg;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) values.push_back(std::stod(item));
  return values;
}

void print_report(const EvalReport& r, std::ostream& os) {
  os << report_to_text(r);
}

void ensure_parent(const fs::path& p) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ReID backdoor laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  uint64_t seed = 7;
  bool seed_set = false;
  app.add_option("--config", config_path, "experiment config JSON")
      ->expected(1);
  app.add_option("--out", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");

  // gen
  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  int g_train_ids = -1, g_test_ids = -1, g_imgs = -1, g_cams = -1;
  gen->add_option("--train-ids", g_train_ids);
  gen->add_option("--test-ids", g_test_ids);
  gen->add_option("--imgs-per-id", g_imgs);
  gen->add_option("--cams", g_cams);

  // train-hash
  auto* th = app.add_subcommand("train-hash", "train the identity hasher");
  std::string th_data, th_out;
  int th_code_length = -1, th_steps = -1;
  th->add_option("--data", th_data, "dataset directory")->required();
  th->add_option("--model-out", th_out, "default <out>/hashnet.bin");
  th->add_option("--code-length", th_code_length);
  th->add_option("--steps", th_steps);

  // hash
  auto* hash_cmd = app.add_subcommand("hash", "print an image's identity code");
  std::string h_model, h_image;
  hash_cmd->add_option("--model", h_model, "hash model blob")->required();
  hash_cmd->add_option("--image", h_image, "ppm image")->required();

  // stego embed / extract
  auto* stego_cmd = app.add_subcommand("stego", "embed or extract codes");
  stego_cmd->require_subcommand(1);
  auto* se = stego_cmd->add_subcommand("embed");
  auto* sx = stego_cmd->add_subcommand("extract");
  std::string se_image, se_code, se_out, sx_image;
  double se_strength = StegoParams{}.strength;
  se->add_option("--image", se_image)->required();
  se->add_option("--code", se_code, "payload as hex")->required();
  se->add_option("--out", se_out)->required();
  se->add_option("--strength", se_strength);
  sx->add_option("--image", sx_image)->required();
  double sx_strength = StegoParams{}.strength;
  int sx_length = StegoParams{}.code_length;
  sx->add_option("--strength", sx_strength);
  sx->add_option("--length", sx_length, "payload bit count");

  // poison
  auto* po = app.add_subcommand("poison", "build the poisoned training set");
  std::string po_data, po_hashnet, po_pairing, po_trigger;
  double po_rate = -1;
  po->add_option("--data", po_data)->required();
  po->add_option("--hashnet", po_hashnet)->required();
  po->add_option("--rate", po_rate);
  po->add_option("--pairing", po_pairing);
  po->add_option("--trigger", po_trigger);

  // train-reid
  auto* tr = app.add_subcommand("train-reid", "train the victim model");
  std::string tr_data, tr_out;
  int tr_steps = -1, tr_depth = -1;
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--model-out", tr_out, "default <out>/reid.bin");
  tr->add_option("--steps", tr_steps);
  tr->add_option("--depth", tr_depth);

  // reid rank
  auto* reid_cmd = app.add_subcommand("reid", "victim model utilities");
  reid_cmd->require_subcommand(1);
  auto* rr = reid_cmd->add_subcommand("rank", "rank a query against a gallery");
  std::string rr_model, rr_query, rr_data;
  int rr_k = 10;
  rr->add_option("--model", rr_model)->required();
  rr->add_option("--query", rr_query)->required();
  rr->add_option("--data", rr_data, "dataset directory (gallery role)")
      ->required();
  rr->add_option("--k", rr_k);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run the metric suite");
  std::string ev_data, ev_hashnet, ev_model, ev_mode = "targeted";
  int ev_k = -1;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--hashnet", ev_hashnet)->required();
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--mode", ev_mode, "targeted|nontargeted|clean");
  ev->add_option("--k", ev_k);

  // defend
  auto* def = app.add_subcommand("defend", "run defense analogs");
  def->require_subcommand(1);
  auto* df = def->add_subcommand("freq", "frequency-artifact detector");
  auto* dp = def->add_subcommand("prune", "fine-pruning curve");
  std::string dp_schedule;
  dp->add_option("--schedule", dp_schedule, "comma-separated fractions");

  // ablate
  auto* ab = app.add_subcommand("ablate", "sweep one experiment axis");
  std::string ab_axis = "poison_rate", ab_values;
  ab->add_option("--axis", ab_axis, "poison_rate|code_length")->required();
  ab->add_option("--values", ab_values, "comma-separated values")->required();

  // report
  auto* rp = app.add_subcommand("report", "aggregate run reports");
  std::vector<std::string> rp_runs;
  rp->add_option("--run", rp_runs, "NAME=RUN_DIR (repeatable)")->required();

  // run
  auto* run = app.add_subcommand("run", "full pipeline");
  bool run_defend = false;
  run->add_flag("--defend", run_defend, "include the defense stage");

  CLI11_PARSE(app, argc, argv);
  seed_set = seed_opt->count() > 0;

  try {
    if (*gen) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (g_train_ids > 0) cfg.dataset.n_train_ids = g_train_ids;
      if (g_test_ids > 0) cfg.dataset.n_test_ids = g_test_ids;
      if (g_imgs > 0) cfg.dataset.imgs_per_id = g_imgs;
      if (g_cams > 0) cfg.dataset.n_cams = g_cams;
      // same derivation as the pipeline, so `run` can reuse this dataset
      auto m =
          generate_dataset(cfg.dataset, derive_seed(cfg.master_seed, "dataset"));
      save_dataset(m, out_dir);
      std::cout << "wrote " << m.images.size() << " images to " << out_dir
                << "\n";
    } else if (*th) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (th_code_length > 0) cfg.hashnet.code_length = th_code_length;
      if (th_steps >= 0) cfg.hashnet.train.steps = th_steps;
      if (th_out.empty()) th_out = (fs::path(out_dir) / "hashnet.bin").string();
      auto ds = load_dataset(th_data);
      HashNetParams hp =
          init_hashnet(cfg.hashnet, derive_seed(cfg.master_seed, "hash"));
      TrainConfig tc = cfg.hashnet.train;
      tc.seed = derive_seed(cfg.master_seed, "hash-train");
      auto log = train_hashnet(hp, ds.with_role(Role::train), tc);
      ensure_parent(th_out);
      save_hashnet(hp, th_out, 0);
      std::cout << "trained hasher (" << log.loss.size() << " steps) -> "
                << th_out << "\n";
    } else if (*hash_cmd) {
      auto hp = load_hashnet(h_model, 0);
      std::cout << hash_identity(load_ppm(h_image), hp).to_hex() << "\n";
    } else if (*se) {
      StegoParams p;
      p.strength = se_strength;
      HashCode code = HashCode::from_hex(se_code);
      p.code_length = code.length();
      auto poisoned = embed(load_ppm(se_image), code, p);
      ensure_parent(se_out);
      save_ppm(se_out, poisoned.pixels);
      std::cout << "embedded " << code.length() << " bits -> " << se_out
                << "\n";
    } else if (*sx) {
      StegoParams p;
      p.strength = sx_strength;
      p.code_length = sx_length;
      std::cout << extract(load_ppm(sx_image), p).to_hex() << "\n";
    } else if (*po) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (po_rate >= 0) cfg.poison.rate = po_rate;
      if (!po_pairing.empty()) cfg.poison.pairing = pairing_from_name(po_pairing);
      if (!po_trigger.empty()) cfg.poison.trigger = trigger_from_name(po_trigger);
      auto ds = load_dataset(po_data);
      auto hp = load_hashnet(po_hashnet, 0);
      auto res = poison_train_set(ds, cfg.poison, hp, cfg.stego,
                                  derive_seed(cfg.master_seed, "poison"));
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      save_dataset(res.manifest, out_dir);
      save_poison_records(res.records, fs::path(out_dir) / "poison_records", 0);
      std::cout << res.records.size() << " poisoned images -> " << out_dir
                << "\n";
    } else if (*tr) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (tr_steps >= 0) cfg.reid.train.steps = tr_steps;
      if (tr_depth > 0) cfg.reid_depth = tr_depth;
      if (tr_out.empty()) tr_out = (fs::path(out_dir) / "reid.bin").string();
      auto ds = load_dataset(tr_data);
      ReidConfig rc = cfg.reid;
      rc.net = reid_net_for_depth(cfg.reid, cfg.reid_depth);
      EmbeddingModel m = init_reid(rc, derive_seed(cfg.master_seed, "reid"));
      TrainConfig tc = cfg.reid.train;
      tc.seed = derive_seed(cfg.master_seed, "reid-train");
      auto log = train_reid(m, ds.with_role(Role::train), tc);
      ensure_parent(tr_out);
      save_reid(m, tr_out, 0);
      std::cout << "trained victim (" << log.loss.size() << " steps) -> "
                << tr_out << "\n";
    } else if (*rr) {
      auto model = load_reid(rr_model, 0);
      auto ds = load_dataset(rr_data);
      auto gallery = ds.with_role(Role::gallery);
      auto entries = rank(model, load_ppm(rr_query), gallery, rr_k);
      for (size_t i = 0; i < entries.size(); ++i)
        std::cout << i + 1 << "," << gallery[entries[i].gallery_index]->key
                  << "," << entries[i].distance << "\n";
    } else if (*ev) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (ev_k > 0) cfg.eval.k = ev_k;
      auto ds = load_dataset(ev_data);
      auto hp = load_hashnet(ev_hashnet, 0);
      auto model = load_reid(ev_model, 0);
      PoisonedEval pe = build_poisoned_eval(
          ds, hp, cfg.stego, derive_seed(cfg.master_seed, "eval"));
      EvalReport r;
      if (ev_mode == "clean") {
        EvalSet clean = build_eval_set(model, pe.clean_queries, pe.clean_gallery);
        auto ba = benign_accuracy(clean, cfg.eval);
        r.ba = ba.rate;
        r.n_excluded = ba.excluded;
        r.rank1 = rank_k_rate(clean, cfg.eval, 1);
        r.rank5 = rank_k_rate(clean, cfg.eval, 5);
        r.rank10 = rank_k_rate(clean, cfg.eval, 10);
        r.map = map_metric(clean, cfg.eval);
        r.n_queries_clean = clean.n_queries();
      } else if (ev_mode == "targeted" || ev_mode == "nontargeted") {
        r = exp_detail::evaluate_model(model, pe, cfg.eval);
      } else {
        throw std::invalid_argument("mode must be targeted|nontargeted|clean");
      }
      print_report(r, std::cout);
      fs::create_directories(out_dir);
      std::ofstream f(fs::path(out_dir) / ("report_" + ev_mode + ".txt"),
                      std::ios::binary);
      print_report(r, f);
    } else if (*df || *dp) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      cfg.with_defenses = true;
      if (!dp_schedule.empty()) {
        cfg.prune.fractions = parse_values(dp_schedule);
      }
      auto art = run_experiment(cfg, out_dir);
      if (*df) {
        std::cout << "flag_rate_clean=" << art.freq_clean_rate << "\n"
                  << "flag_rate_badnets=" << art.freq_badnets_rate << "\n"
                  << "flag_rate_dynamic=" << art.freq_dynamic_rate << "\n";
      } else {
        std::cout << "fraction,ba,asr\n";
        for (const auto& st : art.prune_curve)
          std::cout << st.fraction << "," << st.ba << "," << st.asr << "\n";
      }
    } else if (*ab) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      AblationAxis axis;
      if (ab_axis == "poison_rate") axis = AblationAxis::poison_rate;
      else if (ab_axis == "code_length") axis = AblationAxis::code_length;
      else throw std::invalid_argument("axis must be poison_rate|code_length");
      auto rows = ablate(cfg, axis, parse_values(ab_values), out_dir);
      std::cout << "value,ba,asr_targeted\n";
      for (const auto& r : rows)
        std::cout << r.value << "," << r.report.ba << ","
                  << r.report.asr_targeted << "\n";
    } else if (*rp) {
      std::vector<std::pair<std::string, EvalReport>> runs;
      for (const auto& spec : rp_runs) {
        auto eq = spec.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("--run expects NAME=RUN_DIR");
        std::string name = spec.substr(0, eq);
        fs::path dir = spec.substr(eq + 1);
        std::ifstream f(dir / "report_backdoor.txt");
        if (!f)
          throw std::runtime_error("missing artifacts: " +
                                   (dir / "report_backdoor.txt").string());
        std::stringstream ss;
        ss << f.rdbuf();
        runs.push_back({name, report_from_text(ss.str())});
      }
      std::cout << comparison_table(runs);
      for (const auto& [name, r] : runs) {
        std::cout << "radar:" << name;
        for (const auto& [axis_name, v] : radar_series(r))
          std::cout << " " << axis_name << "=" << v;
        std::cout << "\n";
      }
      fs::create_directories(out_dir);
      std::ofstream f(fs::path(out_dir) / "comparison.csv", std::ios::binary);
      f << comparison_table(runs);
    } else if (*run) {
      ExperimentConfig cfg = load_or_default(config_path, seed, seed_set);
      if (run_defend) cfg.with_defenses = true;
      auto art = run_experiment(cfg, out_dir);
      for (const auto& w : art.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "== clean model ==\n";
      print_report(art.report_clean, std::cout);
      std::cout << "== backdoored model ==\n";
      print_report(art.report_backdoor, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
