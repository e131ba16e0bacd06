// Command-line front end for the rotation-steered unlearning laboratory.
//
//   rcu_lab pretrain  --config c.json --out dir       fit and save the base model
//   rcu_lab run       --config c.json --out dir       full continual run + report
//   rcu_lab verify    --seed 1 [--dim 8]              rotation math verification
//   rcu_lab sweep     --config c.json --out dir       global-scale sweep, request 1
//   rcu_lab report    --out dir                       rebuild metrics.csv from records

#include <CLI11.hpp>

#include "rcu/experiment.hpp"
#include "rcu/rotmath.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

namespace {

using namespace rcu;

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string ablation;
  std::string composition;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_arms) {
  cmd->add_option("--config", o.config_path,
                  "JSON config file (defaults to the built-in toy setup)");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "override the config seed")
      ->each([&o](const std::string&) { o.seed_set = true; });
  if (with_arms) {
    cmd->add_option("--ablation", o.ablation,
                    "none | no-plane-loss | no-skew-loss | no-rotation | "
                    "no-alignment-loss");
    cmd->add_option("--composition", o.composition,
                    "stacked | from-base (how request updates compose)");
  }
}

harness::ExperimentConfig resolve_config(const CommonOpts& o) {
  harness::ExperimentConfig cfg = o.config_path.empty()
                                      ? harness::default_config()
                                      : harness::load_config(o.config_path);
  if (o.seed_set) cfg.seed = o.seed;
  if (!o.ablation.empty()) cfg.ablation = harness::parse_ablation(o.ablation);
  if (!o.composition.empty()) {
    if (o.composition == "stacked") {
      cfg.composition = toy::CompositionMode::stacked;
    } else if (o.composition == "from-base") {
      cfg.composition = toy::CompositionMode::from_base;
    } else {
      throw std::invalid_argument("--composition must be stacked or from-base");
    }
  }
  return cfg;
}

int cmd_pretrain(const CommonOpts& o) {
  const harness::ExperimentConfig cfg = resolve_config(o);
  const harness::TaskSuite suite = harness::tasks_for(cfg);
  toy::PretrainResult stats;
  const toy::ToyAttentionModel base = harness::pretrain_base(cfg, suite, &stats);

  std::filesystem::create_directories(o.out_dir);
  const std::string path =
      (std::filesystem::path(o.out_dir) / "base_model.bin").string();
  toy::save_model(path, base);

  const toy::EffectiveWeights eff = toy::base_weights(base);
  std::printf("pretrain: %d steps, train_ce %.4f, train_acc %.4f\n",
              stats.steps, stats.final_ce, stats.train_accuracy);
  for (std::size_t t = 0; t < suite.unlearn_train.size(); ++t) {
    std::printf("  unlearn_train[%zu] acc %.4f   unlearn_test[%zu] acc %.4f\n",
                t + 1, toy::evaluate(base, eff, suite.unlearn_train[t]), t + 1,
                toy::evaluate(base, eff, suite.unlearn_test[t]));
  }
  std::printf("  retained acc %.4f   utility1 acc %.4f   utility2 acc %.4f\n",
              toy::evaluate(base, eff, suite.retained),
              toy::evaluate(base, eff, suite.utility1),
              toy::evaluate(base, eff, suite.utility2));
  std::printf("saved %s\n", path.c_str());
  return 0;
}

int cmd_run(const CommonOpts& o) {
  const harness::ExperimentConfig cfg = resolve_config(o);
  const harness::ContinualResult res = harness::run_continual(cfg);
  harness::emit_report(res, cfg, o.out_dir);

  const std::filesystem::path dir(o.out_dir);
  toy::save_model((dir / "base_model.bin").string(), res.base);
  for (std::size_t t = 0; t < res.adapters.size(); ++t) {
    lora::AdapterCheckpoint ckpt;
    ckpt.request_index = static_cast<int>(t + 1);
    ckpt.lambdas = cfg.training.lambdas;
    ckpt.pairs = res.adapters[t];
    save_adapters(
        (dir / ("adapters_request_" + std::to_string(t + 1) + ".bin"))
            .string(),
        ckpt);
    ood::save_detector(
        (dir / ("detector_request_" + std::to_string(t + 1) + ".bin"))
            .string(),
        res.detectors[t]);
  }

  const auto& bm = res.base_metrics;
  std::printf("request  unl_train  unl_test  retained  utility1  utility2\n");
  std::printf("   base     --         --      %8.4f  %8.4f  %8.4f\n",
              bm.retained, bm.utility1, bm.utility2);
  for (const auto& r : res.records) {
    std::printf("%7d  %9.4f  %8.4f  %8.4f  %8.4f  %8.4f\n", r.request_index(),
                r.su(), r.du(), r.rd(), r.utility1(), r.utility2());
  }
  std::printf("report written to %s\n", o.out_dir.c_str());
  return 0;
}

void print_report(const rotmath::VerificationReport& rep, bool expect_pass) {
  const bool ok = rep.passed == expect_pass;
  std::printf("%-34s %-14s max_error %.3e%s\n", rep.name.c_str(),
              ok ? (expect_pass ? "PASS" : "FAIL (expected)")
                 : "UNEXPECTED",
              rep.max_error, rep.note.empty() ? "" : ("  " + rep.note).c_str());
  for (const auto& [k, v] : rep.metrics) {
    std::printf("    %-28s %.6e\n", k.c_str(), v);
  }
}

int cmd_verify(std::uint64_t seed, int dim) {
  Rng rng(seed);
  bool all_ok = true;

  // Random skew generator, scaled so every k in the list keeps k*theta
  // inside the principal branch. The largest rotation angle of a skew matrix
  // is its largest singular value.
  Mat g = rng.gaussian(dim, dim, 1.0);
  Mat c = 0.5 * (g - g.transpose());
  const std::vector<double> ks = {2.0, 3.0, -1.5, 0.5};
  const double max_k = 3.0;
  const double theta_max = Eigen::JacobiSVD<Mat>(c).singularValues()(0);
  c *= 0.8 * std::numbers::pi / (max_k * theta_max);
  const auto scaling = rotmath::verify_scaling_law(c, ks);
  print_report(scaling, true);
  all_ok &= scaling.passed;

  // Two generators on disjoint planes of a shared random orthonormal frame:
  // composition must be additive.
  Mat q = Eigen::HouseholderQR<Mat>(rng.gaussian(dim, dim, 1.0))
              .householderQ();
  auto plane_gen = [&](int i, int j, double theta) {
    return Mat(theta * (q.col(i) * q.col(j).transpose() -
                        q.col(j) * q.col(i).transpose()));
  };
  const auto disjoint = rotmath::verify_orthogonal_composition(
      plane_gen(0, 1, 0.7), plane_gen(2, 3, 0.4));
  print_report(disjoint, true);
  all_ok &= disjoint.passed;

  // Generators sharing a basis vector: additivity is expected to break.
  const auto shared = rotmath::verify_orthogonal_composition(
      plane_gen(0, 1, 0.7), plane_gen(1, 2, 0.4));
  print_report(shared, false);
  all_ok &= !shared.passed;

  std::printf("%s\n", all_ok ? "verification suite: all checks as expected"
                             : "verification suite: UNEXPECTED RESULTS");
  return all_ok ? 0 : 1;
}

int cmd_sweep(const CommonOpts& o) {
  const harness::ExperimentConfig cfg = resolve_config(o);
  const harness::TaskSuite suite = harness::tasks_for(cfg);
  toy::ToyAttentionModel base = harness::pretrain_base(cfg, suite);

  const toy::UnlearnBatch batch = harness::unlearn_batch_for(cfg, suite, 1);
  const toy::TrainConfig tc = harness::train_config_for(cfg, 1);
  const toy::TrainResult tr = toy::train_request(base, batch, {}, tc);

  const std::vector<double> grid = harness::default_beta_grid();
  const std::vector<harness::SweepPoint> points = harness::beta_sweep(
      base, tr.pairs, suite.unlearn_train[0], suite.unlearn_test[0], grid);

  std::filesystem::create_directories(o.out_dir);
  const std::string path =
      (std::filesystem::path(o.out_dir) / "sweep.csv").string();
  harness::emit_sweep(points, path);

  const harness::SweepShape shape = harness::analyze_sweep(points);
  std::printf("beta    train_acc  test_acc\n");
  for (const auto& p : points) {
    std::printf("%.2f    %9.4f  %8.4f\n", p.beta, p.train_acc, p.test_acc);
  }
  std::printf(
      "shape: monotone=%d flat_head=%d has_fall=%d flat_tail=%d "
      "(head %.4f, tail %.4f, max_increase %.4f)\n",
      shape.monotone_within_tol, shape.flat_head, shape.has_fall,
      shape.flat_tail, shape.head_acc, shape.tail_acc, shape.max_increase);
  std::printf("breakpoints: fall starts after beta %.2f, plateau from %.2f\n",
              shape.fall_start_beta, shape.fall_end_beta);
  std::printf("saved %s\n", path.c_str());
  return 0;
}

int cmd_report(const CommonOpts& o) {
  const std::filesystem::path dir(o.out_dir);
  harness::rewrite_metrics_csv((dir / "records.jsonl").string(),
                               (dir / "metrics.csv").string());
  std::printf("rebuilt %s\n", (dir / "metrics.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-steered continual unlearning laboratory"};
  app.require_subcommand(1);

  CommonOpts pre_o, run_o, sweep_o, report_o;
  std::uint64_t verify_seed = 1;
  int verify_dim = 8;

  CLI::App* pre = app.add_subcommand("pretrain", "fit and save the base model");
  add_common(pre, pre_o, false);

  CLI::App* run = app.add_subcommand("run", "full continual unlearning run");
  add_common(run, run_o, true);

  CLI::App* verify =
      app.add_subcommand("verify", "rotation math verification suite");
  verify->add_option("--seed", verify_seed, "generator seed");
  verify->add_option("--dim", verify_dim, "matrix dimension")
      ->check(CLI::Range(4, 64));

  CLI::App* sweep = app.add_subcommand(
      "sweep", "hold the first request's adapters fixed and sweep the "
               "global scale over [0, 1]");
  add_common(sweep, sweep_o, false);

  CLI::App* report = app.add_subcommand(
      "report", "rebuild metrics.csv from records.jsonl in --out");
  add_common(report, report_o, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(pre_o);
    if (run->parsed()) return cmd_run(run_o);
    if (verify->parsed()) return cmd_verify(verify_seed, verify_dim);
    if (sweep->parsed()) return cmd_sweep(sweep_o);
    if (report->parsed()) return cmd_report(report_o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
