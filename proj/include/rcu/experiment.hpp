#pragma once

// Experiment driver: configuration, the continual-unlearning loop, the
// beta sweep, and report emission.

#include "rcu/compensator.hpp"
#include "rcu/lora.hpp"
#include "rcu/matrix.hpp"
#include "rcu/ood.hpp"
#include "rcu/tasks.hpp"
#include "rcu/toymodel.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rcu::harness {

// Ablation arms. Names double as the CLI --ablation values.
enum class Ablation {
  none,
  no_plane_loss,      // drop the cross-request plane-keeping loss
  no_skew_loss,       // drop the skew-steering loss
  no_rotation,        // additive adapter updates, no scaling control
  no_alignment_loss,  // drop the detector's feature-decorrelation loss
};

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& name);

enum class BetaResolution { per_input, per_dataset_mean };

struct ExperimentConfig {
  std::uint64_t seed = 1;
  toy::CompositionMode composition = toy::CompositionMode::stacked;
  BetaResolution beta_resolution = BetaResolution::per_input;
  Ablation ablation = Ablation::none;
  std::string y_prime_policy = "refuse";  // "refuse" | "random"

  toy::ModelConfig model;
  TaskConfig tasks;
  toy::PretrainConfig pretrain;
  toy::TrainConfig training;
  ood::DetectorConfig detector;
  compensator::CompensatorConfig comp;
};

// Strict JSON loader: every field must be present (presets fill the
// compensator section); unknown keys are rejected. See configs/toy_qa.json.
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig default_config();  // the shipped toy configuration

// ---------------------------------------------------------------------------
// request records
// ---------------------------------------------------------------------------

struct BetaStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

// One completed request. Immutable once frozen: setters throw afterwards.
class RequestRecord {
 public:
  RequestRecord(int request_index, std::string detector_id);

  void set_metrics(double su, double du, double rd, double util1,
                   double util2);
  void set_du_history(std::vector<double> du_after_current);
  void set_training_stats(double refusal_acc, double skew_ratio_max,
                          double max_ba_entry, double plane_overlap_init,
                          double plane_overlap_final);
  void set_beta_stats(std::map<std::string, BetaStats> stats);
  void freeze();

  bool frozen() const { return frozen_; }
  int request_index() const { return request_index_; }
  const std::string& detector_id() const { return detector_id_; }
  double su() const { return su_; }
  double du() const { return du_; }
  double rd() const { return rd_; }
  double utility1() const { return utility1_; }
  double utility2() const { return utility2_; }
  // du_history()[s] = accuracy on request (s+1)'s unlearn test set measured
  // after THIS request finished; last entry equals du().
  const std::vector<double>& du_history() const { return du_history_; }
  double refusal_accuracy() const { return refusal_accuracy_; }
  double skew_ratio_max() const { return skew_ratio_max_; }
  double max_ba_entry() const { return max_ba_entry_; }
  double plane_overlap_init() const { return plane_overlap_init_; }
  double plane_overlap_final() const { return plane_overlap_final_; }
  const std::map<std::string, BetaStats>& beta_stats() const {
    return beta_stats_;
  }

 private:
  void ensure_mutable() const;

  bool frozen_ = false;
  int request_index_;
  std::string detector_id_;
  double su_ = 0.0, du_ = 0.0, rd_ = 0.0, utility1_ = 0.0, utility2_ = 0.0;
  std::vector<double> du_history_;
  double refusal_accuracy_ = 0.0;
  double skew_ratio_max_ = 0.0;
  double max_ba_entry_ = 0.0;
  double plane_overlap_init_ = 0.0;
  double plane_overlap_final_ = 0.0;
  std::map<std::string, BetaStats> beta_stats_;
};

// ---------------------------------------------------------------------------
// continual run
// ---------------------------------------------------------------------------

struct BaseMetrics {
  std::vector<double> unlearn_train;  // base accuracy per request's train set
  std::vector<double> unlearn_test;
  double retained = 0.0;
  double utility1 = 0.0;
  double utility2 = 0.0;
};

struct ContinualResult {
  toy::ToyAttentionModel base;
  TaskSuite tasks;
  BaseMetrics base_metrics;
  std::vector<RequestRecord> records;
  std::vector<std::vector<lora::LoraPair>> adapters;   // per request
  std::vector<ood::OodModel> detectors;                // per request
  std::vector<std::vector<toy::TrainStepLog>> train_logs;
};

// The task suite and pretrained base exactly as run_continual builds them
// internally (same derived seeds), exposed so the CLI's `pretrain` and
// `sweep` subcommands and the tests can share work with `run`.
TaskSuite tasks_for(const ExperimentConfig& cfg);
toy::ToyAttentionModel pretrain_base(const ExperimentConfig& cfg,
                                     const TaskSuite& suite,
                                     toy::PretrainResult* stats = nullptr);

// The per-request unlearning batch (inputs plus replacement labels) exactly
// as run_continual builds it; request_index is 1-based.
toy::UnlearnBatch unlearn_batch_for(const ExperimentConfig& cfg,
                                    const TaskSuite& suite,
                                    int request_index);

// Adapter training config for one request under the config's ablation arm
// (loss weights zeroed / additive mode applied), with the derived seed.
toy::TrainConfig train_config_for(const ExperimentConfig& cfg,
                                  int request_index);

// Runs the full pipeline: task generation, base pretraining (or reuse of a
// caller-provided base), then per request: detector training, adapter
// training, metric evaluation with beta resolved through detector +
// compensator. Deterministic given the config.
ContinualResult run_continual(const ExperimentConfig& cfg);
ContinualResult run_continual(const ExperimentConfig& cfg,
                              const toy::ToyAttentionModel* pretrained_base,
                              const TaskSuite* ready_tasks);

// ---------------------------------------------------------------------------
// beta sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  double beta = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

std::vector<SweepPoint> beta_sweep(const toy::ToyAttentionModel& model,
                                   std::span<const lora::LoraPair> adapters,
                                   const toy::Dataset& unlearn_train,
                                   const toy::Dataset& unlearn_test,
                                   std::span<const double> grid);

std::vector<double> default_beta_grid();  // 0, 0.05, ..., 1

struct SweepShape {
  bool monotone_within_tol = false;  // never > 2 points above the running min
  bool flat_head = false;  // >= 2 leading points within 2 points of the start
  bool has_fall = false;   // total drop of at least 30 points
  bool flat_tail = false;  // terminal plateau: >= 3 trailing points within
                           // 1 point of the final value
  double head_acc = 0.0;
  double tail_acc = 0.0;
  double max_increase = 0.0;  // largest rise above the running minimum
  // Recorded breakpoints (descriptive, not asserted): the last beta still
  // inside the flat head and the first beta of the terminal plateau.
  double fall_start_beta = 0.0;
  double fall_end_beta = 0.0;
};

SweepShape analyze_sweep(std::span<const SweepPoint> points);

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

// Writes records.jsonl, metrics.csv, training_log.jsonl, and
// config_echo.json into out_dir. Deterministic: identical inputs produce
// byte-identical files. Throws std::invalid_argument on empty records and
// std::runtime_error on I/O failure.
void emit_report(const ContinualResult& result, const ExperimentConfig& cfg,
                 const std::string& out_dir);

void emit_sweep(std::span<const SweepPoint> points, const std::string& path);

// Re-derives metrics.csv from an existing records.jsonl (the `report`
// subcommand).
void rewrite_metrics_csv(const std::string& records_path,
                         const std::string& csv_path);

}  // namespace rcu::harness
