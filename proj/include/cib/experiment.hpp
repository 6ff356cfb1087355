#pragma once

// Config-driven experiment runner: beta sweeps, bound-variant and estimator
// ablations on the synthetic task, with JSON-lines + CSV results.
//
// Config (TOML):
//   name, seeds, output_dir
//   [task]     TaskConfig fields
//   [model]    ModelConfig fields
//   [cib]      beta, variant, upper_estimator, lower_estimator, learning_rate,
//              batch_size, warmup_steps, epochs
//   [sweep]    parameter = "beta", grid (defaults to default_beta_grid())
//   [ablation] variants = [...], estimators = [[upper, lower], ...]
//
// Grid points are the product sweep.grid x ablation.variants x
// ablation.estimators, each axis defaulting to the single value in [cib].
// Each (seed, point) trains on the dataset generated from that seed.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cib/objective.hpp"
#include "cib/robustness.hpp"
#include "cib/toy_vqa.hpp"

namespace cib {

const std::vector<double>& default_beta_grid();

// Rejections carry the dotted field path, e.g. "cib.beta: must be >= 0".
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SweepSpec {
  std::string parameter = "beta";
  std::vector<double> grid = default_beta_grid();
};

struct AblationSpec {
  std::vector<BoundVariant> variants;
  std::vector<std::pair<Estimator, Estimator>> estimators;
};

struct ExperimentConfig {
  std::string name = "experiment";
  TaskConfig task;
  ModelConfig model;
  CIBConfig cib;
  std::vector<std::uint64_t> seeds = {0};
  std::optional<SweepSpec> sweep;
  AblationSpec ablation;
  std::string output_dir = "results";

  void validate() const;
  // Canonical JSON of everything except output_dir.
  std::string canonical_json() const;
  // SHA-256 hex of canonical_json().
  std::string hash() const;
  // Every training configuration, in run order (seed not set).
  std::vector<CIBConfig> grid_points() const;
};

ExperimentConfig parse_experiment_config(const std::string& toml_text);
ExperimentConfig load_experiment_config(const std::string& path);

struct ResultsRecord {
  std::string config_hash;
  std::string name;
  std::uint64_t seed = 0;
  std::size_t point = 0;
  double beta = 0.0;
  BoundVariant variant = BoundVariant::kFull;
  Estimator upper_estimator = Estimator::kClub;
  Estimator lower_estimator = Estimator::kNwj;
  // Named numbers: training metrics, per-split accuracy, CS, flips, gaps.
  std::vector<std::pair<std::string, double>> metrics;
  double wall_clock_seconds = 0.0;

  double metric(const std::string& key) const;
};

// Flat JSON object; both results files are written from this one function.
// Wall-clock time is excluded so identical runs give identical bytes.
std::vector<std::pair<std::string, std::string>> record_fields(const ResultsRecord& r);
std::string to_json_line(const ResultsRecord& r);
std::string csv_header(const ResultsRecord& r);
std::string csv_row(const ResultsRecord& r);
ResultsRecord record_from_json(const std::string& line);
std::vector<ResultsRecord> read_results(const std::string& jsonl_path);

// One (seed, grid point) run: dataset, training, robustness metrics.
ResultsRecord run_single(const ExperimentConfig& cfg, const CIBConfig& point, std::size_t point_index,
                         std::uint64_t seed);

struct RunOptions {
  bool write_files = true;
  std::function<void(const ResultsRecord&)> on_record;
};

// Writes results.jsonl, results.csv and timings.csv under output_dir, each
// record flushed as soon as it finishes. A failing run rethrows after the
// completed records are on disk.
std::vector<ResultsRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct SweepRow {
  double beta = 0.0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over seeds, 0 for one seed
  std::size_t n = 0;
  bool argmax = false;
};

// One row per beta, ascending; exactly one argmax row, ties to the smaller beta.
std::vector<SweepRow> sweep_summary(const std::vector<ResultsRecord>& records,
                                    const std::string& metric = "acc_counterexample");
std::string sweep_table_markdown(const std::vector<SweepRow>& rows, const std::string& metric);
std::string sweep_table_csv(const std::vector<SweepRow>& rows);

struct AblationReport {
  std::string markdown;
  std::string variant_csv;
  std::string estimator_csv;
  std::vector<std::string> missing;
};

// Mean +- std over seeds per variant and per (upper, lower) estimator pair.
// Cells without records are listed in `missing`.
AblationReport ablation_report(const std::vector<ResultsRecord>& records,
                               const std::string& metric = "acc_counterexample");

}  // namespace cib
