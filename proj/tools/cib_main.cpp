#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cib/experiment.hpp"
#include "json.hpp"

using namespace cib;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kViolation = 3;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

ExperimentConfig config_or_default(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out.empty()) cfg.output_dir = g.out;
  return cfg;
}

std::uint64_t seed_of(const Globals& g, const ExperimentConfig& cfg) { return g.seed ? *g.seed : cfg.seeds.front(); }

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Prints to --out when given, else stdout.
void emit(const Globals& g, const std::string& default_name, const std::string& text) {
  if (g.out.empty()) {
    std::cout << text << (text.empty() || text.back() != '\n' ? "\n" : "");
    return;
  }
  fs::path p(g.out);
  if (fs::is_directory(p) || p.extension().empty()) p /= default_name;
  write_file(p, text);
}

int gen_data(const Globals& g) {
  const ExperimentConfig cfg = config_or_default(g);
  const fs::path dir = g.out.empty() ? fs::path("data") : fs::path(g.out);
  const Dataset d = generate_dataset(cfg.task, seed_of(g, cfg));
  write_dataset(d, dir.string());
  std::cerr << "wrote " << d.train.size() << " train examples and " << d.eval.size() << " eval splits to " << dir
            << "\n";
  return kOk;
}

int train_cmd(const Globals& g, const std::string& data_dir) {
  const ExperimentConfig cfg = config_or_default(g);
  const std::uint64_t seed = seed_of(g, cfg);
  const Dataset d = data_dir.empty() ? generate_dataset(cfg.task, seed) : read_dataset(data_dir);
  const fs::path dir = g.out.empty() ? fs::path("run") : fs::path(g.out);
  fs::create_directories(dir);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6d6f64u};
  Rng init(seq);
  ToyModel model(d.cfg, cfg.model, init);
  CIBConfig c = cfg.cib;
  c.seed = seed;
  const TrainResult tr = train(model, d.train, c);

  std::string metrics;
  for (const auto& e : tr.epochs) {
    json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["vqa"] = e.vqa;
    j["regularizer"] = e.reg_total;
    j["i_xv_tv"] = e.i_xv_tv;
    j["i_xl_tl"] = e.i_xl_tl;
    j["i_tv_tl"] = e.i_tv_tl;
    j["d_skl"] = e.d_skl;
    j["train_accuracy"] = e.train_accuracy;
    metrics += j.dump() + "\n";
    std::cerr << "epoch " << e.epoch << " loss " << e.loss << " acc " << e.train_accuracy << "\n";
  }
  write_file(dir / "metrics.jsonl", metrics);
  write_file(dir / "checkpoint.json", checkpoint_to_json(model.params()));
  json run;
  run["seed"] = seed;
  run["steps"] = tr.steps;
  run["config_hash"] = cfg.hash();
  run["config"] = json::parse(cfg.canonical_json());
  write_file(dir / "run.json", run.dump(2) + "\n");
  return kOk;
}

struct EstimateArgs {
  std::string estimator = "club";
  double rho = 0.5;
  std::size_t dim = 1;
  std::size_t n_samples = 10000;
  std::size_t train_steps = 1500;
};

int estimate_cmd(const Globals& g, const EstimateArgs& a) {
  if (!(a.rho > -1.0 && a.rho < 1.0)) throw std::invalid_argument("--rho must lie in (-1, 1)");
  if (a.dim == 0 || a.n_samples < 2) throw std::invalid_argument("--dim must be >= 1 and --n-samples >= 2");
  const Estimator which = parse_estimator(a.estimator);
  const std::uint64_t seed = g.seed.value_or(0);
  Rng rng(seed);
  const double oracle = gaussian_mi_oracle(a.rho, a.dim).value;
  double value = oracle;
  const auto [x, y] = sample_correlated_gaussian(a.rho, a.dim, a.n_samples, rng);
  NoGradGuard guard;
  switch (which) {
    case Estimator::kClub:
    case Estimator::kL1Out: {
      const ConditionalModel cond = gaussian_true_conditional(a.rho, a.dim);
      value = which == Estimator::kClub ? club_upper(x, y, cond).value : l1out_upper(x, y, cond).value;
      break;
    }
    case Estimator::kNwj:
    case Estimator::kInfoNce:
    case Estimator::kMine: {
      Critic critic(a.dim, a.dim, 32, rng);
      CriticTraining t;
      t.steps = a.train_steps;
      t.infonce_steps = a.train_steps;
      const double rho = a.rho;
      const std::size_t d = a.dim;
      const PairSampler sampler = [rho, d](std::size_t n, Rng& r) { return sample_correlated_gaussian(rho, d, n, r); };
      fit_critic(critic, which, sampler, t, rng);
      value = evaluate_lower_bound(critic, which, x, y).value;
      break;
    }
    case Estimator::kGaussianExact:
      break;
    case Estimator::kDiscreteExact:
      throw std::invalid_argument("--estimator discrete_exact has no Gaussian sample form");
  }
  json j;
  j["estimator"] = to_string(which);
  j["value"] = value;
  j["oracle"] = oracle;
  j["n"] = a.n_samples;
  j["seed"] = seed;
  emit(g, "estimate.json", j.dump());
  return kOk;
}

json report_json(const BoundReport& r) {
  json j;
  j["seed"] = r.seed;
  j["dims"] = {r.dims.dx_v, r.dims.dx_l, r.dims.dt_v, r.dims.dt_l};
  j["joint_mi"] = r.joint_mi;
  j["i_xv_tv"] = r.i_xv_tv;
  j["i_xl_tl"] = r.i_xl_tl;
  j["i_tv_tl"] = r.i_tv_tl;
  j["d_skl"] = r.d_skl;
  json checks = json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"variant", to_string(c.variant)}, {"bound", c.bound}, {"slack", c.slack}, {"holds", c.holds}});
  }
  j["checks"] = checks;
  j["all_hold"] = r.all_hold();
  return j;
}

int verify_bounds(const Globals& g, std::size_t n_seeds, const std::vector<std::size_t>& dims) {
  if (dims.size() != 4) throw std::invalid_argument("--dims takes dx_v dx_l dt_v dt_l");
  const SystemDims sd{dims[0], dims[1], dims[2], dims[3]};
  const std::uint64_t first = g.seed.value_or(0);
  json all = json::array();
  std::size_t violations = 0;
  for (std::uint64_t s = first; s < first + n_seeds; ++s) {
    const BoundReport r = verify_bound_ordering(s, sd);
    violations += !r.all_hold();
    all.push_back(report_json(r));
  }
  emit(g, "bounds.json", all.dump(2));
  if (violations > 0) {
    std::cerr << violations << " of " << n_seeds << " systems violate a bound\n";
    return kViolation;
  }
  return kOk;
}

int eval_robustness(const Globals& g, const std::string& model_path, const std::string& data_dir) {
  const ExperimentConfig cfg = config_or_default(g);
  const Dataset d = read_dataset(data_dir);
  Rng rng(0);
  ToyModel model(d.cfg, cfg.model, rng);
  load_checkpoint(read_file(model_path), model.params());
  emit(g, "robustness.json", to_json(evaluate_robustness(model, d, cfg.cib)));
  return kOk;
}

int sweep_cmd(const Globals& g) {
  if (g.config.empty()) throw ConfigError("config: sweep needs --config");
  const ExperimentConfig cfg = config_or_default(g);
  const std::size_t total = cfg.grid_points().size() * cfg.seeds.size();
  std::size_t done = 0;
  RunOptions opts;
  opts.on_record = [&](const ResultsRecord& r) {
    std::fprintf(stderr, "[%zu/%zu] seed %llu beta %g %s %s/%s: acc_counterexample %.4f (%.1fs)\n", ++done, total,
                 static_cast<unsigned long long>(r.seed), r.beta, to_string(r.variant).c_str(),
                 to_string(r.upper_estimator).c_str(), to_string(r.lower_estimator).c_str(),
                 r.metric("acc_counterexample"), r.wall_clock_seconds);
  };
  run_experiment(cfg, opts);
  std::cerr << "results in " << cfg.output_dir << "\n";
  return kOk;
}

int report_cmd(const Globals& g, const std::string& results, const std::string& metric) {
  const auto records = read_results(results);
  if (records.empty()) throw std::runtime_error(results + " holds no records");
  const fs::path dir = g.out.empty() ? fs::path(results).parent_path() : fs::path(g.out);
  std::string md = "# " + records.front().name + "\n\n";
  bool homogeneous = true;
  try {
    const auto rows = sweep_summary(records, metric);
    md += "## Beta sweep\n\n" + sweep_table_markdown(rows, metric) + "\n";
    write_file(dir / "sweep.csv", sweep_table_csv(rows));
  } catch (const std::invalid_argument&) {
    homogeneous = false;
  }
  if (!homogeneous || records.front().variant != records.back().variant) {
    const AblationReport rep = ablation_report(records, metric);
    md += "## Ablation\n\n" + rep.markdown;
    write_file(dir / "variants.csv", rep.variant_csv);
    write_file(dir / "estimators.csv", rep.estimator_csv);
  }
  write_file(dir / "report.md", md);
  std::cout << md;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Correlation information bottleneck experiments"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--config", g.config, "TOML experiment config")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  std::string data_dir;
  auto* tr = app.add_subcommand("train", "Train one model, write checkpoint and metrics");
  tr->add_option("--data", data_dir, "Dataset directory (generated from the seed when omitted)");

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate MI of a correlated Gaussian pair");
  est->add_option("--estimator", ea.estimator, "club, l1out, nwj, infonce, mine or gaussian_exact")->capture_default_str();
  est->add_option("--rho", ea.rho)->capture_default_str();
  est->add_option("--dim", ea.dim)->capture_default_str();
  est->add_option("--n-samples", ea.n_samples)->capture_default_str();
  est->add_option("--train-steps", ea.train_steps, "Critic training steps")->capture_default_str();

  std::size_t n_seeds = 100;
  std::vector<std::size_t> dims = {3, 3, 2, 2};
  auto* vb = app.add_subcommand("verify-bounds", "Check bound orderings on random linear-Gaussian systems");
  vb->add_option("--seeds", n_seeds, "Number of systems")->capture_default_str();
  vb->add_option("--dims", dims, "dx_v dx_l dt_v dt_l")->expected(4);

  std::string model_path, eval_data;
  auto* er = app.add_subcommand("eval-robustness", "Robustness metrics for a trained checkpoint");
  er->add_option("--model", model_path, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  er->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* sw = app.add_subcommand("sweep", "Run every seed and grid point of a config");

  std::string results, metric = "acc_counterexample";
  auto* rp = app.add_subcommand("report", "Sweep and ablation tables from results.jsonl");
  rp->add_option("--results", results, "results.jsonl")->required()->check(CLI::ExistingFile);
  rp->add_option("--metric", metric)->capture_default_str();

  for (auto* sub : {gen, tr, est, vb, er, sw, rp}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*gen) return gen_data(g);
    if (*tr) return train_cmd(g, data_dir);
    if (*est) return estimate_cmd(g, ea);
    if (*vb) return verify_bounds(g, n_seeds, dims);
    if (*er) return eval_robustness(g, model_path, eval_data);
    if (*sw) return sweep_cmd(g);
    if (*rp) return report_cmd(g, results, metric);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
