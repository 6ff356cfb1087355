#include <filesystem>
#include <fstream>
#include <sstream>

#include "cib/experiment.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cib;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
name = "small"
seeds = [0]

[task]
n_train = 128
n_eval = 48

[cib]
epochs = 2
batch_size = 32
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cib_test_" + name);
  fs::remove_all(p);
  return p;
}

ResultsRecord fake(double beta, std::uint64_t seed, double value) {
  ResultsRecord r;
  r.config_hash = "h";
  r.beta = beta;
  r.seed = seed;
  r.metrics = {{"acc_counterexample", value}};
  return r;
}

}  // namespace

TEST_CASE("config parsing fills fields and defaults") {
  const ExperimentConfig c = parse_experiment_config(R"(
name = "x"
seeds = [1, 2]
[task]
p_shortcut = 0.8
[model]
d_model = 16
[cib]
beta = 1e-3
variant = "sum_only"
upper_estimator = "l1out"
lower_estimator = "infonce"
[sweep]
grid = [0, 1e-4]
[ablation]
variants = ["full", "sum_plus_skl"]
)");
  CHECK(c.name == "x");
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(c.task.p_shortcut == 0.8);
  CHECK(c.model.d_model == 16);
  CHECK(c.cib.beta == 1e-3);
  CHECK(c.cib.upper_estimator == Estimator::kL1Out);
  CHECK(c.sweep->grid == std::vector<double>{0.0, 1e-4});
  const auto points = c.grid_points();
  REQUIRE(points.size() == 4);
  CHECK(points[0].beta == 0.0);
  CHECK(points[1].variant == BoundVariant::kSumPlusSkl);
  CHECK(points[3].lower_estimator == Estimator::kInfoNce);

  const ExperimentConfig d = parse_experiment_config("[sweep]\n");
  CHECK(d.sweep->grid == default_beta_grid());
  CHECK(d.grid_points().size() == 9);
}

TEST_CASE("config rejections name the field") {
  auto message = [](const std::string& text) {
    try {
      parse_experiment_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(message("[cib]\nbeta = -1.0\n").rfind("cib", 0) == 0);
  CHECK(message("[cib]\nbatch_size = 0\n").rfind("cib", 0) == 0);
  CHECK(message("[cib]\nvariant = \"nope\"\n").rfind("cib.variant", 0) == 0);
  CHECK(message("[cib]\nlearning = 0.1\n").rfind("cib.learning", 0) == 0);
  CHECK(message("[task]\nn_shapes = \"four\"\n").rfind("task.n_shapes", 0) == 0);
  CHECK(message("[task]\np_shortcut = 1.5\n").rfind("task", 0) == 0);
  CHECK(message("bogus = 1\n").rfind("bogus", 0) == 0);
  CHECK(message("seeds = []\n").rfind("seeds", 0) == 0);
  CHECK(message("[sweep]\nparameter = \"lr\"\n").rfind("sweep.parameter", 0) == 0);
  CHECK(message("[ablation]\nestimators = [[\"nwj\", \"club\"]]\n").rfind("ablation.estimators", 0) == 0);
  CHECK(message("[cib\n").rfind("config", 0) == 0);
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/cfg.toml"), ConfigError);
}

TEST_CASE("hash ignores output_dir and tracks everything else") {
  ExperimentConfig a = parse_experiment_config(kSmall);
  ExperimentConfig b = a;
  b.output_dir = "elsewhere";
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  b.cib.beta = 2e-4;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("record serialization round trips and CSV matches JSON") {
  ResultsRecord r = fake(1e-4, 3, 0.1);
  r.name = "n, x";
  r.metrics.emplace_back("acc_clean", 1.0 / 3.0);
  r.wall_clock_seconds = 12.5;
  const std::string line = to_json_line(r);
  CHECK(line.find("wall_clock") == std::string::npos);
  const ResultsRecord back = record_from_json(line);
  CHECK(back.beta == r.beta);
  CHECK(back.seed == 3);
  CHECK(back.metric("acc_clean") == 1.0 / 3.0);
  CHECK_THROWS_AS(back.metric("missing"), std::invalid_argument);
  CHECK(to_json_line(back) == line);
  CHECK(csv_header(r).rfind("config_hash,name,seed,point,beta", 0) == 0);
}

TEST_CASE("a run writes one record per seed and point, deterministically") {
  ExperimentConfig cfg = parse_experiment_config(kSmall);
  cfg.seeds = {0, 1};
  cfg.sweep = SweepSpec{"beta", {0.0, 1e-4}};
  cfg.output_dir = scratch("run_a").string();
  std::size_t seen = 0;
  RunOptions opts;
  opts.on_record = [&](const ResultsRecord&) { ++seen; };
  const auto records = run_experiment(cfg, opts);
  CHECK(records.size() == 4);
  CHECK(seen == 4);

  const fs::path dir(cfg.output_dir);
  const auto from_disk = read_results((dir / "results.jsonl").string());
  REQUIRE(from_disk.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(to_json_line(from_disk[i]) == to_json_line(records[i]));
  const auto& m = records[0].metrics;
  for (const char* key : {"train_loss", "acc_clean", "acc_counterexample", "cs_1", "flips_iv", "flips_cv",
                          "gap_counterexample", "mi_clean_i_xv_tv"}) {
    CHECK(std::any_of(m.begin(), m.end(), [&](const auto& kv) { return kv.first == key; }));
  }

  // CSV cells equal the JSON values field by field.
  std::istringstream csv(slurp(dir / "results.csv"));
  std::string header, row;
  std::getline(csv, header);
  CHECK(header == csv_header(records[0]));
  std::vector<std::string> names;
  {
    std::istringstream hs(header);
    for (std::string s; std::getline(hs, s, ',');) names.push_back(s);
  }
  for (std::size_t i = 0; std::getline(csv, row); ++i) {
    const auto j = nlohmann::json::parse(to_json_line(records[i]));
    std::istringstream rs(row);
    std::size_t k = 0;
    for (std::string cell; std::getline(rs, cell, ','); ++k) {
      const auto& v = j.at(names[k]);
      if (v.is_string()) {
        CHECK(cell == v.get<std::string>());
      } else {
        CHECK(std::stod(cell) == v.get<double>());
      }
    }
    CHECK(k == names.size());
  }
  CHECK(slurp(dir / "timings.csv").find("wall_clock_seconds") != std::string::npos);

  ExperimentConfig again = cfg;
  again.output_dir = scratch("run_b").string();
  run_experiment(again);
  CHECK(slurp(dir / "results.jsonl") == slurp(fs::path(again.output_dir) / "results.jsonl"));
  CHECK(slurp(dir / "results.csv") == slurp(fs::path(again.output_dir) / "results.csv"));
}

TEST_CASE("sweep summary aggregates per beta with a single argmax") {
  const std::vector<ResultsRecord> recs = {fake(1e-3, 0, 0.5), fake(1e-3, 1, 0.7), fake(1e-5, 0, 0.6),
                                           fake(1e-5, 1, 0.6), fake(0.0, 0, 0.2)};
  const auto rows = sweep_summary(recs);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].beta == 0.0);
  CHECK(rows[0].std == 0.0);
  CHECK(rows[2].mean == doctest::Approx(0.6));
  CHECK(rows[2].std == doctest::Approx(std::sqrt(0.02)));
  CHECK(rows[1].argmax);
  CHECK_FALSE(rows[2].argmax);
  CHECK(sweep_table_markdown(rows, "acc").find("| * |") != std::string::npos);
  CHECK(sweep_table_csv(rows).rfind("beta,mean,std,n,argmax\n", 0) == 0);

  auto mixed = recs;
  mixed[0].variant = BoundVariant::kSumOnly;
  CHECK_THROWS_AS(sweep_summary(mixed), std::invalid_argument);
  mixed = recs;
  mixed[1].config_hash = "other";
  CHECK_THROWS_AS(sweep_summary(mixed), std::invalid_argument);
  CHECK_THROWS_AS(sweep_summary({}), std::invalid_argument);
}

TEST_CASE("ablation tables have one row per cell and list gaps") {
  std::vector<ResultsRecord> recs;
  for (auto v : kAllVariants) {
    for (std::uint64_t s = 0; s < 3; ++s) {
      ResultsRecord r = fake(1e-4, s, 0.1 * static_cast<double>(s));
      r.variant = v;
      recs.push_back(r);
    }
  }
  AblationReport rep = ablation_report(recs);
  auto lines = [](const std::string& csv) { return std::count(csv.begin(), csv.end(), '\n') - 1; };
  CHECK(lines(rep.variant_csv) == 4);
  CHECK(lines(rep.estimator_csv) == 1);
  CHECK(rep.missing.size() == 5);

  recs.clear();
  for (Estimator u : {Estimator::kClub, Estimator::kL1Out}) {
    for (Estimator l : {Estimator::kNwj, Estimator::kInfoNce, Estimator::kMine}) {
      ResultsRecord r = fake(1e-4, 0, 0.3);
      r.upper_estimator = u;
      r.lower_estimator = l;
      recs.push_back(r);
    }
  }
  rep = ablation_report(recs);
  CHECK(lines(rep.estimator_csv) == 6);
  CHECK(lines(rep.variant_csv) == 1);
  CHECK(rep.missing.size() == 3);
  CHECK(rep.markdown.find("variant=sum_only") != std::string::npos);
}

TEST_CASE("shipped configs parse") {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(CIB_CONFIG_DIR)) {
    if (entry.path().extension() != ".toml") continue;
    const ExperimentConfig c = load_experiment_config(entry.path().string());
    CHECK(!c.grid_points().empty());
    ++n;
  }
  CHECK(n >= 4);
}
