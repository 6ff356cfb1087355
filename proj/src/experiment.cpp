#include "cib/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "toml.hpp"

namespace cib {

namespace {

using json = nlohmann::ordered_json;

// Reads typed keys from one TOML table and rejects leftovers.
class Section {
 public:
  Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }

  const toml::node* node(const std::string& key) {
    if (table_ == nullptr) return nullptr;
    seen_.insert(key);
    return table_->get(key);
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const { throw ConfigError(where(key) + ": " + msg); }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void size(const std::string& key, std::size_t& out) {
    if (const auto* n = node(key)) out = as_size(*n, key);
  }

  void real(const std::string& key, double& out) {
    if (const auto* n = node(key)) out = as_real(*n, key);
  }

  void text(const std::string& key, std::string& out) {
    if (const auto* n = node(key)) {
      if (!n->is_string()) fail(key, "expected a string");
      out = **n->as_string();
    }
  }

  std::size_t as_size(const toml::node& n, const std::string& key) const {
    if (!n.is_integer()) fail(key, "expected a non-negative integer");
    const std::int64_t v = **n.as_integer();
    if (v < 0) fail(key, "expected a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  double as_real(const toml::node& n, const std::string& key) const {
    if (n.is_floating_point()) return **n.as_floating_point();
    if (n.is_integer()) return static_cast<double>(**n.as_integer());
    fail(key, "expected a number");
  }

  const toml::array* array(const std::string& key) {
    const auto* n = node(key);
    if (n == nullptr) return nullptr;
    if (!n->is_array()) fail(key, "expected an array");
    return n->as_array();
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [k, v] : *table_) {
      const std::string key(k.str());
      if (!seen_.count(key)) fail(key, "unknown key");
    }
  }

 private:
  const toml::table* table_;
  std::string path_;
  std::set<std::string> seen_;
};

const toml::table* subtable(Section& root, const std::string& key) {
  const auto* n = root.node(key);
  if (n == nullptr) return nullptr;
  if (!n->is_table()) root.fail(key, "expected a table");
  return n->as_table();
}

template <class Fn>
auto rethrow_as_config(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

json cib_json(const CIBConfig& c) {
  json j;
  j["beta"] = c.beta;
  j["variant"] = to_string(c.variant);
  j["upper_estimator"] = to_string(c.upper_estimator);
  j["lower_estimator"] = to_string(c.lower_estimator);
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["warmup_steps"] = c.warmup_steps;
  j["epochs"] = c.epochs;
  return j;
}

json model_json(const ModelConfig& m) {
  json j;
  j["d_model"] = m.d_model;
  j["embed_dim"] = m.embed_dim;
  j["pooled_dim"] = m.pooled_dim;
  j["head_hidden"] = m.head_hidden;
  j["critic_hidden"] = m.critic_hidden;
  j["initial_log_var"] = m.initial_log_var;
  return j;
}

std::string number_token(double v) { return json(v).dump(); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string strip_quotes(const std::string& token) {
  if (token.size() >= 2 && token.front() == '"' && token.back() == '"') return json::parse(token).get<std::string>();
  return token;
}

}  // namespace

const std::vector<double>& default_beta_grid() {
  static const std::vector<double> grid = {1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2};
  return grid;
}

void ExperimentConfig::validate() const {
  rethrow_as_config("task", [&] { task.validate(); });
  rethrow_as_config("cib", [&] { cib.validate(); });
  if (model.d_model == 0 || model.embed_dim == 0 || model.pooled_dim == 0 || model.head_hidden == 0 ||
      model.critic_hidden == 0) {
    throw ConfigError("model: widths must be positive");
  }
  if (seeds.empty()) throw ConfigError("seeds: need at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds: duplicate seed");
  }
  if (sweep) {
    if (sweep->parameter != "beta") throw ConfigError("sweep.parameter: only \"beta\" is supported");
    if (sweep->grid.empty()) throw ConfigError("sweep.grid: empty grid");
    for (double b : sweep->grid) {
      if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("sweep.grid: values must be finite and >= 0");
    }
  }
  for (const auto& [u, l] : ablation.estimators) {
    if (direction_of(u) != BoundDirection::kUpper) throw ConfigError("ablation.estimators: " + to_string(u) + " is not an upper bound");
    if (direction_of(l) != BoundDirection::kLower) throw ConfigError("ablation.estimators: " + to_string(l) + " is not a lower bound");
  }
}

std::string ExperimentConfig::canonical_json() const {
  json j;
  j["name"] = name;
  j["task"] = json::parse(task_config_json(task));
  j["model"] = model_json(model);
  j["cib"] = cib_json(cib);
  j["seeds"] = seeds;
  if (sweep) {
    j["sweep"] = {{"parameter", sweep->parameter}, {"grid", sweep->grid}};
  } else {
    j["sweep"] = nullptr;
  }
  json variants = json::array();
  for (auto v : ablation.variants) variants.push_back(to_string(v));
  json estimators = json::array();
  for (const auto& [u, l] : ablation.estimators) estimators.push_back({to_string(u), to_string(l)});
  j["ablation"] = {{"variants", variants}, {"estimators", estimators}};
  return j.dump();
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical_json()); }

std::vector<CIBConfig> ExperimentConfig::grid_points() const {
  const std::vector<double> betas = sweep ? sweep->grid : std::vector<double>{cib.beta};
  const std::vector<BoundVariant> variants =
      ablation.variants.empty() ? std::vector<BoundVariant>{cib.variant} : ablation.variants;
  const std::vector<std::pair<Estimator, Estimator>> estimators =
      ablation.estimators.empty() ? std::vector<std::pair<Estimator, Estimator>>{{cib.upper_estimator, cib.lower_estimator}}
                                  : ablation.estimators;
  std::vector<CIBConfig> out;
  for (double b : betas) {
    for (auto v : variants) {
      for (const auto& [u, l] : estimators) {
        CIBConfig c = cib;
        c.beta = b;
        c.variant = v;
        c.upper_estimator = u;
        c.lower_estimator = l;
        out.push_back(c);
      }
    }
  }
  return out;
}

ExperimentConfig parse_experiment_config(const std::string& toml_text) {
  toml::table doc;
  try {
    doc = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config: TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  ExperimentConfig cfg;
  Section root(&doc, "");
  root.text("name", cfg.name);
  root.text("output_dir", cfg.output_dir);
  if (const auto* seeds = root.array("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : *seeds) cfg.seeds.push_back(root.as_size(s, "seeds"));
  }

  Section task(subtable(root, "task"), "task");
  TaskConfig& t = cfg.task;
  task.size("n_objects", t.n_objects);
  task.size("n_shapes", t.n_shapes);
  task.size("n_colors", t.n_colors);
  task.size("n_sizes", t.n_sizes);
  task.size("n_visual_tokens", t.n_visual_tokens);
  task.size("n_text_tokens", t.n_text_tokens);
  task.size("n_answers", t.n_answers);
  task.size("vocab_size", t.vocab_size);
  task.size("n_templates", t.n_templates);
  task.size("n_heldout_templates", t.n_heldout_templates);
  task.real("visual_noise", t.visual_noise);
  task.real("p_shortcut", t.p_shortcut);
  task.real("shortcut_presence", t.shortcut_presence);
  task.real("synonym_rate", t.synonym_rate);
  task.size("n_train", t.n_train);
  task.size("n_eval", t.n_eval);
  task.finish();

  Section model(subtable(root, "model"), "model");
  model.size("d_model", cfg.model.d_model);
  model.size("embed_dim", cfg.model.embed_dim);
  model.size("pooled_dim", cfg.model.pooled_dim);
  model.size("head_hidden", cfg.model.head_hidden);
  model.size("critic_hidden", cfg.model.critic_hidden);
  model.real("initial_log_var", cfg.model.initial_log_var);
  model.finish();

  Section cib(subtable(root, "cib"), "cib");
  CIBConfig& c = cfg.cib;
  cib.real("beta", c.beta);
  auto parse_field = [](Section& s, const std::string& key, auto parse) {
    std::string name;
    s.text(key, name);
    if (name.empty()) return;
    try {
      parse(name);
    } catch (const std::invalid_argument& e) {
      s.fail(key, e.what());
    }
  };
  parse_field(cib, "variant", [&](const std::string& n) { c.variant = parse_variant(n); });
  parse_field(cib, "upper_estimator", [&](const std::string& n) { c.upper_estimator = parse_estimator(n); });
  parse_field(cib, "lower_estimator", [&](const std::string& n) { c.lower_estimator = parse_estimator(n); });
  cib.real("learning_rate", c.learning_rate);
  cib.size("batch_size", c.batch_size);
  cib.size("warmup_steps", c.warmup_steps);
  cib.size("epochs", c.epochs);
  cib.finish();

  if (const auto* sweep_table = subtable(root, "sweep")) {
    Section sweep(sweep_table, "sweep");
    SweepSpec spec;
    sweep.text("parameter", spec.parameter);
    if (const auto* grid = sweep.array("grid")) {
      spec.grid.clear();
      for (const auto& g : *grid) spec.grid.push_back(sweep.as_real(g, "grid"));
    }
    sweep.finish();
    cfg.sweep = spec;
  }

  Section ablation(subtable(root, "ablation"), "ablation");
  if (const auto* variants = ablation.array("variants")) {
    for (const auto& v : *variants) {
      if (!v.is_string()) ablation.fail("variants", "expected strings");
      try {
        cfg.ablation.variants.push_back(parse_variant(**v.as_string()));
      } catch (const std::invalid_argument& e) {
        ablation.fail("variants", e.what());
      }
    }
  }
  if (const auto* estimators = ablation.array("estimators")) {
    for (const auto& pair : *estimators) {
      const auto* arr = pair.as_array();
      if (arr == nullptr || arr->size() != 2 || !(*arr)[0].is_string() || !(*arr)[1].is_string()) {
        ablation.fail("estimators", "expected [upper, lower] string pairs");
      }
      try {
        cfg.ablation.estimators.emplace_back(parse_estimator(**(*arr)[0].as_string()),
                                             parse_estimator(**(*arr)[1].as_string()));
      } catch (const std::invalid_argument& e) {
        ablation.fail("estimators", e.what());
      }
    }
  }
  ablation.finish();
  root.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

double ResultsRecord::metric(const std::string& key) const {
  for (const auto& [k, v] : metrics)
    if (k == key) return v;
  throw std::invalid_argument("record has no metric '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> record_fields(const ResultsRecord& r) {
  std::vector<std::pair<std::string, std::string>> f;
  f.emplace_back("config_hash", json(r.config_hash).dump());
  f.emplace_back("name", json(r.name).dump());
  f.emplace_back("seed", json(r.seed).dump());
  f.emplace_back("point", json(r.point).dump());
  f.emplace_back("beta", number_token(r.beta));
  f.emplace_back("variant", json(to_string(r.variant)).dump());
  f.emplace_back("upper_estimator", json(to_string(r.upper_estimator)).dump());
  f.emplace_back("lower_estimator", json(to_string(r.lower_estimator)).dump());
  for (const auto& [k, v] : r.metrics) f.emplace_back(k, number_token(v));
  return f;
}

std::string to_json_line(const ResultsRecord& r) {
  std::string line = "{";
  bool first = true;
  for (const auto& [k, v] : record_fields(r)) {
    if (!first) line += ',';
    first = false;
    line += json(k).dump();
    line += ':';
    line += v;
  }
  return line + "}";
}

std::string csv_header(const ResultsRecord& r) {
  std::string out;
  for (const auto& [k, v] : record_fields(r)) out += (out.empty() ? "" : ",") + k;
  return out;
}

std::string csv_row(const ResultsRecord& r) {
  std::string out;
  bool first = true;
  for (const auto& [k, v] : record_fields(r)) {
    if (!first) out += ',';
    first = false;
    out += strip_quotes(v);
  }
  return out;
}

ResultsRecord record_from_json(const std::string& line) {
  const json j = json::parse(line);
  ResultsRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.name = j.at("name").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.point = j.at("point").get<std::size_t>();
  r.beta = j.at("beta").get<double>();
  r.variant = parse_variant(j.at("variant").get<std::string>());
  r.upper_estimator = parse_estimator(j.at("upper_estimator").get<std::string>());
  r.lower_estimator = parse_estimator(j.at("lower_estimator").get<std::string>());
  static const std::set<std::string> fixed_keys = {"config_hash", "name",    "seed",           "point",
                                                   "beta",        "variant", "upper_estimator", "lower_estimator"};
  for (const auto& [k, v] : j.items()) {
    if (fixed_keys.count(k)) continue;
    r.metrics.emplace_back(k, v.is_null() ? std::nan("") : v.get<double>());
  }
  return r;
}

std::vector<ResultsRecord> read_results(const std::string& jsonl_path) {
  std::ifstream in(jsonl_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + jsonl_path);
  std::vector<ResultsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(record_from_json(line));
  }
  return out;
}

ResultsRecord run_single(const ExperimentConfig& cfg, const CIBConfig& point, std::size_t point_index,
                         std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = generate_dataset(cfg.task, seed);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6d6f64u};
  Rng init(seq);
  ToyModel model(cfg.task, cfg.model, init);
  CIBConfig c = point;
  c.seed = seed;
  const TrainResult tr = train(model, data.train, c);
  const RobustnessSummary s = evaluate_robustness(model, data, c);

  ResultsRecord r;
  r.config_hash = cfg.hash();
  r.name = cfg.name;
  r.seed = seed;
  r.point = point_index;
  r.beta = c.beta;
  r.variant = c.variant;
  r.upper_estimator = c.upper_estimator;
  r.lower_estimator = c.lower_estimator;
  auto& m = r.metrics;
  const EpochMetrics& last = tr.epochs.back();
  m.emplace_back("train_loss", last.loss);
  m.emplace_back("train_vqa", last.vqa);
  m.emplace_back("train_accuracy", last.train_accuracy);
  m.emplace_back("train_i_xv_tv", last.i_xv_tv);
  m.emplace_back("train_i_xl_tl", last.i_xl_tl);
  m.emplace_back("train_i_tv_tl", last.i_tv_tl);
  m.emplace_back("train_d_skl", last.d_skl);
  m.emplace_back("train_regularizer", last.reg_total);
  for (const auto& name : eval_split_names()) {
    auto it = s.split_accuracy.find(name);
    m.emplace_back("acc_" + name, it == s.split_accuracy.end() ? std::nan("") : it->second);
  }
  for (const auto& [k, v] : s.cs) m.emplace_back("cs_" + std::to_string(k), v);
  m.emplace_back("flips_iv", s.flips_iv);
  m.emplace_back("flips_cv", s.flips_cv);
  for (const auto& g : s.gaps) {
    m.emplace_back("gap_" + g.perturbed_split, g.empirical_gap);
    m.emplace_back("mi_" + g.perturbed_split + "_i_xv_tv", g.mi_perturbed.i_xv_tv);
    m.emplace_back("mi_" + g.perturbed_split + "_i_xl_tl", g.mi_perturbed.i_xl_tl);
  }
  for (const auto& g : s.gaps) {
    if (g.perturbed_split != "counterexample") continue;
    m.emplace_back("mi_clean_i_xv_tv", g.mi_clean.i_xv_tv);
    m.emplace_back("mi_clean_i_xl_tl", g.mi_clean.i_xl_tl);
    m.emplace_back("mi_clean_i_tv_tl", g.mi_clean.i_tv_tl);
    m.emplace_back("mi_clean_d_skl", g.mi_clean.d_skl);
  }
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<ResultsRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::ofstream jsonl, csv, timings;
  if (opts.write_files) {
    fs::create_directories(cfg.output_dir);
    jsonl.open(fs::path(cfg.output_dir) / "results.jsonl", std::ios::binary | std::ios::trunc);
    csv.open(fs::path(cfg.output_dir) / "results.csv", std::ios::binary | std::ios::trunc);
    timings.open(fs::path(cfg.output_dir) / "timings.csv", std::ios::binary | std::ios::trunc);
    if (!jsonl || !csv || !timings) throw std::runtime_error("cannot write results under " + cfg.output_dir);
    timings << "config_hash,seed,point,wall_clock_seconds\n";
  }
  std::vector<ResultsRecord> records;
  const auto points = cfg.grid_points();
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (std::uint64_t seed : cfg.seeds) {
      ResultsRecord r = run_single(cfg, points[p], p, seed);
      if (opts.write_files) {
        if (records.empty()) csv << csv_header(r) << '\n';
        jsonl << to_json_line(r) << '\n' << std::flush;
        csv << csv_row(r) << '\n' << std::flush;
        timings << r.config_hash << ',' << r.seed << ',' << r.point << ',' << r.wall_clock_seconds << '\n' << std::flush;
      }
      if (opts.on_record) opts.on_record(r);
      records.push_back(std::move(r));
    }
  }
  return records;
}

std::vector<SweepRow> sweep_summary(const std::vector<ResultsRecord>& records, const std::string& metric) {
  if (records.empty()) throw std::invalid_argument("sweep_summary: no records");
  const ResultsRecord& first = records.front();
  for (const auto& r : records) {
    if (r.config_hash != first.config_hash || r.variant != first.variant ||
        r.upper_estimator != first.upper_estimator || r.lower_estimator != first.lower_estimator) {
      throw std::invalid_argument("sweep_summary: records differ in more than beta and seed");
    }
  }
  std::map<double, std::vector<double>> by_beta;
  for (const auto& r : records) by_beta[r.beta].push_back(r.metric(metric));
  std::vector<SweepRow> rows;
  for (const auto& [beta, values] : by_beta) rows.push_back({beta, mean_of(values), sample_std(values), values.size(), false});
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].mean > rows[best].mean) best = i;
  rows[best].argmax = true;
  return rows;
}

std::string sweep_table_markdown(const std::vector<SweepRow>& rows, const std::string& metric) {
  std::string out = "| beta | " + metric + " mean | std | n | best |\n|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    out += "| " + number_token(r.beta) + " | " + fixed(r.mean) + " | " + fixed(r.std) + " | " + std::to_string(r.n) +
           " | " + (r.argmax ? "*" : "") + " |\n";
  }
  return out;
}

std::string sweep_table_csv(const std::vector<SweepRow>& rows) {
  std::string out = "beta,mean,std,n,argmax\n";
  for (const auto& r : rows) {
    out += number_token(r.beta) + "," + number_token(r.mean) + "," + number_token(r.std) + "," + std::to_string(r.n) +
           "," + (r.argmax ? "1" : "0") + "\n";
  }
  return out;
}

AblationReport ablation_report(const std::vector<ResultsRecord>& records, const std::string& metric) {
  AblationReport rep;
  std::map<std::string, std::vector<double>> by_variant;
  std::map<std::string, std::vector<double>> by_pair;
  for (const auto& r : records) {
    by_variant[to_string(r.variant)].push_back(r.metric(metric));
    by_pair[to_string(r.upper_estimator) + "," + to_string(r.lower_estimator)].push_back(r.metric(metric));
  }

  rep.markdown = "### Bound variants (" + metric + ")\n\n| variant | mean | std | n |\n|---|---|---|---|\n";
  rep.variant_csv = "variant,mean,std,n\n";
  for (auto v : kAllVariants) {
    const std::string name = to_string(v);
    auto it = by_variant.find(name);
    if (it == by_variant.end()) {
      rep.missing.push_back("variant=" + name);
      continue;
    }
    const auto& vals = it->second;
    rep.markdown += "| " + name + " | " + fixed(mean_of(vals)) + " | " + fixed(sample_std(vals)) + " | " +
                    std::to_string(vals.size()) + " |\n";
    rep.variant_csv += name + "," + number_token(mean_of(vals)) + "," + number_token(sample_std(vals)) + "," +
                       std::to_string(vals.size()) + "\n";
  }

  rep.markdown += "\n### Estimators (" + metric + ")\n\n| upper | lower | mean | std | n |\n|---|---|---|---|---|\n";
  rep.estimator_csv = "upper_estimator,lower_estimator,mean,std,n\n";
  for (Estimator u : {Estimator::kClub, Estimator::kL1Out}) {
    for (Estimator l : {Estimator::kNwj, Estimator::kInfoNce, Estimator::kMine}) {
      auto it = by_pair.find(to_string(u) + "," + to_string(l));
      if (it == by_pair.end()) {
        rep.missing.push_back("estimators=" + to_string(u) + "/" + to_string(l));
        continue;
      }
      const auto& vals = it->second;
      rep.markdown += "| " + to_string(u) + " | " + to_string(l) + " | " + fixed(mean_of(vals)) + " | " +
                      fixed(sample_std(vals)) + " | " + std::to_string(vals.size()) + " |\n";
      rep.estimator_csv += to_string(u) + "," + to_string(l) + "," + number_token(mean_of(vals)) + "," +
                           number_token(sample_std(vals)) + "," + std::to_string(vals.size()) + "\n";
    }
  }
  if (!rep.missing.empty()) {
    rep.markdown += "\nMissing cells:\n\n";
    for (const auto& m : rep.missing) rep.markdown += "- " + m + "\n";
  }
  return rep;
}

}  // namespace cib
