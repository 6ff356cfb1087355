#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cib/experiment.hpp"

namespace py = pybind11;
using namespace cib;

namespace {

py::object json_loads(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

double consensus(const std::vector<std::vector<bool>>& groups, std::size_t m) {
  std::vector<QuestionGroup> gs;
  for (const auto& g : groups) {
    QuestionGroup q;
    for (std::size_t i = 0; i < g.size(); ++i) q.records.push_back({i == 0, g[i]});
    gs.push_back(std::move(q));
  }
  return consensus_score(gs, m);
}

double flips_py(const std::vector<double>& original, const std::vector<double>& edited, const std::string& mode) {
  if (mode != "iv" && mode != "cv") throw std::invalid_argument("mode must be 'iv' or 'cv'");
  return flips(original, edited, mode == "iv" ? FlipMode::kIV : FlipMode::kCV);
}

py::dict bounds(std::uint64_t seed, std::vector<std::size_t> dims) {
  if (dims.size() != 4) throw std::invalid_argument("dims takes (dx_v, dx_l, dt_v, dt_l)");
  const BoundReport r = verify_bound_ordering(seed, SystemDims{dims[0], dims[1], dims[2], dims[3]});
  py::dict d;
  d["joint_mi"] = r.joint_mi;
  d["i_xv_tv"] = r.i_xv_tv;
  d["i_xl_tl"] = r.i_xl_tl;
  d["i_tv_tl"] = r.i_tv_tl;
  d["d_skl"] = r.d_skl;
  py::dict checks;
  for (const auto& c : r.checks) checks[py::str(to_string(c.variant))] = py::make_tuple(c.bound, c.holds);
  d["checks"] = checks;
  d["all_hold"] = r.all_hold();
  return d;
}

double upper_on_gaussian(const std::string& name, double rho, std::size_t dim, std::size_t n, std::uint64_t seed) {
  const Estimator e = parse_estimator(name);
  if (direction_of(e) != BoundDirection::kUpper) throw std::invalid_argument(name + " is not an upper bound");
  Rng rng(seed);
  const auto [x, y] = sample_correlated_gaussian(rho, dim, n, rng);
  NoGradGuard guard;
  const ConditionalModel cond = gaussian_true_conditional(rho, dim);
  return e == Estimator::kClub ? club_upper(x, y, cond).value : l1out_upper(x, y, cond).value;
}

py::list run(const std::string& toml_text, const std::string& output_dir, bool write_files) {
  ExperimentConfig cfg = parse_experiment_config(toml_text);
  cfg.output_dir = output_dir;
  RunOptions opts;
  opts.write_files = write_files;
  std::vector<ResultsRecord> records;
  {
    py::gil_scoped_release release;
    records = run_experiment(cfg, opts);
  }
  py::list out;
  for (const auto& r : records) out.append(json_loads(to_json_line(r)));
  return out;
}

py::list split(const std::string& toml_text, std::uint64_t seed, const std::string& name) {
  const ExperimentConfig cfg = parse_experiment_config(toml_text);
  const Dataset d = generate_dataset(cfg.task, seed);
  const auto& ex = name == "train" ? d.train : d.split(name);
  py::list out;
  std::istringstream lines(to_jsonl(ex));
  for (std::string line; std::getline(lines, line);)
    if (!line.empty()) out.append(json_loads(line));
  return out;
}

}  // namespace

PYBIND11_MODULE(_cib, m) {
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("gaussian_mi_oracle", [](double rho, std::size_t d) { return gaussian_mi_oracle(rho, d).value; }, py::arg("rho"),
        py::arg("d") = 1);
  m.def("discrete_mi_oracle", [](const std::vector<std::vector<double>>& j) { return discrete_mi_oracle(j).value; });
  m.def("upper_bound_estimate", &upper_on_gaussian, py::arg("estimator"), py::arg("rho"), py::arg("dim") = 1,
        py::arg("n") = 10000, py::arg("seed") = 0);
  m.def("consensus_score", &consensus, "Groups list correctness per record, original first.", py::arg("groups"),
        py::arg("m"));
  m.def("flips", &flips_py, py::arg("original"), py::arg("edited"), py::arg("mode") = "iv");
  m.def("verify_bound_ordering", &bounds, py::arg("seed"), py::arg("dims") = std::vector<std::size_t>{3, 3, 2, 2});
  m.def("config_hash", [](const std::string& t) { return parse_experiment_config(t).hash(); });
  m.def("canonical_config", [](const std::string& t) { return json_loads(parse_experiment_config(t).canonical_json()); });
  m.def("default_beta_grid", &default_beta_grid);
  m.def("generate_split", &split, py::arg("config"), py::arg("seed"), py::arg("split") = "train");
  m.def("run_experiment", &run, py::arg("config"), py::arg("output_dir") = "results", py::arg("write_files") = true);
}
