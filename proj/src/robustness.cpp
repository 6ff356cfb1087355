#include "cib/robustness.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace cib {

namespace {

using json = nlohmann::ordered_json;

// C(n, k) as an exact integer while it fits, else a long double product.
long double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0L;
  k = std::min(k, n - k);
  unsigned __int128 exact = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    exact = exact * (n - k + i) / i;
    if (exact > (static_cast<unsigned __int128>(1) << 100)) {
      long double r = 1.0L;
      for (std::size_t j = 1; j <= k; ++j) r = r * static_cast<long double>(n - k + j) / static_cast<long double>(j);
      return r;
    }
  }
  return static_cast<long double>(exact);
}

json breakdown_json(const RegularizerBreakdown& b) {
  json j;
  j["i_xv_tv"] = b.i_xv_tv;
  j["i_xl_tl"] = b.i_xl_tl;
  j["i_tv_tl"] = b.i_tv_tl;
  j["d_skl"] = b.d_skl;
  j["total"] = b.total;
  return j;
}

json report_json(const RobustnessReport& r) {
  json j;
  j["perturbed_split"] = r.perturbed_split;
  j["n_pairs"] = r.n_pairs;
  j["acc_clean"] = r.acc_clean;
  j["acc_perturbed"] = r.acc_perturbed;
  j["empirical_gap"] = r.empirical_gap;
  j["mi_terms"] = {{"clean", breakdown_json(r.mi_clean)}, {"perturbed", breakdown_json(r.mi_perturbed)}};
  return j;
}

RegularizerBreakdown split_terms(const ToyModel& model, const std::vector<SyntheticExample>& data,
                                 const CIBConfig& cfg) {
  if (data.size() < 2) return {};
  NoGradGuard guard;
  const EncodedBatch enc = encode(model, data, EncodeMode::kEval);
  MineState mine;
  RegularizerBreakdown r = regularizer(enc.v, enc.l, model.critic(), cfg, mine);
  r.objective = Tensor();
  return r;
}

}  // namespace

void QuestionGroup::validate() const {
  std::size_t originals = 0;
  for (const auto& r : records) originals += r.is_original;
  if (originals != 1) {
    throw std::invalid_argument("question group " + std::to_string(group_id) + " has " + std::to_string(originals) +
                                " original records, expected 1");
  }
}

double consensus_score(std::span<const QuestionGroup> groups, std::size_t m) {
  if (m == 0) throw std::invalid_argument("consensus_score: m must be >= 1");
  if (groups.empty()) throw std::invalid_argument("consensus_score: no groups");
  double total = 0.0;
  for (const auto& g : groups) {
    g.validate();
    const std::size_t size = g.records.size();
    if (m > size) {
      throw std::invalid_argument("consensus_score: m = " + std::to_string(m) + " exceeds size " +
                                  std::to_string(size) + " of group " + std::to_string(g.group_id));
    }
    std::size_t correct = 0;
    for (const auto& r : g.records) correct += r.correct;
    const long double all = binomial(size, m);
    if (all <= 0x1p53L) {
      total += static_cast<double>(binomial(correct, m)) / static_cast<double>(all);
    } else {
      total += static_cast<double>(binomial(correct, m) / all);
    }
  }
  return total / static_cast<double>(groups.size());
}

std::string to_string(FlipMode m) { return m == FlipMode::kIV ? "iv" : "cv"; }

double flips(std::span<const double> original, std::span<const double> edited, FlipMode mode) {
  if (original.size() != edited.size()) {
    throw std::invalid_argument("flips: " + std::to_string(original.size()) + " original vs " +
                                std::to_string(edited.size()) + " edited predictions");
  }
  if (original.empty()) throw std::invalid_argument("flips: empty prediction lists");
  std::size_t count = 0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (mode == FlipMode::kCV) {
      if (original[i] != std::floor(original[i]) || edited[i] != std::floor(edited[i]) || !std::isfinite(original[i]) ||
          !std::isfinite(edited[i])) {
        throw std::invalid_argument("flips: CV mode needs integer answers");
      }
      count += edited[i] != original[i] - 1.0;
    } else {
      count += edited[i] != original[i];
    }
  }
  return static_cast<double>(count) / static_cast<double>(original.size());
}

double flips(std::span<const std::size_t> original, std::span<const std::size_t> edited, FlipMode mode) {
  std::vector<double> a(original.begin(), original.end()), b(edited.begin(), edited.end());
  return flips(std::span<const double>(a), std::span<const double>(b), mode);
}

RobustnessReport performance_gap(const ToyModel& model, const std::vector<SyntheticExample>& clean,
                                 const std::vector<SyntheticExample>& perturbed, const CIBConfig& cfg,
                                 const std::string& perturbed_name) {
  if (perturbed.empty()) throw std::invalid_argument("performance_gap: empty perturbed split");
  std::unordered_map<std::size_t, std::size_t> by_group;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (!by_group.emplace(clean[i].meta.group_id, i).second) {
      throw std::invalid_argument("performance_gap: clean split repeats group " +
                                  std::to_string(clean[i].meta.group_id));
    }
  }
  std::vector<SyntheticExample> paired;
  std::unordered_map<std::size_t, bool> used;
  paired.reserve(perturbed.size());
  for (const auto& ex : perturbed) {
    auto it = by_group.find(ex.meta.group_id);
    if (it == by_group.end()) {
      throw std::invalid_argument("performance_gap: perturbed group " + std::to_string(ex.meta.group_id) +
                                  " has no clean counterpart");
    }
    if (used[ex.meta.group_id]) {
      throw std::invalid_argument("performance_gap: perturbed split repeats group " +
                                  std::to_string(ex.meta.group_id));
    }
    used[ex.meta.group_id] = true;
    paired.push_back(clean[it->second]);
  }
  RobustnessReport r;
  r.perturbed_split = perturbed_name;
  r.n_pairs = perturbed.size();
  r.acc_clean = accuracy(predict_labels(model, paired), paired);
  r.acc_perturbed = accuracy(predict_labels(model, perturbed), perturbed);
  r.empirical_gap = std::abs(r.acc_clean - r.acc_perturbed);
  r.mi_clean = split_terms(model, paired, cfg);
  r.mi_perturbed = split_terms(model, perturbed, cfg);
  return r;
}

RobustnessSummary evaluate_robustness(const ToyModel& model, const Dataset& data, const CIBConfig& cfg) {
  RobustnessSummary s;
  const auto& clean = data.split("clean");
  for (const auto& [name, ex] : data.eval) s.split_accuracy[name] = accuracy(predict_labels(model, ex), ex);

  std::vector<QuestionGroup> groups;
  groups.reserve(clean.size());
  const auto clean_pred = predict_labels(model, clean);
  std::vector<SyntheticExample> rephrasings;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    for (std::size_t t = 0; t < data.cfg.n_templates; ++t) {
      if (t == clean[i].meta.template_id) continue;
      PerturbationSpec spec{PerturbationKind::kRephrase, t, 1};
      rephrasings.push_back(perturb(clean[i], spec, data.cfg, data.seed ^ (i * 131 + t)));
    }
  }
  const auto reph_pred = predict_labels(model, rephrasings);
  const std::size_t per = data.cfg.n_templates - 1;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    QuestionGroup g;
    g.group_id = clean[i].meta.group_id;
    g.records.push_back({true, clean_pred[i] == clean[i].y});
    for (std::size_t j = 0; j < per; ++j) {
      const std::size_t k = i * per + j;
      g.records.push_back({false, reph_pred[k] == rephrasings[k].y});
    }
    groups.push_back(std::move(g));
  }
  for (std::size_t m = 1; m <= per + 1; ++m) s.cs[m] = consensus_score(groups, m);

  std::unordered_map<std::size_t, std::size_t> clean_index;
  for (std::size_t i = 0; i < clean.size(); ++i) clean_index[clean[i].meta.group_id] = i;
  auto paired_preds = [&](const std::vector<SyntheticExample>& edited) {
    std::vector<std::size_t> orig;
    for (const auto& ex : edited) orig.push_back(clean_pred.at(clean_index.at(ex.meta.group_id)));
    return orig;
  };
  const auto& iv = data.split("remove_irrelevant");
  if (!iv.empty()) s.flips_iv = flips(paired_preds(iv), predict_labels(model, iv), FlipMode::kIV);
  const auto& cv = data.split("remove_relevant");
  if (!cv.empty()) s.flips_cv = flips(paired_preds(cv), predict_labels(model, cv), FlipMode::kCV);

  for (const auto& [name, ex] : data.eval) {
    if (name == "clean" || ex.empty()) continue;
    s.gaps.push_back(performance_gap(model, clean, ex, cfg, name));
  }
  return s;
}

std::string to_json(const RobustnessReport& r) { return report_json(r).dump(2); }

std::string to_json(const RobustnessSummary& s) {
  json j;
  json acc = json::object();
  for (const auto& [k, v] : s.split_accuracy) acc[k] = v;
  j["accuracy"] = acc;
  json cs = json::object();
  for (const auto& [m, v] : s.cs) cs[std::to_string(m)] = v;
  j["cs"] = cs;
  j["flips_iv"] = s.flips_iv;
  j["flips_cv"] = s.flips_cv;
  json gaps = json::array();
  for (const auto& g : s.gaps) gaps.push_back(report_json(g));
  j["gaps"] = gaps;
  return j.dump(2);
}

}  // namespace cib
