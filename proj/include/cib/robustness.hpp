#pragma once

// Robustness metrics: consensus score over rephrasing groups, prediction
// flips after image edits, and the clean-vs-perturbed accuracy gap.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cib/objective.hpp"
#include "cib/toy_vqa.hpp"

namespace cib {

struct GroupRecord {
  bool is_original = false;
  bool correct = false;
};

// One original question plus its n rephrasings.
struct QuestionGroup {
  std::size_t group_id = 0;
  std::vector<GroupRecord> records;

  std::size_t n() const { return records.empty() ? 0 : records.size() - 1; }
  // Throws unless exactly one record is the original.
  void validate() const;
};

// Mean over groups of (#size-m subsets that are all correct) / C(size, m).
// Uses C(#correct, m) / C(size, m), never subset enumeration.
double consensus_score(std::span<const QuestionGroup> groups, std::size_t m);

enum class FlipMode { kIV, kCV };

std::string to_string(FlipMode m);

// IV: fraction with edited != original. CV: fraction with edited != original - 1.
double flips(std::span<const double> original, std::span<const double> edited, FlipMode mode);
double flips(std::span<const std::size_t> original, std::span<const std::size_t> edited, FlipMode mode);

struct RobustnessReport {
  std::string perturbed_split;
  std::size_t n_pairs = 0;
  double acc_clean = 0.0;
  double acc_perturbed = 0.0;
  double empirical_gap = 0.0;
  RegularizerBreakdown mi_clean;
  RegularizerBreakdown mi_perturbed;
};

// Pairs every perturbed example with the clean example of the same group id;
// accuracies are over the paired clean subset. The regularizer terms are
// batch estimates on eval-mode encodings of each side.
RobustnessReport performance_gap(const ToyModel& model, const std::vector<SyntheticExample>& clean,
                                 const std::vector<SyntheticExample>& perturbed, const CIBConfig& cfg,
                                 const std::string& perturbed_name = "perturbed");

struct RobustnessSummary {
  std::map<std::string, double> split_accuracy;
  std::map<std::size_t, double> cs;  // m -> CS(m) over clean + every rephrasing
  double flips_iv = 0.0;             // clean vs remove_irrelevant
  double flips_cv = 0.0;             // clean vs remove_relevant (counting questions)
  std::vector<RobustnessReport> gaps;
};

// Every metric on every eval split of the dataset.
RobustnessSummary evaluate_robustness(const ToyModel& model, const Dataset& data, const CIBConfig& cfg);

std::string to_json(const RobustnessReport& r);
std::string to_json(const RobustnessSummary& s);

}  // namespace cib
