#pragma once

// Synthetic two-stream QA task and the toy model trained with the CIB loss.
//
// A scene holds M objects with distinct shapes plus colors and sizes. The
// visual stream is K tokens: one per object (attribute one-hots, an object
// flag, Gaussian noise) and background tokens carrying noise only. The
// linguistic stream is L word ids rendered from a query template; its last
// slot carries the shortcut token, which names an answer class and in the
// training distribution agrees with the true answer at rate p_shortcut.
//
// Vocabulary layout: 0 pad, then shape words, color words, shape synonyms,
// color synonyms, shortcut tokens (one per answer class), function words.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cib/density.hpp"
#include "cib/estimators.hpp"
#include "cib/nn.hpp"
#include "cib/objective.hpp"

namespace cib {

enum class QueryKind { kColorOfShape, kSizeOfShape, kCountOfColor };

std::string to_string(QueryKind q);
QueryKind parse_query_kind(const std::string& name);

struct TaskConfig {
  std::size_t n_objects = 5;
  std::size_t n_shapes = 6;
  std::size_t n_colors = 6;
  std::size_t n_sizes = 3;
  std::size_t n_visual_tokens = 8;
  std::size_t n_text_tokens = 6;
  std::size_t n_answers = 6;
  std::size_t vocab_size = 64;
  std::size_t n_templates = 4;
  std::size_t n_heldout_templates = 1;
  double visual_noise = 0.1;
  double p_shortcut = 0.9;
  double shortcut_presence = 1.0;
  double synonym_rate = 0.2;
  std::size_t n_train = 2048;
  std::size_t n_eval = 512;

  // Throws std::invalid_argument naming the inconsistent field.
  void validate() const;
  std::size_t visual_dim() const { return n_shapes + n_colors + n_sizes + 1; }
  std::size_t n_train_templates() const { return n_templates - n_heldout_templates; }
};

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t size = 0;
};

struct Scene {
  std::vector<SceneObject> objects;
};

struct ExampleMeta {
  std::size_t template_id = 0;
  QueryKind query = QueryKind::kColorOfShape;
  std::optional<std::size_t> referent_shape;  // shape queries
  std::optional<std::size_t> queried_color;   // count queries
  bool shortcut_token_present = false;
  std::optional<std::size_t> shortcut_answer;
  std::size_t group_id = 0;
  std::string split;
};

struct SyntheticExample {
  std::vector<double> x_v;          // K x visual_dim, row-major
  std::vector<std::size_t> x_l;     // L word ids
  std::size_t y = 0;
  ExampleMeta meta;
  Scene scene;
  std::vector<int> token_object;    // per visual token: index into scene.objects, or -1
};

struct Dataset {
  TaskConfig cfg;
  std::uint64_t seed = 0;
  std::vector<SyntheticExample> train;
  // clean, rephrase, synonym, remove_irrelevant, remove_relevant, counterexample
  std::vector<std::pair<std::string, std::vector<SyntheticExample>>> eval;

  const std::vector<SyntheticExample>& split(const std::string& name) const;
};

inline const std::vector<std::string>& eval_split_names() {
  static const std::vector<std::string> names = {"clean",           "rephrase",        "synonym", "remove_irrelevant",
                                                 "remove_relevant", "counterexample"};
  return names;
}

// Word ids for the vocabulary regions.
struct Vocabulary {
  std::size_t shape_word(std::size_t s) const { return 1 + s; }
  std::size_t color_word(std::size_t c) const { return 1 + n_shapes + c; }
  std::size_t shape_synonym(std::size_t s) const { return 1 + n_shapes + n_colors + s; }
  std::size_t color_synonym(std::size_t c) const { return 1 + 2 * n_shapes + n_colors + c; }
  std::size_t shortcut(std::size_t a) const { return 1 + 2 * (n_shapes + n_colors) + a; }
  std::size_t function_word(std::size_t f) const { return 1 + 2 * (n_shapes + n_colors) + n_answers + f; }
  std::size_t n_shapes, n_colors, n_answers;
};

Vocabulary vocabulary(const TaskConfig& cfg);
std::size_t function_word_count();

// Deterministic in (cfg, seed); each example uses its own RNG stream.
Dataset generate_dataset(const TaskConfig& cfg, std::uint64_t seed);

// The answer implied by the scene and the query fields of the metadata.
std::size_t answer_from_scene(const Scene& scene, const ExampleMeta& meta);

enum class PerturbationKind { kRephrase, kSynonym, kRemoveIrrelevant, kRemoveRelevantCount, kShortcutCounterexample };

std::string to_string(PerturbationKind k);

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::kRephrase;
  std::optional<std::size_t> target_template;  // rephrase; a different template at random when unset
  std::size_t remove_count = 1;                // remove_irrelevant: tokens to blank
};

// Throws std::invalid_argument when the spec does not apply to the example.
SyntheticExample perturb(const SyntheticExample& ex, const PerturbationSpec& spec, const TaskConfig& cfg,
                         std::uint64_t seed);

// One JSON object per line; field order fixed.
std::string to_jsonl(const std::vector<SyntheticExample>& examples);
std::vector<SyntheticExample> from_jsonl(const std::string& text);
std::string task_config_json(const TaskConfig& cfg);
TaskConfig task_config_from_json(const std::string& text);
void write_dataset(const Dataset& data, const std::string& dir);
Dataset read_dataset(const std::string& dir);

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t embed_dim = 16;
  std::size_t pooled_dim = 32;
  std::size_t head_hidden = 64;
  std::size_t critic_hidden = 32;
  double initial_log_var = -2.0;
};

class ToyModel {
 public:
  ToyModel(const TaskConfig& task, const ModelConfig& cfg, Rng& rng);

  const TaskConfig& task() const { return task_; }
  const ModelConfig& config() const { return cfg_; }
  const Tensor& embedding() const { return embedding_; }
  const ConditionalModel& visual() const { return visual_; }
  const ConditionalModel& text() const { return text_; }
  const Linear& pool_v() const { return pool_v_; }
  const Linear& pool_l() const { return pool_l_; }
  const Linear& head_hidden() const { return head1_; }
  const Linear& head_out() const { return head2_; }
  const Critic& critic() const { return critic_; }
  ParamSet params() const;

 private:
  TaskConfig task_;
  ModelConfig cfg_;
  Tensor embedding_;
  ConditionalModel visual_;
  ConditionalModel text_;
  Linear pool_v_, pool_l_, head1_, head2_;
  Critic critic_;
};

enum class EncodeMode { kTrain, kEval };

struct EncodedBatch {
  ModalityEncoding v;
  ModalityEncoding l;
  std::size_t size = 0;
};

// Training mode draws reparameterized samples from `rng`; eval mode uses the
// means and ignores `rng`.
EncodedBatch encode(const ToyModel& model, std::span<const SyntheticExample* const> batch, EncodeMode mode,
                    Rng* rng = nullptr);
EncodedBatch encode(const ToyModel& model, const std::vector<SyntheticExample>& batch, EncodeMode mode,
                    Rng* rng = nullptr);

Tensor predict(const ToyModel& model, const EncodedBatch& encoded);

// Eval-mode argmax predictions, in batches.
std::vector<std::size_t> predict_labels(const ToyModel& model, const std::vector<SyntheticExample>& data,
                                        std::size_t batch = 256);
double accuracy(const std::vector<std::size_t>& predictions, const std::vector<SyntheticExample>& data);

struct StepRecord {
  std::size_t step = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
  double vqa = 0.0;
  RegularizerBreakdown reg;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double vqa = 0.0;
  double reg_total = 0.0;
  double i_xv_tv = 0.0;
  double i_xl_tl = 0.0;
  double i_tv_tl = 0.0;
  double d_skl = 0.0;
  double train_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t steps = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Warmup is capped at a tenth of the total step count.
std::size_t effective_warmup(std::size_t warmup_steps, std::size_t total_steps);

// Minimizes vqa_loss + beta * regularizer over every parameter group
// (encoders, variances, pooling, head, critic) with momentum SGD under a
// linear warmup / linear decay schedule.
TrainResult train(ToyModel& model, const std::vector<SyntheticExample>& data, const CIBConfig& cfg,
                  const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace cib
