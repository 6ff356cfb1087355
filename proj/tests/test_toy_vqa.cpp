#include <cmath>
#include <filesystem>
#include <set>

#include "cib/toy_vqa.hpp"
#include "doctest.h"

using namespace cib;

namespace {

TaskConfig small_task() {
  TaskConfig t;
  t.n_train = 256;
  t.n_eval = 128;
  return t;
}

// Attribute lookup straight from the scene table, ignoring the generator.
std::size_t brute_force_answer(const SyntheticExample& ex) {
  std::size_t count = 0;
  for (const auto& o : ex.scene.objects) {
    switch (ex.meta.query) {
      case QueryKind::kCountOfColor:
        if (o.color == ex.meta.queried_color.value()) ++count;
        break;
      case QueryKind::kColorOfShape:
        if (o.shape == ex.meta.referent_shape.value()) return o.color;
        break;
      case QueryKind::kSizeOfShape:
        if (o.shape == ex.meta.referent_shape.value()) return o.size;
        break;
    }
  }
  REQUIRE(ex.meta.query == QueryKind::kCountOfColor);
  return count;
}

// Object count read back off the visual tokens via the object flag.
std::size_t flagged_tokens(const TaskConfig& t, const SyntheticExample& ex, std::optional<std::size_t> color = {}) {
  const std::size_t dv = t.visual_dim();
  std::size_t n = 0;
  for (std::size_t k = 0; k < t.n_visual_tokens; ++k) {
    const double* row = ex.x_v.data() + k * dv;
    if (row[dv - 1] < 0.5) continue;
    if (color && row[t.n_shapes + *color] < 0.5) continue;
    ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("task config rejects inconsistent answer cardinality") {
  TaskConfig t;
  t.n_answers = 7;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TaskConfig{};
  t.n_objects = 7;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TaskConfig{};
  t.n_templates = 1;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TaskConfig{};
  t.vocab_size = 20;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  CHECK_NOTHROW(TaskConfig{}.validate());
}

TEST_CASE("dataset generation is byte-deterministic and sized by the config") {
  const TaskConfig t = small_task();
  const Dataset a = generate_dataset(t, 7);
  const Dataset b = generate_dataset(t, 7);
  const Dataset c = generate_dataset(t, 8);
  CHECK(to_jsonl(a.train) == to_jsonl(b.train));
  for (const auto& name : eval_split_names()) CHECK(to_jsonl(a.split(name)) == to_jsonl(b.split(name)));
  CHECK(to_jsonl(a.train) != to_jsonl(c.train));

  TaskConfig full;
  const Dataset d = generate_dataset(full, 0);
  CHECK(d.train.size() == 2048);
  std::set<std::size_t> ids;
  for (const auto& ex : d.train) ids.insert(ex.meta.group_id);
  CHECK(ids.size() == 2048);
}

TEST_CASE("every label matches a brute-force scene lookup") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 3);
  auto check_split = [&](const std::vector<SyntheticExample>& split) {
    for (const auto& ex : split) {
      CHECK(ex.y == brute_force_answer(ex));
      CHECK(ex.y < t.n_answers);
      CHECK(ex.x_v.size() == t.n_visual_tokens * t.visual_dim());
      CHECK(ex.x_l.size() == t.n_text_tokens);
      std::set<std::size_t> shapes;
      for (const auto& o : ex.scene.objects) shapes.insert(o.shape);
      CHECK(shapes.size() == ex.scene.objects.size());
      CHECK(flagged_tokens(t, ex) == ex.scene.objects.size());
    }
  };
  check_split(d.train);
  for (const auto& name : eval_split_names()) check_split(d.split(name));
}

TEST_CASE("answer-preserving splits keep labels and counterexamples point away") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 5);
  const auto& clean = d.split("clean");
  for (const char* name : {"rephrase", "synonym", "remove_irrelevant", "counterexample"}) {
    const auto& split = d.split(name);
    REQUIRE(split.size() == clean.size());
    for (std::size_t i = 0; i < split.size(); ++i) {
      CHECK(split[i].meta.group_id == clean[i].meta.group_id);
      CHECK(split[i].y == clean[i].y);
    }
  }
  for (std::size_t i = 0; i < clean.size(); ++i) {
    CHECK(d.split("rephrase")[i].meta.template_id == t.n_train_templates());
    CHECK(d.split("synonym")[i].x_l != clean[i].x_l);
    const auto& ce = d.split("counterexample")[i];
    CHECK(ce.meta.shortcut_token_present);
    CHECK(*ce.meta.shortcut_answer != ce.y);
    CHECK(ce.x_l.back() == vocabulary(t).shortcut(*ce.meta.shortcut_answer));
  }
  for (const auto& ex : d.split("remove_relevant")) {
    CHECK(ex.meta.query == QueryKind::kCountOfColor);
    const auto& orig = clean[ex.meta.group_id];
    CHECK(ex.y + 1 == orig.y);
    CHECK(flagged_tokens(t, ex, ex.meta.queried_color) + 1 == flagged_tokens(t, orig, orig.meta.queried_color));
  }
}

TEST_CASE("shortcut agreement rate follows p_shortcut") {
  TaskConfig t;
  t.n_train = 4000;
  t.n_eval = 16;
  const Dataset d = generate_dataset(t, 11);
  std::size_t agree = 0;
  for (const auto& ex : d.train) agree += *ex.meta.shortcut_answer == ex.y;
  CHECK(static_cast<double>(agree) / 4000.0 == doctest::Approx(0.9).epsilon(0.03));

  t.p_shortcut = 0.0;
  const Dataset z = generate_dataset(t, 11);
  for (const auto& ex : z.split("clean")) CHECK(*ex.meta.shortcut_answer != ex.y);
}

TEST_CASE("perturbation examples") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 9);
  const auto& clean = d.split("clean");

  SUBCASE("rephrase changes the template only") {
    for (const auto& ex : clean) {
      const SyntheticExample r = perturb(ex, {PerturbationKind::kRephrase, std::nullopt, 1}, t, 4);
      CHECK(r.meta.template_id != ex.meta.template_id);
      CHECK(r.y == ex.y);
      CHECK(r.x_v == ex.x_v);
      CHECK(r.x_l.back() == ex.x_l.back());
    }
    CHECK_THROWS_AS(perturb(clean[0], {PerturbationKind::kRephrase, clean[0].meta.template_id, 1}, t, 4),
                    std::invalid_argument);
  }

  SUBCASE("count y=3 loses exactly one matching object") {
    bool found = false;
    for (std::size_t seed = 0; seed < 400 && !found; ++seed) {
      TaskConfig one = t;
      one.n_train = 2;
      one.n_eval = 64;
      const Dataset gen = generate_dataset(one, seed);
      for (const auto& ex : gen.split("clean")) {
        if (ex.meta.query != QueryKind::kCountOfColor || ex.y != 3) continue;
        const SyntheticExample r = perturb(ex, {PerturbationKind::kRemoveRelevantCount, std::nullopt, 1}, t, 1);
        CHECK(r.y == 2);
        CHECK(brute_force_answer(r) == 2);
        CHECK(flagged_tokens(t, r, ex.meta.queried_color) == 2);
        CHECK(r.scene.objects.size() + 1 == ex.scene.objects.size());
        found = true;
        break;
      }
    }
    CHECK(found);
  }

  SUBCASE("remove_relevant_count rejects non-counting and zero-count examples") {
    for (const auto& ex : clean) {
      if (ex.meta.query != QueryKind::kCountOfColor) {
        CHECK_THROWS_AS(perturb(ex, {PerturbationKind::kRemoveRelevantCount, std::nullopt, 1}, t, 1),
                        std::invalid_argument);
      } else if (ex.y == 0) {
        CHECK_THROWS_AS(perturb(ex, {PerturbationKind::kRemoveRelevantCount, std::nullopt, 1}, t, 1),
                        std::invalid_argument);
      }
    }
  }

  SUBCASE("remove_irrelevant with nothing irrelevant is the identity") {
    TaskConfig full = t;
    full.n_objects = 5;
    full.n_visual_tokens = 5;
    full.n_colors = 6;
    SyntheticExample ex = clean[0];
    // Rebuild a scene where every object has the queried color and no background exists.
    ex.meta.query = QueryKind::kCountOfColor;
    ex.meta.referent_shape.reset();
    ex.meta.queried_color = 2;
    ex.scene.objects.clear();
    ex.token_object.clear();
    ex.x_v.assign(full.n_visual_tokens * full.visual_dim(), 0.0);
    for (std::size_t k = 0; k < 5; ++k) {
      ex.scene.objects.push_back({k, 2, k % 3});
      ex.token_object.push_back(static_cast<int>(k));
      double* row = ex.x_v.data() + k * full.visual_dim();
      row[k] = 1.0;
      row[full.n_shapes + 2] = 1.0;
      row[full.n_shapes + full.n_colors + k % 3] = 1.0;
      row[full.visual_dim() - 1] = 1.0;
    }
    ex.y = 5;
    const SyntheticExample r = perturb(ex, {PerturbationKind::kRemoveIrrelevant, std::nullopt, 3}, full, 2);
    CHECK(r.x_v == ex.x_v);
    CHECK(r.x_l == ex.x_l);
    CHECK(r.y == ex.y);
    CHECK(r.scene.objects.size() == 5);
  }

  SUBCASE("remove_irrelevant keeps the referent") {
    for (const auto& ex : clean) {
      const SyntheticExample r = perturb(ex, {PerturbationKind::kRemoveIrrelevant, std::nullopt, 4}, t, 3);
      CHECK(r.y == ex.y);
      CHECK(brute_force_answer(r) == ex.y);
    }
  }
}

TEST_CASE("jsonl and directory round trip") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 2);
  const auto back = from_jsonl(to_jsonl(d.train));
  CHECK(to_jsonl(back) == to_jsonl(d.train));
  const auto dir = std::filesystem::temp_directory_path() / "cib_test_dataset";
  std::filesystem::remove_all(dir);
  write_dataset(d, dir.string());
  const Dataset r = read_dataset(dir.string());
  CHECK(r.seed == d.seed);
  CHECK(task_config_json(r.cfg) == task_config_json(d.cfg));
  for (const auto& name : eval_split_names()) CHECK(to_jsonl(r.split(name)) == to_jsonl(d.split(name)));
  std::filesystem::remove_all(dir);
}

TEST_CASE("encode and predict shapes and determinism") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 1);
  Rng rng(3);
  ModelConfig mc;
  ToyModel model(t, mc, rng);
  std::vector<SyntheticExample> batch(d.train.begin(), d.train.begin() + 4);
  batch.push_back(batch[1]);

  const EncodedBatch e1 = encode(model, batch, EncodeMode::kEval);
  const EncodedBatch e2 = encode(model, batch, EncodeMode::kEval);
  CHECK(e1.v.tokens.mu().shape() == Shape{5 * t.n_visual_tokens, mc.d_model});
  CHECK(e1.l.tokens.mu().shape() == Shape{5 * t.n_text_tokens, mc.d_model});
  CHECK(e1.v.pooled_vector.shape() == Shape{5, mc.pooled_dim});
  CHECK(e1.v.samples.to_vector() == e1.v.tokens.mu().to_vector());
  CHECK(e1.v.pooled_vector.to_vector() == e2.v.pooled_vector.to_vector());

  const Tensor logits = predict(model, e1);
  CHECK(logits.shape() == Shape{5, t.n_answers});
  for (std::size_t j = 0; j < t.n_answers; ++j) CHECK(logits.at(1, j) == logits.at(4, j));
  for (double x : logits.data()) CHECK(std::isfinite(x));

  Rng noise(5);
  const EncodedBatch tr = encode(model, batch, EncodeMode::kTrain, &noise);
  CHECK(tr.v.samples.to_vector() != tr.v.tokens.mu().to_vector());
  CHECK_THROWS_AS(encode(model, batch, EncodeMode::kTrain), std::invalid_argument);
  CHECK_THROWS_AS(encode(model, std::vector<SyntheticExample>{}, EncodeMode::kEval), std::invalid_argument);

  SUBCASE("permuting visual tokens permutes the token means") {
    SyntheticExample swapped = batch[0];
    const std::size_t dv = t.visual_dim();
    std::swap_ranges(swapped.x_v.begin(), swapped.x_v.begin() + static_cast<std::ptrdiff_t>(dv),
                     swapped.x_v.begin() + static_cast<std::ptrdiff_t>(dv));
    const auto a = encode(model, std::vector<SyntheticExample>{batch[0]}, EncodeMode::kEval).v.tokens.mu();
    const auto b = encode(model, std::vector<SyntheticExample>{swapped}, EncodeMode::kEval).v.tokens.mu();
    for (std::size_t j = 0; j < mc.d_model; ++j) {
      CHECK(a.at(0, j) == b.at(1, j));
      CHECK(a.at(1, j) == b.at(0, j));
    }
  }
}

TEST_CASE("a fresh model predicts near-uniformly") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 1);
  for (std::uint64_t seed : {0, 1, 2}) {
    Rng rng(seed);
    ModelConfig mc;
    ToyModel model(t, mc, rng);
    NoGradGuard guard;
    const EncodedBatch e = encode(model, d.train, EncodeMode::kEval);
    std::vector<std::size_t> labels;
    for (const auto& ex : d.train) labels.push_back(ex.y);
    CHECK(vqa_loss(predict(model, e), labels).item() == doctest::Approx(std::log(6.0)).epsilon(0.1 / std::log(6.0)));
  }
}

TEST_CASE("training loss decreases over the first epochs") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 0);
  for (std::uint64_t seed : {0, 1, 2}) {
    Rng rng(seed);
    ToyModel model(t, ModelConfig{}, rng);
    CIBConfig cfg;
    cfg.beta = 0.0;
    cfg.epochs = 10;
    cfg.seed = seed;
    const TrainResult r = train(model, d.train, cfg);
    REQUIRE(r.epochs.size() == 10);
    CHECK(r.epochs[1].loss < r.epochs[0].loss);
    CHECK(r.epochs[2].loss < r.epochs[1].loss);
    CHECK(r.steps == 10 * (256 / 32));
  }
}

TEST_CASE("a step with beta > 0 moves every parameter group") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 0);
  Rng rng(4);
  ToyModel model(t, ModelConfig{}, rng);
  const ParamSet params = model.params();
  std::vector<std::vector<double>> before;
  for (const auto& [name, p] : params.entries()) before.push_back(p.to_vector());
  CIBConfig cfg;
  cfg.beta = 1e-2;
  cfg.epochs = 1;
  cfg.warmup_steps = 0;
  std::vector<SyntheticExample> batch(d.train.begin(), d.train.begin() + 32);
  train(model, batch, cfg);
  std::size_t i = 0;
  for (const auto& [name, p] : params.entries()) {
    INFO(name);
    CHECK(p.to_vector() != before[i++]);
  }
}

TEST_CASE("full objective equals sum-plus-skl minus the lower bound on every batch") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 0);
  Rng rng(1);
  ToyModel model(t, ModelConfig{}, rng);
  CIBConfig cfg;
  cfg.epochs = 1;
  std::size_t steps = 0;
  train(model, d.train, cfg, [&](const StepRecord& s) {
    const auto& r = s.reg;
    CHECK(std::abs(r.total - (variant_total(BoundVariant::kSumPlusSkl, r.i_xv_tv, r.i_xl_tl, r.i_tv_tl, r.d_skl) -
                              r.i_tv_tl)) < 1e-12);
    ++steps;
  });
  CHECK(steps == 8);
}

TEST_CASE("non-finite loss aborts with the step index") {
  const TaskConfig t = small_task();
  const Dataset d = generate_dataset(t, 0);
  Rng rng(1);
  ToyModel model(t, ModelConfig{}, rng);
  CIBConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1e300;
  cfg.warmup_steps = 0;
  try {
    train(model, d.train, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).find("step " + std::to_string(e.step())) != std::string::npos);
  }
}

TEST_CASE("warmup cap") {
  CHECK(effective_warmup(1000, 640) == 64);
  CHECK(effective_warmup(10, 640) == 10);
  CHECK(effective_warmup(0, 640) == 0);
}
