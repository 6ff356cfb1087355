#include "cib/toy_vqa.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cib {

namespace {

using json = nlohmann::ordered_json;

enum Word : std::size_t {
  kWhat, kColor, kIs, kThe, kHas, kWhich, kTell, kOf, kSize, kHow, kMany, kObjects, kCount, kNumber, kThings,
  kWordCount
};

// Slot placeholders inside templates.
constexpr std::size_t kShapeSlot = 1000;
constexpr std::size_t kColorSlot = 1001;

const std::vector<std::vector<std::size_t>>& templates_for(QueryKind q) {
  static const std::vector<std::vector<std::size_t>> color = {
      {kWhat, kColor, kIs, kThe, kShapeSlot},
      {kThe, kShapeSlot, kHas, kWhich, kColor},
      {kTell, kColor, kOf, kShapeSlot},
      {kWhich, kColor, kIs, kShapeSlot},
  };
  static const std::vector<std::vector<std::size_t>> size = {
      {kWhat, kSize, kIs, kThe, kShapeSlot},
      {kThe, kShapeSlot, kHas, kWhich, kSize},
      {kTell, kSize, kOf, kShapeSlot},
      {kWhich, kSize, kIs, kShapeSlot},
  };
  static const std::vector<std::vector<std::size_t>> count = {
      {kHow, kMany, kColorSlot, kObjects},
      {kCount, kThe, kColorSlot, kObjects},
      {kNumber, kOf, kColorSlot, kThings},
      {kHow, kMany, kColorSlot, kThings},
  };
  switch (q) {
    case QueryKind::kColorOfShape: return color;
    case QueryKind::kSizeOfShape: return size;
    default: return count;
  }
}

constexpr std::size_t kMaxTemplates = 4;
constexpr std::size_t kMaxTemplateLength = 5;

std::size_t uniform_index(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

bool bernoulli(Rng& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

std::size_t wrong_answer(Rng& rng, std::size_t y, std::size_t n_answers) {
  std::size_t a = uniform_index(rng, n_answers - 1);
  return a >= y ? a + 1 : a;
}

// Writes the query words and the trailing shortcut slot.
std::vector<std::size_t> render(const TaskConfig& cfg, const ExampleMeta& meta, bool synonym) {
  const Vocabulary voc = vocabulary(cfg);
  std::vector<std::size_t> ids(cfg.n_text_tokens, 0);
  const auto& tpl = templates_for(meta.query).at(meta.template_id);
  for (std::size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] == kShapeSlot) {
      ids[i] = synonym ? voc.shape_synonym(*meta.referent_shape) : voc.shape_word(*meta.referent_shape);
    } else if (tpl[i] == kColorSlot) {
      ids[i] = synonym ? voc.color_synonym(*meta.queried_color) : voc.color_word(*meta.queried_color);
    } else {
      ids[i] = voc.function_word(tpl[i]);
    }
  }
  if (meta.shortcut_token_present) ids.back() = voc.shortcut(*meta.shortcut_answer);
  return ids;
}

bool uses_synonym(const TaskConfig& cfg, const SyntheticExample& ex) {
  const Vocabulary voc = vocabulary(cfg);
  const std::size_t lo = voc.shape_synonym(0), hi = voc.shortcut(0);
  return std::any_of(ex.x_l.begin(), ex.x_l.end(), [&](std::size_t w) { return w >= lo && w < hi; });
}

void write_token(const TaskConfig& cfg, SyntheticExample& ex, std::size_t k, const SceneObject* obj, Rng& rng) {
  const std::size_t dv = cfg.visual_dim();
  std::normal_distribution<double> noise(0.0, cfg.visual_noise);
  double* row = ex.x_v.data() + k * dv;
  for (std::size_t j = 0; j < dv; ++j) row[j] = cfg.visual_noise > 0.0 ? noise(rng) : 0.0;
  if (obj == nullptr) return;
  row[obj->shape] += 1.0;
  row[cfg.n_shapes + obj->color] += 1.0;
  row[cfg.n_shapes + cfg.n_colors + obj->size] += 1.0;
  row[dv - 1] += 1.0;
}

// Zeroes a visual token and drops its object from the scene.
void blank_token(const TaskConfig& cfg, SyntheticExample& ex, std::size_t k) {
  const std::size_t dv = cfg.visual_dim();
  std::fill_n(ex.x_v.begin() + static_cast<std::ptrdiff_t>(k * dv), dv, 0.0);
  const int obj = ex.token_object[k];
  ex.token_object[k] = -1;
  if (obj < 0) return;
  ex.scene.objects.erase(ex.scene.objects.begin() + obj);
  for (int& o : ex.token_object)
    if (o > obj) --o;
}

bool token_blank(const TaskConfig& cfg, const SyntheticExample& ex, std::size_t k) {
  const std::size_t dv = cfg.visual_dim();
  const double* row = ex.x_v.data() + k * dv;
  return std::all_of(row, row + dv, [](double x) { return x == 0.0; });
}

bool object_relevant(const SceneObject& o, const ExampleMeta& meta) {
  if (meta.query == QueryKind::kCountOfColor) return o.color == *meta.queried_color;
  return o.shape == *meta.referent_shape;
}

SyntheticExample make_example(const TaskConfig& cfg, Rng& rng, bool train, std::size_t group_id,
                              const std::string& split) {
  SyntheticExample ex;
  std::vector<std::size_t> shapes(cfg.n_shapes);
  std::iota(shapes.begin(), shapes.end(), 0);
  std::shuffle(shapes.begin(), shapes.end(), rng);
  for (std::size_t m = 0; m < cfg.n_objects; ++m) {
    ex.scene.objects.push_back({shapes[m], uniform_index(rng, cfg.n_colors), uniform_index(rng, cfg.n_sizes)});
  }
  std::vector<std::size_t> slots(cfg.n_visual_tokens);
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  ex.token_object.assign(cfg.n_visual_tokens, -1);
  for (std::size_t m = 0; m < cfg.n_objects; ++m) ex.token_object[slots[m]] = static_cast<int>(m);
  ex.x_v.assign(cfg.n_visual_tokens * cfg.visual_dim(), 0.0);
  for (std::size_t k = 0; k < cfg.n_visual_tokens; ++k) {
    const int o = ex.token_object[k];
    write_token(cfg, ex, k, o < 0 ? nullptr : &ex.scene.objects[static_cast<std::size_t>(o)], rng);
  }

  ExampleMeta& meta = ex.meta;
  meta.query = static_cast<QueryKind>(uniform_index(rng, 3));
  const SceneObject& pick_obj = ex.scene.objects[uniform_index(rng, cfg.n_objects)];
  if (meta.query == QueryKind::kCountOfColor) {
    meta.queried_color = bernoulli(rng, 0.5) ? pick_obj.color : uniform_index(rng, cfg.n_colors);
  } else {
    meta.referent_shape = pick_obj.shape;
  }
  meta.template_id = uniform_index(rng, cfg.n_train_templates());
  meta.group_id = group_id;
  meta.split = split;
  ex.y = answer_from_scene(ex.scene, meta);
  meta.shortcut_token_present = bernoulli(rng, cfg.shortcut_presence);
  if (meta.shortcut_token_present) {
    meta.shortcut_answer = bernoulli(rng, cfg.p_shortcut) ? ex.y : wrong_answer(rng, ex.y, cfg.n_answers);
  }
  const bool synonym = train && bernoulli(rng, cfg.synonym_rate);
  ex.x_l = render(cfg, meta, synonym);
  return ex;
}

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

json example_json(const SyntheticExample& ex, std::size_t dv) {
  json j;
  j["split"] = ex.meta.split;
  j["y"] = ex.y;
  j["x_l"] = ex.x_l;
  json rows = json::array();
  for (std::size_t k = 0; k * dv < ex.x_v.size(); ++k) {
    rows.push_back(std::vector<double>(ex.x_v.begin() + static_cast<std::ptrdiff_t>(k * dv),
                                       ex.x_v.begin() + static_cast<std::ptrdiff_t>((k + 1) * dv)));
  }
  j["x_v"] = rows;
  j["token_object"] = ex.token_object;
  json meta;
  meta["template_id"] = ex.meta.template_id;
  meta["queried_attribute"] = to_string(ex.meta.query);
  meta["referent_shape"] = optional_json(ex.meta.referent_shape);
  meta["queried_color"] = optional_json(ex.meta.queried_color);
  meta["shortcut_token_present"] = ex.meta.shortcut_token_present;
  meta["shortcut_answer"] = optional_json(ex.meta.shortcut_answer);
  meta["group_id"] = ex.meta.group_id;
  j["meta"] = meta;
  json scene = json::array();
  for (const auto& o : ex.scene.objects) scene.push_back({o.shape, o.color, o.size});
  j["scene"] = scene;
  return j;
}

SyntheticExample example_from_json(const json& j) {
  SyntheticExample ex;
  ex.meta.split = j.at("split").get<std::string>();
  ex.y = j.at("y").get<std::size_t>();
  ex.x_l = j.at("x_l").get<std::vector<std::size_t>>();
  for (const auto& row : j.at("x_v")) {
    for (const auto& v : row) ex.x_v.push_back(v.get<double>());
  }
  ex.token_object = j.at("token_object").get<std::vector<int>>();
  const json& meta = j.at("meta");
  ex.meta.template_id = meta.at("template_id").get<std::size_t>();
  ex.meta.query = parse_query_kind(meta.at("queried_attribute").get<std::string>());
  ex.meta.referent_shape = optional_from<std::size_t>(meta.at("referent_shape"));
  ex.meta.queried_color = optional_from<std::size_t>(meta.at("queried_color"));
  ex.meta.shortcut_token_present = meta.at("shortcut_token_present").get<bool>();
  ex.meta.shortcut_answer = optional_from<std::size_t>(meta.at("shortcut_answer"));
  ex.meta.group_id = meta.at("group_id").get<std::size_t>();
  for (const auto& o : j.at("scene")) {
    ex.scene.objects.push_back({o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>(), o.at(2).get<std::size_t>()});
  }
  return ex;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

std::string to_string(QueryKind q) {
  switch (q) {
    case QueryKind::kColorOfShape: return "color_of_shape";
    case QueryKind::kSizeOfShape: return "size_of_shape";
    default: return "count_of_color";
  }
}

QueryKind parse_query_kind(const std::string& name) {
  if (name == "color_of_shape") return QueryKind::kColorOfShape;
  if (name == "size_of_shape") return QueryKind::kSizeOfShape;
  if (name == "count_of_color") return QueryKind::kCountOfColor;
  throw std::invalid_argument("unknown query kind '" + name + "'");
}

std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::kRephrase: return "rephrase";
    case PerturbationKind::kSynonym: return "synonym";
    case PerturbationKind::kRemoveIrrelevant: return "remove_irrelevant";
    case PerturbationKind::kRemoveRelevantCount: return "remove_relevant_count";
    default: return "shortcut_counterexample";
  }
}

Vocabulary vocabulary(const TaskConfig& cfg) { return {cfg.n_shapes, cfg.n_colors, cfg.n_answers}; }

std::size_t function_word_count() { return kWordCount; }

void TaskConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("task config: " + msg); };
  if (n_objects == 0) fail("n_objects must be >= 1");
  if (n_objects > n_shapes) fail("n_objects must not exceed n_shapes (shapes are distinct)");
  if (n_objects > n_visual_tokens) fail("n_objects must not exceed n_visual_tokens");
  if (n_colors < 2 || n_sizes < 2) fail("n_colors and n_sizes must be >= 2");
  const std::size_t needed = std::max({n_colors, n_sizes, n_objects + 1});
  if (n_answers != needed) {
    fail("n_answers = " + std::to_string(n_answers) + " but the attribute cardinality is " + std::to_string(needed));
  }
  if (n_text_tokens < kMaxTemplateLength + 1) fail("n_text_tokens must be >= " + std::to_string(kMaxTemplateLength + 1));
  const Vocabulary voc = vocabulary(*this);
  if (vocab_size < voc.function_word(kWordCount)) {
    fail("vocab_size must be >= " + std::to_string(voc.function_word(kWordCount)));
  }
  if (n_templates < 2 || n_templates > kMaxTemplates) fail("n_templates must be in [2, 4]");
  if (n_heldout_templates == 0 || n_heldout_templates >= n_templates) {
    fail("n_heldout_templates must be in [1, n_templates)");
  }
  if (!(visual_noise >= 0.0)) fail("visual_noise must be >= 0");
  if (!(p_shortcut >= 0.0 && p_shortcut <= 1.0)) fail("p_shortcut must be in [0, 1]");
  if (!(shortcut_presence >= 0.0 && shortcut_presence <= 1.0)) fail("shortcut_presence must be in [0, 1]");
  if (!(synonym_rate >= 0.0 && synonym_rate <= 1.0)) fail("synonym_rate must be in [0, 1]");
  if (n_train < 2) fail("n_train must be >= 2");
  if (n_eval < 1) fail("n_eval must be >= 1");
}

std::size_t answer_from_scene(const Scene& scene, const ExampleMeta& meta) {
  if (meta.query == QueryKind::kCountOfColor) {
    if (!meta.queried_color) throw std::invalid_argument("count query without a color");
    return static_cast<std::size_t>(std::count_if(scene.objects.begin(), scene.objects.end(),
                                                  [&](const SceneObject& o) { return o.color == *meta.queried_color; }));
  }
  if (!meta.referent_shape) throw std::invalid_argument("shape query without a referent");
  for (const auto& o : scene.objects) {
    if (o.shape == *meta.referent_shape) return meta.query == QueryKind::kColorOfShape ? o.color : o.size;
  }
  throw std::invalid_argument("referent shape not in scene");
}

const std::vector<SyntheticExample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  for (const auto& [n, ex] : eval)
    if (n == name) return ex;
  throw std::invalid_argument("unknown split '" + name + "'");
}

Dataset generate_dataset(const TaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset d;
  d.cfg = cfg;
  d.seed = seed;
  d.train.reserve(cfg.n_train);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    Rng rng = stream(seed, 1, i);
    d.train.push_back(make_example(cfg, rng, true, i, "train"));
  }
  std::vector<SyntheticExample> clean;
  for (std::size_t i = 0; i < cfg.n_eval; ++i) {
    Rng rng = stream(seed, 2, i);
    clean.push_back(make_example(cfg, rng, false, i, "clean"));
  }

  auto derived = [&](const std::string& name, std::uint64_t tag, PerturbationSpec spec, auto applies) {
    std::vector<SyntheticExample> out;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      if (!applies(clean[i])) continue;
      SyntheticExample ex = perturb(clean[i], spec, cfg, stream(seed, tag, i)());
      ex.meta.split = name;
      out.push_back(std::move(ex));
    }
    return out;
  };
  auto always = [](const SyntheticExample&) { return true; };
  PerturbationSpec rephrase{PerturbationKind::kRephrase, cfg.n_train_templates(), 1};
  d.eval.emplace_back("clean", clean);
  d.eval.emplace_back("rephrase", derived("rephrase", 3, rephrase, always));
  d.eval.emplace_back("synonym", derived("synonym", 4, PerturbationSpec{PerturbationKind::kSynonym, std::nullopt, 1}, always));
  d.eval.emplace_back("remove_irrelevant",
                      derived("remove_irrelevant", 5, PerturbationSpec{PerturbationKind::kRemoveIrrelevant, std::nullopt, 1}, always));
  d.eval.emplace_back("remove_relevant",
                      derived("remove_relevant", 6, PerturbationSpec{PerturbationKind::kRemoveRelevantCount, std::nullopt, 1},
                              [](const SyntheticExample& ex) {
                                return ex.meta.query == QueryKind::kCountOfColor && ex.y >= 1;
                              }));
  d.eval.emplace_back("counterexample",
                      derived("counterexample", 7, PerturbationSpec{PerturbationKind::kShortcutCounterexample, std::nullopt, 1}, always));
  return d;
}

SyntheticExample perturb(const SyntheticExample& ex, const PerturbationSpec& spec, const TaskConfig& cfg,
                         std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SyntheticExample out = ex;
  switch (spec.kind) {
    case PerturbationKind::kRephrase: {
      std::size_t target;
      if (spec.target_template) {
        target = *spec.target_template;
        if (target >= cfg.n_templates) throw std::invalid_argument("rephrase: template out of range");
        if (target == ex.meta.template_id) throw std::invalid_argument("rephrase: target equals current template");
      } else {
        target = uniform_index(rng, cfg.n_templates - 1);
        if (target >= ex.meta.template_id) ++target;
      }
      out.meta.template_id = target;
      out.x_l = render(cfg, out.meta, uses_synonym(cfg, ex));
      break;
    }
    case PerturbationKind::kSynonym:
      out.x_l = render(cfg, out.meta, !uses_synonym(cfg, ex));
      break;
    case PerturbationKind::kRemoveIrrelevant: {
      std::vector<std::size_t> candidates;
      for (std::size_t k = 0; k < cfg.n_visual_tokens; ++k) {
        const int o = ex.token_object[k];
        if (o < 0 ? !token_blank(cfg, ex, k) : !object_relevant(ex.scene.objects[static_cast<std::size_t>(o)], ex.meta)) {
          candidates.push_back(k);
        }
      }
      std::shuffle(candidates.begin(), candidates.end(), rng);
      candidates.resize(std::min(candidates.size(), spec.remove_count));
      for (std::size_t k : candidates) blank_token(cfg, out, k);
      break;
    }
    case PerturbationKind::kRemoveRelevantCount: {
      if (ex.meta.query != QueryKind::kCountOfColor) {
        throw std::invalid_argument("remove_relevant_count: only applies to counting queries");
      }
      if (ex.y == 0) throw std::invalid_argument("remove_relevant_count: nothing to remove (count is 0)");
      std::vector<std::size_t> candidates;
      for (std::size_t k = 0; k < cfg.n_visual_tokens; ++k) {
        const int o = ex.token_object[k];
        if (o >= 0 && object_relevant(ex.scene.objects[static_cast<std::size_t>(o)], ex.meta)) candidates.push_back(k);
      }
      blank_token(cfg, out, candidates[uniform_index(rng, candidates.size())]);
      out.y = ex.y - 1;
      break;
    }
    case PerturbationKind::kShortcutCounterexample:
      out.meta.shortcut_token_present = true;
      out.meta.shortcut_answer = wrong_answer(rng, ex.y, cfg.n_answers);
      out.x_l.back() = vocabulary(cfg).shortcut(*out.meta.shortcut_answer);
      break;
  }
  return out;
}

std::string to_jsonl(const std::vector<SyntheticExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    const std::size_t dv = ex.token_object.empty() ? ex.x_v.size() : ex.x_v.size() / ex.token_object.size();
    out += example_json(ex, dv).dump();
    out += '\n';
  }
  return out;
}

std::vector<SyntheticExample> from_jsonl(const std::string& text) {
  std::vector<SyntheticExample> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(example_from_json(json::parse(line)));
  }
  return out;
}

std::string task_config_json(const TaskConfig& c) {
  json j;
  j["n_objects"] = c.n_objects;
  j["n_shapes"] = c.n_shapes;
  j["n_colors"] = c.n_colors;
  j["n_sizes"] = c.n_sizes;
  j["n_visual_tokens"] = c.n_visual_tokens;
  j["n_text_tokens"] = c.n_text_tokens;
  j["n_answers"] = c.n_answers;
  j["vocab_size"] = c.vocab_size;
  j["n_templates"] = c.n_templates;
  j["n_heldout_templates"] = c.n_heldout_templates;
  j["visual_noise"] = c.visual_noise;
  j["p_shortcut"] = c.p_shortcut;
  j["shortcut_presence"] = c.shortcut_presence;
  j["synonym_rate"] = c.synonym_rate;
  j["n_train"] = c.n_train;
  j["n_eval"] = c.n_eval;
  return j.dump(2);
}

TaskConfig task_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  TaskConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("n_objects", c.n_objects);
  get("n_shapes", c.n_shapes);
  get("n_colors", c.n_colors);
  get("n_sizes", c.n_sizes);
  get("n_visual_tokens", c.n_visual_tokens);
  get("n_text_tokens", c.n_text_tokens);
  get("n_answers", c.n_answers);
  get("vocab_size", c.vocab_size);
  get("n_templates", c.n_templates);
  get("n_heldout_templates", c.n_heldout_templates);
  get("visual_noise", c.visual_noise);
  get("p_shortcut", c.p_shortcut);
  get("shortcut_presence", c.shortcut_presence);
  get("synonym_rate", c.synonym_rate);
  get("n_train", c.n_train);
  get("n_eval", c.n_eval);
  c.validate();
  return c;
}

void write_dataset(const Dataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["seed"] = data.seed;
  manifest["task"] = json::parse(task_config_json(data.cfg));
  json splits = json::array({"train"});
  for (const auto& [name, ex] : data.eval) splits.push_back(name);
  manifest["splits"] = splits;
  write_file(fs::path(dir) / "dataset.json", manifest.dump(2) + "\n");
  write_file(fs::path(dir) / "train.jsonl", to_jsonl(data.train));
  for (const auto& [name, ex] : data.eval) write_file(fs::path(dir) / (name + ".jsonl"), to_jsonl(ex));
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const json manifest = json::parse(read_file(fs::path(dir) / "dataset.json"));
  Dataset d;
  d.seed = manifest.at("seed").get<std::uint64_t>();
  d.cfg = task_config_from_json(manifest.at("task").dump());
  for (const auto& s : manifest.at("splits")) {
    const std::string name = s.get<std::string>();
    auto ex = from_jsonl(read_file(fs::path(dir) / (name + ".jsonl")));
    if (name == "train") {
      d.train = std::move(ex);
    } else {
      d.eval.emplace_back(name, std::move(ex));
    }
  }
  return d;
}

ToyModel::ToyModel(const TaskConfig& task, const ModelConfig& cfg, Rng& rng)
    : task_(task),
      cfg_(cfg),
      embedding_(Tensor::parameter({task.vocab_size, cfg.embed_dim}, normal_vector(task.vocab_size * cfg.embed_dim, 1.0, rng))),
      visual_(task.visual_dim(), cfg.d_model, Activation::kTanh, rng, false, cfg.initial_log_var),
      text_(cfg.embed_dim, cfg.d_model, Activation::kTanh, rng, false, cfg.initial_log_var),
      pool_v_(Linear::init(cfg.d_model, cfg.pooled_dim, rng)),
      pool_l_(Linear::init(cfg.d_model, cfg.pooled_dim, rng)),
      head1_(Linear::init(2 * cfg.pooled_dim, cfg.head_hidden, rng)),
      head2_(Linear::init(cfg.head_hidden, task.n_answers, rng)),
      critic_(cfg.pooled_dim, cfg.pooled_dim, cfg.critic_hidden, rng) {
  task.validate();
}

ParamSet ToyModel::params() const {
  ParamSet p;
  p.add("embedding", embedding_);
  visual_.register_into(p, "visual");
  text_.register_into(p, "text");
  pool_v_.register_into(p, "pool_v");
  pool_l_.register_into(p, "pool_l");
  head1_.register_into(p, "head.hidden");
  head2_.register_into(p, "head.out");
  critic_.register_into(p, "critic");
  return p;
}

namespace {

ModalityEncoding encode_stream(const DiagGaussian& tokens, std::size_t n, std::size_t len, const Linear& pool,
                               EncodeMode mode, Rng* rng) {
  const std::size_t d = tokens.dim();
  ModalityEncoding m{tokens, Tensor(), tokens, Tensor()};
  m.samples = mode == EncodeMode::kTrain ? sample(tokens, standard_normal(tokens.mu().shape(), *rng)) : tokens.mu();
  m.pooled = pool_sequence(DiagGaussian(reshape(tokens.mu(), {n, len, d}), reshape(tokens.full_log_var(), {n, len, d})), 1);
  m.pooled_vector = pool(mean(reshape(m.samples, {n, len, d}), 1));
  return m;
}

}  // namespace

EncodedBatch encode(const ToyModel& model, std::span<const SyntheticExample* const> batch, EncodeMode mode, Rng* rng) {
  const TaskConfig& task = model.task();
  if (batch.empty()) throw std::invalid_argument("encode: empty batch");
  if (mode == EncodeMode::kTrain && rng == nullptr) throw std::invalid_argument("encode: training mode needs an rng");
  const std::size_t n = batch.size(), k = task.n_visual_tokens, l = task.n_text_tokens, dv = task.visual_dim();
  std::vector<double> xv;
  std::vector<std::size_t> ids;
  xv.reserve(n * k * dv);
  ids.reserve(n * l);
  for (const SyntheticExample* ex : batch) {
    if (ex->x_v.size() != k * dv || ex->x_l.size() != l) throw ShapeError("encode: example does not match the task shape");
    xv.insert(xv.end(), ex->x_v.begin(), ex->x_v.end());
    for (std::size_t w : ex->x_l) {
      if (w >= task.vocab_size) throw std::invalid_argument("encode: word id outside the vocabulary");
      ids.push_back(w);
    }
  }
  EncodedBatch out{
      encode_stream(model.visual()(Tensor::from({n * k, dv}, std::move(xv))), n, k, model.pool_v(), mode, rng),
      encode_stream(model.text()(gather_rows(model.embedding(), ids)), n, l, model.pool_l(), mode, rng), n};
  return out;
}

EncodedBatch encode(const ToyModel& model, const std::vector<SyntheticExample>& batch, EncodeMode mode, Rng* rng) {
  std::vector<const SyntheticExample*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return encode(model, std::span<const SyntheticExample* const>(ptrs), mode, rng);
}

Tensor predict(const ToyModel& model, const EncodedBatch& e) {
  return model.head_out()(tanh(model.head_hidden()(concat({e.v.pooled_vector, e.l.pooled_vector}, 1))));
}

namespace {

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.shape()[0], a = logits.shape()[1];
  const auto data = logits.data();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = data.subspan(i * a, a);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace

std::vector<std::size_t> predict_labels(const ToyModel& model, const std::vector<SyntheticExample>& data,
                                        std::size_t batch) {
  NoGradGuard guard;
  std::vector<std::size_t> out;
  out.reserve(data.size());
  std::vector<const SyntheticExample*> ptrs;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) ptrs.push_back(&data[i]);
    const auto labels = argmax_rows(predict(model, encode(model, ptrs, EncodeMode::kEval)));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

double accuracy(const std::vector<std::size_t>& predictions, const std::vector<SyntheticExample>& data) {
  if (predictions.size() != data.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += predictions[i] == data[i].y;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainingDiverged::TrainingDiverged(std::size_t step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

std::size_t effective_warmup(std::size_t warmup_steps, std::size_t total_steps) {
  return std::min(warmup_steps, total_steps / 10);
}

TrainResult train(ToyModel& model, const std::vector<SyntheticExample>& data, const CIBConfig& cfg,
                  const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  if (data.size() < 2) throw std::invalid_argument("train: need at least 2 examples");
  const std::size_t bs = std::min(cfg.batch_size, data.size());
  std::size_t per_epoch = data.size() / bs;
  const bool tail = data.size() % bs >= 2;
  per_epoch += tail;
  const std::size_t total = per_epoch * cfg.epochs;
  const LinearWarmupDecay schedule(cfg.learning_rate, effective_warmup(cfg.warmup_steps, total), total);
  MomentumSgd opt(0.9);
  const ParamSet params = model.params();
  Rng order_rng = stream(cfg.seed, 11, 0);
  Rng noise_rng = stream(cfg.seed, 12, 0);
  MineState mine;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;
  std::size_t step = 0;
  std::vector<const SyntheticExample*> batch;
  std::vector<std::size_t> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t seen = 0, hits = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * bs, end = std::min(data.size(), begin + bs);
      batch.clear();
      labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(&data[order[i]]);
        labels.push_back(data[order[i]].y);
      }
      Tensor logits, vqa, loss;
      RegularizerBreakdown reg;
      try {
        const EncodedBatch enc = encode(model, batch, EncodeMode::kTrain, &noise_rng);
        logits = predict(model, enc);
        vqa = vqa_loss(logits, labels);
        reg = regularizer(enc.v, enc.l, model.critic(), cfg, mine);
        loss = cib_loss(vqa, reg, cfg.beta);
      } catch (const DomainError& e) {
        throw TrainingDiverged(step, e.what());
      }
      const double lv = loss.item();
      if (!std::isfinite(lv) || !std::isfinite(reg.total)) {
        throw TrainingDiverged(step, "non-finite loss (vqa " + std::to_string(vqa.item()) + ", regularizer " +
                                         std::to_string(reg.total) + ")");
      }
      const double lr = schedule.at(step);
      opt.step(params, backward(loss), lr);
      if (on_step) on_step({step, lr, lv, vqa.item(), reg});

      const double w = static_cast<double>(batch.size());
      m.loss += w * lv;
      m.vqa += w * vqa.item();
      m.reg_total += w * reg.total;
      m.i_xv_tv += w * reg.i_xv_tv;
      m.i_xl_tl += w * reg.i_xl_tl;
      m.i_tv_tl += w * reg.i_tv_tl;
      m.d_skl += w * reg.d_skl;
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
      seen += batch.size();
      ++step;
    }
    const double s = static_cast<double>(seen);
    m.loss /= s;
    m.vqa /= s;
    m.reg_total /= s;
    m.i_xv_tv /= s;
    m.i_xl_tl /= s;
    m.i_tv_tl /= s;
    m.d_skl /= s;
    m.train_accuracy = static_cast<double>(hits) / s;
    result.epochs.push_back(m);
  }
  result.steps = step;
  return result;
}

}  // namespace cib
