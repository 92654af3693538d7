#include "weakground/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "weakground/numcore.hpp"

namespace wg {

using nlohmann::json;

namespace {

struct CategorySeed {
  const char* name;
  Vec3 size;
  bool elevated;
};

constexpr CategorySeed kIndoor[] = {
    {"chair", {0.5, 0.5, 0.9}, false},        {"table", {1.4, 0.8, 0.75}, false},
    {"end table", {0.5, 0.5, 0.55}, false},   {"sofa", {2.0, 0.9, 0.8}, false},
    {"armchair", {0.9, 0.9, 0.8}, false},     {"bed", {2.0, 1.6, 0.5}, false},
    {"desk", {1.2, 0.6, 0.75}, false},        {"nightstand", {0.45, 0.4, 0.55}, false},
    {"lamp", {0.3, 0.3, 1.5}, false},         {"toilet paper", {0.15, 0.15, 0.15}, true},
};

std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

std::vector<double> gaussian_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(dim);
  for (double& x : v) x = g(rng);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool boxes_clear(const Box3& a, const Box3& b, double gap) {
  for (int axis = 0; axis < 3; ++axis) {
    const double half = (a.size[axis] + b.size[axis]) / 2.0 + gap;
    if (std::abs(a.center[axis] - b.center[axis]) >= half) return true;
  }
  return false;
}

json box_json(const Box3& b) {
  return {{"center", {b.center.x, b.center.y, b.center.z}}, {"size", {b.size.x, b.size.y, b.size.z}}};
}

Box3 box_from_json(const json& j) {
  const auto& c = j.at("center");
  const auto& s = j.at("size");
  return Box3::make({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()},
                    {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()});
}

std::size_t count_category(const Scene& scene, std::size_t category) {
  return static_cast<std::size_t>(std::count_if(scene.objects.begin(), scene.objects.end(),
                                                [&](const SceneObject& o) { return o.category == category; }));
}

std::vector<std::string_view> relational_templates() { return {"the {t} that is {p} the {a}", "find the {t} {p} the {a}", "choose the {t} which is {p} the {a}"}; }
std::vector<std::string_view> category_templates() { return {"the {t}", "find the {t}", "choose the {t}"}; }

void replace_all(std::string& s, std::string_view from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

}  // namespace

// ---------------------------------------------------------------- vocabulary

std::optional<std::size_t> CategoryVocab::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

void CategoryVocab::validate() const {
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = i + 1; j < names.size(); ++j)
      if (names[i] == names[j]) throw GenerationError("vocab: duplicate category name '" + names[i] + "'");
  if (prototypes.size() != names.size()) throw GenerationError("vocab: prototype count mismatch");
  for (const auto& p : prototypes)
    if (std::abs(dot(p, p) - 1.0) > 1e-9) throw GenerationError("vocab: prototype not unit norm");
  for (auto [a, b] : confusable)
    if (cosine_sim(prototypes[a], prototypes[b]) < kConfusableCosine)
      throw GenerationError("vocab: confusable pair below similarity bound");
}

CategoryVocab make_vocab(std::size_t categories, std::size_t confusable_pairs, std::size_t appearance_dim,
                         std::uint64_t seed) {
  if (categories == 0) throw GenerationError("vocab: need at least one category");
  if (appearance_dim < 2) throw GenerationError("vocab: appearance_dim must be >= 2");
  if (2 * confusable_pairs + 1 > categories) throw GenerationError("vocab: too many confusable pairs");
  CategoryVocab v;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = 0; i < categories; ++i) {
    if (i < std::size(kIndoor)) {
      v.names.emplace_back(kIndoor[i].name);
      v.typical_size.push_back(kIndoor[i].size);
      v.elevated.push_back(kIndoor[i].elevated);
    } else {
      v.names.push_back("object" + std::to_string(i));
      v.typical_size.push_back({0.6, 0.6, 0.6});
      v.elevated.push_back(false);
    }
    v.prototypes.push_back(normalized(gaussian_vector(appearance_dim, rng)));
  }
  for (std::size_t p = 0; p < confusable_pairs; ++p) {
    const std::size_t a = 2 * p + 1, b = 2 * p + 2;
    // b = normalize(a + 0.4 * unit orthogonal) gives cosine 1/sqrt(1.16) ~ 0.93.
    auto r = gaussian_vector(appearance_dim, rng);
    const double proj = dot(r, v.prototypes[a]);
    for (std::size_t k = 0; k < appearance_dim; ++k) r[k] -= proj * v.prototypes[a][k];
    r = normalized(r);
    std::vector<double> mixed(appearance_dim);
    for (std::size_t k = 0; k < appearance_dim; ++k) mixed[k] = v.prototypes[a][k] + 0.4 * r[k];
    v.prototypes[b] = normalized(mixed);
    v.confusable.emplace_back(a, b);
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------- scenes

const SceneObject* Scene::object(int id) const {
  for (const auto& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + index + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Scene generate_scene(const GenConfig& cfg, const CategoryVocab& vocab, std::uint64_t seed) {
  if (cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects) throw GenerationError("gen: bad object count range");
  if (cfg.min_instances == 0 || cfg.min_instances > cfg.max_instances)
    throw GenerationError("gen: bad instance count range");
  std::mt19937_64 rng(seed);
  auto uniform_int = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  const std::size_t n_objects = uniform_int(cfg.min_objects, cfg.max_objects);
  const std::size_t target = cfg.target_category ? *cfg.target_category : uniform_int(0, vocab.size() - 1);
  if (target >= vocab.size()) throw GenerationError("gen: target category out of range");
  const std::size_t instances = std::min(uniform_int(cfg.min_instances, cfg.max_instances), n_objects);

  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < vocab.size(); ++c)
    if (c != target) others.push_back(c);
  std::shuffle(others.begin(), others.end(), rng);
  const std::size_t n_others = n_objects - instances;
  if (n_others > others.size()) throw GenerationError("gen: not enough categories for unique objects");
  others.resize(n_others);

  std::vector<std::size_t> cats(instances, target);
  cats.insert(cats.end(), others.begin(), others.end());
  std::shuffle(cats.begin(), cats.end(), rng);

  Scene scene;
  std::uniform_real_distribution<double> jitter(0.85, 1.15);
  std::normal_distribution<double> noise(0.0, cfg.noise.appearance_std);
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::size_t c = cats[i];
    const Vec3 ts = vocab.typical_size[c];
    const Vec3 size{ts.x * jitter(rng), ts.y * jitter(rng), ts.z * jitter(rng)};
    if (size.x >= cfg.room.x || size.y >= cfg.room.y || size.z >= cfg.room.z)
      throw GenerationError("gen: object larger than room");
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      Vec3 center;
      center.x = std::uniform_real_distribution<double>(size.x / 2, cfg.room.x - size.x / 2)(rng);
      center.y = std::uniform_real_distribution<double>(size.y / 2, cfg.room.y - size.y / 2)(rng);
      if (vocab.elevated[c]) {
        const double top = std::max(size.z / 2 + 0.6, std::min(cfg.room.z - size.z / 2, 1.6));
        center.z = std::uniform_real_distribution<double>(std::min(0.6, top), top)(rng);
      } else {
        center.z = size.z / 2;
      }
      const Box3 box = Box3::make(center, size);
      placed = std::all_of(scene.objects.begin(), scene.objects.end(),
                           [&](const SceneObject& o) { return boxes_clear(o.box, box, 0.05); });
      if (placed) {
        SceneObject obj;
        obj.id = static_cast<int>(i);
        obj.category = c;
        obj.box = box;
        obj.appearance = vocab.prototypes[c];
        for (double& a : obj.appearance) a += noise(rng);
        scene.objects.push_back(std::move(obj));
      }
    }
    if (!placed) throw GenerationError("gen: could not place object " + std::to_string(i) + " after retries");
  }
  return scene;
}

// ---------------------------------------------------------------- detector

std::vector<double> detector_likelihood(const CategoryVocab& vocab, std::size_t category, const NoiseConfig& noise,
                                        std::mt19937_64* rng) {
  std::vector<double> affinity(vocab.size());
  std::normal_distribution<double> g(0.0, noise.class_noise > 0.0 ? noise.class_noise : 1.0);
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    affinity[c] = c == category ? 1.0 : cosine_sim(vocab.prototypes[category], vocab.prototypes[c]);
    if (rng && noise.class_noise > 0.0) affinity[c] += g(*rng);
  }
  if (noise.class_temperature <= 0.0) {
    std::vector<double> onehot(vocab.size(), 0.0);
    onehot[static_cast<std::size_t>(std::max_element(affinity.begin(), affinity.end()) - affinity.begin())] = 1.0;
    return onehot;
  }
  return softmax(affinity, noise.class_temperature);
}

std::vector<Proposal> synth_detect(const Scene& scene, const CategoryVocab& vocab, const GenConfig& cfg,
                                   std::uint64_t seed) {
  const NoiseConfig& nc = cfg.noise;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> jit(0.0, 1.0);
  std::vector<Proposal> out;
  for (const auto& obj : scene.objects) {
    if (nc.drop_rate > 0.0 && u01(rng) < nc.drop_rate) continue;
    Proposal p;
    Box3 b = obj.box;
    if (nc.box_jitter > 0.0) {
      b.center = {b.center.x + nc.box_jitter * jit(rng), b.center.y + nc.box_jitter * jit(rng),
                  b.center.z + nc.box_jitter * jit(rng)};
      b.size = {std::max(0.02, b.size.x + nc.box_jitter * jit(rng)), std::max(0.02, b.size.y + nc.box_jitter * jit(rng)),
                std::max(0.02, b.size.z + nc.box_jitter * jit(rng))};
    }
    p.box = b;
    p.confidence = nc.box_jitter > 0.0 || nc.class_noise > 0.0 ? 0.6 + 0.4 * u01(rng) : 1.0;
    p.det_likelihood = detector_likelihood(vocab, obj.category, nc, &rng);
    p.appearance = obj.appearance;
    p.matched_object = obj.id;
    out.push_back(std::move(p));
  }
  if (nc.false_positive_rate > 0.0) {
    const int n_fp = std::poisson_distribution<int>(nc.false_positive_rate)(rng);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < n_fp; ++i) {
      Proposal p;
      const Vec3 size{0.2 + 1.0 * u01(rng), 0.2 + 1.0 * u01(rng), 0.2 + 1.0 * u01(rng)};
      p.box = Box3::make({size.x / 2 + (cfg.room.x - size.x) * u01(rng), size.y / 2 + (cfg.room.y - size.y) * u01(rng),
                          size.z / 2 + std::max(0.0, cfg.room.z - size.z) * u01(rng) * 0.5},
                         size);
      p.confidence = 0.05 + 0.45 * u01(rng);
      std::vector<double> logits(vocab.size());
      for (double& l : logits) l = 0.1 * g(rng);
      p.det_likelihood = softmax(logits, 1.0);
      p.appearance = gaussian_vector(vocab.appearance_dim(), rng);
      for (double& a : p.appearance) a *= 1.0 / std::sqrt(static_cast<double>(vocab.appearance_dim()));
      out.push_back(std::move(p));
    }
  }
  std::vector<Proposal> kept;
  for (auto& p : out)
    if (p.confidence >= nc.confidence_threshold) kept.push_back(std::move(p));
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Proposal& a, const Proposal& b) { return a.confidence > b.confidence; });
  if (kept.size() > nc.max_proposals) kept.resize(nc.max_proposals);
  return kept;
}

std::vector<Proposal> gt_proposals(const Scene& scene, const CategoryVocab& vocab, const NoiseConfig& noise) {
  std::vector<Proposal> out;
  NoiseConfig clean = noise;
  clean.class_noise = 0.0;
  for (const auto& obj : scene.objects) {
    Proposal p;
    p.box = obj.box;
    p.confidence = 1.0;
    p.det_likelihood = detector_likelihood(vocab, obj.category, clean, nullptr);
    p.appearance = obj.appearance;
    p.matched_object = obj.id;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------- queries

std::string render_query(const TemplateMeta& meta, const CategoryVocab& vocab) {
  std::string text;
  if (meta.relation) {
    if (!meta.anchor_category) throw GenerationError("render_query: relation without anchor");
    text = std::string(relational_templates().at(static_cast<std::size_t>(meta.template_variant)));
    replace_all(text, "{p}", std::string(relation_phrases(*meta.relation)[static_cast<std::size_t>(meta.phrase_variant)]));
    replace_all(text, "{a}", vocab.names.at(*meta.anchor_category));
  } else {
    text = std::string(category_templates().at(static_cast<std::size_t>(meta.template_variant)));
  }
  replace_all(text, "{t}", vocab.names.at(meta.target_category));
  return text;
}

QueryRecord generate_query(const Scene& scene, const CategoryVocab& vocab, const GenConfig& cfg, bool relational,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  std::vector<std::size_t> unique_objects;
  for (std::size_t i = 0; i < scene.objects.size(); ++i)
    if (count_category(scene, scene.objects[i].category) == 1) unique_objects.push_back(i);

  QueryRecord q;
  TemplateMeta meta;
  meta.template_variant = static_cast<int>(pick(3));
  meta.phrase_variant = static_cast<int>(pick(3));

  if (!relational) {
    if (unique_objects.empty()) throw GenerationError("query: no object with a unique category");
    const SceneObject& t = scene.objects[unique_objects[pick(unique_objects.size())]];
    meta.target_category = t.category;
    meta.phrase_variant = 0;
    q.eval_target = t.id;
    q.meta = meta;
    q.text = render_query(meta, vocab);
    return q;
  }

  struct Candidate {
    std::size_t target;
    std::size_t anchor;
  };
  std::vector<std::vector<Candidate>> by_relation(kRelationCount);
  std::vector<std::size_t> multi_categories;
  for (const auto& o : scene.objects)
    if (count_category(scene, o.category) >= 2 &&
        std::find(multi_categories.begin(), multi_categories.end(), o.category) == multi_categories.end())
      multi_categories.push_back(o.category);

  for (std::size_t cat : multi_categories) {
    std::vector<std::size_t> inst;
    std::vector<Box3> ctx;
    for (std::size_t i = 0; i < scene.objects.size(); ++i)
      if (scene.objects[i].category == cat) {
        inst.push_back(i);
        ctx.push_back(scene.objects[i].box);
      }
    for (std::size_t ai : unique_objects) {
      const Box3& anchor = scene.objects[ai].box;
      for (RelationId rel : kRelationLibrary) {
        std::size_t holders = 0, holder = 0;
        for (std::size_t k = 0; k < inst.size(); ++k)
          if (relation_holds(rel, ctx[k], anchor, ctx, cfg.relation)) {
            ++holders;
            holder = inst[k];
          }
        if (holders == 1) by_relation[relation_index(rel)].push_back({holder, ai});
      }
    }
  }
  std::vector<std::size_t> available;
  for (std::size_t r = 0; r < kRelationCount; ++r)
    if (!by_relation[r].empty()) available.push_back(r);
  if (available.empty()) throw GenerationError("query: no discriminative relation triple in scene");
  const std::size_t r = available[pick(available.size())];
  const Candidate c = by_relation[r][pick(by_relation[r].size())];
  meta.target_category = scene.objects[c.target].category;
  meta.relation = kRelationLibrary[r];
  meta.anchor_category = scene.objects[c.anchor].category;
  q.eval_target = scene.objects[c.target].id;
  q.meta = meta;
  q.text = render_query(meta, vocab);
  return q;
}

bool query_is_truthful(const Scene& scene, const QueryRecord& q, const RelationParams& params) {
  if (!q.meta || !q.eval_target) return false;
  const SceneObject* target = scene.object(*q.eval_target);
  if (!target || target->category != q.meta->target_category) return false;
  std::vector<const SceneObject*> same;
  for (const auto& o : scene.objects)
    if (o.category == target->category) same.push_back(&o);
  if (!q.meta->relation) return same.size() == 1;

  const SceneObject* anchor = nullptr;
  for (const auto& o : scene.objects)
    if (o.category == *q.meta->anchor_category) {
      if (anchor) return false;  // anchor phrase would be ambiguous
      anchor = &o;
    }
  if (!anchor) return false;
  std::vector<Box3> ctx;
  for (const auto* o : same) ctx.push_back(o->box);
  for (const auto* o : same) {
    const bool holds = relation_holds(*q.meta->relation, o->box, anchor->box, ctx, params);
    if (holds != (o == target)) return false;
  }
  return true;
}

// ---------------------------------------------------------------- serialization

std::string scene_to_json_line(const Scene& scene) {
  json j;
  j["scene_id"] = scene.id;
  j["split"] = scene.split;
  json objs = json::array();
  for (const auto& o : scene.objects)
    objs.push_back({{"id", o.id}, {"category", o.category}, {"box", box_json(o.box)}, {"appearance", o.appearance}});
  j["objects"] = std::move(objs);
  json props = json::array();
  for (const auto& p : scene.proposals) {
    json pj = {{"box", box_json(p.box)},
               {"confidence", p.confidence},
               {"det_likelihood", p.det_likelihood},
               {"appearance", p.appearance}};
    pj["matched_object"] = p.matched_object ? json(*p.matched_object) : json(nullptr);
    props.push_back(std::move(pj));
  }
  j["proposals"] = std::move(props);
  json queries = json::array();
  json targets = json::array();
  for (const auto& q : scene.queries) {
    json qj = {{"text", q.text}};
    if (q.meta) {
      json m = {{"target", q.meta->target_category},
                {"template", q.meta->template_variant},
                {"phrase", q.meta->phrase_variant}};
      m["relation"] = q.meta->relation ? json(std::string(relation_name(*q.meta->relation))) : json(nullptr);
      m["anchor"] = q.meta->anchor_category ? json(*q.meta->anchor_category) : json(nullptr);
      qj["template_meta"] = std::move(m);
    } else {
      qj["template_meta"] = nullptr;
    }
    queries.push_back(std::move(qj));
    targets.push_back(q.eval_target ? json(*q.eval_target) : json(nullptr));
  }
  j["queries"] = std::move(queries);
  j["eval"] = {{"target_ids", std::move(targets)}};
  return j.dump();
}

Scene scene_from_json_line(const std::string& line, LoadMode mode) {
  const json j = json::parse(line);
  Scene s;
  s.id = j.at("scene_id").get<std::string>();
  s.split = j.at("split").get<std::string>();
  for (const auto& pj : j.at("proposals")) {
    Proposal p;
    p.box = box_from_json(pj.at("box"));
    p.confidence = pj.at("confidence").get<double>();
    p.det_likelihood = pj.at("det_likelihood").get<std::vector<double>>();
    p.appearance = pj.at("appearance").get<std::vector<double>>();
    if (mode == LoadMode::full && !pj.at("matched_object").is_null())
      p.matched_object = pj.at("matched_object").get<int>();
    s.proposals.push_back(std::move(p));
  }
  for (const auto& qj : j.at("queries")) {
    QueryRecord q;
    q.text = qj.at("text").get<std::string>();
    if (mode == LoadMode::full && !qj.at("template_meta").is_null()) {
      const auto& m = qj.at("template_meta");
      TemplateMeta meta;
      meta.target_category = m.at("target").get<std::size_t>();
      meta.template_variant = m.at("template").get<int>();
      meta.phrase_variant = m.at("phrase").get<int>();
      if (!m.at("relation").is_null()) {
        meta.relation = relation_from_name(m.at("relation").get<std::string>());
        if (!meta.relation) throw DatasetError("dataset: unknown relation in " + s.id);
      }
      if (!m.at("anchor").is_null()) meta.anchor_category = m.at("anchor").get<std::size_t>();
      q.meta = meta;
    }
    s.queries.push_back(std::move(q));
  }
  if (mode == LoadMode::full) {
    for (const auto& oj : j.at("objects")) {
      SceneObject o;
      o.id = oj.at("id").get<int>();
      o.category = oj.at("category").get<std::size_t>();
      o.box = box_from_json(oj.at("box"));
      o.appearance = oj.at("appearance").get<std::vector<double>>();
      s.objects.push_back(std::move(o));
    }
    const auto& targets = j.at("eval").at("target_ids");
    if (targets.size() != s.queries.size()) throw DatasetError("dataset: eval target count mismatch in " + s.id);
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (!targets[i].is_null()) s.queries[i].eval_target = targets[i].get<int>();
  }
  return s;
}

namespace {

json vocab_json(const CategoryVocab& v) {
  json sizes = json::array();
  for (const auto& s : v.typical_size) sizes.push_back({s.x, s.y, s.z});
  json pairs = json::array();
  for (auto [a, b] : v.confusable) pairs.push_back({a, b});
  return {{"names", v.names},
          {"prototypes", v.prototypes},
          {"confusable", pairs},
          {"typical_size", sizes},
          {"elevated", v.elevated}};
}

CategoryVocab vocab_from_json(const json& j) {
  CategoryVocab v;
  v.names = j.at("names").get<std::vector<std::string>>();
  v.prototypes = j.at("prototypes").get<std::vector<std::vector<double>>>();
  for (const auto& p : j.at("confusable")) v.confusable.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
  for (const auto& s : j.at("typical_size")) v.typical_size.push_back({s.at(0), s.at(1), s.at(2)});
  v.elevated = j.at("elevated").get<std::vector<bool>>();
  return v;
}

json noise_json(const NoiseConfig& n) {
  return {{"box_jitter", n.box_jitter},
          {"class_temperature", n.class_temperature},
          {"class_noise", n.class_noise},
          {"false_positive_rate", n.false_positive_rate},
          {"drop_rate", n.drop_rate},
          {"appearance_std", n.appearance_std},
          {"confidence_threshold", n.confidence_threshold},
          {"max_proposals", n.max_proposals}};
}

NoiseConfig noise_from_json(const json& j) {
  NoiseConfig n;
  n.box_jitter = j.at("box_jitter");
  n.class_temperature = j.at("class_temperature");
  n.class_noise = j.at("class_noise");
  n.false_positive_rate = j.at("false_positive_rate");
  n.drop_rate = j.at("drop_rate");
  n.appearance_std = j.at("appearance_std");
  n.confidence_threshold = j.at("confidence_threshold");
  n.max_proposals = j.at("max_proposals");
  return n;
}

}  // namespace

DatasetSummary build_dataset(const GenConfig& cfg, std::uint64_t seed, const std::string& out_path) {
  const CategoryVocab vocab = make_vocab(cfg.categories, cfg.confusable_pairs, cfg.appearance_dim, seed);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write dataset to '" + out_path + "'");

  DatasetSummary summary;
  const std::size_t wanted = cfg.train_scenes + cfg.test_scenes;
  const std::size_t max_attempts = 20 * wanted + 100;
  std::size_t written = 0;
  for (std::size_t index = 0; written < wanted; ++index) {
    if (index >= max_attempts) throw GenerationError("dataset: too many unusable scenes");
    const std::uint64_t s = scene_seed(seed, index);
    Scene scene;
    try {
      scene = generate_scene(cfg, vocab, s);
    } catch (const GenerationError&) {
      ++summary.skipped_scenes;
      continue;
    }
    scene.proposals = synth_detect(scene, vocab, cfg, scene_seed(s, 1));
    std::uint64_t qseed = 2;
    for (std::size_t k = 0; k < cfg.relational_queries + cfg.unique_queries; ++k) {
      try {
        scene.queries.push_back(generate_query(scene, vocab, cfg, k < cfg.relational_queries, scene_seed(s, qseed++)));
      } catch (const GenerationError&) {
      }
    }
    if (scene.proposals.empty() || scene.queries.empty()) {
      ++summary.skipped_scenes;
      continue;
    }
    char id[32];
    std::snprintf(id, sizeof id, "scene_%05zu", index);
    scene.id = id;
    const bool train = written < cfg.train_scenes;
    scene.split = train ? "train" : "test";
    (train ? summary.train_scenes : summary.test_scenes)++;
    (train ? summary.train_queries : summary.test_queries) += scene.queries.size();
    out << scene_to_json_line(scene) << '\n';
    ++written;
  }
  if (!out) throw DatasetError("write failed for '" + out_path + "'");

  json meta = {{"format", "weakground-dataset-meta"},
               {"version", 1},
               {"seed", seed},
               {"vocab", vocab_json(vocab)},
               {"room", {cfg.room.x, cfg.room.y, cfg.room.z}},
               {"noise", noise_json(cfg.noise)},
               {"relation", {{"margin", cfg.relation.margin}, {"proximity", cfg.relation.proximity}}}};
  std::ofstream mout(out_path + ".meta.json", std::ios::binary | std::ios::trunc);
  if (!mout) throw DatasetError("cannot write dataset metadata next to '" + out_path + "'");
  mout << meta.dump(1) << '\n';
  return summary;
}

DatasetMeta load_meta(const std::string& data_path) {
  std::ifstream in(data_path + ".meta.json");
  if (!in) throw DatasetError("cannot read dataset metadata '" + data_path + ".meta.json'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError(std::string("dataset metadata: ") + e.what());
  }
  DatasetMeta m;
  m.vocab = vocab_from_json(j.at("vocab"));
  const auto& r = j.at("room");
  m.room = {r.at(0), r.at(1), r.at(2)};
  m.noise = noise_from_json(j.at("noise"));
  m.relation.margin = j.at("relation").at("margin");
  m.relation.proximity = j.at("relation").at("proximity");
  return m;
}

std::vector<Scene> load_dataset(const std::string& data_path, LoadMode mode, const std::string& split) {
  std::ifstream in(data_path);
  if (!in) throw DatasetError("cannot read dataset '" + data_path + "'");
  std::vector<Scene> scenes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      Scene s = scene_from_json_line(line, mode);
      if (split.empty() || s.split == split) scenes.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DatasetError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return scenes;
}

}  // namespace wg
