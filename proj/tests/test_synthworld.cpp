#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "weakground/numcore.hpp"
#include "weakground/synthworld.hpp"

using namespace wg;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("wg_test_" + name)).string();
}

GenConfig small_cfg() {
  GenConfig cfg;
  cfg.train_scenes = 10;
  cfg.test_scenes = 5;
  return cfg;
}

}  // namespace

TEST_CASE("vocabulary") {
  const CategoryVocab v = make_vocab(10, 2, 16, 3);
  CHECK(v.size() == 10);
  CHECK(v.find("toilet paper").has_value());
  CHECK(v.find("end table") == std::optional<std::size_t>(2));
  CHECK(cosine_sim(v.prototypes[1], v.prototypes[2]) >= 0.9);
  CHECK(cosine_sim(v.prototypes[3], v.prototypes[4]) >= 0.9);
  for (const auto& p : v.prototypes) {
    double n = 0;
    for (double x : p) n += x * x;
    CHECK(std::abs(n - 1.0) < 1e-12);
  }
  const CategoryVocab big = make_vocab(14, 3, 8, 1);
  CHECK(big.names[12] == "object12");
  CHECK_THROWS_AS(make_vocab(4, 2, 16, 0), GenerationError);
}

TEST_CASE("generate_scene examples") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig one;
  one.min_objects = one.max_objects = 1;
  one.min_instances = one.max_instances = 1;
  const Scene s1 = generate_scene(one, v, 5);
  CHECK(s1.objects.size() == 1);

  GenConfig three;
  three.min_instances = three.max_instances = 3;
  three.target_category = *v.find("chair");
  const Scene s3 = generate_scene(three, v, 9);
  std::vector<const SceneObject*> chairs;
  for (const auto& o : s3.objects)
    if (o.category == *v.find("chair")) chairs.push_back(&o);
  REQUIRE(chairs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) CHECK(iou_3d(chairs[i]->box, chairs[j]->box) == 0.0);

  GenConfig crowded;
  crowded.room = {1.0, 1.0, 3.0};
  crowded.min_objects = crowded.max_objects = 9;
  crowded.placement_retries = 20;
  CHECK_THROWS_AS(generate_scene(crowded, v, 1), GenerationError);
}

TEST_CASE("1000 seeded scenes never overlap and stay inside the room") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  const GenConfig cfg;
  std::size_t overlaps = 0, outside = 0, multi = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene s = generate_scene(cfg, v, scene_seed(77, i));
    std::map<std::size_t, int> counts;
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const Box3& b = s.objects[a].box;
      ++counts[s.objects[a].category];
      for (int axis = 0; axis < 3; ++axis) {
        const double lo = b.center[axis] - b.size[axis] / 2, hi = b.center[axis] + b.size[axis] / 2;
        if (lo < -1e-12 || hi > cfg.room[axis] + 1e-12) ++outside;
      }
      for (std::size_t c = a + 1; c < s.objects.size(); ++c)
        if (iou_3d(b, s.objects[c].box) > 0.0) ++overlaps;
    }
    for (auto [cat, n] : counts) multi += n >= 2;
  }
  CHECK(overlaps == 0);
  CHECK(outside == 0);
  CHECK(multi >= 1000);
}

TEST_CASE("generate_scene is deterministic") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  const GenConfig cfg;
  const Scene a = generate_scene(cfg, v, 42), b = generate_scene(cfg, v, 42);
  REQUIRE(a.objects.size() == b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].box == b.objects[i].box);
    CHECK(a.objects[i].appearance == b.objects[i].appearance);
  }
}

TEST_CASE("synth_detect examples") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig cfg;
  const Scene s = generate_scene(cfg, v, 11);

  GenConfig clean = cfg;
  clean.noise = NoiseConfig{0, 0, 0, 0, 0, 0, 0, 24};
  const auto props = synth_detect(s, v, clean, 3);
  REQUIRE(props.size() == s.objects.size());
  for (const auto& p : props) {
    REQUIRE(p.matched_object.has_value());
    const SceneObject* o = s.object(*p.matched_object);
    CHECK(p.box == o->box);
    const auto arg = std::max_element(p.det_likelihood.begin(), p.det_likelihood.end()) - p.det_likelihood.begin();
    CHECK(static_cast<std::size_t>(arg) == o->category);
  }

  GenConfig dropped = cfg;
  dropped.noise.drop_rate = 1.0;
  dropped.noise.false_positive_rate = 0.0;
  CHECK(synth_detect(s, v, dropped, 3).empty());
}

TEST_CASE("synth_detect jitter keeps mean IoU in range") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig cfg;
  cfg.noise.box_jitter = 0.05;
  cfg.noise.false_positive_rate = 0.0;
  double total = 0;
  std::size_t n = 0;
  for (std::uint64_t i = 0; n < 1000; ++i) {
    const Scene s = generate_scene(cfg, v, scene_seed(5, i));
    for (const auto& p : synth_detect(s, v, cfg, scene_seed(6, i))) {
      if (n == 1000) break;
      total += iou_3d(p.box, s.object(*p.matched_object)->box);
      ++n;
    }
  }
  const double mean = total / static_cast<double>(n);
  CHECK(mean >= 0.6);
  CHECK(mean <= 1.0);
}

TEST_CASE("synth_detect output invariants") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig cfg;
  cfg.noise.false_positive_rate = 40.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Scene s = generate_scene(cfg, v, scene_seed(8, i));
    const auto props = synth_detect(s, v, cfg, i);
    CHECK(props.size() <= cfg.noise.max_proposals);
    for (std::size_t k = 0; k < props.size(); ++k) {
      const auto& p = props[k];
      double sum = 0;
      for (double x : p.det_likelihood) sum += x;
      CHECK(std::abs(sum - 1.0) < 1e-9);
      CHECK(p.confidence >= cfg.noise.confidence_threshold);
      CHECK(p.confidence <= 1.0);
      CHECK(p.box.valid());
      if (k > 0) CHECK(props[k - 1].confidence >= p.confidence);
    }
  }
  // Sharp temperature recovers the true category for every matched proposal.
  GenConfig sharp;
  sharp.noise.class_temperature = 1e-4;
  sharp.noise.class_noise = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Scene s = generate_scene(sharp, v, scene_seed(9, i));
    for (const auto& p : synth_detect(s, v, sharp, i)) {
      if (!p.matched_object) continue;
      const auto arg = std::max_element(p.det_likelihood.begin(), p.det_likelihood.end()) - p.det_likelihood.begin();
      CHECK(static_cast<std::size_t>(arg) == s.object(*p.matched_object)->category);
    }
  }
}

TEST_CASE("generate_query examples") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  const std::size_t chair = *v.find("chair"), table = *v.find("table"), sofa = *v.find("sofa");

  Scene s;
  s.objects = {{0, chair, Box3::make({1, 4, 0.45}, {0.5, 0.5, 0.9})},
               {1, chair, Box3::make({6, 4, 0.45}, {0.5, 0.5, 0.9})},
               {2, table, Box3::make({3, 4, 0.4}, {1.4, 0.8, 0.75})},
               {3, sofa, Box3::make({4, 7, 0.4}, {2.0, 0.9, 0.8})}};
  GenConfig cfg;

  TemplateMeta meta;
  meta.target_category = chair;
  meta.relation = RelationId::left;
  meta.anchor_category = table;
  CHECK(render_query(meta, v) == "the chair that is to the left of the table");
  QueryRecord q{render_query(meta, v), 0, meta};
  CHECK(query_is_truthful(s, q, cfg.relation));
  q.eval_target = 1;
  CHECK_FALSE(query_is_truthful(s, q, cfg.relation));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const QueryRecord u = generate_query(s, v, cfg, false, seed);
    if (u.meta->target_category == sofa) {
      CHECK(u.eval_target == 3);
      if (u.meta->template_variant == 0) CHECK(u.text == "the sofa");
    }
    CHECK(u.meta->target_category != chair);
    const QueryRecord r = generate_query(s, v, cfg, true, seed);
    CHECK(r.meta->target_category == chair);
    CHECK(query_is_truthful(s, r, cfg.relation));
  }

  Scene lone;
  lone.objects = {{0, chair, Box3::make({1, 1, 0.45}, {0.5, 0.5, 0.9})}};
  CHECK_THROWS_AS(generate_query(lone, v, cfg, true, 0), GenerationError);
}

TEST_CASE("closest with three instances has a single satisfying instance") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig cfg;
  cfg.min_instances = cfg.max_instances = 3;
  std::size_t seen = 0;
  for (std::uint64_t i = 0; i < 400 && seen < 20; ++i) {
    const Scene s = generate_scene(cfg, v, scene_seed(21, i));
    QueryRecord q;
    try {
      q = generate_query(s, v, cfg, true, i);
    } catch (const GenerationError&) {
      continue;
    }
    if (q.meta->relation != RelationId::closest) continue;
    ++seen;
    const SceneObject* anchor = nullptr;
    std::vector<const SceneObject*> inst;
    for (const auto& o : s.objects) {
      if (o.category == *q.meta->anchor_category) anchor = &o;
      if (o.category == q.meta->target_category) inst.push_back(&o);
    }
    REQUIRE(inst.size() == 3);
    // Brute-force nearest by center distance.
    const SceneObject* best = inst[0];
    for (const auto* o : inst)
      if (distance(o->box.center, anchor->box.center) < distance(best->box.center, anchor->box.center)) best = o;
    CHECK(best->id == *q.eval_target);
  }
  CHECK(seen > 0);
}

TEST_CASE("generated queries are truthful") {
  const CategoryVocab v = make_vocab(10, 2, 16, 0);
  GenConfig cfg;
  std::size_t made = 0;
  std::vector<int> per_relation(kRelationCount, 0);
  for (std::uint64_t i = 0; i < 500; ++i) {
    const Scene s = generate_scene(cfg, v, scene_seed(31, i));
    for (bool relational : {true, false}) {
      try {
        const QueryRecord q = generate_query(s, v, cfg, relational, i);
        CHECK(query_is_truthful(s, q, cfg.relation));
        CHECK(q.text == render_query(*q.meta, v));
        if (q.meta->relation) ++per_relation[relation_index(*q.meta->relation)];
        ++made;
      } catch (const GenerationError&) {
      }
    }
  }
  CHECK(made > 500);
  for (int n : per_relation) CHECK(n > 0);
}

TEST_CASE("build_dataset counts, splits and determinism") {
  const GenConfig cfg = small_cfg();
  const std::string a = temp_path("a.jsonl"), b = temp_path("b.jsonl");
  const DatasetSummary sa = build_dataset(cfg, 12, a);
  build_dataset(cfg, 12, b);
  CHECK(sa.train_scenes == 10);
  CHECK(sa.test_scenes == 5);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a + ".meta.json") == slurp(b + ".meta.json"));

  const auto full = load_dataset(a, LoadMode::full);
  REQUIRE(full.size() == 15);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(full[i].split == (i < 10 ? "train" : "test"));
  CHECK(load_dataset(a, LoadMode::full, "test").size() == 5);

  const DatasetMeta meta = load_meta(a);
  CHECK(meta.vocab.names == make_vocab(10, 2, 16, 12).names);
  for (const auto& s : full) {
    CHECK_FALSE(s.proposals.empty());
    for (const auto& q : s.queries) {
      REQUIRE(q.eval_target.has_value());
      CHECK(s.object(*q.eval_target) != nullptr);
      CHECK(query_is_truthful(s, q, meta.relation));
    }
    // round trip
    CHECK(scene_to_json_line(scene_from_json_line(scene_to_json_line(s), LoadMode::full)) == scene_to_json_line(s));
  }

  const auto weak = load_dataset(a, LoadMode::weak, "train");
  REQUIRE(weak.size() == 10);
  for (std::size_t i = 0; i < weak.size(); ++i) {
    CHECK(weak[i].objects.empty());
    CHECK(weak[i].proposals.size() == full[i].proposals.size());
    for (const auto& p : weak[i].proposals) CHECK_FALSE(p.matched_object.has_value());
    for (std::size_t k = 0; k < weak[i].queries.size(); ++k) {
      CHECK_FALSE(weak[i].queries[k].eval_target.has_value());
      CHECK_FALSE(weak[i].queries[k].meta.has_value());
      CHECK(weak[i].queries[k].text == full[i].queries[k].text);
    }
  }
  CHECK_THROWS_AS(build_dataset(cfg, 1, "/nonexistent-dir/x.jsonl"), DatasetError);
  CHECK_THROWS_AS(load_dataset("/nonexistent-dir/x.jsonl", LoadMode::full), DatasetError);
  for (const auto& p : {a, b}) {
    std::filesystem::remove(p);
    std::filesystem::remove(p + ".meta.json");
  }
}

TEST_CASE("default benchmark configuration") {
  const GenConfig cfg;
  const std::string path = temp_path("bench.jsonl");
  const DatasetSummary s = build_dataset(cfg, 2024, path);
  CHECK(s.train_scenes == 500);
  CHECK(s.test_scenes == 100);
  CHECK(s.train_queries >= 500);
  CHECK(s.test_queries >= 100);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".meta.json");
}
