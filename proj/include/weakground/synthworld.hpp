#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "weakground/geometry.hpp"

namespace wg {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Category names, appearance prototypes and the pairs deliberately placed
/// close together in appearance space.
struct CategoryVocab {
  std::vector<std::string> names;
  std::vector<std::vector<double>> prototypes;  // unit norm, appearance_dim each
  std::vector<std::pair<std::size_t, std::size_t>> confusable;
  std::vector<Vec3> typical_size;
  std::vector<bool> elevated;  // mounted off the floor (e.g. on a wall)

  static constexpr double kConfusableCosine = 0.9;

  std::size_t size() const { return names.size(); }
  std::size_t appearance_dim() const { return prototypes.empty() ? 0 : prototypes[0].size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  /// Throws GenerationError when an invariant fails.
  void validate() const;
};

/// Deterministic vocabulary: the first ten categories use indoor names, any
/// further ones are numbered. Confusable pairs are (1,2), (3,4), ...
CategoryVocab make_vocab(std::size_t categories, std::size_t confusable_pairs, std::size_t appearance_dim,
                         std::uint64_t seed);

struct SceneObject {
  int id = 0;
  std::size_t category = 0;
  Box3 box;
  std::vector<double> appearance;
};

struct Proposal {
  Box3 box;
  double confidence = 1.0;
  std::vector<double> det_likelihood;
  std::vector<double> appearance;
  std::optional<int> matched_object;  // generator bookkeeping only
};

struct TemplateMeta {
  std::size_t target_category = 0;
  std::optional<RelationId> relation;
  std::optional<std::size_t> anchor_category;
  int template_variant = 0;
  int phrase_variant = 0;
};

struct QueryRecord {
  std::string text;
  std::optional<int> eval_target;  // absent when loaded in weak mode
  std::optional<TemplateMeta> meta;
};

struct Scene {
  std::string id;
  std::string split;
  std::vector<SceneObject> objects;
  std::vector<Proposal> proposals;
  std::vector<QueryRecord> queries;

  const SceneObject* object(int id) const;
};

struct NoiseConfig {
  double box_jitter = 0.05;          // std of center / size perturbation, meters
  double class_temperature = 0.05;   // softmax temperature over prototype affinity
  double class_noise = 0.02;         // std of Gaussian noise on affinities
  double false_positive_rate = 1.0;  // Poisson mean
  double drop_rate = 0.0;
  double appearance_std = 0.1;
  double confidence_threshold = 0.05;
  std::size_t max_proposals = 24;
};

struct GenConfig {
  std::size_t categories = 10;
  std::size_t confusable_pairs = 2;
  std::size_t appearance_dim = 16;
  std::size_t min_objects = 6;
  std::size_t max_objects = 9;
  Vec3 room{8.0, 8.0, 3.0};
  /// Instances of the query target's category, drawn uniformly.
  std::size_t min_instances = 2;
  std::size_t max_instances = 4;
  std::optional<std::size_t> target_category;
  std::size_t relational_queries = 1;
  /// Category-only queries about objects whose category is unique in the scene.
  std::size_t unique_queries = 0;
  std::size_t train_scenes = 500;
  std::size_t test_scenes = 100;
  int placement_retries = 400;
  RelationParams relation;
  NoiseConfig noise;
};

/// Seed for scene `index` derived from the dataset seed.
std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index);

/// Objects only; proposals and queries are filled by the calls below.
Scene generate_scene(const GenConfig& cfg, const CategoryVocab& vocab, std::uint64_t seed);

std::vector<double> detector_likelihood(const CategoryVocab& vocab, std::size_t category, const NoiseConfig& noise,
                                        std::mt19937_64* rng);

std::vector<Proposal> synth_detect(const Scene& scene, const CategoryVocab& vocab, const GenConfig& cfg,
                                   std::uint64_t seed);

/// Noiseless one-proposal-per-object set used by the GT-proposal metric.
std::vector<Proposal> gt_proposals(const Scene& scene, const CategoryVocab& vocab, const NoiseConfig& noise);

/// Renders the text for a template; shared with the parser tests.
std::string render_query(const TemplateMeta& meta, const CategoryVocab& vocab);

/// Emits one relational query about a category with 2+ instances, or a
/// category-only query when `relational` is false. Throws GenerationError
/// when no truthful, discriminative query exists.
QueryRecord generate_query(const Scene& scene, const CategoryVocab& vocab, const GenConfig& cfg, bool relational,
                           std::uint64_t seed);

/// True when the query's relation holds for its target and for no
/// same-category distractor (category-only queries: target is unique).
bool query_is_truthful(const Scene& scene, const QueryRecord& q, const RelationParams& params);

struct DatasetSummary {
  std::size_t train_scenes = 0;
  std::size_t test_scenes = 0;
  std::size_t train_queries = 0;
  std::size_t test_queries = 0;
  std::size_t skipped_scenes = 0;
};

/// Writes `out_path` (one JSON scene per line) and `out_path + ".meta.json"`
/// (vocabulary, room extent, generation config).
DatasetSummary build_dataset(const GenConfig& cfg, std::uint64_t seed, const std::string& out_path);

struct DatasetMeta {
  CategoryVocab vocab;
  Vec3 room;
  NoiseConfig noise;
  RelationParams relation;
};

enum class LoadMode {
  /// Everything, including objects, template metadata and eval targets.
  full,
  /// Only what a weakly supervised learner may see: proposals (without
  /// matched_object) and query text. The "eval" section, objects and
  /// template metadata are never read.
  weak,
};

DatasetMeta load_meta(const std::string& data_path);
std::vector<Scene> load_dataset(const std::string& data_path, LoadMode mode, const std::string& split = "");

std::string scene_to_json_line(const Scene& scene);
Scene scene_from_json_line(const std::string& line, LoadMode mode);

}  // namespace wg
