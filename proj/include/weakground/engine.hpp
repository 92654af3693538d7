#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "weakground/model.hpp"
#include "weakground/objectives.hpp"
#include "weakground/queryparse.hpp"
#include "weakground/synthworld.hpp"

namespace wg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AblationFlags {
  bool c1 = true;  // category matching (L_se + classifier)
  bool c2 = true;  // negative queries (L_PN)
  bool i1 = true;  // phrase matching (L_phr)
  bool i2 = true;  // relation matching (L_rel)

  bool any() const { return c1 || c2 || i1 || i2; }
};

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  double lr = 0.05;
  double momentum = 0.9;
  /// Global gradient L2 norm cap applied before the momentum update; 0 disables.
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::size_t negatives = 25;
  AblationFlags flags;
  /// Score S(Q_i, S_j) from a fusion pass of query i with scene j. When off,
  /// each side reuses the states from its own paired pass.
  bool cross_fusion = true;
  ParseOptions parse;

  // Model shape.
  std::size_t embed_dim = 64;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t heads = 4;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double se = 0, pn = 0, phr = 0, rel = 0, aux = 0, total = 0;
};

/// How often each loss was actually evaluated.
struct LossCounters {
  std::size_t se = 0, pn = 0, phr = 0, rel = 0, aux = 0;
  std::size_t skipped_queries = 0;  // parse failures
  std::size_t truncated_queries = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  LossCounters counters;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains on weakly supervised scenes (queries carry text only).
TrainResult train(Model& model, const std::vector<Scene>& scenes, const CategoryVocab& vocab, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Loads the train split in weak mode, builds the model and trains it.
Model train_from_file(const std::string& data_path, const TrainConfig& cfg, TrainResult* result = nullptr,
                      const EpochCallback& on_epoch = {});

ModelConfig model_config_for(const DatasetMeta& meta, const TrainConfig& cfg);

void write_training_log(const std::string& path, const std::vector<EpochLog>& log);

enum class Branch { category, instance };
const char* branch_name(Branch b);

struct Decision {
  std::size_t proposal = 0;
  Branch branch = Branch::category;
};

/// argmax of the branch whose maximum is larger; ties inside a branch go to
/// the lowest index, a tie across branches goes to the category branch.
/// An empty p_f means the instance branch is unavailable.
Decision decide(const std::vector<double>& p_c, const std::vector<double>& p_f);

struct InferResult {
  Decision decision;
  std::vector<double> p_c;
  std::vector<double> p_f;
};

InferResult infer(Model& model, const std::vector<Proposal>& proposals, const std::string& query,
                  const CategoryVocab& vocab);

enum class EvalMode { detector, gt_proposals };

struct QueryRecordOut {
  std::string scene_id;
  std::string query;
  Branch branch = Branch::category;
  std::size_t chosen = 0;
  double iou = 0;
  bool correct25 = false;
  bool correct50 = false;
  bool correct = false;  // chosen proposal comes from the target object
  double max_pc = 0;
  double max_pf = 0;
};

struct EvalReport {
  EvalMode mode = EvalMode::detector;
  double acc25 = 0, acc50 = 0, acc = 0;
  std::size_t category_branch = 0, instance_branch = 0;
  std::size_t queries = 0;
  std::vector<QueryRecordOut> records;
};

/// Scenes must be loaded in full mode (eval targets and objects present).
EvalReport evaluate(Model& model, const std::vector<Scene>& scenes, const DatasetMeta& meta, EvalMode mode,
                    std::size_t threads = 1);
EvalReport evaluate_file(const std::string& data_path, const std::string& ckpt_path, EvalMode mode,
                         std::size_t threads = 1);

/// Recomputes the aggregates from the per-query records.
EvalReport aggregate(EvalMode mode, std::vector<QueryRecordOut> records);

std::string report_text(const EvalReport& r);
void write_report(const std::string& path, const EvalReport& r);
void write_records_csv(const std::string& path, const EvalReport& r);

/// Expected accuracy of picking uniformly among the true-category instances.
double category_only_ceiling(const std::vector<Scene>& scenes);

struct AblationRow {
  AblationFlags flags;
  EvalReport detector;
  EvalReport gt;
  LossCounters counters;
};

/// The four cumulative configurations {c1}, {c1,c2}, {c1,c2,i1}, {c1,c2,i1,i2}.
std::vector<AblationFlags> ablation_configs();

std::vector<AblationRow> ablate(const std::string& data_path, const TrainConfig& base, std::size_t threads = 1,
                                const std::function<void(const AblationRow&)>& on_row = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

/// WEAKGROUND_THREADS, defaulting to 1.
std::size_t env_threads();

}  // namespace wg
