#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "weakground/numcore.hpp"
#include "weakground/queryparse.hpp"
#include "weakground/synthworld.hpp"

namespace wg {

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  std::size_t relation_count = kRelationCount;
  std::size_t max_tokens = 24;
  std::size_t appearance_dim = 16;
  Vec3 room{8.0, 8.0, 3.0};
  std::vector<std::string> categories;
  std::vector<std::string> token_vocab;  // index 0 is the unknown token

  std::size_t category_count() const { return categories.size(); }
  /// Throws ContractError when a dimension is zero or heads do not divide D.
  void validate() const;
};

/// Words of every category name, relation phrase and template filler, with
/// "<unk>" first. Deterministic for a given vocabulary.
std::vector<std::string> build_token_vocab(const CategoryVocab& vocab);

ModelConfig default_model_config(const DatasetMeta& meta);

/// One query routed through the batched encoder.
struct QueryInput {
  std::size_t scene = 0;  // index into the scene list passed to encode
  const ParsedQuery* parsed = nullptr;
  bool phrases = true;   // compute F_phr
  bool classify = true;  // compute P_s
  bool token_states = false;
};

struct QueryEncoding {
  Var F_po;   // [m x D]
  Var F_se;   // [1 x D]
  Var F_phr;  // [n' x D], valid only when requested
  Var P_s;    // [m x c], valid only when requested
  Var class_logits;  // pre-softmax P_s
  Var tokens;        // fused token states without the summary row, on request
  bool has_phrases = false;
  bool has_classes = false;
};

struct BatchEncoding {
  std::vector<QueryEncoding> queries;
  std::size_t truncated_queries = 0;
};

/// Value-level output of a single (scene, query) pass.
struct EncodedPair {
  Tensor F_po;
  Tensor F_se;
  Tensor F_phr;
  Tensor P_s;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Maps tokens to vocabulary ids, truncating to max_tokens.
  std::vector<std::size_t> token_ids(const std::vector<std::string>& tokens) const;

  /// Raw proposal features: normalized center and size, confidence, appearance.
  Tensor proposal_features(const std::vector<Proposal>& proposals) const;

  /// Visual encoder only: [m x D].
  Var encode_proposals(Tape& tape, const std::vector<Proposal>& proposals);

  /// Text encoder, fusion and classifier for many queries at once. Each query
  /// attends only within its own segment, so results match one-at-a-time runs.
  BatchEncoding encode(Tape& tape, const std::vector<const std::vector<Proposal>*>& scenes,
                       const std::vector<QueryInput>& queries);

  /// concat(F_po_i, F_po_j) -> MLP -> relation logits [1 x R].
  Var relation_head(Tape& tape, Var fi, Var fj);

  EncodedPair encode_pair(const std::vector<Proposal>& proposals, const ParsedQuery& parsed);

  /// Mean token embedding of each category name, used to rank negatives.
  std::vector<std::vector<double>> phrase_embeddings() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);
  std::string serialize() const;
  static Model deserialize(const std::string& text);

 private:
  void init(std::uint64_t seed);
  Var linear(Tape& tape, Var x, const std::string& prefix);
  Var ffn(Tape& tape, Var x, const std::string& prefix);
  Var mha(Tape& tape, Var q_in, Var kv_in, const std::string& prefix, const std::vector<std::size_t>& q_off,
          const std::vector<std::size_t>& k_off);
  Var norm(Tape& tape, Var x, const std::string& prefix);

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace wg
