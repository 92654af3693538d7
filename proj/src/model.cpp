#include "weakground/model.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace wg {

using nlohmann::json;

void ModelConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || ffn_mult == 0 || relation_count == 0 || max_tokens == 0 ||
      appearance_dim == 0)
    throw ContractError("ModelConfig: dimensions must be positive");
  if (embed_dim % heads != 0) throw ContractError("ModelConfig: embed_dim must be divisible by heads");
  if (categories.empty()) throw ContractError("ModelConfig: no categories");
  if (token_vocab.empty()) throw ContractError("ModelConfig: empty token vocabulary");
  if (!(room.x > 0 && room.y > 0 && room.z > 0)) throw ContractError("ModelConfig: room extent must be positive");
}

std::vector<std::string> build_token_vocab(const CategoryVocab& vocab) {
  std::vector<std::string> out{"<unk>"};
  std::set<std::string> seen(out.begin(), out.end());
  auto add_words = [&](const std::string& text) {
    for (auto& w : tokenize(text))
      if (seen.insert(w).second) out.push_back(w);
  };
  add_words("the that is find choose which a an of");
  for (RelationId rel : kRelationLibrary)
    for (std::string_view p : relation_phrases(rel)) add_words(std::string(p));
  for (const auto& n : vocab.names) add_words(n);
  return out;
}

ModelConfig default_model_config(const DatasetMeta& meta) {
  ModelConfig cfg;
  cfg.categories = meta.vocab.names;
  cfg.token_vocab = build_token_vocab(meta.vocab);
  cfg.appearance_dim = meta.vocab.appearance_dim();
  cfg.room = meta.room;
  return cfg;
}

namespace {

// Per-tape parameter handle cache so every parameter is one tape node.
struct ParamCache {
  std::uint64_t serial = 0;
  std::vector<Var> vars;
  std::vector<bool> set;
};

thread_local std::map<const ParamStore*, ParamCache> g_cache;

Var P(Tape& tape, ParamStore& store, const std::string& name) {
  ParamCache& c = g_cache[&store];
  if (c.serial != tape.serial()) {
    c.serial = tape.serial();
    c.vars.assign(store.count(), Var{});
    c.set.assign(store.count(), false);
  }
  const ParamId id = store.id(name);
  if (!c.set[id]) {
    c.vars[id] = tape.param(store, id);
    c.set[id] = true;
  }
  return c.vars[id];
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  init(seed);
}

void Model::init(std::uint64_t seed) {
  const std::size_t D = cfg_.embed_dim, F = cfg_.ffn_mult * D;
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t rows, std::size_t cols, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(Shape{rows, cols});
    for (double& v : t.values()) v = u(rng);
    return t;
  };
  auto dense = [&](const std::string& p, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    params_.add(p + ".w", uniform(in, out, bound));
    params_.add(p + ".b", uniform(1, out, bound));
  };
  auto proj = [&](const std::string& p) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(D));
    for (const char* n : {".q", ".k", ".v", ".o"}) params_.add(p + n, uniform(D, D, bound));
  };
  auto layer_norm = [&](const std::string& p) {
    params_.add(p + ".g", Tensor(Shape{1, D}, 1.0));
    params_.add(p + ".b", Tensor(Shape{1, D}, 0.0));
  };

  dense("vis.l1", 7 + cfg_.appearance_dim, D);
  dense("vis.l2", D, D);

  params_.add("txt.tok", uniform(cfg_.token_vocab.size(), D, 1.0));
  params_.add("txt.pos", uniform(cfg_.max_tokens + 1, D, 1.0));
  params_.add("txt.cls", Tensor(Shape{1, D}, 0.0));
  for (std::size_t l = 0; l < cfg_.text_layers; ++l) {
    const std::string p = "txt." + std::to_string(l);
    proj(p + ".attn");
    layer_norm(p + ".ln1");
    dense(p + ".ffn.l1", D, F);
    dense(p + ".ffn.l2", F, D);
    layer_norm(p + ".ln2");
  }
  for (std::size_t l = 0; l < cfg_.fusion_layers; ++l) {
    const std::string p = "fus." + std::to_string(l);
    proj(p + ".p2t");
    layer_norm(p + ".p2t.ln");
    proj(p + ".t2p");
    layer_norm(p + ".t2p.ln");
    dense(p + ".pffn.l1", D, F);
    dense(p + ".pffn.l2", F, D);
    layer_norm(p + ".pffn.ln");
    dense(p + ".tffn.l1", D, F);
    dense(p + ".tffn.l2", F, D);
    layer_norm(p + ".tffn.ln");
  }
  dense("cls.l1", D, D);
  dense("cls.l2", D, cfg_.category_count());
  dense("rel.l1", 2 * D, D);
  dense("rel.l2", D, cfg_.relation_count);
}

std::vector<std::size_t> Model::token_ids(const std::vector<std::string>& tokens) const {
  std::vector<std::size_t> ids;
  for (const auto& t : tokens) {
    if (ids.size() == cfg_.max_tokens) break;
    const auto it = std::find(cfg_.token_vocab.begin(), cfg_.token_vocab.end(), t);
    ids.push_back(it == cfg_.token_vocab.end() ? 0 : static_cast<std::size_t>(it - cfg_.token_vocab.begin()));
  }
  return ids;
}

Tensor Model::proposal_features(const std::vector<Proposal>& proposals) const {
  const std::size_t width = 7 + cfg_.appearance_dim;
  Tensor x(Shape{proposals.size(), width});
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Proposal& p = proposals[i];
    if (p.appearance.size() != cfg_.appearance_dim)
      throw DimensionError("proposal appearance has " + std::to_string(p.appearance.size()) + " dims, model expects " +
                           std::to_string(cfg_.appearance_dim));
    auto row = x.row(i);
    const Vec3& c = p.box.center;
    const Vec3& s = p.box.size;
    row[0] = c.x / cfg_.room.x - 0.5;
    row[1] = c.y / cfg_.room.y - 0.5;
    row[2] = c.z / cfg_.room.z - 0.5;
    row[3] = s.x / cfg_.room.x;
    row[4] = s.y / cfg_.room.y;
    row[5] = s.z / cfg_.room.z;
    row[6] = p.confidence;
    std::copy(p.appearance.begin(), p.appearance.end(), row.begin() + 7);
  }
  return x;
}

Var Model::linear(Tape& tape, Var x, const std::string& prefix) {
  return add_row(matmul(x, P(tape, params_, prefix + ".w")), P(tape, params_, prefix + ".b"));
}

Var Model::ffn(Tape& tape, Var x, const std::string& prefix) {
  return linear(tape, relu(linear(tape, x, prefix + ".l1")), prefix + ".l2");
}

Var Model::norm(Tape& tape, Var x, const std::string& prefix) {
  return layer_norm_rows(x, P(tape, params_, prefix + ".g"), P(tape, params_, prefix + ".b"));
}

Var Model::mha(Tape& tape, Var q_in, Var kv_in, const std::string& prefix, const std::vector<std::size_t>& q_off,
               const std::vector<std::size_t>& k_off) {
  const Var q = matmul(q_in, P(tape, params_, prefix + ".q"));
  const Var k = matmul(kv_in, P(tape, params_, prefix + ".k"));
  const Var v = matmul(kv_in, P(tape, params_, prefix + ".v"));
  return matmul(segment_attention(q, k, v, cfg_.heads, q_off, k_off), P(tape, params_, prefix + ".o"));
}

Var Model::encode_proposals(Tape& tape, const std::vector<Proposal>& proposals) {
  if (proposals.empty()) throw ContractError("encode_proposals: no proposals");
  const Var x = tape.constant(proposal_features(proposals));
  return linear(tape, relu(linear(tape, x, "vis.l1")), "vis.l2");
}

BatchEncoding Model::encode(Tape& tape, const std::vector<const std::vector<Proposal>*>& scenes,
                            const std::vector<QueryInput>& queries) {
  if (queries.empty()) throw ContractError("encode: no queries");
  BatchEncoding out;
  out.queries.resize(queries.size());

  // Visual encoder over every scene at once.
  std::vector<std::size_t> scene_off{0};
  std::vector<Proposal> all;
  for (const auto* s : scenes) {
    if (!s || s->empty()) throw ContractError("encode: scene without proposals");
    all.insert(all.end(), s->begin(), s->end());
    scene_off.push_back(all.size());
  }
  const Var f_po_all = encode_proposals(tape, all);

  // Token stream: [summary, tokens...] per query.
  std::vector<std::size_t> ids, pos, t_off{0}, p_rows, p_off{0};
  std::vector<std::vector<std::size_t>> token_ids_per_query;
  for (const auto& q : queries) {
    if (!q.parsed) throw ContractError("encode: query without parse");
    if (q.scene >= scenes.size()) throw ContractError("encode: scene index out of range");
    if (q.parsed->tokens.size() > cfg_.max_tokens) ++out.truncated_queries;
    auto tid = token_ids(q.parsed->tokens);
    ids.push_back(0);  // summary slot is row 0 of [cls; tok]
    pos.push_back(0);
    for (std::size_t i = 0; i < tid.size(); ++i) {
      ids.push_back(tid[i] + 1);
      pos.push_back(i + 1);
    }
    t_off.push_back(ids.size());
    token_ids_per_query.push_back(std::move(tid));
    for (std::size_t r = scene_off[q.scene]; r < scene_off[q.scene + 1]; ++r) p_rows.push_back(r);
    p_off.push_back(p_rows.size());
  }

  const Var table = concat_rows({P(tape, params_, "txt.cls"), P(tape, params_, "txt.tok")});
  Var T = add(gather_rows(table, ids), gather_rows(P(tape, params_, "txt.pos"), pos));
  for (std::size_t l = 0; l < cfg_.text_layers; ++l) {
    const std::string p = "txt." + std::to_string(l);
    T = norm(tape, add(T, mha(tape, T, T, p + ".attn", t_off, t_off)), p + ".ln1");
    T = norm(tape, add(T, ffn(tape, T, p + ".ffn")), p + ".ln2");
  }

  Var Pst = gather_rows(f_po_all, p_rows);
  for (std::size_t l = 0; l < cfg_.fusion_layers; ++l) {
    const std::string p = "fus." + std::to_string(l);
    Pst = norm(tape, add(Pst, mha(tape, Pst, T, p + ".p2t", p_off, t_off)), p + ".p2t.ln");
    T = norm(tape, add(T, mha(tape, T, Pst, p + ".t2p", t_off, p_off)), p + ".t2p.ln");
    Pst = norm(tape, add(Pst, ffn(tape, Pst, p + ".pffn")), p + ".pffn.ln");
    T = norm(tape, add(T, ffn(tape, T, p + ".tffn")), p + ".tffn.ln");
  }

  std::vector<std::size_t> summary_rows(t_off.begin(), t_off.end() - 1);
  const Var F_se_all = gather_rows(T, summary_rows);

  std::vector<std::size_t> cls_rows, cls_off{0};
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    QueryEncoding& e = out.queries[qi];
    e.F_po = slice_rows(Pst, p_off[qi], p_off[qi + 1]);
    e.F_se = slice_rows(F_se_all, qi, qi + 1);
    if (queries[qi].token_states) e.tokens = slice_rows(T, t_off[qi] + 1, t_off[qi + 1]);
    if (queries[qi].phrases) {
      const std::size_t n_tok = token_ids_per_query[qi].size();
      std::vector<Var> rows;
      for (const auto& np : queries[qi].parsed->noun_phrases) {
        std::size_t b = std::min(np.begin, n_tok - 1), en = std::min(np.end, n_tok);
        if (en <= b) en = b + 1;
        rows.push_back(mean_rows(T, t_off[qi] + 1 + b, t_off[qi] + 1 + en));
      }
      e.F_phr = rows.size() == 1 ? rows[0] : concat_rows(rows);
      e.has_phrases = true;
    }
    if (queries[qi].classify) {
      for (std::size_t r = p_off[qi]; r < p_off[qi + 1]; ++r) cls_rows.push_back(r);
      e.has_classes = true;
    }
    cls_off.push_back(cls_rows.size());
  }
  if (!cls_rows.empty()) {
    const Var logits = linear(tape, relu(linear(tape, gather_rows(Pst, cls_rows), "cls.l1")), "cls.l2");
    const Var probs = softmax_rows(logits);
    for (std::size_t qi = 0; qi < queries.size(); ++qi)
      if (out.queries[qi].has_classes) {
        out.queries[qi].P_s = slice_rows(probs, cls_off[qi], cls_off[qi + 1]);
        out.queries[qi].class_logits = slice_rows(logits, cls_off[qi], cls_off[qi + 1]);
      }
  }
  return out;
}

Var Model::relation_head(Tape& tape, Var fi, Var fj) {
  return linear(tape, relu(linear(tape, concat_cols({fi, fj}), "rel.l1")), "rel.l2");
}

EncodedPair Model::encode_pair(const std::vector<Proposal>& proposals, const ParsedQuery& parsed) {
  Tape tape;
  const BatchEncoding b = encode(tape, {&proposals}, {QueryInput{0, &parsed, true, true}});
  const QueryEncoding& e = b.queries[0];
  return {e.F_po.value(), e.F_se.value(), e.F_phr.value(), e.P_s.value()};
}

std::vector<std::vector<double>> Model::phrase_embeddings() const {
  const Tensor& tok = params_.value("txt.tok");
  std::vector<std::vector<double>> out;
  for (const auto& name : cfg_.categories) {
    const auto ids = token_ids(tokenize(name));
    std::vector<double> e(cfg_.embed_dim, 0.0);
    for (std::size_t id : ids)
      for (std::size_t d = 0; d < cfg_.embed_dim; ++d) e[d] += tok.at(id, d) / static_cast<double>(ids.size());
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr int kCheckpointVersion = 1;

json config_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"text_layers", c.text_layers},
          {"fusion_layers", c.fusion_layers},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"relation_count", c.relation_count},
          {"max_tokens", c.max_tokens},
          {"appearance_dim", c.appearance_dim},
          {"room", {c.room.x, c.room.y, c.room.z}},
          {"categories", c.categories},
          {"token_vocab", c.token_vocab}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.text_layers = j.at("text_layers");
  c.fusion_layers = j.at("fusion_layers");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.relation_count = j.at("relation_count");
  c.max_tokens = j.at("max_tokens");
  c.appearance_dim = j.at("appearance_dim");
  const auto& r = j.at("room");
  c.room = {r.at(0), r.at(1), r.at(2)};
  c.categories = j.at("categories").get<std::vector<std::string>>();
  c.token_vocab = j.at("token_vocab").get<std::vector<std::string>>();
  return c;
}

}  // namespace

std::string Model::serialize() const {
  std::string out = json{{"format", "weakground-checkpoint"}, {"version", kCheckpointVersion}, {"config", config_json(cfg_)}}
                        .dump();
  out.push_back('\n');
  char buf[64];
  for (ParamId id = 0; id < params_.count(); ++id) {
    const Tensor& t = params_.value(id);
    out += "param " + params_.name(id) + " " + shape_str(t.shape()) + "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%a", t[i]);
      if (i) out.push_back(' ');
      out += buf;
    }
    out.push_back('\n');
  }
  return out;
}

Model Model::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("checkpoint: empty file");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DatasetError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (header.value("format", "") != "weakground-checkpoint") throw DatasetError("checkpoint: not a checkpoint file");
  if (header.value("version", 0) != kCheckpointVersion)
    throw DatasetError("checkpoint: unsupported version " + header.at("version").dump());
  Model m(config_from_json(header.at("config")), 0);
  for (ParamId id = 0; id < m.params_.count(); ++id) {
    Tensor& t = m.params_.value(id);
    const std::string expect = "param " + m.params_.name(id) + " " + shape_str(t.shape());
    if (!std::getline(in, line) || line != expect)
      throw DatasetError("checkpoint: expected '" + expect + "', got '" + line + "'");
    if (!std::getline(in, line)) throw DatasetError("checkpoint: truncated values for " + m.params_.name(id));
    const char* p = line.c_str();
    for (std::size_t i = 0; i < t.size(); ++i) {
      char* end = nullptr;
      t[i] = std::strtod(p, &end);
      if (end == p) throw DatasetError("checkpoint: bad value in " + m.params_.name(id));
      p = end;
    }
  }
  if (std::getline(in, line) && !line.empty()) throw DatasetError("checkpoint: trailing data");
  return m;
}

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write checkpoint '" + path + "'");
  out << serialize();
  if (!out) throw DatasetError("write failed for checkpoint '" + path + "'");
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace wg
