#include "weakground/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace wg {

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3, lambda4, aux_weight})
    if (!(l >= 0.0)) throw ContractError("LossWeights: weights must be >= 0");
  if (!(tau > 0.0) || !(tau_se > 0.0)) throw ContractError("LossWeights: temperatures must be > 0");
}

Var loss_se(Var F_po, Var F_se, Var P_s, std::size_t target_category, double tau_se) {
  const Tensor& probs = P_s.value();
  const std::size_t m = F_po.rows();
  if (probs.rows() != m) throw DimensionError("loss_se: P_s rows do not match proposals");
  if (target_category >= probs.cols()) throw ContractError("loss_se: target category out of range");
  std::vector<double> logits(m);
  for (std::size_t y = 0; y < m; ++y) logits[y] = std::log(std::max(probs.at(y, target_category), 1e-12));
  const std::vector<double> q = softmax(logits, tau_se);
  double neg_entropy = 0.0;
  for (double v : q)
    if (v > 0.0) neg_entropy += v * std::log(v);
  Tape& tape = *F_po.tape;
  const Var log_p = log_softmax_rows(cosine_matrix(F_se, F_po), tau_se);
  const Var cross = sum(mul(log_p, tape.constant(Tensor::matrix(1, m, q))));
  return add_scalar(scale(cross, -1.0), neg_entropy);
}

Var loss_pn(Var F_po, Var F_se_pos, const std::optional<Var>& F_se_negs, double tau) {
  const Var pos = row_topk_sum(cosine_matrix(F_se_pos, F_po), 3);
  if (!F_se_negs || F_se_negs->rows() == 0) return info_nce(pos, std::nullopt, tau);
  return info_nce(pos, row_topk_sum(cosine_matrix(*F_se_negs, F_po), 3), tau);
}

Var phrase_scene_score_from_similarity(Var sim) { return sum(row_max(sim)); }

Var phrase_scene_score(Var F_phr, Var F_po) { return phrase_scene_score_from_similarity(cosine_matrix(F_phr, F_po)); }

double phrase_scene_score(const Tensor& sim) {
  double total = 0.0;
  for (std::size_t x = 0; x < sim.rows(); ++x) total += *std::max_element(sim.row(x).begin(), sim.row(x).end());
  return total;
}

Var loss_phr(Var scores, double tau) {
  const std::size_t b = scores.rows();
  if (b == 0 || scores.cols() != b) throw DimensionError("loss_phr: score matrix must be square and nonempty");
  const Var ls = log_softmax_rows(scores, tau);
  Tensor eye(Shape{b, b}, 0.0);
  for (std::size_t i = 0; i < b; ++i) eye.at(i, i) = 1.0;
  return scale(sum(mul(ls, scores.tape->constant(std::move(eye)))), -1.0 / static_cast<double>(b));
}

std::size_t select_proposal(const Tensor& F_phr, std::size_t phrase, const Tensor& F_po) {
  std::size_t best = 0;
  double best_s = -INFINITY;
  for (std::size_t y = 0; y < F_po.rows(); ++y) {
    const double s = cosine_sim(F_phr.row(phrase), F_po.row(y));
    if (s > best_s) {
      best_s = s;
      best = y;
    }
  }
  return best;
}

RelationLoss loss_rel(Tape& tape, Model& model, const ParsedQuery& parsed, Var F_phr, Var F_po) {
  RelationLoss out;
  if (parsed.relation_triples.empty()) return out;
  std::vector<Var> terms;
  for (const auto& t : parsed.relation_triples) {
    const std::size_t i = select_proposal(F_phr.value(), t.subject, F_po.value());
    const std::size_t j = select_proposal(F_phr.value(), t.anchor, F_po.value());
    out.selections.emplace_back(i, j);
    const Var logits = model.relation_head(tape, slice_rows(F_po, i, i + 1), slice_rows(F_po, j, j + 1));
    terms.push_back(cross_entropy(logits, relation_index(t.relation)));
  }
  Var total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  out.loss = scale(total, 1.0 / static_cast<double>(terms.size()));
  return out;
}

Var classifier_loss(Var class_logits, const std::vector<std::size_t>& labels) {
  const std::size_t m = class_logits.rows(), c = class_logits.cols();
  if (labels.size() != m) throw DimensionError("classifier_loss: one label per row required");
  Tensor onehot(Shape{m, c}, 0.0);
  for (std::size_t y = 0; y < m; ++y) {
    if (labels[y] >= c) throw ContractError("classifier_loss: label out of range");
    onehot.at(y, labels[y]) = 1.0;
  }
  const Var lp = log_softmax_rows(class_logits);
  return scale(sum(mul(lp, class_logits.tape->constant(std::move(onehot)))), -1.0 / static_cast<double>(m));
}

LossBundle combine_losses(std::optional<double> se, std::optional<double> pn, std::optional<double> phr,
                          std::optional<double> rel, const LossWeights& w, std::optional<double> aux) {
  LossBundle b;
  b.has_se = se.has_value();
  b.has_pn = pn.has_value();
  b.has_phr = phr.has_value();
  b.has_rel = rel.has_value();
  b.has_aux = aux.has_value();
  b.se = se.value_or(0.0);
  b.pn = pn.value_or(0.0);
  b.phr = phr.value_or(0.0);
  b.rel = rel.value_or(0.0);
  b.aux = aux.value_or(0.0);
  b.total = w.lambda1 * b.se + w.lambda2 * b.pn + w.lambda3 * b.phr + w.lambda4 * b.rel;
  b.objective = b.total + w.aux_weight * b.aux;
  return b;
}

std::optional<Var> total_loss(const LossTerms& terms, const LossWeights& w, LossBundle* bundle) {
  auto val = [](const std::optional<Var>& v) { return v ? std::optional<double>(v->item()) : std::nullopt; };
  if (bundle) *bundle = combine_losses(val(terms.se), val(terms.pn), val(terms.phr), val(terms.rel), w, val(terms.aux));
  std::optional<Var> total;
  auto accumulate = [&](const std::optional<Var>& v, double weight) {
    if (!v) return;
    const Var part = scale(*v, weight);
    total = total ? add(*total, part) : part;
  };
  accumulate(terms.se, w.lambda1);
  accumulate(terms.pn, w.lambda2);
  accumulate(terms.phr, w.lambda3);
  accumulate(terms.rel, w.lambda4);
  accumulate(terms.aux, w.aux_weight);
  return total;
}

}  // namespace wg
