#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "weakground/model.hpp"
#include "weakground/numcore.hpp"
#include "weakground/queryparse.hpp"

namespace wg {

struct LossWeights {
  double lambda1 = 0.4;    // L_se
  double lambda2 = 0.005;  // L_PN
  double lambda3 = 0.005;  // L_phr
  double lambda4 = 0.6;    // L_rel
  double tau = 0.1;        // L_PN and L_phr temperature
  double tau_se = 0.1;
  double aux_weight = 1.0;  // classifier cross-entropy against detector argmax

  void validate() const;
};

/// KL(softmax(log P_s[:, target] / tau_se) || softmax(cos(F_se, F_po) / tau_se)).
/// P_s only supplies a constant target distribution.
Var loss_se(Var F_po, Var F_se, Var P_s, std::size_t target_category, double tau_se);

/// InfoNCE over top-3 compatibility sums of the positive and negative
/// sentence embeddings. An absent negative set gives exactly 0.
Var loss_pn(Var F_po, Var F_se_pos, const std::optional<Var>& F_se_negs, double tau);

/// Sum over phrases of the best proposal similarity, as a [1 x 1] node.
Var phrase_scene_score(Var F_phr, Var F_po);
/// Same reduction applied to a precomputed [n' x m] similarity matrix.
Var phrase_scene_score_from_similarity(Var sim);
double phrase_scene_score(const Tensor& sim);

/// scores[i][j] = S(Q_i, S_j); pairs sit on the diagonal. Mean of -log h.
Var loss_phr(Var scores, double tau);

struct RelationLoss {
  std::optional<Var> loss;
  /// Selected (subject, anchor) proposal per relation triple.
  std::vector<std::pair<std::size_t, std::size_t>> selections;
};

/// Lowest-index argmax of cos(phrase, proposal) over proposals.
std::size_t select_proposal(const Tensor& F_phr, std::size_t phrase, const Tensor& F_po);

RelationLoss loss_rel(Tape& tape, Model& model, const ParsedQuery& parsed, Var F_phr, Var F_po);

/// Mean cross-entropy of the classifier logits against per-proposal labels.
Var classifier_loss(Var class_logits, const std::vector<std::size_t>& labels);

struct LossBundle {
  double se = 0, pn = 0, phr = 0, rel = 0, aux = 0;
  bool has_se = false, has_pn = false, has_phr = false, has_rel = false, has_aux = false;
  double total = 0;      // weighted sum of the four losses
  double objective = 0;  // total plus the weighted auxiliary term
};

/// Value-level weighted sum; absent terms contribute 0.
LossBundle combine_losses(std::optional<double> se, std::optional<double> pn, std::optional<double> phr,
                          std::optional<double> rel, const LossWeights& w, std::optional<double> aux = std::nullopt);

struct LossTerms {
  std::optional<Var> se, pn, phr, rel, aux;
};

/// Weighted objective on the tape plus its value breakdown. Returns nullopt
/// when every term is absent.
std::optional<Var> total_loss(const LossTerms& terms, const LossWeights& w, LossBundle* bundle);

}  // namespace wg
