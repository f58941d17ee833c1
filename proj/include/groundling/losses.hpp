#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "groundling/errors.hpp"
#include "groundling/model.hpp"

namespace groundling {

template <typename S>
Tensor<S> one_hot_rows(const std::vector<int64_t>& ids, int classes) {
  Tensor<S> t = Tensor<S>::zeros({int(ids.size()), classes});
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= classes)
      throw IndexError("one_hot_rows: id " + std::to_string(ids[r]) +
                       " outside [0," + std::to_string(classes) + ")");
    t.data[int64_t(r) * classes + ids[r]] = S(1);
  }
  return t;
}

// Mean cross-entropy of logits [N,C] against integer labels.
template <typename S>
Var<S> ce_mean(Net<S>& net, Var<S> logits,
               const std::vector<int64_t>& labels) {
  int n = logits.shape()[0];
  int c = logits.shape()[1];
  if (int(labels.size()) != n)
    throw ShapeMismatch("ce_mean: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  Var<S> picked = mul(log_softmax(logits),
                      net.g.constant(one_hot_rows<S>(labels, c)));
  return scale(sum_all(picked), -1.0 / n);
}

// Cross-entropy at a subset of rows (masked-token prediction). Callers must
// not invoke this with an empty position list; they skip the loss instead.
template <typename S>
Var<S> masked_ce(Net<S>& net, Var<S> logits,
                 const std::vector<int64_t>& positions,
                 const std::vector<int64_t>& targets) {
  if (positions.empty())
    throw InvalidCount("masked_ce: no masked positions");
  return ce_mean(net, gather_rows(logits, positions), targets);
}

// InfoNCE over the rows of a [B,B] score matrix; the diagonal is positive.
template <typename S>
Var<S> ntxent_rows(Net<S>& net, Var<S> scores, double tau) {
  if (!(tau > 0)) throw BadTemperature("temperature " + std::to_string(tau));
  int B = scores.shape()[0];
  std::vector<int64_t> diag(B);
  for (int i = 0; i < B; ++i) diag[i] = i;
  Var<S> picked = mul(log_softmax(scale(scores, 1.0 / tau)),
                      net.g.constant(one_hot_rows<S>(diag, B)));
  return scale(sum_all(picked), -1.0 / B);
}

// Pairwise grounding scores. For image i and caption j, each unmasked token
// keeps its best match over the 16 locations of the projected visual map and
// the kept values sum to score (i,j). token_mask is [B,K], 1 over scoring
// tokens.
template <typename S>
Var<S> grounding_score_matrix(Net<S>& net, Var<S> v3, Var<S> lang3,
                              const Tensor<S>& token_mask, int B, int K) {
  const int D = net.dims.d_model;
  Var<S> pv = net.linear(reshape(v3, {B * kGridCells, D}), "ground.pv");
  Var<S> pl = net.linear(reshape(lang3, {B * K, D}), "ground.pl");
  Var<S> all = matmul(pv, transpose(pl));  // [B*16, B*K]
  Var<S> mask = net.g.constant(token_mask);
  std::vector<Var<S>> rows;
  rows.reserve(B);
  for (int i = 0; i < B; ++i) {
    std::vector<Var<S>> cells;
    cells.reserve(B);
    for (int j = 0; j < B; ++j) {
      Var<S> block = slice(all, i * kGridCells, (i + 1) * kGridCells,
                           j * K, (j + 1) * K);
      Var<S> best = max_axis(block, 0);  // [1,K]
      Var<S> kept = mul(best, slice(mask, j, j + 1, 0, K));
      cells.push_back(sum_all(kept));
    }
    rows.push_back(concat_cols(cells));
  }
  return concat_rows(rows);  // [B,B]
}

// Two-sided contrastive loss over a grounding score matrix. Either side can
// be switched off; the result is the mean of the enabled terms.
template <typename S>
Var<S> grounding_loss(Net<S>& net, Var<S> scores, double tau, bool side_l,
                      bool side_v) {
  if (!side_l && !side_v)
    throw ConfigError("grounding loss has both sides disabled");
  std::vector<Var<S>> terms;
  if (side_l) terms.push_back(ntxent_rows(net, scores, tau));
  if (side_v) terms.push_back(ntxent_rows(net, transpose(scores), tau));
  if (terms.size() == 1) return terms[0];
  return scale(add(terms[0], terms[1]), 0.5);
}

// Bilinear relation score u R_p v^T for every predicate: [1, 6].
template <typename S>
Var<S> relation_scores_all(Net<S>& net, Var<S> u, Var<S> v) {
  std::vector<Var<S>> cells;
  cells.reserve(kNumPredicates);
  for (int p = 0; p < kNumPredicates; ++p) {
    Var<S> R = net.p("rel.R" + std::to_string(p));
    cells.push_back(matmul(matmul(u, R), transpose(v)));
  }
  return concat_cols(cells);
}

// Which-relation loss over a chosen class set: softmax across `classes`
// (predicate ids) for each pair, cross-entropy against the gold predicate.
// Every gold id must appear in `classes`.
template <typename S>
Var<S> relation_loss_over(Net<S>& net, const std::vector<Var<S>>& us,
                          const std::vector<Var<S>>& vs,
                          const std::vector<int64_t>& gold, double tau,
                          const std::vector<int>& classes) {
  if (!(tau > 0)) throw BadTemperature("temperature " + std::to_string(tau));
  if (us.empty()) throw InvalidCount("relation_loss: empty batch");
  if (classes.empty()) throw InvalidCount("relation_loss: empty class set");
  std::vector<int64_t> remapped;
  for (int64_t gp : gold) {
    auto it = std::find(classes.begin(), classes.end(), int(gp));
    if (it == classes.end())
      throw UnknownPredicate("gold predicate " + std::to_string(gp) +
                             " not in the class set");
    remapped.push_back(it - classes.begin());
  }
  std::vector<Var<S>> rows;
  rows.reserve(us.size());
  for (size_t i = 0; i < us.size(); ++i) {
    std::vector<Var<S>> cells;
    cells.reserve(classes.size());
    for (int p : classes) {
      Var<S> R = net.p("rel.R" + std::to_string(p));
      cells.push_back(matmul(matmul(us[i], R), transpose(vs[i])));
    }
    rows.push_back(concat_cols(cells));
  }
  return ce_mean(net, scale(concat_rows(rows), 1.0 / tau), remapped);
}

// Which-relation loss: softmax over the six predicate scores of each pair.
template <typename S>
Var<S> relation_loss(Net<S>& net, const std::vector<Var<S>>& us,
                     const std::vector<Var<S>>& vs,
                     const std::vector<int64_t>& gold, double tau) {
  std::vector<int> all(kNumPredicates);
  for (int p = 0; p < kNumPredicates; ++p) all[p] = p;
  return relation_loss_over(net, us, vs, gold, tau, all);
}

// Which-pair loss: each anchor competes against in-batch pairs holding a
// different gold predicate, scored under the anchor's own relation matrix.
// Anchors without any negative are skipped; all skipped means zero loss,
// reported through `all_skipped`.
template <typename S>
Var<S> object_contrast_loss(Net<S>& net, const std::vector<Var<S>>& us,
                            const std::vector<Var<S>>& vs,
                            const std::vector<int64_t>& gold,
                            bool* all_skipped, double tau = 1.0) {
  if (!(tau > 0)) throw BadTemperature("temperature " + std::to_string(tau));
  std::vector<Var<S>> losses;
  for (size_t a = 0; a < us.size(); ++a) {
    Var<S> R = net.p("rel.R" + std::to_string(gold[a]));
    std::vector<Var<S>> cells;
    cells.push_back(matmul(matmul(us[a], R), transpose(vs[a])));
    for (size_t b = 0; b < us.size(); ++b) {
      if (gold[b] == gold[a]) continue;
      cells.push_back(matmul(matmul(us[b], R), transpose(vs[b])));
    }
    if (cells.size() < 2) continue;
    Var<S> picked = mul(log_softmax(scale(concat_cols(cells), 1.0 / tau)),
                        net.g.constant(one_hot_rows<S>({0}, int(cells.size()))));
    losses.push_back(scale(sum_all(picked), -1.0));
  }
  if (all_skipped) *all_skipped = losses.empty();
  if (losses.empty()) return net.g.constant(Tensor<S>::scalar(S(0)));
  Var<S> total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / losses.size());
}

// Symmetric contrastive loss between unit-norm query sides: cosine matrix,
// InfoNCE both ways, averaged.
template <typename S>
Var<S> search_pair_loss(Net<S>& net, Var<S> qi, Var<S> qw, double tau) {
  Var<S> cosines = matmul(qi, transpose(qw));
  return scale(add(ntxent_rows(net, cosines, tau),
                   ntxent_rows(net, transpose(cosines), tau)),
               0.5);
}

// ---- plain numeric helpers (no tape) ---------------------------------------

// The rank-one matrix that maximizes u R v^T under unit Frobenius norm.
inline Eigen::MatrixXd optimal_relation(const Eigen::VectorXd& u,
                                        const Eigen::VectorXd& v) {
  double nu = u.norm(), nv = v.norm();
  if (nu == 0 || nv == 0)
    throw ZeroVector("optimal_relation needs nonzero role vectors");
  return (u / nu) * (v / nv).transpose();
}

// Index of the largest score; ties resolve to the smallest index.
inline int argmax_first(const Eigen::VectorXd& scores) {
  if (scores.size() == 0) throw InvalidCount("argmax over empty scores");
  int best = 0;
  for (int i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

}  // namespace groundling
