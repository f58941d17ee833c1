#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "groundling/checkpoint.hpp"
#include "groundling/dataset_io.hpp"
#include "groundling/losses.hpp"
#include "groundling/model.hpp"
#include "groundling/parallel.hpp"
#include "groundling/trainer.hpp"

namespace groundling {

// Inner products between projected visual locations (rows of v) and
// projected token embeddings (rows of l), one column per token, plus the
// masked spatial-max-then-sum score.
struct MatchMap {
  Eigen::MatrixXd m;          // locations x tokens
  std::vector<uint8_t> keep;  // content mask over tokens
  double score = 0;
};

inline MatchMap match_map(const Eigen::MatrixXd& v, const Eigen::MatrixXd& l,
                          const std::vector<uint8_t>& keep) {
  if (v.cols() != l.cols())
    throw ShapeMismatch("match_map: feature dims " + std::to_string(v.cols()) +
                        " vs " + std::to_string(l.cols()));
  if (int64_t(keep.size()) != l.rows())
    throw ShapeMismatch("match_map: mask length " +
                        std::to_string(keep.size()) + " vs " +
                        std::to_string(l.rows()) + " tokens");
  MatchMap out;
  out.m = v * l.transpose();
  out.keep = keep;
  bool any = false;
  for (int k = 0; k < int(keep.size()); ++k) {
    if (!keep[size_t(k)]) continue;
    any = true;
    out.score += out.m.col(k).maxCoeff();
  }
  if (!any) throw EmptyMask("match_map: no content tokens");
  return out;
}

// Content mask over a padded caption: word tokens count, specials and pads
// do not, [CLS] optionally does.
inline std::vector<uint8_t> caption_keep_mask(const std::vector<int>& tokens,
                                              bool include_cls) {
  std::vector<uint8_t> keep(tokens.size(), 0);
  for (size_t k = 0; k < tokens.size(); ++k) {
    if (tokens[k] >= 4) keep[k] = 1;
    if (include_cls && tokens[k] == Vocab::kCls) keep[k] = 1;
  }
  return keep;
}

namespace detail {

template <typename S>
Eigen::MatrixXd to_matrix(const Tensor<S>& t, int64_t row0, int rows,
                          int cols) {
  Eigen::MatrixXd out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out(r, c) = double(t.data[(row0 + r) * cols + c]);
  return out;
}

inline std::vector<int64_t> chunk_tokens(const Dataset& ds,
                                         const std::vector<int>& rows,
                                         size_t at, int B) {
  std::vector<int64_t> tokens;
  tokens.reserve(size_t(B) * kMaxTokens);
  for (int b = 0; b < B; ++b)
    for (int tok : ds.scenes[size_t(rows[at + size_t(b)])].tokens)
      tokens.push_back(tok);
  return tokens;
}

}  // namespace detail

// Visual locations projected by the grounding head: 16 x d_common per scene.
template <typename S>
std::vector<Eigen::MatrixXd> grounded_image_features(const RunConfig& cfg,
                                                     ParamStore<S>& ps,
                                                     const Dataset& ds,
                                                     const std::string& dir,
                                                     const std::vector<int>& rows) {
  ModelDims dims = ModelDims::from(cfg);
  std::vector<Eigen::MatrixXd> out(rows.size());
  const int chunk = 16;
  for (size_t at = 0; at < rows.size(); at += chunk) {
    int B = int(std::min(rows.size() - at, size_t(chunk)));
    std::vector<Tensor<float>> imgs;
    for (int b = 0; b < B; ++b)
      imgs.push_back(
          read_ppm(image_path(dir, ds.scenes[size_t(rows[at + size_t(b)])].id)));
    Graph<S> g;
    Net<S> net(g, ps, dims);
    Var<S> v3 = visual_encode(net, g.constant(batch_image_rows<S>(imgs)), B);
    Var<S> pv = net.linear(reshape(v3, {B * kGridCells, dims.d_model}),
                           "ground.pv");
    const Tensor<S>& val = pv.val();
    for (int b = 0; b < B; ++b)
      out[at + size_t(b)] = detail::to_matrix(val, int64_t(b) * kGridCells,
                                              kGridCells, dims.d_common);
  }
  return out;
}

// Token embeddings projected by the grounding head: K x d_common per scene,
// K = kMaxTokens.
template <typename S>
std::vector<Eigen::MatrixXd> grounded_caption_features(
    const RunConfig& cfg, ParamStore<S>& ps, const Dataset& ds,
    const std::vector<int>& rows) {
  ModelDims dims = ModelDims::from(cfg);
  std::vector<Eigen::MatrixXd> out(rows.size());
  const int chunk = 16;
  for (size_t at = 0; at < rows.size(); at += chunk) {
    int B = int(std::min(rows.size() - at, size_t(chunk)));
    std::vector<int64_t> tokens = detail::chunk_tokens(ds, rows, at, B);
    Graph<S> g;
    Net<S> net(g, ps, dims);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<S> pl = net.linear(reshape(l3, {B * kMaxTokens, dims.d_model}),
                           "ground.pl");
    const Tensor<S>& val = pl.val();
    for (int b = 0; b < B; ++b)
      out[at + size_t(b)] = detail::to_matrix(val, int64_t(b) * kMaxTokens,
                                              kMaxTokens, dims.d_common);
  }
  return out;
}

struct RetrievalResult {
  Eigen::MatrixXd scores;  // images x captions
  double i2t_r1 = 0, i2t_r5 = 0, t2i_r1 = 0, t2i_r5 = 0;
  int n = 0;
};

// Rank of entry `truth` in `row` under descending score, ties broken by
// ascending index.
inline int rank_of(const Eigen::VectorXd& row, int truth) {
  int rank = 1;
  for (int j = 0; j < row.size(); ++j) {
    if (j == truth) continue;
    if (row[j] > row[truth] || (row[j] == row[truth] && j < truth)) ++rank;
  }
  return rank;
}

// Pairwise match scores plus recall at 1 and 5 in both directions. Pair i is
// the true match of image i and caption i.
inline RetrievalResult retrieval_eval(
    const std::vector<Eigen::MatrixXd>& images,
    const std::vector<Eigen::MatrixXd>& captions,
    const std::vector<std::vector<uint8_t>>& keeps) {
  if (images.empty() || images.size() != captions.size() ||
      captions.size() != keeps.size())
    throw InvalidCount("retrieval_eval: need equal nonzero image and caption "
                       "counts");
  const int n = int(images.size());
  RetrievalResult r;
  r.n = n;
  r.scores.resize(n, n);
  parallel_for(n, [&](int64_t i) {
    for (int j = 0; j < n; ++j)
      r.scores(i, j) = match_map(images[size_t(i)], captions[size_t(j)],
                                 keeps[size_t(j)])
                           .score;
  });
  int i2t1 = 0, i2t5 = 0, t2i1 = 0, t2i5 = 0;
  for (int i = 0; i < n; ++i) {
    int ri = rank_of(r.scores.row(i), i);
    if (ri <= 1) ++i2t1;
    if (ri <= 5) ++i2t5;
    int rt = rank_of(r.scores.col(i), i);
    if (rt <= 1) ++t2i1;
    if (rt <= 5) ++t2i5;
  }
  r.i2t_r1 = double(i2t1) / n;
  r.i2t_r5 = double(i2t5) / n;
  r.t2i_r1 = double(t2i1) / n;
  r.t2i_r5 = double(t2i5) / n;
  return r;
}

// Subject/object readouts and relation-space vectors for every scene that
// carries a triplet.
struct RelationExtract {
  std::vector<int> scene_rows;                 // indices into ds.scenes
  Eigen::MatrixXd subj_readout, obj_readout;   // n x d_model
  Eigen::MatrixXd subj_rel, obj_rel;           // n x d_rel
  std::vector<int> gold;                       // predicate ids
  std::vector<int> subj_class, obj_class;
};

template <typename S>
RelationExtract extract_relations(const RunConfig& cfg, ParamStore<S>& ps,
                                  const Dataset& ds, const std::string& dir) {
  ModelDims dims = ModelDims::from(cfg);
  RelationExtract out;
  for (size_t i = 0; i < ds.scenes.size(); ++i)
    if (!ds.scenes[i].triplets.empty()) out.scene_rows.push_back(int(i));
  const int n = int(out.scene_rows.size());
  out.subj_readout.resize(n, dims.d_model);
  out.obj_readout.resize(n, dims.d_model);
  out.subj_rel.resize(n, dims.d_rel);
  out.obj_rel.resize(n, dims.d_rel);

  const int chunk = 16;
  for (size_t at = 0; at < out.scene_rows.size(); at += chunk) {
    int B = int(std::min(out.scene_rows.size() - at, size_t(chunk)));
    std::vector<Tensor<float>> imgs;
    std::vector<int64_t> tokens =
        detail::chunk_tokens(ds, out.scene_rows, at, B);
    std::vector<std::pair<int, int>> subj_spans, obj_spans;
    for (int b = 0; b < B; ++b) {
      const Scene& s = ds.scenes[size_t(out.scene_rows[at + size_t(b)])];
      imgs.push_back(read_ppm(image_path(dir, s.id)));
      const Triplet& t = s.triplets[0];
      const Mention *ms = nullptr, *mo = nullptr;
      for (const Mention& m : s.mentions) {
        if (m.object == t.subject && !ms) ms = &m;
        else if (m.object == t.object) mo = &m;
      }
      if (!ms || !mo)
        throw DataError("scene " + std::to_string(s.id) +
                        " lacks subject/object mentions");
      subj_spans.push_back({ms->tok_begin, ms->tok_end});
      obj_spans.push_back({mo->tok_begin, mo->tok_end});
      out.gold.push_back(int(t.predicate));
      out.subj_class.push_back(s.objects[size_t(t.subject)].object_class());
      out.obj_class.push_back(s.objects[size_t(t.object)].object_class());
    }
    Graph<S> g;
    Net<S> net(g, ps, dims);
    Var<S> v3 = visual_encode(net, g.constant(batch_image_rows<S>(imgs)), B);
    Var<S> am = g.constant(pad_mask_tensor<S>(tokens, B, kMaxTokens));
    Var<S> l3 = language_encode(net, tokens, B, kMaxTokens, am);
    Var<S> qs = reshape(
        matmul(g.constant(span_pool_weights<S>(subj_spans, B, kMaxTokens)), l3),
        {B, dims.d_model});
    Var<S> qo = reshape(
        matmul(g.constant(span_pool_weights<S>(obj_spans, B, kMaxTokens)), l3),
        {B, dims.d_model});
    Var<S> rs = cross_attend(net, v3, qs, B);
    Var<S> ro = cross_attend(net, v3, qo, B);
    Var<S> us = net.linear(rs, "rel.wrel");
    Var<S> vs = net.linear(ro, "rel.wrel");
    for (int b = 0; b < B; ++b) {
      int row = int(at) + b;
      out.subj_readout.row(row) =
          detail::to_matrix(rs.val(), int64_t(b), 1, dims.d_model).row(0);
      out.obj_readout.row(row) =
          detail::to_matrix(ro.val(), int64_t(b), 1, dims.d_model).row(0);
      out.subj_rel.row(row) =
          detail::to_matrix(us.val(), int64_t(b), 1, dims.d_rel).row(0);
      out.obj_rel.row(row) =
          detail::to_matrix(vs.val(), int64_t(b), 1, dims.d_rel).row(0);
    }
  }
  return out;
}

// Relation matrices pulled out of the store, in predicate order.
template <typename S>
std::vector<Eigen::MatrixXd> relation_matrices(const ParamStore<S>& ps,
                                               int d_rel) {
  std::vector<Eigen::MatrixXd> out;
  for (int p = 0; p < kNumPredicates; ++p) {
    const Tensor<S>& R = ps.get("rel.R" + std::to_string(p));
    out.push_back(detail::to_matrix(R, 0, d_rel, d_rel));
  }
  return out;
}

// Predicates sorted by descending bilinear score, ties by ascending id.
inline std::vector<std::pair<int, double>> rank_predicates(
    const Eigen::VectorXd& rs, const Eigen::VectorXd& ro,
    const std::vector<Eigen::MatrixXd>& relations) {
  if (relations.empty()) throw UnknownPredicate("no relation matrices");
  std::vector<std::pair<int, double>> out;
  for (int p = 0; p < int(relations.size()); ++p)
    out.push_back({p, rs.dot(relations[size_t(p)] * ro)});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  return out;
}

// Top-1 accuracy of relation ranking over the extract.
inline double relations_top1(const RelationExtract& ex,
                             const std::vector<Eigen::MatrixXd>& relations) {
  if (ex.gold.empty()) return 0.0;
  int hit = 0;
  for (size_t i = 0; i < ex.gold.size(); ++i) {
    if (ex.gold[i] < 0 || ex.gold[i] >= int(relations.size()))
      throw UnknownPredicate("predicate id " + std::to_string(ex.gold[i]));
    auto ranked = rank_predicates(ex.subj_rel.row(int(i)),
                                  ex.obj_rel.row(int(i)), relations);
    if (ranked[0].first == ex.gold[i]) ++hit;
  }
  return double(hit) / double(ex.gold.size());
}

// The auxiliary two-layer head applied to a readout, in double.
template <typename S>
Eigen::VectorXd aux_head_logits(const ParamStore<S>& ps,
                                const Eigen::VectorXd& readout) {
  int d = int(readout.size());
  const Tensor<S>& w1 = ps.get("rel.aux.1.w");
  const Tensor<S>& b1 = ps.get("rel.aux.1.b");
  const Tensor<S>& w2 = ps.get("rel.aux.2.w");
  const Tensor<S>& b2 = ps.get("rel.aux.2.b");
  Eigen::MatrixXd W1 = detail::to_matrix(w1, 0, d, w1.shape[1]);
  Eigen::MatrixXd W2 = detail::to_matrix(w2, 0, w2.shape[0], w2.shape[1]);
  Eigen::VectorXd h = (readout.transpose() * W1).transpose();
  for (int i = 0; i < h.size(); ++i)
    h[i] = std::max(0.0, h[i] + double(b1.data[i]));
  Eigen::VectorXd logits = (h.transpose() * W2).transpose();
  for (int i = 0; i < logits.size(); ++i) logits[i] += double(b2.data[i]);
  return logits;
}

// Top-1 accuracy of the auxiliary classifier over subject and object
// readouts.
template <typename S>
double objects_top1(const RelationExtract& ex, const ParamStore<S>& ps) {
  if (ex.gold.empty()) return 0.0;
  int hit = 0, total = 0;
  for (size_t i = 0; i < ex.gold.size(); ++i) {
    for (int side = 0; side < 2; ++side) {
      Eigen::VectorXd readout = side == 0 ? ex.subj_readout.row(int(i))
                                          : ex.obj_readout.row(int(i));
      int label = side == 0 ? ex.subj_class[i] : ex.obj_class[i];
      Eigen::VectorXd logits = aux_head_logits(ps, readout);
      int best = 0;
      for (int c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
      if (best == label) ++hit;
      ++total;
    }
  }
  return double(hit) / double(total);
}

// Stage parameters for an evaluation pass: strict merge when the checkpoint
// is from the same stage, trunk-only merge otherwise (fresh heads stay at
// their random init, giving the untrained baseline).
template <typename S>
ParamStore<S> params_for_eval(const RunConfig& cfg, const Checkpoint& ck,
                              const std::string& stage, int vocab_size) {
  ParamStore<S> ps = build_stage_params<S>(cfg, stage, vocab_size);
  if (ck.stage == stage) {
    merge_params(ps, ck.params);
  } else {
    std::vector<std::string> required = {"vis.", "cls.", "lang.", "mlm."};
    if (stage == "relate" || stage == "search-heads")
      required.push_back("rel.");
    merge_params_partial(ps, ck.params, required);
  }
  return ps;
}

}  // namespace groundling
