#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "groundling/eval.hpp"
#include "groundling/model.hpp"

namespace groundling {

// ---------------------------------------------------------------------------
// Embedding extraction

// Word embeddings pooled from the language stream plus the standardization
// statistics computed over the whole vocabulary.
struct EmbeddingTable {
  std::vector<int> token_ids;   // word ids, in vocabulary order
  Eigen::MatrixXd raw;          // n x d, pooled hidden states
  Eigen::VectorXd mean, stdev;  // per-channel stats over the vocabulary
  Eigen::MatrixXd x;            // standardized rows
};

// Mean-pooled final hidden state of [CLS] words... [SEP]. Pooling covers
// every position unless pool_specials is off, in which case only the word
// positions count.
template <typename S>
Eigen::VectorXd phrase_embedding_raw(const RunConfig& cfg, ParamStore<S>& ps,
                                     const std::vector<int>& word_ids) {
  if (word_ids.empty()) throw InvalidCount("empty phrase");
  ModelDims dims = ModelDims::from(cfg);
  std::vector<int64_t> tokens;
  tokens.push_back(Vocab::kCls);
  for (int w : word_ids) tokens.push_back(w);
  tokens.push_back(Vocab::kSep);
  int K = int(tokens.size());
  if (K > kMaxTokens)
    throw InvalidCount("phrase of " + std::to_string(word_ids.size()) +
                       " words does not fit the caption window");
  Graph<S> g;
  Net<S> net(g, ps, dims);
  Var<S> am = g.constant(pad_mask_tensor<S>(tokens, 1, K));
  Var<S> l3 = language_encode(net, tokens, 1, K, am);
  const Tensor<S>& val = l3.val();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dims.d_model);
  int counted = 0;
  for (int k = 0; k < K; ++k) {
    if (!cfg.pool_specials && tokens[size_t(k)] < 4) continue;
    for (int c = 0; c < dims.d_model; ++c)
      out[c] += double(val.data[int64_t(k) * dims.d_model + c]);
    ++counted;
  }
  return out / double(counted);
}

// Raw embeddings for every word in the vocabulary, with per-channel
// standardization (mean 0, sample std 1).
template <typename S>
EmbeddingTable vocabulary_embeddings(const RunConfig& cfg, ParamStore<S>& ps,
                                     const Vocab& vocab) {
  ModelDims dims = ModelDims::from(cfg);
  EmbeddingTable t;
  for (int id = 4; id < vocab.size(); ++id) t.token_ids.push_back(id);
  const int n = int(t.token_ids.size());
  t.raw.resize(n, dims.d_model);
  for (int r = 0; r < n; ++r)
    t.raw.row(r) = phrase_embedding_raw(cfg, ps, {t.token_ids[size_t(r)]});
  t.mean = t.raw.colwise().mean();
  Eigen::MatrixXd centered = t.raw.rowwise() - t.mean.transpose();
  t.stdev.resize(dims.d_model);
  for (int c = 0; c < dims.d_model; ++c)
    t.stdev[c] = std::sqrt(centered.col(c).squaredNorm() / double(n - 1));
  t.x.resize(n, dims.d_model);
  for (int c = 0; c < dims.d_model; ++c) {
    if (t.stdev[c] == 0)
      throw DegenerateInput("embedding channel " + std::to_string(c) +
                            " is constant over the vocabulary");
    t.x.col(c) = centered.col(c) / t.stdev[c];
  }
  return t;
}

// A phrase standardized with the vocabulary statistics of `table`.
inline Eigen::VectorXd standardize_with(const EmbeddingTable& table,
                                        const Eigen::VectorXd& raw) {
  Eigen::VectorXd out(raw.size());
  for (int c = 0; c < raw.size(); ++c)
    out[c] = (raw[c] - table.mean[c]) / table.stdev[c];
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Eigen::VectorXd mean;         // d
  Eigen::MatrixXd components;   // k x d rows, descending eigenvalue order
  Eigen::VectorXd eigenvalues;  // k
};

// Eigendecomposition of the sample covariance (1/(n-1)). Each component's
// largest-magnitude entry is made positive so the output is deterministic.
inline PcaModel pca_fit(const Eigen::MatrixXd& x) {
  const int n = int(x.rows()), d = int(x.cols());
  if (n < 2) throw InvalidCount("pca needs at least 2 rows");
  bool all_same = true;
  for (int r = 1; r < n && all_same; ++r)
    if ((x.row(r) - x.row(0)).cwiseAbs().maxCoeff() != 0) all_same = false;
  if (all_same) throw DegenerateInput("pca input rows are all identical");

  PcaModel m;
  m.mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  m.components.resize(d, d);
  m.eigenvalues.resize(d);
  for (int k = 0; k < d; ++k) {
    // The solver sorts ascending; reverse to descending.
    int src = d - 1 - k;
    m.eigenvalues[k] = solver.eigenvalues()[src];
    Eigen::VectorXd comp = solver.eigenvectors().col(src);
    int big = 0;
    for (int i = 1; i < d; ++i)
      if (std::abs(comp[i]) > std::abs(comp[big])) big = i;
    if (comp[big] < 0) comp = -comp;
    m.components.row(k) = comp;
  }
  return m;
}

inline Eigen::MatrixXd pca_project(const PcaModel& m,
                                   const Eigen::MatrixXd& x) {
  return (x.rowwise() - m.mean.transpose()) * m.components.transpose();
}

// ---------------------------------------------------------------------------
// Statistics

inline double pearson_r(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size())
    throw InvalidCount("series lengths " + std::to_string(x.size()) + " vs " +
                       std::to_string(y.size()));
  if (x.size() < 3) throw InvalidCount("need at least 3 points");
  Eigen::VectorXd xc = x.array() - x.mean();
  Eigen::VectorXd yc = y.array() - y.mean();
  double sx = xc.norm(), sy = yc.norm();
  if (sx == 0 || sy == 0) throw ConstantSeries("a series has zero variance");
  return xc.dot(yc) / (sx * sy);
}

// ---------------------------------------------------------------------------
// Modified silhouette over cosine distance

inline double cosine_distance(const Eigen::VectorXd& a,
                              const Eigen::VectorXd& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 1.0;
  return 1.0 - a.dot(b) / (na * nb);
}

struct SilhouetteResult {
  std::vector<double> s;  // per row
  std::map<std::string, double> category_mean;
  double mean = 0;
};

// a(i): mean cosine distance to the rest of i's category. b(i): the mean
// distance to each other category, averaged over the N-1 other categories.
// s(i) = (b-a)/max(a,b), with 0 when both sides vanish.
inline SilhouetteResult silhouette(const Eigen::MatrixXd& x,
                                   const std::vector<std::string>& category) {
  const int n = int(x.rows());
  if (int(category.size()) != n)
    throw InvalidCount("category list does not match row count");
  std::map<std::string, std::vector<int>> groups;
  for (int i = 0; i < n; ++i) groups[category[size_t(i)]].push_back(i);
  for (const auto& [name, members] : groups)
    if (members.size() < 2)
      throw SingletonCategory("category '" + name + "' has " +
                              std::to_string(members.size()) + " member");
  const int ncat = int(groups.size());
  SilhouetteResult out;
  out.s.resize(size_t(n));
  std::map<std::string, std::pair<double, int>> acc;
  for (int i = 0; i < n; ++i) {
    const std::string& mine = category[size_t(i)];
    double a = 0;
    int own = 0;
    for (int j : groups.at(mine)) {
      if (j == i) continue;
      a += cosine_distance(x.row(i), x.row(j));
      ++own;
    }
    a /= double(own);
    double b = 0;
    for (const auto& [name, members] : groups) {
      if (name == mine) continue;
      double d = 0;
      for (int j : members) d += cosine_distance(x.row(i), x.row(j));
      b += d / double(members.size());
    }
    if (ncat > 1) b /= double(ncat - 1);
    double s = (a == 0 && b == 0) ? 0.0 : (b - a) / std::max(a, b);
    out.s[size_t(i)] = s;
    auto& slot = acc[mine];
    slot.first += s;
    slot.second += 1;
  }
  double total = 0;
  for (const auto& [name, slot] : acc) {
    out.category_mean[name] = slot.first / slot.second;
    total += slot.first;
  }
  out.mean = total / double(n);
  return out;
}

// ---------------------------------------------------------------------------
// L1 logistic regression by proximal gradient

struct NormClassifier {
  Eigen::VectorXd w;
  double lambda = 0;
  int iterations = 0;
};

namespace detail {

// Unnormalized-sum logistic loss with L1 penalty, no intercept. Step size
// 1/L from the logistic curvature bound L = max eigenvalue of X^T X / 4.
inline NormClassifier fit_l1_logistic(const Eigen::MatrixXd& x,
                                      const std::vector<int>& labels,
                                      double lambda) {
  const int n = int(x.rows()), d = int(x.cols());
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = labels[size_t(i)] ? 1.0 : 0.0;
  NormClassifier out;
  out.lambda = lambda;
  out.w = Eigen::VectorXd::Zero(d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> gram(x.transpose() * x);
  double lip = gram.eigenvalues().maxCoeff() / 4.0;
  if (lip <= 0) return out;
  double eta = 1.0 / lip;
  for (int it = 0; it < 5000; ++it) {
    Eigen::VectorXd z = x * out.w;
    Eigen::VectorXd p = (1.0 + (-z.array()).exp()).inverse();
    Eigen::VectorXd grad = x.transpose() * (p - y);
    Eigen::VectorXd next = out.w - eta * grad;
    for (int c = 0; c < d; ++c) {
      double t = eta * lambda;
      next[c] = next[c] > t ? next[c] - t : (next[c] < -t ? next[c] + t : 0.0);
    }
    double move = (next - out.w).norm() / eta;
    out.w = next;
    out.iterations = it + 1;
    if (move < 1e-6) break;
  }
  return out;
}

}  // namespace detail

// Throws below 5 positive samples, the documented inclusion filter.
inline NormClassifier fit_norm_classifier(const Eigen::MatrixXd& x,
                                          const std::vector<int>& labels,
                                          double lambda) {
  if (int(x.rows()) != int(labels.size()))
    throw InvalidCount("labels do not match rows");
  int pos = 0;
  for (int v : labels) pos += v ? 1 : 0;
  if (pos < 5)
    throw TooFewPositives("feature has " + std::to_string(pos) +
                          " positive samples, need 5");
  return detail::fit_l1_logistic(x, labels, lambda);
}

inline double logistic_predict(const NormClassifier& c,
                               const Eigen::VectorXd& features) {
  return 1.0 / (1.0 + std::exp(-c.w.dot(features)));
}

inline std::vector<double> default_lambda_grid() {
  return {1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1};
}

// Leave-one-out selection maximizing the class-balanced held-out
// log-likelihood. Ties keep the earliest grid entry.
inline double select_lambda_loo(const Eigen::MatrixXd& x,
                                const std::vector<int>& labels,
                                const std::vector<double>& grid) {
  if (grid.empty()) throw InvalidCount("empty lambda grid");
  const int n = int(x.rows());
  if (n != int(labels.size())) throw InvalidCount("labels do not match rows");
  int pos = 0;
  for (int v : labels) pos += v ? 1 : 0;
  int neg = n - pos;
  if (pos < 5)
    throw TooFewPositives("feature has " + std::to_string(pos) +
                          " positive samples, need 5");
  double best_lambda = grid[0], best_score = -1e300;
  bool first = true;
  for (double lambda : grid) {
    double score = 0;
    for (int i = 0; i < n; ++i) {
      Eigen::MatrixXd xf(n - 1, x.cols());
      std::vector<int> yf;
      int r = 0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        xf.row(r++) = x.row(j);
        yf.push_back(labels[size_t(j)]);
      }
      NormClassifier c = detail::fit_l1_logistic(xf, yf, lambda);
      double p = logistic_predict(c, x.row(i));
      p = std::min(1.0 - 1e-12, std::max(1e-12, p));
      if (labels[size_t(i)])
        score += std::log(p) / double(pos);
      else
        score += std::log(1.0 - p) / double(neg);
    }
    if (first || score > best_score) {
      best_score = score;
      best_lambda = lambda;
      first = false;
    }
  }
  return best_lambda;
}

inline double f1_score(int64_t tp, int64_t fp, int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0)
    throw InvalidCount("negative confusion counts");
  if (tp + fp + fn == 0) throw AllZeroCounts("no predictions or positives");
  return double(tp) / (double(tp) + 0.5 * double(fp + fn));
}

// ---------------------------------------------------------------------------
// Compositional ranking

struct RankedWord {
  int token_id = 0;
  double cosine = 0;
};

// Table rows sorted by descending cosine to q; ties keep table order.
inline std::vector<RankedWord> rank_by_cosine(const Eigen::VectorXd& q,
                                              const EmbeddingTable& table) {
  std::vector<RankedWord> out(table.token_ids.size());
  for (size_t r = 0; r < table.token_ids.size(); ++r) {
    out[r].token_id = table.token_ids[r];
    out[r].cosine = 1.0 - cosine_distance(q, table.x.row(int(r)));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedWord& a, const RankedWord& b) {
                     return a.cosine > b.cosine;
                   });
  return out;
}

// 1-based position of token_id in the ranking.
inline int rank_of_token(const std::vector<RankedWord>& ranked, int token_id) {
  for (size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i].token_id == token_id) return int(i) + 1;
  throw IndexError("token " + std::to_string(token_id) + " not in ranking");
}

// ---------------------------------------------------------------------------
// Occlusion probing

// Class probabilities of a batch of images under the stage-1 classifier.
template <typename S>
Eigen::MatrixXd classify_probabilities(const RunConfig& cfg, ParamStore<S>& ps,
                                       const std::vector<Tensor<float>>& imgs) {
  ModelDims dims = ModelDims::from(cfg);
  Eigen::MatrixXd out(imgs.size(), kNumObjectClasses);
  const int chunk = 16;
  for (size_t at = 0; at < imgs.size(); at += chunk) {
    int B = int(std::min(imgs.size() - at, size_t(chunk)));
    std::vector<Tensor<float>> part(imgs.begin() + at, imgs.begin() + at + B);
    Graph<S> g;
    Net<S> net(g, ps, dims);
    Var<S> v3 = visual_encode(net, g.constant(batch_image_rows<S>(part)), B);
    Var<S> logits = class_logits(net, visual_pool(net, v3, B));
    const Tensor<S>& val = logits.val();
    for (int b = 0; b < B; ++b) {
      double mx = -1e300;
      for (int c = 0; c < kNumObjectClasses; ++c)
        mx = std::max(mx, double(val.data[b * kNumObjectClasses + c]));
      double denom = 0;
      for (int c = 0; c < kNumObjectClasses; ++c)
        denom += std::exp(double(val.data[b * kNumObjectClasses + c]) - mx);
      for (int c = 0; c < kNumObjectClasses; ++c)
        out(int(at) + b, c) =
            std::exp(double(val.data[b * kNumObjectClasses + c]) - mx) / denom;
    }
  }
  return out;
}

// Probability of the true class with a grey window slid over the image.
template <typename S>
Eigen::MatrixXd occlusion_heatmap(const RunConfig& cfg, ParamStore<S>& ps,
                                  const Tensor<float>& image, int true_class,
                                  int window, int stride, float fill) {
  const int H = image.shape[1], W = image.shape[2];
  if (window > H || window > W)
    throw WindowLargerThanImage("window " + std::to_string(window) +
                                " exceeds the " + std::to_string(H) + "x" +
                                std::to_string(W) + " canvas");
  if (window < 1 || stride < 1)
    throw InvalidCount("window and stride must be positive");
  const int ny = (H - window) / stride + 1;
  const int nx = (W - window) / stride + 1;
  std::vector<Tensor<float>> occluded;
  occluded.reserve(size_t(ny) * nx);
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      Tensor<float> img = image;
      int y0 = gy * stride, x0 = gx * stride;
      for (int c = 0; c < image.shape[0]; ++c)
        for (int y = y0; y < y0 + window; ++y)
          for (int x = x0; x < x0 + window; ++x)
            img.data[(int64_t(c) * H + y) * W + x] = fill;
      occluded.push_back(std::move(img));
    }
  }
  Eigen::MatrixXd probs = classify_probabilities(cfg, ps, occluded);
  Eigen::MatrixXd map(ny, nx);
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx)
      map(gy, gx) = probs(gy * nx + gx, true_class);
  return map;
}

}  // namespace groundling
