#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "groundling/config.hpp"
#include "groundling/graph.hpp"
#include "groundling/params.hpp"
#include "groundling/world.hpp"

namespace groundling {

// Architecture sizes. The conv stack is fixed at 3->16->32->64 channels over
// three stride-2 3x3 layers, so any 32x32 input lands on a 4x4 grid of
// 64-channel features regardless of d_model; the embedder maps 64 -> d_model.
struct ModelDims {
  int d_model = 64;
  int heads = 4;
  int lang_layers = 4;
  int ffn = 256;
  int d_rel = 16;
  int d_common = 64;

  int d_head() const { return d_model / heads; }

  static ModelDims from(const RunConfig& cfg) {
    return {cfg.d_model, cfg.heads, cfg.lang_layers,
            cfg.ffn,     cfg.d_rel, cfg.d_common};
  }
};

constexpr int kGridSize = 4;
constexpr int kGridCells = kGridSize * kGridSize;
constexpr int kConvChannels = 64;

// ---- parameter construction ------------------------------------------------

namespace detail {
template <typename S>
void add_linear(ParamStore<S>& ps, const std::string& prefix, int in, int out,
                uint64_t seed) {
  ps.add_gaussian(prefix + ".w", {in, out}, seed, std::sqrt(1.0 / in));
  ps.add_constant(prefix + ".b", {1, out}, S(0));
}
template <typename S>
void add_ln(ParamStore<S>& ps, const std::string& prefix, int d) {
  ps.add_constant(prefix + ".g", {1, d}, S(1));
  ps.add_constant(prefix + ".b", {1, d}, S(0));
}
template <typename S>
void add_attention(ParamStore<S>& ps, const std::string& prefix, int d,
                   uint64_t seed) {
  add_linear(ps, prefix + ".attn.q", d, d, seed);
  add_linear(ps, prefix + ".attn.k", d, d, seed);
  add_linear(ps, prefix + ".attn.v", d, d, seed);
  add_linear(ps, prefix + ".attn.o", d, d, seed);
  add_ln(ps, prefix + ".attn.ln", d);
}
}  // namespace detail

// Visual stream + language stream + the stage-1 heads.
template <typename S>
void init_backbone_params(ParamStore<S>& ps, const ModelDims& dims,
                          int vocab_size, uint64_t seed) {
  using detail::add_linear;
  using detail::add_ln;
  const int d = dims.d_model;
  add_linear(ps, "vis.conv1", 3 * 9, 16, seed);
  add_linear(ps, "vis.conv2", 16 * 9, 32, seed);
  add_linear(ps, "vis.conv3", 32 * 9, kConvChannels, seed);
  add_linear(ps, "vis.embed", kConvChannels, d, seed);
  ps.add_gaussian("vis.pos", {kGridCells, d}, seed, 0.02);
  detail::add_attention(ps, "vis", d, seed);
  add_linear(ps, "cls", d, kNumObjectClasses, seed);

  ps.add_gaussian("lang.tok", {vocab_size, d}, seed, 0.02);
  ps.add_gaussian("lang.pos", {kMaxTokens, d}, seed, 0.02);
  add_ln(ps, "lang.ln", d);
  for (int l = 0; l < dims.lang_layers; ++l) {
    std::string p = "lang.L" + std::to_string(l);
    detail::add_attention(ps, p, d, seed);
    add_linear(ps, p + ".ffn.1", d, dims.ffn, seed);
    add_linear(ps, p + ".ffn.2", dims.ffn, d, seed);
    add_ln(ps, p + ".ln2", d);
  }
  add_linear(ps, "mlm", d, vocab_size, seed);
}

// Stage-2 projection heads into the common space.
template <typename S>
void init_grounding_params(ParamStore<S>& ps, const ModelDims& dims,
                           uint64_t seed) {
  detail::add_linear(ps, "ground.pv", dims.d_model, dims.d_common, seed);
  detail::add_linear(ps, "ground.pl", dims.d_model, dims.d_common, seed);
}

// Stage-3 cross attention, relation embeddings, and the auxiliary object
// classifier. Relation matrices start at unit Frobenius norm.
template <typename S>
void init_relational_params(ParamStore<S>& ps, const ModelDims& dims,
                            uint64_t seed) {
  const int d = dims.d_model;
  ps.add_gaussian("rel.cross.q.w", {d, d}, seed, std::sqrt(1.0 / d));
  ps.add_gaussian("rel.cross.k.w", {d, d}, seed, std::sqrt(1.0 / d));
  ps.add_gaussian("rel.cross.v.w", {d, d}, seed, std::sqrt(1.0 / d));
  detail::add_linear(ps, "rel.wrel", d, dims.d_rel, seed);
  for (int p = 0; p < kNumPredicates; ++p) {
    std::string name = "rel.R" + std::to_string(p);
    Tensor<S>& R =
        ps.add_gaussian(name, {dims.d_rel, dims.d_rel}, seed, 1.0);
    double norm = 0;
    for (int64_t i = 0; i < R.numel(); ++i)
      norm += double(R.data[i]) * double(R.data[i]);
    norm = std::sqrt(norm);
    for (int64_t i = 0; i < R.numel(); ++i)
      R.data[i] = S(double(R.data[i]) / norm);
  }
  detail::add_linear(ps, "rel.aux.1", d, d, seed);
  detail::add_linear(ps, "rel.aux.2", d, kNumObjectClasses, seed);
}

// Stage-4 search heads: two-linear relu stacks on each side.
template <typename S>
void init_search_params(ParamStore<S>& ps, const ModelDims& dims,
                        uint64_t seed) {
  const int d = dims.d_model;
  detail::add_linear(ps, "search.fv.1", d, d, seed);
  detail::add_linear(ps, "search.fv.2", d, d, seed);
  detail::add_linear(ps, "search.fl.1", d, d, seed);
  detail::add_linear(ps, "search.fl.2", d, d, seed);
}

// ---- freeze plans ----------------------------------------------------------

// Marks the trainable set for a stage. The later stages keep query/key
// projections of every self-attention layer frozen while values stay live,
// and only the top `trainable_top_lang` language layers move.
template <typename S>
void apply_stage_freeze(ParamStore<S>& ps, const std::string& stage,
                        const ModelDims& dims, int trainable_top_lang) {
  if (trainable_top_lang < 0 || trainable_top_lang > dims.lang_layers)
    throw InvalidLayerIndex("trainable_top_lang " +
                            std::to_string(trainable_top_lang) + " with " +
                            std::to_string(dims.lang_layers) + " layers");
  ps.freeze_all();
  auto unfreeze_prefix = [&](const std::string& prefix) {
    for (const auto& name : ps.names_with_prefix(prefix)) ps.unfreeze(name);
  };
  auto refreeze_qk = [&](const std::string& attn_prefix) {
    for (const auto& name : ps.names_with_prefix(attn_prefix + ".attn.q."))
      ps.freeze(name);
    for (const auto& name : ps.names_with_prefix(attn_prefix + ".attn.k."))
      ps.freeze(name);
  };
  auto unfreeze_tuned_backbone = [&]() {
    unfreeze_prefix("vis.attn.");
    refreeze_qk("vis");
    for (int l = dims.lang_layers - trainable_top_lang; l < dims.lang_layers;
         ++l) {
      std::string p = "lang.L" + std::to_string(l);
      unfreeze_prefix(p + ".");
      refreeze_qk(p);
    }
  };

  if (stage == "classify") {
    unfreeze_prefix("vis.");
    unfreeze_prefix("cls.");
  } else if (stage == "mask") {
    unfreeze_prefix("lang.");
    unfreeze_prefix("mlm.");
  } else if (stage == "ground") {
    unfreeze_prefix("ground.");
    unfreeze_tuned_backbone();
  } else if (stage == "relate") {
    unfreeze_prefix("rel.");
    unfreeze_tuned_backbone();
  } else if (stage == "search-heads") {
    unfreeze_prefix("search.");
  } else {
    throw UsageError("unknown stage: " + stage);
  }
}

// ---- graph builders --------------------------------------------------------

// Binds parameters from the store into one graph, once each.
template <typename S>
struct Net {
  Graph<S>& g;
  ParamStore<S>& ps;
  ModelDims dims;
  std::map<std::string, Var<S>> bound;

  Net(Graph<S>& graph, ParamStore<S>& store, ModelDims d)
      : g(graph), ps(store), dims(d) {}

  Var<S> p(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    Var<S> v = g.param(name, ps.get(name), ps.is_trainable(name));
    bound.emplace(name, v);
    return v;
  }

  // x [N,in] -> [N,out]
  Var<S> linear(Var<S> x, const std::string& prefix) {
    return add_tiled(matmul(x, p(prefix + ".w")), p(prefix + ".b"));
  }

  // y = g * normalize(x) + b, rowwise over the last axis.
  Var<S> ln(Var<S> x, const std::string& prefix) {
    return add_tiled(mul_tiled(layernorm(x), p(prefix + ".g")),
                     p(prefix + ".b"));
  }

  Var<S> ones(int r, int c, double v = 1.0) {
    return g.constant(Tensor<S>::full({r, c}, S(v)));
  }
};

// Scaled dot-product attention for one explicit head: q [1,dh], keys [L,dh],
// values [L,dv] -> [1,dv]. The building block behind every attention layer.
template <typename S>
Var<S> attend_single(Var<S> q, Var<S> keys, Var<S> values) {
  int dh = q.shape()[1];
  Var<S> scores = scale(matmul(q, transpose(keys)), 1.0 / std::sqrt(double(dh)));
  return matmul(softmax(scores), values);
}

// Multi-head self-attention with residual and post-layernorm.
// x3 [B,K,D] -> [B,K,D]. mask, when present, is additive on the scores
// ([B,K,K]; 0 keeps a key, a large negative drops it).
template <typename S>
Var<S> self_attention_block_impl(Net<S>& net, Var<S> x3, int B, int K,
                                 const std::string& prefix,
                                 const Var<S>* mask) {
  const int D = net.dims.d_model;
  const int H = net.dims.heads;
  const int dh = net.dims.d_head();
  Var<S> x2 = reshape(x3, {B * K, D});
  Var<S> q2 = net.linear(x2, prefix + ".attn.q");
  Var<S> k2 = net.linear(x2, prefix + ".attn.k");
  Var<S> v2 = net.linear(x2, prefix + ".attn.v");
  std::vector<Var<S>> heads;
  for (int h = 0; h < H; ++h) {
    auto head3 = [&](Var<S> m2) {
      return reshape(slice(m2, 0, B * K, h * dh, (h + 1) * dh), {B, K, dh});
    };
    Var<S> qh = head3(q2);
    Var<S> kh = head3(k2);
    Var<S> vh = head3(v2);
    Var<S> scores =
        scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
    if (mask) scores = add(scores, *mask);
    Var<S> ctx = matmul(softmax(scores), vh);  // [B,K,dh]
    heads.push_back(reshape(ctx, {B * K, dh}));
  }
  Var<S> cat = concat_cols(heads);
  Var<S> out = net.linear(cat, prefix + ".attn.o");
  Var<S> res = add(x2, out);
  return reshape(net.ln(res, prefix + ".attn.ln"), {B, K, D});
}

template <typename S>
Var<S> self_attention_block(Net<S>& net, Var<S> x3, int B, int K,
                            const std::string& prefix) {
  return self_attention_block_impl(net, x3, B, K, prefix,
                                   static_cast<const Var<S>*>(nullptr));
}

template <typename S>
Var<S> self_attention_block(Net<S>& net, Var<S> x3, int B, int K,
                            const std::string& prefix, Var<S> mask) {
  return self_attention_block_impl(net, x3, B, K, prefix, &mask);
}

// Feed-forward sublayer with residual and post-layernorm.
template <typename S>
Var<S> ffn_block(Net<S>& net, Var<S> x3, int B, int K,
                 const std::string& prefix) {
  const int D = net.dims.d_model;
  Var<S> x2 = reshape(x3, {B * K, D});
  Var<S> h = relu(net.linear(x2, prefix + ".ffn.1"));
  Var<S> out = net.linear(h, prefix + ".ffn.2");
  return reshape(net.ln(add(x2, out), prefix + ".ln2"), {B, K, D});
}

// Image rows [B*1024, 3] (pixel rows in scanline order, RGB columns)
// -> attended feature map [B, 16, D].
template <typename S>
Var<S> visual_encode(Net<S>& net, Var<S> img_rows, int B) {
  Var<S> c1 = relu(net.linear(im2col(img_rows, B, 32, 32, 3, 3, 3, 2, 1),
                              "vis.conv1"));
  Var<S> c2 = relu(net.linear(im2col(c1, B, 16, 16, 16, 3, 3, 2, 1),
                              "vis.conv2"));
  Var<S> c3 = relu(net.linear(im2col(c2, B, 8, 8, 32, 3, 3, 2, 1),
                              "vis.conv3"));
  Var<S> emb = net.linear(c3, "vis.embed");       // [B*16, D]
  Var<S> pos = add_tiled(emb, net.p("vis.pos"));  // one copy per batch row
  Var<S> x3 = reshape(pos, {B, kGridCells, net.dims.d_model});
  return self_attention_block(net, x3, B, kGridCells, "vis");
}

// Mean over the 16 grid cells: [B,16,D] -> [B,D].
template <typename S>
Var<S> visual_pool(Net<S>& net, Var<S> v3, int B) {
  Var<S> w = net.g.constant(
      Tensor<S>::full({B, 1, kGridCells}, S(1.0 / kGridCells)));
  return reshape(matmul(w, v3), {B, net.dims.d_model});
}

template <typename S>
Var<S> class_logits(Net<S>& net, Var<S> pooled) {
  return net.linear(pooled, "cls");
}

// Tokens (B*K ids, row-major) -> contextual embeddings [B,K,D].
// mask is the additive attention mask [B,K,K] built by the caller.
// K may be shorter than the full caption width; the position table is cut
// to match, so a sequence encodes the same with or without trailing pads.
template <typename S>
Var<S> language_encode(Net<S>& net, const std::vector<int64_t>& tokens, int B,
                       int K, Var<S> mask) {
  if (K < 1 || K > kMaxTokens)
    throw ShapeMismatch("language_encode got K = " + std::to_string(K) +
                        ", limit " + std::to_string(kMaxTokens));
  Var<S> emb = gather_rows(net.p("lang.tok"), tokens);  // [B*K, D]
  Var<S> pos_table = net.p("lang.pos");
  if (K < kMaxTokens)
    pos_table = slice(pos_table, 0, K, 0, net.dims.d_model);
  Var<S> pos = add_tiled(emb, pos_table);
  Var<S> x2 = net.ln(pos, "lang.ln");
  Var<S> x3 = reshape(x2, {B, K, net.dims.d_model});
  for (int l = 0; l < net.dims.lang_layers; ++l) {
    std::string p = "lang.L" + std::to_string(l);
    x3 = self_attention_block(net, x3, B, K, p, mask);
    x3 = ffn_block(net, x3, B, K, p);
  }
  return x3;
}

template <typename S>
Var<S> mlm_logits(Net<S>& net, Var<S> lang3, int B, int K) {
  return net.linear(reshape(lang3, {B * K, net.dims.d_model}), "mlm");
}

// Rendered {3,H,W} image -> encoder pixel rows [H*W, 3], scanline order.
template <typename S>
Tensor<S> image_rows(const Tensor<float>& chw) {
  int C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
  Tensor<S> out = Tensor<S>::zeros({H * W, C});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        out.data[(int64_t(y) * W + x) * C + c] =
            S(chw.data[(int64_t(c) * H + y) * W + x]);
  return out;
}

template <typename S>
Tensor<S> batch_image_rows(const std::vector<Tensor<float>>& imgs) {
  if (imgs.empty()) throw InvalidCount("batch_image_rows: empty batch");
  Tensor<S> first = image_rows<S>(imgs[0]);
  int rows = first.shape[0], cols = first.shape[1];
  Tensor<S> out = Tensor<S>::zeros({int(imgs.size()) * rows, cols});
  for (size_t b = 0; b < imgs.size(); ++b) {
    Tensor<S> one = image_rows<S>(imgs[b]);
    if (one.shape[0] != rows || one.shape[1] != cols)
      throw ShapeMismatch("batch_image_rows: mixed image sizes");
    for (int64_t i = 0; i < one.numel(); ++i)
      out.data[int64_t(b) * rows * cols + i] = one.data[i];
  }
  return out;
}

// 1 over caption word tokens, 0 over [PAD]/[SEP]/[MASK] (and [CLS] unless
// opted in). Shape [B,K].
template <typename S>
Tensor<S> scoring_token_mask(const std::vector<int64_t>& tokens, int B, int K,
                             bool include_cls) {
  Tensor<S> m = Tensor<S>::zeros({B, K});
  int kept = 0;
  for (int64_t i = 0; i < int64_t(B) * K; ++i) {
    int64_t t = tokens[size_t(i)];
    bool keep = t >= 4 || (include_cls && t == Vocab::kCls);
    if (t == Vocab::kMask) keep = false;
    if (keep) {
      m.data[i] = S(1);
      ++kept;
    }
  }
  if (kept == 0) throw EmptyMask("no scoring tokens in batch");
  return m;
}

// Mean-pool weights over each caption's word tokens, [B,1,K].
template <typename S>
Tensor<S> content_pool_weights(const std::vector<int64_t>& tokens, int B,
                               int K) {
  Tensor<S> w = Tensor<S>::zeros({B, 1, K});
  for (int b = 0; b < B; ++b) {
    int n = 0;
    for (int k = 0; k < K; ++k)
      if (tokens[size_t(b * K + k)] >= 4) ++n;
    if (n == 0) throw EmptyMask("caption " + std::to_string(b) +
                                " has no word tokens");
    for (int k = 0; k < K; ++k)
      if (tokens[size_t(b * K + k)] >= 4)
        w.data[int64_t(b) * K + k] = S(1.0 / n);
  }
  return w;
}

// Mean-pool weights over one mention span per caption, [B,1,K].
template <typename S>
Tensor<S> span_pool_weights(const std::vector<std::pair<int, int>>& spans,
                            int B, int K) {
  Tensor<S> w = Tensor<S>::zeros({B, 1, K});
  for (int b = 0; b < B; ++b) {
    auto [s, e] = spans[size_t(b)];
    if (s < 0 || e > K || s >= e)
      throw IndexError("span [" + std::to_string(s) + "," +
                       std::to_string(e) + ") outside caption");
    for (int k = s; k < e; ++k) w.data[int64_t(b) * K + k] = S(1.0 / (e - s));
  }
  return w;
}

// Additive attention mask: 0 over real tokens, -1e9 over [PAD] keys.
template <typename S>
Tensor<S> pad_mask_tensor(const std::vector<int64_t>& tokens, int B, int K) {
  Tensor<S> m = Tensor<S>::zeros({B, K, K});
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k)
      if (tokens[size_t(b * K + k)] == Vocab::kPad)
        for (int qi = 0; qi < K; ++qi)
          m.data[(int64_t(b) * K + qi) * K + k] = S(-1e9);
  return m;
}

// Cross-modal readout: language-side queries q2 [B,D] attend over the visual
// map v3 [B,16,D]. Heads are concatenated; there is no output projection.
template <typename S>
Var<S> cross_attend(Net<S>& net, Var<S> v3, Var<S> q2, int B) {
  const int D = net.dims.d_model;
  const int H = net.dims.heads;
  const int dh = net.dims.d_head();
  Var<S> v2 = reshape(v3, {B * kGridCells, D});
  Var<S> keys2 = matmul(v2, net.p("rel.cross.k.w"));
  Var<S> vals2 = matmul(v2, net.p("rel.cross.v.w"));
  Var<S> qp2 = matmul(q2, net.p("rel.cross.q.w"));  // [B, D]
  std::vector<Var<S>> heads;
  for (int h = 0; h < H; ++h) {
    Var<S> qh = reshape(slice(qp2, 0, B, h * dh, (h + 1) * dh), {B, 1, dh});
    Var<S> kh = reshape(
        slice(keys2, 0, B * kGridCells, h * dh, (h + 1) * dh),
        {B, kGridCells, dh});
    Var<S> vh = reshape(
        slice(vals2, 0, B * kGridCells, h * dh, (h + 1) * dh),
        {B, kGridCells, dh});
    Var<S> scores =
        scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Var<S> ctx = matmul(softmax(scores), vh);  // [B,1,dh]
    heads.push_back(reshape(ctx, {B, dh}));
  }
  return concat_cols(heads);  // [B, D]
}

// Grounded object classifier over readouts: two linear layers, relu between.
template <typename S>
Var<S> object_logits(Net<S>& net, Var<S> readout) {
  return net.linear(relu(net.linear(readout, "rel.aux.1")), "rel.aux.2");
}

// Rowwise L2 normalization of [B,D]; rows must be nonzero.
template <typename S>
Var<S> normalize_rows(Net<S>& net, Var<S> x, int B) {
  Var<S> sq = sum_axis(mul(x, x), 1);            // [B,1]
  Var<S> inv = divide(net.ones(B, 1), sqrt(sq));
  return mul_col_bcast(x, inv);
}

// Search-side pooled queries (Eq. style: head MLP per location/token, mean
// pool, unit norm). The key/query projections come frozen from the
// cross-attention layer.
template <typename S>
Var<S> search_image_query(Net<S>& net, Var<S> v3, int B) {
  const int D = net.dims.d_model;
  Var<S> v2 = reshape(v3, {B * kGridCells, D});
  Var<S> keyv = matmul(v2, net.p("rel.cross.k.w"));
  Var<S> f = net.linear(relu(net.linear(keyv, "search.fv.1")), "search.fv.2");
  Var<S> w = net.g.constant(
      Tensor<S>::full({B, 1, kGridCells}, S(1.0 / kGridCells)));
  Var<S> pooled = reshape(matmul(w, reshape(f, {B, kGridCells, D})), {B, D});
  return normalize_rows(net, pooled, B);
}

// content_weights [B,1,K]: 1/n_content over content tokens, 0 elsewhere.
template <typename S>
Var<S> search_text_query(Net<S>& net, Var<S> lang3, Var<S> content_weights,
                         int B, int K) {
  const int D = net.dims.d_model;
  Var<S> l2 = reshape(lang3, {B * K, D});
  Var<S> queryl = matmul(l2, net.p("rel.cross.q.w"));
  Var<S> f =
      net.linear(relu(net.linear(queryl, "search.fl.1")), "search.fl.2");
  Var<S> pooled =
      reshape(matmul(content_weights, reshape(f, {B, K, D})), {B, D});
  return normalize_rows(net, pooled, B);
}

}  // namespace groundling
