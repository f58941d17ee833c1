#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundling/tensor.hpp"

namespace groundling {

// Append-only tape of operations.  Node ids referenced as inputs always
// precede the referencing node, so forward order is just id order and reverse
// id order is a valid backward schedule.  Values are computed eagerly when a
// node is pushed; evaluate() re-runs the same tape against rebound inputs.

enum class OpKind : uint8_t {
  Input,
  Param,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  AddTiled,     // X[(n*p) x c] + P[p x c] tiled vertically
  MulTiled,     // X[(n*p) x c] * P[p x c] tiled vertically
  MulColBcast,  // X[r x c] * v[r x 1] broadcast across columns
  MatMul,       // 2-d x 2-d, or batched 3-d x 3-d
  Transpose,    // 2-d, or 3-d swapping the last two axes
  Reshape,
  Concat0,  // stack rows
  Concat1,  // stack cols
  Slice,    // 2-d contiguous block
  Relu,
  Exp,
  Log,
  Sqrt,
  Scale,  // multiply by a fixed scalar
  Softmax,     // last axis
  LogSoftmax,  // last axis
  LayerNorm,   // last axis, no affine part
  SumAll,
  MeanAll,
  SumAxis,   // 2-d, axis 0 or 1
  MeanAxis,  // 2-d, axis 0 or 1
  MaxAxis,   // 2-d, axis 0 or 1; ties go to the first index
  L2Norm,
  GatherRows,  // select rows by a fixed id list
  Im2Col,      // NHWC patches with clamp-to-edge padding
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Const: return "const";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::AddTiled: return "add_tiled";
    case OpKind::MulTiled: return "mul_tiled";
    case OpKind::MulColBcast: return "mul_col_bcast";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat0: return "concat_rows";
    case OpKind::Concat1: return "concat_cols";
    case OpKind::Slice: return "slice";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Scale: return "scale";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::MaxAxis: return "max_axis";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Im2Col: return "im2col";
  }
  return "?";
}

template <typename S>
struct GraphNode {
  using Array = typename Tensor<S>::Array;
  OpKind kind;
  std::vector<uint32_t> in;
  Tensor<S> value;
  Array grad;  // size 0 until touched by backprop
  bool needs_grad = false;
  std::vector<int64_t> ia;  // integer attributes (axis, slice bounds, ids, ...)
  double da = 0.0;          // scalar attribute (scale factor, eps)
  std::string name;         // leaves only
};

template <typename S>
class Graph;

template <typename S>
struct Var {
  Graph<S>* g = nullptr;
  uint32_t id = 0;

  // Copies: node storage may move when further nodes are pushed.
  std::vector<int> shape() const { return g->node(id).value.shape; }
  // Do not hold the reference across pushes on the same graph.
  const Tensor<S>& val() const { return g->node(id).value; }
};

template <typename S>
class Graph {
 public:
  using Array = typename Tensor<S>::Array;
  using Node = GraphNode<S>;

  Var<S> input(const std::string& name, Tensor<S> t) {
    return leaf(OpKind::Input, name, std::move(t));
  }

  // Parameters require grad unless explicitly frozen at bind time.
  Var<S> param(const std::string& name, Tensor<S> t, bool trainable = true) {
    t.requires_grad = trainable;
    return leaf(OpKind::Param, name, std::move(t));
  }

  Var<S> constant(Tensor<S> t) {
    t.requires_grad = false;
    Node n;
    n.kind = OpKind::Const;
    n.value = std::move(t);
    return append(std::move(n));
  }

  void rebind(const std::string& name, const Tensor<S>& t) {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw IndexError("no leaf named '" + name + "'");
    Node& n = nodes_[it->second];
    if (n.value.shape != t.shape)
      throw_shape_mismatch(n.value.shape, t.shape, "rebind('" + name + "')");
    if (!t.all_finite())
      throw NonFiniteValue("non-finite value bound to leaf '" + name + "'");
    bool rg = n.value.requires_grad;
    n.value = t;
    n.value.requires_grad = rg;
  }

  void mark_output(const std::string& name, Var<S> v) {
    outputs_.emplace_back(name, v.id);
  }

  // Re-runs the whole tape with the given leaves rebound.  Deterministic: one
  // thread, id order.
  std::map<std::string, Tensor<S>> evaluate(
      const std::map<std::string, Tensor<S>>& inputs) {
    for (const auto& [k, v] : inputs) rebind(k, v);
    for (uint32_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::Input || n.kind == OpKind::Param ||
          n.kind == OpKind::Const)
        continue;
      forward_node(n);
      check_finite(n, id);
    }
    std::map<std::string, Tensor<S>> out;
    for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
    return out;
  }

  // Reverse pass from a scalar loss.  Returns gradients for every
  // requires_grad leaf (zeros if the leaf never influences the loss).
  std::map<std::string, Tensor<S>> backpropagate(Var<S> loss) {
    Node& ln = nodes_[loss.id];
    if (ln.value.numel() != 1)
      throw NonScalarLoss("backpropagate needs a scalar loss, got " +
                          shape_str(ln.value.shape));
    for (Node& n : nodes_) n.grad.resize(0);
    ensure_grad(loss.id);
    nodes_[loss.id].grad[0] = S(1);
    for (uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      backward_node(n);
    }
    std::map<std::string, Tensor<S>> grads;
    for (const auto& [name, id] : leaves_) {
      Node& n = nodes_[id];
      if (!n.value.requires_grad) continue;
      Tensor<S> g;
      g.shape = n.value.shape;
      if (n.grad.size() == n.value.numel()) {
        g.data = n.grad;
      } else {
        g.data = Array::Zero(n.value.numel());
      }
      if (!g.data.isFinite().all())
        throw NonFiniteValue("non-finite gradient for leaf '" + name + "'");
      grads[name] = std::move(g);
    }
    return grads;
  }

  void clear() {
    nodes_.clear();
    leaves_.clear();
    outputs_.clear();
  }

  size_t size() const { return nodes_.size(); }
  Node& node(uint32_t id) { return nodes_[id]; }
  const Node& node(uint32_t id) const { return nodes_[id]; }

  Var<S> push(OpKind kind, std::vector<uint32_t> in, std::vector<int64_t> ia = {},
              double da = 0.0) {
    Node n;
    n.kind = kind;
    n.in = std::move(in);
    n.ia = std::move(ia);
    n.da = da;
    for (uint32_t i : n.in) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    forward_node(n);
    return append(std::move(n));
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::string, uint32_t> leaves_;
  std::vector<std::pair<std::string, uint32_t>> outputs_;

  Var<S> leaf(OpKind kind, const std::string& name, Tensor<S> t) {
    if (leaves_.count(name)) throw IndexError("duplicate leaf name '" + name + "'");
    Node n;
    n.kind = kind;
    n.name = name;
    n.needs_grad = t.requires_grad;
    n.value = std::move(t);
    Var<S> v = append(std::move(n));
    leaves_[name] = v.id;
    return v;
  }

  Var<S> append(Node n) {
    uint32_t id = uint32_t(nodes_.size());
    check_finite(n, id);
    nodes_.push_back(std::move(n));
    return Var<S>{this, id};
  }

  void check_finite(const Node& n, uint32_t id) {
    if (!n.value.all_finite())
      throw NonFiniteValue(std::string("non-finite value in ") + op_name(n.kind) +
                           " node #" + std::to_string(id) +
                           (n.name.empty() ? "" : " ('" + n.name + "')"));
  }

  void ensure_grad(uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Array::Zero(n.value.numel());
  }

  const Tensor<S>& V(const Node& n, size_t k) const { return nodes_[n.in[k]].value; }

  // Accumulate into input k's grad if that input wants gradients.
  template <typename F>
  void acc(Node& n, size_t k, F&& fn) {
    Node& src = nodes_[n.in[k]];
    if (!src.needs_grad) return;
    ensure_grad(n.in[k]);
    fn(src.grad, src.value);
  }

  static int last_dim(const Tensor<S>& t) { return t.shape.empty() ? 1 : t.shape.back(); }

  // ---------------- forward ----------------

  void forward_node(Node& n) {
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::Const:
        return;

      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul:
      case OpKind::Div: {
        const Tensor<S>& a = V(n, 0);
        const Tensor<S>& b = V(n, 1);
        if (a.shape != b.shape) throw_shape_mismatch(a.shape, b.shape, op_name(n.kind));
        n.value.shape = a.shape;
        switch (n.kind) {
          case OpKind::Add: n.value.data = a.data + b.data; break;
          case OpKind::Sub: n.value.data = a.data - b.data; break;
          case OpKind::Mul: n.value.data = a.data * b.data; break;
          default: n.value.data = a.data / b.data; break;
        }
        return;
      }

      case OpKind::AddTiled:
      case OpKind::MulTiled: {
        const Tensor<S>& x = V(n, 0);
        const Tensor<S>& p = V(n, 1);
        x.require_rank(2, op_name(n.kind));
        p.require_rank(2, op_name(n.kind));
        if (p.shape[1] != x.shape[1] || p.shape[0] == 0 || x.shape[0] % p.shape[0] != 0)
          throw_shape_mismatch(x.shape, p.shape, op_name(n.kind));
        int tiles = x.shape[0] / p.shape[0];
        int pr = p.shape[0], c = p.shape[1];
        n.value.shape = x.shape;
        n.value.data.resize(x.numel());
        auto xm = x.as(x.shape[0], c);
        auto pm = p.as(pr, c);
        auto ym = n.value.as(x.shape[0], c);
        for (int t = 0; t < tiles; ++t) {
          if (n.kind == OpKind::AddTiled)
            ym.middleRows(t * pr, pr) = xm.middleRows(t * pr, pr) + pm;
          else
            ym.middleRows(t * pr, pr) =
                xm.middleRows(t * pr, pr).cwiseProduct(pm);
        }
        return;
      }

      case OpKind::MulColBcast: {
        const Tensor<S>& x = V(n, 0);
        const Tensor<S>& v = V(n, 1);
        x.require_rank(2, "mul_col_bcast");
        v.require_rank(2, "mul_col_bcast");
        if (v.shape[0] != x.shape[0] || v.shape[1] != 1)
          throw_shape_mismatch(x.shape, v.shape, "mul_col_bcast");
        n.value.shape = x.shape;
        n.value.data.resize(x.numel());
        n.value.mat() = (x.mat().array().colwise() * v.data).matrix();
        return;
      }

      case OpKind::MatMul: {
        const Tensor<S>& a = V(n, 0);
        const Tensor<S>& b = V(n, 1);
        if (a.rank() == 2 && b.rank() == 2) {
          if (a.shape[1] != b.shape[0]) throw_shape_mismatch(a.shape, b.shape, "matmul");
          n.value.shape = {a.shape[0], b.shape[1]};
          n.value.data.resize(n.value.numel());
          n.value.mat().noalias() = a.mat() * b.mat();
        } else if (a.rank() == 3 && b.rank() == 3) {
          if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1])
            throw_shape_mismatch(a.shape, b.shape, "matmul");
          n.value.shape = {a.shape[0], a.shape[1], b.shape[2]};
          n.value.data.resize(n.value.numel());
          for (int i = 0; i < a.shape[0]; ++i)
            n.value.batch(i).noalias() = a.batch(i) * b.batch(i);
        } else {
          throw_shape_mismatch(a.shape, b.shape, "matmul (rank)");
        }
        return;
      }

      case OpKind::Transpose: {
        const Tensor<S>& a = V(n, 0);
        if (a.rank() == 2) {
          n.value.shape = {a.shape[1], a.shape[0]};
          n.value.data.resize(a.numel());
          n.value.mat() = a.mat().transpose();
        } else if (a.rank() == 3) {
          n.value.shape = {a.shape[0], a.shape[2], a.shape[1]};
          n.value.data.resize(a.numel());
          for (int i = 0; i < a.shape[0]; ++i)
            n.value.batch(i) = a.batch(i).transpose();
        } else {
          throw ShapeMismatch("transpose needs rank 2 or 3, got " + shape_str(a.shape));
        }
        return;
      }

      case OpKind::Reshape: {
        const Tensor<S>& a = V(n, 0);
        std::vector<int> shape(n.ia.begin(), n.ia.end());
        if (Tensor<S>::count(shape) != a.numel())
          throw_shape_mismatch(a.shape, shape, "reshape");
        n.value.shape = shape;
        n.value.data = a.data;
        return;
      }

      case OpKind::Concat0:
      case OpKind::Concat1: {
        bool rows = n.kind == OpKind::Concat0;
        int r = 0, c = -1, rr = -1;
        for (uint32_t i : n.in) {
          const Tensor<S>& t = nodes_[i].value;
          t.require_rank(2, op_name(n.kind));
          if (rows) {
            if (c >= 0 && t.shape[1] != c)
              throw_shape_mismatch({r, c}, t.shape, "concat_rows");
            c = t.shape[1];
            r += t.shape[0];
          } else {
            if (rr >= 0 && t.shape[0] != rr)
              throw_shape_mismatch({rr, r}, t.shape, "concat_cols");
            rr = t.shape[0];
            r += t.shape[1];
          }
        }
        n.value.shape = rows ? std::vector<int>{r, c} : std::vector<int>{rr, r};
        n.value.data.resize(n.value.numel());
        auto ym = n.value.mat();
        int off = 0;
        for (uint32_t i : n.in) {
          const Tensor<S>& t = nodes_[i].value;
          if (rows) {
            ym.middleRows(off, t.shape[0]) = t.mat();
            off += t.shape[0];
          } else {
            ym.middleCols(off, t.shape[1]) = t.mat();
            off += t.shape[1];
          }
        }
        return;
      }

      case OpKind::Slice: {
        const Tensor<S>& a = V(n, 0);
        a.require_rank(2, "slice");
        int64_t r0 = n.ia[0], r1 = n.ia[1], c0 = n.ia[2], c1 = n.ia[3];
        if (r0 < 0 || r1 > a.shape[0] || c0 < 0 || c1 > a.shape[1] || r0 >= r1 ||
            c0 >= c1)
          throw IndexError("slice [" + std::to_string(r0) + "," + std::to_string(r1) +
                           ")x[" + std::to_string(c0) + "," + std::to_string(c1) +
                           ") out of range for " + shape_str(a.shape));
        n.value.shape = {int(r1 - r0), int(c1 - c0)};
        n.value.data.resize(n.value.numel());
        n.value.mat() = a.mat().block(r0, c0, r1 - r0, c1 - c0);
        return;
      }

      case OpKind::Relu: {
        const Tensor<S>& a = V(n, 0);
        n.value.shape = a.shape;
        n.value.data = a.data.max(S(0));
        return;
      }
      case OpKind::Exp: {
        const Tensor<S>& a = V(n, 0);
        n.value.shape = a.shape;
        n.value.data = a.data.exp();
        return;
      }
      case OpKind::Log: {
        const Tensor<S>& a = V(n, 0);
        n.value.shape = a.shape;
        n.value.data = a.data.log();
        return;
      }
      case OpKind::Sqrt: {
        const Tensor<S>& a = V(n, 0);
        n.value.shape = a.shape;
        n.value.data = a.data.sqrt();
        return;
      }
      case OpKind::Scale: {
        const Tensor<S>& a = V(n, 0);
        n.value.shape = a.shape;
        n.value.data = a.data * S(n.da);
        return;
      }

      case OpKind::Softmax:
      case OpKind::LogSoftmax: {
        const Tensor<S>& a = V(n, 0);
        int c = last_dim(a);
        int r = int(a.numel() / c);
        n.value.shape = a.shape;
        n.value.data.resize(a.numel());
        auto xm = a.as(r, c);
        auto ym = n.value.as(r, c);
        for (int i = 0; i < r; ++i) {
          S mx = xm.row(i).maxCoeff();
          auto sh = (xm.row(i).array() - mx);
          if (n.kind == OpKind::Softmax) {
            auto e = sh.exp();
            ym.row(i) = (e / e.sum()).matrix();
          } else {
            ym.row(i) = (sh - std::log(sh.exp().sum())).matrix();
          }
        }
        return;
      }

      case OpKind::LayerNorm: {
        const Tensor<S>& a = V(n, 0);
        int c = last_dim(a);
        int r = int(a.numel() / c);
        n.value.shape = a.shape;
        n.value.data.resize(a.numel());
        auto xm = a.as(r, c);
        auto ym = n.value.as(r, c);
        for (int i = 0; i < r; ++i) {
          S mu = xm.row(i).mean();
          auto cen = xm.row(i).array() - mu;
          S var = cen.square().sum() / S(c);
          ym.row(i) = (cen / std::sqrt(var + S(n.da))).matrix();
        }
        return;
      }

      case OpKind::SumAll: {
        n.value = Tensor<S>::scalar(V(n, 0).data.sum());
        return;
      }
      case OpKind::MeanAll: {
        n.value = Tensor<S>::scalar(V(n, 0).data.mean());
        return;
      }

      case OpKind::SumAxis:
      case OpKind::MeanAxis:
      case OpKind::MaxAxis: {
        const Tensor<S>& a = V(n, 0);
        a.require_rank(2, op_name(n.kind));
        int axis = int(n.ia[0]);
        auto am = a.mat();
        if (axis == 0) {
          n.value.shape = {1, a.shape[1]};
          n.value.data.resize(a.shape[1]);
          if (n.kind == OpKind::SumAxis)
            n.value.mat() = am.colwise().sum();
          else if (n.kind == OpKind::MeanAxis)
            n.value.mat() = am.colwise().mean();
          else
            n.value.mat() = am.colwise().maxCoeff();
        } else if (axis == 1) {
          n.value.shape = {a.shape[0], 1};
          n.value.data.resize(a.shape[0]);
          if (n.kind == OpKind::SumAxis)
            n.value.mat() = am.rowwise().sum();
          else if (n.kind == OpKind::MeanAxis)
            n.value.mat() = am.rowwise().mean();
          else
            n.value.mat() = am.rowwise().maxCoeff();
        } else {
          throw IndexError("axis must be 0 or 1");
        }
        return;
      }

      case OpKind::L2Norm: {
        const Tensor<S>& a = V(n, 0);
        n.value = Tensor<S>::scalar(std::sqrt(a.data.square().sum()));
        return;
      }

      case OpKind::GatherRows: {
        const Tensor<S>& a = V(n, 0);
        a.require_rank(2, "gather_rows");
        int m = int(n.ia.size());
        n.value.shape = {m, a.shape[1]};
        n.value.data.resize(n.value.numel());
        auto am = a.mat();
        auto ym = n.value.mat();
        for (int i = 0; i < m; ++i) {
          int64_t id = n.ia[size_t(i)];
          if (id < 0 || id >= a.shape[0])
            throw IndexError("gather_rows id " + std::to_string(id) +
                             " out of range for " + shape_str(a.shape));
          ym.row(i) = am.row(id);
        }
        return;
      }

      case OpKind::Im2Col: {
        const Tensor<S>& a = V(n, 0);
        a.require_rank(2, "im2col");
        int B = int(n.ia[0]), H = int(n.ia[1]), W = int(n.ia[2]), C = int(n.ia[3]);
        int kh = int(n.ia[4]), kw = int(n.ia[5]), stride = int(n.ia[6]),
            pad = int(n.ia[7]);
        if (a.shape[0] != B * H * W || a.shape[1] != C)
          throw_shape_mismatch(a.shape, {B * H * W, C}, "im2col");
        int OH = (H + 2 * pad - kh) / stride + 1;
        int OW = (W + 2 * pad - kw) / stride + 1;
        n.value.shape = {B * OH * OW, kh * kw * C};
        n.value.data.resize(n.value.numel());
        auto am = a.mat();
        auto ym = n.value.mat();
        for (int b = 0; b < B; ++b) {
          for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
              int orow = (b * OH + oy) * OW + ox;
              for (int ky = 0; ky < kh; ++ky) {
                int sy = std::clamp(oy * stride - pad + ky, 0, H - 1);
                for (int kx = 0; kx < kw; ++kx) {
                  int sx = std::clamp(ox * stride - pad + kx, 0, W - 1);
                  int srow = (b * H + sy) * W + sx;
                  ym.block(orow, (ky * kw + kx) * C, 1, C) = am.block(srow, 0, 1, C);
                }
              }
            }
          }
        }
        return;
      }
    }
  }

  // ---------------- backward ----------------

  void backward_node(Node& n) {
    const Array& g = n.grad;
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::Const:
        return;

      case OpKind::Add:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g; });
        acc(n, 1, [&](Array& d, const Tensor<S>&) { d += g; });
        return;
      case OpKind::Sub:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g; });
        acc(n, 1, [&](Array& d, const Tensor<S>&) { d -= g; });
        return;
      case OpKind::Mul: {
        const Tensor<S>& a = V(n, 0);
        const Tensor<S>& b = V(n, 1);
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g * b.data; });
        acc(n, 1, [&](Array& d, const Tensor<S>&) { d += g * a.data; });
        return;
      }
      case OpKind::Div: {
        const Tensor<S>& a = V(n, 0);
        const Tensor<S>& b = V(n, 1);
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g / b.data; });
        acc(n, 1, [&](Array& d, const Tensor<S>&) {
          d -= g * a.data / (b.data * b.data);
        });
        return;
      }

      case OpKind::AddTiled: {
        const Tensor<S>& p = V(n, 1);
        int pr = p.shape[0], c = p.shape[1];
        int tiles = V(n, 0).shape[0] / pr;
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g; });
        acc(n, 1, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), pr, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), tiles * pr, c);
          for (int t = 0; t < tiles; ++t) dm += gm.middleRows(t * pr, pr);
        });
        return;
      }
      case OpKind::MulTiled: {
        const Tensor<S>& x = V(n, 0);
        const Tensor<S>& p = V(n, 1);
        int pr = p.shape[0], c = p.shape[1];
        int tiles = x.shape[0] / pr;
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), tiles * pr, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), tiles * pr, c);
          auto pm = p.as(pr, c);
          for (int t = 0; t < tiles; ++t)
            dm.middleRows(t * pr, pr) += gm.middleRows(t * pr, pr).cwiseProduct(pm);
        });
        acc(n, 1, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), pr, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), tiles * pr, c);
          auto xm = x.as(tiles * pr, c);
          for (int t = 0; t < tiles; ++t)
            dm += gm.middleRows(t * pr, pr).cwiseProduct(xm.middleRows(t * pr, pr));
        });
        return;
      }

      case OpKind::MulColBcast: {
        const Tensor<S>& x = V(n, 0);
        const Tensor<S>& v = V(n, 1);
        int r = x.shape[0], c = x.shape[1];
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, c);
          dm.array() += gm.array().colwise() * v.data;
        });
        acc(n, 1, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, c);
          d.matrix() += gm.cwiseProduct(x.mat()).rowwise().sum();
        });
        return;
      }

      case OpKind::MatMul: {
        const Tensor<S>& a = V(n, 0);
        const Tensor<S>& b = V(n, 1);
        if (a.rank() == 2) {
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), a.shape[0],
                                                       b.shape[1]);
          acc(n, 0, [&](Array& d, const Tensor<S>&) {
            Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), a.shape[0], a.shape[1]);
            dm.noalias() += gm * b.mat().transpose();
          });
          acc(n, 1, [&](Array& d, const Tensor<S>&) {
            Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), b.shape[0], b.shape[1]);
            dm.noalias() += a.mat().transpose() * gm;
          });
        } else {
          int B = a.shape[0], m = a.shape[1], k = a.shape[2], p = b.shape[2];
          acc(n, 0, [&](Array& d, const Tensor<S>&) {
            for (int i = 0; i < B; ++i) {
              Eigen::Map<typename Tensor<S>::Mat> dm(d.data() + int64_t(i) * m * k, m, k);
              Eigen::Map<const typename Tensor<S>::Mat> gm(
                  g.data() + int64_t(i) * m * p, m, p);
              dm.noalias() += gm * b.batch(i).transpose();
            }
          });
          acc(n, 1, [&](Array& d, const Tensor<S>&) {
            for (int i = 0; i < B; ++i) {
              Eigen::Map<typename Tensor<S>::Mat> dm(d.data() + int64_t(i) * k * p, k, p);
              Eigen::Map<const typename Tensor<S>::Mat> gm(
                  g.data() + int64_t(i) * m * p, m, p);
              dm.noalias() += a.batch(i).transpose() * gm;
            }
          });
        }
        return;
      }

      case OpKind::Transpose: {
        const Tensor<S>& a = V(n, 0);
        if (a.rank() == 2) {
          acc(n, 0, [&](Array& d, const Tensor<S>&) {
            Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), a.shape[0], a.shape[1]);
            Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), a.shape[1],
                                                         a.shape[0]);
            dm += gm.transpose();
          });
        } else {
          int B = a.shape[0], r = a.shape[1], c = a.shape[2];
          acc(n, 0, [&](Array& d, const Tensor<S>&) {
            for (int i = 0; i < B; ++i) {
              Eigen::Map<typename Tensor<S>::Mat> dm(d.data() + int64_t(i) * r * c, r, c);
              Eigen::Map<const typename Tensor<S>::Mat> gm(
                  g.data() + int64_t(i) * r * c, c, r);
              dm += gm.transpose();
            }
          });
        }
        return;
      }

      case OpKind::Reshape:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g; });
        return;

      case OpKind::Concat0:
      case OpKind::Concat1: {
        bool rows = n.kind == OpKind::Concat0;
        int R = n.value.shape[0], C = n.value.shape[1];
        Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), R, C);
        int off = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          const Tensor<S>& t = V(n, k);
          int span = rows ? t.shape[0] : t.shape[1];
          acc(n, k, [&](Array& d, const Tensor<S>&) {
            Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), t.shape[0], t.shape[1]);
            if (rows)
              dm += gm.middleRows(off, span);
            else
              dm += gm.middleCols(off, span);
          });
          off += span;
        }
        return;
      }

      case OpKind::Slice: {
        const Tensor<S>& a = V(n, 0);
        int64_t r0 = n.ia[0], c0 = n.ia[2];
        int sr = n.value.shape[0], sc = n.value.shape[1];
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), a.shape[0], a.shape[1]);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), sr, sc);
          dm.block(r0, c0, sr, sc) += gm;
        });
        return;
      }

      case OpKind::Relu: {
        const Tensor<S>& a = V(n, 0);
        // Subgradient: 0 at and below zero.
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          d += g * (a.data > S(0)).template cast<S>();
        });
        return;
      }
      case OpKind::Exp:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g * n.value.data; });
        return;
      case OpKind::Log: {
        const Tensor<S>& a = V(n, 0);
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g / a.data; });
        return;
      }
      case OpKind::Sqrt:
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          d += g * S(0.5) / n.value.data;
        });
        return;
      case OpKind::Scale:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g * S(n.da); });
        return;

      case OpKind::Softmax: {
        int c = last_dim(n.value);
        int r = int(n.value.numel() / c);
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, c);
          auto ym = n.value.as(r, c);
          for (int i = 0; i < r; ++i) {
            S dot = (gm.row(i).array() * ym.row(i).array()).sum();
            dm.row(i).array() +=
                ym.row(i).array() * (gm.row(i).array() - dot);
          }
        });
        return;
      }
      case OpKind::LogSoftmax: {
        int c = last_dim(n.value);
        int r = int(n.value.numel() / c);
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, c);
          auto ym = n.value.as(r, c);
          for (int i = 0; i < r; ++i) {
            S gs = gm.row(i).sum();
            dm.row(i).array() +=
                gm.row(i).array() - ym.row(i).array().exp() * gs;
          }
        });
        return;
      }

      case OpKind::LayerNorm: {
        const Tensor<S>& a = V(n, 0);
        int c = last_dim(a);
        int r = int(a.numel() / c);
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, c);
          auto xm = a.as(r, c);
          auto ym = n.value.as(r, c);
          for (int i = 0; i < r; ++i) {
            S mu = xm.row(i).mean();
            auto cen = xm.row(i).array() - mu;
            S sd = std::sqrt(cen.square().sum() / S(c) + S(n.da));
            S gmean = gm.row(i).mean();
            S gymean = (gm.row(i).array() * ym.row(i).array()).mean();
            dm.row(i).array() +=
                (gm.row(i).array() - gmean - ym.row(i).array() * gymean) / sd;
          }
        });
        return;
      }

      case OpKind::SumAll:
        acc(n, 0, [&](Array& d, const Tensor<S>&) { d += g[0]; });
        return;
      case OpKind::MeanAll: {
        const Tensor<S>& a = V(n, 0);
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          d += g[0] / S(a.numel());
        });
        return;
      }

      case OpKind::SumAxis:
      case OpKind::MeanAxis: {
        const Tensor<S>& a = V(n, 0);
        int axis = int(n.ia[0]);
        int r = a.shape[0], c = a.shape[1];
        S div = n.kind == OpKind::MeanAxis ? S(axis == 0 ? r : c) : S(1);
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          if (axis == 0) {
            Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), 1, c);
            dm.array() += (gm / div).array().replicate(r, 1);
          } else {
            Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), r, 1);
            dm.array() += (gm / div).array().replicate(1, c);
          }
        });
        return;
      }

      case OpKind::MaxAxis: {
        const Tensor<S>& a = V(n, 0);
        int axis = int(n.ia[0]);
        int r = a.shape[0], c = a.shape[1];
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), r, c);
          auto am = a.mat();
          if (axis == 0) {
            for (int j = 0; j < c; ++j) {
              int arg = 0;
              for (int i = 1; i < r; ++i)
                if (am(i, j) > am(arg, j)) arg = i;
              dm(arg, j) += g[j];
            }
          } else {
            for (int i = 0; i < r; ++i) {
              int arg = 0;
              for (int j = 1; j < c; ++j)
                if (am(i, j) > am(i, arg)) arg = j;
              dm(i, arg) += g[i];
            }
          }
        });
        return;
      }

      case OpKind::L2Norm: {
        const Tensor<S>& a = V(n, 0);
        S norm = n.value.data[0];
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          if (norm > S(0)) d += g[0] * a.data / norm;
        });
        return;
      }

      case OpKind::GatherRows: {
        const Tensor<S>& a = V(n, 0);
        int c = a.shape[1];
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), a.shape[0], c);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(),
                                                       int(n.ia.size()), c);
          for (size_t i = 0; i < n.ia.size(); ++i)
            dm.row(n.ia[i]) += gm.row(int(i));
        });
        return;
      }

      case OpKind::Im2Col: {
        int B = int(n.ia[0]), H = int(n.ia[1]), W = int(n.ia[2]), C = int(n.ia[3]);
        int kh = int(n.ia[4]), kw = int(n.ia[5]), stride = int(n.ia[6]),
            pad = int(n.ia[7]);
        int OH = (H + 2 * pad - kh) / stride + 1;
        int OW = (W + 2 * pad - kw) / stride + 1;
        acc(n, 0, [&](Array& d, const Tensor<S>&) {
          Eigen::Map<typename Tensor<S>::Mat> dm(d.data(), B * H * W, C);
          Eigen::Map<const typename Tensor<S>::Mat> gm(g.data(), B * OH * OW,
                                                       kh * kw * C);
          for (int b = 0; b < B; ++b) {
            for (int oy = 0; oy < OH; ++oy) {
              for (int ox = 0; ox < OW; ++ox) {
                int orow = (b * OH + oy) * OW + ox;
                for (int ky = 0; ky < kh; ++ky) {
                  int sy = std::clamp(oy * stride - pad + ky, 0, H - 1);
                  for (int kx = 0; kx < kw; ++kx) {
                    int sx = std::clamp(ox * stride - pad + kx, 0, W - 1);
                    int srow = (b * H + sy) * W + sx;
                    dm.block(srow, 0, 1, C) +=
                        gm.block(orow, (ky * kw + kx) * C, 1, C);
                  }
                }
              }
            }
          }
        });
        return;
      }
    }
  }
};

// ---- op builders -----------------------------------------------------------
// Free functions so model code reads as expressions over Vars.

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return a.g->push(OpKind::Add, {a.id, b.id});
}
template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  return a.g->push(OpKind::Sub, {a.id, b.id});
}
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  return a.g->push(OpKind::Mul, {a.id, b.id});
}
template <typename S>
Var<S> divide(Var<S> a, Var<S> b) {
  return a.g->push(OpKind::Div, {a.id, b.id});
}
template <typename S>
Var<S> add_tiled(Var<S> x, Var<S> p) {
  return x.g->push(OpKind::AddTiled, {x.id, p.id});
}
template <typename S>
Var<S> mul_tiled(Var<S> x, Var<S> p) {
  return x.g->push(OpKind::MulTiled, {x.id, p.id});
}
template <typename S>
Var<S> mul_col_bcast(Var<S> x, Var<S> v) {
  return x.g->push(OpKind::MulColBcast, {x.id, v.id});
}
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  return a.g->push(OpKind::MatMul, {a.id, b.id});
}
template <typename S>
Var<S> transpose(Var<S> a) {
  return a.g->push(OpKind::Transpose, {a.id});
}
template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> shape) {
  return a.g->push(OpKind::Reshape, {a.id},
                   std::vector<int64_t>(shape.begin(), shape.end()));
}
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& vs) {
  std::vector<uint32_t> in;
  for (auto v : vs) in.push_back(v.id);
  return vs.at(0).g->push(OpKind::Concat0, std::move(in));
}
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& vs) {
  std::vector<uint32_t> in;
  for (auto v : vs) in.push_back(v.id);
  return vs.at(0).g->push(OpKind::Concat1, std::move(in));
}
template <typename S>
Var<S> slice(Var<S> a, int r0, int r1, int c0, int c1) {
  return a.g->push(OpKind::Slice, {a.id}, {r0, r1, c0, c1});
}
template <typename S>
Var<S> relu(Var<S> a) {
  return a.g->push(OpKind::Relu, {a.id});
}
template <typename S>
Var<S> exp(Var<S> a) {
  return a.g->push(OpKind::Exp, {a.id});
}
template <typename S>
Var<S> log(Var<S> a) {
  return a.g->push(OpKind::Log, {a.id});
}
template <typename S>
Var<S> sqrt(Var<S> a) {
  return a.g->push(OpKind::Sqrt, {a.id});
}
template <typename S>
Var<S> scale(Var<S> a, double c) {
  return a.g->push(OpKind::Scale, {a.id}, {}, c);
}
template <typename S>
Var<S> softmax(Var<S> a) {
  return a.g->push(OpKind::Softmax, {a.id});
}
template <typename S>
Var<S> log_softmax(Var<S> a) {
  return a.g->push(OpKind::LogSoftmax, {a.id});
}
template <typename S>
Var<S> layernorm(Var<S> a, double eps = 1e-5) {
  return a.g->push(OpKind::LayerNorm, {a.id}, {}, eps);
}
template <typename S>
Var<S> sum_all(Var<S> a) {
  return a.g->push(OpKind::SumAll, {a.id});
}
template <typename S>
Var<S> mean_all(Var<S> a) {
  return a.g->push(OpKind::MeanAll, {a.id});
}
template <typename S>
Var<S> sum_axis(Var<S> a, int axis) {
  return a.g->push(OpKind::SumAxis, {a.id}, {axis});
}
template <typename S>
Var<S> mean_axis(Var<S> a, int axis) {
  return a.g->push(OpKind::MeanAxis, {a.id}, {axis});
}
template <typename S>
Var<S> max_axis(Var<S> a, int axis) {
  return a.g->push(OpKind::MaxAxis, {a.id}, {axis});
}
template <typename S>
Var<S> l2_norm(Var<S> a) {
  return a.g->push(OpKind::L2Norm, {a.id});
}
template <typename S>
Var<S> gather_rows(Var<S> a, const std::vector<int64_t>& ids) {
  return a.g->push(OpKind::GatherRows, {a.id}, ids);
}
template <typename S>
Var<S> im2col(Var<S> a, int B, int H, int W, int C, int kh, int kw, int stride,
              int pad) {
  return a.g->push(OpKind::Im2Col, {a.id}, {B, H, W, C, kh, kw, stride, pad});
}

}  // namespace groundling
