#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "poisonlab/linmap.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

struct NoPathError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reverse-mode tape. Values are computed eagerly; gradient() appends the
// adjoint computation as ordinary nodes, so calling gradient() on a scalar
// built from gradients yields second-order derivatives. A graph is confined
// to one thread; tensors read out of it are plain values.
template <class S>
class BasicGraph {
 public:
  using Id = int32_t;

  enum class Op {
    Constant,
    Variable,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Exp,
    Log,
    Sqrt,
    Relu,
    Step,
    Sum,
    Bcast,
    BcastMul,
    Matmul,
    Transpose,
    Reshape,
    LinMapOp,
  };

  Id constant(BasicTensor<S> t) { return push(Op::Constant, {}, std::move(t), false); }
  Id variable(BasicTensor<S> t) { return push(Op::Variable, {}, std::move(t), true); }

  Id add(Id a, Id b) { return ew(Op::Add, a, b); }
  Id sub(Id a, Id b) { return ew(Op::Sub, a, b); }
  Id mul(Id a, Id b) { return ew(Op::Mul, a, b); }
  Id div(Id a, Id b) { return ew(Op::Div, a, b); }

  Id scale(Id a, double c) {
    BasicTensor<S> out = val(a);
    for (S& x : out.v) x *= static_cast<S>(c);
    Id id = push(Op::Scale, {a}, std::move(out), rg(a));
    nodes_[id].c = c;
    return id;
  }
  Id neg(Id a) { return scale(a, -1.0); }

  Id exp_(Id a) { return unary(Op::Exp, a, [](S x) { return std::exp(x); }); }
  Id log_(Id a) { return unary(Op::Log, a, [](S x) { return std::log(x); }); }
  Id sqrt_(Id a) { return unary(Op::Sqrt, a, [](S x) { return std::sqrt(x); }); }
  Id relu(Id a) { return unary(Op::Relu, a, [](S x) { return x > S(0) ? x : S(0); }); }
  // Derivative gate for relu; piecewise constant, so it carries no gradient.
  Id step(Id a) {
    BasicTensor<S> out = val(a);
    for (S& x : out.v) x = x > S(0) ? S(1) : S(0);
    return push(Op::Step, {a}, std::move(out), false);
  }

  Id sum(Id a) {
    S acc = 0;
    for (S x : val(a).v) acc += x;
    return push(Op::Sum, {a}, BasicTensor<S>::scalar(acc), rg(a));
  }
  Id mean(Id a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

  Id bcast(Id a, Shape shape) {
    if (!val(a).is_scalar()) throw ShapeError("bcast expects a scalar input");
    return push(Op::Bcast, {a}, BasicTensor<S>::full(std::move(shape), val(a).item()), rg(a));
  }

  // x * s with s scalar.
  Id bcast_mul(Id x, Id s) {
    if (!val(s).is_scalar()) throw ShapeError("bcast_mul expects a scalar second input");
    BasicTensor<S> out = val(x);
    S c = val(s).item();
    for (S& v : out.v) v *= c;
    return push(Op::BcastMul, {x, s}, std::move(out), rg(x) || rg(s));
  }

  Id matmul(Id a, Id b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
      throw ShapeError("matmul shapes incompatible: " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    BasicTensor<S> out = BasicTensor<S>::zeros({m, n});
    mm(ta.v.data(), tb.v.data(), out.v.data(), m, k, n);
    return push(Op::Matmul, {a, b}, std::move(out), rg(a) || rg(b));
  }

  Id transpose(Id a) {
    const auto& t = val(a);
    if (t.shape.size() != 2) throw ShapeError("transpose expects a 2-d tensor");
    int64_t m = t.shape[0], n = t.shape[1];
    BasicTensor<S> out = BasicTensor<S>::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) out.v[static_cast<size_t>(j * m + i)] = t.v[static_cast<size_t>(i * n + j)];
    return push(Op::Transpose, {a}, std::move(out), rg(a));
  }

  Id reshape(Id a, Shape shape) {
    if (numel(shape) != val(a).size())
      throw ShapeError("reshape " + shape_str(val(a).shape) + " -> " + shape_str(shape));
    BasicTensor<S> out(std::move(shape), val(a).v);
    return push(Op::Reshape, {a}, std::move(out), rg(a));
  }

  Id linmap(Id a, LinMapPtr map, int64_t repeats, Shape out_shape) {
    BasicTensor<S> out = BasicTensor<S>::zeros(std::move(out_shape));
    map->apply(val(a).v.data(), out.v.data(), repeats);
    Id id = push(Op::LinMapOp, {a}, std::move(out), rg(a));
    nodes_[id].map = std::move(map);
    nodes_[id].repeats = repeats;
    return id;
  }

  Id detach(Id a) { return constant(val(a)); }

  // Convenience compositions.
  Id dot(Id a, Id b) { return sum(mul(a, b)); }
  Id sqnorm(Id a) { return sum(mul(a, a)); }

  const BasicTensor<S>& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
  size_t size() const { return nodes_.size(); }

  // d(out)/d(input) for each input, appended to the tape so the results stay
  // differentiable. `out` must be scalar; an input with no differentiable
  // path from `out` raises NoPathError rather than returning silent zeros.
  std::vector<Id> gradient(Id out, const std::vector<Id>& inputs) {
    if (!val(out).is_scalar())
      throw ShapeError("gradient of non-scalar output " + shape_str(val(out).shape));
    size_t n = static_cast<size_t>(out) + 1;
    std::vector<char> reach(n, 0);
    reach[static_cast<size_t>(out)] = 1;
    for (int64_t id = out; id >= 0; --id) {
      if (!reach[static_cast<size_t>(id)]) continue;
      for (Id in : node(id).in)
        if (rg(in)) reach[static_cast<size_t>(in)] = 1;
    }
    for (Id in : inputs)
      if (in > out || !reach[static_cast<size_t>(in)])
        throw NoPathError("no differentiable path from output to input node " + std::to_string(in));

    std::vector<Id> adj(n, -1);
    adj[static_cast<size_t>(out)] = constant(BasicTensor<S>::scalar(S(1)));
    for (int64_t id = out; id >= 0; --id) {
      if (adj[static_cast<size_t>(id)] < 0 || !reach[static_cast<size_t>(id)]) continue;
      backprop(static_cast<Id>(id), adj[static_cast<size_t>(id)], adj);
    }
    std::vector<Id> grads;
    grads.reserve(inputs.size());
    for (Id in : inputs) {
      Id g = adj[static_cast<size_t>(in)];
      if (g < 0) g = constant(BasicTensor<S>::zeros(val(in).shape));  // reachable via Step-gated path only
      grads.push_back(g);
    }
    return grads;
  }

 private:
  struct Node {
    Op op;
    std::vector<Id> in;
    BasicTensor<S> val;
    bool rg = false;
    double c = 0;
    LinMapPtr map;
    int64_t repeats = 1;
  };

  Node& node(int64_t id) { return nodes_[static_cast<size_t>(id)]; }
  bool rg(Id id) const { return nodes_[static_cast<size_t>(id)].rg; }

  Id push(Op op, std::vector<Id> in, BasicTensor<S> out, bool requires_grad) {
    if (!out.all_finite()) throw NumericError("non-finite values produced by " + op_name(op));
    Node nd;
    nd.op = op;
    nd.in = std::move(in);
    nd.val = std::move(out);
    nd.rg = requires_grad;
    nodes_.push_back(std::move(nd));
    return static_cast<Id>(nodes_.size() - 1);
  }

  template <class F>
  Id unary(Op op, Id a, F f) {
    BasicTensor<S> out = val(a);
    for (S& x : out.v) x = f(x);
    return push(op, {a}, std::move(out), rg(a));
  }

  Id ew(Op op, Id a, Id b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.shape != tb.shape)
      throw ShapeError(op_name(op) + " shape mismatch: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    BasicTensor<S> out = ta;
    const auto& y = tb.v;
    switch (op) {
      case Op::Add:
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += y[i];
        break;
      case Op::Sub:
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= y[i];
        break;
      case Op::Mul:
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= y[i];
        break;
      case Op::Div:
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= y[i];
        break;
      default:
        throw std::logic_error("ew: bad op");
    }
    return push(op, {a, b}, std::move(out), rg(a) || rg(b));
  }

  void accumulate(std::vector<Id>& adj, Id target, Id contrib) {
    Id& slot = adj[static_cast<size_t>(target)];
    slot = slot < 0 ? contrib : add(slot, contrib);
  }

  void backprop(Id id, Id g, std::vector<Id>& adj) {
    // Copies, not references: pushing vjp nodes may reallocate nodes_.
    Op op = node(id).op;
    std::vector<Id> in = node(id).in;
    double c = node(id).c;
    LinMapPtr map = node(id).map;
    int64_t repeats = node(id).repeats;
    Shape out_shape = node(id).val.shape;
    switch (op) {
      case Op::Constant:
      case Op::Variable:
      case Op::Step:
        break;
      case Op::Add:
        if (rg(in[0])) accumulate(adj, in[0], g);
        if (rg(in[1])) accumulate(adj, in[1], g);
        break;
      case Op::Sub:
        if (rg(in[0])) accumulate(adj, in[0], g);
        if (rg(in[1])) accumulate(adj, in[1], neg(g));
        break;
      case Op::Mul:
        if (rg(in[0])) accumulate(adj, in[0], mul(g, in[1]));
        if (rg(in[1])) accumulate(adj, in[1], mul(g, in[0]));
        break;
      case Op::Div:
        if (rg(in[0])) accumulate(adj, in[0], div(g, in[1]));
        if (rg(in[1])) accumulate(adj, in[1], neg(div(mul(g, id), in[1])));
        break;
      case Op::Scale:
        accumulate(adj, in[0], scale(g, c));
        break;
      case Op::Exp:
        accumulate(adj, in[0], mul(g, id));
        break;
      case Op::Log:
        accumulate(adj, in[0], div(g, in[0]));
        break;
      case Op::Sqrt:
        accumulate(adj, in[0], scale(div(g, id), 0.5));
        break;
      case Op::Relu:
        accumulate(adj, in[0], mul(g, step(in[0])));
        break;
      case Op::Sum:
        accumulate(adj, in[0], bcast(g, val(in[0]).shape));
        break;
      case Op::Bcast:
        accumulate(adj, in[0], sum(g));
        break;
      case Op::BcastMul:
        if (rg(in[0])) accumulate(adj, in[0], bcast_mul(g, in[1]));
        if (rg(in[1])) accumulate(adj, in[1], sum(mul(g, in[0])));
        break;
      case Op::Matmul:
        if (rg(in[0])) accumulate(adj, in[0], matmul(g, transpose(in[1])));
        if (rg(in[1])) accumulate(adj, in[1], matmul(transpose(in[0]), g));
        break;
      case Op::Transpose:
        accumulate(adj, in[0], transpose(g));
        break;
      case Op::Reshape:
        accumulate(adj, in[0], reshape(g, val(in[0]).shape));
        break;
      case Op::LinMapOp:
        accumulate(adj, in[0], linmap(g, map->transposed(), repeats, val(in[0]).shape));
        break;
    }
    (void)out_shape;
  }

  static void mm(const S* a, const S* b, S* out, int64_t m, int64_t k, int64_t n) {
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> ma(a, m, k), mb(b, k, n);
    Eigen::Map<Mat> mo(out, m, n);
    mo.noalias() = ma * mb;
  }

  static std::string op_name(Op op) {
    switch (op) {
      case Op::Constant: return "constant";
      case Op::Variable: return "variable";
      case Op::Add: return "add";
      case Op::Sub: return "sub";
      case Op::Mul: return "mul";
      case Op::Div: return "div";
      case Op::Scale: return "scale";
      case Op::Exp: return "exp";
      case Op::Log: return "log";
      case Op::Sqrt: return "sqrt";
      case Op::Relu: return "relu";
      case Op::Step: return "step";
      case Op::Sum: return "sum";
      case Op::Bcast: return "bcast";
      case Op::BcastMul: return "bcast_mul";
      case Op::Matmul: return "matmul";
      case Op::Transpose: return "transpose";
      case Op::Reshape: return "reshape";
      case Op::LinMapOp: return "linmap";
    }
    return "?";
  }

  std::vector<Node> nodes_;
};

using Graph = BasicGraph<double>;
using GraphF = BasicGraph<float>;

}  // namespace poisonlab
