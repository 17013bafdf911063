#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"

// Reverse-mode differentiation over a closed set of primitives.
//
// Activations use a column-per-sample layout inside the tape: a batch of n
// vectors of width k is a k x n matrix, so a linear layer is W * X with no
// transposes on the parameter path.

namespace lilora::diff {

struct NodeId {
  std::size_t index = static_cast<std::size_t>(-1);
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op {
  Leaf,
  MatMul,
  Add,
  Scale,  // by a constant, or by a 1x1 node
  BiasAdd,
  Relu,
  Sigmoid,
  SoftmaxCrossEntropy,
  FrobeniusNormSq,
  FrobeniusCosine,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Scale: return "scale";
    case Op::BiasAdd: return "bias_add";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::FrobeniusNormSq: return "frobenius_norm_sq";
    case Op::FrobeniusCosine: return "frobenius_cosine";
  }
  return "?";
}

// Norms below this make the cosine (and its gradient) zero.
inline constexpr double kCosineNormFloor = 1e-12;

class Tape {
 public:
  NodeId parameter(Matrix value, std::string name = {}) { return leaf(std::move(value), std::move(name), true); }
  NodeId constant(Matrix value, std::string name = {}) { return leaf(std::move(value), std::move(name), false); }

  NodeId matmul(NodeId a, NodeId b) { return record(Op::MatMul, {a, b}); }
  NodeId add(NodeId a, NodeId b) { return record(Op::Add, {a, b}); }
  NodeId scale(NodeId a, double c) {
    Node n = make(Op::Scale, {a});
    n.constant = c;
    return push(std::move(n));
  }
  /// a * s where s is a 1x1 node.
  NodeId scale(NodeId a, NodeId s) { return record(Op::Scale, {a, s}); }
  /// x (d x n) plus bias b (d x 1) broadcast over columns.
  NodeId bias_add(NodeId x, NodeId b) { return record(Op::BiasAdd, {x, b}); }
  NodeId relu(NodeId a) { return record(Op::Relu, {a}); }
  NodeId sigmoid(NodeId a) { return record(Op::Sigmoid, {a}); }
  /// Mean cross-entropy of column-wise softmax over logits (C x n).
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
    Node n = make(Op::SoftmaxCrossEntropy, {logits});
    n.labels = std::move(labels);
    return push(std::move(n));
  }
  NodeId frobenius_norm_sq(NodeId a) { return record(Op::FrobeniusNormSq, {a}); }
  NodeId frobenius_cosine(NodeId a, NodeId b) { return record(Op::FrobeniusCosine, {a, b}); }

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(NodeId id) const { return at(id).op; }
  const std::string& name(NodeId id) const { return at(id).name; }
  const Matrix& value(NodeId id) const { return at(id).value; }
  bool trainable(NodeId id) const { return at(id).trainable; }

  /// Gradient of the last backward() root w.r.t. this node. Empty for nodes
  /// not on a path to any parameter.
  const Matrix& grad(NodeId id) const { return at(id).grad; }

  std::vector<NodeId> parameters() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].trainable) out.push_back({i});
    return out;
  }

  /// Replace a leaf's value (shape must be unchanged); call forward() after.
  void set_value(NodeId leaf_id, Matrix value) {
    Node& n = at(leaf_id);
    if (n.op != Op::Leaf) throw ContractError("set_value on non-leaf node '" + n.name + "'");
    require_same_shape(n.value, value, "set_value");
    n.value = std::move(value);
  }

  /// Re-evaluate every node in recorded order from the current leaf values.
  /// Returns the value of the last node.
  const Matrix& forward() {
    if (nodes_.empty()) throw ContractError("forward on an empty tape");
    for (Node& n : nodes_)
      if (n.op != Op::Leaf) evaluate(n);
    return nodes_.back().value;
  }

  /// Reverse sweep from a 1x1 root; `seed` is dL/droot.
  void backward(NodeId root, double seed = 1.0) {
    Node& r = at(root);
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw ContractError("backward root '" + label(r) + "' is not scalar: " + r.value.shape());
    for (Node& n : nodes_) n.grad = n.requires_grad ? Matrix(n.value.rows(), n.value.cols()) : Matrix();
    if (!r.requires_grad) return;
    r.grad[0] = seed;
    for (std::size_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.op == Op::Leaf) continue;
      propagate(n);
    }
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Matrix value;
    Matrix grad;
    std::string name;
    double constant = 1.0;
    std::vector<std::size_t> labels;
    bool trainable = false;
    bool requires_grad = false;
  };

  Node& at(NodeId id) {
    if (id.index >= nodes_.size()) throw LookupError("unknown tape node " + std::to_string(id.index));
    return nodes_[id.index];
  }
  const Node& at(NodeId id) const {
    if (id.index >= nodes_.size()) throw LookupError("unknown tape node " + std::to_string(id.index));
    return nodes_[id.index];
  }

  static std::string label(const Node& n) { return n.name.empty() ? std::string(op_name(n.op)) : n.name; }

  NodeId leaf(Matrix value, std::string name, bool trainable) {
    if (value.empty()) throw ShapeError("leaf '" + name + "' has no value");
    Node n;
    n.value = std::move(value);
    n.name = std::move(name);
    n.trainable = trainable;
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  Node make(Op op, std::vector<NodeId> inputs) {
    Node n;
    n.op = op;
    for (NodeId in : inputs) {
      const Node& src = at(in);
      n.requires_grad = n.requires_grad || src.requires_grad;
    }
    n.inputs = std::move(inputs);
    n.name = std::string(op_name(op)) + "#" + std::to_string(nodes_.size());
    return n;
  }

  NodeId record(Op op, std::vector<NodeId> inputs) { return push(make(op, std::move(inputs))); }

  NodeId push(Node n) {
    evaluate(n);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  const Matrix& in(const Node& n, std::size_t i) const { return nodes_[n.inputs[i].index].value; }

  void shape_fail(const Node& n, const std::string& detail) const {
    throw ShapeError("node '" + label(n) + "': " + detail);
  }

  void evaluate(Node& n) {
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::MatMul: {
        const Matrix& a = in(n, 0);
        const Matrix& b = in(n, 1);
        if (a.cols() != b.rows()) shape_fail(n, "cannot multiply " + a.shape() + " by " + b.shape());
        n.value = lilora::matmul(a, b);
        return;
      }
      case Op::Add: {
        const Matrix& a = in(n, 0);
        const Matrix& b = in(n, 1);
        if (!a.same_shape(b)) shape_fail(n, "cannot add " + a.shape() + " and " + b.shape());
        n.value = lilora::add(a, b);
        return;
      }
      case Op::Scale: {
        double s = n.constant;
        if (n.inputs.size() == 2) {
          const Matrix& sv = in(n, 1);
          if (sv.rows() != 1 || sv.cols() != 1) shape_fail(n, "scale factor must be 1x1, got " + sv.shape());
          s = sv[0];
        }
        n.value = lilora::scale(in(n, 0), s);
        return;
      }
      case Op::BiasAdd: {
        const Matrix& x = in(n, 0);
        const Matrix& b = in(n, 1);
        if (b.cols() != 1 || b.rows() != x.rows()) shape_fail(n, "bias " + b.shape() + " does not fit " + x.shape());
        n.value = x;
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) n.value(i, j) += b[i];
        return;
      }
      case Op::Relu: {
        n.value = in(n, 0);
        for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
        return;
      }
      case Op::Sigmoid: {
        n.value = in(n, 0);
        for (double& v : n.value.values()) v = 1.0 / (1.0 + std::exp(-v));
        return;
      }
      case Op::SoftmaxCrossEntropy: {
        const Matrix& z = in(n, 0);
        if (n.labels.size() != z.cols())
          shape_fail(n, std::to_string(n.labels.size()) + " labels for " + std::to_string(z.cols()) + " columns");
        double total = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) {
          const std::size_t y = n.labels[j];
          if (y >= z.rows())
            throw DataError("label " + std::to_string(y) + " outside class range [0, " + std::to_string(z.rows()) + ")");
          total += column_nll(z, j, y);
        }
        n.value = Matrix::scalar(total / static_cast<double>(z.cols()));
        return;
      }
      case Op::FrobeniusNormSq:
        n.value = Matrix::scalar(lilora::frobenius_norm_sq(in(n, 0)));
        return;
      case Op::FrobeniusCosine: {
        const Matrix& a = in(n, 0);
        const Matrix& b = in(n, 1);
        if (!a.same_shape(b)) shape_fail(n, "cosine of " + a.shape() + " and " + b.shape());
        const double na = lilora::frobenius_norm(a), nb = lilora::frobenius_norm(b);
        const double c = (na < kCosineNormFloor || nb < kCosineNormFloor) ? 0.0 : lilora::frobenius_inner(a, b) / (na * nb);
        n.value = Matrix::scalar(c);
        return;
      }
    }
  }

  static double column_nll(const Matrix& z, std::size_t j, std::size_t y) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.rows(); ++i) mx = std::max(mx, z(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) sum += std::exp(z(i, j) - mx);
    return std::log(sum) + mx - z(y, j);
  }

  void accumulate(std::size_t input_slot, const Node& n, const Matrix& g) {
    Node& src = nodes_[n.inputs[input_slot].index];
    if (!src.requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) src.grad[i] += g[i];
  }

  void propagate(const Node& n) {
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::MatMul:
        accumulate(0, n, lilora::matmul(g, transpose(in(n, 1))));
        accumulate(1, n, lilora::matmul(transpose(in(n, 0)), g));
        return;
      case Op::Add:
        accumulate(0, n, g);
        accumulate(1, n, g);
        return;
      case Op::Scale: {
        if (n.inputs.size() == 2) {
          accumulate(0, n, lilora::scale(g, in(n, 1)[0]));
          accumulate(1, n, Matrix::scalar(lilora::frobenius_inner(g, in(n, 0))));
        } else {
          accumulate(0, n, lilora::scale(g, n.constant));
        }
        return;
      }
      case Op::BiasAdd: {
        accumulate(0, n, g);
        Matrix gb(g.rows(), 1);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb[i] += g(i, j);
        accumulate(1, n, gb);
        return;
      }
      case Op::Relu: {
        // Subgradient 0 at the kink.
        Matrix gx = g;
        const Matrix& x = in(n, 0);
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (!(x[i] > 0.0)) gx[i] = 0.0;
        accumulate(0, n, gx);
        return;
      }
      case Op::Sigmoid: {
        Matrix gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= n.value[i] * (1.0 - n.value[i]);
        accumulate(0, n, gx);
        return;
      }
      case Op::SoftmaxCrossEntropy: {
        const Matrix& z = in(n, 0);
        const double upstream = g[0] / static_cast<double>(z.cols());
        Matrix gz(z.rows(), z.cols());
        for (std::size_t j = 0; j < z.cols(); ++j) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < z.rows(); ++i) mx = std::max(mx, z(i, j));
          double sum = 0.0;
          for (std::size_t i = 0; i < z.rows(); ++i) sum += std::exp(z(i, j) - mx);
          for (std::size_t i = 0; i < z.rows(); ++i) gz(i, j) = upstream * std::exp(z(i, j) - mx) / sum;
          gz(n.labels[j], j) -= upstream;
        }
        accumulate(0, n, gz);
        return;
      }
      case Op::FrobeniusNormSq:
        accumulate(0, n, lilora::scale(in(n, 0), 2.0 * g[0]));
        return;
      case Op::FrobeniusCosine: {
        const Matrix& a = in(n, 0);
        const Matrix& b = in(n, 1);
        const double na = lilora::frobenius_norm(a), nb = lilora::frobenius_norm(b);
        if (na < kCosineNormFloor || nb < kCosineNormFloor) return;
        const double c = n.value[0];
        // d cos / da = b / (|a||b|) - cos * a / |a|^2
        Matrix ga(a.rows(), a.cols()), gb(b.rows(), b.cols());
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] = g[0] * (b[i] / (na * nb) - c * a[i] / (na * na));
          gb[i] = g[0] * (a[i] / (na * nb) - c * b[i] / (nb * nb));
        }
        accumulate(0, n, ga);
        accumulate(1, n, gb);
        return;
      }
    }
  }

  std::vector<Node> nodes_;

  friend struct TapeInspector;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Flat indices of parameter entries whose +/-eps probe crossed a ReLU kink
  /// and were therefore checked at a nudged base point instead.
  std::vector<std::size_t> nudged;
};

/// Read-only view used by the gradient checker to inspect ReLU inputs.
struct TapeInspector {
  static std::vector<std::vector<bool>> relu_masks(const Tape& t) {
    std::vector<std::vector<bool>> out;
    for (const auto& n : t.nodes_) {
      if (n.op != Op::Relu) continue;
      const Matrix& x = t.nodes_[n.inputs[0].index].value;
      std::vector<bool> m(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0;
      out.push_back(std::move(m));
    }
    return out;
  }
};

/// Central-difference check of d(root)/d(param), entry by entry.
///
/// error = |analytic - cd| / (|analytic| + |cd| + 1e-12), maximized over
/// entries. If an entry's probe flips any ReLU mask, the entry is moved away
/// from the kink (steps of 4*eps, up to 8 tries in each direction), its
/// analytic gradient is recomputed there, and its index is reported in
/// `nudged`. The tape is restored before returning.
inline GradCheckResult grad_check(Tape& tape, NodeId root, NodeId param, double eps) {
  if (!(eps > 1e-8 && eps < 1e-3)) throw ContractError("grad_check: eps must lie in (1e-8, 1e-3)");
  if (!tape.trainable(param)) throw ContractError("grad_check: node '" + tape.name(param) + "' is not a parameter");

  const Matrix base = tape.value(param);
  tape.forward();
  tape.backward(root);
  const Matrix analytic = tape.grad(param);

  auto probe = [&](const Matrix& point, std::size_t i, double* cd, bool* crossed) {
    tape.set_value(param, point);
    tape.forward();
    const auto masks = TapeInspector::relu_masks(tape);
    Matrix p = point;
    p[i] += eps;
    tape.set_value(param, p);
    tape.forward();
    const double fp = tape.value(root)[0];
    const bool cp = TapeInspector::relu_masks(tape) != masks;
    p[i] = point[i] - eps;
    tape.set_value(param, p);
    tape.forward();
    const double fm = tape.value(root)[0];
    const bool cm = TapeInspector::relu_masks(tape) != masks;
    *cd = (fp - fm) / (2.0 * eps);
    *crossed = cp || cm;
  };

  GradCheckResult result;
  for (std::size_t i = 0; i < base.size(); ++i) {
    double cd = 0.0;
    bool crossed = false;
    probe(base, i, &cd, &crossed);
    double a = analytic[i];
    if (crossed) {
      result.nudged.push_back(i);
      bool resolved = false;
      for (int step = 1; step <= 8 && !resolved; ++step) {
        for (double dir : {1.0, -1.0}) {
          Matrix moved = base;
          moved[i] += dir * 4.0 * eps * step;
          probe(moved, i, &cd, &crossed);
          if (crossed) continue;
          tape.set_value(param, moved);
          tape.forward();
          tape.backward(root);
          a = tape.grad(param)[i];
          resolved = true;
          break;
        }
      }
    }
    const double err = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  tape.set_value(param, base);
  tape.forward();
  tape.backward(root);
  return result;
}

}  // namespace lilora::diff
