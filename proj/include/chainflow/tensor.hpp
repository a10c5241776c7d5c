#pragma once

// Reverse-mode differentiation over dense row-major Eigen matrices.
//
// A BasicGraph is a tape: nodes are appended in creation order, so the tape
// order is already a topological order and backward is a single reverse sweep.
// Parameters live outside the graph; backward() returns their gradients as a
// GradientMap so independent graphs can be evaluated concurrently and reduced
// afterwards.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace chainflow {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Mat<double>;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Named trainable array. Rank-1 parameters are stored as 1xN rows.
template <typename Scalar>
struct BasicParameter {
  std::string name;
  std::vector<Index> shape;
  Mat<Scalar> value;

  BasicParameter() = default;
  BasicParameter(std::string n, Mat<Scalar> v, int rank = 2)
      : name(std::move(n)), value(std::move(v)) {
    if (rank == 1) {
      if (value.rows() != 1) throw ShapeError("rank-1 parameter '" + name + "' must be a single row");
      shape = {value.cols()};
    } else {
      shape = {value.rows(), value.cols()};
    }
  }
  Index size() const { return value.size(); }
};

/// Gradients keyed by parameter name. Ordered so that reductions and norms
/// are evaluated in a fixed order.
template <typename Scalar>
class BasicGradientMap {
 public:
  using Matrix = Mat<Scalar>;

  void accumulate(const std::string& name, const Matrix& g) {
    auto it = grads_.find(name);
    if (it == grads_.end()) {
      grads_.emplace(name, g);
    } else {
      if (it->second.rows() != g.rows() || it->second.cols() != g.cols())
        throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g) + ", expected " +
                         shape_string(it->second));
      it->second += g;
    }
  }

  void accumulate(const BasicGradientMap& other) {
    for (const auto& [name, g] : other.grads_) accumulate(name, g);
  }

  void zero() { grads_.clear(); }
  bool empty() const { return grads_.empty(); }
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }

  const Matrix& at(const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw std::out_of_range("no gradient for '" + name + "'");
    return it->second;
  }
  Matrix& at(const std::string& name) { return grads_.at(name); }

  void scale(Scalar s) {
    for (auto& [_, g] : grads_) g *= s;
  }

  /// L2 norm over every entry whose name starts with `prefix`.
  Scalar norm(const std::string& prefix = "") const {
    Scalar sq = 0;
    for (const auto& [name, g] : grads_)
      if (name.compare(0, prefix.size(), prefix) == 0) sq += g.squaredNorm();
    return std::sqrt(sq);
  }

  void erase_prefix(const std::string& prefix) {
    std::erase_if(grads_, [&](const auto& kv) { return kv.first.compare(0, prefix.size(), prefix) == 0; });
  }

  bool all_finite() const {
    for (const auto& [_, g] : grads_)
      if (!g.allFinite()) return false;
    return true;
  }

  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<std::string, Matrix> grads_;
};

template <typename Scalar>
class BasicGraph;

/// Handle to a node on a graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class BasicVar {
 public:
  using Matrix = Mat<Scalar>;

  BasicVar() = default;
  BasicVar(BasicGraph<Scalar>* g, int id) : graph_(g), id_(id) {}

  const Matrix& value() const { return graph_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  int id() const { return id_; }
  BasicGraph<Scalar>& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  Scalar item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_string(rows(), cols()));
    return value()(0, 0);
  }

 private:
  BasicGraph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class BasicGraph {
 public:
  using Matrix = Mat<Scalar>;
  using Var = BasicVar<Scalar>;
  using Parameter = BasicParameter<Scalar>;
  using GradientMap = BasicGradientMap<Scalar>;
  /// Receives the gradient flowing into the node's output; distributes it to
  /// the node's inputs through accumulate().
  using BackwardFn = std::function<void(BasicGraph&, const Matrix&)>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  /// With gradients disabled, parameter() yields constants and no backward
  /// closures are recorded.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix v) { return push(std::move(v), false, {}, nullptr); }

  /// Leaf that requires grad; its gradient is readable through grad() after backward.
  Var variable(Matrix v) { return push(std::move(v), grad_enabled_, {}, nullptr); }

  Var parameter(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(p.value, grad_enabled_, {}, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Appends an op node. The backward rule is kept only when some input requires grad.
  Var record(Matrix value, std::vector<int> inputs, BackwardFn fn) {
    bool rg = false;
    for (int i : inputs) rg = rg || nodes_[i].requires_grad;
    rg = rg && grad_enabled_;
    return push(std::move(value), rg, std::move(inputs), rg ? std::move(fn) : BackwardFn{});
  }

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw ShapeError("backward produced gradient " + shape_string(g) + " for node of shape " +
                       shape_string(n.value));
    // Gradients never alias node values, so products can accumulate in place.
    if (!n.has_grad) {
      n.grad.resize(n.value.rows(), n.value.cols());
      n.grad.noalias() = g;
      n.has_grad = true;
    } else {
      n.grad.noalias() += g;
    }
  }

  /// Adds `g` into the sub-block of node `id`'s gradient starting at (row, col).
  template <typename Derived>
  void accumulate_block(int id, Index row, Index col, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

  bool has_grad(const Var& v) const { return nodes_[v.id()].has_grad; }
  const Matrix& grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (!n.has_grad) throw std::logic_error("node has no gradient; call backward() first");
    return n.grad;
  }

  /// Resets every node gradient. backward() calls this itself.
  void zero_grad() {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
  }

  /// Propagates d(loss)/d(node) through the tape. Returns parameter gradients;
  /// leaf variables keep theirs on the graph. A consumer-less path contributes nothing.
  GradientMap backward(const Var& loss) {
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("backward() needs a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
    zero_grad();
    GradientMap out;
    if (!nodes_[loss.id()].requires_grad) return out;
    accumulate(loss.id(), Matrix::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) out.accumulate(n.param->name, n.grad);
    }
    return out;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const Parameter* param = nullptr;
  };

  Var push(Matrix v, bool rg, std::vector<int> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  // deque keeps node references stable while ops append during backward closures.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool grad_enabled_ = true;
};

using Graph = BasicGraph<double>;
using Var = BasicVar<double>;
using Parameter = BasicParameter<double>;
using GradientMap = BasicGradientMap<double>;

}  // namespace chainflow
