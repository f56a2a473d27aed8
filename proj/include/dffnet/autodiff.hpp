#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dffnet/tensor.hpp"

namespace dffnet {

using NodeId = std::size_t;

/// Raised for malformed graphs: unknown nodes, non-scalar roots, missing rules.
class GraphError : public Error {
 public:
  using Error::Error;
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

/// Eager reverse-mode tape.
///
/// Every op computes its value immediately and records a vector-Jacobian
/// rule. Nodes are appended in creation order, which is a topological order
/// because an op can only reference nodes that already exist.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool record_backward = true) : recording_(record_backward) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  /// Differentiable input (parameter or gradcheck variable).
  Var<T> leaf(Tensor<T> value, std::string name) {
    return push(Node{"leaf", std::move(name), {}, std::move(value), std::nullopt, nullptr, true, recording_});
  }

  /// Non-differentiable input (data, labels).
  Var<T> constant(Tensor<T> value, std::string name = "const") {
    return push(Node{"const", std::move(name), {}, std::move(value), std::nullopt, nullptr, true, false});
  }

  /// Appends an op result. `backward` may be empty only for ops whose inputs
  /// need no gradient; reaching such a node during backpropagation is an error.
  Var<T> record(std::string op, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto in : inputs) {
      check_id(in);
      needs = needs || nodes_[in].requires_grad;
    }
    needs = needs && recording_;
    return push(Node{std::move(op), {}, std::move(inputs), std::move(value), std::nullopt,
                     needs ? std::move(backward) : BackwardFn{}, false, needs});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  NodeId next_id() const noexcept { return nodes_.size(); }

  const Tensor<T>& value(NodeId id) const { return node(id).value; }
  const std::string& op(NodeId id) const { return node(id).op; }
  const std::string& name(NodeId id) const { return node(id).name; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
  bool is_leaf(NodeId id) const { return node(id).leaf; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }

  const Tensor<T>* grad(NodeId id) const {
    const auto& g = node(id).grad;
    return g ? &*g : nullptr;
  }

  /// Adds `g` into the gradient buffer of `id`; no-op for nodes that need none.
  void accumulate(NodeId id, Tensor<T> g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient for node #" + std::to_string(id) + " (" + n.op + ") has shape " +
                       shape_str(g.shape()) + ", value has " + shape_str(n.value.shape()));
    }
    if (!n.grad) {
      n.grad = std::move(g);
    } else {
      *n.grad += g;
    }
  }

  void zero_grads() {
    for (auto& n : nodes_) n.grad.reset();
  }

  /// Discrete decisions of non-smooth ops (relu masks, argmax positions) are
  /// folded into this signature so a gradient checker can tell when a
  /// perturbation crossed a kink.
  void note_kink(std::uint64_t h) { kink_ = (kink_ ^ h) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL; }
  std::uint64_t kink_signature() const noexcept { return kink_; }

  std::vector<NodeId> leaves() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].leaf && nodes_[i].requires_grad) out.push_back(i);
    }
    return out;
  }

  /// Runs every recorded rule from `root` back to the leaves.
  void backward(NodeId root) {
    check_id(root);
    const Node& r = nodes_[root];
    if (r.value.numel() != 1) {
      throw GraphError("backpropagation root #" + std::to_string(root) + " (" + r.op + ") is not scalar: " +
                       shape_str(r.value.shape()));
    }
    if (!recording_) throw GraphError("tape was created without backward recording");
    zero_grads();
    if (!r.requires_grad) return;
    nodes_[root].grad = Tensor<T>(r.value.shape(), T{1});
    for (NodeId i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.leaf || !n.grad) continue;
      if (!n.backward) {
        throw GraphError("no backward rule for node #" + std::to_string(i) + " (" + n.op + ")");
      }
      // Intermediate gradients are released once their rule has run.
      Tensor<T> g = std::move(*n.grad);
      n.grad.reset();
      n.backward(*this, g);
    }
  }

  [[noreturn]] void fail(const std::string& op, const std::string& msg) const {
    throw ShapeError("node #" + std::to_string(nodes_.size()) + " (" + op + "): " + msg);
  }

 private:
  struct Node {
    std::string op;
    std::string name;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    BackwardFn backward;
    bool leaf;
    bool requires_grad;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) {
      throw GraphError("unknown node id #" + std::to_string(id) + " (tape has " + std::to_string(nodes_.size()) +
                       " nodes)");
    }
  }
  Node& node(NodeId id) {
    check_id(id);
    return nodes_[id];
  }
  const Node& node(NodeId id) const {
    check_id(id);
    return nodes_[id];
  }

  std::vector<Node> nodes_;
  bool recording_;
  std::uint64_t kink_ = 0;
};

/// Forward value of `root`.
template <class T>
const Tensor<T>& evaluate(const Tape<T>& tape, NodeId root) {
  return tape.value(root);
}

/// Gradient of a scalar `root` with respect to every differentiable leaf.
/// Leaves the root does not depend on receive zeros.
template <class T>
std::map<NodeId, Tensor<T>> backpropagate(Tape<T>& tape, NodeId root) {
  tape.backward(root);
  std::map<NodeId, Tensor<T>> out;
  for (NodeId id : tape.leaves()) {
    const Tensor<T>* g = tape.grad(id);
    out.emplace(id, g ? *g : Tensor<T>(tape.value(id).shape(), T{0}));
  }
  return out;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
/// With `relative_step`, coordinate i uses h * max(1, |x_i|).
template <class T>
Tensor<T> finite_difference_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h,
                                 bool relative_step = false) {
  if (!(h > 0)) throw Error("finite_difference_grad: step must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T hi = relative_step ? h * std::max(T{1}, std::abs(x[i])) : h;
    probe[i] = x[i] + hi;
    const T fp = f(probe);
    probe[i] = x[i] - hi;
    const T fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_grad: non-finite function value at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2 * hi);
  }
  return g;
}

struct LeafReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<LeafReport> leaves;
  double tolerance = 0.0;
  bool pass = true;

  double max_rel_error() const {
    double m = 0;
    for (const auto& l : leaves) m = std::max(m, l.max_rel_error);
    return m;
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& l : leaves) {
      if (!l.pass) out.push_back(l.name);
    }
    return out;
  }
};

/// Named starting values for the differentiable inputs of a gradient check.
template <class T>
using LeafValues = std::vector<std::pair<std::string, Tensor<T>>>;

/// Builds a scalar graph on `tape` from the given leaf handles.
template <class T>
using GraphBuilder = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-6;  // times max(1, |x_i|)
};

namespace detail {

template <class T>
T evaluate(const GraphBuilder<T>& build, const LeafValues<T>& vals, bool with_grad, std::vector<Tensor<T>>* grads,
           std::uint64_t* sig) {
  Tape<T> tape(with_grad);
  std::vector<Var<T>> leaves;
  leaves.reserve(vals.size());
  for (const auto& [name, v] : vals) leaves.push_back(tape.leaf(v, name));
  Var<T> root = build(tape, leaves);
  const T loss = tape.value(root.id).item();
  if (sig) *sig = tape.kink_signature();
  if (grads) {
    auto g = backpropagate(tape, root.id);
    grads->clear();
    for (const auto& l : leaves) grads->push_back(g.at(l.id));
  }
  return loss;
}

}  // namespace detail

/// Compares reverse-mode gradients of `build` with central finite differences
/// of `oracle`, the same graph evaluated in scalar type F. A wider F keeps the
/// difference quotient clear of roundoff when a true gradient is small.
///
/// The graph is rebuilt for every perturbed evaluation. A coordinate whose
/// perturbation changes the tape's kink signature (a relu mask flips, an
/// argmax moves) is skipped: finite differences are meaningless across a kink.
/// Relative error is |g_ad - g_fd| / max(|g_fd|, 1e-8).
template <class T, class F>
GradcheckReport check_gradients(const GraphBuilder<T>& build, const GraphBuilder<F>& oracle, const LeafValues<T>& init,
                                const GradcheckOptions& opt = {}) {
  GradcheckReport report;
  report.tolerance = opt.tolerance;
  std::vector<Tensor<T>> analytic;
  detail::evaluate<T>(build, init, true, &analytic, nullptr);

  LeafValues<F> base;
  for (const auto& [name, v] : init) {
    Tensor<F> w(v.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) w[i] = static_cast<F>(v[i]);
    base.emplace_back(name, std::move(w));
  }
  std::uint64_t base_sig = 0;
  detail::evaluate<F>(oracle, base, false, nullptr, &base_sig);

  LeafValues<F> probe = base;
  for (std::size_t li = 0; li < init.size(); ++li) {
    LeafReport lr;
    lr.name = init[li].first;
    Tensor<F>& x = probe[li].second;
    const Tensor<F>& x0 = base[li].second;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const F h = static_cast<F>(opt.step) * std::max(F{1}, std::abs(x0[i]));
      std::uint64_t sp = 0, sm = 0;
      x[i] = x0[i] + h;
      const F fp = detail::evaluate<F>(oracle, probe, false, nullptr, &sp);
      x[i] = x0[i] - h;
      const F fm = detail::evaluate<F>(oracle, probe, false, nullptr, &sm);
      x[i] = x0[i];
      if (sp != base_sig || sm != base_sig) {
        ++lr.skipped;
        continue;
      }
      ++lr.checked;
      const double fd = static_cast<double>((fp - fm) / (F{2} * h));
      const double ad = static_cast<double>(analytic[li][i]);
      double rel = std::abs(ad - fd) / std::max(std::abs(fd), 1e-8);
      if (!std::isfinite(rel)) rel = std::numeric_limits<double>::infinity();
      if (rel > lr.max_rel_error) {
        lr.max_rel_error = rel;
        lr.worst_index = i;
      }
    }
    lr.pass = lr.max_rel_error <= opt.tolerance;
    report.pass = report.pass && lr.pass;
    report.leaves.push_back(std::move(lr));
  }
  return report;
}

/// Same-precision check: the oracle is `build` itself.
template <class T>
GradcheckReport check_gradients(const GraphBuilder<T>& build, const LeafValues<T>& init,
                                const GradcheckOptions& opt = {}) {
  return check_gradients<T, T>(build, build, init, opt);
}

}  // namespace dffnet
