#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "attnfd/tensor.hpp"

namespace attnfd {

class Tape;

/// Trainable quantity: value plus an additively accumulated gradient buffer.
/// Lives outside any tape; leaves bound to it write straight into `grad`.
struct Param {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    for (int64_t i = 0; i < grad.size(); ++i) grad[i] = 0;
  }
};

/// Handle to either a tape node or a free constant. Ops whose inputs are all
/// constants fold to a constant result and record nothing, so a frozen
/// subgraph (the teacher) costs no tape nodes and no gradient memory.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor v) {
    Var r;
    r.cval_ = std::make_shared<const Tensor>(std::move(v));
    return r;
  }

  bool valid() const { return cval_ != nullptr || tape_ != nullptr; }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  const Tensor& value() const;

  /// Gradient of the most recent backward pass (leaf gradients persist and
  /// accumulate across passes). Zero tensor if this var never received one.
  const Tensor& grad() const;

 private:
  friend class Tape;
  Tape* tape_ = nullptr;
  int id_ = -1;
  std::shared_ptr<const Tensor> cval_;
};

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated; persists across backward calls for leaves
    bool leaf = false;
    Param* bound = nullptr;
    std::vector<Var> inputs;
    std::function<void(Tape&, const Node&)> backward;
  };

  /// Tracked leaf with its own gradient buffer.
  Var leaf(Tensor v) {
    Node n;
    n.value = std::move(v);
    n.leaf = true;
    return push(std::move(n));
  }

  /// Leaf bound to a parameter; gradient accumulates into p.grad. A frozen
  /// parameter enters the graph as a plain constant instead.
  Var leaf(Param& p) {
    if (!p.trainable) return Var::constant(p.value);
    Node n;
    n.value = p.value;
    n.leaf = true;
    n.bound = &p;
    return push(std::move(n));
  }

  Var record(Tensor value, std::vector<Var> inputs,
             std::function<void(Tape&, const Node&)> backward) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  const Tensor& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.bound) return n.bound->grad;
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool wants(const Var& v) const { return v.tracked(); }

  /// Adds a gradient contribution to a var; no-op for constants.
  void accumulate(const Var& v, const Tensor& g) {
    if (!v.tracked()) return;
    if (v.tape_ != this) throw ContractError("gradient routed to a foreign tape");
    Node& n = nodes_[static_cast<std::size_t>(v.id_)];
    Tensor& dst = n.bound ? n.bound->grad : n.grad;
    if (dst.size() == 0) dst = Tensor(n.value.shape());
    if (!dst.same_shape(g)) throw DimensionError("gradient shape mismatch");
    real* d = dst.data();
    const real* s = g.data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] += s[i];
  }

  /// Reverse sweep from a scalar loss. Internal node gradients are scratch
  /// and reset per sweep; leaf gradients accumulate additively.
  void backward(const Var& loss) {
    if (!loss.tracked() || loss.tape_ != this)
      throw ContractError("backward: loss is not a node of this tape");
    if (loss.value().size() != 1) throw ContractError("backward: loss must be scalar");
    for (Node& n : nodes_)
      if (!n.leaf) n.grad = Tensor();
    accumulate(loss, Tensor::full(loss.value().shape(), real(1)));
    for (int i = loss.id_; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward) continue;
      if (n.grad.size() == 0) continue;  // not reachable from the loss
      n.backward(*this, n);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    Var v;
    v.tape_ = this;
    v.id_ = static_cast<int>(nodes_.size()) - 1;
    return v;
  }

  std::deque<Node> nodes_;  // deque: stable element addresses as the tape grows
};

inline const Tensor& Var::value() const {
  if (cval_) return *cval_;
  if (!tape_) throw ContractError("value() on an empty var");
  return tape_->value(id_);
}

inline const Tensor& Var::grad() const {
  if (!tape_) throw ContractError("grad() on an untracked var");
  return tape_->grad(id_);
}

/// Binds a parameter for a forward pass: a tape leaf when training it,
/// otherwise a folded constant.
inline Var use_param(Tape* t, Param& p) {
  if (!t || !p.trainable) return Var::constant(p.value);
  return t->leaf(p);
}

/// The single tape shared by the tracked vars among `vs` (nullptr when all
/// are constants). Mixing tapes is a usage error.
inline Tape* common_tape(std::initializer_list<const Var*> vs) {
  Tape* t = nullptr;
  for (const Var* v : vs) {
    if (!v->tracked()) continue;
    if (t && t != v->tape()) throw ContractError("op inputs belong to different tapes");
    t = v->tape();
  }
  return t;
}

}  // namespace attnfd
