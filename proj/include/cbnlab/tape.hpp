#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cbnlab/tensor.hpp"

namespace cbnlab {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive and has not been reset.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardReport {
  // Bound parameters that the loss does not depend on; their grads stay zero.
  std::vector<std::string> disconnected;
};

// Reverse-mode tape: ops append nodes in execution order, backward() replays
// them in reverse. Nodes are immutable once recorded.
class Tape {
 public:
  // Receives the output gradient; accumulates into inputs via input_grad().
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, std::string label = "constant");
  // Local leaf that receives a gradient (read back with grad()).
  Var input(Tensor value, std::string label = "input");
  // Leaf bound to an external parameter; backward() accumulates into
  // param.grad() when param.requires_grad() is set.
  Var param(Tensor& param, std::string label = "param");

  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs,
             BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  // Gradient of the last backward() loss w.r.t. v; empty if none reached it.
  std::span<const double> grad(Var v) const { return nodes_.at(v.id()).grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  // Accumulation buffer for an input of the node currently being replayed.
  // Empty when that input does not need a gradient.
  std::span<double> input_grad(std::size_t id);

  // Seeds d(loss)/d(loss) = 1 and replays the tape. Throws on a second call
  // without reset().
  BackwardReport backward(Var loss);
  BackwardReport backward(Var output, std::span<const double> seed);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_.at(id).inputs;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool needs_grad = false;
    bool reached = false;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace cbnlab
