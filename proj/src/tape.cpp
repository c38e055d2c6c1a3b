#include "cbnlab/tape.hpp"

#include <algorithm>

#include "cbnlab/error.hpp"

namespace cbnlab {

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Tensor value, std::string label) {
  Node node;
  node.op = std::move(label);
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(Tensor value, std::string label) {
  Node node;
  node.op = std::move(label);
  node.value = std::move(value);
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Tensor& param, std::string label) {
  Node node;
  node.op = std::move(label);
  node.value = Tensor(param.shape(), param.storage());
  node.bound = &param;
  node.needs_grad = param.requires_grad();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<std::size_t> inputs,
                 BackwardFn backward) {
  if (backward_done_) {
    throw TapeError("cannot record '" + op + "' after backward without reset");
  }
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by op '" + op + "' " +
                       shape_str(value.shape()));
  }
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  node.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](auto id) {
    return nodes_.at(id).needs_grad;
  });
  node.inputs = std::move(inputs);
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::input_grad(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.needs_grad) return {};
  if (node.grad.size() != node.value.size()) {
    node.grad.assign(node.value.size(), 0.0);
  }
  node.reached = true;
  return node.grad;
}

BackwardReport Tape::backward(Var loss) {
  if (loss.valid() && value(loss).size() != 1) {
    throw TapeError("backward requires a scalar loss, got shape " +
                    shape_str(value(loss).shape()));
  }
  const double one = 1.0;
  return backward(loss, std::span<const double>(&one, 1));
}

BackwardReport Tape::backward(Var output, std::span<const double> seed) {
  if (!output.valid() || &output.tape() != this) {
    throw TapeError("backward called with a variable from another tape");
  }
  if (backward_done_) {
    throw TapeError("backward already ran on this tape; call reset() first");
  }
  backward_done_ = true;
  auto out = input_grad(output.id());
  if (seed.size() != value(output).size()) {
    throw TapeError("backward seed length does not match output");
  }
  if (!out.empty()) std::copy(seed.begin(), seed.end(), out.begin());

  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.reached || !node.backward) continue;
    // The callback may grow other nodes' grad buffers, never this node's.
    std::span<const double> g = node.grad;
    node.backward(*this, g);
  }

  BackwardReport report;
  for (Node& node : nodes_) {
    if (!node.bound || !node.needs_grad) continue;
    auto dst = node.bound->ensure_grad();
    if (!node.reached) {
      report.disconnected.push_back(node.op);
      continue;
    }
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += node.grad[k];
  }
  return report;
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

}  // namespace cbnlab
