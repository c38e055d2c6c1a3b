#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cbnlab/tape.hpp"
#include "cbnlab/tensor.hpp"

namespace cbnlab {

enum class Mode { train, eval };

// Per-channel affine parameters and running statistics of one norm layer.
struct NormLayerState {
  std::size_t channels = 0;
  Tensor gamma;  // [C], init 1
  Tensor beta;   // [C], init 0
  std::vector<double> running_mean;  // init 0
  std::vector<double> running_var;   // init 1
  double epsilon = 1e-5;
  double momentum = 0.1;

  static NormLayerState create(std::size_t channels, double epsilon = 1e-5,
                               double momentum = 0.1);
};

// Per-sample affine offsets for one conditioned layer. Samples flagged in
// `bypass` use the layer's own gamma/beta unchanged.
struct CondDeltas {
  Var delta_gamma;  // [N,C]
  Var delta_beta;   // [N,C]
  std::vector<std::uint8_t> bypass;  // [N]
};

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // population variance
};

// x_hat = (x - mu) / sqrt(var + eps) over (N,H,W) per channel for rank-4
// input, over N per feature for rank-2 input. Train mode uses batch
// statistics (returned via `stats`), eval mode the running estimates.
Var normalize(Var x, const NormLayerState& state, Mode mode,
              BatchStats* stats = nullptr);

// y = x_hat * g[n,c] + b[n,c] with g = gamma (+ delta_gamma unless bypassed),
// b likewise. `deltas` may be null.
Var channel_affine(Var x_hat, Var gamma, Var beta, const CondDeltas* deltas);

// Batch normalization. Train mode also folds the batch statistics into the
// running estimates.
Var bn_forward(Var x, NormLayerState& state, Mode mode);

// Conditional batch normalization: gamma_hat = gamma + delta_gamma,
// beta_hat = beta + delta_beta per sample.
Var cbn_forward(Var x, NormLayerState& state, const CondDeltas& deltas,
                Mode mode);

// running <- (1 - momentum) * running + momentum * batch.
void update_running_stats(NormLayerState& state,
                          std::span<const double> batch_mean,
                          std::span<const double> batch_var);

}  // namespace cbnlab
