#include "cbnlab/normalization.hpp"

#include <cmath>
#include <string>

#include "cbnlab/error.hpp"

namespace cbnlab {
namespace {

struct Layout {
  std::size_t n, c, inner;  // inner = H*W (1 for rank-2 input)
};

Layout layout_of(const Tensor& x, std::size_t channels) {
  if ((x.rank() != 4 && x.rank() != 2) || x.dim(1) != channels) {
    throw ShapeError("norm layer with " + std::to_string(channels) +
                     " channels cannot take input " + shape_str(x.shape()));
  }
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  return {x.dim(0), x.dim(1), inner};
}

}  // namespace

NormLayerState NormLayerState::create(std::size_t channels, double epsilon,
                                      double momentum) {
  if (epsilon <= 0.0) throw ConfigError("norm epsilon must be positive");
  if (momentum < 0.0 || momentum > 1.0) {
    throw ConfigError("norm momentum must lie in [0,1]");
  }
  NormLayerState s;
  s.channels = channels;
  s.gamma = Tensor({channels}, 1.0);
  s.gamma.set_requires_grad(true);
  s.beta = Tensor({channels}, 0.0);
  s.beta.set_requires_grad(true);
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.epsilon = epsilon;
  s.momentum = momentum;
  return s;
}

Var normalize(Var x, const NormLayerState& state, Mode mode,
              BatchStats* stats) {
  const Tensor& in = x.value();
  const Layout l = layout_of(in, state.channels);
  const std::size_t count = l.n * l.inner;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("train-mode normalization needs at least 2 values per "
                     "channel, got " + std::to_string(count));
  }

  std::vector<double> mean(l.c), var(l.c);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < l.c; ++c) {
      // shifted by the first value so a constant channel has mean exactly c
      const double shift = in[c * l.inner];
      double s = 0.0;
      for (std::size_t n = 0; n < l.n; ++n) {
        const double* p = in.data().data() + (n * l.c + c) * l.inner;
        for (std::size_t k = 0; k < l.inner; ++k) s += p[k] - shift;
      }
      const double mu = shift + s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < l.n; ++n) {
        const double* p = in.data().data() + (n * l.c + c) * l.inner;
        for (std::size_t k = 0; k < l.inner; ++k) {
          const double d = p[k] - mu;
          ss += d * d;
        }
      }
      mean[c] = mu;
      var[c] = ss / static_cast<double>(count);
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<double> inv_std(l.c);
  for (std::size_t c = 0; c < l.c; ++c) {
    inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);
  }
  Tensor out(in.shape());
  for (std::size_t n = 0; n < l.n; ++n) {
    for (std::size_t c = 0; c < l.c; ++c) {
      const std::size_t off = (n * l.c + c) * l.inner;
      for (std::size_t k = 0; k < l.inner; ++k) {
        out[off + k] = (in[off + k] - mean[c]) * inv_std[c];
      }
    }
  }
  if (stats) *stats = BatchStats{mean, var};

  const std::size_t xi = x.id();
  const std::size_t self = x.tape().size();
  const bool train = mode == Mode::train;
  return x.tape().record(
      train ? "batch_norm_train" : "batch_norm_eval", std::move(out), {xi},
      [xi, self, l, train, inv_std = std::move(inv_std)](Tape& t,
                                                    std::span<const double> g) {
        auto gx = t.input_grad(xi);
        if (gx.empty()) return;
        if (!train) {
          for (std::size_t n = 0; n < l.n; ++n) {
            for (std::size_t c = 0; c < l.c; ++c) {
              const std::size_t off = (n * l.c + c) * l.inner;
              for (std::size_t k = 0; k < l.inner; ++k) {
                gx[off + k] += g[off + k] * inv_std[c];
              }
            }
          }
          return;
        }
        // Gradient through the batch mean and variance.
        const auto& xh = t.value(self).storage();
        const double m = static_cast<double>(l.n * l.inner);
        for (std::size_t c = 0; c < l.c; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < l.n; ++n) {
            const std::size_t off = (n * l.c + c) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) {
              sum_g += g[off + k];
              sum_gx += g[off + k] * xh[off + k];
            }
          }
          const double s = inv_std[c] / m;
          for (std::size_t n = 0; n < l.n; ++n) {
            const std::size_t off = (n * l.c + c) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) {
              gx[off + k] += s * (m * g[off + k] - sum_g - xh[off + k] * sum_gx);
            }
          }
        }
      });
}

Var channel_affine(Var x_hat, Var gamma, Var beta, const CondDeltas* deltas) {
  const Tensor& in = x_hat.value();
  const std::size_t channels = gamma.value().size();
  const Layout l = layout_of(in, channels);
  if (beta.value().size() != channels) {
    throw ShapeError("channel_affine: gamma/beta length mismatch");
  }
  std::vector<std::size_t> inputs{x_hat.id(), gamma.id(), beta.id()};
  if (deltas) {
    const Shape want{l.n, l.c};
    if (!deltas->delta_gamma.valid() || !deltas->delta_beta.valid() ||
        deltas->delta_gamma.shape() != want ||
        deltas->delta_beta.shape() != want) {
      throw ShapeError("conditional deltas must have shape " +
                       shape_str(want));
    }
    if (deltas->bypass.size() != l.n) {
      throw ShapeError("bypass flags must have one entry per sample");
    }
    inputs.push_back(deltas->delta_gamma.id());
    inputs.push_back(deltas->delta_beta.id());
  }

  // Effective per-sample affine parameters.
  std::vector<double> geff(l.n * l.c), beff(l.n * l.c);
  std::vector<std::uint8_t> conditioned(l.n, 0);
  const auto& gv = gamma.value().storage();
  const auto& bv = beta.value().storage();
  for (std::size_t n = 0; n < l.n; ++n) {
    conditioned[n] = deltas && !deltas->bypass[n];
    for (std::size_t c = 0; c < l.c; ++c) {
      if (conditioned[n]) {
        geff[n * l.c + c] = gv[c] + deltas->delta_gamma.value()[n * l.c + c];
        beff[n * l.c + c] = bv[c] + deltas->delta_beta.value()[n * l.c + c];
      } else {
        geff[n * l.c + c] = gv[c];
        beff[n * l.c + c] = bv[c];
      }
    }
  }

  Tensor out(in.shape());
  for (std::size_t n = 0; n < l.n; ++n) {
    for (std::size_t c = 0; c < l.c; ++c) {
      const std::size_t off = (n * l.c + c) * l.inner;
      const double g = geff[n * l.c + c], b = beff[n * l.c + c];
      for (std::size_t k = 0; k < l.inner; ++k) {
        out[off + k] = in[off + k] * g + b;
      }
    }
  }

  const bool has_deltas = deltas != nullptr;
  const std::vector<std::size_t> ids = inputs;
  return x_hat.tape().record(
      has_deltas ? "cbn_affine" : "bn_affine", std::move(out),
      std::move(inputs),
      [l, ids, geff = std::move(geff), conditioned = std::move(conditioned)](
          Tape& t, std::span<const double> g) {
        const auto& xh = t.value(ids[0]).storage();
        auto gx = t.input_grad(ids[0]);
        auto ggamma = t.input_grad(ids[1]);
        auto gbeta = t.input_grad(ids[2]);
        std::span<double> gdg, gdb;
        if (ids.size() == 5) {
          gdg = t.input_grad(ids[3]);
          gdb = t.input_grad(ids[4]);
        }
        for (std::size_t n = 0; n < l.n; ++n) {
          for (std::size_t c = 0; c < l.c; ++c) {
            const std::size_t off = (n * l.c + c) * l.inner;
            const double ge = geff[n * l.c + c];
            double sg = 0.0, sgx = 0.0;
            for (std::size_t k = 0; k < l.inner; ++k) {
              sg += g[off + k];
              sgx += g[off + k] * xh[off + k];
              if (!gx.empty()) gx[off + k] += g[off + k] * ge;
            }
            if (!ggamma.empty()) ggamma[c] += sgx;
            if (!gbeta.empty()) gbeta[c] += sg;
            if (conditioned[n]) {
              if (!gdg.empty()) gdg[n * l.c + c] += sgx;
              if (!gdb.empty()) gdb[n * l.c + c] += sg;
            }
          }
        }
      });
}

Var bn_forward(Var x, NormLayerState& state, Mode mode) {
  BatchStats stats;
  Var x_hat = normalize(x, state, mode, &stats);
  Tape& tape = x.tape();
  Var out = channel_affine(x_hat, tape.param(state.gamma, "gamma"),
                           tape.param(state.beta, "beta"), nullptr);
  if (mode == Mode::train) update_running_stats(state, stats.mean, stats.var);
  return out;
}

Var cbn_forward(Var x, NormLayerState& state, const CondDeltas& deltas,
                Mode mode) {
  BatchStats stats;
  Var x_hat = normalize(x, state, mode, &stats);
  Tape& tape = x.tape();
  Var out = channel_affine(x_hat, tape.param(state.gamma, "gamma"),
                           tape.param(state.beta, "beta"), &deltas);
  if (mode == Mode::train) update_running_stats(state, stats.mean, stats.var);
  return out;
}

void update_running_stats(NormLayerState& state,
                          std::span<const double> batch_mean,
                          std::span<const double> batch_var) {
  if (batch_mean.size() != state.channels ||
      batch_var.size() != state.channels) {
    throw ShapeError("running statistics update: channel count mismatch");
  }
  for (double v : batch_var) {
    if (!(v >= 0.0)) throw NumericError("negative batch variance");
  }
  const double m = state.momentum;
  for (std::size_t c = 0; c < state.channels; ++c) {
    state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * batch_mean[c];
    state.running_var[c] = (1.0 - m) * state.running_var[c] + m * batch_var[c];
  }
}

}  // namespace cbnlab
