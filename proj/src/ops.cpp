#include "cbnlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cbnlab/error.hpp"

namespace cbnlab {
namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw TapeError(std::string(op) + ": operands must live on one tape");
  }
}

void require_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " +
                     shape_str(a) + " and " + shape_str(b));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, oh, ow;
  int stride, pad;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& k, int stride,
                           int pad) {
  require_shape(x.size() == 4 && k.size() == 4 && x[1] == k[1], "conv2d", x,
                k);
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1");
  const long ph = static_cast<long>(x[2]) + 2L * pad;
  const long pw = static_cast<long>(x[3]) + 2L * pad;
  if (static_cast<long>(k[2]) > ph || static_cast<long>(k[3]) > pw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  if ((ph - static_cast<long>(k[2])) % stride != 0 ||
      (pw - static_cast<long>(k[3])) % stride != 0) {
    throw ShapeError("conv2d: output extent is not exact for stride " +
                     std::to_string(stride));
  }
  return {x[0],
          x[1],
          x[2],
          x[3],
          k[0],
          k[2],
          k[3],
          static_cast<std::size_t>((ph - static_cast<long>(k[2])) / stride + 1),
          static_cast<std::size_t>((pw - static_cast<long>(k[3])) / stride + 1),
          stride,
          pad};
}

// Valid output-column range [lo, hi) for kernel column kx.
inline void col_range(const ConvGeometry& g, std::size_t kx, std::size_t& lo,
                      std::size_t& hi) {
  const long off = static_cast<long>(kx) - g.pad;
  long first = 0;
  if (off < 0) first = (-off + g.stride - 1) / g.stride;
  long last = (static_cast<long>(g.w) - 1 - off);
  last = last < 0 ? -1 : last / g.stride;
  lo = static_cast<std::size_t>(std::max(first, 0L));
  hi = static_cast<std::size_t>(
      std::clamp(last + 1, 0L, static_cast<long>(g.ow)));
  if (hi < lo) hi = lo;
}

}  // namespace

namespace {

// Unrolls one sample's receptive fields into col[(c*kh+ky)*kw+kx][oy*ow+ox].
void im2col(const ConvGeometry& g, const double* plane, double* col) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* ip = plane + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        col_range(g, kx, lo, hi);
        const long base = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          double* r = row + oy * g.ow;
          const long iy =
              static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(r, r + g.ow, 0.0);
            continue;
          }
          const double* irow = ip + iy * g.w;
          std::fill(r, r + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) {
            r[ox] = irow[static_cast<long>(ox) * g.stride + base];
          }
          std::fill(r + hi, r + g.ow, 0.0);
        }
      }
    }
  }
}

// Scatter-adds col back into an input-gradient plane.
void col2im(const ConvGeometry& g, const double* col, double* plane) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* ip = plane + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        std::size_t lo, hi;
        col_range(g, kx, lo, hi);
        const long base = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy =
              static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* irow = ip + iy * g.w;
          const double* r = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) {
            irow[static_cast<long>(ox) * g.stride + base] += r[ox];
          }
        }
      }
    }
  }
}

// out[m,n] += A[m,k] * b[k,n], with A addressed as a[i*a_rs + t*a_cs] and
// b, out row-major. Register-tiled 8 rows x 16 columns.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a,
          std::size_t a_rs, std::size_t a_cs, const double* b, double* out) {
  constexpr std::size_t TR = 8, TC = 16;
  std::size_t i = 0;
  for (; i + TR <= m; i += TR) {
    std::size_t j = 0;
    for (; j + TC <= n; j += TC) {
      double acc[TR][TC];
      for (std::size_t r = 0; r < TR; ++r) {
#pragma omp simd
        for (std::size_t c = 0; c < TC; ++c) acc[r][c] = out[(i + r) * n + j + c];
      }
      for (std::size_t t = 0; t < k; ++t) {
        const double* brow = b + t * n + j;
        for (std::size_t r = 0; r < TR; ++r) {
          const double av = a[(i + r) * a_rs + t * a_cs];
#pragma omp simd
          for (std::size_t c = 0; c < TC; ++c) acc[r][c] += av * brow[c];
        }
      }
      for (std::size_t r = 0; r < TR; ++r) {
#pragma omp simd
        for (std::size_t c = 0; c < TC; ++c) out[(i + r) * n + j + c] = acc[r][c];
      }
    }
    if (j < n) {
      for (std::size_t r = 0; r < TR; ++r) {
        double* orow = out + (i + r) * n;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = a[(i + r) * a_rs + t * a_cs];
          const double* brow = b + t * n;
          for (std::size_t c = j; c < n; ++c) orow[c] += av * brow[c];
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * a_rs + t * a_cs];
      const double* brow = b + t * n;
#pragma omp simd
      for (std::size_t c = 0; c < n; ++c) orow[c] += av * brow[c];
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const double* in,
               double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  }
}

}  // namespace

namespace kernels {

void conv2d_direct(const Tensor& x, const Tensor& k, int stride, int padding,
                   Tensor& out) {
  const ConvGeometry g = conv_geometry(x.shape(), k.shape(), stride, padding);
  out = Tensor({g.n, g.f, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t f = 0; f < g.f; ++f) {
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.c; ++c) {
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - g.pad;
                const long ix = static_cast<long>(ox * g.stride + kx) - g.pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) ||
                    ix >= static_cast<long>(g.w)) {
                  continue;
                }
                acc += x.at(n, c, static_cast<std::size_t>(iy),
                            static_cast<std::size_t>(ix)) *
                       k.at(f, c, ky, kx);
              }
            }
          }
          out.at(n, f, oy, ox) = acc;
        }
      }
    }
  }
}

}  // namespace kernels

Var conv2d(Var input, Var kernel, int stride, int padding) {
  require_same_tape(input, kernel, "conv2d");
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const ConvGeometry g = conv_geometry(x.shape(), k.shape(), stride, padding);
  const std::size_t p = g.oh * g.ow;
  const std::size_t q = g.c * g.kh * g.kw;

  Tensor out({g.n, g.f, g.oh, g.ow});
  std::vector<double> col(q * p);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x.data().data() + n * g.c * g.h * g.w, col.data());
    gemm(g.f, p, q, k.data().data(), q, 1, col.data(),
         out.data().data() + n * g.f * p);
  }

  const std::size_t xi = input.id(), ki = kernel.id();
  return tape.record(
      "conv2d", std::move(out), {xi, ki},
      [g, p, q, xi, ki](Tape& t, std::span<const double> gout) {
        const double* xd = t.value(xi).data().data();
        const double* kd = t.value(ki).data().data();
        auto gx = t.input_grad(xi);
        auto gk = t.input_grad(ki);
        std::vector<double> col(q * p), col_t(p * q);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* go = gout.data() + n * g.f * p;
          if (!gk.empty()) {
            // dK[f,q] += sum_p dOut[f,p] * col[q,p]
            im2col(g, xd + n * g.c * g.h * g.w, col.data());
            transpose(q, p, col.data(), col_t.data());
            gemm(g.f, q, p, go, p, 1, col_t.data(), gk.data());
          }
          if (!gx.empty()) {
            // dCol[q,p] = sum_f K[f,q] * dOut[f,p]
            std::fill(col.begin(), col.end(), 0.0);
            gemm(q, p, g.f, kd, 1, q, go, col.data());
            col2im(g, col.data(), gx.data() + n * g.c * g.h * g.w);
          }
        }
      });
}

Var dense(Var input, Var weight, Var bias) {
  require_same_tape(input, weight, "dense");
  require_same_tape(input, bias, "dense");
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  require_shape(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0),
                "dense", x.shape(), w.shape());
  require_shape(b.rank() == 1 && b.dim(0) == w.dim(1), "dense", w.shape(),
                b.shape());
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  Tensor out({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    double* orow = out.data().data() + r * k;
    for (std::size_t j = 0; j < k; ++j) orow[j] = b[j];
    for (std::size_t i = 0; i < d; ++i) {
      const double xv = x[r * d + i];
      const double* wrow = w.data().data() + i * k;
      for (std::size_t j = 0; j < k; ++j) orow[j] += xv * wrow[j];
    }
  }
  const std::size_t xi = input.id(), wi = weight.id(), bi = bias.id();
  return tape.record(
      "dense", std::move(out), {xi, wi, bi},
      [n, d, k, xi, wi, bi](Tape& t, std::span<const double> g) {
        const auto& xv = t.value(xi).storage();
        const auto& wv = t.value(wi).storage();
        auto gx = t.input_grad(xi);
        auto gw = t.input_grad(wi);
        auto gb = t.input_grad(bi);
        for (std::size_t r = 0; r < n; ++r) {
          const double* grow = g.data() + r * k;
          if (!gb.empty()) {
            for (std::size_t j = 0; j < k; ++j) gb[j] += grow[j];
          }
          for (std::size_t i = 0; i < d; ++i) {
            const double* wrow = wv.data() + i * k;
            if (!gx.empty()) {
              double acc = 0.0;
              for (std::size_t j = 0; j < k; ++j) acc += grow[j] * wrow[j];
              gx[r * d + i] += acc;
            }
            if (!gw.empty()) {
              const double xval = xv[r * d + i];
              double* gwrow = gw.data() + i * k;
              for (std::size_t j = 0; j < k; ++j) gwrow[j] += xval * grow[j];
            }
          }
        }
      });
}

Var relu(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  const std::size_t xi = x.id();
  return x.tape().record("relu", std::move(out), {xi},
                         [xi](Tape& t, std::span<const double> g) {
                           auto gx = t.input_grad(xi);
                           const auto& v = t.value(xi).storage();
                           // subgradient 1 at 0
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             if (v[i] >= 0.0) gx[i] += g[i];
                           }
                         });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(out), {ai, bi},
                         [ai, bi](Tape& t, std::span<const double> g) {
                           for (std::size_t id : {ai, bi}) {
                             auto gi = t.input_grad(id);
                             for (std::size_t i = 0; i < gi.size(); ++i) {
                               gi[i] += g[i];
                             }
                           }
                         });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  require_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(
      "mul", std::move(out), {ai, bi},
      [ai, bi](Tape& t, std::span<const double> g) {
        auto ga = t.input_grad(ai);
        const auto& bv = t.value(bi).storage();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        auto gb = t.input_grad(bi);
        const auto& av = t.value(ai).storage();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
      });
}

Var scale(Var a, double factor) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ai = a.id();
  return a.tape().record("scale", std::move(out), {ai},
                         [ai, factor](Tape& t, std::span<const double> g) {
                           auto ga = t.input_grad(ai);
                           for (std::size_t i = 0; i < ga.size(); ++i) {
                             ga[i] += g[i] * factor;
                           }
                         });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id();
  return x.tape().record("sum", Tensor(Shape{}, s), {xi},
                         [xi](Tape& t, std::span<const double> g) {
                           auto gx = t.input_grad(xi);
                           for (double& v : gx) v += g[0];
                         });
}

namespace kernels {

void softmax_rows(std::span<const double> in, std::size_t rows,
                  std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double* orow = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < cols; ++j) orow[j] /= z;
  }
}

void log_softmax_rows(std::span<const double> in, std::size_t rows,
                      std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double* orow = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) orow[j] = row[j] - lse;
  }
}

}  // namespace kernels

namespace {

void require_rows(const Tensor& t, const char* op) {
  if (t.rank() != 2 || t.dim(1) == 0) {
    throw ShapeError(std::string(op) + ": expected [N,K], got " +
                     shape_str(t.shape()));
  }
}

}  // namespace

Var softmax(Var logits) {
  const Tensor& in = logits.value();
  require_rows(in, "softmax");
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  Tensor out(in.shape());
  kernels::softmax_rows(in.data(), rows, cols, out.data());
  const std::size_t li = logits.id();
  Tensor saved = out;
  return logits.tape().record(
      "softmax", std::move(out), {li},
      [li, rows, cols, saved = std::move(saved)](Tape& t,
                                                  std::span<const double> g) {
        auto gx = t.input_grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* s = saved.data().data() + r * cols;
          const double* gr = g.data() + r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * s[j];
          for (std::size_t j = 0; j < cols; ++j) {
            gx[r * cols + j] += s[j] * (gr[j] - dot);
          }
        }
      });
}

Var log_softmax(Var logits) {
  const Tensor& in = logits.value();
  require_rows(in, "log_softmax");
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  Tensor out(in.shape());
  kernels::log_softmax_rows(in.data(), rows, cols, out.data());
  const std::size_t li = logits.id();
  Tensor saved = out;
  return logits.tape().record(
      "log_softmax", std::move(out), {li},
      [li, rows, cols, saved = std::move(saved)](Tape& t,
                                                  std::span<const double> g) {
        auto gx = t.input_grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* ls = saved.data().data() + r * cols;
          const double* gr = g.data() + r * cols;
          double gsum = 0.0;
          for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
          for (std::size_t j = 0; j < cols; ++j) {
            gx[r * cols + j] += gr[j] - std::exp(ls[j]) * gsum;
          }
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& in = logits.value();
  require_rows(in, "cross_entropy");
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) +
                       " outside [0," + std::to_string(cols) + ")");
    }
  }
  std::vector<double> logp(in.size());
  kernels::log_softmax_rows(in.data(), rows, cols, logp);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) loss -= logp[r * cols + labels[r]];
  loss /= static_cast<double>(rows);
  const std::size_t li = logits.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record(
      "cross_entropy", Tensor(Shape{}, loss), {li},
      [li, rows, cols, ys = std::move(ys), logp = std::move(logp)](
          Tape& t, std::span<const double> g) {
        auto gx = t.input_grad(li);
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < cols; ++j) {
            const double p = std::exp(logp[r * cols + j]);
            const double onehot = static_cast<int>(j) == ys[r] ? 1.0 : 0.0;
            gx[r * cols + j] += s * (p - onehot);
          }
        }
      });
}

Var kl_divergence(Var p_logits, Var q_logits) {
  require_same_tape(p_logits, q_logits, "kl_divergence");
  const Tensor& p = p_logits.value();
  const Tensor& q = q_logits.value();
  require_rows(p, "kl_divergence");
  require_shape(p.shape() == q.shape(), "kl_divergence", p.shape(),
                q.shape());
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  std::vector<double> lp(p.size()), lq(q.size());
  kernels::log_softmax_rows(p.data(), rows, cols, lp);
  kernels::log_softmax_rows(q.data(), rows, cols, lq);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  kl /= static_cast<double>(rows);
  const std::size_t pi = p_logits.id(), qi = q_logits.id();
  return p_logits.tape().record(
      "kl_divergence", Tensor(Shape{}, kl), {pi, qi},
      [pi, qi, rows, cols, lp = std::move(lp), lq = std::move(lq)](
          Tape& t, std::span<const double> g) {
        const double s = g[0] / static_cast<double>(rows);
        auto gp = t.input_grad(pi);
        if (!gp.empty()) {
          // d/dz_j sum_k P_k (log P_k - log Q_k) = P_j (d_j - sum_k P_k d_k)
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              const std::size_t i = r * cols + j;
              mean_d += std::exp(lp[i]) * (lp[i] - lq[i]);
            }
            for (std::size_t j = 0; j < cols; ++j) {
              const std::size_t i = r * cols + j;
              gp[i] += s * std::exp(lp[i]) * ((lp[i] - lq[i]) - mean_d);
            }
          }
        }
        auto gq = t.input_grad(qi);
        if (!gq.empty()) {
          for (std::size_t i = 0; i < gq.size(); ++i) {
            gq[i] += s * (std::exp(lq[i]) - std::exp(lp[i]));
          }
        }
      });
}

Var global_avg_pool(Var x) {
  const Tensor& in = x.value();
  if (in.rank() != 4) {
    throw ShapeError("global_avg_pool: expected [N,C,H,W], got " +
                     shape_str(in.shape()));
  }
  const std::size_t n = in.dim(0), c = in.dim(1);
  const std::size_t hw = in.dim(2) * in.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += in[i * hw + k];
    out[i] = s / static_cast<double>(hw);
  }
  const std::size_t xi = x.id();
  return x.tape().record("global_avg_pool", std::move(out), {xi},
                         [xi, n, c, hw](Tape& t, std::span<const double> g) {
                           auto gx = t.input_grad(xi);
                           const double inv = 1.0 / static_cast<double>(hw);
                           for (std::size_t i = 0; i < n * c; ++i) {
                             for (std::size_t k = 0; k < hw; ++k) {
                               gx[i * hw + k] += g[i] * inv;
                             }
                           }
                         });
}

Var pick(Var x, std::size_t index) {
  const Tensor& in = x.value();
  if (index >= in.size()) throw ShapeError("pick: index out of range");
  const std::size_t xi = x.id();
  return x.tape().record("pick", Tensor(Shape{}, in[index]), {xi},
                         [xi, index](Tape& t, std::span<const double> g) {
                           auto gx = t.input_grad(xi);
                           gx[index] += g[0];
                         });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& in = x.value();
  if (in.rank() != 2 || begin + count > in.dim(1)) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " +
                     shape_str(in.shape()));
  }
  const std::size_t rows = in.dim(0), cols = in.dim(1);
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < count; ++j) {
      out[r * count + j] = in[r * cols + begin + j];
    }
  }
  const std::size_t xi = x.id();
  return x.tape().record(
      "slice_cols", std::move(out), {xi},
      [xi, rows, cols, begin, count](Tape& t, std::span<const double> g) {
        auto gx = t.input_grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < count; ++j) {
            gx[r * cols + begin + j] += g[r * count + j];
          }
        }
      });
}

}  // namespace cbnlab
