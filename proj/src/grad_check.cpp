#include "cbnlab/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "cbnlab/error.hpp"

namespace cbnlab {

bool GradCheckReport::all_pass() const {
  return std::all_of(entries.begin(), entries.end(),
                     [](const GradCheckEntry& e) { return e.pass; });
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {

double eval_loss(const LossFn& fn) {
  Tape tape;
  return fn(tape).value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn,
                           const std::vector<NamedTensor>& params,
                           double tolerance, double step, double abs_floor) {
  for (const NamedTensor& p : params) {
    p.tensor->set_requires_grad(true);
    p.tensor->ensure_grad();
    p.tensor->zero_grad();
  }
  double base;
  {
    Tape tape;
    Var loss = loss_fn(tape);
    base = loss.value()[0];
    tape.backward(loss);
  }
  const double again = eval_loss(loss_fn);
  if (again != base) {
    throw NumericError("grad_check: two forward passes disagree (" +
                       std::to_string(base) + " vs " + std::to_string(again) +
                       ")");
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (const NamedTensor& p : params) {
    GradCheckEntry entry;
    entry.name = p.name;
    entry.elements = p.tensor->size();
    const std::vector<double> analytic(p.tensor->grad().begin(),
                                       p.tensor->grad().end());
    for (std::size_t i = 0; i < p.tensor->size(); ++i) {
      const double saved = (*p.tensor)[i];
      (*p.tensor)[i] = saved + step;
      const double up = eval_loss(loss_fn);
      (*p.tensor)[i] = saved - step;
      const double down = eval_loss(loss_fn);
      (*p.tensor)[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
      entry.max_rel_error =
          std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    }
    entry.pass = entry.max_rel_error < tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cbnlab
