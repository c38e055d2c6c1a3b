#include "cbnlab/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "cbnlab/conditioning.hpp"
#include "cbnlab/grad_check.hpp"
#include "cbnlab/model.hpp"
#include "cbnlab/normalization.hpp"
#include "cbnlab/ops.hpp"

namespace cbnlab {

namespace {

using Rng = std::mt19937_64;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

// Values bounded away from 0 so a finite step never crosses the ReLU kink.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sign(rng) ? u(rng) : -u(rng);
  return t;
}

// Scalar probe <y, r> so every output element contributes.
Var project(Tape& tape, Var y, const Tensor& r) {
  return sum(mul(y, tape.constant(r, "probe")));
}

// Central differences are meaningless across a ReLU kink, so model draws
// with a pre-activation this close to 0 are redrawn.
constexpr double kKinkMargin = 1e-4;

double min_relu_margin(const Tape& tape) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (tape.op_name(id) != "relu") continue;
    for (double v : tape.value(tape.inputs(id).front()).storage()) {
      m = std::min(m, std::abs(v));
    }
  }
  return m;
}

struct Case {
  std::string op;
  // Builds fresh tensors for one trial and returns the check result.
  std::function<GradCheckReport(Rng&, double)> run;
};

GradCheckReport check(const LossFn& fn, std::vector<NamedTensor> params,
                      double tol) {
  return grad_check(fn, params, tol);
}

std::vector<Case> cases() {
  std::vector<Case> c;
  c.push_back({"conv2d", [](Rng& rng, double tol) {
                 std::uniform_int_distribution<int> pick(0, 1);
                 const bool strided = pick(rng) == 1;
                 const std::size_t k = strided ? 4 : 3;
                 const int stride = strided ? 2 : 1;
                 Tensor x = random_tensor({2, 3, 6, 6}, rng);
                 Tensor w = random_tensor({4, 3, k, k}, rng, 0.5);
                 const std::size_t o = strided ? 3 : 6;
                 Tensor r = random_tensor({2, 4, o, o}, rng);
                 return check(
                     [&](Tape& t) {
                       return project(t, conv2d(t.param(x), t.param(w), stride, 1), r);
                     },
                     {{"x", &x}, {"kernel", &w}}, tol);
               }});
  c.push_back({"dense", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({4, 5}, rng);
                 Tensor w = random_tensor({5, 3}, rng);
                 Tensor b = random_tensor({3}, rng);
                 Tensor r = random_tensor({4, 3}, rng);
                 return check(
                     [&](Tape& t) {
                       return project(t, dense(t.param(x), t.param(w), t.param(b)), r);
                     },
                     {{"x", &x}, {"weight", &w}, {"bias", &b}}, tol);
               }});
  c.push_back({"relu", [](Rng& rng, double tol) {
                 Tensor x = away_from_zero({3, 7}, rng);
                 Tensor r = random_tensor({3, 7}, rng);
                 return check([&](Tape& t) { return project(t, relu(t.param(x)), r); },
                              {{"x", &x}}, tol);
               }});
  c.push_back({"add", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({2, 5}, rng);
                 Tensor b = random_tensor({2, 5}, rng);
                 Tensor r = random_tensor({2, 5}, rng);
                 return check(
                     [&](Tape& t) { return project(t, add(t.param(a), t.param(b)), r); },
                     {{"a", &a}, {"b", &b}}, tol);
               }});
  c.push_back({"mul", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({2, 5}, rng);
                 Tensor b = random_tensor({2, 5}, rng);
                 Tensor r = random_tensor({2, 5}, rng);
                 return check(
                     [&](Tape& t) { return project(t, mul(t.param(a), t.param(b)), r); },
                     {{"a", &a}, {"b", &b}}, tol);
               }});
  c.push_back({"scale", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({2, 5}, rng);
                 Tensor r = random_tensor({2, 5}, rng);
                 const double f = std::normal_distribution<double>(0.0, 2.0)(rng);
                 return check([&](Tape& t) { return project(t, scale(t.param(a), f), r); },
                              {{"a", &a}}, tol);
               }});
  c.push_back({"sum", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({3, 4}, rng);
                 return check([&](Tape& t) { return sum(t.param(a)); }, {{"a", &a}},
                              tol);
               }});
  c.push_back({"softmax", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({3, 5}, rng, 2.0);
                 Tensor r = random_tensor({3, 5}, rng);
                 return check([&](Tape& t) { return project(t, softmax(t.param(a)), r); },
                              {{"logits", &a}}, tol);
               }});
  c.push_back({"log_softmax", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({3, 5}, rng, 2.0);
                 Tensor r = random_tensor({3, 5}, rng);
                 return check(
                     [&](Tape& t) { return project(t, log_softmax(t.param(a)), r); },
                     {{"logits", &a}}, tol);
               }});
  c.push_back({"cross_entropy", [](Rng& rng, double tol) {
                 Tensor a = random_tensor({4, 5}, rng, 2.0);
                 std::uniform_int_distribution<int> lab(0, 4);
                 std::vector<int> labels(4);
                 for (int& l : labels) l = lab(rng);
                 return check(
                     [&](Tape& t) { return cross_entropy(t.param(a), labels); },
                     {{"logits", &a}}, tol);
               }});
  c.push_back({"kl_divergence", [](Rng& rng, double tol) {
                 Tensor p = random_tensor({4, 5}, rng, 2.0);
                 Tensor q = random_tensor({4, 5}, rng, 2.0);
                 return check(
                     [&](Tape& t) { return kl_divergence(t.param(p), t.param(q)); },
                     {{"p_logits", &p}, {"q_logits", &q}}, tol);
               }});
  c.push_back({"global_avg_pool", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({2, 3, 4, 4}, rng);
                 Tensor r = random_tensor({2, 3}, rng);
                 return check(
                     [&](Tape& t) { return project(t, global_avg_pool(t.param(x)), r); },
                     {{"x", &x}}, tol);
               }});
  c.push_back({"pick", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({3, 4}, rng);
                 const std::size_t idx =
                     std::uniform_int_distribution<std::size_t>(0, 11)(rng);
                 return check(
                     [&](Tape& t) {
                       return mul(pick(t.param(x), idx), pick(t.param(x), 11 - idx));
                     },
                     {{"x", &x}}, tol);
               }});
  c.push_back({"slice_cols", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({3, 6}, rng);
                 Tensor r = random_tensor({3, 2}, rng);
                 return check(
                     [&](Tape& t) { return project(t, slice_cols(t.param(x), 2, 2), r); },
                     {{"x", &x}}, tol);
               }});
  c.push_back({"batch_norm_train", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({3, 2, 3, 3}, rng, 1.5);
                 NormLayerState s = NormLayerState::create(2);
                 s.gamma = random_tensor({2}, rng);
                 s.beta = random_tensor({2}, rng);
                 Tensor r = random_tensor({3, 2, 3, 3}, rng);
                 return check(
                     [&](Tape& t) {
                       Var y = channel_affine(normalize(t.param(x), s, Mode::train),
                                              t.param(s.gamma), t.param(s.beta),
                                              nullptr);
                       return project(t, y, r);
                     },
                     {{"x", &x}, {"gamma", &s.gamma}, {"beta", &s.beta}}, tol);
               }});
  c.push_back({"batch_norm_dense", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({5, 3}, rng, 1.5);
                 NormLayerState s = NormLayerState::create(3);
                 Tensor r = random_tensor({5, 3}, rng);
                 return check(
                     [&](Tape& t) {
                       return project(t, normalize(t.param(x), s, Mode::train), r);
                     },
                     {{"x", &x}}, tol);
               }});
  c.push_back({"batch_norm_eval", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({2, 2, 3, 3}, rng);
                 NormLayerState s = NormLayerState::create(2);
                 s.running_mean = {0.3, -0.2};
                 s.running_var = {1.7, 0.4};
                 Tensor r = random_tensor({2, 2, 3, 3}, rng);
                 return check(
                     [&](Tape& t) {
                       return project(t, normalize(t.param(x), s, Mode::eval), r);
                     },
                     {{"x", &x}}, tol);
               }});
  c.push_back({"conditional_batch_norm", [](Rng& rng, double tol) {
                 Tensor x = random_tensor({3, 2, 3, 3}, rng, 1.5);
                 NormLayerState s = NormLayerState::create(2);
                 s.gamma = random_tensor({2}, rng);
                 s.beta = random_tensor({2}, rng);
                 Tensor dg = random_tensor({3, 2}, rng, 0.5);
                 Tensor db = random_tensor({3, 2}, rng, 0.5);
                 std::vector<std::uint8_t> bypass{0, 1, 0};
                 Tensor r = random_tensor({3, 2, 3, 3}, rng);
                 return check(
                     [&](Tape& t) {
                       CondDeltas d{t.param(dg), t.param(db), bypass};
                       Var y = channel_affine(normalize(t.param(x), s, Mode::train),
                                              t.param(s.gamma), t.param(s.beta), &d);
                       return project(t, y, r);
                     },
                     {{"x", &x},
                      {"gamma", &s.gamma},
                      {"beta", &s.beta},
                      {"delta_gamma", &dg},
                      {"delta_beta", &db}},
                     tol);
               }});
  c.push_back({"auxiliary_net", [](Rng& rng, double tol) {
                 std::bernoulli_distribution shared(0.5);
                 const AuxLayout layout =
                     shared(rng) ? AuxLayout::shared_trunk : AuxLayout::per_layer;
                 const std::vector<std::uint8_t> bypass{0, 0, 1};
                 for (;;) {
                   AuxiliaryNet net(4, {2, 3}, 5, layout, rng);
                   auto params = net.parameters("aux");
                   for (auto& p : params) {
                     *p.tensor = random_tensor(p.tensor->shape(), rng, 0.5);
                   }
                   std::vector<double> values(3 * 4);
                   std::uniform_real_distribution<double> u(0.0, 1.0);
                   for (double& v : values) v = u(rng);
                   const AttributeBatch a =
                       AttributeBatch::make(3, 4, AttributeKind::continuous, values);
                   Tensor r0 = random_tensor({3, 2}, rng), r1 = random_tensor({3, 3}, rng);
                   auto loss = [&](Tape& t) {
                     auto d = predict_deltas(net, t, a, bypass);
                     return add(add(project(t, d[0].delta_gamma, r0),
                                    project(t, d[0].delta_beta, r0)),
                                add(project(t, d[1].delta_gamma, r1),
                                    project(t, d[1].delta_beta, r1)));
                   };
                   Tape probe;
                   loss(probe);
                   if (min_relu_margin(probe) < kKinkMargin) continue;
                   return check(loss, params, tol);
                 }
               }});
  c.push_back({"cbn_model", [](Rng& rng, double tol) {
                 ModelConfig cfg;
                 cfg.stem_channels = 3;
                 cfg.stage_channels = {3, 4};
                 cfg.num_classes = 3;
                 cfg.attribute_dim = 4;
                 cfg.aux_hidden = 4;
                 const std::vector<std::uint8_t> bypass{0, 1, 0};
                 const std::vector<int> labels{0, 2, 1};
                 for (;;) {
                   MicroResNet model(cfg, NormKind::cbn, rng());
                   auto params = model.parameters();
                   for (auto& p : params) {
                     if (p.name.find(".w2") != std::string::npos ||
                         p.name.find(".b1") != std::string::npos) {
                       *p.tensor = random_tensor(p.tensor->shape(), rng, 0.3);
                     }
                   }
                   Tensor images = random_tensor({3, 3, 6, 6}, rng);
                   std::vector<double> values(3 * 4);
                   std::bernoulli_distribution bit(0.5);
                   for (double& v : values) v = bit(rng) ? 1.0 : 0.0;
                   const AttributeBatch a =
                       AttributeBatch::make(3, 4, AttributeKind::binary, values);
                   auto loss = [&](Tape& t) {
                     auto out = model.forward(t, images, &a, &bypass, Mode::train);
                     return cross_entropy(out.logits, labels);
                   };
                   Tape probe;
                   loss(probe);
                   if (min_relu_margin(probe) < kKinkMargin) continue;
                   return check(loss, params, tol);
                 }
               }});
  return c;
}

}  // namespace

std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed,
                                           std::size_t trials,
                                           double tolerance) {
  std::vector<GradSuiteEntry> out;
  Rng rng(seed);
  for (const Case& c : cases()) {
    GradSuiteEntry e;
    e.op = c.op;
    e.trials = trials;
    for (std::size_t t = 0; t < trials; ++t) {
      e.max_rel_error = std::max(e.max_rel_error, c.run(rng, tolerance).max_error());
    }
    e.pass = e.max_rel_error < tolerance;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace cbnlab
