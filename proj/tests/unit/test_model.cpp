#include <algorithm>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"

#include "cbnlab/error.hpp"
#include "cbnlab/model.hpp"
#include "cbnlab/ops.hpp"

using namespace cbnlab;
using testing::random_binary;
using testing::random_tensor;

namespace {

ModelConfig small_model(std::size_t k = 5, std::size_t d = 6) {
  ModelConfig c;
  c.stem_channels = 4;
  c.stage_channels = {4, 6};
  c.num_classes = k;
  c.attribute_dim = d;
  c.aux_hidden = 8;
  return c;
}

void perturb(MicroResNet& m, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : m.parameters()) {
    for (double& v : p.tensor->storage()) v += n(rng);
  }
}

Tensor find(MicroResNet& m, const std::string& name) {
  for (auto& p : m.parameters()) {
    if (p.name == name) return *p.tensor;
  }
  FAIL("no parameter " << name);
  return {};
}

// [C,H,W] helpers for the hand trace, independent of the library kernels.
using Map = std::vector<std::vector<std::vector<double>>>;

Map conv3x3(const Map& x, const Tensor& k) {
  const std::size_t f = k.dim(0), c = k.dim(1), h = x[0].size(), w = x[0][0].size();
  Map y(f, std::vector<std::vector<double>>(h, std::vector<double>(w, 0.0)));
  for (std::size_t o = 0; o < f; ++o)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) {
              const long yi = static_cast<long>(i + a) - 1, xj = static_cast<long>(j + b) - 1;
              if (yi < 0 || xj < 0 || yi >= static_cast<long>(h) || xj >= static_cast<long>(w))
                continue;
              s += x[ci][yi][xj] * k.at(o, ci, a, b);
            }
        y[o][i][j] = s;
      }
  return y;
}

Map norm_eval(Map x, const Tensor& gamma, const Tensor& beta, bool relu) {
  for (std::size_t c = 0; c < x.size(); ++c)
    for (auto& row : x[c])
      for (double& v : row) {
        v = v / std::sqrt(1.0 + 1e-5) * gamma[c] + beta[c];
        if (relu) v = std::max(v, 0.0);
      }
  return x;
}

}  // namespace

TEST_SUITE("model-zoo") {

TEST_CASE("BN and CBN built from one seed share backbone weights") {
  MicroResNet bn(small_model(), NormKind::bn, 7), cbn(small_model(), NormKind::cbn, 7);
  auto pb = bn.parameters(), pc = cbn.parameters();
  REQUIRE(pc.size() > pb.size());
  for (std::size_t i = 0; i < pb.size(); ++i) {
    CHECK(pb[i].name == pc[i].name);
    CHECK(*pb[i].tensor == *pc[i].tensor);
  }
  CHECK(cbn.parameter_count() - bn.parameter_count() == cbn.auxiliary()->parameter_count());
  CHECK(cbn.auxiliary()->parameter_count() ==
        AuxiliaryNet::expected_parameter_count(6, cbn.conditioned_channels(), 8,
                                               AuxLayout::shared_trunk));
  CHECK(bn.auxiliary() == nullptr);
}

TEST_CASE("conditioning scope selects the conditioned layers") {
  ModelConfig c = small_model();
  MicroResNet all(c, NormKind::cbn, 1);
  // stem, stage0 a/b, stage1 a/b/proj
  CHECK(all.conditioned_channels() == std::vector<std::size_t>{4, 4, 4, 6, 6, 6});
  c.cond_scope = CondScope::last_stage;
  MicroResNet last(c, NormKind::cbn, 1);
  CHECK(last.conditioned_channels() == std::vector<std::size_t>{6, 6, 6});
}

TEST_CASE("default-size forward returns one logit row per image") {
  ModelConfig c;
  c.num_classes = 10;
  MicroResNet m(c, NormKind::bn, 3);
  std::mt19937_64 rng(41);
  Tape t;
  const auto out = m.forward(t, random_tensor({64, 3, 32, 32}, rng), nullptr, nullptr, Mode::eval);
  CHECK(out.logits.shape() == Shape{64, 10});
  CHECK(out.feature_map.shape() == Shape{64, 32, 16, 16});
}

TEST_CASE("fresh CBN model matches its BN twin for any attributes") {
  std::mt19937_64 rng(42);
  MicroResNet cbn(small_model(), NormKind::cbn, 9);
  MicroResNet bn = cbn.bn_twin();
  Tensor x = random_tensor({4, 3, 8, 8}, rng);
  const auto attrs = random_binary(4, 6, rng);
  for (Mode mode : {Mode::eval, Mode::train}) {
    Tape t;
    const Tensor lc = cbn.forward(t, x, &attrs, nullptr, mode).logits.value();
    const Tensor lb = bn.forward(t, x, nullptr, nullptr, mode).logits.value();
    CHECK(lc == lb);
  }
}

TEST_CASE("fully bypassed trained-looking CBN equals its BN twin") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    MicroResNet cbn(small_model(), NormKind::cbn, 100 + trial);
    perturb(cbn, rng);
    MicroResNet bn = cbn.bn_twin();
    Tensor x = random_tensor({3, 3, 8, 8}, rng);
    const auto attrs = random_binary(3, 6, rng);
    const std::vector<std::uint8_t> all(3, 1);
    Tape t;
    const Tensor lc = cbn.forward(t, x, &attrs, &all, Mode::eval).logits.value();
    const Tensor ln = cbn.forward(t, x, nullptr, &all, Mode::eval).logits.value();
    const Tensor lb = bn.forward(t, x, nullptr, nullptr, Mode::eval).logits.value();
    CHECK(lc == lb);
    CHECK(ln == lb);
  }
}

TEST_CASE("bypassing one sample leaves the others untouched in eval mode") {
  std::mt19937_64 rng(44);
  MicroResNet cbn(small_model(), NormKind::cbn, 5);
  perturb(cbn, rng);
  Tensor x = random_tensor({3, 3, 8, 8}, rng);
  const auto attrs = random_binary(3, 6, rng);
  const std::vector<std::uint8_t> none(3, 0), one{0, 1, 0};
  Tape t;
  const Tensor a = cbn.forward(t, x, &attrs, &none, Mode::eval).logits.value();
  const Tensor b = cbn.forward(t, x, &attrs, &one, Mode::eval).logits.value();
  const std::size_t k = 5;
  for (std::size_t j = 0; j < k; ++j) {
    CHECK(a[j] == b[j]);
    CHECK(a[2 * k + j] == b[2 * k + j]);
  }
  bool changed = false;
  for (std::size_t j = 0; j < k; ++j) changed |= a[k + j] != b[k + j];
  CHECK(changed);
}

TEST_CASE("CBN without attributes needs a full bypass") {
  MicroResNet cbn(small_model(), NormKind::cbn, 5);
  Tape t;
  const std::vector<std::uint8_t> partial{1, 0};
  CHECK_THROWS_AS(cbn.forward(t, Tensor(Shape{2, 3, 8, 8}), nullptr, nullptr, Mode::eval),
                  ConfigError);
  CHECK_THROWS_AS(cbn.forward(t, Tensor(Shape{2, 3, 8, 8}), nullptr, &partial, Mode::eval),
                  ConfigError);
  CHECK_THROWS_AS(cbn.forward(t, Tensor(Shape{2, 1, 8, 8}), nullptr, nullptr, Mode::eval),
                  ShapeError);
}

TEST_CASE("zero images give a repeatable constant logit row") {
  MicroResNet bn(small_model(), NormKind::bn, 6);
  Tape t;
  Tensor zeros(Shape{3, 3, 8, 8});
  const Tensor a = bn.forward(t, zeros, nullptr, nullptr, Mode::eval).logits.value();
  const Tensor b = bn.forward(t, zeros, nullptr, nullptr, Mode::eval).logits.value();
  CHECK(a == b);
  for (std::size_t r = 1; r < 3; ++r) {
    for (std::size_t j = 0; j < 5; ++j) CHECK(a[r * 5 + j] == a[j]);
  }
}

TEST_CASE("one-stage forward matches a hand trace") {
  ModelConfig c = small_model(3);
  c.stage_channels = {4};
  MicroResNet m(c, NormKind::bn, 12);
  std::mt19937_64 rng(45);
  perturb(m, rng, 0.2);
  Tensor x = random_tensor({1, 3, 8, 8}, rng);

  Map in(3, std::vector<std::vector<double>>(8, std::vector<double>(8)));
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) in[ch][i][j] = x.at(0, ch, i, j);

  auto layer = [&](const Map& v, const std::string& p, bool relu) {
    return norm_eval(conv3x3(v, find(m, p + ".conv")), find(m, p + ".norm.gamma"),
                     find(m, p + ".norm.beta"), relu);
  };
  const Map h = layer(in, "stem", true);
  const Map a = layer(h, "stage0.a", true);
  Map r = layer(a, "stage0.b", false);
  std::vector<double> pooled(4, 0.0);
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) pooled[ch] += std::max(r[ch][i][j] + h[ch][i][j], 0.0);
  const Tensor w = find(m, "head.weight"), b = find(m, "head.bias");

  Tape t;
  const Tensor logits = m.forward(t, x, nullptr, nullptr, Mode::eval).logits.value();
  for (std::size_t k = 0; k < 3; ++k) {
    double z = b[k];
    for (std::size_t ch = 0; ch < 4; ++ch) z += pooled[ch] / 64.0 * w[ch * 3 + k];
    CHECK(logits[k] == doctest::Approx(z).epsilon(1e-12));
  }
}

TEST_CASE("eval forward is repeatable") {
  std::mt19937_64 rng(46);
  MicroResNet cbn(small_model(), NormKind::cbn, 8);
  perturb(cbn, rng);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const auto attrs = random_binary(2, 6, rng);
  Tape t1, t2;
  const Tensor l1 = cbn.forward(t1, x, &attrs, nullptr, Mode::eval).logits.value();
  const Tensor l2 = cbn.forward(t2, x, &attrs, nullptr, Mode::eval).logits.value();
  CHECK(l1 == l2);
}

TEST_CASE("Grad-CAM on a hand-set 2x2x2 map") {
  Tensor act(Shape{2, 2, 2}, std::vector<double>{1, 2, 3, 4, 0, 1, 1, 0});
  Tensor grad(Shape{2, 2, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5, -1, -1, -1, -1});
  // alpha = (0.5, -1): cam = (0.5, 0, 0.5, 2) -> / 2
  const SaliencyMap s = gradcam_from_activations(act, grad, 1);
  CHECK(s.heatmap.shape() == Shape{2, 2});
  CHECK(s.heatmap.storage() == std::vector<double>{0.25, 0.0, 0.25, 1.0});
  CHECK_FALSE(s.all_zero);
  CHECK(s.target_class == 1);

  Tensor neg(Shape{2, 2, 2}, -1.0);
  const SaliencyMap z = gradcam_from_activations(act, neg, 0);
  CHECK(z.all_zero);
  for (double v : z.heatmap.storage()) CHECK(v == 0.0);
}

TEST_CASE("zero last conv yields a flagged zero heatmap") {
  MicroResNet m(small_model(), NormKind::bn, 2);
  for (auto& p : m.parameters()) {
    if (p.name == "stage1.b.conv") std::fill(p.tensor->storage().begin(), p.tensor->storage().end(), 0.0);
  }
  std::mt19937_64 rng(47);
  const SaliencyMap s = gradcam(m, random_tensor({1, 3, 8, 8}, rng), nullptr, false, 0);
  CHECK(s.all_zero);
  for (double v : s.heatmap.storage()) CHECK(v == 0.0);
}

TEST_CASE("Grad-CAM is non-negative, max-normalized and scale invariant") {
  std::mt19937_64 rng(48);
  for (int trial = 0; trial < 8; ++trial) {
    MicroResNet m(small_model(), NormKind::cbn, 200 + trial);
    perturb(m, rng);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    const auto attrs = random_binary(1, 6, rng);
    const int cls = trial % 5;
    const SaliencyMap s = gradcam(m, x, &attrs, false, cls);
    CHECK(s.heatmap.shape() == Shape{4, 4});
    const double mx = *std::max_element(s.heatmap.storage().begin(), s.heatmap.storage().end());
    for (double v : s.heatmap.storage()) CHECK(v >= 0.0);
    if (!s.all_zero) CHECK(mx == 1.0);

    for (auto& p : m.parameters()) {
      if (p.name == "head.weight" || p.name == "head.bias") {
        for (double& v : p.tensor->storage()) v *= 2.0;
      }
    }
    const SaliencyMap d = gradcam(m, x, &attrs, false, cls);
    CHECK(d.all_zero == s.all_zero);
    for (std::size_t i = 0; i < s.heatmap.size(); ++i) {
      CHECK(std::abs(d.heatmap[i] - s.heatmap[i]) <= 1e-12);
    }
    const auto arg = [](const Tensor& t) {
      return std::max_element(t.storage().begin(), t.storage().end()) - t.storage().begin();
    };
    CHECK(arg(d.heatmap) == arg(s.heatmap));
  }
  MicroResNet m(small_model(), NormKind::bn, 1);
  CHECK_THROWS_AS(gradcam(m, Tensor(Shape{1, 3, 8, 8}), nullptr, false, 5), ShapeError);
}

TEST_CASE("checkpoint round trip and corruption") {
  testing::TempDir dir("ckpt");
  std::mt19937_64 rng(49);
  MicroResNet a(small_model(), NormKind::cbn, 3);
  perturb(a, rng);
  for (auto& e : a.state_entries()) {
    if (e.name.find("running_var") != std::string::npos) e.values[0] = 2.5;
  }
  const auto path = dir.path / "m.ckpt";
  save_checkpoint(a, path, "{}");
  CHECK(std::filesystem::exists(path.string() + ".json"));
  CHECK(testing::slurp(path).substr(0, 8) == "CBNLAB01");

  MicroResNet b(small_model(), NormKind::cbn, 99);
  load_checkpoint(b, path);
  auto ea = a.state_entries(), eb = b.state_entries();
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    CHECK(std::equal(ea[i].values.begin(), ea[i].values.end(), eb[i].values.begin()));
  }
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const auto attrs = random_binary(2, 6, rng);
  Tape t;
  const Tensor la = a.forward(t, x, &attrs, nullptr, Mode::eval).logits.value();
  const Tensor lb = b.forward(t, x, &attrs, nullptr, Mode::eval).logits.value();
  CHECK(la == lb);

  std::string bytes = testing::slurp(path);
  {
    std::ofstream os(dir.path / "cut.ckpt", std::ios::binary);
    os << bytes.substr(0, bytes.size() - 8);
  }
  CHECK_THROWS_AS(load_checkpoint(b, dir.path / "cut.ckpt"), FormatError);
  bytes[0] = 'X';
  {
    std::ofstream os(dir.path / "magic.ckpt", std::ios::binary);
    os << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(b, dir.path / "magic.ckpt"), FormatError);
  MicroResNet bn(small_model(), NormKind::bn, 3);
  CHECK_THROWS_AS(load_checkpoint(bn, path), FormatError);
}

}  // TEST_SUITE
