// Acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include "cbnlab/diagnostics.hpp"
#include "cbnlab/gradient_suite.hpp"
#include "cbnlab/ops.hpp"
#include "cbnlab/report.hpp"

using namespace cbnlab;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.epochs = 12;
  c.dataset.samples_per_class = 100;
  c.dataset.image_size = 16;
  return c;
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = gradient_suite(2024, 20);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  bool ok = true;
  for (const auto& e : entries) {
    ok = ok && e.pass;
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_op = e.op;
    }
  }
  verdict(1, ok && secs < 120.0,
          fmt("%zu ops x 20 draws, max rel err %.2e (%s), %.1fs", entries.size(),
              worst, worst_op.c_str(), secs));
}

void criterion_equivalence() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig cfg;
    cfg.num_classes = 4;
    cfg.attribute_dim = 6;
    MicroResNet cbn(cfg, NormKind::cbn, rng());
    for (auto& p : cbn.parameters()) {
      for (double& v : p.tensor->storage()) v += 0.3 * n(rng);
    }
    MicroResNet bn = cbn.bn_twin();
    Tensor x(Shape{3, 3, 8, 8});
    for (double& v : x.storage()) v = n(rng);
    std::vector<double> a(3 * 6);
    for (double& v : a) v = n(rng) > 0.0 ? 1.0 : 0.0;
    const AttributeBatch attrs = AttributeBatch::make(3, 6, AttributeKind::binary, a);
    const std::vector<std::uint8_t> bypass(3, 1);
    const Mode mode = trial % 2 ? Mode::train : Mode::eval;
    Tape t1, t2;
    const Tensor& y1 = cbn.forward(t1, x, &attrs, &bypass, mode).logits.value();
    const Tensor& y2 = bn.forward(t2, x, nullptr, nullptr, mode).logits.value();
    for (std::size_t i = 0; i < y1.size(); ++i) {
      worst = std::max(worst, std::abs(y1[i] - y2[i]));
    }
  }

  ExperimentConfig c;
  c.dataset.samples_per_class = 20;
  c.dataset.image_size = 8;
  c.epochs = 2;
  c.batch_size = 16;
  const Dataset data = prepare_dataset(c);
  c.norm_kind = NormKind::bn;
  TrainResult b = train(c, data);
  c.norm_kind = NormKind::cbn;
  c.train_mask_fraction = 1.0;
  TrainResult f = train(c, data);
  auto bp = b.model.parameters();
  auto fp = f.model.parameters();
  bool identical = true;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    identical = identical && bp[i].name == fp[i].name &&
                bp[i].tensor->storage() == fp[i].tensor->storage();
  }
  verdict(2, worst <= 1e-12 && identical,
          fmt("50 draws max |CBN(bypass) - BN| = %.1e; mask-1 training weights %s",
              worst, identical ? "bit-identical" : "DIFFER"));
}

void criterion_composite() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  double worst_m1 = 0.0, min_kl = 0.0, worst_eq = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor f(Shape{4, 6}), g(Shape{4, 6});
    for (double& v : f.storage()) v = n(rng);
    for (double& v : g.storage()) v = n(rng);
    const std::vector<int> labels{0, 3, 5, 1};
    Tape t;
    Var lf = t.input(f), lg = t.constant(g);
    const double ce = cross_entropy(lf, labels).value()[0];
    CompositeLoss m1 = composite_loss(lf, lg, labels, 1.0);
    worst_m1 = std::max(worst_m1, std::abs(m1.total.value()[0] - ce));
    min_kl = std::min(min_kl, m1.kl.value()[0]);
    CompositeLoss same = composite_loss(lf, t.constant(f), labels, 0.9);
    worst_eq = std::max(worst_eq, std::abs(same.kl.value()[0]));
  }
  verdict(3, worst_m1 <= 1e-12 && min_kl >= -1e-12 && worst_eq == 0.0,
          fmt("m=1 |loss-CE| max %.1e; min KL %.1e; KL(F,F) max %.1e", worst_m1,
              min_kl, worst_eq));
}

void criterion_formats(const Study& study) {
  const fs::path dir = fs::temp_directory_path() / "cbnlab_acceptance_formats";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Dataset& d = study.regimes.front().data.front();
  save_dataset(d, dir / "d.scds");
  const Dataset back = load_dataset(dir / "d.scds");
  bool scds = back.train.images == d.train.images && back.test.images == d.test.images &&
              back.val.attributes.values == d.val.attributes.values &&
              back.train.labels == d.train.labels;
  save_dataset(back, dir / "d2.scds");
  scds = scds && slurp(dir / "d.scds") == slurp(dir / "d2.scds");

  MicroResNet m = study.regimes.front().cbn.front().model;
  save_checkpoint(m, dir / "m.ckpt", "{}");
  MicroResNet fresh(m.config(), NormKind::cbn, 999);
  load_checkpoint(fresh, dir / "m.ckpt");
  bool ckpt = true;
  auto a = m.state_entries();
  auto b = fresh.state_entries();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ckpt = ckpt && std::equal(a[i].values.begin(), a[i].values.end(),
                              b[i].values.begin(), b[i].values.end());
  }

  // Two independent small studies with the same seeds must emit the same bytes.
  ExperimentConfig c;
  c.epochs = 2;
  c.dataset.samples_per_class = 10;
  c.dataset.image_size = 8;
  StudyOptions opt;
  opt.seeds = {3, 4};
  opt.fractions = {0.0, 0.5, 1.0};
  opt.saliency_examples = 3;
  const std::vector<std::string> regimes{"cub-like", "til-like"};
  emit_report(run_study(c, regimes, opt).report, dir / "r1");
  emit_report(run_study(c, regimes, opt).report, dir / "r2");
  bool reports = true;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "r1")) {
    if (!e.is_regular_file()) continue;
    ++files;
    reports = reports && slurp(e.path()) == slurp(dir / "r2" / e.path().filename());
  }
  verdict(11, scds && ckpt && reports && files == 7,
          fmt("SCDS %s, checkpoint %s, %zu report files %s", scds ? "exact" : "DIFFER",
              ckpt ? "exact" : "DIFFER", files, reports ? "byte-identical" : "DIFFER"));
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path report_dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_report");
  criterion_gradients();
  criterion_equivalence();
  criterion_composite();

  const ExperimentConfig base = desk_config();
  StudyOptions opt;
  opt.seeds = {0, 1, 2, 3, 4};
  opt.jobs = default_jobs();
  opt.train_sweep = true;
  opt.saliency_examples = 40;
  const auto t0 = std::chrono::steady_clock::now();
  Study st = run_study(base, {"cub-like", "til-like"}, opt);
  std::printf("study finished in %.0fs\n", seconds_since(t0));
  emit_report(st.report, report_dir);

  const AblationGrid& g = st.grid;
  RegimeRuns& cub = st.regimes[0];
  const double cbn = g.at("cub-like", kRowCBN).mean_accuracy;
  const double cbn_na = g.at("cub-like", kRowCBNNoAttributes).mean_accuracy;
  const double bn = g.at("cub-like", kRowBN).mean_accuracy;
  verdict(4, cbn >= 0.95 && cbn_na <= 0.20 && bn >= 0.70 && cub.seconds < 900.0,
          fmt("CUB-like 5 seeds: CBN %.3f, CBN bypassed %.3f, BN %.3f; regime training "
              "%.0fs",
              cbn, cbn_na, bn, cub.seconds));

  const double nv = g.at("cub-like", kRowCBNNoVisual).mean_accuracy;
  verdict(5, nv >= 0.95, fmt("CUB-like CBN on zeroed images %.3f", nv));

  {
    const double t_cbn = g.at("til-like", kRowCBN).mean_accuracy;
    const double t_bn = g.at("til-like", kRowBN).mean_accuracy;
    const double t_na = g.at("til-like", kRowCBNNoAttributes).mean_accuracy;
    const double t_nv = g.at("til-like", kRowCBNNoVisual).mean_accuracy;
    const double chance = 1.0 / 13.0;
    verdict(6, t_cbn > t_bn && t_bn > t_na && t_na > chance && t_nv < t_bn,
            fmt("TIL-like: CBN %.3f > BN %.3f > no-attr %.3f > chance %.3f; no-visual "
                "%.3f < BN",
                t_cbn, t_bn, t_na, chance, t_nv));
  }

  {
    bool identities = true;
    const std::vector<double> ends{0.0, 1.0};
    for (std::size_t k = 0; k < cub.seeds.size(); ++k) {
      const std::uint64_t s = cub.seeds[k];
      MicroResNet& model = cub.cbn[k].model;
      const Split& test = cub.data[k].test;
      SweepResult sw =
          test_mask_sweep(model, test, ends, MaskMode::delta_bypass, std::span(&s, 1));
      MicroResNet twin = model.bn_twin();
      identities = identities &&
                   sw.mean_accuracy[1] == evaluate(model, test).accuracy &&
                   sw.mean_accuracy[0] == evaluate(twin, test).accuracy;
    }
    const SweepResult* test_sweep = nullptr;
    const SweepResult* train_sweep = nullptr;
    for (const auto& [name, sw] : st.report.sweeps) {
      if (name == "cub-like.test_delta_bypass") test_sweep = &sw;
      if (name == "cub-like.train_delta_bypass") train_sweep = &sw;
    }
    const double rho_test = spearman(test_sweep->fractions, test_sweep->mean_accuracy);
    const double rho_train = spearman(train_sweep->fractions, train_sweep->mean_accuracy);
    verdict(7, identities && rho_test >= 0.8 && rho_train >= 0.8,
            fmt("endpoint identities %s; Spearman test-mask %.3f, train-mask %.3f",
                identities ? "exact" : "BROKEN", rho_test, rho_train));
  }

  {
    std::vector<double> f_na;
    for (std::size_t k = 0; k < cub.seeds.size(); ++k) {
      const std::vector<std::uint8_t> bypass(cub.data[k].test.size(), 1);
      f_na.push_back(evaluate(cub.supp[k].model, cub.data[k].test, nullptr, &bypass).accuracy);
    }
    const double f_with = g.at("cub-like", kRowCBNSupp).mean_accuracy;
    const double f_without = mean_of(f_na);
    verdict(8, f_without <= 0.20 && std::abs(f_with - cbn) <= 0.02,
            fmt("m=0.9: F with attributes %.3f (CBN %.3f), F without %.3f", f_with, cbn,
                f_without));
  }

  {
    auto find = [&](const std::string& regime, const std::string& model) {
      for (const auto& r : st.report.convergence) {
        if (r.regime == regime && r.model == model) return r;
      }
      return ConvergenceRow{};
    };
    const auto c_bn = find("cub-like", "BN");
    const auto c_cbn = find("cub-like", "CBN");
    const auto c_cont = find("cub-like", "CBN-continuous");
    const auto show = [](const ConvergenceRow& r) {
      return r.epochs ? std::to_string(*r.epochs) : std::string("never");
    };
    const bool ok = c_cbn.epochs && c_bn.epochs && c_cont.epochs &&
                    *c_cbn.epochs <= *c_bn.epochs && *c_cont.epochs <= *c_cbn.epochs;
    verdict(9, ok,
            fmt("epochs to 95%% of final: CBN %s, BN %s; continuous %s vs binary %s",
                show(c_cbn).c_str(), show(c_bn).c_str(), show(c_cont).c_str(),
                show(c_cbn).c_str()));
  }

  {
    bool maps_ok = true;
    std::size_t checked = 0;
    for (std::size_t k = 0; k < cub.seeds.size(); ++k) {
      const Split& test = cub.data[k].test;
      const std::size_t px = test.images.size() / test.size();
      for (std::size_t i = 0; i < 10; ++i) {
        Tensor image(Shape{1, 3, test.images.dim(2), test.images.dim(3)},
                     std::vector<double>(test.images.data().begin() + i * px,
                                         test.images.data().begin() + (i + 1) * px));
        const AttributeBatch attrs = test.attributes.rows(std::span(&i, 1));
        for (MicroResNet* m : {&cub.bn[k].model, &cub.cbn[k].model}) {
          SaliencyMap s = gradcam(*m, image, &attrs, false, test.labels[i]);
          double lo = 0.0, hi = 0.0;
          for (double v : s.heatmap.storage()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
          maps_ok = maps_ok && lo >= 0.0 && (s.all_zero ? hi == 0.0 : hi == 1.0);
          ++checked;
        }
      }
    }
    double s_bn = 0.0, s_cbn = 0.0;
    for (const auto& [regime, s] : st.report.saliency) {
      if (s.model == "BN") s_bn = s.mean_score;
      if (s.model == "CBN") s_cbn = s.mean_score;
    }
    verdict(10, maps_ok && s_bn > s_cbn,
            fmt("%zu maps non-negative, max 1 %s; localization BN %.3f vs CBN %.3f",
                checked, maps_ok ? "yes" : "NO", s_bn, s_cbn));
  }

  criterion_formats(st);

  std::printf("report written to %s\n", report_dir.string().c_str());
  std::printf("%s\n", failures == 0 ? "ALL CRITERIA PASS"
                                    : fmt("%d criteria FAIL", failures).c_str());
  return failures == 0 ? 0 : 1;
}
