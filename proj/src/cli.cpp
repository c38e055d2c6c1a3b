#include "cbnlab/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "cbnlab/diagnostics.hpp"
#include "cbnlab/error.hpp"
#include "cbnlab/gradient_suite.hpp"
#include "cbnlab/report.hpp"

namespace cbnlab {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string out;
  std::string regime;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = default_jobs();
  std::string mask_mode = "delta_bypass";
  std::size_t examples = 20;
  std::size_t trials = 20;
};

constexpr const char* kPrecedence =
    "Settings resolve as built-in defaults, then --config, then --regime, then "
    "--seed (command line wins). The resolved configuration is written to "
    "<out>/config.json and can be fed back through --config.";

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw ConfigError("cannot read config " + o.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + o.config + ": " + e.what());
    }
    cfg = experiment_config_from_json(j);
  }
  if (!o.regime.empty()) cfg.dataset = regime_dataset(o.regime, cfg.dataset);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.dataset.seed = *o.seed;
  }
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("failed writing " + path.string());
}

void write_config(const fs::path& dir, const ExperimentConfig& cfg) {
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
}

std::vector<std::uint64_t> seed_list(const ExperimentConfig& cfg) {
  std::vector<std::uint64_t> seeds(std::max<std::size_t>(1, cfg.num_runs));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = cfg.seed + i;
  return seeds;
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  const fs::path dir = prepare_out(o);
  const Dataset data = generate(cfg.dataset);
  save_dataset(data, dir / "dataset.scds");
  write_config(dir, cfg);
  out << "wrote " << (dir / "dataset.scds").string() << " (" << data.train.size()
      << "/" << data.val.size() << "/" << data.test.size()
      << " train/val/test)\nconfig digest " << config_digest(cfg.dataset) << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve(o);
  const fs::path dir = prepare_out(o);
  write_config(dir, cfg);
  const Dataset data = prepare_dataset(cfg);
  TrainResult r = cfg.supplementary_enabled ? train_with_supplementary(cfg, data)
                                            : train(cfg, data);
  {
    std::ofstream os(dir / "metrics.csv", std::ios::binary);
    write_metrics_csv(os, r.metrics);
  }
  const std::string cfg_json = to_json(cfg).dump(2) + "\n";
  save_checkpoint(r.model, dir / "model.ckpt", cfg_json);
  if (r.supplementary) {
    save_checkpoint(*r.supplementary, dir / "supplementary.ckpt", cfg_json);
  }
  if (r.diverged) {
    err << "training diverged: " << r.diagnostic << '\n';
    return 2;
  }
  out << "test accuracy " << format_double(r.test_accuracy) << '\n';
  if (r.model.norm_kind() == NormKind::cbn) {
    const std::vector<std::uint8_t> bypass(data.test.size(), 1);
    out << "test accuracy without attributes "
        << format_double(evaluate(r.model, data.test, nullptr, &bypass).accuracy)
        << '\n';
  }
  return 0;
}

int cmd_sweep_test_mask(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = resolve(o);
  cfg.norm_kind = NormKind::cbn;
  cfg.supplementary_enabled = false;
  const fs::path dir = prepare_out(o);
  write_config(dir, cfg);
  const MaskMode mode = mask_mode_from_string(o.mask_mode);
  const auto seeds = seed_list(cfg);
  std::vector<std::function<SweepResult()>> work;
  for (std::uint64_t s : seeds) {
    work.push_back([&cfg, s, mode] {
      const ExperimentConfig c = seeded(cfg, s);
      const Dataset data = prepare_dataset(c);
      TrainResult r = train(c, data);
      return test_mask_sweep(r.model, data.test, default_fraction_grid(), mode,
                             std::span(&s, 1));
    });
  }
  const auto parts = run_parallel(work, o.jobs);
  Report report;
  report.seeds = seeds;
  report.config_digests["custom"] = config_digest(cfg.dataset);
  report.sweeps.emplace_back("test_" + to_string(mode), merge_seed_sweeps(parts));
  emit_report(report, dir);
  print_report(dir, out);
  return 0;
}

int cmd_sweep_train_mask(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = resolve(o);
  cfg.norm_kind = NormKind::cbn;
  cfg.supplementary_enabled = false;
  const fs::path dir = prepare_out(o);
  write_config(dir, cfg);
  const auto seeds = seed_list(cfg);
  Report report;
  report.seeds = seeds;
  report.config_digests["custom"] = config_digest(cfg.dataset);
  report.sweeps.emplace_back(
      "train_" + to_string(cfg.train_mask_mode),
      train_mask_sweep(cfg, default_fraction_grid(), seeds, o.jobs));
  emit_report(report, dir);
  print_report(dir, out);
  return 0;
}

int cmd_ablation_grid(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  const fs::path dir = prepare_out(o);
  write_config(dir, cfg);
  StudyOptions opt;
  opt.seeds = seed_list(cfg);
  opt.jobs = o.jobs;
  opt.saliency_examples = o.examples;
  opt.heatmap_dir = dir / "heatmaps";
  const Study st = run_study(cfg, {"cub-like", "til-like"}, opt);
  emit_report(st.report, dir);
  print_report(dir, out);
  return 0;
}

int cmd_saliency(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  const fs::path dir = prepare_out(o);
  write_config(dir, cfg);
  const auto seeds = seed_list(cfg);
  std::vector<std::function<TrainResult()>> work;
  for (std::uint64_t s : seeds) {
    for (NormKind kind : {NormKind::bn, NormKind::cbn}) {
      work.push_back([&cfg, s, kind] {
        ExperimentConfig c = seeded(cfg, s);
        c.norm_kind = kind;
        c.supplementary_enabled = false;
        return train(c, prepare_dataset(c));
      });
    }
  }
  auto runs = run_parallel(work, o.jobs);
  std::vector<SaliencyScore> pooled;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const ExperimentConfig c = seeded(cfg, seeds[k]);
    const Dataset data = prepare_dataset(c);
    const auto geometry = class_geometry(c.dataset);
    const SaliencySubject subjects[] = {{"BN", &runs[2 * k].model, false},
                                        {"CBN", &runs[2 * k + 1].model, false},
                                        {"CBN-bypassed", &runs[2 * k + 1].model, true}};
    auto scores = saliency_compare(subjects, data.test, geometry, o.examples,
                                   dir / "heatmaps" / ("seed" + std::to_string(seeds[k])));
    if (pooled.empty()) {
      pooled = std::move(scores);
      continue;
    }
    for (std::size_t i = 0; i < pooled.size(); ++i) {
      pooled[i].scores.insert(pooled[i].scores.end(), scores[i].scores.begin(),
                              scores[i].scores.end());
      pooled[i].examples += scores[i].examples;
      pooled[i].zero_maps += scores[i].zero_maps;
    }
  }
  Report report;
  report.seeds = seeds;
  report.config_digests["custom"] = config_digest(cfg.dataset);
  for (auto& p : pooled) {
    p.mean_score = mean_of(p.scores);
    report.saliency.emplace_back("custom", std::move(p));
  }
  emit_report(report, dir);
  print_report(dir, out);
  return 0;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw ConfigError("--out must name a report directory");
  print_report(o.out, out);
  const AggregateCheck check = check_report_aggregates(o.out);
  out << "\naggregates recomputed for " << check.groups
      << " groups, max deviation " << check.max_abs_error << '\n';
  if (check.max_abs_error > 1e-12) {
    err << "aggregates disagree with per-seed rows\n";
    return 2;
  }
  return 0;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  const auto entries = gradient_suite(cfg.seed, o.trials);
  bool ok = true;
  std::ostringstream csv;
  csv << "op,trials,max_rel_error,pass\n";
  for (const auto& e : entries) {
    out << std::left << std::setw(24) << e.op << std::scientific
        << std::setprecision(3) << e.max_rel_error << (e.pass ? "  ok" : "  FAIL")
        << '\n';
    csv << e.op << ',' << e.trials << ',' << format_double(e.max_rel_error) << ','
        << (e.pass ? 1 : 0) << '\n';
    ok = ok && e.pass;
  }
  if (!o.out.empty()) {
    const fs::path dir = prepare_out(o);
    write_config(dir, cfg);
    write_text(dir / "grad_check.csv", csv.str());
  }
  return ok ? 0 : 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Conditional batch normalization shortcut-learning lab.\n" +
                   std::string(kPrecedence),
               "cbnlab"};
  app.require_subcommand(1, 1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config JSON")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory (created if absent)");
    sub->add_option("--seed", o.seed, "base seed (runs use seed, seed+1, ...)");
    sub->add_option("--regime", o.regime, "dataset preset")
        ->check(CLI::IsMember({"cub-like", "til-like", "custom"}));
    sub->add_option("--jobs", o.jobs, "concurrent runs")->check(CLI::PositiveNumber);
    return sub;
  };
  auto* gen = common(app.add_subcommand("gen-data", "generate and save a dataset"));
  auto* trn = common(app.add_subcommand("train", "train one model"));
  auto* stm = common(app.add_subcommand("sweep-test-mask",
                                        "accuracy vs attributes present at test time"));
  stm->add_option("--mask-mode", o.mask_mode)
      ->check(CLI::IsMember({"delta_bypass", "dimension_zero"}));
  auto* str = common(app.add_subcommand("sweep-train-mask",
                                        "accuracy vs attributes present in training"));
  auto* abl = common(app.add_subcommand(
      "ablation-grid", "both regimes: table variants, sweeps, convergence, saliency"));
  abl->add_option("--examples", o.examples, "saliency examples per seed");
  auto* sal = common(app.add_subcommand("saliency", "Grad-CAM localization of BN vs CBN"));
  sal->add_option("--examples", o.examples, "examples per seed");
  auto* rep = common(app.add_subcommand("report", "print and check a report directory"));
  auto* grd = common(app.add_subcommand("grad-check", "finite-difference gradient suite"));
  grd->add_option("--trials", o.trials, "random draws per op")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    if (args.empty()) err << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (trn->parsed()) return cmd_train(o, out, err);
    if (stm->parsed()) return cmd_sweep_test_mask(o, out);
    if (str->parsed()) return cmd_sweep_train_mask(o, out);
    if (abl->parsed()) return cmd_ablation_grid(o, out);
    if (sal->parsed()) return cmd_saliency(o, out);
    if (rep->parsed()) return cmd_report(o, out, err);
    if (grd->parsed()) return cmd_grad_check(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace cbnlab
