#include "cbnlab/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cbnlab/error.hpp"

namespace cbnlab {

void SweepResult::validate() const {
  const std::size_t n = fractions.size();
  if (mean_accuracy.size() != n || std_accuracy.size() != n ||
      per_seed.size() != n) {
    throw ShapeError("sweep lists differ in length");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(std_accuracy[i] >= 0.0)) throw NumericError("negative sweep std");
    if (per_seed[i].size() != num_seeds) {
      throw ShapeError("sweep cell has wrong seed count");
    }
  }
  if (seeds.size() != num_seeds) throw ShapeError("sweep seed list mismatch");
}

std::vector<double> default_fraction_grid() {
  std::vector<double> grid(11);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid[i] = static_cast<double>(i) / 10.0;
  }
  return grid;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

ExperimentConfig seeded(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig c = cfg;
  c.seed = seed;
  c.dataset.seed = seed;
  return c;
}

namespace {

void fill_stats(SweepResult& r) {
  r.mean_accuracy.clear();
  r.std_accuracy.clear();
  for (const auto& cell : r.per_seed) {
    r.mean_accuracy.push_back(mean_of(cell));
    r.std_accuracy.push_back(std_of(cell));
  }
}

void check_fractions(std::span<const double> fractions) {
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) {
      throw ConfigError("sweep fractions must lie in [0,1]");
    }
  }
}

}  // namespace

SweepResult test_mask_sweep(MicroResNet& model, const Split& split,
                            std::span<const double> fractions, MaskMode mode,
                            std::span<const std::uint64_t> seeds) {
  if (model.norm_kind() != NormKind::cbn) {
    throw ConfigError("test_mask_sweep needs a CBN model");
  }
  check_fractions(fractions);
  SweepResult r;
  r.fractions.assign(fractions.begin(), fractions.end());
  r.mask_mode = mode;
  r.seeds.assign(seeds.begin(), seeds.end());
  r.num_seeds = seeds.size();
  for (double present : fractions) {
    std::vector<double> cell;
    for (std::uint64_t s : seeds) {
      MaskedAttributes m =
          mask_attributes(split.attributes, 1.0 - present, mode, s);
      cell.push_back(evaluate(model, split, &m.attributes, &m.bypass).accuracy);
    }
    r.per_seed.push_back(std::move(cell));
  }
  fill_stats(r);
  return r;
}

SweepResult train_mask_sweep(const ExperimentConfig& cfg,
                             std::span<const double> fractions,
                             std::span<const std::uint64_t> seeds,
                             std::size_t jobs) {
  check_fractions(fractions);
  std::vector<std::function<double()>> work;
  for (double present : fractions) {
    for (std::uint64_t s : seeds) {
      work.push_back([&cfg, present, s] {
        ExperimentConfig c = seeded(cfg, s);
        c.norm_kind = NormKind::cbn;
        c.supplementary_enabled = false;
        c.train_mask_fraction = 1.0 - present;
        const Dataset data = prepare_dataset(c);
        return train(c, data).test_accuracy;
      });
    }
  }
  const std::vector<double> acc = run_parallel(work, jobs);
  SweepResult r;
  r.fractions.assign(fractions.begin(), fractions.end());
  r.mask_mode = cfg.train_mask_mode;
  r.seeds.assign(seeds.begin(), seeds.end());
  r.num_seeds = seeds.size();
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    r.per_seed.emplace_back(acc.begin() + i * seeds.size(),
                            acc.begin() + (i + 1) * seeds.size());
  }
  fill_stats(r);
  return r;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean_of(rx), my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

RegimeRuns run_regime(const std::string& regime, const ExperimentConfig& base,
                      std::span<const std::uint64_t> seeds, std::size_t jobs) {
  RegimeRuns runs;
  runs.regime = regime;
  runs.base = base;
  runs.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t s : seeds) {
    ExperimentConfig c = seeded(base, s);
    c.zero_images = false;
    runs.data.push_back(prepare_dataset(c));
  }

  enum Variant { bn, cbn, supp, no_visual };
  std::vector<std::function<TrainResult()>> work;
  for (int v : {bn, cbn, supp, no_visual}) {
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const int run_id = static_cast<int>(work.size());
      work.push_back([&, v, i, run_id]() -> TrainResult {
        ExperimentConfig c = seeded(base, seeds[i]);
        c.zero_images = false;
        c.supplementary_enabled = false;
        c.train_mask_fraction = 0.0;
        c.norm_kind = v == bn ? NormKind::bn : NormKind::cbn;
        if (v == supp) {
          c.supplementary_enabled = true;
          return train_with_supplementary(c, runs.data[i], run_id);
        }
        if (v == no_visual) {
          c.zero_images = true;
          return train(c, zero_images(runs.data[i]), run_id);
        }
        return train(c, runs.data[i], run_id);
      });
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto results = run_parallel(work, jobs);
  runs.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::size_t n = seeds.size();
  for (std::size_t i = 0; i < results.size(); ++i) {
    auto& dst = i < n       ? runs.bn
                : i < 2 * n ? runs.cbn
                : i < 3 * n ? runs.supp
                            : runs.no_visual;
    dst.push_back(std::move(results[i]));
  }
  return runs;
}

std::vector<std::string> ablation_row_keys() {
  return {kRowBN, kRowCBN, kRowCBNNoAttributes, kRowCBNSupp, kRowCBNNoVisual};
}

bool AblationGrid::complete() const {
  std::map<std::string, std::size_t> per_regime;
  for (const auto& r : rows) ++per_regime[r.regime];
  if (per_regime.empty()) return false;
  const auto keys = ablation_row_keys();
  for (const auto& [regime, count] : per_regime) {
    if (count != keys.size()) return false;
    for (const auto& k : keys) {
      if (std::none_of(rows.begin(), rows.end(), [&](const AblationRow& r) {
            return r.regime == regime &&
                   r.training_model + "/" + r.testing_model == k;
          })) {
        return false;
      }
    }
  }
  return true;
}

const AblationRow& AblationGrid::at(const std::string& regime,
                                    const std::string& key) const {
  for (const auto& r : rows) {
    if (r.regime == regime && r.training_model + "/" + r.testing_model == key) {
      return r;
    }
  }
  throw ConfigError("ablation grid has no row " + regime + " " + key);
}

namespace {

double no_attribute_accuracy(const MicroResNet& model, const Split& test) {
  MicroResNet m = model;
  const std::vector<std::uint8_t> bypass(test.size(), 1);
  return evaluate(m, test, nullptr, &bypass).accuracy;
}

AblationRow make_row(const std::string& regime, const std::string& key,
                     std::vector<double> per_seed) {
  const auto slash = key.find('/');
  AblationRow row;
  row.regime = regime;
  row.training_model = key.substr(0, slash);
  row.testing_model = key.substr(slash + 1);
  row.mean_accuracy = mean_of(per_seed);
  row.std_accuracy = std_of(per_seed);
  row.per_seed = std::move(per_seed);
  return row;
}

}  // namespace

AblationGrid ablation_grid(std::span<const RegimeRuns> regimes) {
  if (regimes.empty()) throw ConfigError("ablation grid needs a regime");
  AblationGrid grid;
  grid.seeds = regimes.front().seeds;
  for (const auto& r : regimes) {
    if (r.bn.size() != r.seeds.size() || r.cbn.size() != r.seeds.size() ||
        r.supp.size() != r.seeds.size() ||
        r.no_visual.size() != r.seeds.size()) {
      throw ConfigError("regime " + r.regime + " is missing runs");
    }
    auto test_acc = [](const std::vector<TrainResult>& v) {
      std::vector<double> out;
      for (const auto& t : v) out.push_back(t.test_accuracy);
      return out;
    };
    std::vector<double> no_attr;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      no_attr.push_back(no_attribute_accuracy(r.cbn[i].model, r.data[i].test));
    }
    grid.rows.push_back(make_row(r.regime, kRowBN, test_acc(r.bn)));
    grid.rows.push_back(make_row(r.regime, kRowCBN, test_acc(r.cbn)));
    grid.rows.push_back(make_row(r.regime, kRowCBNNoAttributes, no_attr));
    grid.rows.push_back(make_row(r.regime, kRowCBNSupp, test_acc(r.supp)));
    grid.rows.push_back(make_row(r.regime, kRowCBNNoVisual, test_acc(r.no_visual)));
  }
  return grid;
}

AblationGrid run_ablation_grid(
    const std::vector<std::pair<std::string, ExperimentConfig>>& regimes,
    std::span<const std::uint64_t> seeds, std::size_t jobs) {
  std::vector<RegimeRuns> runs;
  for (const auto& [name, cfg] : regimes) {
    runs.push_back(run_regime(name, cfg, seeds, jobs));
  }
  return ablation_grid(runs);
}

std::optional<std::size_t> epochs_to_threshold(std::span<const double> curve,
                                               double fraction) {
  if (curve.empty()) return std::nullopt;
  const double t = fraction * curve.back();
  for (std::size_t e = 0; e < curve.size(); ++e) {
    if (curve[e] >= t) return e;
  }
  return std::nullopt;
}

std::vector<double> mean_val_curve(
    std::span<const std::vector<MetricsRecord>> runs) {
  std::vector<double> sum;
  std::vector<std::size_t> count;
  for (const auto& run : runs) {
    for (const auto& m : run) {
      if (m.split != "val" || m.epoch < 0) continue;
      const auto e = static_cast<std::size_t>(m.epoch);
      if (e >= sum.size()) {
        sum.resize(e + 1, 0.0);
        count.resize(e + 1, 0);
      }
      sum[e] += m.accuracy;
      ++count[e];
    }
  }
  std::vector<double> curve;
  for (std::size_t e = 0; e < sum.size(); ++e) {
    if (count[e] == 0) break;
    curve.push_back(sum[e] / static_cast<double>(count[e]));
  }
  return curve;
}

ConvergenceRow convergence_row(const std::string& regime,
                               const std::string& model,
                               std::span<const std::vector<MetricsRecord>> runs,
                               double fraction) {
  const auto curve = mean_val_curve(runs);
  ConvergenceRow row;
  row.regime = regime;
  row.model = model;
  if (!curve.empty()) {
    row.final_accuracy = curve.back();
    row.threshold = fraction * curve.back();
  }
  row.epochs = epochs_to_threshold(curve, fraction);
  return row;
}

double localization_score(const Tensor& heatmap, const Box& box) {
  if (heatmap.rank() != 2) throw ShapeError("heatmap must be [H,W]");
  const std::size_t h = heatmap.dim(0), w = heatmap.dim(1);
  if (box.x1 > w || box.y1 > h || box.x0 > box.x1 || box.y0 > box.y1) {
    throw ShapeError("box outside heatmap");
  }
  double total = 0.0, inside = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = heatmap[y * w + x];
      if (v < 0.0) throw NumericError("negative heatmap value");
      total += v;
      if (y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1) inside += v;
    }
  }
  if (total == 0.0) return 0.0;
  return std::clamp(inside / total, 0.0, 1.0);
}

Tensor upsample_nearest(const Tensor& map, std::size_t height,
                        std::size_t width) {
  if (map.rank() != 2 || map.dim(0) == 0 || map.dim(1) == 0) {
    throw ShapeError("upsample_nearest takes a non-empty [h,w] map");
  }
  const std::size_t h = map.dim(0), w = map.dim(1);
  Tensor out(Shape{height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * h / height;
    for (std::size_t x = 0; x < width; ++x) {
      out[y * width + x] = map[sy * w + x * w / width];
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("PGM map must be [H,W]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(map[i], 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  if (!os) throw Error("failed writing " + path.string());
}

std::vector<SaliencyScore> saliency_compare(
    std::span<const SaliencySubject> subjects, const Split& split,
    std::span<const ClassGeometry> geometry, std::size_t max_examples,
    const std::optional<std::filesystem::path>& heatmap_dir) {
  const std::size_t n = std::min(max_examples, split.size());
  if (split.images.rank() != 4) throw ShapeError("split images must be 4-D");
  const std::size_t c = split.images.dim(1), h = split.images.dim(2),
                    w = split.images.dim(3);
  if (heatmap_dir) std::filesystem::create_directories(*heatmap_dir);
  std::vector<SaliencyScore> out;
  for (const auto& subject : subjects) {
    if (!subject.model) throw ConfigError("saliency subject without model");
    SaliencyScore score;
    score.model = subject.name;
    for (std::size_t i = 0; i < n; ++i) {
      const int label = split.labels[i];
      if (static_cast<std::size_t>(label) >= geometry.size()) {
        throw ShapeError("no geometry for class " + std::to_string(label));
      }
      const std::size_t px = c * h * w;
      Tensor image(Shape{1, c, h, w},
                   std::vector<double>(split.images.data().begin() + i * px,
                                       split.images.data().begin() + (i + 1) * px));
      const std::size_t row = i;
      const AttributeBatch attrs = split.attributes.rows(std::span(&row, 1));
      SaliencyMap map = gradcam(*subject.model, image, &attrs, subject.bypass, label);
      const Tensor full = upsample_nearest(map.heatmap, h, w);
      const double s = localization_score(full, geometry[label].box);
      score.scores.push_back(s);
      score.zero_maps += map.all_zero;
      if (heatmap_dir) {
        write_pgm(*heatmap_dir / (subject.name + "_" + std::to_string(i) + ".pgm"),
                  full);
      }
    }
    score.examples = n;
    score.mean_score = mean_of(score.scores);
    out.push_back(std::move(score));
  }
  return out;
}

SweepResult merge_seed_sweeps(std::span<const SweepResult> parts) {
  if (parts.empty()) throw ConfigError("no sweeps to merge");
  SweepResult r;
  r.fractions = parts.front().fractions;
  r.mask_mode = parts.front().mask_mode;
  r.per_seed.resize(r.fractions.size());
  for (const auto& p : parts) {
    if (p.fractions != r.fractions || p.mask_mode != r.mask_mode) {
      throw ConfigError("sweeps to merge differ in grid or mask mode");
    }
    r.seeds.insert(r.seeds.end(), p.seeds.begin(), p.seeds.end());
    for (std::size_t i = 0; i < r.fractions.size(); ++i) {
      r.per_seed[i].insert(r.per_seed[i].end(), p.per_seed[i].begin(),
                           p.per_seed[i].end());
    }
  }
  r.num_seeds = r.seeds.size();
  fill_stats(r);
  return r;
}

ShortcutDatasetConfig regime_dataset(const std::string& regime,
                                     ShortcutDatasetConfig base) {
  if (regime == "custom") return base;
  ShortcutDatasetConfig preset;
  if (regime == "cub-like") {
    preset = ShortcutDatasetConfig::cub_like();
  } else if (regime == "til-like") {
    preset = ShortcutDatasetConfig::til_like();
  } else {
    throw ConfigError("unknown regime '" + regime +
                      "' (expected cub-like, til-like or custom)");
  }
  base.num_classes = preset.num_classes;
  base.attribute_dim = preset.attribute_dim;
  base.rho = preset.rho;
  base.visual_noise_sigma = preset.visual_noise_sigma;
  return base;
}

Study run_study(const ExperimentConfig& base,
                const std::vector<std::string>& regimes,
                const StudyOptions& options) {
  if (regimes.empty()) throw ConfigError("study needs at least one regime");
  if (options.seeds.empty()) throw ConfigError("study needs at least one seed");
  const auto& seeds = options.seeds;
  Study st;
  st.report.seeds = seeds;
  for (const auto& name : regimes) {
    ExperimentConfig c = base;
    c.dataset = regime_dataset(name, base.dataset);
    st.report.config_digests[name] = config_digest(c.dataset);
    st.regimes.push_back(run_regime(name, c, seeds, options.jobs));
  }
  st.grid = ablation_grid(st.regimes);
  st.report.ablation = st.grid;

  for (auto& r : st.regimes) {
    for (MaskMode mode : {MaskMode::delta_bypass, MaskMode::dimension_zero}) {
      std::vector<SweepResult> parts;
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        const std::uint64_t s = seeds[k];
        parts.push_back(test_mask_sweep(r.cbn[k].model, r.data[k].test,
                                        options.fractions, mode,
                                        std::span(&s, 1)));
      }
      st.report.sweeps.emplace_back(r.regime + ".test_" + to_string(mode),
                                    merge_seed_sweeps(parts));
    }
  }

  RegimeRuns& first = st.regimes.front();
  if (options.continuous_ablation) {
    std::vector<std::function<TrainResult()>> work;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      work.push_back([&first, &seeds, k] {
        ExperimentConfig c = seeded(first.base, seeds[k]);
        c.norm_kind = NormKind::cbn;
        c.supplementary_enabled = false;
        c.zero_images = false;
        c.train_mask_fraction = 0.0;
        c.dataset.attribute_kind = AttributeKind::continuous;
        return train(c, prepare_dataset(c), static_cast<int>(k));
      });
    }
    st.continuous = run_parallel(work, options.jobs);
  }

  auto metrics_of = [](const std::vector<TrainResult>& runs) {
    std::vector<std::vector<MetricsRecord>> out;
    for (const auto& t : runs) out.push_back(t.metrics);
    return out;
  };
  for (const auto& r : st.regimes) {
    st.report.convergence.push_back(convergence_row(r.regime, "BN", metrics_of(r.bn)));
    st.report.convergence.push_back(
        convergence_row(r.regime, "CBN", metrics_of(r.cbn)));
    if (&r == &first && !st.continuous.empty()) {
      st.report.convergence.push_back(
          convergence_row(r.regime, "CBN-continuous", metrics_of(st.continuous)));
    }
  }

  if (options.train_sweep) {
    ExperimentConfig c = first.base;
    c.norm_kind = NormKind::cbn;
    c.supplementary_enabled = false;
    c.zero_images = false;
    st.report.sweeps.emplace_back(
        first.regime + ".train_" + to_string(c.train_mask_mode),
        train_mask_sweep(c, options.fractions, seeds, options.jobs));
  }

  if (options.saliency_examples > 0) {
    std::vector<SaliencyScore> pooled;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const auto geometry = class_geometry(seeded(first.base, seeds[k]).dataset);
      const SaliencySubject subjects[] = {
          {"BN", &first.bn[k].model, false},
          {"CBN", &first.cbn[k].model, false},
          {"CBN-bypassed", &first.cbn[k].model, true}};
      std::optional<std::filesystem::path> dir;
      if (options.heatmap_dir) {
        dir = *options.heatmap_dir / (first.regime + "_seed" + std::to_string(seeds[k]));
      }
      auto scores = saliency_compare(subjects, first.data[k].test, geometry,
                                     options.saliency_examples, dir);
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
    for (auto& p : pooled) {
      p.mean_score = mean_of(p.scores);
      st.report.saliency.emplace_back(first.regime, std::move(p));
    }
  }
  return st;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  return os;
}

void close_out(std::ofstream& os, const std::filesystem::path& path) {
  os.close();
  if (!os) throw Error("failed writing " + path.string());
}

}  // namespace

void emit_report(const Report& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  using nlohmann::json;
  const auto fd = [](double v) { return format_double(v); };

  {
    const auto path = out_dir / "sweeps.csv";
    auto os = open_out(path);
    os << "sweep,fraction_present,fraction_masked,mask_mode,num_seeds,"
          "mean_accuracy,std_accuracy\n";
    for (const auto& [name, s] : report.sweeps) {
      s.validate();
      for (std::size_t i = 0; i < s.fractions.size(); ++i) {
        os << name << ',' << fd(s.fractions[i]) << ',' << fd(1.0 - s.fractions[i])
           << ',' << to_string(s.mask_mode) << ',' << s.num_seeds << ','
           << fd(s.mean_accuracy[i]) << ',' << fd(s.std_accuracy[i]) << '\n';
      }
    }
    close_out(os, path);
  }
  {
    const auto path = out_dir / "sweep_runs.csv";
    auto os = open_out(path);
    os << "sweep,fraction_present,fraction_masked,seed,accuracy\n";
    for (const auto& [name, s] : report.sweeps) {
      for (std::size_t i = 0; i < s.fractions.size(); ++i) {
        for (std::size_t k = 0; k < s.num_seeds; ++k) {
          os << name << ',' << fd(s.fractions[i]) << ','
             << fd(1.0 - s.fractions[i]) << ',' << s.seeds[k] << ','
             << fd(s.per_seed[i][k]) << '\n';
        }
      }
    }
    close_out(os, path);
  }
  json rows = json::array();
  {
    const auto path = out_dir / "ablation.csv";
    const auto runs_path = out_dir / "ablation_runs.csv";
    auto os = open_out(path);
    auto rs = open_out(runs_path);
    os << "regime,training_model,testing_model,num_seeds,mean_accuracy,"
          "std_accuracy\n";
    rs << "regime,training_model,testing_model,seed,accuracy\n";
    if (report.ablation) {
      const auto& g = *report.ablation;
      for (const auto& r : g.rows) {
        os << r.regime << ',' << r.training_model << ',' << r.testing_model
           << ',' << r.per_seed.size() << ',' << fd(r.mean_accuracy) << ','
           << fd(r.std_accuracy) << '\n';
        for (std::size_t k = 0; k < r.per_seed.size(); ++k) {
          rs << r.regime << ',' << r.training_model << ',' << r.testing_model
             << ',' << (k < g.seeds.size() ? g.seeds[k] : k) << ','
             << fd(r.per_seed[k]) << '\n';
        }
        rows.push_back({{"regime", r.regime},
                        {"training_model", r.training_model},
                        {"testing_model", r.testing_model},
                        {"mean_accuracy", r.mean_accuracy},
                        {"std_accuracy", r.std_accuracy},
                        {"per_seed", r.per_seed}});
      }
    }
    close_out(os, path);
    close_out(rs, runs_path);
  }
  {
    const auto path = out_dir / "convergence.csv";
    auto os = open_out(path);
    os << "regime,model,final_accuracy,threshold,epochs_to_threshold\n";
    for (const auto& r : report.convergence) {
      os << r.regime << ',' << r.model << ',' << fd(r.final_accuracy) << ','
         << fd(r.threshold) << ',';
      if (r.epochs) os << *r.epochs;
      os << '\n';
    }
    close_out(os, path);
  }
  {
    const auto path = out_dir / "saliency.csv";
    auto os = open_out(path);
    os << "regime,model,examples,zero_maps,mean_score\n";
    for (const auto& [regime, s] : report.saliency) {
      os << regime << ',' << s.model << ',' << s.examples << ',' << s.zero_maps
         << ',' << fd(s.mean_score) << '\n';
    }
    close_out(os, path);
  }
  {
    json summary;
    summary["config_digest"] = json::object();
    for (const auto& [regime, digest] : report.config_digests) {
      summary["config_digest"][regime] = digest;
    }
    summary["seeds"] = report.seeds;
    summary["rows"] = rows;
    const auto path = out_dir / "summary.json";
    auto os = open_out(path);
    os << summary.dump(2) << '\n';
    close_out(os, path);
  }
}

}  // namespace cbnlab
