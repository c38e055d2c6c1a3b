#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbnlab/datagen.hpp"
#include "cbnlab/model.hpp"
#include "cbnlab/trainer.hpp"

namespace cbnlab {

// Accuracy against the fraction of attributes PRESENT (1 = full CBN).
struct SweepResult {
  std::vector<double> fractions;
  std::vector<double> mean_accuracy;
  std::vector<double> std_accuracy;
  std::size_t num_seeds = 0;
  MaskMode mask_mode = MaskMode::delta_bypass;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> per_seed;  // [fraction][seed]

  void validate() const;
};

// {0.0, 0.1, ..., 1.0}
std::vector<double> default_fraction_grid();

// Sample mean and standard deviation (n - 1 denominator, 0 for n < 2).
double mean_of(std::span<const double> v);
double std_of(std::span<const double> v);

// Seed-derived run: the seed drives both the dataset draw and the model.
ExperimentConfig seeded(const ExperimentConfig& cfg, std::uint64_t seed);

// Evaluates `model` on `split` with 1 - f of the attributes masked for each
// present-fraction f, once per mask seed. Throws ConfigError for BN models.
SweepResult test_mask_sweep(MicroResNet& model, const Split& split,
                            std::span<const double> fractions, MaskMode mode,
                            std::span<const std::uint64_t> seeds);

// One CBN training run per (present-fraction, seed), evaluated on the test
// split with all attributes.
SweepResult train_mask_sweep(const ExperimentConfig& cfg,
                             std::span<const double> fractions,
                             std::span<const std::uint64_t> seeds,
                             std::size_t jobs);

// Concatenates single-model sweeps over the same grid along the seed axis.
SweepResult merge_seed_sweeps(std::span<const SweepResult> parts);

// Spearman rank correlation with average ranks for ties. NaN when either
// side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

inline constexpr const char* kRowBN = "BN/BN";
inline constexpr const char* kRowCBN = "CBN/CBN";
inline constexpr const char* kRowCBNNoAttributes = "CBN/CBN-no-attributes";
inline constexpr const char* kRowCBNSupp = "CBN+Supp/CBN+Supp";
inline constexpr const char* kRowCBNNoVisual = "CBN-no-visual/CBN-no-visual";

struct RegimeRuns {
  std::string regime;
  ExperimentConfig base;
  std::vector<std::uint64_t> seeds;
  std::vector<Dataset> data;  // per seed, images intact
  std::vector<TrainResult> bn, cbn, supp, no_visual;
  double seconds = 0.0;  // wall time of all training in this regime
};

// Trains the five table variants for every seed.
RegimeRuns run_regime(const std::string& regime, const ExperimentConfig& base,
                      std::span<const std::uint64_t> seeds, std::size_t jobs);

struct AblationRow {
  std::string regime;
  std::string training_model;
  std::string testing_model;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> per_seed;
};

struct AblationGrid {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  // Every regime carries all five rows.
  bool complete() const;
  const AblationRow& at(const std::string& regime, const std::string& key) const;
};

std::vector<std::string> ablation_row_keys();

AblationGrid ablation_grid(std::span<const RegimeRuns> regimes);
AblationGrid run_ablation_grid(
    const std::vector<std::pair<std::string, ExperimentConfig>>& regimes,
    std::span<const std::uint64_t> seeds, std::size_t jobs);

struct ConvergenceRow {
  std::string regime;
  std::string model;
  double final_accuracy = 0.0;
  double threshold = 0.0;
  std::optional<std::size_t> epochs;  // empty = never reached
};

// First epoch whose value reaches fraction * final value.
std::optional<std::size_t> epochs_to_threshold(std::span<const double> curve,
                                               double fraction = 0.95);

// Per-epoch mean of the "val" records across runs.
std::vector<double> mean_val_curve(
    std::span<const std::vector<MetricsRecord>> runs);

ConvergenceRow convergence_row(const std::string& regime,
                               const std::string& model,
                               std::span<const std::vector<MetricsRecord>> runs,
                               double fraction = 0.95);

// Fraction of heatmap mass inside `box`; 0 for an all-zero map.
double localization_score(const Tensor& heatmap, const Box& box);

// Nearest-neighbour resize of a [h,w] map to [height,width].
Tensor upsample_nearest(const Tensor& map, std::size_t height,
                        std::size_t width);

// Binary PGM ("P5", maxval 255) of a [H,W] map with values in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& map);

struct SaliencySubject {
  std::string name;
  MicroResNet* model = nullptr;
  bool bypass = false;
};

struct SaliencyScore {
  std::string model;
  double mean_score = 0.0;
  std::size_t examples = 0;
  std::size_t zero_maps = 0;
  std::vector<double> scores;
};

// Grad-CAM for the true class of the first `max_examples` samples of `split`,
// scored against the class box. Heatmaps go to `heatmap_dir` when given.
std::vector<SaliencyScore> saliency_compare(
    std::span<const SaliencySubject> subjects, const Split& split,
    std::span<const ClassGeometry> geometry, std::size_t max_examples,
    const std::optional<std::filesystem::path>& heatmap_dir = std::nullopt);

struct Report {
  std::map<std::string, std::string> config_digests;  // regime -> digest
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<std::string, SweepResult>> sweeps;
  std::optional<AblationGrid> ablation;
  std::vector<ConvergenceRow> convergence;
  std::vector<std::pair<std::string, SaliencyScore>> saliency;  // regime
};

// Regime presets override class count, attribute width, rho and noise;
// "custom" keeps `base` unchanged.
ShortcutDatasetConfig regime_dataset(const std::string& regime,
                                     ShortcutDatasetConfig base);

struct StudyOptions {
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  std::vector<double> fractions = default_fraction_grid();
  bool train_sweep = true;
  bool continuous_ablation = true;
  std::size_t saliency_examples = 20;
  std::optional<std::filesystem::path> heatmap_dir;
};

struct Study {
  std::vector<RegimeRuns> regimes;
  AblationGrid grid;
  std::vector<TrainResult> continuous;  // first regime, continuous attributes
  Report report;
};

// Table variants for every regime, test-mask sweeps (both mask modes) on
// every regime, the train-mask sweep and saliency on the first regime, and
// convergence rows for BN, CBN and the continuous-attribute CBN.
Study run_study(const ExperimentConfig& base,
                const std::vector<std::string>& regimes,
                const StudyOptions& options);

// sweeps.csv, sweep_runs.csv, ablation.csv, ablation_runs.csv,
// convergence.csv, saliency.csv and summary.json.
void emit_report(const Report& report, const std::filesystem::path& out_dir);

}  // namespace cbnlab
