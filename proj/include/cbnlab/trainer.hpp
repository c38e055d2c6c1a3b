#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cbnlab/datagen.hpp"
#include "cbnlab/model.hpp"

namespace cbnlab {

struct ExperimentConfig {
  ShortcutDatasetConfig dataset;
  std::string dataset_path;  // when set, load SCDS instead of generating
  ModelConfig model;
  NormKind norm_kind = NormKind::cbn;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  std::string optimizer = "sgd_momentum";
  double momentum = 0.9;
  bool cosine_decay = true;
  double train_mask_fraction = 0.0;
  MaskMode train_mask_mode = MaskMode::delta_bypass;
  double m = 0.9;
  bool supplementary_enabled = false;
  std::uint64_t seed = 0;
  std::size_t num_runs = 10;
  bool zero_images = false;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
nlohmann::json to_json(const ShortcutDatasetConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);
// Missing fields keep their defaults; unknown fields are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ShortcutDatasetConfig dataset_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct MetricsRecord {
  int run_id = 0;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string split;
  double test_mask_fraction = 0.0;
  double train_mask_fraction = 0.0;
  double accuracy = 0.0;
  double ce_loss = 0.0;
  double kl_loss = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "run_id,seed,epoch,split,test_mask_fraction,train_mask_fraction,accuracy,"
    "ce_loss,kl_loss";

// Shortest round-trip decimal form.
std::string format_double(double v);
void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> rows);

struct EvalResult {
  double accuracy = 0.0;
  double ce_loss = 0.0;
};

// Eval-mode accuracy and mean cross-entropy over a split. `attrs` overrides
// the split's attributes; `bypass` marks samples whose deltas are dropped.
EvalResult evaluate(MicroResNet& model, const Split& split,
                    const AttributeBatch* attrs = nullptr,
                    const std::vector<std::uint8_t>* bypass = nullptr,
                    std::size_t batch = 128);

// velocity <- momentum * velocity + grad; param <- param - lr * velocity.
// Throws NumericError, leaving every parameter untouched, if any gradient is
// non-finite.
void sgd_step(std::span<Tensor* const> params,
              std::vector<std::vector<double>>& velocities, double lr,
              double momentum);

class SgdMomentum {
 public:
  SgdMomentum(std::vector<NamedTensor> params, double momentum);
  void step(double lr);  // also zeroes the gradients

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
};

struct CompositeLoss {
  Var total;
  Var ce;
  Var kl;
};

// m * CE(F) + (1 - m) * KL(F || G). Pass G's logits as a tape constant so
// no gradient reaches G.
CompositeLoss composite_loss(Var logits_f, Var logits_g,
                             std::span<const int> labels, double m);

struct TrainResult {
  MicroResNet model;                       // F (or the single model)
  std::optional<MicroResNet> supplementary;  // G
  std::vector<MetricsRecord> metrics;
  bool diverged = false;
  std::string diagnostic;
  double test_accuracy = 0.0;
  std::vector<double> val_accuracy;  // index = epoch (0 = initialization)
};

// Model config with class count and attribute width taken from the data.
ModelConfig resolve_model_config(const ExperimentConfig& cfg,
                                 const Dataset& data);

// Loads or generates the configured dataset (zeroing images if requested).
Dataset prepare_dataset(const ExperimentConfig& cfg);

TrainResult train(const ExperimentConfig& cfg, const Dataset& data,
                  int run_id = 0);
TrainResult train_with_supplementary(const ExperimentConfig& cfg,
                                     const Dataset& data, int run_id = 0);

// Runs independent jobs on up to `jobs` threads; results keep job order.
template <typename T>
std::vector<T> run_parallel(const std::vector<std::function<T()>>& work,
                            std::size_t jobs) {
  std::vector<std::optional<T>> slots(work.size());
  std::vector<std::exception_ptr> errors(work.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= work.size()) return;
        i = next++;
      }
      try {
        slots[i].emplace(work[i]());
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, work.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<T> out;
  out.reserve(work.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

std::size_t default_jobs();

}  // namespace cbnlab
