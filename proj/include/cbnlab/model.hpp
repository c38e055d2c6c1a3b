#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbnlab/conditioning.hpp"
#include "cbnlab/normalization.hpp"
#include "cbnlab/tape.hpp"

namespace cbnlab {

enum class NormKind { bn, cbn };

std::string to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& s);

// Which norm layers of the CBN variant receive deltas.
enum class CondScope { all, last_stage };

std::string to_string(CondScope scope);
CondScope cond_scope_from_string(const std::string& s);

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> stage_channels{16, 32};
  std::size_t num_classes = 10;
  std::size_t attribute_dim = 32;
  std::size_t aux_hidden = 64;
  AuxLayout aux_layout = AuxLayout::shared_trunk;
  CondScope cond_scope = CondScope::all;
  double norm_epsilon = 1e-5;
  double norm_momentum = 0.1;

  void validate() const;
};

// Stem conv, one residual block per stage, global average pool, linear head.
// Stages after the first halve the resolution with a 4x4/stride-2 conv and a
// 2x2/stride-2 projection shortcut.
class MicroResNet {
 public:
  MicroResNet() = default;
  MicroResNet(const ModelConfig& cfg, NormKind kind, std::uint64_t seed);

  struct Output {
    Var logits;       // [N,K]
    Var feature_map;  // raw output of the last conv of the last stage
  };

  // `bypass` (one flag per sample) suppresses deltas; a CBN model needs
  // either attributes or every sample bypassed. BN models ignore both.
  Output forward(Tape& tape, const Tensor& images, const AttributeBatch* attrs,
                 const std::vector<std::uint8_t>* bypass, Mode mode);

  NormKind norm_kind() const { return kind_; }
  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  // Trainable tensors, backbone first, in a stable order.
  std::vector<NamedTensor> parameters();
  struct StateEntry {
    std::string name;
    Shape shape;
    std::span<double> values;
  };
  // Trainable tensors plus running statistics, for checkpoints.
  std::vector<StateEntry> state_entries();
  std::size_t parameter_count();

  // Channel count of every conditioned norm layer, in forward order.
  std::vector<std::size_t> conditioned_channels() const;
  AuxiliaryNet* auxiliary() { return aux_ ? &*aux_ : nullptr; }

  // BN model sharing this model's backbone weights and statistics.
  MicroResNet bn_twin() const;

  void zero_grad();

 private:
  struct ConvNorm {
    Tensor kernel;
    NormLayerState norm;
    int stride = 1;
    int padding = 1;
    bool conditioned = false;
  };
  struct Block {
    ConvNorm a, b;
    std::optional<ConvNorm> proj;
  };

  Var conv_norm(Tape& tape, Var x, ConvNorm& layer, Mode mode,
                const std::vector<CondDeltas>& deltas, std::size_t& next,
                Var* conv_out = nullptr);

  ModelConfig cfg_;
  NormKind kind_ = NormKind::bn;
  std::uint64_t seed_ = 0;
  ConvNorm stem_;
  std::vector<Block> blocks_;
  Tensor head_w_, head_b_;
  std::optional<AuxiliaryNet> aux_;
};

struct SaliencyMap {
  Tensor heatmap;  // [H',W'], max-normalized
  int target_class = 0;
  bool all_zero = false;
};

// Grad-CAM from a feature map [C,H',W'] and its gradient.
SaliencyMap gradcam_from_activations(const Tensor& activations,
                                     const Tensor& gradients, int target_class);

// Eval-mode Grad-CAM over the last conv feature map for one image [1,3,H,W].
SaliencyMap gradcam(MicroResNet& model, const Tensor& image,
                    const AttributeBatch* attrs, bool bypass, int target_class);

// Flat binary checkpoint: "CBNLAB01", u64 tensor count, then per tensor
// u64 name length, name bytes, u64 rank, u64 extents, f64 values (all
// little-endian). The run config is written beside it as <path>.json.
void save_checkpoint(MicroResNet& model, const std::filesystem::path& path,
                     const std::string& config_json);
void load_checkpoint(MicroResNet& model, const std::filesystem::path& path);

}  // namespace cbnlab
