#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbnlab/normalization.hpp"
#include "cbnlab/tape.hpp"
#include "cbnlab/tensor.hpp"

namespace cbnlab {

enum class AttributeKind : std::uint8_t { binary = 0, continuous = 1 };

// A batch of attribute vectors a_i, stored row-major [count, dim].
struct AttributeBatch {
  std::size_t count = 0;
  std::size_t dim = 0;
  AttributeKind kind = AttributeKind::binary;
  std::vector<double> values;
  std::vector<std::uint8_t> observed;  // 1 = dimension observed

  static AttributeBatch make(std::size_t count, std::size_t dim,
                             AttributeKind kind, std::vector<double> values);
  // Rows [begin, begin + n) or an arbitrary row selection.
  AttributeBatch rows(std::span<const std::size_t> index) const;
  // Throws FormatError when a value violates the kind's domain.
  void validate() const;
};

enum class MaskMode { dimension_zero, delta_bypass };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& s);
std::string to_string(AttributeKind kind);
AttributeKind attribute_kind_from_string(const std::string& s);

struct MaskedAttributes {
  AttributeBatch attributes;
  std::vector<std::uint8_t> bypass;  // one flag per sample
};

// Number of items selected by a mask fraction over `total` items.
std::size_t mask_count(double fraction, std::size_t total);

// dimension_zero: the same floor(fraction*D) dimensions are zeroed for every
// row. delta_bypass: floor(fraction*N) rows get bypass = 1.
MaskedAttributes mask_attributes(const AttributeBatch& a, double fraction,
                                 MaskMode mode, std::uint64_t seed);

// value > threshold -> 1, else 0.
AttributeBatch binarize_attributes(const AttributeBatch& a,
                                   double threshold = 0.5);

enum class AuxLayout { shared_trunk, per_layer };

std::string to_string(AuxLayout layout);
AuxLayout aux_layout_from_string(const std::string& s);

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

// Two-layer perceptron mapping attributes to (delta_gamma, delta_beta) for
// every conditioned norm layer. The output layer starts at zero, so a fresh
// network predicts zero deltas.
class AuxiliaryNet {
 public:
  AuxiliaryNet() = default;
  AuxiliaryNet(std::size_t attribute_dim, std::vector<std::size_t> channels,
               std::size_t hidden_width, AuxLayout layout, std::mt19937_64& rng);

  std::size_t attribute_dim() const { return attribute_dim_; }
  std::size_t hidden_width() const { return hidden_; }
  AuxLayout layout() const { return layout_; }
  const std::vector<std::size_t>& channels() const { return channels_; }

  std::vector<NamedTensor> parameters(const std::string& prefix);
  std::size_t parameter_count() const;

  // Closed form for the parameter count of a net with this geometry.
  static std::size_t expected_parameter_count(
      std::size_t attribute_dim, const std::vector<std::size_t>& channels,
      std::size_t hidden_width, AuxLayout layout);

 private:
  friend std::vector<CondDeltas> predict_deltas(
      AuxiliaryNet& net, Tape& tape, const AttributeBatch& a,
      const std::vector<std::uint8_t>& bypass);

  struct Trunk {
    Tensor w1, b1, w2, b2;
  };

  std::size_t attribute_dim_ = 0;
  std::size_t hidden_ = 0;
  AuxLayout layout_ = AuxLayout::shared_trunk;
  std::vector<std::size_t> channels_;
  std::vector<Trunk> trunks_;
};

// One CondDeltas per conditioned layer, each carrying `bypass`.
std::vector<CondDeltas> predict_deltas(AuxiliaryNet& net, Tape& tape,
                                       const AttributeBatch& a,
                                       const std::vector<std::uint8_t>& bypass);

}  // namespace cbnlab
