#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <string>
#include <vector>

#include "cbnlab/conditioning.hpp"
#include "cbnlab/tensor.hpp"

namespace cbnlab {

// Knobs of the synthetic shortcut benchmark. rho is the probability that an
// attribute bit agrees with the class prototype: 1 makes attributes a perfect
// label shortcut, 0.5 makes them independent of the label.
struct ShortcutDatasetConfig {
  std::size_t num_classes = 10;
  std::size_t attribute_dim = 32;
  double rho = 1.0;
  std::size_t image_size = 16;
  double visual_noise_sigma = 0.3;
  AttributeKind attribute_kind = AttributeKind::binary;
  std::size_t samples_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const;

  static ShortcutDatasetConfig cub_like();
  static ShortcutDatasetConfig til_like();
};

struct Split {
  std::vector<int> labels;
  AttributeBatch attributes;  // [N,D]
  Tensor images;              // [N,3,H,W], values in [0,1]

  std::size_t size() const { return labels.size(); }
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t attribute_dim = 0;
  std::size_t image_size = 0;
  AttributeKind attribute_kind = AttributeKind::binary;
  Split train, val, test;
};

// Pixel-space bounding box, inclusive-exclusive: [x0,x1) x [y0,y1).
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
};

struct ClassGeometry {
  double cx = 0.0, cy = 0.0, scale = 1.0;
  Box box;  // center +- 2 scale, clipped to the image
};

constexpr std::size_t kImageChannels = 3;

std::vector<ClassGeometry> class_geometry(const ShortcutDatasetConfig& cfg);
// Distinct binary prototype per class, [K][D].
std::vector<std::vector<std::uint8_t>> class_prototypes(
    const ShortcutDatasetConfig& cfg);

// Per class, 3/5 of samples_per_class go to train and 1/5 each to val/test
// (train takes the rounding remainder).
struct SplitSizes {
  std::size_t train, val, test;
};
SplitSizes split_sizes_per_class(std::size_t samples_per_class);

Dataset generate(const ShortcutDatasetConfig& cfg);

// SCDS0001 container; see README for the byte layout.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

Dataset zero_images(Dataset data);

// Nearest class prototype by Hamming distance (ties -> lowest class).
int nearest_prototype(std::span<const double> attributes,
                      const std::vector<std::vector<std::uint8_t>>& prototypes);

// Stable 64-bit FNV-1a digest of every config field, as 16 hex digits.
std::string config_digest(const ShortcutDatasetConfig& cfg);
// FNV-1a over arbitrary bytes.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace cbnlab
