#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "cbnlab/datagen.hpp"
#include "cbnlab/tensor.hpp"
#include "cbnlab/trainer.hpp"

namespace testing {

inline cbnlab::Tensor random_tensor(cbnlab::Shape shape, std::mt19937_64& rng,
                                    double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  cbnlab::Tensor t(std::move(shape));
  for (double& v : t.storage()) v = n(rng);
  return t;
}

inline cbnlab::AttributeBatch random_binary(std::size_t n, std::size_t d,
                                            std::mt19937_64& rng) {
  std::bernoulli_distribution bit(0.5);
  std::vector<double> v(n * d);
  for (double& x : v) x = bit(rng) ? 1.0 : 0.0;
  return cbnlab::AttributeBatch::make(n, d, cbnlab::AttributeKind::binary, v);
}

// Few-second training configuration.
inline cbnlab::ExperimentConfig tiny_config() {
  cbnlab::ExperimentConfig c;
  c.dataset.num_classes = 4;
  c.dataset.attribute_dim = 8;
  c.dataset.image_size = 8;
  c.dataset.samples_per_class = 20;
  c.epochs = 2;
  c.batch_size = 16;
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("cbnlab_test_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace testing
