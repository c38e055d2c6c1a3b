#include "cbnlab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cbnlab/binary_io.hpp"
#include "cbnlab/error.hpp"

namespace cbnlab {
namespace {

// Independent RNG streams derived from the dataset seed.
enum Stream : std::uint64_t {
  kGeometry = 1,
  kPrototypes = 2,
  kTrain = 3,
  kVal = 4,
  kTest = 5,
};

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace

void ShortcutDatasetConfig::validate() const {
  if (num_classes < 2) throw ConfigError("dataset needs at least 2 classes");
  if (attribute_dim == 0) throw ConfigError("attribute_dim must be positive");
  if (!(rho >= 0.5 && rho <= 1.0)) throw ConfigError("rho must lie in [0.5,1]");
  if (image_size < 4) throw ConfigError("image_size must be at least 4");
  if (!(visual_noise_sigma >= 0.0)) {
    throw ConfigError("visual_noise_sigma must be >= 0");
  }
  if (samples_per_class < 5) {
    throw ConfigError("samples_per_class must be at least 5");
  }
  if (attribute_dim < 63 &&
      num_classes > (std::uint64_t{1} << attribute_dim)) {
    throw ConfigError("cannot draw " + std::to_string(num_classes) +
                      " distinct prototypes from " +
                      std::to_string(attribute_dim) + " bits");
  }
}

ShortcutDatasetConfig ShortcutDatasetConfig::cub_like() {
  ShortcutDatasetConfig c;
  c.num_classes = 10;
  c.attribute_dim = 32;
  c.rho = 1.0;
  c.visual_noise_sigma = 0.3;
  return c;
}

ShortcutDatasetConfig ShortcutDatasetConfig::til_like() {
  ShortcutDatasetConfig c;
  c.num_classes = 13;
  c.attribute_dim = 16;
  c.rho = 0.7;
  c.visual_noise_sigma = 0.65;
  return c;
}

std::vector<ClassGeometry> class_geometry(const ShortcutDatasetConfig& cfg) {
  auto rng = stream_rng(cfg.seed, kGeometry);
  const double size = static_cast<double>(cfg.image_size);
  std::uniform_real_distribution<double> pos(0.2 * size, 0.8 * size - 1.0);
  std::uniform_real_distribution<double> scl(size / 12.0, size / 6.0);
  std::vector<ClassGeometry> out(cfg.num_classes);
  for (ClassGeometry& g : out) {
    g.cx = pos(rng);
    g.cy = pos(rng);
    g.scale = scl(rng);
    auto lo = [&](double c) {
      return static_cast<std::size_t>(std::max(0.0, std::floor(c - 2 * g.scale)));
    };
    auto hi = [&](double c) {
      return static_cast<std::size_t>(
          std::min(size, std::floor(c + 2 * g.scale) + 1.0));
    };
    g.box = {lo(g.cx), lo(g.cy), hi(g.cx), hi(g.cy)};
  }
  return out;
}

std::vector<std::vector<std::uint8_t>> class_prototypes(
    const ShortcutDatasetConfig& cfg) {
  cfg.validate();
  auto rng = stream_rng(cfg.seed, kPrototypes);
  std::bernoulli_distribution bit(0.5);
  std::set<std::vector<std::uint8_t>> seen;
  std::vector<std::vector<std::uint8_t>> out;
  while (out.size() < cfg.num_classes) {
    std::vector<std::uint8_t> p(cfg.attribute_dim);
    for (auto& b : p) b = bit(rng);
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

SplitSizes split_sizes_per_class(std::size_t samples_per_class) {
  const std::size_t fifth = samples_per_class / 5;
  return {samples_per_class - 2 * fifth, fifth, fifth};
}

namespace {

Split make_split(const ShortcutDatasetConfig& cfg,
                 const std::vector<ClassGeometry>& geometry,
                 const std::vector<std::vector<std::uint8_t>>& prototypes,
                 std::size_t per_class, std::uint64_t stream) {
  auto rng = stream_rng(cfg.seed, stream);
  const std::size_t k = cfg.num_classes, d = cfg.attribute_dim;
  const std::size_t hw = cfg.image_size * cfg.image_size;
  const std::size_t n = k * per_class;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution keep(cfg.rho);
  std::bernoulli_distribution sign(0.5);
  std::uniform_real_distribution<double> jitter(0.0, 0.45);

  Split s;
  s.labels.resize(n);
  std::vector<double> attrs(n * d);
  s.images = Tensor({n, kImageChannels, cfg.image_size, cfg.image_size});

  // Noise-free blob per class, shared by every example of that class.
  std::vector<std::vector<double>> blobs(k, std::vector<double>(hw));
  for (std::size_t c = 0; c < k; ++c) {
    const ClassGeometry& g = geometry[c];
    for (std::size_t y = 0; y < cfg.image_size; ++y) {
      for (std::size_t x = 0; x < cfg.image_size; ++x) {
        const double dx = static_cast<double>(x) - g.cx;
        const double dy = static_cast<double>(y) - g.cy;
        blobs[c][y * cfg.image_size + x] =
            std::exp(-(dx * dx + dy * dy) / (2.0 * g.scale * g.scale));
      }
    }
  }

  // Examples are interleaved by class: i -> class i % K.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % k;
    s.labels[i] = static_cast<int>(label);
    for (std::size_t j = 0; j < d; ++j) {
      double bit = prototypes[label][j];
      if (!keep(rng)) bit = 1.0 - bit;
      if (cfg.attribute_kind == AttributeKind::continuous) {
        const double u = jitter(rng);
        bit = std::clamp(bit + (sign(rng) ? u : -u), 0.0, 1.0);
      }
      attrs[i * d + j] = bit;
    }
    double* img = s.images.data().data() + i * kImageChannels * hw;
    for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) {
        double v = blobs[label][p];
        if (cfg.visual_noise_sigma > 0.0) {
          v += cfg.visual_noise_sigma * noise(rng);
        }
        img[ch * hw + p] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  s.attributes = AttributeBatch::make(n, d, cfg.attribute_kind, std::move(attrs));
  return s;
}

}  // namespace

Dataset generate(const ShortcutDatasetConfig& cfg) {
  cfg.validate();
  const auto geometry = class_geometry(cfg);
  const auto prototypes = class_prototypes(cfg);
  const SplitSizes sizes = split_sizes_per_class(cfg.samples_per_class);
  Dataset data;
  data.num_classes = cfg.num_classes;
  data.attribute_dim = cfg.attribute_dim;
  data.image_size = cfg.image_size;
  data.attribute_kind = cfg.attribute_kind;
  data.train = make_split(cfg, geometry, prototypes, sizes.train, kTrain);
  data.val = make_split(cfg, geometry, prototypes, sizes.val, kVal);
  data.test = make_split(cfg, geometry, prototypes, sizes.test, kTest);
  return data;
}

namespace {

constexpr std::uint64_t kHeaderBytes = 8 + 7 * 8 + 1;

std::uint64_t split_bytes(std::uint64_t n, std::uint64_t d, std::uint64_t h,
                          std::uint64_t w) {
  return 8 * (n + n * d + n * kImageChannels * h * w);
}

void write_split(std::ostream& os, const Split& s) {
  for (int y : s.labels) binary_io::write_u64(os, static_cast<std::uint64_t>(y));
  for (double v : s.attributes.values) binary_io::write_f64(os, v);
  for (double v : s.images.data()) binary_io::write_f64(os, v);
}

Split read_split(std::istream& is, std::uint64_t n, std::uint64_t k,
                 std::uint64_t d, std::uint64_t h, std::uint64_t w,
                 AttributeKind kind) {
  Split s;
  s.labels.resize(n);
  for (auto& y : s.labels) {
    const std::uint64_t v = binary_io::read_u64(is);
    if (v >= k) {
      throw FormatError("label " + std::to_string(v) + " is not below K=" +
                        std::to_string(k));
    }
    y = static_cast<int>(v);
  }
  std::vector<double> attrs(n * d);
  for (double& v : attrs) v = binary_io::read_f64(is);
  s.attributes = AttributeBatch::make(n, d, kind, std::move(attrs));
  s.images = Tensor({n, kImageChannels, h, w});
  for (double& v : s.images.storage()) v = binary_io::read_f64(is);
  return s;
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write dataset " + path.string());
  os.write("SCDS0001", 8);
  for (std::uint64_t v :
       {std::uint64_t{data.num_classes}, std::uint64_t{data.attribute_dim},
        std::uint64_t{data.image_size}, std::uint64_t{data.image_size},
        std::uint64_t{data.train.size()}, std::uint64_t{data.val.size()},
        std::uint64_t{data.test.size()}}) {
    binary_io::write_u64(os, v);
  }
  os.put(static_cast<char>(data.attribute_kind));
  write_split(os, data.train);
  write_split(os, data.val);
  write_split(os, data.test);
  if (!os) throw Error("failed writing dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path.string());
  binary_io::expect_magic(is, "SCDS0001");
  const std::uint64_t k = binary_io::read_u64(is);
  const std::uint64_t d = binary_io::read_u64(is);
  const std::uint64_t h = binary_io::read_u64(is);
  const std::uint64_t w = binary_io::read_u64(is);
  const std::uint64_t n_train = binary_io::read_u64(is);
  const std::uint64_t n_val = binary_io::read_u64(is);
  const std::uint64_t n_test = binary_io::read_u64(is);
  const int kind_byte = is.get();
  if (kind_byte != 0 && kind_byte != 1) {
    throw FormatError("unknown attribute kind byte");
  }
  if (h != w) throw FormatError("only square images are supported");
  if (k == 0 || d == 0 || h == 0 || d > (1u << 20) || h > (1u << 14)) {
    throw FormatError("implausible dataset header");
  }
  const std::uint64_t expected =
      kHeaderBytes + split_bytes(n_train, d, h, w) + split_bytes(n_val, d, h, w) +
      split_bytes(n_test, d, h, w);
  const auto actual = std::filesystem::file_size(path);
  if (actual != expected) {
    throw FormatError("dataset length disagreement: header implies " +
                      std::to_string(expected) + " bytes, file has " +
                      std::to_string(actual));
  }
  const auto kind = static_cast<AttributeKind>(kind_byte);
  Dataset data;
  data.num_classes = k;
  data.attribute_dim = d;
  data.image_size = h;
  data.attribute_kind = kind;
  data.train = read_split(is, n_train, k, d, h, w, kind);
  data.val = read_split(is, n_val, k, d, h, w, kind);
  data.test = read_split(is, n_test, k, d, h, w, kind);
  return data;
}

Dataset zero_images(Dataset data) {
  for (Split* s : {&data.train, &data.val, &data.test}) {
    std::fill(s->images.storage().begin(), s->images.storage().end(), 0.0);
  }
  return data;
}

int nearest_prototype(std::span<const double> attributes,
                      const std::vector<std::vector<std::uint8_t>>& prototypes) {
  int best = 0;
  std::size_t best_dist = static_cast<std::size_t>(-1);
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    std::size_t dist = 0;
    for (std::size_t j = 0; j < attributes.size(); ++j) {
      dist += (attributes[j] > 0.5) != (prototypes[c][j] != 0);
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_digest(const ShortcutDatasetConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "K=" << cfg.num_classes << ";D=" << cfg.attribute_dim
     << ";rho=" << cfg.rho << ";size=" << cfg.image_size
     << ";sigma=" << cfg.visual_noise_sigma
     << ";kind=" << to_string(cfg.attribute_kind)
     << ";spc=" << cfg.samples_per_class << ";seed=" << cfg.seed;
  return hex64(fnv1a(os.str()));
}

}  // namespace cbnlab
