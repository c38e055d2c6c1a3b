#include <array>
#include <cmath>
#include <functional>
#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"

#include "cbnlab/datagen.hpp"
#include "cbnlab/error.hpp"

using namespace cbnlab;

namespace {

ShortcutDatasetConfig small(double rho, std::uint64_t seed = 1) {
  ShortcutDatasetConfig c;
  c.num_classes = 5;
  c.attribute_dim = 12;
  c.rho = rho;
  c.image_size = 8;
  c.samples_per_class = 20;
  c.seed = seed;
  return c;
}

void for_each_split(const Dataset& d, const std::function<void(const Split&)>& fn) {
  fn(d.train);
  fn(d.val);
  fn(d.test);
}

}  // namespace

TEST_SUITE("datagen") {

TEST_CASE("presets") {
  const auto cub = ShortcutDatasetConfig::cub_like();
  CHECK(cub.num_classes == 10);
  CHECK(cub.attribute_dim == 32);
  CHECK(cub.rho == 1.0);
  const auto til = ShortcutDatasetConfig::til_like();
  CHECK(til.num_classes == 13);
  CHECK(til.attribute_dim == 16);
  CHECK(til.rho == 0.7);
  CHECK(til.visual_noise_sigma > cub.visual_noise_sigma);
  ShortcutDatasetConfig bad = small(0.4);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small(1.0);
  bad.num_classes = 9;
  bad.attribute_dim = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("splits are class balanced with bounded images") {
  const Dataset d = generate(small(0.8));
  const auto sizes = split_sizes_per_class(20);
  CHECK(sizes.train + sizes.val + sizes.test == 20);
  CHECK(d.train.size() == 5 * sizes.train);
  CHECK(d.val.size() == 5 * sizes.val);
  CHECK(d.test.size() == 5 * sizes.test);
  for_each_split(d, [](const Split& s) {
    std::vector<std::size_t> counts(5, 0);
    for (int y : s.labels) {
      REQUIRE(y >= 0);
      REQUIRE(y < 5);
      ++counts[y];
    }
    for (std::size_t c : counts) CHECK(c == counts[0]);
    CHECK(s.images.shape() == Shape{s.size(), 3, 8, 8});
    for (double v : s.images.storage()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK_NOTHROW(s.attributes.validate());
  });
}

TEST_CASE("generation is a pure function of the seed") {
  const Dataset a = generate(small(0.7, 3)), b = generate(small(0.7, 3));
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.train.attributes.values == b.train.attributes.values);
  CHECK(a.test.images == b.test.images);
  const Dataset c = generate(small(0.7, 4));
  CHECK(c.train.images != a.train.images);
  CHECK(config_digest(small(0.7, 3)) == config_digest(small(0.7, 3)));
  CHECK(config_digest(small(0.7, 3)) != config_digest(small(0.7, 4)));
  CHECK(config_digest(small(0.7)).size() == 16);
}

TEST_CASE("prototypes are distinct") {
  ShortcutDatasetConfig c = small(1.0);
  c.num_classes = 16;
  c.attribute_dim = 4;
  const auto p = class_prototypes(c);
  CHECK(std::set<std::vector<std::uint8_t>>(p.begin(), p.end()).size() == 16);
}

TEST_CASE("rho one gives prototype attributes and a perfect shortcut") {
  const ShortcutDatasetConfig c = small(1.0);
  const Dataset d = generate(c);
  const auto proto = class_prototypes(c);
  for_each_split(d, [&](const Split& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t k = 0; k < c.attribute_dim; ++k) {
        CHECK(s.attributes.values[i * c.attribute_dim + k] ==
              static_cast<double>(proto[s.labels[i]][k]));
      }
    }
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const std::span<const double> row(d.test.attributes.values.data() + i * c.attribute_dim,
                                      c.attribute_dim);
    correct += nearest_prototype(row, proto) == d.test.labels[i];
  }
  CHECK(correct == d.test.size());
}

TEST_CASE("rho one half makes attribute bits independent of the label") {
  ShortcutDatasetConfig c = small(0.5, 17);
  c.num_classes = 10;
  c.image_size = 4;
  c.samples_per_class = 1000;
  const Dataset d = generate(c);
  // bit 0 vs label over all 10k samples
  std::vector<std::array<double, 2>> table(10, {0.0, 0.0});
  double total = 0.0;
  for_each_split(d, [&](const Split& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      table[s.labels[i]][s.attributes.values[i * c.attribute_dim] > 0.5 ? 1 : 0] += 1.0;
      total += 1.0;
    }
  });
  REQUIRE(total == 10000.0);
  double col[2] = {0.0, 0.0};
  std::vector<double> row(10, 0.0);
  for (std::size_t k = 0; k < 10; ++k) {
    for (int b = 0; b < 2; ++b) {
      col[b] += table[k][b];
      row[k] += table[k][b];
    }
  }
  double chi2 = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    for (int b = 0; b < 2; ++b) {
      const double e = row[k] * col[b] / total;
      chi2 += (table[k][b] - e) * (table[k][b] - e) / e;
    }
  }
  // chi-square 0.99 quantile, 9 degrees of freedom
  CHECK(chi2 < 21.666);

  const auto proto = class_prototypes(c);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const std::span<const double> r(d.test.attributes.values.data() + i * c.attribute_dim,
                                    c.attribute_dim);
    correct += nearest_prototype(r, proto) == d.test.labels[i];
  }
  const double n = static_cast<double>(d.test.size());
  const double sd = std::sqrt(n * 0.1 * 0.9);
  CHECK(std::abs(static_cast<double>(correct) - 0.1 * n) <= 3.0 * sd);
}

TEST_CASE("zero noise makes every image of a class identical") {
  ShortcutDatasetConfig c = small(0.9);
  c.visual_noise_sigma = 0.0;
  const Dataset d = generate(c);
  const std::size_t per = 3 * 8 * 8;
  std::vector<const double*> first(5, nullptr);
  for_each_split(d, [&](const Split& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double* img = s.images.storage().data() + i * per;
      const double*& f = first[s.labels[i]];
      if (!f) {
        f = img;
        continue;
      }
      CHECK(std::equal(img, img + per, f));
    }
  });
}

TEST_CASE("continuous attributes binarize back to the prototype") {
  ShortcutDatasetConfig c = small(1.0);
  c.attribute_kind = AttributeKind::continuous;
  const Dataset d = generate(c);
  const auto proto = class_prototypes(c);
  const AttributeBatch bin = binarize_attributes(d.train.attributes);
  bool fractional = false;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    for (std::size_t k = 0; k < c.attribute_dim; ++k) {
      const double v = d.train.attributes.values[i * c.attribute_dim + k];
      fractional |= v != 0.0 && v != 1.0;
      CHECK(std::abs(v - proto[d.train.labels[i]][k]) <= 0.45);
      CHECK(bin.values[i * c.attribute_dim + k] == proto[d.train.labels[i]][k]);
    }
  }
  CHECK(fractional);
}

TEST_CASE("class boxes lie inside the image") {
  const ShortcutDatasetConfig c = small(1.0);
  for (const auto& g : class_geometry(c)) {
    CHECK(g.box.x0 < g.box.x1);
    CHECK(g.box.y0 < g.box.y1);
    CHECK(g.box.x1 <= c.image_size);
    CHECK(g.box.y1 <= c.image_size);
    CHECK(g.scale > 0.0);
  }
}

TEST_CASE("SCDS round trip is bit exact") {
  testing::TempDir dir("scds");
  for (AttributeKind kind : {AttributeKind::binary, AttributeKind::continuous}) {
    ShortcutDatasetConfig c = small(0.8);
    c.attribute_kind = kind;
    const Dataset d = generate(c);
    save_dataset(d, dir.path / "d.scds");
    CHECK(testing::slurp(dir.path / "d.scds").substr(0, 8) == "SCDS0001");
    const Dataset e = load_dataset(dir.path / "d.scds");
    CHECK(e.num_classes == d.num_classes);
    CHECK(e.attribute_dim == d.attribute_dim);
    CHECK(e.image_size == d.image_size);
    CHECK(e.attribute_kind == kind);
    CHECK(e.train.labels == d.train.labels);
    CHECK(e.val.attributes.values == d.val.attributes.values);
    CHECK(e.test.images == d.test.images);
    save_dataset(e, dir.path / "e.scds");
    CHECK(testing::slurp(dir.path / "d.scds") == testing::slurp(dir.path / "e.scds"));
  }
}

TEST_CASE("SCDS rejects corrupt files") {
  testing::TempDir dir("scds_bad");
  const Dataset d = generate(small(1.0));
  save_dataset(d, dir.path / "d.scds");
  const std::string bytes = testing::slurp(dir.path / "d.scds");
  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream os(dir.path / name, std::ios::binary);
    os << b;
    return dir.path / name;
  };
  CHECK_THROWS_AS(load_dataset(write("cut", bytes.substr(0, bytes.size() - 8))), FormatError);
  std::string magic = bytes;
  magic[4] = '9';
  CHECK_THROWS_AS(load_dataset(write("magic", magic)), FormatError);
  CHECK_THROWS_AS(load_dataset(write("long", bytes + "x")), FormatError);

  // header K = 5; first train label (after 8 + 7*8 + 1 bytes) set to 5
  std::string label = bytes;
  label[65] = 5;
  CHECK_THROWS_AS(load_dataset(write("label", label)), FormatError);
  label[65] = 4;
  CHECK_NOTHROW(load_dataset(write("label_ok", label)));
  CHECK_THROWS_AS(load_dataset(dir.path / "missing"), FormatError);
}

TEST_CASE("zero_images clears pixels only and is idempotent") {
  const Dataset d = generate(small(0.8));
  const Dataset z = zero_images(d);
  for_each_split(z, [](const Split& s) {
    for (double v : s.images.storage()) CHECK(v == 0.0);
  });
  CHECK(z.train.attributes.values == d.train.attributes.values);
  CHECK(z.test.labels == d.test.labels);
  const Dataset zz = zero_images(z);
  CHECK(zz.train.images == z.train.images);
  CHECK(zz.val.attributes.values == z.val.attributes.values);
}

TEST_CASE("nearest prototype breaks ties toward the lowest class") {
  const std::vector<std::vector<std::uint8_t>> p{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  CHECK(nearest_prototype(std::vector<double>{0, 1, 0}, p) == 1);
  CHECK(nearest_prototype(std::vector<double>{0, 0, 0}, p) == 0);
  CHECK(nearest_prototype(std::vector<double>{0, 1, 1}, p) == 1);
}

}  // TEST_SUITE
