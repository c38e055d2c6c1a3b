#include "cbnlab/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cbnlab/error.hpp"
#include "cbnlab/ops.hpp"

namespace cbnlab {

AttributeBatch AttributeBatch::make(std::size_t count, std::size_t dim,
                                    AttributeKind kind,
                                    std::vector<double> values) {
  if (values.size() != count * dim) {
    throw ShapeError("attribute batch: expected " +
                     std::to_string(count * dim) + " values, got " +
                     std::to_string(values.size()));
  }
  AttributeBatch a;
  a.count = count;
  a.dim = dim;
  a.kind = kind;
  a.values = std::move(values);
  a.observed.assign(count * dim, 1);
  a.validate();
  return a;
}

AttributeBatch AttributeBatch::rows(std::span<const std::size_t> index) const {
  AttributeBatch out;
  out.count = index.size();
  out.dim = dim;
  out.kind = kind;
  out.values.resize(index.size() * dim);
  out.observed.resize(index.size() * dim);
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(values.begin() + index[r] * dim, dim,
                out.values.begin() + r * dim);
    std::copy_n(observed.begin() + index[r] * dim, dim,
                out.observed.begin() + r * dim);
  }
  return out;
}

void AttributeBatch::validate() const {
  if (values.size() != count * dim || observed.size() != count * dim) {
    throw FormatError("attribute batch storage does not match its extents");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!observed[i]) continue;
    const double v = values[i];
    if (kind == AttributeKind::binary ? (v != 0.0 && v != 1.0)
                                      : !(v >= 0.0 && v <= 1.0)) {
      throw FormatError("attribute value " + std::to_string(v) +
                        " invalid for " + to_string(kind) + " attributes");
    }
  }
}

std::string to_string(MaskMode mode) {
  return mode == MaskMode::dimension_zero ? "dimension_zero" : "delta_bypass";
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "dimension_zero") return MaskMode::dimension_zero;
  if (s == "delta_bypass") return MaskMode::delta_bypass;
  throw ConfigError("unknown mask mode '" + s + "'");
}

std::string to_string(AttributeKind kind) {
  return kind == AttributeKind::binary ? "binary" : "continuous";
}

AttributeKind attribute_kind_from_string(const std::string& s) {
  if (s == "binary") return AttributeKind::binary;
  if (s == "continuous") return AttributeKind::continuous;
  throw ConfigError("unknown attribute kind '" + s + "'");
}

std::string to_string(AuxLayout layout) {
  return layout == AuxLayout::shared_trunk ? "shared_trunk" : "per_layer";
}

AuxLayout aux_layout_from_string(const std::string& s) {
  if (s == "shared_trunk") return AuxLayout::shared_trunk;
  if (s == "per_layer") return AuxLayout::per_layer;
  throw ConfigError("unknown auxiliary layout '" + s + "'");
}

std::size_t mask_count(double fraction, std::size_t total) {
  // Tolerates representation error in grid values such as 1 - 0.9.
  return static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(total) + 1e-9));
}

MaskedAttributes mask_attributes(const AttributeBatch& a, double fraction,
                                 MaskMode mode, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("mask fraction must lie in [0,1]");
  }
  MaskedAttributes out{a, std::vector<std::uint8_t>(a.count, 0)};
  std::mt19937_64 rng(seed);
  if (mode == MaskMode::dimension_zero) {
    std::vector<std::size_t> dims(a.dim);
    std::iota(dims.begin(), dims.end(), 0);
    std::shuffle(dims.begin(), dims.end(), rng);
    dims.resize(mask_count(fraction, a.dim));
    for (std::size_t r = 0; r < a.count; ++r) {
      for (std::size_t d : dims) {
        out.attributes.values[r * a.dim + d] = 0.0;
        out.attributes.observed[r * a.dim + d] = 0;
      }
    }
  } else {
    std::vector<std::size_t> samples(a.count);
    std::iota(samples.begin(), samples.end(), 0);
    std::shuffle(samples.begin(), samples.end(), rng);
    samples.resize(mask_count(fraction, a.count));
    for (std::size_t s : samples) out.bypass[s] = 1;
  }
  return out;
}

AttributeBatch binarize_attributes(const AttributeBatch& a, double threshold) {
  AttributeBatch out = a;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double v = a.values[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw FormatError("binarize: value " + std::to_string(v) +
                        " is not a continuous attribute in [0,1]");
    }
    out.values[i] = v > threshold ? 1.0 : 0.0;
  }
  out.kind = AttributeKind::binary;
  return out;
}

AuxiliaryNet::AuxiliaryNet(std::size_t attribute_dim,
                           std::vector<std::size_t> channels,
                           std::size_t hidden_width, AuxLayout layout,
                           std::mt19937_64& rng)
    : attribute_dim_(attribute_dim),
      hidden_(hidden_width),
      layout_(layout),
      channels_(std::move(channels)) {
  if (attribute_dim_ == 0 || hidden_ == 0 || channels_.empty()) {
    throw ConfigError("auxiliary net needs attributes, width and layers");
  }
  auto make_trunk = [&](std::size_t out_width) {
    Trunk t;
    std::normal_distribution<double> init(
        0.0, std::sqrt(2.0 / static_cast<double>(attribute_dim_)));
    t.w1 = Tensor({attribute_dim_, hidden_});
    for (double& v : t.w1.storage()) v = init(rng);
    t.b1 = Tensor({hidden_}, 0.0);
    t.w2 = Tensor({hidden_, out_width}, 0.0);
    t.b2 = Tensor({out_width}, 0.0);
    for (Tensor* p : {&t.w1, &t.b1, &t.w2, &t.b2}) p->set_requires_grad(true);
    return t;
  };
  if (layout_ == AuxLayout::shared_trunk) {
    std::size_t total = 0;
    for (std::size_t c : channels_) total += 2 * c;
    trunks_.push_back(make_trunk(total));
  } else {
    for (std::size_t c : channels_) trunks_.push_back(make_trunk(2 * c));
  }
}

std::vector<NamedTensor> AuxiliaryNet::parameters(const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < trunks_.size(); ++i) {
    const std::string p = prefix + "trunk" + std::to_string(i) + ".";
    out.push_back({p + "w1", &trunks_[i].w1});
    out.push_back({p + "b1", &trunks_[i].b1});
    out.push_back({p + "w2", &trunks_[i].w2});
    out.push_back({p + "b2", &trunks_[i].b2});
  }
  return out;
}

std::size_t AuxiliaryNet::parameter_count() const {
  std::size_t n = 0;
  for (const Trunk& t : trunks_) {
    n += t.w1.size() + t.b1.size() + t.w2.size() + t.b2.size();
  }
  return n;
}

std::size_t AuxiliaryNet::expected_parameter_count(
    std::size_t attribute_dim, const std::vector<std::size_t>& channels,
    std::size_t hidden_width, AuxLayout layout) {
  const std::size_t trunk_in = attribute_dim * hidden_width + hidden_width;
  std::size_t total_out = 0;
  for (std::size_t c : channels) total_out += 2 * c;
  if (layout == AuxLayout::shared_trunk) {
    return trunk_in + hidden_width * total_out + total_out;
  }
  return channels.size() * trunk_in + hidden_width * total_out + total_out;
}

std::vector<CondDeltas> predict_deltas(AuxiliaryNet& net, Tape& tape,
                                       const AttributeBatch& a,
                                       const std::vector<std::uint8_t>& bypass) {
  if (a.dim != net.attribute_dim_) {
    throw ShapeError("predict_deltas: attribute dimension " +
                     std::to_string(a.dim) + " but the net expects " +
                     std::to_string(net.attribute_dim_));
  }
  if (bypass.size() != a.count) {
    throw ShapeError("predict_deltas: bypass flags do not match batch size");
  }
  Var x = tape.constant(Tensor({a.count, a.dim}, a.values), "attributes");
  std::vector<CondDeltas> out;
  auto head = [&](AuxiliaryNet::Trunk& t) {
    Var h = relu(dense(x, tape.param(t.w1, "aux.w1"), tape.param(t.b1, "aux.b1")));
    return dense(h, tape.param(t.w2, "aux.w2"), tape.param(t.b2, "aux.b2"));
  };
  if (net.layout_ == AuxLayout::shared_trunk) {
    Var y = head(net.trunks_.front());
    std::size_t offset = 0;
    for (std::size_t c : net.channels_) {
      CondDeltas d;
      d.delta_gamma = slice_cols(y, offset, c);
      d.delta_beta = slice_cols(y, offset + c, c);
      d.bypass = bypass;
      offset += 2 * c;
      out.push_back(std::move(d));
    }
  } else {
    for (std::size_t l = 0; l < net.channels_.size(); ++l) {
      Var y = head(net.trunks_[l]);
      const std::size_t c = net.channels_[l];
      CondDeltas d;
      d.delta_gamma = slice_cols(y, 0, c);
      d.delta_beta = slice_cols(y, c, c);
      d.bypass = bypass;
      out.push_back(std::move(d));
    }
  }
  return out;
}

}  // namespace cbnlab
