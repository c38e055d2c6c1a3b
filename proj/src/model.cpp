#include "cbnlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cbnlab/binary_io.hpp"
#include "cbnlab/error.hpp"
#include "cbnlab/ops.hpp"

namespace cbnlab {

std::string to_string(NormKind kind) {
  return kind == NormKind::bn ? "bn" : "cbn";
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "bn" || s == "BN") return NormKind::bn;
  if (s == "cbn" || s == "CBN") return NormKind::cbn;
  throw ConfigError("unknown norm kind '" + s + "'");
}

std::string to_string(CondScope scope) {
  return scope == CondScope::all ? "all" : "last_stage";
}

CondScope cond_scope_from_string(const std::string& s) {
  if (s == "all") return CondScope::all;
  if (s == "last_stage") return CondScope::last_stage;
  throw ConfigError("unknown conditioning scope '" + s + "'");
}

void ModelConfig::validate() const {
  if (in_channels == 0 || stem_channels == 0 || stage_channels.empty() ||
      num_classes < 2 || attribute_dim == 0 || aux_hidden == 0) {
    throw ConfigError("model config: channels, stages, classes (>=2), "
                      "attribute_dim and aux_hidden must be positive");
  }
  if (std::find(stage_channels.begin(), stage_channels.end(), 0u) !=
      stage_channels.end()) {
    throw ConfigError("model config: stage channel counts must be positive");
  }
  if (norm_epsilon <= 0.0) throw ConfigError("model config: epsilon <= 0");
}

namespace {

Tensor he_kernel(std::size_t out, std::size_t in, std::size_t k,
                 std::mt19937_64& rng) {
  Tensor t({out, in, k, k});
  std::normal_distribution<double> init(
      0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
  for (double& v : t.storage()) v = init(rng);
  t.set_requires_grad(true);
  return t;
}

// Stream separation keeps the backbone identical between BN and CBN builds.
constexpr std::uint64_t kAuxStream = 0x9e3779b97f4a7c15ULL;

}  // namespace

MicroResNet::MicroResNet(const ModelConfig& cfg, NormKind kind,
                         std::uint64_t seed)
    : cfg_(cfg), kind_(kind), seed_(seed) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto make_layer = [&](std::size_t in, std::size_t out, std::size_t k,
                        int stride, int padding) {
    ConvNorm l;
    l.kernel = he_kernel(out, in, k, rng);
    l.norm = NormLayerState::create(out, cfg_.norm_epsilon, cfg_.norm_momentum);
    l.stride = stride;
    l.padding = padding;
    return l;
  };
  stem_ = make_layer(cfg_.in_channels, cfg_.stem_channels, 3, 1, 1);
  std::size_t in = cfg_.stem_channels;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    const std::size_t out = cfg_.stage_channels[s];
    Block b;
    if (s == 0) {
      b.a = make_layer(in, out, 3, 1, 1);
      b.b = make_layer(out, out, 3, 1, 1);
      if (in != out) b.proj = make_layer(in, out, 1, 1, 0);
    } else {
      b.a = make_layer(in, out, 4, 2, 1);
      b.b = make_layer(out, out, 3, 1, 1);
      b.proj = make_layer(in, out, 2, 2, 0);
    }
    blocks_.push_back(std::move(b));
    in = out;
  }
  head_w_ = Tensor({in, cfg_.num_classes});
  std::normal_distribution<double> head_init(
      0.0, 1.0 / std::sqrt(static_cast<double>(in)));
  for (double& v : head_w_.storage()) v = head_init(rng);
  head_w_.set_requires_grad(true);
  head_b_ = Tensor({cfg_.num_classes}, 0.0);
  head_b_.set_requires_grad(true);

  if (kind_ == NormKind::cbn) {
    const bool all = cfg_.cond_scope == CondScope::all;
    stem_.conditioned = all;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const bool on = all || i + 1 == blocks_.size();
      blocks_[i].a.conditioned = on;
      blocks_[i].b.conditioned = on;
      if (blocks_[i].proj) blocks_[i].proj->conditioned = on;
    }
    std::mt19937_64 aux_rng(seed ^ kAuxStream);
    aux_.emplace(cfg_.attribute_dim, conditioned_channels(), cfg_.aux_hidden,
                 cfg_.aux_layout, aux_rng);
  }
}

std::vector<std::size_t> MicroResNet::conditioned_channels() const {
  std::vector<std::size_t> out;
  auto visit = [&](const ConvNorm& l) {
    if (l.conditioned) out.push_back(l.norm.channels);
  };
  visit(stem_);
  for (const Block& b : blocks_) {
    visit(b.a);
    visit(b.b);
    if (b.proj) visit(*b.proj);
  }
  return out;
}

Var MicroResNet::conv_norm(Tape& tape, Var x, ConvNorm& layer, Mode mode,
                           const std::vector<CondDeltas>& deltas,
                           std::size_t& next, Var* conv_out) {
  Var y = conv2d(x, tape.param(layer.kernel, "conv"), layer.stride,
                 layer.padding);
  if (conv_out) *conv_out = y;
  if (layer.conditioned && kind_ == NormKind::cbn) {
    return cbn_forward(y, layer.norm, deltas.at(next++), mode);
  }
  return bn_forward(y, layer.norm, mode);
}

MicroResNet::Output MicroResNet::forward(Tape& tape, const Tensor& images,
                                         const AttributeBatch* attrs,
                                         const std::vector<std::uint8_t>* bypass,
                                         Mode mode) {
  if (images.rank() != 4 || images.dim(1) != cfg_.in_channels) {
    throw ShapeError("model input must be [N," +
                     std::to_string(cfg_.in_channels) + ",H,W], got " +
                     shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0);
  std::vector<CondDeltas> deltas;
  if (kind_ == NormKind::cbn) {
    std::vector<std::uint8_t> flags =
        bypass ? *bypass : std::vector<std::uint8_t>(n, 0);
    if (flags.size() != n) {
      throw ShapeError("bypass flags do not match the batch size");
    }
    const bool all_bypassed =
        std::all_of(flags.begin(), flags.end(), [](auto f) { return f != 0; });
    if (attrs) {
      if (attrs->count != n) {
        throw ShapeError("attribute batch does not match the image batch");
      }
      deltas = predict_deltas(*aux_, tape, *attrs, flags);
    } else if (all_bypassed) {
      for (std::size_t c : conditioned_channels()) {
        CondDeltas d;
        d.delta_gamma = tape.constant(Tensor({n, c}, 0.0), "no_delta");
        d.delta_beta = tape.constant(Tensor({n, c}, 0.0), "no_delta");
        d.bypass = flags;
        deltas.push_back(std::move(d));
      }
    } else {
      throw ConfigError("CBN forward needs attributes or a full bypass");
    }
  }

  std::size_t next = 0;
  Var h = relu(conv_norm(tape, tape.constant(images, "images"), stem_, mode,
                         deltas, next));
  Var tap;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    const bool last = i + 1 == blocks_.size();
    Var a = relu(conv_norm(tape, h, b.a, mode, deltas, next));
    Var r = conv_norm(tape, a, b.b, mode, deltas, next, last ? &tap : nullptr);
    Var skip = b.proj ? conv_norm(tape, h, *b.proj, mode, deltas, next) : h;
    h = relu(add(r, skip));
  }
  Var pooled = global_avg_pool(h);
  Var logits = dense(pooled, tape.param(head_w_, "head.weight"),
                     tape.param(head_b_, "head.bias"));
  return {logits, tap};
}

std::vector<NamedTensor> MicroResNet::parameters() {
  std::vector<NamedTensor> out;
  auto visit = [&](const std::string& name, ConvNorm& l) {
    out.push_back({name + ".conv", &l.kernel});
    out.push_back({name + ".norm.gamma", &l.norm.gamma});
    out.push_back({name + ".norm.beta", &l.norm.beta});
  };
  visit("stem", stem_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "stage" + std::to_string(i);
    visit(p + ".a", blocks_[i].a);
    visit(p + ".b", blocks_[i].b);
    if (blocks_[i].proj) visit(p + ".proj", *blocks_[i].proj);
  }
  out.push_back({"head.weight", &head_w_});
  out.push_back({"head.bias", &head_b_});
  if (aux_) {
    for (NamedTensor& t : aux_->parameters("aux.")) out.push_back(t);
  }
  return out;
}

std::vector<MicroResNet::StateEntry> MicroResNet::state_entries() {
  std::vector<StateEntry> out;
  for (NamedTensor& p : parameters()) {
    out.push_back({p.name, p.tensor->shape(), p.tensor->data()});
  }
  auto visit = [&](const std::string& name, ConvNorm& l) {
    out.push_back({name + ".norm.running_mean", {l.norm.channels},
                   l.norm.running_mean});
    out.push_back({name + ".norm.running_var", {l.norm.channels},
                   l.norm.running_var});
  };
  visit("stem", stem_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "stage" + std::to_string(i);
    visit(p + ".a", blocks_[i].a);
    visit(p + ".b", blocks_[i].b);
    if (blocks_[i].proj) visit(p + ".proj", *blocks_[i].proj);
  }
  return out;
}

std::size_t MicroResNet::parameter_count() {
  std::size_t n = 0;
  for (const NamedTensor& p : parameters()) n += p.tensor->size();
  return n;
}

MicroResNet MicroResNet::bn_twin() const {
  MicroResNet twin = *this;
  twin.kind_ = NormKind::bn;
  twin.aux_.reset();
  twin.stem_.conditioned = false;
  for (Block& b : twin.blocks_) {
    b.a.conditioned = false;
    b.b.conditioned = false;
    if (b.proj) b.proj->conditioned = false;
  }
  return twin;
}

void MicroResNet::zero_grad() {
  for (NamedTensor& p : parameters()) p.tensor->zero_grad();
}

SaliencyMap gradcam_from_activations(const Tensor& activations,
                                     const Tensor& gradients,
                                     int target_class) {
  if (activations.rank() != 3 || activations.shape() != gradients.shape()) {
    throw ShapeError("gradcam expects matching [C,H,W] activations and "
                     "gradients");
  }
  const std::size_t c = activations.dim(0);
  const std::size_t h = activations.dim(1), w = activations.dim(2);
  const std::size_t hw = h * w;
  SaliencyMap map;
  map.target_class = target_class;
  map.heatmap = Tensor({h, w}, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += gradients[k * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      map.heatmap[i] += alpha * activations[k * hw + i];
    }
  }
  double mx = 0.0;
  for (double& v : map.heatmap.storage()) {
    v = std::max(v, 0.0);
    mx = std::max(mx, v);
  }
  if (mx > 0.0) {
    for (double& v : map.heatmap.storage()) v /= mx;
  } else {
    map.all_zero = true;
  }
  return map;
}

SaliencyMap gradcam(MicroResNet& model, const Tensor& image,
                    const AttributeBatch* attrs, bool bypass,
                    int target_class) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("gradcam takes a single image [1,C,H,W]");
  }
  if (target_class < 0 ||
      static_cast<std::size_t>(target_class) >= model.config().num_classes) {
    throw ShapeError("gradcam target class out of range");
  }
  Tape tape;
  const std::vector<std::uint8_t> flags{static_cast<std::uint8_t>(bypass)};
  auto out = model.forward(tape, image, attrs, &flags, Mode::eval);
  Var score = pick(out.logits, static_cast<std::size_t>(target_class));
  tape.backward(score);
  model.zero_grad();

  const Tensor& a = out.feature_map.value();
  const Shape chw{a.dim(1), a.dim(2), a.dim(3)};
  Tensor acts(chw, a.storage());
  auto g = tape.grad(out.feature_map);
  Tensor grads(chw, g.empty() ? std::vector<double>(a.size(), 0.0)
                              : std::vector<double>(g.begin(), g.end()));
  return gradcam_from_activations(acts, grads, target_class);
}

void save_checkpoint(MicroResNet& model, const std::filesystem::path& path,
                     const std::string& config_json) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os.write("CBNLAB01", 8);
  auto entries = model.state_entries();
  binary_io::write_u64(os, entries.size());
  for (const auto& e : entries) {
    binary_io::write_u64(os, e.name.size());
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    binary_io::write_u64(os, e.shape.size());
    for (std::size_t d : e.shape) binary_io::write_u64(os, d);
    for (double v : e.values) binary_io::write_f64(os, v);
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
  std::ofstream cj(path.string() + ".json");
  cj << config_json;
  if (!cj) throw Error("failed writing checkpoint config beside " +
                       path.string());
}

void load_checkpoint(MicroResNet& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  binary_io::expect_magic(is, "CBNLAB01");
  auto entries = model.state_entries();
  const std::uint64_t count = binary_io::read_u64(is);
  if (count != entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) +
                      " tensors, model expects " +
                      std::to_string(entries.size()));
  }
  for (auto& e : entries) {
    const std::uint64_t len = binary_io::read_u64(is);
    if (len > 4096) throw FormatError("checkpoint name length is implausible");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) {
      throw FormatError("unexpected end of file");
    }
    if (name != e.name) {
      throw FormatError("checkpoint tensor '" + name + "' where '" + e.name +
                        "' was expected");
    }
    const std::uint64_t rank = binary_io::read_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = binary_io::read_u64(is);
    if (shape != e.shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(shape) + ", model has " +
                        shape_str(e.shape));
    }
    for (double& v : e.values) v = binary_io::read_f64(is);
  }
  if (is.peek() != std::ifstream::traits_type::eof()) {
    throw FormatError("trailing bytes after checkpoint payload");
  }
}

}  // namespace cbnlab
