#include "cbnlab/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "cbnlab/error.hpp"
#include "cbnlab/ops.hpp"

namespace cbnlab {

using nlohmann::json;

void ExperimentConfig::validate() const {
  dataset.validate();
  model.validate();
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("m must lie in [0,1]");
  if (!(train_mask_fraction >= 0.0 && train_mask_fraction <= 1.0)) {
    throw ConfigError("train_mask_fraction must lie in [0,1]");
  }
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0,1)");
  }
  if (optimizer != "sgd_momentum") {
    throw ConfigError("unsupported optimizer '" + optimizer + "'");
  }
  if (num_runs == 0) throw ConfigError("num_runs must be positive");
}

json to_json(const ShortcutDatasetConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"attribute_dim", c.attribute_dim},
              {"rho", c.rho},
              {"image_size", c.image_size},
              {"visual_noise_sigma", c.visual_noise_sigma},
              {"attribute_kind", to_string(c.attribute_kind)},
              {"samples_per_class", c.samples_per_class},
              {"seed", c.seed}};
}

json to_json(const ModelConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"stem_channels", c.stem_channels},
              {"stage_channels", c.stage_channels},
              {"num_classes", c.num_classes},
              {"attribute_dim", c.attribute_dim},
              {"aux_hidden", c.aux_hidden},
              {"aux_layout", to_string(c.aux_layout)},
              {"cond_scope", to_string(c.cond_scope)},
              {"norm_epsilon", c.norm_epsilon},
              {"norm_momentum", c.norm_momentum}};
}

json to_json(const ExperimentConfig& c) {
  json dataset = to_json(c.dataset);
  if (!c.dataset_path.empty()) dataset["path"] = c.dataset_path;
  return json{{"dataset", dataset},
              {"model", to_json(c.model)},
              {"norm_kind", to_string(c.norm_kind)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"optimizer", c.optimizer},
              {"momentum", c.momentum},
              {"cosine_decay", c.cosine_decay},
              {"train_mask_fraction", c.train_mask_fraction},
              {"train_mask_mode", to_string(c.train_mask_mode)},
              {"m", c.m},
              {"supplementary_enabled", c.supplementary_enabled},
              {"seed", c.seed},
              {"num_runs", c.num_runs},
              {"zero_images", c.zero_images}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const char* what) {
  const std::set<std::string> names(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!names.count(it.key())) {
      throw ConfigError(std::string("unknown ") + what + " field '" +
                        it.key() + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

}  // namespace

ShortcutDatasetConfig dataset_config_from_json(const json& j) {
  reject_unknown(j,
                 {"num_classes", "attribute_dim", "rho", "image_size",
                  "visual_noise_sigma", "attribute_kind", "samples_per_class",
                  "seed", "path"},
                 "dataset");
  ShortcutDatasetConfig c;
  read(j, "num_classes", c.num_classes);
  read(j, "attribute_dim", c.attribute_dim);
  read(j, "rho", c.rho);
  read(j, "image_size", c.image_size);
  read(j, "visual_noise_sigma", c.visual_noise_sigma);
  std::string kind = to_string(c.attribute_kind);
  read(j, "attribute_kind", kind);
  c.attribute_kind = attribute_kind_from_string(kind);
  read(j, "samples_per_class", c.samples_per_class);
  read(j, "seed", c.seed);
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"in_channels", "stem_channels", "stage_channels",
                  "num_classes", "attribute_dim", "aux_hidden", "aux_layout",
                  "cond_scope", "norm_epsilon", "norm_momentum"},
                 "model");
  ModelConfig c;
  read(j, "in_channels", c.in_channels);
  read(j, "stem_channels", c.stem_channels);
  read(j, "stage_channels", c.stage_channels);
  read(j, "num_classes", c.num_classes);
  read(j, "attribute_dim", c.attribute_dim);
  read(j, "aux_hidden", c.aux_hidden);
  std::string layout = to_string(c.aux_layout), scope = to_string(c.cond_scope);
  read(j, "aux_layout", layout);
  read(j, "cond_scope", scope);
  c.aux_layout = aux_layout_from_string(layout);
  c.cond_scope = cond_scope_from_string(scope);
  read(j, "norm_epsilon", c.norm_epsilon);
  read(j, "norm_momentum", c.norm_momentum);
  return c;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be an object");
  reject_unknown(j,
                 {"dataset", "model", "norm_kind", "epochs", "batch_size",
                  "learning_rate", "optimizer", "momentum", "cosine_decay",
                  "train_mask_fraction", "train_mask_mode", "m",
                  "supplementary_enabled", "seed", "num_runs", "zero_images"},
                 "experiment");
  ExperimentConfig c;
  if (auto it = j.find("dataset"); it != j.end()) {
    if (it->is_string()) {
      c.dataset_path = it->get<std::string>();
    } else {
      c.dataset = dataset_config_from_json(*it);
      read(*it, "path", c.dataset_path);
    }
  }
  if (auto it = j.find("model"); it != j.end()) {
    c.model = model_config_from_json(*it);
  }
  std::string kind = to_string(c.norm_kind);
  read(j, "norm_kind", kind);
  c.norm_kind = norm_kind_from_string(kind);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "optimizer", c.optimizer);
  read(j, "momentum", c.momentum);
  read(j, "cosine_decay", c.cosine_decay);
  read(j, "train_mask_fraction", c.train_mask_fraction);
  std::string mode = to_string(c.train_mask_mode);
  read(j, "train_mask_mode", mode);
  c.train_mask_mode = mask_mode_from_string(mode);
  read(j, "m", c.m);
  read(j, "supplementary_enabled", c.supplementary_enabled);
  read(j, "seed", c.seed);
  read(j, "num_runs", c.num_runs);
  read(j, "zero_images", c.zero_images);
  c.validate();
  return c;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("format_double failed");
  return std::string(buf, end);
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> rows) {
  os << kMetricsHeader << '\n';
  for (const MetricsRecord& r : rows) {
    os << r.run_id << ',' << r.seed << ',' << r.epoch << ',' << r.split << ','
       << format_double(r.test_mask_fraction) << ','
       << format_double(r.train_mask_fraction) << ','
       << format_double(r.accuracy) << ',' << format_double(r.ce_loss) << ','
       << format_double(r.kl_loss) << '\n';
  }
}

namespace {

Tensor gather_images(const Tensor& images, std::span<const std::size_t> idx) {
  const std::size_t per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(images.data().begin() + idx[r] * per, per,
                out.data().begin() + r * per);
  }
  return out;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  const auto begin = logits.data().begin() + row * k;
  return static_cast<std::size_t>(std::max_element(begin, begin + k) - begin);
}

}  // namespace

EvalResult evaluate(MicroResNet& model, const Split& split,
                    const AttributeBatch* attrs,
                    const std::vector<std::uint8_t>* bypass,
                    std::size_t batch) {
  const std::size_t n = split.size();
  if (n == 0) return {};
  const AttributeBatch& a = attrs ? *attrs : split.attributes;
  if (a.count != n || (bypass && bypass->size() != n)) {
    throw ShapeError("evaluate: attribute/bypass rows do not match split");
  }
  std::size_t correct = 0;
  double ce = 0.0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    std::vector<std::size_t> idx(len);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor images = gather_images(split.images, idx);
    const AttributeBatch rows = a.rows(idx);
    std::vector<std::uint8_t> flags;
    if (bypass) flags.assign(bypass->begin() + start, bypass->begin() + start + len);
    Tape tape;
    auto out = model.forward(tape, images, &rows, bypass ? &flags : nullptr,
                             Mode::eval);
    std::span<const int> labels(split.labels.data() + start, len);
    ce += cross_entropy(out.logits, labels).value()[0] * static_cast<double>(len);
    for (std::size_t r = 0; r < len; ++r) {
      correct += argmax_row(out.logits.value(), r) ==
                 static_cast<std::size_t>(labels[r]);
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(n),
          ce / static_cast<double>(n)};
}

void sgd_step(std::span<Tensor* const> params,
              std::vector<std::vector<double>>& velocities, double lr,
              double momentum) {
  if (velocities.size() != params.size()) {
    throw ShapeError("sgd_step: one velocity buffer per parameter required");
  }
  for (Tensor* p : params) {
    if (p->has_grad() && p->grad().size() != p->size()) {
      throw ShapeError("sgd_step: gradient shape mismatch");
    }
    for (double g : p->grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in sgd_step");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    auto& v = velocities[i];
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    auto g = p.grad();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

SgdMomentum::SgdMomentum(std::vector<NamedTensor> params, double momentum)
    : momentum_(momentum) {
  for (NamedTensor& p : params) {
    p.tensor->ensure_grad();
    params_.push_back(p.tensor);
  }
  velocity_.resize(params_.size());
}

void SgdMomentum::step(double lr) {
  sgd_step(params_, velocity_, lr, momentum_);
  for (Tensor* p : params_) p->zero_grad();
}

CompositeLoss composite_loss(Var logits_f, Var logits_g,
                             std::span<const int> labels, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("m must lie in [0,1]");
  if (logits_f.shape() != logits_g.shape()) {
    throw ShapeError("composite_loss: F and G logits differ in shape");
  }
  Var ce = cross_entropy(logits_f, labels);
  Var kl = kl_divergence(logits_f, logits_g);
  Var total = add(scale(ce, m), scale(kl, 1.0 - m));
  return {total, ce, kl};
}

ModelConfig resolve_model_config(const ExperimentConfig& cfg,
                                 const Dataset& data) {
  ModelConfig m = cfg.model;
  m.num_classes = data.num_classes;
  m.attribute_dim = data.attribute_dim;
  return m;
}

Dataset prepare_dataset(const ExperimentConfig& cfg) {
  Dataset data = cfg.dataset_path.empty() ? generate(cfg.dataset)
                                          : load_dataset(cfg.dataset_path);
  if (cfg.zero_images) data = zero_images(std::move(data));
  return data;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double kl_on_split(MicroResNet& f, MicroResNet& g, const Split& split) {
  const std::size_t n = split.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  constexpr std::size_t batch = 128;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    std::vector<std::size_t> idx(len);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor images = gather_images(split.images, idx);
    const AttributeBatch rows = split.attributes.rows(idx);
    Tape tape;
    Var lf = f.forward(tape, images, &rows, nullptr, Mode::eval).logits;
    Var lg = g.forward(tape, images, nullptr, nullptr, Mode::eval).logits;
    total += kl_divergence(lf, lg).value()[0] * static_cast<double>(len);
  }
  return total / static_cast<double>(n);
}

TrainResult run_training(const ExperimentConfig& cfg, const Dataset& data,
                         int run_id, bool with_supplementary) {
  cfg.validate();
  const ModelConfig mcfg = resolve_model_config(cfg, data);
  const NormKind kind = with_supplementary ? NormKind::cbn : cfg.norm_kind;
  TrainResult result{MicroResNet(mcfg, kind, cfg.seed), std::nullopt, {}, false,
                     {}, 0.0, {}};
  MicroResNet& model = result.model;
  if (with_supplementary) result.supplementary.emplace(mcfg, NormKind::bn, cfg.seed);

  SgdMomentum opt(model.parameters(), cfg.momentum);
  std::optional<SgdMomentum> opt_g;
  if (with_supplementary) {
    opt_g.emplace(result.supplementary->parameters(), cfg.momentum);
  }

  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 1));
  std::mt19937_64 mask_rng(mix_seed(cfg.seed, 2));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const Split& train = data.train;
  const std::size_t n = train.size();
  const std::size_t batches_per_epoch =
      n / cfg.batch_size + (n % cfg.batch_size >= 2 ? 1 : 0);
  const double total_steps =
      static_cast<double>(std::max<std::size_t>(1, batches_per_epoch * cfg.epochs));
  const bool masking = kind == NormKind::cbn && cfg.train_mask_fraction > 0.0;

  auto emit = [&](int epoch, const std::string& split, double acc, double ce,
                  double kl) {
    result.metrics.push_back({run_id, cfg.seed, epoch, split, 0.0,
                              cfg.train_mask_fraction, acc, ce, kl});
  };
  auto emit_val = [&](int epoch) {
    EvalResult v = evaluate(model, data.val);
    double kl = 0.0;
    if (with_supplementary) {
      kl = kl_on_split(model, *result.supplementary, data.val);
      EvalResult vg = evaluate(*result.supplementary, data.val);
      emit(epoch, "supp_val", vg.accuracy, vg.ce_loss, 0.0);
    }
    emit(epoch, "val", v.accuracy, v.ce_loss, kl);
    result.val_accuracy.push_back(v.accuracy);
  };

  try {
    emit_val(0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double loss_sum = 0.0, kl_sum = 0.0;
      std::size_t correct = 0, seen = 0;
      for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
        const std::size_t start = b * cfg.batch_size;
        const std::size_t len = std::min(cfg.batch_size, n - start);
        std::span<const std::size_t> idx(order.data() + start, len);
        const Tensor images = gather_images(train.images, idx);
        AttributeBatch attrs = train.attributes.rows(idx);
        std::vector<int> labels(len);
        for (std::size_t r = 0; r < len; ++r) labels[r] = train.labels[idx[r]];
        std::vector<std::uint8_t> bypass(len, 0);
        if (masking) {
          if (cfg.train_mask_mode == MaskMode::delta_bypass) {
            for (auto& f : bypass) f = unit(mask_rng) < cfg.train_mask_fraction;
          } else {
            attrs = mask_attributes(attrs, cfg.train_mask_fraction,
                                    MaskMode::dimension_zero, mask_rng())
                        .attributes;
          }
        }
        const double lr =
            cfg.cosine_decay
                ? cfg.learning_rate * 0.5 *
                      (1.0 + std::cos(std::numbers::pi *
                                      static_cast<double>(step) / total_steps))
                : cfg.learning_rate;

        Tensor logits_g;
        if (with_supplementary) {
          Tape tg;
          Var lg = result.supplementary
                       ->forward(tg, images, nullptr, nullptr, Mode::train)
                       .logits;
          logits_g = lg.value();
          tg.backward(cross_entropy(lg, labels));
          opt_g->step(lr);
        }

        Tape tape;
        auto out = model.forward(tape, images, &attrs, &bypass, Mode::train);
        Var loss, ce;
        if (with_supplementary) {
          CompositeLoss cl = composite_loss(
              out.logits, tape.constant(logits_g, "supplementary_logits"),
              labels, cfg.m);
          loss = cl.total;
          ce = cl.ce;
          kl_sum += cl.kl.value()[0] * static_cast<double>(len);
        } else {
          loss = ce = cross_entropy(out.logits, labels);
        }
        tape.backward(loss);
        opt.step(lr);

        loss_sum += ce.value()[0] * static_cast<double>(len);
        for (std::size_t r = 0; r < len; ++r) {
          correct += argmax_row(out.logits.value(), r) ==
                     static_cast<std::size_t>(labels[r]);
        }
        seen += len;
      }
      const double denom = static_cast<double>(std::max<std::size_t>(seen, 1));
      emit(static_cast<int>(epoch), "train", correct / denom, loss_sum / denom,
           kl_sum / denom);
      emit_val(static_cast<int>(epoch));
    }
    EvalResult t = evaluate(model, data.test);
    result.test_accuracy = t.accuracy;
    emit(static_cast<int>(cfg.epochs), "test", t.accuracy, t.ce_loss, 0.0);
  } catch (const NumericError& e) {
    result.diverged = true;
    result.diagnostic = e.what();
    emit(static_cast<int>(result.val_accuracy.size()), "diverged", 0.0, 0.0, 0.0);
  }
  return result;
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg, const Dataset& data,
                  int run_id) {
  return run_training(cfg, data, run_id, cfg.supplementary_enabled);
}

TrainResult train_with_supplementary(const ExperimentConfig& cfg,
                                     const Dataset& data, int run_id) {
  if (!cfg.supplementary_enabled) {
    throw ConfigError("train_with_supplementary requires supplementary_enabled");
  }
  return run_training(cfg, data, run_id, true);
}

std::size_t default_jobs() {
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace cbnlab
