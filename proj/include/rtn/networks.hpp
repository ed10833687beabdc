#pragma once

// Baseline ConvNet classifier and the Radio Transformer Network composite:
// localization network -> transform cascade -> the same classifier.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rtn/autodiff.hpp"
#include "rtn/io.hpp"
#include "rtn/radio_layers.hpp"

namespace rtn::nn {

using ad::Padding;
using ad::Tape;
using ad::Var;

enum class LayerKind { complex_conv, real_conv, cartesian_to_polar, dense, relu, dropout, softmax, flatten };

// Dense units value meaning "one per class", resolved at build time.
inline constexpr std::size_t kClassUnits = 0;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;  // filters for convolutions, outputs for dense
  std::size_t taps = 0;
  Padding padding = Padding::same;

  static LayerSpec complex_conv(std::size_t filters, std::size_t taps, Padding p = Padding::same) {
    return {LayerKind::complex_conv, filters, taps, p};
  }
  static LayerSpec real_conv(std::size_t filters, std::size_t taps, Padding p = Padding::same) {
    return {LayerKind::real_conv, filters, taps, p};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, units, 0, Padding::same}; }
  static LayerSpec of(LayerKind k) { return {k, 0, 0, Padding::same}; }

  // Text form: "real_conv:64:8:same", "complex_conv:32:8:valid",
  // "dense:128", "dense:classes", "polar", "flatten", "relu", "dropout",
  // "softmax".
  static LayerSpec parse(const std::string& text) {
    std::vector<std::string> f;
    std::stringstream ss(text);
    for (std::string tok; std::getline(ss, tok, ':');) f.push_back(tok);
    auto bad = [&]() { return InvalidInput("invalid layer spec '" + text + "'"); };
    auto count = [&](const std::string& s) -> std::size_t {
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) throw bad();
      return std::stoul(s);
    };
    auto pad = [&](const std::string& s) {
      if (s == "same") return Padding::same;
      if (s == "valid") return Padding::valid;
      throw bad();
    };
    if (f.empty()) throw bad();
    const std::string& k = f[0];
    if ((k == "real_conv" || k == "complex_conv") && (f.size() == 3 || f.size() == 4)) {
      Padding p = f.size() == 4 ? pad(f[3]) : Padding::same;
      return {k == "real_conv" ? LayerKind::real_conv : LayerKind::complex_conv, count(f[1]), count(f[2]), p};
    }
    if (k == "dense" && f.size() == 2) return dense(f[1] == "classes" ? kClassUnits : count(f[1]));
    if (f.size() == 1) {
      if (k == "polar") return of(LayerKind::cartesian_to_polar);
      if (k == "flatten") return of(LayerKind::flatten);
      if (k == "relu") return of(LayerKind::relu);
      if (k == "dropout") return of(LayerKind::dropout);
      if (k == "softmax") return of(LayerKind::softmax);
    }
    throw bad();
  }

  std::string str() const {
    const std::string pad = padding == Padding::same ? "same" : "valid";
    switch (kind) {
      case LayerKind::complex_conv: return "complex_conv:" + std::to_string(units) + ":" + std::to_string(taps) + ":" + pad;
      case LayerKind::real_conv: return "real_conv:" + std::to_string(units) + ":" + std::to_string(taps) + ":" + pad;
      case LayerKind::dense: return units == kClassUnits ? "dense:classes" : "dense:" + std::to_string(units);
      case LayerKind::cartesian_to_polar: return "polar";
      case LayerKind::flatten: return "flatten";
      case LayerKind::relu: return "relu";
      case LayerKind::dropout: return "dropout";
      case LayerKind::softmax: return "softmax";
    }
    return "?";
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline std::vector<LayerSpec> parse_layers(const std::vector<std::string>& texts) {
  std::vector<LayerSpec> out;
  for (const auto& t : texts) out.push_back(LayerSpec::parse(t));
  return out;
}

inline std::string join_layers(const std::vector<LayerSpec>& layers) {
  std::string s;
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + layers[i].str();
  return s;
}

inline std::vector<LayerSpec> split_layers(const std::string& joined) {
  std::vector<LayerSpec> out;
  std::stringstream ss(joined);
  for (std::string tok; std::getline(ss, tok, ',');) out.push_back(LayerSpec::parse(tok));
  return out;
}

inline std::vector<LayerSpec> default_classifier() {
  return {LayerSpec::real_conv(64, 8),      LayerSpec::of(LayerKind::relu),    LayerSpec::of(LayerKind::dropout),
          LayerSpec::real_conv(16, 8),      LayerSpec::of(LayerKind::relu),    LayerSpec::of(LayerKind::dropout),
          LayerSpec::of(LayerKind::flatten), LayerSpec::dense(128),            LayerSpec::of(LayerKind::relu),
          LayerSpec::of(LayerKind::dropout), LayerSpec::dense(kClassUnits),   LayerSpec::of(LayerKind::softmax)};
}

inline std::vector<LayerSpec> default_localization() {
  return {LayerSpec::complex_conv(32, 8), LayerSpec::of(LayerKind::cartesian_to_polar),
          LayerSpec::of(LayerKind::flatten), LayerSpec::dense(64),
          LayerSpec::of(LayerKind::relu),    LayerSpec::of(LayerKind::dropout),
          LayerSpec::dense(5)};
}

enum class ModelKind { baseline, rtn };

inline std::string to_string(ModelKind k) { return k == ModelKind::rtn ? "rtn" : "baseline"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "baseline") return ModelKind::baseline;
  if (s == "rtn") return ModelKind::rtn;
  throw InvalidInput("unknown model kind '" + s + "' (expected baseline or rtn)");
}

struct ModelConfig {
  ModelKind kind = ModelKind::baseline;
  std::size_t frame_len = 128;
  std::size_t n_classes = 11;
  std::vector<LayerSpec> classifier = default_classifier();
  std::vector<LayerSpec> localization = default_localization();
  radio::Atan2Mode polar_mode = radio::Atan2Mode::reference;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One parameterised layer's tensors, in order of appearance.
template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

namespace detail {

struct LayerPlan {
  LayerSpec spec;
  Shape in;   // per-example shape (no batch axis)
  Shape out;
  std::vector<std::size_t> params;  // indices into the model's parameter list
};

inline std::string layer_error(const std::string& net, std::size_t i, const LayerSpec& s, const Shape& in,
                               const std::string& why) {
  return net + " layer " + std::to_string(i) + " (" + s.str() + ") on input " + shape_str(in) + ": " + why;
}

}  // namespace detail

// A sequential stack with shapes resolved at build time.
class Sequential {
 public:
  Sequential() = default;

  // Resolves shapes and appends parameter shapes (name, shape) to `params`.
  Sequential(std::string name, const std::vector<LayerSpec>& layers, Shape input, std::size_t n_classes,
             std::vector<std::pair<std::string, Shape>>& params)
      : name_(std::move(name)) {
    if (layers.empty()) throw InvalidInput(name_ + ": no layers configured");
    Shape cur = std::move(input);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      detail::LayerPlan plan{layers[i], cur, {}, {}};
      const LayerSpec& s = layers[i];
      auto fail = [&](const std::string& why) { return InvalidInput(detail::layer_error(name_, i, s, cur, why)); };
      auto add_param = [&](const std::string& suffix, Shape shape) {
        plan.params.push_back(params.size());
        params.emplace_back(name_ + "." + std::to_string(i) + "." + suffix, std::move(shape));
      };
      switch (s.kind) {
        case LayerKind::real_conv: {
          if (cur.size() != 2) throw fail("expects (channels, length)");
          if (s.units == 0 || s.taps == 0) throw fail("filters and taps must be positive");
          if (s.padding == Padding::valid && s.taps > cur[1]) throw fail("taps exceed length");
          add_param("w", {s.units, cur[0], s.taps});
          add_param("b", {s.units, 1});
          plan.out = {s.units, ad::conv_output_length(cur[1], s.taps, s.padding)};
          break;
        }
        case LayerKind::complex_conv: {
          if (cur.size() != 2 || cur[0] != 2) throw fail("expects an I/Q signal (2, length)");
          if (s.units == 0 || s.taps == 0) throw fail("filters and taps must be positive");
          if (s.padding == Padding::valid && s.taps > cur[1]) throw fail("taps exceed length");
          add_param("w", {s.units, 2, s.taps});
          plan.out = {s.units, 2, ad::conv_output_length(cur[1], s.taps, s.padding)};
          break;
        }
        case LayerKind::cartesian_to_polar: {
          if (cur.size() == 2 && cur[0] == 2) {
            plan.out = {2, cur[1]};
          } else if (cur.size() == 3 && cur[1] == 2) {
            plan.out = {2 * cur[0], cur[2]};
          } else {
            throw fail("expects (2, length) or (filters, 2, length)");
          }
          break;
        }
        case LayerKind::flatten: plan.out = {shape_size(cur)}; break;
        case LayerKind::dense: {
          if (cur.size() != 1) throw fail("expects a flat input; add flatten");
          const std::size_t units = s.units == kClassUnits ? n_classes : s.units;
          if (units == 0) throw fail("units must be positive");
          add_param("w", {cur[0], units});
          add_param("b", {units});
          plan.out = {units};
          break;
        }
        case LayerKind::softmax:
          if (cur.size() != 1) throw fail("expects a flat input");
          if (i + 1 != layers.size()) throw fail("softmax must be the final layer");
          plan.out = cur;
          break;
        case LayerKind::relu:
        case LayerKind::dropout: plan.out = cur; break;
      }
      cur = plan.out;
      plans_.push_back(std::move(plan));
    }
  }

  const Shape& output_shape() const { return plans_.back().out; }
  const std::vector<detail::LayerPlan>& plans() const { return plans_; }

  template <class T>
  Var<T> forward(Var<T> x, std::span<const Var<T>> params, T dropout_p, radio::Atan2Mode mode) const {
    Var<T> a = x;
    const std::size_t B = x.shape()[0];
    for (const auto& plan : plans_) {
      switch (plan.spec.kind) {
        case LayerKind::real_conv: {
          a = ad::conv1d(a, params[plan.params[0]], plan.spec.padding) + params[plan.params[1]];
          break;
        }
        case LayerKind::complex_conv: a = radio::complex_conv1d(a, params[plan.params[0]], plan.spec.padding); break;
        case LayerKind::cartesian_to_polar: {
          const Shape& in = plan.in;
          Var<T> src = in.size() == 2 ? ad::reshape(a, Shape{B, 1, 2, in[1]}) : a;
          auto polar = radio::cartesian_to_polar(src, mode);
          a = ad::concat<T>({polar.magnitude_sq, polar.phase}, 1);
          break;
        }
        case LayerKind::flatten: a = ad::reshape(a, Shape{B, plan.out[0]}); break;
        case LayerKind::dense: a = ad::matmul(a, params[plan.params[0]]) + params[plan.params[1]]; break;
        case LayerKind::relu: a = ad::relu(a); break;
        case LayerKind::dropout: a = ad::dropout(a, dropout_p); break;
        case LayerKind::softmax: a = ad::softmax(a); break;
      }
    }
    return a;
  }

 private:
  std::string name_;
  std::vector<detail::LayerPlan> plans_;
};

template <class T>
struct ForwardResult {
  Var<T> probs;                      // (B, C)
  std::optional<Var<T>> theta;       // (B, 5), RTN only
  std::optional<Var<T>> transformed; // (B, 2, N), RTN only
};

// Baseline classifier or full RTN. Parameters are held by value; Vars are
// bound to a tape per forward pass.
template <class T>
class Model {
 public:
  Model() = default;

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.frame_len < 2) throw InvalidInput("model: frame_len must be at least 2");
    if (cfg_.n_classes < 2) throw InvalidInput("model: n_classes must be at least 2");
    std::vector<std::pair<std::string, Shape>> shapes;
    const Shape input{2, cfg_.frame_len};
    if (cfg_.kind == ModelKind::rtn) {
      localization_ = Sequential("loc", cfg_.localization, input, cfg_.n_classes, shapes);
      if (cfg_.localization.back().kind != LayerKind::dense || localization_->output_shape() != Shape{5}) {
        throw InvalidInput("model: localization network must end in a dense layer with exactly 5 outputs");
      }
    }
    const std::size_t n_loc = shapes.size();
    classifier_ = Sequential("cls", cfg_.classifier, input, cfg_.n_classes, shapes);
    if (cfg_.classifier.back().kind != LayerKind::softmax || classifier_.output_shape() != Shape{cfg_.n_classes}) {
      throw InvalidInput("model: classifier must end in softmax over " + std::to_string(cfg_.n_classes) + " classes");
    }
    for (auto& [name, shape] : shapes) params_.push_back({name, Tensor<T>(shape)});
    initialize(n_loc);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedTensor<T>>& params() { return params_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }
  std::size_t n_localization_params() const { return n_loc_; }

  std::vector<Var<T>> bind(Tape<T>& tape, bool requires_grad) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p.value, requires_grad));
    return vars;
  }

  // x: (B, 2, frame_len).
  ForwardResult<T> forward(Var<T> x, std::span<const Var<T>> params, T dropout_p) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != 2 || s[2] != cfg_.frame_len) {
      throw InvalidInput("model: expected frames of shape (B,2," + std::to_string(cfg_.frame_len) + "), got " +
                         shape_str(s));
    }
    if (params.size() != params_.size()) throw Error("model: parameter binding count mismatch");
    if (cfg_.kind == ModelKind::baseline) {
      return {classifier_.forward(x, params, dropout_p, cfg_.polar_mode), std::nullopt, std::nullopt};
    }
    Var<T> theta = localization_->forward(x, params, dropout_p, cfg_.polar_mode);
    Var<T> transformed = radio::transform_cascade(x, theta, cfg_.frame_len);
    Var<T> probs = classifier_.forward(transformed, params, dropout_p, cfg_.polar_mode);
    return {probs, theta, transformed};
  }

  // Copies classifier parameters from another model with the same
  // classifier architecture.
  void copy_classifier_from(const Model& other) {
    if (other.cfg_.classifier != cfg_.classifier || other.cfg_.n_classes != cfg_.n_classes ||
        other.cfg_.frame_len != cfg_.frame_len) {
      throw InvalidInput("model: classifier architectures differ");
    }
    for (std::size_t i = 0; i < params_.size() - n_loc_; ++i) {
      params_[n_loc_ + i].value = other.params_[other.n_loc_ + i].value;
    }
  }

 private:
  // Glorot-uniform weights and zero biases. Classifier and localization draw
  // from separate streams of the seed, so a baseline and an RTN built from
  // the same seed share classifier weights. The final localization layer
  // starts at zero weights with bias (1, 1, 0, 0, 0): the identity transform.
  void initialize(std::size_t n_loc) {
    n_loc_ = n_loc;
    std::mt19937_64 loc_rng(mix_seed(cfg_.seed, 2)), cls_rng(mix_seed(cfg_.seed, 1));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      std::mt19937_64& rng = i < n_loc ? loc_rng : cls_rng;
      const Shape& s = p.value.shape();
      const bool is_bias = p.name.ends_with(".b");
      if (is_bias) continue;
      double fan_in, fan_out;
      if (s.size() == 2) {
        fan_in = static_cast<double>(s[0]);
        fan_out = static_cast<double>(s[1]);
      } else {
        fan_in = static_cast<double>(s[1] * s[2]);
        fan_out = static_cast<double>(s[0] * s[2]);
      }
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : p.value.data()) v = static_cast<T>(limit * u(rng));
    }
    if (cfg_.kind == ModelKind::rtn) {
      auto& w = params_[n_loc - 2].value;
      auto& b = params_[n_loc - 1].value;
      w.fill(T{0});
      b = Tensor<T>(Shape{5}, std::vector<T>{1, 1, 0, 0, 0});
    }
  }

  ModelConfig cfg_;
  std::optional<Sequential> localization_;
  Sequential classifier_;
  std::vector<NamedTensor<T>> params_;
  std::size_t n_loc_ = 0;
};

template <class T>
Model<T> build_baseline(ModelConfig cfg) {
  cfg.kind = ModelKind::baseline;
  return Model<T>(std::move(cfg));
}

template <class T>
Model<T> build_rtn(ModelConfig cfg) {
  cfg.kind = ModelKind::rtn;
  return Model<T>(std::move(cfg));
}

template <class T>
struct Classification {
  Tensor<T> probs;                       // (B, C)
  std::optional<Tensor<T>> theta;        // (B, 5)
  std::optional<Tensor<T>> transformed;  // (B, 2, N)
};

// Inference (dropout off) over a (B, 2, N) batch.
template <class T>
Classification<T> forward_classify(const Model<T>& model, const Tensor<T>& frames) {
  Tape<T> tape(false);
  auto params = model.bind(tape, false);
  auto out = model.forward(tape.constant(frames), params, T{0});
  Classification<T> res{out.probs.value(), std::nullopt, std::nullopt};
  if (out.theta) res.theta = out.theta->value();
  if (out.transformed) res.transformed = out.transformed->value();
  return res;
}

// ---- configuration as key/value text ----

inline std::map<std::string, std::string> config_to_kv(const ModelConfig& c) {
  return {{"model.kind", to_string(c.kind)},
          {"model.frame_len", std::to_string(c.frame_len)},
          {"model.n_classes", std::to_string(c.n_classes)},
          {"model.classifier", join_layers(c.classifier)},
          {"model.localization", join_layers(c.localization)},
          {"model.polar_mode", radio::to_string(c.polar_mode)},
          {"model.seed", std::to_string(c.seed)}};
}

inline ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw InvalidInput("checkpoint manifest is missing key '" + k + "'");
    return it->second;
  };
  ModelConfig c;
  c.kind = parse_model_kind(get("model.kind"));
  c.frame_len = std::stoul(get("model.frame_len"));
  c.n_classes = std::stoul(get("model.n_classes"));
  c.classifier = split_layers(get("model.classifier"));
  c.localization = split_layers(get("model.localization"));
  c.polar_mode = radio::parse_atan2_mode(get("model.polar_mode"));
  c.seed = std::stoull(get("model.seed"));
  return c;
}

// ---- checkpoints ----
//
// Directory layout:
//   manifest.txt          key=value lines, sorted by key
//   tensors/<name>.f32    little-endian float32, shape declared in the
//                         manifest as tensor.<name>=d0xd1x...
//
// Model parameters are stored under "param.<name>"; training state may add
// further tensors (optimizer moments) under other prefixes.

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, std::string> meta;      // epoch, seed, lr, ...
  std::map<std::string, Tensor<float>> tensors; // param.*, adam.m.*, ...
};

inline std::string dims_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline Shape parse_dims(const std::string& text) {
  if (text == "scalar") return {};
  Shape s;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, 'x');) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      throw InvalidInput("invalid tensor shape '" + text + "'");
    }
    s.push_back(std::stoul(tok));
  }
  return s;
}

inline std::map<std::string, std::string> parse_kv(const std::string& text, const std::string& where) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput(where + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  io::ensure_dir(dir / "tensors");
  std::map<std::string, std::string> kv = config_to_kv(ck.config);
  kv["format"] = "rtn-checkpoint-1";
  for (const auto& [k, v] : ck.meta) kv["meta." + k] = v;
  for (const auto& [name, t] : ck.tensors) {
    kv["tensor." + name] = dims_str(t.shape());
    io::write_array<float>(dir / "tensors" / (name + ".f32"), t.data());
  }
  std::string text;
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  io::write_text(dir / "manifest.txt", text);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_regular_file(dir / "manifest.txt")) {
    throw InvalidInput("not a checkpoint directory: " + dir.string());
  }
  auto kv = parse_kv(io::read_text(dir / "manifest.txt"), (dir / "manifest.txt").string());
  if (kv["format"] != "rtn-checkpoint-1") throw InvalidInput(dir.string() + ": unsupported checkpoint format");
  Checkpoint ck;
  ck.config = config_from_kv(kv);
  for (const auto& [k, v] : kv) {
    if (k.starts_with("meta.")) ck.meta[k.substr(5)] = v;
    if (k.starts_with("tensor.")) {
      const std::string name = k.substr(7);
      Shape shape = parse_dims(v);
      auto data = io::read_array<float>(dir / "tensors" / (name + ".f32"), shape_size(shape));
      ck.tensors.emplace(name, Tensor<float>(shape, std::move(data)));
    }
  }
  return ck;
}

inline void store_params(Checkpoint& ck, const Model<float>& model, const std::string& prefix = "param.") {
  for (const auto& p : model.params()) ck.tensors[prefix + p.name] = p.value;
}

// Rebuilds the model described by a checkpoint and loads its parameters.
inline Model<float> model_from_checkpoint(const Checkpoint& ck, const std::string& prefix = "param.") {
  Model<float> model(ck.config);
  for (auto& p : model.params()) {
    auto it = ck.tensors.find(prefix + p.name);
    if (it == ck.tensors.end()) throw InvalidInput("checkpoint is missing tensor '" + prefix + p.name + "'");
    if (it->second.shape() != p.value.shape()) {
      throw InvalidInput("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                         ", model expects " + shape_str(p.value.shape()));
    }
    p.value = it->second;
  }
  return model;
}

}  // namespace rtn::nn
