#pragma once

// Minibatch training with Adam, dropout, plateau-triggered learning-rate
// halving, best-checkpoint selection and exact resume.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rtn/networks.hpp"
#include "rtn/signalgen.hpp"

namespace rtn::train {

using nn::Model;

struct TrainConfig {
  std::size_t batch_size = 1024;
  double lr_init = 1e-3;
  double dropout_p = 0.5;
  std::size_t max_epochs = 350;
  std::size_t plateau_patience = 5;
  double min_lr = 1e-6;
  double plateau_epsilon = 1e-4;  // validation improvement smaller than this counts as a plateau
  // RTN only: the localization network stays frozen at its identity
  // initialization for the first warm-up epochs, then learns at
  // lr * localization_lr_scale.
  std::size_t localization_warmup_epochs = 5;
  double localization_lr_scale = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw InvalidInput("train: batch_size must be at least 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidInput("train: dropout_p must lie in [0, 1)");
    if (!(lr_init > 0.0)) throw InvalidInput("train: lr_init must be positive");
    if (max_epochs < 1) throw InvalidInput("train: max_epochs must be at least 1");
    if (plateau_patience < 1) throw InvalidInput("train: plateau_patience must be at least 1");
    if (!(min_lr >= 0.0) || !(plateau_epsilon >= 0.0)) throw InvalidInput("train: min_lr and epsilon must be >= 0");
    if (!(localization_lr_scale >= 0.0)) throw InvalidInput("train: localization_lr_scale must be >= 0");
  }
};

// ---- Adam ----

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

// One bias-corrected Adam update. Moments are created on the first call.
template <class T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr,
               std::span<const double> lr_scale = {}) {
  if (!lr_scale.empty() && lr_scale.size() != params.size()) {
    throw Error("adam_step: " + std::to_string(lr_scale.size()) + " learning-rate scales for " +
                std::to_string(params.size()) + " parameters");
  }
  if (params.size() != grads.size()) {
    throw Error("adam_step: " + std::to_string(params.size()) + " parameters but " + std::to_string(grads.size()) +
                " gradients");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape());
      state.v.emplace_back(p.shape());
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape()) {
      throw Error("adam_step: parameter " + std::to_string(i) + " has shape " + shape_str(params[i].shape()) +
                  " but gradient " + shape_str(grads[i].shape()) + " and state " + shape_str(state.m[i].shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    // A zero scale freezes the parameter and its moments.
    const double lr_i = lr_scale.empty() ? lr : lr * lr_scale[i];
    if (lr_i == 0.0) continue;
    auto p = params[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      p[k] = static_cast<T>(p[k] - lr_i * (mk / c1) / (std::sqrt(vk / c2) + state.eps));
    }
  }
}

// ---- learning-rate schedule ----

// Halves the learning rate once `patience` consecutive epochs fail to
// improve the best validation loss by more than `epsilon`.
struct PlateauScheduler {
  PlateauScheduler() = default;
  PlateauScheduler(double lr_init, std::size_t patience_epochs, double min_improvement)
      : lr(lr_init), patience(patience_epochs), epsilon(min_improvement) {}

  double lr = 1e-3;
  std::size_t patience = 5;
  double epsilon = 1e-4;
  std::optional<double> best;
  std::size_t bad_epochs = 0;

  // Records one epoch's validation loss; returns true when lr was halved.
  bool observe(double val_loss) {
    if (!best || val_loss < *best - epsilon) {
      best = val_loss;
      bad_epochs = 0;
      return false;
    }
    if (++bad_epochs >= patience) {
      lr *= 0.5;
      bad_epochs = 0;
      return true;
    }
    return false;
  }
};

// ---- history ----

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;  // rate used during the epoch
  double seconds = 0;
};

using History = std::vector<EpochRecord>;

inline std::string history_csv(const History& h) {
  std::string s = "epoch,train_loss,val_loss,lr,seconds\n";
  for (const auto& r : h) {
    s += std::to_string(r.epoch) + "," + format_real(r.train_loss) + "," + format_real(r.val_loss) + "," +
         format_real(r.lr) + "," + format_real(r.seconds) + "\n";
  }
  return s;
}

inline History parse_history_csv(const std::string& text) {
  History h;
  std::stringstream ss(text);
  std::string line;
  std::getline(ss, line);
  if (line != "epoch,train_loss,val_loss,lr,seconds") throw InvalidInput("history: unexpected header '" + line + "'");
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string tok; std::getline(ls, tok, ',');) f.push_back(tok);
    if (f.size() != 5) throw InvalidInput("history: malformed row '" + line + "'");
    h.push_back({std::stoul(f[0]), parse_real(f[1]), parse_real(f[2]), parse_real(f[3]), parse_real(f[4])});
  }
  return h;
}

// ---- evaluation ----

struct LossAccuracy {
  double loss = 0;
  double accuracy = 0;
};

inline std::size_t argmax_row(const Tensor<float>& probs, std::size_t b) {
  const std::size_t C = probs.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < C; ++c) {
    if (probs.at(b, c) > probs.at(b, best)) best = c;
  }
  return best;
}

// Mean cross-entropy (probabilities floored at 1e-7, as in training) and
// argmax accuracy of (B, C) probabilities against integer labels.
inline LossAccuracy loss_and_accuracy(const Tensor<float>& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw Error("loss_and_accuracy: " + shape_str(probs.shape()) + " probabilities for " +
                std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw InvalidInput("loss_and_accuracy: no examples");
  double loss = 0;
  std::size_t hits = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    loss -= std::log(std::max(static_cast<double>(probs.at(b, labels[b])), 1e-7));
    hits += argmax_row(probs, b) == labels[b];
  }
  return {loss / labels.size(), static_cast<double>(hits) / labels.size()};
}

// Inference-mode probabilities for the given frames, computed in batches.
inline Tensor<float> predict_probs(const Model<float>& model, const sig::Dataset& ds,
                                   std::span<const std::size_t> indices, std::size_t batch_size = 1024) {
  const std::size_t C = model.config().n_classes;
  Tensor<float> out(Shape{indices.size(), C});
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto idx = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const auto probs = nn::forward_classify(model, ds.batch(idx)).probs;
    std::copy(probs.data().begin(), probs.data().end(), out.data().begin() + start * C);
  }
  return out;
}

inline std::vector<std::size_t> labels_of(const sig::Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.labels_mod.at(i));
  return out;
}

inline void check_compatible(const Model<float>& model, const sig::Dataset& ds) {
  const auto& c = model.config();
  if (c.n_classes != ds.n_classes() || c.frame_len != ds.frame_len) {
    throw InvalidInput("model expects frames (2," + std::to_string(c.frame_len) + ") with " +
                       std::to_string(c.n_classes) + " classes; dataset has frames (2," +
                       std::to_string(ds.frame_len) + ") with " + std::to_string(ds.n_classes()) + " classes");
  }
}

// Dropout off; deterministic.
inline LossAccuracy evaluate_loss(const Model<float>& model, const sig::Dataset& ds,
                                  std::span<const std::size_t> indices, std::size_t batch_size = 1024) {
  if (indices.empty()) throw InvalidInput("evaluate_loss: empty dataset");
  check_compatible(model, ds);
  return loss_and_accuracy(predict_probs(model, ds, indices, batch_size), labels_of(ds, indices));
}

// ---- training loop ----

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;      // checkpoint_best/, checkpoint_last/, history.csv
  std::optional<std::filesystem::path> resume_from;  // a checkpoint_last directory
  std::map<std::string, std::string> extra_meta;     // copied into every checkpoint
  std::ostream* log = nullptr;
};

struct TrainResult {
  Model<float> best_model;
  History history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::string stop_reason;  // "max_epochs" or "min_lr"
};

namespace detail {

struct LoopState {
  Model<float> model;
  AdamState<float> adam;
  PlateauScheduler sched;
  std::vector<Tensor<float>> best_params;
  double best_val = INFINITY;
  std::size_t best_epoch = 0;
  std::size_t epoch = 0;  // completed epochs
  History history;
};

inline void write_state(const LoopState& s, const TrainConfig& cfg, const TrainOptions& opt,
                        const std::filesystem::path& dir, bool with_optimizer) {
  nn::Checkpoint ck{s.model.config(), opt.extra_meta, {}};
  ck.meta["epoch"] = std::to_string(s.epoch);
  ck.meta["best_epoch"] = std::to_string(s.best_epoch);
  ck.meta["best_val_loss"] = format_real(s.best_val);
  ck.meta["train.seed"] = std::to_string(cfg.seed);
  const auto& params = s.model.params();
  if (with_optimizer) {
    nn::store_params(ck, s.model);
    ck.meta["lr"] = format_real(s.sched.lr);
    ck.meta["sched.best"] = s.sched.best ? format_real(*s.sched.best) : "none";
    ck.meta["sched.bad_epochs"] = std::to_string(s.sched.bad_epochs);
    ck.meta["adam.step"] = std::to_string(s.adam.step);
    for (std::size_t i = 0; i < params.size() && i < s.adam.m.size(); ++i) {
      ck.tensors["adam.m." + params[i].name] = s.adam.m[i];
      ck.tensors["adam.v." + params[i].name] = s.adam.v[i];
    }
    for (std::size_t i = 0; i < s.best_params.size(); ++i) ck.tensors["best." + params[i].name] = s.best_params[i];
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) ck.tensors["param." + params[i].name] = s.best_params[i];
  }
  nn::save_checkpoint(ck, dir);
  io::write_text(dir / "history.csv", history_csv(s.history));
}

inline std::string meta(const nn::Checkpoint& ck, const std::string& key) {
  auto it = ck.meta.find(key);
  if (it == ck.meta.end()) throw InvalidInput("checkpoint has no training state ('" + key + "' missing)");
  return it->second;
}

inline LoopState read_state(const std::filesystem::path& dir, const nn::ModelConfig& expected, const TrainConfig& cfg) {
  const nn::Checkpoint ck = nn::load_checkpoint(dir);
  if (!(ck.config == expected)) {
    throw InvalidInput("resume: checkpoint model configuration differs from the requested one");
  }
  if (meta(ck, "train.seed") != std::to_string(cfg.seed)) {
    throw InvalidInput("resume: checkpoint was trained with seed " + meta(ck, "train.seed") + ", not " +
                       std::to_string(cfg.seed));
  }
  LoopState s{nn::model_from_checkpoint(ck), {}, {}, {}, 0, 0, 0, {}};
  s.epoch = std::stoul(meta(ck, "epoch"));
  s.best_epoch = std::stoul(meta(ck, "best_epoch"));
  s.best_val = parse_real(meta(ck, "best_val_loss"));
  s.sched = PlateauScheduler(parse_real(meta(ck, "lr")), cfg.plateau_patience, cfg.plateau_epsilon);
  s.sched.bad_epochs = std::stoul(meta(ck, "sched.bad_epochs"));
  if (meta(ck, "sched.best") != "none") s.sched.best = parse_real(meta(ck, "sched.best"));
  s.adam.step = std::stoull(meta(ck, "adam.step"));
  auto tensor = [&](const std::string& name) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw InvalidInput("resume: checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  for (const auto& p : s.model.params()) {
    if (s.adam.step > 0) {
      s.adam.m.push_back(tensor("adam.m." + p.name));
      s.adam.v.push_back(tensor("adam.v." + p.name));
    }
    if (s.best_epoch > 0) s.best_params.push_back(tensor("best." + p.name));
  }
  if (std::filesystem::is_regular_file(dir / "history.csv")) {
    s.history = parse_history_csv(io::read_text(dir / "history.csv"));
  }
  return s;
}

}  // namespace detail

// Trains on `train_idx`, tracking validation loss on `val_idx`. Shuffling
// and dropout draw from streams keyed by (seed, epoch, batch), so a resumed
// run repeats the uninterrupted one exactly.
inline TrainResult train(Model<float> model, const sig::Dataset& ds, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (train_idx.empty() || val_idx.empty()) throw InvalidInput("train: training and validation sets must be non-empty");
  nn::ModelConfig mcfg = model.config();
  check_compatible(model, ds);

  detail::LoopState s{std::move(model), {}, PlateauScheduler{cfg.lr_init, cfg.plateau_patience, cfg.plateau_epsilon},
                      {}, INFINITY, 0, 0, {}};
  if (opt.resume_from) s = detail::read_state(*opt.resume_from, mcfg, cfg);
  if (opt.out_dir) io::ensure_dir(*opt.out_dir);

  std::string stop_reason = "max_epochs";
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  if (s.sched.lr < cfg.min_lr) stop_reason = "min_lr";

  while (s.epoch < cfg.max_epochs && stop_reason != "min_lr") {
    const std::size_t epoch = s.epoch + 1;
    const auto t0 = std::chrono::steady_clock::now();
    std::copy(train_idx.begin(), train_idx.end(), order.begin());
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 2 * epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const double lr = s.sched.lr;
    const double loc_scale = epoch <= cfg.localization_warmup_epochs ? 0.0 : cfg.localization_lr_scale;
    std::vector<double> scales(s.model.params().size(), 1.0);
    std::fill_n(scales.begin(), s.model.n_localization_params(), loc_scale);
    double loss_sum = 0;
    const std::size_t n_batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const auto idx = std::span<const std::size_t>(order).subspan(
          b * cfg.batch_size, std::min(cfg.batch_size, order.size() - b * cfg.batch_size));
      ad::Tape<float> tape(true, mix_seed(mix_seed(cfg.seed, 2 * epoch + 1), b));
      double loss_value = NAN;
      std::vector<Tensor<float>> grads;
      try {
        auto params = s.model.bind(tape, true);
        auto out = s.model.forward(tape.constant(ds.batch(idx)), params, static_cast<float>(cfg.dropout_p));
        auto loss = ad::categorical_cross_entropy(out.probs, ds.one_hot(idx));
        loss_value = loss.value().item();
        tape.backward(loss);
        for (const auto& p : params) grads.push_back(tape.grad(p));
      } catch (const InvalidInput&) {
        throw;
      } catch (const Error& e) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) +
                    " (lr " + format_real(lr) + "): " + e.what());
      }
      if (!std::isfinite(loss_value)) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) +
                    " (lr " + format_real(lr) + "): non-finite loss");
      }
      loss_sum += loss_value * idx.size();
      std::vector<Tensor<float>> values;
      for (auto& p : s.model.params()) values.push_back(std::move(p.value));
      adam_step<float>(values, grads, s.adam, lr, scales);
      for (std::size_t i = 0; i < values.size(); ++i) s.model.params()[i].value = std::move(values[i]);
    }

    const auto val = evaluate_loss(s.model, ds, val_idx, cfg.batch_size);
    s.epoch = epoch;
    if (val.loss < s.best_val) {
      s.best_val = val.loss;
      s.best_epoch = epoch;
      s.best_params.clear();
      for (const auto& p : s.model.params()) s.best_params.push_back(p.value);
    }
    s.sched.observe(val.loss);
    if (s.sched.lr < cfg.min_lr) stop_reason = "min_lr";
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    s.history.push_back({epoch, loss_sum / order.size(), val.loss, lr, secs});

    if (opt.log) {
      *opt.log << "epoch " << epoch << "  train_loss " << format_real(loss_sum / order.size()) << "  val_loss "
               << format_real(val.loss) << "  val_acc " << format_real(val.accuracy) << "  lr " << format_real(lr)
               << "  " << format_real(std::round(secs * 10) / 10) << "s" << std::endl;
    }
    if (opt.out_dir) {
      detail::write_state(s, cfg, opt, *opt.out_dir / "checkpoint_last", true);
      detail::write_state(s, cfg, opt, *opt.out_dir / "checkpoint_best", false);
      io::write_text(*opt.out_dir / "history.csv", history_csv(s.history));
    }
  }

  TrainResult result{s.model, s.history, s.best_epoch, s.best_val, stop_reason};
  if (!s.best_params.empty()) {
    for (std::size_t i = 0; i < s.best_params.size(); ++i) result.best_model.params()[i].value = s.best_params[i];
  }
  return result;
}

}  // namespace rtn::train
