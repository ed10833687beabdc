#pragma once

// Experiment configuration (one JSON file) and the generate / train /
// evaluate / inspect commands behind the command-line tool.

#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtn/eval.hpp"
#include "rtn/training.hpp"

namespace rtn::exp {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct SplitConfig {
  double train_fraction = 0.6;
  double val_fraction = 0.1;  // share of the training portion held out for validation
};

struct EvalConfig {
  std::vector<int> confusion_snrs;  // empty: the highest SNR in the test split
  std::string density_scheme = "QPSK";
  std::size_t density_frames = 50;
  eval::DensityOptions density;
  std::size_t batch_size = 1024;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::optional<fs::path> out;
  sig::DatasetConfig dataset;
  SplitConfig split;
  nn::ModelConfig model;
  train::TrainConfig train;
  EvalConfig eval;

  // Propagates the experiment seed to every stage.
  void set_seed(std::uint64_t s) {
    seed = s;
    dataset.seed = s;
    model.seed = s;
    train.seed = s;
  }
};

namespace detail {

// Walks a JSON object, rejecting keys the caller never asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidInput(where() + " must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw InvalidInput(where(key) + ": wrong type (" + e.what() + ")");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key = "") const {
    return "config " + (path_.empty() ? std::string("root") : path_) + (key.empty() ? "" : "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw InvalidInput("unknown key '" + k + "' in " + where());
    }
  }

  std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::pair<double, double> read_range(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw InvalidInput(where + " must be a [lo, hi] pair of numbers");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

inline void read_channel(const json& j, sig::ChannelConfig& c, const std::string& path) {
  ObjectReader r(j, path);
  r.get("cfo_mean", c.cfo_mean);
  r.get("cfo_init_std", c.cfo_init_std);
  r.get("cfo_walk_std", c.cfo_walk_std);
  r.get("clock_ppm_std", c.clock_ppm_std);
  r.get("clock_walk_ppm_std", c.clock_walk_ppm_std);
  r.get("normalize_power", c.normalize_power);
  if (const json* p = r.child("phase_range")) std::tie(c.phase_lo, c.phase_hi) = read_range(*p, r.where("phase_range"));
  if (const json* p = r.child("timing_range")) {
    std::tie(c.timing_lo, c.timing_hi) = read_range(*p, r.where("timing_range"));
  }
  if (const json* p = r.child("multipath")) {
    c.multipath.clear();
    if (!p->is_array()) throw InvalidInput(r.where("multipath") + " must be a list of [re, im] taps");
    for (const auto& tap : *p) {
      auto [re, im] = read_range(tap, r.where("multipath"));
      c.multipath.emplace_back(re, im);
    }
  }
  r.finish();
}

inline void read_dataset(const json& j, sig::DatasetConfig& d) {
  ObjectReader r(j, "dataset");
  r.get("schemes", d.schemes);
  r.get("snr_grid", d.snr_grid);
  r.get("frames_per_cell", d.frames_per_cell);
  r.get("frame_len", d.frame_len);
  r.get("samples_per_symbol", d.modulation.sps);
  r.get("rolloff", d.modulation.rolloff);
  std::string pulse;
  r.get("pulse", pulse);
  if (pulse == "rrc") {
    d.modulation.pulse = sig::Pulse::root_raised_cosine;
  } else if (pulse == "rect") {
    d.modulation.pulse = sig::Pulse::rectangular;
  } else if (!pulse.empty()) {
    throw InvalidInput(r.where("pulse") + ": expected \"rrc\" or \"rect\", got \"" + pulse + "\"");
  }
  if (const json* c = r.child("channel")) read_channel(*c, d.channel, "dataset.channel");
  r.finish();
}

inline void read_model(const json& j, nn::ModelConfig& m) {
  ObjectReader r(j, "model");
  std::string kind, mode;
  r.get("kind", kind);
  if (!kind.empty()) m.kind = nn::parse_model_kind(kind);
  std::vector<std::string> cls, loc;
  r.get("classifier", cls);
  r.get("localization", loc);
  if (!cls.empty()) m.classifier = nn::parse_layers(cls);
  if (!loc.empty()) m.localization = nn::parse_layers(loc);
  r.get("polar_mode", mode);
  if (!mode.empty()) m.polar_mode = radio::parse_atan2_mode(mode);
  r.finish();
}

inline void read_train(const json& j, train::TrainConfig& t) {
  ObjectReader r(j, "train");
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr_init);
  r.get("dropout", t.dropout_p);
  r.get("max_epochs", t.max_epochs);
  r.get("patience", t.plateau_patience);
  r.get("min_lr", t.min_lr);
  r.get("epsilon", t.plateau_epsilon);
  r.get("localization_warmup_epochs", t.localization_warmup_epochs);
  r.get("localization_lr_scale", t.localization_lr_scale);
  r.finish();
}

inline void read_eval(const json& j, EvalConfig& e) {
  ObjectReader r(j, "eval");
  r.get("confusion_snrs", e.confusion_snrs);
  r.get("density_scheme", e.density_scheme);
  r.get("density_frames", e.density_frames);
  r.get("density_samples", e.density.samples_per_frame);
  r.get("density_bins", e.density.bins);
  r.get("density_extent", e.density.extent);
  r.get("batch_size", e.batch_size);
  r.finish();
  if (e.density.bins == 0 || !(e.density.extent > 0)) {
    throw InvalidInput("config eval: density_bins and density_extent must be positive");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidInput(origin + ": invalid JSON: " + e.what());
  }
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  std::uint64_t seed = 0;
  r.get("seed", seed);
  c.set_seed(seed);
  std::string out;
  r.get("out", out);
  if (!out.empty()) c.out = out;
  if (const json* d = r.child("dataset")) detail::read_dataset(*d, c.dataset);
  if (const json* s = r.child("split")) {
    detail::ObjectReader sr(*s, "split");
    sr.get("train_fraction", c.split.train_fraction);
    sr.get("val_fraction", c.split.val_fraction);
    sr.finish();
  }
  if (const json* m = r.child("model")) detail::read_model(*m, c.model);
  if (const json* t = r.child("train")) detail::read_train(*t, c.train);
  if (const json* e = r.child("eval")) detail::read_eval(*e, c.eval);
  r.finish();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw InvalidInput("config file not found: " + path.string());
  return parse_config(io::read_text(path), path.string());
}

// ---- commands ----

inline sig::Dataset cmd_generate(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  auto ds = sig::generate_dataset(cfg.dataset);
  sig::write_container(ds, out);
  log << "wrote " << ds.size() << " frames to " << out.string() << "\n";
  log << "  schemes:   ";
  for (const auto& s : ds.schemes) log << s << " ";
  log << "\n  snr_grid:  ";
  for (int s : ds.snr_grid) log << s << " ";
  log << "\n  frame_len: " << ds.frame_len << "\n  seed:      " << cfg.dataset.seed << "\n";
  return ds;
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

inline SplitIndices make_splits(const sig::Dataset& ds, const SplitConfig& s, std::uint64_t seed) {
  if (!(s.val_fraction > 0 && s.val_fraction < 1)) throw InvalidInput("split.val_fraction must lie in (0, 1)");
  auto outer = sig::split_dataset(ds, s.train_fraction, seed);
  auto inner = sig::split_indices(ds, outer.train, 1.0 - s.val_fraction, mix_seed(seed, 1));
  if (inner.train.empty() || inner.test.empty() || outer.test.empty()) {
    throw InvalidInput("dataset of " + std::to_string(ds.size()) + " frames is too small for the configured split");
  }
  return {std::move(inner.train), std::move(inner.test), std::move(outer.test)};
}

inline std::map<std::string, std::string> split_meta(const SplitConfig& s, std::uint64_t seed) {
  return {{"split.train_fraction", format_real(s.train_fraction)},
          {"split.val_fraction", format_real(s.val_fraction)},
          {"split.seed", std::to_string(seed)}};
}

inline SplitConfig split_from_meta(const nn::Checkpoint& ck, std::uint64_t* seed) {
  auto get = [&](const std::string& k) {
    auto it = ck.meta.find(k);
    if (it == ck.meta.end()) throw InvalidInput("checkpoint lacks '" + k + "'; cannot rebuild its test split");
    return it->second;
  };
  *seed = std::stoull(get("split.seed"));
  return {parse_real(get("split.train_fraction")), parse_real(get("split.val_fraction"))};
}

struct TrainOutcome {
  train::TrainResult result;
  SplitIndices splits;
};

inline TrainOutcome cmd_train(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& out,
                              const std::optional<fs::path>& resume, std::ostream& log) {
  const auto ds = sig::load_container(dataset);
  auto splits = make_splits(ds, cfg.split, cfg.seed);
  nn::ModelConfig mc = cfg.model;
  mc.n_classes = ds.n_classes();
  mc.frame_len = ds.frame_len;
  nn::Model<float> model(mc);
  log << "training " << nn::to_string(mc.kind) << " on " << splits.train.size() << " frames ("
      << splits.val.size() << " validation, " << splits.test.size() << " test held out)\n";
  train::TrainOptions opt;
  opt.out_dir = out;
  opt.resume_from = resume;
  opt.extra_meta = split_meta(cfg.split, cfg.seed);
  opt.log = &log;
  auto res = train::train(std::move(model), ds, splits.train, splits.val, cfg.train, opt);
  log << "best epoch " << res.best_epoch << " (val_loss " << format_real(res.best_val_loss) << "), stopped on "
      << res.stop_reason << "\n";
  return {std::move(res), std::move(splits)};
}

struct EvalOutcome {
  eval::Report report;
  std::vector<std::string> files;
};

inline EvalOutcome cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& dataset,
                                const fs::path& out, const std::optional<fs::path>& compare, std::ostream& log) {
  const auto ck = nn::load_checkpoint(checkpoint);
  const auto model = nn::model_from_checkpoint(ck);
  const auto ds = sig::load_container(dataset);
  train::check_compatible(model, ds);
  std::uint64_t split_seed = 0;
  const SplitConfig split = split_from_meta(ck, &split_seed);
  const auto splits = make_splits(ds, split, split_seed);

  eval::Report rep;
  rep.class_names = ds.schemes;
  const auto preds = eval::predict(model, ds, splits.test, cfg.eval.batch_size);
  rep.accuracy = eval::accuracy_vs_snr(preds);
  std::vector<int> snrs = cfg.eval.confusion_snrs;
  if (snrs.empty()) snrs.push_back(rep.accuracy.back().snr_db);
  for (int s : snrs) rep.confusions.push_back(eval::confusion(preds, s, ds.n_classes()));

  const auto frames = eval::density_frames(ds, splits.test, cfg.eval.density_scheme, cfg.eval.density_frames,
                                           split_seed);
  rep.density = eval::constellation_density(model, ds.batch(frames), cfg.eval.density);

  rep.info["model"] = nn::to_string(model.config().kind);
  rep.info["best_epoch"] = ck.meta.count("best_epoch") ? ck.meta.at("best_epoch") : "";
  rep.info["test_frames"] = splits.test.size();
  rep.info["mean_accuracy"] = eval::mean_accuracy(rep.accuracy);
  rep.info["density_scheme"] = cfg.eval.density_scheme;
  rep.info["density_frames"] = frames;

  if (compare) {
    const auto other_ck = nn::load_checkpoint(*compare);
    const auto other = nn::model_from_checkpoint(other_ck);
    train::check_compatible(other, ds);
    std::uint64_t other_seed = 0;
    const SplitConfig other_split = split_from_meta(other_ck, &other_seed);
    if (other_seed != split_seed || other_split.train_fraction != split.train_fraction ||
        other_split.val_fraction != split.val_fraction) {
      throw InvalidInput("--compare checkpoint was trained on a different split; test sets would differ");
    }
    rep.compare = eval::accuracy_vs_snr(eval::predict(other, ds, splits.test, cfg.eval.batch_size));
    rep.info["compare_model"] = nn::to_string(other.config().kind);
    rep.info["compare_mean_accuracy"] = eval::mean_accuracy(*rep.compare);
  }

  auto files = eval::export_report(rep, out);
  log << eval::format_summary(rep.accuracy, rep.compare);
  log << "mean accuracy " << format_real(eval::mean_accuracy(rep.accuracy)) << " over " << splits.test.size()
      << " test frames\n";
  return {std::move(rep), std::move(files)};
}

inline void cmd_inspect(const fs::path& path, std::ostream& log) {
  if (fs::is_regular_file(path / "manifest.json")) {
    const auto ds = sig::load_container(path);
    log << "dataset container " << path.string() << " (valid)\n  frames: " << ds.size()
        << "\n  frame_len: " << ds.frame_len << "\n  seed: " << (ds.seed ? std::to_string(*ds.seed) : "none")
        << "\n  frames per (scheme, snr) cell:\n";
    std::map<std::pair<std::size_t, int>, std::size_t> cells;
    std::size_t unknown_truth = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      ++cells[{ds.labels_mod[i], ds.labels_snr[i]}];
      unknown_truth += std::isnan(ds.truth[i * sig::kTruthFields]);
    }
    for (std::size_t m = 0; m < ds.n_classes(); ++m) {
      log << "    " << ds.schemes[m] << ":";
      for (int s : ds.snr_grid) {
        auto it = cells.find({m, s});
        log << " " << s << "dB=" << (it == cells.end() ? 0 : it->second);
      }
      log << "\n";
    }
    log << "  frames without impairment truth: " << unknown_truth << "\n";
    return;
  }
  if (fs::is_regular_file(path / "manifest.txt")) {
    const auto ck = nn::load_checkpoint(path);
    const auto model = nn::model_from_checkpoint(ck);
    std::size_t n_params = 0;
    for (const auto& p : model.params()) n_params += p.value.size();
    log << "checkpoint " << path.string() << "\n";
    for (const auto& [k, v] : nn::config_to_kv(ck.config)) log << "  " << k << " = " << v << "\n";
    for (const auto& [k, v] : ck.meta) log << "  meta." << k << " = " << v << "\n";
    log << "  parameters: " << n_params << " in " << model.params().size() << " tensors\n";
    return;
  }
  throw InvalidInput(path.string() + " is neither a dataset container nor a checkpoint");
}

}  // namespace rtn::exp
