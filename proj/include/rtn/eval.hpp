#pragma once

// Evaluation artifacts: accuracy per SNR, confusion matrices, constellation
// density grids before and after the learned transform, and a report
// bundle writer.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtn/training.hpp"

namespace rtn::eval {

struct SnrRow {
  int snr_db = 0;
  std::size_t n_frames = 0;
  std::size_t correct = 0;
  double accuracy = 0;
};

using SnrAccuracyTable = std::vector<SnrRow>;

// One row per SNR present, ascending.
inline SnrAccuracyTable accuracy_vs_snr(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                                        std::span<const int> snrs) {
  if (predicted.size() != labels.size() || labels.size() != snrs.size()) {
    throw Error("accuracy_vs_snr: predictions, labels and SNRs differ in length");
  }
  std::map<int, std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& c = cells[snrs[i]];
    ++c.first;
    c.second += predicted[i] == labels[i];
  }
  SnrAccuracyTable t;
  for (const auto& [snr, c] : cells) t.push_back({snr, c.first, c.second, static_cast<double>(c.second) / c.first});
  return t;
}

struct ConfusionMatrix {
  int snr_db = 0;
  std::size_t n_classes = 0;
  std::vector<std::size_t> counts;  // row = true class, column = predicted

  std::size_t at(std::size_t truth, std::size_t pred) const { return counts.at(truth * n_classes + pred); }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t k = 0; k < n_classes; ++k) s += at(k, k);
    return s;
  }
};

inline ConfusionMatrix confusion(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                                 std::span<const int> snrs, int snr_filter, std::size_t n_classes) {
  if (predicted.size() != labels.size() || labels.size() != snrs.size()) {
    throw Error("confusion: predictions, labels and SNRs differ in length");
  }
  if (std::find(snrs.begin(), snrs.end(), snr_filter) == snrs.end()) {
    throw InvalidInput("confusion: no test frames at " + std::to_string(snr_filter) + " dB");
  }
  ConfusionMatrix m{snr_filter, n_classes, std::vector<std::size_t>(n_classes * n_classes, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (snrs[i] != snr_filter) continue;
    if (labels[i] >= n_classes || predicted[i] >= n_classes) throw Error("confusion: class index out of range");
    ++m.counts[labels[i] * n_classes + predicted[i]];
  }
  return m;
}

// Predictions of a model over dataset frames, with their labels and SNRs.
struct Predictions {
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> labels;
  std::vector<int> snrs;
};

inline Predictions predict(const nn::Model<float>& model, const sig::Dataset& ds, std::span<const std::size_t> indices,
                           std::size_t batch_size = 1024) {
  train::check_compatible(model, ds);
  const auto probs = train::predict_probs(model, ds, indices, batch_size);
  Predictions p;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    p.predicted.push_back(train::argmax_row(probs, b));
    p.labels.push_back(ds.labels_mod[indices[b]]);
    p.snrs.push_back(ds.labels_snr[indices[b]]);
  }
  return p;
}

inline SnrAccuracyTable accuracy_vs_snr(const Predictions& p) { return accuracy_vs_snr(p.predicted, p.labels, p.snrs); }

inline ConfusionMatrix confusion(const Predictions& p, int snr_filter, std::size_t n_classes) {
  return confusion(p.predicted, p.labels, p.snrs, snr_filter, n_classes);
}

// ---- constellation density ----

struct DensityGrid {
  std::size_t bins = 64;
  double extent = 2.5;  // grid covers [-extent, extent] on both axes
  std::vector<std::size_t> counts;  // row = Q bin, column = I bin
  std::size_t out_of_extent = 0;

  DensityGrid() = default;
  DensityGrid(std::size_t b, double e) : bins(b), extent(e), counts(b * b, 0) {}

  void add(double i, double q) {
    const double w = 2.0 * extent / bins;
    const double fx = std::floor((i + extent) / w), fy = std::floor((q + extent) / w);
    if (!(fx >= 0 && fy >= 0 && fx < static_cast<double>(bins) && fy < static_cast<double>(bins))) {
      ++out_of_extent;
      return;
    }
    ++counts[static_cast<std::size_t>(fy) * bins + static_cast<std::size_t>(fx)];
  }

  std::size_t binned() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::size_t total() const { return binned() + out_of_extent; }

  std::complex<double> bin_center(std::size_t row, std::size_t col) const {
    const double w = 2.0 * extent / bins;
    return {-extent + (col + 0.5) * w, -extent + (row + 0.5) * w};
  }

  // Count in bins whose centre lies within `radius` of any of `points`.
  std::size_t mass_within(std::span<const std::complex<double>> points, double radius) const {
    std::size_t s = 0;
    for (std::size_t r = 0; r < bins; ++r)
      for (std::size_t c = 0; c < bins; ++c) {
        const auto z = bin_center(r, c);
        for (const auto& p : points) {
          if (std::abs(z - p) <= radius) {
            s += counts[r * bins + c];
            break;
          }
        }
      }
    return s;
  }
};

struct DensityOptions {
  std::size_t samples_per_frame = 20;
  std::size_t bins = 64;
  double extent = 2.5;
};

// Bins the centred window of `samples_per_frame` samples of each (B, 2, N)
// frame.
inline DensityGrid density(const Tensor<float>& frames, const DensityOptions& opt = {}) {
  if (frames.rank() != 3 || frames.dim(1) != 2) throw Error("density: frames must be (B,2,N)");
  const std::size_t N = frames.dim(2);
  if (opt.samples_per_frame > N) throw InvalidInput("density: window longer than the frame");
  const std::size_t start = (N - opt.samples_per_frame) / 2;
  DensityGrid g(opt.bins, opt.extent);
  for (std::size_t b = 0; b < frames.dim(0); ++b)
    for (std::size_t n = start; n < start + opt.samples_per_frame; ++n) g.add(frames.at(b, 0, n), frames.at(b, 1, n));
  return g;
}

struct DensityPair {
  DensityGrid pre;
  DensityGrid post;
};

// Pre grid from the input frames, post grid from the model's transformed
// frames. A baseline has no transform, so its post grid equals the pre grid.
inline DensityPair constellation_density(const nn::Model<float>& model, const Tensor<float>& frames,
                                         const DensityOptions& opt = {}) {
  DensityPair d{density(frames, opt), {}};
  if (model.config().kind == nn::ModelKind::rtn) {
    d.post = density(*nn::forward_classify(model, frames).transformed, opt);
  } else {
    d.post = d.pre;
  }
  return d;
}

// `count` seeded random test frames of `scheme` (all classes when the
// dataset does not contain it), returned in ascending order.
inline std::vector<std::size_t> density_frames(const sig::Dataset& ds, std::span<const std::size_t> test_idx,
                                               const std::string& scheme, std::size_t count, std::uint64_t seed) {
  auto it = std::find(ds.schemes.begin(), ds.schemes.end(), scheme);
  std::vector<std::size_t> pool;
  for (std::size_t i : test_idx) {
    if (it == ds.schemes.end() || ds.labels_mod[i] == static_cast<std::size_t>(it - ds.schemes.begin())) {
      pool.push_back(i);
    }
  }
  std::mt19937_64 rng(mix_seed(seed, 0xDE115));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---- report bundle ----

struct Report {
  std::vector<std::string> class_names;
  SnrAccuracyTable accuracy;
  std::optional<SnrAccuracyTable> compare;  // adds compare_accuracy and delta columns
  std::vector<ConfusionMatrix> confusions;
  std::optional<DensityPair> density;
  nlohmann::ordered_json info = nlohmann::ordered_json::object();
};

inline std::string accuracy_csv(const SnrAccuracyTable& t, const std::optional<SnrAccuracyTable>& compare) {
  std::string s = compare ? "snr_db,n_frames,accuracy,compare_accuracy,delta\n" : "snr_db,n_frames,accuracy\n";
  for (const auto& r : t) {
    s += std::to_string(r.snr_db) + "," + std::to_string(r.n_frames) + "," + format_real(r.accuracy);
    if (compare) {
      auto it = std::find_if(compare->begin(), compare->end(), [&](const SnrRow& c) { return c.snr_db == r.snr_db; });
      if (it == compare->end()) {
        s += ",,";
      } else {
        s += "," + format_real(it->accuracy) + "," + format_real(r.accuracy - it->accuracy);
      }
    }
    s += "\n";
  }
  return s;
}

// Reads back the (snr_db, n_frames, accuracy) columns of accuracy_vs_snr.csv.
inline SnrAccuracyTable parse_accuracy_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::getline(ss, line);
  if (!line.starts_with("snr_db,n_frames,accuracy")) throw InvalidInput("accuracy csv: unexpected header");
  SnrAccuracyTable t;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string tok; std::getline(ls, tok, ',');) f.push_back(tok);
    if (f.size() < 3) throw InvalidInput("accuracy csv: malformed row '" + line + "'");
    SnrRow r{std::stoi(f[0]), std::stoul(f[1]), 0, parse_real(f[2])};
    r.correct = static_cast<std::size_t>(std::llround(r.accuracy * r.n_frames));
    t.push_back(r);
  }
  return t;
}

inline std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& names) {
  auto name = [&](std::size_t k) { return k < names.size() ? names[k] : std::to_string(k); };
  std::string s = "true\\predicted";
  for (std::size_t c = 0; c < m.n_classes; ++c) s += "," + name(c);
  s += "\n";
  for (std::size_t r = 0; r < m.n_classes; ++r) {
    s += name(r);
    for (std::size_t c = 0; c < m.n_classes; ++c) s += "," + std::to_string(m.at(r, c));
    s += "\n";
  }
  return s;
}

inline nlohmann::ordered_json density_json(const std::optional<DensityGrid>& g) {
  nlohmann::ordered_json j;
  if (!g) {
    j["bins"] = 0;
    j["extent"] = 0;
    j["binned"] = 0;
    j["out_of_extent"] = 0;
    j["counts"] = nlohmann::ordered_json::array();
    return j;
  }
  j["bins"] = g->bins;
  j["extent"] = g->extent;
  j["layout"] = "counts[row][col]: row = Q bin, col = I bin, both ascending from -extent";
  j["binned"] = g->binned();
  j["out_of_extent"] = g->out_of_extent;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < g->bins; ++r) {
    rows.push_back(std::vector<std::size_t>(g->counts.begin() + r * g->bins, g->counts.begin() + (r + 1) * g->bins));
  }
  j["counts"] = std::move(rows);
  return j;
}

// Writes the bundle and returns the list of files written (manifest last).
inline std::vector<std::string> export_report(const Report& rep, const std::filesystem::path& dir) {
  io::ensure_dir(dir);
  std::vector<std::string> files;
  auto put = [&](const std::string& name, const std::string& text) {
    io::write_text(dir / name, text);
    files.push_back(name);
  };
  put("accuracy_vs_snr.csv", accuracy_csv(rep.accuracy, rep.compare));
  for (const auto& m : rep.confusions) put("confusion_" + std::to_string(m.snr_db) + ".csv", confusion_csv(m, rep.class_names));
  std::optional<DensityGrid> pre, post;
  if (rep.density) {
    pre = rep.density->pre;
    post = rep.density->post;
  }
  put("density_pre.json", density_json(pre).dump() + "\n");
  put("density_post.json", density_json(post).dump() + "\n");

  nlohmann::ordered_json manifest;
  manifest["info"] = rep.info;
  manifest["classes"] = rep.class_names;
  auto list = nlohmann::ordered_json::array();
  for (const auto& f : files) list.push_back({{"name", f}, {"bytes", std::filesystem::file_size(dir / f)}});
  manifest["files"] = std::move(list);
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  files.push_back("manifest.json");
  return files;
}

// Human-readable accuracy table for standard output.
inline std::string format_summary(const SnrAccuracyTable& t, const std::optional<SnrAccuracyTable>& compare = {}) {
  std::ostringstream os;
  os << "snr_db  n_frames  accuracy" << (compare ? "  compare   delta" : "") << "\n";
  char buf[96];
  for (const auto& r : t) {
    std::snprintf(buf, sizeof buf, "%6d  %8zu  %8.4f", r.snr_db, r.n_frames, r.accuracy);
    os << buf;
    if (compare) {
      auto it = std::find_if(compare->begin(), compare->end(), [&](const SnrRow& c) { return c.snr_db == r.snr_db; });
      if (it != compare->end()) {
        std::snprintf(buf, sizeof buf, "  %7.4f  %+7.4f", it->accuracy, r.accuracy - it->accuracy);
        os << buf;
      }
    }
    os << "\n";
  }
  return os.str();
}

inline double mean_accuracy(const SnrAccuracyTable& t) {
  std::size_t n = 0, c = 0;
  for (const auto& r : t) {
    n += r.n_frames;
    c += r.correct;
  }
  return n ? static_cast<double>(c) / n : 0.0;
}

}  // namespace rtn::eval
