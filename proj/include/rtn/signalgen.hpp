#pragma once

// Synthetic modulation corpus: eight digital and three analog modulators, a
// random-walk impairment channel, dataset generation, the on-disk container
// format and a stratified train/test split.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rtn/io.hpp"
#include "rtn/parallel.hpp"
#include "rtn/radio_layers.hpp"
#include "rtn/tensor.hpp"

namespace rtn::sig {

using cplx = std::complex<double>;
using radio::ComplexSignal;

enum class Scheme { BPSK, QPSK, PSK8, PAM4, QAM16, QAM64, GFSK, CPFSK, WBFM, AM_DSB, AM_SSB };

inline constexpr std::array<const char*, 11> kSchemeNames{"BPSK",  "QPSK",  "8PSK",  "PAM4", "QAM16", "QAM64",
                                                          "GFSK",  "CPFSK", "WBFM", "AM-DSB", "AM-SSB"};

inline std::string to_string(Scheme s) { return kSchemeNames[static_cast<std::size_t>(s)]; }

inline Scheme parse_scheme(const std::string& name) {
  for (std::size_t i = 0; i < kSchemeNames.size(); ++i) {
    if (name == kSchemeNames[i]) return static_cast<Scheme>(i);
  }
  throw InvalidInput("unknown modulation scheme '" + name + "'");
}

inline std::vector<std::string> all_scheme_names() { return {kSchemeNames.begin(), kSchemeNames.end()}; }

inline bool is_digital(Scheme s) { return static_cast<int>(s) <= static_cast<int>(Scheme::CPFSK); }

enum class Pulse { root_raised_cosine, rectangular };

struct ModulationParams {
  std::size_t sps = 8;           // samples per symbol
  Pulse pulse = Pulse::root_raised_cosine;
  double rolloff = 0.35;
  std::size_t span = 8;          // RRC length in symbols
  double fsk_index = 0.5;        // GFSK / CPFSK modulation index
  double gaussian_bt = 0.35;
  double analog_bandwidth = 0.05;  // message cutoff, cycles per sample
  double fm_deviation = 0.075;     // cycles per sample per unit-RMS message
  double am_depth = 0.5;
};

// ---- digital building blocks ----

// Unit-average-power constellation for the linear schemes, indexed by symbol.
inline std::vector<cplx> constellation(Scheme s) {
  using std::numbers::pi;
  std::vector<cplx> pts;
  auto psk = [&](std::size_t m, double offset) {
    for (std::size_t k = 0; k < m; ++k) pts.push_back(std::polar(1.0, offset + 2.0 * pi * k / m));
  };
  auto qam = [&](int side) {
    double energy = 0;
    for (int a = 0; a < side; ++a)
      for (int b = 0; b < side; ++b) {
        pts.emplace_back(2 * a - side + 1, 2 * b - side + 1);
        energy += std::norm(pts.back());
      }
    const double scale = 1.0 / std::sqrt(energy / pts.size());
    for (auto& p : pts) p *= scale;
  };
  switch (s) {
    case Scheme::BPSK: pts = {{1, 0}, {-1, 0}}; break;
    case Scheme::QPSK: psk(4, pi / 4); break;
    case Scheme::PSK8: psk(8, 0); break;
    case Scheme::PAM4:
      for (double a : {-3.0, -1.0, 1.0, 3.0}) pts.emplace_back(a / std::sqrt(5.0), 0.0);
      break;
    case Scheme::QAM16: qam(4); break;
    case Scheme::QAM64: qam(8); break;
    default: throw Error("constellation: " + to_string(s) + " is not a linear modulation");
  }
  return pts;
}

// Root-raised-cosine taps (span*sps + 1), scaled so that sum(h^2) = sps: an
// upsampled unit-power symbol stream then has unit average power.
inline std::vector<double> rrc_taps(std::size_t sps, std::size_t span, double beta) {
  using std::numbers::pi;
  const std::size_t n = span * sps + 1;
  std::vector<double> h(n);
  const double mid = (n - 1) / 2.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = (k - mid) / sps;
    if (std::abs(t) < 1e-12) {
      h[k] = 1.0 - beta + 4.0 * beta / pi;
    } else if (beta > 0 && std::abs(std::abs(t) - 1.0 / (4.0 * beta)) < 1e-9) {
      h[k] = beta / std::sqrt(2.0) *
             ((1 + 2 / pi) * std::sin(pi / (4 * beta)) + (1 - 2 / pi) * std::cos(pi / (4 * beta)));
    } else {
      h[k] = (std::sin(pi * t * (1 - beta)) + 4 * beta * t * std::cos(pi * t * (1 + beta))) /
             (pi * t * (1 - 16 * beta * beta * t * t));
    }
  }
  double e = 0;
  for (double v : h) e += v * v;
  for (double& v : h) v *= std::sqrt(sps / e);
  return h;
}

inline std::vector<double> pulse_taps(const ModulationParams& p) {
  if (p.pulse == Pulse::rectangular) return std::vector<double>(p.sps, 1.0);
  return rrc_taps(p.sps, p.span, p.rolloff);
}

inline std::vector<cplx> map_symbols(Scheme s, std::span<const std::size_t> indices) {
  const auto pts = constellation(s);
  std::vector<cplx> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(pts.at(i % pts.size()));
  return out;
}

// Upsamples by sps and filters with the pulse; the filter delay is removed
// so sample k*sps carries symbol k. Output length symbols.size() * sps.
inline ComplexSignal<double> shape_symbols(std::span<const cplx> symbols, const ModulationParams& p) {
  if (p.sps == 0) throw InvalidInput("modulate: samples per symbol must be positive");
  const auto h = pulse_taps(p);
  const std::size_t delay = p.pulse == Pulse::rectangular ? 0 : (h.size() - 1) / 2;
  const std::size_t n = symbols.size() * p.sps;
  std::vector<cplx> out(n);
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    for (std::size_t j = 0; j < h.size(); ++j) {
      const std::size_t pos = k * p.sps + j;
      if (pos < delay || pos - delay >= n) continue;
      out[pos - delay] += symbols[k] * h[j];
    }
  }
  return ComplexSignal<double>::from_complex(out);
}

// Continuous-phase FSK: each binary symbol advances the phase by
// +-pi*h, spread over the frequency pulse (rectangular, or Gaussian-filtered
// for GFSK).
inline std::vector<cplx> cpfsk_waveform(std::span<const int> bits, bool gaussian, const ModulationParams& p) {
  using std::numbers::pi;
  const std::size_t sps = p.sps;
  std::vector<double> freq(bits.size() * sps, 0.0);
  for (std::size_t k = 0; k < bits.size(); ++k)
    for (std::size_t j = 0; j < sps; ++j) freq[k * sps + j] = bits[k] ? 1.0 : -1.0;
  if (gaussian) {
    const double sigma = std::sqrt(std::log(2.0)) / (2.0 * pi * p.gaussian_bt) * sps;
    const long half = static_cast<long>(2 * sps);
    std::vector<double> g(2 * half + 1);
    double gs = 0;
    for (long k = -half; k <= half; ++k) gs += g[k + half] = std::exp(-0.5 * (k / sigma) * (k / sigma));
    for (double& v : g) v /= gs;
    std::vector<double> smoothed(freq.size(), 0.0);
    for (std::size_t n = 0; n < freq.size(); ++n)
      for (long k = -half; k <= half; ++k) {
        const long src = static_cast<long>(n) - k;
        if (src >= 0 && src < static_cast<long>(freq.size())) smoothed[n] += g[k + half] * freq[src];
      }
    freq = std::move(smoothed);
  }
  std::vector<cplx> out(freq.size());
  double phase = 0;
  for (std::size_t n = 0; n < freq.size(); ++n) {
    phase += pi * p.fsk_index * freq[n] / sps;
    out[n] = std::polar(1.0, phase);
  }
  return out;
}

// ---- analog building blocks ----

inline std::vector<double> lowpass_taps(double cutoff, std::size_t n_taps) {
  using std::numbers::pi;
  std::vector<double> h(n_taps);
  const double mid = (n_taps - 1) / 2.0;
  double sum = 0;
  for (std::size_t k = 0; k < n_taps; ++k) {
    const double t = k - mid;
    const double sinc = t == 0 ? 2 * cutoff : std::sin(2 * pi * cutoff * t) / (pi * t);
    const double window = 0.54 - 0.46 * std::cos(2 * pi * k / (n_taps - 1));
    sum += h[k] = sinc * window;
  }
  for (double& v : h) v /= sum;
  return h;
}

// Hamming-windowed FIR Hilbert transformer (odd length, delay (n-1)/2).
inline std::vector<double> hilbert_taps(std::size_t n_taps) {
  using std::numbers::pi;
  std::vector<double> h(n_taps, 0.0);
  const long mid = static_cast<long>(n_taps - 1) / 2;
  for (long k = 0; k < static_cast<long>(n_taps); ++k) {
    const long t = k - mid;
    if (t % 2 != 0) h[k] = 2.0 / (pi * t) * (0.54 - 0.46 * std::cos(2 * pi * k / (n_taps - 1)));
  }
  return h;
}

// Band-limited Gaussian message with unit RMS.
inline std::vector<double> analog_message(std::size_t n, double cutoff, std::mt19937_64& rng) {
  const auto h = lowpass_taps(cutoff, 65);
  std::normal_distribution<double> gauss;
  std::vector<double> white(n + h.size() - 1);
  for (double& v : white) v = gauss(rng);
  std::vector<double> m(n, 0.0);
  double power = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < h.size(); ++k) m[i] += h[k] * white[i + h.size() - 1 - k];
    power += m[i] * m[i];
  }
  const double scale = 1.0 / std::sqrt(power / n);
  for (double& v : m) v *= scale;
  return m;
}

inline double mean_power(std::span<const cplx> x) {
  double p = 0;
  for (const auto& v : x) p += std::norm(v);
  return x.empty() ? 0.0 : p / x.size();
}

inline double mean_power(const ComplexSignal<double>& x) {
  double p = 0;
  for (std::size_t n = 0; n < x.length(); ++n) p += std::norm(x.sample(n));
  return x.length() ? p / x.length() : 0.0;
}

inline void normalize_power(std::vector<cplx>& x) {
  const double p = mean_power(x);
  if (p > 0) {
    const double s = 1.0 / std::sqrt(p);
    for (auto& v : x) v *= s;
  }
}

// Baseband waveform of `n_samples` samples with unit average power. Digital
// schemes draw uniform random symbols; analog schemes modulate a
// band-limited Gaussian message.
inline ComplexSignal<double> modulate(Scheme scheme, std::size_t n_samples, std::mt19937_64& rng,
                                      const ModulationParams& p = {}) {
  if (p.sps == 0 || n_samples < p.sps) {
    throw InvalidInput("modulate: need at least one symbol (" + std::to_string(p.sps) + " samples), got " +
                       std::to_string(n_samples));
  }
  using std::numbers::pi;
  const std::size_t n_sym = (n_samples + p.sps - 1) / p.sps + p.span;  // tail absorbs the filter ramp-up
  std::vector<cplx> wave;
  switch (scheme) {
    case Scheme::GFSK:
    case Scheme::CPFSK: {
      std::uniform_int_distribution<int> bit(0, 1);
      std::vector<int> bits(n_sym);
      for (int& b : bits) b = bit(rng);
      wave = cpfsk_waveform(bits, scheme == Scheme::GFSK, p);
      wave.erase(wave.begin(), wave.begin() + static_cast<long>(std::min(wave.size(), p.span / 2 * p.sps)));
      break;
    }
    case Scheme::WBFM: {
      auto m = analog_message(n_samples, p.analog_bandwidth, rng);
      double phase = 0;
      for (double v : m) {
        phase += 2 * pi * p.fm_deviation * v;
        wave.push_back(std::polar(1.0, phase));
      }
      break;
    }
    case Scheme::AM_DSB: {
      auto m = analog_message(n_samples, p.analog_bandwidth, rng);
      double peak = 0;
      for (double v : m) peak = std::max(peak, std::abs(v));
      for (double v : m) wave.emplace_back(1.0 + p.am_depth * v / peak, 0.0);
      normalize_power(wave);
      break;
    }
    case Scheme::AM_SSB: {
      const auto h = hilbert_taps(63);
      const std::size_t delay = (h.size() - 1) / 2;
      auto m = analog_message(n_samples + h.size() - 1, p.analog_bandwidth, rng);
      for (std::size_t n = 0; n < n_samples; ++n) {
        double hq = 0;
        for (std::size_t k = 0; k < h.size(); ++k) hq += h[k] * m[n + h.size() - 1 - k];
        wave.emplace_back(m[n + delay], hq);
      }
      normalize_power(wave);
      break;
    }
    default: {
      const auto pts = constellation(scheme);
      std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
      std::vector<cplx> symbols(n_sym);
      for (auto& s : symbols) s = pts[pick(rng)];
      auto shaped = shape_symbols(symbols, p);
      // Skip the first span/2 symbols so the frame starts in steady state.
      const std::size_t skip = p.pulse == Pulse::rectangular ? 0 : p.span / 2 * p.sps;
      for (std::size_t n = 0; n < n_samples; ++n) wave.push_back(shaped.sample(n + skip));
      break;
    }
  }
  wave.resize(n_samples);
  return ComplexSignal<double>::from_complex(wave);
}

// ---- channel ----

struct ChannelConfig {
  double snr_db = std::numeric_limits<double>::infinity();  // +inf: no noise
  double cfo_mean = 0.0;       // rad/sample
  double cfo_init_std = 0.01;  // rad/sample
  double cfo_walk_std = 1e-4;  // rad/sample per sample
  double phase_lo = -std::numbers::pi;
  double phase_hi = std::numbers::pi;
  double clock_ppm_std = 50.0;      // initial rate offset, ppm
  double clock_walk_ppm_std = 1.0;  // ppm per sample
  double timing_lo = 0.0;           // samples
  double timing_hi = 16.0;
  std::vector<cplx> multipath;      // FIR taps; empty = none
  bool normalize_power = true;      // unit signal power before noise

  // All impairments off and no noise.
  static ChannelConfig identity() {
    ChannelConfig c;
    c.cfo_init_std = c.cfo_walk_std = 0;
    c.phase_lo = c.phase_hi = 0;
    c.clock_ppm_std = c.clock_walk_ppm_std = 0;
    c.timing_lo = c.timing_hi = 0;
    c.normalize_power = false;
    return c;
  }

  void validate() const {
    if (cfo_init_std < 0 || cfo_walk_std < 0 || clock_ppm_std < 0 || clock_walk_ppm_std < 0) {
      throw InvalidInput("channel: random-walk standard deviations must be non-negative");
    }
    if (phase_hi < phase_lo || timing_hi < timing_lo || timing_lo < 0) {
      throw InvalidInput("channel: phase and timing ranges must satisfy lo <= hi, timing >= 0");
    }
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
      throw InvalidInput("channel: snr_db must be a number or +inf");
    }
  }
};

// Realized impairments of one frame.
struct Truth {
  double cfo = 0;         // mean frequency offset over the frame, rad/sample
  double phase = 0;       // initial phase, rad
  double timing = 0;      // initial source offset, samples
  double clock_rate = 1;  // mean source samples advanced per output sample
  double signal_power = 0;
  double noise_power = 0;

  double realized_snr_db() const { return 10.0 * std::log10(signal_power / noise_power); }
};

struct ChannelOutput {
  ComplexSignal<double> signal;
  Truth truth;
};

// Impairs `clean` in order: clock-rate/timing resampling (linear
// interpolation, zero outside the input), CFO + phase rotation
// exp(j(p + sum f)), multipath FIR, optional power normalization, AWGN.
// Noise is rescaled so its realized power gives snr_db exactly.
inline ChannelOutput apply_channel(const ComplexSignal<double>& clean, const ChannelConfig& cfg, std::mt19937_64& rng,
                                   std::size_t out_len = 0) {
  cfg.validate();
  if (out_len == 0) out_len = clean.length();
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit;
  Truth truth;
  truth.timing = cfg.timing_lo + (cfg.timing_hi - cfg.timing_lo) * unit(rng);
  truth.phase = cfg.phase_lo + (cfg.phase_hi - cfg.phase_lo) * unit(rng);
  double rate = 1.0 + 1e-6 * cfg.clock_ppm_std * gauss(rng);
  double freq = cfg.cfo_mean + cfg.cfo_init_std * gauss(rng);

  const std::size_t n_in = clean.length();
  std::vector<cplx> y(out_len);
  double pos = truth.timing, angle = truth.phase, rate_sum = 0, freq_sum = 0;
  for (std::size_t n = 0; n < out_len; ++n) {
    const double fl = std::floor(pos);
    const double frac = pos - fl;
    const long i0 = static_cast<long>(fl);
    cplx v = 0;
    if (i0 >= 0 && i0 < static_cast<long>(n_in)) v += (1.0 - frac) * clean.sample(i0);
    if (frac != 0 && i0 + 1 >= 0 && i0 + 1 < static_cast<long>(n_in)) v += frac * clean.sample(i0 + 1);
    y[n] = v * std::polar(1.0, angle);
    rate_sum += rate;
    freq_sum += freq;
    pos += rate;
    angle += freq;
    rate += 1e-6 * cfg.clock_walk_ppm_std * gauss(rng);
    freq += cfg.cfo_walk_std * gauss(rng);
  }
  truth.clock_rate = rate_sum / out_len;
  truth.cfo = freq_sum / out_len;

  if (!cfg.multipath.empty()) {
    std::vector<cplx> z(out_len);
    for (std::size_t n = 0; n < out_len; ++n)
      for (std::size_t k = 0; k < cfg.multipath.size() && k <= n; ++k) z[n] += cfg.multipath[k] * y[n - k];
    y = std::move(z);
  }
  if (cfg.normalize_power) normalize_power(y);
  truth.signal_power = mean_power(y);

  if (std::isfinite(cfg.snr_db)) {
    std::vector<cplx> w(out_len);
    for (auto& v : w) v = {gauss(rng), gauss(rng)};
    const double target = truth.signal_power / std::pow(10.0, cfg.snr_db / 10.0);
    const double scale = std::sqrt(target / mean_power(w));
    for (std::size_t n = 0; n < out_len; ++n) y[n] += scale * w[n];
    truth.noise_power = target;
  }
  return {ComplexSignal<double>::from_complex(y), truth};
}

// ---- datasets ----

inline std::vector<int> default_snr_grid() {
  std::vector<int> g;
  for (int s = -20; s <= 18; s += 2) g.push_back(s);
  return g;
}

struct DatasetConfig {
  std::vector<std::string> schemes = all_scheme_names();
  std::vector<int> snr_grid = default_snr_grid();
  std::size_t frames_per_cell = 100;
  std::size_t frame_len = 128;
  std::uint64_t seed = 0;
  ModulationParams modulation;
  ChannelConfig channel;  // snr_db is taken from the grid

  void validate() const {
    if (schemes.empty()) throw InvalidInput("dataset: at least one scheme is required");
    if (schemes.size() > 255) throw InvalidInput("dataset: at most 255 schemes are supported");
    for (std::size_t i = 0; i < schemes.size(); ++i) {
      parse_scheme(schemes[i]);
      if (std::count(schemes.begin(), schemes.end(), schemes[i]) > 1) {
        throw InvalidInput("dataset: scheme '" + schemes[i] + "' listed twice");
      }
    }
    if (snr_grid.empty()) throw InvalidInput("dataset: SNR grid is empty");
    for (int s : snr_grid) {
      if (s < std::numeric_limits<std::int16_t>::min() || s > std::numeric_limits<std::int16_t>::max()) {
        throw InvalidInput("dataset: SNR " + std::to_string(s) + " dB out of range");
      }
      if (std::count(snr_grid.begin(), snr_grid.end(), s) > 1) {
        throw InvalidInput("dataset: SNR " + std::to_string(s) + " dB listed twice");
      }
    }
    if (frames_per_cell == 0) throw InvalidInput("dataset: frames_per_cell must be positive");
    if (frame_len < 2) throw InvalidInput("dataset: frame_len must be at least 2");
    if (modulation.sps == 0) throw InvalidInput("dataset: samples per symbol must be positive");
    channel.validate();
  }
};

struct Frame {
  ComplexSignal<double> signal;
  std::size_t mod_label = 0;
  int snr_db = 0;
  Truth truth;
};

// Frame order is scheme-major, then SNR, then repetition. Each frame draws
// from its own stream of the seed, so frames can be generated in any order.
inline Frame generate_frame(const DatasetConfig& cfg, std::size_t index) {
  const std::size_t per_scheme = cfg.snr_grid.size() * cfg.frames_per_cell;
  Frame f;
  f.mod_label = index / per_scheme;
  f.snr_db = cfg.snr_grid[(index % per_scheme) / cfg.frames_per_cell];
  std::mt19937_64 rng(mix_seed(cfg.seed, index));
  const auto margin = static_cast<std::size_t>(std::ceil(cfg.channel.timing_hi)) + cfg.frame_len / 16 + 8;
  const std::size_t n_src = std::max(cfg.frame_len + margin, cfg.modulation.sps);
  auto clean = modulate(parse_scheme(cfg.schemes[f.mod_label]), n_src, rng, cfg.modulation);
  ChannelConfig ch = cfg.channel;
  ch.snr_db = f.snr_db;
  auto out = apply_channel(clean, ch, rng, cfg.frame_len);
  f.signal = std::move(out.signal);
  f.truth = out.truth;
  return f;
}

inline constexpr int kContainerVersion = 1;
inline constexpr std::size_t kTruthFields = 4;  // cfo, phase, timing, clock rate

// In-memory container. Frames are (n, 2, frame_len) row-major float32.
struct Dataset {
  std::vector<std::string> schemes;
  std::vector<int> snr_grid;
  std::size_t frame_len = 128;
  std::optional<std::uint64_t> seed;
  std::vector<float> frames;
  std::vector<std::uint8_t> labels_mod;
  std::vector<std::int16_t> labels_snr;
  std::vector<float> truth;  // (n, 4); NaN when unknown

  std::size_t size() const { return labels_mod.size(); }
  std::size_t n_classes() const { return schemes.size(); }

  ComplexSignal<float> frame(std::size_t i) const {
    const std::size_t w = 2 * frame_len;
    return ComplexSignal<float>(
        Tensor<float>(Shape{2, frame_len}, std::vector<float>(frames.begin() + i * w, frames.begin() + (i + 1) * w)));
  }

  Tensor<float> batch(std::span<const std::size_t> idx) const {
    const std::size_t w = 2 * frame_len;
    Tensor<float> out(Shape{idx.size(), 2, frame_len});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy_n(frames.begin() + idx[b] * w, w, out.data().begin() + b * w);
    }
    return out;
  }

  Tensor<float> one_hot(std::span<const std::size_t> idx) const {
    Tensor<float> out(Shape{idx.size(), n_classes()});
    for (std::size_t b = 0; b < idx.size(); ++b) out.at(b, labels_mod[idx[b]]) = 1.0f;
    return out;
  }

  std::size_t snr_index(int snr) const {
    auto it = std::find(snr_grid.begin(), snr_grid.end(), snr);
    if (it == snr_grid.end()) throw InvalidInput("SNR " + std::to_string(snr) + " dB is not in the dataset grid");
    return static_cast<std::size_t>(it - snr_grid.begin());
  }
};

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.schemes.size() * cfg.snr_grid.size() * cfg.frames_per_cell;
  Dataset ds;
  ds.schemes = cfg.schemes;
  ds.snr_grid = cfg.snr_grid;
  ds.frame_len = cfg.frame_len;
  ds.seed = cfg.seed;
  ds.frames.resize(n * 2 * cfg.frame_len);
  ds.labels_mod.resize(n);
  ds.labels_snr.resize(n);
  ds.truth.resize(n * kTruthFields);
  parallel_for(n, [&](std::size_t i) {
    const Frame f = generate_frame(cfg, i);
    const std::size_t w = 2 * cfg.frame_len;
    const auto& src = f.signal.tensor();
    for (std::size_t k = 0; k < w; ++k) ds.frames[i * w + k] = static_cast<float>(src[k]);
    ds.labels_mod[i] = static_cast<std::uint8_t>(f.mod_label);
    ds.labels_snr[i] = static_cast<std::int16_t>(f.snr_db);
    const double t[kTruthFields] = {f.truth.cfo, f.truth.phase, f.truth.timing, f.truth.clock_rate};
    for (std::size_t k = 0; k < kTruthFields; ++k) ds.truth[i * kTruthFields + k] = static_cast<float>(t[k]);
  });
  return ds;
}

// ---- on-disk container ----

inline nlohmann::ordered_json manifest_json(const Dataset& ds) {
  nlohmann::ordered_json m;
  m["version"] = kContainerVersion;
  m["schemes"] = ds.schemes;
  m["snr_grid"] = ds.snr_grid;
  m["frame_len"] = ds.frame_len;
  m["n_frames"] = ds.size();
  if (ds.seed) {
    m["seed"] = *ds.seed;
  } else {
    m["seed"] = nullptr;
  }
  return m;
}

inline void write_container(const Dataset& ds, const std::filesystem::path& dir) {
  io::ensure_dir(dir);
  io::write_array<float>(dir / "frames.f32", ds.frames);
  io::write_array<std::uint8_t>(dir / "labels_mod.u8", ds.labels_mod);
  io::write_array<std::int16_t>(dir / "labels_snr.i16", ds.labels_snr);
  io::write_array<float>(dir / "truth.f32", ds.truth);
  io::write_text(dir / "manifest.json", manifest_json(ds).dump(2) + "\n");
}

namespace detail {

template <class V>
std::vector<V> read_declared(const std::filesystem::path& dir, const std::string& file, std::size_t count,
                             const std::string& declared) {
  const auto path = dir / file;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw InvalidInput(path.string() + ": missing");
  const auto actual = std::filesystem::file_size(path, ec);
  const std::uintmax_t expected = count * sizeof(V);
  if (ec || actual != expected) {
    throw InvalidInput(path.string() + ": manifest declares " + declared + ", i.e. " + std::to_string(expected) +
                       " bytes; file has " + std::to_string(actual) + " bytes");
  }
  return io::read_array<V>(path, count);
}

}  // namespace detail

// Loads a container and checks it against its manifest: byte sizes, label
// ranges, frame finiteness. Truth values may be NaN (unknown impairments).
inline Dataset load_container(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::is_regular_file(mpath)) throw InvalidInput(mpath.string() + ": missing");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(mpath));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(mpath.string() + ": invalid JSON: " + e.what());
  }
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!m.is_object() || !m.contains(key)) throw InvalidInput(mpath.string() + ": missing key '" + key + "'");
    return m.at(key);
  };
  Dataset ds;
  std::size_t n = 0;
  try {
    if (field("version").get<int>() != kContainerVersion) {
      throw InvalidInput(mpath.string() + ": unsupported container version " + field("version").dump());
    }
    ds.schemes = field("schemes").get<std::vector<std::string>>();
    ds.snr_grid = field("snr_grid").get<std::vector<int>>();
    ds.frame_len = field("frame_len").get<std::size_t>();
    n = field("n_frames").get<std::size_t>();
    const auto& seed = field("seed");
    if (!seed.is_null()) ds.seed = seed.get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(mpath.string() + ": wrong type: " + e.what());
  }
  if (ds.schemes.empty() || ds.schemes.size() > 255) {
    throw InvalidInput(mpath.string() + ": schemes must list 1 to 255 names");
  }
  if (ds.snr_grid.empty()) throw InvalidInput(mpath.string() + ": snr_grid is empty");
  if (ds.frame_len < 2) throw InvalidInput(mpath.string() + ": frame_len must be at least 2");

  const std::string nf = "n_frames=" + std::to_string(n);
  ds.frames = detail::read_declared<float>(dir, "frames.f32", n * 2 * ds.frame_len,
                                           nf + " x 2 x frame_len=" + std::to_string(ds.frame_len) + " float32");
  ds.labels_mod = detail::read_declared<std::uint8_t>(dir, "labels_mod.u8", n, nf + " uint8");
  ds.labels_snr = detail::read_declared<std::int16_t>(dir, "labels_snr.i16", n, nf + " int16");
  ds.truth = detail::read_declared<float>(dir, "truth.f32", n * kTruthFields, nf + " x 4 float32");

  for (std::size_t i = 0; i < n; ++i) {
    if (ds.labels_mod[i] >= ds.schemes.size()) {
      throw InvalidInput((dir / "labels_mod.u8").string() + ": frame " + std::to_string(i) + " has label " +
                         std::to_string(ds.labels_mod[i]) + " but the manifest lists " +
                         std::to_string(ds.schemes.size()) + " schemes");
    }
    if (std::find(ds.snr_grid.begin(), ds.snr_grid.end(), ds.labels_snr[i]) == ds.snr_grid.end()) {
      throw InvalidInput((dir / "labels_snr.i16").string() + ": frame " + std::to_string(i) + " has SNR " +
                         std::to_string(ds.labels_snr[i]) + " dB, not in the manifest snr_grid");
    }
  }
  const std::size_t w = 2 * ds.frame_len;
  for (std::size_t k = 0; k < ds.frames.size(); ++k) {
    if (!std::isfinite(ds.frames[k])) {
      throw InvalidInput((dir / "frames.f32").string() + ": non-finite sample in frame " + std::to_string(k / w));
    }
  }
  return ds;
}

// ---- stratified split ----

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Splits `indices` so that each (scheme, SNR) cell contributes
// floor(fraction * count) or one more frame to the train side; the extra
// frames go to the cells with the largest remainders so the train total is
// round(fraction * indices.size()). Both sides are returned sorted.
inline Split split_indices(const Dataset& ds, std::span<const std::size_t> indices, double fraction,
                           std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidInput("split fraction must lie strictly between 0 and 1");
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i : indices) cells[{ds.labels_mod.at(i), ds.labels_snr.at(i)}].push_back(i);

  std::mt19937_64 rng(mix_seed(seed, 0x5B11));
  struct Quota {
    std::vector<std::size_t>* members;
    std::size_t take;
    double remainder;
    std::size_t order;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (auto& [key, members] : cells) {
    std::shuffle(members.begin(), members.end(), rng);
    const double exact = fraction * members.size();
    const auto take = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({&members, take, exact - take, quotas.size()});
    assigned += take;
  }
  const auto target = static_cast<std::size_t>(std::llround(fraction * indices.size()));
  std::vector<Quota*> by_remainder;
  for (auto& q : quotas) by_remainder.push_back(&q);
  std::stable_sort(by_remainder.begin(), by_remainder.end(),
                   [](const Quota* a, const Quota* b) { return a->remainder > b->remainder; });
  for (std::size_t k = 0; assigned < target && k < by_remainder.size(); ++k) {
    if (by_remainder[k]->take < by_remainder[k]->members->size()) {
      ++by_remainder[k]->take;
      ++assigned;
    }
  }

  Split s;
  for (const auto& q : quotas) {
    s.train.insert(s.train.end(), q.members->begin(), q.members->begin() + static_cast<long>(q.take));
    s.test.insert(s.test.end(), q.members->begin() + static_cast<long>(q.take), q.members->end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline Split split_dataset(const Dataset& ds, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return split_indices(ds, all, fraction, seed);
}

}  // namespace rtn::sig
