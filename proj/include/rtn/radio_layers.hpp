#pragma once

// Differentiable radio-domain layers. Signals are batched as (B, 2, N):
// row 0 holds the in-phase (real) samples, row 1 the quadrature (imaginary)
// samples.

#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rtn/autodiff.hpp"

namespace rtn::radio {

using ad::Padding;
using ad::Tape;
using ad::Var;

enum class Atan2Mode { verbatim, reference };

inline std::string to_string(Atan2Mode m) { return m == Atan2Mode::verbatim ? "verbatim" : "reference"; }

inline Atan2Mode parse_atan2_mode(const std::string& s) {
  if (s == "verbatim") return Atan2Mode::verbatim;
  if (s == "reference") return Atan2Mode::reference;
  throw InvalidInput("unknown atan2 mode '" + s + "'");
}

// A 2 x N I/Q matrix.
template <class T>
class ComplexSignal {
 public:
  ComplexSignal() : data_(Shape{2, 0}) {}

  explicit ComplexSignal(Tensor<T> data) : data_(std::move(data)) {
    if (data_.rank() != 2 || data_.dim(0) != 2) {
      throw Error("ComplexSignal: expected shape [2,N], got " + shape_str(data_.shape()));
    }
  }

  explicit ComplexSignal(std::size_t n) : data_(Shape{2, n}) {}

  static ComplexSignal from_complex(std::span<const std::complex<double>> samples) {
    ComplexSignal s(samples.size());
    for (std::size_t n = 0; n < samples.size(); ++n) s.set(n, samples[n]);
    return s;
  }

  std::size_t length() const { return data_.dim(1); }
  T& i(std::size_t n) { return data_[n]; }
  T& q(std::size_t n) { return data_[length() + n]; }
  T i(std::size_t n) const { return data_[n]; }
  T q(std::size_t n) const { return data_[length() + n]; }

  std::complex<double> sample(std::size_t n) const { return {static_cast<double>(i(n)), static_cast<double>(q(n))}; }
  void set(std::size_t n, std::complex<double> v) {
    i(n) = static_cast<T>(v.real());
    q(n) = static_cast<T>(v.imag());
  }

  const Tensor<T>& tensor() const { return data_; }

  // (1, 2, N) view for the batched layer API.
  Tensor<T> batched() const {
    Tensor<T> t = data_;
    t.reshape(Shape{1, 2, length()});
    return t;
  }

 private:
  Tensor<T> data_;
};

// The five synchronization parameters regressed by a localization network.
struct TransformParams {
  double time_scale = 1.0;   // theta0
  double row_scale = 1.0;    // theta1
  double time_shift = 0.0;   // theta2, normalized coordinates
  double freq_offset = 0.0;  // theta3, radians per sample
  double phase = 0.0;        // theta4, radians

  static TransformParams identity() { return {}; }

  template <class T>
  Tensor<T> tensor() const {
    return Tensor<T>(Shape{1, 5}, std::vector<T>{static_cast<T>(time_scale), static_cast<T>(row_scale),
                                                  static_cast<T>(time_shift), static_cast<T>(freq_offset),
                                                  static_cast<T>(phase)});
  }
};

// Complex convolution built from four real convolutions.
// x: (B, 2, N), w: (M, 2, K) with row 0 the real and row 1 the imaginary
// taps. Output (B, M, 2, L): per filter, row 0 = conv(x0,w0) - conv(x1,w1)
// and row 1 = conv(x0,w1) + conv(x1,w0). Uses the conv1d correlation
// convention, i.e. y[t] = sum_k x[t+k-left] * w[k] in complex arithmetic.
template <class T>
Var<T> complex_conv1d(Var<T> x, Var<T> w, Padding padding) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3 || sx[1] != 2) throw Error("complex_conv1d: input must be (B,2,N), got " + shape_str(sx));
  if (sw.size() != 3 || sw[1] != 2 || sw[0] == 0 || sw[2] == 0) {
    throw Error("complex_conv1d: filters must be (M,2,K), got " + shape_str(sw));
  }
  if (padding == Padding::valid && sw[2] > sx[2]) {
    throw Error("complex_conv1d: " + std::to_string(sw[2]) + " taps exceed " + std::to_string(sx[2]) +
                " samples with valid padding");
  }
  Var<T> x0 = ad::slice(x, 1, 0, 1), x1 = ad::slice(x, 1, 1, 2);
  Var<T> w0 = ad::slice(w, 1, 0, 1), w1 = ad::slice(w, 1, 1, 2);
  Var<T> re = ad::conv1d(x0, w0, padding) - ad::conv1d(x1, w1, padding);
  Var<T> im = ad::conv1d(x0, w1, padding) + ad::conv1d(x1, w0, padding);
  const Shape& so = re.shape();
  Shape s4{so[0], so[1], 1, so[2]};
  return ad::concat<T>({ad::reshape(re, s4), ad::reshape(im, s4)}, 2);
}

// Conditional-free atan2(xq, xi).
//
// verbatim: the original sign-mask formulation evaluated literally, including its
// quadrant handling. It disagrees with atan2 over large regions and is kept
// for fidelity checks only.
//
// reference: atan(z) ~ z/(1+0.28 z^2) for |z| <= 1 and
// sign(z) pi/2 - z/(z^2+0.28) otherwise, z = xq/xi, plus pi*sgn(xq) when
// xi < 0 (sgn treating 0 as +1). Worst-case error about 0.005 rad away from
// the clip floor |xi| < 1e-3.
template <class T>
Var<T> approx_atan2(Var<T> xq, Var<T> xi, Atan2Mode mode) {
  if (xq.shape() != xi.shape()) {
    throw Error("approx_atan2: shape mismatch " + shape_str(xq.shape()) + " vs " + shape_str(xi.shape()));
  }
  constexpr T pi = std::numbers::pi_v<T>;
  const T c = static_cast<T>(0.28);
  Var<T> z = xq / ad::clip(ad::abs(xi), static_cast<T>(1e-3), static_cast<T>(1e6));
  z = z * ad::sign(xi);
  Var<T> z_sq = ad::pow(z, 2);
  Var<T> s_zc = ad::sign(ad::abs(z) - T{1});
  if (mode == Atan2Mode::verbatim) {
    Var<T> z1 = z / (T{1} + c * z_sq) + pi * ad::sign(xq);
    Var<T> z2 = z / (z_sq + c) + (ad::sign(xq) - T{1}) * (T{0.5} * pi);
    return (s_zc - T{1}) * T{-0.5} * z1 + (s_zc + T{1}) * T{0.5} * z2;
  }
  Var<T> small = z / (T{1} + c * z_sq);
  Var<T> large = ad::sign(z) * (T{0.5} * pi) - z / (z_sq + c);
  Var<T> atan_z = (T{1} - s_zc) * T{0.5} * small + (T{1} + s_zc) * T{0.5} * large;
  Var<T> s_q = ad::sign(xq);
  Var<T> s_q_nonzero = s_q + T{1} - ad::abs(s_q);
  Var<T> xi_negative = (T{1} - ad::sign(xi)) * T{0.5};
  return atan_z + pi * s_q_nonzero * xi_negative;
}

template <class T>
struct Polar {
  Var<T> magnitude_sq;
  Var<T> phase;
};

// Input (..., 2, L); both outputs drop the I/Q axis: (..., L).
template <class T>
Polar<T> cartesian_to_polar(Var<T> x, Atan2Mode mode) {
  const Shape& s = x.shape();
  if (s.size() < 2 || s[s.size() - 2] != 2) {
    throw Error("cartesian_to_polar: expected an I/Q axis of extent 2 in shape " + shape_str(s));
  }
  const std::size_t axis = s.size() - 2;
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  Var<T> xi = ad::reshape(ad::slice(x, axis, 0, 1), out);
  Var<T> xq = ad::reshape(ad::slice(x, axis, 1, 2), out);
  return {ad::pow(xi, 2) + ad::pow(xq, 2), approx_atan2(xq, xi, mode)};
}

// y_n = x_n * exp(j (n * freq + phase)), n zero-based.
// x: (B, 2, N); freq, phase: (B, 1).
template <class T>
Var<T> freq_phase_mixer(Var<T> x, Var<T> freq, Var<T> phase) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != 2) throw Error("freq_phase_mixer: input must be (B,2,N), got " + shape_str(s));
  const std::size_t B = s[0], N = s[2];
  const Shape col{B, 1};
  if (freq.shape() != col || phase.shape() != col) {
    throw Error("freq_phase_mixer: parameters must be (B,1), got " + shape_str(freq.shape()) + " and " +
                shape_str(phase.shape()));
  }
  Tensor<T> n(Shape{N});
  for (std::size_t k = 0; k < N; ++k) n[k] = static_cast<T>(k);
  Var<T> angle = freq * x.tape->constant(std::move(n)) + phase;
  Var<T> c = ad::cos(angle), sn = ad::sin(angle);
  Var<T> x0 = ad::reshape(ad::slice(x, 1, 0, 1), Shape{B, N});
  Var<T> x1 = ad::reshape(ad::slice(x, 1, 1, 2), Shape{B, N});
  Var<T> y0 = x0 * c - x1 * sn;
  Var<T> y1 = x0 * sn + x1 * c;
  return ad::concat<T>({ad::reshape(y0, Shape{B, 1, N}), ad::reshape(y1, Shape{B, 1, N})}, 1);
}

namespace detail {

// Source coordinate for output index `t` of `out_len` points over an input
// of `n` samples, under scale/shift in normalized [-1, 1] units. Written so
// that scale 1, shift 0, out_len == n yields s == t exactly.
inline double source_index(double scale, double shift, std::size_t t, std::size_t out_len, std::size_t n,
                           double* d_scale) {
  const double half_in = (static_cast<double>(n) - 1.0) / 2.0;
  double rel = 0.0;  // (t - c_out) * (n-1)/(out_len-1), i.e. t_hat * half_in
  if (out_len > 1) {
    const double half_out = (static_cast<double>(out_len) - 1.0) / 2.0;
    rel = (static_cast<double>(t) - half_out) * (static_cast<double>(n) - 1.0) / (static_cast<double>(out_len) - 1.0);
  }
  if (d_scale) *d_scale = rel;
  return scale * rel + half_in + shift * half_in;
}

}  // namespace detail

// Masked affine resampling. Output column t samples the input at the source
// coordinate scale * t_hat + shift (normalized units, t_hat spanning [-1, 1]
// over out_len points), i.e. index s = (s_hat + 1)(N-1)/2, with linear
// interpolation between floor(s) and floor(s)+1; neighbours outside the
// input contribute zero. Rows are treated the same way with row_scale and no
// shift: with two rows, row_scale = 1 maps each row onto itself.
// x: (B, R, N) with N >= 2; parameters (B, 1). Output (B, R, out_len).
template <class T>
Var<T> affine_resample_1d(Var<T> x, Var<T> scale, Var<T> row_scale, Var<T> shift, std::size_t out_len) {
  if (out_len < 1) throw Error("affine_resample_1d: out_len must be at least 1");
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] < 2) throw Error("affine_resample_1d: input must be (B,R,N) with N >= 2, got " + shape_str(s));
  const std::size_t B = s[0], R = s[1], N = s[2];
  for (const Var<T>* p : {&scale, &row_scale, &shift}) {
    if (p->shape() != Shape{B, 1}) {
      throw Error("affine_resample_1d: parameters must be (B,1), got " + shape_str(p->shape()));
    }
  }

  // Visits the (up to) four interpolation neighbours of output (b, r, t).
  auto visit = [=](const Tensor<T>& xv, const Tensor<T>& sc, const Tensor<T>& rs, const Tensor<T>& sh, std::size_t b,
                   std::size_t r, std::size_t t, auto&& fn) {
    double d_scale = 0.0, d_row = 0.0;
    const double col = detail::source_index(static_cast<double>(sc[b]), static_cast<double>(sh[b]), t, out_len, N, &d_scale);
    const double row = R > 1 ? detail::source_index(static_cast<double>(rs[b]), 0.0, r, R, R, &d_row) : 0.0;
    const double c0 = std::floor(col), r0 = std::floor(row);
    const double wc1 = col - c0, wr1 = row - r0;
    auto at = [&](double ri, double ci) -> double {
      if (ri < 0 || ci < 0 || ri > static_cast<double>(R - 1) || ci > static_cast<double>(N - 1)) return 0.0;
      return static_cast<double>(xv[(b * R + static_cast<std::size_t>(ri)) * N + static_cast<std::size_t>(ci)]);
    };
    fn(c0, r0, wc1, wr1, d_scale, d_row, at);
  };

  Tensor<T> out(Shape{B, R, out_len});
  {
    const auto &xv = x.value(), &sc = scale.value(), &rs = row_scale.value(), &sh = shift.value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t t = 0; t < out_len; ++t)
          visit(xv, sc, rs, sh, b, r, t, [&](double c0, double r0, double wc1, double wr1, double, double, auto&& at) {
            const double top = (1 - wc1) * at(r0, c0) + wc1 * at(r0, c0 + 1);
            const double bottom = (1 - wc1) * at(r0 + 1, c0) + wc1 * at(r0 + 1, c0 + 1);
            out[(b * R + r) * out_len + t] = static_cast<T>((1 - wr1) * top + wr1 * bottom);
          });
  }
  return x.tape->record(
      "affine_resample_1d", std::move(out), {x, scale, row_scale, shift}, [=](Tape<T>& tp, const Tensor<T>& g) {
        const auto &xv = tp.value(x.id), &sc = tp.value(scale.id), &rs = tp.value(row_scale.id),
                   &sh = tp.value(shift.id);
        Tensor<T>* gx = tp.requires_grad(x.id) ? &tp.grad_buffer(x.id) : nullptr;
        Tensor<T>* gs = tp.requires_grad(scale.id) ? &tp.grad_buffer(scale.id) : nullptr;
        Tensor<T>* gr = tp.requires_grad(row_scale.id) ? &tp.grad_buffer(row_scale.id) : nullptr;
        Tensor<T>* gsh = tp.requires_grad(shift.id) ? &tp.grad_buffer(shift.id) : nullptr;
        const double half_in = (static_cast<double>(N) - 1.0) / 2.0;
        for (std::size_t b = 0; b < B; ++b) {
          double acc_scale = 0.0, acc_row = 0.0, acc_shift = 0.0;
          for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t t = 0; t < out_len; ++t) {
              const double go = static_cast<double>(g[(b * R + r) * out_len + t]);
              if (go == 0.0) continue;
              visit(xv, sc, rs, sh, b, r, t,
                    [&](double c0, double r0, double wc1, double wr1, double d_scale, double d_row, auto&& at) {
                      const double wc[2] = {1 - wc1, wc1}, wr[2] = {1 - wr1, wr1};
                      if (gx) {
                        for (int a = 0; a < 2; ++a)
                          for (int c = 0; c < 2; ++c) {
                            const double ri = r0 + a, ci = c0 + c;
                            if (ri < 0 || ci < 0 || ri > static_cast<double>(R - 1) || ci > static_cast<double>(N - 1))
                              continue;
                            (*gx)[(b * R + static_cast<std::size_t>(ri)) * N + static_cast<std::size_t>(ci)] +=
                                static_cast<T>(go * wr[a] * wc[c]);
                          }
                      }
                      const double d_col = wr[0] * (at(r0, c0 + 1) - at(r0, c0)) + wr[1] * (at(r0 + 1, c0 + 1) - at(r0 + 1, c0));
                      const double d_rowpos = wc[0] * (at(r0 + 1, c0) - at(r0, c0)) + wc[1] * (at(r0 + 1, c0 + 1) - at(r0, c0 + 1));
                      acc_scale += go * d_col * d_scale;
                      acc_shift += go * d_col * half_in;
                      acc_row += go * d_rowpos * d_row;
                    });
            }
          }
          if (gs) (*gs)[b] += static_cast<T>(acc_scale);
          if (gsh) (*gsh)[b] += static_cast<T>(acc_shift);
          if (gr) (*gr)[b] += static_cast<T>(acc_row);
        }
      });
}

// Mixer first, then the affine resampler. theta: (B, 5) ordered
// (time_scale, row_scale, time_shift, freq_offset, phase).
template <class T>
Var<T> transform_cascade(Var<T> x, Var<T> theta, std::size_t out_len) {
  const Shape& st = theta.shape();
  if (st.size() != 2 || st[1] != 5 || x.shape().empty() || st[0] != x.shape()[0]) {
    throw Error("transform_cascade: theta must be (B,5), got " + shape_str(st) + " for input " + shape_str(x.shape()));
  }
  auto col = [&](std::size_t k) { return ad::slice(theta, 1, k, k + 1); };
  Var<T> mixed = freq_phase_mixer(x, col(3), col(4));
  return affine_resample_1d(mixed, col(0), col(1), col(2), out_len);
}

// ---- unbatched helpers over ComplexSignal ----

template <class T>
ComplexSignal<T> unbatch(const Tensor<T>& t) {
  Tensor<T> copy = t;
  copy.reshape(Shape{2, t.dim(2)});
  return ComplexSignal<T>(std::move(copy));
}

template <class T>
ComplexSignal<T> apply_mixer(const ComplexSignal<T>& x, double freq, double phase) {
  Tape<T> tape;
  Var<T> v = freq_phase_mixer(tape.constant(x.batched()), tape.constant(Tensor<T>(Shape{1, 1}, static_cast<T>(freq))),
                              tape.constant(Tensor<T>(Shape{1, 1}, static_cast<T>(phase))));
  return unbatch(v.value());
}

template <class T>
ComplexSignal<T> apply_resample(const ComplexSignal<T>& x, double scale, double row_scale, double shift,
                                std::size_t out_len) {
  Tape<T> tape;
  auto p = [&](double v) { return tape.constant(Tensor<T>(Shape{1, 1}, static_cast<T>(v))); };
  Var<T> v = affine_resample_1d(tape.constant(x.batched()), p(scale), p(row_scale), p(shift), out_len);
  return unbatch(v.value());
}

template <class T>
ComplexSignal<T> apply_transform(const ComplexSignal<T>& x, const TransformParams& theta, std::size_t out_len) {
  Tape<T> tape;
  Var<T> v = transform_cascade(tape.constant(x.batched()), tape.constant(theta.tensor<T>()), out_len);
  return unbatch(v.value());
}

// Batched transform of a (B, 2, N) tensor with per-frame parameters (B, 5).
template <class T>
Tensor<T> apply_transform(const Tensor<T>& frames, const Tensor<T>& theta, std::size_t out_len) {
  Tape<T> tape;
  return transform_cascade(tape.constant(frames), tape.constant(theta), out_len).value();
}

}  // namespace rtn::radio
