#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Operations execute eagerly and append a node to the Tape they belong to
// (define-by-run). Tape::backward walks the nodes in reverse recording order,
// which is a valid reverse topological order because a node can only be
// recorded after all of its parents.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rtn/parallel.hpp"
#include "rtn/tensor.hpp"

namespace rtn::ad {

enum class Padding { valid, same };

template <class T>
class Tape;

// Handle to a node recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> parents;
    std::string op;
    bool requires_grad = false;
    BackwardFn backward;
  };

  explicit Tape(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const noexcept { return training_; }
  std::mt19937_64& rng() noexcept { return rng_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, "leaf", requires_grad, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  // Appends the result of a primitive. `fn` receives the gradient of the
  // output and accumulates into the parents' gradient buffers; it is dropped
  // when no parent requires a gradient.
  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    check_finite(op, value);
    Node n{std::move(value), {}, std::move(op), false, {}};
    for (const auto& p : parents) {
      if (p.tape != this) throw Error(n.op + ": operand recorded on a different tape");
      n.parents.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient accumulator for node `id`, zero-initialised on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (!g) g.emplace(nodes_[id].value.shape(), T{0});
    return *g;
  }

  const Tensor<T>& grad(Var<T> v) {
    if (!backward_done_) throw Error("grad: backward has not been run on this tape");
    return grad_buffer(v.id);
  }

  void backward(Var<T> out, const Tensor<T>& seed) {
    if (nodes_.empty() || out.tape != this || out.id >= nodes_.size()) {
      throw Error("backward: no forward pass recorded for this output");
    }
    if (seed.shape() != nodes_[out.id].value.shape()) {
      throw Error("backward: seed shape " + shape_str(seed.shape()) + " does not match output shape " +
                  shape_str(nodes_[out.id].value.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[out.id] = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || !grads_[i]) continue;
      n.backward(*this, *grads_[i]);
    }
    backward_done_ = true;
  }

  void backward(Var<T> out) {
    if (nodes_.empty() || out.tape != this || out.id >= nodes_.size()) {
      throw Error("backward: no forward pass recorded for this output");
    }
    backward(out, Tensor<T>(nodes_[out.id].value.shape(), T{1}));
  }

 private:
  static void check_finite(const std::string& op, const Tensor<T>& v) {
    if (!v.all_finite()) throw Error(op + ": non-finite value in result of shape " + shape_str(v.shape()));
  }

  std::deque<Node> nodes_;  // deque: references to values stay valid as nodes are appended
  std::vector<std::optional<Tensor<T>>> grads_;
  bool training_;
  std::mt19937_64 rng_;
  bool backward_done_ = false;
};

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw Error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` laid over `out`'s index space; broadcast axes get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t axis_in = in.size() - 1 - k;
    std::size_t axis_out = out.size() - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  return strides;
}

// Calls f(i, ia, ib) for every flat output index i with the matching flat
// offsets into the two broadcast operands.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t total = shape_size(out);
  if (out.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t r = out.size();
  const std::size_t inner = out[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(i + j, base_a + j * sa[r - 1], base_b + j * sb[r - 1]);
    for (std::size_t axis = r - 1; axis-- > 0;) {
      ++idx[axis];
      base_a += sa[axis];
      base_b += sb[axis];
      if (idx[axis] < out[axis]) break;
      base_a -= sa[axis] * idx[axis];
      base_b -= sb[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
}

// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

template <class T, class Fwd, class DA, class DB>
Var<T> binary(const char* name, Var<T> a, Var<T> b, Fwd fwd, DA da, DB db) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return tape.record(name, std::move(out), {a, b}, [a, b, da, db](Tape<T>& t, const Tensor<T>& g) {
      const Tensor<T>& x = t.value(a.id);
      const Tensor<T>& y = t.value(b.id);
      if (t.requires_grad(a.id)) {
        auto& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i]);
      }
      if (t.requires_grad(b.id)) {
        auto& gb = t.grad_buffer(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i]);
      }
    });
  }
  Shape os = broadcast_shape(av.shape(), bv.shape(), name);
  auto sa = broadcast_strides(av.shape(), os);
  auto sb = broadcast_strides(bv.shape(), os);
  Tensor<T> out(os);
  for_each_broadcast(os, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  return tape.record(name, std::move(out), {a, b}, [a, b, os, sa, sb, da, db](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = t.value(a.id);
    const Tensor<T>& y = t.value(b.id);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for_each_broadcast(os, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * da(x[ia], y[ib]); });
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for_each_broadcast(os, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * db(x[ia], y[ib]); });
    }
  });
}

// df(x, y) is the derivative given input x and output y.
template <class T, class Fwd, class Df>
Var<T> unary(const std::string& name, Var<T> a, Fwd fwd, Df df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Var<T> res{a.tape, a.tape->size()};
  return a.tape->record(name, std::move(out), {a}, [a, res, df](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = t.value(a.id);
    const Tensor<T>& y = t.value(res.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

// ---- elementwise arithmetic (numpy-style broadcasting) ----

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{1}; });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>("subtract", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{-1}; });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>("multiply", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                           [](T x, T) { return x; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>("divide", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
                           [](T x, T y) { return -x / (y * y); });
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <class T>
Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }
template <class T>
Var<T> operator+(Var<T> a, T c) { return add(a, a.tape->scalar(c)); }
template <class T>
Var<T> operator+(T c, Var<T> a) { return add(a.tape->scalar(c), a); }
template <class T>
Var<T> operator-(Var<T> a, T c) { return sub(a, a.tape->scalar(c)); }
template <class T>
Var<T> operator-(T c, Var<T> a) { return sub(a.tape->scalar(c), a); }
template <class T>
Var<T> operator*(Var<T> a, T c) { return mul(a, a.tape->scalar(c)); }
template <class T>
Var<T> operator*(T c, Var<T> a) { return mul(a.tape->scalar(c), a); }
template <class T>
Var<T> operator/(Var<T> a, T c) { return div(a, a.tape->scalar(c)); }
template <class T>
Var<T> operator-(Var<T> a) { return sub(a.tape->scalar(T{0}), a); }

// ---- elementwise functions ----

template <class T>
Var<T> pow(Var<T> a, int n) {
  return detail::unary<T>(
      "pow", a, [n](T x) { return static_cast<T>(std::pow(x, n)); },
      [n](T x, T) { return n == 0 ? T{0} : static_cast<T>(n * std::pow(x, n - 1)); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> sin(Var<T> a) {
  return detail::unary<T>("sin", a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <class T>
Var<T> cos(Var<T> a) {
  return detail::unary<T>("cos", a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <class T>
T sign_of(T x) {
  return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0});
}

template <class T>
Var<T> abs(Var<T> a) {
  return detail::unary<T>("abs", a, [](T x) { return std::abs(x); }, [](T x, T) { return sign_of(x); });
}

// sign(0) == 0; the gradient is zero everywhere.
template <class T>
Var<T> sign(Var<T> a) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sign_of(av[i]);
  return a.tape->record("sign", std::move(out), {a}, {});
}

// Gradient passes through where lo <= x <= hi and is zero elsewhere.
template <class T>
Var<T> clip(Var<T> a, T lo, T hi) {
  if (!(lo <= hi)) throw Error("clip: lower bound exceeds upper bound");
  return detail::unary<T>(
      "clip", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

template <class T>
Var<T> relu(Var<T> a) {
  return detail::unary<T>("relu", a, [](T x) { return x > T{0} ? x : T{0}; },
                          [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

// ---- shape manipulation ----

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value();
  if (shape_size(shape) != out.size()) {
    throw Error("reshape: cannot reshape " + shape_str(out.shape()) + " to " + shape_str(shape));
  }
  out.reshape(std::move(shape));
  return a.tape->record("reshape", std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Elements [begin, end) along `axis`.
template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw Error("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                std::to_string(axis) + " invalid for shape " + shape_str(s));
  }
  auto [outer, extent, inner] = detail::split_axis(s, axis);
  Shape os = s;
  os[axis] = end - begin;
  Tensor<T> out(os);
  const auto& av = a.value();
  const std::size_t width = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data().begin() + (o * extent + begin) * inner, width, out.data().begin() + o * width);
  }
  return a.tape->record("slice", std::move(out), {a},
                        [a, outer, extent, inner, begin, width](Tape<T>& t, const Tensor<T>& g) {
                          auto& ga = t.grad_buffer(a.id);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < width; ++j) ga[(o * extent + begin) * inner + j] += g[o * width + j];
                          }
                        });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("concatenate: no operands");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw Error("concatenate: axis out of range for shape " + shape_str(os));
  os[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) {
      throw Error("concatenate: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != parts[0].shape()[i]) {
        throw Error("concatenate: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
      }
    }
    os[axis] += s[axis];
  }
  auto [outer, extent, inner] = detail::split_axis(os, axis);
  Tensor<T> out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.shape()[axis] * inner;
    const auto& pv = p.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data().begin() + o * w, w, out.data().begin() + o * extent * inner + off * inner);
    }
    off += p.shape()[axis];
  }
  return parts[0].tape->record(
      "concatenate", std::move(out), parts,
      [parts, offsets, axis, outer = outer, extent = extent, inner = inner](Tape<T>& t, const Tensor<T>& g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!t.requires_grad(parts[k].id)) continue;
          auto& gp = t.grad_buffer(parts[k].id);
          const std::size_t w = t.value(parts[k].id).shape()[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += g[o * extent * inner + offsets[k] * inner + j];
          }
        }
      });
}

// ---- reductions ----

template <class T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return a.tape->record("reduce_sum", Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

// Sum along one axis; the axis is removed from the result.
template <class T>
Var<T> sum(Var<T> a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw Error("reduce_sum: axis out of range for shape " + shape_str(s));
  auto [outer, extent, inner] = detail::split_axis(s, axis);
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(os);
  const auto& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
  return a.tape->record("reduce_sum", std::move(out), {a},
                        [a, outer = outer, extent = extent, inner = inner](Tape<T>& t, const Tensor<T>& g) {
                          auto& ga = t.grad_buffer(a.id);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t e = 0; e < extent; ++e)
                              for (std::size_t i = 0; i < inner; ++i) ga[(o * extent + e) * inner + i] += g[o * inner + i];
                        });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return sum(a) / n;
}

template <class T>
Var<T> mean(Var<T> a, std::size_t axis) {
  const T n = static_cast<T>(a.shape().at(axis));
  return sum(a, axis) / n;
}

// ---- linear algebra ----

// (m, k) x (k, n) -> (m, n)
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw Error("matmul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  using M = detail::RowMat<T>;
  const auto m = static_cast<Eigen::Index>(sa[0]), k = static_cast<Eigen::Index>(sa[1]),
             n = static_cast<Eigen::Index>(sb[1]);
  Tensor<T> out(Shape{sa[0], sb[1]});
  {
    Eigen::Map<const M> A(a.value().data().data(), m, k);
    Eigen::Map<const M> B(b.value().data().data(), k, n);
    Eigen::Map<M> C(out.data().data(), m, n);
    C.noalias() = A * B;
  }
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    Eigen::Map<const M> G(g.data().data(), m, n);
    if (t.requires_grad(a.id)) {
      Eigen::Map<const M> B(t.value(b.id).data().data(), k, n);
      Eigen::Map<M> GA(t.grad_buffer(a.id).data().data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (t.requires_grad(b.id)) {
      Eigen::Map<const M> A(t.value(a.id).data().data(), m, k);
      Eigen::Map<M> GB(t.grad_buffer(b.id).data().data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

inline std::pair<std::size_t, std::size_t> padding_amounts(Padding p, std::size_t taps) {
  if (p == Padding::valid) return {0, 0};
  const std::size_t left = (taps - 1) / 2;
  return {left, taps - 1 - left};
}

inline std::size_t conv_output_length(std::size_t len, std::size_t taps, Padding p) {
  auto [l, r] = padding_amounts(p, taps);
  return len + l + r - taps + 1;
}

// Multi-channel 1D cross-correlation (no kernel flip):
//   y[b, o, t] = sum_{c, k} x[b, c, t + k - left] * w[o, c, k]
// x: (B, Cin, L), w: (Cout, Cin, K). Same padding zero-pads
// left = (K-1)/2 and right = K-1-left samples, so L_out = L.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> w, Padding padding) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[1] || sw[2] == 0) {
    throw Error("conv1d: shape mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  }
  const std::size_t B = sx[0], Cin = sx[1], L = sx[2], Cout = sw[0], K = sw[2];
  if (padding == Padding::valid && K > L) {
    throw Error("conv1d: kernel of " + std::to_string(K) + " taps longer than input " + shape_str(sx) +
                " with valid padding");
  }
  const auto [left, right] = padding_amounts(padding, K);
  const std::size_t Lout = L + left + right - K + 1;
  const std::size_t rows = Cin * K;
  // Fixed chunking over the batch keeps reductions independent of threads.
  const std::size_t chunk = std::max<std::size_t>(1, (std::size_t{1} << 21) / std::max<std::size_t>(1, rows * Lout));
  const std::size_t n_chunks = (B + chunk - 1) / chunk;
  using M = detail::RowMat<T>;

  auto im2col = [=](const Tensor<T>& xv, std::size_t b0, std::size_t nb, M& cols) {
    cols.setZero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(nb * Lout));
    for (std::size_t j = 0; j < nb; ++j) {
      const T* xb = xv.data().data() + (b0 + j) * Cin * L;
      for (std::size_t c = 0; c < Cin; ++c) {
        for (std::size_t k = 0; k < K; ++k) {
          T* dst = cols.data() + (c * K + k) * nb * Lout + j * Lout;
          // source index t + k - left must fall in [0, L)
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(left);
          const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
          const std::ptrdiff_t t1s = static_cast<std::ptrdiff_t>(L) - shift;
          const std::size_t t1 = std::min<std::size_t>(Lout, t1s < 0 ? 0 : static_cast<std::size_t>(t1s));
          for (std::size_t t = t0; t < t1; ++t) dst[t] = xb[c * L + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift)];
        }
      }
    }
  };

  Tensor<T> out(Shape{B, Cout, Lout});
  {
    const auto& xv = x.value();
    Eigen::Map<const M> W(w.value().data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(rows));
    parallel_for(n_chunks, [&](std::size_t ci) {
      const std::size_t b0 = ci * chunk, nb = std::min(chunk, B - b0);
      M cols;
      im2col(xv, b0, nb, cols);
      M res = W * cols;
      for (std::size_t j = 0; j < nb; ++j)
        for (std::size_t o = 0; o < Cout; ++o)
          std::copy_n(res.data() + o * nb * Lout + j * Lout, Lout, out.data().data() + ((b0 + j) * Cout + o) * Lout);
    });
  }
  return x.tape->record(
      "conv1d", std::move(out), {x, w},
      [=](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x.id);
        Eigen::Map<const M> W(t.value(w.id).data().data(), static_cast<Eigen::Index>(Cout),
                              static_cast<Eigen::Index>(rows));
        const bool need_x = t.requires_grad(x.id), need_w = t.requires_grad(w.id);
        std::vector<M> partial_w(need_w ? n_chunks : 0);
        Tensor<T>* gx = need_x ? &t.grad_buffer(x.id) : nullptr;
        parallel_for(n_chunks, [&](std::size_t ci) {
          const std::size_t b0 = ci * chunk, nb = std::min(chunk, B - b0);
          M G(static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(nb * Lout));
          for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t o = 0; o < Cout; ++o)
              std::copy_n(g.data().data() + ((b0 + j) * Cout + o) * Lout, Lout, G.data() + o * nb * Lout + j * Lout);
          if (need_w) {
            M cols;
            im2col(xv, b0, nb, cols);
            partial_w[ci].noalias() = G * cols.transpose();
          }
          if (need_x) {
            M dcols = W.transpose() * G;
            for (std::size_t j = 0; j < nb; ++j) {
              T* gxb = gx->data().data() + (b0 + j) * Cin * L;
              for (std::size_t c = 0; c < Cin; ++c) {
                for (std::size_t k = 0; k < K; ++k) {
                  const T* src = dcols.data() + (c * K + k) * nb * Lout + j * Lout;
                  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(left);
                  const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                  const std::ptrdiff_t t1s = static_cast<std::ptrdiff_t>(L) - shift;
                  const std::size_t t1 = std::min<std::size_t>(Lout, t1s < 0 ? 0 : static_cast<std::size_t>(t1s));
                  for (std::size_t tt = t0; tt < t1; ++tt)
                    gxb[c * L + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(tt) + shift)] += src[tt];
                }
              }
            }
          }
        });
        if (need_w) {
          Eigen::Map<M> GW(t.grad_buffer(w.id).data().data(), static_cast<Eigen::Index>(Cout),
                           static_cast<Eigen::Index>(rows));
          for (const auto& p : partial_w) GW += p;
        }
      });
}

// ---- classification head ----

// Softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> a) {
  const Shape& s = a.shape();
  if (s.empty()) throw Error("softmax: scalar input");
  const std::size_t C = s.back();
  const std::size_t rows = a.value().size() / C;
  Tensor<T> out(s);
  const auto& av = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data().data() + r * C;
    T* y = out.data().data() + r * C;
    T mx = *std::max_element(x, x + C);
    T z{0};
    for (std::size_t c = 0; c < C; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < C; ++c) y[c] /= z;
  }
  Var<T> res{a.tape, a.tape->size()};
  return a.tape->record("softmax", std::move(out), {a}, [a, res, C, rows](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(res.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
    }
  });
}

// Mean over the batch of -sum_c target[b,c] * log(p[b,c]). Probabilities are
// floored at 1e-7 before the log; the floor has zero gradient.
template <class T>
Var<T> categorical_cross_entropy(Var<T> probs, const Tensor<T>& targets) {
  const Shape& s = probs.shape();
  if (s.size() != 2 || targets.shape() != s) {
    throw Error("categorical_cross_entropy: shape mismatch " + shape_str(s) + " vs " + shape_str(targets.shape()));
  }
  constexpr T floor = static_cast<T>(1e-7);
  const auto& p = probs.value();
  const T batch = static_cast<T>(s[0]);
  T loss{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (targets[i] != T{0}) loss -= targets[i] * std::log(std::max(p[i], floor));
  }
  loss /= batch;
  return probs.tape->record("categorical_cross_entropy", Tensor<T>::scalar(loss), {probs},
                            [probs, targets, batch](Tape<T>& t, const Tensor<T>& g) {
                              const auto& pv = t.value(probs.id);
                              auto& gp = t.grad_buffer(probs.id);
                              for (std::size_t i = 0; i < pv.size(); ++i) {
                                if (targets[i] != T{0} && pv[i] > floor) gp[i] -= g[0] * targets[i] / (batch * pv[i]);
                              }
                            });
}

// Inverted dropout: in training mode each element is zeroed with probability
// p and survivors are scaled by 1/(1-p). Identity otherwise.
template <class T>
Var<T> dropout(Var<T> a, T p) {
  if (!(p >= T{0} && p < T{1})) throw Error("dropout: probability must lie in [0, 1)");
  Tape<T>& tape = *a.tape;
  if (!tape.training() || p == T{0}) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T scale = T{1} / (T{1} - p);
  Tensor<T> mask(a.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(tape.rng()) ? scale : T{0};
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
  return tape.record("dropout", std::move(out), {a}, [a, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

}  // namespace rtn::ad
