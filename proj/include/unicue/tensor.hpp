#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unicue/rng.hpp"

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
// Ops are tensor-granular: each records one node with a hand-written
// backward rule. Gradients accumulate; callers reset them between steps.

namespace unicue {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
    n *= static_cast<size_t>(d);
  }
  return n;
}

template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) {
    d_ = std::make_shared<TensorData<S>>();
    d_->shape = std::move(shape);
    d_->values.assign(shape_numel(d_->shape), S(0));
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<S> values) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("value count does not match shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  // fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  static Tensor uniform_init(Shape shape, int fan_in, Rng& rng, bool requires_grad = true) {
    Tensor t(std::move(shape), requires_grad);
    const double s = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    for (auto& v : t.d_->values) v = static_cast<S>(rng.uniform(-s, s));
    return t;
  }

  static Tensor gaussian(Shape shape, double stddev, Rng& rng, bool requires_grad = true) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.d_->values) v = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return d_->values.size(); }

  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }
  std::vector<S>& values() { return d_->values; }
  const std::vector<S>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->grad.empty(); }

  S* grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), S(0));
    return d_->grad.data();
  }
  const std::vector<S>& grad_values() {
    grad();
    return d_->grad;
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(d_->shape));
    return d_->values[0];
  }

  S& at(std::initializer_list<int> idx) {
    return d_->values[flat_index(idx)];
  }
  S at(std::initializer_list<int> idx) const {
    return d_->values[flat_index(idx)];
  }

  std::shared_ptr<TensorData<S>> storage() const { return d_; }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  size_t flat_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw std::invalid_argument("index rank mismatch for shape " + shape_str(d_->shape));
    size_t flat = 0;
    int axis = 0;
    for (int i : idx) {
      flat = flat * static_cast<size_t>(d_->shape[axis]) + static_cast<size_t>(i);
      ++axis;
    }
    return flat;
  }

  std::shared_ptr<TensorData<S>> d_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Ordered record of primitive ops. Appending preserves topological order, so
// a reverse sweep is a valid backward traversal that visits each node once.
template <class S>
class Tape {
 public:
  struct Node {
    std::function<void()> backward_fn;
    std::shared_ptr<TensorData<S>> output;
  };

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  static bool recording() { return current() != nullptr; }

  void record(std::shared_ptr<TensorData<S>> output, std::function<void()> backward_fn) {
    nodes_.push_back({std::move(backward_fn), std::move(output)});
  }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Populates d(loss)/d(leaf) for every requires_grad tensor reachable on
  // this tape. Leaf grads accumulate across calls; grads of op outputs are
  // reset first so a repeated sweep does not double-count.
  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape()));
    for (auto& n : nodes_)
      if (!n.output->grad.empty()) std::fill(n.output->grad.begin(), n.output->grad.end(), S(0));
    loss.grad()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
  }

 private:
  std::vector<Node> nodes_;
};

template <class S>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<S>::current()) { Tape<S>::current() = &tape_; }
  ~TapeScope() { Tape<S>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  Tape<S>& tape() { return tape_; }
  void backward(Tensor<S>& loss) { tape_.backward(loss); }

 private:
  Tape<S> tape_;
  Tape<S>* prev_;
};

template <class S>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(Tape<S>::current()) { Tape<S>::current() = nullptr; }
  ~NoTapeScope() { Tape<S>::current() = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

template <class S>
void backward(Tensor<S>& loss) {
  if (!Tape<S>::recording()) throw std::runtime_error("backward called with no active tape");
  Tape<S>::current()->backward(loss);
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
inline bool track(const Tensor<S>& t) {
  return Tape<S>::recording() && t.requires_grad();
}

template <class S>
inline Tensor<S> make_out(Shape shape, bool tracked) {
  Tensor<S> out(std::move(shape), tracked);
  return out;
}

template <class S>
inline void record(const Tensor<S>& output, std::function<void()> fn) {
  Tape<S>::current()->record(output.storage(), std::move(fn));
}

}  // namespace detail

// Stops gradient flow; shares the value buffer.
template <class S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>::from(a.shape(), a.values());
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

// add/sub/mul support equal shapes, a trailing-axis vector b, or scalar b.
enum class BroadcastKind { None, TrailingVec, Scalar };

template <class S>
inline BroadcastKind broadcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::None;
  if (b.numel() == 1) return BroadcastKind::Scalar;
  if (b.ndim() == 1 && a.ndim() >= 1 && a.dim(a.ndim() - 1) == b.dim(0)) return BroadcastKind::TrailingVec;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
}

template <class S, class Fwd, class BwdA, class BwdB>
Tensor<S> binary_ew(const Tensor<S>& a, const Tensor<S>& b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const BroadcastKind bk = broadcast_kind(a, b, name);
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>(a.shape(), tracked);
  const size_t n = a.numel();
  const size_t bn = b.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  if (bk == BroadcastKind::None) {
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (bk == BroadcastKind::Scalar) {
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[0]);
  } else {
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i % bn]);
  }
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, bk, bwd_a, bwd_b]() mutable {
      const size_t n = av.numel();
      const size_t bn = bv.numel();
      const S* go = ov.grad();
      const S* pa = av.data();
      const S* pb = bv.data();
      if (av.requires_grad()) {
        S* ga = av.grad();
        if (bk == BroadcastKind::None) {
          for (size_t i = 0; i < n; ++i) ga[i] += bwd_a(go[i], pa[i], pb[i]);
        } else if (bk == BroadcastKind::Scalar) {
          for (size_t i = 0; i < n; ++i) ga[i] += bwd_a(go[i], pa[i], pb[0]);
        } else {
          for (size_t i = 0; i < n; ++i) ga[i] += bwd_a(go[i], pa[i], pb[i % bn]);
        }
      }
      if (bv.requires_grad()) {
        S* gb = bv.grad();
        if (bk == BroadcastKind::None) {
          for (size_t i = 0; i < n; ++i) gb[i] += bwd_b(go[i], pa[i], pb[i]);
        } else if (bk == BroadcastKind::Scalar) {
          for (size_t i = 0; i < n; ++i) gb[0] += bwd_b(go[i], pa[i], pb[0]);
        } else {
          for (size_t i = 0; i < n; ++i) gb[i % bn] += bwd_b(go[i], pa[i], pb[i % bn]);
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, "add", [](S x, S y) { return x + y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

template <class S, class Fwd, class Bwd>
Tensor<S> unary_ew(const Tensor<S>& a, Fwd fwd, Bwd bwd_from_out) {
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>(a.shape(), tracked);
  const size_t n = a.numel();
  const S* pa = a.data();
  S* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, bwd_from_out]() mutable {
      const size_t n = av.numel();
      const S* go = ov.grad();
      const S* py = ov.data();
      const S* px = av.data();
      S* ga = av.grad();
      for (size_t i = 0; i < n; ++i) ga[i] += bwd_from_out(go[i], px[i], py[i]);
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return unary_ew(
      a, [c](S x) { return x * c; }, [c](S g, S, S) { return g * c; });
}

template <class S>
Tensor<S> add_const(const Tensor<S>& a, S c) {
  return unary_ew(
      a, [c](S x) { return x + c; }, [](S g, S, S) { return g; });
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  return unary_ew(
      a, [](S x) { return x > S(0) ? x : S(0); }, [](S g, S x, S) { return x > S(0) ? g : S(0); });
}

template <class S>
Tensor<S> exp_elem(const Tensor<S>& a) {
  return unary_ew(
      a, [](S x) { return std::exp(x); }, [](S g, S, S y) { return g * y; });
}

// ---------------------------------------------------------------------------
// matmul family (2-D)
// ---------------------------------------------------------------------------

// Inner kernels: plain triple loops in i-k-j order so the j loop vectorizes.
template <class S>
inline void mm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    S* ci = c + static_cast<size_t>(i) * n;
    const S* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = ai[p];
      const S* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c(m,n) += a(m,k) * b(n,k)^T
template <class S>
inline void mm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + static_cast<size_t>(i) * k;
    S* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* bj = b + static_cast<size_t>(j) * k;
      S acc = S(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c(k,n) += a(m,k)^T * b(m,n)
template <class S>
inline void mm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + static_cast<size_t>(i) * k;
    const S* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = ai[p];
      S* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class S>
inline void require_2d(const Tensor<S>& t, const char* op) {
  if (t.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

// a(m,k) * b(k,n) -> (m,n)
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({m, n}, tracked);
  mm_nn(a.data(), b.data(), out.data(), m, k, n);
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, m, k, n]() mutable {
      const S* go = ov.grad();
      if (av.requires_grad()) mm_nt(go, bv.data(), av.grad(), m, n, k);  // dA = dC * B^T
      if (bv.requires_grad()) mm_tn(av.data(), go, bv.grad(), m, k, n);  // dB = A^T * dC
    });
  }
  return out;
}

// a(m,k) * b(n,k)^T -> (m,n)
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: inner extents disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({m, n}, tracked);
  mm_nt(a.data(), b.data(), out.data(), m, k, n);
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, m, k, n]() mutable {
      const S* go = ov.grad();
      if (av.requires_grad()) mm_nn(go, bv.data(), av.grad(), m, n, k);  // dA = dC * B
      if (bv.requires_grad()) mm_tn(go, av.data(), bv.grad(), m, n, k);  // dB = dC^T * A
    });
  }
  return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  require_2d(a, "transpose2d");
  const int m = a.dim(0), n = a.dim(1);
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>({n, m}, tracked);
  const S* pa = a.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[static_cast<size_t>(j) * m + i] = pa[static_cast<size_t>(i) * n + j];
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, m, n]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(shape));
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>(std::move(shape), tracked);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      for (size_t i = 0; i < av.numel(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
  require_2d(a, "slice_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + shape_str(a.shape()));
  const int w = c1 - c0;
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>({m, w}, tracked);
  const S* pa = a.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    std::copy(pa + static_cast<size_t>(i) * n + c0, pa + static_cast<size_t>(i) * n + c1, po + static_cast<size_t>(i) * w);
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, m, n, c0, w]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<size_t>(i) * n + c0 + j] += go[static_cast<size_t>(i) * w + j];
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row counts disagree, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int m = a.dim(0), na = a.dim(1), nb = b.dim(1);
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({m, na + nb}, tracked);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i) {
    std::copy(pa + static_cast<size_t>(i) * na, pa + static_cast<size_t>(i + 1) * na,
              po + static_cast<size_t>(i) * (na + nb));
    std::copy(pb + static_cast<size_t>(i) * nb, pb + static_cast<size_t>(i + 1) * nb,
              po + static_cast<size_t>(i) * (na + nb) + na);
  }
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, m, na, nb]() mutable {
      const S* go = ov.grad();
      if (av.requires_grad()) {
        S* ga = av.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < na; ++j) ga[static_cast<size_t>(i) * na + j] += go[static_cast<size_t>(i) * (na + nb) + j];
      }
      if (bv.requires_grad()) {
        S* gb = bv.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nb; ++j)
            gb[static_cast<size_t>(i) * nb + j] += go[static_cast<size_t>(i) * (na + nb) + na + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>({1}, tracked);
  S acc = S(0);
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov]() mutable {
      const S g = ov.grad()[0];
      S* ga = av.grad();
      for (size_t i = 0; i < av.numel(); ++i) ga[i] += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  Tensor<S> s = sum_all(a);
  return scale(s, S(1) / static_cast<S>(a.numel()));
}

// (T,C) -> (T,C), subtract the per-column mean over rows; removes any
// time-independent component exactly
template <class S>
Tensor<S> center_rows(const Tensor<S>& a) {
  require_2d(a, "center_rows");
  const int m = a.dim(0), n = a.dim(1);
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>(a.shape(), tracked);
  std::vector<S> mean(static_cast<size_t>(n), S(0));
  const S* pa = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) mean[static_cast<size_t>(j)] += pa[static_cast<size_t>(i) * n + j];
  const S inv = S(1) / static_cast<S>(m);
  for (auto& v : mean) v *= inv;
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      po[static_cast<size_t>(i) * n + j] = pa[static_cast<size_t>(i) * n + j] - mean[static_cast<size_t>(j)];
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, m, n, inv]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      std::vector<S> gmean(static_cast<size_t>(n), S(0));
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gmean[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * n + j];
      for (auto& v : gmean) v *= inv;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(i) * n + j] - gmean[static_cast<size_t>(j)];
    });
  }
  return out;
}

// (L,D) -> (D), mean over rows
template <class S>
Tensor<S> mean_axis0(const Tensor<S>& a) {
  require_2d(a, "mean_axis0");
  const int m = a.dim(0), n = a.dim(1);
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>({n}, tracked);
  const S* pa = a.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j] += pa[static_cast<size_t>(i) * n + j];
  const S inv = S(1) / static_cast<S>(m);
  for (int j = 0; j < n; ++j) po[j] *= inv;
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, m, n, inv]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[static_cast<size_t>(i) * n + j] += go[j] * inv;
    });
  }
  return out;
}

// (N,C,H,W) -> (N,C), global average over the spatial grid
template <class S>
Tensor<S> spatial_mean(const Tensor<S>& a) {
  if (a.ndim() != 4) throw std::invalid_argument("spatial_mean: expected 4-D tensor, got " + shape_str(a.shape()));
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  const size_t hw = static_cast<size_t>(h) * w;
  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>({n, c}, tracked);
  const S* pa = a.data();
  S* po = out.data();
  const S inv = S(1) / static_cast<S>(hw);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const S* p = pa + (static_cast<size_t>(i) * c + j) * hw;
      S acc = S(0);
      for (size_t q = 0; q < hw; ++q) acc += p[q];
      po[static_cast<size_t>(i) * c + j] = acc * inv;
    }
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, n, c, hw, inv]() mutable {
      const S* go = ov.grad();
      S* ga = av.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const S g = go[static_cast<size_t>(i) * c + j] * inv;
          S* p = ga + (static_cast<size_t>(i) * c + j) * hw;
          for (size_t q = 0; q < hw; ++q) p[q] += g;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis`; each slice sums to 1.
template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim())
    throw std::invalid_argument("softmax: axis out of range for " + shape_str(a.shape()));
  const int extent = a.dim(axis);
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= static_cast<size_t>(a.dim(i));
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.dim(i));

  const bool tracked = detail::track(a);
  Tensor<S> out = detail::make_out<S>(a.shape(), tracked);
  const S* pa = a.data();
  S* po = out.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * extent * inner + in;
      S mx = pa[base];
      for (int e = 1; e < extent; ++e) mx = std::max(mx, pa[base + e * inner]);
      S denom = S(0);
      for (int e = 0; e < extent; ++e) {
        const S v = std::exp(pa[base + e * inner] - mx);
        po[base + e * inner] = v;
        denom += v;
      }
      const S inv = S(1) / denom;
      for (int e = 0; e < extent; ++e) po[base + e * inner] *= inv;
    }
  }
  if (tracked) {
    Tensor<S> av = a, ov = out;
    detail::record<S>(out, [av, ov, extent, inner, outer]() mutable {
      const S* y = ov.data();
      const S* gy = ov.grad();
      S* gx = av.grad();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = o * extent * inner + in;
          S dot = S(0);
          for (int e = 0; e < extent; ++e) dot += gy[base + e * inner] * y[base + e * inner];
          for (int e = 0; e < extent; ++e)
            gx[base + e * inner] += y[base + e * inner] * (gy[base + e * inner] - dot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused losses and norms
// ---------------------------------------------------------------------------

// mean((a-b)^2) over all elements
template <class S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mse: shapes disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({1}, tracked);
  const size_t n = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S acc = S(0);
  for (size_t i = 0; i < n; ++i) {
    const S d = pa[i] - pb[i];
    acc += d * d;
  }
  out.data()[0] = acc / static_cast<S>(n);
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, n]() mutable {
      const S g = ov.grad()[0] * S(2) / static_cast<S>(n);
      const S* pa = av.data();
      const S* pb = bv.data();
      if (av.requires_grad()) {
        S* ga = av.grad();
        for (size_t i = 0; i < n; ++i) ga[i] += g * (pa[i] - pb[i]);
      }
      if (bv.requires_grad()) {
        S* gb = bv.grad();
        for (size_t i = 0; i < n; ++i) gb[i] -= g * (pa[i] - pb[i]);
      }
    });
  }
  return out;
}

// Layer normalization over the last axis with affine gamma/beta.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  const int d = x.dim(x.ndim() - 1);
  if (gamma.numel() != static_cast<size_t>(d) || beta.numel() != static_cast<size_t>(d))
    throw std::invalid_argument("layer_norm: affine params must have length " + std::to_string(d));
  const size_t rows = x.numel() / static_cast<size_t>(d);
  const bool tracked = detail::track(x) || detail::track(gamma) || detail::track(beta);
  Tensor<S> out = detail::make_out<S>(x.shape(), tracked);
  // cache x_hat and inv_std for backward
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto istd = std::make_shared<std::vector<S>>(rows);
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S mean = S(0);
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) {
      const S c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*istd)[r] = is;
    for (int j = 0; j < d; ++j) {
      const S xh = (xr[j] - mean) * is;
      (*xhat)[r * d + j] = xh;
      po[r * d + j] = xh * pg[j] + pb[j];
    }
  }
  if (tracked) {
    Tensor<S> xv = x, gv = gamma, bv = beta, ov = out;
    detail::record<S>(out, [xv, gv, bv, ov, xhat, istd, rows, d]() mutable {
      const S* gy = ov.grad();
      const S* pg = gv.data();
      for (size_t r = 0; r < rows; ++r) {
        const S* gyr = gy + r * d;
        const S* xhr = xhat->data() + r * d;
        if (gv.requires_grad()) {
          S* gg = gv.grad();
          for (int j = 0; j < d; ++j) gg[j] += gyr[j] * xhr[j];
        }
        if (bv.requires_grad()) {
          S* gb = bv.grad();
          for (int j = 0; j < d; ++j) gb[j] += gyr[j];
        }
        if (xv.requires_grad()) {
          S* gx = xv.grad() + r * d;
          S sum_dy = S(0), sum_dyxh = S(0);
          for (int j = 0; j < d; ++j) {
            const S dyg = gyr[j] * pg[j];
            sum_dy += dyg;
            sum_dyxh += dyg * xhr[j];
          }
          const S inv_d = S(1) / static_cast<S>(d);
          for (int j = 0; j < d; ++j) {
            const S dyg = gyr[j] * pg[j];
            gx[j] += (*istd)[r] * (dyg - sum_dy * inv_d - xhr[j] * sum_dyxh * inv_d);
          }
        }
      }
    });
  }
  return out;
}

// Group normalization over (N,C,H,W): each sample's channel groups are
// standardized over their (C/g, H, W) slice, then scaled per channel.
template <class S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  if (x.ndim() != 4) throw std::invalid_argument("group_norm: expected 4-D tensor, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (groups < 1 || c % groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(groups) + " groups do not divide " +
                                std::to_string(c) + " channels");
  if (gamma.numel() != static_cast<size_t>(c) || beta.numel() != static_cast<size_t>(c))
    throw std::invalid_argument("group_norm: affine params must have length " + std::to_string(c));
  const size_t hw = static_cast<size_t>(h) * w;
  const size_t gsize = static_cast<size_t>(c / groups) * hw;
  const bool tracked = detail::track(x) || detail::track(gamma) || detail::track(beta);
  Tensor<S> out = detail::make_out<S>(x.shape(), tracked);
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto istd = std::make_shared<std::vector<S>>(static_cast<size_t>(n) * groups);
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (int in = 0; in < n; ++in) {
    for (int g = 0; g < groups; ++g) {
      const size_t base = (static_cast<size_t>(in) * c + static_cast<size_t>(g) * (c / groups)) * hw;
      S mean = S(0);
      for (size_t i = 0; i < gsize; ++i) mean += px[base + i];
      mean /= static_cast<S>(gsize);
      S var = S(0);
      for (size_t i = 0; i < gsize; ++i) {
        const S d = px[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<S>(gsize);
      const S is = S(1) / std::sqrt(var + eps);
      (*istd)[static_cast<size_t>(in) * groups + g] = is;
      for (size_t i = 0; i < gsize; ++i) {
        const int ch = g * (c / groups) + static_cast<int>(i / hw);
        const S xh = (px[base + i] - mean) * is;
        (*xhat)[base + i] = xh;
        po[base + i] = xh * pg[ch] + pb[ch];
      }
    }
  }
  if (tracked) {
    Tensor<S> xv = x, gv = gamma, bv = beta, ov = out;
    detail::record<S>(out, [xv, gv, bv, ov, xhat, istd, n, c, groups, hw, gsize]() mutable {
      const S* gy = ov.grad();
      const S* pg = gv.data();
      for (int in = 0; in < n; ++in) {
        for (int g = 0; g < groups; ++g) {
          const size_t base = (static_cast<size_t>(in) * c + static_cast<size_t>(g) * (c / groups)) * hw;
          if (gv.requires_grad() || bv.requires_grad()) {
            S* gg = gv.requires_grad() ? gv.grad() : nullptr;
            S* gb = bv.requires_grad() ? bv.grad() : nullptr;
            for (size_t i = 0; i < gsize; ++i) {
              const int ch = g * (c / groups) + static_cast<int>(i / hw);
              if (gg) gg[ch] += gy[base + i] * (*xhat)[base + i];
              if (gb) gb[ch] += gy[base + i];
            }
          }
          if (xv.requires_grad()) {
            S sum_dy = S(0), sum_dyxh = S(0);
            for (size_t i = 0; i < gsize; ++i) {
              const int ch = g * (c / groups) + static_cast<int>(i / hw);
              const S dyg = gy[base + i] * pg[ch];
              sum_dy += dyg;
              sum_dyxh += dyg * (*xhat)[base + i];
            }
            const S inv_m = S(1) / static_cast<S>(gsize);
            const S is = (*istd)[static_cast<size_t>(in) * groups + g];
            S* gx = xv.grad();
            for (size_t i = 0; i < gsize; ++i) {
              const int ch = g * (c / groups) + static_cast<int>(i / hw);
              const S dyg = gy[base + i] * pg[ch];
              gx[base + i] += is * (dyg - sum_dy * inv_m - (*xhat)[base + i] * sum_dyxh * inv_m);
            }
          }
        }
      }
    });
  }
  return out;
}

// Mean of -log softmax(logits)[target] over positions whose target != ignore_id.
// logits (N,V); targets length N.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets, int ignore_id = -1) {
  require_2d(logits, "cross_entropy");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: target length " + std::to_string(targets.size()) +
                                " does not match logits rows " + std::to_string(n));
  int active = 0;
  for (int t : targets) {
    if (t != ignore_id) {
      if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy: target id out of range: " + std::to_string(t));
      ++active;
    }
  }
  if (active == 0) throw std::invalid_argument("cross_entropy: no unmasked target positions");
  const bool tracked = detail::track(logits);
  Tensor<S> out = detail::make_out<S>({1}, tracked);
  auto probs = std::make_shared<std::vector<S>>(logits.numel());
  const S* pl = logits.data();
  S acc = S(0);
  for (int i = 0; i < n; ++i) {
    const S* row = pl + static_cast<size_t>(i) * v;
    S* prow = probs->data() + static_cast<size_t>(i) * v;
    S mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (int j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    const S inv = S(1) / denom;
    for (int j = 0; j < v; ++j) prow[j] *= inv;
    if (targets[static_cast<size_t>(i)] != ignore_id)
      acc -= std::log(std::max(prow[targets[static_cast<size_t>(i)]], std::numeric_limits<S>::min()));
  }
  out.data()[0] = acc / static_cast<S>(active);
  if (tracked) {
    Tensor<S> lv = logits, ov = out;
    auto tgt = std::make_shared<std::vector<int>>(targets);
    detail::record<S>(out, [lv, ov, probs, tgt, n, v, active, ignore_id]() mutable {
      const S g = ov.grad()[0] / static_cast<S>(active);
      S* gl = lv.grad();
      for (int i = 0; i < n; ++i) {
        const int t = (*tgt)[static_cast<size_t>(i)];
        if (t == ignore_id) continue;
        const S* prow = probs->data() + static_cast<size_t>(i) * v;
        S* grow = gl + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) grow[j] += g * prow[j];
        grow[t] -= g;
      }
    });
  }
  return out;
}

// KL(q || N(0,I)) averaged over elements, q = N(mu, exp(logvar)).
template <class S>
Tensor<S> kl_std_normal(const Tensor<S>& mu, const Tensor<S>& logvar) {
  if (mu.shape() != logvar.shape())
    throw std::invalid_argument("kl_std_normal: shapes disagree, " + shape_str(mu.shape()) + " vs " +
                                shape_str(logvar.shape()));
  const size_t n = mu.numel();
  const bool tracked = detail::track(mu) || detail::track(logvar);
  Tensor<S> out = detail::make_out<S>({1}, tracked);
  const S* pm = mu.data();
  const S* pl = logvar.data();
  S acc = S(0);
  for (size_t i = 0; i < n; ++i) acc += S(0.5) * (pm[i] * pm[i] + std::exp(pl[i]) - S(1) - pl[i]);
  out.data()[0] = acc / static_cast<S>(n);
  if (tracked) {
    Tensor<S> mv = mu, lv = logvar, ov = out;
    detail::record<S>(out, [mv, lv, ov, n]() mutable {
      const S g = ov.grad()[0] / static_cast<S>(n);
      const S* pm = mv.data();
      const S* pl = lv.data();
      if (mv.requires_grad()) {
        S* gm = mv.grad();
        for (size_t i = 0; i < n; ++i) gm[i] += g * pm[i];
      }
      if (lv.requires_grad()) {
        S* glv = lv.grad();
        for (size_t i = 0; i < n; ++i) glv[i] += g * S(0.5) * (std::exp(pl[i]) - S(1));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_lookup");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw std::invalid_argument("embedding_lookup: id out of range: " + std::to_string(id));
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id list");
  const int n = static_cast<int>(ids.size());
  const bool tracked = detail::track(table);
  Tensor<S> out = detail::make_out<S>({n, d}, tracked);
  const S* pt = table.data();
  S* po = out.data();
  for (int i = 0; i < n; ++i)
    std::copy(pt + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d,
              pt + static_cast<size_t>(ids[static_cast<size_t>(i)] + 1) * d, po + static_cast<size_t>(i) * d);
  if (tracked) {
    Tensor<S> tv = table, ov = out;
    auto idv = std::make_shared<std::vector<int>>(ids);
    detail::record<S>(out, [tv, ov, idv, n, d]() mutable {
      const S* go = ov.grad();
      S* gt = tv.grad();
      for (int i = 0; i < n; ++i) {
        S* row = gt + static_cast<size_t>((*idv)[static_cast<size_t>(i)]) * d;
        const S* grow = go + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] += grow[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// valid ox range for ix = ox*stride + ix0 within [0, extent)
inline void conv_ox_range(int ix0, int stride, int extent, int ow, int* lo, int* hi) {
  int l = 0;
  if (ix0 < 0) l = (-ix0 + stride - 1) / stride;
  int h = ow;
  if (extent - 1 - ix0 < 0)
    h = 0;
  else if (ix0 + (ow - 1) * stride >= extent)
    h = (extent - 1 - ix0) / stride + 1;
  *lo = std::min(l, ow);
  *hi = std::max(h, *lo);
}

// gathers one frame into a (cin*kh*kw) x (oh*ow) column matrix, zero-filled
// where the receptive field leaves the frame
template <class S>
inline void im2col_frame(const S* xframe, int cin, int h, int wd, int kh, int kw, int oh, int ow, int stride,
                         int pad, S* col) {
  const size_t p_total = static_cast<size_t>(oh) * ow;
  size_t r = 0;
  for (int ic = 0; ic < cin; ++ic) {
    const S* xplane = xframe + static_cast<size_t>(ic) * h * wd;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        S* crow = col + r * p_total;
        const int ix0 = -pad + kx;
        int ox_lo, ox_hi;
        conv_ox_range(ix0, stride, wd, ow, &ox_lo, &ox_hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* cdst = crow + static_cast<size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(cdst, cdst + ow, S(0));
            continue;
          }
          const S* xrow = xplane + static_cast<size_t>(iy) * wd;
          std::fill(cdst, cdst + ox_lo, S(0));
          if (stride == 1) {
            std::copy(xrow + ox_lo + ix0, xrow + ox_hi + ix0, cdst + ox_lo);
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) cdst[ox] = xrow[ox * stride + ix0];
          }
          std::fill(cdst + ox_hi, cdst + ow, S(0));
        }
      }
    }
  }
}

// scatter-add of a column-matrix gradient back onto the input frame
template <class S>
inline void col2im_frame(const S* col, int cin, int h, int wd, int kh, int kw, int oh, int ow, int stride, int pad,
                         S* gx_frame) {
  const size_t p_total = static_cast<size_t>(oh) * ow;
  size_t r = 0;
  for (int ic = 0; ic < cin; ++ic) {
    S* gplane = gx_frame + static_cast<size_t>(ic) * h * wd;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const S* crow = col + r * p_total;
        const int ix0 = -pad + kx;
        int ox_lo, ox_hi;
        conv_ox_range(ix0, stride, wd, ow, &ox_lo, &ox_hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const S* csrc = crow + static_cast<size_t>(oy) * ow;
          S* gxrow = gplane + static_cast<size_t>(iy) * wd;
          if (stride == 1) {
            S* base = gxrow + ix0;
            for (int ox = ox_lo; ox < ox_hi; ++ox) base[ox] += csrc[ox];
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) gxrow[ox * stride + ix0] += csrc[ox];
          }
        }
      }
    }
  }
}

// x (N,Cin,H,W), w (Cout,Cin,K,K), bias (Cout) optional, zero padding.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int pad) {
  if (x.ndim() != 4) throw std::invalid_argument("conv2d: input must be 4-D, got " + shape_str(x.shape()));
  if (w.ndim() != 4) throw std::invalid_argument("conv2d: weight must be 4-D, got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                                shape_str(w.shape()));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != static_cast<size_t>(cout))
    throw std::invalid_argument("conv2d: bias length must equal out channels");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: output would be empty for input " + shape_str(x.shape()));
  const bool tracked = detail::track(x) || detail::track(w) || (has_bias && detail::track(bias));
  Tensor<S> out = detail::make_out<S>({n, cout, oh, ow}, tracked);

  const S* px = x.data();
  S* po = out.data();
  const size_t x_n = static_cast<size_t>(cin) * h * wd;
  const size_t o_n = static_cast<size_t>(cout) * oh * ow;
  const int rdim = cin * kh * kw;
  const int pdim = oh * ow;
  std::vector<S> col(static_cast<size_t>(rdim) * pdim);
  // y = w(cout x r) * col(r x p) per frame, via im2col
  for (int in = 0; in < n; ++in) {
    im2col_frame(px + in * x_n, cin, h, wd, kh, kw, oh, ow, stride, pad, col.data());
    S* oframe = po + in * o_n;
    if (has_bias) {
      for (int oc = 0; oc < cout; ++oc)
        std::fill(oframe + static_cast<size_t>(oc) * pdim, oframe + static_cast<size_t>(oc + 1) * pdim,
                  bias.data()[oc]);
    }
    mm_nn(w.data(), col.data(), oframe, cout, rdim, pdim);
  }
  if (tracked) {
    Tensor<S> xv = x, wv_ = w, bv = bias, ov = out;
    detail::record<S>(out, [xv, wv_, bv, ov, n, cin, h, wd, cout, kh, kw, oh, ow, stride, pad, has_bias]() mutable {
      const S* go = ov.grad();
      const size_t x_n = static_cast<size_t>(cin) * h * wd;
      const size_t o_n = static_cast<size_t>(cout) * oh * ow;
      const int rdim = cin * kh * kw;
      const int pdim = oh * ow;
      const bool need_x = xv.requires_grad();
      const bool need_w = wv_.requires_grad();
      if (has_bias && bv.requires_grad()) {
        S* gb = bv.grad();
        for (int in = 0; in < n; ++in)
          for (int oc = 0; oc < cout; ++oc) {
            const S* oplane = go + in * o_n + static_cast<size_t>(oc) * pdim;
            S acc = S(0);
            for (int i = 0; i < pdim; ++i) acc += oplane[i];
            gb[oc] += acc;
          }
      }
      if (!need_x && !need_w) return;
      std::vector<S> col(static_cast<size_t>(rdim) * pdim);
      std::vector<S> dcol(need_x ? col.size() : 0);
      for (int in = 0; in < n; ++in) {
        const S* gframe = go + in * o_n;
        if (need_w) {
          im2col_frame(xv.data() + in * x_n, cin, h, wd, kh, kw, oh, ow, stride, pad, col.data());
          // dW(cout x r) += dY(cout x p) * col(r x p)^T
          mm_nt(gframe, col.data(), wv_.grad(), cout, pdim, rdim);
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), S(0));
          // dcol(r x p) += W(cout x r)^T * dY(cout x p)
          mm_tn(wv_.data(), gframe, dcol.data(), cout, rdim, pdim);
          col2im_frame(dcol.data(), cin, h, wd, kh, kw, oh, ow, stride, pad, xv.grad() + in * x_n);
        }
      }
    });
  }
  return out;
}

// Length-preserving 1-D convolution over time. x (T,C), w (Cout,Cin,K), zero pad.
template <class S>
Tensor<S> conv1d_same(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  require_2d(x, "conv1d_same");
  if (w.ndim() != 3) throw std::invalid_argument("conv1d_same: weight must be 3-D, got " + shape_str(w.shape()));
  const int t = x.dim(0), cin = x.dim(1);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw std::invalid_argument("conv1d_same: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                                shape_str(w.shape()));
  if (k % 2 == 0) throw std::invalid_argument("conv1d_same: kernel size must be odd");
  const int pad = k / 2;
  const bool has_bias = bias.defined();
  const bool tracked = detail::track(x) || detail::track(w) || (has_bias && detail::track(bias));
  Tensor<S> out = detail::make_out<S>({t, cout}, tracked);
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  for (int i = 0; i < t; ++i) {
    S* orow = po + static_cast<size_t>(i) * cout;
    for (int oc = 0; oc < cout; ++oc) {
      S acc = has_bias ? bias.data()[oc] : S(0);
      const S* wk = pw + static_cast<size_t>(oc) * cin * k;
      for (int dk = 0; dk < k; ++dk) {
        const int j = i + dk - pad;
        if (j < 0 || j >= t) continue;
        const S* xrow = px + static_cast<size_t>(j) * cin;
        for (int ic = 0; ic < cin; ++ic) acc += wk[static_cast<size_t>(ic) * k + dk] * xrow[ic];
      }
      orow[oc] = acc;
    }
  }
  if (tracked) {
    Tensor<S> xv = x, wv = w, bv = bias, ov = out;
    detail::record<S>(out, [xv, wv, bv, ov, t, cin, cout, k, pad, has_bias]() mutable {
      const S* go = ov.grad();
      const S* px = xv.data();
      const S* pw = wv.data();
      const bool need_x = xv.requires_grad();
      const bool need_w = wv.requires_grad();
      S* gx = need_x ? xv.grad() : nullptr;
      S* gw = need_w ? wv.grad() : nullptr;
      if (has_bias && bv.requires_grad()) {
        S* gb = bv.grad();
        for (int i = 0; i < t; ++i)
          for (int oc = 0; oc < cout; ++oc) gb[oc] += go[static_cast<size_t>(i) * cout + oc];
      }
      if (!need_x && !need_w) return;
      for (int i = 0; i < t; ++i) {
        const S* grow = go + static_cast<size_t>(i) * cout;
        for (int oc = 0; oc < cout; ++oc) {
          const S g = grow[oc];
          const S* wk = pw + static_cast<size_t>(oc) * cin * k;
          S* gwk = need_w ? gw + static_cast<size_t>(oc) * cin * k : nullptr;
          for (int dk = 0; dk < k; ++dk) {
            const int j = i + dk - pad;
            if (j < 0 || j >= t) continue;
            const S* xrow = px + static_cast<size_t>(j) * cin;
            S* gxrow = need_x ? gx + static_cast<size_t>(j) * cin : nullptr;
            for (int ic = 0; ic < cin; ++ic) {
              if (need_w) gwk[static_cast<size_t>(ic) * k + dk] += g * xrow[ic];
              if (need_x) gxrow[ic] += g * wk[static_cast<size_t>(ic) * k + dk];
            }
          }
        }
      }
    });
  }
  return out;
}

// nearest-neighbor 2x spatial upsampling, (N,C,H,W) -> (N,C,2H,2W)
template <class S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  if (x.ndim() != 4) throw std::invalid_argument("upsample2x: expected 4-D tensor, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool tracked = detail::track(x);
  Tensor<S> out = detail::make_out<S>({n, c, 2 * h, 2 * w}, tracked);
  const S* px = x.data();
  S* po = out.data();
  for (int p = 0; p < n * c; ++p) {
    const S* plane = px + static_cast<size_t>(p) * h * w;
    S* oplane = po + static_cast<size_t>(p) * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const S v = plane[static_cast<size_t>(y) * w + xx];
        S* o0 = oplane + static_cast<size_t>(2 * y) * 2 * w + 2 * xx;
        o0[0] = v;
        o0[1] = v;
        o0[2 * w] = v;
        o0[2 * w + 1] = v;
      }
  }
  if (tracked) {
    Tensor<S> xv = x, ov = out;
    detail::record<S>(out, [xv, ov, n, c, h, w]() mutable {
      const S* go = ov.grad();
      S* gx = xv.grad();
      for (int p = 0; p < n * c; ++p) {
        const S* oplane = go + static_cast<size_t>(p) * 4 * h * w;
        S* plane = gx + static_cast<size_t>(p) * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const S* o0 = oplane + static_cast<size_t>(2 * y) * 2 * w + 2 * xx;
            plane[static_cast<size_t>(y) * w + xx] += o0[0] + o0[1] + o0[2 * w] + o0[2 * w + 1];
          }
      }
    });
  }
  return out;
}

// (N,C,H,W) + per-channel bias (C)
template <class S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.ndim() != 4) throw std::invalid_argument("add_channel_bias: expected 4-D tensor, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (b.numel() != static_cast<size_t>(c))
    throw std::invalid_argument("add_channel_bias: bias length " + std::to_string(b.numel()) +
                                " != channels " + std::to_string(c));
  const size_t hw = static_cast<size_t>(h) * w;
  const bool tracked = detail::track(x) || detail::track(b);
  Tensor<S> out = detail::make_out<S>(x.shape(), tracked);
  const S* px = x.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const S bias = pb[ic];
      const S* p = px + (static_cast<size_t>(in) * c + ic) * hw;
      S* o = po + (static_cast<size_t>(in) * c + ic) * hw;
      for (size_t q = 0; q < hw; ++q) o[q] = p[q] + bias;
    }
  if (tracked) {
    Tensor<S> xv = x, bv = b, ov = out;
    detail::record<S>(out, [xv, bv, ov, n, c, hw]() mutable {
      const S* go = ov.grad();
      if (xv.requires_grad()) {
        S* gx = xv.grad();
        for (size_t i = 0; i < xv.numel(); ++i) gx[i] += go[i];
      }
      if (bv.requires_grad()) {
        S* gb = bv.grad();
        for (int in = 0; in < n; ++in)
          for (int ic = 0; ic < c; ++ic) {
            const S* o = go + (static_cast<size_t>(in) * c + ic) * hw;
            S acc = S(0);
            for (size_t q = 0; q < hw; ++q) acc += o[q];
            gb[ic] += acc;
          }
      }
    });
  }
  return out;
}

// (N,C,H,W) scaled per channel by g (C)
template <class S>
Tensor<S> mul_channel_gain(const Tensor<S>& x, const Tensor<S>& g) {
  if (x.ndim() != 4) throw std::invalid_argument("mul_channel_gain: expected 4-D tensor, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (g.numel() != static_cast<size_t>(c))
    throw std::invalid_argument("mul_channel_gain: gain length " + std::to_string(g.numel()) + " != channels " +
                                std::to_string(c));
  const size_t hw = static_cast<size_t>(h) * w;
  const bool tracked = detail::track(x) || detail::track(g);
  Tensor<S> out = detail::make_out<S>(x.shape(), tracked);
  const S* px = x.data();
  const S* pg = g.data();
  S* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const S gain = pg[ic];
      const S* p = px + (static_cast<size_t>(in) * c + ic) * hw;
      S* o = po + (static_cast<size_t>(in) * c + ic) * hw;
      for (size_t q = 0; q < hw; ++q) o[q] = p[q] * gain;
    }
  if (tracked) {
    Tensor<S> xv = x, gv = g, ov = out;
    detail::record<S>(out, [xv, gv, ov, n, c, hw]() mutable {
      const S* go = ov.grad();
      const S* px = xv.data();
      const S* pg = gv.data();
      if (xv.requires_grad()) {
        S* gx = xv.grad();
        for (int in = 0; in < n; ++in)
          for (int ic = 0; ic < c; ++ic) {
            const S gain = pg[ic];
            const S* o = go + (static_cast<size_t>(in) * c + ic) * hw;
            S* p = gx + (static_cast<size_t>(in) * c + ic) * hw;
            for (size_t q = 0; q < hw; ++q) p[q] += o[q] * gain;
          }
      }
      if (gv.requires_grad()) {
        S* gg = gv.grad();
        for (int in = 0; in < n; ++in)
          for (int ic = 0; ic < c; ++ic) {
            const S* o = go + (static_cast<size_t>(in) * c + ic) * hw;
            const S* p = px + (static_cast<size_t>(in) * c + ic) * hw;
            S acc = S(0);
            for (size_t q = 0; q < hw; ++q) acc += o[q] * p[q];
            gg[ic] += acc;
          }
      }
    });
  }
  return out;
}

// (N,Ca,H,W) ++ (N,Cb,H,W) -> (N,Ca+Cb,H,W)
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const size_t hw = static_cast<size_t>(h) * w;
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({n, ca + cb, h, w}, tracked);
  S* po = out.data();
  for (int in = 0; in < n; ++in) {
    std::copy(a.data() + in * ca * hw, a.data() + (in + 1) * ca * hw, po + static_cast<size_t>(in) * (ca + cb) * hw);
    std::copy(b.data() + in * cb * hw, b.data() + (in + 1) * cb * hw,
              po + static_cast<size_t>(in) * (ca + cb) * hw + ca * hw);
  }
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, n, ca, cb, hw]() mutable {
      const S* go = ov.grad();
      for (int in = 0; in < n; ++in) {
        const S* base = go + static_cast<size_t>(in) * (ca + cb) * hw;
        if (av.requires_grad()) {
          S* ga = av.grad() + static_cast<size_t>(in) * ca * hw;
          for (size_t i = 0; i < static_cast<size_t>(ca) * hw; ++i) ga[i] += base[i];
        }
        if (bv.requires_grad()) {
          S* gb = bv.grad() + static_cast<size_t>(in) * cb * hw;
          for (size_t i = 0; i < static_cast<size_t>(cb) * hw; ++i) gb[i] += base[ca * hw + i];
        }
      }
    });
  }
  return out;
}

// (1,C,H,W) -> (H*W, C) token view and back; used at attention bottlenecks.
template <class S>
Tensor<S> chw_to_tokens(const Tensor<S>& x) {
  if (x.ndim() != 4 || x.dim(0) != 1)
    throw std::invalid_argument("chw_to_tokens: expected (1,C,H,W), got " + shape_str(x.shape()));
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  const bool tracked = detail::track(x);
  Tensor<S> out = detail::make_out<S>({hw, c}, tracked);
  const S* px = x.data();
  S* po = out.data();
  for (int ic = 0; ic < c; ++ic)
    for (int q = 0; q < hw; ++q) po[static_cast<size_t>(q) * c + ic] = px[static_cast<size_t>(ic) * hw + q];
  if (tracked) {
    Tensor<S> xv = x, ov = out;
    detail::record<S>(out, [xv, ov, c, hw]() mutable {
      const S* go = ov.grad();
      S* gx = xv.grad();
      for (int ic = 0; ic < c; ++ic)
        for (int q = 0; q < hw; ++q) gx[static_cast<size_t>(ic) * hw + q] += go[static_cast<size_t>(q) * c + ic];
    });
  }
  return out;
}

template <class S>
Tensor<S> tokens_to_chw(const Tensor<S>& x, int c, int h, int w) {
  require_2d(x, "tokens_to_chw");
  if (x.dim(0) != h * w || x.dim(1) != c)
    throw std::invalid_argument("tokens_to_chw: token grid " + shape_str(x.shape()) + " does not match (" +
                                std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")");
  const int hw = h * w;
  const bool tracked = detail::track(x);
  Tensor<S> out = detail::make_out<S>({1, c, h, w}, tracked);
  const S* px = x.data();
  S* po = out.data();
  for (int ic = 0; ic < c; ++ic)
    for (int q = 0; q < hw; ++q) po[static_cast<size_t>(ic) * hw + q] = px[static_cast<size_t>(q) * c + ic];
  if (tracked) {
    Tensor<S> xv = x, ov = out;
    detail::record<S>(out, [xv, ov, c, hw]() mutable {
      const S* go = ov.grad();
      S* gx = xv.grad();
      for (int ic = 0; ic < c; ++ic)
        for (int q = 0; q < hw; ++q) gx[static_cast<size_t>(q) * c + ic] += go[static_cast<size_t>(ic) * hw + q];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Central finite differences against the analytic gradient of a scalar map.
// Returns max over all elements of |a - n| / max(|a|, |n|, 1e-8).
template <class S>
double grad_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs, double eps = 1e-5) {
  std::vector<std::vector<S>> analytic;
  {
    TapeScope<S> scope;
    for (auto& in : inputs) in.zero_grad();
    Tensor<S> loss = f();
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: map must be scalar-valued");
    scope.backward(loss);
    for (auto& in : inputs) analytic.push_back(in.grad_values());
  }
  double max_rel = 0.0;
  NoTapeScope<S> no_tape;
  for (size_t t = 0; t < inputs.size(); ++t) {
    Tensor<S>& x = inputs[t];
    for (size_t i = 0; i < x.numel(); ++i) {
      const S orig = x.data()[i];
      x.data()[i] = orig + static_cast<S>(eps);
      const double fp = static_cast<double>(f().item());
      x.data()[i] = orig - static_cast<S>(eps);
      const double fm = static_cast<double>(f().item());
      x.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[t][i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace unicue
