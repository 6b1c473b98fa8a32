#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
class Tape;

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction; the backward sweep walks them once in
// reverse. A tape is consumed by its backward pass and cannot run twice.
template <class Scalar>
class Tape {
 public:
  long record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
    return static_cast<long>(nodes_.size()) - 1;
  }

  void run_backward(long from_node) {
    if (consumed_) throw std::runtime_error("backward: tape already consumed");
    consumed_ = true;
    for (long i = from_node; i >= 0; --i) nodes_[static_cast<std::size_t>(i)]();
    nodes_.clear();
  }

  void mark_consumed() {
    if (consumed_) throw std::runtime_error("backward: tape already consumed");
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }
  long size() const { return static_cast<long>(nodes_.size()); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

template <class Scalar>
inline Tape<Scalar>*& active_tape() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}

// Activates a tape for the current thread; ops record onto it whenever a
// differentiable input is involved. Without an active scope all ops run
// forward-only.
template <class Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : prev_(active_tape<Scalar>()) { active_tape<Scalar>() = &tape; }
  ~TapeScope() { active_tape<Scalar>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* prev_;
};

template <class Scalar>
struct TensorStorage {
  Mat<Scalar> value;
  Mat<Scalar> grad;  // 0x0 until first needed
  bool requires_grad = false;
  bool trainable = true;  // optimizer-visible; cleared by freezing
  std::string name;       // canonical parameter name, empty for activations
  Tape<Scalar>* tape = nullptr;
  long node = -1;

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Mat<Scalar>::Zero(value.rows(), value.cols());
  }
  void clear_grad() {
    if (grad.size() > 0) grad.setZero();
  }
  bool has_grad() const { return grad.rows() == value.rows() && grad.cols() == value.cols(); }
};

// Value-like handle onto shared storage. Copies alias the same storage, which
// is exactly what parameter tying needs: every view reads and accumulates
// into one buffer. The logical n-d shape lives in the handle; storage is a
// 2-d row-major matrix with cols == shape.back().
template <class Scalar>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, Mat<Scalar> value, bool requires_grad = false)
      : shape_(std::move(shape)), s_(std::make_shared<TensorStorage<Scalar>>()) {
    check_layout(shape_, value);
    s_->value = std::move(value);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto [r, c] = rows_cols(shape);
    return Tensor(std::move(shape), Mat<Scalar>::Zero(r, c), requires_grad);
  }

  static Tensor full(Shape shape, Scalar fill, bool requires_grad = false) {
    auto [r, c] = rows_cols(shape);
    return Tensor(std::move(shape), Mat<Scalar>::Constant(r, c, fill), requires_grad);
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  static Tensor from_vector(Shape shape, const std::vector<Scalar>& data, bool requires_grad = false) {
    auto [r, c] = rows_cols(shape);
    if (static_cast<long>(data.size()) != r * c)
      throw std::invalid_argument("Tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Mat<Scalar> m(r, c);
    for (long i = 0; i < r; ++i)
      for (long j = 0; j < c; ++j) m(i, j) = data[static_cast<std::size_t>(i * c + j)];
    return Tensor(std::move(shape), std::move(m), requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return shape_; }
  long ndim() const { return static_cast<long>(shape_.size()); }
  long numel() const { return shape_numel(shape_); }
  long rows() const { return s_->value.rows(); }
  long cols() const { return s_->value.cols(); }

  Mat<Scalar>& value() { return s_->value; }
  const Mat<Scalar>& value() const { return s_->value; }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    s_->requires_grad = b;
    return *this;
  }

  bool trainable() const { return s_->trainable; }
  void set_trainable(bool b) { s_->trainable = b; }

  const std::string& name() const { return s_->name; }
  Tensor& set_name(std::string n) {
    s_->name = std::move(n);
    return *this;
  }

  Mat<Scalar>& grad() {
    if (!s_->has_grad()) throw std::runtime_error("Tensor: gradient not populated");
    return s_->grad;
  }
  const Mat<Scalar>& grad() const {
    if (!s_->has_grad()) throw std::runtime_error("Tensor: gradient not populated");
    return s_->grad;
  }
  bool has_grad() const { return s_->has_grad(); }
  void ensure_grad() { s_->ensure_grad(); }
  void clear_grad() { s_->clear_grad(); }

  Scalar item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: shape " + shape_str(shape_) + " is not scalar");
    return s_->value(0, 0);
  }

  // Tracked tensors participate in autodiff: either a leaf that requires
  // grad or the output of a recorded op.
  bool tracked() const { return s_->requires_grad || s_->node >= 0; }

  void bind_node(Tape<Scalar>* tape, long node) {
    s_->tape = tape;
    s_->node = node;
  }
  Tape<Scalar>* tape() const { return s_->tape; }
  long node() const { return s_->node; }

  std::shared_ptr<TensorStorage<Scalar>> storage() const { return s_; }

  // View with a different logical shape over the same storage; the column
  // count (last dimension) must be preserved.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel() || shape.back() != shape_.back())
      throw_shape_mismatch("reshape", shape_, shape);
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

 private:
  static std::pair<long, long> rows_cols(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    for (long d : shape)
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in " + shape_str(shape));
    const long c = shape.back();
    return {shape_numel(shape) / c, c};
  }

  static void check_layout(const Shape& shape, const Mat<Scalar>& m) {
    auto [r, c] = rows_cols(shape);
    if (m.rows() != r || m.cols() != c)
      throw std::invalid_argument("Tensor: matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                  " does not match shape " + shape_str(shape));
  }

  Shape shape_;
  std::shared_ptr<TensorStorage<Scalar>> s_;
};

namespace detail {

template <class Scalar>
inline Tape<Scalar>* recording_tape(std::initializer_list<const Tensor<Scalar>*> inputs) {
  Tape<Scalar>* t = active_tape<Scalar>();
  if (!t || t->consumed()) return nullptr;
  for (const auto* in : inputs)
    if (in->tracked()) return t;
  return nullptr;
}

template <class Scalar>
inline void prepare_backward(Tensor<Scalar>& out, std::initializer_list<Tensor<Scalar>*> tracked_inputs) {
  out.ensure_grad();
  for (auto* in : tracked_inputs) in->ensure_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("add", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape(), a.value() + b.value());
  if (auto* t = detail::recording_tape<Scalar>({&a, &b})) {
    Tensor<Scalar> ta = a, tb = b, to = out;
    detail::prepare_backward(to, {&ta, &tb});
    const bool ga = a.tracked(), gb = b.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad() += to.grad();
      if (gb) tb.grad() += to.grad();
    }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("sub", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape(), a.value() - b.value());
  if (auto* t = detail::recording_tape<Scalar>({&a, &b})) {
    Tensor<Scalar> ta = a, tb = b, to = out;
    detail::prepare_backward(to, {&ta, &tb});
    const bool ga = a.tracked(), gb = b.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad() += to.grad();
      if (gb) tb.grad() -= to.grad();
    }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("mul", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape(), a.value().cwiseProduct(b.value()));
  if (auto* t = detail::recording_tape<Scalar>({&a, &b})) {
    Tensor<Scalar> ta = a, tb = b, to = out;
    detail::prepare_backward(to, {&ta, &tb});
    const bool ga = a.tracked(), gb = b.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad() += to.grad().cwiseProduct(tb.value());
      if (gb) tb.grad() += to.grad().cwiseProduct(ta.value());
    }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  Tensor<Scalar> out(a.shape(), a.value() * c);
  if (auto* t = detail::recording_tape<Scalar>({&a})) {
    Tensor<Scalar> ta = a, to = out;
    detail::prepare_backward(to, {&ta});
    out.bind_node(t, t->record([=]() mutable { ta.grad() += c * to.grad(); }));
  }
  return out;
}

// a + m for a non-differentiable constant matrix (attention mask biases,
// positional encodings).
template <class Scalar>
Tensor<Scalar> add_constant(const Tensor<Scalar>& a, const Mat<Scalar>& m) {
  if (a.value().rows() != m.rows() || a.value().cols() != m.cols())
    throw std::invalid_argument("add_constant: constant " + std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()) + " does not match " + shape_str(a.shape()));
  Tensor<Scalar> out(a.shape(), a.value() + m);
  if (auto* t = detail::recording_tape<Scalar>({&a})) {
    Tensor<Scalar> ta = a, to = out;
    detail::prepare_backward(to, {&ta});
    out.bind_node(t, t->record([=]() mutable { ta.grad() += to.grad(); }));
  }
  return out;
}

// Broadcast a length-d row vector over every row of a (bias add over the
// last dimension; the only broadcasting the core supports).
template <class Scalar>
Tensor<Scalar> add_rowvec(const Tensor<Scalar>& a, const Tensor<Scalar>& v) {
  if (v.ndim() != 1 || v.cols() != a.cols()) throw_shape_mismatch("add_rowvec", a.shape(), v.shape());
  Mat<Scalar> m = a.value();
  m.rowwise() += v.value().row(0);
  Tensor<Scalar> out(a.shape(), std::move(m));
  if (auto* t = detail::recording_tape<Scalar>({&a, &v})) {
    Tensor<Scalar> ta = a, tv = v, to = out;
    detail::prepare_backward(to, {&ta, &tv});
    const bool ga = a.tracked(), gv = v.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad() += to.grad();
      if (gv) tv.grad().row(0) += to.grad().colwise().sum();
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// a: (..., k), b: (k, n) -> (..., n)
template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (b.ndim() != 2 || a.cols() != b.shape()[0]) throw_shape_mismatch("matmul", a.shape(), b.shape());
  Shape os = a.shape();
  os.back() = b.shape()[1];
  Tensor<Scalar> out(std::move(os), a.value() * b.value());
  if (auto* t = detail::recording_tape<Scalar>({&a, &b})) {
    Tensor<Scalar> ta = a, tb = b, to = out;
    detail::prepare_backward(to, {&ta, &tb});
    const bool ga = a.tracked(), gb = b.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad().noalias() += to.grad() * tb.value().transpose();
      if (gb) tb.grad().noalias() += ta.value().transpose() * to.grad();
    }));
  }
  return out;
}

// a: (m, k), b: (n, k) -> a b^T : (m, n). Used for attention scores and the
// tied output projection.
template <class Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) throw_shape_mismatch("matmul_nt", a.shape(), b.shape());
  Tensor<Scalar> out({a.shape()[0], b.shape()[0]}, a.value() * b.value().transpose());
  if (auto* t = detail::recording_tape<Scalar>({&a, &b})) {
    Tensor<Scalar> ta = a, tb = b, to = out;
    detail::prepare_backward(to, {&ta, &tb});
    const bool ga = a.tracked(), gb = b.tracked();
    out.bind_node(t, t->record([=]() mutable {
      if (ga) ta.grad().noalias() += to.grad() * tb.value();
      if (gb) tb.grad().noalias() += to.grad().transpose() * ta.value();
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().cwiseMax(Scalar(0)));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=]() mutable {
      tx.grad().array() += to.grad().array() * (tx.value().array() > Scalar(0)).template cast<Scalar>();
    }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(0.7071067811865475244);
  Mat<Scalar> v = x.value().unaryExpr([&](Scalar u) {
    return Scalar(0.5) * u * (Scalar(1) + std::erf(u * inv_sqrt2));
  });
  Tensor<Scalar> out(x.shape(), std::move(v));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=]() mutable {
      const Scalar inv_sqrt_2pi = Scalar(0.3989422804014326779);
      Mat<Scalar> d = tx.value().unaryExpr([&](Scalar u) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(u * inv_sqrt2));
        const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * u * u);
        return cdf + u * pdf;
      });
      tx.grad() += to.grad().cwiseProduct(d);
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

// Softmax along the last axis (the only axis the 2-d storage supports);
// numerically stabilized by row-max subtraction.
template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, long axis = -1) {
  if (axis != -1 && axis != x.ndim() - 1)
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " not supported for shape " +
                                shape_str(x.shape()) + "; only the last axis is");
  Mat<Scalar> y = x.value();
  for (long r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const Scalar mx = row.maxCoeff();
    // scalar std::exp so that -inf (masked) entries come out exactly zero
    for (long c = 0; c < y.cols(); ++c) row(c) = std::exp(row(c) - mx);
    row /= row.sum();
  }
  Tensor<Scalar> out(x.shape(), std::move(y));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=]() mutable {
      for (long r = 0; r < to.value().rows(); ++r) {
        const auto y_r = to.value().row(r).array();
        const auto g_r = to.grad().row(r).array();
        const Scalar dot = (g_r * y_r).sum();
        tx.grad().row(r).array() += y_r * (g_r - dot);
      }
    }));
  }
  return out;
}

// Row-wise layer normalization over the last dimension, biased variance.
template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-6)) {
  if (gain.ndim() != 1 || gain.cols() != x.cols()) throw_shape_mismatch("layer_norm", x.shape(), gain.shape());
  if (bias.ndim() != 1 || bias.cols() != x.cols()) throw_shape_mismatch("layer_norm", x.shape(), bias.shape());
  const long d = x.cols();
  Mat<Scalar> xhat(x.rows(), d);
  Mat<Scalar> inv_std(x.rows(), 1);
  for (long r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r).array();
    const Scalar mu = row.mean();
    const Scalar var = (row - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    xhat.row(r) = ((row - mu) * is).matrix();
  }
  Mat<Scalar> y = xhat;
  y.array().rowwise() *= gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  Tensor<Scalar> out(x.shape(), std::move(y));
  if (auto* t = detail::recording_tape<Scalar>({&x, &gain, &bias})) {
    Tensor<Scalar> tx = x, tg = gain, tb = bias, to = out;
    detail::prepare_backward(to, {&tx, &tg, &tb});
    const bool gx = x.tracked(), gg = gain.tracked(), gb = bias.tracked();
    out.bind_node(t, t->record([=]() mutable {
      const auto& g = to.grad();
      if (gg) tg.grad().row(0) += g.cwiseProduct(xhat).colwise().sum();
      if (gb) tb.grad().row(0) += g.colwise().sum();
      if (gx) {
        for (long r = 0; r < g.rows(); ++r) {
          const auto gy = (g.row(r).array() * tg.value().row(0).array()).eval();
          const auto xh = xhat.row(r).array();
          const Scalar m1 = gy.mean();
          const Scalar m2 = (gy * xh).mean();
          tx.grad().row(r).array() += inv_std(r, 0) * (gy - m1 - xh * m2);
        }
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-d, got " + shape_str(table.shape()));
  const long v = table.shape()[0];
  Mat<Scalar> out_m(static_cast<long>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v)
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                              std::to_string(v));
    out_m.row(static_cast<long>(i)) = table.value().row(ids[i]);
  }
  Tensor<Scalar> out({static_cast<long>(ids.size()), table.cols()}, std::move(out_m));
  if (auto* t = detail::recording_tape<Scalar>({&table})) {
    Tensor<Scalar> tt = table, to = out;
    detail::prepare_backward(to, {&tt});
    out.bind_node(t, t->record([=, ids = ids]() mutable {
      for (std::size_t i = 0; i < ids.size(); ++i)
        tt.grad().row(ids[i]) += to.grad().row(static_cast<long>(i));
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling). Rate 0 and eval mode are the identity — the
// input handle is returned unchanged.
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, Scalar rate, RngStream& rng, bool training) {
  if (rate < Scalar(0) || rate >= Scalar(1))
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == Scalar(0)) return x;
  const Scalar keep_scale = Scalar(1) / (Scalar(1) - rate);
  Mat<Scalar> mask(x.rows(), x.cols());
  for (long r = 0; r < mask.rows(); ++r)
    for (long c = 0; c < mask.cols(); ++c)
      mask(r, c) = rng.uniform() < static_cast<double>(rate) ? Scalar(0) : keep_scale;
  Tensor<Scalar> out(x.shape(), x.value().cwiseProduct(mask));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=, mask = std::move(mask)]() mutable {
      tx.grad() += to.grad().cwiseProduct(mask);
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().sum());
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=]() mutable { tx.grad().array() += to.grad()(0, 0); }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

// Per-sentence mean over non-pad time steps. x: (b, t, d); pad flags are
// row-major (b*t). Returns (b, d).
template <class Scalar>
Tensor<Scalar> masked_mean_rows(const Tensor<Scalar>& x, const std::vector<char>& is_pad) {
  if (x.ndim() != 3) throw std::invalid_argument("masked_mean_rows: expected (b,t,d), got " + shape_str(x.shape()));
  const long b = x.shape()[0], tlen = x.shape()[1], d = x.shape()[2];
  if (static_cast<long>(is_pad.size()) != b * tlen)
    throw std::invalid_argument("masked_mean_rows: pad mask size mismatch");
  Mat<Scalar> out_m = Mat<Scalar>::Zero(b, d);
  std::vector<long> counts(static_cast<std::size_t>(b), 0);
  for (long s = 0; s < b; ++s) {
    for (long i = 0; i < tlen; ++i) {
      if (is_pad[static_cast<std::size_t>(s * tlen + i)]) continue;
      out_m.row(s) += x.value().row(s * tlen + i);
      ++counts[static_cast<std::size_t>(s)];
    }
    if (counts[static_cast<std::size_t>(s)] == 0)
      throw std::runtime_error("masked_mean_rows: sentence " + std::to_string(s) + " is fully padded");
    out_m.row(s) /= static_cast<Scalar>(counts[static_cast<std::size_t>(s)]);
  }
  Tensor<Scalar> out({b, d}, std::move(out_m));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=, counts = std::move(counts), is_pad = is_pad]() mutable {
      for (long s = 0; s < b; ++s) {
        const Scalar inv = Scalar(1) / static_cast<Scalar>(counts[static_cast<std::size_t>(s)]);
        for (long i = 0; i < tlen; ++i)
          if (!is_pad[static_cast<std::size_t>(s * tlen + i)])
            tx.grad().row(s * tlen + i) += inv * to.grad().row(s);
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block slicing / concatenation (storage-level rows x cols)
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> block(const Tensor<Scalar>& x, long r0, long nr, long c0, long nc) {
  if (r0 < 0 || nr <= 0 || c0 < 0 || nc <= 0 || r0 + nr > x.rows() || c0 + nc > x.cols())
    throw std::out_of_range("block: window [" + std::to_string(r0) + "+" + std::to_string(nr) + ", " +
                            std::to_string(c0) + "+" + std::to_string(nc) + ") outside " + shape_str(x.shape()));
  Tensor<Scalar> out({nr, nc}, x.value().block(r0, c0, nr, nc));
  if (auto* t = detail::recording_tape<Scalar>({&x})) {
    Tensor<Scalar> tx = x, to = out;
    detail::prepare_backward(to, {&tx});
    out.bind_node(t, t->record([=]() mutable { tx.grad().block(r0, c0, nr, nc) += to.grad(); }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const long r = parts.front().rows();
  long ctot = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw_shape_mismatch("concat_cols", parts.front().shape(), p.shape());
    ctot += p.cols();
  }
  Mat<Scalar> m(r, ctot);
  long off = 0;
  for (const auto& p : parts) {
    m.block(0, off, r, p.cols()) = p.value();
    off += p.cols();
  }
  Tensor<Scalar> out({r, ctot}, std::move(m));
  bool any_tracked = false;
  for (const auto& p : parts) any_tracked |= p.tracked();
  Tape<Scalar>* t = active_tape<Scalar>();
  if (t && !t->consumed() && any_tracked) {
    Tensor<Scalar> to = out;
    to.ensure_grad();
    std::vector<Tensor<Scalar>> ins = parts;
    for (auto& p : ins)
      if (p.tracked()) p.ensure_grad();
    out.bind_node(t, t->record([=]() mutable {
      long o = 0;
      for (auto& p : ins) {
        if (p.tracked()) p.grad() += to.grad().block(0, o, r, p.cols());
        o += p.cols();
      }
    }));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const long c = parts.front().cols();
  long rtot = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw_shape_mismatch("concat_rows", parts.front().shape(), p.shape());
    rtot += p.rows();
  }
  Mat<Scalar> m(rtot, c);
  long off = 0;
  for (const auto& p : parts) {
    m.block(off, 0, p.rows(), c) = p.value();
    off += p.rows();
  }
  Tensor<Scalar> out({rtot, c}, std::move(m));
  bool any_tracked = false;
  for (const auto& p : parts) any_tracked |= p.tracked();
  Tape<Scalar>* t = active_tape<Scalar>();
  if (t && !t->consumed() && any_tracked) {
    Tensor<Scalar> to = out;
    to.ensure_grad();
    std::vector<Tensor<Scalar>> ins = parts;
    for (auto& p : ins)
      if (p.tracked()) p.ensure_grad();
    out.bind_node(t, t->record([=]() mutable {
      long o = 0;
      for (auto& p : ins) {
        if (p.tracked()) p.grad() += to.grad().block(o, 0, p.rows(), c);
        o += p.rows();
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross entropy (fused log-softmax + NLL), token mean over non-pad positions
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& targets, int pad_id,
                             Scalar label_smoothing = Scalar(0)) {
  const long n = logits.rows(), v = logits.cols();
  if (static_cast<long>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(n) + " logit rows");
  if (label_smoothing < Scalar(0) || label_smoothing >= Scalar(1))
    throw std::invalid_argument("cross_entropy: bad label smoothing");
  Mat<Scalar> probs(n, v);
  long active = 0;
  Scalar total = 0;
  for (long r = 0; r < n; ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt == pad_id) {
      probs.row(r).setZero();
      continue;
    }
    if (tgt < 0 || tgt >= v)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(tgt) + " outside vocabulary of size " +
                              std::to_string(v));
    const auto row = logits.value().row(r).array();
    const Scalar mx = row.maxCoeff();
    const auto ex = (row - mx).exp().eval();
    const Scalar z = ex.sum();
    probs.row(r) = (ex / z).matrix();
    const Scalar log_z = std::log(z) + mx;
    const Scalar nll = log_z - logits.value()(r, tgt);
    if (label_smoothing == Scalar(0)) {
      total += nll;
    } else {
      // target distribution (1-a)*onehot + a/V
      const Scalar mean_nll = log_z - row.mean();
      total += (Scalar(1) - label_smoothing) * nll + label_smoothing * mean_nll;
    }
    ++active;
  }
  if (active == 0) throw std::runtime_error("cross_entropy: every target position is padding (empty loss)");
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / static_cast<Scalar>(active));
  if (auto* t = detail::recording_tape<Scalar>({&logits})) {
    Tensor<Scalar> tl = logits, to = out;
    detail::prepare_backward(to, {&tl});
    const Scalar inv_active = Scalar(1) / static_cast<Scalar>(active);
    out.bind_node(t, t->record([=, probs = std::move(probs), targets = targets]() mutable {
      const Scalar g = to.grad()(0, 0) * inv_active;
      for (long r = 0; r < n; ++r) {
        const int tgt = targets[static_cast<std::size_t>(r)];
        if (tgt == pad_id) continue;
        tl.grad().row(r) += g * probs.row(r);
        if (label_smoothing == Scalar(0)) {
          tl.grad()(r, tgt) -= g;
        } else {
          tl.grad().row(r).array() -= g * label_smoothing / static_cast<Scalar>(v);
          tl.grad()(r, tgt) -= g * (Scalar(1) - label_smoothing);
        }
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class Scalar>
void backward(Tensor<Scalar>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  Tape<Scalar>* t = loss.tape() ? loss.tape() : active_tape<Scalar>();
  if (!t) throw std::runtime_error("backward: loss is not on a live tape");
  loss.ensure_grad();
  loss.grad()(0, 0) += Scalar(1);
  if (loss.node() >= 0) {
    t->run_backward(loss.node());
  } else if (loss.requires_grad()) {
    t->mark_consumed();
  } else {
    throw std::runtime_error("backward: loss does not depend on any differentiable input");
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (double precision only)
// ---------------------------------------------------------------------------

template <class Scalar>
double grad_check(const std::function<Tensor<Scalar>(std::vector<Tensor<Scalar>>&)>& f,
                  std::vector<Tensor<Scalar>>& inputs, double eps = 1e-5) {
  static_assert(std::is_same_v<Scalar, double>, "grad_check is only meaningful in double precision");
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.ensure_grad();
    in.clear_grad();
  }
  {
    Tape<Scalar> tape;
    TapeScope<Scalar> scope(tape);
    Tensor<Scalar> out = f(inputs);
    if (out.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    backward(out);
  }
  double max_rel = 0.0;
  for (auto& in : inputs) {
    for (long r = 0; r < in.rows(); ++r) {
      for (long c = 0; c < in.cols(); ++c) {
        const double saved = in.value()(r, c);
        in.value()(r, c) = saved + eps;
        const double fp = f(inputs).item();
        in.value()(r, c) = saved - eps;
        const double fm = f(inputs).item();
        in.value()(r, c) = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double analytic = in.grad()(r, c);
        const double rel = std::abs(analytic - numeric) /
                           std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        if (rel > max_rel) max_rel = rel;
      }
    }
  }
  return max_rel;
}

}  // namespace mnmt
