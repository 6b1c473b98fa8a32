#pragma once

#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/tensor.hpp"

namespace mnmt {

enum class Activation { Gelu, Relu };
enum class NormPlacement { Post, Pre };

struct Dims {
  int d_model = 64;
  int d_ff = 128;
  int n_heads = 4;
};

// Boolean attendability matrix, query positions x key positions.
class Mask {
 public:
  Mask(long n_q, long n_k, bool attendable)
      : tq_(n_q), tk_(n_k), ok_(static_cast<std::size_t>(n_q * n_k), attendable ? 1 : 0) {}

  static Mask full(long n_q, long n_k) { return Mask(n_q, n_k, true); }

  static Mask causal(long t) {
    Mask m(t, t, false);
    for (long q = 0; q < t; ++q)
      for (long k = 0; k <= q; ++k) m.set(q, k, true);
    return m;
  }

  // key_is_pad runs over key positions; pad keys become unattendable.
  Mask with_key_padding(const std::vector<char>& key_is_pad) const {
    if (static_cast<long>(key_is_pad.size()) != tk_)
      throw std::invalid_argument("Mask: key pad vector length " + std::to_string(key_is_pad.size()) +
                                  " does not match " + std::to_string(tk_) + " keys");
    Mask m = *this;
    for (long q = 0; q < tq_; ++q)
      for (long k = 0; k < tk_; ++k)
        if (key_is_pad[static_cast<std::size_t>(k)]) m.set(q, k, false);
    return m;
  }

  bool ok(long q, long k) const { return ok_[static_cast<std::size_t>(q * tk_ + k)] != 0; }
  void set(long q, long k, bool v) { ok_[static_cast<std::size_t>(q * tk_ + k)] = v ? 1 : 0; }
  long n_queries() const { return tq_; }
  long n_keys() const { return tk_; }

  bool row_fully_masked(long q) const {
    for (long k = 0; k < tk_; ++k)
      if (ok(q, k)) return false;
    return true;
  }

  // Additive pre-softmax bias: 0 where attendable, -inf where not.
  template <class Scalar>
  Mat<Scalar> bias() const {
    Mat<Scalar> b = Mat<Scalar>::Zero(tq_, tk_);
    const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
    for (long q = 0; q < tq_; ++q)
      for (long k = 0; k < tk_; ++k)
        if (!ok(q, k)) b(q, k) = neg_inf;
    return b;
  }

 private:
  long tq_, tk_;
  std::vector<char> ok_;
};

template <class Scalar>
struct AttentionParams {
  Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class Scalar>
struct NormParams {
  Tensor<Scalar> gain, bias;
};

template <class Scalar>
struct FfnParams {
  Tensor<Scalar> w1, b1, w2, b2;
};

template <class Scalar>
struct LayerParams {
  int n_heads = 1;
  AttentionParams<Scalar> self_attn;
  std::optional<AttentionParams<Scalar>> cross_attn;
  FfnParams<Scalar> ffn;
  NormParams<Scalar> norm_self, norm_ffn;
  std::optional<NormParams<Scalar>> norm_cross;

  bool has_cross() const { return cross_attn.has_value(); }

  void visit(const std::function<void(const std::string&, Tensor<Scalar>&)>& f) {
    auto attn = [&](const std::string& prefix, AttentionParams<Scalar>& a) {
      f(prefix + ".wq", a.wq);
      f(prefix + ".bq", a.bq);
      f(prefix + ".wk", a.wk);
      f(prefix + ".bk", a.bk);
      f(prefix + ".wv", a.wv);
      f(prefix + ".bv", a.bv);
      f(prefix + ".wo", a.wo);
      f(prefix + ".bo", a.bo);
    };
    auto norm = [&](const std::string& prefix, NormParams<Scalar>& n) {
      f(prefix + ".gain", n.gain);
      f(prefix + ".bias", n.bias);
    };
    attn("self_attn", self_attn);
    norm("norm_self", norm_self);
    if (cross_attn) {
      attn("cross_attn", *cross_attn);
      norm("norm_cross", *norm_cross);
    }
    f("ffn.w1", ffn.w1);
    f("ffn.b1", ffn.b1);
    f("ffn.w2", ffn.w2);
    f("ffn.b2", ffn.b2);
    norm("norm_ffn", norm_ffn);
  }

  long parameter_count() {
    long n = 0;
    visit([&](const std::string&, Tensor<Scalar>& t) { n += t.numel(); });
    return n;
  }
};

// Closed-form parameter counts; tests cross-check them against enumeration.
inline long attention_param_count(int d) { return 4L * (static_cast<long>(d) * d + d); }
inline long norm_param_count(int d) { return 2L * d; }
inline long ffn_param_count(int d, int d_ff) { return 2L * d * d_ff + d_ff + d; }
inline long layer_param_count(int d, int d_ff, bool has_cross) {
  long n = attention_param_count(d) + ffn_param_count(d, d_ff) + 2 * norm_param_count(d);
  if (has_cross) n += attention_param_count(d) + norm_param_count(d);
  return n;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <class Scalar>
Tensor<Scalar> xavier_uniform(long fan_in, long fan_out, RngStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  auto t = Tensor<Scalar>::zeros({fan_in, fan_out}, true);
  for (long r = 0; r < fan_in; ++r)
    for (long c = 0; c < fan_out; ++c) t.value()(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
  return t;
}

template <class Scalar>
AttentionParams<Scalar> make_attention_params(int d, RngStream& rng) {
  AttentionParams<Scalar> p;
  p.wq = xavier_uniform<Scalar>(d, d, rng);
  p.bq = Tensor<Scalar>::zeros({d}, true);
  p.wk = xavier_uniform<Scalar>(d, d, rng);
  p.bk = Tensor<Scalar>::zeros({d}, true);
  p.wv = xavier_uniform<Scalar>(d, d, rng);
  p.bv = Tensor<Scalar>::zeros({d}, true);
  p.wo = xavier_uniform<Scalar>(d, d, rng);
  p.bo = Tensor<Scalar>::zeros({d}, true);
  return p;
}

template <class Scalar>
NormParams<Scalar> make_norm_params(int d) {
  return {Tensor<Scalar>::full({d}, Scalar(1), true), Tensor<Scalar>::zeros({d}, true)};
}

template <class Scalar>
LayerParams<Scalar> make_layer_params(const Dims& dims, bool has_cross, RngStream& rng) {
  if (dims.d_model % dims.n_heads != 0)
    throw std::invalid_argument("layer: d_model " + std::to_string(dims.d_model) + " not divisible by " +
                                std::to_string(dims.n_heads) + " heads");
  LayerParams<Scalar> p;
  p.n_heads = dims.n_heads;
  p.self_attn = make_attention_params<Scalar>(dims.d_model, rng);
  p.norm_self = make_norm_params<Scalar>(dims.d_model);
  if (has_cross) {
    p.cross_attn = make_attention_params<Scalar>(dims.d_model, rng);
    p.norm_cross = make_norm_params<Scalar>(dims.d_model);
  }
  p.ffn.w1 = xavier_uniform<Scalar>(dims.d_model, dims.d_ff, rng);
  p.ffn.b1 = Tensor<Scalar>::zeros({dims.d_ff}, true);
  p.ffn.w2 = xavier_uniform<Scalar>(dims.d_ff, dims.d_model, rng);
  p.ffn.b2 = Tensor<Scalar>::zeros({dims.d_model}, true);
  p.norm_ffn = make_norm_params<Scalar>(dims.d_model);
  return p;
}

// ---------------------------------------------------------------------------
// Forward-pass context: training mode plus the dropout stream
// ---------------------------------------------------------------------------

template <class Scalar>
struct ForwardCtx {
  bool training = false;
  Scalar dropout_rate = 0;
  RngStream* rng = nullptr;

  Tensor<Scalar> apply_dropout(const Tensor<Scalar>& x) const {
    if (!training || dropout_rate == Scalar(0)) return x;
    if (!rng) throw std::runtime_error("forward: dropout requested without an rng stream");
    return dropout(x, dropout_rate, *rng, true);
  }
};

// ---------------------------------------------------------------------------
// Positions
// ---------------------------------------------------------------------------

// Fixed sin/cos encoding, interleaved, frequency 10000^(-2i/d).
template <class Scalar>
Mat<Scalar> sinusoidal_positions(long len, int d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoidal_positions: d must be even, got " + std::to_string(d));
  Mat<Scalar> pe(len, d);
  for (long pos = 0; pos < len; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
      pe(pos, 2 * i) = static_cast<Scalar>(std::sin(pos * freq));
      pe(pos, 2 * i + 1) = static_cast<Scalar>(std::cos(pos * freq));
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<long, long> batch_and_time(const Shape& s, const char* what) {
  if (s.size() == 2) return {1, s[0]};
  if (s.size() == 3) return {s[0], s[1]};
  throw std::invalid_argument(std::string(what) + ": expected (t,d) or (b,t,d), got " + shape_str(s));
}

}  // namespace detail

// Fused attention core: per sentence and head, scaled scores + mask bias +
// softmax (+ optional weight dropout) + context, recorded as one tape node.
// q: (b*tq, d) projected queries; k, v: (b*tk, d) projected keys/values.
template <class Scalar>
Tensor<Scalar> attention_context(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                 const std::vector<Mask>& masks, long batch, long t_q, long t_k, int n_heads,
                                 const ForwardCtx<Scalar>& ctx) {
  const long d = q.cols();
  const long dh = d / n_heads;
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const bool use_dropout = ctx.training && ctx.dropout_rate > Scalar(0);
  if (use_dropout && !ctx.rng) throw std::runtime_error("attention: dropout requested without an rng stream");
  const Scalar keep_scale = use_dropout ? Scalar(1) / (Scalar(1) - ctx.dropout_rate) : Scalar(1);

  std::vector<Mat<Scalar>> weights;  // post-dropout attention weights, per (sentence, head)
  std::vector<Mat<Scalar>> soft;     // pre-dropout softmax outputs
  weights.reserve(static_cast<std::size_t>(batch * n_heads));
  if (use_dropout) soft.reserve(static_cast<std::size_t>(batch * n_heads));

  Mat<Scalar> out_m(batch * t_q, d);
  for (long s = 0; s < batch; ++s) {
    const Mat<Scalar> bias = masks[static_cast<std::size_t>(s)].template bias<Scalar>();
    for (int h = 0; h < n_heads; ++h) {
      const auto q_sh = q.value().block(s * t_q, h * dh, t_q, dh);
      const auto k_sh = k.value().block(s * t_k, h * dh, t_k, dh);
      const auto v_sh = v.value().block(s * t_k, h * dh, t_k, dh);
      Mat<Scalar> w = q_sh * k_sh.transpose() * inv_sqrt_dh + bias;
      for (long r = 0; r < t_q; ++r) {
        auto row = w.row(r);
        const Scalar mx = row.maxCoeff();
        for (long c = 0; c < t_k; ++c) row(c) = std::exp(row(c) - mx);
        row /= row.sum();
      }
      if (use_dropout) {
        soft.push_back(w);
        for (long r = 0; r < t_q; ++r)
          for (long c = 0; c < t_k; ++c)
            w(r, c) = ctx.rng->uniform() < static_cast<double>(ctx.dropout_rate) ? Scalar(0) : w(r, c) * keep_scale;
      }
      out_m.block(s * t_q, h * dh, t_q, dh).noalias() = w * v_sh;
      weights.push_back(std::move(w));
    }
  }
  Tensor<Scalar> out({batch * t_q, d}, std::move(out_m));
  if (auto* t = detail::recording_tape<Scalar>({&q, &k, &v})) {
    Tensor<Scalar> tq_ = q, tk_ = k, tv_ = v, to = out;
    detail::prepare_backward(to, {&tq_, &tk_, &tv_});
    out.bind_node(t, t->record([=, weights = std::move(weights), soft = std::move(soft)]() mutable {
      for (long s = 0; s < batch; ++s) {
        for (int h = 0; h < n_heads; ++h) {
          const std::size_t idx = static_cast<std::size_t>(s * n_heads + h);
          const auto g = to.grad().block(s * t_q, h * dh, t_q, dh);
          const auto q_sh = tq_.value().block(s * t_q, h * dh, t_q, dh);
          const auto k_sh = tk_.value().block(s * t_k, h * dh, t_k, dh);
          const auto v_sh = tv_.value().block(s * t_k, h * dh, t_k, dh);
          const Mat<Scalar>& w = weights[idx];
          tv_.grad().block(s * t_k, h * dh, t_k, dh).noalias() += w.transpose() * g;
          Mat<Scalar> dw = g * v_sh.transpose();
          if (use_dropout) {
            const Mat<Scalar>& y = soft[idx];
            // dropout mask recovered from the stored pre/post weights
            for (long r = 0; r < t_q; ++r)
              for (long c = 0; c < t_k; ++c) dw(r, c) = w(r, c) == Scalar(0) ? Scalar(0) : dw(r, c) * keep_scale;
            for (long r = 0; r < t_q; ++r) {
              const auto y_r = y.row(r).array();
              const auto g_r = dw.row(r).array();
              const Scalar dot = (g_r * y_r).sum();
              dw.row(r).array() = y_r * (g_r - dot);
            }
          } else {
            for (long r = 0; r < t_q; ++r) {
              const auto y_r = w.row(r).array();
              const auto g_r = dw.row(r).array();
              const Scalar dot = (g_r * y_r).sum();
              dw.row(r).array() = y_r * (g_r - dot);
            }
          }
          tq_.grad().block(s * t_q, h * dh, t_q, dh).noalias() += dw * k_sh * inv_sqrt_dh;
          tk_.grad().block(s * t_k, h * dh, t_k, dh).noalias() += dw.transpose() * q_sh * inv_sqrt_dh;
        }
      }
    }));
  }
  return out;
}

// Scaled dot-product multi-head attention. q, k, v are (t,d) or (b,t,d); k
// and v must agree; one mask per sentence. A query row with no attendable
// key is rejected: it indicates a batching bug upstream.
template <class Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q_in, const Tensor<Scalar>& k_in,
                                    const Tensor<Scalar>& v_in, const std::vector<Mask>& masks,
                                    const AttentionParams<Scalar>& p, int n_heads,
                                    const ForwardCtx<Scalar>& ctx) {
  const auto [bq, tq] = detail::batch_and_time(q_in.shape(), "attention");
  const auto [bk, tk] = detail::batch_and_time(k_in.shape(), "attention");
  if (k_in.shape() != v_in.shape()) throw_shape_mismatch("attention k/v", k_in.shape(), v_in.shape());
  if (bq != bk) throw_shape_mismatch("attention q/k batch", q_in.shape(), k_in.shape());
  const long d = q_in.cols();
  if (k_in.cols() != d) throw_shape_mismatch("attention q/k depth", q_in.shape(), k_in.shape());
  if (d % n_heads != 0)
    throw std::invalid_argument("attention: d=" + std::to_string(d) + " not divisible by heads=" +
                                std::to_string(n_heads));
  if (static_cast<long>(masks.size()) != bq)
    throw std::invalid_argument("attention: " + std::to_string(masks.size()) + " masks for batch of " +
                                std::to_string(bq));
  for (long s = 0; s < bq; ++s) {
    const Mask& m = masks[static_cast<std::size_t>(s)];
    if (m.n_queries() != tq || m.n_keys() != tk)
      throw std::invalid_argument("attention: mask " + std::to_string(m.n_queries()) + "x" +
                                  std::to_string(m.n_keys()) + " does not match " + std::to_string(tq) + "x" +
                                  std::to_string(tk));
    for (long qi = 0; qi < tq; ++qi)
      if (m.row_fully_masked(qi))
        throw std::runtime_error("attention: query position " + std::to_string(qi) + " in sentence " +
                                 std::to_string(s) + " has no attendable key");
  }

  auto q_proj = add_rowvec(matmul(q_in.ndim() == 3 ? q_in.reshaped({bq * tq, d}) : q_in, p.wq), p.bq);
  auto k_proj = add_rowvec(matmul(k_in.ndim() == 3 ? k_in.reshaped({bk * tk, d}) : k_in, p.wk), p.bk);
  auto v_proj = add_rowvec(matmul(v_in.ndim() == 3 ? v_in.reshaped({bk * tk, d}) : v_in, p.wv), p.bv);

  auto context = attention_context(q_proj, k_proj, v_proj, masks, bq, tq, tk, n_heads, ctx);
  auto out = add_rowvec(matmul(context, p.wo), p.bo);
  return q_in.ndim() == 3 ? out.reshaped({bq, tq, d}) : out.reshaped({tq, d});
}

// Single-sentence convenience overload.
template <class Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    const Mask& mask, const AttentionParams<Scalar>& p, int n_heads,
                                    const ForwardCtx<Scalar>& ctx = {}) {
  return multi_head_attention(q, k, v, std::vector<Mask>{mask}, p, n_heads, ctx);
}

// ---------------------------------------------------------------------------
// Encoder / decoder layers
// ---------------------------------------------------------------------------

namespace detail {

template <class Scalar>
Tensor<Scalar> ffn_forward(const Tensor<Scalar>& x, const FfnParams<Scalar>& p, Activation act) {
  auto h = add_rowvec(matmul(x, p.w1), p.b1);
  auto a = act == Activation::Gelu ? gelu(h) : relu(h);
  return add_rowvec(matmul(a, p.w2), p.b2);
}

// Residual + norm wiring around one sublayer.
template <class Scalar>
Tensor<Scalar> sublayer(const Tensor<Scalar>& x, const NormParams<Scalar>& norm, NormPlacement place,
                        const ForwardCtx<Scalar>& ctx,
                        const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& body) {
  if (place == NormPlacement::Post) {
    return layer_norm(add(x, ctx.apply_dropout(body(x))), norm.gain, norm.bias);
  }
  return add(x, ctx.apply_dropout(body(layer_norm(x, norm.gain, norm.bias))));
}

}  // namespace detail

template <class Scalar>
Tensor<Scalar> encoder_layer(const Tensor<Scalar>& x, const std::vector<Mask>& self_masks,
                             const LayerParams<Scalar>& p, Activation act, NormPlacement place,
                             const ForwardCtx<Scalar>& ctx) {
  auto y = detail::sublayer<Scalar>(x, p.norm_self, place, ctx, [&](const Tensor<Scalar>& in) {
    return multi_head_attention(in, in, in, self_masks, p.self_attn, p.n_heads, ctx);
  });
  return detail::sublayer<Scalar>(y, p.norm_ffn, place, ctx, [&](const Tensor<Scalar>& in) {
    return detail::ffn_forward(in, p.ffn, act);
  });
}

// Decoder layer: causal self-attention, then cross-attention over the
// encoder memory when the layer carries cross parameters, then the FFN.
// Memory is required exactly when cross parameters are present; a memory
// passed to a non-cross layer is ignored (and flagged, since it usually
// means the caller built the wrong layer stack).
template <class Scalar>
Tensor<Scalar> decoder_layer(const Tensor<Scalar>& x, const std::vector<Mask>& self_masks,
                             const std::optional<Tensor<Scalar>>& memory, const std::vector<Mask>& memory_masks,
                             const LayerParams<Scalar>& p, Activation act, NormPlacement place,
                             const ForwardCtx<Scalar>& ctx) {
  if (p.has_cross() && !memory.has_value())
    throw std::invalid_argument("decoder_layer: cross-attention layer called without encoder memory");
  if (!p.has_cross() && memory.has_value())
    std::cerr << "[mnmt] decoder_layer: memory supplied to a layer without cross-attention; ignored\n";

  auto y = detail::sublayer<Scalar>(x, p.norm_self, place, ctx, [&](const Tensor<Scalar>& in) {
    return multi_head_attention(in, in, in, self_masks, p.self_attn, p.n_heads, ctx);
  });
  if (p.has_cross()) {
    y = detail::sublayer<Scalar>(y, *p.norm_cross, place, ctx, [&](const Tensor<Scalar>& in) {
      return multi_head_attention(in, *memory, *memory, memory_masks, *p.cross_attn, p.n_heads, ctx);
    });
  }
  return detail::sublayer<Scalar>(y, p.norm_ffn, place, ctx, [&](const Tensor<Scalar>& in) {
    return detail::ffn_forward(in, p.ffn, act);
  });
}

}  // namespace mnmt
