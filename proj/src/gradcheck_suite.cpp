#include "mnmt/gradcheck_suite.hpp"

#include <functional>
#include <sstream>

#include "mnmt/tensor.hpp"
#include "mnmt/transformer.hpp"

namespace mnmt {

namespace {

using T = Tensor<double>;

T randn(Shape shape, RngStream& rng, double scale = 1.0) {
  auto t = T::zeros(std::move(shape));
  for (long r = 0; r < t.rows(); ++r)
    for (long c = 0; c < t.cols(); ++c) t.value()(r, c) = rng.normal() * scale;
  return t;
}

// Realistic parameter draws; gains near one and biases near zero keep the
// scalar losses well conditioned.
void randomize_layer(LayerParams<double>& p, RngStream& rng) {
  p.visit([&](const std::string& name, T& t) {
    const bool is_gain = name.find("gain") != std::string::npos;
    const bool is_bias = name.find(".b") != std::string::npos || name.find("bias") != std::string::npos;
    for (long r = 0; r < t.rows(); ++r)
      for (long c = 0; c < t.cols(); ++c) {
        if (is_gain)
          t.value()(r, c) = 1.0 + 0.15 * rng.normal();
        else if (is_bias)
          t.value()(r, c) = 0.05 * rng.normal();
        else
          t.value()(r, c) = 0.5 * rng.normal();
      }
  });
}

using CaseFn = std::function<double(long, std::uint64_t, double)>;

double check(const std::function<T(std::vector<T>&)>& f, std::vector<T>& inputs, double eps) {
  std::function<T(std::vector<T>&)> fw = f;
  return grad_check(fw, inputs, eps);
}

}  // namespace

GradCheckResult run_gradient_checks(long cases_per_op, double eps, std::uint64_t seed) {
  std::vector<std::pair<std::string, CaseFn>> ops;

  ops.emplace_back("matmul", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 1, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(3), k = 1 + rng.uniform_int(3), n = 1 + rng.uniform_int(3);
    std::vector<T> in = {randn({m, k}, rng), randn({k, n}, rng)};
    return check([](std::vector<T>& v) { return sum_all(matmul(v[0], v[1])); }, in, e);
  });
  ops.emplace_back("matmul_nt", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 2, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(3), k = 1 + rng.uniform_int(3), n = 1 + rng.uniform_int(3);
    std::vector<T> in = {randn({m, k}, rng), randn({n, k}, rng)};
    return check([](std::vector<T>& v) { return mean_all(matmul_nt(v[0], v[1])); }, in, e);
  });
  ops.emplace_back("add/sub/mul/scale", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 3, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    std::vector<T> in = {randn({m, n}, rng), randn({m, n}, rng)};
    return check(
        [](std::vector<T>& v) { return sum_all(mul(scale(add(v[0], v[1]), 0.5), sub(v[0], v[1]))); }, in, e);
  });
  ops.emplace_back("add_rowvec", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 4, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(5);
    std::vector<T> in = {randn({m, n}, rng), randn({n}, rng)};
    return check([](std::vector<T>& v) { return sum_all(gelu(add_rowvec(v[0], v[1]))); }, in, e);
  });
  ops.emplace_back("relu", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 5, static_cast<std::uint64_t>(i));
    std::vector<T> in = {randn({2 + rng.uniform_int(3), 3}, rng)};
    return check([](std::vector<T>& v) { return sum_all(relu(v[0])); }, in, e);
  });
  ops.emplace_back("gelu", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 6, static_cast<std::uint64_t>(i));
    std::vector<T> in = {randn({2 + rng.uniform_int(3), 3}, rng)};
    return check([](std::vector<T>& v) { return sum_all(gelu(v[0])); }, in, e);
  });
  ops.emplace_back("softmax", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 7, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(3), n = 2 + rng.uniform_int(5);
    std::vector<T> in = {randn({m, n}, rng), randn({m, n}, rng)};
    return check([](std::vector<T>& v) { return sum_all(mul(softmax(v[0]), v[1])); }, in, e);
  });
  ops.emplace_back("layer_norm", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 8, static_cast<std::uint64_t>(i));
    const long m = 1 + rng.uniform_int(3), d = 3 + rng.uniform_int(5);
    std::vector<T> in = {randn({m, d}, rng), randn({d}, rng), randn({d}, rng), randn({m, d}, rng)};
    return check([](std::vector<T>& v) { return sum_all(mul(layer_norm(v[0], v[1], v[2]), v[3])); }, in, e);
  });
  ops.emplace_back("embedding", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 9, static_cast<std::uint64_t>(i));
    const long v = 3 + rng.uniform_int(4), d = 2 + rng.uniform_int(3);
    std::vector<int> ids;
    for (int k = 0; k < 5; ++k) ids.push_back(static_cast<int>(rng.uniform_int(v)));
    std::vector<T> in = {randn({v, d}, rng)};
    return check([ids](std::vector<T>& v2) { return mean_all(mul(embedding(v2[0], ids), embedding(v2[0], ids))); },
                 in, e);
  });
  ops.emplace_back("dropout", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 10, static_cast<std::uint64_t>(i));
    std::vector<T> in = {randn({3, 4}, rng)};
    const std::uint64_t mask_key = static_cast<std::uint64_t>(i);
    return check(
        [mask_key](std::vector<T>& v) {
          auto stream = RngStream::keyed(123, mask_key);
          return sum_all(dropout(v[0], 0.3, stream, true));
        },
        in, e);
  });
  ops.emplace_back("cross_entropy", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 11, static_cast<std::uint64_t>(i));
    const long n = 2 + rng.uniform_int(3), v = 3 + rng.uniform_int(4);
    std::vector<int> tgt;
    for (long k = 0; k < n; ++k) tgt.push_back(static_cast<int>(rng.uniform_int(v)));
    tgt.push_back(-7);  // one pad position, excluded
    const double smoothing = (i % 2 == 0) ? 0.0 : 0.1;
    std::vector<T> in = {randn({n + 1, v}, rng)};
    return check([tgt, smoothing](std::vector<T>& v2) { return cross_entropy(v2[0], tgt, -7, smoothing); }, in, e);
  });
  ops.emplace_back("masked_mean_rows", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 12, static_cast<std::uint64_t>(i));
    std::vector<char> pad = {0, 0, 1, 0, 0, 1};
    std::vector<T> in = {randn({6, 3}, rng)};
    return check(
        [pad](std::vector<T>& v) {
          auto pooled = masked_mean_rows(v[0].reshaped({2, 3, 3}), pad);
          return sum_all(mul(pooled, pooled));
        },
        in, e);
  });
  ops.emplace_back("block/concat", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 13, static_cast<std::uint64_t>(i));
    std::vector<T> in = {randn({4, 4}, rng)};
    return check(
        [](std::vector<T>& v) {
          std::vector<T> rows = {block(v[0], 0, 2, 0, 4), block(v[0], 2, 2, 0, 4)};
          auto cat = concat_rows(rows);
          std::vector<T> cols = {block(cat, 0, 4, 0, 2), block(cat, 0, 4, 2, 2)};
          return mean_all(mul(concat_cols(cols), v[0]));
        },
        in, e);
  });
  ops.emplace_back("attention_context", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 16, static_cast<std::uint64_t>(i));
    const int heads = 2;
    const long b = 1 + rng.uniform_int(2), t_q = 1 + rng.uniform_int(3), t_k = 1 + rng.uniform_int(3);
    std::vector<Mask> masks;
    for (long k = 0; k < b; ++k) {
      Mask m = Mask::full(t_q, t_k);
      if (t_k > 1 && rng.bernoulli(0.5)) m.set(rng.uniform_int(t_q), t_k - 1, false);
      masks.push_back(m);
    }
    std::vector<T> in = {randn({b * t_q, 4}, rng), randn({b * t_k, 4}, rng), randn({b * t_k, 4}, rng),
                         randn({b * t_q, 4}, rng)};
    const bool with_dropout = i % 3 == 0;
    const std::uint64_t mask_key = static_cast<std::uint64_t>(i);
    return check(
        [&, with_dropout, mask_key](std::vector<T>& v) {
          ForwardCtx<double> ctx;
          RngStream stream = RngStream::keyed(321, mask_key);
          if (with_dropout) {
            ctx.training = true;
            ctx.dropout_rate = 0.2;
            ctx.rng = &stream;
          }
          auto c = attention_context(v[0], v[1], v[2], masks, b, t_q, t_k, heads, ctx);
          return sum_all(mul(c, v[3]));
        },
        in, e);
  });
  ops.emplace_back("encoder_layer", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 14, static_cast<std::uint64_t>(i));
    Dims dims{4, 6, 2};
    auto p = make_layer_params<double>(dims, false, rng);
    randomize_layer(p, rng);
    std::vector<T> in = {randn({2, 4}, rng)};
    p.visit([&](const std::string&, T& t) { in.push_back(t); });
    ForwardCtx<double> ctx;
    const bool pre = i % 2 == 1;
    return check(
        [&p, &ctx, pre](std::vector<T>& v) {
          return scale(mean_all(encoder_layer(v[0], {Mask::full(2, 2)}, p,
                                              pre ? Activation::Relu : Activation::Gelu,
                                              pre ? NormPlacement::Pre : NormPlacement::Post, ctx)),
                       0.05);
        },
        in, e);
  });
  ops.emplace_back("decoder_layer(cross)", [](long i, std::uint64_t s, double e) {
    auto rng = RngStream::keyed(s, 15, static_cast<std::uint64_t>(i));
    Dims dims{4, 6, 2};
    auto p = make_layer_params<double>(dims, true, rng);
    randomize_layer(p, rng);
    std::vector<T> in = {randn({2, 4}, rng)};
    p.visit([&](const std::string&, T& t) { in.push_back(t); });
    in.push_back(randn({3, 4}, rng));  // memory
    ForwardCtx<double> ctx;
    std::vector<Mask> self_masks = {Mask::causal(2)};
    std::vector<Mask> mem_masks = {Mask::full(2, 3)};
    return check(
        [&](std::vector<T>& v) {
          return scale(mean_all(decoder_layer<double>(v[0], self_masks, v.back(), mem_masks, p, Activation::Gelu,
                                                      NormPlacement::Post, ctx)),
                       0.05);
        },
        in, e);
  });

  GradCheckResult result;
  for (const auto& [name, fn] : ops) {
    GradCheckCase c;
    c.op = name;
    c.cases = cases_per_op;
    for (long i = 0; i < cases_per_op; ++i) c.max_rel_error = std::max(c.max_rel_error, fn(i, seed, eps));
    result.max_rel_error = std::max(result.max_rel_error, c.max_rel_error);
    result.per_op.push_back(std::move(c));
  }
  return result;
}

std::string GradCheckResult::to_text() const {
  std::ostringstream os;
  for (const auto& c : per_op)
    os << "  " << c.op << ": max relative error " << c.max_rel_error << " over " << c.cases << " cases\n";
  os << "overall max relative error: " << max_rel_error << "\n";
  return os.str();
}

}  // namespace mnmt
