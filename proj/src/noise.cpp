#include "mnmt/noise.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mnmt {

void NoiseConfig::validate() const {
  if (p_delete < 0.0 || p_delete > 1.0)
    throw std::invalid_argument("noise: p_delete " + std::to_string(p_delete) + " outside [0,1]");
  if (p_mask < 0.0 || p_mask > 1.0)
    throw std::invalid_argument("noise: p_mask " + std::to_string(p_mask) + " outside [0,1]");
  if (shuffle_window < 1)
    throw std::invalid_argument("noise: shuffle_window must be >= 1, got " + std::to_string(shuffle_window));
  if (span < 1) throw std::invalid_argument("noise: span must be >= 1, got " + std::to_string(span));
}

std::vector<int> noise(const std::vector<int>& tokens, const NoiseConfig& cfg, RngStream& rng,
                       const std::vector<char>* word_continues) {
  cfg.validate();
  if (tokens.empty()) return {};
  const long n = static_cast<long>(tokens.size());
  if (word_continues && static_cast<long>(word_continues->size()) != n)
    throw std::invalid_argument("noise: word grouping flags do not match token count");

  // unit grouping: each group is one word (or one token)
  std::vector<long> group_start;
  for (long i = 0; i < n; ++i) {
    const bool continues =
        cfg.unit == NoiseUnit::Word && word_continues && (*word_continues)[static_cast<std::size_t>(i)] != 0;
    if (i == 0 || !continues) group_start.push_back(i);
  }
  const long n_groups = static_cast<long>(group_start.size());
  auto group_end = [&](long g) { return g + 1 < n_groups ? group_start[static_cast<std::size_t>(g + 1)] : n; };

  // spans are runs of `span` consecutive groups
  const long n_spans = (n_groups + cfg.span - 1) / cfg.span;
  auto span_token_range = [&](long s) {
    const long g0 = s * cfg.span;
    const long g1 = std::min(g0 + static_cast<long>(cfg.span), n_groups);
    return std::pair<long, long>(group_start[static_cast<std::size_t>(g0)], group_end(g1 - 1));
  };

  // 1) deletion, one draw per span
  std::vector<char> keep(static_cast<std::size_t>(n), 1);
  for (long s = 0; s < n_spans; ++s) {
    if (rng.uniform() < cfg.p_delete) {
      auto [t0, t1] = span_token_range(s);
      for (long i = t0; i < t1; ++i) keep[static_cast<std::size_t>(i)] = 0;
    }
  }
  if (std::none_of(keep.begin(), keep.end(), [](char k) { return k != 0; })) {
    keep[static_cast<std::size_t>(rng.uniform_int(n))] = 1;
  }

  // 2) masking of survivors, one draw per span that still has tokens
  std::vector<int> kept;
  kept.reserve(static_cast<std::size_t>(n));
  for (long s = 0; s < n_spans; ++s) {
    auto [t0, t1] = span_token_range(s);
    bool any = false;
    for (long i = t0; i < t1; ++i) any |= keep[static_cast<std::size_t>(i)] != 0;
    if (!any) continue;
    const bool mask_span = rng.uniform() < cfg.p_mask;
    for (long i = t0; i < t1; ++i)
      if (keep[static_cast<std::size_t>(i)])
        kept.push_back(mask_span ? cfg.mask_id : tokens[static_cast<std::size_t>(i)]);
  }

  // 3) local shuffle: stable sort by i + U[0, window), displacement < window
  const long m = static_cast<long>(kept.size());
  std::vector<double> key(static_cast<std::size_t>(m));
  for (long i = 0; i < m; ++i)
    key[static_cast<std::size_t>(i)] = static_cast<double>(i) + rng.uniform() * cfg.shuffle_window;
  std::vector<long> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0L);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    return key[static_cast<std::size_t>(a)] < key[static_cast<std::size_t>(b)];
  });
  std::vector<int> out(static_cast<std::size_t>(m));
  for (long i = 0; i < m; ++i)
    out[static_cast<std::size_t>(i)] = kept[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  return out;
}

}  // namespace mnmt
