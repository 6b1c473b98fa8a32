#pragma once

#include <vector>

#include "mnmt/rng.hpp"

namespace mnmt {

enum class NoiseUnit { Token, Word };

// Corruption settings for the denoising objective. Decisions are taken per
// span of `span` units; a unit is a token, or a whole word when grouping
// flags are supplied with unit == Word.
struct NoiseConfig {
  double p_delete = 0.2;
  double p_mask = 0.1;
  int shuffle_window = 3;
  NoiseUnit unit = NoiseUnit::Token;
  int span = 1;
  int mask_id = 3;

  void validate() const;
};

// Applies, in order: span deletion (keep prob 1-p_delete, at least one token
// always survives), masking of surviving spans (prob p_mask), and a local
// shuffle that sorts position i by key i + U[0, window). The caller supplies
// the counter-based stream for this sentence, so the result is a pure
// function of (tokens, cfg, stream).
//
// `word_continues`, when non-null, marks tokens that continue the previous
// word; it is only consulted with unit == Word. Tokens must be content ids:
// BOS/EOS/PAD are added after noising.
std::vector<int> noise(const std::vector<int>& tokens, const NoiseConfig& cfg, RngStream& rng,
                       const std::vector<char>* word_continues = nullptr);

}  // namespace mnmt
