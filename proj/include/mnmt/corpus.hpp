#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mnmt/noise.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

using Sentence = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Cipher languages over a shared latent base
// ---------------------------------------------------------------------------

enum class ReorderRule { None, Reverse, SwapAdjacent, RotateLeft };

ReorderRule reorder_rule_from_string(const std::string& s);
std::string reorder_rule_to_string(ReorderRule r);

// A synthetic language: a permutation over the base content tokens plus a
// deterministic word-order rule. The pair gives an exact translation oracle
// between any two languages derived from the same base.
struct SyntheticLangSpec {
  std::string lang_id;
  std::vector<int> perm;  // bijection over base content-token indices
  ReorderRule reorder = ReorderRule::None;
  std::string surface_prefix;  // empty = base surface forms

  static SyntheticLangSpec identity(std::string lang_id);
  static SyntheticLangSpec derive(std::string lang_id, ReorderRule reorder, std::uint64_t seed);
  void validate() const;
};

// Base content vocabulary (the latent language all ciphers are drawn over).
const std::vector<std::string>& base_content_tokens();

Sentence derive_language(const Sentence& base_sentence, const SyntheticLangSpec& spec);
Sentence inverse_derive(const Sentence& lang_sentence, const SyntheticLangSpec& spec);

// Exact ground-truth translation: src language -> base -> dst language.
Sentence oracle_translate(const Sentence& src_sentence, const SyntheticLangSpec& src,
                          const SyntheticLangSpec& dst);

// ---------------------------------------------------------------------------
// Base corpus generation
// ---------------------------------------------------------------------------

struct BaseCorpus {
  std::vector<Sentence> train, valid, test;
};

// n unique template-grammar sentences over the base tokens, lengths 3..12,
// split 90/5/5 with no overlap between splits.
BaseCorpus gen_base_corpus(long n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Per-language vocabulary. Specials occupy a fixed low-id block: PAD, UNK,
// EOS, MASK, then one language-code token per manifest language; content
// tokens follow, frequency-sorted.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;

  Vocab() = default;

  int size() const { return static_cast<int>(tokens_.size()); }
  int first_content_id() const { return 4 + static_cast<int>(lang_codes_.size()); }
  int lang_code_id(const std::string& lang) const;
  const std::vector<std::string>& lang_codes() const { return lang_codes_; }

  int to_id(const std::string& token) const;  // kUnk when out of vocabulary
  const std::string& to_token(int id) const;

  std::vector<int> encode(const Sentence& s) const;
  Sentence decode(const std::vector<int>& ids) const;

  bool is_special(int id) const { return id < first_content_id(); }

  std::uint64_t content_hash() const;

  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(std::vector<std::string> tokens, std::vector<std::string> lang_codes);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  std::vector<std::string> lang_codes_;  // manifest order
};

// Frequency-sorted vocabulary over a corpus; all manifest languages get a
// code token in the special block.
Vocab build_vocab(const std::vector<Sentence>& corpus, const std::vector<std::string>& all_lang_ids);

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

enum class BatchTask { MT, DAE };

struct BatchSide {
  long b = 0, t = 0;
  std::vector<int> ids;      // row-major (b, t)
  std::vector<char> is_pad;  // parallel to ids

  int at(long s, long i) const { return ids[static_cast<std::size_t>(s * t + i)]; }
  bool pad_at(long s, long i) const { return is_pad[static_cast<std::size_t>(s * t + i)] != 0; }
};

struct Batch {
  BatchSide src, tgt;
  BatchTask task = BatchTask::MT;
  std::string src_lang, tgt_lang;
};

struct BatchingConfig {
  long max_tokens = 1024;  // cap on b * max(t_src, t_tgt)
  long max_len = 32;       // longer sentences truncated (with a warning)
};

// Deterministic length-bucketed batches for one epoch of a parallel stream.
// Sources gain a trailing EOS; targets are stored as labels (content + EOS);
// the decoder input (language code + shifted labels) is derived at loss time.
std::vector<Batch> make_mt_batches(const std::vector<std::pair<Sentence, Sentence>>& pairs, const Vocab& src_vocab,
                                   const Vocab& tgt_vocab, const std::string& src_lang, const std::string& tgt_lang,
                                   const BatchingConfig& cfg, std::uint64_t seed);

// Monolingual denoising batches: src = g(x) + EOS, tgt = x + EOS. The noise
// stream for sentence i is keyed by (seed, epoch, corpus index), so draw
// order never depends on batch composition.
std::vector<Batch> make_dae_batches(const std::vector<Sentence>& sentences, const Vocab& vocab,
                                    const std::string& lang, const NoiseConfig& noise_cfg, const BatchingConfig& cfg,
                                    std::uint64_t seed, std::uint64_t epoch);

// ---------------------------------------------------------------------------
// On-disk dataset: manifest + aligned per-language corpus files
// ---------------------------------------------------------------------------

struct DataManifest {
  std::uint64_t seed = 0;
  std::vector<SyntheticLangSpec> languages;
  std::string pivot;
  std::vector<std::pair<std::string, std::string>> supervised;  // ordered directions
  long n_train = 0, n_valid = 0, n_test = 0;

  const SyntheticLangSpec& spec_for(const std::string& lang) const;
  bool is_supervised(const std::string& src, const std::string& tgt) const;
  std::vector<std::string> lang_ids() const;
};

struct DataSet {
  DataManifest manifest;
  // lang -> aligned sentences per split (line i of every language is the
  // same underlying base sentence)
  std::map<std::string, std::vector<Sentence>> train, valid, test;
  std::map<std::string, Vocab> vocabs;

  const std::vector<Sentence>& split(const std::string& which, const std::string& lang) const;
};

// Generation, file writing, loading. Layout: manifest.json plus
// <lang>.<split>.txt, one sentence per line, space-separated tokens; a
// supervised bitext is the pair of aligned files of its two languages.
DataSet generate_dataset(long n_sentences, std::uint64_t seed, const std::vector<std::string>& lang_ids,
                         const std::vector<ReorderRule>& reorders, const std::string& pivot);
void write_dataset(const DataSet& ds, const std::string& dir);
DataSet load_dataset(const std::string& dir);

Sentence parse_line(const std::string& line);
std::string format_line(const Sentence& s);

}  // namespace mnmt
