#include "mnmt/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mnmt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Base vocabulary and template grammar
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kDet = {"the", "a", "my", "this"};
const std::vector<std::string> kAdj = {"big", "red", "old", "nice", "cold", "few"};
const std::vector<std::string> kNoun = {"cat", "dog", "house", "tree", "bird", "car", "book", "fish", "moon", "road"};
const std::vector<std::string> kVerbT = {"sees", "likes", "finds", "takes", "hits"};
const std::vector<std::string> kVerbI = {"sleeps", "runs", "falls", "sings", "waits"};
const std::vector<std::string> kAdv = {"today", "slowly", "here", "often", "never"};
const std::vector<std::string> kPrep = {"near", "under", "behind", "with"};
const std::vector<std::string> kConj = {"and"};
const std::vector<std::string> kPron = {"he", "she", "it"};
const std::vector<std::string> kMisc = {"not", "very", "now", "soon", "then", "there", "really"};

std::vector<std::string> build_base_tokens() {
  std::vector<std::string> all;
  for (const auto* cls : {&kDet, &kAdj, &kNoun, &kVerbT, &kVerbI, &kAdv, &kPrep, &kConj, &kPron, &kMisc})
    all.insert(all.end(), cls->begin(), cls->end());
  return all;
}

const std::string& pick(const std::vector<std::string>& cls, RngStream& rng) {
  return cls[static_cast<std::size_t>(rng.uniform_int(static_cast<long>(cls.size())))];
}

Sentence sample_sentence(RngStream& rng) {
  Sentence s;
  auto np = [&](bool allow_adj) {
    s.push_back(pick(kDet, rng));
    if (allow_adj && rng.bernoulli(0.5)) {
      if (rng.bernoulli(0.2)) s.push_back(pick(kMisc, rng));
      s.push_back(pick(kAdj, rng));
    }
    s.push_back(pick(kNoun, rng));
  };
  switch (rng.uniform_int(10)) {
    case 0:
      np(false);
      s.push_back(pick(kVerbI, rng));
      break;
    case 1:
      np(true);
      s.push_back(pick(kVerbI, rng));
      s.push_back(pick(kAdv, rng));
      break;
    case 2:
      np(true);
      s.push_back(pick(kVerbT, rng));
      np(true);
      break;
    case 3:
      np(true);
      s.push_back(pick(kVerbT, rng));
      np(false);
      s.push_back(pick(kPrep, rng));
      np(true);
      break;
    case 4:
      s.push_back(pick(kPron, rng));
      s.push_back(pick(kVerbT, rng));
      np(true);
      s.push_back(pick(kAdv, rng));
      break;
    case 5:
      np(false);
      s.push_back(pick(kVerbI, rng));
      s.push_back(pick(kConj, rng));
      np(false);
      s.push_back(pick(kVerbI, rng));
      break;
    case 6:
      s.push_back(pick(kPron, rng));
      s.push_back(pick(kAdv, rng));
      s.push_back(pick(kVerbI, rng));
      break;
    case 7:
      np(false);
      s.push_back(pick(kPrep, rng));
      np(true);
      s.push_back(pick(kVerbI, rng));
      s.push_back(pick(kAdv, rng));
      break;
    case 8:
      np(true);
      s.push_back(pick(kVerbT, rng));
      np(true);
      s.push_back(pick(kConj, rng));
      s.push_back(pick(kPron, rng));
      s.push_back(pick(kVerbI, rng));
      break;
    default:
      s.push_back(pick(kPron, rng));
      s.push_back(pick(kVerbI, rng));
      s.push_back(pick(kAdv, rng));
      s.push_back(pick(kConj, rng));
      s.push_back(pick(kPron, rng));
      s.push_back(pick(kVerbI, rng));
      break;
  }
  return s;
}

}  // namespace

const std::vector<std::string>& base_content_tokens() {
  static const std::vector<std::string> tokens = build_base_tokens();
  return tokens;
}

// ---------------------------------------------------------------------------
// SyntheticLangSpec
// ---------------------------------------------------------------------------

ReorderRule reorder_rule_from_string(const std::string& s) {
  if (s == "none") return ReorderRule::None;
  if (s == "reverse") return ReorderRule::Reverse;
  if (s == "swap_adjacent") return ReorderRule::SwapAdjacent;
  if (s == "rotate_left") return ReorderRule::RotateLeft;
  throw std::invalid_argument("unknown reorder rule: " + s);
}

std::string reorder_rule_to_string(ReorderRule r) {
  switch (r) {
    case ReorderRule::None:
      return "none";
    case ReorderRule::Reverse:
      return "reverse";
    case ReorderRule::SwapAdjacent:
      return "swap_adjacent";
    case ReorderRule::RotateLeft:
      return "rotate_left";
  }
  throw std::logic_error("unreachable");
}

SyntheticLangSpec SyntheticLangSpec::identity(std::string lang_id) {
  SyntheticLangSpec s;
  s.lang_id = std::move(lang_id);
  s.perm.resize(base_content_tokens().size());
  std::iota(s.perm.begin(), s.perm.end(), 0);
  return s;
}

SyntheticLangSpec SyntheticLangSpec::derive(std::string lang_id, ReorderRule reorder, std::uint64_t seed) {
  SyntheticLangSpec s = identity(lang_id);
  s.reorder = reorder;
  s.surface_prefix = s.lang_id + ":";
  std::uint64_t name_key = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s.lang_id) {
    name_key ^= ch;
    name_key *= 0x100000001b3ULL;
  }
  auto rng = RngStream::keyed(seed, name_key);
  // Fisher-Yates
  for (long i = static_cast<long>(s.perm.size()) - 1; i > 0; --i) {
    const long j = rng.uniform_int(i + 1);
    std::swap(s.perm[static_cast<std::size_t>(i)], s.perm[static_cast<std::size_t>(j)]);
  }
  return s;
}

void SyntheticLangSpec::validate() const {
  const std::size_t n = base_content_tokens().size();
  if (perm.size() != n) throw std::invalid_argument("langspec " + lang_id + ": bijection has wrong size");
  std::vector<char> seen(n, 0);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= n || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("langspec " + lang_id + ": mapping is not a permutation");
    seen[static_cast<std::size_t>(p)] = 1;
  }
}

namespace {

int base_index(const std::string& token) {
  const auto& toks = base_content_tokens();
  for (std::size_t i = 0; i < toks.size(); ++i)
    if (toks[i] == token) return static_cast<int>(i);
  throw std::invalid_argument("token outside the base vocabulary: " + token);
}

Sentence apply_reorder(const Sentence& s, ReorderRule r, bool inverse) {
  Sentence out = s;
  switch (r) {
    case ReorderRule::None:
      break;
    case ReorderRule::Reverse:
      std::reverse(out.begin(), out.end());
      break;
    case ReorderRule::SwapAdjacent:
      for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
      break;
    case ReorderRule::RotateLeft:
      if (out.size() > 1) {
        if (!inverse)
          std::rotate(out.begin(), out.begin() + 1, out.end());
        else
          std::rotate(out.begin(), out.end() - 1, out.end());
      }
      break;
  }
  return out;
}

}  // namespace

Sentence derive_language(const Sentence& base_sentence, const SyntheticLangSpec& spec) {
  spec.validate();
  Sentence mapped;
  mapped.reserve(base_sentence.size());
  for (const auto& tok : base_sentence) {
    const int idx = base_index(tok);
    mapped.push_back(spec.surface_prefix +
                     base_content_tokens()[static_cast<std::size_t>(spec.perm[static_cast<std::size_t>(idx)])]);
  }
  return apply_reorder(mapped, spec.reorder, false);
}

Sentence inverse_derive(const Sentence& lang_sentence, const SyntheticLangSpec& spec) {
  spec.validate();
  std::vector<int> inv(spec.perm.size());
  for (std::size_t i = 0; i < spec.perm.size(); ++i) inv[static_cast<std::size_t>(spec.perm[i])] = static_cast<int>(i);
  Sentence unordered = apply_reorder(lang_sentence, spec.reorder, true);
  Sentence base;
  base.reserve(unordered.size());
  for (const auto& tok : unordered) {
    std::string stripped = tok;
    if (!spec.surface_prefix.empty()) {
      if (tok.rfind(spec.surface_prefix, 0) != 0)
        throw std::invalid_argument("token " + tok + " does not belong to language " + spec.lang_id);
      stripped = tok.substr(spec.surface_prefix.size());
    }
    base.push_back(
        base_content_tokens()[static_cast<std::size_t>(inv[static_cast<std::size_t>(base_index(stripped))])]);
  }
  return base;
}

Sentence oracle_translate(const Sentence& src_sentence, const SyntheticLangSpec& src,
                          const SyntheticLangSpec& dst) {
  return derive_language(inverse_derive(src_sentence, src), dst);
}

// ---------------------------------------------------------------------------
// Base corpus
// ---------------------------------------------------------------------------

BaseCorpus gen_base_corpus(long n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_base_corpus: n must be >= 1");
  auto rng = RngStream::keyed(seed, 0xc0);
  std::set<Sentence> seen;
  std::vector<Sentence> all;
  all.reserve(static_cast<std::size_t>(n));
  long guard = 0;
  while (static_cast<long>(all.size()) < n) {
    Sentence s = sample_sentence(rng);
    if (s.size() < 3 || s.size() > 12) continue;
    if (++guard > n * 1000) throw std::runtime_error("gen_base_corpus: could not draw enough unique sentences");
    if (seen.insert(s).second) all.push_back(std::move(s));
  }
  // deterministic shuffle then split 90/5/5
  for (long i = static_cast<long>(all.size()) - 1; i > 0; --i) {
    const long j = rng.uniform_int(i + 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  BaseCorpus c;
  const long n_valid = std::max(1L, n / 20);
  const long n_test = std::max(1L, n / 20);
  const long n_train = n - n_valid - n_test;
  if (n_train < 1) throw std::invalid_argument("gen_base_corpus: n too small to split");
  c.train.assign(all.begin(), all.begin() + n_train);
  c.valid.assign(all.begin() + n_train, all.begin() + n_train + n_valid);
  c.test.assign(all.begin() + n_train + n_valid, all.end());
  return c;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab Vocab::from_tokens(std::vector<std::string> tokens, std::vector<std::string> lang_codes) {
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.lang_codes_ = std::move(lang_codes);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocab: duplicate token " + v.tokens_[i]);
  }
  return v;
}

int Vocab::lang_code_id(const std::string& lang) const {
  for (std::size_t i = 0; i < lang_codes_.size(); ++i)
    if (lang_codes_[i] == lang) return 4 + static_cast<int>(i);
  throw std::invalid_argument("vocab: no language code for " + lang);
}

int Vocab::to_id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::to_token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const Sentence& s) const {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (const auto& tok : s) ids.push_back(to_id(tok));
  return ids;
}

Sentence Vocab::decode(const std::vector<int>& ids) const {
  Sentence s;
  s.reserve(ids.size());
  for (int id : ids) s.push_back(to_token(id));
  return s;
}

std::uint64_t Vocab::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  auto feed = [&](const std::string& str) {
    for (unsigned char ch : str) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  for (const auto& t : tokens_) feed(t);
  return h;
}

Vocab build_vocab(const std::vector<Sentence>& corpus, const std::vector<std::string>& all_lang_ids) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, long> freq;
  for (const auto& s : corpus)
    for (const auto& tok : s) ++freq[tok];
  std::vector<std::pair<std::string, long>> by_freq(freq.begin(), freq.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = {"<pad>", "<unk>", "<eos>", "<mask>"};
  for (const auto& lang : all_lang_ids) tokens.push_back("<2" + lang + ">");
  for (const auto& [tok, cnt] : by_freq) tokens.push_back(tok);
  return Vocab::from_tokens(std::move(tokens), all_lang_ids);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

namespace {

std::vector<int> encode_with_eos(const Sentence& s, const Vocab& v, long max_len, bool* truncated) {
  std::vector<int> ids = v.encode(s);
  if (static_cast<long>(ids.size()) > max_len - 1) {
    ids.resize(static_cast<std::size_t>(max_len - 1));
    *truncated = true;
  }
  ids.push_back(Vocab::kEos);
  return ids;
}

BatchSide pack_side(const std::vector<std::vector<int>>& rows) {
  BatchSide side;
  side.b = static_cast<long>(rows.size());
  side.t = 0;
  for (const auto& r : rows) side.t = std::max(side.t, static_cast<long>(r.size()));
  side.ids.assign(static_cast<std::size_t>(side.b * side.t), Vocab::kPad);
  side.is_pad.assign(static_cast<std::size_t>(side.b * side.t), 1);
  for (long s = 0; s < side.b; ++s) {
    const auto& r = rows[static_cast<std::size_t>(s)];
    for (long i = 0; i < static_cast<long>(r.size()); ++i) {
      side.ids[static_cast<std::size_t>(s * side.t + i)] = r[static_cast<std::size_t>(i)];
      side.is_pad[static_cast<std::size_t>(s * side.t + i)] = 0;
    }
  }
  return side;
}

// Deterministic length-bucketed batching: shuffle, stable-sort by length
// key, chunk under the token cap, shuffle chunk order.
template <class Entry>
std::vector<std::vector<Entry>> bucket_chunks(std::vector<Entry> entries,
                                              const std::function<long(const Entry&)>& length_of, long max_tokens,
                                              RngStream& rng) {
  for (long i = static_cast<long>(entries.size()) - 1; i > 0; --i) {
    const long j = rng.uniform_int(i + 1);
    std::swap(entries[static_cast<std::size_t>(i)], entries[static_cast<std::size_t>(j)]);
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [&](const Entry& a, const Entry& b) { return length_of(a) < length_of(b); });
  std::vector<std::vector<Entry>> chunks;
  std::vector<Entry> cur;
  long cur_max_len = 0;
  for (auto& e : entries) {
    const long len = length_of(e);
    const long new_max = std::max(cur_max_len, len);
    if (!cur.empty() && new_max * static_cast<long>(cur.size() + 1) > max_tokens) {
      chunks.push_back(std::move(cur));
      cur.clear();
      cur_max_len = 0;
    }
    cur_max_len = std::max(cur_max_len, len);
    cur.push_back(std::move(e));
  }
  if (!cur.empty()) chunks.push_back(std::move(cur));
  for (long i = static_cast<long>(chunks.size()) - 1; i > 0; --i) {
    const long j = rng.uniform_int(i + 1);
    std::swap(chunks[static_cast<std::size_t>(i)], chunks[static_cast<std::size_t>(j)]);
  }
  return chunks;
}

}  // namespace

std::vector<Batch> make_mt_batches(const std::vector<std::pair<Sentence, Sentence>>& pairs, const Vocab& src_vocab,
                                   const Vocab& tgt_vocab, const std::string& src_lang, const std::string& tgt_lang,
                                   const BatchingConfig& cfg, std::uint64_t seed) {
  bool truncated = false;
  using Row = std::pair<std::vector<int>, std::vector<int>>;
  std::vector<Row> rows;
  rows.reserve(pairs.size());
  for (const auto& [s, t] : pairs)
    rows.emplace_back(encode_with_eos(s, src_vocab, cfg.max_len, &truncated),
                      encode_with_eos(t, tgt_vocab, cfg.max_len, &truncated));
  if (truncated)
    std::cerr << "[mnmt] make_mt_batches: sentences longer than " << cfg.max_len << " tokens were truncated\n";

  auto rng = RngStream::keyed(seed, 0xba7c4);
  std::function<long(const Row&)> length_of = [](const Row& r) {
    return std::max(static_cast<long>(r.first.size()), static_cast<long>(r.second.size()));
  };
  auto chunks = bucket_chunks<Row>(std::move(rows), length_of, cfg.max_tokens, rng);

  std::vector<Batch> batches;
  batches.reserve(chunks.size());
  for (auto& chunk : chunks) {
    std::vector<std::vector<int>> srcs, tgts;
    for (auto& [s, t] : chunk) {
      srcs.push_back(std::move(s));
      tgts.push_back(std::move(t));
    }
    Batch b;
    b.src = pack_side(srcs);
    b.tgt = pack_side(tgts);
    b.task = BatchTask::MT;
    b.src_lang = src_lang;
    b.tgt_lang = tgt_lang;
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<Batch> make_dae_batches(const std::vector<Sentence>& sentences, const Vocab& vocab,
                                    const std::string& lang, const NoiseConfig& noise_cfg, const BatchingConfig& cfg,
                                    std::uint64_t seed, std::uint64_t epoch) {
  bool truncated = false;
  using Row = std::pair<std::vector<int>, std::vector<int>>;
  std::vector<Row> rows;
  rows.reserve(sentences.size());
  NoiseConfig nc = noise_cfg;
  nc.mask_id = Vocab::kMask;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    std::vector<int> clean = vocab.encode(sentences[i]);
    if (static_cast<long>(clean.size()) > cfg.max_len - 1) {
      clean.resize(static_cast<std::size_t>(cfg.max_len - 1));
      truncated = true;
    }
    auto stream = RngStream::keyed(seed, 0xdae, epoch, i);
    std::vector<int> noised = noise(clean, nc, stream);
    noised.push_back(Vocab::kEos);
    clean.push_back(Vocab::kEos);
    rows.emplace_back(std::move(noised), std::move(clean));
  }
  if (truncated)
    std::cerr << "[mnmt] make_dae_batches: sentences longer than " << cfg.max_len << " tokens were truncated\n";

  auto rng = RngStream::keyed(seed, 0xba7c5, epoch);
  std::function<long(const Row&)> length_of = [](const Row& r) {
    return std::max(static_cast<long>(r.first.size()), static_cast<long>(r.second.size()));
  };
  auto chunks = bucket_chunks<Row>(std::move(rows), length_of, cfg.max_tokens, rng);

  std::vector<Batch> batches;
  batches.reserve(chunks.size());
  for (auto& chunk : chunks) {
    std::vector<std::vector<int>> srcs, tgts;
    for (auto& [s, t] : chunk) {
      srcs.push_back(std::move(s));
      tgts.push_back(std::move(t));
    }
    Batch b;
    b.src = pack_side(srcs);
    b.tgt = pack_side(tgts);
    b.task = BatchTask::DAE;
    b.src_lang = lang;
    b.tgt_lang = lang;
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Manifest / dataset I/O
// ---------------------------------------------------------------------------

const SyntheticLangSpec& DataManifest::spec_for(const std::string& lang) const {
  for (const auto& l : languages)
    if (l.lang_id == lang) return l;
  throw std::invalid_argument("manifest: unknown language " + lang);
}

bool DataManifest::is_supervised(const std::string& src, const std::string& tgt) const {
  for (const auto& [s, t] : supervised)
    if (s == src && t == tgt) return true;
  return false;
}

std::vector<std::string> DataManifest::lang_ids() const {
  std::vector<std::string> ids;
  ids.reserve(languages.size());
  for (const auto& l : languages) ids.push_back(l.lang_id);
  return ids;
}

const std::vector<Sentence>& DataSet::split(const std::string& which, const std::string& lang) const {
  const auto* m = which == "train" ? &train : which == "valid" ? &valid : which == "test" ? &test : nullptr;
  if (!m) throw std::invalid_argument("dataset: unknown split " + which);
  auto it = m->find(lang);
  if (it == m->end()) throw std::invalid_argument("dataset: no split " + which + " for language " + lang);
  return it->second;
}

DataSet generate_dataset(long n_sentences, std::uint64_t seed, const std::vector<std::string>& lang_ids,
                         const std::vector<ReorderRule>& reorders, const std::string& pivot) {
  if (lang_ids.size() < 2) throw std::invalid_argument("generate_dataset: need at least two languages");
  if (reorders.size() != lang_ids.size())
    throw std::invalid_argument("generate_dataset: one reorder rule per language required");
  if (std::find(lang_ids.begin(), lang_ids.end(), pivot) == lang_ids.end())
    throw std::invalid_argument("generate_dataset: pivot " + pivot + " not among languages");

  DataSet ds;
  ds.manifest.seed = seed;
  ds.manifest.pivot = pivot;
  for (std::size_t i = 0; i < lang_ids.size(); ++i) {
    if (lang_ids[i] == pivot) {
      auto spec = SyntheticLangSpec::identity(pivot);
      spec.reorder = reorders[i];
      ds.manifest.languages.push_back(std::move(spec));
    } else {
      ds.manifest.languages.push_back(SyntheticLangSpec::derive(lang_ids[i], reorders[i], seed));
    }
  }
  // pivot-centric supervised set only; every other direction is zero-shot
  for (const auto& lang : lang_ids) {
    if (lang == pivot) continue;
    ds.manifest.supervised.emplace_back(pivot, lang);
    ds.manifest.supervised.emplace_back(lang, pivot);
  }

  BaseCorpus base = gen_base_corpus(n_sentences, seed);
  ds.manifest.n_train = static_cast<long>(base.train.size());
  ds.manifest.n_valid = static_cast<long>(base.valid.size());
  ds.manifest.n_test = static_cast<long>(base.test.size());

  for (const auto& spec : ds.manifest.languages) {
    auto derive_all = [&](const std::vector<Sentence>& src) {
      std::vector<Sentence> out;
      out.reserve(src.size());
      for (const auto& s : src) out.push_back(derive_language(s, spec));
      return out;
    };
    ds.train[spec.lang_id] = derive_all(base.train);
    ds.valid[spec.lang_id] = derive_all(base.valid);
    ds.test[spec.lang_id] = derive_all(base.test);
    ds.vocabs[spec.lang_id] = build_vocab(ds.train[spec.lang_id], lang_ids);
  }
  return ds;
}

void write_dataset(const DataSet& ds, const std::string& dir) {
  fs::create_directories(dir);
  json m;
  m["seed"] = ds.manifest.seed;
  m["pivot"] = ds.manifest.pivot;
  m["splits"] = {{"train", ds.manifest.n_train}, {"valid", ds.manifest.n_valid}, {"test", ds.manifest.n_test}};
  m["languages"] = json::array();
  for (const auto& l : ds.manifest.languages) {
    json lj;
    lj["id"] = l.lang_id;
    lj["prefix"] = l.surface_prefix;
    lj["reorder"] = reorder_rule_to_string(l.reorder);
    lj["perm"] = l.perm;
    m["languages"].push_back(lj);
  }
  m["supervised"] = json::array();
  for (const auto& [s, t] : ds.manifest.supervised) m["supervised"].push_back(json::array({s, t}));

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
  mf << m.dump(2) << "\n";

  auto write_split = [&](const std::map<std::string, std::vector<Sentence>>& split, const std::string& name) {
    for (const auto& [lang, sentences] : split) {
      std::ofstream f(fs::path(dir) / (lang + "." + name + ".txt"));
      if (!f) throw std::runtime_error("cannot write corpus file for " + lang);
      for (const auto& s : sentences) f << format_line(s) << "\n";
    }
  };
  write_split(ds.train, "train");
  write_split(ds.valid, "valid");
  write_split(ds.test, "test");
}

DataSet load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("no manifest.json in " + dir);
  json m = json::parse(mf);

  DataSet ds;
  ds.manifest.seed = m.at("seed").get<std::uint64_t>();
  ds.manifest.pivot = m.at("pivot").get<std::string>();
  ds.manifest.n_train = m.at("splits").at("train").get<long>();
  ds.manifest.n_valid = m.at("splits").at("valid").get<long>();
  ds.manifest.n_test = m.at("splits").at("test").get<long>();
  for (const auto& lj : m.at("languages")) {
    SyntheticLangSpec spec;
    spec.lang_id = lj.at("id").get<std::string>();
    spec.surface_prefix = lj.at("prefix").get<std::string>();
    spec.reorder = reorder_rule_from_string(lj.at("reorder").get<std::string>());
    spec.perm = lj.at("perm").get<std::vector<int>>();
    spec.validate();
    ds.manifest.languages.push_back(std::move(spec));
  }
  for (const auto& pj : m.at("supervised"))
    ds.manifest.supervised.emplace_back(pj.at(0).get<std::string>(), pj.at(1).get<std::string>());

  auto read_split = [&](std::map<std::string, std::vector<Sentence>>& split, const std::string& name, long expect) {
    for (const auto& l : ds.manifest.languages) {
      const fs::path p = fs::path(dir) / (l.lang_id + "." + name + ".txt");
      std::ifstream f(p);
      if (!f) throw std::runtime_error("missing corpus file " + p.string());
      std::vector<Sentence> sentences;
      std::string line;
      while (std::getline(f, line))
        if (!line.empty()) sentences.push_back(parse_line(line));
      if (static_cast<long>(sentences.size()) != expect)
        throw std::runtime_error("corpus file " + p.string() + " has " + std::to_string(sentences.size()) +
                                 " lines, manifest says " + std::to_string(expect));
      split[l.lang_id] = std::move(sentences);
    }
  };
  read_split(ds.train, "train", ds.manifest.n_train);
  read_split(ds.valid, "valid", ds.manifest.n_valid);
  read_split(ds.test, "test", ds.manifest.n_test);

  const auto langs = ds.manifest.lang_ids();
  for (const auto& l : langs) ds.vocabs[l] = build_vocab(ds.train[l], langs);
  return ds;
}

Sentence parse_line(const std::string& line) {
  Sentence s;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) s.push_back(tok);
  return s;
}

std::string format_line(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

}  // namespace mnmt
