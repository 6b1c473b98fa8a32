#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/corpus.hpp"
#include "mnmt/tensor.hpp"
#include "mnmt/transformer.hpp"

namespace mnmt {

// Inclusive 1-based layer range (the E/D/C notation).
struct LayerRange {
  int lo = 1, hi = 0;

  bool empty() const { return hi < lo; }
  int count() const { return empty() ? 0 : hi - lo + 1; }
  bool contains(int layer) const { return layer >= lo && layer <= hi; }
  bool operator==(const LayerRange&) const = default;
};

// Declarative model structure: stack depths, which encoder/decoder layers
// are shared across languages, and which decoder layers cross-attend to the
// encoder output.
struct SharingSpec {
  int enc_layers = 4;
  int dec_layers = 4;
  std::optional<LayerRange> enc_shared = LayerRange{3, 4};
  std::optional<LayerRange> dec_shared;
  LayerRange cross_range{1, 2};
  int d_model = 64;
  int d_ff = 128;
  int n_heads = 4;
  Real dropout = 0.1;
  bool pre_norm = false;
  Activation activation = Activation::Gelu;

  Dims dims() const { return {d_model, d_ff, n_heads}; }
  std::string notation() const;
};

void validate_spec(const SharingSpec& spec);

SharingSpec desk_scale_spec();
SharingSpec paper_scale_spec();

// Applies "E3-4,C1-2" / "DC3-8" / "C1-10" style notation onto a spec,
// replacing its sharing and cross ranges.
void apply_notation(SharingSpec& spec, const std::string& notation);

// ---------------------------------------------------------------------------
// Language packs and the assembled graph
// ---------------------------------------------------------------------------

struct LanguagePack {
  std::string lang_id;
  Vocab vocab;
  Tensor<Real> enc_embed;
  Tensor<Real> dec_embed;  // also the tied output projection (same storage)
  std::vector<std::shared_ptr<LayerParams<Real>>> enc_layers;  // aliases shared storage inside enc_shared
  std::vector<std::shared_ptr<LayerParams<Real>>> dec_layers;
};

struct TieGroup {
  std::string storage;
  long numel = 0;
  std::vector<std::string> views;      // every name that resolves to this storage
  std::vector<std::string> languages;  // languages referencing it
};

struct TieReport {
  std::vector<TieGroup> groups;
  long shared_params = 0;        // storages referenced by more than one view
  long per_language_params = 0;  // single-referent storages
  long total_params = 0;         // sum over storages, not views
  std::string to_text() const;
};

class ModelGraph {
 public:
  SharingSpec spec;
  std::vector<std::shared_ptr<LayerParams<Real>>> shared_enc;  // [enc_layers], null outside enc_shared
  std::vector<std::shared_ptr<LayerParams<Real>>> shared_dec;  // [dec_layers], null outside dec_shared
  std::vector<std::string> lang_order;
  std::map<std::string, LanguagePack> packs;

  bool has_lang(const std::string& lang) const { return packs.count(lang) != 0; }
  const LanguagePack& pack(const std::string& lang) const;
  LanguagePack& pack(const std::string& lang);

  // Canonical storages, deterministic order; each underlying buffer appears
  // exactly once under its owning name.
  std::vector<std::pair<std::string, Tensor<Real>>> named_parameters() const;
  // view name -> canonical storage name, covering every per-language alias
  // (shared layers and the tied output projection included)
  std::vector<std::pair<std::string, std::string>> tie_table() const;

  long total_parameter_count() const;
  void zero_grads() const;
};

ModelGraph build_model(const SharingSpec& spec, const std::vector<std::pair<std::string, Vocab>>& languages,
                       std::uint64_t seed);

// Adds a language pack that shares the interlingua storages of the existing
// graph; pre-existing storages are aliased, never copied. New private layers
// are seeded deterministically from `seed`.
void expand_language(ModelGraph& model, const std::string& lang, const Vocab& vocab, std::uint64_t seed);

TieReport tie_report(const ModelGraph& model);

// Closed-form parameter counts, cross-checked by tests against enumeration.
long pack_private_param_count(const SharingSpec& spec, long vocab_size);
long shared_param_count(const SharingSpec& spec);

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

// Source tokens -> interlingua memory (b, t, d). Private layers first, then
// the shared block, per the layer index's membership in enc_shared.
Tensor<Real> encode(const ModelGraph& model, const std::string& lang, const BatchSide& tokens,
                    const ForwardCtx<Real>& ctx = {});

// Teacher-forced decoding: dec_input rows must start with the target
// language's code token; returns logits (b, t, V) with the output projection
// tied to the decoder input embedding.
Tensor<Real> decode_train(const ModelGraph& model, const std::string& lang, const Tensor<Real>& memory,
                          const BatchSide& memory_tokens, const BatchSide& dec_input,
                          const ForwardCtx<Real>& ctx = {});

// Same-language denoising path: decode_train over encode with src == tgt.
Tensor<Real> dae_forward(const ModelGraph& model, const std::string& lang, const BatchSide& noised_tokens,
                         const BatchSide& dec_input, const ForwardCtx<Real>& ctx = {});

// Decoder input (code + shifted labels) for teacher forcing.
BatchSide make_decoder_input(const BatchSide& labels, const Vocab& vocab, const std::string& tgt_lang);

}  // namespace mnmt
