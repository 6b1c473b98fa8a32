#include "mnmt/model.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mnmt {

namespace {

std::uint64_t name_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string range_str(const LayerRange& r) { return std::to_string(r.lo) + "-" + std::to_string(r.hi); }

}  // namespace

std::string SharingSpec::notation() const {
  std::ostringstream os;
  bool first = true;
  auto sep = [&]() {
    if (!first) os << ",";
    first = false;
  };
  if (enc_shared && !enc_shared->empty()) {
    sep();
    os << "E" << range_str(*enc_shared);
  }
  if (dec_shared && !dec_shared->empty() && *dec_shared == cross_range) {
    sep();
    os << "DC" << range_str(cross_range);
    return os.str();
  }
  if (dec_shared && !dec_shared->empty()) {
    sep();
    os << "D" << range_str(*dec_shared);
  }
  sep();
  os << "C" << range_str(cross_range);
  return os.str();
}

void validate_spec(const SharingSpec& spec) {
  if (spec.enc_layers < 1 || spec.dec_layers < 1)
    throw std::invalid_argument("spec: layer counts must be positive");
  auto check_range = [&](const LayerRange& r, int n, const char* what) {
    if (r.lo < 1 || r.hi > n)
      throw std::invalid_argument(std::string("spec: ") + what + " range " + range_str(r) + " outside [1," +
                                  std::to_string(n) + "]");
  };
  if (spec.enc_shared && !spec.enc_shared->empty()) check_range(*spec.enc_shared, spec.enc_layers, "encoder sharing");
  if (spec.dec_shared && !spec.dec_shared->empty()) check_range(*spec.dec_shared, spec.dec_layers, "decoder sharing");
  if (spec.cross_range.empty())
    throw std::invalid_argument("spec: cross-attention range is empty; the decoder would never see the source");
  check_range(spec.cross_range, spec.dec_layers, "cross-attention");
  if (spec.d_model % spec.n_heads != 0)
    throw std::invalid_argument("spec: d_model " + std::to_string(spec.d_model) + " not divisible by " +
                                std::to_string(spec.n_heads) + " heads");
  if (spec.d_model % 2 != 0) throw std::invalid_argument("spec: d_model must be even for sinusoidal positions");
  if (spec.dropout < 0 || spec.dropout >= 1) throw std::invalid_argument("spec: dropout outside [0,1)");
}

SharingSpec desk_scale_spec() { return SharingSpec{}; }

SharingSpec paper_scale_spec() {
  SharingSpec s;
  s.enc_layers = 9;
  s.dec_layers = 12;
  s.enc_shared = LayerRange{4, 9};
  s.dec_shared = std::nullopt;
  s.cross_range = LayerRange{1, 6};
  s.d_model = 512;
  s.d_ff = 2048;
  s.n_heads = 8;
  return s;
}

void apply_notation(SharingSpec& spec, const std::string& notation) {
  spec.enc_shared = std::nullopt;
  spec.dec_shared = std::nullopt;
  spec.cross_range = LayerRange{1, 0};
  std::stringstream ss(notation);
  std::string term;
  while (std::getline(ss, term, ',')) {
    term.erase(std::remove_if(term.begin(), term.end(), [](char c) { return c == ' '; }), term.end());
    if (term.empty()) continue;
    std::size_t p = 0;
    while (p < term.size() && std::isalpha(static_cast<unsigned char>(term[p]))) ++p;
    const std::string letters = term.substr(0, p);
    const std::string digits = term.substr(p);
    const auto dash = digits.find('-');
    if (letters.empty() || dash == std::string::npos)
      throw std::invalid_argument("bad sharing notation term: " + term);
    LayerRange r{std::stoi(digits.substr(0, dash)), std::stoi(digits.substr(dash + 1))};
    if (letters == "E")
      spec.enc_shared = r;
    else if (letters == "D")
      spec.dec_shared = r;
    else if (letters == "C")
      spec.cross_range = r;
    else if (letters == "DC") {
      spec.dec_shared = r;
      spec.cross_range = r;
    } else {
      throw std::invalid_argument("bad sharing notation term: " + term);
    }
  }
  validate_spec(spec);
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

Tensor<Real> make_embedding(long vocab_size, int d, RngStream rng, const std::string& name) {
  auto t = Tensor<Real>::zeros({vocab_size, d}, true);
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(d));
  for (long r = 0; r < t.rows(); ++r)
    for (long c = 0; c < t.cols(); ++c) t.value()(r, c) = rng.normal() * scale;
  t.set_name(name);
  return t;
}

std::shared_ptr<LayerParams<Real>> make_named_layer(const SharingSpec& spec, bool has_cross, std::uint64_t seed,
                                                    const std::string& name) {
  auto rng = RngStream::keyed(seed, name_key(name));
  auto layer = std::make_shared<LayerParams<Real>>(make_layer_params<Real>(spec.dims(), has_cross, rng));
  layer->visit([&](const std::string& suffix, Tensor<Real>& t) { t.set_name(name + "." + suffix); });
  return layer;
}

void build_pack(const ModelGraph& graph, LanguagePack& pack, const SharingSpec& spec, std::uint64_t seed) {
  const std::string base = "lang." + pack.lang_id;
  pack.enc_embed = make_embedding(pack.vocab.size(), spec.d_model,
                                  RngStream::keyed(seed, name_key(base + ".enc_embed")), base + ".enc_embed");
  pack.dec_embed = make_embedding(pack.vocab.size(), spec.d_model,
                                  RngStream::keyed(seed, name_key(base + ".dec_embed")), base + ".dec_embed");
  pack.enc_layers.resize(static_cast<std::size_t>(spec.enc_layers));
  for (int l = 1; l <= spec.enc_layers; ++l) {
    if (spec.enc_shared && spec.enc_shared->contains(l)) {
      pack.enc_layers[static_cast<std::size_t>(l - 1)] = graph.shared_enc[static_cast<std::size_t>(l - 1)];
    } else {
      pack.enc_layers[static_cast<std::size_t>(l - 1)] =
          make_named_layer(spec, false, seed, base + ".enc." + std::to_string(l));
    }
  }
  pack.dec_layers.resize(static_cast<std::size_t>(spec.dec_layers));
  for (int l = 1; l <= spec.dec_layers; ++l) {
    const bool has_cross = spec.cross_range.contains(l);
    if (spec.dec_shared && spec.dec_shared->contains(l)) {
      pack.dec_layers[static_cast<std::size_t>(l - 1)] = graph.shared_dec[static_cast<std::size_t>(l - 1)];
    } else {
      pack.dec_layers[static_cast<std::size_t>(l - 1)] =
          make_named_layer(spec, has_cross, seed, base + ".dec." + std::to_string(l));
    }
  }
}

}  // namespace

ModelGraph build_model(const SharingSpec& spec, const std::vector<std::pair<std::string, Vocab>>& languages,
                       std::uint64_t seed) {
  validate_spec(spec);
  if (languages.empty()) throw std::invalid_argument("build_model: at least one language required");
  ModelGraph g;
  g.spec = spec;
  g.shared_enc.resize(static_cast<std::size_t>(spec.enc_layers));
  g.shared_dec.resize(static_cast<std::size_t>(spec.dec_layers));
  for (int l = 1; l <= spec.enc_layers; ++l)
    if (spec.enc_shared && spec.enc_shared->contains(l))
      g.shared_enc[static_cast<std::size_t>(l - 1)] =
          make_named_layer(spec, false, seed, "shared.enc." + std::to_string(l));
  for (int l = 1; l <= spec.dec_layers; ++l)
    if (spec.dec_shared && spec.dec_shared->contains(l))
      g.shared_dec[static_cast<std::size_t>(l - 1)] =
          make_named_layer(spec, spec.cross_range.contains(l), seed, "shared.dec." + std::to_string(l));

  for (const auto& [lang, vocab] : languages) {
    if (g.has_lang(lang)) throw std::invalid_argument("build_model: duplicate language " + lang);
    g.lang_order.push_back(lang);
    LanguagePack pack;
    pack.lang_id = lang;
    pack.vocab = vocab;
    build_pack(g, pack, spec, seed);
    g.packs.emplace(lang, std::move(pack));
  }
  return g;
}

void expand_language(ModelGraph& model, const std::string& lang, const Vocab& vocab, std::uint64_t seed) {
  if (model.has_lang(lang)) throw std::invalid_argument("expand_language: language " + lang + " already present");
  model.lang_order.push_back(lang);
  LanguagePack pack;
  pack.lang_id = lang;
  pack.vocab = vocab;
  build_pack(model, pack, model.spec, seed);
  model.packs.emplace(lang, std::move(pack));
}

// ---------------------------------------------------------------------------
// Registry / report
// ---------------------------------------------------------------------------

const LanguagePack& ModelGraph::pack(const std::string& lang) const {
  auto it = packs.find(lang);
  if (it == packs.end()) throw std::invalid_argument("model: unknown language " + lang);
  return it->second;
}

LanguagePack& ModelGraph::pack(const std::string& lang) {
  auto it = packs.find(lang);
  if (it == packs.end()) throw std::invalid_argument("model: unknown language " + lang);
  return it->second;
}

std::vector<std::pair<std::string, Tensor<Real>>> ModelGraph::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<Real>>> out;
  std::set<const void*> seen;
  auto add = [&](const std::string& name, const Tensor<Real>& t) {
    if (seen.insert(t.storage().get()).second) out.emplace_back(name, t);
  };
  for (auto& layer : shared_enc)
    if (layer)
      const_cast<LayerParams<Real>&>(*layer).visit(
          [&](const std::string&, Tensor<Real>& t) { add(t.name(), t); });
  for (auto& layer : shared_dec)
    if (layer)
      const_cast<LayerParams<Real>&>(*layer).visit(
          [&](const std::string&, Tensor<Real>& t) { add(t.name(), t); });
  for (const auto& lang : lang_order) {
    const auto& p = pack(lang);
    add(p.enc_embed.name(), p.enc_embed);
    add(p.dec_embed.name(), p.dec_embed);
    for (const auto& layer : p.enc_layers)
      const_cast<LayerParams<Real>&>(*layer).visit([&](const std::string&, Tensor<Real>& t) { add(t.name(), t); });
    for (const auto& layer : p.dec_layers)
      const_cast<LayerParams<Real>&>(*layer).visit([&](const std::string&, Tensor<Real>& t) { add(t.name(), t); });
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> ModelGraph::tie_table() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& lang : lang_order) {
    const auto& p = pack(lang);
    const std::string base = "lang." + lang;
    out.emplace_back(base + ".enc_embed", p.enc_embed.name());
    out.emplace_back(base + ".dec_embed", p.dec_embed.name());
    out.emplace_back(base + ".out_proj", p.dec_embed.name());  // tied softmax
    for (int l = 1; l <= spec.enc_layers; ++l) {
      auto& layer = *p.enc_layers[static_cast<std::size_t>(l - 1)];
      const_cast<LayerParams<Real>&>(layer).visit([&](const std::string& suffix, Tensor<Real>& t) {
        out.emplace_back(base + ".enc." + std::to_string(l) + "." + suffix, t.name());
      });
    }
    for (int l = 1; l <= spec.dec_layers; ++l) {
      auto& layer = *p.dec_layers[static_cast<std::size_t>(l - 1)];
      const_cast<LayerParams<Real>&>(layer).visit([&](const std::string& suffix, Tensor<Real>& t) {
        out.emplace_back(base + ".dec." + std::to_string(l) + "." + suffix, t.name());
      });
    }
  }
  return out;
}

long ModelGraph::total_parameter_count() const {
  long n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void ModelGraph::zero_grads() const {
  for (auto& [name, t] : named_parameters()) const_cast<Tensor<Real>&>(t).clear_grad();
}

TieReport tie_report(const ModelGraph& model) {
  TieReport rep;
  auto params = model.named_parameters();
  std::map<std::string, TieGroup> groups;
  for (const auto& [name, t] : params) {
    TieGroup g;
    g.storage = name;
    g.numel = t.numel();
    groups.emplace(name, std::move(g));
  }
  for (const auto& [view, storage] : model.tie_table()) {
    auto& g = groups.at(storage);
    g.views.push_back(view);
    const auto dot = view.find('.', 5);  // views are "lang.<id>.<...>"
    const std::string lang = view.substr(5, dot - 5);
    if (std::find(g.languages.begin(), g.languages.end(), lang) == g.languages.end()) g.languages.push_back(lang);
  }
  for (const auto& [name, t] : params) {
    auto& g = groups.at(name);
    rep.total_params += g.numel;
    if (g.views.size() > 1)
      rep.shared_params += g.numel;
    else
      rep.per_language_params += g.numel;
    rep.groups.push_back(std::move(g));
  }
  return rep;
}

std::string TieReport::to_text() const {
  std::ostringstream os;
  os << "tie groups: " << groups.size() << "\n";
  for (const auto& g : groups) {
    os << "  " << g.storage << " [" << g.numel << "]";
    if (g.languages.size() > 1 || g.views.size() > 1) {
      os << " <- ";
      for (std::size_t i = 0; i < g.languages.size(); ++i) os << (i ? "," : "") << g.languages[i];
      os << " (" << g.views.size() << " views)";
    }
    os << "\n";
  }
  os << "shared parameters:       " << shared_params << "\n";
  os << "per-language parameters: " << per_language_params << "\n";
  os << "total parameters:        " << total_params << "\n";
  return os.str();
}

long pack_private_param_count(const SharingSpec& spec, long vocab_size) {
  long n = 2 * vocab_size * spec.d_model;  // encoder + decoder embeddings (output tied)
  for (int l = 1; l <= spec.enc_layers; ++l)
    if (!(spec.enc_shared && spec.enc_shared->contains(l)))
      n += layer_param_count(spec.d_model, spec.d_ff, false);
  for (int l = 1; l <= spec.dec_layers; ++l)
    if (!(spec.dec_shared && spec.dec_shared->contains(l)))
      n += layer_param_count(spec.d_model, spec.d_ff, spec.cross_range.contains(l));
  return n;
}

long shared_param_count(const SharingSpec& spec) {
  long n = 0;
  for (int l = 1; l <= spec.enc_layers; ++l)
    if (spec.enc_shared && spec.enc_shared->contains(l)) n += layer_param_count(spec.d_model, spec.d_ff, false);
  for (int l = 1; l <= spec.dec_layers; ++l)
    if (spec.dec_shared && spec.dec_shared->contains(l))
      n += layer_param_count(spec.d_model, spec.d_ff, spec.cross_range.contains(l));
  return n;
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

namespace {

Tensor<Real> embed_with_positions(const Tensor<Real>& table, const BatchSide& tokens, int d,
                                  const ForwardCtx<Real>& ctx) {
  auto x = embedding(table, tokens.ids).reshaped({tokens.b, tokens.t, static_cast<long>(d)});
  x = scale(x, std::sqrt(static_cast<Real>(d)));
  const Mat<Real> pe = sinusoidal_positions<Real>(tokens.t, d);
  Mat<Real> tiled(tokens.b * tokens.t, d);
  for (long s = 0; s < tokens.b; ++s) tiled.middleRows(s * tokens.t, tokens.t) = pe;
  x = add_constant(x, tiled);
  return ctx.apply_dropout(x);
}

std::vector<char> pad_row(const BatchSide& side, long s) {
  return std::vector<char>(side.is_pad.begin() + s * side.t, side.is_pad.begin() + (s + 1) * side.t);
}

std::vector<Mask> self_attention_masks(const BatchSide& side, bool causal) {
  std::vector<Mask> masks;
  masks.reserve(static_cast<std::size_t>(side.b));
  for (long s = 0; s < side.b; ++s) {
    Mask m = causal ? Mask::causal(side.t) : Mask::full(side.t, side.t);
    masks.push_back(m.with_key_padding(pad_row(side, s)));
  }
  return masks;
}

std::vector<Mask> memory_masks(long t_dec, const BatchSide& memory_tokens) {
  std::vector<Mask> masks;
  masks.reserve(static_cast<std::size_t>(memory_tokens.b));
  for (long s = 0; s < memory_tokens.b; ++s)
    masks.push_back(Mask::full(t_dec, memory_tokens.t).with_key_padding(pad_row(memory_tokens, s)));
  return masks;
}

}  // namespace

Tensor<Real> encode(const ModelGraph& model, const std::string& lang, const BatchSide& tokens,
                    const ForwardCtx<Real>& ctx) {
  const auto& p = model.pack(lang);
  auto x = embed_with_positions(p.enc_embed, tokens, model.spec.d_model, ctx);
  const auto masks = self_attention_masks(tokens, /*causal=*/false);
  for (const auto& layer : p.enc_layers)
    x = encoder_layer(x, masks, *layer, model.spec.activation,
                      model.spec.pre_norm ? NormPlacement::Pre : NormPlacement::Post, ctx);
  return x;
}

Tensor<Real> decode_train(const ModelGraph& model, const std::string& lang, const Tensor<Real>& memory,
                          const BatchSide& memory_tokens, const BatchSide& dec_input, const ForwardCtx<Real>& ctx) {
  const auto& p = model.pack(lang);
  if (memory.ndim() != 3 || memory.shape()[0] != memory_tokens.b || memory.shape()[1] != memory_tokens.t)
    throw std::invalid_argument("decode_train: memory " + shape_str(memory.shape()) + " does not match its mask (" +
                                std::to_string(memory_tokens.b) + "," + std::to_string(memory_tokens.t) + ")");
  const int code = p.vocab.lang_code_id(lang);
  for (long s = 0; s < dec_input.b; ++s)
    if (dec_input.at(s, 0) != code)
      throw std::invalid_argument("decode_train: decoder input row " + std::to_string(s) +
                                  " does not start with the language code of " + lang);

  auto x = embed_with_positions(p.dec_embed, dec_input, model.spec.d_model, ctx);
  const auto self_masks = self_attention_masks(dec_input, /*causal=*/true);
  const auto mem_masks = memory_masks(dec_input.t, memory_tokens);
  const std::optional<Tensor<Real>> mem = memory;
  for (int l = 1; l <= model.spec.dec_layers; ++l) {
    const auto& layer = p.dec_layers[static_cast<std::size_t>(l - 1)];
    const std::optional<Tensor<Real>> layer_mem = layer->has_cross() ? mem : std::nullopt;
    x = decoder_layer(x, self_masks, layer_mem, mem_masks, *layer, model.spec.activation,
                      model.spec.pre_norm ? NormPlacement::Pre : NormPlacement::Post, ctx);
  }
  auto logits = matmul_nt(x.reshaped({dec_input.b * dec_input.t, static_cast<long>(model.spec.d_model)}), p.dec_embed);
  return logits.reshaped({dec_input.b, dec_input.t, static_cast<long>(p.vocab.size())});
}

Tensor<Real> dae_forward(const ModelGraph& model, const std::string& lang, const BatchSide& noised_tokens,
                         const BatchSide& dec_input, const ForwardCtx<Real>& ctx) {
  auto memory = encode(model, lang, noised_tokens, ctx);
  return decode_train(model, lang, memory, noised_tokens, dec_input, ctx);
}

BatchSide make_decoder_input(const BatchSide& labels, const Vocab& vocab, const std::string& tgt_lang) {
  BatchSide in;
  in.b = labels.b;
  in.t = labels.t;
  in.ids.assign(labels.ids.size(), Vocab::kPad);
  in.is_pad.assign(labels.is_pad.size(), 1);
  const int code = vocab.lang_code_id(tgt_lang);
  for (long s = 0; s < labels.b; ++s) {
    in.ids[static_cast<std::size_t>(s * in.t)] = code;
    in.is_pad[static_cast<std::size_t>(s * in.t)] = 0;
    for (long i = 1; i < in.t; ++i) {
      if (!labels.pad_at(s, i - 1)) {
        in.ids[static_cast<std::size_t>(s * in.t + i)] = labels.at(s, i - 1);
        in.is_pad[static_cast<std::size_t>(s * in.t + i)] = 0;
      }
    }
  }
  return in;
}

}  // namespace mnmt
