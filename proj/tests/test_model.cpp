#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "mnmt/model.hpp"

using namespace mnmt;

namespace {

SharingSpec tiny_spec() {
  SharingSpec s;
  s.enc_layers = 3;
  s.dec_layers = 3;
  s.enc_shared = LayerRange{2, 3};
  s.dec_shared = std::nullopt;
  s.cross_range = LayerRange{1, 2};
  s.d_model = 16;
  s.d_ff = 24;
  s.n_heads = 2;
  s.dropout = 0;
  return s;
}

std::vector<std::pair<std::string, Vocab>> tiny_langs(int k) {
  std::vector<std::string> ids;
  for (int i = 0; i < k; ++i) ids.push_back("l" + std::to_string(i));
  auto corpus = gen_base_corpus(40, 3);
  std::vector<std::pair<std::string, Vocab>> out;
  for (const auto& id : ids) out.emplace_back(id, build_vocab(corpus.train, ids));
  return out;
}

BatchSide side_from_rows(const std::vector<std::vector<int>>& rows) {
  BatchSide s;
  s.b = static_cast<long>(rows.size());
  s.t = 0;
  for (const auto& r : rows) s.t = std::max(s.t, static_cast<long>(r.size()));
  s.ids.assign(static_cast<std::size_t>(s.b * s.t), Vocab::kPad);
  s.is_pad.assign(static_cast<std::size_t>(s.b * s.t), 1);
  for (long i = 0; i < s.b; ++i)
    for (long j = 0; j < static_cast<long>(rows[static_cast<std::size_t>(i)].size()); ++j) {
      s.ids[static_cast<std::size_t>(i * s.t + j)] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      s.is_pad[static_cast<std::size_t>(i * s.t + j)] = 0;
    }
  return s;
}

}  // namespace

TEST_CASE("spec validation accepts the published configurations") {
  CHECK_NOTHROW(validate_spec(paper_scale_spec()));
  CHECK_NOTHROW(validate_spec(desk_scale_spec()));

  // no encoder sharing with cross-attention everywhere (ablation row)
  SharingSpec s;
  s.enc_layers = 8;
  s.dec_layers = 10;
  s.enc_shared = std::nullopt;
  s.cross_range = LayerRange{1, 10};
  CHECK_NOTHROW(validate_spec(s));

  s.cross_range = LayerRange{1, 0};
  CHECK_THROWS_WITH_AS(validate_spec(s), doctest::Contains("cross"), std::invalid_argument);
  s.cross_range = LayerRange{1, 11};
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);
  s.cross_range = LayerRange{1, 10};
  s.enc_shared = LayerRange{0, 4};
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);
  s.enc_shared = std::nullopt;
  s.n_heads = 7;
  CHECK_THROWS_AS(validate_spec(s), std::invalid_argument);
}

TEST_CASE("sharing notation parses and prints the published rows") {
  SharingSpec s;
  s.enc_layers = 8;
  s.dec_layers = 10;

  apply_notation(s, "E3-8,C1-10");
  CHECK(s.enc_shared == LayerRange{3, 8});
  CHECK_FALSE(s.dec_shared.has_value());
  CHECK(s.cross_range == LayerRange{1, 10});
  CHECK(s.notation() == "E3-8,C1-10");

  apply_notation(s, "C1-10");
  CHECK_FALSE(s.enc_shared.has_value());
  CHECK(s.notation() == "C1-10");

  apply_notation(s, "DC3-8");
  CHECK(s.dec_shared == LayerRange{3, 8});
  CHECK(s.cross_range == LayerRange{3, 8});
  CHECK(s.notation() == "DC3-8");

  apply_notation(s, "E3-8,DC3-8");
  CHECK(s.notation() == "E3-8,DC3-8");

  apply_notation(s, "E5-8, DC3-8");
  CHECK(s.enc_shared == LayerRange{5, 8});

  CHECK_THROWS_AS(apply_notation(s, "Q1-2"), std::invalid_argument);
  CHECK_THROWS_AS(apply_notation(s, "E18"), std::invalid_argument);
}

TEST_CASE("build_model is deterministic and rejects duplicates") {
  auto langs = tiny_langs(2);
  auto m1 = build_model(tiny_spec(), langs, 99);
  auto m2 = build_model(tiny_spec(), langs, 99);
  auto p1 = m1.named_parameters();
  auto p2 = m2.named_parameters();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].first == p2[i].first);
    CHECK(p1[i].second.value() == p2[i].second.value());
  }
  auto dup = langs;
  dup.push_back(langs.front());
  CHECK_THROWS_AS(build_model(tiny_spec(), dup, 99), std::invalid_argument);
}

TEST_CASE("parameter totals match the closed-form counting formulas") {
  auto spec = tiny_spec();
  for (int k : {1, 3}) {
    auto langs = tiny_langs(k);
    auto model = build_model(spec, langs, 7);
    const long v = langs.front().second.size();
    const long expected = k * pack_private_param_count(spec, v) + shared_param_count(spec);
    CHECK(model.total_parameter_count() == expected);
    auto rep = tie_report(model);
    CHECK(rep.total_params == expected);
  }

  // one language with full sharing equals a plain bilingual transformer
  SharingSpec full = tiny_spec();
  full.enc_shared = LayerRange{1, 3};
  auto langs1 = tiny_langs(1);
  auto m = build_model(full, langs1, 1);
  const long v = langs1.front().second.size();
  long plain = 2 * v * full.d_model;
  for (int l = 1; l <= full.enc_layers; ++l) plain += layer_param_count(full.d_model, full.d_ff, false);
  for (int l = 1; l <= full.dec_layers; ++l)
    plain += layer_param_count(full.d_model, full.d_ff, full.cross_range.contains(l));
  CHECK(m.total_parameter_count() == plain);
}

TEST_CASE("decoder layers outside the cross range carry no cross parameters") {
  auto model = build_model(tiny_spec(), tiny_langs(1), 5);
  const auto& pack = model.pack("l0");
  for (int l = 1; l <= model.spec.dec_layers; ++l) {
    auto& layer = *pack.dec_layers[static_cast<std::size_t>(l - 1)];
    const bool in_cross = model.spec.cross_range.contains(l);
    CHECK(layer.has_cross() == in_cross);
    CHECK(layer.parameter_count() == layer_param_count(16, 24, in_cross));
  }
}

TEST_CASE("tying is real: shared storage is visible through every language view") {
  auto model = build_model(tiny_spec(), tiny_langs(3), 11);
  auto& a = model.pack("l0");
  auto& b = model.pack("l1");
  // layer 2 is shared, layer 1 is private
  CHECK(a.enc_layers[1].get() == b.enc_layers[1].get());
  CHECK(a.enc_layers[0].get() != b.enc_layers[0].get());

  auto& wq_a = a.enc_layers[1]->self_attn.wq;
  auto& wq_b = b.enc_layers[1]->self_attn.wq;
  wq_a.value()(0, 0) = 123.5;
  CHECK(wq_b.value()(0, 0) == 123.5);
  CHECK(wq_a.storage().get() == wq_b.storage().get());
}

TEST_CASE("tie report: group referents and totals") {
  auto model = build_model(tiny_spec(), tiny_langs(3), 13);
  auto rep = tie_report(model);
  long shared_groups = 0;
  for (const auto& g : rep.groups) {
    if (g.storage.rfind("shared.", 0) == 0) {
      CHECK(g.languages.size() == 3);
      ++shared_groups;
    }
  }
  // two shared encoder layers, each with 16 tensors visited
  CHECK(shared_groups == 2 * 16);
  CHECK(rep.shared_params + rep.per_language_params == rep.total_params);

  // the tied output projection shows up as a second view of dec_embed
  bool saw_out_proj = false;
  for (const auto& g : rep.groups)
    if (g.storage == "lang.l0.dec_embed") {
      saw_out_proj = g.views.size() == 2;
    }
  CHECK(saw_out_proj);

  // without sharing, every non-embedding group has exactly one referent
  SharingSpec none = tiny_spec();
  none.enc_shared = std::nullopt;
  auto iso = build_model(none, tiny_langs(2), 13);
  for (const auto& g : tie_report(iso).groups)
    if (g.storage.rfind("lang.", 0) == 0 && g.storage.find("dec_embed") == std::string::npos)
      CHECK(g.languages.size() == 1);
}

TEST_CASE("encode: equal weights and inputs give equal memory; no sharing isolates languages") {
  SharingSpec none = tiny_spec();
  none.enc_shared = std::nullopt;
  auto langs = tiny_langs(2);
  auto model = build_model(none, langs, 17);

  // copy l0's private encoder into l1
  auto& a = model.pack("l0");
  auto& b = model.pack("l1");
  b.enc_embed.value() = a.enc_embed.value();
  for (std::size_t l = 0; l < a.enc_layers.size(); ++l) {
    a.enc_layers[l]->visit([&](const std::string& name, Tensor<Real>& t) {
      b.enc_layers[l]->visit([&](const std::string& name2, Tensor<Real>& t2) {
        if (name == name2) t2.value() = t.value();
      });
    });
  }
  auto tokens = side_from_rows({{7, 8, 9, Vocab::kEos}, {10, 11, Vocab::kEos}});
  auto mem_a = encode(model, "l0", tokens);
  auto mem_b = encode(model, "l1", tokens);
  CHECK(mem_a.shape() == Shape{2, 4, 16});
  CHECK(mem_a.value() == mem_b.value());

  // perturbing l0's encoder leaves l1's memory unchanged
  a.enc_layers[0]->self_attn.wq.value().setConstant(0.42);
  a.enc_embed.value().setConstant(0.1);
  auto mem_b2 = encode(model, "l1", tokens);
  CHECK(mem_b.value() == mem_b2.value());

  CHECK_THROWS_AS(encode(model, "nope", tokens), std::invalid_argument);
  auto bad = side_from_rows({{100000}});
  CHECK_THROWS_AS(encode(model, "l0", bad), std::out_of_range);
}

TEST_CASE("decode_train: language-code precondition and tied logits shape") {
  auto langs = tiny_langs(2);
  auto model = build_model(tiny_spec(), langs, 19);
  const auto& vocab = langs.front().second;
  auto src = side_from_rows({{8, 9, Vocab::kEos}});
  auto memory = encode(model, "l0", src);

  BatchSide labels = side_from_rows({{8, 9, Vocab::kEos}});
  auto dec_in = make_decoder_input(labels, vocab, "l1");
  CHECK(dec_in.at(0, 0) == vocab.lang_code_id("l1"));
  CHECK(dec_in.at(0, 1) == 8);
  CHECK(dec_in.at(0, 2) == 9);

  auto logits = decode_train(model, "l1", memory, src, dec_in);
  CHECK(logits.shape() == Shape{1, 3, static_cast<long>(vocab.size())});

  // wrong first token is rejected
  BatchSide raw = labels;
  CHECK_THROWS_WITH_AS(decode_train(model, "l1", memory, src, raw), doctest::Contains("language code"),
                       std::invalid_argument);

  // memory/mask mismatch is rejected
  auto short_src = side_from_rows({{8, Vocab::kEos}});
  CHECK_THROWS_AS(decode_train(model, "l1", memory, short_src, dec_in), std::invalid_argument);
}

TEST_CASE("zeroed cross-attention makes logits invariant to encoder memory") {
  auto langs = tiny_langs(1);
  auto model = build_model(tiny_spec(), langs, 23);
  auto& pack = model.pack("l0");
  for (auto& layer : pack.dec_layers) {
    if (!layer->has_cross()) continue;
    layer->cross_attn->wo.value().setZero();
    layer->cross_attn->bo.value().setZero();
  }
  auto src = side_from_rows({{8, 9, 10, Vocab::kEos}});
  auto labels = side_from_rows({{8, 9, Vocab::kEos}});
  auto dec_in = make_decoder_input(labels, langs.front().second, "l0");

  auto memory = encode(model, "l0", src);
  auto logits1 = decode_train(model, "l0", memory, src, dec_in);
  auto memory2 = memory;
  Tensor<Real> perturbed(memory.shape(), memory.value() * 3.25);
  auto logits2 = decode_train(model, "l0", perturbed, src, dec_in);
  CHECK(logits1.value() == logits2.value());
}

TEST_CASE("dae_forward is exactly the encode/decode composition") {
  auto langs = tiny_langs(1);
  auto model = build_model(tiny_spec(), langs, 29);
  auto noised = side_from_rows({{9, 8, Vocab::kEos}});
  auto labels = side_from_rows({{8, 9, 10, Vocab::kEos}});
  auto dec_in = make_decoder_input(labels, langs.front().second, "l0");

  auto via_op = dae_forward(model, "l0", noised, dec_in);
  auto memory = encode(model, "l0", noised);
  auto composed = decode_train(model, "l0", memory, noised, dec_in);
  CHECK(via_op.value() == composed.value());
}

TEST_CASE("expand_language aliases old storages and adds one pack of private parameters") {
  auto spec = tiny_spec();
  auto langs = tiny_langs(2);
  auto model = build_model(spec, langs, 31);
  const long before = model.total_parameter_count();
  const auto before_params = model.named_parameters();
  std::vector<const void*> before_ptrs;
  for (const auto& [n, t] : before_params) before_ptrs.push_back(t.storage().get());
  const auto before_ties = model.tie_table().size();

  auto corpus = gen_base_corpus(40, 3);
  auto vocab = build_vocab(corpus.train, {"l0", "l1", "l2"});
  expand_language(model, "l2", vocab, 555);

  // pre-existing storages are the same objects
  auto after_params = model.named_parameters();
  for (std::size_t i = 0; i < before_ptrs.size(); ++i)
    CHECK(after_params[i].second.storage().get() == before_ptrs[i]);

  CHECK(model.total_parameter_count() - before == pack_private_param_count(spec, vocab.size()));
  // tie table grows by exactly the new pack's view entries
  const auto after_ties = model.tie_table();
  CHECK(after_ties.size() > before_ties);
  for (std::size_t i = 0; i < before_ties; ++i) CHECK(after_ties[i].first.rfind("lang.l2", 0) != 0);

  CHECK_THROWS_AS(expand_language(model, "l2", vocab, 556), std::invalid_argument);
}
