#include "mnmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mnmt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Greedy decoding
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> greedy_decode_batch(const ModelGraph& model, const std::string& src_lang,
                                                  const std::string& tgt_lang,
                                                  const std::vector<std::vector<int>>& src_content_ids,
                                                  long max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  const auto& tgt_pack = model.pack(tgt_lang);
  model.pack(src_lang);  // both languages must be registered
  const long b = static_cast<long>(src_content_ids.size());
  if (b == 0) return {};

  BatchSide src;
  src.b = b;
  src.t = 0;
  for (const auto& s : src_content_ids) src.t = std::max(src.t, static_cast<long>(s.size()) + 1);
  src.ids.assign(static_cast<std::size_t>(src.b * src.t), Vocab::kPad);
  src.is_pad.assign(static_cast<std::size_t>(src.b * src.t), 1);
  for (long s = 0; s < b; ++s) {
    const auto& row = src_content_ids[static_cast<std::size_t>(s)];
    for (long i = 0; i < static_cast<long>(row.size()); ++i) {
      src.ids[static_cast<std::size_t>(s * src.t + i)] = row[static_cast<std::size_t>(i)];
      src.is_pad[static_cast<std::size_t>(s * src.t + i)] = 0;
    }
    src.ids[static_cast<std::size_t>(s * src.t + static_cast<long>(row.size()))] = Vocab::kEos;
    src.is_pad[static_cast<std::size_t>(s * src.t + static_cast<long>(row.size()))] = 0;
  }

  const ForwardCtx<Real> ctx;  // eval mode
  auto memory = encode(model, src_lang, src, ctx);

  // ids never produced by decoding
  std::vector<char> banned(static_cast<std::size_t>(tgt_pack.vocab.size()), 0);
  banned[Vocab::kPad] = 1;
  banned[Vocab::kMask] = 1;
  for (const auto& lang : tgt_pack.vocab.lang_codes()) banned[static_cast<std::size_t>(tgt_pack.vocab.lang_code_id(lang))] = 1;

  const int code = tgt_pack.vocab.lang_code_id(tgt_lang);
  std::vector<std::vector<int>> emitted(static_cast<std::size_t>(b));
  std::vector<char> done(static_cast<std::size_t>(b), 0);

  for (long pos = 0; pos < max_len; ++pos) {
    BatchSide dec;
    dec.b = b;
    dec.t = pos + 1;
    dec.ids.assign(static_cast<std::size_t>(dec.b * dec.t), Vocab::kPad);
    dec.is_pad.assign(static_cast<std::size_t>(dec.b * dec.t), 0);
    for (long s = 0; s < b; ++s) {
      dec.ids[static_cast<std::size_t>(s * dec.t)] = code;
      const auto& em = emitted[static_cast<std::size_t>(s)];
      for (long i = 0; i < pos; ++i)
        dec.ids[static_cast<std::size_t>(s * dec.t + i + 1)] =
            i < static_cast<long>(em.size()) ? em[static_cast<std::size_t>(i)] : Vocab::kEos;
    }
    auto logits = decode_train(model, tgt_lang, memory, src, dec, ctx);
    bool all_done = true;
    for (long s = 0; s < b; ++s) {
      if (done[static_cast<std::size_t>(s)]) continue;
      const long row = s * dec.t + pos;
      int best = -1;
      Real best_v = 0;
      for (long v = 0; v < logits.cols(); ++v) {
        if (banned[static_cast<std::size_t>(v)]) continue;
        const Real lv = logits.value()(row, v);
        if (best < 0 || lv > best_v) {
          best = static_cast<int>(v);
          best_v = lv;
        }
      }
      if (best == Vocab::kEos) {
        done[static_cast<std::size_t>(s)] = 1;
      } else {
        emitted[static_cast<std::size_t>(s)].push_back(best);
        all_done = false;
      }
    }
    if (all_done && std::all_of(done.begin(), done.end(), [](char d) { return d != 0; })) break;
  }
  return emitted;
}

std::vector<int> greedy_decode(const ModelGraph& model, const std::string& src_lang, const std::string& tgt_lang,
                               const std::vector<int>& src_content_ids, long max_len) {
  return greedy_decode_batch(model, src_lang, tgt_lang, {src_content_ids}, max_len).front();
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references) {
  if (hypotheses.empty() || hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: need equally many hypotheses and references, and at least one");
  constexpr int kMaxOrder = 4;
  long matches[kMaxOrder] = {0, 0, 0, 0};
  long totals[kMaxOrder] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;

  using Ngram = std::vector<int>;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& ref = references[i];
    hyp_len += static_cast<long>(hyp.size());
    ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      std::map<Ngram, long> ref_counts;
      for (std::size_t p = 0; p + n <= ref.size(); ++p)
        ++ref_counts[Ngram(ref.begin() + static_cast<long>(p), ref.begin() + static_cast<long>(p + n))];
      std::map<Ngram, long> hyp_counts;
      for (std::size_t p = 0; p + n <= hyp.size(); ++p)
        ++hyp_counts[Ngram(hyp.begin() + static_cast<long>(p), hyp.begin() + static_cast<long>(p + n))];
      for (const auto& [ng, cnt] : hyp_counts) {
        totals[n - 1] += cnt;
        auto it = ref_counts.find(ng);
        if (it != ref_counts.end()) matches[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  double log_precision_sum = 0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (totals[n] == 0 || matches[n] == 0) return 0.0;  // zero precision, no smoothing
    log_precision_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                                      : 1.0;
  return 100.0 * bp * std::exp(log_precision_sum / kMaxOrder);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void EvalReport::recompute_averages() {
  double sup = 0, zs = 0;
  long n_sup = 0, n_zs = 0;
  for (const auto& d : directions) {
    if (d.supervised) {
      sup += d.bleu;
      ++n_sup;
    } else {
      zs += d.bleu;
      ++n_zs;
    }
  }
  supervised_avg = n_sup ? sup / static_cast<double>(n_sup) : 0;
  zero_shot_avg = n_zs ? zs / static_cast<double>(n_zs) : 0;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  auto block = [&](bool supervised, const char* title) {
    os << title << "\n";
    bool any = false;
    for (const auto& d : directions) {
      if (d.supervised != supervised) continue;
      os << "  " << std::setw(4) << d.src << " -> " << std::setw(4) << d.tgt << "  " << std::setw(6) << d.bleu
         << "  (" << d.sentences << " sentences)\n";
      any = true;
    }
    if (!any) os << "  (none)\n";
  };
  block(true, "supervised directions");
  block(false, "zero-shot directions");
  os << "supervised avg: " << supervised_avg << "\n";
  os << "zero-shot avg:  " << zero_shot_avg << "\n";
  return os.str();
}

std::string EvalReport::to_json_string() const {
  json j;
  j["directions"] = json::array();
  for (const auto& d : directions)
    j["directions"].push_back({{"src", d.src},
                               {"tgt", d.tgt},
                               {"bleu", d.bleu},
                               {"supervised", d.supervised},
                               {"sentences", d.sentences}});
  j["supervised_avg"] = supervised_avg;
  j["zero_shot_avg"] = zero_shot_avg;
  return j.dump(2);
}

std::vector<std::pair<std::string, std::string>> all_directions(const ModelGraph& model) {
  std::vector<std::pair<std::string, std::string>> dirs;
  for (const auto& a : model.lang_order)
    for (const auto& b : model.lang_order)
      if (a != b) dirs.emplace_back(a, b);
  return dirs;
}

EvalReport zero_shot_matrix(const ModelGraph& model, const DataSet& ds,
                            const std::vector<std::pair<std::string, std::string>>& directions,
                            const EvalOptions& opts) {
  EvalReport rep;
  for (const auto& [src, tgt] : directions) {
    if (!model.has_lang(src) || !model.has_lang(tgt))
      throw std::invalid_argument("evaluate: direction " + src + "->" + tgt + " uses an unregistered language");
    const auto& src_sents = ds.split(opts.split, src);
    const auto& tgt_sents = ds.split(opts.split, tgt);
    const long n = opts.max_sentences > 0
                       ? std::min<long>(opts.max_sentences, static_cast<long>(src_sents.size()))
                       : static_cast<long>(src_sents.size());
    const auto& src_vocab = ds.vocabs.at(src);
    const auto& tgt_vocab = ds.vocabs.at(tgt);
    std::vector<std::vector<int>> inputs, refs;
    inputs.reserve(static_cast<std::size_t>(n));
    refs.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
      inputs.push_back(src_vocab.encode(src_sents[static_cast<std::size_t>(i)]));
      refs.push_back(tgt_vocab.encode(tgt_sents[static_cast<std::size_t>(i)]));
    }
    auto hyps = greedy_decode_batch(model, src, tgt, inputs, opts.max_decode_len);
    DirectionScore score;
    score.src = src;
    score.tgt = tgt;
    score.bleu = corpus_bleu(hyps, refs);
    score.supervised = ds.manifest.is_supervised(src, tgt);
    score.sentences = n;
    rep.directions.push_back(std::move(score));
  }
  rep.recompute_averages();
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'N', 'M', 'T', 'C', 'K', 'P', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw std::runtime_error("checkpoint: truncated file");
}

void write_mat(std::ostream& os, const Mat<Real>& m) {
  write_bytes(os, m.data(), sizeof(Real) * static_cast<std::size_t>(m.size()));
}

void read_mat(std::istream& is, Mat<Real>& m) {
  read_bytes(is, m.data(), sizeof(Real) * static_cast<std::size_t>(m.size()));
}

json spec_to_json(const SharingSpec& s) {
  json j;
  j["enc_layers"] = s.enc_layers;
  j["dec_layers"] = s.dec_layers;
  if (s.enc_shared && !s.enc_shared->empty())
    j["enc_shared"] = {s.enc_shared->lo, s.enc_shared->hi};
  else
    j["enc_shared"] = nullptr;
  if (s.dec_shared && !s.dec_shared->empty())
    j["dec_shared"] = {s.dec_shared->lo, s.dec_shared->hi};
  else
    j["dec_shared"] = nullptr;
  j["cross"] = {s.cross_range.lo, s.cross_range.hi};
  j["d_model"] = s.d_model;
  j["d_ff"] = s.d_ff;
  j["n_heads"] = s.n_heads;
  j["dropout"] = s.dropout;
  j["pre_norm"] = s.pre_norm;
  j["activation"] = s.activation == Activation::Gelu ? "gelu" : "relu";
  return j;
}

SharingSpec spec_from_json(const json& j) {
  SharingSpec s;
  s.enc_layers = j.at("enc_layers").get<int>();
  s.dec_layers = j.at("dec_layers").get<int>();
  if (j.at("enc_shared").is_null())
    s.enc_shared = std::nullopt;
  else
    s.enc_shared = LayerRange{j.at("enc_shared").at(0).get<int>(), j.at("enc_shared").at(1).get<int>()};
  if (j.at("dec_shared").is_null())
    s.dec_shared = std::nullopt;
  else
    s.dec_shared = LayerRange{j.at("dec_shared").at(0).get<int>(), j.at("dec_shared").at(1).get<int>()};
  s.cross_range = LayerRange{j.at("cross").at(0).get<int>(), j.at("cross").at(1).get<int>()};
  s.d_model = j.at("d_model").get<int>();
  s.d_ff = j.at("d_ff").get<int>();
  s.n_heads = j.at("n_heads").get<int>();
  s.dropout = j.at("dropout").get<Real>();
  s.pre_norm = j.at("pre_norm").get<bool>();
  s.activation = j.at("activation").get<std::string>() == "relu" ? Activation::Relu : Activation::Gelu;
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelGraph& model, const RAdam* optimizer, long step,
                     std::uint64_t seed) {
  auto params = model.named_parameters();
  json header;
  header["spec"] = spec_to_json(model.spec);
  header["step"] = step;
  header["seed"] = std::to_string(seed);
  header["languages"] = json::array();
  for (const auto& lang : model.lang_order) {
    const auto& p = model.pack(lang);
    json lj;
    lj["id"] = lang;
    lj["vocab_hash"] = std::to_string(p.vocab.content_hash());
    lj["vocab_tokens"] = p.vocab.tokens();
    lj["lang_codes"] = p.vocab.lang_codes();
    header["languages"].push_back(lj);
  }
  header["params"] = json::array();
  for (const auto& [name, t] : params) {
    header["params"].push_back({{"name", name}, {"rows", t.value().rows()}, {"cols", t.value().cols()}});
  }
  header["has_optimizer"] = optimizer != nullptr;
  if (optimizer) header["optimizer_step"] = optimizer->step_count();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_bytes(os, kMagic, sizeof(kMagic));
  write_bytes(os, &kVersion, sizeof(kVersion));
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  write_bytes(os, &hlen, sizeof(hlen));
  write_bytes(os, h.data(), h.size());
  for (const auto& [name, t] : params) write_mat(os, t.value());
  if (optimizer) {
    if (optimizer->params().size() != params.size())
      throw std::invalid_argument("checkpoint: optimizer is not bound to this model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_mat(os, optimizer->moment1(i));
      write_mat(os, optimizer->moment2(i));
    }
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: " + path + " is not a model checkpoint");
  std::uint32_t version = 0;
  read_bytes(is, &version, sizeof(version));
  if (version != kVersion)
    throw std::runtime_error("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kVersion) + ")");
  std::uint64_t hlen = 0;
  read_bytes(is, &hlen, sizeof(hlen));
  std::string hstr(hlen, '\0');
  read_bytes(is, hstr.data(), hlen);
  json header = json::parse(hstr);

  LoadedCheckpoint out;
  out.step = header.at("step").get<long>();
  out.seed = std::stoull(header.at("seed").get<std::string>());

  const SharingSpec spec = spec_from_json(header.at("spec"));
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& lj : header.at("languages")) {
    auto vocab = Vocab::from_tokens(lj.at("vocab_tokens").get<std::vector<std::string>>(),
                                    lj.at("lang_codes").get<std::vector<std::string>>());
    if (std::to_string(vocab.content_hash()) != lj.at("vocab_hash").get<std::string>())
      throw std::runtime_error("checkpoint: stored vocabulary hash mismatch for " + lj.at("id").get<std::string>());
    langs.emplace_back(lj.at("id").get<std::string>(), std::move(vocab));
  }
  out.model = build_model(spec, langs, out.seed);

  auto params = out.model.named_parameters();
  const auto& pj = header.at("params");
  if (pj.size() != params.size())
    throw std::runtime_error("checkpoint: parameter census mismatch (file " + std::to_string(pj.size()) +
                             ", model " + std::to_string(params.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (pj.at(i).at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint: parameter order mismatch at " + name);
    if (pj.at(i).at("rows").get<long>() != t.value().rows() || pj.at(i).at("cols").get<long>() != t.value().cols())
      throw std::runtime_error("checkpoint: parameter shape mismatch at " + name);
    read_mat(is, const_cast<Tensor<Real>&>(t).value());
  }
  out.has_optimizer = header.at("has_optimizer").get<bool>();
  if (out.has_optimizer) {
    out.optimizer_step = header.at("optimizer_step").get<long>();
    out.moment1.resize(params.size());
    out.moment2.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params[i].second;
      out.moment1[i] = Mat<Real>::Zero(t.value().rows(), t.value().cols());
      out.moment2[i] = Mat<Real>::Zero(t.value().rows(), t.value().cols());
      read_mat(is, out.moment1[i]);
      read_mat(is, out.moment2[i]);
    }
  }
  return out;
}

void verify_vocab_compatibility(const ModelGraph& model, const DataSet& ds) {
  for (const auto& lang : model.lang_order) {
    auto it = ds.vocabs.find(lang);
    if (it == ds.vocabs.end()) throw std::runtime_error("dataset has no vocabulary for model language " + lang);
    if (it->second.content_hash() != model.pack(lang).vocab.content_hash())
      throw std::runtime_error("vocabulary hash mismatch for " + lang +
                               ": the dataset does not match the checkpoint");
  }
}

// ---------------------------------------------------------------------------
// Training + ablations
// ---------------------------------------------------------------------------

ModelGraph train_model(const DataSet& ds, const SharingSpec& spec, const TrainConfig& cfg, std::ostream* log) {
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& lang : ds.manifest.lang_ids()) langs.emplace_back(lang, ds.vocabs.at(lang));
  ModelGraph model = build_model(spec, langs, cfg.seed);
  std::vector<std::string> dae_langs = ds.manifest.lang_ids();
  Trainer trainer(model, ds, cfg, ds.manifest.supervised, dae_langs);
  trainer.run(log);
  return model;
}

AblationReport ablation_structure(const std::vector<std::string>& notations, const DataSet& ds,
                                  const SharingSpec& base_spec, const TrainConfig& cfg, const EvalOptions& opts) {
  AblationReport rep;
  for (const auto& notation : notations) {
    SharingSpec spec = base_spec;
    apply_notation(spec, notation);
    ModelGraph model = train_model(ds, spec, cfg);
    AblationRow row;
    row.label = spec.notation();
    row.report = zero_shot_matrix(model, ds, all_directions(model), opts);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::vector<TrainTask> parse_task_row(const std::string& row, Real* align_weight) {
  std::string r;
  for (char c : row) r += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (align_weight) *align_weight = 0;
  if (r == "mt") return {TrainTask::MT};
  if (r == "mt+ae" || r == "+ae") return {TrainTask::MT, TrainTask::AE};
  if (r == "mt+dae" || r == "+dae") return {TrainTask::MT, TrainTask::DAE};
  if (r == "mt+dae+align" || r == "+dae+align") {
    if (align_weight) *align_weight = 1.0;
    return {TrainTask::MT, TrainTask::DAE};
  }
  throw std::invalid_argument("unknown task row: " + row +
                              " (expected mt, mt+ae, mt+dae, or mt+dae+align)");
}

AblationReport ablation_tasks(const std::vector<std::string>& rows, const DataSet& ds, const SharingSpec& spec,
                              const TrainConfig& cfg, const EvalOptions& opts) {
  AblationReport rep;
  for (const auto& row_name : rows) {
    TrainConfig row_cfg = cfg;
    row_cfg.tasks = parse_task_row(row_name, &row_cfg.align_weight);
    ModelGraph model = train_model(ds, spec, row_cfg);
    AblationRow row;
    row.label = row_name;
    row.report = zero_shot_matrix(model, ds, all_directions(model), opts);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string AblationReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::setw(20) << std::left << "configuration" << std::right << std::setw(12) << "zero-shot" << std::setw(12)
     << "supervised" << "\n";
  for (const auto& row : rows)
    os << std::setw(20) << std::left << row.label << std::right << std::setw(12) << row.report.zero_shot_avg
       << std::setw(12) << row.report.supervised_avg << "\n";
  // ranking by zero-shot average
  std::vector<const AblationRow*> order;
  for (const auto& r : rows) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(),
                   [](const AblationRow* a, const AblationRow* b) {
                     return a->report.zero_shot_avg > b->report.zero_shot_avg;
                   });
  os << "ranking (zero-shot): ";
  for (std::size_t i = 0; i < order.size(); ++i) os << (i ? " > " : "") << order[i]->label;
  os << "\n";
  return os.str();
}

std::string AblationReport::to_json_string() const {
  json j = json::array();
  for (const auto& row : rows)
    j.push_back({{"label", row.label}, {"report", json::parse(row.report.to_json_string())}});
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Run configuration files
// ---------------------------------------------------------------------------

RunConfig default_run_config() { return RunConfig{}; }

namespace {

TrainTask task_from_string(const std::string& s) {
  if (s == "MT" || s == "mt") return TrainTask::MT;
  if (s == "AE" || s == "ae") return TrainTask::AE;
  if (s == "DAE" || s == "dae") return TrainTask::DAE;
  throw std::invalid_argument("unknown task: " + s);
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  json j = json::parse(f);
  RunConfig rc;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    SharingSpec& s = rc.model;
    if (m.contains("preset")) {
      const std::string preset = m.at("preset").get<std::string>();
      if (preset == "desk")
        s = desk_scale_spec();
      else if (preset == "paper")
        s = paper_scale_spec();
      else
        throw std::invalid_argument("unknown model preset: " + preset);
    }
    if (m.contains("enc_layers")) s.enc_layers = m.at("enc_layers").get<int>();
    if (m.contains("dec_layers")) s.dec_layers = m.at("dec_layers").get<int>();
    if (m.contains("d_model")) s.d_model = m.at("d_model").get<int>();
    if (m.contains("d_ff")) s.d_ff = m.at("d_ff").get<int>();
    if (m.contains("n_heads")) s.n_heads = m.at("n_heads").get<int>();
    if (m.contains("dropout")) s.dropout = m.at("dropout").get<Real>();
    if (m.contains("pre_norm")) s.pre_norm = m.at("pre_norm").get<bool>();
    if (m.contains("activation"))
      s.activation = m.at("activation").get<std::string>() == "relu" ? Activation::Relu : Activation::Gelu;
    if (m.contains("notation")) apply_notation(s, m.at("notation").get<std::string>());
    validate_spec(s);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    TrainConfig& c = rc.train;
    if (t.contains("peak_lr")) c.peak_lr = t.at("peak_lr").get<Real>();
    if (t.contains("warmup_steps")) c.warmup_steps = t.at("warmup_steps").get<long>();
    if (t.contains("max_steps")) c.max_steps = t.at("max_steps").get<long>();
    if (t.contains("batch_size")) c.batch_size = t.at("batch_size").get<long>();
    if (t.contains("max_len")) c.max_len = t.at("max_len").get<long>();
    if (t.contains("seed")) c.seed = t.at("seed").get<std::uint64_t>();
    if (t.contains("align_weight")) c.align_weight = t.at("align_weight").get<Real>();
    if (t.contains("label_smoothing")) c.label_smoothing = t.at("label_smoothing").get<Real>();
    if (t.contains("eval_every")) c.eval_every = t.at("eval_every").get<long>();
    if (t.contains("tasks")) {
      c.tasks.clear();
      for (const auto& ts : t.at("tasks")) c.tasks.push_back(task_from_string(ts.get<std::string>()));
    }
    c.validate();
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    NoiseConfig& nc = rc.train.noise;
    if (n.contains("p_delete")) nc.p_delete = n.at("p_delete").get<double>();
    if (n.contains("p_mask")) nc.p_mask = n.at("p_mask").get<double>();
    if (n.contains("shuffle_window")) nc.shuffle_window = n.at("shuffle_window").get<int>();
    if (n.contains("span")) nc.span = n.at("span").get<int>();
    if (n.contains("unit")) nc.unit = n.at("unit").get<std::string>() == "word" ? NoiseUnit::Word : NoiseUnit::Token;
    nc.validate();
  }
  return rc;
}

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  j["model"] = spec_to_json(rc.model);
  j["train"] = {{"peak_lr", rc.train.peak_lr},
                {"warmup_steps", rc.train.warmup_steps},
                {"max_steps", rc.train.max_steps},
                {"batch_size", rc.train.batch_size},
                {"max_len", rc.train.max_len},
                {"seed", rc.train.seed},
                {"align_weight", rc.train.align_weight},
                {"label_smoothing", rc.train.label_smoothing},
                {"eval_every", rc.train.eval_every}};
  json tasks = json::array();
  for (auto t : rc.train.tasks) tasks.push_back(train_task_name(t));
  j["train"]["tasks"] = tasks;
  j["noise"] = {{"p_delete", rc.train.noise.p_delete},
                {"p_mask", rc.train.noise.p_mask},
                {"shuffle_window", rc.train.noise.shuffle_window},
                {"span", rc.train.noise.span},
                {"unit", rc.train.noise.unit == NoiseUnit::Word ? "word" : "token"}};
  return j.dump(2);
}

}  // namespace mnmt
