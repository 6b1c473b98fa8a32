#include "mnmt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace mnmt {

std::string train_task_name(TrainTask t) {
  switch (t) {
    case TrainTask::MT:
      return "MT";
    case TrainTask::AE:
      return "AE";
    case TrainTask::DAE:
      return "DAE";
  }
  throw std::logic_error("unreachable");
}

void TrainConfig::validate() const {
  if (warmup_steps < 1) throw std::invalid_argument("train: warmup_steps must be >= 1");
  if (tasks.empty()) throw std::invalid_argument("train: at least one task must be enabled");
  if (peak_lr < 0) throw std::invalid_argument("train: peak_lr must be non-negative");
  if (batch_size < 4) throw std::invalid_argument("train: batch_size (token budget) too small");
  if (align_weight < 0) throw std::invalid_argument("train: align_weight must be >= 0");
  noise.validate();
}

Real lr_at(long step, Real peak_lr, long warmup_steps) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1, got " + std::to_string(step));
  const Real s = static_cast<Real>(step);
  const Real w = static_cast<Real>(warmup_steps);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

Real lr_at(long step, const TrainConfig& cfg) { return lr_at(step, cfg.peak_lr, cfg.warmup_steps); }

// ---------------------------------------------------------------------------
// RAdam
// ---------------------------------------------------------------------------

RAdam::RAdam(std::vector<std::pair<std::string, Tensor<Real>>> params, Real beta1, Real beta2, Real eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    m_.push_back(Mat<Real>::Zero(t.value().rows(), t.value().cols()));
    v_.push_back(Mat<Real>::Zero(t.value().rows(), t.value().cols()));
  }
}

void RAdam::step(Real lr) {
  ++t_;
  const Real b1t = std::pow(beta1_, static_cast<Real>(t_));
  const Real b2t = std::pow(beta2_, static_cast<Real>(t_));
  const Real rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
  const Real rho_t = rho_inf - 2.0 * static_cast<Real>(t_) * b2t / (1.0 - b2t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    if (!p.trainable()) continue;
    if (!p.has_grad()) continue;
    const Mat<Real>& g = p.grad();
    if (!g.allFinite()) throw std::runtime_error("radam: non-finite gradient in " + name);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Mat<Real> m_hat = m_[i] / (1.0 - b1t);
    if (rho_t > 4.0) {
      const Real r = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                               ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      const Mat<Real> v_hat = (v_[i] / (1.0 - b2t)).cwiseSqrt();
      p.value().array() -= lr * r * m_hat.array() / (v_hat.array() + eps_);
    } else {
      p.value() -= lr * m_hat;
    }
  }
}

void RAdam::restore_state(long t, std::vector<Mat<Real>> m, std::vector<Mat<Real>> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw std::invalid_argument("radam: restored moment count does not match parameters");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor<Real> mt_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx,
                     Real label_smoothing) {
  const auto& tgt_pack = model.pack(batch.tgt_lang);
  auto memory = encode(model, batch.src_lang, batch.src, ctx);
  auto dec_input = make_decoder_input(batch.tgt, tgt_pack.vocab, batch.tgt_lang);
  auto logits = decode_train(model, batch.tgt_lang, memory, batch.src, dec_input, ctx);
  std::vector<int> targets(batch.tgt.ids.begin(), batch.tgt.ids.end());
  return cross_entropy(logits, targets, Vocab::kPad, label_smoothing);
}

Tensor<Real> dae_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx,
                      Real label_smoothing) {
  if (batch.task != BatchTask::DAE)
    throw std::invalid_argument("dae_loss: parallel batch passed to the denoising objective");
  if (batch.src_lang != batch.tgt_lang)
    throw std::invalid_argument("dae_loss: cross-language batch " + batch.src_lang + "->" + batch.tgt_lang +
                                "; denoising is same-language by definition");
  const auto& pack = model.pack(batch.tgt_lang);
  auto dec_input = make_decoder_input(batch.tgt, pack.vocab, batch.tgt_lang);
  auto logits = dae_forward(model, batch.tgt_lang, batch.src, dec_input, ctx);
  std::vector<int> targets(batch.tgt.ids.begin(), batch.tgt.ids.end());
  return cross_entropy(logits, targets, Vocab::kPad, label_smoothing);
}

Tensor<Real> align_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx) {
  auto mem_src = encode(model, batch.src_lang, batch.src, ctx);
  auto mem_tgt = encode(model, batch.tgt_lang, batch.tgt, ctx);
  auto pooled_src = masked_mean_rows(mem_src, batch.src.is_pad);
  auto pooled_tgt = masked_mean_rows(mem_tgt, batch.tgt.is_pad);
  auto diff = sub(pooled_src, pooled_tgt);
  return mean_all(mul(diff, diff));
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

void freeze(const ModelGraph& model, const std::function<bool(const std::string&)>& keep_trainable) {
  for (auto& [name, t] : model.named_parameters()) const_cast<Tensor<Real>&>(t).set_trainable(keep_trainable(name));
}

std::function<bool(const std::string&)> trainable_only_language(const std::string& lang) {
  const std::string prefix = "lang." + lang + ".";
  return [prefix](const std::string& name) { return name.rfind(prefix, 0) == 0; };
}

long trainable_parameter_count(const ModelGraph& model) {
  long n = 0;
  for (const auto& [name, t] : model.named_parameters())
    if (t.trainable()) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// TaskStreams
// ---------------------------------------------------------------------------

TaskStreams::TaskStreams(const DataSet& ds, std::vector<std::pair<std::string, std::string>> mt_directions,
                         std::vector<std::string> dae_langs, const TrainConfig& cfg)
    : ds_(ds), mt_directions_(std::move(mt_directions)), dae_langs_(std::move(dae_langs)), cfg_(cfg) {
  if (mt_directions_.empty() && dae_langs_.empty())
    throw std::invalid_argument("streams: no translation directions and no monolingual languages");
}

Batch TaskStreams::next_from(Cursor& c, const std::function<std::vector<Batch>(std::uint64_t)>& regen) {
  if (c.next >= c.batches.size()) {
    c.batches = regen(c.epoch);
    ++c.epoch;
    c.next = 0;
    if (c.batches.empty()) throw std::runtime_error("streams: empty batch stream");
  }
  return c.batches[c.next++];
}

namespace {
std::uint64_t stream_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

Batch TaskStreams::next_mt(RngStream& pick_rng) {
  if (mt_directions_.empty()) throw std::runtime_error("streams: MT task enabled without directions");
  const auto& dir = mt_directions_[static_cast<std::size_t>(pick_rng.uniform_int(
      static_cast<long>(mt_directions_.size())))];
  const std::string key = dir.first + ">" + dir.second;
  auto& cursor = mt_cursors_[key];
  return next_from(cursor, [&](std::uint64_t epoch) {
    const auto& src = ds_.split("train", dir.first);
    const auto& tgt = ds_.split("train", dir.second);
    std::vector<std::pair<Sentence, Sentence>> pairs;
    pairs.reserve(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) pairs.emplace_back(src[i], tgt[i]);
    BatchingConfig bc{cfg_.batch_size, cfg_.max_len};
    // distinct deterministic order per (direction, epoch)
    const std::uint64_t k = RngStream::keyed(cfg_.seed, stream_key(key), epoch).next_u64();
    return make_mt_batches(pairs, ds_.vocabs.at(dir.first), ds_.vocabs.at(dir.second), dir.first, dir.second, bc, k);
  });
}

Batch TaskStreams::next_dae(RngStream& pick_rng, bool zero_noise) {
  if (dae_langs_.empty()) throw std::runtime_error("streams: denoising task enabled without languages");
  const auto& lang =
      dae_langs_[static_cast<std::size_t>(pick_rng.uniform_int(static_cast<long>(dae_langs_.size())))];
  auto& cursor = (zero_noise ? ae_cursors_ : dae_cursors_)[lang];
  return next_from(cursor, [&](std::uint64_t epoch) {
    NoiseConfig nc = cfg_.noise;
    if (zero_noise) {
      nc.p_delete = 0;
      nc.p_mask = 0;
      nc.shuffle_window = 1;
    }
    BatchingConfig bc{cfg_.batch_size, cfg_.max_len};
    const std::uint64_t k = RngStream::keyed(cfg_.seed, stream_key(lang), zero_noise ? 1 : 0).next_u64();
    return make_dae_batches(ds_.split("train", lang), ds_.vocabs.at(lang), lang, nc, bc, k, epoch);
  });
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(ModelGraph& model, const DataSet& ds, TrainConfig cfg,
                 std::vector<std::pair<std::string, std::string>> mt_directions, std::vector<std::string> dae_langs)
    : model_(model),
      cfg_(cfg),
      streams_(ds, std::move(mt_directions), std::move(dae_langs), cfg),
      opt_(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps),
      task_rng_(RngStream::keyed(cfg.seed, 0x7a5c)),
      dropout_rng_(RngStream::keyed(cfg.seed, 0xd0)) {
  cfg_.validate();
}

StepReport Trainer::joint_step() {
  if (trainable_parameter_count(model_) == 0)
    throw std::runtime_error("train: every parameter is frozen; nothing to update");
  const auto t0 = std::chrono::steady_clock::now();
  ++step_;
  const TrainTask task = cfg_.tasks[static_cast<std::size_t>(task_rng_.uniform_int(
      static_cast<long>(cfg_.tasks.size())))];

  Batch batch = task == TrainTask::MT ? streams_.next_mt(task_rng_)
                                      : streams_.next_dae(task_rng_, task == TrainTask::AE);

  ForwardCtx<Real> ctx{true, model_.spec.dropout, &dropout_rng_};
  model_.zero_grads();
  Real loss_value = 0;
  {
    Tape<Real> tape;
    TapeScope<Real> scope(tape);
    Tensor<Real> loss;
    if (task == TrainTask::MT) {
      loss = mt_loss(model_, batch, ctx, cfg_.label_smoothing);
      if (cfg_.align_weight > 0) loss = add(loss, scale(align_loss(model_, batch, ctx), cfg_.align_weight));
    } else {
      loss = dae_loss(model_, batch, ctx, cfg_.label_smoothing);
    }
    loss_value = loss.item();
    backward(loss);
  }
  opt_.step(lr_at(step_, cfg_));

  StepReport rep;
  rep.step = step_;
  rep.task = task;
  rep.loss = loss_value;
  rep.lr = lr_at(step_, cfg_);
  rep.src_lang = batch.src_lang;
  rep.tgt_lang = batch.tgt_lang;
  rep.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  task_loss_sums_[train_task_name(task)] += loss_value;
  ++task_counts_[train_task_name(task)];
  return rep;
}

Real Trainer::total_loss_sum() const {
  Real sum = 0;
  for (const auto& [task, v] : task_loss_sums_) sum += v;
  return sum;
}

void Trainer::run(std::ostream* log) {
  while (step_ < cfg_.max_steps) {
    StepReport rep = joint_step();
    if (log && (rep.step % 100 == 0 || rep.step == cfg_.max_steps)) *log << format_step_report(rep) << "\n";
  }
}

std::string format_step_report(const StepReport& r) {
  std::ostringstream os;
  os << "step=" << r.step << " task=" << train_task_name(r.task) << " pair=" << r.src_lang << ">" << r.tgt_lang
     << " loss=" << r.loss << " lr=" << r.lr << " elapsed=" << r.elapsed_s;
  return os.str();
}

// ---------------------------------------------------------------------------
// Incremental expansion
// ---------------------------------------------------------------------------

void incremental_train(ModelGraph& model, const std::string& new_lang, const DataSet& ds, const TrainConfig& cfg,
                       std::ostream* log) {
  if (model.has_lang(new_lang))
    throw std::invalid_argument("incremental_train: language " + new_lang + " already present");
  expand_language(model, new_lang, ds.vocabs.at(new_lang), cfg.seed);
  freeze(model, trainable_only_language(new_lang));

  const std::string& pivot = ds.manifest.pivot;
  std::vector<std::pair<std::string, std::string>> directions = {{pivot, new_lang}, {new_lang, pivot}};
  Trainer trainer(model, ds, cfg, std::move(directions), {new_lang});
  trainer.run(log);
}

}  // namespace mnmt
