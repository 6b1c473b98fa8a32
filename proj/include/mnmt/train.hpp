#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mnmt/model.hpp"
#include "mnmt/noise.hpp"

namespace mnmt {

enum class TrainTask { MT, AE, DAE };

std::string train_task_name(TrainTask t);

struct TrainConfig {
  Real peak_lr = 5e-4;
  long warmup_steps = 400;  // paper-scale preset uses 64000
  long max_steps = 2000;
  long batch_size = 1024;  // token budget per batch
  long max_len = 32;
  std::uint64_t seed = 1;
  std::vector<TrainTask> tasks = {TrainTask::MT, TrainTask::DAE};
  Real align_weight = 0;
  Real label_smoothing = 0;
  long eval_every = 0;
  Real beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  NoiseConfig noise;

  void validate() const;
};

// Inverse square-root schedule with linear warmup:
// peak * min(step/warmup, sqrt(warmup/step)).
Real lr_at(long step, Real peak_lr, long warmup_steps);
Real lr_at(long step, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// RAdam
// ---------------------------------------------------------------------------

// Adam moments with bias correction and variance rectification; while the
// rectification length rho_t <= 4 the step is plain bias-corrected momentum.
// Frozen (non-trainable) parameters are skipped entirely.
class RAdam {
 public:
  RAdam(std::vector<std::pair<std::string, Tensor<Real>>> params, Real beta1 = 0.9, Real beta2 = 0.999,
        Real eps = 1e-8);

  void step(Real lr);
  long step_count() const { return t_; }

  const std::vector<std::pair<std::string, Tensor<Real>>>& params() const { return params_; }
  const Mat<Real>& moment1(std::size_t i) const { return m_[i]; }
  const Mat<Real>& moment2(std::size_t i) const { return v_[i]; }
  void restore_state(long t, std::vector<Mat<Real>> m, std::vector<Mat<Real>> v);

 private:
  std::vector<std::pair<std::string, Tensor<Real>>> params_;
  std::vector<Mat<Real>> m_, v_;
  long t_ = 0;
  Real beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Token-mean translation cross entropy over non-pad target positions.
Tensor<Real> mt_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx = {},
                     Real label_smoothing = 0);

// Denoising reconstruction loss; the batch must be monolingual.
Tensor<Real> dae_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx = {},
                      Real label_smoothing = 0);

// Mean squared distance between length-masked mean-pooled encoder outputs of
// the two sides of a parallel batch.
Tensor<Real> align_loss(const ModelGraph& model, const Batch& batch, const ForwardCtx<Real>& ctx = {});

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

// Marks parameters trainable exactly where the predicate holds on the
// canonical storage name; the optimizer skips the rest.
void freeze(const ModelGraph& model, const std::function<bool(const std::string&)>& keep_trainable);

// Trainable-iff-private-to-`lang` predicate used by incremental expansion.
std::function<bool(const std::string&)> trainable_only_language(const std::string& lang);

long trainable_parameter_count(const ModelGraph& model);

// ---------------------------------------------------------------------------
// Task streams and the joint training loop
// ---------------------------------------------------------------------------

struct StepReport {
  long step = 0;
  TrainTask task = TrainTask::MT;
  Real loss = 0;
  Real lr = 0;
  std::string src_lang, tgt_lang;
  double elapsed_s = 0;
};

// Cycling per-direction / per-language epoch iterators over the dataset;
// all shuffling and noise is keyed by (seed, epoch, ...) so the delivered
// batch order is a pure function of the configuration.
class TaskStreams {
 public:
  TaskStreams(const DataSet& ds, std::vector<std::pair<std::string, std::string>> mt_directions,
              std::vector<std::string> dae_langs, const TrainConfig& cfg);

  Batch next_mt(RngStream& pick_rng);
  Batch next_dae(RngStream& pick_rng, bool zero_noise);

  const std::vector<std::pair<std::string, std::string>>& mt_directions() const { return mt_directions_; }

 private:
  struct Cursor {
    std::vector<Batch> batches;
    std::size_t next = 0;
    std::uint64_t epoch = 0;
  };
  Batch next_from(Cursor& c, const std::function<std::vector<Batch>(std::uint64_t)>& regen);

  const DataSet& ds_;
  std::vector<std::pair<std::string, std::string>> mt_directions_;
  std::vector<std::string> dae_langs_;
  TrainConfig cfg_;
  std::map<std::string, Cursor> mt_cursors_;   // "src>tgt"
  std::map<std::string, Cursor> dae_cursors_;  // lang (noise per cfg)
  std::map<std::string, Cursor> ae_cursors_;   // lang (zero noise)
};

class Trainer {
 public:
  Trainer(ModelGraph& model, const DataSet& ds, TrainConfig cfg,
          std::vector<std::pair<std::string, std::string>> mt_directions, std::vector<std::string> dae_langs);

  // One sampled task step: draw task, draw batch, backward, RAdam update at
  // lr_at(step). Throws if every parameter is frozen.
  StepReport joint_step();

  void run(std::ostream* log = nullptr);

  long steps_done() const { return step_; }
  RAdam& optimizer() { return opt_; }
  ModelGraph& model() { return model_; }

  // Loss bookkeeping. Per-task sums accumulate in step order; the total is
  // defined as their sum, so total == sum over tasks holds exactly.
  Real total_loss_sum() const;
  const std::map<std::string, Real>& task_loss_sums() const { return task_loss_sums_; }
  const std::map<std::string, long>& task_counts() const { return task_counts_; }

 private:
  ModelGraph& model_;
  TrainConfig cfg_;
  TaskStreams streams_;
  RAdam opt_;
  RngStream task_rng_;
  RngStream dropout_rng_;
  long step_ = 0;
  std::map<std::string, Real> task_loss_sums_;
  std::map<std::string, long> task_counts_;
};

// Expansion + frozen training on new<->pivot data (plus DAE on the new
// language only). Existing storages are shared, frozen, and never copied.
void incremental_train(ModelGraph& model, const std::string& new_lang, const DataSet& ds, const TrainConfig& cfg,
                       std::ostream* log = nullptr);

std::string format_step_report(const StepReport& r);

}  // namespace mnmt
