#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/model.hpp"
#include "mnmt/train.hpp"

namespace mnmt {

// ---------------------------------------------------------------------------
// Decoding (beam size 1 == greedy)
// ---------------------------------------------------------------------------

// Iterative argmax continuation starting from the target language code.
// PAD, MASK and every language-code token are masked out of the argmax; the
// returned ids carry no EOS. Bounded by max_len emitted tokens.
std::vector<int> greedy_decode(const ModelGraph& model, const std::string& src_lang, const std::string& tgt_lang,
                               const std::vector<int>& src_content_ids, long max_len);

// Lockstep batched variant, identical per-sentence semantics.
std::vector<std::vector<int>> greedy_decode_batch(const ModelGraph& model, const std::string& src_lang,
                                                  const std::string& tgt_lang,
                                                  const std::vector<std::vector<int>>& src_content_ids, long max_len);

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

// Corpus BLEU over token-id sequences: geometric mean of clipped 1..4-gram
// precisions times the brevity penalty, no smoothing, single reference.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references);

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

struct DirectionScore {
  std::string src, tgt;
  double bleu = 0;
  bool supervised = false;
  long sentences = 0;
};

struct EvalReport {
  std::vector<DirectionScore> directions;
  double supervised_avg = 0;
  double zero_shot_avg = 0;

  void recompute_averages();
  std::string to_text() const;
  std::string to_json_string() const;
};

struct EvalOptions {
  long max_sentences = 0;  // 0 = whole test set
  long max_decode_len = 24;
  std::string split = "test";
};

// Decodes every requested direction (every ordered pair of model languages
// by default), scores against the aligned references, and partitions
// supervised vs zero-shot by the training manifest.
EvalReport zero_shot_matrix(const ModelGraph& model, const DataSet& ds,
                            const std::vector<std::pair<std::string, std::string>>& directions,
                            const EvalOptions& opts = {});

std::vector<std::pair<std::string, std::string>> all_directions(const ModelGraph& model);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
  ModelGraph model;
  long step = 0;
  std::uint64_t seed = 0;
  bool has_optimizer = false;
  long optimizer_step = 0;
  std::vector<Mat<Real>> moment1, moment2;  // aligned with model.named_parameters()
};

void save_checkpoint(const std::string& path, const ModelGraph& model, const RAdam* optimizer, long step,
                     std::uint64_t seed);
LoadedCheckpoint load_checkpoint(const std::string& path);

// Rejects models whose stored vocabularies do not hash-match the dataset.
void verify_vocab_compatibility(const ModelGraph& model, const DataSet& ds);

// ---------------------------------------------------------------------------
// Ablation runners
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string label;
  EvalReport report;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string to_text() const;
  std::string to_json_string() const;
};

// One model per sharing notation, identical seeds, shared data; evaluates
// all directions and ranks by zero-shot average.
AblationReport ablation_structure(const std::vector<std::string>& notations, const DataSet& ds,
                                  const SharingSpec& base_spec, const TrainConfig& cfg, const EvalOptions& opts = {});

// Task rows: "mt", "mt+ae", "mt+dae", "mt+dae+align" (case-insensitive).
AblationReport ablation_tasks(const std::vector<std::string>& rows, const DataSet& ds, const SharingSpec& spec,
                              const TrainConfig& cfg, const EvalOptions& opts = {});

std::vector<TrainTask> parse_task_row(const std::string& row, Real* align_weight);

// Trains a fresh model on the dataset's supervised directions.
ModelGraph train_model(const DataSet& ds, const SharingSpec& spec, const TrainConfig& cfg,
                       std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Run configuration files (JSON; keys mirror the config structs)
// ---------------------------------------------------------------------------

struct RunConfig {
  SharingSpec model;
  TrainConfig train;
};

RunConfig load_run_config(const std::string& path);
RunConfig default_run_config();
std::string run_config_to_json(const RunConfig& rc);

}  // namespace mnmt
