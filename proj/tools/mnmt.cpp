#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mnmt/eval.hpp"
#include "mnmt/gradcheck_suite.hpp"
#include "mnmt/train.hpp"

namespace fs = std::filesystem;
using namespace mnmt;

namespace {

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct CommonTrainArgs {
  std::string data_dir;
  std::string config_path;
  std::string preset;
  std::string notation;
  std::string tasks;
  long steps = -1;
  long seed = -1;
  bool quiet = false;
};

void add_train_options(CLI::App* cmd, CommonTrainArgs& args) {
  cmd->add_option("--data", args.data_dir, "dataset directory (from gen-data)")->required();
  cmd->add_option("--config", args.config_path, "JSON run configuration");
  cmd->add_option("--preset", args.preset, "model preset: desk or paper");
  cmd->add_option("--notation", args.notation, "sharing notation, e.g. E3-4,C1-2");
  cmd->add_option("--tasks", args.tasks, "task row: mt, mt+ae, mt+dae, mt+dae+align");
  cmd->add_option("--steps", args.steps, "override max training steps");
  cmd->add_option("--seed", args.seed, "override the training seed");
  cmd->add_flag("--quiet", args.quiet, "suppress step logs");
}

RunConfig resolve_config(const CommonTrainArgs& args) {
  RunConfig rc = args.config_path.empty() ? default_run_config() : load_run_config(args.config_path);
  if (!args.preset.empty()) {
    if (args.preset == "desk")
      rc.model = desk_scale_spec();
    else if (args.preset == "paper")
      rc.model = paper_scale_spec();
    else
      throw std::invalid_argument("unknown preset: " + args.preset);
  }
  if (!args.notation.empty()) apply_notation(rc.model, args.notation);
  if (!args.tasks.empty()) rc.train.tasks = parse_task_row(args.tasks, &rc.train.align_weight);
  if (args.steps >= 0) rc.train.max_steps = args.steps;
  if (args.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(args.seed);
  validate_spec(rc.model);
  rc.train.validate();
  return rc;
}

std::vector<ReorderRule> default_reorders(std::size_t k) {
  const std::vector<ReorderRule> cycle = {ReorderRule::None, ReorderRule::Reverse, ReorderRule::SwapAdjacent,
                                          ReorderRule::RotateLeft};
  std::vector<ReorderRule> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(cycle[i % cycle.size()]);
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"language-specific encoders-decoders with a shared interlingua, on synthetic cipher languages"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multilingual dataset");
  std::string gen_out, gen_langs = "en,x1,x2,x3", gen_reorders, gen_pivot = "en";
  long gen_sentences = 20000, gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--languages", gen_langs, "comma-separated language ids");
  gen->add_option("--reorders", gen_reorders, "per-language reorder rules (none,reverse,swap_adjacent,rotate_left)");
  gen->add_option("--pivot", gen_pivot, "pivot language (the only supervised counterpart)");
  gen->add_option("--sentences", gen_sentences, "number of base sentences");
  gen->add_option("--seed", gen_seed, "generation seed");

  // train
  auto* train = app.add_subcommand("train", "train a model on the supervised directions");
  CommonTrainArgs train_args;
  std::string train_out;
  add_train_options(train, train_args);
  train->add_option("--out", train_out, "checkpoint output path")->required();

  // translate
  auto* translate = app.add_subcommand("translate", "translate token lines between two languages");
  std::string tr_model, tr_data, tr_src, tr_tgt, tr_input = "-", tr_output = "-";
  long tr_max_len = 24;
  translate->add_option("--model", tr_model, "checkpoint path")->required();
  translate->add_option("--data", tr_data, "dataset directory (for vocabularies)")->required();
  translate->add_option("--src", tr_src, "source language")->required();
  translate->add_option("--tgt", tr_tgt, "target language")->required();
  translate->add_option("--input", tr_input, "input file of sentences, '-' for stdin");
  translate->add_option("--output", tr_output, "output file, '-' for stdout");
  translate->add_option("--max-len", tr_max_len, "maximum decoded length");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score all translation directions");
  std::string ev_model, ev_data, ev_out;
  long ev_max_sentences = 0, ev_max_len = 24;
  evaluate->add_option("--model", ev_model, "checkpoint path")->required();
  evaluate->add_option("--data", ev_data, "dataset directory")->required();
  evaluate->add_option("--out", ev_out, "report file prefix (writes .txt and .json)");
  evaluate->add_option("--max-sentences", ev_max_sentences, "cap test sentences per direction (0 = all)");
  evaluate->add_option("--max-len", ev_max_len, "maximum decoded length");

  // expand
  auto* expand = app.add_subcommand("expand", "add a language by frozen incremental training");
  CommonTrainArgs ex_args;
  std::string ex_model, ex_new_lang, ex_out;
  add_train_options(expand, ex_args);
  expand->add_option("--model", ex_model, "initial checkpoint")->required();
  expand->add_option("--new-lang", ex_new_lang, "language to add")->required();
  expand->add_option("--out", ex_out, "checkpoint output path")->required();

  // ablate-structure
  auto* ab_s = app.add_subcommand("ablate-structure", "train one model per sharing notation and compare");
  CommonTrainArgs abs_args;
  std::string abs_specs, abs_out;
  long abs_max_sentences = 0, abs_max_len = 24;
  add_train_options(ab_s, abs_args);
  ab_s->add_option("--specs", abs_specs, "semicolon-separated notations, e.g. 'E3-4,C1-2;C1-2'")->required();
  ab_s->add_option("--out", abs_out, "report file prefix");
  ab_s->add_option("--max-sentences", abs_max_sentences, "cap test sentences per direction");
  ab_s->add_option("--max-len", abs_max_len, "maximum decoded length");

  // ablate-tasks
  auto* ab_t = app.add_subcommand("ablate-tasks", "train one model per auxiliary-task row and compare");
  CommonTrainArgs abt_args;
  std::string abt_rows = "mt;mt+ae;mt+dae;mt+dae+align", abt_out;
  long abt_max_sentences = 0, abt_max_len = 24;
  add_train_options(ab_t, abt_args);
  ab_t->add_option("--rows", abt_rows, "semicolon-separated task rows");
  ab_t->add_option("--out", abt_out, "report file prefix");
  ab_t->add_option("--max-sentences", abt_max_sentences, "cap test sentences per direction");
  ab_t->add_option("--max-len", abt_max_len, "maximum decoded length");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
  long gc_cases = 50;
  double gc_eps = 1e-5;
  gc->add_option("--cases", gc_cases, "random cases per op");
  gc->add_option("--eps", gc_eps, "central-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  if (gen->parsed()) {
    auto langs = split_list(gen_langs, ',');
    std::vector<ReorderRule> reorders;
    if (gen_reorders.empty()) {
      reorders = default_reorders(langs.size());
    } else {
      for (const auto& r : split_list(gen_reorders, ',')) reorders.push_back(reorder_rule_from_string(r));
    }
    auto ds = generate_dataset(gen_sentences, static_cast<std::uint64_t>(gen_seed), langs, reorders, gen_pivot);
    write_dataset(ds, gen_out);
    std::cout << "wrote " << ds.manifest.n_train << "/" << ds.manifest.n_valid << "/" << ds.manifest.n_test
              << " train/valid/test sentences for " << langs.size() << " languages to " << gen_out << "\n";
    return 0;
  }

  if (train->parsed()) {
    auto rc = resolve_config(train_args);
    auto ds = load_dataset(train_args.data_dir);
    std::cout << "training " << rc.model.notation() << " for " << rc.train.max_steps << " steps (seed "
              << rc.train.seed << ")\n";
    ModelGraph model = train_model(ds, rc.model, rc.train, train_args.quiet ? nullptr : &std::cerr);
    save_checkpoint(train_out, model, nullptr, rc.train.max_steps, rc.train.seed);
    std::cout << "saved checkpoint to " << train_out << "\n";
    return 0;
  }

  if (translate->parsed()) {
    auto ckpt = load_checkpoint(tr_model);
    auto ds = load_dataset(tr_data);
    verify_vocab_compatibility(ckpt.model, ds);
    const auto& src_vocab = ds.vocabs.at(tr_src);
    const auto& tgt_vocab = ds.vocabs.at(tr_tgt);

    std::ifstream fin;
    if (tr_input != "-") {
      fin.open(tr_input);
      if (!fin) throw std::runtime_error("cannot open input file " + tr_input);
    }
    std::istream& in = tr_input == "-" ? std::cin : fin;
    std::ofstream fout;
    if (tr_output != "-") {
      fout.open(tr_output);
      if (!fout) throw std::runtime_error("cannot open output file " + tr_output);
    }
    std::ostream& out = tr_output == "-" ? std::cout : fout;

    std::string line;
    while (std::getline(in, line)) {
      auto ids = src_vocab.encode(parse_line(line));
      auto hyp = greedy_decode(ckpt.model, tr_src, tr_tgt, ids, tr_max_len);
      out << format_line(tgt_vocab.decode(hyp)) << "\n";
    }
    return 0;
  }

  if (evaluate->parsed()) {
    auto ckpt = load_checkpoint(ev_model);
    auto ds = load_dataset(ev_data);
    verify_vocab_compatibility(ckpt.model, ds);
    EvalOptions opts;
    opts.max_sentences = ev_max_sentences;
    opts.max_decode_len = ev_max_len;
    auto report = zero_shot_matrix(ckpt.model, ds, all_directions(ckpt.model), opts);
    std::cout << report.to_text();
    if (!ev_out.empty()) {
      std::ofstream(ev_out + ".txt") << report.to_text();
      std::ofstream(ev_out + ".json") << report.to_json_string() << "\n";
      std::cout << "wrote " << ev_out << ".txt and " << ev_out << ".json\n";
    }
    return 0;
  }

  if (expand->parsed()) {
    auto rc = resolve_config(ex_args);
    auto ckpt = load_checkpoint(ex_model);
    auto ds = load_dataset(ex_args.data_dir);
    verify_vocab_compatibility(ckpt.model, ds);
    std::cout << "expanding with " << ex_new_lang << " for " << rc.train.max_steps << " steps (frozen base)\n";
    incremental_train(ckpt.model, ex_new_lang, ds, rc.train, ex_args.quiet ? nullptr : &std::cerr);
    save_checkpoint(ex_out, ckpt.model, nullptr, rc.train.max_steps, rc.train.seed);
    std::cout << "saved checkpoint to " << ex_out << "\n";
    return 0;
  }

  if (ab_s->parsed()) {
    auto rc = resolve_config(abs_args);
    auto ds = load_dataset(abs_args.data_dir);
    EvalOptions opts;
    opts.max_sentences = abs_max_sentences;
    opts.max_decode_len = abs_max_len;
    auto report = ablation_structure(split_list(abs_specs, ';'), ds, rc.model, rc.train, opts);
    std::cout << report.to_text();
    if (!abs_out.empty()) {
      std::ofstream(abs_out + ".txt") << report.to_text();
      std::ofstream(abs_out + ".json") << report.to_json_string() << "\n";
    }
    return 0;
  }

  if (ab_t->parsed()) {
    auto rc = resolve_config(abt_args);
    auto ds = load_dataset(abt_args.data_dir);
    EvalOptions opts;
    opts.max_sentences = abt_max_sentences;
    opts.max_decode_len = abt_max_len;
    auto report = ablation_tasks(split_list(abt_rows, ';'), ds, rc.model, rc.train, opts);
    std::cout << report.to_text();
    if (!abt_out.empty()) {
      std::ofstream(abt_out + ".txt") << report.to_text();
      std::ofstream(abt_out + ".json") << report.to_json_string() << "\n";
    }
    return 0;
  }

  if (gc->parsed()) {
    auto res = run_gradient_checks(gc_cases, gc_eps);
    std::cout << res.to_text();
    if (res.max_rel_error >= 1e-4) {
      std::cerr << "gradient check FAILED: max relative error " << res.max_rel_error << " >= 1e-4\n";
      return 1;
    }
    std::cout << "gradient check passed\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
