#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mnmt/eval.hpp"
#include "mnmt/train.hpp"

using namespace mnmt;

namespace {

SharingSpec overfit_spec() {
  SharingSpec s;
  s.enc_layers = 2;
  s.dec_layers = 2;
  s.enc_shared = LayerRange{2, 2};
  s.dec_shared = std::nullopt;
  s.cross_range = LayerRange{1, 1};
  s.d_model = 32;
  s.d_ff = 64;
  s.n_heads = 2;
  s.dropout = 0;
  return s;
}

DataSet tiny_dataset(long n = 64, std::uint64_t seed = 5) {
  return generate_dataset(n, seed, {"en", "x1"}, {ReorderRule::None, ReorderRule::Reverse}, "en");
}

Batch first_mt_batch(const DataSet& ds, const std::string& src, const std::string& tgt, long max_tokens = 4096) {
  std::vector<std::pair<Sentence, Sentence>> pairs;
  const auto& s = ds.train.at(src);
  const auto& t = ds.train.at(tgt);
  for (std::size_t i = 0; i < s.size(); ++i) pairs.emplace_back(s[i], t[i]);
  BatchingConfig bc{max_tokens, 32};
  auto batches = make_mt_batches(pairs, ds.vocabs.at(src), ds.vocabs.at(tgt), src, tgt, bc, 1);
  REQUIRE(!batches.empty());
  return batches.front();
}

}  // namespace

TEST_CASE("learning-rate schedule hits the published points exactly") {
  CHECK(lr_at(64000, 5e-4, 64000) == 5e-4);
  CHECK(lr_at(32000, 5e-4, 64000) == 2.5e-4);
  CHECK(lr_at(4 * 64000, 5e-4, 64000) == 2.5e-4);
  CHECK_THROWS_AS(lr_at(0, 5e-4, 64000), std::invalid_argument);

  // continuity at the warmup boundary and monotone decay afterwards
  const Real just_before = lr_at(63999, 5e-4, 64000);
  const Real at = lr_at(64000, 5e-4, 64000);
  const Real just_after = lr_at(64001, 5e-4, 64000);
  CHECK(std::abs(at - just_before) < 1e-8);
  CHECK(just_after < at);
  Real prev = at;
  for (long s = 64001; s < 64050; ++s) {
    const Real cur = lr_at(s, 5e-4, 64000);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("radam matches a hand-stepped scalar trajectory on f(x)=x^2/2") {
  // During the first four steps the rectification length stays <= 4, so the
  // update is plain bias-corrected momentum: x -= lr * m_hat.
  auto x = Tensor<Real>::from_vector({1}, {1.0}, true);
  x.set_name("x");
  RAdam opt({{"x", x}}, 0.9, 0.999, 1e-8);

  const Real lr = 0.1;
  Real hx = 1.0, hm = 0.0;
  for (int t = 1; t <= 3; ++t) {
    x.ensure_grad();
    x.clear_grad();
    x.grad()(0, 0) = x.value()(0, 0);  // d/dx x^2/2 = x
    opt.step(lr);

    const Real g = hx;
    hm = 0.9 * hm + 0.1 * g;
    const Real m_hat = hm / (1.0 - std::pow(0.9, t));
    hx -= lr * m_hat;
    CHECK(x.value()(0, 0) == doctest::Approx(hx).epsilon(1e-12));
  }

  // rho_t crosses 4 at step 5: the rectified step must use the second moment
  auto y = Tensor<Real>::from_vector({1}, {1.0}, true);
  y.set_name("y");
  RAdam opt2({{"y", y}}, 0.9, 0.999, 1e-8);
  const Real rho_inf = 2.0 / (1.0 - 0.999) - 1.0;
  Real m = 0, v = 0, hy = 1.0;
  for (int t = 1; t <= 6; ++t) {
    y.ensure_grad();
    y.clear_grad();
    y.grad()(0, 0) = y.value()(0, 0);
    const Real g = hy;
    opt2.step(lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const Real b2t = std::pow(0.999, t);
    const Real rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    const Real m_hat = m / (1.0 - std::pow(0.9, t));
    if (rho_t > 4.0) {
      CHECK(t >= 5);
      const Real r = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                               ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      hy -= lr * r * m_hat / (std::sqrt(v / (1.0 - b2t)) + 1e-8);
    } else {
      CHECK(t <= 4);
      hy -= lr * m_hat;
    }
    CHECK(y.value()(0, 0) == doctest::Approx(hy).epsilon(1e-12));
  }
}

TEST_CASE("radam: zero gradients leave parameters unchanged, NaN gradients fail fast") {
  auto x = Tensor<Real>::from_vector({2}, {1.0, -2.0}, true);
  x.set_name("x");
  RAdam opt({{"x", x}}, 0.9, 0.999, 1e-8);
  x.ensure_grad();
  x.clear_grad();
  opt.step(0.1);
  CHECK(x.value()(0, 0) == 1.0);
  CHECK(x.value()(0, 1) == -2.0);

  x.grad()(0, 0) = std::nan("");
  CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("gradient"), std::runtime_error);
}

TEST_CASE("uniform-logit model scores ln V and pad extension changes nothing") {
  auto ds = tiny_dataset();
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 3);
  for (auto& [name, t] : model.named_parameters()) const_cast<Tensor<Real>&>(t).value().setZero();

  Batch batch = first_mt_batch(ds, "en", "x1");
  auto loss = mt_loss(model, batch);
  CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(ds.vocabs.at("x1").size()))).epsilon(1e-12));

  // pad extension: widen both sides by two pad columns
  auto widen = [](const BatchSide& s) {
    BatchSide w;
    w.b = s.b;
    w.t = s.t + 2;
    w.ids.assign(static_cast<std::size_t>(w.b * w.t), Vocab::kPad);
    w.is_pad.assign(static_cast<std::size_t>(w.b * w.t), 1);
    for (long i = 0; i < s.b; ++i)
      for (long j = 0; j < s.t; ++j) {
        w.ids[static_cast<std::size_t>(i * w.t + j)] = s.at(i, j);
        w.is_pad[static_cast<std::size_t>(i * w.t + j)] = s.pad_at(i, j) ? 1 : 0;
      }
    return w;
  };
  Batch wide = batch;
  wide.src = widen(batch.src);
  wide.tgt = widen(batch.tgt);

  auto model2 = build_model(overfit_spec(), langs, 917);
  auto l_narrow = mt_loss(model2, batch);
  auto l_wide = mt_loss(model2, wide);
  CHECK(l_narrow.item() == doctest::Approx(l_wide.item()).epsilon(1e-12));
}

TEST_CASE("dae_loss definitional equality with same-language mt_loss and its error cases") {
  auto ds = tiny_dataset();
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 31);

  // zero-noise monolingual batch == same-language parallel batch, bitwise
  NoiseConfig quiet;
  quiet.p_delete = 0;
  quiet.p_mask = 0;
  quiet.shuffle_window = 1;
  BatchingConfig bc{4096, 32};
  auto dae_batches = make_dae_batches(ds.train.at("x1"), ds.vocabs.at("x1"), "x1", quiet, bc, 9, 0);
  REQUIRE(!dae_batches.empty());
  Batch dae_b = dae_batches.front();
  Batch mt_equiv = dae_b;
  mt_equiv.task = BatchTask::MT;
  CHECK(dae_loss(model, dae_b).item() == mt_loss(model, mt_equiv).item());

  Batch parallel = first_mt_batch(ds, "en", "x1");
  CHECK_THROWS_WITH_AS(dae_loss(model, parallel), doctest::Contains("parallel"), std::invalid_argument);
  Batch crossed = dae_b;
  crossed.tgt_lang = "en";
  CHECK_THROWS_WITH_AS(dae_loss(model, crossed), doctest::Contains("same-language"), std::invalid_argument);

  // monolingual sides come from the parallel corpus itself
  CHECK(ds.train.at("x1").size() == static_cast<std::size_t>(ds.manifest.n_train));
}

TEST_CASE("align_loss: zero on identical sentences, non-negative, pad-invariant") {
  auto ds = tiny_dataset();
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 41);

  Batch same = first_mt_batch(ds, "en", "x1");
  same.tgt_lang = "en";
  same.tgt = same.src;
  CHECK(align_loss(model, same).item() == 0.0);

  Batch batch = first_mt_batch(ds, "en", "x1");
  const Real a = align_loss(model, batch).item();
  CHECK(a >= 0.0);

  auto widen = [](const BatchSide& s) {
    BatchSide w = s;
    w.t = s.t + 3;
    w.ids.assign(static_cast<std::size_t>(w.b * w.t), Vocab::kPad);
    w.is_pad.assign(static_cast<std::size_t>(w.b * w.t), 1);
    for (long i = 0; i < s.b; ++i)
      for (long j = 0; j < s.t; ++j) {
        w.ids[static_cast<std::size_t>(i * w.t + j)] = s.at(i, j);
        w.is_pad[static_cast<std::size_t>(i * w.t + j)] = s.pad_at(i, j) ? 1 : 0;
      }
    return w;
  };
  Batch wide = batch;
  wide.src = widen(batch.src);
  const Real aw = align_loss(model, wide).item();
  CHECK(a == doctest::Approx(aw).epsilon(1e-12));
}

TEST_CASE("gradient pooling: shared-layer grads add across languages") {
  auto ds = tiny_dataset();
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 47);

  Batch ba = first_mt_batch(ds, "en", "x1");
  Batch bb = first_mt_batch(ds, "x1", "en");
  auto& shared_wq = model.pack("en").enc_layers[1]->self_attn.wq;

  auto grad_of = [&](const std::vector<Batch*>& batches) {
    model.zero_grads();
    for (auto* b : batches) {
      Tape<Real> tape;
      TapeScope<Real> scope(tape);
      auto loss = mt_loss(model, *b);
      backward(loss);
    }
    return Mat<Real>(shared_wq.grad());
  };
  const Mat<Real> ga = grad_of({&ba});
  const Mat<Real> gb = grad_of({&bb});
  const Mat<Real> gab = grad_of({&ba, &bb});
  CHECK(((ga + gb) - gab).cwiseAbs().maxCoeff() < 1e-10);

  // the private layer of the uninvolved side stays at zero gradient
  model.zero_grads();
  {
    Tape<Real> tape;
    TapeScope<Real> scope(tape);
    auto loss = mt_loss(model, ba);  // en -> x1 never touches x1's encoder
    backward(loss);
  }
  const auto& x1_private = model.pack("x1").enc_layers[0]->self_attn.wq;
  CHECK(x1_private.grad().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("overfitting a 10-sentence corpus drives both losses to zero") {
  auto ds = tiny_dataset(64, 6);
  // shrink to ~10 training pairs
  DataSet small = ds;
  for (auto& [lang, sents] : small.train) sents.resize(10);
  small.manifest.n_train = 10;

  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : small.manifest.lang_ids()) langs.emplace_back(l, small.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 8);

  TrainConfig cfg;
  cfg.max_steps = 2500;
  cfg.warmup_steps = 50;
  cfg.peak_lr = 3e-3;
  cfg.batch_size = 512;
  cfg.seed = 8;
  cfg.tasks = {TrainTask::MT, TrainTask::AE};
  cfg.noise.p_delete = 0;
  cfg.noise.p_mask = 0;
  cfg.noise.shuffle_window = 1;

  Trainer trainer(model, small, cfg, small.manifest.supervised, small.manifest.lang_ids());
  std::vector<StepReport> reports;
  while (trainer.steps_done() < cfg.max_steps) reports.push_back(trainer.joint_step());

  Batch mt_b = first_mt_batch(small, "en", "x1");
  CHECK(mt_loss(model, mt_b).item() < 0.01);

  NoiseConfig quiet;
  quiet.p_delete = 0;
  quiet.p_mask = 0;
  quiet.shuffle_window = 1;
  BatchingConfig bc{4096, 32};
  auto dae_b = make_dae_batches(small.train.at("x1"), small.vocabs.at("x1"), "x1", quiet, bc, 9, 0);
  CHECK(dae_loss(model, dae_b.front()).item() < 0.01);

  // loss accounting identity: replaying the step reports in order
  // reproduces the per-task sums bitwise, and the total is their sum
  std::map<std::string, Real> replayed;
  for (const auto& r : reports) replayed[train_task_name(r.task)] += r.loss;
  CHECK(replayed == trainer.task_loss_sums());
  Real sum = 0;
  for (const auto& [task, v] : trainer.task_loss_sums()) sum += v;
  CHECK(sum == trainer.total_loss_sum());
  long steps = 0;
  for (const auto& [task, n] : trainer.task_counts()) steps += n;
  CHECK(steps == cfg.max_steps);
}

TEST_CASE("task sampling is uniform over the enabled set") {
  auto ds = tiny_dataset(48, 7);
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));

  SharingSpec micro = overfit_spec();
  micro.enc_layers = 1;
  micro.dec_layers = 1;
  micro.enc_shared = LayerRange{1, 1};
  micro.cross_range = LayerRange{1, 1};
  micro.d_model = 8;
  micro.d_ff = 8;
  micro.n_heads = 1;
  auto model = build_model(micro, langs, 9);

  TrainConfig cfg;
  cfg.max_steps = 10000;
  cfg.warmup_steps = 100;
  cfg.batch_size = 24;  // tiny batches keep each step cheap
  cfg.max_len = 16;
  cfg.seed = 10;
  cfg.tasks = {TrainTask::MT, TrainTask::DAE};

  Trainer trainer(model, ds, cfg, ds.manifest.supervised, ds.manifest.lang_ids());
  trainer.run(nullptr);
  const double mt_frac =
      static_cast<double>(trainer.task_counts().at("MT")) / static_cast<double>(cfg.max_steps);
  CHECK(mt_frac > 0.48);
  CHECK(mt_frac < 0.52);

  // MT-only training never samples anything else
  auto model2 = build_model(micro, langs, 9);
  TrainConfig cfg2 = cfg;
  cfg2.max_steps = 50;
  cfg2.tasks = {TrainTask::MT};
  Trainer t2(model2, ds, cfg2, ds.manifest.supervised, ds.manifest.lang_ids());
  t2.run(nullptr);
  CHECK(t2.task_counts().at("MT") == 50);
  CHECK(t2.task_counts().count("DAE") == 0);
}

TEST_CASE("the AE task feeds identity pairs") {
  auto ds = tiny_dataset(48, 11);
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.batch_size = 256;
  TaskStreams streams(ds, ds.manifest.supervised, ds.manifest.lang_ids(), cfg);
  auto rng = RngStream::keyed(1);
  for (int i = 0; i < 4; ++i) {
    Batch b = streams.next_dae(rng, /*zero_noise=*/true);
    CHECK(b.src.ids == b.tgt.ids);  // no corruption at all
  }
  bool any_differs = false;
  for (int i = 0; i < 4 && !any_differs; ++i) {
    Batch b = streams.next_dae(rng, /*zero_noise=*/false);
    any_differs = b.src.ids != b.tgt.ids;
  }
  CHECK(any_differs);
}

TEST_CASE("freezing: predicate scope, full-freeze error, byte-stability") {
  auto ds = tiny_dataset(48, 13);
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 15);

  freeze(model, trainable_only_language("x1"));
  CHECK(trainable_parameter_count(model) ==
        pack_private_param_count(model.spec, ds.vocabs.at("x1").size()));

  // frozen parameters stay byte-identical across a short run
  std::vector<Mat<Real>> frozen_before;
  for (const auto& [name, t] : model.named_parameters())
    if (!t.trainable()) frozen_before.push_back(t.value());
  TrainConfig cfg;
  cfg.max_steps = 10;
  cfg.warmup_steps = 5;
  cfg.batch_size = 256;
  cfg.seed = 4;
  Trainer trainer(model, ds, cfg, {{"en", "x1"}, {"x1", "en"}}, {"x1"});
  trainer.run(nullptr);
  std::size_t i = 0;
  for (const auto& [name, t] : model.named_parameters())
    if (!t.trainable()) CHECK(t.value() == frozen_before[i++]);

  // freezing everything fails at the first step
  freeze(model, [](const std::string&) { return false; });
  Trainer t2(model, ds, cfg, {{"en", "x1"}}, {});
  CHECK_THROWS_WITH_AS(t2.joint_step(), doctest::Contains("frozen"), std::runtime_error);

  freeze(model, [](const std::string&) { return true; });
  CHECK(trainable_parameter_count(model) == model.total_parameter_count());
}

TEST_CASE("a zero learning-rate step changes moments but no parameters") {
  auto ds = tiny_dataset(48, 17);
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));
  auto model = build_model(overfit_spec(), langs, 19);

  TrainConfig cfg;
  cfg.peak_lr = 0;
  cfg.max_steps = 1;
  cfg.batch_size = 256;
  cfg.seed = 5;
  std::vector<Mat<Real>> before;
  for (const auto& [name, t] : model.named_parameters()) before.push_back(t.value());
  Trainer trainer(model, ds, cfg, ds.manifest.supervised, ds.manifest.lang_ids());
  trainer.joint_step();
  std::size_t i = 0;
  for (const auto& [name, t] : model.named_parameters()) CHECK(t.value() == before[i++]);
  bool any_moment = false;
  for (std::size_t k = 0; k < trainer.optimizer().params().size() && !any_moment; ++k)
    any_moment = trainer.optimizer().moment1(k).cwiseAbs().maxCoeff() > 0;
  CHECK(any_moment);
}

TEST_CASE("two training runs with one seed are bit-identical") {
  auto ds = tiny_dataset(48, 23);
  std::vector<std::pair<std::string, Vocab>> langs;
  for (const auto& l : ds.manifest.lang_ids()) langs.emplace_back(l, ds.vocabs.at(l));

  auto run_once = [&]() {
    auto model = build_model(overfit_spec(), langs, 27);
    TrainConfig cfg;
    cfg.max_steps = 40;
    cfg.warmup_steps = 10;
    cfg.batch_size = 256;
    cfg.seed = 27;
    Trainer trainer(model, ds, cfg, ds.manifest.supervised, ds.manifest.lang_ids());
    trainer.run(nullptr);
    std::vector<Mat<Real>> snap;
    for (const auto& [name, t] : model.named_parameters()) snap.push_back(t.value());
    return snap;
  };
  auto a = run_once();
  auto b = run_once();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
