#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "ptsn/numerics/gradcheck.hpp"
#include "ptsn/synthetic/toy_world.hpp"
#include "ptsn/training/trainer.hpp"
#include "test_util.hpp"

namespace ptsn::training {
namespace {

using D = double;
using model::Captioner;
using model::ModelConfig;

/// Tiny toy world (4 concepts on a 2x2 grid, width 8) and a matching model.
struct Fixture {
  synthetic::ToyWorld world;
  lexicon::Vocabulary vocab;
  std::vector<Example<D>> train, val;
  ModelConfig cfg;
  std::map<std::size_t, Tensor<double>> protos;

  explicit Fixture(std::size_t n_train = 8, std::size_t n_val = 4, double dropout = 0.0) {
    synthetic::ToyWorldSpec spec;
    spec.n_super = 2;
    spec.n_sub_per_super = 2;
    spec.dim = 8;
    spec.emb_dim = 3;
    spec.grid_h = 2;
    spec.grid_w = 2;
    spec.max_concepts = 2;
    spec.max_refs = 3;
    world = synthetic::make_toy_world(spec);
    vocab = world.vocabulary();
    auto data = synthetic::gen_toy_dataset(world, n_train, n_val);
    train = make_examples(synthetic::ToyDataset::samples(data.train), vocab);
    val = make_examples(synthetic::ToyDataset::samples(data.val), vocab);
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.decoder_layers = 1;
    cfg.max_len = 10;
    cfg.vocab_size = vocab.size();
    cfg.emb_dim = 3;
    cfg.schedule = model::BlockSchedule::parse("2-4");
    cfg.dropout = dropout;
    protos = {{2, Tensor<double>::matrix(2, 3)}, {4, world.embeddings}};
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t d = 0; d < 3; ++d) protos[2](c / 2, d) += world.embeddings(c, d) / 2.0;
  }

  Captioner<D> model(std::uint64_t seed = 1) const { return Captioner<D>(cfg, protos, seed); }
};

double grad_norm(Captioner<D>& m) {
  double s = 0.0;
  for (auto* p : m.parameters())
    for (double g : p->grad.storage()) s += g * g;
  return std::sqrt(s);
}

std::vector<Tensor<D>> grads(Captioner<D>& m) {
  std::vector<Tensor<D>> out;
  for (auto* p : m.parameters()) out.push_back(p->grad);
  return out;
}

void zero_grads(Captioner<D>& m) {
  for (auto* p : m.parameters()) p->zero_grad();
}

TEST(LambdaLr, MatchesTableForBothBaseRates) {
  // Independent table: warmup quarters, plateau, then two 0.2 decays.
  for (double base : {4e-4, 4e-5}) {
    for (std::size_t n = 1; n <= 40; ++n) {
      double expect;
      switch (n) {
        case 1: expect = base * 1 / 4; break;
        case 2: expect = base * 2 / 4; break;
        case 3: expect = base * 3 / 4; break;
        case 11:
        case 12: expect = 0.2 * base; break;
        default: expect = n <= 10 ? base : 0.2 * 0.2 * base;
      }
      EXPECT_EQ(lambda_lr(n, base), expect) << "n=" << n;
    }
  }
}

TEST(LambdaLr, WorkedExamples) {
  EXPECT_DOUBLE_EQ(lambda_lr(2, 4e-4), 2e-4);
  EXPECT_DOUBLE_EQ(lambda_lr(7, 4e-4), 4e-4);
  EXPECT_DOUBLE_EQ(lambda_lr(11, 4e-4), 8e-5);
  EXPECT_DOUBLE_EQ(lambda_lr(13, 4e-4), 1.6e-5);
  EXPECT_THROW(lambda_lr(0, 4e-4), ConfigError);
}

TEST(LrSchedule, GroupsAndConstantMode) {
  LrSchedule xe;
  EXPECT_EQ(xe.rate(5, ParamGroup::encoder), 4e-5);
  EXPECT_EQ(xe.rate(5, ParamGroup::other), 4e-4);
  LrSchedule rl{2e-6, 2e-5, ScheduleKind::constant};
  EXPECT_EQ(rl.rate(1, ParamGroup::encoder), 2e-6);
  EXPECT_EQ(rl.rate(30, ParamGroup::other), 2e-5);
  EXPECT_THROW((LrSchedule{0.0, 1.0}).validate(), ConfigError);
  EXPECT_THROW(parse_schedule_kind("cosine"), ConfigError);
}

TEST(EarlyStop, StrictlyImprovingNeverStops) {
  EarlyStopper s;
  for (int i = 0; i < 100; ++i) EXPECT_FALSE(s.update(i));
}

TEST(EarlyStop, StopsAfterFifthNonImprovingEpoch) {
  EarlyStopper s;
  const std::vector<double> seq{10, 9, 9, 9, 9, 9};
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(s.update(seq[i]), i == 5) << i;
}

TEST(EarlyStop, ImprovementResetsCounter) {
  EarlyStopper s;
  for (double v : {10.0, 9.0, 9.0, 11.0}) EXPECT_FALSE(s.update(v));
  EXPECT_EQ(s.since_best, 0u);
  for (int i = 0; i < 4; ++i) EXPECT_FALSE(s.update(5.0));
  EXPECT_TRUE(s.update(5.0));
}

TEST(Adam, ZeroLearningRateLeavesParametersBitIdentical) {
  Fixture f;
  auto m = f.model();
  auto before = m.parameters();
  std::vector<Tensor<D>> saved;
  for (auto* p : before) saved.push_back(p->value);
  Adam<D> opt;
  for (int step = 0; step < 3; ++step) {
    xe_gradient<D>(m, {{&f.train[0], &f.train[0].refs[0]}});
    opt.step(m.parameters(), [](ParamGroup) { return 0.0; });
  }
  for (std::size_t i = 0; i < saved.size(); ++i) EXPECT_EQ(m.parameters()[i]->value, saved[i]) << before[i]->name;
}

TEST(Adam, MatchesReferenceRecurrence) {
  Parameter<D> p("p", Tensor<D>(Shape{3}, 0.5));
  Adam<D> opt({.beta1 = 0.9, .beta2 = 0.98, .eps = 1e-9});
  const std::vector<std::vector<double>> gs{{1.0, -2.0, 0.0}, {0.5, 0.5, 3.0}, {-1.0, 0.0, 1e-3}};
  std::vector<double> x(3, 0.5), m1(3, 0.0), m2(3, 0.0);
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = gs[t - 1][i];
    opt.step({&p}, [](ParamGroup) { return 0.01; });
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = gs[t - 1][i];
      m1[i] = 0.9 * m1[i] + 0.1 * g;
      m2[i] = 0.98 * m2[i] + 0.02 * g * g;
      const double mh = m1[i] / (1 - std::pow(0.9, t)), vh = m2[i] / (1 - std::pow(0.98, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-9);
      EXPECT_NEAR(p.value[i], x[i], 1e-15);
    }
    for (double g : p.grad.storage()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Adam, ClipsGlobalNorm) {
  Parameter<D> a("a", Tensor<D>(Shape{1}, 0.0)), b("b", Tensor<D>(Shape{1}, 0.0));
  Adam<D> opt({.beta1 = 0.0, .beta2 = 0.0, .eps = 1e-300, .clip_norm = 1.0});
  a.grad[0] = 3.0;
  b.grad[0] = 4.0;
  opt.step({&a, &b}, [](ParamGroup) { return 1.0; });
  // beta = 0 reduces Adam to sign descent whatever the clipping scale.
  EXPECT_DOUBLE_EQ(a.value[0], -1.0);
  EXPECT_DOUBLE_EQ(b.value[0], -1.0);
  EXPECT_THROW(Adam<D>({.clip_norm = -1.0}), ConfigError);
}

TEST(TeacherForcing, TruncatesToMaxLen) {
  auto [in, out] = teacher_forcing({5, 6, 7, 8}, 3);
  EXPECT_EQ(in, (std::vector<int>{1, 5, 6}));
  EXPECT_EQ(out, (std::vector<int>{5, 6, 2}));
  auto [in0, out0] = teacher_forcing({}, 3);
  EXPECT_EQ(in0, (std::vector<int>{1}));
  EXPECT_EQ(out0, (std::vector<int>{2}));
}

TEST(XeStep, GradientMatchesFiniteDifferencesOnTwoSamples) {
  Fixture f;
  auto m = f.model(3);
  std::vector<XeItem<D>> batch{{&f.train[0], &f.train[0].refs[0]}, {&f.train[1], &f.train[1].refs.back()}};
  std::vector<Parameter<D>*> params;
  for (auto* p : m.parameters())
    if (!p->frozen) params.push_back(p);
  for (auto* p : params) p->zero_grad();
  xe_gradient(m, batch);
  std::vector<Tensor<D>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& vals = params[i]->value.storage();
    for (std::size_t k = 0; k < vals.size(); k += 7) {
      const double saved = vals[k];
      auto loss = [&] {
        auto before = grads(m);
        const double l = xe_gradient(m, batch);
        for (std::size_t j = 0; j < params.size(); ++j) params[j]->grad = before[j];
        return l;
      };
      vals[k] = saved + 1e-5;
      const double up = loss();
      vals[k] = saved - 1e-5;
      const double down = loss();
      vals[k] = saved;
      const double num = (up - down) / 2e-5;
      const double a = analytic[i][k];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(XeStep, DuplicatedBatchGivesSameUpdate) {
  Fixture f;
  auto a = f.model(4), b = f.model(4);
  std::vector<XeItem<D>> batch;
  for (std::size_t i = 0; i < 3; ++i) batch.push_back({&f.train[i], &f.train[i].refs[0]});
  auto dup = batch;
  for (int r = 0; r < 2; ++r) dup.insert(dup.end(), batch.begin(), batch.end());
  Adam<D> oa, ob;
  auto lr = [](ParamGroup) { return 1e-3; };
  const double la = xe_step(a, batch, oa, lr);
  const double lb = xe_step(b, dup, ob, lr);
  EXPECT_NEAR(la, lb, 1e-12);
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k) EXPECT_NEAR(pa[i]->value[k], pb[i]->value[k], 1e-12);
}

TEST(XeStep, EmptyBatchIsDataError) {
  Fixture f;
  auto m = f.model();
  Adam<D> opt;
  EXPECT_THROW(xe_step<D>(m, {}, opt, [](ParamGroup) { return 1e-3; }), DataError);
}

TEST(XeStep, LossDecreasesOverFiftyStepsOnFixedBatch) {
  Fixture f;
  auto m = f.model(5);
  std::vector<XeItem<D>> batch;
  for (const auto& ex : f.train) batch.push_back({&ex, &ex.refs[0]});
  Adam<D> opt;
  auto lr = [](ParamGroup) { return 3e-3; };
  const double first = xe_step(m, batch, opt, lr);
  double last = first;
  for (int i = 1; i < 50; ++i) last = xe_step(m, batch, opt, lr);
  EXPECT_LT(last, 0.5 * first);
}

TEST(XeStep, SingleWordVocabularySaturates) {
  Fixture f;
  auto cfg = f.cfg;
  cfg.vocab_size = 4;
  cfg.schedule = {};
  Captioner<D> m(cfg, {}, 6);
  Example<D> ex{f.train[0].features, {}, {{3}}};
  Adam<D> opt;
  double loss = 0;
  for (int i = 0; i < 300; ++i) loss = xe_step<D>(m, {{&ex, &ex.refs[0]}}, opt, [](ParamGroup) { return 1e-2; });
  EXPECT_LT(loss, 1e-3);
}

/// Gradient of log p(seq) for one example, by its own tape.
std::vector<Tensor<D>> grad_log_prob(Captioner<D>& m, const Example<D>& ex, const std::vector<int>& seq) {
  zero_grads(m);
  Tape<D> tape;
  model::Graph<D> g(tape);
  auto mem = memory_var(g, m, ex);
  std::vector<int> in{1};
  in.insert(in.end(), seq.begin(), seq.end() - 1);
  auto logits = m.decode_logits(g, mem, in);
  // log p = -sum NLL; weight -1 turns the NLL into log p.
  tape.backward(ops::weighted_nll(logits, seq, std::vector<D>(seq.size(), -1.0), m.excluded()));
  auto out = grads(m);
  zero_grads(m);
  return out;
}

TEST(Scst, ConstantRewardsGiveZeroGradient) {
  Fixture f;
  auto m = f.model(7);
  const std::vector<std::vector<int>> seqs{{3, 2}, {4, 5, 2}, {6, 2}};
  zero_grads(m);
  scst_gradient(m, f.train[0], seqs, {0.7, 0.7, 0.7});
  EXPECT_LE(grad_norm(m), 1e-12);
}

TEST(Scst, UniformRewardShiftLeavesGradientUnchanged) {
  Fixture f;
  auto m = f.model(8);
  const std::vector<std::vector<int>> seqs{{3, 2}, {4, 5, 2}, {6, 7, 8, 2}, {9}};
  zero_grads(m);
  scst_gradient(m, f.train[1], seqs, {0.1, 1.3, 0.4, 2.0});
  auto g0 = grads(m);
  zero_grads(m);
  scst_gradient(m, f.train[1], seqs, {5.1, 6.3, 5.4, 7.0});
  auto g1 = grads(m);
  double diff = 0.0;
  for (std::size_t i = 0; i < g0.size(); ++i)
    for (std::size_t k = 0; k < g0[i].size(); ++k) diff = std::max(diff, std::abs(g0[i][k] - g1[i][k]));
  EXPECT_LE(diff, 1e-12);
}

TEST(Scst, TwoSamplesMatchHandAssembledExpression) {
  Fixture f;
  auto m = f.model(9);
  const std::vector<int> s1{3, 4, 2}, s2{5, 2};
  auto g1 = grad_log_prob(m, f.train[2], s1);
  auto g2 = grad_log_prob(m, f.train[2], s2);
  zero_grads(m);
  scst_gradient(m, f.train[2], {s1, s2}, {1.0, 0.0});
  auto got = grads(m);
  // b = 0.5: -(1/2)[(1 - b) grad log p1 + (0 - b) grad log p2].
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
    for (std::size_t k = 0; k < got[i].size(); ++k)
      worst = std::max(worst, std::abs(got[i][k] - (-0.25 * g1[i][k] + 0.25 * g2[i][k])));
  EXPECT_LE(worst, 1e-10);
  EXPECT_GT(grad_norm(m), 0.0);
}

TEST(Scst, ConfigAndReferenceErrors) {
  EXPECT_THROW((RlConfig{1, 1.0}).validate(), ConfigError);
  EXPECT_THROW((RlConfig{5, 0.0}).validate(), ConfigError);
  Fixture f;
  auto m = f.model();
  Adam<D> opt;
  Rng rng(1);
  auto train = f.train;
  train[0].refs.clear();
  RewardFn r = [](const std::vector<int>&, std::size_t) { return 0.0; };
  EXPECT_THROW(scst_step(m, train, {0}, RlConfig{}, r, rng, opt, [](ParamGroup) { return 1e-3; }), DataError);
}

TEST(Scst, StepReportsMeanSampledReward) {
  Fixture f;
  auto m = f.model(10);
  Adam<D> opt;
  Rng rng(2);
  RewardFn r = [](const std::vector<int>& w, std::size_t i) { return static_cast<double>(w.size() + i); };
  Rng replay(2);
  double expect = 0.0;
  for (std::size_t idx : {0u, 1u}) {
    const auto mem = memory_value(m, f.train[idx]);
    for (int i = 0; i < 5; ++i) expect += r(model::sample_decode(m, mem, 1.0, replay).words(), idx) / 10.0;
  }
  EXPECT_NEAR(scst_step(m, f.train, {0, 1}, RlConfig{}, r, rng, opt, [](ParamGroup) { return 1e-3; }), expect, 1e-12);
}

TEST(TrainConfig, FullScaleDefaultsValidate) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.xe_epochs, 20u);
  EXPECT_EQ(c.rl_epochs, 30u);
  EXPECT_EQ(c.xe_batch, 50u);
  EXPECT_EQ(c.rl_batch, 10u);
  EXPECT_EQ(c.xe_lr.encoder_base, 4e-5);
  EXPECT_EQ(c.rl_lr.other_base, 2e-5);
  EXPECT_EQ(c.rl.k, 5u);
  EXPECT_EQ(c.patience, 5u);
}

TrainConfig small_config() {
  TrainConfig c;
  c.xe_epochs = 3;
  c.xe_batch = 4;
  c.xe_lr = {1e-3, 1e-3, ScheduleKind::lambda};
  c.rl_epochs = 2;
  c.rl_batch = 4;
  c.rl_lr = {1e-4, 1e-4, ScheduleKind::constant};
  c.seed = 11;
  return c;
}

TEST(Trainer, ResumeReproducesNextEpochBitIdentically) {
  Fixture f(8, 4, 0.1);
  const auto path = (std::filesystem::temp_directory_path() / "ptsn_resume.ckpt").string();
  auto m = f.model(12);
  Trainer<D> t(m, small_config(), f.train, f.val, Stage::xe);
  EpochRecord r1, r2;
  t.run_epoch(r1);
  t.checkpoint().save(path);
  t.run_epoch(r2);

  auto m2 = model::captioner_from_checkpoint<D>(model::Checkpoint::load(path));
  Trainer<D> t2(m2, small_config(), f.train, f.val, Stage::xe);
  t2.resume(model::Checkpoint::load(path));
  EXPECT_EQ(t2.epoch(), 1u);
  EpochRecord r2b;
  t2.run_epoch(r2b);
  EXPECT_EQ(r2.value, r2b.value);
  EXPECT_EQ(r2.val_cider, r2b.val_cider);
  auto pa = m.parameters(), pb = m2.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  std::filesystem::remove(path);
}

TEST(Trainer, RlStageRunsAndResumesBitIdentically) {
  Fixture f;
  auto m = f.model(13);
  auto cfg = small_config();
  Trainer<D> t(m, cfg, f.train, f.val, Stage::rl);
  EpochRecord r1, r2;
  t.run_epoch(r1);
  const auto ck = t.checkpoint();
  EXPECT_TRUE(t.run_epoch(r2));
  EXPECT_EQ(r2.stage, Stage::rl);
  EXPECT_EQ(r2.lr.at("other"), 1e-4);
  auto m2 = model::captioner_from_checkpoint<D>(ck);
  Trainer<D> t2(m2, cfg, f.train, f.val, Stage::rl);
  t2.resume(ck);
  EpochRecord r2b;
  t2.run_epoch(r2b);
  EXPECT_EQ(r2.value, r2b.value);
  Trainer<D> wrong(m2, cfg, f.train, f.val, Stage::xe);
  EXPECT_THROW(wrong.resume(ck), DataError);
}

TEST(Trainer, LogRecordCarriesEveryField) {
  Fixture f;
  auto m = f.model(14);
  Trainer<D> t(m, small_config(), f.train, f.val, Stage::xe);
  std::vector<EpochRecord> recs;
  t.run([&](const EpochRecord& r) { recs.push_back(r); });
  ASSERT_EQ(recs.size(), 3u);
  const auto j = recs[0].to_json();
  for (const char* k : {"stage", "epoch", "lr_by_group", "loss", "val_cider", "wallclock"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["lr_by_group"]["other"].get<double>(), 0.25e-3);
  EXPECT_TRUE(t.best().has_value());
}

TEST(Trainer, SeededRunsAreBitIdentical) {
  Fixture f(8, 4, 0.1);
  auto run = [&] {
    auto m = f.model(15);
    Trainer<D> t(m, small_config(), f.train, f.val, Stage::xe);
    t.run();
    return model::make_checkpoint(m).tensors;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace ptsn::training
