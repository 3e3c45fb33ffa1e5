#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "common/test_util.hpp"
#include "helix/training.hpp"

namespace helix {
namespace {

Tensor<double> const_tensor(const Shape& shape, std::initializer_list<double> vals) {
  auto t = Tensor<double>::from_data(shape, std::vector<double>(vals));
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor<double>& t, const std::vector<double>& g) {
  t.zero_grad();
  const std::vector<double> zeros(g.size(), 0.0);
  accumulate_grad(t.gs_, zeros.data(), zeros.size(), "test");  // allocates the slot
  std::copy(g.begin(), g.end(), t.gs_->g->v.begin());
}

TEST(Adamw, ZeroGradientIsPureDecay) {
  auto a = const_tensor(Shape{4}, {1.0, -2.0, 0.5, 3.0});
  auto b = const_tensor(Shape{2}, {-0.25, 8.0});
  set_grad(a, {0, 0, 0, 0});
  set_grad(b, {0, 0});
  NamedParams<double> params = {{"a", &a}, {"b", &b}};
  OptimizerState<double> state;
  adamw_step(params, state, 0.1, 0.9, 0.999, 1e-8, 0.05);

  const double factor = 1.0 - 0.1 * 0.05;
  EXPECT_EQ(a.data()[0], 1.0 * factor);
  EXPECT_EQ(a.data()[1], -2.0 * factor);
  EXPECT_EQ(a.data()[2], 0.5 * factor);
  EXPECT_EQ(a.data()[3], 3.0 * factor);
  EXPECT_EQ(b.data()[0], -0.25 * factor);
  EXPECT_EQ(b.data()[1], 8.0 * factor);
  EXPECT_EQ(state.step, 1);
}

TEST(Adamw, ClosedFormFirstStep) {
  auto w = const_tensor(Shape{1}, {2.0});
  set_grad(w, {1.0});
  NamedParams<double> params = {{"w", &w}};
  OptimizerState<double> state;
  const double lr = 0.01;
  adamw_step(params, state, lr, 0.9, 0.999, 1e-8, 0.0);

  // m-hat = v-hat = 1 after one unit-gradient step
  const double want = 2.0 - lr * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(w.data()[0], want, 1e-15);
}

TEST(Adamw, MatchesPlainAdamWhenDecayIsZero) {
  Rng rng(3);
  auto w = const_tensor(Shape{6}, {0.3, -1.2, 0.8, 2.0, -0.1, 0.05});
  std::vector<double> oracle(w.data().begin(), w.data().end());
  std::vector<double> om(6, 0.0), ov(6, 0.0);

  NamedParams<double> params = {{"w", &w}};
  OptimizerState<double> state;
  const double lr = 3e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= 10; ++step) {
    std::vector<double> g(6);
    for (auto& x : g) x = rng.uniform(-2.0, 2.0);
    set_grad(w, g);
    adamw_step(params, state, lr, b1, b2, eps, 0.0);

    // textbook Adam, written out independently
    for (int i = 0; i < 6; ++i) {
      om[i] = b1 * om[i] + (1 - b1) * g[i];
      ov[i] = b2 * ov[i] + (1 - b2) * g[i] * g[i];
      const double mh = om[i] / (1 - std::pow(b1, step));
      const double vh = ov[i] / (1 - std::pow(b2, step));
      oracle[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(w.data()[i], oracle[i], 1e-12);
}

TEST(Adamw, NonFiniteGradientAbortsBeforeAnyUpdate) {
  auto a = const_tensor(Shape{2}, {1.0, 2.0});
  auto b = const_tensor(Shape{2}, {3.0, 4.0});
  set_grad(a, {0.5, 0.5});
  set_grad(b, {0.1, std::numeric_limits<double>::quiet_NaN()});
  NamedParams<double> params = {{"alpha", &a}, {"beta", &b}};
  OptimizerState<double> state;
  try {
    adamw_step(params, state, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("beta"), std::string::npos);
    EXPECT_NE(msg.find("element 1"), std::string::npos);
  }
  // aborted step leaves parameters and state untouched
  EXPECT_EQ(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[1], 4.0);
  EXPECT_EQ(state.step, 0);
  EXPECT_TRUE(state.m.empty());
}

TEST(Schedule, CosineEndpointsMidpointAndMonotonicity) {
  TrainConfig tc;
  EXPECT_DOUBLE_EQ(cosine_lr(0, tc), 3e-4);
  EXPECT_EQ(cosine_lr(100, tc), 1e-6);
  EXPECT_NEAR(cosine_lr(50, tc), 1.505e-4, 1e-15);

  double prev = cosine_lr(0, tc);
  for (std::int64_t e = 1; e <= 100; ++e) {
    const double cur = cosine_lr(e, tc);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
  EXPECT_THROW(cosine_lr(-1, tc), ConfigError);
  EXPECT_THROW(cosine_lr(101, tc), ConfigError);
}

TEST(Clip, ThreeFourFiveScalesByPointTwo) {
  auto a = const_tensor(Shape{1}, {0.0});
  auto b = const_tensor(Shape{1}, {0.0});
  set_grad(a, {3.0});
  set_grad(b, {4.0});
  NamedParams<double> params = {{"a", &a}, {"b", &b}};

  const double pre = clip_grad_norm(params, 1.0);
  EXPECT_DOUBLE_EQ(pre, 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);

  // idempotent: the second clip sees norm 1 and moves nothing measurably
  const double again = clip_grad_norm(params, 1.0);
  EXPECT_NEAR(again, 1.0, 1e-12);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
}

TEST(Clip, SmallNormsPassThroughUntouched) {
  auto a = const_tensor(Shape{2}, {0.0, 0.0});
  set_grad(a, {0.3, 0.4});
  NamedParams<double> params = {{"a", &a}};
  const double pre = clip_grad_norm(params, 1.0);
  EXPECT_DOUBLE_EQ(pre, 0.5);
  EXPECT_EQ(a.grad()[0], 0.3);  // bitwise: no rescale happened
  EXPECT_EQ(a.grad()[1], 0.4);
}

TEST(Clip, PostClipNormBoundedOverRandomSets) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = const_tensor(Shape{8}, {0, 0, 0, 0, 0, 0, 0, 0});
    auto b = const_tensor(Shape{3}, {0, 0, 0});
    std::vector<double> ga(8), gb(3);
    for (auto& x : ga) x = rng.uniform(-3.0, 3.0);
    for (auto& x : gb) x = rng.uniform(-3.0, 3.0);
    set_grad(a, ga);
    set_grad(b, gb);
    NamedParams<double> params = {{"a", &a}, {"b", &b}};
    clip_grad_norm(params, 1.0);

    double sq = 0;
    for (double g : a.grad()) sq += g * g;
    for (double g : b.grad()) sq += g * g;
    EXPECT_LE(std::sqrt(sq), 1.0 + 1e-9);
  }

  auto c = const_tensor(Shape{1}, {0.0});
  set_grad(c, {std::numeric_limits<double>::infinity()});
  NamedParams<double> params = {{"c", &c}};
  EXPECT_THROW(clip_grad_norm(params, 1.0), NumericError);
}

TEST(Augment, IdentityWhenEveryKnobIsOff) {
  AudioClip clip;
  clip.waveform.sample_rate = 16000;
  Rng wr(5);
  clip.waveform.samples.resize(400);
  for (auto& s : clip.waveform.samples) s = wr.uniform(-1.0, 1.0);

  TrainConfig tc;
  tc.shift_max_s = 0.0;
  tc.amp_lo = tc.amp_hi = 1.0;
  tc.noise_sigma = 0.0;
  Rng rng(1);
  auto out = augment(clip, tc, rng);
  ASSERT_EQ(out.waveform.samples.size(), clip.waveform.samples.size());
  for (std::size_t i = 0; i < clip.waveform.samples.size(); ++i) {
    EXPECT_EQ(out.waveform.samples[i], clip.waveform.samples[i]);
  }
}

TEST(Augment, CircularShiftPreservesTheSampleMultiset) {
  AudioClip clip;
  clip.waveform.sample_rate = 16000;
  Rng wr(9);
  clip.waveform.samples.resize(16000);
  for (auto& s : clip.waveform.samples) s = wr.uniform(-1.0, 1.0);

  TrainConfig tc;
  tc.amp_lo = tc.amp_hi = 1.0;
  tc.noise_sigma = 0.0;  // shift only
  Rng rng(2);
  auto out = augment(clip, tc, rng);
  ASSERT_EQ(out.waveform.samples.size(), 16000u);

  auto a = clip.waveform.samples;
  auto b = out.waveform.samples;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  // determinism under the stream
  Rng rng_a = substream(11, "augment", 3, 4);
  Rng rng_b = substream(11, "augment", 3, 4);
  auto o1 = augment(clip, TrainConfig{}, rng_a);
  auto o2 = augment(clip, TrainConfig{}, rng_b);
  for (std::size_t i = 0; i < o1.waveform.samples.size(); ++i) {
    EXPECT_EQ(o1.waveform.samples[i], o2.waveform.samples[i]);
  }
}

TEST(Augment, GainStaysInsideTheConfiguredRange) {
  AudioClip clip;
  clip.waveform.sample_rate = 16000;
  clip.waveform.samples.assign(2000, 0.5);
  double peak_in = 0.5;

  TrainConfig tc;
  tc.noise_sigma = 0.0;
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto out = augment(clip, tc, rng);
    double peak = 0;
    for (double s : out.waveform.samples) peak = std::max(peak, std::abs(s));
    EXPECT_LE(peak, 1.2 * peak_in + 1e-12);
    EXPECT_GE(peak, 0.8 * peak_in - 1e-12);
  }
}

TEST(Mixup, PlanPairingAndConvexity) {
  Rng rng(5);
  auto plan = make_mixup_plan(8, 0.3, rng);
  EXPECT_GE(plan.lambda, 0.0);
  EXPECT_LE(plan.lambda, 1.0);
  auto sorted = plan.perm;
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 8; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);

  EXPECT_THROW(make_mixup_plan(1, 0.3, rng), ConfigError);

  // hand-built plan: lambda = 0.5 averages the pair
  MixupPlan half;
  half.lambda = 0.5;
  half.perm = {1, 0};
  std::vector<std::vector<double>> rows = {{2.0, 4.0}, {6.0, 0.0}};
  mix_in_place(rows, half);
  EXPECT_DOUBLE_EQ(rows[0][0], 4.0);
  EXPECT_DOUBLE_EQ(rows[0][1], 2.0);
  EXPECT_DOUBLE_EQ(rows[1][0], 4.0);
  EXPECT_DOUBLE_EQ(rows[1][1], 2.0);

  // lambda = 1 is the identity
  MixupPlan ident;
  ident.lambda = 1.0;
  ident.perm = {1, 0};
  std::vector<std::vector<double>> keep = {{1.0, 2.0}, {3.0, 4.0}};
  mix_in_place(keep, ident);
  EXPECT_EQ(keep[0][0], 1.0);
  EXPECT_EQ(keep[1][1], 4.0);

  // one-hot targets stay on the simplex across random draws
  for (int trial = 0; trial < 100; ++trial) {
    auto p = make_mixup_plan(6, 0.3, rng);
    std::vector<std::vector<double>> targets(6, std::vector<double>(4, 0.0));
    for (int i = 0; i < 6; ++i) targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(i % 4)] = 1.0;
    mix_in_place(targets, p);
    for (const auto& row : targets) {
      double sum = 0;
      for (double v : row) {
        EXPECT_GE(v, -1e-15);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }

  std::vector<std::vector<double>> ragged = {{1.0, 2.0}, {3.0}};
  MixupPlan p2;
  p2.lambda = 0.5;
  p2.perm = {1, 0};
  EXPECT_THROW(mix_in_place(ragged, p2), ShapeError);
}

// ---- end-to-end loop ----

// Two well-separated Gaussian blobs in token space.
std::vector<Example<double>> toy_token_set(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> axis(16);
  Rng axis_rng(999);  // same axis for every call
  for (auto& v : axis) v = axis_rng.uniform(-1.0, 1.0);

  std::vector<Example<double>> out;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t label = i % 2;
    const double sign = label == 0 ? 1.0 : -1.0;
    Example<double> ex;
    ex.label = label;
    ex.tokens = Tensor<double>(Shape{4, 16});
    for (std::int64_t t = 0; t < 4; ++t) {
      for (std::int64_t d = 0; d < 16; ++d) {
        ex.tokens.raw()[t * 16 + d] = sign * axis[static_cast<std::size_t>(d)] +
                                      0.1 * rng.uniform(-1.0, 1.0);
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Logistic regression on mean-pooled tokens: the separability oracle.
double logistic_regression_accuracy(const std::vector<Example<double>>& set) {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& ex : set) {
    std::vector<double> f(16, 0.0);
    for (std::int64_t t = 0; t < 4; ++t) {
      for (std::int64_t d = 0; d < 16; ++d) f[static_cast<std::size_t>(d)] += ex.tokens.data()[t * 16 + d] / 4.0;
    }
    x.push_back(std::move(f));
    y.push_back(static_cast<double>(ex.label));
  }
  std::vector<double> w(16, 0.0);
  double b = 0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(16, 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = b;
      for (int d = 0; d < 16; ++d) z += w[static_cast<std::size_t>(d)] * x[i][static_cast<std::size_t>(d)];
      const double p = 1.0 / (1.0 + std::exp(-z));
      for (int d = 0; d < 16; ++d) gw[static_cast<std::size_t>(d)] += (p - y[i]) * x[i][static_cast<std::size_t>(d)];
      gb += p - y[i];
    }
    for (int d = 0; d < 16; ++d) w[static_cast<std::size_t>(d)] -= 0.5 * gw[static_cast<std::size_t>(d)] / static_cast<double>(x.size());
    b -= 0.5 * gb / static_cast<double>(x.size());
  }
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = b;
    for (int d = 0; d < 16; ++d) z += w[static_cast<std::size_t>(d)] * x[i][static_cast<std::size_t>(d)];
    if ((z > 0) == (y[i] > 0.5)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(x.size());
}

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.variant = Variant::pure_mamba;
  cfg.n_classes = 2;
  cfg.ssm.d_state = 8;
  return cfg;
}

TEST(TrainRun, SeparableToyTaskReachesPerfectTrainAccuracy) {
  auto train_set = toy_token_set(64, 1);
  auto eval_set = toy_token_set(32, 2);
  EXPECT_EQ(logistic_regression_accuracy(train_set), 1.0);  // separable by construction

  Rng mrng(10);
  auto model = build_model<double>(toy_model_config(), mrng);
  TrainConfig tc;
  tc.epochs = 50;
  tc.lr0 = 5e-3;
  tc.lr_min = 1e-4;
  tc.batch_size = 32;
  tc.seed = 77;
  TrainOptions<double> opt;
  opt.out_dir = ::testing::TempDir() + "toy_run";
  auto result = train_run(model, train_set, eval_set, tc, opt);

  EXPECT_EQ(result.metrics.size(), static_cast<std::size_t>(2 * result.epochs_completed));
  double best_train = 0;
  for (const auto& r : result.metrics) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    if (r.split == "train") best_train = std::max(best_train, r.accuracy);
  }
  EXPECT_EQ(best_train, 1.0) << "never hit 100% train accuracy in 50 epochs";

  // metrics file row count: epochs x 2 splits
  std::ifstream mf(opt.out_dir + "/metrics.jsonl");
  std::string line;
  std::int64_t rows = 0;
  while (std::getline(mf, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, 2 * result.epochs_completed);
  EXPECT_FALSE(result.best_checkpoint.empty());
  EXPECT_GE(result.best_epoch, 0);
}

TEST(TrainRun, ResumeReproducesTheUninterruptedRun) {
  auto train_set = toy_token_set(16, 3);
  auto eval_set = toy_token_set(8, 4);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.seed = 55;

  Rng r1(20);
  auto full_model = build_model<double>(toy_model_config(), r1);
  TrainOptions<double> full_opt;
  full_opt.out_dir = ::testing::TempDir() + "full_run";
  auto full = train_run(full_model, train_set, eval_set, tc, full_opt);
  ASSERT_EQ(full.epochs_completed, 4);

  // same schedule horizon, interrupted after two epochs
  Rng r2(20);
  auto half_model = build_model<double>(toy_model_config(), r2);
  TrainOptions<double> half_opt;
  half_opt.out_dir = ::testing::TempDir() + "half_run";
  half_opt.stop_after_epochs = 2;
  auto half = train_run(half_model, train_set, eval_set, tc, half_opt);
  ASSERT_EQ(half.epochs_completed, 2);
  EXPECT_TRUE(half.stopped_early);

  // fresh model object, state rebuilt from the checkpoint
  Rng r3(1234);
  auto resumed_model = build_model<double>(toy_model_config(), r3);
  TrainOptions<double> resume_opt;
  resume_opt.out_dir = ::testing::TempDir() + "resume_run";
  resume_opt.resume_from = half_opt.out_dir + "/last.ckpt";
  auto resumed = train_run(resumed_model, train_set, eval_set, tc, resume_opt);
  EXPECT_EQ(resumed.epochs_completed, 4);

  // epochs 2 and 3 of the resumed run match the uninterrupted one
  ASSERT_EQ(resumed.metrics.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& a = full.metrics[4 + i];
    const auto& b = resumed.metrics[i];
    EXPECT_EQ(a.epoch, b.epoch);
    EXPECT_EQ(a.split, b.split);
    EXPECT_NEAR(a.loss, b.loss, 1e-6);
    EXPECT_EQ(a.accuracy, b.accuracy);
  }
}

TEST(TrainRun, FixedSeedIsReproducible) {
  auto train_set = toy_token_set(16, 5);
  auto eval_set = toy_token_set(8, 6);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.seed = 99;

  std::vector<double> losses[2];
  for (int run = 0; run < 2; ++run) {
    Rng mr(42);
    auto model = build_model<double>(toy_model_config(), mr);
    auto result = train_run(model, train_set, eval_set, tc);
    for (const auto& r : result.metrics) losses[run].push_back(r.loss);
  }
  ASSERT_EQ(losses[0].size(), losses[1].size());
  for (std::size_t i = 0; i < losses[0].size(); ++i) EXPECT_EQ(losses[0][i], losses[1][i]);
}

TEST(TrainRun, DivergenceAbortsWithTheOffendingStep) {
  auto train_set = toy_token_set(8, 7);
  auto eval_set = toy_token_set(8, 8);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.lr0 = 1e14;  // guaranteed blow-up
  tc.lr_min = 1e13;
  tc.seed = 1;

  Rng mr(2);
  auto model = build_model<double>(toy_model_config(), mr);
  try {
    train_run(model, train_set, eval_set, tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at epoch"), std::string::npos) << e.what();
  }
}

TEST(TrainRun, MelMixingStillTrainsTheFrontend) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.variant = Variant::pure_mamba;
  cfg.frontend = FrontendKind::spectrogram;
  cfg.n_classes = 2;
  cfg.ssm.d_state = 8;
  Rng mr(8);
  auto model = build_model<double>(cfg, mr);
  const std::vector<double> conv_before(model.spec_fe->conv_w.data().begin(),
                                        model.spec_fe->conv_w.data().end());

  std::vector<Example<double>> train_set;
  Rng wr(17);
  for (int i = 0; i < 4; ++i) {
    Example<double> ex;
    ex.label = i % 2;
    ex.wave.samples.resize(16000);
    for (auto& s : ex.wave.samples) s = 0.3 * wr.uniform(-1.0, 1.0);
    train_set.push_back(std::move(ex));
  }

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.seed = 3;
  auto result = train_run(model, train_set, train_set, tc);
  EXPECT_EQ(result.epochs_completed, 1);

  double moved = 0;
  for (std::size_t i = 0; i < conv_before.size(); ++i) {
    moved = std::max(moved, std::abs(conv_before[i] - model.spec_fe->conv_w.data()[i]));
  }
  EXPECT_GT(moved, 0.0) << "patch conv never updated; mel mixing detached the frontend";

  // the raw path has no post-frontend mixing cut
  ModelConfig raw_cfg = cfg;
  raw_cfg.frontend = FrontendKind::raw;
  Rng mr2(8);
  auto raw_model = build_model<double>(raw_cfg, mr2);
  std::vector<Example<double>> raw_set;
  for (int i = 0; i < 2; ++i) {
    Example<double> ex;
    ex.label = i % 2;
    ex.wave.samples.assign(1600, 0.1);
    raw_set.push_back(std::move(ex));
  }
  TrainOptions<double> opt;
  opt.mixup_domain = MixupDomain::representation;
  EXPECT_THROW(train_run(raw_model, raw_set, raw_set, tc, opt), ConfigError);
}

TEST(Cv, SummaryArithmetic) {
  auto two = summarize_cv({0.5, 0.7});
  EXPECT_DOUBLE_EQ(two.mean, 0.6);
  EXPECT_DOUBLE_EQ(two.stddev, 0.1);  // population convention

  auto same = summarize_cv({0.42, 0.42, 0.42});
  EXPECT_DOUBLE_EQ(same.mean, 0.42);
  EXPECT_EQ(same.stddev, 0.0);

  const std::vector<double> planted = {0.61, 0.55, 0.70, 0.64, 0.58};
  auto five = summarize_cv(planted);
  double mean = 0;
  for (double a : planted) mean += a;
  mean /= 5.0;
  double var = 0;
  for (double a : planted) var += (a - mean) * (a - mean);
  EXPECT_DOUBLE_EQ(five.mean, mean);
  EXPECT_DOUBLE_EQ(five.stddev, std::sqrt(var / 5.0));

  EXPECT_THROW(summarize_cv({}), ConfigError);

  auto looped = cross_validate(5, [&planted](std::int64_t k) {
    return planted[static_cast<std::size_t>(k)];
  });
  EXPECT_DOUBLE_EQ(looped.mean, five.mean);
  EXPECT_DOUBLE_EQ(looped.stddev, five.stddev);
  EXPECT_THROW(cross_validate(1, [](std::int64_t) { return 0.5; }), ConfigError);
}

}  // namespace
}  // namespace helix
