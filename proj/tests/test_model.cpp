#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "common/test_util.hpp"
#include "helix/gradcheck.hpp"
#include "helix/model.hpp"

namespace helix {
namespace {

ModelConfig tiny_config(Variant v, std::int64_t n_classes = 3) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.variant = v;
  cfg.n_classes = n_classes;
  cfg.heads = 4;
  cfg.ssm.d_state = 8;
  return cfg;
}

Tensor<double> random_tokens(std::int64_t len, std::int64_t d, std::uint64_t seed) {
  return testutil::random_tensor(Shape{len, d}, seed);
}

Tensor<double> one_hot(std::int64_t n_classes, std::int64_t cls) {
  Tensor<double> t(Shape{1, n_classes});
  t.raw()[cls] = 1.0;
  return t;
}

std::vector<LayerKind> kinds_of(Model<double>& m) {
  std::vector<LayerKind> out;
  for (auto& l : m.layers) out.push_back(l.kind);
  return out;
}

Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::int64_t>& perm) {
  Tensor<double> out(x.shape());
  const std::int64_t cols = x.dim(1);
  for (std::size_t r = 0; r < perm.size(); ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      out.raw()[static_cast<std::int64_t>(r) * cols + c] = x.data()[perm[r] * cols + c];
    }
  }
  return out;
}

TEST(Layout, VariantStacks) {
  Rng rng(1);
  auto mamba = build_model<double>(tiny_config(Variant::pure_mamba), rng);
  for (auto k : kinds_of(mamba)) EXPECT_EQ(k, LayerKind::mamba);

  auto attn = build_model<double>(tiny_config(Variant::pure_attention), rng);
  for (auto k : kinds_of(attn)) EXPECT_EQ(k, LayerKind::attention);

  // Default slot is the middle of the stack: index N/2, zero based.
  ModelConfig six = tiny_config(Variant::helix);
  six.n_layers = 6;
  auto hel = build_model<double>(six, rng);
  const auto kinds = kinds_of(hel);
  for (std::int64_t i = 0; i < 6; ++i) {
    EXPECT_EQ(kinds[static_cast<std::size_t>(i)],
              i == 3 ? LayerKind::attention : LayerKind::mamba);
  }

  ModelConfig first = tiny_config(Variant::helix);
  first.attention_index = 0;
  auto hel0 = build_model<double>(first, rng);
  EXPECT_EQ(kinds_of(hel0)[0], LayerKind::attention);
  EXPECT_EQ(kinds_of(hel0)[1], LayerKind::mamba);
}

TEST(Layout, ConfigValidation) {
  Rng rng(1);
  ModelConfig bad_idx = tiny_config(Variant::helix);
  bad_idx.attention_index = 2;  // stack has layers 0 and 1
  EXPECT_THROW(build_model<double>(bad_idx, rng), ConfigError);

  ModelConfig no_classes = tiny_config(Variant::pure_mamba, 3);
  no_classes.n_classes = 0;
  EXPECT_THROW(build_model<double>(no_classes, rng), ConfigError);

  ModelConfig bad_pool = tiny_config(Variant::pure_mamba);
  bad_pool.pool = {PoolKind::first_k, 0};
  EXPECT_THROW(build_model<double>(bad_pool, rng), ConfigError);

  ModelConfig bad_heads = tiny_config(Variant::pure_attention);
  bad_heads.heads = 3;  // 16 % 3 != 0
  EXPECT_THROW(build_model<double>(bad_heads, rng), ConfigError);
}

TEST(Pooling, SingleTokenIsIdentity) {
  Rng rng(5);
  auto m = build_model<double>(tiny_config(Variant::pure_mamba, 4), rng);
  auto tokens = random_tokens(1, 16, 99);
  auto reps = model_trunk(m, tokens);
  auto logits = head_logits(m, reps);

  // With one token the mean is that token, so logits are a plain affine map.
  for (std::int64_t c = 0; c < 4; ++c) {
    double want = m.b_cls.data()[c];
    for (std::int64_t j = 0; j < 16; ++j) {
      want += m.w_cls.data()[c * 16 + j] * reps.data()[j];
    }
    EXPECT_NEAR(logits.data()[c], want, 1e-12);
  }
}

TEST(Pooling, AllMatchesExplicitFullWindow) {
  ModelConfig all_cfg = tiny_config(Variant::helix);
  ModelConfig k_cfg = all_cfg;
  k_cfg.pool = {PoolKind::first_k, 12};

  Rng r1(3), r2(3);
  auto m_all = build_model<double>(all_cfg, r1);
  auto m_k = build_model<double>(k_cfg, r2);
  auto tokens = random_tokens(12, 16, 7);
  auto a = model_forward(m_all, tokens);
  auto b = model_forward(m_k, tokens);
  for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Pooling, LaterPositionsCannotReachTheHead) {
  ModelConfig cfg = tiny_config(Variant::helix, 5);
  cfg.pool = {PoolKind::first_k, 10};
  Rng rng(11);
  auto m = build_model<double>(cfg, rng);

  auto tokens = random_tokens(40, 16, 21);
  auto reps = model_trunk(m, tokens);
  auto base = head_logits(m, reps);

  // Injected at the pooling input: positions >= K change, logits must not.
  Tensor<double> bumped(reps.shape());
  for (std::int64_t i = 0; i < reps.size(); ++i) bumped.raw()[i] = reps.data()[i];
  for (std::int64_t r = 10; r < 40; ++r) {
    for (std::int64_t c = 0; c < 16; ++c) bumped.raw()[r * 16 + c] += 1000.0 + double(r);
  }
  auto moved = head_logits(m, bumped);
  for (std::int64_t i = 0; i < base.size(); ++i) EXPECT_EQ(base.data()[i], moved.data()[i]);

  // A window longer than the sequence is a config error, not a clamp.
  auto short_reps = model_trunk(m, random_tokens(8, 16, 22));
  EXPECT_THROW(head_logits(m, short_reps), ConfigError);
}

TEST(Permutation, MambaVariesWhereAttentionDoesNot) {
  Rng r1(17), r2(17);
  auto m_mamba = build_model<double>(tiny_config(Variant::pure_mamba), r1);
  auto m_attn = build_model<double>(tiny_config(Variant::pure_attention), r2);

  const std::int64_t len = 9;
  auto tokens = random_tokens(len, 16, 31);
  std::vector<std::int64_t> perm(len);
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle_rng(5);
  for (std::int64_t i = len - 1; i > 0; --i) {
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
  }
  auto shuffled = permute_rows(tokens, perm);

  auto a0 = model_forward(m_attn, tokens);
  auto a1 = model_forward(m_attn, shuffled);
  EXPECT_LT(testutil::max_abs_diff(a0.data(), a1.data()), 1e-8);

  auto s0 = model_forward(m_mamba, tokens);
  auto s1 = model_forward(m_mamba, shuffled);
  EXPECT_GT(testutil::max_abs_diff(s0.data(), s1.data()), 1e-6);
}

TEST(Permutation, PositionalEncodingBreaksAttentionInvariance) {
  ModelConfig cfg = tiny_config(Variant::pure_attention);
  cfg.positional_encoding = true;
  Rng rng(23);
  auto m = build_model<double>(cfg, rng);

  auto tokens = random_tokens(6, 16, 41);
  std::vector<std::int64_t> perm = {5, 3, 0, 1, 4, 2};
  auto out0 = model_forward(m, tokens);
  auto out1 = model_forward(m, permute_rows(tokens, perm));
  EXPECT_GT(testutil::max_abs_diff(out0.data(), out1.data()), 1e-6);

  // Spot check the table itself against the closed form.
  auto pe = sinusoidal_encoding<double>(3, 4);
  EXPECT_NEAR(pe.data()[0], 0.0, 1e-15);                  // sin(0)
  EXPECT_NEAR(pe.data()[1], 1.0, 1e-15);                  // cos(0)
  EXPECT_NEAR(pe.data()[4], std::sin(1.0), 1e-15);        // t=1, first pair
  EXPECT_NEAR(pe.data()[7], std::cos(1.0 / 100.0), 1e-15);  // t=1, second pair
}

TEST(Params, TotalsMatchGoldenEnumeration) {
  ModelConfig base;
  base.n_layers = 6;
  base.d_model = 256;
  base.n_classes = 50;
  base.frontend = FrontendKind::raw;

  std::map<Variant, std::int64_t> totals;
  for (Variant v : {Variant::pure_mamba, Variant::helix, Variant::pure_attention}) {
    ModelConfig cfg = base;
    cfg.variant = v;
    Rng rng(1);
    auto m = build_model<float>(cfg, rng);
    totals[v] = model_param_count(m);
  }
  EXPECT_EQ(totals[Variant::pure_mamba], 6392626);
  EXPECT_EQ(totals[Variant::helix], 6392377);
  EXPECT_EQ(totals[Variant::pure_attention], 6391132);

  // Swapping one bidirectional block for matched attention costs exactly the
  // published per-block deficit.
  EXPECT_EQ(totals[Variant::pure_mamba] - totals[Variant::helix], 249);

  const double lo = static_cast<double>(totals[Variant::pure_attention]);
  const double hi = static_cast<double>(totals[Variant::pure_mamba]);
  EXPECT_LT((hi - lo) / hi, 0.02);

  SSMConfig ssm;
  ssm.d_model = 256;
  EXPECT_LE(6 * bimamba_param_count(ssm), totals[Variant::pure_mamba]);

  ModelConfig spec_cfg = base;
  spec_cfg.variant = Variant::helix;
  spec_cfg.frontend = FrontendKind::spectrogram;
  Rng rng(1);
  auto m_spec = build_model<float>(spec_cfg, rng);
  EXPECT_EQ(model_param_count(m_spec) - totals[Variant::helix], 24576);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  ModelConfig cfg = tiny_config(Variant::helix, 5);
  cfg.pool = {PoolKind::first_k, 4};
  Rng r1(101);
  auto m = build_model<double>(cfg, r1);

  std::vector<double> moment(static_cast<std::size_t>(m.b_cls.size()), 0.125);
  std::vector<SavedArray<double>> extra = {
      {"opt.m.head.b", Shape{5}, moment.data(), 5},
  };
  const std::string path = ::testing::TempDir() + "roundtrip.ckpt";
  save_model(path, m, {{"epoch", "7"}}, extra);

  Rng r2(999);
  auto fresh = build_model<double>(cfg, r2);
  auto file = read_checkpoint(path);
  EXPECT_EQ(file.kv.at("epoch"), "7");
  load_model_params(file, fresh);

  std::map<std::string, const Tensor<double>*> orig;
  m.visit([&orig](const std::string& n, Tensor<double>& t) { orig[n] = &t; });
  fresh.visit([&orig](const std::string& n, Tensor<double>& t) {
    ASSERT_TRUE(orig.count(n)) << n;
    const auto a = orig[n]->data();
    const auto b = t.data();
    ASSERT_EQ(a.size(), b.size()) << n;
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << n << " elem " << i;
  });

  const CheckpointEntry* e = file.find("opt.m.head.b");
  ASSERT_NE(e, nullptr);
  std::vector<double> back(5);
  file.read_into(*e, back.data());
  for (double v : back) EXPECT_EQ(v, 0.125);

  // Stored config reproduces the model that was saved.
  ModelConfig rt = config_from_kv(file.kv);
  EXPECT_EQ(rt.n_layers, cfg.n_layers);
  EXPECT_EQ(rt.d_model, cfg.d_model);
  EXPECT_EQ(rt.variant, cfg.variant);
  EXPECT_EQ(rt.frontend, cfg.frontend);
  EXPECT_EQ(rt.n_classes, cfg.n_classes);
  EXPECT_EQ(rt.pool.kind, cfg.pool.kind);
  EXPECT_EQ(rt.pool.k, cfg.pool.k);
  EXPECT_EQ(rt.ssm.d_state, cfg.ssm.d_state);

  auto loaded = load_model<double>(path);
  auto tokens = random_tokens(6, 16, 55);
  auto want = model_forward(m, tokens);
  auto got = model_forward(loaded, tokens);
  for (std::int64_t i = 0; i < want.size(); ++i) EXPECT_EQ(want.data()[i], got.data()[i]);
}

TEST(Checkpoint, MalformedFilesAreNamed) {
  const std::string bogus = ::testing::TempDir() + "bogus.ckpt";
  {
    std::ofstream f(bogus, std::ios::binary);
    f << "not-a-checkpoint\n";
  }
  try {
    read_checkpoint(bogus);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus.ckpt"), std::string::npos);
  }

  ModelConfig cfg = tiny_config(Variant::pure_mamba, 5);
  Rng rng(7);
  auto m = build_model<double>(cfg, rng);
  const std::string path = ::testing::TempDir() + "shape.ckpt";
  save_model(path, m);

  // A model with a different head no longer matches the stored shapes.
  ModelConfig other = tiny_config(Variant::pure_mamba, 4);
  Rng rng2(7);
  auto m4 = build_model<double>(other, rng2);
  auto file = read_checkpoint(path);
  EXPECT_THROW(load_model_params(file, m4), ShapeError);

  // Dropping an array makes the load fail by name, not by crash.
  auto arrays = model_arrays(m);
  arrays.pop_back();
  const std::string partial = ::testing::TempDir() + "partial.ckpt";
  write_checkpoint(partial, config_to_kv(m.cfg), arrays);
  auto pfile = read_checkpoint(partial);
  try {
    load_model_params(pfile, m);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("head.b"), std::string::npos);
  }

  // Truncated blob: manifest promises more bytes than the file holds.
  auto whole = read_checkpoint(path);
  whole.blob.resize(whole.blob.size() / 2);
  std::vector<double> scratch(static_cast<std::size_t>(whole.entries.back().count));
  EXPECT_THROW(whole.read_into(whole.entries.back(), scratch.data()), IoError);
}

TEST(Gradients, ReachEveryParameter) {
  for (std::uint64_t seed : {2u, 12u, 22u}) {
    ModelConfig cfg = tiny_config(Variant::helix, 3);
    Rng rng(seed);
    auto m = build_model<double>(cfg, rng);

    Waveform wave;
    wave.samples.resize(960);
    Rng wrng(seed + 100);
    for (auto& s : wave.samples) s = wrng.uniform(-0.5, 0.5);

    m.visit([](const std::string&, Tensor<double>& t) { t.zero_grad(); });
    {
      Tape<double> tape;
      auto loss = cross_entropy(forward_wave(m, wave), one_hot(3, 1));
      tape.backward(loss);
    }
    m.visit([](const std::string& name, Tensor<double>& t) {
      auto g = t.grad();
      ASSERT_FALSE(g.empty()) << name;
      double mx = 0;
      for (double v : g) mx = std::max(mx, std::abs(v));
      EXPECT_GT(mx, 0.0) << name << " never received gradient";
    });
  }
}

TEST(Gradients, SpectrogramPathReachesFrontend) {
  ModelConfig cfg = tiny_config(Variant::helix, 3);
  cfg.frontend = FrontendKind::spectrogram;
  Rng rng(31);
  auto m = build_model<double>(cfg, rng);

  Waveform wave;
  wave.samples.resize(16000);
  Rng wrng(77);
  for (auto& s : wave.samples) s = wrng.uniform(-0.5, 0.5);

  {
    Tape<double> tape;
    auto loss = cross_entropy(forward_wave(m, wave), one_hot(3, 0));
    tape.backward(loss);
  }
  m.visit([](const std::string& name, Tensor<double>& t) {
    auto g = t.grad();
    ASSERT_FALSE(g.empty()) << name;
    double mx = 0;
    for (double v : g) mx = std::max(mx, std::abs(v));
    EXPECT_GT(mx, 0.0) << name << " never received gradient";
  });
}

// Whole-pipeline slope check: waveform in, cross entropy out, every
// parameter perturbed. Small hybrid stack, eight tokens, three classes.
TEST(Gradients, FullModelMatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 16;
  cfg.variant = Variant::helix;
  cfg.n_classes = 3;
  cfg.heads = 4;
  cfg.ssm.d_state = 8;
  Rng rng(47);
  auto m = build_model<double>(cfg, rng);

  Waveform wave;
  wave.samples.resize(8 * kRawHop);  // L = 8
  Rng wrng(53);
  for (auto& s : wave.samples) s = wrng.uniform(-0.8, 0.8);
  auto target = one_hot(3, 2);

  std::vector<Tensor<double>*> params;
  m.visit([&params](const std::string&, Tensor<double>& t) { params.push_back(&t); });
  auto forward = [&] { return cross_entropy(forward_wave(m, wave), target); };
  auto report = grad_check(params, forward, 1e-5, 1e-4);
  EXPECT_LT(report.max_rel_err, 1e-4) << report.worst;
  EXPECT_GT(report.elements_checked, 20000);
}

TEST(Determinism, SameSeedSameModel) {
  ModelConfig cfg = tiny_config(Variant::helix, 4);
  Rng r1(404), r2(404);
  auto a = build_model<double>(cfg, r1);
  auto b = build_model<double>(cfg, r2);

  std::map<std::string, const Tensor<double>*> pa;
  a.visit([&pa](const std::string& n, Tensor<double>& t) { pa[n] = &t; });
  b.visit([&pa](const std::string& n, Tensor<double>& t) {
    ASSERT_TRUE(pa.count(n)) << n;
    const auto x = pa[n]->data();
    const auto y = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], y[i]) << n;
  });

  auto tokens = random_tokens(10, 16, 3);
  auto la = model_forward(a, tokens);
  auto lb = model_forward(b, tokens);
  for (std::int64_t i = 0; i < la.size(); ++i) EXPECT_EQ(la.data()[i], lb.data()[i]);
}

TEST(Feasibility, AttentionLayerTripsTheBudgetMambaDoesNot) {
  auto tokens = random_tokens(1024, 16, 9);

  ModelConfig hcfg = tiny_config(Variant::helix);
  Rng r1(3);
  auto hybrid = build_model<double>(hcfg, r1);

  ModelConfig mcfg = tiny_config(Variant::pure_mamba);
  Rng r2(3);
  auto mamba_only = build_model<double>(mcfg, r2);

  BudgetGuard guard(8 << 20);
  try {
    model_forward(hybrid, tokens);
    FAIL() << "expected FeasibilityError";
  } catch (const FeasibilityError& e) {
    EXPECT_GT(e.required_bytes, e.budget_bytes);
  }
  auto out = model_forward(mamba_only, tokens);
  EXPECT_EQ(out.size(), 3);
}

}  // namespace
}  // namespace helix
