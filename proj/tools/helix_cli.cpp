// Command-line driver: train/eval runs, parameter accounting, scaling
// measurement, gradient verification, and synthetic data generation.

#include <algorithm>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "helix/bench.hpp"
#include "helix/config.hpp"
#include "helix/gradcheck.hpp"

namespace helix {
namespace {

struct Global {
  std::string config_path;
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string precision = "f32";
};

// ---- data loading shared by train and eval ----

template <class T>
struct LoadedData {
  std::vector<Example<T>> train, eval;
};

template <class T>
std::vector<Example<T>> clips_to_examples(const std::vector<AudioClip>& clips) {
  std::vector<Example<T>> out;
  out.reserve(clips.size());
  for (const auto& c : clips) {
    Example<T> ex;
    ex.wave = c.waveform;
    ex.label = c.label;
    out.push_back(std::move(ex));
  }
  return out;
}

// Synthetic source: generate then shuffle-split. Manifest source: fold 0 is
// the eval split when folds are present, otherwise shuffle-split. Both paths
// draw only from the "data" substream, so a seed pins the split.
template <class T>
LoadedData<T> load_data(RunConfig& rc, std::uint64_t seed) {
  LoadedData<T> data;
  Rng rng = substream(seed, "data");

  std::vector<Example<T>> all;
  std::vector<std::int64_t> folds;
  if (rc.synth_n > 0) {
    rc.synth.validate();
    rc.model.n_classes = rc.synth.n_classes;  // labels define the head size
    auto clips = generate_synthetic(rc.synth, rc.synth_n, rng);
    all = clips_to_examples<T>(clips);
  } else if (!rc.manifest.empty()) {
    const auto rows = load_manifest(rc.manifest);
    const std::string dir = manifest_dir(rc.manifest) + "/";
    for (const auto& row : rows) {
      Example<T> ex;
      ex.wave = load_wav(dir + row.path).waveform;
      ex.label = row.label;
      if (ex.label < 0 || ex.label >= rc.model.n_classes) {
        throw ConfigError("manifest label " + std::to_string(ex.label) + " outside [0, " +
                          std::to_string(rc.model.n_classes) + ") for '" + row.path + "'");
      }
      all.push_back(std::move(ex));
      folds.push_back(row.fold);
    }
  } else {
    throw ConfigError("no data source: set manifest or synth_n in the config");
  }

  const bool has_folds = !folds.empty() &&
                         std::count(folds.begin(), folds.end(), 0) > 0 &&
                         std::count(folds.begin(), folds.end(), 0) <
                             static_cast<std::int64_t>(folds.size());
  if (has_folds) {
    for (std::size_t i = 0; i < all.size(); ++i) {
      (folds[i] == 0 ? data.eval : data.train).push_back(std::move(all[i]));
    }
    return data;
  }

  if (rc.train_frac <= 0 || rc.train_frac >= 1) {
    throw ConfigError("train_frac " + std::to_string(rc.train_frac) + " outside (0, 1)");
  }
  std::vector<std::int64_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(
                  0, static_cast<std::int64_t>(i) - 1))]);
  }
  const std::int64_t n_train = std::clamp<std::int64_t>(
      static_cast<std::int64_t>(rc.train_frac * static_cast<double>(all.size())), 1,
      static_cast<std::int64_t>(all.size()) - 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto& dst = static_cast<std::int64_t>(i) < n_train ? data.train : data.eval;
    dst.push_back(std::move(all[static_cast<std::size_t>(idx[i])]));
  }
  return data;
}

// ---- train ----

template <class T>
int run_train(const Global& g, RunConfig rc) {
  auto data = load_data<T>(rc, g.seed);
  std::printf("train: %zu train / %zu eval examples, variant %s, frontend %s\n",
              data.train.size(), data.eval.size(), variant_name(rc.model.variant),
              frontend_name(rc.model.frontend));

  rc.train.seed = g.seed;
  Rng init_rng = substream(g.seed, "init");
  auto model = build_model<T>(rc.model, init_rng);

  TrainOptions<T> opt;
  opt.out_dir = g.out;
  auto result = train_run(model, data.train, data.eval, rc.train, opt);

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "best_accuracy = %.6f\nbest_epoch = %" PRId64 "\nepochs_completed = %" PRId64 "\n",
                result.best_accuracy, result.best_epoch, result.epochs_completed);
  std::ofstream summary(g.out + "/summary.txt", std::ios::trunc);
  if (!summary) throw IoError("cannot write summary '" + g.out + "/summary.txt'");
  summary << buf;
  std::fputs(buf, stdout);
  return 0;
}

// ---- eval ----

template <class T>
int run_eval(const Global& g, RunConfig rc, const std::string& ckpt) {
  auto model = load_model<T>(ckpt);
  rc.model = model.cfg;  // the checkpoint's architecture wins
  auto data = load_data<T>(rc, g.seed);
  if (data.eval.empty()) throw ConfigError("eval split is empty");

  std::int64_t correct = 0;
  for (auto& ex : data.eval) {
    Tensor<T> logits = ex.has_tokens() ? model_forward(model, ex.tokens)
                                       : forward_wave(model, ex.wave);
    if (traindet::argmax_row(logits) == ex.label) ++correct;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(data.eval.size());

  char buf[96];
  std::snprintf(buf, sizeof(buf), "accuracy = %.6f\nexamples = %zu\n", acc, data.eval.size());
  std::filesystem::create_directories(g.out);
  std::ofstream outf(g.out + "/eval.txt", std::ios::trunc);
  if (!outf) throw IoError("cannot write eval summary '" + g.out + "/eval.txt'");
  outf << buf;
  std::fputs(buf, stdout);
  return 0;
}

// ---- param-report ----

int run_param_report(std::int64_t d, std::int64_t n_layers, bool csv) {
  SSMConfig ssm;
  ssm.d_model = d;
  const std::int64_t p_bimamba = bimamba_param_count(ssm);
  const ParamBudget budget = solve_ffn_width(p_bimamba, d);
  const std::int64_t p_attention = budget.p_mha + budget.p_norms +
                                   2 * d * budget.d_ffn + budget.d_ffn + d;
  const std::int64_t deficit = p_bimamba - p_attention;

  struct Row {
    Variant variant;
    FrontendKind frontend;
    std::int64_t total;
  };
  std::vector<Row> rows;
  for (FrontendKind fe : {FrontendKind::raw, FrontendKind::spectrogram}) {
    for (Variant v : {Variant::pure_mamba, Variant::helix, Variant::pure_attention}) {
      ModelConfig cfg;
      cfg.n_layers = n_layers;
      cfg.d_model = d;
      cfg.variant = v;
      cfg.frontend = fe;
      cfg.n_classes = 50;
      cfg.ssm = ssm;
      Rng rng(0);
      auto model = build_model<float>(cfg, rng);
      rows.push_back({v, fe, model_param_count(model)});
    }
  }
  std::int64_t lo = rows[0].total, hi = rows[0].total;
  for (const auto& r : rows) {
    lo = std::min(lo, r.total);
    hi = std::max(hi, r.total);
  }
  const double spread = 100.0 * static_cast<double>(hi - lo) / static_cast<double>(lo);

  if (csv) {
    std::printf("variant,frontend,n_layers,d_model,d_ffn,per_layer_bimamba,per_layer_attention,"
                "deficit,total\n");
    for (const auto& r : rows) {
      std::printf("%s,%s,%" PRId64 ",%" PRId64 ",%" PRId64 ",%" PRId64 ",%" PRId64 ",%" PRId64
                  ",%" PRId64 "\n",
                  variant_name(r.variant), frontend_name(r.frontend), n_layers, d, budget.d_ffn,
                  p_bimamba, p_attention, deficit, r.total);
    }
    return 0;
  }

  std::printf("layer budget at d_model %" PRId64 " (d_state %" PRId64 ", conv %" PRId64
              ", expand %" PRId64 "):\n",
              d, ssm.d_state, ssm.d_conv, ssm.expand);
  std::printf("  bimamba per layer:   %" PRId64 "\n", p_bimamba);
  std::printf("  P_MHA %" PRId64 ", P_norms %" PRId64 ", solved d_ffn %" PRId64 "\n",
              budget.p_mha, budget.p_norms, budget.d_ffn);
  std::printf("  attention per layer: %" PRId64 " (deficit %" PRId64 ")\n\n", p_attention,
              deficit);
  std::printf("%-16s %-12s %12s\n", "variant", "frontend", "total");
  for (const auto& r : rows) {
    std::printf("%-16s %-12s %12" PRId64 "\n", variant_name(r.variant),
                frontend_name(r.frontend), r.total);
  }
  std::printf("\nspread across variants: %.3f%%\n", spread);
  return 0;
}

// ---- grad-check ----

struct BlockReport {
  std::string block;
  GradCheckReport report;
};

template <class Block>
std::vector<Tensor<double>*> block_params(Block& b) {
  std::vector<Tensor<double>*> out;
  b.visit("p", [&out](const std::string&, Tensor<double>& t) { out.push_back(&t); });
  return out;
}

BlockReport check_block(const std::string& block, std::int64_t L, std::int64_t d) {
  Rng rng(11);
  if (block == "raw_frontend") {
    RawFrontend<double> fe;
    fe.init(d, rng);
    Waveform wave;
    wave.samples.resize(static_cast<std::size_t>(L) * kRawHop);
    for (auto& s : wave.samples) s = 0.5 * rng.uniform(-1.0, 1.0);
    auto params = block_params(fe);
    auto rep = grad_check(
        params, [&] { return sum_all(mul(embed_raw(fe, wave), embed_raw(fe, wave))); }, 1e-5,
        1e-4);
    return {block, rep};
  }
  if (block == "spec_frontend") {
    SpecFrontend<double> fe;
    fe.init(d, rng);
    Waveform wave;
    wave.samples.resize(16000);
    for (auto& s : wave.samples) s = 0.5 * rng.uniform(-1.0, 1.0);
    auto params = block_params(fe);
    // Patch-conv gradients here sit near 1e-5 while the loss is O(100), so a
    // 1e-5 step is roundoff-dominated. 1e-4 balances the two error sources.
    auto rep = grad_check(
        params,
        [&] {
          auto y = embed_spectrogram(fe, wave);
          return sum_all(mul(y, y));
        },
        1e-4, 1e-4);
    return {block, rep};
  }
  if (block == "bimamba") {
    SSMConfig cfg;
    cfg.d_model = d;
    cfg.d_state = 8;
    BiMambaBlock<double> blk;
    blk.init(cfg, rng);
    Tensor<double> x(Shape{L, d});
    for (auto& v : x.raw()) v = rng.uniform(-1.0, 1.0);
    x.set_requires_grad(true);
    auto params = block_params(blk);
    params.push_back(&x);
    auto rep = grad_check(
        params,
        [&] {
          auto y = bimamba_block(x, blk, cfg);
          return sum_all(mul(y, y));
        },
        1e-5, 1e-4);
    return {block, rep};
  }
  if (block == "attention") {
    AttentionBlock<double> blk;
    blk.init(d, 2 * d, 4, rng);
    Tensor<double> x(Shape{L, d});
    for (auto& v : x.raw()) v = rng.uniform(-1.0, 1.0);
    x.set_requires_grad(true);
    auto params = block_params(blk);
    params.push_back(&x);
    auto rep = grad_check(
        params,
        [&] {
          auto y = attention_block(x, blk);
          return sum_all(mul(y, y));
        },
        1e-5, 1e-4);
    return {block, rep};
  }
  if (block == "model") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = d;
    cfg.variant = Variant::helix;
    cfg.n_classes = 3;
    cfg.ssm.d_state = 8;
    auto model = build_model<double>(cfg, rng);
    Waveform wave;
    wave.samples.resize(static_cast<std::size_t>(L) * kRawHop);
    for (auto& s : wave.samples) s = 0.5 * rng.uniform(-1.0, 1.0);
    Tensor<double> target(Shape{1, 3});
    target.raw()[1] = 1.0;
    std::vector<Tensor<double>*> params;
    model.visit([&params](const std::string&, Tensor<double>& t) { params.push_back(&t); });
    auto rep = grad_check(
        params, [&] { return cross_entropy(forward_wave(model, wave), target); }, 1e-5, 1e-4);
    return {block, rep};
  }
  throw ConfigError("grad-check: unknown block '" + block +
                    "' (raw_frontend, spec_frontend, bimamba, attention, model, all)");
}

int run_grad_check(const std::string& block, std::int64_t L, std::int64_t d) {
  std::vector<std::string> blocks;
  if (block == "all") {
    blocks = {"raw_frontend", "spec_frontend", "bimamba", "attention", "model"};
  } else {
    blocks = {block};
  }
  bool ok = true;
  for (const auto& b : blocks) {
    auto r = check_block(b, L, d);
    const bool pass = r.report.max_rel_err < 1e-4;
    ok = ok && pass;
    std::printf("%-14s max_rel_err %.3e over %" PRId64 " elements  [%s]\n", r.block.c_str(),
                r.report.max_rel_err, r.report.elements_checked, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 1;
}

// ---- bench-scaling ----

template <class T>
int run_bench(const Global& g, const std::string& lengths_csv, std::int64_t repeats,
              double budget_gb) {
  std::vector<std::int64_t> lengths;
  std::stringstream ss(lengths_csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    lengths.push_back(confdet::to_int("lengths", item));
  }
  if (lengths.empty()) throw ConfigError("bench-scaling: no lengths given");
  const std::size_t budget = static_cast<std::size_t>(budget_gb * 1073741824.0);

  std::vector<ScalingRecord> records;
  for (Variant v : {Variant::pure_mamba, Variant::helix, Variant::pure_attention}) {
    auto part = measure_scaling<T>(v, lengths, budget, repeats, g.seed);
    records.insert(records.end(), part.begin(), part.end());
  }
  std::filesystem::create_directories(g.out);
  const std::string csv_path = g.out + "/scaling.csv";
  const std::string table = emit_scaling_report(records, csv_path);
  std::fputs(table.c_str(), stdout);

  try {
    auto fits = fit_scaling_exponent(records);
    for (const auto& [v, fit] : fits) {
      std::printf("%s memory exponent: %.3f\n", variant_name(v), fit.exponent);
    }
  } catch (const ConfigError& e) {
    // too few usable points for a fit; the measurements themselves still stand
    std::printf("(no exponent fit: %s)\n", e.what());
  }
  std::printf("wrote %s\n", csv_path.c_str());
  return 0;
}

// ---- synth-data ----

int run_synth_data(const Global& g, std::int64_t classes, double seconds, std::int64_t n,
                   double snr_db, double base_hz) {
  SyntheticSpec spec;
  spec.n_classes = classes;
  spec.clip_seconds = seconds;
  spec.snr_db = snr_db;
  spec.base_hz = base_hz;
  spec.validate();

  Rng rng = substream(g.seed, "data");
  auto clips = generate_synthetic(spec, n, rng);

  std::filesystem::create_directories(g.out + "/clips");
  std::vector<ManifestRow> rows;
  char name[64];
  for (std::size_t i = 0; i < clips.size(); ++i) {
    std::snprintf(name, sizeof(name), "clips/clip_%05zu.wav", i);
    save_wav(g.out + "/" + name, clips[i].waveform);
    ManifestRow row;
    row.path = name;
    row.label = clips[i].label;
    row.fold = static_cast<std::int64_t>(i) % 5;
    row.speaker = "synth";
    rows.push_back(std::move(row));
  }
  save_manifest(g.out + "/manifest.csv", rows);
  std::printf("wrote %zu clips and %s/manifest.csv\n", clips.size(), g.out.c_str());
  return 0;
}

}  // namespace
}  // namespace helix

int main(int argc, char** argv) {
  using namespace helix;

  CLI::App app{"hybrid mamba-attention audio classifier"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand: `helix train --config run.cfg`

  Global g;
  app.add_option("--config", g.config_path, "flat key = value run configuration");
  auto* seed_opt = app.add_option("--seed", g.seed, "master seed for all named substreams");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--precision", g.precision, "numeric precision")
      ->check(CLI::IsMember({"f32", "f64"}));

  auto* cmd_train = app.add_subcommand("train", "train a model and write checkpoints");
  std::string flag_variant, flag_frontend;
  std::int64_t flag_epochs = -1, flag_batch = -1;
  cmd_train->add_option("--variant", flag_variant, "pure_mamba | helix | pure_attention");
  cmd_train->add_option("--frontend", flag_frontend, "raw | spectrogram");
  cmd_train->add_option("--epochs", flag_epochs, "override epochs");
  cmd_train->add_option("--batch-size", flag_batch, "override batch size");

  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string flag_ckpt;
  cmd_eval->add_option("--ckpt", flag_ckpt, "checkpoint path")->required();

  auto* cmd_report = app.add_subcommand("param-report", "per-layer and total parameter counts");
  std::int64_t report_d = 256, report_layers = 6;
  bool report_csv = false;
  auto* report_d_opt = cmd_report->add_option("--d", report_d, "model width");
  auto* report_layers_opt = cmd_report->add_option("--n-layers", report_layers, "stack depth");
  cmd_report->add_flag("--csv", report_csv, "machine-readable output");

  auto* cmd_bench = app.add_subcommand("bench-scaling", "time/memory scaling across lengths");
  std::string bench_lengths = "256,512,1024,2048";
  std::int64_t bench_repeats = 5;
  double bench_budget_gb = 4.0;
  cmd_bench->add_option("--lengths", bench_lengths, "comma-separated token counts");
  cmd_bench->add_option("--repeats", bench_repeats, "timed repeats after one warmup");
  cmd_bench->add_option("--budget-gb", bench_budget_gb, "logical activation budget");

  auto* cmd_grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
  std::string grad_block = "all";
  std::int64_t grad_L = 8, grad_d = 16;
  cmd_grad->add_option("--block", grad_block,
                       "raw_frontend | spec_frontend | bimamba | attention | model | all");
  cmd_grad->add_option("--L", grad_L, "sequence length in tokens");
  cmd_grad->add_option("--d", grad_d, "model width");

  auto* cmd_synth = app.add_subcommand("synth-data", "generate the tone dataset as WAV files");
  std::int64_t synth_classes = 4, synth_n = 200;
  double synth_seconds = 1.0, synth_snr = 20.0, synth_base = 200.0;
  auto* synth_classes_opt = cmd_synth->add_option("--classes", synth_classes, "number of tone classes");
  auto* synth_seconds_opt = cmd_synth->add_option("--seconds", synth_seconds, "clip length");
  auto* synth_n_opt = cmd_synth->add_option("--n", synth_n, "number of clips");
  auto* synth_snr_opt = cmd_synth->add_option("--snr-db", synth_snr, "signal-to-noise ratio");
  auto* synth_base_opt = cmd_synth->add_option("--base-hz", synth_base, "base frequency of class 0");

  CLI11_PARSE(app, argc, argv);
  g.seed_given = seed_opt->count() > 0;

  try {
    if (!g.config_path.empty() && !std::filesystem::exists(g.config_path)) {
      std::fprintf(stderr, "error: config file '%s' not found\n", g.config_path.c_str());
      return 2;
    }

    KvMap kv;
    if (!g.config_path.empty()) kv = load_kv_file(g.config_path);
    RunConfig rc = run_config_from_kv(kv);
    if (!g.seed_given && rc.train.seed != 0) g.seed = rc.train.seed;

    // flag > file > default: a file key fills any knob whose flag was not given
    auto file_fills = [&](const CLI::Option* o, const char* key) {
      return o->count() == 0 && kv.count(key) > 0;
    };

    if (cmd_report->parsed()) {
      if (file_fills(report_d_opt, "d_model")) report_d = rc.model.d_model;
      if (file_fills(report_layers_opt, "n_layers")) report_layers = rc.model.n_layers;
      return run_param_report(report_d, report_layers, report_csv);
    }
    if (cmd_grad->parsed()) return run_grad_check(grad_block, grad_L, grad_d);
    if (cmd_synth->parsed()) {
      if (file_fills(synth_classes_opt, "synth_classes")) synth_classes = rc.synth.n_classes;
      if (file_fills(synth_seconds_opt, "synth_seconds")) synth_seconds = rc.synth.clip_seconds;
      if (file_fills(synth_n_opt, "synth_n")) synth_n = rc.synth_n;
      if (file_fills(synth_snr_opt, "synth_snr_db")) synth_snr = rc.synth.snr_db;
      if (file_fills(synth_base_opt, "synth_base_hz")) synth_base = rc.synth.base_hz;
      return run_synth_data(g, synth_classes, synth_seconds, synth_n, synth_snr, synth_base);
    }
    if (cmd_bench->parsed()) {
      return g.precision == "f64"
                 ? run_bench<double>(g, bench_lengths, bench_repeats, bench_budget_gb)
                 : run_bench<float>(g, bench_lengths, bench_repeats, bench_budget_gb);
    }
    if (cmd_train->parsed()) {
      if (!flag_variant.empty()) rc.model.variant = parse_variant(flag_variant);
      if (!flag_frontend.empty()) rc.model.frontend = parse_frontend(flag_frontend);
      if (flag_epochs >= 0) rc.train.epochs = flag_epochs;
      if (flag_batch >= 0) rc.train.batch_size = flag_batch;
      return g.precision == "f64" ? run_train<double>(g, std::move(rc))
                                  : run_train<float>(g, std::move(rc));
    }
    if (cmd_eval->parsed()) {
      return g.precision == "f64" ? run_eval<double>(g, std::move(rc), flag_ckpt)
                                  : run_eval<float>(g, std::move(rc), flag_ckpt);
    }
    std::fprintf(stderr, "error: no command\n");
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
