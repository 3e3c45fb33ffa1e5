#pragma once

// Optimization protocol: AdamW with decoupled decay, cosine annealing,
// global-norm clipping, audio augmentation, batch mixup, the epoch loop with
// line-delimited metrics, and cross-validation aggregation.

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/model.hpp"
#include "helix/rng.hpp"

namespace helix {

struct TrainConfig {
  double lr0 = 3e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  std::int64_t batch_size = 32;
  std::int64_t epochs = 100;
  double mixup_alpha = 0.3;
  double shift_max_s = 0.5;
  double amp_lo = 0.8, amp_hi = 1.2;
  double noise_sigma = 0.005;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr0 <= 0 || lr_min <= 0 || clip_norm <= 0 || batch_size < 1 || epochs < 1) {
      throw ConfigError("train config: lr0/lr_min/clip_norm/batch_size/epochs must be positive");
    }
    if (amp_lo > amp_hi) {
      throw ConfigError("train config: amp range [" + std::to_string(amp_lo) + ", " +
                        std::to_string(amp_hi) + "] is not ordered");
    }
    if (mixup_alpha < 0 || noise_sigma < 0 || shift_max_s < 0) {
      throw ConfigError("train config: mixup_alpha/noise_sigma/shift_max_s must be nonnegative");
    }
  }
};

// ---- optimizer ----

template <class T>
struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
NamedParams<T> named_params(Model<T>& model) {
  NamedParams<T> out;
  model.visit([&out](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
  return out;
}

// One AdamW step. Decay is applied as a single multiplicative factor so the
// zero-gradient case shrinks parameters by exactly (1 - lr*wd). The step
// aborts before touching any parameter if a gradient is non-finite.
template <class T>
void adamw_step(NamedParams<T>& params, OptimizerState<T>& state, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8, double wd = 0.05) {
  for (auto& [name, t] : params) {
    auto g = t->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) {
        throw NumericError("adamw: non-finite gradient in '" + name + "' at element " +
                           std::to_string(i));
      }
    }
  }

  state.step += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  const T decay = static_cast<T>(1.0 - lr * wd);

  for (auto& [name, t] : params) {
    const std::size_t n = static_cast<std::size_t>(t->size());
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(n, T(0));
    if (v.empty()) v.assign(n, T(0));
    if (m.size() != n || v.size() != n) {
      throw ShapeError("adamw: state for '" + name + "' holds " + std::to_string(m.size()) +
                       " elements, parameter has " + std::to_string(n));
    }
    auto g = t->grad();
    auto w = t->raw();
    for (std::size_t i = 0; i < n; ++i) {
      const T gi = g.empty() ? T(0) : g[i];
      m[i] = static_cast<T>(beta1) * m[i] + static_cast<T>(1.0 - beta1) * gi;
      v[i] = static_cast<T>(beta2) * v[i] + static_cast<T>(1.0 - beta2) * gi * gi;
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      w[i] = w[i] * decay - static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// ---- schedule and clipping ----

inline double cosine_lr(std::int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs) {
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(cfg.epochs) + "]");
  }
  const double phase =
      3.14159265358979323846 * static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(phase));
}

// Returns the pre-clip global L2 norm.
template <class T>
double clip_grad_norm(NamedParams<T>& params, double max_norm) {
  double sq = 0;
  for (auto& [name, t] : params) {
    for (T gi : t->grad()) sq += static_cast<double>(gi) * static_cast<double>(gi);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip: non-finite gradient norm");
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, t] : params) {
      if (!t->gs_ || !t->gs_->g) continue;
      for (auto& gi : t->gs_->g->v) gi *= s;
    }
  }
  return norm;
}

// ---- augmentation and mixup ----

// Circular shift, then gain, then additive noise.
inline AudioClip augment(const AudioClip& clip, const TrainConfig& cfg, Rng& rng) {
  AudioClip out = clip;
  auto& s = out.waveform.samples;
  const std::int64_t n = static_cast<std::int64_t>(s.size());
  if (n == 0) return out;

  const std::int64_t max_shift =
      static_cast<std::int64_t>(std::llround(cfg.shift_max_s * out.waveform.sample_rate));
  const std::int64_t shift = max_shift > 0 ? rng.uniform_int(-max_shift, max_shift) : 0;
  if (shift != 0) {
    std::vector<double> rolled(s.size());
    for (std::int64_t i = 0; i < n; ++i) {
      rolled[static_cast<std::size_t>(((i + shift) % n + n) % n)] = s[static_cast<std::size_t>(i)];
    }
    s = std::move(rolled);
  }

  const double gain = rng.uniform(cfg.amp_lo, cfg.amp_hi);
  if (gain != 1.0) {
    for (auto& x : s) x *= gain;
  }
  if (cfg.noise_sigma > 0) {
    for (auto& x : s) x += cfg.noise_sigma * rng.normal();
  }
  return out;
}

// One lambda and one pairing per batch.
struct MixupPlan {
  double lambda = 1.0;
  std::vector<std::int64_t> perm;
};

inline MixupPlan make_mixup_plan(std::int64_t batch, double alpha, Rng& rng) {
  if (batch < 2) throw ConfigError("mixup: batch of " + std::to_string(batch) + ", need >= 2");
  MixupPlan plan;
  plan.lambda = alpha > 0 ? rng.beta(alpha, alpha) : 1.0;
  plan.perm.resize(static_cast<std::size_t>(batch));
  std::iota(plan.perm.begin(), plan.perm.end(), 0);
  for (std::int64_t i = batch - 1; i > 0; --i) {
    std::swap(plan.perm[static_cast<std::size_t>(i)],
              plan.perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
  return plan;
}

// rows[i] <- lambda*rows[i] + (1-lambda)*rows[perm[i]], using pre-mix values
// of the partners.
inline void mix_in_place(std::vector<std::vector<double>>& rows, const MixupPlan& plan) {
  const std::vector<std::vector<double>> before = rows;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& partner = before[static_cast<std::size_t>(plan.perm[i])];
    if (partner.size() != rows[i].size()) {
      throw ShapeError("mixup: rows of " + std::to_string(rows[i].size()) + " and " +
                       std::to_string(partner.size()) + " elements cannot mix");
    }
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      rows[i][j] = plan.lambda * before[i][j] + (1.0 - plan.lambda) * partner[j];
    }
  }
}

// ---- metrics ----

struct MetricsRecord {
  std::int64_t epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
  double wall_seconds = 0;
  std::int64_t peak_activation_bytes = 0;
};

inline std::string metrics_json(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%" PRId64 ",\"split\":\"%s\",\"loss\":%.17g,\"accuracy\":%.17g,"
                "\"lr\":%.17g,\"wall_seconds\":%.6f,\"peak_activation_bytes\":%" PRId64 "}",
                r.epoch, r.split.c_str(), r.loss, r.accuracy, r.lr, r.wall_seconds,
                r.peak_activation_bytes);
  return buf;
}

// ---- training loop ----

// One example: either a waveform for the frontend or a pre-built token
// sequence fed straight to the trunk.
template <class T>
struct Example {
  Waveform wave;
  Tensor<T> tokens;  // zero-sized when the waveform is the input
  std::int64_t label = -1;

  bool has_tokens() const { return tokens.size() > 0; }
};

// Where mixup combines examples. by_frontend: waveforms on the raw path,
// log-mel images on the spectrogram path (the only parameter-free cut there,
// so frontend gradients survive). Token datasets always mix token rows.
enum class MixupDomain { by_frontend, waveform, representation };

template <class T>
struct TrainOptions {
  std::string out_dir;          // when set: metrics.jsonl, best.ckpt, last.ckpt
  std::string eval_split = "test";
  double stop_at_accuracy = -1;  // stop once eval accuracy reaches this
  double time_budget_s = 0;      // 0 = unlimited
  std::int64_t stop_after_epochs = 0;  // pause point; the schedule horizon stays cfg.epochs
  MixupDomain mixup_domain = MixupDomain::by_frontend;
  std::string resume_from;       // checkpoint written by a previous run
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  double best_accuracy = 0;
  std::int64_t best_epoch = -1;
  std::int64_t epochs_completed = 0;
  bool stopped_early = false;
  std::string best_checkpoint;
};

namespace traindet {

template <class T>
Tensor<T> tokens_of(Model<T>& m, const Example<T>& ex) {
  if (ex.has_tokens()) return ex.tokens;
  return embed(m, ex.wave);
}

template <class T>
std::int64_t argmax_row(const Tensor<T>& logits) {
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < logits.size(); ++i) {
    if (logits.data()[i] > logits.data()[best]) best = i;
  }
  return best;
}

template <class T>
void save_train_checkpoint(const std::string& path, Model<T>& m, OptimizerState<T>& state,
                           std::int64_t epochs_completed, double best_accuracy) {
  std::vector<SavedArray<T>> extra;
  for (auto& [name, vec] : state.m) {
    extra.push_back({"opt.m." + name, Shape{static_cast<std::int64_t>(vec.size())}, vec.data(),
                     static_cast<std::int64_t>(vec.size())});
  }
  for (auto& [name, vec] : state.v) {
    extra.push_back({"opt.v." + name, Shape{static_cast<std::int64_t>(vec.size())}, vec.data(),
                     static_cast<std::int64_t>(vec.size())});
  }
  save_model(path, m,
             {{"opt.step", std::to_string(state.step)},
              {"epochs_completed", std::to_string(epochs_completed)},
              {"best_accuracy", std::to_string(best_accuracy)}},
             extra);
}

template <class T>
std::int64_t load_train_checkpoint(const std::string& path, Model<T>& m,
                                   OptimizerState<T>& state) {
  CheckpointFile file = read_checkpoint(path);
  load_model_params(file, m);
  state.step = parse_int_kv(file.kv, "opt.step");
  for (const auto& e : file.entries) {
    const bool is_m = e.name.rfind("opt.m.", 0) == 0;
    const bool is_v = e.name.rfind("opt.v.", 0) == 0;
    if (!is_m && !is_v) continue;
    std::vector<T> vec(static_cast<std::size_t>(e.count));
    file.read_into(e, vec.data());
    (is_m ? state.m : state.v)[e.name.substr(6)] = std::move(vec);
  }
  return parse_int_kv(file.kv, "epochs_completed");
}

}  // namespace traindet

// Runs the epoch loop: shuffle, augment, mixup, batched forward/backward,
// clip, AdamW, then a full eval pass. Every random draw comes from a stream
// keyed by (seed, purpose, epoch, batch), so a resumed run replays the exact
// remainder of an uninterrupted one.
template <class T>
TrainResult train_run(Model<T>& m, const std::vector<Example<T>>& train_set,
                      const std::vector<Example<T>>& eval_set, const TrainConfig& tc,
                      const TrainOptions<T>& opt = {}) {
  tc.validate();
  if (train_set.empty() || eval_set.empty()) {
    throw ConfigError("train: empty " + std::string(train_set.empty() ? "train" : "eval") +
                      " set");
  }
  for (const auto& ex : train_set) {
    if (ex.label < 0 || ex.label >= m.cfg.n_classes) {
      throw ConfigError("train: label " + std::to_string(ex.label) + " outside " +
                        std::to_string(m.cfg.n_classes) + " classes");
    }
  }

  auto params = named_params(m);
  OptimizerState<T> state;
  std::int64_t start_epoch = 0;
  if (!opt.resume_from.empty()) {
    start_epoch = traindet::load_train_checkpoint(opt.resume_from, m, state);
  }
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    if (opt.resume_from.empty()) {
      // fresh run: clear any metrics left by a previous one
      std::ofstream(opt.out_dir + "/metrics.jsonl", std::ios::trunc);
    }
  }

  TrainResult result;
  const auto run_start = std::chrono::steady_clock::now();
  auto elapsed_s = [&run_start] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
  };

  auto eval_pass = [&](const std::vector<Example<T>>& set, double* loss_out, double* acc_out) {
    double loss_sum = 0;
    std::int64_t correct = 0;
    for (const auto& ex : set) {
      auto tokens = traindet::tokens_of(m, ex);
      auto logits = model_forward(m, tokens);
      Tensor<T> target(Shape{1, m.cfg.n_classes});
      target.raw()[ex.label] = T(1);
      loss_sum += static_cast<double>(cross_entropy(logits, target).data()[0]);
      if (traindet::argmax_row(logits) == ex.label) ++correct;
    }
    *loss_out = loss_sum / static_cast<double>(set.size());
    *acc_out = static_cast<double>(correct) / static_cast<double>(set.size());
  };

  std::int64_t global_step = 0;
  for (std::int64_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, tc);
    auto& meter = MemoryMeter::get();

    // train pass
    meter.reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::int64_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    {
      Rng shuffle_rng = substream(tc.seed, "shuffle", epoch);
      for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i) {
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
      }
    }

    double train_loss_sum = 0;
    std::int64_t train_correct = 0, train_seen = 0;
    for (std::size_t batch_start = 0, batch_idx = 0; batch_start < order.size();
         batch_start += static_cast<std::size_t>(tc.batch_size), ++batch_idx) {
      const std::size_t batch_end =
          std::min(order.size(), batch_start + static_cast<std::size_t>(tc.batch_size));
      const std::int64_t bsz = static_cast<std::int64_t>(batch_end - batch_start);

      Rng aug_rng = substream(tc.seed, "augment", epoch, static_cast<std::int64_t>(batch_idx));
      Rng mix_rng = substream(tc.seed, "mixup", epoch, static_cast<std::int64_t>(batch_idx));

      // per-example model input as a flat row plus its tensor shape
      enum class BatchMode { wave, mel, tokens };
      const bool wave_batch = !train_set[static_cast<std::size_t>(order[batch_start])].has_tokens();
      BatchMode mode = BatchMode::tokens;
      if (wave_batch) {
        const bool mel_mix = m.cfg.frontend == FrontendKind::spectrogram &&
                             opt.mixup_domain != MixupDomain::waveform;
        mode = mel_mix ? BatchMode::mel : BatchMode::wave;
        if (m.cfg.frontend == FrontendKind::raw &&
            opt.mixup_domain == MixupDomain::representation) {
          throw ConfigError(
              "mixup: the raw path has no parameter-free cut after the input; use waveform "
              "mixing");
        }
      }

      std::vector<std::vector<double>> rows(static_cast<std::size_t>(bsz));
      std::vector<Shape> shapes(static_cast<std::size_t>(bsz));
      std::vector<std::vector<double>> targets(static_cast<std::size_t>(bsz));
      std::vector<std::int64_t> labels(static_cast<std::size_t>(bsz));
      for (std::int64_t i = 0; i < bsz; ++i) {
        const std::size_t si = static_cast<std::size_t>(i);
        const auto& ex =
            train_set[static_cast<std::size_t>(order[batch_start + si])];
        labels[si] = ex.label;
        targets[si].assign(static_cast<std::size_t>(m.cfg.n_classes), 0.0);
        targets[si][static_cast<std::size_t>(ex.label)] = 1.0;
        if (!wave_batch) {
          rows[si].assign(ex.tokens.data().begin(), ex.tokens.data().end());
          shapes[si] = ex.tokens.shape();
        } else {
          AudioClip clip;
          clip.waveform = ex.wave;
          clip.label = ex.label;
          AudioClip aug = augment(clip, tc, aug_rng);
          if (mode == BatchMode::wave) {
            rows[si] = std::move(aug.waveform.samples);
          } else {
            Tensor<T> img = mel_image<T>(aug.waveform);
            rows[si].assign(img.data().begin(), img.data().end());
            shapes[si] = img.shape();
          }
        }
      }

      if (tc.mixup_alpha > 0 && bsz >= 2) {
        MixupPlan plan = make_mixup_plan(bsz, tc.mixup_alpha, mix_rng);
        mix_in_place(rows, plan);
        mix_in_place(targets, plan);
      }

      // forward/backward per example; gradients accumulate at 1/batch weight
      const T inv_b = T(1) / static_cast<T>(bsz);
      for (std::int64_t i = 0; i < bsz; ++i) {
        const std::size_t si = static_cast<std::size_t>(i);
        Tensor<T> target(Shape{1, m.cfg.n_classes});
        for (std::int64_t c = 0; c < m.cfg.n_classes; ++c) {
          target.raw()[c] = static_cast<T>(targets[si][static_cast<std::size_t>(c)]);
        }
        try {
          Tape<T> tape;
          Tensor<T> logits;
          if (mode == BatchMode::wave) {
            Waveform wf;
            wf.samples = rows[si];
            logits = forward_wave(m, wf);
          } else {
            Tensor<T> input(shapes[si]);
            for (std::int64_t j = 0; j < input.size(); ++j) {
              input.raw()[j] = static_cast<T>(rows[si][static_cast<std::size_t>(j)]);
            }
            logits = mode == BatchMode::mel
                         ? model_forward(m, embed_mel_image(*m.spec_fe, input))
                         : model_forward(m, input);
          }
          auto loss = cross_entropy(logits, target);
          const double lval = static_cast<double>(loss.data()[0]);
          if (!std::isfinite(lval)) throw NumericError("loss is not finite");
          train_loss_sum += lval;
          if (traindet::argmax_row(logits) == labels[si]) ++train_correct;
          ++train_seen;
          tape.backward(scale(loss, inv_b));
        } catch (const NumericError& e) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(global_step) + ": " + e.what());
        }
      }

      clip_grad_norm(params, tc.clip_norm);
      adamw_step(params, state, lr, 0.9, 0.999, 1e-8, tc.weight_decay);
      for (auto& [name, t] : params) t->zero_grad();
      ++global_step;
    }

    MetricsRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    train_rec.loss = train_loss_sum / static_cast<double>(train_seen);
    train_rec.accuracy = static_cast<double>(train_correct) / static_cast<double>(train_seen);
    train_rec.lr = lr;
    train_rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    train_rec.peak_activation_bytes = meter.peak_bytes();
    result.metrics.push_back(train_rec);

    // eval pass
    meter.reset_peak();
    const auto t1 = std::chrono::steady_clock::now();
    MetricsRecord eval_rec;
    eval_rec.epoch = epoch;
    eval_rec.split = opt.eval_split;
    eval_pass(eval_set, &eval_rec.loss, &eval_rec.accuracy);
    eval_rec.lr = lr;
    eval_rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
    eval_rec.peak_activation_bytes = meter.peak_bytes();
    result.metrics.push_back(eval_rec);

    result.epochs_completed = epoch + 1;
    if (!opt.out_dir.empty()) {
      std::ofstream mf(opt.out_dir + "/metrics.jsonl", std::ios::app);
      mf << metrics_json(train_rec) << "\n" << metrics_json(eval_rec) << "\n";
    }
    if (eval_rec.accuracy > result.best_accuracy || result.best_epoch < 0) {
      result.best_accuracy = eval_rec.accuracy;
      result.best_epoch = epoch;
      if (!opt.out_dir.empty()) {
        result.best_checkpoint = opt.out_dir + "/best.ckpt";
        traindet::save_train_checkpoint(result.best_checkpoint, m, state, epoch + 1,
                                        result.best_accuracy);
      }
    }
    if (!opt.out_dir.empty()) {
      traindet::save_train_checkpoint(opt.out_dir + "/last.ckpt", m, state, epoch + 1,
                                      result.best_accuracy);
    }

    if (opt.stop_at_accuracy >= 0 && eval_rec.accuracy >= opt.stop_at_accuracy) {
      result.stopped_early = true;
      break;
    }
    if (opt.stop_after_epochs > 0 && result.epochs_completed >= opt.stop_after_epochs) {
      result.stopped_early = true;
      break;
    }
    if (opt.time_budget_s > 0 && elapsed_s() > opt.time_budget_s) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

// ---- cross-validation ----

struct CvSummary {
  std::vector<double> per_fold;
  double mean = 0;
  double stddev = 0;  // population
};

inline CvSummary summarize_cv(const std::vector<double>& per_fold) {
  if (per_fold.empty()) throw ConfigError("cv: no folds");
  CvSummary s;
  s.per_fold = per_fold;
  for (double a : per_fold) s.mean += a;
  s.mean /= static_cast<double>(per_fold.size());
  for (double a : per_fold) s.stddev += (a - s.mean) * (a - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(per_fold.size()));
  return s;
}

// trainer(fold) returns that fold's best test accuracy.
template <class Trainer>
CvSummary cross_validate(std::int64_t n_folds, Trainer&& trainer) {
  if (n_folds < 2) throw ConfigError("cv: need at least 2 folds, got " + std::to_string(n_folds));
  std::vector<double> per_fold;
  for (std::int64_t k = 0; k < n_folds; ++k) {
    per_fold.push_back(trainer(k));
  }
  return summarize_cv(per_fold);
}

}  // namespace helix
