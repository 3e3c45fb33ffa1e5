#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "helix/ops.hpp"
#include "helix/tensor.hpp"

namespace helix {

// Mono audio, [-1, 1] nominal range. Everything downstream assumes 16 kHz;
// resampling happens at load time, not here.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
};

inline constexpr int kSampleRate = 16000;
inline constexpr std::int64_t kRawHop = 160;       // 10 ms at 16 kHz
inline constexpr std::int64_t kNFft = 1024;
inline constexpr std::int64_t kStftHop = 512;
inline constexpr std::int64_t kNMels = 128;
inline constexpr std::int64_t kPatch = 16;
inline constexpr double kLogFloor = 1e-10;

inline std::int64_t raw_token_count(std::int64_t n_samples) { return n_samples / kRawHop; }

inline std::int64_t stft_frame_count(std::int64_t n_samples) {
  return n_samples / kStftHop + 1;
}

inline std::int64_t spec_token_count(std::int64_t n_samples) {
  const std::int64_t frames = stft_frame_count(n_samples);
  const std::int64_t padded = (frames + kPatch - 1) / kPatch * kPatch;
  return (kNMels / kPatch) * (padded / kPatch);
}

// ---- STFT ----

namespace detail {

// in-place iterative radix-2; n must be a power of two
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// reflectedge-free index into [0, n)
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return i;
}

}  // namespace detail

// Power spectrogram, frames x (n_fft/2 + 1). Centered: the signal is
// reflect-padded by n_fft/2 on both sides so frame i is the window around
// sample i*hop, giving floor(T/hop) + 1 frames.
inline std::vector<std::vector<double>> stft_power(const std::vector<double>& samples,
                                                   std::int64_t n_fft = kNFft,
                                                   std::int64_t hop = kStftHop) {
  if ((n_fft & (n_fft - 1)) != 0 || n_fft < 2) {
    throw ConfigError("stft: n_fft " + std::to_string(n_fft) + " is not a power of two");
  }
  const std::int64_t t = static_cast<std::int64_t>(samples.size());
  if (t <= n_fft / 2) {
    throw ShapeError("stft: " + std::to_string(t) + " samples is too short for centered " +
                     std::to_string(n_fft) + "-point frames");
  }
  std::vector<double> window(static_cast<std::size_t>(n_fft));
  for (std::int64_t i = 0; i < n_fft; ++i) {
    window[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(i) /
                                      static_cast<double>(n_fft)));
  }
  const std::int64_t n_frames = t / hop + 1;
  const std::int64_t n_bins = n_fft / 2 + 1;
  std::vector<std::vector<double>> power(static_cast<std::size_t>(n_frames));
  std::vector<std::complex<double>> frame(static_cast<std::size_t>(n_fft));
  for (std::int64_t f = 0; f < n_frames; ++f) {
    const std::int64_t start = f * hop - n_fft / 2;
    for (std::int64_t i = 0; i < n_fft; ++i) {
      const double s = samples[static_cast<std::size_t>(detail::reflect_index(start + i, t))];
      frame[static_cast<std::size_t>(i)] = {s * window[static_cast<std::size_t>(i)], 0.0};
    }
    detail::fft(frame);
    auto& row = power[static_cast<std::size_t>(f)];
    row.resize(static_cast<std::size_t>(n_bins));
    for (std::int64_t b = 0; b < n_bins; ++b) row[b] = std::norm(frame[static_cast<std::size_t>(b)]);
  }
  return power;
}

// ---- mel filterbank ----

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelBank {
  std::int64_t n_mels;
  std::int64_t n_bins;
  std::vector<double> weights;    // n_mels x n_bins, triangle peaks are 1
  std::vector<double> center_hz;  // strictly increasing
};

inline MelBank make_mel_bank(std::int64_t n_mels = kNMels, std::int64_t n_fft = kNFft,
                             double sample_rate = kSampleRate, double f_min = 0.0,
                             double f_max = 8000.0) {
  if (f_max <= f_min || f_max > sample_rate / 2.0) {
    throw ConfigError("mel bank: bad band [" + std::to_string(f_min) + ", " +
                      std::to_string(f_max) + "] at sample rate " + std::to_string(sample_rate));
  }
  MelBank bank;
  bank.n_mels = n_mels;
  bank.n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
  for (std::int64_t m = 0; m < n_mels + 2; ++m) {
    edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) /
                         static_cast<double>(n_mels + 1));
  }
  bank.weights.assign(static_cast<std::size_t>(n_mels * bank.n_bins), 0.0);
  bank.center_hz.resize(static_cast<std::size_t>(n_mels));
  const double bin_hz = sample_rate / static_cast<double>(n_fft);
  for (std::int64_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    bank.center_hz[m] = mid;
    bool nonempty = false;
    for (std::int64_t b = 0; b < bank.n_bins; ++b) {
      const double f = b * bin_hz;
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      const double wgt = std::max(0.0, std::min(rise, fall));
      bank.weights[m * bank.n_bins + b] = wgt;
      if (wgt > 0.0) nonempty = true;
    }
    if (!nonempty) {
      throw ConfigError("mel bank: filter " + std::to_string(m) + " (center " +
                        std::to_string(mid) + " Hz) covers no FFT bin; " +
                        std::to_string(n_mels) + " mels is too many for n_fft " +
                        std::to_string(n_fft));
    }
  }
  return bank;
}

// log mel power image, n_mels x frames, natural log with a fixed floor so
// silence stays finite
inline std::vector<double> log_mel(const std::vector<double>& samples, const MelBank& bank,
                                   std::int64_t* out_frames) {
  const auto power = stft_power(samples);
  const std::int64_t n_frames = static_cast<std::int64_t>(power.size());
  std::vector<double> image(static_cast<std::size_t>(bank.n_mels * n_frames));
  for (std::int64_t m = 0; m < bank.n_mels; ++m) {
    const double* wrow = bank.weights.data() + m * bank.n_bins;
    for (std::int64_t f = 0; f < n_frames; ++f) {
      double acc = 0.0;
      const auto& prow = power[static_cast<std::size_t>(f)];
      for (std::int64_t b = 0; b < bank.n_bins; ++b) acc += wrow[b] * prow[static_cast<std::size_t>(b)];
      image[m * n_frames + f] = std::log(std::max(acc, kLogFloor));
    }
  }
  *out_frames = n_frames;
  return image;
}

// ---- learned embeddings ----

template <class T>
struct RawFrontend {
  std::int64_t d = 0;
  Tensor<T> conv_w;  // [d x 1 x 160]
  Tensor<T> conv_b;  // [d]
  Tensor<T> ln_g, ln_b;

  void init(std::int64_t width, Rng& rng) {
    d = width;
    conv_w = Tensor<T>(Shape{d, 1, kRawHop}, true);
    conv_b = Tensor<T>(Shape{d}, true);
    ln_g = Tensor<T>::full(Shape{d}, T(1));
    ln_b = Tensor<T>(Shape{d});
    ln_g.set_requires_grad(true);
    ln_b.set_requires_grad(true);
    fill_fan_in(conv_w, rng, kRawHop);
    fill_fan_in(conv_b, rng, kRawHop);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    fn(prefix + ".ln_g", ln_g);
    fn(prefix + ".ln_b", ln_b);
  }
};

// waveform -> [floor(T/160) x d] tokens: non-overlapping strided conv, then
// per-token layer norm
template <class T>
Tensor<T> embed_raw(const RawFrontend<T>& fe, const Waveform& wave) {
  if (wave.sample_rate != kSampleRate) {
    throw ConfigError("embed_raw: expected " + std::to_string(kSampleRate) + " Hz input, got " +
                      std::to_string(wave.sample_rate));
  }
  const std::int64_t t = static_cast<std::int64_t>(wave.samples.size());
  if (t < kRawHop) {
    throw ShapeError("embed_raw: " + std::to_string(t) + " samples is shorter than one " +
                     std::to_string(kRawHop) + "-sample hop");
  }
  Tensor<T> x(Shape{1, t});
  auto xr = x.raw();
  for (std::int64_t i = 0; i < t; ++i) xr[i] = static_cast<T>(wave.samples[i]);
  Tensor<T> fmap = conv1d(x, fe.conv_w, fe.conv_b, kRawHop, Pad1d::none);  // [d x L]
  Tensor<T> tokens = transpose2d(fmap);
  return layer_norm(tokens, fe.ln_g, fe.ln_b);
}

template <class T>
struct SpecFrontend {
  std::int64_t d = 0;
  MelBank bank;
  Tensor<T> conv_w;  // [d x 1 x 16 x 16]
  Tensor<T> conv_b;  // [d]
  Tensor<T> ln_g, ln_b;

  void init(std::int64_t width, Rng& rng) {
    d = width;
    bank = make_mel_bank();
    conv_w = Tensor<T>(Shape{d, 1, kPatch, kPatch}, true);
    conv_b = Tensor<T>(Shape{d}, true);
    ln_g = Tensor<T>::full(Shape{d}, T(1));
    ln_b = Tensor<T>(Shape{d});
    ln_g.set_requires_grad(true);
    ln_b.set_requires_grad(true);
    fill_fan_in(conv_w, rng, kPatch * kPatch);
    fill_fan_in(conv_b, rng, kPatch * kPatch);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    fn(prefix + ".ln_g", ln_g);
    fn(prefix + ".ln_b", ln_b);
  }
};

// log-mel image right-padded with the log floor to a multiple of the patch
// size. Mel extraction has no parameters, so callers may mix or cache these
// images freely before the patch embedding.
template <class T>
Tensor<T> mel_image(const Waveform& wave) {
  if (wave.sample_rate != kSampleRate) {
    throw ConfigError("embed_spectrogram: expected " + std::to_string(kSampleRate) +
                      " Hz input, got " + std::to_string(wave.sample_rate));
  }
  static const MelBank bank = make_mel_bank();
  std::int64_t frames = 0;
  const std::vector<double> image = log_mel(wave.samples, bank, &frames);
  const std::int64_t padded = (frames + kPatch - 1) / kPatch * kPatch;
  Tensor<T> m(Shape{1, kNMels, padded});
  auto mr = m.raw();
  const T floor_val = static_cast<T>(std::log(kLogFloor));
  for (std::int64_t r = 0; r < kNMels; ++r) {
    for (std::int64_t c = 0; c < padded; ++c) {
      mr[r * padded + c] = c < frames ? static_cast<T>(image[r * frames + c]) : floor_val;
    }
  }
  return m;
}

// 16x16 non-overlapping patch embedding of a padded log-mel image. Tokens are
// time-major so "first K tokens" still means "earliest audio".
template <class T>
Tensor<T> embed_mel_image(const SpecFrontend<T>& fe, const Tensor<T>& image) {
  Tensor<T> fmap = conv2d(image, fe.conv_w, fe.conv_b, kPatch, kPatch);  // [d x 8 x padded/16]
  Tensor<T> tokens = grid_to_tokens(fmap);
  return layer_norm(tokens, fe.ln_g, fe.ln_b);
}

template <class T>
Tensor<T> embed_spectrogram(const SpecFrontend<T>& fe, const Waveform& wave) {
  return embed_mel_image(fe, mel_image<T>(wave));
}

}  // namespace helix
