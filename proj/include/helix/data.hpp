#pragma once

// Audio ingestion and dataset construction: a small RIFF/WAVE codec, CSV
// manifests, the long-sequence concat/stitch tasks, per-speaker splits, and a
// synthetic tone corpus that is separable by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "helix/errors.hpp"
#include "helix/frontend.hpp"
#include "helix/rng.hpp"

namespace helix {

struct AudioClip {
  Waveform waveform;
  std::int64_t label = -1;
  std::string source_id;
  std::string speaker_id;  // empty when unknown
};

// ---- WAV ----

namespace wavdet {

inline std::uint32_t u32_at(const std::vector<char>& b, std::size_t pos) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 3])) << 24;
}

inline std::uint16_t u16_at(const std::vector<char>& b, std::size_t pos) {
  return static_cast<std::uint16_t>(static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos])) |
                                    static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 1]))
                                        << 8);
}

inline bool tag_at(const std::vector<char>& b, std::size_t pos, const char* tag) {
  return b[pos] == tag[0] && b[pos + 1] == tag[1] && b[pos + 2] == tag[2] && b[pos + 3] == tag[3];
}

inline void push_u32(std::vector<char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void push_u16(std::vector<char>& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

// Samples at an arbitrary rate -> 16 kHz by linear interpolation. Fidelity is
// deliberately modest; see the module notes before swapping in sinc.
inline std::vector<double> resample_linear(const std::vector<double>& in, std::int64_t sr_in,
                                           std::int64_t sr_out) {
  const std::int64_t n_in = static_cast<std::int64_t>(in.size());
  const std::int64_t n_out =
      static_cast<std::int64_t>(static_cast<double>(n_in) * static_cast<double>(sr_out) /
                                static_cast<double>(sr_in));
  std::vector<double> out(static_cast<std::size_t>(n_out));
  for (std::int64_t i = 0; i < n_out; ++i) {
    const double p = static_cast<double>(i) * static_cast<double>(sr_in) / static_cast<double>(sr_out);
    std::int64_t i0 = static_cast<std::int64_t>(p);
    if (i0 > n_in - 1) i0 = n_in - 1;
    const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, n_in - 1);
    const double f = p - static_cast<double>(i0);
    out[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(i0)] * (1.0 - f) +
                                       in[static_cast<std::size_t>(i1)] * f;
  }
  return out;
}

}  // namespace wavdet

inline AudioClip load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("wav '" + path + "': cannot open");
  std::vector<char> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  auto fail = [&path](const std::string& what, std::size_t offset) -> IoError {
    return IoError("wav '" + path + "': " + what + " at offset " + std::to_string(offset));
  };
  if (b.size() < 12) throw fail("file too short for a RIFF header", 0);
  if (!wavdet::tag_at(b, 0, "RIFF")) throw fail("bad chunk id, expected RIFF", 0);
  if (!wavdet::tag_at(b, 8, "WAVE")) throw fail("bad format tag, expected WAVE", 8);

  bool have_fmt = false;
  std::uint16_t audio_format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::size_t data_pos = 0, data_len = 0;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint32_t sz = wavdet::u32_at(b, pos + 4);
    const std::size_t body = pos + 8;
    if (wavdet::tag_at(b, pos, "fmt ")) {
      if (sz < 16 || body + 16 > b.size()) throw fail("fmt chunk truncated", pos);
      audio_format = wavdet::u16_at(b, body + 0);
      channels = wavdet::u16_at(b, body + 2);
      sample_rate = wavdet::u32_at(b, body + 4);
      bits = wavdet::u16_at(b, body + 14);
      have_fmt = true;
    } else if (wavdet::tag_at(b, pos, "data")) {
      if (body + sz > b.size()) throw fail("data chunk runs past end of file", pos);
      data_pos = body;
      data_len = sz;
      have_data = true;
    }
    pos = body + sz + (sz & 1);  // chunks are word aligned
  }
  if (!have_fmt) throw fail("no fmt chunk", 12);
  if (!have_data) throw fail("no data chunk", 12);
  if (audio_format != 1 && audio_format != 3) {
    throw fail("audio_format " + std::to_string(audio_format) +
                   " unsupported (PCM=1 or float=3)",
               data_pos > 20 ? 20 : 0);
  }
  if (channels != 1 && channels != 2) {
    throw fail("channels " + std::to_string(channels) + " unsupported (mono or stereo)", 22);
  }
  if (audio_format == 1 && bits != 16) {
    throw fail("bits_per_sample " + std::to_string(bits) + " unsupported for PCM (need 16)", 34);
  }
  if (audio_format == 3 && bits != 32) {
    throw fail("bits_per_sample " + std::to_string(bits) + " unsupported for float (need 32)", 34);
  }
  if (sample_rate == 0) throw fail("sample_rate 0", 24);

  const std::size_t bytes_per = bits / 8u;
  const std::size_t frame = bytes_per * channels;
  if (frame == 0 || data_len % frame != 0) {
    throw fail("data length " + std::to_string(data_len) + " not a whole number of frames",
               data_pos);
  }
  const std::size_t n_frames = data_len / frame;

  std::vector<double> mono(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    double acc = 0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const std::size_t sp = data_pos + i * frame + c * bytes_per;
      if (audio_format == 1) {
        const std::int16_t v = static_cast<std::int16_t>(wavdet::u16_at(b, sp));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        const std::uint32_t bits32 = wavdet::u32_at(b, sp);
        float fv;
        std::memcpy(&fv, &bits32, sizeof fv);
        acc += static_cast<double>(fv);
      }
    }
    mono[i] = acc / static_cast<double>(channels);
  }

  AudioClip clip;
  clip.source_id = path;
  clip.waveform.sample_rate = kSampleRate;
  clip.waveform.samples = (sample_rate == static_cast<std::uint32_t>(kSampleRate))
                              ? std::move(mono)
                              : wavdet::resample_linear(mono, sample_rate, kSampleRate);
  return clip;
}

// PCM16 mono. Values outside [-1, 1] clamp at the rails.
inline void save_wav(const std::string& path, const Waveform& wave) {
  std::vector<char> b;
  const std::uint32_t n = static_cast<std::uint32_t>(wave.samples.size());
  const std::uint32_t data_bytes = 2 * n;
  b.reserve(44 + data_bytes);
  const char* head = "RIFF";
  b.insert(b.end(), head, head + 4);
  wavdet::push_u32(b, 36 + data_bytes);
  const char* wavetag = "WAVEfmt ";
  b.insert(b.end(), wavetag, wavetag + 8);
  wavdet::push_u32(b, 16);  // fmt payload size
  wavdet::push_u16(b, 1);   // PCM
  wavdet::push_u16(b, 1);   // mono
  wavdet::push_u32(b, static_cast<std::uint32_t>(wave.sample_rate));
  wavdet::push_u32(b, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  wavdet::push_u16(b, 2);   // block align
  wavdet::push_u16(b, 16);  // bits
  const char* datatag = "data";
  b.insert(b.end(), datatag, datatag + 4);
  wavdet::push_u32(b, data_bytes);
  for (double s : wave.samples) {
    double q = std::nearbyint(std::clamp(s, -1.0, 1.0) * 32768.0);
    q = std::clamp(q, -32768.0, 32767.0);
    wavdet::push_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("wav '" + path + "': cannot open for writing");
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) throw IoError("wav '" + path + "': short write");
}

// ---- manifests ----

struct ManifestRow {
  std::string path;  // relative to the manifest's directory
  std::int64_t label = -1;
  std::int64_t fold = 0;
  std::string speaker;
};

inline constexpr const char* kManifestHeader = "path,label,fold,speaker";

inline void save_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("manifest '" + path + "': cannot open for writing");
  f << kManifestHeader << "\n";
  for (const auto& r : rows) {
    f << r.path << ',' << r.label << ',' << r.fold << ',' << r.speaker << "\n";
  }
}

inline std::vector<ManifestRow> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("manifest '" + path + "': cannot open");
  std::string line;
  if (!std::getline(f, line) || line != kManifestHeader) {
    throw IoError("manifest '" + path + "': first line must be '" + kManifestHeader + "', got '" +
                  line + "'");
  }
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        cells.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (cells.size() != 4) {
      throw IoError("manifest '" + path + "': line " + std::to_string(lineno) + " has " +
                    std::to_string(cells.size()) + " fields, expected 4");
    }
    ManifestRow r;
    r.path = cells[0];
    try {
      r.label = std::stoll(cells[1]);
      r.fold = std::stoll(cells[2]);
    } catch (const std::exception&) {
      throw IoError("manifest '" + path + "': line " + std::to_string(lineno) +
                    " has non-numeric label/fold");
    }
    r.speaker = cells[3];
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string manifest_dir(const std::string& manifest_path) {
  const auto slash = manifest_path.find_last_of('/');
  return slash == std::string::npos ? std::string(".") : manifest_path.substr(0, slash);
}

// ---- task constructions ----

struct ConcatTaskSpec {
  std::int64_t n_clips = 10;
  std::int64_t pool_k = 100;  // pooling window the classifier pairs with this task
};

// n clips drawn uniformly with replacement; the label is the first draw's.
inline AudioClip make_concat_example(const std::vector<AudioClip>& pool, std::int64_t n_clips,
                                     Rng& rng) {
  if (pool.empty()) throw ConfigError("concat: empty clip pool");
  if (n_clips < 1) throw ConfigError("concat: n_clips " + std::to_string(n_clips));
  const int rate = pool.front().waveform.sample_rate;
  AudioClip out;
  out.waveform.sample_rate = rate;
  out.source_id = "concat";
  for (std::int64_t i = 0; i < n_clips; ++i) {
    const auto& pick =
        pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
    if (pick.waveform.sample_rate != rate) {
      throw ConfigError("concat: mixed sample rates " + std::to_string(rate) + " and " +
                        std::to_string(pick.waveform.sample_rate));
    }
    if (i == 0) out.label = pick.label;
    out.waveform.samples.insert(out.waveform.samples.end(), pick.waveform.samples.begin(),
                                pick.waveform.samples.end());
  }
  return out;
}

// Random utterances of one speaker, concatenated past the target and then cut
// to exactly target_seconds.
inline AudioClip stitch_speaker_clip(const std::vector<AudioClip>& utterances,
                                     double target_seconds, Rng& rng) {
  if (utterances.empty()) throw ConfigError("stitch: speaker has no utterances");
  const std::string& speaker = utterances.front().speaker_id;
  for (const auto& u : utterances) {
    if (u.speaker_id != speaker) {
      throw ConfigError("stitch: mixed speakers '" + speaker + "' and '" + u.speaker_id + "'");
    }
  }
  const int rate = utterances.front().waveform.sample_rate;
  const std::int64_t target =
      static_cast<std::int64_t>(std::llround(target_seconds * static_cast<double>(rate)));
  if (target < 1) throw ConfigError("stitch: target " + std::to_string(target_seconds) + " s");

  AudioClip out;
  out.waveform.sample_rate = rate;
  out.label = utterances.front().label;
  out.speaker_id = speaker;
  out.source_id = "stitch:" + speaker;
  while (static_cast<std::int64_t>(out.waveform.samples.size()) < target) {
    const auto& pick = utterances[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(utterances.size()) - 1))];
    out.waveform.samples.insert(out.waveform.samples.end(), pick.waveform.samples.begin(),
                                pick.waveform.samples.end());
  }
  out.waveform.samples.resize(static_cast<std::size_t>(target));
  return out;
}

// Stratified per speaker: each speaker contributes floor(count * fraction)
// utterances to train, clamped so both splits stay non-empty.
inline std::pair<std::vector<AudioClip>, std::vector<AudioClip>> split_per_speaker(
    const std::vector<AudioClip>& clips, double train_fraction, Rng& rng) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw ConfigError("split: train fraction " + std::to_string(train_fraction) +
                      " outside (0, 1)");
  }
  std::vector<std::string> speakers;
  for (const auto& c : clips) {
    if (std::find(speakers.begin(), speakers.end(), c.speaker_id) == speakers.end()) {
      speakers.push_back(c.speaker_id);
    }
  }
  std::pair<std::vector<AudioClip>, std::vector<AudioClip>> out;
  for (const auto& sp : speakers) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      if (clips[i].speaker_id == sp) idx.push_back(i);
    }
    if (idx.size() < 2) {
      throw ConfigError("split: speaker '" + sp + "' has " + std::to_string(idx.size()) +
                        " utterance(s), need at least 2");
    }
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      std::swap(idx[i], idx[static_cast<std::size_t>(
                        rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    const auto count = static_cast<std::int64_t>(idx.size());
    std::int64_t n_train =
        static_cast<std::int64_t>(static_cast<double>(count) * train_fraction);
    n_train = std::clamp<std::int64_t>(n_train, 1, count - 1);
    for (std::int64_t i = 0; i < count; ++i) {
      (i < n_train ? out.first : out.second).push_back(clips[idx[static_cast<std::size_t>(i)]]);
    }
  }
  return out;
}

// ---- synthetic corpus ----

struct SyntheticSpec {
  std::int64_t n_classes = 4;
  double clip_seconds = 1.0;
  double snr_db = 20.0;
  int sample_rate = kSampleRate;
  double base_hz = 200.0;  // class c sounds tones at base*(c+1) and 2*base*(c+1)

  void validate() const {
    if (n_classes < 1) throw ConfigError("synthetic: n_classes " + std::to_string(n_classes));
    if (clip_seconds <= 0) throw ConfigError("synthetic: clip_seconds " + std::to_string(clip_seconds));
    const double top = 2.0 * base_hz * static_cast<double>(n_classes);
    if (top >= static_cast<double>(sample_rate) / 2.0) {
      throw ConfigError("synthetic: highest tone " + std::to_string(top) +
                        " Hz reaches the Nyquist limit at " + std::to_string(sample_rate) + " Hz");
    }
  }
};

// Class c: a steady tone at f_c plus a delayed octave tone whose onset time is
// class-specific. Phases are random per clip; noise power is set from the
// measured signal power and the requested SNR.
inline std::vector<AudioClip> generate_synthetic(const SyntheticSpec& spec, std::int64_t n_examples,
                                                 Rng& rng) {
  spec.validate();
  const std::int64_t T =
      static_cast<std::int64_t>(std::llround(spec.clip_seconds * spec.sample_rate));
  const double two_pi = 2.0 * 3.14159265358979323846;
  const double ramp_samples = 0.01 * spec.sample_rate;

  std::vector<AudioClip> out;
  out.reserve(static_cast<std::size_t>(n_examples));
  for (std::int64_t i = 0; i < n_examples; ++i) {
    const std::int64_t c = i % spec.n_classes;
    const double f1 = spec.base_hz * static_cast<double>(c + 1);
    const double f2 = 2.0 * f1;
    const double phase1 = rng.uniform(0.0, two_pi);
    const double phase2 = rng.uniform(0.0, two_pi);
    const std::int64_t onset =
        static_cast<std::int64_t>(static_cast<double>(T) * static_cast<double>(c) /
                                  (2.0 * static_cast<double>(spec.n_classes)));

    AudioClip clip;
    clip.label = c;
    clip.source_id = "synth-" + std::to_string(i);
    clip.waveform.sample_rate = spec.sample_rate;
    clip.waveform.samples.resize(static_cast<std::size_t>(T));
    double power = 0.0;
    for (std::int64_t t = 0; t < T; ++t) {
      const double ts = static_cast<double>(t) / spec.sample_rate;
      double s = 0.3 * std::sin(two_pi * f1 * ts + phase1);
      if (t >= onset) {
        const double env = std::min(1.0, static_cast<double>(t - onset) / ramp_samples);
        s += 0.3 * env * std::sin(two_pi * f2 * ts + phase2);
      }
      clip.waveform.samples[static_cast<std::size_t>(t)] = s;
      power += s * s;
    }
    power /= static_cast<double>(T);
    const double sigma = std::sqrt(power / std::pow(10.0, spec.snr_db / 10.0));
    for (auto& s : clip.waveform.samples) s += sigma * rng.normal();
    out.push_back(std::move(clip));
  }
  return out;
}

}  // namespace helix
