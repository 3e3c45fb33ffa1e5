#pragma once

// Full classifier assembly: frontend, block stack, pooled linear head, and a
// flat-file checkpoint format. Three stack variants share one config type so
// they can be parameter-compared and benchmarked under identical settings.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "helix/backbone.hpp"
#include "helix/errors.hpp"
#include "helix/frontend.hpp"
#include "helix/tensor.hpp"

namespace helix {

// ---- configuration ----

enum class Variant { pure_mamba, helix, pure_attention };
enum class FrontendKind { raw, spectrogram };
enum class PoolKind { all, first_k };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::pure_mamba: return "pure_mamba";
    case Variant::helix: return "helix";
    case Variant::pure_attention: return "pure_attention";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "pure_mamba") return Variant::pure_mamba;
  if (s == "helix") return Variant::helix;
  if (s == "pure_attention") return Variant::pure_attention;
  throw ConfigError("unknown variant '" + s +
                    "' (expected pure_mamba, helix, or pure_attention)");
}

inline const char* frontend_name(FrontendKind f) {
  return f == FrontendKind::raw ? "raw" : "spectrogram";
}

inline FrontendKind parse_frontend(const std::string& s) {
  if (s == "raw") return FrontendKind::raw;
  if (s == "spectrogram") return FrontendKind::spectrogram;
  throw ConfigError("unknown frontend '" + s + "' (expected raw or spectrogram)");
}

struct PoolConfig {
  PoolKind kind = PoolKind::all;
  std::int64_t k = 0;  // window for first_k, ignored for all
};

struct ModelConfig {
  std::int64_t n_layers = 6;
  std::int64_t d_model = 256;
  Variant variant = Variant::helix;
  // Position of the attention layer in the helix stack, zero based.
  // Negative means the middle of the stack.
  std::int64_t attention_index = -1;
  FrontendKind frontend = FrontendKind::raw;
  std::int64_t n_classes = 0;
  PoolConfig pool;
  std::int64_t heads = 4;
  SSMConfig ssm;
  bool positional_encoding = false;

  std::int64_t resolved_attention_index() const {
    return attention_index < 0 ? n_layers / 2 : attention_index;
  }

  void validate() const {
    if (n_layers < 1) throw ConfigError("model: n_layers " + std::to_string(n_layers));
    if (d_model < 1) throw ConfigError("model: d_model " + std::to_string(d_model));
    if (n_classes < 1) {
      throw ConfigError("model: need at least one class, got " + std::to_string(n_classes));
    }
    if (heads < 1 || d_model % heads != 0) {
      throw ConfigError("model: width " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (variant == Variant::helix) {
      const std::int64_t idx = resolved_attention_index();
      if (idx >= n_layers) {
        throw ConfigError("model: attention index " + std::to_string(idx) +
                          " outside stack of " + std::to_string(n_layers) + " layers");
      }
    }
    if (pool.kind == PoolKind::first_k && pool.k < 1) {
      throw ConfigError("model: first_k pooling needs a positive window, got " +
                        std::to_string(pool.k));
    }
  }
};

// ---- stack layout ----

enum class LayerKind { mamba, attention };

inline std::vector<LayerKind> variant_layout(const ModelConfig& cfg) {
  std::vector<LayerKind> kinds(static_cast<std::size_t>(cfg.n_layers), LayerKind::mamba);
  switch (cfg.variant) {
    case Variant::pure_mamba: break;
    case Variant::helix:
      kinds[static_cast<std::size_t>(cfg.resolved_attention_index())] = LayerKind::attention;
      break;
    case Variant::pure_attention:
      for (auto& k : kinds) k = LayerKind::attention;
      break;
  }
  return kinds;
}

template <class T>
struct Layer {
  LayerKind kind = LayerKind::mamba;
  std::unique_ptr<BiMambaBlock<T>> mamba;
  std::unique_ptr<AttentionBlock<T>> attn;
};

template <class T>
struct Model {
  ModelConfig cfg;
  std::int64_t d_ffn = 0;  // matched FFN width used by any attention layer
  std::unique_ptr<RawFrontend<T>> raw_fe;
  std::unique_ptr<SpecFrontend<T>> spec_fe;
  std::vector<Layer<T>> layers;
  Tensor<T> final_g, final_b;
  Tensor<T> w_cls;  // [n_classes x d]
  Tensor<T> b_cls;  // [n_classes]

  template <class Fn>
  void visit(Fn&& fn) {
    if (raw_fe) raw_fe->visit("frontend", fn);
    if (spec_fe) spec_fe->visit("frontend", fn);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i);
      if (layers[i].kind == LayerKind::mamba) {
        layers[i].mamba->visit(prefix, fn);
      } else {
        layers[i].attn->visit(prefix, fn);
      }
    }
    fn(std::string("final_norm.g"), final_g);
    fn(std::string("final_norm.b"), final_b);
    fn(std::string("head.w"), w_cls);
    fn(std::string("head.b"), b_cls);
  }
};

template <class T>
std::int64_t model_param_count(Model<T>& m) {
  std::int64_t n = 0;
  m.visit([&n](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

// Init order is fixed (frontend, layers in stack order, norm, head) so a seed
// pins every weight regardless of variant.
template <class T>
Model<T> build_model(const ModelConfig& cfg_in, Rng& rng) {
  ModelConfig cfg = cfg_in;
  cfg.ssm.d_model = cfg.d_model;
  cfg.validate();

  Model<T> m;
  m.cfg = cfg;
  if (cfg.frontend == FrontendKind::raw) {
    m.raw_fe = std::make_unique<RawFrontend<T>>();
    m.raw_fe->init(cfg.d_model, rng);
  } else {
    m.spec_fe = std::make_unique<SpecFrontend<T>>();
    m.spec_fe->init(cfg.d_model, rng);
  }

  m.d_ffn = solve_ffn_width(bimamba_param_count(cfg.ssm), cfg.d_model).d_ffn;
  for (LayerKind kind : variant_layout(cfg)) {
    Layer<T> layer;
    layer.kind = kind;
    if (kind == LayerKind::mamba) {
      layer.mamba = std::make_unique<BiMambaBlock<T>>();
      layer.mamba->init(cfg.ssm, rng);
    } else {
      layer.attn = std::make_unique<AttentionBlock<T>>();
      layer.attn->init(cfg.d_model, m.d_ffn, cfg.heads, rng);
    }
    m.layers.push_back(std::move(layer));
  }

  m.final_g = Tensor<T>::full(Shape{cfg.d_model}, T(1));
  m.final_b = Tensor<T>(Shape{cfg.d_model});
  m.final_g.set_requires_grad(true);
  m.final_b.set_requires_grad(true);
  m.w_cls = Tensor<T>(Shape{cfg.n_classes, cfg.d_model}, true);
  m.b_cls = Tensor<T>(Shape{cfg.n_classes}, true);
  fill_fan_in(m.w_cls, rng, cfg.d_model);
  fill_fan_in(m.b_cls, rng, cfg.d_model);
  return m;
}

// ---- forward ----

// Fixed sin/cos table; rebuilt per call since L varies, carries no grad.
template <class T>
Tensor<T> sinusoidal_encoding(std::int64_t len, std::int64_t d) {
  Tensor<T> pe(Shape{len, d});
  auto p = pe.raw();
  for (std::int64_t t = 0; t < len; ++t) {
    for (std::int64_t i = 0; 2 * i < d; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      p[t * d + 2 * i] = static_cast<T>(std::sin(angle));
      if (2 * i + 1 < d) p[t * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

template <class T>
Tensor<T> embed(Model<T>& m, const Waveform& wave) {
  return m.cfg.frontend == FrontendKind::raw ? embed_raw(*m.raw_fe, wave)
                                             : embed_spectrogram(*m.spec_fe, wave);
}

// tokens [L x d] -> normalized per-position representations [L x d]
template <class T>
Tensor<T> model_trunk(Model<T>& m, const Tensor<T>& tokens) {
  if (tokens.rank() != 2 || tokens.dim(1) != m.cfg.d_model) {
    throw ShapeError("model: tokens " + shape_str(tokens.shape()) + ", width " +
                     std::to_string(m.cfg.d_model));
  }
  Tensor<T> x = tokens;
  if (m.cfg.positional_encoding) {
    x = add(x, sinusoidal_encoding<T>(tokens.dim(0), m.cfg.d_model));
  }
  for (auto& layer : m.layers) {
    x = layer.kind == LayerKind::mamba ? bimamba_block(x, *layer.mamba, m.cfg.ssm)
                                       : attention_block(x, *layer.attn);
  }
  return layer_norm(x, m.final_g, m.final_b);
}

// representations [L x d] -> logits [1 x n_classes]; the mean covers the
// first K positions only (or all of them), so later positions cannot leak in
template <class T>
Tensor<T> head_logits(Model<T>& m, const Tensor<T>& reps) {
  const std::int64_t len = reps.dim(0);
  const std::int64_t k = m.cfg.pool.kind == PoolKind::all ? len : m.cfg.pool.k;
  if (k > len) {
    throw ConfigError("pooling: window " + std::to_string(k) + " exceeds sequence length " +
                      std::to_string(len));
  }
  auto pooled = mean_first_rows(reps, k);
  return add_bias_rows(matmul_nt(pooled, m.w_cls), m.b_cls);
}

template <class T>
Tensor<T> model_forward(Model<T>& m, const Tensor<T>& tokens) {
  auto reps = model_trunk(m, tokens);
  return head_logits(m, reps);
}

template <class T>
Tensor<T> forward_wave(Model<T>& m, const Waveform& wave) {
  auto tokens = embed(m, wave);
  return model_forward(m, tokens);
}

// ---- config serialization ----

inline std::map<std::string, std::string> config_to_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["n_layers"] = std::to_string(cfg.n_layers);
  kv["d_model"] = std::to_string(cfg.d_model);
  kv["variant"] = variant_name(cfg.variant);
  kv["attention_index"] = std::to_string(cfg.attention_index);
  kv["frontend"] = frontend_name(cfg.frontend);
  kv["n_classes"] = std::to_string(cfg.n_classes);
  kv["pool"] = cfg.pool.kind == PoolKind::all ? "all" : "first_k";
  kv["pool_k"] = std::to_string(cfg.pool.k);
  kv["heads"] = std::to_string(cfg.heads);
  kv["d_state"] = std::to_string(cfg.ssm.d_state);
  kv["d_conv"] = std::to_string(cfg.ssm.d_conv);
  kv["expand"] = std::to_string(cfg.ssm.expand);
  kv["positional_encoding"] = cfg.positional_encoding ? "true" : "false";
  return kv;
}

inline std::int64_t parse_int_kv(const std::map<std::string, std::string>& kv,
                                 const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("config: missing key '" + key + "'");
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return static_cast<std::int64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' has non-integer value '" + it->second + "'");
  }
}

inline ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  cfg.n_layers = parse_int_kv(kv, "n_layers");
  cfg.d_model = parse_int_kv(kv, "d_model");
  cfg.variant = parse_variant(kv.at("variant"));
  cfg.attention_index = parse_int_kv(kv, "attention_index");
  cfg.frontend = parse_frontend(kv.at("frontend"));
  cfg.n_classes = parse_int_kv(kv, "n_classes");
  const std::string& pool = kv.at("pool");
  if (pool == "all") {
    cfg.pool.kind = PoolKind::all;
  } else if (pool == "first_k") {
    cfg.pool.kind = PoolKind::first_k;
  } else {
    throw ConfigError("config: pool '" + pool + "' (expected all or first_k)");
  }
  cfg.pool.k = parse_int_kv(kv, "pool_k");
  cfg.heads = parse_int_kv(kv, "heads");
  cfg.ssm.d_model = cfg.d_model;
  cfg.ssm.d_state = parse_int_kv(kv, "d_state");
  cfg.ssm.d_conv = parse_int_kv(kv, "d_conv");
  cfg.ssm.expand = parse_int_kv(kv, "expand");
  cfg.positional_encoding = kv.at("positional_encoding") == "true";
  return cfg;
}

// ---- checkpoints ----
//
// Single file: a text header with config keys and a manifest, then one raw
// little-endian blob. Same-precision round trips are byte exact.
//
//   helix-checkpoint-v1
//   [config]
//   key = value
//   [manifest]
//   name shape precision offset count
//   [data]
//   <blob>

inline constexpr const char* kCheckpointMagic = "helix-checkpoint-v1";

template <class T>
constexpr const char* precision_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
struct SavedArray {
  std::string name;
  Shape shape;
  const T* data = nullptr;
  std::int64_t count = 0;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string precision;
  std::uint64_t offset = 0;
  std::int64_t count = 0;
};

struct CheckpointFile {
  std::map<std::string, std::string> kv;
  std::vector<CheckpointEntry> entries;
  std::vector<char> blob;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  template <class T>
  void read_into(const CheckpointEntry& e, T* dst) const {
    if (e.precision != precision_name<T>()) {
      throw IoError("checkpoint: '" + e.name + "' stored as " + e.precision + ", requested " +
                    precision_name<T>());
    }
    const std::uint64_t bytes = static_cast<std::uint64_t>(e.count) * sizeof(T);
    if (e.offset + bytes > blob.size()) {
      throw IoError("checkpoint: '" + e.name + "' runs past end of data (offset " +
                    std::to_string(e.offset) + ", " + std::to_string(bytes) + " bytes, blob " +
                    std::to_string(blob.size()) + ")");
    }
    std::memcpy(dst, blob.data() + e.offset, bytes);
  }
};

inline std::string shape_manifest_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

inline Shape parse_manifest_shape(const std::string& s, const std::string& name) {
  Shape shape;
  std::int64_t cur = 0;
  bool have_digit = false;
  for (char c : s) {
    if (c == 'x') {
      if (!have_digit) throw IoError("checkpoint: bad shape '" + s + "' for '" + name + "'");
      shape.push_back(cur);
      cur = 0;
      have_digit = false;
    } else if (c >= '0' && c <= '9') {
      cur = cur * 10 + (c - '0');
      have_digit = true;
    } else {
      throw IoError("checkpoint: bad shape '" + s + "' for '" + name + "'");
    }
  }
  if (!have_digit) throw IoError("checkpoint: bad shape '" + s + "' for '" + name + "'");
  shape.push_back(cur);
  return shape;
}

template <class T>
void write_checkpoint(const std::string& path, const std::map<std::string, std::string>& kv,
                      const std::vector<SavedArray<T>>& arrays) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  f << kCheckpointMagic << "\n[config]\n";
  for (const auto& [k, v] : kv) f << k << " = " << v << "\n";
  f << "[manifest]\n";
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    if (a.count != numel(a.shape)) {
      throw IoError("checkpoint: '" + a.name + "' count " + std::to_string(a.count) +
                    " does not match shape " + shape_str(a.shape));
    }
    f << a.name << ' ' << shape_manifest_str(a.shape) << ' ' << precision_name<T>() << ' '
      << offset << ' ' << a.count << "\n";
    offset += static_cast<std::uint64_t>(a.count) * sizeof(T);
  }
  f << "[data]\n";
  for (const auto& a : arrays) {
    f.write(reinterpret_cast<const char*>(a.data),
            static_cast<std::streamsize>(a.count * static_cast<std::int64_t>(sizeof(T))));
  }
  if (!f) throw IoError("checkpoint: short write to '" + path + "'");
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  // The header is newline-framed text; the blob begins right after "[data]\n".
  auto next_line = [&raw](std::size_t& pos) {
    std::size_t start = pos;
    while (pos < raw.size() && raw[pos] != '\n') ++pos;
    std::string line(raw.begin() + static_cast<std::ptrdiff_t>(start),
                     raw.begin() + static_cast<std::ptrdiff_t>(pos));
    if (pos < raw.size()) ++pos;
    return line;
  };

  std::size_t pos = 0;
  CheckpointFile out;
  if (next_line(pos) != kCheckpointMagic) {
    throw IoError("checkpoint: '" + path + "' does not start with " + kCheckpointMagic);
  }
  if (next_line(pos) != "[config]") throw IoError("checkpoint: '" + path + "' missing [config]");
  std::string line;
  while (pos < raw.size()) {
    line = next_line(pos);
    if (line == "[manifest]") break;
    const auto sep = line.find(" = ");
    if (sep == std::string::npos) {
      throw IoError("checkpoint: bad config line '" + line + "' in '" + path + "'");
    }
    out.kv[line.substr(0, sep)] = line.substr(sep + 3);
  }
  if (line != "[manifest]") throw IoError("checkpoint: '" + path + "' missing [manifest]");
  while (pos < raw.size()) {
    line = next_line(pos);
    if (line == "[data]") break;
    std::istringstream ls(line);
    CheckpointEntry e;
    std::string shape_s;
    if (!(ls >> e.name >> shape_s >> e.precision >> e.offset >> e.count)) {
      throw IoError("checkpoint: bad manifest line '" + line + "' in '" + path + "'");
    }
    e.shape = parse_manifest_shape(shape_s, e.name);
    if (e.count != numel(e.shape)) {
      throw IoError("checkpoint: '" + e.name + "' count " + std::to_string(e.count) +
                    " does not match shape " + shape_str(e.shape));
    }
    out.entries.push_back(std::move(e));
  }
  if (line != "[data]") throw IoError("checkpoint: '" + path + "' missing [data]");
  out.blob.assign(raw.begin() + static_cast<std::ptrdiff_t>(pos), raw.end());
  return out;
}

template <class T>
std::vector<SavedArray<T>> model_arrays(Model<T>& m) {
  std::vector<SavedArray<T>> out;
  m.visit([&out](const std::string& name, Tensor<T>& t) {
    out.push_back(SavedArray<T>{name, t.shape(), t.data().data(), t.size()});
  });
  return out;
}

template <class T>
void save_model(const std::string& path, Model<T>& m,
                const std::map<std::string, std::string>& extra_kv = {},
                const std::vector<SavedArray<T>>& extra_arrays = {}) {
  auto kv = config_to_kv(m.cfg);
  for (const auto& [k, v] : extra_kv) kv[k] = v;
  auto arrays = model_arrays(m);
  arrays.insert(arrays.end(), extra_arrays.begin(), extra_arrays.end());
  write_checkpoint(path, kv, arrays);
}

// Copies every model parameter out of the file; entries with other names
// (optimizer state) are left alone.
template <class T>
void load_model_params(const CheckpointFile& file, Model<T>& m) {
  m.visit([&file](const std::string& name, Tensor<T>& t) {
    const CheckpointEntry* e = file.find(name);
    if (!e) throw IoError("checkpoint: missing parameter '" + name + "'");
    if (e->shape != t.shape()) {
      throw ShapeError("checkpoint: '" + name + "' stored as " + shape_str(e->shape) +
                       ", model expects " + shape_str(t.shape()));
    }
    file.read_into(*e, t.raw().data());
  });
}

// Rebuilds a model from the stored config, then loads its weights.
template <class T>
Model<T> load_model(const std::string& path) {
  CheckpointFile file = read_checkpoint(path);
  ModelConfig cfg = config_from_kv(file.kv);
  Rng rng(0);  // weights are overwritten below
  Model<T> m = build_model<T>(cfg, rng);
  load_model_params(file, m);
  return m;
}

}  // namespace helix
