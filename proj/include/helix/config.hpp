#pragma once

// Flat `key = value` run configuration. Files are line-oriented: blank lines
// and `#` comments are ignored, later assignments win. Precedence against
// command-line flags is resolved by the caller: parse the file first, then
// overwrite with whatever flags were set.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/model.hpp"
#include "helix/training.hpp"

namespace helix {

using KvMap = std::map<std::string, std::string>;

namespace confdet {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::int64_t x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' has non-integer value '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' has non-numeric value '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' has non-boolean value '" + v + "'");
}

}  // namespace confdet

inline KvMap load_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config file '" + path + "' not found");
  KvMap kv;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = confdet::trim(line);
    if (body.empty()) continue;
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config " + path + ":" + std::to_string(lineno) +
                        ": expected key = value, got '" + body + "'");
    }
    const std::string key = confdet::trim(body.substr(0, eq));
    const std::string val = confdet::trim(body.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config " + path + ":" + std::to_string(lineno) + ": empty key");
    }
    kv[key] = val;
  }
  return kv;
}

// One experiment: architecture, protocol, and a data source. The source is
// either a manifest of files on disk or an in-memory synthetic spec
// (synth_n > 0 selects the latter).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string manifest;
  SyntheticSpec synth;
  std::int64_t synth_n = 0;
  double train_frac = 0.8;
};

// Every key a config file may set. Unknown keys are rejected so a typo fails
// loudly instead of silently training defaults.
inline RunConfig run_config_from_kv(const KvMap& kv) {
  RunConfig rc;
  using confdet::to_bool;
  using confdet::to_double;
  using confdet::to_int;
  for (const auto& [k, v] : kv) {
    if (k == "n_layers") {
      rc.model.n_layers = to_int(k, v);
    } else if (k == "d_model") {
      rc.model.d_model = to_int(k, v);
    } else if (k == "variant") {
      rc.model.variant = parse_variant(v);
    } else if (k == "attention_index") {
      rc.model.attention_index = to_int(k, v);
    } else if (k == "frontend") {
      rc.model.frontend = parse_frontend(v);
    } else if (k == "n_classes") {
      rc.model.n_classes = to_int(k, v);
    } else if (k == "pool") {
      if (v == "all") {
        rc.model.pool.kind = PoolKind::all;
      } else if (v == "first_k") {
        rc.model.pool.kind = PoolKind::first_k;
      } else {
        throw ConfigError("config: pool '" + v + "' (expected all or first_k)");
      }
    } else if (k == "pool_k") {
      rc.model.pool.k = to_int(k, v);
    } else if (k == "heads") {
      rc.model.heads = to_int(k, v);
    } else if (k == "d_state") {
      rc.model.ssm.d_state = to_int(k, v);
    } else if (k == "d_conv") {
      rc.model.ssm.d_conv = to_int(k, v);
    } else if (k == "expand") {
      rc.model.ssm.expand = to_int(k, v);
    } else if (k == "positional_encoding") {
      rc.model.positional_encoding = to_bool(k, v);
    } else if (k == "lr0") {
      rc.train.lr0 = to_double(k, v);
    } else if (k == "lr_min") {
      rc.train.lr_min = to_double(k, v);
    } else if (k == "weight_decay") {
      rc.train.weight_decay = to_double(k, v);
    } else if (k == "clip_norm") {
      rc.train.clip_norm = to_double(k, v);
    } else if (k == "batch_size") {
      rc.train.batch_size = to_int(k, v);
    } else if (k == "epochs") {
      rc.train.epochs = to_int(k, v);
    } else if (k == "mixup_alpha") {
      rc.train.mixup_alpha = to_double(k, v);
    } else if (k == "shift_max_s") {
      rc.train.shift_max_s = to_double(k, v);
    } else if (k == "amp_lo") {
      rc.train.amp_lo = to_double(k, v);
    } else if (k == "amp_hi") {
      rc.train.amp_hi = to_double(k, v);
    } else if (k == "noise_sigma") {
      rc.train.noise_sigma = to_double(k, v);
    } else if (k == "seed") {
      rc.train.seed = static_cast<std::uint64_t>(to_int(k, v));
    } else if (k == "manifest") {
      rc.manifest = v;
    } else if (k == "synth_classes") {
      rc.synth.n_classes = to_int(k, v);
    } else if (k == "synth_seconds") {
      rc.synth.clip_seconds = to_double(k, v);
    } else if (k == "synth_n") {
      rc.synth_n = to_int(k, v);
    } else if (k == "synth_snr_db") {
      rc.synth.snr_db = to_double(k, v);
    } else if (k == "synth_base_hz") {
      rc.synth.base_hz = to_double(k, v);
    } else if (k == "train_frac") {
      rc.train_frac = to_double(k, v);
    } else {
      throw ConfigError("config: unknown key '" + k + "'");
    }
  }
  return rc;
}

}  // namespace helix
