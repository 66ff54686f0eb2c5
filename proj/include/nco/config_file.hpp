#pragma once

// Run configuration shared by all CLI subcommands, read from INI files:
//
//   [train]   paradigm baseline graph_size epochs epoch_size batch_size lr
//             seed val_size val_every alpha
//   [model]   encoder layers embed_dim heads ff_dim clip init_seed
//   [decode]  modes seed
//   [sweep]   sizes count seed exact_only
//
// Unknown sections or keys are rejected. The resolved configuration is
// written back in the same format, every key present, in a fixed order.

#include <charconv>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "nco/bench.hpp"
#include "nco/training.hpp"

namespace nco {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  TrainConfig train;
  std::vector<std::string> decodes{"greedy", "sample:128", "beam:128"};
  std::uint64_t decode_seed = 0;
  SweepSpec sweep = default_sweep();
  std::set<std::string> explicit_keys;  // `section.key` set from a file or override

  static SweepSpec default_sweep() {
    SweepSpec s;
    s.sizes = {5, 10, 15, 20};
    s.count = 1000;
    return s;
  }

  /// Decode configs with the shared sampling seed applied.
  std::vector<DecodeConfig> decode_configs() const {
    std::vector<DecodeConfig> out;
    for (const auto& d : decodes) {
      DecodeConfig c = parse_decode(d);
      c.seed = decode_seed;
      out.push_back(c);
    }
    return out;
  }

  SweepSpec sweep_spec() const {
    SweepSpec s = sweep;
    s.decodes = decode_configs();
    return s;
  }

  void validate() const {
    train.validate();
    sweep_spec().validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty item in list '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("bad value '" + raw + "' for " + key);
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad value '" + raw + "' for " + key + " (expected true or false)");
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

struct ConfigKey {
  std::string section;
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string path() const { return section + "." + name; }
};

#define NCO_SIZE_KEY(sec, key, field)                                                                  \
  ConfigKey {                                                                                          \
    sec, key, [](RunConfig& c, const std::string& v) { c.field = parse_number<std::size_t>(sec "." key, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                    \
  }
#define NCO_U64_KEY(sec, key, field)                                                                     \
  ConfigKey {                                                                                            \
    sec, key, [](RunConfig& c, const std::string& v) { c.field = parse_number<std::uint64_t>(sec "." key, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                      \
  }
#define NCO_DOUBLE_KEY(sec, key, field)                                                             \
  ConfigKey {                                                                                       \
    sec, key, [](RunConfig& c, const std::string& v) { c.field = parse_number<double>(sec "." key, v); }, \
        [](const RunConfig& c) { return format_double(c.field); }                                  \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"train", "paradigm", [](RunConfig& c, const std::string& v) { c.train.paradigm = parse_paradigm(trim(v)); },
       [](const RunConfig& c) { return to_string(c.train.paradigm); }},
      {"train", "baseline", [](RunConfig& c, const std::string& v) { c.train.baseline = parse_baseline(trim(v)); },
       [](const RunConfig& c) { return to_string(c.train.baseline); }},
      NCO_SIZE_KEY("train", "graph_size", train.graph_size),
      NCO_SIZE_KEY("train", "epochs", train.epochs),
      NCO_SIZE_KEY("train", "epoch_size", train.epoch_size),
      NCO_SIZE_KEY("train", "batch_size", train.batch_size),
      NCO_DOUBLE_KEY("train", "lr", train.lr),
      NCO_U64_KEY("train", "seed", train.seed),
      NCO_SIZE_KEY("train", "val_size", train.val_size),
      NCO_SIZE_KEY("train", "val_every", train.val_every),
      NCO_DOUBLE_KEY("train", "alpha", train.alpha),
      {"model", "encoder",
       [](RunConfig& c, const std::string& v) { c.train.model.encoder.kind = parse_encoder_kind(trim(v)); },
       [](const RunConfig& c) { return to_string(c.train.model.encoder.kind); }},
      NCO_SIZE_KEY("model", "layers", train.model.encoder.layers),
      NCO_SIZE_KEY("model", "embed_dim", train.model.encoder.embed_dim),
      NCO_SIZE_KEY("model", "heads", train.model.encoder.heads),
      NCO_SIZE_KEY("model", "ff_dim", train.model.encoder.ff_dim),
      NCO_DOUBLE_KEY("model", "clip", train.model.clip),
      NCO_U64_KEY("model", "init_seed", train.model.init_seed),
      {"decode", "modes",
       [](RunConfig& c, const std::string& v) {
         c.decodes.clear();
         for (const auto& d : split_list(v)) c.decodes.push_back(parse_decode(d).label());
       },
       [](const RunConfig& c) { return join(c.decodes); }},
      NCO_U64_KEY("decode", "seed", decode_seed),
      {"sweep", "sizes",
       [](RunConfig& c, const std::string& v) {
         c.sweep.sizes.clear();
         for (const auto& s : split_list(v)) c.sweep.sizes.push_back(parse_number<std::size_t>("sweep.sizes", s));
       },
       [](const RunConfig& c) {
         std::vector<std::string> items;
         for (auto s : c.sweep.sizes) items.push_back(std::to_string(s));
         return join(items);
       }},
      NCO_SIZE_KEY("sweep", "count", sweep.count),
      NCO_U64_KEY("sweep", "seed", sweep.seed),
      {"sweep", "exact_only",
       [](RunConfig& c, const std::string& v) { c.sweep.exact_only = parse_bool("sweep.exact_only", v); },
       [](const RunConfig& c) { return std::string(c.sweep.exact_only ? "true" : "false"); }},
  };
  return keys;
}

#undef NCO_SIZE_KEY
#undef NCO_U64_KEY
#undef NCO_DOUBLE_KEY

}  // namespace detail

/// Sets one value addressed as `section.key`.
inline void set_config_value(RunConfig& cfg, const std::string& path, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.path() == path) {
      try {
        k.set(cfg, value);
        cfg.explicit_keys.insert(path);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + path + "'");
}

/// Applies a `section.key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Applies every key of an INI stream on top of `cfg`.
inline void apply_ini(RunConfig& cfg, std::istream& in, const std::string& source = "config") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      if (!body.data().empty()) throw ConfigError(source + ": key '" + section + "' outside any section");
      bool known = false;
      for (const auto& k : detail::config_keys()) known = known || k.section == section;
      if (!known) throw ConfigError(source + ": unknown section '" + section + "'");
    }
    for (const auto& [key, value] : body) {
      try {
        set_config_value(cfg, section + "." + key, value.get_value<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
      }
    }
  }
}

inline void apply_ini_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  apply_ini(cfg, in, path);
}

/// Writes the resolved configuration; `header` lines become comments.
inline void write_ini(const RunConfig& cfg, std::ostream& out, const std::vector<std::string>& header = {}) {
  for (const auto& h : header) out << "; " << h << '\n';
  std::string section;
  for (const auto& k : detail::config_keys()) {
    if (k.section != section) {
      if (!section.empty() || !header.empty()) out << '\n';
      section = k.section;
      out << '[' << section << "]\n";
    }
    out << k.name << " = " << k.get(cfg) << '\n';
  }
}

inline void write_ini_file(const RunConfig& cfg, const std::string& path, const std::vector<std::string>& header = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_ini(cfg, out, header);
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace nco
