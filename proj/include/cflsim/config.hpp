#pragma once

// Experiment configuration and its text format.
//
// The config dialect is a flat TOML subset (schema 1):
//   # comment
//   [section]
//   key = 1.5 | 42 | "text" | true | [1, 2, 3] | ["a", "b"]
// Keys are addressed as "section.key"; unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cflsim/data.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/federation.hpp"
#include "cflsim/metrics.hpp"

namespace cflsim {

inline constexpr int kConfigSchema = 1;

using ConfigScalar = std::variant<double, std::string, bool>;

struct ConfigValue {
  std::vector<ConfigScalar> items;
  bool is_list = false;
  std::size_t line = 0;
};

using ConfigTable = std::map<std::string, ConfigValue>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

inline ConfigScalar parse_scalar(const std::string& raw, std::size_t line) {
  const auto s = trim(raw);
  const auto where = " (line " + std::to_string(line) + ")";
  if (s.empty()) throw ConfigError("config: empty value" + where);
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError("config: unterminated string" + where);
    return s.substr(1, s.size() - 2);
  }
  if (s == "true") return true;
  if (s == "false") return false;
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (const auto v = parse_number(s)) return *v;
  throw ConfigError("config: cannot parse value '" + s + "'" + where);
}

}  // namespace detail

inline ConfigTable parse_config(std::string_view text) {
  ConfigTable table;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: malformed section header on line " + std::to_string(line_no));
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected 'key = value' on line " + std::to_string(line_no));
    const auto key = detail::trim(std::string_view(line).substr(0, eq));
    const auto value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(line_no));
    ConfigValue v;
    v.line = line_no;
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') throw ConfigError("config: unterminated list on line " + std::to_string(line_no));
      v.is_list = true;
      const auto body = value.substr(1, value.size() - 2);
      std::size_t at = 0;
      while (at <= body.size()) {
        auto comma = body.find(',', at);
        if (comma == std::string::npos) comma = body.size();
        const auto item = detail::trim(std::string_view(body).substr(at, comma - at));
        if (!item.empty()) v.items.push_back(detail::parse_scalar(item, line_no));
        at = comma + 1;
      }
    } else {
      v.items.push_back(detail::parse_scalar(value, line_no));
    }
    const auto full = section.empty() ? key : section + "." + key;
    if (table.count(full)) throw ConfigError("config: duplicate key '" + full + "' on line " + std::to_string(line_no));
    table[full] = std::move(v);
  }
  return table;
}

struct DatasetSpec {
  std::string name = "synthetic";
  std::string kind = "synthetic";  // "synthetic" | "csv"
  SynthSpec synth;
  std::filesystem::path path;
  std::string label;
  char delimiter = ',';
};

struct GridSpec {
  std::string preset;  // "" or "grid19"
  std::vector<double> poison_fractions;
  std::vector<double> poison_levels;
  std::vector<double> selection_ratios;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  FederationConfig federation;
  FailureRule failure;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  GridSpec grid;

  void validate() const {
    federation.validate();
    failure.validate();
    require(dataset.kind == "synthetic" || dataset.kind == "csv", "config: dataset.kind must be 'synthetic' or 'csv'");
    require(!dataset.name.empty(), "config: dataset.name must not be empty");
    if (dataset.kind == "synthetic") {
      require(dataset.synth.latent_rank >= 1 && dataset.synth.latent_rank <= dataset.synth.cols,
              "config: need 1 <= dataset.latent_rank <= dataset.cols");
      require(dataset.synth.rows >= 2, "config: dataset.rows must be >= 2");
      if (dataset.synth.cols < federation.clients) {
        throw ConfigError("config: synthetic dataset has d=" + std::to_string(dataset.synth.cols) +
                          " columns but K=" + std::to_string(federation.clients) +
                          " clients; the vertical partition needs d >= K");
      }
    } else {
      require(!dataset.path.empty(), "config: dataset.path is required for csv datasets");
    }
  }
};

namespace detail {

struct ConfigReader {
  const ConfigTable& table;
  std::map<std::string, bool> used;

  const ConfigValue* find(const std::string& key) {
    const auto it = table.find(key);
    if (it == table.end()) return nullptr;
    used[key] = true;
    return &it->second;
  }

  template <typename T>
  T scalar_as(const ConfigScalar& s, const std::string& key) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (const auto* p = std::get_if<std::string>(&s)) return *p;
      throw ConfigError("config: '" + key + "' must be a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (const auto* p = std::get_if<bool>(&s)) return *p;
      throw ConfigError("config: '" + key + "' must be true or false");
    } else {
      const auto* p = std::get_if<double>(&s);
      if (!p) throw ConfigError("config: '" + key + "' must be a number");
      if constexpr (std::is_integral_v<T>) {
        if (*p < 0 || *p != std::floor(*p) || *p > 9.007199254740992e15) {
          throw ConfigError("config: '" + key + "' must be a non-negative integer");
        }
      }
      return static_cast<T>(*p);
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (const auto* v = find(key)) {
      if (v->is_list || v->items.size() != 1) throw ConfigError("config: '" + key + "' must be a single value");
      out = scalar_as<T>(v->items.front(), key);
    }
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (const auto* v = find(key)) {
      out.clear();
      for (const auto& item : v->items) out.push_back(scalar_as<T>(item, key));
    }
  }

  void reject_unknown() {
    for (const auto& [key, value] : table) {
      if (!used.count(key)) throw ConfigError("config: unknown key '" + key + "' (line " + std::to_string(value.line) + ")");
    }
  }
};

}  // namespace detail

inline ExperimentConfig config_from_table(const ConfigTable& table) {
  ExperimentConfig c;
  detail::ConfigReader r{table, {}};
  double schema = kConfigSchema;
  r.get("schema", schema);
  require(schema == kConfigSchema, "config: unsupported schema " + std::to_string(schema));

  r.get("dataset.name", c.dataset.name);
  r.get("dataset.kind", c.dataset.kind);
  r.get("dataset.rows", c.dataset.synth.rows);
  r.get("dataset.cols", c.dataset.synth.cols);
  r.get("dataset.latent_rank", c.dataset.synth.latent_rank);
  r.get("dataset.noise_sd", c.dataset.synth.noise_sd);
  r.get("dataset.seed", c.dataset.synth.seed);
  std::string path;
  r.get("dataset.path", path);
  c.dataset.path = path;
  r.get("dataset.label", c.dataset.label);
  std::string delim = ",";
  r.get("dataset.delimiter", delim);
  require(delim.size() == 1, "config: dataset.delimiter must be a single character");
  c.dataset.delimiter = delim.front();

  auto& f = c.federation;
  r.get("federation.clients", f.clients);
  r.get("federation.p_c", f.attack.poison_fraction);
  r.get("federation.p_l", f.attack.poison_level);
  r.get("federation.r_l", f.selection_ratio);
  r.get("federation.epsilon", f.attack.norm_bound);
  r.get("federation.tau", f.attack.stats_bound);
  r.get("federation.epochs", f.epochs);
  r.get("federation.batch_size", f.batch_size);
  r.get("federation.learning_rate", f.learning_rate);
  r.get("federation.lambda", f.lambda);
  r.get("federation.temperature", f.temperature);
  r.get("federation.master_seed", f.master_seed);

  r.get("failure.kappa", c.failure.ratio_threshold);
  r.get("failure.divergence_fails", c.failure.divergence_fails);
  r.get("output.checkpoint_every", c.checkpoint_every);

  r.get("grid.preset", c.grid.preset);
  r.get_list("grid.p_c", c.grid.poison_fractions);
  r.get_list("grid.p_l", c.grid.poison_levels);
  r.get_list("grid.r_l", c.grid.selection_ratios);
  r.get_list("grid.seeds", c.grid.seeds);
  r.reject_unknown();
  require(c.grid.preset.empty() || c.grid.preset == "grid19", "config: unknown grid.preset '" + c.grid.preset + "'");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_table(parse_config(buf.str()));
}

}  // namespace cflsim
