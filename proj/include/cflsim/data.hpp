#pragma once

// Tabular datasets: CSV loading with one-hot categoricals, z-score
// normalization, low-rank synthetic generation, and vertical (column-wise)
// partitioning across clients.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "cflsim/errors.hpp"
#include "cflsim/random.hpp"

namespace cflsim {

struct TabularDataset {
  Eigen::MatrixXd features;  // N x d, column-major
  std::optional<std::vector<double>> labels;
  std::vector<std::string> column_names;
  std::string label_name;

  std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(features.cols()); }
};

struct VerticalPartition {
  std::vector<std::vector<std::size_t>> assignments;  // client -> sorted column indices

  std::size_t clients() const { return assignments.size(); }

  std::size_t max_width() const {
    std::size_t w = 0;
    for (const auto& cols : assignments) w = std::max(w, cols.size());
    return w;
  }
};

struct SynthSpec {
  std::size_t rows = 100;
  std::size_t cols = 16;
  std::size_t latent_rank = 4;
  double noise_sd = 0.1;
  std::uint64_t seed = 7;
};

namespace detail {

inline std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

/// Splits an RFC-4180 record stream into rows of fields. Quoted fields may
/// contain the delimiter, doubled quotes and newlines.
inline std::vector<std::vector<std::string>> split_csv(std::string_view text, char delim) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == delim) {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
      row.clear();
      ++line;
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes) throw DataError("unterminated quoted field starting before line " + std::to_string(line));
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string quote_if_needed(const std::string& s, char delim) {
  if (s.find_first_of(std::string{delim, '"', '\n', '\r'}) == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

/// Parses CSV text whose first record is the header. Columns where every
/// cell is numeric stay numeric; any other column is one-hot encoded with
/// one indicator per distinct value in sorted order, named "<column>=<value>".
/// A categorical label column is mapped to the index of its sorted value.
inline TabularDataset parse_csv(std::string_view text, std::optional<std::string> label_column = std::nullopt,
                                char delimiter = ',') {
  const auto records = detail::split_csv(text, delimiter);
  if (records.empty()) throw DataError("csv: missing header row");
  const auto& header = records.front();
  const std::size_t width = header.size();
  if (width < 1 || (width == 1 && header[0].empty())) throw DataError("csv: header has no columns");

  std::optional<std::size_t> label_idx;
  if (label_column) {
    const auto it = std::find(header.begin(), header.end(), *label_column);
    if (it == header.end()) throw DataError("csv: label column '" + *label_column + "' not found in header");
    label_idx = static_cast<std::size_t>(it - header.begin());
  }
  if (width - (label_idx ? 1 : 0) < 1) throw DataError("csv: no feature columns besides the label");

  const std::size_t n = records.size() - 1;
  if (n < 1) throw DataError("csv: no data rows");
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != width) {
      throw DataError("csv: row " + std::to_string(r + 1) + " has " + std::to_string(records[r].size()) +
                      " fields, expected " + std::to_string(width));
    }
    for (std::size_t c = 0; c < width; ++c) {
      const auto& cell = records[r][c];
      if (cell.find_first_not_of(" \t\r") == std::string::npos) {
        throw DataError("csv: missing value at row " + std::to_string(r + 1) + ", column " + std::to_string(c + 1) +
                        " ('" + header[c] + "')");
      }
    }
  }

  struct Column {
    std::size_t source;
    bool numeric;
    std::vector<std::string> categories;
  };
  std::vector<Column> columns;
  std::size_t out_width = 0;
  for (std::size_t c = 0; c < width; ++c) {
    if (label_idx && c == *label_idx) continue;
    Column col{c, true, {}};
    for (std::size_t r = 1; r < records.size() && col.numeric; ++r) {
      col.numeric = detail::parse_number(records[r][c]).has_value();
    }
    if (!col.numeric) {
      std::set<std::string> values;
      for (std::size_t r = 1; r < records.size(); ++r) values.insert(records[r][c]);
      col.categories.assign(values.begin(), values.end());
    }
    out_width += col.numeric ? 1 : col.categories.size();
    columns.push_back(std::move(col));
  }

  TabularDataset ds;
  ds.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out_width));
  Eigen::Index out = 0;
  for (const auto& col : columns) {
    if (col.numeric) {
      ds.column_names.push_back(header[col.source]);
      for (std::size_t r = 0; r < n; ++r) {
        ds.features(static_cast<Eigen::Index>(r), out) = *detail::parse_number(records[r + 1][col.source]);
      }
      ++out;
      continue;
    }
    for (std::size_t k = 0; k < col.categories.size(); ++k) {
      ds.column_names.push_back(header[col.source] + "=" + col.categories[k]);
    }
    for (std::size_t r = 0; r < n; ++r) {
      const auto& v = records[r + 1][col.source];
      const auto pos = std::lower_bound(col.categories.begin(), col.categories.end(), v) - col.categories.begin();
      ds.features(static_cast<Eigen::Index>(r), out + pos) = 1.0;
    }
    out += static_cast<Eigen::Index>(col.categories.size());
  }

  if (label_idx) {
    ds.label_name = header[*label_idx];
    std::vector<double> labels(n);
    bool numeric = true;
    for (std::size_t r = 0; r < n && numeric; ++r) {
      const auto v = detail::parse_number(records[r + 1][*label_idx]);
      numeric = v.has_value();
      if (numeric) labels[r] = *v;
    }
    if (!numeric) {
      std::set<std::string> values;
      for (std::size_t r = 0; r < n; ++r) values.insert(records[r + 1][*label_idx]);
      const std::vector<std::string> sorted(values.begin(), values.end());
      for (std::size_t r = 0; r < n; ++r) {
        const auto& v = records[r + 1][*label_idx];
        labels[r] = static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
      }
    }
    ds.labels = std::move(labels);
  }
  return ds;
}

inline TabularDataset load_csv(const std::filesystem::path& path, std::optional<std::string> label_column = std::nullopt,
                               char delimiter = ',') {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  try {
    return parse_csv(buf.str(), std::move(label_column), delimiter);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Shortest round-trip formatting, so reloading reproduces every cell exactly.
inline std::string to_csv(const TabularDataset& ds, char delimiter = ',') {
  std::string out;
  for (std::size_t c = 0; c < ds.cols(); ++c) {
    if (c) out.push_back(delimiter);
    out += detail::quote_if_needed(ds.column_names.size() == ds.cols() ? ds.column_names[c] : "x" + std::to_string(c),
                                   delimiter);
  }
  if (ds.labels) {
    out.push_back(delimiter);
    out += detail::quote_if_needed(ds.label_name.empty() ? "label" : ds.label_name, delimiter);
  }
  out.push_back('\n');
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    for (std::size_t c = 0; c < ds.cols(); ++c) {
      if (c) out.push_back(delimiter);
      out += detail::format_double(ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
    if (ds.labels) {
      out.push_back(delimiter);
      out += detail::format_double((*ds.labels)[r]);
    }
    out.push_back('\n');
  }
  return out;
}

/// Column-wise z-score with the population standard deviation. Columns whose
/// spread is negligible relative to their magnitude become all-zero.
inline TabularDataset normalize(TabularDataset ds) {
  require(ds.rows() >= 2, "normalize: need at least 2 rows");
  const auto n = static_cast<double>(ds.rows());
  for (Eigen::Index c = 0; c < ds.features.cols(); ++c) {
    auto col = ds.features.col(c);
    const double mean = col.sum() / n;
    col.array() -= mean;
    const double sd = std::sqrt(col.squaredNorm() / n);
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
      col.setZero();
    } else {
      col /= sd;
    }
  }
  return ds;
}

/// features = Z W + noise with Z (N x r) and W (r x d) standard normal.
inline TabularDataset synthesize(const SynthSpec& spec) {
  require(spec.rows >= 1 && spec.cols >= 1, "synthesize: rows and cols must be positive");
  require(spec.latent_rank >= 1 && spec.latent_rank <= spec.cols, "synthesize: need 1 <= latent_rank <= cols");
  require(spec.noise_sd >= 0.0 && std::isfinite(spec.noise_sd), "synthesize: noise_sd must be finite and >= 0");
  Rng rng(derive_seed(spec.seed, "synthesize"));
  const auto n = static_cast<Eigen::Index>(spec.rows);
  const auto d = static_cast<Eigen::Index>(spec.cols);
  const auto r = static_cast<Eigen::Index>(spec.latent_rank);
  Eigen::MatrixXd z(n, r);
  Eigen::MatrixXd w(r, d);
  // fill row by row so the draw order does not depend on storage order
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < r; ++j) z(i, j) = rng.normal();
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < d; ++j) w(i, j) = rng.normal();
  TabularDataset ds;
  ds.features = z * w;
  if (spec.noise_sd > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) ds.features(i, j) += spec.noise_sd * rng.normal();
  }
  for (std::size_t c = 0; c < spec.cols; ++c) ds.column_names.push_back("x" + std::to_string(c));
  return ds;
}

/// Shuffles column indices, then cuts them into `clients` contiguous chunks
/// whose sizes differ by at most one (larger chunks first).
inline VerticalPartition partition_vertical(std::size_t cols, std::size_t clients, std::uint64_t seed) {
  require(clients >= 1, "partition_vertical: need at least one client");
  if (cols < clients) {
    throw ConfigError("partition_vertical: feature count d=" + std::to_string(cols) +
                      " is smaller than client count K=" + std::to_string(clients) +
                      " (every client needs at least one column)");
  }
  std::vector<std::size_t> order(cols);
  for (std::size_t i = 0; i < cols; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "partition"));
  rng.shuffle(order);

  VerticalPartition p;
  p.assignments.resize(clients);
  const std::size_t base = cols / clients;
  const std::size_t extra = cols % clients;
  std::size_t at = 0;
  for (std::size_t k = 0; k < clients; ++k) {
    const std::size_t size = base + (k < extra ? 1 : 0);
    auto& chunk = p.assignments[k];
    chunk.assign(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + size));
    std::sort(chunk.begin(), chunk.end());
    at += size;
  }
  return p;
}

inline VerticalPartition partition_vertical(const TabularDataset& ds, std::size_t clients, std::uint64_t seed) {
  return partition_vertical(ds.cols(), clients, seed);
}

}  // namespace cflsim
