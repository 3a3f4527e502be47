#pragma once

// Tabular results. Doubles are written with 17 significant digits, missing or
// undefined values are spelled "nan", header row first, '\n' line endings.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "neon/core.hpp"

namespace neon {

using Cell = std::variant<double, std::int64_t, std::string>;

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double value_or_nan(const std::optional<double>& v) {
  return v ? *v : std::nan("");
}

class ResultTable {
 public:
  explicit ResultTable(std::vector<std::string> columns) : columns_(std::move(columns)) {
    if (columns_.empty()) throw std::invalid_argument("ResultTable: no columns");
  }

  void add_row(std::vector<Cell> row) {
    if (row.size() != columns_.size()) {
      throw std::invalid_argument("ResultTable: row has " + std::to_string(row.size()) +
                                  " cells, expected " + std::to_string(columns_.size()));
    }
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& columns() const noexcept { return columns_; }
  const std::vector<std::vector<Cell>>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

  std::size_t column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (columns_[i] == name) return i;
    throw std::out_of_range("ResultTable: no column '" + name + "'");
  }

  /// Numeric view of a cell; strings parse as double, "nan" stays NaN.
  double number(std::size_t row, std::size_t col) const {
    const Cell& c = rows_.at(row).at(col);
    if (auto d = std::get_if<double>(&c)) return *d;
    if (auto i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
    return std::stod(std::get<std::string>(c));
  }
  double number(std::size_t row, const std::string& col) const { return number(row, column_index(col)); }

  std::string to_csv() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < columns_.size(); ++i) os << (i ? "," : "") << columns_[i];
    os << '\n';
    for (const auto& row : rows_) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) os << ',';
        std::visit(
            [&](const auto& v) {
              using T = std::decay_t<decltype(v)>;
              if constexpr (std::is_same_v<T, double>) os << format_double(v);
              else os << v;
            },
            row[i]);
      }
      os << '\n';
    }
    return os.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << to_csv();
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

/// Numeric CSV with a header row: returns the column names and one vector per row.
struct NumericCsv {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline NumericCsv read_numeric_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r");
      const auto e = cell.find_last_not_of(" \t\r");
      out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    }
    return out;
  };
  NumericCsv csv;
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  csv.columns = split(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != csv.columns.size()) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(csv.columns.size()) +
                    " fields, got " + std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (const auto& c : cells) {
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      if (c.empty() || *end != '\0') throw IoError(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + c + "'");
      row.push_back(v);
    }
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

}  // namespace neon
