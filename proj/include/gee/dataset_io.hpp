#pragma once

// Long CSV dataset format:
//
//   cluster,obs,y,x1,...,xp
//   1,1,0.53,1,-0.2
//   1,2,...
//
// One row per observation, clusters in filtration order with consecutive
// indices from 1, observations numbered 1..m_i inside each cluster. Lines
// starting with '#' are comments. Values are written with 17 significant
// digits so a write/read cycle reproduces every double exactly.
//
// A JSON sidecar next to the CSV (same stem, ".json") carries
// {n, p, m_max, link, beta0?} plus whatever provenance the writer adds.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "gee/error.hpp"
#include "gee/model.hpp"

namespace gee {

struct DatasetMeta {
  std::optional<LinkKind> link;
  std::optional<Vector> beta0;
  nlohmann::json extra = nlohmann::json::object();  // provenance (config, seed, ...)
};

struct DatasetFile {
  Dataset data;
  DatasetMeta meta;
};

struct LoadOptions {
  // Used when no sidecar is present; otherwise the largest cluster size is taken.
  std::optional<Eigen::Index> m_max;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  std::filesystem::path out = csv;
  out.replace_extension(".json");
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_real(std::string_view field, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v)) {
    throw ParseError(line, "invalid number '" + std::string(field) + "'");
  }
  return v;
}

inline long long parse_integer(std::string_view field, std::size_t line) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError(line, "invalid integer '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace detail

inline DatasetMeta read_metadata(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw InvalidInput("cannot open metadata " + json_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, "metadata " + json_path.string() + ": " + e.what());
  }
  DatasetMeta meta;
  meta.extra = j;
  if (j.contains("link") && j["link"].is_string()) {
    meta.link = parse_link(j["link"].get<std::string>());
    if (!meta.link) throw ParseError(0, "metadata: unknown link '" + j["link"].get<std::string>() + "'");
  }
  if (j.contains("beta0") && j["beta0"].is_array()) {
    const auto values = j["beta0"].get<std::vector<double>>();
    meta.beta0 = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  }
  return meta;
}

inline DatasetFile read_dataset_csv(std::istream& in, std::optional<Eigen::Index> declared_m_max) {
  DatasetFile file;
  Dataset& data = file.data;
  std::string raw;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t width = 0;

  std::vector<double> ys;
  std::vector<std::vector<double>> xs;
  long long current = 0;

  auto flush = [&]() {
    if (ys.empty()) return;
    Cluster c;
    c.index = static_cast<std::size_t>(current);
    c.y = Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    c.x.resize(static_cast<Eigen::Index>(xs.size()), data.p);
    for (std::size_t r = 0; r < xs.size(); ++r)
      for (Eigen::Index k = 0; k < data.p; ++k) c.x(static_cast<Eigen::Index>(r), k) = xs[r][static_cast<std::size_t>(k)];
    data.clusters.push_back(std::move(c));
    ys.clear();
    xs.clear();
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = detail::split_commas(line);
    if (!have_header) {
      if (fields.size() < 4 || fields[0] != "cluster" || fields[1] != "obs" || fields[2] != "y") {
        throw ParseError(line_no, "header must be 'cluster,obs,y,x1,...,xp'");
      }
      for (std::size_t k = 3; k < fields.size(); ++k) {
        if (fields[k] != "x" + std::to_string(k - 2)) throw ParseError(line_no, "unexpected header column '" + std::string(fields[k]) + "'");
      }
      width = fields.size();
      data.p = static_cast<Eigen::Index>(width - 3);
      have_header = true;
      continue;
    }
    if (fields.size() != width) {
      throw ParseError(line_no, "ragged row: expected " + std::to_string(width) + " fields, found " + std::to_string(fields.size()));
    }
    const long long cluster = detail::parse_integer(fields[0], line_no);
    const long long obs = detail::parse_integer(fields[1], line_no);
    if (cluster != current) {
      if (cluster != current + 1) throw ParseError(line_no, "non-consecutive cluster index " + std::to_string(cluster));
      flush();
      current = cluster;
    }
    if (obs != static_cast<long long>(ys.size()) + 1) {
      throw ParseError(line_no, "non-consecutive observation index " + std::to_string(obs) + " in cluster " + std::to_string(cluster));
    }
    if (declared_m_max && static_cast<Eigen::Index>(ys.size()) + 1 > *declared_m_max) {
      throw ParseError(line_no, "cluster " + std::to_string(cluster) + " size exceeds m_max=" + std::to_string(*declared_m_max));
    }
    ys.push_back(detail::parse_real(fields[2], line_no));
    std::vector<double> row(width - 3);
    for (std::size_t k = 3; k < width; ++k) row[k - 3] = detail::parse_real(fields[k], line_no);
    xs.push_back(std::move(row));
  }
  if (!have_header) throw ParseError(line_no, "missing header");
  flush();
  if (declared_m_max) {
    data.m_max = *declared_m_max;
  } else {
    Eigen::Index largest = 0;
    for (const Cluster& c : data.clusters) largest = std::max(largest, c.size());
    data.m_max = largest;
  }
  if (data.clusters.empty()) throw ParseError(line_no, "dataset has no observations");
  return file;
}

inline DatasetFile read_dataset_file(const std::filesystem::path& csv, const LoadOptions& options = {}) {
  std::optional<Eigen::Index> m_max = options.m_max;
  DatasetMeta meta;
  const auto side = sidecar_path(csv);
  if (std::filesystem::exists(side)) {
    meta = read_metadata(side);
    if (meta.extra.contains("m_max")) m_max = meta.extra["m_max"].get<Eigen::Index>();
  }
  std::ifstream in(csv);
  if (!in) throw InvalidInput("cannot open dataset " + csv.string());
  DatasetFile file = read_dataset_csv(in, m_max);
  file.meta = std::move(meta);
  if (file.meta.extra.contains("p") && file.meta.extra["p"].get<Eigen::Index>() != file.data.p) {
    throw ParseError(0, "metadata p does not match CSV column count");
  }
  if (file.meta.extra.contains("n") && file.meta.extra["n"].get<std::size_t>() != file.data.n()) {
    throw ParseError(0, "metadata n does not match CSV cluster count");
  }
  return file;
}

enum class DatasetFormat { long_csv };

inline Dataset load_dataset(const std::filesystem::path& csv, DatasetFormat = DatasetFormat::long_csv) {
  return read_dataset_file(csv).data;
}

inline void write_dataset_csv(std::ostream& out, const Dataset& data, const std::vector<std::string>& comments = {}) {
  for (const std::string& c : comments) out << "# " << c << '\n';
  out << "cluster,obs,y";
  for (Eigen::Index k = 1; k <= data.p; ++k) out << ",x" << k;
  out << '\n';
  for (const Cluster& c : data.clusters) {
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      out << c.index << ',' << (j + 1) << ',' << format_double(c.y(j));
      for (Eigen::Index k = 0; k < data.p; ++k) out << ',' << format_double(c.x(j, k));
      out << '\n';
    }
  }
}

inline nlohmann::json metadata_json(const Dataset& data, const DatasetMeta& meta) {
  nlohmann::json j = meta.extra.is_object() ? meta.extra : nlohmann::json::object();
  j["n"] = data.n();
  j["p"] = data.p;
  j["m_max"] = data.m_max;
  if (meta.link) j["link"] = to_string(*meta.link);
  if (meta.beta0) j["beta0"] = std::vector<double>(meta.beta0->data(), meta.beta0->data() + meta.beta0->size());
  return j;
}

inline void write_dataset(const Dataset& data, const std::filesystem::path& csv, const DatasetMeta& meta = {},
                          DatasetFormat = DatasetFormat::long_csv) {
  data.validate();
  {
    std::ofstream out(csv);
    if (!out) throw InvalidInput("cannot write dataset " + csv.string());
    write_dataset_csv(out, data);
  }
  std::ofstream side(sidecar_path(csv));
  if (!side) throw InvalidInput("cannot write metadata " + sidecar_path(csv).string());
  side << metadata_json(data, meta).dump(2) << '\n';
}

}  // namespace gee
