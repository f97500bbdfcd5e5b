#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace ff {

// Metadata stored next to a dataset CSV.
struct DatasetMeta {
  std::string model;
  Params theta_true;
  State x0;
  std::uint64_t seed = 0;
  std::string preset;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Writes `time,y1,...,yd` rows and a JSON sidecar at `<csv path>.json`.
inline void write_dataset(const std::filesystem::path& csv_path, const Dataset& data,
                          const DatasetMeta& meta) {
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot write " + csv_path.string());
  csv << "time";
  for (Eigen::Index j = 0; j < data.obs_dim(); ++j) csv << ",y" << (j + 1);
  csv << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    csv << format_double(data.times[i]);
    for (auto v : data.observations[i]) csv << ',' << v;
    csv << '\n';
  }

  nlohmann::ordered_json j;
  j["model"] = meta.model;
  if (!meta.preset.empty()) j["preset"] = meta.preset;
  j["theta_true"] = meta.theta_true;
  j["x0"] = meta.x0;
  std::vector<std::vector<std::int64_t>> F;
  for (Eigen::Index r = 0; r < data.obs_matrix.rows(); ++r) {
    F.emplace_back();
    for (Eigen::Index c = 0; c < data.obs_matrix.cols(); ++c) F.back().push_back(data.obs_matrix(r, c));
  }
  j["F"] = F;
  j["seed"] = meta.seed;
  j["t0"] = data.t0;
  std::ofstream side(csv_path.string() + ".json");
  if (!side) throw ConfigError("cannot write sidecar for " + csv_path.string());
  side << j.dump(2) << '\n';
}

struct LoadedDataset {
  Dataset data;
  DatasetMeta meta;
};

/// Reads a dataset CSV and its sidecar; the sidecar supplies F and t0.
inline LoadedDataset read_dataset(const std::filesystem::path& csv_path) {
  LoadedDataset out;
  std::ifstream side(csv_path.string() + ".json");
  if (!side) throw ConfigError("missing sidecar " + csv_path.string() + ".json");
  const auto j = nlohmann::json::parse(side);
  out.meta.model = j.at("model").get<std::string>();
  out.meta.theta_true = j.value("theta_true", Params{});
  out.meta.x0 = j.value("x0", State{});
  out.meta.seed = j.value("seed", std::uint64_t{0});
  out.meta.preset = j.value("preset", std::string{});
  const auto F = j.at("F").get<std::vector<std::vector<std::int64_t>>>();
  if (F.empty()) throw ConfigError("empty observation matrix in sidecar");
  out.data.obs_matrix.resize(static_cast<Eigen::Index>(F.size()), static_cast<Eigen::Index>(F[0].size()));
  for (std::size_t r = 0; r < F.size(); ++r)
    for (std::size_t c = 0; c < F[r].size(); ++c)
      out.data.obs_matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = F[r][c];
  out.data.t0 = j.value("t0", 0.0);
  const auto& Fm = out.data.obs_matrix;
  out.data.complete = Fm.rows() == Fm.cols() && Fm == IntMatrix::Identity(Fm.rows(), Fm.cols());

  std::ifstream csv(csv_path);
  if (!csv) throw ConfigError("cannot read " + csv_path.string());
  std::string line;
  std::getline(csv, line);
  if (line.rfind("time", 0) != 0) throw ConfigError("dataset CSV must start with a time column");
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    out.data.times.push_back(std::stod(cell));
    State y;
    while (std::getline(ss, cell, ',')) y.push_back(std::stoll(cell));
    out.data.observations.push_back(std::move(y));
  }
  out.data.validate();
  return out;
}

}  // namespace ff
