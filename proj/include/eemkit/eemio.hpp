#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eemkit/common.hpp"

namespace eemkit {

// Canonical acquisition grid: excitation 300..640 nm in 10 nm steps,
// emission 300..800 nm in 2 nm steps.
inline constexpr int kExcitationCount = 35;
inline constexpr int kEmissionCount = 251;
inline constexpr double kExcitationMinNm = 300.0;
inline constexpr double kExcitationMaxNm = 640.0;
inline constexpr double kExcitationStepNm = 10.0;
inline constexpr double kEmissionMinNm = 300.0;
inline constexpr double kEmissionMaxNm = 800.0;
inline constexpr double kEmissionStepNm = 2.0;
inline constexpr double kAxisTolNm = 1e-6;

inline std::vector<double> canonical_excitation_axis() {
  std::vector<double> axis(kExcitationCount);
  for (int i = 0; i < kExcitationCount; ++i) axis[static_cast<std::size_t>(i)] = kExcitationMinNm + i * kExcitationStepNm;
  return axis;
}

inline std::vector<double> canonical_emission_axis() {
  std::vector<double> axis(kEmissionCount);
  for (int i = 0; i < kEmissionCount; ++i) axis[static_cast<std::size_t>(i)] = kEmissionMinNm + i * kEmissionStepNm;
  return axis;
}

// Raw excitation-emission matrix. Rows follow excitation_nm, columns follow
// emission_nm; values are detector counts (expected 0..1000, not enforced
// above as real detectors can saturate past the nominal range).
struct EEMGrid {
  std::vector<double> excitation_nm;
  std::vector<double> emission_nm;
  Eigen::MatrixXd intensity;  // (excitation_nm.size() x emission_nm.size())

  double value_at(double ex_nm, double em_nm) const {
    for (std::size_t i = 0; i < excitation_nm.size(); ++i) {
      if (std::abs(excitation_nm[i] - ex_nm) > kAxisTolNm) continue;
      for (std::size_t j = 0; j < emission_nm.size(); ++j) {
        if (std::abs(emission_nm[j] - em_nm) <= kAxisTolNm)
          return intensity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
    throw Error("wavelength pair (" + format_double(ex_nm) + ", " + format_double(em_nm) + ") not on grid");
  }
};

namespace detail {

inline void check_axis(const std::vector<double>& axis, int count, double min_nm, double max_nm, double step_nm,
                       const char* name) {
  if (static_cast<int>(axis.size()) != count)
    throw Error(std::string(name) + " axis has " + std::to_string(axis.size()) + " values, expected " +
                std::to_string(count));
  if (std::abs(axis.front() - min_nm) > kAxisTolNm || std::abs(axis.back() - max_nm) > kAxisTolNm)
    throw Error(std::string(name) + " axis must span [" + format_double(min_nm) + ", " + format_double(max_nm) + "] nm");
  for (std::size_t i = 1; i < axis.size(); ++i) {
    double step = axis[i] - axis[i - 1];
    if (step <= 0.0) throw Error(std::string(name) + " axis not strictly ascending at index " + std::to_string(i));
    if (std::abs(step - step_nm) > kAxisTolNm)
      throw Error(std::string(name) + " axis step " + format_double(step) + " nm at index " + std::to_string(i) +
                  ", expected " + format_double(step_nm));
  }
}

}  // namespace detail

inline void validate_grid(const EEMGrid& grid) {
  detail::check_axis(grid.excitation_nm, kExcitationCount, kExcitationMinNm, kExcitationMaxNm, kExcitationStepNm,
                     "excitation");
  detail::check_axis(grid.emission_nm, kEmissionCount, kEmissionMinNm, kEmissionMaxNm, kEmissionStepNm, "emission");
  if (grid.intensity.rows() != static_cast<Eigen::Index>(grid.excitation_nm.size()) ||
      grid.intensity.cols() != static_cast<Eigen::Index>(grid.emission_nm.size()))
    throw Error("intensity shape (" + std::to_string(grid.intensity.rows()) + "x" +
                std::to_string(grid.intensity.cols()) + ") does not match axes");
  for (Eigen::Index i = 0; i < grid.intensity.rows(); ++i)
    for (Eigen::Index j = 0; j < grid.intensity.cols(); ++j) {
      double v = grid.intensity(i, j);
      if (!std::isfinite(v) || v < 0.0)
        throw Error("intensity at (" + std::to_string(i) + ", " + std::to_string(j) + ") is " + format_double(v) +
                    ", must be finite and >= 0");
    }
}

// UV extinction coefficients. K232/K268 are the study targets; K264/K272 are
// carried when present in the source table.
struct QualityIndicators {
  double k232 = 0.0;
  double k268 = 0.0;
  std::optional<double> k264;
  std::optional<double> k272;
};

inline void validate_indicators(const QualityIndicators& q) {
  auto check = [](const char* name, double v) {
    if (!std::isfinite(v) || v < 0.0)
      throw Error(std::string(name) + " = " + format_double(v) + ", must be finite and >= 0");
  };
  check("k232", q.k232);
  check("k268", q.k268);
  if (q.k264) check("k264", *q.k264);
  if (q.k272) check("k272", *q.k272);
}

// Which indicator a model predicts.
enum class Target { k232, k268 };

inline std::string to_string(Target t) { return t == Target::k232 ? "k232" : "k268"; }

inline Target target_from_string(const std::string& name) {
  if (name == "k232") return Target::k232;
  if (name == "k268") return Target::k268;
  throw Error("unknown target '" + name + "' (expected k232|k268)");
}

inline double target_value(const QualityIndicators& q, Target t) { return t == Target::k232 ? q.k232 : q.k268; }

struct OilSample {
  std::string oil_id;
  int stage_index = 0;
  double day = 0.0;  // elapsed aging time; metadata only
  EEMGrid eem;
  QualityIndicators targets;
};

inline std::string sample_key(const std::string& oil_id, int stage_index) {
  return oil_id + "_stage" + std::to_string(stage_index);
}

inline std::string eem_filename(const std::string& oil_id, int stage_index) {
  return sample_key(oil_id, stage_index) + ".csv";
}

struct Dataset {
  std::vector<OilSample> samples;       // sorted by (oil_id, stage_index)
  std::vector<std::string> oil_ids;     // ordered distinct labels
  int n_stages = 0;
};

inline void validate_dataset(const Dataset& ds) {
  if (ds.samples.empty()) throw Error("dataset is empty");
  if (ds.n_stages < 1) throw Error("dataset n_stages must be >= 1");
  std::map<std::string, std::set<int>> stages_by_oil;
  for (const auto& s : ds.samples) {
    if (s.stage_index < 0 || s.stage_index >= ds.n_stages)
      throw Error("sample " + sample_key(s.oil_id, s.stage_index) + " stage outside [0, " +
                  std::to_string(ds.n_stages - 1) + "]");
    if (!stages_by_oil[s.oil_id].insert(s.stage_index).second)
      throw Error("duplicate sample " + sample_key(s.oil_id, s.stage_index));
  }
  if (stages_by_oil.size() != ds.oil_ids.size()) throw Error("oil_ids does not match samples");
  for (const auto& oil : ds.oil_ids) {
    auto it = stages_by_oil.find(oil);
    if (it == stages_by_oil.end()) throw Error("oil " + oil + " listed but has no samples");
    if (static_cast<int>(it->second.size()) != ds.n_stages)
      throw Error("oil " + oil + " has " + std::to_string(it->second.size()) + " stages, expected " +
                  std::to_string(ds.n_stages));
  }
}

// Leave-one-out fold: all stages of one oil held out for validation.
struct LOOFold {
  std::string held_out_oil;
  std::vector<std::size_t> train_sample_ids;  // indices into Dataset::samples
  std::vector<std::size_t> val_sample_ids;
};

// --- Canonical EEM CSV ------------------------------------------------------
//
// Header: em_nm,ex_300,ex_310,...,ex_640
// Then one row per emission wavelength: em value followed by 35 intensities.

inline EEMGrid parse_eem_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw ParseError("no header", 1, 1);
  ++line_no;
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "em_nm") throw ParseError("header must start with 'em_nm'", line_no, 1);

  EEMGrid grid;
  for (std::size_t c = 1; c < header.size(); ++c) {
    std::string_view cell = header[c];
    if (cell.substr(0, 3) != "ex_")
      throw ParseError("header column '" + std::string(cell) + "' must look like 'ex_<nm>'", line_no, c + 1);
    auto nm = parse_double(cell.substr(3));
    if (!nm) throw ParseError("non-numeric excitation wavelength in header", line_no, c + 1);
    grid.excitation_nm.push_back(*nm);
  }
  if (static_cast<int>(grid.excitation_nm.size()) != kExcitationCount)
    throw ParseError("header has " + std::to_string(grid.excitation_nm.size()) + " excitation columns, expected " +
                     std::to_string(kExcitationCount), line_no, header.size());

  std::vector<std::vector<double>> rows;
  rows.reserve(kEmissionCount);
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != grid.excitation_nm.size() + 1)
      throw ParseError("row has " + std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(grid.excitation_nm.size() + 1), line_no, cells.size());
    auto em = parse_double(cells[0]);
    if (!em) throw ParseError("non-numeric emission wavelength '" + std::string(cells[0]) + "'", line_no, 1);
    grid.emission_nm.push_back(*em);
    std::vector<double> values(grid.excitation_nm.size());
    for (std::size_t c = 1; c < cells.size(); ++c) {
      auto v = parse_double(cells[c]);
      if (!v) throw ParseError("non-numeric cell '" + std::string(cells[c]) + "'", line_no, c + 1);
      values[c - 1] = *v;
    }
    rows.push_back(std::move(values));
  }
  if (static_cast<int>(rows.size()) != kEmissionCount)
    throw ParseError("file has " + std::to_string(rows.size()) + " data rows, expected " +
                     std::to_string(kEmissionCount), line_no, 1);

  grid.intensity.resize(kExcitationCount, kEmissionCount);
  for (int j = 0; j < kEmissionCount; ++j)
    for (int i = 0; i < kExcitationCount; ++i)
      grid.intensity(i, j) = rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];

  try {
    validate_grid(grid);
  } catch (const Error& e) {
    throw ParseError(e.what(), line_no, 1);
  }
  return grid;
}

inline void write_eem_csv(const EEMGrid& grid, std::ostream& out) {
  validate_grid(grid);
  out << "em_nm";
  for (double ex : grid.excitation_nm) out << ",ex_" << format_double(ex);
  out << "\n";
  for (std::size_t j = 0; j < grid.emission_nm.size(); ++j) {
    out << format_double(grid.emission_nm[j]);
    for (std::size_t i = 0; i < grid.excitation_nm.size(); ++i)
      out << ',' << format_double(grid.intensity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    out << "\n";
  }
}

// --- Targets CSV -------------------------------------------------------------
//
// Header: oil_id,stage_index,day,k232,k264,k268,k272 (k264/k272 may be empty).

struct TargetRow {
  std::string oil_id;
  int stage_index = 0;
  double day = 0.0;
  QualityIndicators indicators;
};

inline std::vector<TargetRow> parse_targets_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("no header", 1, 1);
  ++line_no;
  auto header = split_csv_line(line);
  const std::vector<std::string_view> expected = {"oil_id", "stage_index", "day", "k232", "k264", "k268", "k272"};
  if (std::vector<std::string_view>(header.begin(), header.end()) != expected)
    throw ParseError("targets header must be 'oil_id,stage_index,day,k232,k264,k268,k272'", line_no, 1);

  std::vector<TargetRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != expected.size())
      throw ParseError("row has " + std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(expected.size()), line_no, cells.size());
    TargetRow row;
    row.oil_id = std::string(cells[0]);
    if (row.oil_id.empty()) throw ParseError("empty oil_id", line_no, 1);
    auto stage = parse_long(cells[1]);
    if (!stage || *stage < 0) throw ParseError("bad stage_index '" + std::string(cells[1]) + "'", line_no, 2);
    row.stage_index = static_cast<int>(*stage);
    auto day = parse_double(cells[2]);
    if (!day) throw ParseError("bad day '" + std::string(cells[2]) + "'", line_no, 3);
    row.day = *day;
    auto required = [&](std::size_t col) {
      auto v = parse_double(cells[col]);
      if (!v) throw ParseError("non-numeric cell '" + std::string(cells[col]) + "'", line_no, col + 1);
      return *v;
    };
    auto optional = [&](std::size_t col) -> std::optional<double> {
      if (cells[col].empty()) return std::nullopt;
      return required(col);
    };
    row.indicators.k232 = required(3);
    row.indicators.k264 = optional(4);
    row.indicators.k268 = required(5);
    row.indicators.k272 = optional(6);
    try {
      validate_indicators(row.indicators);
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no, 4);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_targets_csv(const std::vector<TargetRow>& rows, std::ostream& out) {
  out << "oil_id,stage_index,day,k232,k264,k268,k272\n";
  for (const auto& r : rows) {
    out << r.oil_id << ',' << r.stage_index << ',' << format_double(r.day) << ',' << format_double(r.indicators.k232)
        << ',' << (r.indicators.k264 ? format_double(*r.indicators.k264) : "") << ','
        << format_double(r.indicators.k268) << ',' << (r.indicators.k272 ? format_double(*r.indicators.k272) : "")
        << "\n";
  }
}

// --- Dataset assembly --------------------------------------------------------

// Joins one EEM file per (oil, stage) against the targets table. Orphans on
// either side are a hard error: with 240 samples a silent drop is catastrophic.
inline Dataset load_dataset(const std::filesystem::path& eem_directory, const std::filesystem::path& targets_table) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(eem_directory)) throw Error("EEM directory not found: " + eem_directory.string());
  std::ifstream targets_in(targets_table);
  if (!targets_in) throw Error("cannot open targets table: " + targets_table.string());
  std::vector<TargetRow> target_rows;
  try {
    target_rows = parse_targets_csv(targets_in);
  } catch (const ParseError& e) {
    throw ParseError(targets_table.string() + ": " + e.what(), e.line(), e.column());
  }

  std::map<std::pair<std::string, int>, TargetRow> targets_by_key;
  for (auto& row : target_rows) {
    auto key = std::make_pair(row.oil_id, row.stage_index);
    if (!targets_by_key.emplace(key, std::move(row)).second)
      throw Error("duplicate target row for " + sample_key(key.first, key.second));
  }

  // File naming convention: <oil_id>_stage<stage_index>.csv. The targets
  // table itself may live in the same directory; it is not an EEM file.
  std::error_code targets_ec;
  const fs::path targets_canonical = fs::weakly_canonical(targets_table, targets_ec);
  std::map<std::pair<std::string, int>, fs::path> files_by_key;
  std::vector<std::string> unmatched_files;
  for (const auto& entry : fs::directory_iterator(eem_directory)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    std::error_code entry_ec;
    if (!targets_ec && fs::weakly_canonical(entry.path(), entry_ec) == targets_canonical) continue;
    std::string stem = entry.path().stem().string();
    std::size_t marker = stem.rfind("_stage");
    std::optional<long> stage;
    if (marker != std::string::npos && marker > 0) stage = parse_long(std::string_view(stem).substr(marker + 6));
    if (!stage || *stage < 0) {
      unmatched_files.push_back(entry.path().filename().string());
      continue;
    }
    auto key = std::make_pair(stem.substr(0, marker), static_cast<int>(*stage));
    if (!files_by_key.emplace(key, entry.path()).second)
      throw Error("duplicate EEM file for " + sample_key(key.first, key.second));
  }
  if (!unmatched_files.empty()) {
    std::sort(unmatched_files.begin(), unmatched_files.end());
    throw Error("files not matching '<oil_id>_stage<stage_index>.csv': " + unmatched_files.front() +
                (unmatched_files.size() > 1 ? " (+" + std::to_string(unmatched_files.size() - 1) + " more)" : ""));
  }
  if (files_by_key.empty()) throw Error("no EEM files in " + eem_directory.string());

  std::vector<std::string> orphans;
  for (const auto& [key, path] : files_by_key)
    if (!targets_by_key.count(key)) orphans.push_back("EEM file without target row: " + path.filename().string());
  for (const auto& [key, row] : targets_by_key)
    if (!files_by_key.count(key)) orphans.push_back("target row without EEM file: " + sample_key(key.first, key.second));
  if (!orphans.empty()) {
    std::sort(orphans.begin(), orphans.end());
    std::string msg = "join failed, " + std::to_string(orphans.size()) + " orphan(s):";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw JoinError(msg);
  }

  Dataset ds;
  for (const auto& [key, path] : files_by_key) {  // std::map: already (oil_id, stage) ordered
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    OilSample sample;
    try {
      sample.eem = parse_eem_csv(in);
    } catch (const ParseError& e) {
      throw ParseError(path.filename().string() + ": " + e.what(), e.line(), e.column());
    }
    const TargetRow& row = targets_by_key.at(key);
    sample.oil_id = key.first;
    sample.stage_index = key.second;
    sample.day = row.day;
    sample.targets = row.indicators;
    ds.samples.push_back(std::move(sample));
  }
  std::set<int> stages;
  std::set<std::string> oils;
  for (const auto& s : ds.samples) {
    stages.insert(s.stage_index);
    oils.insert(s.oil_id);
  }
  ds.oil_ids.assign(oils.begin(), oils.end());
  ds.n_stages = *stages.rbegin() + 1;
  validate_dataset(ds);
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  std::vector<TargetRow> rows;
  for (const auto& s : ds.samples) {
    std::ofstream out(directory / eem_filename(s.oil_id, s.stage_index));
    if (!out) throw Error("cannot write EEM file for " + sample_key(s.oil_id, s.stage_index));
    write_eem_csv(s.eem, out);
    rows.push_back(TargetRow{s.oil_id, s.stage_index, s.day, s.targets});
  }
  std::ofstream out(directory / "targets.csv");
  if (!out) throw Error("cannot write targets.csv");
  write_targets_csv(rows, out);
}

// One fold per oil, ordered by oil_id; the fold's validation set is exactly
// the held-out oil's stages, so folds partition the dataset.
inline std::vector<LOOFold> make_loo_folds(const Dataset& ds) {
  validate_dataset(ds);
  if (ds.oil_ids.size() < 2) throw Error("leave-one-out needs at least 2 oils, got " + std::to_string(ds.oil_ids.size()));
  std::vector<LOOFold> folds;
  folds.reserve(ds.oil_ids.size());
  for (const auto& oil : ds.oil_ids) {
    LOOFold fold;
    fold.held_out_oil = oil;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      if (ds.samples[i].oil_id == oil)
        fold.val_sample_ids.push_back(i);
      else
        fold.train_sample_ids.push_back(i);
    }
    folds.push_back(std::move(fold));
  }
  return folds;
}

}  // namespace eemkit
