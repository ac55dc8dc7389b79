#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "eemkit/common.hpp"
#include "eemkit/eemio.hpp"
#include "eemkit/iea.hpp"

namespace eemkit {

struct EvalRow {
  std::string oil_id;
  int stage_index = 0;
  Target target = Target::k232;
  double true_value = 0.0;
  double prediction = 0.0;
  double ae = 0.0;  // |prediction - true_value|
};

struct EvalReport {
  Target target = Target::k232;
  std::vector<EvalRow> rows;  // sorted by (oil_id, stage_index)
  std::map<std::string, double> per_oil_mae;
  double global_mae = 0.0;
  std::string plan_digest;
  std::uint64_t seed_base = 0;
  std::vector<std::string> failed_folds;
  bool complete = true;
};

inline EvalReport compute_metrics(std::vector<EvalRow> rows, std::string plan_digest = "", std::uint64_t seed_base = 0) {
  if (rows.empty()) throw Error("cannot compute metrics on zero rows");
  const Target target = rows.front().target;
  for (auto& r : rows) {
    if (r.target != target) throw Error("mixed targets in one report");
    r.ae = std::abs(r.prediction - r.true_value);
  }
  std::sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
    return std::tie(a.oil_id, a.stage_index) < std::tie(b.oil_id, b.stage_index);
  });

  EvalReport report;
  report.target = target;
  report.plan_digest = std::move(plan_digest);
  report.seed_base = seed_base;
  std::map<std::string, std::pair<double, int>> acc;
  double total = 0.0;
  for (const auto& r : rows) {
    auto& [sum, count] = acc[r.oil_id];
    sum += r.ae;
    ++count;
    total += r.ae;
  }
  for (const auto& [oil, sc] : acc) report.per_oil_mae[oil] = sc.first / sc.second;
  report.global_mae = total / static_cast<double>(rows.size());
  report.rows = std::move(rows);
  return report;
}

inline void write_report_csv(const EvalReport& report, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw Error("cannot write " + csv_path.string());
  out << "oil_id,stage_index,target,true_value,prediction,ae\n";
  for (const auto& r : report.rows)
    out << r.oil_id << ',' << r.stage_index << ',' << to_string(r.target) << ',' << format_double(r.true_value) << ','
        << format_double(r.prediction) << ',' << format_double(r.ae) << "\n";
}

inline EvalReport read_report_csv(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw Error("cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("no header", 1, 1);
  if (trim(line) != "oil_id,stage_index,target,true_value,prediction,ae")
    throw ParseError("unexpected report header", 1, 1);
  std::vector<EvalRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 6) throw ParseError("row has " + std::to_string(cells.size()) + " cells, expected 6", line_no, 1);
    EvalRow row;
    row.oil_id = std::string(cells[0]);
    auto stage = parse_long(cells[1]);
    auto tv = parse_double(cells[3]);
    auto pred = parse_double(cells[4]);
    if (!stage || !tv || !pred) throw ParseError("non-numeric cell", line_no, 2);
    row.stage_index = static_cast<int>(*stage);
    row.target = target_from_string(std::string(cells[2]));
    row.true_value = *tv;
    row.prediction = *pred;
    rows.push_back(std::move(row));
  }
  return compute_metrics(std::move(rows));
}

// Display-only thresholds; the regulatory limit and the experimental-error
// line are configuration inputs, not constants.
struct FigureConfig {
  std::optional<double> regulatory_limit;
  std::optional<double> experimental_error_3sigma;
  std::vector<double> cut_excitation_nm;  // empty: cut at the most important excitation band
  std::string run_digest;
};

namespace detail {

inline void figure_manifest(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << "\n";
}

inline void write_dense_matrix_csv(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c > 0) out << ',';
      out << format_double(m(r, c));
    }
    out << "\n";
  }
}

}  // namespace detail

// Emits machine-readable figure data under <out_root>/figures/<target>/.
// (a) per-oil prediction curves with AE, (b) predicted-vs-actual scatter,
// (c) per-oil AE samples for violins, (d) averaged heatmap + band bars,
// (e) heatmap-over-EEM overlays with spectral cuts. (d)/(e) need maps (and
// (e) the source EEMs); they are skipped with a notice otherwise.
inline std::vector<std::filesystem::path> emit_figures(const EvalReport& report, const std::filesystem::path& out_root,
                                                       const FigureConfig& config = {},
                                                       const std::vector<OcclusionMap>* maps = nullptr,
                                                       const Dataset* eems = nullptr, const WarnFn& warn = {}) {
  namespace fs = std::filesystem;
  const fs::path dir = out_root / "figures" / to_string(report.target);
  fs::create_directories(dir);
  std::vector<fs::path> written;

  auto common_lines = [&](const std::string& name) {
    std::vector<std::string> lines;
    lines.push_back("figure = " + name);
    lines.push_back("target = " + to_string(report.target));
    if (!config.run_digest.empty()) lines.push_back("config_digest = " + config.run_digest);
    if (!report.plan_digest.empty()) lines.push_back("plan_digest = " + report.plan_digest);
    return lines;
  };

  {  // (a) true vs predicted per oil, with AE
    fs::path csv = dir / "fig2_curves.csv";
    std::ofstream out(csv);
    if (!out) throw Error("cannot write " + csv.string());
    out << "oil_id,stage_index,true_value,prediction,ae\n";
    for (const auto& r : report.rows)
      out << r.oil_id << ',' << r.stage_index << ',' << format_double(r.true_value) << ','
          << format_double(r.prediction) << ',' << format_double(r.ae) << "\n";
    auto lines = common_lines("per-oil true/predicted curves with AE band");
    for (const auto& [oil, mae] : report.per_oil_mae) lines.push_back("mae." + oil + " = " + format_double(mae));
    lines.push_back("mae.global = " + format_double(report.global_mae));
    detail::figure_manifest(dir / "fig2_curves.manifest.txt", lines);
    written.push_back(csv);
  }

  {  // (b) predicted vs actual scatter
    fs::path csv = dir / "fig3a_scatter.csv";
    std::ofstream out(csv);
    if (!out) throw Error("cannot write " + csv.string());
    out << "oil_id,stage_index,actual,predicted\n";
    for (const auto& r : report.rows)
      out << r.oil_id << ',' << r.stage_index << ',' << format_double(r.true_value) << ','
          << format_double(r.prediction) << "\n";
    auto lines = common_lines("predicted vs actual scatter");
    lines.push_back("regulatory_limit = " +
                    (config.regulatory_limit ? format_double(*config.regulatory_limit) : std::string("unset")));
    detail::figure_manifest(dir / "fig3a_scatter.manifest.txt", lines);
    written.push_back(csv);
  }

  {  // (c) raw AE samples per oil (violin rendering is a plotting detail)
    fs::path csv = dir / "fig3b_violin.csv";
    std::ofstream out(csv);
    if (!out) throw Error("cannot write " + csv.string());
    out << "oil_id,ae\n";
    for (const auto& r : report.rows) out << r.oil_id << ',' << format_double(r.ae) << "\n";
    auto lines = common_lines("per-oil AE distributions");
    lines.push_back("experimental_error_3sigma = " +
                    (config.experimental_error_3sigma ? format_double(*config.experimental_error_3sigma)
                                                      : std::string("unset")));
    detail::figure_manifest(dir / "fig3b_violin.manifest.txt", lines);
    written.push_back(csv);
  }

  if (maps == nullptr || maps->empty()) {
    emit_warning(warn, "fig4/fig5 skipped: no occlusion maps supplied");
    return written;
  }

  {  // (d) averaged heatmap + band bars
    OcclusionMap averaged = maps->size() == 1 ? maps->front() : average_maps(*maps, "average");
    fs::path csv = dir / "fig4_heatmap.csv";
    detail::write_dense_matrix_csv(averaged.tile_dae, csv);
    written.push_back(csv);
    auto [top, side] = band_importance(averaged);
    write_band_importance(top, side, dir / "fig4_bands.csv");
    written.push_back(dir / "fig4_bands.csv");
    auto lines = common_lines("averaged occlusion heatmap with band importances");
    lines.push_back("maps_averaged = " + std::to_string(maps->size()));
    lines.push_back("smoothing = rendering only; bands computed from raw tiles");
    detail::figure_manifest(dir / "fig4_heatmap.manifest.txt", lines);
  }

  if (eems == nullptr) {
    emit_warning(warn, "fig5 skipped: no EEM dataset supplied");
    return written;
  }

  {  // (e) overlays: smoothed heatmap over the source EEM plus spectral cuts
    int emitted = 0;
    for (const auto& map : *maps) {
      const OilSample* sample = nullptr;
      for (const auto& s : eems->samples)
        if (s.oil_id + "_stage" + std::to_string(s.stage_index) == map.sample_label) sample = &s;
      if (sample == nullptr) continue;
      const std::string base = "fig5_overlay_" + map.sample_label;
      detail::write_dense_matrix_csv(smooth_map(map), dir / (base + "_heatmap.csv"));
      written.push_back(dir / (base + "_heatmap.csv"));
      {
        std::ofstream out(dir / (base + "_eem.csv"));
        if (!out) throw Error("cannot write overlay EEM");
        write_eem_csv(sample->eem, out);
        written.push_back(dir / (base + "_eem.csv"));
      }
      std::vector<double> cuts = config.cut_excitation_nm;
      if (cuts.empty()) {
        auto [top, side] = band_importance(map);
        const auto most = std::max_element(side.bars.begin(), side.bars.end(),
                                           [](const BandBar& a, const BandBar& b) { return a.importance < b.importance; });
        cuts.push_back((most->band_lo_nm + most->band_hi_nm) / 2.0);
      }
      std::ofstream out(dir / (base + "_cuts.csv"));
      if (!out) throw Error("cannot write overlay cuts");
      out << "requested_ex_nm,actual_ex_nm,emission_nm,intensity\n";
      for (double nm : cuts) {
        SpectralCut cut = spectral_cut(sample->eem, nm);
        for (std::size_t j = 0; j < cut.emission_nm.size(); ++j)
          out << format_double(cut.requested_ex_nm) << ',' << format_double(cut.actual_ex_nm) << ','
              << format_double(cut.emission_nm[j]) << ',' << format_double(cut.intensity[j]) << "\n";
      }
      written.push_back(dir / (base + "_cuts.csv"));
      auto lines = common_lines("heatmap-over-EEM overlay with spectral cuts");
      lines.push_back("sample = " + map.sample_label);
      lines.push_back("smoothing_sigma_px = 3");
      lines.push_back("contour_quantiles = 0.5,0.75,0.9");
      lines.push_back("heatmap = signed delta-AE, smoothed without clipping negatives");
      detail::figure_manifest(dir / (base + ".manifest.txt"), lines);
      ++emitted;
    }
    if (emitted == 0) emit_warning(warn, "fig5 skipped: no map matched a sample in the dataset");
  }
  return written;
}

}  // namespace eemkit
