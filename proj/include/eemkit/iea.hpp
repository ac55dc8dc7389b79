#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eemkit/common.hpp"
#include "eemkit/eemio.hpp"
#include "eemkit/model.hpp"
#include "eemkit/preprocess.hpp"

namespace eemkit {

inline constexpr int kOcclusionTileSize = 5;
inline constexpr int kOcclusionStride = 5;

// Per-tile change in absolute error when that tile is blanked out.
// Signed values are stored; the positive part is applied only when
// aggregating into band importances.
struct OcclusionMap {
  Eigen::MatrixXd tile_dae;  // (rows = excitation tiles, cols = emission tiles)
  int tile_size = kOcclusionTileSize;
  int stride = kOcclusionStride;
  std::uint8_t fill = 0;
  double baseline_prediction = 0.0;
  double baseline_ae = 0.0;
  double true_value = 0.0;
  Target target = Target::k232;
  std::string sample_label;
  AxisMapping excitation_mapping_;
  AxisMapping emission_mapping_;
};

inline int occlusion_grid_size(int stride) {
  if (stride < 1 || kImageSize % stride != 0)
    throw Error("stride " + std::to_string(stride) + " must divide the image size " + std::to_string(kImageSize));
  return kImageSize / stride;
}

// Occluded evaluations are independent, so any evaluation order produces the
// same map; the order parameter exists to assert exactly that.
inline OcclusionMap occlusion_sweep_ordered(const Predictor& model, const PreprocessedImage& image, double true_value,
                                            Target target, std::uint8_t fill, int tile_size, int stride,
                                            const std::vector<std::size_t>& order) {
  validate_image(image);
  if (tile_size < 1) throw Error("tile_size must be >= 1");
  const int n = occlusion_grid_size(stride);
  if (order.size() != static_cast<std::size_t>(n) * n) throw Error("evaluation order must cover every tile once");

  OcclusionMap map;
  map.tile_size = tile_size;
  map.stride = stride;
  map.fill = fill;
  map.true_value = true_value;
  map.target = target;
  map.sample_label = image.sample_label();
  map.excitation_mapping_ = excitation_mapping();
  map.emission_mapping_ = emission_mapping();
  map.baseline_prediction = model.predict(image);
  map.baseline_ae = std::abs(map.baseline_prediction - true_value);
  map.tile_dae.setZero(n, n);

  std::vector<bool> seen(static_cast<std::size_t>(n) * n, false);
  PreprocessedImage occluded = image;
  for (std::size_t flat : order) {
    if (flat >= seen.size() || seen[flat]) throw Error("evaluation order must cover every tile once");
    seen[flat] = true;
    const int r = static_cast<int>(flat) / n;
    const int c = static_cast<int>(flat) % n;
    const int y0 = r * stride, x0 = c * stride;
    const int y1 = std::min(y0 + tile_size, kImageSize);
    const int x1 = std::min(x0 + tile_size, kImageSize);
    occluded.pixels = image.pixels;
    for (int ch = 0; ch < kImageChannels; ++ch)
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) occluded.at(ch, y, x) = fill;
    const double pred = model.predict(occluded);
    map.tile_dae(r, c) = std::abs(pred - true_value) - map.baseline_ae;
  }
  return map;
}

// Row-major sweep: top-left tile first, across each row, then down.
inline OcclusionMap occlusion_sweep(const Predictor& model, const PreprocessedImage& image, double true_value,
                                    Target target, std::uint8_t fill = 0, int tile_size = kOcclusionTileSize,
                                    int stride = kOcclusionStride) {
  const int n = occlusion_grid_size(stride);
  std::vector<std::size_t> order(static_cast<std::size_t>(n) * n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return occlusion_sweep_ordered(model, image, true_value, target, fill, tile_size, stride, order);
}

// --- Gaussian smoothing (rendering only) --------------------------------------

// Separable Gaussian, kernel truncated at 4*sigma, normalized, symmetric
// border reflection (edge pixel included). Preserves constants exactly up to
// rounding.
inline Eigen::MatrixXd gaussian_smooth(const Eigen::MatrixXd& in, double sigma) {
  if (!(sigma > 0.0)) throw Error("sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double w = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : kernel) w /= sum;

  auto reflect = [](Eigen::Index idx, Eigen::Index size) {
    if (idx < 0) idx = -idx - 1;
    if (idx >= size) idx = 2 * size - 1 - idx;
    return idx;
  };

  const Eigen::Index rows = in.rows(), cols = in.cols();
  Eigen::MatrixXd tmp(rows, cols), out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] * in(r, reflect(c + k, cols));
      tmp(r, c) = acc;
    }
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] * tmp(reflect(r + k, rows), c);
      out(r, c) = acc;
    }
  return out;
}

// Expands tile values onto their 5x5 pixel footprints and smooths the dense
// map for display. Never feeds band_importance.
inline Eigen::MatrixXd smooth_map(const OcclusionMap& map, double sigma = 3.0) {
  if (map.tile_size != map.stride)
    throw Error("smoothing is defined for non-overlapping sweeps (tile_size == stride)");
  Eigen::MatrixXd dense(kImageSize, kImageSize);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) dense(y, x) = map.tile_dae(y / map.stride, x / map.stride);
  return gaussian_smooth(dense, sigma);
}

// --- Band importance ------------------------------------------------------------

struct BandBar {
  int pixel_lo = 0;  // inclusive
  int pixel_hi = 0;  // inclusive
  double band_lo_nm = 0.0;
  double band_hi_nm = 0.0;
  double importance = 0.0;  // sum of positive delta-AE, >= 0
};

struct BandImportance {
  Axis axis = Axis::emission;
  std::vector<BandBar> bars;
};

// Top barplot: one bar per emission (column) band, height = sum of AE
// increases in the tiles below it. Side barplot: same per excitation (row)
// band. Negative delta-AE never contributes.
inline std::pair<BandImportance, BandImportance> band_importance(const OcclusionMap& map) {
  if (map.tile_size != map.stride) throw Error("band importance is defined for non-overlapping sweeps");
  const int n = static_cast<int>(map.tile_dae.rows());
  Eigen::MatrixXd positive = map.tile_dae.cwiseMax(0.0);

  auto make_bars = [&](Axis axis, const AxisMapping& mapping, bool columns) {
    BandImportance result;
    result.axis = axis;
    for (int t = 0; t < n; ++t) {
      BandBar bar;
      bar.pixel_lo = t * map.stride;
      bar.pixel_hi = std::min(bar.pixel_lo + map.tile_size, kImageSize) - 1;
      bar.band_lo_nm = pixel_to_band(mapping, bar.pixel_lo).first;
      bar.band_hi_nm = pixel_to_band(mapping, bar.pixel_hi).second;
      bar.importance = columns ? positive.col(t).sum() : positive.row(t).sum();
      result.bars.push_back(bar);
    }
    return result;
  };

  BandImportance top = make_bars(Axis::emission, map.emission_mapping_, /*columns=*/true);
  BandImportance side = make_bars(Axis::excitation, map.excitation_mapping_, /*columns=*/false);
  return {top, side};
}

// Element-wise mean across oils (the averaged last-stage heatmap).
inline OcclusionMap average_maps(const std::vector<OcclusionMap>& maps, const std::string& group_label) {
  if (maps.empty()) throw Error("cannot average zero maps");
  const OcclusionMap& first = maps.front();
  OcclusionMap out = first;
  out.sample_label = group_label;
  out.tile_dae.setZero(first.tile_dae.rows(), first.tile_dae.cols());
  out.baseline_prediction = 0.0;
  out.baseline_ae = 0.0;
  out.true_value = 0.0;
  for (const auto& m : maps) {
    if (m.target != first.target) throw Error("cannot average maps with mixed targets");
    if (m.tile_size != first.tile_size || m.stride != first.stride ||
        m.tile_dae.rows() != first.tile_dae.rows() || m.tile_dae.cols() != first.tile_dae.cols())
      throw Error("cannot average maps with mixed tile geometry");
    if (m.excitation_mapping_.lambda_min != first.excitation_mapping_.lambda_min ||
        m.excitation_mapping_.lambda_max != first.excitation_mapping_.lambda_max ||
        m.emission_mapping_.lambda_min != first.emission_mapping_.lambda_min ||
        m.emission_mapping_.lambda_max != first.emission_mapping_.lambda_max)
      throw Error("cannot average maps with mixed axis mappings");
    out.tile_dae += m.tile_dae;
    out.baseline_prediction += m.baseline_prediction;
    out.baseline_ae += m.baseline_ae;
    out.true_value += m.true_value;
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  out.tile_dae *= inv;
  out.baseline_prediction *= inv;
  out.baseline_ae *= inv;
  out.true_value *= inv;
  return out;
}

// --- Spectral cuts ---------------------------------------------------------------

struct SpectralCut {
  double requested_ex_nm = 0.0;
  double actual_ex_nm = 0.0;
  std::vector<double> emission_nm;
  std::vector<double> intensity;
};

// Emission spectrum at the nearest sampled excitation wavelength; distance
// ties break to the lower wavelength.
inline SpectralCut spectral_cut(const EEMGrid& grid, double excitation_nm) {
  validate_grid(grid);
  if (excitation_nm < grid.excitation_nm.front() - kAxisTolNm ||
      excitation_nm > grid.excitation_nm.back() + kAxisTolNm)
    throw Error("excitation " + format_double(excitation_nm) + " nm outside [" +
                format_double(grid.excitation_nm.front()) + ", " + format_double(grid.excitation_nm.back()) + "]");
  std::size_t best = 0;
  double best_dist = std::abs(grid.excitation_nm[0] - excitation_nm);
  for (std::size_t i = 1; i < grid.excitation_nm.size(); ++i) {
    double d = std::abs(grid.excitation_nm[i] - excitation_nm);
    if (d < best_dist - kAxisTolNm) {  // strict improvement only: ties keep the lower wavelength
      best = i;
      best_dist = d;
    }
  }
  SpectralCut cut;
  cut.requested_ex_nm = excitation_nm;
  cut.actual_ex_nm = grid.excitation_nm[best];
  cut.emission_nm = grid.emission_nm;
  cut.intensity.resize(grid.emission_nm.size());
  for (std::size_t j = 0; j < cut.intensity.size(); ++j)
    cut.intensity[j] = grid.intensity(static_cast<Eigen::Index>(best), static_cast<Eigen::Index>(j));
  return cut;
}

// --- Files ------------------------------------------------------------------------

inline void write_occlusion_map(const OcclusionMap& map, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw Error("cannot write " + csv_path.string());
  for (Eigen::Index r = 0; r < map.tile_dae.rows(); ++r) {
    for (Eigen::Index c = 0; c < map.tile_dae.cols(); ++c) {
      if (c > 0) out << ',';
      out << format_double(map.tile_dae(r, c));
    }
    out << "\n";
  }

  std::filesystem::path manifest_path = csv_path;
  manifest_path.replace_extension(".manifest.txt");
  std::ofstream manifest(manifest_path);
  if (!manifest) throw Error("cannot write " + manifest_path.string());
  manifest << "sample = " << map.sample_label << "\n"
           << "target = " << to_string(map.target) << "\n"
           << "baseline_prediction = " << format_double(map.baseline_prediction) << "\n"
           << "baseline_ae = " << format_double(map.baseline_ae) << "\n"
           << "true_value = " << format_double(map.true_value) << "\n"
           << "fill = " << static_cast<int>(map.fill) << "\n"
           << "tile_size = " << map.tile_size << "\n"
           << "stride = " << map.stride << "\n"
           << "excitation_band_nm = [" << format_double(map.excitation_mapping_.lambda_min) << ", "
           << format_double(map.excitation_mapping_.lambda_max) << "]\n"
           << "emission_band_nm = [" << format_double(map.emission_mapping_.lambda_min) << ", "
           << format_double(map.emission_mapping_.lambda_max) << "]\n"
           << "rows = excitation tiles, columns = emission tiles\n";
}

// Restores a map written by write_occlusion_map (matrix CSV + manifest sidecar).
inline OcclusionMap read_occlusion_map(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw Error("cannot open " + csv_path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    std::vector<double> row;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      auto v = parse_double(cells[c]);
      if (!v) throw ParseError("non-numeric cell '" + std::string(cells[c]) + "'", line_no, c + 1);
      row.push_back(*v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError("ragged row", line_no, row.size());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("empty occlusion map", 1, 1);

  OcclusionMap map;
  map.tile_dae.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      map.tile_dae(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  map.excitation_mapping_ = excitation_mapping();
  map.emission_mapping_ = emission_mapping();

  std::filesystem::path manifest_path = csv_path;
  manifest_path.replace_extension(".manifest.txt");
  std::ifstream manifest(manifest_path);
  if (manifest) {
    while (std::getline(manifest, line)) {
      auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      std::string key(trim(line.substr(0, eq)));
      std::string value(trim(line.substr(eq + 3)));
      if (key == "sample") map.sample_label = value;
      else if (key == "target") map.target = target_from_string(value);
      else if (key == "baseline_prediction") map.baseline_prediction = parse_double(value).value_or(0.0);
      else if (key == "baseline_ae") map.baseline_ae = parse_double(value).value_or(0.0);
      else if (key == "true_value") map.true_value = parse_double(value).value_or(0.0);
      else if (key == "fill") map.fill = static_cast<std::uint8_t>(parse_long(value).value_or(0));
      else if (key == "tile_size") map.tile_size = static_cast<int>(parse_long(value).value_or(kOcclusionTileSize));
      else if (key == "stride") map.stride = static_cast<int>(parse_long(value).value_or(kOcclusionStride));
    }
  }
  return map;
}

inline void write_band_importance(const BandImportance& top, const BandImportance& side,
                                  const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw Error("cannot write " + csv_path.string());
  out << "axis,pixel_lo,pixel_hi,band_lo_nm,band_hi_nm,importance\n";
  for (const auto* bands : {&top, &side})
    for (const auto& bar : bands->bars)
      out << to_string(bands->axis) << ',' << bar.pixel_lo << ',' << bar.pixel_hi << ','
          << format_double(bar.band_lo_nm) << ',' << format_double(bar.band_hi_nm) << ','
          << format_double(bar.importance) << "\n";
}

}  // namespace eemkit
