#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "eemkit/common.hpp"
#include "eemkit/eemio.hpp"

namespace eemkit {

inline constexpr int kImageSize = 160;
inline constexpr int kImageChannels = 3;
inline constexpr double kNormalizationCounts = 1000.0;

enum class RayleighMode { keep, zero, interpolate };

inline std::string to_string(RayleighMode mode) {
  switch (mode) {
    case RayleighMode::keep: return "keep";
    case RayleighMode::zero: return "zero";
    case RayleighMode::interpolate: return "interpolate";
  }
  return "keep";
}

inline RayleighMode rayleigh_mode_from_string(const std::string& name) {
  if (name == "keep") return RayleighMode::keep;
  if (name == "zero") return RayleighMode::zero;
  if (name == "interpolate") return RayleighMode::interpolate;
  throw Error("unknown rayleigh mode '" + name + "' (expected keep|zero|interpolate)");
}

// Model input: 160x160, three identical channels, unsigned 8-bit.
// Stored planar (channel-major).
struct PreprocessedImage {
  std::vector<std::uint8_t> pixels;  // kImageChannels * kImageSize * kImageSize
  std::string oil_id;
  int stage_index = 0;
  RayleighMode rayleigh_mode = RayleighMode::keep;

  std::uint8_t at(int channel, int y, int x) const {
    return pixels[static_cast<std::size_t>((channel * kImageSize + y) * kImageSize + x)];
  }
  std::uint8_t& at(int channel, int y, int x) {
    return pixels[static_cast<std::size_t>((channel * kImageSize + y) * kImageSize + x)];
  }
  std::string sample_label() const { return sample_key(oil_id, stage_index); }
};

inline bool channels_identical(const PreprocessedImage& img) {
  const std::size_t plane = static_cast<std::size_t>(kImageSize) * kImageSize;
  for (int c = 1; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (img.pixels[i] != img.pixels[static_cast<std::size_t>(c) * plane + i]) return false;
  return true;
}

inline void validate_image(const PreprocessedImage& img) {
  if (img.pixels.size() != static_cast<std::size_t>(kImageChannels) * kImageSize * kImageSize)
    throw Error("image buffer has " + std::to_string(img.pixels.size()) + " bytes, expected " +
                std::to_string(kImageChannels * kImageSize * kImageSize));
  if (!channels_identical(img)) throw Error("image channels differ");
}

enum class Axis { excitation, emission };

inline std::string to_string(Axis axis) { return axis == Axis::excitation ? "excitation" : "emission"; }

// Pixel <-> wavelength relation for one image axis: n_pixels bands tile
// [lambda_min, lambda_max] exactly.
struct AxisMapping {
  Axis axis = Axis::excitation;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  int n_pixels = kImageSize;

  double pixel_width_nm() const { return (lambda_max - lambda_min) / n_pixels; }
};

inline void validate_mapping(const AxisMapping& m) {
  if (!(m.lambda_min < m.lambda_max)) throw Error("axis mapping needs lambda_min < lambda_max");
  if (m.n_pixels < 1) throw Error("axis mapping needs n_pixels >= 1");
}

// The sampled excitation span is 340 nm, so one pixel is 340/160 = 2.125 nm
// (the rounded 2.2 nm/pixel figure is not used).
inline AxisMapping excitation_mapping() { return AxisMapping{Axis::excitation, kExcitationMinNm, kExcitationMaxNm, kImageSize}; }
inline AxisMapping emission_mapping() { return AxisMapping{Axis::emission, kEmissionMinNm, kEmissionMaxNm, kImageSize}; }

inline std::pair<double, double> pixel_to_band(const AxisMapping& mapping, int pixel) {
  validate_mapping(mapping);
  if (pixel < 0 || pixel >= mapping.n_pixels)
    throw Error("pixel " + std::to_string(pixel) + " outside [0, " + std::to_string(mapping.n_pixels - 1) + "]");
  double w = mapping.pixel_width_nm();
  double lo = mapping.lambda_min + pixel * w;
  return {lo, lo + w};
}

// Counts -> unitless [0, 1]. Values past the 1000-count scale are saturated
// detector readings; they are clamped, not rejected.
inline Eigen::MatrixXd normalize(const EEMGrid& grid, const WarnFn& warn = {}) {
  validate_grid(grid);
  Eigen::MatrixXd out = grid.intensity / kNormalizationCounts;
  int clamped = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (out(i, j) > 1.0) {
        out(i, j) = 1.0;
        ++clamped;
      }
  if (clamped > 0)
    emit_warning(warn, std::to_string(clamped) + " saturated pixel(s) above " + format_double(kNormalizationCounts) +
                           " counts clamped to 1");
  return out;
}

// Remove the lambda_em == lambda_ex scattering ridge. zero: blank the band.
// interpolate: straight line along the emission axis between the band edges;
// a band with one edge off-grid takes the available edge value, a band
// covering the whole row falls back to zero.
inline EEMGrid mask_rayleigh(const EEMGrid& grid, RayleighMode mode, double half_width_nm = 10.0,
                             const WarnFn& warn = {}) {
  validate_grid(grid);
  if (mode == RayleighMode::keep) return grid;
  if (half_width_nm < 0.0) throw Error("half_width_nm must be >= 0");

  EEMGrid out = grid;
  const auto& em = grid.emission_nm;
  for (std::size_t i = 0; i < grid.excitation_nm.size(); ++i) {
    double ex = grid.excitation_nm[i];
    std::ptrdiff_t band_lo = -1, band_hi = -1;  // inclusive emission index range
    for (std::size_t j = 0; j < em.size(); ++j) {
      if (std::abs(em[j] - ex) <= half_width_nm + kAxisTolNm) {
        if (band_lo < 0) band_lo = static_cast<std::ptrdiff_t>(j);
        band_hi = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (band_lo < 0) continue;

    auto row = out.intensity.row(static_cast<Eigen::Index>(i));
    if (mode == RayleighMode::zero) {
      for (std::ptrdiff_t j = band_lo; j <= band_hi; ++j) row(static_cast<Eigen::Index>(j)) = 0.0;
      continue;
    }

    std::ptrdiff_t left = band_lo - 1;
    std::ptrdiff_t right = band_hi + 1;
    bool has_left = left >= 0;
    bool has_right = right < static_cast<std::ptrdiff_t>(em.size());
    if (!has_left && !has_right) {
      for (std::ptrdiff_t j = band_lo; j <= band_hi; ++j) row(static_cast<Eigen::Index>(j)) = 0.0;
      emit_warning(warn, "rayleigh band covers the whole emission row at ex=" + format_double(ex) +
                             " nm; zeroed instead of interpolating");
      continue;
    }
    double vl = has_left ? row(static_cast<Eigen::Index>(left)) : row(static_cast<Eigen::Index>(right));
    double vr = has_right ? row(static_cast<Eigen::Index>(right)) : row(static_cast<Eigen::Index>(left));
    double xl = has_left ? em[static_cast<std::size_t>(left)] : em[static_cast<std::size_t>(band_lo)];
    double xr = has_right ? em[static_cast<std::size_t>(right)] : em[static_cast<std::size_t>(band_hi)];
    for (std::ptrdiff_t j = band_lo; j <= band_hi; ++j) {
      double t = (xr > xl) ? (em[static_cast<std::size_t>(j)] - xl) / (xr - xl) : 0.0;
      row(static_cast<Eigen::Index>(j)) = vl + t * (vr - vl);
    }
  }
  return out;
}

// Align-corners bilinear interpolation on a uniform grid: output corners map
// onto input corners, so functions linear in the source indices are
// reproduced exactly.
inline Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& in, int out_rows, int out_cols) {
  const Eigen::Index in_rows = in.rows(), in_cols = in.cols();
  if (in_rows < 2 || in_cols < 2) throw Error("resize needs at least a 2x2 input");
  if (out_rows < 2 || out_cols < 2) throw Error("resize needs at least a 2x2 output");
  Eigen::MatrixXd out(out_rows, out_cols);
  const double row_scale = static_cast<double>(in_rows - 1) / (out_rows - 1);
  const double col_scale = static_cast<double>(in_cols - 1) / (out_cols - 1);
  for (int r = 0; r < out_rows; ++r) {
    double u = r * row_scale;
    Eigen::Index r0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(u), in_rows - 2);
    // clamped weights keep the output a convex combination of the inputs
    double fu = std::clamp(u - static_cast<double>(r0), 0.0, 1.0);
    for (int c = 0; c < out_cols; ++c) {
      double v = c * col_scale;
      Eigen::Index c0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(v), in_cols - 2);
      double fv = std::clamp(v - static_cast<double>(c0), 0.0, 1.0);
      double top = in(r0, c0) * (1.0 - fv) + in(r0, c0 + 1) * fv;
      double bottom = in(r0 + 1, c0) * (1.0 - fv) + in(r0 + 1, c0 + 1) * fv;
      out(r, c) = top * (1.0 - fu) + bottom * fu;
    }
  }
  return out;
}

// 35x251 -> 160x160; rows stay excitation, columns stay emission.
inline Eigen::MatrixXd resize_to_square(const Eigen::MatrixXd& matrix) {
  if (matrix.rows() != kExcitationCount || matrix.cols() != kEmissionCount)
    throw Error("resize_to_square expects a " + std::to_string(kExcitationCount) + "x" +
                std::to_string(kEmissionCount) + " matrix, got " + std::to_string(matrix.rows()) + "x" +
                std::to_string(matrix.cols()));
  return resize_bilinear(matrix, kImageSize, kImageSize);
}

// Fixed explicitly because platform default rounding modes differ.
inline std::uint8_t quantize_unit(double v) {
  double q = std::round(v * 255.0);  // round halves away from zero
  if (q < 0.0) q = 0.0;
  if (q > 255.0) q = 255.0;
  return static_cast<std::uint8_t>(q);
}

inline PreprocessedImage to_image(const Eigen::MatrixXd& matrix, const std::string& oil_id, int stage_index,
                                  RayleighMode mode) {
  if (matrix.rows() != kImageSize || matrix.cols() != kImageSize)
    throw Error("to_image expects a " + std::to_string(kImageSize) + "x" + std::to_string(kImageSize) + " matrix");
  PreprocessedImage img;
  img.oil_id = oil_id;
  img.stage_index = stage_index;
  img.rayleigh_mode = mode;
  img.pixels.resize(static_cast<std::size_t>(kImageChannels) * kImageSize * kImageSize);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      double v = matrix(y, x);
      if (v < 0.0 || v > 1.0 + 1e-12) throw Error("to_image input value " + format_double(v) + " outside [0, 1]");
      std::uint8_t q = quantize_unit(std::min(v, 1.0));
      for (int c = 0; c < kImageChannels; ++c) img.at(c, y, x) = q;
    }
  return img;
}

// Full chain: rayleigh mask (keep by default, as in the main pipeline),
// normalize, bilinear resize, quantize, triplicate channels.
inline PreprocessedImage preprocess_sample(const OilSample& sample, RayleighMode mode = RayleighMode::keep,
                                           double rayleigh_half_width_nm = 10.0, const WarnFn& warn = {}) {
  EEMGrid masked = mask_rayleigh(sample.eem, mode, rayleigh_half_width_nm, warn);
  Eigen::MatrixXd unit = normalize(masked, warn);
  Eigen::MatrixXd square = resize_to_square(unit);
  return to_image(square, sample.oil_id, sample.stage_index, mode);
}

// Debug dump: binary PGM of channel 0 plus a sidecar text manifest.
inline void write_image_debug(const PreprocessedImage& img, const std::filesystem::path& pgm_path) {
  validate_image(img);
  std::ofstream out(pgm_path, std::ios::binary);
  if (!out) throw Error("cannot write " + pgm_path.string());
  out << "P5\n" << kImageSize << " " << kImageSize << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(kImageSize) * kImageSize);

  std::filesystem::path manifest_path = pgm_path;
  manifest_path += ".manifest.txt";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw Error("cannot write " + manifest_path.string());
  manifest << "sample = " << img.sample_label() << "\n"
           << "rayleigh_mode = " << to_string(img.rayleigh_mode) << "\n"
           << "quantization = round_half_away_from_zero(v * 255)\n"
           << "channels = 3 identical\n";
}

}  // namespace eemkit
