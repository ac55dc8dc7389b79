#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "eemkit/common.hpp"
#include "eemkit/digest.hpp"
#include "eemkit/eemio.hpp"
#include "eemkit/iea.hpp"
#include "eemkit/model.hpp"
#include "eemkit/preprocess.hpp"

namespace eemkit {

// One Gaussian emitter on the (excitation, emission) plane with a per-stage
// amplitude profile.
struct FluorophoreSpec {
  std::string name;
  double center_ex_nm = 0.0;
  double center_em_nm = 0.0;
  double sigma_ex_nm = 1.0;
  double sigma_em_nm = 1.0;
  std::vector<double> amplitude_by_stage;  // counts, length n_stages
};

// target = a + b * (designated fluorophore's effective stage amplitude).
struct TargetRule {
  double a = 0.0;
  double b = 1.0;
  int designated_fluorophore = 0;
};

struct SynthSpec {
  int n_oils = 2;
  int n_stages = 2;
  std::vector<FluorophoreSpec> fluorophores;
  double amplitude_jitter = 0.0;  // per-(oil, fluorophore) multiplicative jitter, fraction
  double rayleigh_amplitude = 0.0;
  double rayleigh_sigma_nm = 10.0;
  double noise_sd = 0.0;
  TargetRule target_rule;
  std::uint64_t seed = 0;
};

inline void validate_synth_spec(const SynthSpec& spec) {
  if (spec.n_oils < 1 || spec.n_stages < 1) throw Error("synth spec needs n_oils >= 1 and n_stages >= 1");
  for (const auto& f : spec.fluorophores) {
    if (f.center_ex_nm < kExcitationMinNm || f.center_ex_nm > kExcitationMaxNm ||
        f.center_em_nm < kEmissionMinNm || f.center_em_nm > kEmissionMaxNm)
      throw Error("fluorophore '" + f.name + "' center outside the sampled axes");
    if (!(f.sigma_ex_nm > 0.0) || !(f.sigma_em_nm > 0.0)) throw Error("fluorophore sigmas must be > 0");
    if (static_cast<int>(f.amplitude_by_stage.size()) != spec.n_stages)
      throw Error("fluorophore '" + f.name + "' needs one amplitude per stage");
    for (double a : f.amplitude_by_stage)
      if (!(a >= 0.0)) throw Error("fluorophore amplitudes must be >= 0");
  }
  if (spec.amplitude_jitter < 0.0 || spec.amplitude_jitter >= 1.0) throw Error("amplitude_jitter must be in [0, 1)");
  if (spec.rayleigh_amplitude < 0.0) throw Error("rayleigh_amplitude must be >= 0");
  if (!(spec.rayleigh_sigma_nm > 0.0)) throw Error("rayleigh_sigma_nm must be > 0");
  if (spec.noise_sd < 0.0) throw Error("noise_sd must be >= 0");
  if (!std::isfinite(spec.target_rule.a) || !std::isfinite(spec.target_rule.b) || spec.target_rule.b == 0.0)
    throw Error("target rule coefficients must be finite with b != 0");
  if (!spec.fluorophores.empty() && (spec.target_rule.designated_fluorophore < 0 ||
                                     spec.target_rule.designated_fluorophore >= static_cast<int>(spec.fluorophores.size())))
    throw Error("designated fluorophore index out of range");
}

inline std::string synth_oil_label(int index, int n_oils) {
  if (n_oils <= 26) return std::string(1, static_cast<char>('A' + index));
  std::string num = std::to_string(index);
  std::string width = std::to_string(n_oils - 1);
  return "oil" + std::string(width.size() - num.size(), '0') + num;
}

// Per-(oil, fluorophore) multiplicative factors, drawn once from the generator
// seed in a fixed order so per-sample generation stays parallelizable.
inline std::vector<std::vector<double>> amplitude_jitter_factors(const SynthSpec& spec) {
  std::mt19937_64 rng(mix_seed(spec.seed, 0xA117E2ULL));
  std::uniform_real_distribution<double> dist(1.0 - spec.amplitude_jitter, 1.0 + spec.amplitude_jitter);
  std::vector<std::vector<double>> factors(static_cast<std::size_t>(spec.n_oils));
  for (int o = 0; o < spec.n_oils; ++o) {
    factors[static_cast<std::size_t>(o)].resize(spec.fluorophores.size());
    for (std::size_t f = 0; f < spec.fluorophores.size(); ++f)
      factors[static_cast<std::size_t>(o)][f] = spec.amplitude_jitter > 0.0 ? dist(rng) : 1.0;
  }
  return factors;
}

// The exact teacher: targets are computed from the pre-noise amplitude, so
// the achievable error is bounded by the noise alone.
inline double synth_target(const SynthSpec& spec, const std::vector<std::vector<double>>& jitter, int oil, int stage) {
  if (spec.fluorophores.empty()) return spec.target_rule.a;
  const auto f = static_cast<std::size_t>(spec.target_rule.designated_fluorophore);
  const double amp = spec.fluorophores[f].amplitude_by_stage[static_cast<std::size_t>(stage)] *
                     jitter[static_cast<std::size_t>(oil)][f];
  return spec.target_rule.a + spec.target_rule.b * amp;
}

inline EEMGrid generate_eem(const SynthSpec& spec, const std::vector<std::vector<double>>& jitter, int oil, int stage) {
  EEMGrid grid;
  grid.excitation_nm = canonical_excitation_axis();
  grid.emission_nm = canonical_emission_axis();
  grid.intensity.setZero(kExcitationCount, kEmissionCount);

  for (std::size_t f = 0; f < spec.fluorophores.size(); ++f) {
    const auto& fl = spec.fluorophores[f];
    const double amp = fl.amplitude_by_stage[static_cast<std::size_t>(stage)] * jitter[static_cast<std::size_t>(oil)][f];
    if (amp == 0.0) continue;
    for (int i = 0; i < kExcitationCount; ++i) {
      const double dx = (grid.excitation_nm[static_cast<std::size_t>(i)] - fl.center_ex_nm) / fl.sigma_ex_nm;
      const double gx = std::exp(-0.5 * dx * dx);
      for (int j = 0; j < kEmissionCount; ++j) {
        const double dy = (grid.emission_nm[static_cast<std::size_t>(j)] - fl.center_em_nm) / fl.sigma_em_nm;
        grid.intensity(i, j) += amp * gx * std::exp(-0.5 * dy * dy);
      }
    }
  }

  if (spec.rayleigh_amplitude > 0.0) {
    for (int i = 0; i < kExcitationCount; ++i) {
      const double ex = grid.excitation_nm[static_cast<std::size_t>(i)];
      for (int j = 0; j < kEmissionCount; ++j) {
        const double d = (grid.emission_nm[static_cast<std::size_t>(j)] - ex) / spec.rayleigh_sigma_nm;
        grid.intensity(i, j) += spec.rayleigh_amplitude * std::exp(-0.5 * d * d);
      }
    }
  }

  if (spec.noise_sd > 0.0) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0xEE300000ULL + static_cast<std::uint64_t>(oil) * 1000u +
                                                static_cast<std::uint64_t>(stage)));
    std::normal_distribution<double> noise(0.0, spec.noise_sd);
    for (int i = 0; i < kExcitationCount; ++i)
      for (int j = 0; j < kEmissionCount; ++j) grid.intensity(i, j) += noise(rng);
  }

  for (int i = 0; i < kExcitationCount; ++i)
    for (int j = 0; j < kEmissionCount; ++j)
      grid.intensity(i, j) = std::clamp(grid.intensity(i, j), 0.0, kNormalizationCounts);
  return grid;
}

inline Dataset generate_dataset(const SynthSpec& spec) {
  validate_synth_spec(spec);
  const auto jitter = amplitude_jitter_factors(spec);
  Dataset ds;
  ds.n_stages = spec.n_stages;
  for (int o = 0; o < spec.n_oils; ++o) {
    const std::string label = synth_oil_label(o, spec.n_oils);
    ds.oil_ids.push_back(label);
    for (int s = 0; s < spec.n_stages; ++s) {
      OilSample sample;
      sample.oil_id = label;
      sample.stage_index = s;
      sample.day = spec.n_stages > 1 ? 53.0 * s / (spec.n_stages - 1) : 0.0;
      sample.eem = generate_eem(spec, jitter, o, s);
      const double t = synth_target(spec, jitter, o, s);
      sample.targets.k232 = t;
      sample.targets.k268 = t;
      ds.samples.push_back(std::move(sample));
    }
  }
  std::sort(ds.oil_ids.begin(), ds.oil_ids.end());
  std::sort(ds.samples.begin(), ds.samples.end(), [](const OilSample& a, const OilSample& b) {
    return std::tie(a.oil_id, a.stage_index) < std::tie(b.oil_id, b.stage_index);
  });
  validate_dataset(ds);
  return ds;
}

// Desk-scale stand-in for the real acquisition: a broad constant chlorophyll
// band as distractor, a stage-linear oxidation-product band carrying the
// signal, a Rayleigh ridge and mild detector noise.
inline SynthSpec paper_like_preset(std::uint64_t seed = 0, int n_oils = 24, int n_stages = 10) {
  SynthSpec spec;
  spec.n_oils = n_oils;
  spec.n_stages = n_stages;
  spec.seed = seed;
  spec.amplitude_jitter = 0.08;
  spec.rayleigh_amplitude = 400.0;
  spec.rayleigh_sigma_nm = 10.0;
  spec.noise_sd = 2.0;

  FluorophoreSpec chlorophyll;
  chlorophyll.name = "chlorophyll";
  chlorophyll.center_ex_nm = 410.0;
  chlorophyll.center_em_nm = 680.0;
  chlorophyll.sigma_ex_nm = 120.0;  // broad absorption across 300-650 nm
  chlorophyll.sigma_em_nm = 25.0;
  chlorophyll.amplitude_by_stage.assign(static_cast<std::size_t>(n_stages), 550.0);

  FluorophoreSpec oxidation;
  oxidation.name = "oxidation_product";
  oxidation.center_ex_nm = 350.0;
  oxidation.center_em_nm = 450.0;
  oxidation.sigma_ex_nm = 25.0;
  oxidation.sigma_em_nm = 30.0;
  oxidation.amplitude_by_stage.resize(static_cast<std::size_t>(n_stages));
  for (int s = 0; s < n_stages; ++s)
    oxidation.amplitude_by_stage[static_cast<std::size_t>(s)] =
        100.0 + (n_stages > 1 ? 750.0 * s / (n_stages - 1) : 0.0);

  spec.fluorophores = {chlorophyll, oxidation};
  spec.target_rule = TargetRule{0.1, 0.001, 1};
  return spec;
}

// Occlusion-tile rectangle (inclusive) covering the designated fluorophore's
// +/- 1 sigma footprint; the localization yardstick for synthetic runs.
struct TileRegion {
  int row_lo = 0, row_hi = 0, col_lo = 0, col_hi = 0;

  bool contains(int r, int c, int dilation = 0) const {
    return r >= row_lo - dilation && r <= row_hi + dilation && c >= col_lo - dilation && c <= col_hi + dilation;
  }
};

inline int pixel_of_wavelength(const AxisMapping& mapping, double lambda_nm) {
  const double w = mapping.pixel_width_nm();
  const int pixel = static_cast<int>(std::floor((lambda_nm - mapping.lambda_min) / w));
  return std::clamp(pixel, 0, mapping.n_pixels - 1);
}

inline TileRegion informative_tile_region(const SynthSpec& spec, int stride = kOcclusionStride) {
  validate_synth_spec(spec);
  if (spec.fluorophores.empty()) throw Error("spec has no fluorophores");
  const auto& f = spec.fluorophores[static_cast<std::size_t>(spec.target_rule.designated_fluorophore)];
  const AxisMapping ex_map = excitation_mapping();
  const AxisMapping em_map = emission_mapping();
  TileRegion region;
  region.row_lo = pixel_of_wavelength(ex_map, f.center_ex_nm - f.sigma_ex_nm) / stride;
  region.row_hi = pixel_of_wavelength(ex_map, f.center_ex_nm + f.sigma_ex_nm) / stride;
  region.col_lo = pixel_of_wavelength(em_map, f.center_em_nm - f.sigma_em_nm) / stride;
  region.col_hi = pixel_of_wavelength(em_map, f.center_em_nm + f.sigma_em_nm) / stride;
  return region;
}

// Model-shaped predictor that depends on exactly one occlusion tile: the mean
// of channel-0 pixels in that tile, scaled to [0, 1].
class OracleTilePredictor : public Predictor {
 public:
  OracleTilePredictor(int tile_row, int tile_col, int tile_size = kOcclusionTileSize, int stride = kOcclusionStride)
      : tile_row_(tile_row), tile_col_(tile_col), tile_size_(tile_size), stride_(stride) {
    const int n = occlusion_grid_size(stride);
    if (tile_row < 0 || tile_row >= n || tile_col < 0 || tile_col >= n)
      throw Error("tile (" + std::to_string(tile_row) + ", " + std::to_string(tile_col) + ") outside the " +
                  std::to_string(n) + "x" + std::to_string(n) + " grid");
  }

  double predict(const PreprocessedImage& image) const override {
    validate_image(image);
    const int y0 = tile_row_ * stride_, x0 = tile_col_ * stride_;
    const int y1 = std::min(y0 + tile_size_, kImageSize);
    const int x1 = std::min(x0 + tile_size_, kImageSize);
    double sum = 0.0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) sum += image.at(0, y, x);
    return sum / (255.0 * (y1 - y0) * (x1 - x0));
  }

 private:
  int tile_row_, tile_col_, tile_size_, stride_;
};

}  // namespace eemkit
