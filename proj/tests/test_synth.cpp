#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "eemkit/synth.hpp"
#include "test_util.hpp"

using namespace eemkit;

namespace {

SynthSpec single_blob_spec(int stages = 3) {
  SynthSpec spec;
  spec.n_oils = 1;
  spec.n_stages = stages;
  FluorophoreSpec f;
  f.name = "blob";
  f.center_ex_nm = 438.0;  // off-grid on purpose: nearest sampled row is 440
  f.center_em_nm = 561.0;  // nearest sampled column is 560
  f.sigma_ex_nm = 30.0;
  f.sigma_em_nm = 20.0;
  f.amplitude_by_stage.assign(static_cast<std::size_t>(stages), 800.0);
  spec.fluorophores = {f};
  spec.target_rule = TargetRule{0.0, 0.001, 0};
  return spec;
}

}  // namespace

TEST_CASE("single fluorophore peaks at the nearest grid point") {
  Dataset ds = generate_dataset(single_blob_spec());
  const EEMGrid& eem = ds.samples[0].eem;
  Eigen::Index r, c;
  eem.intensity.maxCoeff(&r, &c);
  CHECK(eem.excitation_nm[static_cast<std::size_t>(r)] == 440.0);
  CHECK(eem.emission_nm[static_cast<std::size_t>(c)] == 560.0);
}

TEST_CASE("generation is bit-deterministic for a fixed seed") {
  SynthSpec spec = paper_like_preset(123, 3, 4);
  Dataset a = generate_dataset(spec);
  Dataset b = generate_dataset(spec);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK((a.samples[i].eem.intensity - b.samples[i].eem.intensity).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.samples[i].targets.k232 == b.samples[i].targets.k232);
  }
  Dataset c = generate_dataset(paper_like_preset(124, 3, 4));
  CHECK((a.samples[0].eem.intensity - c.samples[0].eem.intensity).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("targets follow the affine rule exactly") {
  SynthSpec spec = single_blob_spec(10);
  auto& amps = spec.fluorophores[0].amplitude_by_stage;
  for (int s = 0; s < 10; ++s) amps[static_cast<std::size_t>(s)] = s;  // linear in stage
  spec.target_rule = TargetRule{1.0, 0.01, 0};
  Dataset ds = generate_dataset(spec);
  for (const auto& sample : ds.samples) {
    const double expected = 1.0 + 0.01 * sample.stage_index;
    CHECK(sample.targets.k232 == expected);
    CHECK(sample.targets.k268 == expected);
  }
}

TEST_CASE("paper-like preset places the documented bands") {
  SynthSpec spec = paper_like_preset(1);
  REQUIRE(spec.fluorophores.size() == 2);
  const auto& chl = spec.fluorophores[0];
  const auto& oxi = spec.fluorophores[1];
  CHECK(chl.name == "chlorophyll");
  CHECK(chl.center_em_nm == 680.0);
  CHECK(chl.sigma_ex_nm >= 100.0);  // broad absorption
  CHECK(oxi.name == "oxidation_product");
  CHECK(oxi.center_ex_nm - oxi.sigma_ex_nm >= 300.0);
  CHECK(oxi.center_ex_nm + oxi.sigma_ex_nm <= 400.0);
  CHECK(oxi.center_em_nm - oxi.sigma_em_nm >= 400.0);
  CHECK(oxi.center_em_nm + oxi.sigma_em_nm <= 500.0);
  CHECK(spec.target_rule.designated_fluorophore == 1);
  // the informative amplitude grows with the oxidation stage
  CHECK(oxi.amplitude_by_stage.front() < oxi.amplitude_by_stage.back());
}

TEST_CASE("intensities never leave [0, 1000]") {
  SynthSpec spec = single_blob_spec();
  spec.fluorophores[0].amplitude_by_stage.assign(3, 5000.0);  // would overshoot without clipping
  spec.noise_sd = 50.0;
  spec.seed = 4;
  Dataset ds = generate_dataset(spec);
  for (const auto& s : ds.samples) {
    CHECK(s.eem.intensity.maxCoeff() <= 1000.0);
    CHECK(s.eem.intensity.minCoeff() >= 0.0);
  }
  CHECK(ds.samples[0].eem.intensity.maxCoeff() == 1000.0);
}

TEST_CASE("noise amplitude is reproduced where clipping is negligible") {
  // Flat 500-count pedestal so the lower clip at zero never engages.
  SynthSpec spec;
  spec.n_oils = 1;
  spec.n_stages = 1;
  spec.seed = 5;
  FluorophoreSpec pedestal;
  pedestal.name = "pedestal";
  pedestal.center_ex_nm = 470.0;
  pedestal.center_em_nm = 550.0;
  pedestal.sigma_ex_nm = 1e6;
  pedestal.sigma_em_nm = 1e6;
  pedestal.amplitude_by_stage = {500.0};
  spec.fluorophores = {pedestal};
  spec.target_rule = TargetRule{0.0, 1.0, 0};
  const double s = 10.0;
  spec.noise_sd = s;
  Dataset ds = generate_dataset(spec);
  const auto& m = ds.samples[0].eem.intensity;
  const double mean = m.mean();
  const double sd = std::sqrt((m.array() - mean).square().sum() / (m.size() - 1));
  CHECK(sd > 0.9 * s);
  CHECK(sd < 1.1 * s);
}

TEST_CASE("zero-signal noise is truncated at the floor as clipping dictates") {
  // With no signal, max(N(0, s), 0) has standard deviation s*sqrt(1/2 - 1/(2*pi)).
  SynthSpec spec;
  spec.n_oils = 1;
  spec.n_stages = 1;
  spec.seed = 6;
  spec.target_rule = TargetRule{0.5, 1.0, 0};
  const double s = 10.0;
  spec.noise_sd = s;
  Dataset ds = generate_dataset(spec);
  const auto& m = ds.samples[0].eem.intensity;
  const double mean = m.mean();
  const double sd = std::sqrt((m.array() - mean).square().sum() / (m.size() - 1));
  const double truncated_sd = s * std::sqrt(0.5 - 1.0 / (2.0 * M_PI));
  CHECK(sd == Catch::Approx(truncated_sd).epsilon(0.05));
}

TEST_CASE("per-oil jitter moves amplitudes but keeps targets exact") {
  SynthSpec spec = single_blob_spec(2);
  spec.n_oils = 4;
  spec.amplitude_jitter = 0.2;
  spec.seed = 9;
  Dataset ds = generate_dataset(spec);
  const auto jitter = amplitude_jitter_factors(spec);
  for (int o = 0; o < 4; ++o) {
    CHECK(jitter[static_cast<std::size_t>(o)][0] >= 0.8);
    CHECK(jitter[static_cast<std::size_t>(o)][0] <= 1.2);
  }
  // targets track the jittered amplitude exactly
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& sample = ds.samples[i];
    int oil_index = sample.oil_id[0] - 'A';
    const double amp = spec.fluorophores[0].amplitude_by_stage[static_cast<std::size_t>(sample.stage_index)] *
                       jitter[static_cast<std::size_t>(oil_index)][0];
    CHECK(sample.targets.k232 == 0.0 + 0.001 * amp);
  }
}

TEST_CASE("oracle tile predictor") {
  SECTION("all-zero image predicts 0, all-255 tile predicts 1") {
    PreprocessedImage img;
    img.oil_id = "Z";
    img.pixels.assign(static_cast<std::size_t>(kImageChannels) * kImageSize * kImageSize, 0);
    OracleTilePredictor oracle(4, 6);
    CHECK(oracle.predict(img) == 0.0);
    for (int c = 0; c < kImageChannels; ++c)
      for (int y = 20; y < 25; ++y)
        for (int x = 30; x < 35; ++x) img.at(c, y, x) = 255;
    CHECK(oracle.predict(img) == 1.0);
  }
  SECTION("matches a scalar-loop mean on a random image") {
    Dataset ds = testutil::tiny_dataset(1, 1, 31);
    PreprocessedImage img = preprocess_sample(ds.samples[0]);
    OracleTilePredictor oracle(10, 14);
    double sum = 0.0;
    for (int y = 50; y < 55; ++y)
      for (int x = 70; x < 75; ++x) sum += img.at(0, y, x);
    CHECK(std::abs(oracle.predict(img) - sum / (25.0 * 255.0)) < 1e-12);
  }
  SECTION("out-of-range tile is rejected") {
    REQUIRE_THROWS_AS(OracleTilePredictor(32, 0), Error);
    REQUIRE_THROWS_AS(OracleTilePredictor(0, -1), Error);
  }
}

TEST_CASE("informative tile region covers the designated band") {
  SynthSpec spec = paper_like_preset(2);
  TileRegion region = informative_tile_region(spec);
  const auto& oxi = spec.fluorophores[1];
  const int center_row = pixel_of_wavelength(excitation_mapping(), oxi.center_ex_nm) / kOcclusionStride;
  const int center_col = pixel_of_wavelength(emission_mapping(), oxi.center_em_nm) / kOcclusionStride;
  CHECK(region.contains(center_row, center_col));
  CHECK(region.row_lo <= region.row_hi);
  CHECK(region.col_lo <= region.col_hi);
  CHECK(region.row_hi - region.row_lo < 10);  // the band is compact
  CHECK_FALSE(region.contains(31, 31));
  CHECK(region.contains(region.row_lo - 2, region.col_lo, 2));
}
