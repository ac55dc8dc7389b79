#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "eemkit/iea.hpp"
#include "eemkit/synth.hpp"
#include "test_util.hpp"

using namespace eemkit;

namespace {

PreprocessedImage random_image(std::uint64_t seed) {
  PreprocessedImage img;
  img.oil_id = "T";
  img.stage_index = 0;
  img.pixels.resize(static_cast<std::size_t>(kImageChannels) * kImageSize * kImageSize);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, 255);
  const std::size_t plane = static_cast<std::size_t>(kImageSize) * kImageSize;
  for (std::size_t i = 0; i < plane; ++i) {
    auto v = static_cast<std::uint8_t>(dist(rng));
    for (int c = 0; c < kImageChannels; ++c) img.pixels[static_cast<std::size_t>(c) * plane + i] = v;
  }
  return img;
}

class ConstantPredictor : public Predictor {
 public:
  explicit ConstantPredictor(double value) : value_(value) {}
  double predict(const PreprocessedImage&) const override {
    ++calls;
    return value_;
  }
  mutable long calls = 0;

 private:
  double value_;
};

OcclusionMap zero_map() {
  OcclusionMap map;
  map.tile_dae.setZero(32, 32);
  map.excitation_mapping_ = excitation_mapping();
  map.emission_mapping_ = emission_mapping();
  map.target = Target::k232;
  map.sample_label = "T_stage0";
  return map;
}

}  // namespace

TEST_CASE("occlusion sweep scores each of the 1024 tiles once") {
  ConstantPredictor model(0.4);
  PreprocessedImage img = random_image(1);
  OcclusionMap map = occlusion_sweep(model, img, 0.7, Target::k232);
  CHECK(map.tile_dae.rows() == 32);
  CHECK(map.tile_dae.cols() == 32);
  CHECK(model.calls == 1024 + 1);  // one baseline evaluation plus one per tile
  CHECK(map.baseline_prediction == 0.4);
  CHECK(map.baseline_ae == Catch::Approx(0.3).margin(1e-15));
}

TEST_CASE("constant predictor yields an all-zero map") {
  ConstantPredictor model(1.25);
  OcclusionMap map = occlusion_sweep(model, random_image(2), 2.0, Target::k268);
  CHECK(map.tile_dae.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tile-local predictor localizes exactly") {
  OracleTilePredictor model(3, 7);
  PreprocessedImage img = random_image(3);
  OcclusionMap map = occlusion_sweep(model, img, /*true_value=*/1.5, Target::k232, /*fill=*/0);
  Eigen::Index r, c;
  map.tile_dae.maxCoeff(&r, &c);
  CHECK(r == 3);
  CHECK(c == 7);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j)
      if (i != 3 || j != 7) CHECK(map.tile_dae(i, j) == 0.0);  // occlusions outside the tile change nothing
}

TEST_CASE("sweep result is independent of evaluation order") {
  OracleTilePredictor model(10, 20);
  PreprocessedImage img = random_image(4);
  OcclusionMap row_major = occlusion_sweep(model, img, 0.9, Target::k232);
  std::vector<std::size_t> order(32 * 32);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(99);
  std::shuffle(order.begin(), order.end(), rng);
  OcclusionMap shuffled = occlusion_sweep_ordered(model, img, 0.9, Target::k232, 0, 5, 5, order);
  CHECK((row_major.tile_dae - shuffled.tile_dae).cwiseAbs().maxCoeff() == 0.0);
  CHECK(row_major.baseline_prediction == shuffled.baseline_prediction);
}

TEST_CASE("gaussian smoothing") {
  SECTION("preserves constants") {
    Eigen::MatrixXd in = Eigen::MatrixXd::Constant(kImageSize, kImageSize, 2.5);
    Eigen::MatrixXd out = gaussian_smooth(in, 3.0);
    CHECK((out.array() - 2.5).abs().maxCoeff() < 1e-9);
  }
  SECTION("all-zero input stays zero") {
    Eigen::MatrixXd out = gaussian_smooth(Eigen::MatrixXd::Zero(kImageSize, kImageSize), 3.0);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("impulse response matches the analytic kernel away from borders") {
    const double sigma = 3.0;
    Eigen::MatrixXd in = Eigen::MatrixXd::Zero(kImageSize, kImageSize);
    in(80, 80) = 1.0;
    Eigen::MatrixXd out = gaussian_smooth(in, sigma);
    const double center = out(80, 80);
    REQUIRE(center > 0.0);
    for (int dy = -8; dy <= 8; ++dy)
      for (int dx = -8; dx <= 8; ++dx) {
        const double analytic = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma));
        const double measured = out(80 + dy, 80 + dx) / center;
        CHECK(std::abs(measured - analytic) / analytic < 1e-6);
      }
  }
}

TEST_CASE("smooth_map expands tiles and preserves a constant map") {
  OcclusionMap map = zero_map();
  map.tile_dae.setConstant(0.125);
  Eigen::MatrixXd out = smooth_map(map, 3.0);
  REQUIRE(out.rows() == kImageSize);
  CHECK((out.array() - 0.125).abs().maxCoeff() < 1e-9);
}

TEST_CASE("band importance") {
  SECTION("single positive tile lands in exactly one bar per axis") {
    OcclusionMap map = zero_map();
    map.tile_dae(2, 5) = 0.75;
    auto [top, side] = band_importance(map);
    REQUIRE(top.bars.size() == 32);
    REQUIRE(side.bars.size() == 32);
    for (int t = 0; t < 32; ++t) {
      CHECK(top.bars[static_cast<std::size_t>(t)].importance == (t == 5 ? 0.75 : 0.0));
      CHECK(side.bars[static_cast<std::size_t>(t)].importance == (t == 2 ? 0.75 : 0.0));
    }
    CHECK(top.axis == Axis::emission);
    CHECK(side.axis == Axis::excitation);
  }
  SECTION("negative tiles are excluded from the increases") {
    OcclusionMap map = zero_map();
    map.tile_dae(2, 5) = -0.75;
    auto [top, side] = band_importance(map);
    // independent summation oracle: the positive part of a single negative value is zero
    double oracle_total = 0.0;
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) oracle_total += std::max(map.tile_dae(i, j), 0.0);
    CHECK(oracle_total == 0.0);
    for (const auto& bar : top.bars) CHECK(bar.importance == 0.0);
    for (const auto& bar : side.bars) CHECK(bar.importance == 0.0);
  }
  SECTION("aggregation conserves the positive mass") {
    OcclusionMap map = zero_map();
    std::mt19937_64 rng(8);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) map.tile_dae(i, j) = dist(rng);
    auto [top, side] = band_importance(map);
    double top_sum = 0.0, side_sum = 0.0, positive_sum = 0.0;
    for (const auto& bar : top.bars) top_sum += bar.importance;
    for (const auto& bar : side.bars) side_sum += bar.importance;
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) positive_sum += std::max(map.tile_dae(i, j), 0.0);
    CHECK(top_sum == Catch::Approx(positive_sum).epsilon(1e-14));
    CHECK(side_sum == Catch::Approx(positive_sum).epsilon(1e-14));
  }
  SECTION("bars carry wavelength bands from the pixel mapping") {
    OcclusionMap map = zero_map();
    auto [top, side] = band_importance(map);
    CHECK(side.bars[0].pixel_lo == 0);
    CHECK(side.bars[0].pixel_hi == 4);
    CHECK(side.bars[0].band_lo_nm == 300.0);
    CHECK(side.bars[0].band_hi_nm == Catch::Approx(300.0 + 5 * 2.125));
    CHECK(top.bars[31].band_hi_nm == 800.0);
    CHECK(side.bars[31].band_hi_nm == 640.0);
  }
  SECTION("band importance is unaffected by rendering") {
    OcclusionMap map = zero_map();
    map.tile_dae(4, 4) = 1.0;
    auto before = band_importance(map);
    smooth_map(map, 3.0);
    auto after = band_importance(map);
    for (int t = 0; t < 32; ++t)
      CHECK(before.first.bars[static_cast<std::size_t>(t)].importance ==
            after.first.bars[static_cast<std::size_t>(t)].importance);
  }
}

TEST_CASE("average_maps") {
  OcclusionMap m = zero_map();
  m.tile_dae(1, 1) = 2.0;
  m.baseline_ae = 0.4;
  SECTION("average of two identical maps is the same map") {
    OcclusionMap avg = average_maps({m, m}, "group");
    CHECK((avg.tile_dae - m.tile_dae).cwiseAbs().maxCoeff() == 0.0);
    CHECK(avg.baseline_ae == 0.4);
    CHECK(avg.sample_label == "group");
  }
  SECTION("average with the zero map halves the values") {
    OcclusionMap avg = average_maps({m, zero_map()}, "group");
    CHECK(avg.tile_dae(1, 1) == 1.0);
  }
  SECTION("mixed targets are rejected") {
    OcclusionMap other = zero_map();
    other.target = Target::k268;
    REQUIRE_THROWS_WITH(average_maps({m, other}, "group"), Catch::Matchers::ContainsSubstring("mixed targets"));
  }
}

TEST_CASE("spectral_cut picks the nearest sampled excitation row") {
  EEMGrid grid = testutil::make_grid([](double ex, double em) { return ex + em / 1000.0; });
  SECTION("416 nm resolves to the 420 nm row") {
    SpectralCut cut = spectral_cut(grid, 416.0);
    CHECK(cut.actual_ex_nm == 420.0);
    REQUIRE(cut.intensity.size() == 251);
    CHECK(cut.intensity[0] == 420.0 + 0.3);
  }
  SECTION("exact grid point stays put") {
    CHECK(spectral_cut(grid, 400.0).actual_ex_nm == 400.0);
  }
  SECTION("equidistant 415 nm breaks the tie to 410") {
    CHECK(spectral_cut(grid, 415.0).actual_ex_nm == 410.0);
  }
  SECTION("out-of-range wavelength is rejected") {
    REQUIRE_THROWS_AS(spectral_cut(grid, 299.0), Error);
    REQUIRE_THROWS_AS(spectral_cut(grid, 641.0), Error);
  }
}

TEST_CASE("occlusion map files round-trip") {
  testutil::TempDir dir("ieamap");
  OcclusionMap map = zero_map();
  map.tile_dae(3, 9) = 0.5;
  map.baseline_prediction = 1.1;
  map.baseline_ae = 0.2;
  map.true_value = 1.3;
  map.fill = 7;
  write_occlusion_map(map, dir.path() / "map.csv");
  OcclusionMap restored = read_occlusion_map(dir.path() / "map.csv");
  CHECK((restored.tile_dae - map.tile_dae).cwiseAbs().maxCoeff() == 0.0);
  CHECK(restored.baseline_prediction == 1.1);
  CHECK(restored.fill == 7);
  CHECK(restored.sample_label == "T_stage0");
}
