#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <sstream>

#include "eemkit/evalreport.hpp"
#include "test_util.hpp"

using namespace eemkit;
using testutil::TempDir;

namespace {

std::vector<EvalRow> synthetic_rows(int oils, int stages, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> value(1.0, 3.0), err(-0.2, 0.2);
  std::vector<EvalRow> rows;
  for (int o = 0; o < oils; ++o)
    for (int s = 0; s < stages; ++s) {
      EvalRow row;
      row.oil_id = std::string(1, static_cast<char>('A' + o));
      row.stage_index = s;
      row.target = Target::k232;
      row.true_value = value(rng);
      row.prediction = row.true_value + err(rng);
      rows.push_back(row);
    }
  std::shuffle(rows.begin(), rows.end(), rng);
  return rows;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("compute_metrics") {
  SECTION("per-oil MAE is the mean of that oil's AEs") {
    std::vector<EvalRow> rows(2);
    rows[0] = {"A", 0, Target::k232, 1.0, 1.1, 0.0};
    rows[1] = {"A", 1, Target::k232, 1.0, 1.3, 0.0};
    EvalReport report = compute_metrics(rows);
    CHECK(report.per_oil_mae.at("A") == Catch::Approx(0.2).margin(1e-15));
    CHECK(report.global_mae == Catch::Approx(0.2).margin(1e-15));
  }
  SECTION("perfect predictions give zero MAE") {
    std::vector<EvalRow> rows = synthetic_rows(3, 4, 1);
    for (auto& r : rows) r.prediction = r.true_value;
    EvalReport report = compute_metrics(rows);
    CHECK(report.global_mae == 0.0);
    for (const auto& [oil, mae] : report.per_oil_mae) CHECK(mae == 0.0);
  }
  SECTION("balanced folds: global MAE equals the mean of per-oil MAEs") {
    EvalReport report = compute_metrics(synthetic_rows(24, 10, 2));
    double mean_of_means = 0.0;
    for (const auto& [oil, mae] : report.per_oil_mae) mean_of_means += mae / 24.0;
    CHECK(report.global_mae == Catch::Approx(mean_of_means).epsilon(1e-12));
  }
  SECTION("independent recomputation agrees to 1e-12 relative") {
    EvalReport report = compute_metrics(synthetic_rows(5, 7, 3));
    double sum = 0.0;
    for (const auto& r : report.rows) sum += std::abs(r.prediction - r.true_value);
    CHECK(report.global_mae == Catch::Approx(sum / report.rows.size()).epsilon(1e-12));
  }
  SECTION("rows come back sorted by oil and stage") {
    EvalReport report = compute_metrics(synthetic_rows(4, 3, 4));
    for (std::size_t i = 1; i < report.rows.size(); ++i) {
      const auto& a = report.rows[i - 1];
      const auto& b = report.rows[i];
      CHECK(std::tie(a.oil_id, a.stage_index) < std::tie(b.oil_id, b.stage_index));
    }
  }
  SECTION("mixed targets are rejected") {
    std::vector<EvalRow> rows = synthetic_rows(2, 2, 5);
    rows.back().target = Target::k268;
    REQUIRE_THROWS_WITH(compute_metrics(rows), Catch::Matchers::ContainsSubstring("mixed targets"));
  }
  SECTION("empty input is rejected") {
    REQUIRE_THROWS_AS(compute_metrics({}), Error);
  }
}

TEST_CASE("report CSV round-trips") {
  TempDir dir("report");
  EvalReport report = compute_metrics(synthetic_rows(3, 3, 6));
  write_report_csv(report, dir.path() / "report.csv");
  EvalReport restored = read_report_csv(dir.path() / "report.csv");
  REQUIRE(restored.rows.size() == report.rows.size());
  CHECK(restored.global_mae == Catch::Approx(report.global_mae).epsilon(1e-12));
}

TEST_CASE("emit_figures") {
  EvalReport report = compute_metrics(synthetic_rows(3, 4, 7));
  SECTION("report alone produces figures a-c and skips d/e with a notice") {
    TempDir dir("figs");
    std::vector<std::string> notices;
    auto files = emit_figures(report, dir.path(), {}, nullptr, nullptr,
                              [&](const std::string& m) { notices.push_back(m); });
    CHECK(files.size() == 3);
    const auto fig_dir = dir.path() / "figures" / "k232";
    CHECK(std::filesystem::exists(fig_dir / "fig2_curves.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig3a_scatter.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig3b_violin.csv"));
    CHECK_FALSE(std::filesystem::exists(fig_dir / "fig4_heatmap.csv"));
    REQUIRE(notices.size() == 1);
    CHECK(notices[0].find("skipped") != std::string::npos);
  }
  SECTION("scatter holds one point per (oil, stage)") {
    TempDir dir("figs2");
    emit_figures(report, dir.path());
    std::string scatter = slurp(dir.path() / "figures" / "k232" / "fig3a_scatter.csv");
    CHECK(std::count(scatter.begin(), scatter.end(), '\n') == 1 + 12);  // header + rows
  }
  SECTION("figure data files are byte-deterministic") {
    TempDir a("figsa");
    TempDir b("figsb");
    FigureConfig config;
    config.regulatory_limit = 2.5;
    config.experimental_error_3sigma = 0.05;
    emit_figures(report, a.path(), config);
    emit_figures(report, b.path(), config);
    for (const std::string name : {"fig2_curves.csv", "fig3a_scatter.csv", "fig3b_violin.csv"})
      CHECK(slurp(a.path() / "figures" / "k232" / name) == slurp(b.path() / "figures" / "k232" / name));
  }
  SECTION("maps enable fig4; maps plus EEMs enable fig5") {
    TempDir dir("figs3");
    Dataset ds = testutil::tiny_dataset(3, 4, 8);
    std::vector<EvalRow> rows;
    for (const auto& s : ds.samples)
      rows.push_back({s.oil_id, s.stage_index, Target::k232, s.targets.k232, s.targets.k232 + 0.01, 0.0});
    EvalReport ds_report = compute_metrics(rows);

    OcclusionMap map;
    map.tile_dae.setZero(32, 32);
    map.tile_dae(3, 3) = 0.4;
    map.excitation_mapping_ = excitation_mapping();
    map.emission_mapping_ = emission_mapping();
    map.target = Target::k232;
    map.sample_label = "A_stage3";
    std::vector<OcclusionMap> maps{map};

    auto files = emit_figures(ds_report, dir.path(), {}, &maps, &ds);
    const auto fig_dir = dir.path() / "figures" / "k232";
    CHECK(std::filesystem::exists(fig_dir / "fig4_heatmap.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig4_bands.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig5_overlay_A_stage3_heatmap.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig5_overlay_A_stage3_eem.csv"));
    CHECK(std::filesystem::exists(fig_dir / "fig5_overlay_A_stage3_cuts.csv"));
    CHECK(files.size() >= 7);
  }
}
