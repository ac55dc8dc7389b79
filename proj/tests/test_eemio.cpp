#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "eemkit/eemio.hpp"
#include "test_util.hpp"

using namespace eemkit;
using testutil::TempDir;

TEST_CASE("parse_eem_csv reads the canonical layout with axes from the file") {
  EEMGrid grid = testutil::make_grid([](double ex, double em) { return ex * 0.1 + em * 0.01; });
  std::stringstream io;
  write_eem_csv(grid, io);
  EEMGrid parsed = parse_eem_csv(io);
  REQUIRE(parsed.excitation_nm.size() == 35);
  REQUIRE(parsed.emission_nm.size() == 251);
  CHECK(parsed.excitation_nm[0] == 300.0);
  CHECK(parsed.excitation_nm[34] == 640.0);
  CHECK(parsed.emission_nm[250] == 800.0);
}

TEST_CASE("parse_eem_csv rejects degenerate and malformed input") {
  SECTION("empty stream") {
    std::stringstream io;
    REQUIRE_THROWS_WITH(parse_eem_csv(io), Catch::Matchers::ContainsSubstring("no header"));
  }
  SECTION("non-numeric cell names line and column") {
    EEMGrid grid = testutil::make_grid([](double, double) { return 1.0; });
    std::stringstream out;
    write_eem_csv(grid, out);
    std::string text = out.str();
    auto pos = text.find("1,1");
    text.replace(pos, 3, "1,x");
    std::stringstream io(text);
    try {
      parse_eem_csv(io);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).find("non-numeric") != std::string::npos);
    }
  }
  SECTION("wrong column count") {
    std::stringstream io("em_nm,ex_300,ex_310\n300,1,2\n");
    REQUIRE_THROWS_WITH(parse_eem_csv(io), Catch::Matchers::ContainsSubstring("excitation columns"));
  }
  SECTION("non-monotone emission axis") {
    EEMGrid grid = testutil::make_grid([](double, double) { return 1.0; });
    std::stringstream out;
    write_eem_csv(grid, out);
    std::string text = out.str();
    // swap the em=302 row label to 299 -> descending step
    auto pos = text.find("\n302,");
    text.replace(pos, 5, "\n299,");
    std::stringstream io(text);
    REQUIRE_THROWS_AS(parse_eem_csv(io), ParseError);
  }
}

TEST_CASE("round-trip: write then reparse is value-exact") {
  EEMGrid grid = testutil::random_grid(42);
  grid.intensity(10, 190) = 512.5;  // (ex=400, em=680)
  std::stringstream io;
  write_eem_csv(grid, io);
  EEMGrid parsed = parse_eem_csv(io);
  REQUIRE(parsed.intensity.rows() == grid.intensity.rows());
  CHECK(parsed.value_at(400.0, 680.0) == 512.5);
  CHECK((parsed.intensity - grid.intensity).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("targets CSV round-trips with optional columns") {
  std::vector<TargetRow> rows;
  rows.push_back({"A", 0, 0.0, QualityIndicators{1.5, 0.12, 0.3, std::nullopt}});
  rows.push_back({"A", 1, 5.5, QualityIndicators{1.7, 0.14, std::nullopt, 0.2}});
  std::stringstream io;
  write_targets_csv(rows, io);
  auto parsed = parse_targets_csv(io);
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0].indicators.k232 == 1.5);
  CHECK(parsed[0].indicators.k264 == 0.3);
  CHECK_FALSE(parsed[0].indicators.k272.has_value());
  CHECK_FALSE(parsed[1].indicators.k264.has_value());
  CHECK(parsed[1].indicators.k272 == 0.2);
  CHECK(parsed[1].day == 5.5);
}

TEST_CASE("load_dataset joins files and targets deterministically") {
  TempDir dir("load");
  Dataset ds = testutil::tiny_dataset(3, 2);
  write_dataset(ds, dir.path());
  Dataset loaded = load_dataset(dir.path(), dir.path() / "targets.csv");
  REQUIRE(loaded.samples.size() == 6);
  CHECK(loaded.oil_ids == std::vector<std::string>{"A", "B", "C"});
  CHECK(loaded.n_stages == 2);
  // deterministic ordering: (oil_id, stage_index)
  for (std::size_t i = 0; i < loaded.samples.size(); ++i) {
    CHECK(loaded.samples[i].oil_id == ds.samples[i].oil_id);
    CHECK(loaded.samples[i].stage_index == ds.samples[i].stage_index);
  }
  Dataset again = load_dataset(dir.path(), dir.path() / "targets.csv");
  for (std::size_t i = 0; i < loaded.samples.size(); ++i)
    CHECK(again.samples[i].oil_id == loaded.samples[i].oil_id);
}

TEST_CASE("load_dataset single sample") {
  TempDir dir("single");
  Dataset ds = testutil::tiny_dataset(1, 1);
  write_dataset(ds, dir.path());
  Dataset loaded = load_dataset(dir.path(), dir.path() / "targets.csv");
  CHECK(loaded.samples.size() == 1);
}

TEST_CASE("load_dataset reports orphans by name") {
  TempDir dir("orphan");
  Dataset ds = testutil::tiny_dataset(2, 1);
  write_dataset(ds, dir.path());
  std::filesystem::remove(dir.path() / "B_stage0.csv");
  try {
    load_dataset(dir.path(), dir.path() / "targets.csv");
    FAIL("expected JoinError");
  } catch (const JoinError& e) {
    CHECK(std::string(e.what()).find("B_stage0") != std::string::npos);
  }
}

TEST_CASE("make_loo_folds partitions the dataset") {
  SECTION("24 oils x 10 stages") {
    Dataset ds = testutil::tiny_dataset(24, 10);
    auto folds = make_loo_folds(ds);
    REQUIRE(folds.size() == 24);
    std::set<std::size_t> all_val;
    for (const auto& fold : folds) {
      CHECK(fold.train_sample_ids.size() == 230);
      CHECK(fold.val_sample_ids.size() == 10);
      std::set<std::size_t> train(fold.train_sample_ids.begin(), fold.train_sample_ids.end());
      for (auto id : fold.val_sample_ids) {
        CHECK_FALSE(train.count(id));
        CHECK(ds.samples[id].oil_id == fold.held_out_oil);
        CHECK(all_val.insert(id).second);  // each sample validated exactly once
      }
    }
    CHECK(all_val.size() == ds.samples.size());
  }
  SECTION("2 oils x 3 stages") {
    Dataset ds = testutil::tiny_dataset(2, 3);
    auto folds = make_loo_folds(ds);
    REQUIRE(folds.size() == 2);
    for (const auto& fold : folds) {
      CHECK(fold.train_sample_ids.size() == 3);
      CHECK(fold.val_sample_ids.size() == 3);
    }
  }
  SECTION("single oil cannot cross-validate") {
    Dataset ds = testutil::tiny_dataset(1, 3);
    REQUIRE_THROWS_WITH(make_loo_folds(ds), Catch::Matchers::ContainsSubstring("at least 2 oils"));
  }
}

TEST_CASE("fold partition property holds for assorted sizes") {
  for (int oils : {2, 5, 11}) {
    Dataset ds = testutil::tiny_dataset(oils, 3, static_cast<std::uint64_t>(oils));
    auto folds = make_loo_folds(ds);
    std::vector<int> seen(ds.samples.size(), 0);
    for (const auto& fold : folds)
      for (auto id : fold.val_sample_ids) ++seen[id];
    for (int count : seen) CHECK(count == 1);
  }
}

TEST_CASE("validate_dataset rejects duplicates and missing stages") {
  Dataset ds = testutil::tiny_dataset(2, 2);
  SECTION("duplicate sample") {
    ds.samples.push_back(ds.samples.front());
    REQUIRE_THROWS_WITH(validate_dataset(ds), Catch::Matchers::ContainsSubstring("duplicate"));
  }
  SECTION("missing stage") {
    ds.samples.pop_back();
    REQUIRE_THROWS_AS(validate_dataset(ds), Error);
  }
}
