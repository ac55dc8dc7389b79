// eemkit command-line front end: ingestion, training, prediction, occlusion
// analysis and report emission, driven by a flat-key config file that CLI
// flags override. Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eemkit/config.hpp"
#include "eemkit/eemio.hpp"
#include "eemkit/evalreport.hpp"
#include "eemkit/iea.hpp"
#include "eemkit/model.hpp"
#include "eemkit/preprocess.hpp"
#include "eemkit/synth.hpp"
#include "eemkit/trainer.hpp"

namespace fs = std::filesystem;
using namespace eemkit;

namespace {

struct CliState {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::map<std::string, std::string> direct;

  RunConfig resolve() const {
    std::map<std::string, std::string> file_values;
    if (!config_path.empty()) file_values = RunConfig::parse_file(config_path);
    std::map<std::string, std::string> cli_values = direct;
    for (const auto& kv : overrides) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cli_values[std::string(trim(std::string_view(kv).substr(0, eq)))] =
          std::string(trim(std::string_view(kv).substr(eq + 1)));
    }
    return RunConfig::resolve(file_values, cli_values);
  }
};

std::vector<PreprocessedImage> preprocess_dataset(const Dataset& ds, const RunConfig& cfg) {
  std::vector<PreprocessedImage> images;
  images.reserve(ds.samples.size());
  const RayleighMode mode = cfg.rayleigh_mode();
  const double half_width = cfg.get_double("rayleigh.half_width_nm");
  for (const auto& sample : ds.samples) images.push_back(preprocess_sample(sample, mode, half_width));
  return images;
}

Dataset load_configured_dataset(const RunConfig& cfg) {
  const std::string eem_dir = cfg.get("data.eem_dir");
  const std::string targets = cfg.get("data.targets");
  if (eem_dir.empty() || targets.empty())
    throw ConfigError("data.eem_dir and data.targets must be set (flags --eems/--targets or config file)");
  return load_dataset(eem_dir, targets);
}

std::uint8_t resolve_fill(const RunConfig& cfg, const PreprocessedImage& image) {
  const std::string& fill = cfg.get("iea.fill");
  if (fill == "mean") {
    double sum = 0.0;
    for (int y = 0; y < kImageSize; ++y)
      for (int x = 0; x < kImageSize; ++x) sum += image.at(0, y, x);
    return static_cast<std::uint8_t>(std::lround(sum / (kImageSize * kImageSize)));
  }
  auto v = parse_long(fill);
  if (!v || *v < 0 || *v > 255) throw ConfigError("iea.fill must be 0..255 or 'mean'");
  return static_cast<std::uint8_t>(*v);
}

int cmd_ingest(const RunConfig& cfg) {
  Dataset ds = load_configured_dataset(cfg);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  double k232_lo = lo, k232_hi = hi, k268_lo = lo, k268_hi = hi;
  for (const auto& s : ds.samples) {
    lo = std::min(lo, s.eem.intensity.minCoeff());
    hi = std::max(hi, s.eem.intensity.maxCoeff());
    k232_lo = std::min(k232_lo, s.targets.k232);
    k232_hi = std::max(k232_hi, s.targets.k232);
    k268_lo = std::min(k268_lo, s.targets.k268);
    k268_hi = std::max(k268_hi, s.targets.k268);
  }
  std::cout << ds.oil_ids.size() << " oils x " << ds.n_stages << " stages (" << ds.samples.size() << " samples)\n"
            << "intensity range: [" << format_double(lo) << ", " << format_double(hi) << "] counts\n"
            << "k232 range: [" << format_double(k232_lo) << ", " << format_double(k232_hi) << "]\n"
            << "k268 range: [" << format_double(k268_lo) << ", " << format_double(k268_hi) << "]\n"
            << "config digest: " << cfg.digest() << "\n";
  return 0;
}

int cmd_synth_generate(const RunConfig& cfg, const std::string& preset, const std::string& out,
                       std::optional<int> oils, std::optional<int> stages) {
  if (preset != "paper-like") throw ConfigError("unknown preset '" + preset + "' (available: paper-like)");
  if (out.empty()) throw ConfigError("--out is required");
  const auto seed = static_cast<std::uint64_t>(cfg.get_long("seed"));
  SynthSpec spec = paper_like_preset(seed, oils.value_or(24), stages.value_or(10));
  Dataset ds = generate_dataset(spec);
  write_dataset(ds, out);

  const TileRegion region = informative_tile_region(spec);
  std::vector<std::pair<std::string, std::string>> manifest;
  manifest.emplace_back("preset", preset);
  manifest.emplace_back("seed", std::to_string(seed));
  manifest.emplace_back("oils", std::to_string(spec.n_oils));
  manifest.emplace_back("stages", std::to_string(spec.n_stages));
  manifest.emplace_back("config_digest", cfg.digest());
  manifest.emplace_back("informative_tiles",
                        "rows " + std::to_string(region.row_lo) + ".." + std::to_string(region.row_hi) + ", cols " +
                            std::to_string(region.col_lo) + ".." + std::to_string(region.col_hi));
  write_manifest(manifest, fs::path(out) / "manifest.txt");
  std::cout << "wrote " << ds.samples.size() << " EEMs + targets.csv to " << out << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& fold_selector, std::string run_id) {
  Dataset ds = load_configured_dataset(cfg);
  const auto images = preprocess_dataset(ds, cfg);
  const DomainAdaptationPlan plan = cfg.plan();
  const BackboneSpec backbone = cfg.backbone_spec();
  const auto seed_base = static_cast<std::uint64_t>(cfg.get_long("seed"));
  const int jobs = static_cast<int>(cfg.get_long("jobs"));

  if (run_id.empty()) run_id = to_string(plan.target) + "-seed" + std::to_string(seed_base);
  const fs::path run_dir = fs::path(cfg.get("output")) / run_id;
  fs::create_directories(run_dir);
  cfg.write_resolved(run_dir / "config.resolved.txt");

  if (fold_selector == "all") {
    LooResult result = run_loo(ds, images, plan, backbone, seed_base, &run_dir, jobs, cfg.digest());
    std::cout << "run " << run_id << ": " << result.report.rows.size() << " predictions, global MAE "
              << format_double(result.report.global_mae) << "\n";
    if (!result.failed_folds.empty()) {
      std::cout << "failed folds:";
      for (const auto& oil : result.failed_folds) std::cout << ' ' << oil;
      std::cout << "\n";
      return 1;
    }
    return 0;
  }

  const auto folds = make_loo_folds(ds);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (folds[f].held_out_oil != fold_selector) continue;
    const fs::path fold_dir = run_dir / to_string(plan.target) / fold_selector;
    FoldResult result = run_domain_adaptation(folds[f], ds, images, plan, backbone, seed_base + f, &fold_dir,
                                              cfg.digest());
    double mae = 0.0;
    for (const auto& row : result.val_rows) mae += row.ae / static_cast<double>(result.val_rows.size());
    std::cout << "fold " << fold_selector << ": validation MAE " << format_double(mae) << ", checkpoint in "
              << fold_dir.string() << "\n";
    return 0;
  }
  throw Error("no oil named '" + fold_selector + "' in the dataset");
}

int cmd_predict(const RunConfig& cfg, const std::string& checkpoint_dir, const std::vector<std::string>& eem_files) {
  if (eem_files.empty()) throw ConfigError("predict needs at least one --eem file");
  ModelCheckpoint checkpoint = load_checkpoint(checkpoint_dir);
  const RayleighMode mode = rayleigh_mode_from_string(checkpoint.manifest_value("rayleigh_mode"));
  const double half_width = cfg.get_double("rayleigh.half_width_nm");
  std::cout << "file,prediction\n";
  for (const auto& file : eem_files) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open " + file);
    OilSample sample;
    sample.oil_id = fs::path(file).stem().string();
    sample.eem = parse_eem_csv(in);
    PreprocessedImage image = preprocess_sample(sample, mode, half_width);
    std::cout << file << ',' << format_double(checkpoint.model.predict(image)) << "\n";
  }
  return 0;
}

void write_overlay_files(const OcclusionMap& map, const OilSample& sample, const RunConfig& cfg, const fs::path& out) {
  write_occlusion_map(map, out / ("occlusion_" + map.sample_label + ".csv"));
  auto [top, side] = band_importance(map);
  write_band_importance(top, side, out / ("bands_" + map.sample_label + ".csv"));
  {
    std::ofstream heat(out / ("overlay_" + map.sample_label + "_heatmap.csv"));
    if (!heat) throw Error("cannot write overlay heatmap");
    const Eigen::MatrixXd smoothed = smooth_map(map, cfg.get_double("iea.sigma"));
    for (Eigen::Index r = 0; r < smoothed.rows(); ++r) {
      for (Eigen::Index c = 0; c < smoothed.cols(); ++c) heat << (c > 0 ? "," : "") << format_double(smoothed(r, c));
      heat << "\n";
    }
  }
  const auto most = std::max_element(side.bars.begin(), side.bars.end(),
                                     [](const BandBar& a, const BandBar& b) { return a.importance < b.importance; });
  SpectralCut cut = spectral_cut(sample.eem, (most->band_lo_nm + most->band_hi_nm) / 2.0);
  std::ofstream cuts(out / ("overlay_" + map.sample_label + "_cut.csv"));
  if (!cuts) throw Error("cannot write overlay cut");
  cuts << "requested_ex_nm,actual_ex_nm,emission_nm,intensity\n";
  for (std::size_t j = 0; j < cut.emission_nm.size(); ++j)
    cuts << format_double(cut.requested_ex_nm) << ',' << format_double(cut.actual_ex_nm) << ','
         << format_double(cut.emission_nm[j]) << ',' << format_double(cut.intensity[j]) << "\n";
}

int cmd_iea(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& sample_selector,
            const std::string& run_dir, bool average_last_stage, bool allow_train_oil, const std::string& out_arg) {
  Dataset ds = load_configured_dataset(cfg);
  const auto images = preprocess_dataset(ds, cfg);
  const int stride = static_cast<int>(cfg.get_long("iea.stride"));
  const fs::path out = out_arg.empty() ? fs::path("iea_out") : fs::path(out_arg);
  fs::create_directories(out);

  auto sweep_for = [&](ModelCheckpoint& checkpoint, std::size_t sample_index) {
    const OilSample& sample = ds.samples[sample_index];
    const Target target = target_from_string(checkpoint.manifest_value("target"));
    return occlusion_sweep(checkpoint.model, images[sample_index], target_value(sample.targets, target), target,
                           resolve_fill(cfg, images[sample_index]), kOcclusionTileSize, stride);
  };

  if (average_last_stage) {
    if (run_dir.empty()) throw ConfigError("--average-last-stage needs --run pointing at a finished LOO run");
    const Target target = cfg.target();
    std::vector<OcclusionMap> maps;
    for (const auto& oil : ds.oil_ids) {
      const fs::path fold_dir = fs::path(run_dir) / to_string(target) / oil;
      if (!fs::exists(fold_dir / "checkpoint.bin")) throw Error("missing checkpoint for oil " + oil + " under " + run_dir);
      ModelCheckpoint checkpoint = load_checkpoint(fold_dir);
      for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.samples[i].oil_id == oil && ds.samples[i].stage_index == ds.n_stages - 1) {
          maps.push_back(sweep_for(checkpoint, i));
          break;
        }
    }
    OcclusionMap averaged = average_maps(maps, "last-stage-average");
    write_occlusion_map(averaged, out / "occlusion_average_last_stage.csv");
    auto [top, side] = band_importance(averaged);
    write_band_importance(top, side, out / "bands_average_last_stage.csv");
    std::cout << "averaged " << maps.size() << " last-stage maps into " << out.string() << "\n";
    return 0;
  }

  if (checkpoint_dir.empty()) throw ConfigError("--checkpoint is required");
  ModelCheckpoint checkpoint = load_checkpoint(checkpoint_dir);
  const std::string fold_oil = checkpoint.manifest_value("fold_oil");

  std::size_t sample_index = ds.samples.size();
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].oil_id + "_stage" + std::to_string(ds.samples[i].stage_index) == sample_selector) sample_index = i;
  if (sample_index == ds.samples.size()) throw Error("no sample '" + sample_selector + "' (expected <oil>_stage<k>)");

  if (ds.samples[sample_index].oil_id != fold_oil && !allow_train_oil)
    throw Error("sample " + sample_selector + " belongs to a training oil of this checkpoint (fold oil " + fold_oil +
                "); pass --allow-train-oil to explain a training sample anyway");

  OcclusionMap map = sweep_for(checkpoint, sample_index);
  if (stride == kOcclusionTileSize) {
    write_overlay_files(map, ds.samples[sample_index], cfg, out);
  } else {
    write_occlusion_map(map, out / ("occlusion_" + map.sample_label + ".csv"));
    std::cout << "overlapping sweep (stride " << stride << "): raw map only, bands/overlay skipped\n";
  }
  std::cout << "baseline prediction " << format_double(map.baseline_prediction) << ", baseline AE "
            << format_double(map.baseline_ae) << ", outputs in " << out.string() << "\n";
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::string& run_dir, const std::vector<std::string>& map_files) {
  const Target target = cfg.target();
  const fs::path report_path = fs::path(run_dir) / to_string(target) / "report.csv";
  if (!fs::exists(report_path)) throw Error("no report at " + report_path.string() + " (run train first)");
  EvalReport report = read_report_csv(report_path);

  FigureConfig figure_config;
  figure_config.regulatory_limit = cfg.get_optional_double("report.regulatory_limit");
  figure_config.experimental_error_3sigma = cfg.get_optional_double("report.experimental_error_3sigma");
  figure_config.run_digest = cfg.digest();

  std::vector<OcclusionMap> maps;
  for (const auto& file : map_files) maps.push_back(read_occlusion_map(file));

  std::optional<Dataset> ds;
  if (!cfg.get("data.eem_dir").empty() && !cfg.get("data.targets").empty()) ds = load_configured_dataset(cfg);

  auto written = emit_figures(report, run_dir, figure_config, maps.empty() ? nullptr : &maps,
                              ds ? &*ds : nullptr);
  std::cout << "wrote " << written.size() << " figure data files under "
            << (fs::path(run_dir) / "figures" / to_string(target)).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EEM regression and occlusion-interpretability toolkit"};
  app.fallthrough();
  app.require_subcommand(1);

  CliState state;
  app.add_option("--config", state.config_path, "config file with flat dotted keys");
  app.add_option("--set", state.overrides, "override a config key (key=value), repeatable");
  std::string seed, output, jobs, backbone;
  app.add_option("--seed", seed, "run seed");
  app.add_option("--output", output, "output root for run directories");
  app.add_option("--jobs", jobs, "parallel fold workers");
  app.add_option("--backbone", backbone, "pretrained|test");

  auto* ingest = app.add_subcommand("ingest", "load a dataset and print its census");
  auto* train = app.add_subcommand("train", "run two-phase domain adaptation");
  auto* predict = app.add_subcommand("predict", "predict indicators from EEM files with a checkpoint");
  auto* iea = app.add_subcommand("iea", "occlusion sweep: heatmap, band importances, overlay data");
  auto* report = app.add_subcommand("report", "emit figure data files from a finished run");
  auto* synth = app.add_subcommand("synth", "synthetic datasets");
  auto* synth_generate = synth->add_subcommand("generate", "generate a synthetic dataset");
  synth->require_subcommand(1);

  std::string eems, targets;
  for (auto* cmd : {ingest, train, iea}) {
    cmd->add_option("--eems", eems, "directory of EEM CSV files");
    cmd->add_option("--targets", targets, "targets CSV");
  }
  report->add_option("--eems", eems, "directory of EEM CSV files (for overlays)");
  report->add_option("--targets", targets, "targets CSV (for overlays)");

  std::string target_name, fold = "all", run_id;
  train->add_option("--target", target_name, "k232|k268");
  train->add_option("--fold", fold, "held-out oil id, or 'all'");
  train->add_option("--run-id", run_id, "run directory name (default <target>-seed<seed>)");

  std::string checkpoint_dir;
  std::vector<std::string> eem_files;
  predict->add_option("--checkpoint", checkpoint_dir, "checkpoint directory");
  predict->add_option("--eem", eem_files, "EEM CSV file, repeatable");

  std::string sample_selector, iea_run, iea_out, iea_target;
  bool average_last_stage = false, allow_train_oil = false;
  iea->add_option("--checkpoint", checkpoint_dir, "checkpoint directory");
  iea->add_option("--sample", sample_selector, "<oil>_stage<k>");
  iea->add_option("--run", iea_run, "finished LOO run directory (for --average-last-stage)");
  iea->add_option("--target", iea_target, "k232|k268 (for --average-last-stage)");
  iea->add_flag("--average-last-stage", average_last_stage, "average per-oil last-stage maps across all folds");
  iea->add_flag("--allow-train-oil", allow_train_oil, "permit explaining a sample the checkpoint trained on");
  iea->add_option("--out", iea_out, "output directory (default iea_out)");

  std::string report_run;
  std::vector<std::string> map_files;
  report->add_option("--run", report_run, "run directory");
  report->add_option("--target", iea_target, "k232|k268");
  report->add_option("--map", map_files, "occlusion map CSV, repeatable (enables fig4/fig5)");

  std::string preset = "paper-like", synth_out;
  int synth_oils = -1, synth_stages = -1;
  synth_generate->add_option("--preset", preset, "preset name (paper-like)");
  synth_generate->add_option("--out", synth_out, "output directory")->required();
  synth_generate->add_option("--oils", synth_oils, "number of oils (default 24)");
  synth_generate->add_option("--stages", synth_stages, "number of stages (default 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (!seed.empty()) state.direct["seed"] = seed;
    if (!output.empty()) state.direct["output"] = output;
    if (!jobs.empty()) state.direct["jobs"] = jobs;
    if (!backbone.empty()) state.direct["backbone"] = backbone;
    if (!eems.empty()) state.direct["data.eem_dir"] = eems;
    if (!targets.empty()) state.direct["data.targets"] = targets;
    if (!target_name.empty()) state.direct["target"] = target_name;
    if (!iea_target.empty()) state.direct["target"] = iea_target;
    RunConfig cfg = state.resolve();

    if (*ingest) return cmd_ingest(cfg);
    if (*train) return cmd_train(cfg, fold, run_id);
    if (*predict) return cmd_predict(cfg, checkpoint_dir, eem_files);
    if (*iea) return cmd_iea(cfg, checkpoint_dir, sample_selector, iea_run, average_last_stage, allow_train_oil, iea_out);
    if (*report) return cmd_report(cfg, report_run, map_files);
    if (*synth_generate)
      return cmd_synth_generate(cfg, preset, synth_out,
                                synth_oils > 0 ? std::optional<int>(synth_oils) : std::nullopt,
                                synth_stages > 0 ? std::optional<int>(synth_stages) : std::nullopt);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
