#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "eemkit/digest.hpp"
#include "eemkit/evalreport.hpp"
#include "eemkit/model.hpp"
#include "eemkit/preprocess.hpp"

namespace eemkit {

// Loss is always MSE and the optimizer is always Adam; only these knobs vary
// between phases.
struct TrainPhaseConfig {
  double learning_rate = 1e-4;
  int batch_size = 230;
  int epochs = 1;
};

inline void validate_phase_config(const TrainPhaseConfig& c) {
  if (!(c.learning_rate > 0.0)) throw Error("learning_rate must be > 0");
  if (c.batch_size < 1) throw Error("batch_size must be >= 1");
  if (c.epochs < 1) throw Error("epochs must be >= 1");
}

inline constexpr AdamHyper kAdamDefaults{1e-3, 0.9, 0.999, 1e-7};

struct DomainAdaptationPlan {
  Target target = Target::k232;
  TrainPhaseConfig phase1;
  TrainPhaseConfig phase2;
  TrainablePolicy phase2_policy = TrainablePolicy::partial_unfreeze(kMobileNetV2DefaultFrozenPrefix);

  // Production schedules. Phase I is shared; phase II differs per target.
  static DomainAdaptationPlan defaults(Target target, BackboneKind backbone = BackboneKind::pretrained_mobilenet_v2) {
    DomainAdaptationPlan plan;
    plan.target = target;
    plan.phase1 = TrainPhaseConfig{1e-4, 230, 1000};
    plan.phase2 = target == Target::k232 ? TrainPhaseConfig{1e-6, 230, 500} : TrainPhaseConfig{1e-5, 32, 500};
    plan.phase2_policy = TrainablePolicy::partial_unfreeze(
        backbone == BackboneKind::pretrained_mobilenet_v2 ? kMobileNetV2DefaultFrozenPrefix
                                                          : kCompactDefaultFrozenPrefix);
    return plan;
  }

  std::string digest() const {
    Fnv1a64 d;
    d.update(to_string(target));
    d.update_value(phase1.learning_rate).update_value(phase1.batch_size).update_value(phase1.epochs);
    d.update_value(phase2.learning_rate).update_value(phase2.batch_size).update_value(phase2.epochs);
    d.update(to_string(phase2_policy));
    return d.hex();
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  double final_train_loss() const { return records.empty() ? 0.0 : records.back().train_loss; }
};

inline void write_history_csv(const TrainHistory& phase1, const TrainHistory& phase2,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "phase,epoch,train_loss,val_loss\n";
  auto dump = [&](int phase, const TrainHistory& h) {
    for (const auto& r : h.records)
      out << phase << ',' << r.epoch << ',' << format_double(r.train_loss) << ','
          << (r.val_loss ? format_double(*r.val_loss) : "") << "\n";
  };
  dump(1, phase1);
  dump(2, phase2);
}

namespace detail {

inline double mse_over(const Predictor& model, const std::vector<const PreprocessedImage*>& images,
                       const std::vector<double>& targets) {
  double loss = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    double err = model.predict(*images[i]) - targets[i];
    loss += err * err / static_cast<double>(images.size());
  }
  return loss;
}

inline MatF gather_columns(const MatF& all, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  MatF out(all.rows(), static_cast<Eigen::Index>(end - begin));
  for (std::size_t i = begin; i < end; ++i) out.col(static_cast<Eigen::Index>(i - begin)) = all.col(static_cast<Eigen::Index>(order[i]));
  return out;
}

}  // namespace detail

// One training phase: seeded reshuffle every epoch, mini-batches of
// config.batch_size (a batch size >= the train-set size means one full-batch
// step per epoch), per-epoch diagnostic validation loss. When the backbone is
// fully frozen the backbone features are computed once and reused.
inline TrainHistory train_phase(PredictorModel& model, const std::vector<const PreprocessedImage*>& train_images,
                                const std::vector<double>& train_targets,
                                const std::vector<const PreprocessedImage*>& val_images,
                                const std::vector<double>& val_targets, const TrainPhaseConfig& config,
                                std::uint64_t seed) {
  validate_phase_config(config);
  if (train_images.empty()) throw Error("empty train set");
  if (train_images.size() != train_targets.size()) throw Error("train images/targets size mismatch");

  const std::size_t n = train_images.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  AdamHyper hp = kAdamDefaults;
  hp.learning_rate = config.learning_rate;

  std::mt19937_64 shuffle_rng(mix_seed(seed, 0x5u));
  std::mt19937_64 dropout_rng(mix_seed(seed, 0xDu));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  const bool cached = model.backbone_frozen();
  MatF train_features, val_features;
  if (cached) {
    train_features.resize(model.feature_width(), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) train_features.col(static_cast<Eigen::Index>(i)) = model.extract_features(*train_images[i]);
    if (!val_images.empty()) {
      val_features.resize(model.feature_width(), static_cast<Eigen::Index>(val_images.size()));
      for (std::size_t i = 0; i < val_images.size(); ++i)
        val_features.col(static_cast<Eigen::Index>(i)) = model.extract_features(*val_images[i]);
    }
  }

  TrainHistory history;
  history.records.reserve(static_cast<std::size_t>(config.epochs));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += batch, ++batch_index) {
      const std::size_t end = std::min(begin + batch, n);
      std::vector<double> batch_targets;
      batch_targets.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch_targets.push_back(train_targets[order[i]]);
      double loss;
      if (cached) {
        loss = model.train_batch_on_features(detail::gather_columns(train_features, order, begin, end), batch_targets,
                                             dropout_rng, hp);
      } else {
        std::vector<const PreprocessedImage*> batch_images;
        batch_images.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) batch_images.push_back(train_images[order[i]]);
        loss = model.train_batch(batch_images, batch_targets, dropout_rng, hp);
      }
      if (!std::isfinite(loss))
        throw Error("non-finite training loss " + format_double(loss) + " at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(batch_index));
      loss_sum += loss * static_cast<double>(end - begin);
      seen += end - begin;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(seen);
    if (!val_images.empty())
      record.val_loss = cached ? model.mse_on_features(val_features, val_targets)
                               : detail::mse_over(model, val_images, val_targets);
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.records.push_back(record);
  }
  return history;
}

// --- Checkpoints ----------------------------------------------------------------

struct ModelCheckpoint {
  PredictorModel model;
  std::vector<std::pair<std::string, std::string>> manifest;

  std::string manifest_value(const std::string& key) const {
    for (const auto& [k, v] : manifest)
      if (k == key) return v;
    throw Error("manifest key '" + key + "' missing");
  }
};

inline void write_manifest(const std::vector<std::pair<std::string, std::string>>& manifest,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [k, v] : manifest) out << k << " = " << v << "\n";
}

inline std::vector<std::pair<std::string, std::string>> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> manifest;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    manifest.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 3))));
  }
  return manifest;
}

// Weights go through a temp file + rename so a failed write never leaves a
// partial checkpoint behind.
inline void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path tmp = dir / "checkpoint.bin.tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    save_weights(checkpoint.model, out);
    if (!out.flush()) {
      fs::remove(tmp);
      throw Error("checkpoint write failed: " + tmp.string());
    }
  }
  fs::rename(tmp, dir / "checkpoint.bin");
  write_manifest(checkpoint.manifest, dir / "manifest.txt");
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  ModelCheckpoint checkpoint;
  checkpoint.manifest = read_manifest(dir / "manifest.txt");
  const std::string backbone = checkpoint.manifest_value("backbone");
  const auto seed = static_cast<std::uint64_t>(std::stoull(checkpoint.manifest_value("seed")));
  BackboneSpec spec = backbone == to_string(BackboneKind::compact_test_cnn) ? BackboneSpec::compact()
                                                                            : BackboneSpec::pretrained();
  checkpoint.model = build_regressor(spec, seed);
  std::ifstream in(dir / "checkpoint.bin", std::ios::binary);
  if (!in) throw Error("cannot open " + (dir / "checkpoint.bin").string());
  load_weights(checkpoint.model, in);
  return checkpoint;
}

// --- Domain adaptation ------------------------------------------------------------

struct FoldResult {
  ModelCheckpoint checkpoint;
  TrainHistory phase1_history;
  TrainHistory phase2_history;
  std::vector<EvalRow> val_rows;
};

// Phase I (head only on the frozen backbone), then Phase II after applying
// the plan's unfreeze policy. Frozen tensors are digest-checked around each
// phase.
inline FoldResult run_domain_adaptation(const LOOFold& fold, const Dataset& dataset,
                                        const std::vector<PreprocessedImage>& images,
                                        const DomainAdaptationPlan& plan, const BackboneSpec& backbone,
                                        std::uint64_t seed, const std::filesystem::path* out_dir = nullptr,
                                        const std::string& config_digest = "") {
  if (images.size() != dataset.samples.size()) throw Error("images not aligned with dataset samples");

  std::vector<const PreprocessedImage*> train_images, val_images;
  std::vector<double> train_targets, val_targets;
  for (std::size_t id : fold.train_sample_ids) {
    train_images.push_back(&images[id]);
    train_targets.push_back(target_value(dataset.samples[id].targets, plan.target));
  }
  for (std::size_t id : fold.val_sample_ids) {
    val_images.push_back(&images[id]);
    val_targets.push_back(target_value(dataset.samples[id].targets, plan.target));
  }

  FoldResult result;
  PredictorModel model = build_regressor(backbone, seed);
  model.set_trainable(TrainablePolicy::head_only());
  const TrainableCensus census1 = model.census();

  const std::string backbone_before = model.backbone_digest();
  result.phase1_history =
      train_phase(model, train_images, train_targets, val_images, val_targets, plan.phase1, mix_seed(seed, 1));
  if (model.backbone_digest() != backbone_before)
    throw Error("frozen backbone changed during phase I (fold " + fold.held_out_oil + ")");

  model.set_trainable(plan.phase2_policy);
  const TrainableCensus census2 = model.census();
  const std::string frozen_before = model.frozen_digest();
  result.phase2_history =
      train_phase(model, train_images, train_targets, val_images, val_targets, plan.phase2, mix_seed(seed, 2));
  if (model.frozen_digest() != frozen_before)
    throw Error("frozen prefix changed during phase II (fold " + fold.held_out_oil + ")");

  for (std::size_t i = 0; i < fold.val_sample_ids.size(); ++i) {
    const OilSample& sample = dataset.samples[fold.val_sample_ids[i]];
    if (sample.oil_id != fold.held_out_oil) throw Error("fold validation sample from a different oil");
    EvalRow row;
    row.oil_id = sample.oil_id;
    row.stage_index = sample.stage_index;
    row.target = plan.target;
    row.true_value = val_targets[i];
    row.prediction = model.predict(*val_images[i]);
    row.ae = std::abs(row.prediction - row.true_value);
    result.val_rows.push_back(std::move(row));
  }

  auto& manifest = result.checkpoint.manifest;
  manifest.emplace_back("target", to_string(plan.target));
  manifest.emplace_back("fold_oil", fold.held_out_oil);
  manifest.emplace_back("backbone", to_string(backbone.kind));
  manifest.emplace_back("backbone_layers", std::to_string(backbone.n_layers));
  manifest.emplace_back("pretrained_source", backbone.pretrained_source);
  manifest.emplace_back("seed", std::to_string(seed));
  manifest.emplace_back("rayleigh_mode", to_string(images.empty() ? RayleighMode::keep : images.front().rayleigh_mode));
  manifest.emplace_back("plan_digest", plan.digest());
  if (!config_digest.empty()) manifest.emplace_back("config_digest", config_digest);
  manifest.emplace_back("optimizer", "adam(beta1=0.9, beta2=0.999, epsilon=1e-07)");
  manifest.emplace_back("phase1.policy", "head_only");
  manifest.emplace_back("phase1.learning_rate", format_double(plan.phase1.learning_rate));
  manifest.emplace_back("phase1.batch_size", std::to_string(plan.phase1.batch_size));
  manifest.emplace_back("phase1.epochs", std::to_string(plan.phase1.epochs));
  manifest.emplace_back("phase1.census", std::to_string(census1.n_trainable) + " trainable / " +
                                             std::to_string(census1.n_frozen) + " frozen");
  manifest.emplace_back("phase1.final_train_loss", format_double(result.phase1_history.final_train_loss()));
  manifest.emplace_back("phase2.policy", to_string(plan.phase2_policy));
  manifest.emplace_back("phase2.learning_rate", format_double(plan.phase2.learning_rate));
  manifest.emplace_back("phase2.batch_size", std::to_string(plan.phase2.batch_size));
  manifest.emplace_back("phase2.epochs", std::to_string(plan.phase2.epochs));
  manifest.emplace_back("phase2.census", std::to_string(census2.n_trainable) + " trainable / " +
                                             std::to_string(census2.n_frozen) + " frozen");
  manifest.emplace_back("phase2.final_train_loss", format_double(result.phase2_history.final_train_loss()));
  manifest.emplace_back("epochs_completed", std::to_string(plan.phase1.epochs + plan.phase2.epochs));
  result.checkpoint.model = std::move(model);
  manifest.emplace_back("weight_digest", result.checkpoint.model.weight_digest());

  if (out_dir != nullptr) {
    save_checkpoint(result.checkpoint, *out_dir);
    write_history_csv(result.phase1_history, result.phase2_history, *out_dir / "history.csv");
  }
  return result;
}

struct LooResult {
  std::vector<std::optional<FoldResult>> folds;  // by fold index (oil order)
  EvalReport report;
  std::vector<std::string> failed_folds;
};

// Runs every fold (per-fold seed = seed_base + fold index) and assembles the
// cross-validated report. Folds are independent; `jobs` threads pick them up
// in any order without affecting results. A failed fold is recorded and the
// remaining folds still run.
inline LooResult run_loo(const Dataset& dataset, const std::vector<PreprocessedImage>& images,
                         const DomainAdaptationPlan& plan, const BackboneSpec& backbone, std::uint64_t seed_base,
                         const std::filesystem::path* run_dir = nullptr, int jobs = 1,
                         const std::string& config_digest = "", const WarnFn& warn = {}) {
  const std::vector<LOOFold> folds = make_loo_folds(dataset);
  LooResult result;
  result.folds.resize(folds.size());
  std::vector<std::string> errors(folds.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t f = next.fetch_add(1);
      if (f >= folds.size()) return;
      const std::uint64_t fold_seed = seed_base + f;
      try {
        std::filesystem::path fold_dir;
        const std::filesystem::path* out = nullptr;
        if (run_dir != nullptr) {
          fold_dir = *run_dir / to_string(plan.target) / folds[f].held_out_oil;
          out = &fold_dir;
        }
        result.folds[f] = run_domain_adaptation(folds[f], dataset, images, plan, backbone, fold_seed, out, config_digest);
      } catch (const std::exception& e) {
        errors[f] = e.what();
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(folds.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<EvalRow> rows;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (result.folds[f]) {
      for (const auto& row : result.folds[f]->val_rows) rows.push_back(row);
    } else {
      result.failed_folds.push_back(folds[f].held_out_oil);
      emit_warning(warn, "fold " + folds[f].held_out_oil + " failed: " + errors[f]);
    }
  }
  if (rows.empty()) throw Error("all folds failed");
  result.report = compute_metrics(std::move(rows), plan.digest(), seed_base);
  result.report.failed_folds = result.failed_folds;
  result.report.complete = result.failed_folds.empty();

  if (run_dir != nullptr) {
    const std::filesystem::path target_dir = *run_dir / to_string(plan.target);
    std::filesystem::create_directories(target_dir);
    write_report_csv(result.report, target_dir / "report.csv");
    std::vector<std::pair<std::string, std::string>> manifest;
    manifest.emplace_back("target", to_string(plan.target));
    manifest.emplace_back("global_mae", format_double(result.report.global_mae));
    manifest.emplace_back("plan_digest", plan.digest());
    if (!config_digest.empty()) manifest.emplace_back("config_digest", config_digest);
    manifest.emplace_back("seed_base", std::to_string(seed_base));
    manifest.emplace_back("complete", result.report.complete ? "true" : "false");
    if (!result.failed_folds.empty()) {
      std::string failed;
      for (const auto& oil : result.failed_folds) failed += (failed.empty() ? "" : ",") + oil;
      manifest.emplace_back("failed_folds", failed);
    }
    for (const auto& [oil, mae] : result.report.per_oil_mae) manifest.emplace_back("mae." + oil, format_double(mae));
    write_manifest(manifest, target_dir / "report.manifest.txt");
  }
  return result;
}

}  // namespace eemkit
