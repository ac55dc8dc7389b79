#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eemkit/common.hpp"
#include "eemkit/digest.hpp"
#include "eemkit/model.hpp"
#include "eemkit/preprocess.hpp"
#include "eemkit/trainer.hpp"

namespace eemkit {

// Flat dotted-key configuration. Defaults are always materialized so the
// resolved config (and its digest, stamped into every manifest) is fully
// explicit.
class RunConfig {
 public:
  static std::map<std::string, std::string> defaults(Target target, BackboneKind backbone) {
    std::map<std::string, std::string> d;
    d["target"] = to_string(target);
    d["backbone"] = to_string(backbone);
    d["seed"] = "0";
    d["jobs"] = "1";
    d["output"] = "runs";
    d["data.eem_dir"] = "";
    d["data.targets"] = "";
    d["rayleigh.mode"] = "keep";
    d["rayleigh.half_width_nm"] = "10";
    DomainAdaptationPlan plan = DomainAdaptationPlan::defaults(target, backbone);
    d["phase1.learning_rate"] = format_double(plan.phase1.learning_rate);
    d["phase1.batch_size"] = std::to_string(plan.phase1.batch_size);
    d["phase1.epochs"] = std::to_string(plan.phase1.epochs);
    d["phase2.learning_rate"] = format_double(plan.phase2.learning_rate);
    d["phase2.batch_size"] = std::to_string(plan.phase2.batch_size);
    d["phase2.epochs"] = std::to_string(plan.phase2.epochs);
    d["phase2.frozen_prefix_layers"] = std::to_string(plan.phase2_policy.frozen_prefix_layers);
    d["iea.fill"] = "0";
    d["iea.stride"] = std::to_string(kOcclusionStride);
    d["iea.sigma"] = "3";
    d["report.regulatory_limit"] = "unset";
    d["report.experimental_error_3sigma"] = "unset";
    return d;
  }

  // Precedence: defaults < config file < command-line overrides. Target and
  // backbone are resolved first because phase defaults depend on them.
  static RunConfig resolve(const std::map<std::string, std::string>& file_values,
                           const std::map<std::string, std::string>& cli_values) {
    auto pick = [&](const std::string& key, const std::string& fallback) {
      auto c = cli_values.find(key);
      if (c != cli_values.end()) return c->second;
      auto f = file_values.find(key);
      if (f != file_values.end()) return f->second;
      return fallback;
    };
    Target target = Target::k232;
    BackboneKind backbone = BackboneKind::compact_test_cnn;
    try {
      target = target_from_string(pick("target", "k232"));
      backbone = backbone_kind_from_string(pick("backbone", "test"));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }

    RunConfig config;
    config.values_ = defaults(target, backbone);
    auto merge = [&](const std::map<std::string, std::string>& src) {
      for (const auto& [k, v] : src) {
        if (!config.values_.count(k)) throw ConfigError("unknown config key '" + k + "'");
        config.values_[k] = v;
      }
    };
    merge(file_values);
    merge(cli_values);
    config.values_["target"] = to_string(target);
    config.values_["backbone"] = to_string(backbone);
    return config;
  }

  static std::map<std::string, std::string> parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::map<std::string, std::string> values;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::string_view view = trim(line);
      if (view.empty() || view.front() == '#') continue;
      auto eq = view.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
      std::string key(trim(view.substr(0, eq)));
      std::string value(trim(view.substr(eq + 1)));
      if (key.empty()) throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": empty key");
      values[key] = value;
    }
    return values;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    auto v = parse_double(get(key));
    if (!v) throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
    return *v;
  }

  long get_long(const std::string& key) const {
    auto v = parse_long(get(key));
    if (!v) throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
    return *v;
  }

  std::optional<double> get_optional_double(const std::string& key) const {
    const std::string& v = get(key);
    if (v.empty() || v == "unset") return std::nullopt;
    auto parsed = parse_double(v);
    if (!parsed) throw ConfigError("config key '" + key + "' is not a number: '" + v + "'");
    return parsed;
  }

  Target target() const { return target_from_string(get("target")); }
  BackboneKind backbone_kind() const { return backbone_kind_from_string(get("backbone")); }

  BackboneSpec backbone_spec() const {
    return backbone_kind() == BackboneKind::compact_test_cnn ? BackboneSpec::compact() : BackboneSpec::pretrained();
  }

  RayleighMode rayleigh_mode() const { return rayleigh_mode_from_string(get("rayleigh.mode")); }

  DomainAdaptationPlan plan() const {
    DomainAdaptationPlan plan;
    plan.target = target();
    plan.phase1 = TrainPhaseConfig{get_double("phase1.learning_rate"), static_cast<int>(get_long("phase1.batch_size")),
                                   static_cast<int>(get_long("phase1.epochs"))};
    plan.phase2 = TrainPhaseConfig{get_double("phase2.learning_rate"), static_cast<int>(get_long("phase2.batch_size")),
                                   static_cast<int>(get_long("phase2.epochs"))};
    plan.phase2_policy = TrainablePolicy::partial_unfreeze(static_cast<int>(get_long("phase2.frozen_prefix_layers")));
    validate_phase_config(plan.phase1);
    validate_phase_config(plan.phase2);
    return plan;
  }

  std::string digest() const {
    Fnv1a64 d;
    for (const auto& [k, v] : values_) {  // std::map: sorted, digest is order-stable
      d.update(k);
      d.update("=");
      d.update(v);
      d.update("\n");
    }
    return d.hex();
  }

  void write_resolved(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "# resolved configuration (digest " << digest() << ")\n";
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace eemkit
