// lorm: experiment runner and offline merge tool.
//
//   lorm run [--config FILE] [--<key> VALUE ...] [--out FILE] [--events FILE] [--manifest FILE]
//   lorm suite [--config FILE] [--seeds 0,1,2] [--strategies A,B] [--<key> VALUE ...] [--out FILE]
//   lorm merge --kind regmean|lora-b|lora-a|task [--gamma G] [--ridge R] --out FILE SNAPSHOT...
//   lorm print-defaults
//
// Errors go to stderr as one JSON object and the exit code is nonzero.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "lorm/lorm.hpp"

using lorm::json;

namespace {

constexpr int kExitError = 2;
constexpr int kExitUsage = 64;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw lorm::ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw lorm::ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw lorm::ConfigError("cannot write " + path);
  out << text << '\n';
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(item);
  return parts;
}

/// Converts a flag value to JSON with the type of the default it overrides.
json flag_value(const std::string& key, const json& like, const std::string& raw) {
  try {
    if (like.is_string()) return raw;
    if (like.is_array()) {
      if (!raw.empty() && raw.front() == '[') return json::parse(raw);
      json arr = json::array();
      for (const auto& p : split_commas(raw)) arr.push_back(json::parse(p));
      return arr;
    }
    return json::parse(raw);
  } catch (const json::exception&) {
    throw lorm::ConfigError("--" + key + ": cannot parse '" + raw + "'");
  }
}

/// One CLI option per config key; values are collected as strings and typed later.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "JSON config file; flags override its keys");
    const json defaults = lorm::to_json(lorm::ExperimentConfig{});
    for (const auto& [key, value] : defaults.items()) {
      app.add_option("--" + key, values[key], "config key " + key + " (default " + value.dump() + ")");
    }
  }

  lorm::ExperimentConfig resolve(const CLI::App& app) const {
    lorm::ExperimentConfig c;
    if (!config_file.empty()) c = lorm::config_from_json(read_json_file(config_file), c);
    const json defaults = lorm::to_json(c);
    json overrides = json::object();
    for (const auto& [key, raw] : values)
      if (app.count("--" + key) > 0) overrides[key] = flag_value(key, defaults.at(key), raw);
    c = lorm::config_from_json(overrides, c);
    lorm::validate(c);
    return c;
  }
};

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-form LoRA merging in a federated class-incremental simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", lorm::kVersion);

  auto* run = app.add_subcommand("run", "run one experiment and write its report");
  ConfigFlags run_flags;
  run_flags.attach(*run);
  std::string run_out, events_out, manifest_out;
  run->add_option("--out", run_out, "report file (default stdout)");
  run->add_option("--events", events_out, "round-by-round event log, JSON lines");
  run->add_option("--manifest", manifest_out, "client partition manifest");

  auto* suite = app.add_subcommand("suite", "run the ablation ladder over several seeds");
  ConfigFlags suite_flags;
  suite_flags.attach(*suite);
  std::string seeds_raw = "0,1,2,3,4", strategies_raw, suite_out;
  suite->add_option("--seeds", seeds_raw, "comma-separated seeds (at least 3)");
  suite->add_option("--strategies", strategies_raw, "comma-separated strategies (default: all)");
  suite->add_option("--out", suite_out, "suite report file (default stdout)");

  auto* merge = app.add_subcommand("merge", "merge layer snapshots offline");
  std::string kind = "regmean", merge_out, report_out;
  double gamma = 1.0, ridge = lorm::kDefaultRidge;
  std::vector<std::string> inputs;
  merge->add_option("--kind", kind, "regmean, lora-b, lora-a or task");
  merge->add_option("--gamma", gamma, "off-diagonal Gram decay in [0,1]");
  merge->add_option("--ridge", ridge, "relative ridge on the Gram sum");
  merge->add_option("--out", merge_out, "merged snapshot file")->required();
  merge->add_option("--report", report_out, "objective report file (default stdout)");
  merge->add_option("snapshots", inputs, "input snapshot files")->required();

  auto* defaults = app.add_subcommand("print-defaults", "print the default config as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitUsage);
  }

  try {
    if (defaults->parsed()) {
      std::cout << lorm::to_json(lorm::ExperimentConfig{}).dump(2) << '\n';
    } else if (run->parsed()) {
      lorm::RunReport report = lorm::run_experiment(run_flags.resolve(*run));
      if (!events_out.empty()) {
        std::ostringstream lines;
        for (std::size_t i = 0; i < report.events.size(); ++i)
          lines << (i ? "\n" : "") << lorm::to_json(report.events[i]).dump();
        write_text(events_out, lines.str());
      }
      if (!manifest_out.empty()) write_text(manifest_out, lorm::partition_manifest(report.partitions).dump(2));
      write_text(run_out, report.to_json().dump(2));
    } else if (suite->parsed()) {
      lorm::ExperimentConfig base = suite_flags.resolve(*suite);
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_commas(seeds_raw)) {
        try {
          seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          throw lorm::ConfigError("--seeds: cannot parse '" + s + "'");
        }
      }
      std::vector<std::string> strategies =
          strategies_raw.empty() ? lorm::ablation_strategies() : split_commas(strategies_raw);
      for (const auto& s : strategies) lorm::parse_strategy(s);
      lorm::SuiteReport report = lorm::run_ablation_suite(base, seeds, strategies);
      json j = report.to_json();
      j["config"] = lorm::to_json(base);
      j["version"] = lorm::kVersion;
      write_text(suite_out, j.dump(2));
    } else if (merge->parsed()) {
      std::vector<lorm::Snapshot> snaps;
      for (const auto& path : inputs) snaps.push_back(lorm::snapshot_from_json(read_json_file(path), path));
      auto result = lorm::merge_offline(snaps, lorm::parse_merge_kind(kind), gamma, ridge);
      write_text(merge_out, lorm::to_json(result.merged).dump());
      write_text(report_out, result.report.dump(2));
    }
  } catch (const lorm::Error& e) {
    return fail(e.kind(), e.what(), kExitError);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kExitError);
  }
  return 0;
}
