#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metadvfs/evalharness.hpp"
#include "metadvfs/maml.hpp"
#include "metadvfs/qlearner.hpp"
#include "metadvfs/taskforest.hpp"

namespace metadvfs {

using ComboName = std::pair<std::string, std::string>;  // device id, app id

struct RunConfig {
  std::filesystem::path catalog;
  /// Catalog of new arrivals; empty means no adaptation targets.
  std::filesystem::path new_catalog;
  std::uint64_t seed = 0;
  int samples_per_combination = 1000;
  int episodes_per_combination = 1;
  int support_samples = 300;  // per new combination
  double collect_epsilon = 0.3;
  /// Empty: every device x app of the catalog.
  std::vector<ComboName> combinations;
  /// Empty: every device x app of new_catalog not already trained on.
  std::vector<ComboName> new_combinations;

  int tau_cap = 5;
  double delta = 0.01;
  TrainConfig train;
  QNetConfig net;
  FqeConfig fqe;
  MetaConfig meta;
  int adapt_steps = -1;  // < 0: meta.inner_steps

  EvalProtocol eval;
  std::vector<std::string> methods = {"schedutil", "plain_dqn", "metadvfs"};
  bool effectiveness = true;
  bool adaptation_study = true;
  int reference_steps = 3000;
  int adapt_max_steps = 1500;
  int adapt_eval_every = 50;
  int adapt_patience = 200;
  double adapt_fraction = 0.95;
  std::vector<int> tau_values = {1, 2, 3, 5, 8, 0};  // 0: number of combinations

  /// Throws InvalidConfig on out-of-range values and MissingArtifact on
  /// missing catalog files.
  void validate() const;
};

/// Reads a JSON config; relative catalog paths resolve against `base_dir`.
/// Absent fields keep their defaults.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
/// Canonical JSON snapshot (worker count excluded, it never changes results).
std::string dump_run_config(const RunConfig& config);

/// Known evaluation methods.
const std::vector<std::string>& known_methods();

enum class Stage { collect, define_tasks, meta_train, adapt, eval, sweep_tau, report };
std::string to_string(Stage s);
Stage parse_stage(const std::string& name);

struct StageRecord {
  std::string inputs_hash;
  long timestamp = 0;  // logical clock value when the stage completed
  std::vector<std::string> artifacts;
};

struct RunManifest {
  std::string tool_version;
  std::string config;  // dump_run_config snapshot
  long clock = 0;
  std::map<std::string, StageRecord> stages;
  std::map<std::string, std::string> artifacts;  // run-relative path -> content hash

  std::string dump() const;
  static RunManifest parse(const std::string& text);
};

struct StageResult {
  Stage stage = Stage::collect;
  bool skipped = false;  // inputs unchanged and artifacts intact
  std::vector<std::string> artifacts;
};

/// One run directory. Every stage checks its dependencies in the manifest
/// (MissingStage otherwise), skips itself when its inputs and outputs are
/// unchanged, and writes artifacts only under the run directory.
class Pipeline {
 public:
  Pipeline(RunConfig config, std::filesystem::path out_dir, int workers = 1);

  StageResult run(Stage stage);
  /// collect through report, in order.
  std::vector<StageResult> run_all();

  const RunManifest& manifest() const { return manifest_; }
  const RunConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_; }

 private:
  std::vector<Stage> dependencies(Stage s) const;
  std::string inputs_hash(Stage s) const;
  bool up_to_date(Stage s, const std::string& hash) const;
  void commit(Stage s, const std::string& hash, const std::vector<std::pair<std::string, std::string>>& files);

  std::vector<std::pair<std::string, std::string>> do_collect();
  std::vector<std::pair<std::string, std::string>> do_define_tasks();
  std::vector<std::pair<std::string, std::string>> do_meta_train();
  std::vector<std::pair<std::string, std::string>> do_adapt();
  std::vector<std::pair<std::string, std::string>> do_eval();
  std::vector<std::pair<std::string, std::string>> do_sweep_tau();
  std::vector<std::pair<std::string, std::string>> do_report();

  RunConfig config_;
  std::filesystem::path out_;
  int workers_;
  RunManifest manifest_;
};

/// Structured log line to stderr.
void log_event(const std::string& stage, const std::string& event, const std::string& detail = "");

}  // namespace metadvfs
