#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metadvfs/pipeline.hpp"

namespace fs = std::filesystem;
using namespace metadvfs;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string catalog;
  std::string new_catalog;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::optional<int> samples;
  std::optional<int> support_samples;
  std::optional<int> tau_cap;
  std::optional<double> delta;
  std::optional<int> train_steps;
  std::optional<int> outer_steps;
  std::optional<int> adapt_steps;
  std::optional<int> horizon;
  std::optional<int> episodes;
  std::vector<std::string> methods;
  std::vector<int> tau_values;
  bool no_adaptation_study = false;
};

RunConfig build_config(const Options& o) {
  RunConfig c;
  if (!o.config.empty()) {
    const fs::path p = o.config;
    c = parse_run_config(read_text_file(p), p.parent_path());
  }
  if (!o.catalog.empty()) c.catalog = o.catalog;
  if (!o.new_catalog.empty()) c.new_catalog = o.new_catalog;
  if (o.seed) c.seed = *o.seed;
  if (o.samples) c.samples_per_combination = *o.samples;
  if (o.support_samples) c.support_samples = *o.support_samples;
  if (o.tau_cap) c.tau_cap = *o.tau_cap;
  if (o.delta) c.delta = *o.delta;
  if (o.train_steps) c.train.train_steps = *o.train_steps;
  if (o.outer_steps) c.meta.outer_steps = *o.outer_steps;
  if (o.adapt_steps) c.adapt_steps = *o.adapt_steps;
  if (o.horizon) c.eval.horizon = *o.horizon;
  if (o.episodes) c.eval.episodes = *o.episodes;
  if (!o.methods.empty()) c.methods = o.methods;
  if (!o.tau_values.empty()) c.tau_values = o.tau_values;
  if (o.no_adaptation_study) c.adaptation_study = false;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metadvfs: desk-scale meta-learned DVFS lab"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", METADVFS_VERSION);
  Options o;
  app.add_option("--config", o.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "Run directory")->required();
  app.add_option("--seed", o.seed, "Root seed");
  app.add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--catalog", o.catalog, "Catalog of training combinations");
  app.add_option("--new-catalog", o.new_catalog, "Catalog of new arrivals");

  const std::vector<std::string> names = {"collect", "define-tasks", "meta-train", "adapt",
                                          "eval",    "sweep-tau",    "report",     "all"};
  std::vector<CLI::App*> subs;
  for (const auto& n : names) subs.push_back(app.add_subcommand(n, n == "all" ? "Every stage in order" : "Run stage " + n));
  auto sub = [&](const std::string& n) { return subs[static_cast<std::size_t>(std::find(names.begin(), names.end(), n) - names.begin())]; };
  for (const char* n : {"collect", "all"}) {
    sub(n)->add_option("--samples", o.samples, "Transitions per combination");
    sub(n)->add_option("--support-samples", o.support_samples, "Transitions per new combination");
  }
  for (const char* n : {"define-tasks", "all"}) {
    sub(n)->add_option("--tau-cap", o.tau_cap, "Maximum task size");
    sub(n)->add_option("--delta", o.delta, "Relative merge margin");
    sub(n)->add_option("--train-steps", o.train_steps, "Q-network training steps per node");
  }
  for (const char* n : {"meta-train", "all"}) sub(n)->add_option("--outer-steps", o.outer_steps, "Meta-training steps");
  for (const char* n : {"adapt", "all"}) sub(n)->add_option("--adapt-steps", o.adapt_steps, "Fast-adaptation steps");
  for (const char* n : {"eval", "all"}) {
    sub(n)->add_option("--horizon", o.horizon, "Evaluation episode length");
    sub(n)->add_option("--episodes", o.episodes, "Evaluation episodes per combination");
    sub(n)->add_option("--methods", o.methods, "Methods to compare");
    sub(n)->add_flag("--no-adaptation-study", o.no_adaptation_study, "Skip the adaptation-time study");
  }
  for (const char* n : {"sweep-tau", "all"}) sub(n)->add_option("--tau-values", o.tau_values, "Tau values, 0 for max");

  CLI11_PARSE(app, argc, argv);

  std::string stage = "config";
  try {
    RunConfig config = build_config(o);
    Pipeline pipeline(std::move(config), o.out, o.workers);
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      if (names[i] == "all") {
        stage = "all";
        pipeline.run_all();
      } else {
        stage = names[i];
        pipeline.run(parse_stage(names[i]));
      }
    }
  } catch (const std::exception& e) {
    log_event(stage, "error", e.what());
    return 1;
  }
  return 0;
}
