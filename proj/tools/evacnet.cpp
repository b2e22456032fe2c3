// evacnet command line: generate synthetic scenarios, train, evaluate,
// ablate and rank features.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "evacnet/error.hpp"
#include "evacnet/synth.hpp"
#include "evacnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace evacnet;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string log_level = "info";
};

std::string hash_hex(const trainer::TrainConfig& c) { return fmt::format("{:016x}", trainer::config_hash(c)); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UserError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UserError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

template <class Fn>
void write_file(const fs::path& path, Fn&& fn) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UserError("cannot write " + path.string());
  fn(os);
  if (!os) throw UserError("failed writing " + path.string());
}

data::FeatureTable load_table(const fs::path& dir) {
  if (dir.empty()) throw UserError("no data directory given (use --data or data_dir in the config)");
  const auto raw = data::load_csv(dir / "meta.csv", dir / "records.csv");
  return data::engineer_features(raw);
}

trainer::TrainConfig load_config(const std::string& path, const Globals& g) {
  trainer::TrainConfig c;
  try {
    c = read_json(path).get<trainer::TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw UserError("invalid config " + path + ": " + e.what());
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out_dir = g.out;
  return c;
}

fs::path out_dir(const std::string& configured) {
  if (configured.empty()) throw UserError("no output directory given (use --out)");
  fs::create_directories(configured);
  return configured;
}

void write_manifest(const fs::path& dir, const std::string& command, std::uint64_t seed, nlohmann::json extra) {
  extra["command"] = command;
  extra["seed"] = seed;
  write_file(dir / ("manifest_" + command + ".json"), [&](std::ostream& os) { os << extra.dump(2) << '\n'; });
}

void check_detectors(const trainer::Model& model, const data::FeatureTable& table) {
  std::vector<std::string> ids;
  for (const auto& d : table.detectors) ids.push_back(d.id);
  if (ids != model.detector_ids) {
    throw UserError("detector set of the data does not match the checkpoint (" + std::to_string(ids.size()) + " vs " +
                    std::to_string(model.detector_ids.size()) + " detectors)");
  }
}

// Commands ----------------------------------------------------------------

int cmd_generate(const std::string& scenario_arg, const Globals& g) {
  synth::Scenario s;
  if (fs::exists(scenario_arg) && fs::is_regular_file(scenario_arg)) {
    const auto j = read_json(scenario_arg);
    try {
      s = (j.contains("scenario") ? j.at("scenario") : j).get<synth::Scenario>();
    } catch (const nlohmann::json::exception& e) {
      throw UserError("invalid scenario file " + scenario_arg + ": " + e.what());
    }
  } else {
    s = synth::builtin_scenario(scenario_arg);
  }
  if (g.seed) s.seed = *g.seed;
  s.validate();
  const fs::path dir = out_dir(g.out);
  const auto generated = synth::generate(s);
  synth::write_scenario(dir, s, generated);
  std::cout << "wrote scenario " << s.name << " (" << s.detector_count() << " detectors, " << s.hours
            << " hours, seed " << s.seed << ") to " << dir.string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string variant;
  int epochs = 0;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  auto c = load_config(a.config, g);
  if (!a.data.empty()) c.data_dir = a.data;
  if (!a.variant.empty()) c.variant = trainer::parse_variant(a.variant);
  if (a.epochs > 0) c.epochs = a.epochs;
  c.validate();
  const fs::path dir = out_dir(c.out_dir);
  const std::string v = trainer::to_string(c.variant);

  const auto ds = trainer::prepare(load_table(c.data_dir), c);
  spdlog::info("training {} on {} windows ({} validation), {} epochs", v, ds.train.size(), ds.val.size(), c.epochs);
  const auto result = trainer::train(c, ds, [](const trainer::EpochLog& e, const trainer::Model&) {
    spdlog::info("epoch {} train_loss {:.6f}{}", e.epoch, e.train_loss,
                 e.val ? fmt::format(" val_rmse {:.3f}", e.val->overall.rmse) : std::string());
    return true;
  });

  trainer::save_checkpoint(dir / ("checkpoint_" + v + ".bin"), result.model);
  write_file(dir / "epochs.csv", [&](std::ostream& os) { trainer::write_epoch_csv(os, result.epochs, c.horizon); });
  if (result.ranking) {
    write_file(dir / "ranking.csv", [&](std::ostream& os) { rl::write_ranking_csv(os, *result.ranking); });
    trainer::save_agent(dir / ("agent_" + v + ".bin"), *result.agent,
                        rl::MaskCounter::from_counts(*result.model.mask_counts));
  }
  if (!ds.val.empty()) {
    const auto table = trainer::evaluate(result.model, ds.val);
    write_file(dir / ("metrics_" + v + ".csv"), [&](std::ostream& os) { trainer::write_metric_csv(os, table); });
    trainer::print_metric_table(std::cout, table);
  }
  write_manifest(dir, "train", c.seed,
                 {{"config", c}, {"config_hash", hash_hex(c)}, {"epochs_run", result.epochs.size()}});
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_dir, const Globals& g) {
  const auto model = trainer::load_checkpoint(checkpoint);
  auto table = load_table(data_dir);
  trainer::check_registry(model.registry, table.registry);
  check_detectors(model, table);
  const auto ds = trainer::prepare(std::move(table), model.config, model.normalizer);
  if (ds.val.empty()) throw UserError("no evaluation windows in " + data_dir);
  const auto metrics = trainer::evaluate(model, ds.val);
  trainer::print_metric_table(std::cout, metrics);
  if (!g.out.empty()) {
    const fs::path dir = out_dir(g.out);
    const std::string v = trainer::to_string(model.config.variant);
    write_file(dir / ("metrics_" + v + ".csv"), [&](std::ostream& os) { trainer::write_metric_csv(os, metrics); });
    write_manifest(dir, "evaluate", model.config.seed, {{"checkpoint", checkpoint}, {"data", data_dir}});
  }
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data_dir, const Globals& g) {
  auto c = load_config(config, g);
  if (!data_dir.empty()) c.data_dir = data_dir;
  c.validate();
  const fs::path dir = out_dir(c.out_dir);
  const auto entries = trainer::ablate(c, load_table(c.data_dir));
  write_file(dir / "ablation.csv", [&](std::ostream& os) { trainer::write_ablation_csv(os, entries, c.horizon); });
  trainer::write_ablation_csv(std::cout, entries, c.horizon);
  write_manifest(dir, "ablate", c.seed, {{"config", c}, {"config_hash", hash_hex(c)}});
  bool failed = false;
  for (const auto& e : entries) {
    if (!e.metrics) {
      std::cerr << "variant " << trainer::to_string(e.variant) << " failed: " << e.error << '\n';
      failed = true;
    }
  }
  return failed ? 2 : 0;
}

int cmd_rank(const std::string& checkpoint, const Globals& g) {
  const auto model = trainer::load_checkpoint(checkpoint);
  if (!model.mask_counts) {
    throw UserError("checkpoint " + checkpoint + " was trained without the masking agent (variant " +
                    trainer::to_string(model.config.variant) + ")");
  }
  const auto ranking = rl::ranking_report(rl::MaskCounter::from_counts(*model.mask_counts), model.registry.names);
  rl::write_ranking_csv(std::cout, ranking);
  if (!g.out.empty()) {
    const fs::path dir = out_dir(g.out);
    write_file(dir / "ranking.csv", [&](std::ostream& os) { rl::write_ranking_csv(os, ranking); });
  }
  return 0;
}

void apply_threads() {
  if (const char* env = std::getenv("EVACNET_THREADS")) {
    const int n = std::atoi(env);
    if (n < 1) throw UserError("EVACNET_THREADS must be a positive integer");
    Eigen::setNbThreads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evacuation traffic forecasting with dynamic multi-graph fusion and RL feature masking", "evacnet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "0.1.0");
  Globals g;
  app.add_option("--seed", g.seed, "Seed overriding the scenario or config seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--log-level", g.log_level, "Log level")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  std::string scenario;
  auto* gen = app.add_subcommand("generate", "Write a synthetic scenario (meta.csv, records.csv, scenario.json)");
  gen->add_option("--scenario", scenario, "Builtin name (S1, S2, S3) or scenario JSON file")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train one model variant");
  tr->add_option("--config", ta.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "Directory with meta.csv and records.csv (overrides data_dir)");
  tr->add_option("--variant", ta.variant, "Model variant (overrides the config)");
  tr->add_option("--epochs", ta.epochs, "Epoch count (overrides the config)")->check(CLI::PositiveNumber);

  std::string checkpoint, data_dir;
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the validation hours of a dataset");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Directory with meta.csv and records.csv")->required();

  std::string ab_config, ab_data;
  auto* ab = app.add_subcommand("ablate", "Train and compare the four ablation variants");
  ab->add_option("--config", ab_config, "Training config JSON")->required()->check(CLI::ExistingFile);
  ab->add_option("--data", ab_data, "Directory with meta.csv and records.csv (overrides data_dir)");

  std::string rk_checkpoint;
  auto* rk = app.add_subcommand("rank-features", "Print the feature ranking stored in a checkpoint");
  rk->add_option("--checkpoint", rk_checkpoint, "Model checkpoint of an agent variant")->required()->check(CLI::ExistingFile);

  for (auto* sub : {gen, tr, ev, ab, rk}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    spdlog::set_default_logger(spdlog::stderr_color_mt("evacnet"));
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    spdlog::set_pattern("[%l] %v");
    apply_threads();
    if (*gen) return cmd_generate(scenario, g);
    if (*tr) return cmd_train(ta, g);
    if (*ev) return cmd_evaluate(checkpoint, data_dir, g);
    if (*ab) return cmd_ablate(ab_config, ab_data, g);
    if (*rk) return cmd_rank(rk_checkpoint, g);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
