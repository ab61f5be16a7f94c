#pragma once

// Command-line harness: flag and config-file parsing, experiment execution,
// ablation grids, probe reports and dataset dumps. Summaries go to `out` as
// one JSON object; logs go to `err`.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "villa/checkpoint.hpp"
#include "villa/dataset_io.hpp"
#include "villa/metrics.hpp"
#include "villa/probe.hpp"
#include "villa/trainer.hpp"

namespace villa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;  // divergence, I/O or checkpoint load failure

/// Hex FNV-1a digest of the run configuration with the seed cleared.
inline std::string run_digest(const TrainConfig& c) {
  TrainConfig unseeded = c;
  unseeded.seed = 0;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(unseeded.canonical())));
  return buf;
}

inline std::filesystem::path run_directory(const std::filesystem::path& out_root, const TrainConfig& c) {
  return out_root / (run_digest(c) + "_seed" + std::to_string(c.seed));
}

struct RunResult {
  ModelParams params;  // final parameters of the last stage run
  std::vector<MetricsRecord> history;
  std::optional<EvalMetrics> pretrain_mlm;
  std::optional<EvalMetrics> pretrain_itm;
  std::optional<FinetuneSummary> finetune;
  std::optional<std::uint64_t> pretrain_final_encoder;
  std::optional<std::uint64_t> finetune_initial_encoder;
  std::filesystem::path run_dir;
};

namespace detail {

inline void collect_pretrain_evals(RunResult& r) {
  for (const MetricsRecord& m : r.history) {
    if (m.stage != "pretrain" || m.split != "val") continue;
    EvalMetrics e{m.accuracy, m.l_std, 0};
    (m.task == "mlm" ? r.pretrain_mlm : r.pretrain_itm) = e;
  }
}

}  // namespace detail

/// Runs the configured stage(s) and writes metrics.csv, checkpoints and
/// config.txt under the run directory.
inline RunResult run_experiment(const TrainConfig& config, const std::filesystem::path& out_root,
                                const std::optional<std::filesystem::path>& load = std::nullopt, LogFn log = {}) {
  config.validate();
  RunResult res;
  res.run_dir = run_directory(out_root, config);
  std::error_code ec;
  std::filesystem::create_directories(res.run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + res.run_dir.string() + ": " + ec.message());
  write_file_atomic(res.run_dir / "config.txt", config.canonical() + "\n");

  const WorldSpec world = make_world(config);
  switch (config.stage) {
    case Stage::both: {
      TwoStageResult two = run_two_stage(config, world, res.run_dir, log);
      res.params = std::move(two.finetuned);
      res.history = std::move(two.history);
      res.finetune = two.finetune;
      res.pretrain_final_encoder = two.pretrain_final_encoder;
      res.finetune_initial_encoder = two.finetune_initial_encoder;
      break;
    }
    case Stage::pretrain: {
      res.params = init_params(config.model, counter_rng(config.seed, streams::kInit, 0)());
      StageContext ctx{config, world, res.history, log};
      run_pretrain(res.params, ctx);
      res.pretrain_final_encoder = encoder_checksum(res.params);
      save_checkpoint(res.params, res.run_dir / "pretrain.ckpt");
      break;
    }
    case Stage::finetune: {
      res.params = init_params(config.model, counter_rng(config.seed, streams::kInit, 0)());
      reinit_heads(res.params, counter_rng(config.seed, streams::kHeads, 0)());
      if (load) load_encoder(res.params, read_checkpoint(*load));
      res.finetune_initial_encoder = encoder_checksum(res.params);
      StageContext ctx{config, world, res.history, log};
      res.finetune = run_finetune(res.params, ctx, make_finetune_data(config, world));
      save_checkpoint(res.params, res.run_dir / "finetune.ckpt");
      break;
    }
  }
  detail::collect_pretrain_evals(res);
  write_metrics(res.history, res.run_dir / "metrics.csv");
  return res;
}

inline nlohmann::json summary_json(const TrainConfig& c, const RunResult& r) {
  nlohmann::json j;
  j["run_dir"] = r.run_dir.string();
  j["digest"] = run_digest(c);
  j["seed"] = c.seed;
  j["stage"] = std::string(to_string(c.stage));
  j["mode"] = std::string(to_string(c.mode));
  j["finetune_mode"] = std::string(to_string(c.mode_for(Stage::finetune)));
  j["modality"] = std::string(to_string(c.modality_mode));
  j["parameter_count"] = r.params.parameter_count();
  if (r.pretrain_mlm) j["pretrain"]["val_mlm_accuracy"] = r.pretrain_mlm->accuracy;
  if (r.pretrain_itm) j["pretrain"]["val_itm_accuracy"] = r.pretrain_itm->accuracy;
  if (r.finetune) {
    j["finetune"]["train_accuracy"] = r.finetune->train.accuracy;
    j["finetune"]["val_accuracy"] = r.finetune->val.accuracy;
    j["finetune"]["generalization_gap"] = r.finetune->train.accuracy - r.finetune->val.accuracy;
    j["finetune"]["val_loss"] = r.finetune->val.mean_loss;
  }
  if (r.pretrain_final_encoder && r.finetune_initial_encoder) {
    j["encoder_handoff_identical"] = *r.pretrain_final_encoder == *r.finetune_initial_encoder;
  }
  return j;
}

enum class Grid { modality, mode, stage };

inline Grid parse_grid(std::string_view s) {
  if (s == "modality") return Grid::modality;
  if (s == "mode") return Grid::mode;
  if (s == "stage") return Grid::stage;
  throw ContractError("unknown ablation grid '" + std::string(s) + "'");
}

struct GridRun {
  std::string label;
  TrainConfig config;
};

/// Expands an ablation axis: modality {txt, img, both} under villa; mode
/// {standard, freelb, villa}; stage {standard, villa} x {pretrain, finetune}.
inline std::vector<GridRun> expand_grid(Grid grid, const TrainConfig& base) {
  std::vector<GridRun> runs;
  switch (grid) {
    case Grid::modality:
      for (Modality m : {Modality::txt, Modality::img, Modality::both}) {
        TrainConfig c = base;
        c.mode = TrainMode::villa;
        c.finetune_mode.reset();
        c.modality_mode = m;
        runs.push_back({std::string(to_string(m)), c});
      }
      break;
    case Grid::mode:
      for (TrainMode m : {TrainMode::standard, TrainMode::freelb, TrainMode::villa}) {
        TrainConfig c = base;
        c.mode = m;
        c.finetune_mode.reset();
        runs.push_back({std::string(to_string(m)), c});
      }
      break;
    case Grid::stage:
      for (TrainMode pre : {TrainMode::standard, TrainMode::villa}) {
        for (TrainMode fine : {TrainMode::standard, TrainMode::villa}) {
          TrainConfig c = base;
          c.stage = Stage::both;
          c.mode = pre;
          c.finetune_mode = fine;
          runs.push_back({"pre=" + std::string(to_string(pre)) + ",fine=" + std::string(to_string(fine)), c});
        }
      }
      break;
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

namespace detail {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Reads `key=value` lines (blank lines and '#' comments skipped) into
/// `--key=value` arguments.
inline std::vector<std::string> config_file_args(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::vector<std::string> args;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config file " + path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key == "config") throw ConfigError("config file may not include another config file");
    args.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

struct TrainFlags {
  std::string mode = "villa";
  std::string finetune_mode;
  std::string stage = "both";
  std::string task;
  std::string modality = "both";
  std::string kl_target_grad = "stop";
  std::string optimizer = "adam";
  std::string out = "runs";
  std::string load;
  std::string ablate;
  bool simultaneous = false;
  bool timing = false;
  TrainConfig cfg;
};

inline void add_model_flags(CLI::App* app, ModelConfig& m) {
  app->add_option("--layers", m.num_layers, "encoder layers")->check(CLI::PositiveNumber);
  app->add_option("--hidden", m.hidden, "hidden width")->check(CLI::PositiveNumber);
  app->add_option("--heads", m.num_heads, "attention heads")->check(CLI::PositiveNumber);
  app->add_option("--ffn", m.ffn_hidden, "feed-forward width")->check(CLI::PositiveNumber);
}

inline void add_train_flags(CLI::App* app, TrainFlags& f) {
  TrainConfig& c = f.cfg;
  app->add_option("--task", f.task, "pretrain | downstream (shorthand for --stage pretrain|finetune)")
      ->check(CLI::IsMember({"pretrain", "downstream"}));
  app->add_option("--stage", f.stage, "pretrain | finetune | both")->check(CLI::IsMember({"pretrain", "finetune", "both"}));
  app->add_option("--mode", f.mode, "standard | freelb | villa")->check(CLI::IsMember({"standard", "freelb", "villa"}));
  app->add_option("--finetune-mode", f.finetune_mode, "mode of the finetuning stage (default: --mode)")
      ->check(CLI::IsMember({"standard", "freelb", "villa"}));
  app->add_option("--adv-steps", c.adv_steps, "ascent steps K")->check(CLI::PositiveNumber);
  app->add_option("--epsilon", c.epsilon, "perturbation bound")->check(CLI::NonNegativeNumber);
  app->add_option("--adv-lr", c.adv_step_size, "ascent step size")->check(CLI::NonNegativeNumber);
  app->add_option("--alpha", c.kl_weight, "KL weight")->check(CLI::NonNegativeNumber);
  app->add_option("--modality", f.modality, "txt | img | both")->check(CLI::IsMember({"txt", "img", "both"}));
  app->add_option("--kl-target-grad", f.kl_target_grad, "stop | flow")->check(CLI::IsMember({"stop", "flow"}));
  app->add_flag("--simultaneous", f.simultaneous, "perturb both modalities in one forward");
  app->add_option("--optimizer", f.optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
  app->add_option("--lr", c.optimizer.learning_rate, "learning rate")->check(CLI::NonNegativeNumber);
  app->add_option("--beta1", c.optimizer.beta1, "adam beta1")->check(CLI::Range(0.0, 1.0));
  app->add_option("--beta2", c.optimizer.beta2, "adam beta2")->check(CLI::Range(0.0, 1.0));
  app->add_option("--adam-eps", c.optimizer.eps, "adam epsilon")->check(CLI::PositiveNumber);
  app->add_option("--epochs", c.epochs, "epochs per stage")->check(CLI::PositiveNumber);
  app->add_option("--batch-size", c.batch_size, "minibatch size")->check(CLI::Range(2, 1 << 20));
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--pretrain-samples", c.pretrain_samples, "pre-training samples per epoch")->check(CLI::PositiveNumber);
  app->add_option("--finetune-samples", c.finetune_samples, "downstream training set size")->check(CLI::PositiveNumber);
  app->add_option("--val-samples", c.val_samples, "downstream validation set size")->check(CLI::PositiveNumber);
  app->add_option("--pretrain-val-samples", c.pretrain_val_samples, "pre-training validation samples per task")
      ->check(CLI::PositiveNumber);
  app->add_option("--num-concepts", c.num_concepts, "concepts in the synthetic world")->check(CLI::PositiveNumber);
  app->add_option("--noise-sigma", c.noise_sigma, "region feature noise")->check(CLI::NonNegativeNumber);
  app->add_flag("--timing", f.timing, "record wall_ms (makes metrics non-reproducible)");
  app->add_option("--out", f.out, "output root directory");
  app->add_option("--load", f.load, "encoder checkpoint for --stage finetune");
  add_model_flags(app, c.model);
}

inline bool given(const CLI::App* app, const std::string& name) {
  const CLI::Option* o = app->get_option_no_throw(name);
  return o != nullptr && o->count() > 0;
}

/// Resolves string flags into the config and rejects inconsistent combinations.
inline TrainConfig resolve(const CLI::App* app, TrainFlags& f) {
  TrainConfig c = f.cfg;
  c.mode = parse_mode(f.mode);
  if (!f.finetune_mode.empty()) c.finetune_mode = parse_mode(f.finetune_mode);
  c.stage = parse_stage(f.stage);
  if (!f.task.empty()) {
    const Stage from_task = f.task == "pretrain" ? Stage::pretrain : Stage::finetune;
    if (given(app, "--stage") && c.stage != from_task) {
      throw ConfigError("--task " + f.task + " contradicts --stage " + f.stage);
    }
    c.stage = from_task;
  }
  c.modality_mode = parse_modality(f.modality);
  c.kl_target_grad = parse_kl_target_grad(f.kl_target_grad);
  c.simultaneous = f.simultaneous;
  c.optimizer.kind = parse_optimizer(f.optimizer);
  c.record_timing = f.timing;

  if (given(app, "--finetune-mode") && c.stage == Stage::pretrain) {
    throw ConfigError("--finetune-mode has no effect with --stage pretrain");
  }
  std::vector<TrainMode> active;
  if (c.stage != Stage::finetune) active.push_back(c.mode_for(Stage::pretrain));
  if (c.stage != Stage::pretrain) active.push_back(c.mode_for(Stage::finetune));
  const bool any_adversarial = std::any_of(active.begin(), active.end(), [](TrainMode m) { return m != TrainMode::standard; });
  const bool any_villa = std::any_of(active.begin(), active.end(), [](TrainMode m) { return m == TrainMode::villa; });
  if (!any_adversarial) {
    for (const char* flag : {"--adv-steps", "--epsilon", "--adv-lr", "--alpha", "--modality", "--kl-target-grad",
                             "--simultaneous"}) {
      if (given(app, flag)) throw ConfigError(std::string(flag) + " is meaningless with --mode standard");
    }
  }
  if (!any_villa) {
    for (const char* flag : {"--alpha", "--kl-target-grad"}) {
      if (given(app, flag)) throw ConfigError(std::string(flag) + " requires --mode villa (freelb has no KL term)");
    }
  }
  if (!f.load.empty() && c.stage != Stage::finetune) {
    throw ConfigError("--load is only valid with --stage finetune");
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline std::vector<std::string> with_config_file(const std::vector<std::string>& args) {
  // The file's values go first so that explicit flags (TakeLast) override them.
  std::vector<std::string> out;
  std::vector<std::string> file_args;
  std::optional<std::size_t> insert_at;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config" && i + 1 < args.size()) {
      file_args = config_file_args(args[i + 1]);
      ++i;
      continue;
    }
    if (a.starts_with("--config=")) {
      file_args = config_file_args(a.substr(9));
      continue;
    }
    out.push_back(a);
    if (!insert_at && !a.starts_with("-")) insert_at = out.size();  // right after the subcommand
  }
  if (!file_args.empty()) {
    if (!insert_at) throw ConfigError("--config requires a subcommand");
    out.insert(out.begin() + static_cast<std::ptrdiff_t>(*insert_at), file_args.begin(), file_args.end());
  }
  return out;
}

}  // namespace detail

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Returns the process exit code.
inline int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  using detail::ConfigError;
  CLI::App app{"VILLA free multimodal adversarial training on a toy transformer", "villa_cli"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  detail::TrainFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "run pre-training and/or finetuning");
  detail::add_train_flags(train, train_flags);
  train->add_option("--ablate", train_flags.ablate, "run an ablation grid instead: modality | mode | stage")
      ->check(CLI::IsMember({"modality", "mode", "stage"}));

  detail::TrainFlags grid_flags;
  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation grid, one summary row per setting");
  detail::add_train_flags(ablate, grid_flags);
  ablate->add_option("--grid,--ablate", grid_flags.ablate, "modality | mode | stage")
      ->required()
      ->check(CLI::IsMember({"modality", "mode", "stage"}));

  ModelConfig probe_model;
  std::uint64_t probe_seed = 0;
  std::size_t probe_samples = 16;
  std::size_t probe_concepts = 16;
  std::string probe_load;
  CLI::App* probe = app.add_subcommand("probe", "attention probe report over concept-region links");
  probe->add_option("--load", probe_load, "checkpoint to probe (default: untrained model)");
  probe->add_option("--seed", probe_seed, "world and sample seed");
  probe->add_option("--samples", probe_samples, "probe samples")->check(CLI::Range(1, 4096));
  probe->add_option("--num-concepts", probe_concepts, "concepts in the synthetic world")->check(CLI::PositiveNumber);
  detail::add_model_flags(probe, probe_model);

  std::string gen_task = "downstream";
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_samples = 64;
  CLI::App* gen = app.add_subcommand("gen-data", "dump a synthetic dataset as JSON lines");
  gen->add_option("--task", gen_task, "mlm | itm | downstream")->check(CLI::IsMember({"mlm", "itm", "downstream"}));
  gen->add_option("--out", gen_out, "output file")->required();
  gen->add_option("--seed", gen_seed, "world seed");
  gen->add_option("--samples", gen_samples, "number of samples")->check(CLI::PositiveNumber);

  const LogFn log = [&err](const std::string& line) { err << line << '\n'; };

  try {
    std::vector<std::string> args = detail::with_config_file(raw_args);
    std::vector<const char*> argv{"villa_cli"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << '\n';
      return kExitConfig;
    }

    if (train->parsed() || ablate->parsed()) {
      const bool is_grid = ablate->parsed() || !train_flags.ablate.empty();
      CLI::App* sub = train->parsed() ? train : ablate;
      detail::TrainFlags& flags = train->parsed() ? train_flags : grid_flags;
      const TrainConfig base = detail::resolve(sub, flags);
      const std::optional<std::filesystem::path> load =
          flags.load.empty() ? std::nullopt : std::optional<std::filesystem::path>(flags.load);
      if (!is_grid) {
        const RunResult r = run_experiment(base, flags.out, load, log);
        out << summary_json(base, r).dump() << '\n';
        return kExitOk;
      }
      const Grid grid = parse_grid(flags.ablate);
      const char* axis_flag = grid == Grid::modality ? "--modality" : "--mode";
      if (detail::given(sub, axis_flag) || (grid != Grid::modality && detail::given(sub, "--finetune-mode"))) {
        throw ConfigError(std::string(axis_flag) + " conflicts with the ablation axis '" + flags.ablate + "'");
      }
      if (grid == Grid::stage && base.stage != Stage::both) throw ConfigError("--grid stage requires --stage both");
      nlohmann::json rows = nlohmann::json::array();
      for (const GridRun& g : expand_grid(grid, base)) {
        log("ablation " + flags.ablate + ": " + g.label);
        const RunResult r = run_experiment(g.config, flags.out, load, log);
        nlohmann::json row = summary_json(g.config, r);
        row["setting"] = g.label;
        rows.push_back(row);
      }
      out << nlohmann::json{{"grid", flags.ablate}, {"rows", rows}}.dump() << '\n';
      return kExitOk;
    }

    if (probe->parsed()) {
      const WorldSpec world = make_world(probe_seed, probe_concepts, 0.1, probe_model);
      ModelParams params = probe_load.empty() ? init_params(probe_model, probe_seed)
                                              : load_params(read_checkpoint(probe_load), probe_model);
      std::vector<Sample> samples;
      for (std::size_t i = 0; i < probe_samples; ++i) {
        std::mt19937_64 rng = counter_rng(probe_seed, 0x9e0be, i);
        samples.push_back(gen_pair(world, rng));
      }
      const ProbeReport rep = probe_report(params, samples, world, concept_region_pairs(samples));
      nlohmann::json cells = nlohmann::json::array();
      for (const ProbeCell& c : rep.cells) cells.push_back({{"layer", c.layer}, {"head", c.head}, {"mean", c.mean}});
      out << nlohmann::json{{"pairs", rep.pairs.size()},
                            {"max_row_sum_error", rep.max_row_sum_error},
                            {"cells", cells}}
                 .dump()
          << '\n';
      return kExitOk;
    }

    if (gen->parsed()) {
      const WorldSpec world = make_world(gen_seed);
      std::vector<Sample> samples;
      if (gen_task == "downstream") {
        samples = make_downstream_dataset(world, gen_samples, streams::kFinetuneTrain);
      } else {
        std::mt19937_64 rng = counter_rng(gen_seed, streams::kPretrainData, 0);
        for (std::size_t i = 0; i < gen_samples; ++i) samples.push_back(gen_pair(world, rng));
        if (gen_task == "mlm") {
          apply_mlm_masking(samples, rng, kMaskProbability);
        } else {
          if (gen_samples < 2) throw ConfigError("--task itm needs at least 2 samples");
          apply_itm_corruption(samples, world, rng);
        }
      }
      write_samples(samples, gen_out);
      out << nlohmann::json{{"samples", samples.size()}, {"out", gen_out}}.dump() << '\n';
      return kExitOk;
    }
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace villa
