// stae: command-line front end for data generation, training and the probes.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "stae/analysis.hpp"
#include "stae/config.hpp"
#include "stae/data.hpp"
#include "stae/error.hpp"
#include "stae/io.hpp"
#include "stae/model.hpp"
#include "stae/training.hpp"

namespace fs = std::filesystem;
using namespace stae;

namespace {

struct Key {
  const char* name;
  const char* help;
};

const std::vector<Key> kGeneratorKeys = {
    {"nodes", "number of sensors N"},
    {"steps", "number of 5-minute steps"},
    {"clusters", "number of latent node clusters"},
    {"noise_std", "white-noise scale"},
    {"weekly_amplitude", "relative weekend dip"},
    {"ar_coefficient", "AR(1) coefficient of the node noise"},
    {"name", "dataset name, also the output file stem"},
};

const std::vector<Key> kDataKeys = {
    {"data", "input STTS series"},
    {"split", "train:val:test ratios, e.g. 6:2:2"},
};

const std::vector<Key> kModelKeys = {
    {"T", "input frames"},
    {"T_out", "predicted frames"},
    {"d_f", "feature / periodicity embedding width"},
    {"d_a", "adaptive (or spatial) embedding width"},
    {"heads", "attention heads"},
    {"layers", "layers per encoder stack"},
    {"d_ff", "feed-forward width"},
    {"dropout", "dropout probability"},
    {"attention_scale", "per_head | hidden"},
    {"norm_order", "post | pre"},
    {"variant", "model variant tag, e.g. full, no_Ea, no_STTrans, Es_instead_of_Ea"},
};

const std::vector<Key> kTrainKeys = {
    {"lr", "initial learning rate"},
    {"decay_milestones", "epochs at which the rate decays, e.g. [20, 30]"},
    {"decay_factor", "multiplicative decay at each milestone"},
    {"batch_size", "training batch size"},
    {"max_epochs", "epoch limit"},
    {"patience", "epochs without validation improvement before stopping"},
    {"null_value", "ground-truth value treated as missing"},
    {"mape_epsilon", "MAPE skips |y| at or below this"},
    {"eval_batch_size", "batch size for evaluation"},
};

const std::vector<Key> kCommonKeys = {
    {"out", "output directory"},
    {"seed", "random seed (falls back to $STAE_SEED, then 0)"},
    {"threads", "evaluation worker threads"},
};

const std::vector<Key> kEvalKeys = {
    {"checkpoint", "checkpoint prefix (<prefix>.manifest + <prefix>.bin)"},
    {"horizons", "horizons to report, e.g. [3, 6, 12]; all when absent"},
    {"eval_split", "train | val | test"},
};

const std::vector<Key> kAblationKeys = {
    {"variants", "comma-separated variant tags"},
};

const std::vector<Key> kShuffleKeys = {
    {"n_perms", "number of random frame permutations"},
    {"shuffle_mode", "values_only | values_and_calendar"},
    {"ea_checkpoint", "trained model with E_a (trained here when absent)"},
    {"es_checkpoint", "trained model with E_s (trained here when absent)"},
};

const std::vector<Key> kDumpKeys = {
    {"checkpoint", "checkpoint prefix"},
    {"which", "Ea | Es | Tw | Td"},
};

const std::vector<Key> kGradKeys = {
    {"preset", "model preset (tiny)"},
    {"fd_step", "finite-difference step"},
    {"tol", "relative error tolerance"},
    {"batch", "windows in the probe batch"},
};

// One subcommand's flags. Every flag is also a config key; flags win.
struct Flags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App* app, const std::vector<Key>& keys) {
    for (const auto& k : keys) {
      if (options.count(k.name)) continue;
      options[k.name] = app->add_option(std::string("--") + k.name, values[k.name], k.help);
    }
  }

  ConfigMap resolve() const {
    ConfigMap cfg;
    if (!config_path.empty()) cfg = ConfigMap::load(config_path);
    std::set<std::string> known;
    for (const auto* group : {&kGeneratorKeys, &kDataKeys, &kModelKeys, &kTrainKeys, &kCommonKeys, &kEvalKeys,
                              &kAblationKeys, &kShuffleKeys, &kDumpKeys, &kGradKeys}) {
      for (const auto& k : *group) known.insert(k.name);
    }
    for (const auto& [k, v] : cfg.entries()) {
      if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
    }
    for (const auto& [k, opt] : options) {
      if (opt->count() > 0) cfg.set(k, values.at(k));
    }
    if (!cfg.contains("seed")) {
      if (const char* env = std::getenv("STAE_SEED")) cfg.set("seed", env);
    }
    return cfg;
  }
};

fs::path out_dir(const ConfigMap& cfg) { return cfg.get_string("out", "out"); }

std::vector<std::string> split_tags(std::string text) {
  if (!text.empty() && text.front() == '[' && text.back() == ']') text = text.substr(1, text.size() - 2);
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t\"");
    const auto b = item.find_last_not_of(" \t\"");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::string require(const ConfigMap& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg.raw(key).empty()) throw ConfigError("missing required setting '" + key + "'");
  return cfg.raw(key);
}

TrainConfig train_config(const ConfigMap& cfg) {
  TrainConfig tc = TrainConfig::from_config(cfg);
  tc.validate();
  return tc;
}

ModelConfig model_config(const ConfigMap& cfg, std::size_t data_nodes) {
  ModelConfig mc = ModelConfig::from_config(cfg);
  if (cfg.contains("nodes") && mc.nodes != data_nodes) {
    throw ConfigError("config sets nodes = " + std::to_string(mc.nodes) + " but the data has " +
                      std::to_string(data_nodes) + " nodes");
  }
  mc.nodes = data_nodes;
  mc.validate();
  return mc;
}

DataBundle load_bundle(const ConfigMap& cfg, std::size_t frames, std::size_t horizon) {
  const TrafficDataset ds = load_stts(require(cfg, "data"));
  const SplitSpec split = SplitSpec::parse(cfg.get_string("split", "6:2:2"));
  return prepare_data(ds, split, frames, horizon);
}

std::string metrics_csv(const MetricsReport& report, const ConfigMap& cfg) {
  std::vector<std::size_t> horizons;
  for (double h : cfg.get_list("horizons", {})) horizons.push_back(static_cast<std::size_t>(h));
  if (horizons.empty()) {
    for (std::size_t h = 1; h <= report.horizons.size(); ++h) horizons.push_back(h);
  }
  auto cell = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("NA"); };
  CsvWriter csv({"horizon", "mae", "rmse", "mape", "count"});
  for (std::size_t h : horizons) {
    const Metrics& m = report.at_horizon(h);
    csv.row({std::to_string(h), cell(m.mae), cell(m.rmse), cell(m.mape), std::to_string(m.count)});
  }
  const Metrics& a = report.average;
  csv.row({"average", cell(a.mae), cell(a.rmse), cell(a.mape), std::to_string(a.count)});
  return csv.text();
}

std::string resolved_text(const ConfigMap& cfg, const ModelConfig& mc, const TrainConfig& tc) {
  ConfigMap all = cfg;
  mc.write_to(all);
  tc.write_to(all);
  return "# resolved settings\n" + all.to_text();
}

// --- subcommands ------------------------------------------------------------

std::string cmd_gen_data(const ConfigMap& cfg) {
  GeneratorConfig g;
  g.nodes = cfg.get_size("nodes", g.nodes);
  g.steps = cfg.get_size("steps", g.steps);
  g.clusters = cfg.get_size("clusters", g.clusters);
  g.noise_std = cfg.get_double("noise_std", g.noise_std);
  g.weekly_amplitude = cfg.get_double("weekly_amplitude", g.weekly_amplitude);
  g.ar_coefficient = cfg.get_double("ar_coefficient", g.ar_coefficient);
  g.seed = cfg.get_u64("seed", g.seed);
  g.name = cfg.get_string("name", "synth");
  const TrafficDataset ds = generate_synthetic(g);
  const fs::path path = out_dir(cfg) / (g.name + ".stts");
  save_stts(ds, path);
  return "wrote " + path.string() + " steps=" + std::to_string(ds.steps) + " nodes=" + std::to_string(ds.nodes) +
         " clusters=" + std::to_string(g.clusters) + " seed=" + std::to_string(g.seed);
}

std::string cmd_train(const ConfigMap& cfg) {
  const TrainConfig tc = train_config(cfg);
  ModelConfig mc = ModelConfig::from_config(cfg);
  const DataBundle data = load_bundle(cfg, mc.frames, mc.horizon);
  mc = model_config(cfg, data.train.nodes());
  RunOutcome run = train_and_evaluate(data, mc, tc);

  const fs::path out = out_dir(cfg);
  write_file_atomic(out / "history.csv", history_csv(run.result.history));
  write_file_atomic(out / "metrics.csv", metrics_csv(run.test, cfg));
  write_file_atomic(out / "resolved.conf", resolved_text(cfg, mc, tc));
  save_checkpoint(run.model, data.normalizer, out / "model");
  return "epochs=" + std::to_string(run.result.history.size()) + " best_epoch=" +
         std::to_string(run.result.best_epoch) + " val_mae=" + fmt(run.result.best_val_mae) +
         " test_mae=" + fmt(run.test.average.mae) + " test_rmse=" + fmt(run.test.average.rmse) +
         " test_mape=" + fmt(run.test.average.mape) + " params=" + std::to_string(run.model.parameter_count()) +
         " out=" + out.string();
}

std::string cmd_eval(const ConfigMap& cfg) {
  LoadedCheckpoint ckpt = load_checkpoint(require(cfg, "checkpoint"));
  const ModelConfig& mc = ckpt.model.config();
  DataBundle data = load_bundle(cfg, mc.frames, mc.horizon);
  if (data.train.nodes() != mc.nodes) {
    throw ConfigError("checkpoint expects " + std::to_string(mc.nodes) + " nodes, data has " +
                      std::to_string(data.train.nodes()));
  }
  const std::string which = cfg.get_string("eval_split", "test");
  const WindowSet* base = which == "test" ? &data.test : which == "val" ? &data.val : which == "train" ? &data.train
                                                                                                        : nullptr;
  if (!base) throw ConfigError("eval_split must be train, val or test, got '" + which + "'");
  // The checkpoint's own normaliser wins over one refitted from the data.
  const WindowSet windows(std::make_shared<const TrafficDataset>(base->dataset()), mc.frames, mc.horizon,
                          ckpt.normalizer ? ckpt.normalizer : std::optional<Normalizer>(data.normalizer));
  const MetricsReport report = evaluate(ckpt.model, windows, EvalOptions::from(train_config(cfg)));
  const fs::path out = out_dir(cfg);
  write_file_atomic(out / "metrics.csv", metrics_csv(report, cfg));
  return "split=" + which + " windows=" + std::to_string(windows.size()) + " mae=" + fmt(report.average.mae) +
         " rmse=" + fmt(report.average.rmse) + " mape=" + fmt(report.average.mape) + " out=" + out.string();
}

std::string cmd_ablate(const ConfigMap& cfg) {
  const TrainConfig tc = train_config(cfg);
  ModelConfig mc = ModelConfig::from_config(cfg);
  const DataBundle data = load_bundle(cfg, mc.frames, mc.horizon);
  mc = model_config(cfg, data.train.nodes());
  const auto variants =
      split_tags(cfg.get_string("variants", "full,no_Ea,no_Ep,no_TTrans,no_SpatialTrans,no_STTrans,Es_instead_of_Ea"));
  if (variants.empty()) throw ConfigError("variants: empty list");
  const auto rows = run_ablation(data, mc, tc, variants);
  const fs::path out = out_dir(cfg);
  write_file_atomic(out / "ablation.csv", ablation_csv(rows));
  std::size_t failed = 0;
  std::string best;
  double best_mae = std::numeric_limits<double>::infinity();
  for (const auto& r : rows) {
    if (!r.ok) {
      ++failed;
      std::cerr << "stae: variant " << r.variant << " failed: " << r.error << "\n";
    } else if (r.test.mae < best_mae) {
      best_mae = r.test.mae;
      best = r.variant;
    }
  }
  return "variants=" + std::to_string(rows.size()) + " failed=" + std::to_string(failed) +
         " best=" + (best.empty() ? "none" : best) + " best_mae=" + fmt(best_mae) + " out=" + out.string();
}

std::string cmd_shuffle(const ConfigMap& cfg) {
  const TrainConfig tc = train_config(cfg);
  const fs::path out = out_dir(cfg);
  ModelConfig mc = ModelConfig::from_config(cfg);

  std::optional<LoadedCheckpoint> ea, es;
  if (cfg.contains("ea_checkpoint")) ea.emplace(load_checkpoint(cfg.raw("ea_checkpoint")));
  if (cfg.contains("es_checkpoint")) es.emplace(load_checkpoint(cfg.raw("es_checkpoint")));
  if (ea) mc = ea->model.config();
  const DataBundle data = load_bundle(cfg, mc.frames, mc.horizon);
  mc = ea ? mc : model_config(cfg, data.train.nodes());

  auto train_variant = [&](const std::string& tag, const std::string& stem) {
    ModelConfig v = mc;
    v.variant = ModelVariant::parse(tag);
    RunOutcome run = train_and_evaluate(data, v, tc);
    save_checkpoint(run.model, data.normalizer, out / stem);
    return LoadedCheckpoint{std::move(run.model), data.normalizer};
  };
  if (!ea) ea.emplace(train_variant("full", "model_ea"));
  if (!es) es.emplace(train_variant("Es_instead_of_Ea", "model_es"));

  const std::string mode_text = cfg.get_string("shuffle_mode", "values_only");
  ShuffleMode mode;
  if (mode_text == "values_only") {
    mode = ShuffleMode::ValuesOnly;
  } else if (mode_text == "values_and_calendar") {
    mode = ShuffleMode::ValuesAndCalendar;
  } else {
    throw ConfigError("shuffle_mode must be values_only or values_and_calendar, got '" + mode_text + "'");
  }
  const auto perms = random_permutations(mc.frames, cfg.get_size("n_perms", 10), tc.seed);
  const ShuffleReport report = shuffle_probe(ea->model, es->model, data.test, perms, EvalOptions::from(tc), mode);
  write_file_atomic(out / "shuffle.csv", shuffle_csv(report));
  return "n_perms=" + std::to_string(perms.size()) + " delta_Ea=" + fmt(report.adaptive.delta) +
         " delta_Es=" + fmt(report.spatial.delta) + " ratio=" + fmt(report.ratio) + " out=" + out.string();
}

std::string cmd_dump(const ConfigMap& cfg) {
  const LoadedCheckpoint ckpt = load_checkpoint(require(cfg, "checkpoint"));
  const EmbeddingTable which = parse_embedding_table(cfg.get_string("which", "Ea"));
  const fs::path out = out_dir(cfg);
  const fs::path path = out / (std::string(to_string(which)) + ".stts");
  dump_embedding(ckpt.model, which, path);
  std::string summary = "wrote " + path.string() + " shape=" + shape_str(embedding_table(ckpt.model, which).shape());
  if (which == EmbeddingTable::Adaptive) {
    const FrameCorrelation corr = frame_correlation(ckpt.model.adaptive()->table);
    write_file_atomic(out / "frame_correlation.csv", correlation_csv(corr));
    write_file_atomic(out / "frame_correlation.ppm", correlation_ppm(corr));
    summary += " adjacent_corr=" + fmt(corr.adjacent_mean()) + " distant_corr=" + fmt(corr.distant_mean(6));
  }
  return summary;
}

std::string cmd_grad_check(const ConfigMap& cfg, int& status) {
  const std::string preset = cfg.get_string("preset", "tiny");
  if (preset != "tiny") throw ConfigError("unknown preset '" + preset + "' (available: tiny)");
  ModelConfig mc = ModelConfig::from_config(cfg, tiny_preset());
  mc.validate();
  const double h = cfg.get_double("fd_step", 1e-5);
  const double tol = cfg.get_double("tol", 1e-4);
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport report = check_model_gradients(mc, cfg.get_size("batch", 2), cfg.get_u64("seed", 0), h, tol);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path out = out_dir(cfg);
  write_file_atomic(out / "grad_check.csv", grad_check_csv(report));
  for (const auto& e : report.entries) {
    std::cerr << (e.flagged ? "FAIL " : "ok   ") << e.name << " max_rel_error=" << fmt(e.max_rel_error) << "\n";
  }
  status = report.passed() ? 0 : exit_code(ErrorKind::Numeric);
  return std::string(report.passed() ? "PASS" : "FAIL") + " groups=" + std::to_string(report.entries.size()) +
         " max_rel_error=" + fmt(report.max_rel_error()) + " tol=" + fmt(tol) + " seconds=" + fmt(seconds) +
         " out=" + out.string();
}

void print_error(const std::string& kind, int code, const std::string& message) {
  std::string flat = message;
  std::replace(flat.begin(), flat.end(), '\n', ' ');
  std::cerr << "stae: error kind=" << kind << " exit=" << code << " message=\"" << flat << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal adaptive embedding transformer: data, training and probes"};
  app.require_subcommand(1);

  struct Sub {
    std::string name;
    std::string help;
    std::vector<const std::vector<Key>*> groups;
  };
  const std::vector<Sub> subs = {
      {"gen-data", "generate a synthetic traffic series", {&kGeneratorKeys}},
      {"train", "train one model, evaluate it on the test split", {&kDataKeys, &kModelKeys, &kTrainKeys}},
      {"eval", "evaluate a checkpoint", {&kDataKeys, &kEvalKeys, &kTrainKeys}},
      {"ablate", "train and compare model variants", {&kDataKeys, &kModelKeys, &kTrainKeys, &kAblationKeys}},
      {"shuffle-test", "temporal shuffle probe, E_a vs E_s", {&kDataKeys, &kModelKeys, &kTrainKeys, &kShuffleKeys}},
      {"dump-embedding", "write an embedding table (and E_a frame correlation)", {&kDumpKeys}},
      {"grad-check", "finite-difference gradient check", {&kGradKeys, &kModelKeys}},
  };

  std::map<std::string, Flags> flags;
  std::map<std::string, CLI::App*> apps;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    Flags& f = flags[s.name];
    sub->add_option("--config", f.config_path, "flat key = value config file")->check(CLI::ExistingFile);
    f.add(sub, kCommonKeys);
    for (const auto* g : s.groups) f.add(sub, *g);
    apps[s.name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", 2, e.what());
    return 2;
  }

  std::string name;
  for (const auto& [n, sub] : apps) {
    if (sub->parsed()) name = n;
  }
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const ConfigMap cfg = flags.at(name).resolve();
    int status = 0;
    std::string summary;
    if (name == "gen-data") summary = cmd_gen_data(cfg);
    if (name == "train") summary = cmd_train(cfg);
    if (name == "eval") summary = cmd_eval(cfg);
    if (name == "ablate") summary = cmd_ablate(cfg);
    if (name == "shuffle-test") summary = cmd_shuffle(cfg);
    if (name == "dump-embedding") summary = cmd_dump(cfg);
    if (name == "grad-check") summary = cmd_grad_check(cfg, status);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << name << ": " << summary << " elapsed=" << fmt(seconds) << "s\n";
    return status;
  } catch (const Error& e) {
    print_error(to_string(e.kind()), exit_code(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    print_error("IoError", 2, e.what());
    return 2;
  }
}
