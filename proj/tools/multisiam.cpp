// multisiam command-line entry point: gen | train | eval | viz | gradcheck.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "multisiam/config.h"
#include "multisiam/corpus.h"
#include "multisiam/gradsuite.h"
#include "multisiam/probe.h"
#include "multisiam/trainer.h"

#ifndef MULTISIAM_VERSION
#define MULTISIAM_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace msiam;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::vector<std::string> extras;
};

std::string read_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw Error("cannot read config file " + path.string());
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& arg : extras) {
    const auto eq = arg.find('=');
    if (arg.rfind("--", 0) != 0 || eq == std::string::npos || eq == 2) {
      throw UsageError("unrecognized argument '" + arg +
                       "' (config overrides take the form --key=value)");
    }
    out.emplace_back(arg.substr(2, eq - 2), arg.substr(eq + 1));
  }
  if (const char* seed = std::getenv("MULTISIAM_SEED")) {
    out.emplace_back("seed", seed);
  }
  return out;
}

TrainConfig resolve_config(const CommonArgs& args) {
  const std::string text =
      args.config_path.empty() ? std::string() : read_file(args.config_path);
  try {
    return parse_config(text, parse_overrides(args.extras));
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("config error: ") + e.what());
  }
}

fs::path ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = fs::path(dir) / ".write_test";
  std::ofstream os(probe);
  if (ec || !os) {
    throw Error("output directory " + dir + " is not writable");
  }
  os.close();
  fs::remove(probe);
  return dir;
}

json config_json(const TrainConfig& cfg) {
  json j = json::object();
  std::istringstream in(cfg.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) {
    throw Error("cannot write " + path.string());
  }
}

json probe_json(const ProbeReport& r) {
  return {{"ari_instance", r.ari_instance},
          {"ari_class", r.ari_class},
          {"feature_std", r.feature_std}};
}

TrainState require_checkpoint(const std::string& path) {
  if (path.empty() || !fs::exists(path)) {
    throw Error("checkpoint not found: '" + path + "'");
  }
  return load_checkpoint(path);
}

ProbeOptions probe_options(const TrainConfig& cfg) {
  ProbeOptions o;
  o.k = cfg.k;
  o.metric = cfg.kmeans_metric;
  o.max_iter = cfg.kmeans_max_iter;
  o.seed = cfg.seed;
  return o;
}

Network random_init_network(const TrainConfig& cfg) {
  return init_state(cfg).pair.online;
}

int cmd_gen(const CommonArgs& args, bool held_out) {
  const TrainConfig cfg = resolve_config(args);
  const fs::path out = ensure_out_dir(args.out_dir);
  const SceneSpec spec = scene_spec(cfg, held_out);
  const std::size_t n = held_out ? cfg.eval_size : cfg.corpus_size;
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.msim", i);
    save_msim(out / name, generate_image(spec, i));
  }
  std::cout << "wrote " << n << " images to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const CommonArgs& args, const std::string& resume,
              std::size_t stop_after, std::size_t checkpoint_every) {
  const fs::path out = ensure_out_dir(args.out_dir);
  TrainState state = resume.empty() ? init_state(resolve_config(args))
                                    : require_checkpoint(resume);
  const TrainConfig& cfg = state.config;
  const auto corpus = generate(scene_spec(cfg, false), cfg.corpus_size);
  const fs::path metrics_path = out / "metrics.jsonl";
  const fs::path ckpt_path = out / "checkpoint.msia";
  std::ofstream metrics(metrics_path, resume.empty()
                                          ? std::ios::trunc
                                          : std::ios::app);
  if (!metrics) {
    throw Error("cannot write " + metrics_path.string());
  }
  json manifest = {{"version", MULTISIAM_VERSION},
                   {"seed", cfg.seed},
                   {"config", config_json(cfg)},
                   {"metrics", metrics_path.string()},
                   {"checkpoints", json::array()},
                   {"resumed_from", resume}};
  const std::size_t end = stop_after == 0 ? cfg.steps
                                          : std::min(cfg.steps, stop_after);
  const auto t0 = std::chrono::steady_clock::now();
  while (state.step < end) {
    const StepMetrics m = train_step(state, corpus);
    json row = {{"step", m.step},   {"loss", m.loss}, {"l1d", m.l1d},
                {"l2d", m.l2d},     {"lr", m.lr},     {"tau", m.tau},
                {"feature_std", m.feature_std}};
    metrics << row.dump() << "\n";
    metrics.flush();
    if (checkpoint_every != 0 && state.step % checkpoint_every == 0 &&
        state.step < end) {
      const fs::path p = out / ("checkpoint_" + std::to_string(state.step) + ".msia");
      save_checkpoint(state, p);
      manifest["checkpoints"].push_back(p.string());
    }
  }
  save_checkpoint(state, ckpt_path);
  manifest["checkpoints"].push_back(ckpt_path.string());
  manifest["final_step"] = state.step;
  manifest["seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out / "manifest.json", manifest);
  std::cout << "trained to step " << state.step << "; metrics in "
            << metrics_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt) {
  const fs::path out = ensure_out_dir(args.out_dir);
  const TrainState state = require_checkpoint(ckpt);
  const TrainConfig& cfg = state.config;
  const auto held_out = generate(scene_spec(cfg, true), cfg.eval_size);
  const ProbeOptions opts = probe_options(cfg);
  const ProbeReport random = probe_backbone(random_init_network(cfg), held_out, opts);
  const ProbeReport trained = probe_backbone(state.pair.online, held_out, opts);
  json report = {{"checkpoint", ckpt},
                 {"step", state.step},
                 {"images", held_out.size()},
                 {"K", cfg.k},
                 {"random_init", probe_json(random)},
                 {"trained", probe_json(trained)},
                 {"ari_instance_margin", trained.ari_instance - random.ari_instance},
                 {"ari_class_margin", trained.ari_class - random.ari_class}};
  write_json(out / "probe.json", report);
  std::cout << report.dump(2) << "\n";
  return kExitOk;
}

int cmd_viz(const CommonArgs& args, const std::string& ckpt, std::size_t count) {
  const fs::path out = ensure_out_dir(args.out_dir);
  const TrainState state = require_checkpoint(ckpt);
  const TrainConfig& cfg = state.config;
  const auto held_out =
      generate(scene_spec(cfg, true), std::min(count, cfg.eval_size));
  const ProbeOptions opts = probe_options(cfg);
  const Network random = random_init_network(cfg);
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto before = cluster_full_resolution(random, held_out[i], opts, i);
    const auto after =
        cluster_full_resolution(state.pair.online, held_out[i], opts, i);
    write_ppm(out / ("viz_" + std::to_string(i) + ".ppm"),
              compose_panels(held_out[i], {before, after}));
  }
  std::cout << "wrote " << held_out.size()
            << " panels (input | random init | trained) to " << out.string()
            << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& args, std::size_t seeds, double tolerance) {
  const fs::path out = ensure_out_dir(args.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = run_gradient_suite(seeds);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  json rows = json::array();
  for (const auto& r : reports) {
    const bool pass = r.max_relative_error < tolerance;
    ok = ok && pass;
    std::printf("%-26s max_rel_err=%.3e coords=%zu %s\n", r.op_name.c_str(),
                r.max_relative_error, r.coordinates, pass ? "ok" : "FAIL");
    rows.push_back({{"op", r.op_name},
                    {"max_relative_error", r.max_relative_error},
                    {"coordinates", r.coordinates},
                    {"pass", pass}});
  }
  write_json(out / "gradcheck.json", {{"seeds", seeds},
                                      {"tolerance", tolerance},
                                      {"seconds", secs},
                                      {"ops", rows}});
  std::printf("%zu ops, %zu seeds, %.2f s: %s\n", reports.size(), seeds, secs,
              ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitVerification;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"MultiSiam desk-scale self-supervised training"};
  app.set_version_flag("--version", MULTISIAM_VERSION);
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key=value config file");
    sub->add_option("--out", common.out_dir, "output directory");
    sub->allow_extras();
  };

  auto* gen = app.add_subcommand("gen", "write the synthetic corpus as .msim files");
  bool held_out = false;
  gen->add_flag("--held-out", held_out, "write the held-out corpus instead");
  add_common(gen);

  auto* train = app.add_subcommand("train", "train and write metrics.jsonl");
  std::string resume;
  std::size_t stop_after = 0, checkpoint_every = 0;
  train->add_option("--resume", resume, "continue from a checkpoint");
  train->add_option("--stop-after", stop_after, "stop at this step (0 = run to the end)");
  train->add_option("--checkpoint-every", checkpoint_every, "extra checkpoint period");
  add_common(train);

  std::string ckpt;
  auto* eval = app.add_subcommand("eval", "ARI probe of trained vs random-init backbone");
  eval->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
  add_common(eval);

  auto* viz = app.add_subcommand("viz", "write cluster-map panels as PPM");
  std::size_t count = 8;
  viz->add_option("--checkpoint", ckpt, "checkpoint to visualize")->required();
  viz->add_option("--count", count, "number of held-out images");
  add_common(viz);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference suite");
  std::size_t seeds = 5;
  double tolerance = 1e-4;
  gradcheck->add_option("--seeds", seeds, "random inputs per operation");
  gradcheck->add_option("--tolerance", tolerance, "max relative error");
  add_common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (auto* sub : app.get_subcommands()) common.extras = sub->remaining();
    if (gen->parsed()) return cmd_gen(common, held_out);
    if (train->parsed()) return cmd_train(common, resume, stop_after, checkpoint_every);
    if (eval->parsed()) return cmd_eval(common, ckpt);
    if (viz->parsed()) return cmd_viz(common, ckpt, count);
    if (gradcheck->parsed()) return cmd_gradcheck(common, seeds, tolerance);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
