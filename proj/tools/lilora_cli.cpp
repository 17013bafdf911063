#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lilora/experiment.hpp"

namespace {

struct CommonOptions {
  std::string config = "configs/default.yaml";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string strategies;
  std::string preset;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config (YAML)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the master seed");
  cmd->add_option("--out", o.out, "override the output directory");
  cmd->add_option("--preset", o.preset, "training hyperparameter preset")->check(CLI::IsMember({"paper", "desk"}));
}

lilora::ExperimentConfig resolve(const CommonOptions& o) {
  lilora::ExperimentConfig c = lilora::load_config(o.config);
  if (o.seed) lilora::set_seed(c, *o.seed);
  if (!o.out.empty()) c.output_dir = o.out;
  if (!o.preset.empty()) c.apply_preset(o.preset);
  if (!o.strategies.empty()) {
    c.strategies.clear();
    std::stringstream ss(o.strategies);
    std::string tag;
    while (std::getline(ss, tag, ','))
      if (!tag.empty()) c.strategies.push_back(lilora::Strategy::parse(tag));
  }
  c.validate();
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiLoRA continual-learning desk lab"};
  app.require_subcommand(1);

  CommonOptions pre_opt, run_opt;
  bool sequential = false;
  std::string run_dir;
  bool skip_cka = false;

  auto* pre = app.add_subcommand("pretrain", "generate the task suite and pretrain the frozen backbone");
  add_common(pre, pre_opt);

  auto* run = app.add_subcommand("run", "train every configured strategy over the task stream");
  add_common(run, run_opt);
  run->add_option("--strategies", run_opt.strategies, "comma-separated strategy tags (overrides the config)");
  run->add_flag("--sequential", sequential, "run strategies one after another (reference, byte-reproducible)");

  auto* analyze = app.add_subcommand("analyze", "emit CKA, fusion and efficiency tables for a finished run");
  analyze->add_option("run_dir", run_dir, "run output directory")->required();
  analyze->add_flag("--skip-cka", skip_cka, "skip the dir-lora A/B CKA heatmaps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) {
      const auto cfg = resolve(pre_opt);
      const auto t0 = std::chrono::steady_clock::now();
      const auto o = lilora::cmd_pretrain(cfg);
      std::printf("backbone base accuracy %.4f, crc32 %08x, written to %s (%.1fs)\n", o.base_accuracy, o.fingerprint,
                  cfg.output_dir.c_str(), seconds_since(t0));
    } else if (*run) {
      const auto cfg = resolve(run_opt);
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = lilora::cmd_run(cfg, sequential);
      const double secs = seconds_since(t0);
      nlohmann::ordered_json timing;
      timing["wall_clock_seconds"] = secs;
      timing["sequential"] = sequential;
      timing["sections"] = res.sections.size();
      lilora::io::write_file_atomic(std::filesystem::path(cfg.output_dir) / "timing.json", timing.dump(2) + "\n");
      const auto txt = lilora::io::read_file(lilora::paths::report_txt(cfg.output_dir));
      std::fwrite(txt.data(), 1, txt.size(), stdout);
      std::printf("\n%zu sections in %.1fs, report at %s\n", res.sections.size(), secs,
                  lilora::paths::report_json(cfg.output_dir).c_str());
    } else if (*analyze) {
      const auto files = lilora::cmd_analyze(run_dir, {!skip_cka});
      for (const auto& f : files) std::printf("%s\n", f.string().c_str());
    }
  } catch (const lilora::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const lilora::IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
