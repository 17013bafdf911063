#pragma once

#include <yaml-cpp/yaml.h>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lilora/analysis.hpp"
#include "lilora/checkpoint.hpp"
#include "lilora/continual.hpp"
#include "lilora/metrics.hpp"
#include "lilora/taskgen.hpp"

namespace lilora {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

// --- configuration ---------------------------------------------------------

struct AlphaMode {
  std::optional<double> fixed;  // nullopt = learnable

  static AlphaMode parse(const std::string& s) {
    if (s == "learnable") return {};
    if (s.rfind("fixed-", 0) == 0) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str() + 6, &end);
      if (end && *end == '\0' && v >= 0.0 && v <= 1.0) return {v};
    }
    throw ConfigError("unknown alpha mode '" + s + "' (expected learnable or fixed-<value in [0,1]>)");
  }
  Strategy strategy() const { return fixed ? Strategy::lilora_fixed_alpha(*fixed) : Strategy::lilora(); }
  std::string name() const {
    if (!fixed) return "learnable";
    char buf[32];
    std::snprintf(buf, sizeof buf, "fixed-%g", *fixed);
    return buf;
  }
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  SuiteParams suite;
  std::vector<std::size_t> hidden = {64, 64};
  PretrainConfig pretrain;
  std::size_t r = 8, r_tilde = 4;
  InitScale init_scale = InitScale::RankScaled;
  TrainConfig train;
  std::vector<Strategy> strategies;
  std::vector<std::pair<std::size_t, std::size_t>> rank_grid;
  std::vector<AlphaMode> alpha_modes;
  std::vector<double> lambda_grid;

  Architecture architecture() const { return {suite.d_in, hidden, suite.total_classes()}; }

  void validate() const {
    if (schema_version != kConfigSchemaVersion)
      throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    suite.validate();
    train.validate();
    if (strategies.empty()) throw ConfigError("strategies: at least one strategy is required");
    if (r_tilde >= r) throw ConfigError("adapters: r_tilde must be below r");
    for (const auto& [gr, grt] : rank_grid)
      if (grt >= gr || grt == 0) throw ConfigError("sweeps.rank_grid: need 0 < r_tilde < r at every point");
    for (double l : lambda_grid)
      if (!(l >= 0.0)) throw ConfigError("sweeps.lambda_grid: lambda must be non-negative");
    const auto widths = architecture().widths();
    std::size_t smallest = widths.front();
    for (std::size_t w : widths) smallest = std::min(smallest, w);
    std::size_t max_r = r;
    for (const auto& g : rank_grid) max_r = std::max(max_r, g.first);
    if (max_r > smallest) throw ConfigError("adapters: rank exceeds the narrowest layer width");
  }

  /// Override training hyperparameters with a named preset.
  void apply_preset(const std::string& name) {
    TrainConfig base;
    if (name == "paper")
      base = TrainConfig::paper();
    else if (name == "desk")
      base = TrainConfig::desk();
    else
      throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
    train.adam = base.adam;
    train.batch_size = base.batch_size;
    train.epochs = base.epochs;
  }
};

namespace detail {

inline std::string where(const YAML::Node& n) {
  const auto m = n.Mark();
  return m.is_null() ? std::string() : " (line " + std::to_string(m.line + 1) + ")";
}

inline YAML::Node field(const YAML::Node& parent, const std::string& key, const std::string& path) {
  if (!parent.IsMap()) throw ConfigError("config: '" + path + "' parent is not a section" + where(parent));
  YAML::Node n = parent[key];
  if (!n) throw ConfigError("config: missing field '" + path + "'" + where(parent));
  return n;
}

template <class T>
T as(const YAML::Node& parent, const std::string& key, const std::string& path) {
  const YAML::Node n = field(parent, key, path);
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config: field '" + path + "' has the wrong type" + where(n));
  }
}

}  // namespace detail

/// Parse a YAML experiment config. Every field is required except the
/// optional `sweeps` section.
inline ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: parse error at line ") + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  using detail::as;
  using detail::field;
  ExperimentConfig c;
  c.schema_version = as<int>(root, "schema_version", "schema_version");
  c.seed = as<std::uint64_t>(root, "seed", "seed");
  c.output_dir = as<std::string>(root, "output_dir", "output_dir");

  const YAML::Node s = field(root, "suite", "suite");
  c.suite.d_in = as<std::size_t>(s, "d_in", "suite.d_in");
  c.suite.num_tasks = as<std::size_t>(s, "tasks", "suite.tasks");
  c.suite.classes_per_task = as<std::size_t>(s, "classes_per_task", "suite.classes_per_task");
  c.suite.train_per_class = as<std::size_t>(s, "train_per_class", "suite.train_per_class");
  c.suite.test_per_class = as<std::size_t>(s, "test_per_class", "suite.test_per_class");
  c.suite.sigma = as<double>(s, "sigma", "suite.sigma");
  c.suite.seed = c.seed;

  const YAML::Node b = field(root, "backbone", "backbone");
  c.hidden = as<std::vector<std::size_t>>(b, "hidden", "backbone.hidden");
  c.pretrain.epochs = as<std::size_t>(b, "pretrain_epochs", "backbone.pretrain_epochs");
  c.pretrain.adam.lr = as<double>(b, "pretrain_lr", "backbone.pretrain_lr");
  c.pretrain.batch_size = as<std::size_t>(b, "pretrain_batch_size", "backbone.pretrain_batch_size");

  const YAML::Node a = field(root, "adapters", "adapters");
  c.r = as<std::size_t>(a, "r", "adapters.r");
  c.r_tilde = as<std::size_t>(a, "r_tilde", "adapters.r_tilde");
  const std::string scale = as<std::string>(a, "init_scale", "adapters.init_scale");
  if (scale == "rank-scaled")
    c.init_scale = InitScale::RankScaled;
  else if (scale == "unit")
    c.init_scale = InitScale::Unit;
  else
    throw ConfigError("config: adapters.init_scale must be rank-scaled or unit" + detail::where(a["init_scale"]));

  const YAML::Node t = field(root, "train", "train");
  c.train.adam.lr = as<double>(t, "lr", "train.lr");
  c.train.adam.beta1 = as<double>(t, "beta1", "train.beta1");
  c.train.adam.beta2 = as<double>(t, "beta2", "train.beta2");
  c.train.adam.eps = as<double>(t, "eps", "train.eps");
  c.train.batch_size = as<std::size_t>(t, "batch_size", "train.batch_size");
  c.train.epochs = as<std::size_t>(t, "epochs", "train.epochs");
  c.train.lambda = as<double>(t, "lambda", "train.lambda");
  c.train.grad_through_sim = as<bool>(t, "grad_through_sim", "train.grad_through_sim");
  c.train.seed = c.seed;

  for (const auto& tag : as<std::vector<std::string>>(root, "strategies", "strategies"))
    c.strategies.push_back(Strategy::parse(tag));

  if (const YAML::Node sw = root["sweeps"]) {
    if (sw["rank_grid"])
      for (const auto& pt : as<std::vector<std::vector<std::size_t>>>(sw, "rank_grid", "sweeps.rank_grid")) {
        if (pt.size() != 2) throw ConfigError("config: sweeps.rank_grid entries must be [r, r_tilde]");
        c.rank_grid.emplace_back(pt[0], pt[1]);
      }
    if (sw["alpha_modes"])
      for (const auto& m : as<std::vector<std::string>>(sw, "alpha_modes", "sweeps.alpha_modes"))
        c.alpha_modes.push_back(AlphaMode::parse(m));
    if (sw["lambda_grid"]) c.lambda_grid = as<std::vector<double>>(sw, "lambda_grid", "sweeps.lambda_grid");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Re-seed everything derived from the master seed.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.suite.seed = seed;
  c.train.seed = seed;
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["suite"] = {{"d_in", c.suite.d_in},
                {"tasks", c.suite.num_tasks},
                {"classes_per_task", c.suite.classes_per_task},
                {"train_per_class", c.suite.train_per_class},
                {"test_per_class", c.suite.test_per_class},
                {"sigma", c.suite.sigma}};
  j["backbone"] = {{"hidden", c.hidden},
                   {"pretrain_epochs", c.pretrain.epochs},
                   {"pretrain_lr", c.pretrain.adam.lr},
                   {"pretrain_batch_size", c.pretrain.batch_size}};
  j["adapters"] = {{"r", c.r},
                   {"r_tilde", c.r_tilde},
                   {"init_scale", c.init_scale == InitScale::Unit ? "unit" : "rank-scaled"}};
  j["train"] = {{"lr", c.train.adam.lr},           {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},     {"eps", c.train.adam.eps},
                {"batch_size", c.train.batch_size}, {"epochs", c.train.epochs},
                {"lambda", c.train.lambda},         {"grad_through_sim", c.train.grad_through_sim}};
  std::vector<std::string> tags;
  for (const auto& s : c.strategies) tags.push_back(s.tag());
  j["strategies"] = tags;
  nlohmann::ordered_json grid = nlohmann::ordered_json::array();
  for (const auto& [r, rt] : c.rank_grid) grid.push_back({r, rt});
  std::vector<std::string> modes;
  for (const auto& m : c.alpha_modes) modes.push_back(m.name());
  j["sweeps"] = {{"rank_grid", grid}, {"alpha_modes", modes}, {"lambda_grid", c.lambda_grid}};
  return j;
}

// --- run plan --------------------------------------------------------------

struct RunSection {
  std::string group;  // main | rank | alpha | lambda
  std::string label;
  RunSpec spec;

  /// File-name-safe form of the label.
  std::string slug() const {
    std::string s;
    for (char ch : label) s += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.') ? ch : '_';
    return s;
  }
};

inline std::vector<RunSection> plan_sections(const ExperimentConfig& c) {
  auto base = [&](Strategy s) {
    RunSpec r;
    r.strategy = s;
    r.r = c.r;
    r.r_tilde = c.r_tilde;
    r.init_scale = c.init_scale;
    r.train = c.train;
    return r;
  };
  std::vector<RunSection> out;
  for (const Strategy& s : c.strategies) out.push_back({"main", s.tag(), base(s)});
  for (const auto& [r, rt] : c.rank_grid) {
    RunSpec spec = base(Strategy::lilora());
    spec.r = r;
    spec.r_tilde = rt;
    out.push_back({"rank", "lilora-r" + std::to_string(r) + "-rt" + std::to_string(rt), spec});
  }
  for (const AlphaMode& m : c.alpha_modes) {
    out.push_back({"alpha", "alpha-" + m.name(), base(m.strategy())});
  }
  for (double l : c.lambda_grid) {
    RunSpec spec = base(Strategy::lilora());
    spec.train.lambda = l;
    char buf[48];
    std::snprintf(buf, sizeof buf, "lilora-lambda%g", l);
    out.push_back({"lambda", buf, spec});
  }
  return out;
}

// --- output helpers --------------------------------------------------------

inline std::string fmt(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string accuracy_csv(const AccuracyMatrix& m) {
  std::ostringstream os;
  os << "after_task";
  for (std::size_t j = 0; j < m.num_tasks(); ++j) os << ",task" << j;
  os << '\n';
  for (std::size_t k = 0; k < m.num_tasks(); ++k) {
    os << k;
    for (std::size_t j = 0; j < m.num_tasks(); ++j) os << ',' << (j <= k ? fmt(m.at(k, j), 4) : std::string());
    os << '\n';
  }
  return os.str();
}

inline std::string step_record_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task"] = r.task;
  j["l_task"] = r.task_loss;
  j["l_reg"] = r.reg_loss;
  j["sim"] = r.sims;
  j["alpha"] = r.alphas;
  return j.dump();
}

inline std::string alpha_trace_csv(const ContinualResult& r) {
  std::ostringstream os;
  os << "task,layer,alpha_before,alpha_after\n";
  for (std::size_t t = 0; t < r.alpha_before.size(); ++t)
    for (std::size_t l = 0; l < r.alpha_before[t].size(); ++l)
      os << t << ',' << l << ',' << fmt(r.alpha_before[t][l], 9) << ',' << fmt(r.alpha_after[t][l], 9) << '\n';
  return os.str();
}

inline std::vector<std::vector<double>> parse_alpha_trace(const std::string& text, bool after) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t t, l;
    double b, a;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &t, &l, &b, &a) != 4)
      throw IntegrityError("malformed alpha trace line '" + line + "'", 0);
    if (out.size() <= t) out.resize(t + 1);
    out[t].push_back(after ? a : b);
  }
  return out;
}

struct SectionOutcome {
  RunSection section;
  ContinualResult result;
  std::vector<std::string> log_lines;
};

inline nlohmann::ordered_json section_json(const SectionOutcome& o) {
  const AccuracyMatrix& acc = o.result.accuracy;
  const std::size_t K = acc.num_tasks();
  nlohmann::ordered_json j;
  j["label"] = o.section.label;
  j["group"] = o.section.group;
  j["strategy"] = o.section.spec.strategy.tag();
  j["r"] = o.section.spec.r;
  j["r_tilde"] = o.section.spec.r_tilde;
  j["lambda"] = o.section.spec.train.lambda;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < K; ++k) rows.push_back(acc.row(k));
  j["accuracy"] = rows;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (std::size_t k = 1; k <= K; ++k) {
    nlohmann::ordered_json st;
    st["stage"] = k;
    st["AP"] = average_performance(acc, k);
    st["MAP"] = mean_average_performance(acc, k);
    st["BWT"] = k >= 2 ? nlohmann::ordered_json(backward_transfer(acc, k)) : nlohmann::ordered_json(nullptr);
    st["MIF"] = o.result.mif[k - 1];
    stages.push_back(st);
  }
  j["stages"] = stages;
  j["final"] = stages.back();
  std::vector<double> train_acc;
  for (const auto& l : o.result.logs) train_acc.push_back(100.0 * l.train_accuracy);
  j["train_accuracy"] = train_acc;
  if (o.section.spec.strategy.is_lilora()) {
    j["b0_drift"] = o.result.b0_drift;
    double m = 0.0;
    for (double d : o.result.b0_drift) m += d;
    j["mean_b0_drift"] = o.result.b0_drift.empty() ? 0.0 : m / static_cast<double>(o.result.b0_drift.size());
    j["alpha_before"] = o.result.alpha_before;
    j["alpha_after"] = o.result.alpha_after;
  }
  return j;
}

inline std::string report_text(const ExperimentConfig& c, double base_accuracy, const std::vector<SectionOutcome>& outs,
                               const EfficiencyReport& eff) {
  std::ostringstream os;
  os << "LiLoRA desk experiment report (lilora " << kVersion << ")\n";
  os << "seed " << c.seed << ", tasks " << c.suite.num_tasks << " x " << c.suite.classes_per_task << " classes, d_in "
     << c.suite.d_in << ", sigma " << fmt(c.suite.sigma, 3) << "\n";
  os << "r " << c.r << ", r_tilde " << c.r_tilde << ", lambda " << fmt(c.train.lambda, 3) << ", lr " << c.train.adam.lr
     << ", batch " << c.train.batch_size << ", epochs " << c.train.epochs << "\n";
  os << "backbone base accuracy " << fmt(100.0 * base_accuracy, 2) << "%\n\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-34s %8s %8s %8s %8s\n", "group", "run", "AP", "MAP", "BWT", "MIF");
  os << line;
  for (const auto& o : outs) {
    const auto& acc = o.result.accuracy;
    const std::size_t K = acc.num_tasks();
    const double bwt = K >= 2 ? backward_transfer(acc, K) : 0.0;
    std::snprintf(line, sizeof line, "%-8s %-34s %8.2f %8.2f %8.2f %8.2f\n", o.section.group.c_str(),
                  o.section.label.c_str(), average_performance(acc, K), mean_average_performance(acc, K), bwt,
                  o.result.mif.back());
    os << line;
  }
  os << "\naccuracy matrices (percent, row = after task k)\n";
  for (const auto& o : outs) {
    os << "[" << o.section.label << "]\n";
    for (std::size_t k = 0; k < o.result.accuracy.num_tasks(); ++k) {
      for (double v : o.result.accuracy.row(k)) {
        std::snprintf(line, sizeof line, " %7.2f", v);
        os << line;
      }
      os << '\n';
    }
  }
  os << "\nadapter parameters (K = " << c.suite.num_tasks << ")\n";
  for (const auto& r : eff.rows) {
    std::snprintf(line, sizeof line, "  %-16s total %10llu  per-task %8llu  shared %8llu\n", r.strategy.c_str(),
                  static_cast<unsigned long long>(r.count.total), static_cast<unsigned long long>(r.count.per_task),
                  static_cast<unsigned long long>(r.count.shared));
    os << line;
  }
  os << "  lilora/dir-lora per-task ratio " << fmt(eff.per_task_ratio, 4) << " (reference EP ratio "
     << fmt(EfficiencyReport::kReferencePerTaskRatio, 4) << ")\n";
  return os.str();
}

inline nlohmann::ordered_json efficiency_json(const EfficiencyReport& eff) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : eff.rows)
    rows.push_back({{"strategy", r.strategy},
                    {"total", r.count.total},
                    {"per_task", r.count.per_task},
                    {"shared", r.count.shared}});
  j["rows"] = rows;
  j["per_task_ratio"] = eff.per_task_ratio;
  j["total_ratio"] = eff.total_ratio;
  j["reference_per_task_ratio"] = EfficiencyReport::kReferencePerTaskRatio;
  return j;
}

// --- commands --------------------------------------------------------------

namespace paths {
inline std::filesystem::path suite(const std::filesystem::path& out) { return out / "suite.llts"; }
inline std::filesystem::path backbone(const std::filesystem::path& out) { return out / "backbone.lltc"; }
inline std::filesystem::path pretrain(const std::filesystem::path& out) { return out / "pretrain.json"; }
inline std::filesystem::path report_json(const std::filesystem::path& out) { return out / "report.json"; }
inline std::filesystem::path report_txt(const std::filesystem::path& out) { return out / "report.txt"; }
}  // namespace paths

struct PretrainOutcome {
  double base_accuracy = 0.0;
  std::uint32_t fingerprint = 0;
};

/// Generate the suite and pretrain + freeze the backbone; writes
/// suite.llts, backbone.lltc and pretrain.json under the output directory.
inline PretrainOutcome cmd_pretrain(const ExperimentConfig& c) {
  c.validate();
  const std::filesystem::path out = c.output_dir;
  const TaskSuite suite = generate_suite(c.suite);
  save_suite(paths::suite(out), suite);
  Rng rng(c.seed);
  Rng pre_rng = rng.fork();
  const PretrainResult pre = pretrain_backbone(suite.base.train, suite.base.test, c.architecture(), c.pretrain, pre_rng);
  save_backbone(paths::backbone(out), pre.backbone);
  PretrainOutcome o{pre.base_accuracy, backbone_fingerprint(pre.backbone)};
  nlohmann::ordered_json j;
  j["base_accuracy"] = o.base_accuracy;
  j["backbone_crc32"] = o.fingerprint;
  j["config"] = config_to_json(c);
  io::write_file_atomic(paths::pretrain(out), j.dump(2) + "\n");
  return o;
}

struct RunOutcome {
  std::vector<SectionOutcome> sections;
  std::vector<std::filesystem::path> files;
};

/// Run every planned section against the pretrained backbone and write the
/// report, accuracy CSVs, adapter checkpoints and training logs.
inline RunOutcome cmd_run(const ExperimentConfig& c, bool sequential = true) {
  c.validate();
  const std::filesystem::path out = c.output_dir;
  if (!std::filesystem::exists(paths::backbone(out)))
    throw std::runtime_error("no backbone checkpoint at '" + paths::backbone(out).string() + "'; run pretrain first");
  const Backbone bb = load_backbone(paths::backbone(out));
  const std::uint32_t fp_before = backbone_fingerprint(bb);
  if (bb.input_dim() != c.suite.d_in || bb.output_dim() != c.suite.total_classes())
    throw ConfigError("backbone checkpoint does not match the configured suite dimensions");

  TaskSuite suite;
  if (std::filesystem::exists(paths::suite(out))) {
    suite = load_suite(paths::suite(out));
    if (!(suite.params == c.suite)) suite = generate_suite(c.suite);
  } else {
    suite = generate_suite(c.suite);
  }
  double base_accuracy = accuracy(bb.forward(suite.base.test.X), suite.base.test.labels);

  const auto plan = plan_sections(c);
  auto run_one = [&](const RunSection& s) {
    SectionOutcome o;
    o.section = s;
    o.result = run_continual(bb, suite, s.spec, [&](const StepRecord& r) { o.log_lines.push_back(step_record_json(r)); });
    return o;
  };
  RunOutcome res;
  if (sequential) {
    for (const auto& s : plan) res.sections.push_back(run_one(s));
  } else {
    std::vector<std::future<SectionOutcome>> futs;
    for (const auto& s : plan) futs.push_back(std::async(std::launch::async, run_one, s));
    for (auto& f : futs) res.sections.push_back(f.get());
  }
  if (backbone_fingerprint(bb) != fp_before) throw StateError("backbone changed during the continual run");

  auto emit = [&](const std::filesystem::path& p, const std::string& text) {
    io::write_file_atomic(p, text);
    res.files.push_back(p);
  };
  for (const auto& o : res.sections) {
    const std::string slug = o.section.slug();
    emit(out / ("acc_" + slug + ".csv"), accuracy_csv(o.result.accuracy));
    std::string log;
    for (const auto& l : o.log_lines) log += l + "\n";
    emit(out / ("log_" + slug + ".jsonl"), log);
    save_bank(out / ("adapters_" + slug + ".lltc"), o.result.bank);
    res.files.push_back(out / ("adapters_" + slug + ".lltc"));
    if (o.section.spec.strategy.is_lilora()) emit(out / ("alpha_" + slug + ".csv"), alpha_trace_csv(o.result));
  }

  const auto dims = layer_dims_for(bb, res.sections.front().result.bank.injected_layers(), c.r, c.r_tilde);
  const EfficiencyReport eff = efficiency_report(dims, c.suite.num_tasks);
  nlohmann::ordered_json report;
  report["report_format"] = 1;
  report["version"] = kVersion;
  report["config"] = config_to_json(c);
  report["backbone"] = {{"base_accuracy", base_accuracy}, {"crc32", fp_before}};
  nlohmann::ordered_json secs = nlohmann::ordered_json::array();
  for (const auto& o : res.sections) {
    auto j = section_json(o);
    j["files"] = {{"accuracy", "acc_" + o.section.slug() + ".csv"},
                  {"adapters", "adapters_" + o.section.slug() + ".lltc"},
                  {"log", "log_" + o.section.slug() + ".jsonl"}};
    secs.push_back(j);
  }
  report["sections"] = secs;
  report["efficiency"] = efficiency_json(eff);
  emit(paths::report_json(out), report.dump(2) + "\n");
  emit(paths::report_txt(out), report_text(c, base_accuracy, res.sections, eff));
  return res;
}

struct AnalyzeOptions {
  bool cka = true;  // require a dir-lora run for A/B CKA heatmaps
};

/// Emit heatmap, fusion and efficiency CSVs from a finished run directory
/// into <run>/analysis, plus summary.json and manifest.txt. Returns the
/// written files.
inline std::vector<std::filesystem::path> cmd_analyze(const std::filesystem::path& run_dir, AnalyzeOptions opt = {}) {
  const auto report_path = paths::report_json(run_dir);
  std::vector<std::string> missing;
  if (!std::filesystem::exists(report_path)) missing.push_back(report_path.string());
  if (!missing.empty()) throw std::runtime_error("missing run artifacts: " + missing.front());
  const auto bytes = io::read_file(report_path);
  nlohmann::ordered_json report;
  try {
    report = nlohmann::ordered_json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("report.json is not valid JSON: ") + e.what(), 0);
  }
  for (const auto& s : report.at("sections")) {
    for (const char* key : {"adapters"}) {
      const auto p = run_dir / s.at("files").at(key).get<std::string>();
      if (!std::filesystem::exists(p)) missing.push_back(p.string());
    }
    if (Strategy::parse(s.at("strategy").get<std::string>()).is_lilora()) {
      const auto p = run_dir / ("alpha_" + RunSection{"", s.at("label").get<std::string>(), {}}.slug() + ".csv");
      if (!std::filesystem::exists(p)) missing.push_back(p.string());
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw std::runtime_error("missing run artifacts:" + list);
  }

  const std::filesystem::path out = run_dir / "analysis";
  std::vector<std::filesystem::path> files;
  auto emit = [&](const std::string& name, const std::string& text) {
    io::write_file_atomic(out / name, text);
    files.push_back(out / name);
  };
  nlohmann::ordered_json summary;

  std::optional<AdapterBank> dir;
  for (const auto& s : report.at("sections"))
    if (s.at("group") == "main" && s.at("strategy") == "dir-lora")
      dir = load_bank(run_dir / s.at("files").at("adapters").get<std::string>());
  if (opt.cka) {
    if (!dir)
      throw ContractError(
          "CKA heatmaps of per-task A matrices need a dir-lora run; add dir-lora to 'strategies' and re-run, or pass "
          "--skip-cka");
    nlohmann::ordered_json cka;
    for (MatrixKind kind : {MatrixKind::A, MatrixKind::B}) {
      std::vector<SimilarityHeatmap> hs;
      for (std::size_t l = 0; l < dir->num_layers(); ++l) {
        hs.push_back(adapter_cka_heatmap(*dir, kind, l));
        emit(std::string("cka_") + to_string(kind) + "_L" + std::to_string(l) + ".csv", heatmap_csv(hs.back()));
      }
      const auto mean = average_heatmaps(hs);
      emit(std::string("cka_") + to_string(kind) + "_mean.csv", heatmap_csv(mean));
      std::vector<double> per_layer;
      for (const auto& h : hs) per_layer.push_back(h.mean_off_diagonal());
      cka[to_string(kind)] = {{"mean_off_diagonal_per_layer", per_layer}, {"mean_off_diagonal", mean.mean_off_diagonal()}};
    }
    summary["cka"] = cka;
  }

  nlohmann::ordered_json fusion = nlohmann::ordered_json::object();
  for (const auto& s : report.at("sections")) {
    const Strategy strat = Strategy::parse(s.at("strategy").get<std::string>());
    if (!strat.is_lilora()) continue;
    const std::string label = s.at("label").get<std::string>();
    const std::string slug = RunSection{"", label, {}}.slug();
    const AdapterBank bank = load_bank(run_dir / s.at("files").at("adapters").get<std::string>());
    const auto trace = io::read_file(run_dir / ("alpha_" + slug + ".csv"));
    const std::string text(trace.begin(), trace.end());
    const FusionReport fr = fusion_report(bank, parse_alpha_trace(text, false), parse_alpha_trace(text, true));
    emit("fusion_" + slug + ".csv", fusion_csv(fr));
    fusion[label] = {{"mean_before", fr.mean_before}, {"mean_after", fr.mean_after}};
    if (bank.num_tasks() >= 2)
      for (std::size_t l = 0; l < bank.num_layers(); ++l)
        emit("cosine_residual_" + slug + "_L" + std::to_string(l) + ".csv",
             heatmap_csv(adapter_cosine_heatmap(bank, MatrixKind::Residual, l)));
  }
  summary["fusion"] = fusion;

  const auto& cfg = report.at("config");
  const Backbone bb = load_backbone(paths::backbone(run_dir));
  std::vector<std::size_t> all;
  for (std::size_t l = 0; l < bb.num_layers(); ++l) all.push_back(l);
  const auto dims =
      layer_dims_for(bb, all, cfg.at("adapters").at("r").get<std::size_t>(), cfg.at("adapters").at("r_tilde").get<std::size_t>());
  const EfficiencyReport eff = efficiency_report(dims, cfg.at("suite").at("tasks").get<std::uint64_t>());
  emit("efficiency.csv", efficiency_csv(eff));
  summary["efficiency"] = efficiency_json(eff);
  emit("summary.json", summary.dump(2) + "\n");

  std::string manifest;
  for (const auto& f : files) manifest += f.filename().string() + "\n";
  manifest += "manifest.txt\n";
  io::write_file_atomic(out / "manifest.txt", manifest);
  files.push_back(out / "manifest.txt");
  return files;
}

}  // namespace lilora
