#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <type_traits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"

namespace lilora {

enum class StrategyKind { SeqLoRA, DirLoRA, SharedA, LiLoRA, LiLoRANoReg, LiLoRAFixedAlpha };

/// Adapter strategy tag, e.g. "lilora" or "lilora-fixed-alpha(0.5)".
struct Strategy {
  StrategyKind kind = StrategyKind::LiLoRA;
  double fixed_alpha = 0.5;  // only meaningful for LiLoRAFixedAlpha

  static Strategy seq_lora() { return {StrategyKind::SeqLoRA}; }
  static Strategy dir_lora() { return {StrategyKind::DirLoRA}; }
  static Strategy shared_a() { return {StrategyKind::SharedA}; }
  static Strategy lilora() { return {StrategyKind::LiLoRA}; }
  static Strategy lilora_no_reg() { return {StrategyKind::LiLoRANoReg}; }
  static Strategy lilora_fixed_alpha(double a) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("fixed alpha must lie in [0, 1]");
    return {StrategyKind::LiLoRAFixedAlpha, a};
  }

  bool is_lilora() const noexcept {
    return kind == StrategyKind::LiLoRA || kind == StrategyKind::LiLoRANoReg || kind == StrategyKind::LiLoRAFixedAlpha;
  }
  bool uses_regularizer() const noexcept {
    return kind == StrategyKind::LiLoRA || kind == StrategyKind::LiLoRAFixedAlpha;
  }

  std::string tag() const {
    switch (kind) {
      case StrategyKind::SeqLoRA: return "seq-lora";
      case StrategyKind::DirLoRA: return "dir-lora";
      case StrategyKind::SharedA: return "shared-a";
      case StrategyKind::LiLoRA: return "lilora";
      case StrategyKind::LiLoRANoReg: return "lilora-no-reg";
      case StrategyKind::LiLoRAFixedAlpha: {
        char buf[64];
        std::snprintf(buf, sizeof buf, "lilora-fixed-alpha(%g)", fixed_alpha);
        return buf;
      }
    }
    return "?";
  }

  static Strategy parse(const std::string& tag) {
    if (tag == "seq-lora") return seq_lora();
    if (tag == "dir-lora") return dir_lora();
    if (tag == "shared-a") return shared_a();
    if (tag == "lilora") return lilora();
    if (tag == "lilora-no-reg") return lilora_no_reg();
    const std::string prefix = "lilora-fixed-alpha(";
    if (tag.rfind(prefix, 0) == 0 && tag.size() > prefix.size() + 1 && tag.back() == ')') {
      const std::string num = tag.substr(prefix.size(), tag.size() - prefix.size() - 1);
      char* end = nullptr;
      const double v = std::strtod(num.c_str(), &end);
      if (end && *end == '\0') return lilora_fixed_alpha(v);
    }
    throw ConfigError("unknown strategy tag '" + tag + "'");
  }

  friend bool operator==(const Strategy& a, const Strategy& b) {
    return a.kind == b.kind && (a.kind != StrategyKind::LiLoRAFixedAlpha || a.fixed_alpha == b.fixed_alpha);
  }
};

/// d = output dim, k = input dim, r = shared rank, r_tilde = task rank.
struct LayerDims {
  std::size_t d = 0, k = 0, r = 0, r_tilde = 0;

  void validate() const {
    if (d == 0 || k == 0 || r == 0 || r_tilde == 0) throw ShapeError("layer dims must be positive");
    if (r > std::min(d, k))
      throw ShapeError("rank r=" + std::to_string(r) + " exceeds min(d,k)=" + std::to_string(std::min(d, k)));
    if (r_tilde >= r)
      throw ShapeError("task rank r_tilde=" + std::to_string(r_tilde) + " must be below r=" + std::to_string(r));
  }
  friend bool operator==(const LayerDims&, const LayerDims&) = default;
};

/// Gaussian init variance for A-type factors: N(0, 1/rank) or N(0, 1).
enum class InitScale { RankScaled, Unit };

inline double init_std(InitScale s, std::size_t rank) {
  return s == InitScale::Unit ? 1.0 : 1.0 / std::sqrt(static_cast<double>(rank));
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// --- per-layer states ------------------------------------------------------

struct LoRAPair {
  Matrix B;  // d x r
  Matrix A;  // r x k
  bool frozen = false;
};

struct SeqLoRALayerState {
  LayerDims dims;
  LoRAPair pair;
  std::size_t tasks_seen = 0;
  bool active = false;
};

struct DirLoRALayerState {
  LayerDims dims;
  std::vector<LoRAPair> tasks;
};

struct SharedATask {
  Matrix B;  // d x r
  bool frozen = false;
};

struct SharedALayerState {
  LayerDims dims;
  Matrix A;  // r x k, shared and trainable
  std::vector<SharedATask> tasks;
};

struct LiLoRATaskEntry {
  Matrix B_tilde;  // d x r~
  Matrix A_tilde;  // r~ x r
  Matrix z;        // 1x1 pre-activation, alpha = sigmoid(z)
  std::optional<double> fixed_alpha;
  bool frozen = false;

  double alpha() const { return fixed_alpha ? *fixed_alpha : sigmoid(z[0]); }
  Matrix residual() const { return matmul(B_tilde, A_tilde); }
};

struct LiLoRALayerState {
  LayerDims dims;
  Matrix A;   // r x k
  Matrix B0;  // d x r
  std::optional<Matrix> B0_prev;        // B0 at the end of the previous task
  std::optional<Matrix> residual_prev;  // B~_{t-1} A~_{t-1}
  std::vector<LiLoRATaskEntry> tasks;
};

/// Shared parts only: B0 = 0, A ~ N(0, 1/r) (or unit variance).
inline LiLoRALayerState init_lilora_layer(const LayerDims& dims, Rng& rng, InitScale scale = InitScale::RankScaled) {
  dims.validate();
  LiLoRALayerState s;
  s.dims = dims;
  s.A = gaussian_matrix(rng, dims.r, dims.k, init_std(scale, dims.r));
  s.B0 = Matrix(dims.d, dims.r);
  return s;
}

/// Append a fresh task entry: B~ = 0, A~ ~ N(0, 1/r~), z ~ N(0, 1).
/// Snapshots B0 and the previous residual for the stability loss.
inline void add_task_entry(LiLoRALayerState& s, Rng& rng, std::optional<double> fixed_alpha = std::nullopt,
                           InitScale scale = InitScale::RankScaled) {
  if (!s.tasks.empty() && !s.tasks.back().frozen)
    throw StateError("cannot add a task entry while task " + std::to_string(s.tasks.size() - 1) + " is unfrozen");
  if (!s.tasks.empty()) {
    s.B0_prev = s.B0;
    s.residual_prev = s.tasks.back().residual();
  }
  LiLoRATaskEntry e;
  e.B_tilde = Matrix(s.dims.d, s.dims.r_tilde);
  e.A_tilde = gaussian_matrix(rng, s.dims.r_tilde, s.dims.r, init_std(scale, s.dims.r_tilde));
  e.z = Matrix::scalar(rng.normal());
  e.fixed_alpha = fixed_alpha;
  s.tasks.push_back(std::move(e));
}

inline void check_task(std::size_t task_id, std::size_t count) {
  if (task_id >= count)
    throw LookupError("unknown task id " + std::to_string(task_id) + " (have " + std::to_string(count) + ")");
}

/// dW_i = (alpha B0 + (1 - alpha) B~_i A~_i) A
inline Matrix compose_lilora(const LiLoRALayerState& s, std::size_t task_id) {
  check_task(task_id, s.tasks.size());
  const LiLoRATaskEntry& e = s.tasks[task_id];
  const double a = e.alpha();
  const Matrix inner = add(scale(s.B0, a), scale(e.residual(), 1.0 - a));
  return matmul(inner, s.A);
}

inline Matrix compose_dirlora(const DirLoRALayerState& s, std::size_t task_id) {
  check_task(task_id, s.tasks.size());
  return matmul(s.tasks[task_id].B, s.tasks[task_id].A);
}

inline Matrix compose_shared_a(const SharedALayerState& s, std::size_t task_id) {
  check_task(task_id, s.tasks.size());
  return matmul(s.tasks[task_id].B, s.A);
}

/// SeqLoRA has a single pair; every task sees its current value.
inline Matrix compose_seq_lora(const SeqLoRALayerState& s, std::size_t task_id) {
  check_task(task_id, s.tasks_seen);
  return matmul(s.pair.B, s.pair.A);
}

/// W' = W0 + dW
inline Matrix merge_weights(const Matrix& W0, const Matrix& delta) {
  if (!W0.same_shape(delta)) throw ShapeError("merge_weights: W0 " + W0.shape() + " vs delta " + delta.shape());
  return add(W0, delta);
}

// --- parameter accounting --------------------------------------------------

struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t per_task = 0;
  std::uint64_t shared = 0;
  friend bool operator==(const ParamCount&, const ParamCount&) = default;
};

/// Closed-form adapter parameter counts summed over layers.
///   dir-lora       per task r(d+k)
///   shared-a       shared rk, per task dr
///   lilora         shared rk + dr, per task r~(d+r) + 1 (the alpha logit)
///   fixed alpha    as lilora without the +1
///   seq-lora       shared r(d+k), nothing per task
inline ParamCount param_count(const Strategy& strategy, const std::vector<LayerDims>& layers, std::uint64_t num_tasks) {
  ParamCount c;
  for (const LayerDims& l : layers) {
    const std::uint64_t d = l.d, k = l.k, r = l.r, rt = l.r_tilde;
    switch (strategy.kind) {
      case StrategyKind::SeqLoRA: c.shared += r * (d + k); break;
      case StrategyKind::DirLoRA: c.per_task += r * (d + k); break;
      case StrategyKind::SharedA:
        c.shared += r * k;
        c.per_task += d * r;
        break;
      case StrategyKind::LiLoRA:
      case StrategyKind::LiLoRANoReg:
        c.shared += r * k + d * r;
        c.per_task += rt * (d + r) + 1;
        break;
      case StrategyKind::LiLoRAFixedAlpha:
        c.shared += r * k + d * r;
        c.per_task += rt * (d + r);
        break;
    }
  }
  c.total = c.shared + num_tasks * c.per_task;
  return c;
}

// --- adapter bank ----------------------------------------------------------

using LayerState = std::variant<SeqLoRALayerState, DirLoRALayerState, SharedALayerState, LiLoRALayerState>;

/// One adapter state per injected backbone layer, all under one strategy.
class AdapterBank {
 public:
  AdapterBank() = default;

  AdapterBank(Strategy strategy, std::vector<LayerDims> dims, std::vector<std::size_t> injected_layers, Rng& rng,
              InitScale scale = InitScale::RankScaled)
      : strategy_(strategy), injected_(std::move(injected_layers)), scale_(scale) {
    if (dims.size() != injected_.size()) throw ShapeError("one LayerDims per injected layer required");
    for (const LayerDims& d : dims) {
      d.validate();
      switch (strategy.kind) {
        case StrategyKind::SeqLoRA: {
          SeqLoRALayerState s;
          s.dims = d;
          s.pair.B = Matrix(d.d, d.r);
          s.pair.A = gaussian_matrix(rng, d.r, d.k, init_std(scale, d.r));
          layers_.emplace_back(std::move(s));
          break;
        }
        case StrategyKind::DirLoRA: {
          DirLoRALayerState s;
          s.dims = d;
          layers_.emplace_back(std::move(s));
          break;
        }
        case StrategyKind::SharedA: {
          SharedALayerState s;
          s.dims = d;
          s.A = gaussian_matrix(rng, d.r, d.k, init_std(scale, d.r));
          layers_.emplace_back(std::move(s));
          break;
        }
        default:
          layers_.emplace_back(init_lilora_layer(d, rng, scale));
          break;
      }
    }
  }

  const Strategy& strategy() const noexcept { return strategy_; }
  InitScale init_scale() const noexcept { return scale_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  const std::vector<std::size_t>& injected_layers() const noexcept { return injected_; }
  LayerState& layer(std::size_t i) { return layers_.at(i); }
  const LayerState& layer(std::size_t i) const { return layers_.at(i); }

  /// Index of the adapter attached to backbone layer `backbone_layer`, if any.
  std::optional<std::size_t> adapter_for(std::size_t backbone_layer) const {
    for (std::size_t i = 0; i < injected_.size(); ++i)
      if (injected_[i] == backbone_layer) return i;
    return std::nullopt;
  }

  std::size_t num_tasks() const {
    if (layers_.empty()) return 0;
    return std::visit([](const auto& s) { return task_count(s); }, layers_.front());
  }

  bool has_unfrozen_task() const {
    if (layers_.empty() || num_tasks() == 0) return false;
    return std::visit([](const auto& s) { return last_unfrozen(s); }, layers_.front());
  }

  /// Open a new task in every layer.
  void add_task(Rng& rng) {
    if (has_unfrozen_task())
      throw StateError("task " + std::to_string(num_tasks() - 1) + " must be frozen before adding another");
    for (LayerState& ls : layers_) {
      std::visit(
          [&](auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, SeqLoRALayerState>) {
              ++s.tasks_seen;
              s.active = true;
            } else if constexpr (std::is_same_v<T, DirLoRALayerState>) {
              LoRAPair p;
              p.B = Matrix(s.dims.d, s.dims.r);
              p.A = gaussian_matrix(rng, s.dims.r, s.dims.k, init_std(scale_, s.dims.r));
              s.tasks.push_back(std::move(p));
            } else if constexpr (std::is_same_v<T, SharedALayerState>) {
              s.tasks.push_back({Matrix(s.dims.d, s.dims.r), false});
            } else {
              std::optional<double> fixed;
              if (strategy_.kind == StrategyKind::LiLoRAFixedAlpha) fixed = strategy_.fixed_alpha;
              add_task_entry(s, rng, fixed, scale_);
            }
          },
          ls);
    }
  }

  /// Freeze the current task's entries in every layer.
  void freeze_current() {
    if (!has_unfrozen_task()) throw StateError("no unfrozen task to freeze");
    for (LayerState& ls : layers_) {
      std::visit(
          [](auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, SeqLoRALayerState>)
              s.active = false;
            else
              s.tasks.back().frozen = true;
          },
          ls);
    }
  }

  /// dW for adapter `i` under task `task_id`.
  Matrix delta(std::size_t i, std::size_t task_id) const {
    return std::visit(
        [&](const auto& s) -> Matrix {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, SeqLoRALayerState>)
            return compose_seq_lora(s, task_id);
          else if constexpr (std::is_same_v<T, DirLoRALayerState>)
            return compose_dirlora(s, task_id);
          else if constexpr (std::is_same_v<T, SharedALayerState>)
            return compose_shared_a(s, task_id);
          else
            return compose_lilora(s, task_id);
        },
        layers_.at(i));
  }

  LayerDims dims(std::size_t i) const {
    return std::visit([](const auto& s) { return s.dims; }, layers_.at(i));
  }

  std::vector<LayerDims> all_dims() const {
    std::vector<LayerDims> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) out.push_back(dims(i));
    return out;
  }

  /// Alpha of every layer for `task_id` (LiLoRA strategies only).
  std::vector<double> alphas(std::size_t task_id) const {
    if (!strategy_.is_lilora()) throw ContractError("alphas() requires a LiLoRA strategy, have " + strategy_.tag());
    std::vector<double> out;
    for (const LayerState& ls : layers_) {
      const auto& s = std::get<LiLoRALayerState>(ls);
      check_task(task_id, s.tasks.size());
      out.push_back(s.tasks[task_id].alpha());
    }
    return out;
  }

  // Used by the checkpoint reader.
  static AdapterBank from_parts(Strategy strategy, std::vector<std::size_t> injected, std::vector<LayerState> layers,
                                InitScale scale) {
    AdapterBank b;
    b.strategy_ = strategy;
    b.injected_ = std::move(injected);
    b.layers_ = std::move(layers);
    b.scale_ = scale;
    return b;
  }

 private:
  static std::size_t task_count(const SeqLoRALayerState& s) { return s.tasks_seen; }
  template <class T>
  static std::size_t task_count(const T& s) {
    return s.tasks.size();
  }
  static bool last_unfrozen(const SeqLoRALayerState& s) { return s.active; }
  template <class T>
  static bool last_unfrozen(const T& s) {
    return !s.tasks.back().frozen;
  }

  Strategy strategy_;
  std::vector<std::size_t> injected_;
  std::vector<LayerState> layers_;
  InitScale scale_ = InitScale::RankScaled;
};

}  // namespace lilora
