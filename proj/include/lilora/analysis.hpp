#pragma once

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "lilora/adapters.hpp"
#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"

namespace lilora {

inline Matrix center_columns(const Matrix& x) {
  Matrix c = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
    mean /= static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= mean;
  }
  return c;
}

/// Linear CKA between two representations of the same n samples:
///   ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)
/// with Xc, Yc column-centered. Lies in [0, 1].
inline double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows())
    throw ShapeError("linear_cka: row counts differ, " + x.shape() + " vs " + y.shape());
  if (x.rows() < 2) throw ShapeError("linear_cka: need at least two samples");
  const Matrix xc = center_columns(x), yc = center_columns(y);
  const Matrix xt = transpose(xc), yt = transpose(yc);
  const double cross = frobenius_norm_sq(matmul(yt, xc));
  const double nx = frobenius_norm(matmul(xt, xc));
  const double ny = frobenius_norm(matmul(yt, yc));
  if (nx == 0.0 || ny == 0.0) throw SimilarityUndefinedError("linear_cka: representation is constant after centering");
  return cross / (nx * ny);
}

enum class MatrixKind { A, B, Residual };
enum class SimilarityKind { Cka, Cosine };

inline const char* to_string(MatrixKind k) {
  switch (k) {
    case MatrixKind::A: return "A";
    case MatrixKind::B: return "B";
    case MatrixKind::Residual: return "residual";
  }
  return "?";
}
inline const char* to_string(SimilarityKind k) { return k == SimilarityKind::Cka ? "cka" : "cosine"; }

struct SimilarityHeatmap {
  Matrix values;  // K x K
  MatrixKind matrix_kind = MatrixKind::A;
  SimilarityKind similarity = SimilarityKind::Cka;
  int layer = -1;  // -1: averaged over layers

  std::size_t size() const noexcept { return values.rows(); }

  double mean_off_diagonal() const {
    const std::size_t k = size();
    if (k < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        if (i != j) s += values(i, j);
    return s / static_cast<double>(k * (k - 1));
  }
};

/// Pairwise linear CKA over per-task representations (rows = samples).
inline Matrix pairwise_cka(const std::vector<Matrix>& reps) {
  const std::size_t k = reps.size();
  Matrix h(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    h(i, i) = 1.0;
    for (std::size_t j = i + 1; j < k; ++j) h(i, j) = h(j, i) = linear_cka(reps[i], reps[j]);
  }
  return h;
}

/// Pairwise Frobenius cosine; zero-norm pairs give 0.
inline Matrix pairwise_cosine(const std::vector<Matrix>& ms) {
  const std::size_t k = ms.size();
  Matrix h(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      const double ni = frobenius_norm(ms[i]), nj = frobenius_norm(ms[j]);
      const double c = (ni < 1e-12 || nj < 1e-12) ? 0.0 : frobenius_inner(ms[i], ms[j]) / (ni * nj);
      h(i, j) = h(j, i) = c;
    }
  return h;
}

/// Per-task A or B matrices of one adapter layer, oriented for CKA:
/// A_i (r x k) is transposed to k x r, B_i (d x r) is used as-is.
/// For LiLoRA, B_i is the effective alpha B0 + (1 - alpha) B~_i A~_i.
inline std::vector<Matrix> task_matrices(const AdapterBank& bank, MatrixKind which, std::size_t layer) {
  const Strategy& s = bank.strategy();
  std::vector<Matrix> out;
  const LayerState& ls = bank.layer(layer);
  if (which == MatrixKind::Residual) {
    if (!s.is_lilora()) throw ContractError("task residuals exist only under LiLoRA, have " + s.tag());
    for (const auto& e : std::get<LiLoRALayerState>(ls).tasks) out.push_back(e.residual());
    return out;
  }
  switch (s.kind) {
    case StrategyKind::DirLoRA:
      for (const auto& p : std::get<DirLoRALayerState>(ls).tasks) out.push_back(which == MatrixKind::A ? transpose(p.A) : p.B);
      return out;
    case StrategyKind::SharedA:
      if (which == MatrixKind::A)
        throw ContractError("strategy " + s.tag() + " shares one A across tasks; per-task A needs a dir-lora run");
      for (const auto& t : std::get<SharedALayerState>(ls).tasks) out.push_back(t.B);
      return out;
    case StrategyKind::SeqLoRA:
      throw ContractError("seq-lora keeps a single adapter pair; per-task matrices need a dir-lora run");
    default: {
      if (which == MatrixKind::A)
        throw ContractError("strategy " + s.tag() + " shares one A across tasks; per-task A needs a dir-lora run");
      const auto& st = std::get<LiLoRALayerState>(ls);
      for (const auto& e : st.tasks) {
        const double a = e.alpha();
        out.push_back(add(scale(st.B0, a), scale(e.residual(), 1.0 - a)));
      }
      return out;
    }
  }
}

/// CKA heatmap across tasks for one adapter layer.
inline SimilarityHeatmap adapter_cka_heatmap(const AdapterBank& bank, MatrixKind which, std::size_t layer) {
  const auto mats = task_matrices(bank, which, layer);
  if (mats.size() < 2) throw ContractError("CKA heatmap needs at least two trained tasks");
  return {pairwise_cka(mats), which, SimilarityKind::Cka, static_cast<int>(layer)};
}

/// Frobenius-cosine heatmap across tasks for one adapter layer.
inline SimilarityHeatmap adapter_cosine_heatmap(const AdapterBank& bank, MatrixKind which, std::size_t layer) {
  const auto mats = task_matrices(bank, which, layer);
  if (mats.size() < 2) throw ContractError("cosine heatmap needs at least two trained tasks");
  return {pairwise_cosine(mats), which, SimilarityKind::Cosine, static_cast<int>(layer)};
}

/// Elementwise mean of same-kind heatmaps (layer = -1).
inline SimilarityHeatmap average_heatmaps(const std::vector<SimilarityHeatmap>& hs) {
  if (hs.empty()) throw ContractError("nothing to average");
  SimilarityHeatmap out = hs.front();
  out.layer = -1;
  for (std::size_t i = 1; i < hs.size(); ++i) out.values = add(out.values, hs[i].values);
  out.values = scale(out.values, 1.0 / static_cast<double>(hs.size()));
  return out;
}

/// CSV with task ids on the header row and first column; '.' decimals, LF.
inline std::string heatmap_csv(const SimilarityHeatmap& h) {
  std::ostringstream os;
  os << "task";
  for (std::size_t j = 0; j < h.size(); ++j) os << ',' << j;
  os << '\n';
  char buf[40];
  for (std::size_t i = 0; i < h.size(); ++i) {
    os << i;
    for (std::size_t j = 0; j < h.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.9f", h.values(i, j));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

// --- fusion coefficients ---------------------------------------------------

struct FusionRow {
  std::size_t task = 0;
  std::size_t layer = 0;
  double before = 0.0;
  double after = 0.0;
};

struct FusionReport {
  std::vector<FusionRow> rows;  // layers x tasks, task-major
  std::vector<double> mean_before, mean_after;  // per task
};

/// Per-layer alpha before/after each task. `before[t]` / `after[t]` hold one
/// value per layer.
inline FusionReport fusion_report(const AdapterBank& bank, const std::vector<std::vector<double>>& before,
                                  const std::vector<std::vector<double>>& after) {
  if (!bank.strategy().is_lilora())
    throw ContractError("fusion report requires a LiLoRA strategy, have " + bank.strategy().tag());
  if (before.size() != after.size() || before.size() != bank.num_tasks())
    throw ContractError("fusion snapshots must cover every task");
  FusionReport rep;
  for (std::size_t t = 0; t < before.size(); ++t) {
    if (before[t].size() != bank.num_layers() || after[t].size() != bank.num_layers())
      throw ContractError("fusion snapshot for task " + std::to_string(t) + " has the wrong layer count");
    double mb = 0.0, ma = 0.0;
    for (std::size_t l = 0; l < bank.num_layers(); ++l) {
      rep.rows.push_back({t, l, before[t][l], after[t][l]});
      mb += before[t][l];
      ma += after[t][l];
    }
    rep.mean_before.push_back(mb / static_cast<double>(bank.num_layers()));
    rep.mean_after.push_back(ma / static_cast<double>(bank.num_layers()));
  }
  return rep;
}

inline std::string fusion_csv(const FusionReport& r) {
  std::ostringstream os;
  os << "task,layer,alpha_before,alpha_after\n";
  char buf[96];
  for (const FusionRow& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9f,%.9f\n", row.task, row.layer, row.before, row.after);
    os << buf;
  }
  return os.str();
}

// --- parameter efficiency --------------------------------------------------

struct EfficiencyRow {
  std::string strategy;
  ParamCount count;
};

struct EfficiencyReport {
  std::vector<EfficiencyRow> rows;
  double per_task_ratio = 0.0;  // LiLoRA / DirLoRA, per task
  double total_ratio = 0.0;     // LiLoRA / DirLoRA, total
  // Reference per-task expansion ratio at 7B scale (104.6 MB / 357.3 MB).
  static constexpr double kReferencePerTaskRatio = 104.6 / 357.3;
};

inline EfficiencyReport efficiency_report(const std::vector<LayerDims>& layers, std::uint64_t num_tasks) {
  EfficiencyReport rep;
  for (const Strategy& s : {Strategy::dir_lora(), Strategy::shared_a(), Strategy::lilora(), Strategy::seq_lora()})
    rep.rows.push_back({s.tag(), param_count(s, layers, num_tasks)});
  const ParamCount dir = rep.rows[0].count, lil = rep.rows[2].count;
  rep.per_task_ratio = static_cast<double>(lil.per_task) / static_cast<double>(dir.per_task);
  rep.total_ratio = static_cast<double>(lil.total) / static_cast<double>(dir.total);
  return rep;
}

inline std::string efficiency_csv(const EfficiencyReport& r) {
  std::ostringstream os;
  os << "strategy,total,per_task,shared\n";
  for (const auto& row : r.rows)
    os << row.strategy << ',' << row.count.total << ',' << row.count.per_task << ',' << row.count.shared << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "# lilora/dir-lora per-task ratio %.6f, total ratio %.6f, reference EP ratio %.6f\n",
                r.per_task_ratio, r.total_ratio, EfficiencyReport::kReferencePerTaskRatio);
  os << buf;
  return os.str();
}

}  // namespace lilora
