#include <gtest/gtest.h>

#include "lilora/analysis.hpp"
#include "lilora/continual.hpp"

using namespace lilora;

TEST(LinearCka, SelfScaleAndOrthogonalInvariance) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = gaussian_matrix(rng, 30, 6, 1.0);
    EXPECT_NEAR(linear_cka(x, x), 1.0, 1e-9);
    EXPECT_NEAR(linear_cka(x, scale(x, 2.0)), 1.0, 1e-9);
    EXPECT_NEAR(linear_cka(x, scale(x, -0.3)), 1.0, 1e-9);
    EXPECT_NEAR(linear_cka(x, matmul(x, random_orthogonal(rng, 6))), 1.0, 1e-9);
  }
}

TEST(LinearCka, BoundedAndSymmetric) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = gaussian_matrix(rng, 16, 4, 1.0), y = gaussian_matrix(rng, 16, 7, 1.0);
    const double c = linear_cka(x, y);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0 + 1e-12);
    EXPECT_NEAR(c, linear_cka(y, x), 1e-12);
  }
}

TEST(LinearCka, HandComputedValue) {
  // Centered columns: x = [-1, 0, 1], y = [1, -2, 1]; x is orthogonal to y.
  EXPECT_NEAR(linear_cka(Matrix{{0}, {1}, {2}}, Matrix{{2}, {-1}, {2}}), 0.0, 1e-15);
  // Two features: x = [[1,0],[0,1],[-1,-1]] vs itself with a column swap.
  const Matrix x{{1, 0}, {0, 1}, {-1, -1}};
  const Matrix y{{0, 1}, {1, 0}, {-1, -1}};
  EXPECT_NEAR(linear_cka(x, y), 1.0, 1e-12);
}

TEST(LinearCka, Errors) {
  EXPECT_THROW(linear_cka(Matrix(3, 2, 1.0), Matrix(4, 2, 1.0)), ShapeError);
  EXPECT_THROW(linear_cka(Matrix(3, 2, 1.0), Matrix(3, 2, 1.0)), SimilarityUndefinedError);
}

TEST(Heatmap, DuplicateMatricesGiveAllOnes) {
  Rng rng(5);
  const Matrix m = gaussian_matrix(rng, 10, 3, 1.0);
  const Matrix h = pairwise_cka({m, m, m});
  for (double v : h.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Heatmap, CosineBoundedSymmetricUnitDiagonal) {
  Rng rng(6);
  std::vector<Matrix> ms;
  for (int i = 0; i < 4; ++i) ms.push_back(gaussian_matrix(rng, 3, 3, 1.0));
  const Matrix h = pairwise_cosine(ms);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(h(i, i), 1.0, 1e-9);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_LE(std::abs(h(i, j)), 1.0 + 1e-12);
      EXPECT_EQ(h(i, j), h(j, i));
    }
  }
}

namespace {

AdapterBank random_bank(Strategy s, std::size_t tasks, std::uint64_t seed) {
  Rng rng(seed);
  AdapterBank bank(s, {{8, 6, 4, 2}, {5, 8, 4, 2}}, {0, 1}, rng);
  for (std::size_t t = 0; t < tasks; ++t) {
    bank.add_task(rng);
    for (std::size_t i = 0; i < bank.num_layers(); ++i)
      std::visit(
          [&](auto& st) {
            using T = std::decay_t<decltype(st)>;
            if constexpr (std::is_same_v<T, DirLoRALayerState>)
              st.tasks.back().B = gaussian_matrix(rng, st.dims.d, st.dims.r, 1.0);
            else if constexpr (std::is_same_v<T, LiLoRALayerState>) {
              st.B0 = gaussian_matrix(rng, st.dims.d, st.dims.r, 1.0);
              st.tasks.back().B_tilde = gaussian_matrix(rng, st.dims.d, st.dims.r_tilde, 1.0);
            }
          },
          bank.layer(i));
    bank.freeze_current();
  }
  return bank;
}

}  // namespace

TEST(AdapterHeatmaps, DirLoraSymmetricUnitDiagonal) {
  const AdapterBank bank = random_bank(Strategy::dir_lora(), 4, 1);
  for (MatrixKind kind : {MatrixKind::A, MatrixKind::B}) {
    const auto h = adapter_cka_heatmap(bank, kind, 1);
    ASSERT_EQ(h.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(h.values(i, i), 1.0, 1e-9);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(h.values(i, j), h.values(j, i), 1e-9);
    }
  }
}

TEST(AdapterHeatmaps, AOrientationIsTransposed) {
  const AdapterBank bank = random_bank(Strategy::dir_lora(), 2, 2);
  const auto as = task_matrices(bank, MatrixKind::A, 0);
  EXPECT_EQ(as[0].rows(), 6u);  // k samples
  EXPECT_EQ(as[0].cols(), 4u);  // r features
  const auto bs = task_matrices(bank, MatrixKind::B, 0);
  EXPECT_EQ(bs[0].rows(), 8u);
}

TEST(AdapterHeatmaps, PerTaskARequiresDirLora) {
  const AdapterBank bank = random_bank(Strategy::lilora(), 2, 3);
  try {
    adapter_cka_heatmap(bank, MatrixKind::A, 0);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("dir-lora"), std::string::npos);
  }
  EXPECT_NO_THROW(adapter_cka_heatmap(bank, MatrixKind::B, 0));
  EXPECT_NO_THROW(adapter_cosine_heatmap(bank, MatrixKind::Residual, 0));
  EXPECT_THROW(adapter_cosine_heatmap(random_bank(Strategy::dir_lora(), 2, 3), MatrixKind::Residual, 0), ContractError);
}

TEST(AdapterHeatmaps, AverageAndMeanOffDiagonal) {
  SimilarityHeatmap a{Matrix{{1, 0.2}, {0.2, 1}}, MatrixKind::A, SimilarityKind::Cka, 0};
  SimilarityHeatmap b{Matrix{{1, 0.6}, {0.6, 1}}, MatrixKind::A, SimilarityKind::Cka, 1};
  const auto m = average_heatmaps({a, b});
  EXPECT_EQ(m.layer, -1);
  EXPECT_NEAR(m.mean_off_diagonal(), 0.4, 1e-15);
  EXPECT_EQ(heatmap_csv(a), "task,0,1\n0,1.000000000,0.200000000\n1,0.200000000,1.000000000\n");
}

TEST(Fusion, UntouchedTaskKeepsAlphaAndShapeIsLayersByTasks) {
  const AdapterBank bank = random_bank(Strategy::lilora(), 3, 4);
  std::vector<std::vector<double>> snap;
  for (std::size_t t = 0; t < 3; ++t) snap.push_back(bank.alphas(t));
  const auto rep = fusion_report(bank, snap, snap);
  EXPECT_EQ(rep.rows.size(), 2u * 3u);
  for (const auto& r : rep.rows) {
    EXPECT_EQ(r.before, r.after);
    EXPECT_GT(r.after, 0.0);
    EXPECT_LT(r.after, 1.0);
  }
  EXPECT_THROW(fusion_report(random_bank(Strategy::dir_lora(), 1, 1), {{0.5, 0.5}}, {{0.5, 0.5}}), ContractError);
}

TEST(Efficiency, DeskTableMatchesFormulaOracle) {
  const std::uint64_t K = 6, d = 64, k = 64, r = 8, rt = 4;
  const std::vector<LayerDims> layers(3, LayerDims{d, k, r, rt});
  const auto rep = efficiency_report(layers, K);
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_EQ(rep.rows[0].strategy, "dir-lora");
  EXPECT_EQ(rep.rows[0].count.per_task, 3 * r * (d + k));
  EXPECT_EQ(rep.rows[0].count.total, K * rep.rows[0].count.per_task);
  EXPECT_EQ(rep.rows[1].count.total, 3 * (r * k) + K * 3 * (d * r));
  EXPECT_LT(rep.rows[1].count.total, rep.rows[0].count.total);
  EXPECT_EQ(rep.rows[2].count.shared, 3 * (r * k + d * r));
  EXPECT_EQ(rep.rows[2].count.per_task, 3 * (rt * (d + r) + 1));
  EXPECT_EQ(rep.rows[3].count.total, 3 * r * (d + k));
  EXPECT_NEAR(rep.per_task_ratio, 289.0 / 1024.0, 1e-15);
  EXPECT_NEAR(EfficiencyReport::kReferencePerTaskRatio, 0.293, 5e-4);
}
