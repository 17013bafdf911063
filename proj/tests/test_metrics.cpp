#include <gtest/gtest.h>

#include <algorithm>

#include "lilora/metrics.hpp"

using namespace lilora;

namespace {

AccuracyMatrix constant_matrix(std::size_t K, double c) {
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < K; ++k) rows.emplace_back(k + 1, c);
  return AccuracyMatrix::from_rows(rows);
}

}  // namespace

TEST(AccuracyMatrix, UpperTriangleIsUndefined) {
  AccuracyMatrix m(3);
  EXPECT_THROW(m.at(0, 1), BoundsError);
  EXPECT_THROW(m.set(3, 0, 1.0), BoundsError);
  EXPECT_THROW(AccuracyMatrix::from_rows({{1.0, 2.0}}), BoundsError);
}

TEST(AveragePerformance, PublishedFinalRow) {
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < 5; ++k) rows.emplace_back(k + 1, 0.0);
  rows.push_back({77.88, 58.83, 152.93, 96.02, 58.28, 65.33});
  EXPECT_NEAR(average_performance(AccuracyMatrix::from_rows(rows), 6), 84.88, 0.01);
}

TEST(AveragePerformance, SingleEntryAndConstant) {
  EXPECT_EQ(average_performance(AccuracyMatrix::from_rows({{73.0}}), 1), 73.0);
  EXPECT_DOUBLE_EQ(average_performance(constant_matrix(5, 42.5), 5), 42.5);
  EXPECT_THROW(average_performance(constant_matrix(2, 1.0), 3), BoundsError);
}

TEST(MeanAveragePerformance, HandCases) {
  const auto m = AccuracyMatrix::from_rows({{80.0}, {60.0, 90.0}});
  EXPECT_EQ(average_performance(m, 1), 80.0);
  EXPECT_EQ(average_performance(m, 2), 75.0);
  EXPECT_EQ(mean_average_performance(m, 2), 77.5);
  EXPECT_EQ(mean_average_performance(m, 1), 80.0);
  EXPECT_DOUBLE_EQ(mean_average_performance(constant_matrix(4, 12.0), 4), 12.0);
}

TEST(BackwardTransfer, IsolationGivesExactZero) {
  const auto m = AccuracyMatrix::from_rows({{83.75}, {83.75, 60.66}, {83.75, 60.66, 164.20}});
  EXPECT_EQ(backward_transfer(m, 3), 0.0);
  EXPECT_EQ(backward_transfer(m, 2), 0.0);
}

TEST(BackwardTransfer, HandCases) {
  EXPECT_EQ(backward_transfer(AccuracyMatrix::from_rows({{90.0}, {80.0, 70.0}}), 2), -10.0);
  // Three tasks: ((50-70) + (40-60)) / 2 = -20
  const auto m = AccuracyMatrix::from_rows({{70.0}, {65.0, 60.0}, {50.0, 40.0, 90.0}});
  EXPECT_EQ(backward_transfer(m, 3), -20.0);
  EXPECT_EQ(backward_transfer(m, 2), -5.0);
  EXPECT_THROW(backward_transfer(m, 1), ContractError);
}

TEST(BackwardTransfer, NonPositiveWithoutPositiveTransfer) {
  const auto m = AccuracyMatrix::from_rows({{70.0}, {70.0, 60.0}, {69.0, 55.0, 90.0}});
  EXPECT_LE(backward_transfer(m, 3), 0.0);
}

TEST(Metrics, PermutationInvarianceAndConvexHull) {
  std::vector<double> row{12.0, 88.0, 47.0, 63.0};
  std::vector<std::vector<double>> base{{10.0}, {20.0, 30.0}, {40.0, 50.0, 60.0}};
  auto with_row = [&](std::vector<double> r) {
    auto rows = base;
    rows.push_back(std::move(r));
    return AccuracyMatrix::from_rows(rows);
  };
  const double ap = average_performance(with_row(row), 4);
  std::vector<double> perm = row;
  std::sort(perm.begin(), perm.end());
  do {
    EXPECT_DOUBLE_EQ(average_performance(with_row(perm), 4), ap);
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_GE(ap, 12.0);
  EXPECT_LE(ap, 88.0);
  const double map = mean_average_performance(with_row(row), 4);
  EXPECT_GE(map, 10.0);
  EXPECT_LE(map, 88.0);
}

TEST(MeanInstructionFollowing, HandCases) {
  const auto checker = MifChecker::class_range(4);
  EXPECT_EQ(mean_instruction_following({{0, 1, 3}, {4, 7}}, checker, 2), 100.0);
  EXPECT_EQ(mean_instruction_following({{5, 9}, {0, 1}}, checker, 2), 0.0);
  EXPECT_EQ(mean_instruction_following({{0, 1, 2, 9}, {4, 0}}, checker, 2), 62.5);
  EXPECT_EQ(mean_instruction_following({{0, 1, 2, 9}, {4, 0}}, checker, 1), 75.0);
}

TEST(MeanInstructionFollowing, RejectsEmptyOutputsAndBadStage) {
  const auto checker = MifChecker::class_range(4);
  EXPECT_THROW(mean_instruction_following({{}, {4}}, checker, 2), ContractError);
  EXPECT_THROW(mean_instruction_following({{0}}, checker, 2), BoundsError);
}
