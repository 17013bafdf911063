#include <gtest/gtest.h>

#include <set>

#include "lilora/taskgen.hpp"
#include "support.hpp"

using namespace lilora;

namespace {

SuiteParams small(double sigma = 0.35, std::uint64_t seed = 0) {
  SuiteParams p;
  p.num_tasks = 3;
  p.train_per_class = 30;
  p.test_per_class = 10;
  p.sigma = sigma;
  p.seed = seed;
  return p;
}

Matrix class_centers(const TaskSpec& t) {
  Matrix c(t.num_classes, t.means.cols());
  for (std::size_t k = 0; k < t.num_classes; ++k) {
    const Matrix v = t.center(k);
    for (std::size_t i = 0; i < v.size(); ++i) c(k, i) = v[i];
  }
  return c;
}

double sq_dist_row(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
  return s;
}

double nearest_centroid_accuracy(const TaskSpec& t, const Dataset& ds) {
  const Matrix c = class_centers(t);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < t.num_classes; ++k)
      if (sq_dist_row(ds.X, i, c, k) < sq_dist_row(ds.X, i, c, best)) best = k;
    hit += t.first_class + best == ds.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

// Mean over test points of (second-nearest - nearest) centroid distance.
double centroid_margin(const TaskSpec& t) {
  const Matrix c = class_centers(t);
  double total = 0.0;
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    std::vector<double> d;
    for (std::size_t k = 0; k < t.num_classes; ++k) d.push_back(std::sqrt(sq_dist_row(t.test.X, i, c, k)));
    std::sort(d.begin(), d.end());
    total += d[1] - d[0];
  }
  return total / static_cast<double>(t.test.size());
}

// Multinomial logistic regression by full-batch gradient descent, trained on
// the task's train split and scored on its test split.
double linear_probe_accuracy(const TaskSpec& t) {
  const std::size_t d = t.train.X.cols(), C = t.num_classes;
  Matrix W(C, d + 1);
  auto scores = [&](const Matrix& X, std::size_t i, std::vector<double>& s) {
    for (std::size_t k = 0; k < C; ++k) {
      double v = W(k, d);
      for (std::size_t j = 0; j < d; ++j) v += W(k, j) * X(i, j);
      s[k] = v;
    }
  };
  std::vector<double> s(C);
  const double lr = 0.5;
  for (int it = 0; it < 300; ++it) {
    Matrix G(C, d + 1);
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      scores(t.train.X, i, s);
      const double m = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - m));
      for (std::size_t k = 0; k < C; ++k) {
        const double g = s[k] / z - (t.first_class + k == t.train.labels[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j) G(k, j) += g * t.train.X(i, j);
        G(k, d) += g;
      }
    }
    W = sub(W, scale(G, lr / static_cast<double>(t.train.size())));
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    scores(t.test.X, i, s);
    hit += t.first_class + static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin()) == t.test.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(t.test.size());
}

}  // namespace

TEST(SuiteParams, ValidationRejectsBadValues) {
  SuiteParams p;
  p.sigma = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SuiteParams{};
  p.classes_per_task = 1;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SuiteParams{};
  p.num_tasks = 0;
  EXPECT_THROW(generate_suite(p), ConfigError);
}

TEST(GenerateSuite, ShapesAndDisjointLabelRanges) {
  const TaskSuite s = generate_suite(small());
  ASSERT_EQ(s.tasks.size(), 3u);
  std::set<std::size_t> seen;
  for (const TaskSpec& t : s.tasks) {
    EXPECT_EQ(t.train.size(), 4u * 30u);
    EXPECT_EQ(t.test.size(), 4u * 10u);
    EXPECT_EQ(t.train.X.cols(), 32u);
    std::set<std::size_t> mine(t.train.labels.begin(), t.train.labels.end());
    EXPECT_EQ(mine.size(), 4u);
    for (std::size_t y : mine) {
      EXPECT_TRUE(t.owns_class(y));
      EXPECT_TRUE(seen.insert(y).second) << "class " << y << " reused";
    }
  }
  std::set<std::size_t> base(s.base.train.labels.begin(), s.base.train.labels.end());
  EXPECT_EQ(base.size(), 12u);
}

TEST(GenerateSuite, RotationsAreOrthogonal) {
  const TaskSuite s = generate_suite(small());
  for (const TaskSpec& t : s.tasks)
    EXPECT_LT(max_abs_diff(matmul(transpose(t.rotation), t.rotation), Matrix::identity(32)), 1e-10);
}

TEST(GenerateSuite, VanishingNoiseCollapsesOntoCenters) {
  const TaskSuite s = generate_suite(small(1e-12));
  for (const TaskSpec& t : s.tasks) {
    EXPECT_EQ(nearest_centroid_accuracy(t, t.train), 1.0);
    EXPECT_EQ(nearest_centroid_accuracy(t, t.test), 1.0);
    const Matrix c = class_centers(t);
    EXPECT_LT(std::sqrt(sq_dist_row(t.test.X, 0, c, 0)), 1e-9);
  }
}

TEST(GenerateSuite, LowNoiseIsLinearlySeparable) {
  SuiteParams p = small(0.1);
  p.train_per_class = 200;
  p.test_per_class = 100;
  const TaskSuite s = generate_suite(p);
  for (const TaskSpec& t : s.tasks) EXPECT_GE(linear_probe_accuracy(t), 0.95) << "task " << t.id;
}

TEST(GenerateSuite, MarginShrinksAsNoiseGrows) {
  double prev = 1e9;
  for (double sigma : {0.05, 0.2, 0.5, 1.0}) {
    const double m = centroid_margin(generate_suite(small(sigma)).tasks[0]);
    EXPECT_LT(m, prev) << "sigma " << sigma;
    prev = m;
  }
}

TEST(SuiteFile, SameSeedSameBytes) {
  EXPECT_EQ(encode_suite(generate_suite(small())), encode_suite(generate_suite(small())));
  EXPECT_NE(encode_suite(generate_suite(small(0.35, 0))), encode_suite(generate_suite(small(0.35, 1))));
}

TEST(SuiteFile, SaveLoadSaveIsIdempotent) {
  const auto dir = fixtures::scratch_dir("suite_roundtrip");
  const TaskSuite s = generate_suite(small());
  save_suite(dir / "a.llts", s);
  const TaskSuite back = load_suite(dir / "a.llts");
  EXPECT_EQ(back, s);
  save_suite(dir / "b.llts", back);
  EXPECT_EQ(io::read_file(dir / "a.llts"), io::read_file(dir / "b.llts"));
}

TEST(SuiteFile, TruncationIsRejected) {
  auto bytes = encode_suite(generate_suite(small()));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_suite(t), IntegrityError) << "cut at " << cut;
  }
}

TEST(SuiteFile, ChecksumMismatchIsReported) {
  auto bytes = encode_suite(generate_suite(small()));
  bytes[100] ^= 0x01;
  try {
    decode_suite(bytes);
    FAIL() << "corruption not detected";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos) << e.what();
  }
}

TEST(SuiteFile, BadMagicIsRejected) {
  auto bytes = encode_suite(generate_suite(small()));
  bytes[0] = 'X';
  EXPECT_THROW(decode_suite(bytes), IntegrityError);
}
