#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lilora/errors.hpp"
#include "lilora/io.hpp"
#include "lilora/linalg.hpp"

namespace lilora {

/// Row-per-sample inputs with global class labels.
struct Dataset {
  Matrix X;  // n x d_in
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  /// Rows selected by `idx`, in that order.
  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.X = Matrix(idx.size(), X.cols());
    out.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto src = X.row(idx[i]);
      std::copy(src.begin(), src.end(), &out.X(i, 0));
      out.labels.push_back(labels[idx[i]]);
    }
    return out;
  }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// One task of the stream. Task t owns global class ids [first_class, first_class + C).
struct TaskSpec {
  std::size_t id = 0;
  std::size_t first_class = 0;
  std::size_t num_classes = 0;
  Matrix means;     // C x d_in, untransformed class centers
  Matrix rotation;  // d_in x d_in orthogonal
  Dataset train;
  Dataset test;

  bool owns_class(std::size_t label) const noexcept {
    return label >= first_class && label < first_class + num_classes;
  }
  /// Class center as seen in input space: R * mu_c.
  Matrix center(std::size_t local_class) const {
    Matrix mu(means.cols(), 1);
    for (std::size_t i = 0; i < means.cols(); ++i) mu[i] = means(local_class, i);
    return matmul(rotation, mu);
  }
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct SuiteParams {
  std::size_t d_in = 32;
  std::size_t num_tasks = 6;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double sigma = 0.35;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_in == 0) throw ConfigError("suite: d_in must be positive");
    if (num_tasks < 1) throw ConfigError("suite: need at least one task");
    if (classes_per_task < 2) throw ConfigError("suite: need at least two classes per task");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("suite: samples per class must be positive");
    if (!(sigma > 0.0)) throw ConfigError("suite: sigma must be positive");
  }
  std::size_t total_classes() const noexcept { return num_tasks * classes_per_task; }
  friend bool operator==(const SuiteParams&, const SuiteParams&) = default;
};

struct TaskSuite {
  SuiteParams params;
  TaskSpec base;  // pretraining data over all classes
  std::vector<TaskSpec> tasks;

  std::size_t total_classes() const noexcept { return params.total_classes(); }
  friend bool operator==(const TaskSuite&, const TaskSuite&) = default;
};

namespace detail {

inline Dataset sample_split(Rng& rng, const Matrix& means, const Matrix& rotation, std::size_t first_class,
                            std::size_t per_class, double sigma) {
  const std::size_t C = means.rows(), d = means.cols();
  Dataset ds;
  ds.X = Matrix(C * per_class, d);
  Matrix raw(d, 1);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t s = 0; s < per_class; ++s, ++row) {
      for (std::size_t i = 0; i < d; ++i) raw[i] = means(c, i) + sigma * rng.normal();
      const Matrix x = matmul(rotation, raw);
      for (std::size_t i = 0; i < d; ++i) ds.X(row, i) = x[i];
      ds.labels.push_back(first_class + c);
    }
  }
  return ds;
}

inline TaskSpec make_task(Rng& rng, std::size_t id, std::size_t first_class, std::size_t num_classes,
                          const SuiteParams& p) {
  TaskSpec t;
  t.id = id;
  t.first_class = first_class;
  t.num_classes = num_classes;
  t.means = gaussian_matrix(rng, num_classes, p.d_in, 1.0);
  t.rotation = random_orthogonal(rng, p.d_in);
  t.train = sample_split(rng, t.means, t.rotation, first_class, p.train_per_class, p.sigma);
  t.test = sample_split(rng, t.means, t.rotation, first_class, p.test_per_class, p.sigma);
  return t;
}

}  // namespace detail

/// Seeded synthetic task stream. Each task draws class means from N(0, I)
/// and a random rotation R_t; samples are x = R_t (mu_c + sigma * eps).
/// The base set covers all K*C classes from its own child stream.
inline TaskSuite generate_suite(const SuiteParams& params) {
  params.validate();
  Rng master(params.seed);
  TaskSuite suite;
  suite.params = params;
  Rng base_rng = master.fork();
  suite.base = detail::make_task(base_rng, 0, 0, params.total_classes(), params);
  for (std::size_t t = 0; t < params.num_tasks; ++t) {
    Rng task_rng = master.fork();
    suite.tasks.push_back(detail::make_task(task_rng, t, t * params.classes_per_task, params.classes_per_task, params));
  }
  return suite;
}

// --- suite file ("LLTS") ---------------------------------------------------
//
//   magic "LLTS" | version u16 | d_in u32 | K u32 | C u32 | n u32 | seed u64
//   | n_test u32 | sigma f64
//   f64 block, base first then tasks 0..K-1, each: means, rotation, train X, test X
//   u32 labels, same order: base train, base test, then per task train, test
//   CRC32 u32 over all preceding bytes
//
// n is the train count per class.

inline constexpr std::uint16_t kSuiteFileVersion = 1;

inline std::vector<std::uint8_t> encode_suite(const TaskSuite& s) {
  const SuiteParams& p = s.params;
  io::ByteWriter w;
  w.bytes("LLTS");
  w.u16(kSuiteFileVersion);
  w.u32(static_cast<std::uint32_t>(p.d_in));
  w.u32(static_cast<std::uint32_t>(p.num_tasks));
  w.u32(static_cast<std::uint32_t>(p.classes_per_task));
  w.u32(static_cast<std::uint32_t>(p.train_per_class));
  w.u64(p.seed);
  w.u32(static_cast<std::uint32_t>(p.test_per_class));
  w.f64(p.sigma);
  auto floats = [&](const TaskSpec& t) {
    w.matrix_values(t.means);
    w.matrix_values(t.rotation);
    w.matrix_values(t.train.X);
    w.matrix_values(t.test.X);
  };
  floats(s.base);
  for (const TaskSpec& t : s.tasks) floats(t);
  auto labels = [&](const TaskSpec& t) {
    for (std::size_t y : t.train.labels) w.u32(static_cast<std::uint32_t>(y));
    for (std::size_t y : t.test.labels) w.u32(static_cast<std::uint32_t>(y));
  };
  labels(s.base);
  for (const TaskSpec& t : s.tasks) labels(t);
  w.seal();
  return w.take();
}

inline TaskSuite decode_suite(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != "LLTS") throw IntegrityError("bad magic, expected LLTS", 0);
  r.verify_crc();
  const std::uint16_t version = r.u16();
  if (version != kSuiteFileVersion) throw IntegrityError("unsupported suite version " + std::to_string(version), 4);
  SuiteParams p;
  p.d_in = r.u32();
  p.num_tasks = r.u32();
  p.classes_per_task = r.u32();
  p.train_per_class = r.u32();
  p.seed = r.u64();
  p.test_per_class = r.u32();
  p.sigma = r.f64();
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("invalid suite header: ") + e.what(), r.offset());
  }

  TaskSuite s;
  s.params = p;
  auto floats = [&](TaskSpec& t, std::size_t id, std::size_t first, std::size_t C) {
    t.id = id;
    t.first_class = first;
    t.num_classes = C;
    t.means = r.matrix(C, p.d_in);
    t.rotation = r.matrix(p.d_in, p.d_in);
    t.train.X = r.matrix(C * p.train_per_class, p.d_in);
    t.test.X = r.matrix(C * p.test_per_class, p.d_in);
  };
  floats(s.base, 0, 0, p.total_classes());
  s.tasks.resize(p.num_tasks);
  for (std::size_t t = 0; t < p.num_tasks; ++t) floats(s.tasks[t], t, t * p.classes_per_task, p.classes_per_task);
  auto labels = [&](TaskSpec& t) {
    for (Dataset* ds : {&t.train, &t.test}) {
      ds->labels.resize(ds->X.rows());
      for (auto& y : ds->labels) {
        const std::size_t at = r.offset();
        y = r.u32();
        if (!t.owns_class(y)) throw IntegrityError("label " + std::to_string(y) + " outside task class range", at);
      }
    }
  };
  labels(s.base);
  for (TaskSpec& t : s.tasks) labels(t);
  r.expect_trailer();
  return s;
}

inline void save_suite(const std::filesystem::path& path, const TaskSuite& s) {
  io::write_file_atomic(path, encode_suite(s));
}

inline TaskSuite load_suite(const std::filesystem::path& path) { return decode_suite(io::read_file(path)); }

}  // namespace lilora
