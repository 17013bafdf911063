#include <gtest/gtest.h>

#include "lilora/backbone.hpp"
#include "lilora/checkpoint.hpp"
#include "support.hpp"

using namespace lilora;

namespace {

struct Pretrained {
  TaskSuite suite;
  PretrainResult result;
};

const Pretrained& pretrained() {
  static const Pretrained p = [] {
    Pretrained out;
    out.suite = generate_suite(SuiteParams{});
    Rng rng(0);
    out.result = pretrain_backbone(out.suite.base.train, out.suite.base.test, Architecture{}, PretrainConfig{}, rng);
    return out;
  }();
  return p;
}

AdapterBank trained_like_bank(const Strategy& s, const Backbone& bb, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LayerDims> dims;
  std::vector<std::size_t> inj;
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    dims.push_back({bb.layer(l).W.rows(), bb.layer(l).W.cols(), 4, 2});
    inj.push_back(l);
  }
  AdapterBank bank(s, dims, inj, rng);
  bank.add_task(rng);
  // Perturb every trainable matrix so the delta is non-trivial.
  for (std::size_t i = 0; i < bank.num_layers(); ++i) {
    std::visit(
        [&](auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, SeqLoRALayerState>) {
            st.pair.B = gaussian_matrix(rng, st.pair.B.rows(), st.pair.B.cols(), 0.3);
          } else if constexpr (std::is_same_v<T, DirLoRALayerState>) {
            st.tasks[0].B = gaussian_matrix(rng, st.tasks[0].B.rows(), st.tasks[0].B.cols(), 0.3);
          } else if constexpr (std::is_same_v<T, SharedALayerState>) {
            st.tasks[0].B = gaussian_matrix(rng, st.tasks[0].B.rows(), st.tasks[0].B.cols(), 0.3);
          } else {
            st.B0 = gaussian_matrix(rng, st.B0.rows(), st.B0.cols(), 0.3);
            st.tasks[0].B_tilde = gaussian_matrix(rng, st.tasks[0].B_tilde.rows(), st.tasks[0].B_tilde.cols(), 0.3);
          }
        },
        bank.layer(i));
  }
  return bank;
}

std::vector<LayerDims> layer_dims_for_test(const Backbone& bb) {
  std::vector<LayerDims> dims;
  for (std::size_t l = 0; l < bb.num_layers(); ++l) dims.push_back({bb.layer(l).W.rows(), bb.layer(l).W.cols(), 8, 4});
  return dims;
}

}  // namespace

TEST(Pretrain, BaseAccuracyAtLeastNinetyPercent) {
  EXPECT_GE(pretrained().result.base_accuracy, 0.9);
  EXPECT_TRUE(pretrained().result.backbone.frozen());
}

TEST(Pretrain, ZeroEpochsIsNearChance) {
  const auto& s = pretrained().suite;
  PretrainConfig cfg;
  cfg.epochs = 0;
  Rng rng(0);
  const auto r = pretrain_backbone(s.base.train, s.base.test, Architecture{}, cfg, rng);
  EXPECT_LT(r.base_accuracy, 0.2);
  EXPECT_TRUE(r.backbone.frozen());
}

TEST(Pretrain, SameSeedSameWeights) {
  SuiteParams p;
  p.train_per_class = 20;
  p.test_per_class = 5;
  const auto suite = generate_suite(p);
  PretrainConfig cfg;
  cfg.epochs = 2;
  Rng a(5), b(5);
  const auto ra = pretrain_backbone(suite.base.train, suite.base.test, Architecture{}, cfg, a);
  const auto rb = pretrain_backbone(suite.base.train, suite.base.test, Architecture{}, cfg, b);
  EXPECT_EQ(io::encode_tensors(ra.backbone.to_tensors()), io::encode_tensors(rb.backbone.to_tensors()));
}

TEST(Backbone, FrozenRejectsMutation) {
  Backbone bb = fixtures::tiny_backbone(1, {4, 5, 3});
  EXPECT_THROW(bb.mutable_layer(0), StateError);
}

TEST(Backbone, CheckpointRoundTripAndFingerprint) {
  const auto dir = fixtures::scratch_dir("backbone_ckpt");
  const Backbone& bb = pretrained().result.backbone;
  save_backbone(dir / "bb.lltc", bb);
  const Backbone back = load_backbone(dir / "bb.lltc");
  EXPECT_EQ(backbone_fingerprint(back), backbone_fingerprint(bb));
  EXPECT_TRUE(back.frozen());
}

TEST(Backbone, CorruptCheckpointIsRejected) {
  const auto dir = fixtures::scratch_dir("backbone_corrupt");
  save_backbone(dir / "bb.lltc", fixtures::tiny_backbone(2, {3, 4, 2}));
  auto bytes = io::read_file(dir / "bb.lltc");
  bytes[bytes.size() / 2] ^= 0x5a;
  io::write_file_atomic(dir / "bb.lltc", bytes);
  EXPECT_THROW(load_backbone(dir / "bb.lltc"), IntegrityError);
}

TEST(ForwardAdapted, ZeroAdaptersMatchBackboneBitwise) {
  const Backbone& bb = pretrained().result.backbone;
  const Matrix& x = pretrained().suite.tasks[0].test.X;
  for (const Strategy& s : {Strategy::seq_lora(), Strategy::dir_lora(), Strategy::shared_a(), Strategy::lilora()}) {
    Rng rng(4);
    AdapterBank bank(s, layer_dims_for_test(bb), {0, 1, 2}, rng);
    bank.add_task(rng);
    EXPECT_EQ(forward_adapted({&bb, &bank, 0}, x), bb.forward(x)) << s.tag();
  }
}

TEST(ForwardAdapted, MergedMatchesTwoPath) {
  const Backbone bb = fixtures::tiny_backbone(8, {6, 7, 5, 4});
  Rng xr(9);
  const Matrix x = gaussian_matrix(xr, 64, 6, 1.0);
  for (const Strategy& s : {Strategy::seq_lora(), Strategy::dir_lora(), Strategy::shared_a(), Strategy::lilora()}) {
    const AdapterBank bank = trained_like_bank(s, bb, 10);
    const AdaptedModel m{&bb, &bank, 0};
    const Matrix a = forward_adapted(m, x), b = forward_two_path(m, x);
    for (std::size_t i = 0; i < a.size(); ++i)
      EXPECT_LE(std::abs(a[i] - b[i]), 1e-9 * std::max(1.0, std::abs(b[i]))) << s.tag();
  }
}

TEST(ForwardAdapted, BatchIndependence) {
  const Backbone bb = fixtures::tiny_backbone(8, {6, 7, 5, 4});
  const AdapterBank bank = trained_like_bank(Strategy::lilora(), bb, 2);
  Rng xr(1);
  const Matrix x = gaussian_matrix(xr, 8, 6, 1.0);
  const Matrix all = forward_adapted({&bb, &bank, 0}, x);
  for (std::size_t r = 0; r < 8; ++r) {
    const Matrix one = forward_adapted({&bb, &bank, 0}, Dataset{x, std::vector<std::size_t>(8)}.subset({r}).X);
    for (std::size_t c = 0; c < all.cols(); ++c) EXPECT_EQ(one(0, c), all(r, c));
  }
}

TEST(ForwardAdapted, RequiresActiveTask) {
  const Backbone bb = fixtures::tiny_backbone(8, {6, 7, 4});
  const AdapterBank bank = trained_like_bank(Strategy::dir_lora(), bb, 2);
  EXPECT_THROW(forward_adapted({&bb, &bank, std::nullopt}, Matrix(1, 6)), StateError);
}

TEST(Accuracy, ArgmaxAgreement) {
  const Matrix logits{{0.1, 0.9}, {2.0, -1.0}, {0.0, 0.5}};
  EXPECT_DOUBLE_EQ(accuracy(logits, {1, 0, 0}), 2.0 / 3.0);
  EXPECT_EQ(predict(logits), (std::vector<std::size_t>{1, 0, 1}));
}
