#include <gtest/gtest.h>

#include <cmath>

#include "hikfs/model.hpp"
#include "support/finite_diff.hpp"
#include "support/grad_cases.hpp"

using hikfs::EncoderConfig;
using hikfs::ModelParams;
using hikfs::Setting;
namespace nd = hikfs::nd;

namespace {

EncoderConfig mlp_config(std::size_t in, std::vector<std::size_t> hidden, std::size_t d) {
  EncoderConfig c;
  c.input_dim = in;
  c.hidden = std::move(hidden);
  c.feature_dim = d;
  return c;
}

}  // namespace

TEST(Encoder, IdentityLayerIsRelu) {
  auto p = ModelParams::init(Setting::supervised, mlp_config(3, {}, 3), 2, 1, 1);
  p.mlp_layers[0] = hikfs::Linear::identity(3);
  auto f = hikfs::encode(p, nd::Tensor::matrix({{-1, 0.5, 2}}));
  EXPECT_EQ(f.values(), (std::vector<double>{0, 0.5, 2}));
}

TEST(Encoder, BatchPermutationPermutesRows) {
  auto p = ModelParams::init(Setting::meta, mlp_config(4, {6}, 5), 3, 2, 2);
  std::mt19937_64 rng(1);
  auto x = hikfs::testing::random_leaf({3, 4}, rng);
  auto f = hikfs::encode(p, x);
  auto g = hikfs::encode(p, nd::select_rows(x, {2, 0, 1}));
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(g.at(0, k), f.at(2, k));
    EXPECT_EQ(g.at(1, k), f.at(0, k));
  }
  EXPECT_THROW(hikfs::encode(p, nd::Tensor::zeros({2, 5})), hikfs::ShapeError);
}

TEST(Encoder, Conv4OnTwentyEightPixelsGivesEightFeatures) {
  EncoderConfig c;
  c.kind = hikfs::EncoderKind::conv4;
  c.channels = {8, 8, 8, 8};
  EXPECT_EQ(c.output_dim(), 8u);
  auto p = ModelParams::init(Setting::meta, c, 5, 2, 3);
  std::mt19937_64 rng(2);
  auto x = hikfs::testing::random_leaf({2, 28 * 28}, rng, 0, 1);
  auto f = hikfs::encode(p, x);
  EXPECT_EQ(f.shape(), (nd::Shape{2, 8}));
  for (double v : f.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MlpLogits, IdentityAndBiasOnly) {
  auto head = hikfs::Linear::identity(2);
  EXPECT_EQ(hikfs::mlp_logits(head, nd::Tensor::matrix({{1, 2}})).values(), (std::vector<double>{1, 2}));
  hikfs::Linear bias{nd::Tensor::zeros({2, 2}), nd::Tensor::vector({3, 4})};
  EXPECT_EQ(hikfs::mlp_logits(bias, nd::Tensor::matrix({{7, -9}})).values(), (std::vector<double>{3, 4}));
  EXPECT_THROW(hikfs::mlp_logits(head, nd::Tensor::matrix({{1, 2, 3}})), hikfs::ShapeError);
}

TEST(MlpLogits, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  hikfs::Linear head{hikfs::testing::random_leaf({4, 3}, rng), hikfs::testing::random_leaf({3}, rng)};
  auto f = hikfs::testing::random_leaf({5, 4}, rng);
  auto check = hikfs::testing::check_gradients(
      [&] { return hikfs::testing::weighted_sum(hikfs::mlp_logits(head, f), 9); },
      {{"w", head.weight}, {"b", head.bias}, {"f", f}});
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

TEST(CombineLogits, SumsParts) {
  auto a = nd::Tensor::matrix({{1, 2}});
  auto b = nd::Tensor::matrix({{3, 4}});
  EXPECT_EQ(hikfs::combine_logits({a}).values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(hikfs::combine_logits({a, b}).values(), (std::vector<double>{4, 6}));
  EXPECT_EQ(hikfs::combine_logits({b, a}).values(), (std::vector<double>{4, 6}));
  EXPECT_THROW(hikfs::combine_logits({}), hikfs::ShapeError);
  EXPECT_THROW(hikfs::combine_logits({a, nd::Tensor::matrix({{1, 2, 3}})}), hikfs::ShapeError);
}

TEST(Heads, ActivationTable) {
  auto sup = hikfs::active_heads(Setting::supervised, {});
  EXPECT_TRUE(sup.coarse_mlp);
  EXPECT_FALSE(sup.coarse_knn);
  EXPECT_TRUE(sup.fine_mlp);
  EXPECT_TRUE(sup.fine_knn);
  auto meta = hikfs::active_heads(Setting::meta, {});
  EXPECT_TRUE(meta.coarse_mlp);
  EXPECT_TRUE(meta.coarse_knn);
  EXPECT_FALSE(meta.fine_mlp);
  EXPECT_TRUE(meta.fine_knn);
}

TEST(Forward, SupervisedFineLogitsAreMlpPlusCosine) {
  auto p = ModelParams::init(Setting::supervised, mlp_config(3, {}, 3), 2, 1, 5);
  p.switches.attention = false;
  // Identity encoder keeps the positive inputs, so no feature is the zero vector.
  p.mlp_layers[0] = hikfs::Linear::identity(3);
  auto x = nd::Tensor::matrix({{0.5, 1.0, 0.2}, {1.0, 0.1, 0.7}});
  const auto f = hikfs::encode(p, x);
  // Each class memory holds its one training feature.
  hikfs::MemoryBank bank(2, 1, 3, hikfs::Metric::dot_cosine, 1);
  for (std::size_t j = 0; j < 2; ++j) {
    bank.set_occupancy(j, 1);
    bank.write_slot(j, 0, f.data().subspan(j * 3, 3));
  }
  auto logits = hikfs::forward_full(p, x, {&bank, nullptr});
  auto mlp = hikfs::mlp_logits(p.fine_mlp, f);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double cos = hikfs::slot_score(f.data().subspan(i * 3, 3), bank.slot(j, 0), {}, hikfs::Metric::dot_cosine);
      EXPECT_NEAR(logits.fine.at(i, j), mlp.at(i, j) + cos, 1e-12);
    }
  EXPECT_EQ(logits.coarse.values(), hikfs::mlp_logits(p.coarse_mlp, f).values());
}

TEST(Forward, FreshAttentionTransformIsIdentity) {
  std::mt19937_64 rng(6);
  hikfs::Rng init(1);
  auto t = hikfs::AttentionTransform::init(5, init);
  auto x = hikfs::testing::random_leaf({3, 5}, rng);
  EXPECT_EQ(t.forward(x).values(), x.values());
}

TEST(Forward, KnnOffEqualsMlpAlone) {
  auto p = ModelParams::init(Setting::supervised, mlp_config(3, {4}, 3), 2, 1, 7);
  p.switches.knn = false;
  auto x = nd::Tensor::matrix({{0.5, 1.0, 0.2}});
  auto logits = hikfs::forward_full(p, x, {});
  EXPECT_EQ(logits.fine.values(), hikfs::mlp_logits(p.fine_mlp, hikfs::encode(p, x)).values());
}

TEST(Forward, MissingMemoryForActiveKnnHeadIsAnError) {
  auto p = ModelParams::init(Setting::supervised, mlp_config(3, {}, 3), 2, 1, 7);
  EXPECT_THROW(hikfs::forward_full(p, nd::Tensor::matrix({{0.5, 1.0, 0.2}}), {}), hikfs::ConfigError);
}

TEST(Forward, MetaSingleCoarseIsPureKnnFineClassifier) {
  auto p = ModelParams::init(Setting::meta, mlp_config(3, {}, 3), 2, 1, 8);
  auto x = nd::Tensor::matrix({{0.5, 1.0, 0.2}, {1.0, 0.1, 0.7}, {0.3, 0.3, 0.9}});
  auto f = hikfs::encode(p, x);
  auto fine = hikfs::build_meta_memory(nd::select_rows(f, {0, 1}), {{0}, {1}}, hikfs::MemoryMode::mem1,
                                       hikfs::Metric::neg_euclidean, 1);
  auto coarse = hikfs::group_memory(fine, hikfs::ClassHierarchy::flat(2));
  auto logits = hikfs::forward_heads(p, nd::select_rows(f, {2}), {&fine, &coarse});
  auto direct = hikfs::knn_logits(nd::select_rows(f, {2}), fine, hikfs::model_transforms(p));
  EXPECT_EQ(logits.fine.values(), direct.values());
  EXPECT_EQ(logits.coarse.dim(1), 1u);
}

TEST(Params, CloneSharesNoStorage) {
  auto p = ModelParams::init(Setting::meta, mlp_config(3, {4}, 3), 2, 1, 9);
  auto c = p.clone();
  c.mlp_layers[0].weight.mutable_data()[0] += 1.0;
  EXPECT_NE(c.mlp_layers[0].weight.at(0), p.mlp_layers[0].weight.at(0));
  EXPECT_EQ(c.named_parameters().size(), p.named_parameters().size());
}

TEST(Params, LoadValuesChecksShapes) {
  auto p = ModelParams::init(Setting::meta, mlp_config(3, {4}, 3), 2, 1, 9);
  auto q = ModelParams::init(Setting::meta, mlp_config(3, {4}, 3), 2, 1, 10);
  q.load_values(p.named_parameters());
  EXPECT_EQ(q.mlp_layers[0].weight.values(), p.mlp_layers[0].weight.values());
  auto r = ModelParams::init(Setting::meta, mlp_config(3, {5}, 3), 2, 1, 10);
  EXPECT_THROW(r.load_values(p.named_parameters()), hikfs::DataError);
}

class EndToEndGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(EndToEndGradient, MatchesFiniteDifferences) {
  const auto cases = hikfs::testing::end_to_end_cases();
  const auto& c = cases.at(GetParam());
  auto problem = c.make(4);
  auto check = hikfs::testing::check_gradients(problem.loss, problem.leaves);
  EXPECT_LT(check.max_rel_error, 1e-4) << c.name << " at " << check.worst;
}

INSTANTIATE_TEST_SUITE_P(Settings, EndToEndGradient,
                         ::testing::Range<std::size_t>(0, hikfs::testing::end_to_end_cases().size()));
