#include "gradcheck.hpp"

#include "mucp/checkpoint.hpp"
#include "mucp/data.hpp"
#include "mucp/encoder.hpp"
#include "mucp/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

namespace mucp {
namespace {

using testing::random_tensor;

Tensor normalized_rows(Tensor t) {
  for (std::int64_t r = 0; r < t.rows(); ++r) {
    double n = 0;
    for (std::int64_t c = 0; c < t.cols(); ++c) n += static_cast<double>(t.at(r, c)) * t.at(r, c);
    for (std::int64_t c = 0; c < t.cols(); ++c) t.at(r, c) = static_cast<float>(t.at(r, c) / std::sqrt(n));
  }
  return t;
}

Batch synth_batch(std::int64_t n) {
  SynthSpec s;
  s.train_size = 64;
  s.val_size = 16;
  auto d = make_synth_dataset(s);
  return make_batch(d.train, 0, n);
}

TEST(Patchify, TokenCounts) {
  ModelSpec tiny = tiny_spec();
  EXPECT_EQ(tiny.image_tokens(), 17);
  ModelSpec b16 = clip_preset("b16", false);
  EXPECT_EQ(b16.image_tokens(), 197);

  ParamStore params = init_params(tiny, 1);
  Graph g;
  ParamBinding bind(g, params);
  std::mt19937_64 rng(1);
  Var tokens = patchify_embed(bind, tiny, random_tensor({2, 3, 32, 32}, rng));
  EXPECT_EQ(tokens.shape(), (Shape{2, 17, 64}));
}

TEST(Patchify, ChannelMajorWithinPatch) {
  ModelSpec spec = tiny_spec();
  Tensor images({1, 3, 32, 32});
  for (std::int64_t i = 0; i < images.numel(); ++i) images[i] = static_cast<float>(i);
  Tensor rows = patchify(images, spec);
  ASSERT_EQ(rows.shape(), (Shape{16, 192}));
  // Patch 1 is the second 8-pixel column block of the first row band.
  EXPECT_EQ(rows.at(1, 0), 8.0f);
  EXPECT_EQ(rows.at(1, 1), 9.0f);
  EXPECT_EQ(rows.at(1, 8), 40.0f);
  EXPECT_EQ(rows.at(1, 64), 1024.0f + 8.0f);
  EXPECT_EQ(rows.at(4, 0), 8.0f * 32.0f);
}

TEST(Patchify, WrongImageSizeIsDimensionError) {
  ModelSpec spec = tiny_spec();
  EXPECT_THROW(patchify(Tensor({1, 3, 16, 16}), spec), DimensionError);
}

class EncodeTest : public ::testing::TestWithParam<std::tuple<Backbone, bool>> {};

TEST_P(EncodeTest, UnitRowsAndRoutingList) {
  auto [backbone, sparse] = GetParam();
  ModelSpec spec = tiny_spec();
  spec.backbone = backbone;
  if (sparse) spec.moe = MoESpec{};
  ParamStore params = init_params(spec, 3);
  Batch batch = synth_batch(8);
  for (Modality m : {Modality::image, Modality::text}) {
    Graph g;
    ParamBinding bind(g, params);
    auto enc = encode(bind, spec, batch, m);
    const auto& e = enc.embeddings.value();
    ASSERT_EQ(e.shape(), (Shape{8, 32}));
    for (std::int64_t r = 0; r < 8; ++r) {
      double n = 0;
      for (std::int64_t c = 0; c < 32; ++c) n += static_cast<double>(e.at(r, c)) * e.at(r, c);
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
    }
    EXPECT_EQ(enc.routing.size(), sparse ? moe_layers(spec, m).size() : 0u);
  }
}

TEST_P(EncodeTest, IdenticalInputsGiveIdenticalEmbeddings) {
  auto [backbone, sparse] = GetParam();
  ModelSpec spec = tiny_spec();
  spec.backbone = backbone;
  if (sparse) spec.moe = MoESpec{};
  ParamStore params = init_params(spec, 4);
  Batch one = synth_batch(1);
  Batch two;
  two.size = 2;
  two.seq_len = one.seq_len;
  two.images = Tensor({2, 3, 32, 32});
  for (std::int64_t i = 0; i < one.images.numel(); ++i)
    two.images[i] = two.images[i + one.images.numel()] = one.images[i];
  two.token_ids = one.token_ids;
  two.token_ids.insert(two.token_ids.end(), one.token_ids.begin(), one.token_ids.end());
  two.pad_mask = pad_mask_from_ids(two.token_ids);
  for (Modality m : {Modality::image, Modality::text}) {
    Graph g;
    ParamBinding bind(g, params);
    const auto& e = encode(bind, spec, two, m).embeddings.value();
    // Under MoE the second copy may lose expert slots to the first.
    if (!sparse)
      for (std::int64_t c = 0; c < e.cols(); ++c) EXPECT_NEAR(e.at(0, c), e.at(1, c), 1e-6);
    Graph g1, g2;
    ParamBinding b1(g1, params), b2(g2, params);
    EXPECT_TRUE(encode(b1, spec, one, m).embeddings.value() == encode(b2, spec, one, m).embeddings.value());
  }
}

INSTANTIATE_TEST_SUITE_P(Backbones, EncodeTest,
                         ::testing::Combine(::testing::Values(Backbone::separated, Backbone::shared),
                                            ::testing::Bool()));

TEST(Encode, TextPoolingIgnoresPadding) {
  ModelSpec spec = tiny_spec();
  ParamStore params = init_params(spec, 5);
  std::vector<std::int32_t> ids(16, kPadToken);
  ids[0] = 3;
  ids[1] = 9;
  auto embed = [&](const std::vector<std::int32_t>& t) {
    Graph g;
    ParamBinding bind(g, params);
    return encode_texts(bind, spec, t, pad_mask_from_ids(t), 1).embeddings.value();
  };
  Tensor a = embed(ids);
  // A different token in a padded slot must not change anything.
  ids[7] = 11;
  std::vector<std::uint8_t> mask = pad_mask_from_ids(ids);
  mask[7] = 1;
  Graph g;
  ParamBinding bind(g, params);
  Tensor b = encode_texts(bind, spec, ids, mask, 1).embeddings.value();
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Encode, TokenOutsideVocabularyIsContractError) {
  ModelSpec spec = tiny_spec();
  ParamStore params = init_params(spec, 5);
  std::vector<std::int32_t> ids(16, kPadToken);
  ids[0] = 64;
  Graph g;
  ParamBinding bind(g, params);
  EXPECT_ANY_THROW(encode_texts(bind, spec, ids, pad_mask_from_ids(ids), 1));
}

TEST(Encode, GradientsReachEveryDenseParameter) {
  ModelSpec spec = tiny_spec();
  ParamStore params = init_params(spec, 6);
  params.set_requires_grad(true);
  Batch batch = synth_batch(4);
  Graph g;
  ParamBinding bind(g, params);
  Var img = encode(bind, spec, batch, Modality::image).embeddings;
  Var txt = encode(bind, spec, batch, Modality::text).embeddings;
  g.backward(contrastive_loss(img, txt, bind("logit_scale")));
  for (const auto& [name, t] : params) {
    double n = 0;
    for (float v : t.grad()) n += static_cast<double>(v) * v;
    if (name == "text.token_embed" || name == "text.pos") continue;  // only used rows receive gradient
    EXPECT_GT(n, 0.0) << name;
  }
}

TEST(ContrastiveLoss, SingletonBatchIsZero) {
  std::mt19937_64 rng(1);
  Tensor a = normalized_rows(random_tensor({1, 8}, rng));
  Tensor b = normalized_rows(random_tensor({1, 8}, rng));
  EXPECT_EQ(contrastive_loss(a, b, 0.07f), 0.0f);
}

TEST(ContrastiveLoss, IdenticalEmbeddingsGiveLogB) {
  Tensor e({4, 3});
  for (std::int64_t r = 0; r < 4; ++r) e.at(r, 0) = 1.0f;
  EXPECT_NEAR(contrastive_loss(e, e, 0.07f), std::log(4.0), 1e-6);
}

TEST(ContrastiveLoss, TwoOrthogonalPairs) {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(contrastive_loss(eye, eye, 1.0f), std::log1p(std::exp(-1.0)), 1e-6);
  EXPECT_NEAR(contrastive_loss(eye, eye, 1.0f), 0.3133, 1e-4);
}

TEST(ContrastiveLoss, PermutationAndSwapInvariance) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = normalized_rows(random_tensor({6, 5}, rng));
    Tensor b = normalized_rows(random_tensor({6, 5}, rng));
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pa({6, 5}), pb({6, 5});
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 5; ++c) {
        pa.at(r, c) = a.at(perm[static_cast<std::size_t>(r)], c);
        pb.at(r, c) = b.at(perm[static_cast<std::size_t>(r)], c);
      }
    const float base = contrastive_loss(a, b, 0.1f);
    EXPECT_NEAR(contrastive_loss(pa, pb, 0.1f), base, 1e-6);
    EXPECT_NEAR(contrastive_loss(b, a, 0.1f), base, 1e-6);
    EXPECT_GE(base, 0.0f);
  }
}

TEST(ContrastiveLoss, InvalidArguments) {
  EXPECT_THROW(contrastive_loss(Tensor(), Tensor(), 0.07f), ContractError);
  EXPECT_THROW(contrastive_loss(Tensor({2, 4}), Tensor({3, 4}), 0.07f), DimensionError);
  EXPECT_THROW(contrastive_loss(Tensor({2, 4}), Tensor({2, 4}), 0.0f), ContractError);
}

TEST(ContrastiveLoss, GraphMatchesScalarForm) {
  std::mt19937_64 rng(2);
  Tensor a = normalized_rows(random_tensor({5, 4}, rng));
  Tensor b = normalized_rows(random_tensor({5, 4}, rng));
  Graph g;
  Var loss = contrastive_loss(g.constant(a), g.constant(b), g.constant(Tensor({1}, std::log(1.0f / 0.07f))));
  EXPECT_NEAR(loss.value()[0], contrastive_loss(a, b, 0.07f), 1e-5);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> in{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), random_tensor({1}, rng, 0.5f, 1.5f)};
    auto r = testing::grad_check(
        [](Graph&, const std::vector<Var>& v) {
          return contrastive_loss(l2_normalize_rows(v[0]), l2_normalize_rows(v[1]), v[2]);
        },
        in, seed);
    EXPECT_LT(r.rel_error, 1e-3) << "seed " << seed;
  }
}

TEST(ModelSpec, SharedBackboneHasFewerParameters) {
  ModelSpec separated = tiny_spec();
  ModelSpec shared = separated;
  shared.backbone = Backbone::shared;
  EXPECT_LT(parameter_count(shared), parameter_count(separated));
  separated.moe = shared.moe = MoESpec{};
  EXPECT_LT(parameter_count(shared), parameter_count(separated));
}

TEST(ModelSpec, Validation) {
  ModelSpec s = tiny_spec();
  EXPECT_NO_THROW(validate(s));
  s.patch_size = 7;
  EXPECT_THROW(validate(s), ContractError);
  s = tiny_spec();
  s.image_tower.num_heads = 5;
  EXPECT_THROW(validate(s), ContractError);
  s = tiny_spec();
  s.backbone = Backbone::shared;
  s.text_tower.model_dim = 32;
  EXPECT_THROW(validate(s), ContractError);
  s = tiny_spec();
  s.moe = MoESpec{};
  s.moe->top_k = 9;
  EXPECT_THROW(validate(s), ContractError);
}

TEST(ModelSpec, EncodingIsDeterministic) {
  ModelSpec spec = tiny_spec();
  spec.moe = MoESpec{};
  Batch batch = synth_batch(8);
  auto run = [&] {
    ParamStore p = init_params(spec, 7);
    Graph g;
    ParamBinding bind(g, p);
    return encode(bind, spec, batch, Modality::image).embeddings.value();
  };
  Tensor a = run(), b = run();
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

}  // namespace
}  // namespace mucp
