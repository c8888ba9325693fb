#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ndbm2/pipeline.hpp"
#include "oracles.hpp"

using namespace ndbm2;

namespace {

InitOptions small_options(std::size_t rank, bool bi, std::uint64_t seed = 1) {
  InitOptions o;
  o.cfg.d_model = 16;
  o.cfg.d_state = 8;
  o.cfg.headdim = 8;
  o.c_in = 3;
  o.c_out = 5;
  o.spatial_rank = rank;
  o.bidirectional = bi;
  o.seed = seed;
  return o;
}

bool row_changed(const Tensor<float>& a, const Tensor<float>& b, std::size_t t) {
  const std::size_t d = a.shape()[2];
  for (std::size_t c = 0; c < d; ++c) {
    if (a.at(0, t, c) != b.at(0, t, c)) return true;
  }
  return false;
}

}  // namespace

TEST(Forward, DocumentedConfigShapeContract) {
  InitOptions o;  // c_in = c_out = 64, d_model = 128
  o.bidirectional = true;
  const auto m = init_random<float>(o);
  Rng rng(1);
  const auto x = random_normal<float>({1, 64, 1029}, rng);
  EXPECT_EQ(forward(m, x).shape(), (Shape{1, 64, 1029}));
}

TEST(Forward, ZeroWeightsGiveOutputBias) {
  auto m = init_random<float>(small_options(2, true));
  for (auto* t : {&m.fc_in_weight, &m.fc_in_bias, &m.fc_out_weight}) {
    for (auto& v : t->data()) v = 0;
  }
  m.core_forward = Mamba2Weights<float>(m.cfg);
  m.core_backward = Mamba2Weights<float>(m.cfg);
  Rng rng(2);
  const auto y = forward(m, random_normal<float>({2, 3, 5, 7}, rng));
  ASSERT_EQ(y.shape(), (Shape{2, 5, 5, 7}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < 35; ++i) EXPECT_EQ(y[(b * 5 + c) * 35 + i], m.fc_out_bias[c]);
}

TEST(Forward, SilentBackwardCoreMatchesUnidirectional) {
  const auto uni = init_random<float>(small_options(1, false, 3));
  auto bi = init_random<float>(small_options(1, true, 3));
  EXPECT_EQ(uni.core_forward, bi.core_forward);
  for (auto& v : bi.core_backward->out_proj.data()) v = 0;
  Rng rng(3);
  const auto x = random_normal<float>({1, 3, 100}, rng);
  EXPECT_EQ(forward(uni, x), forward(bi, x));
}

TEST(FusedFeatures, PalindromeSymmetryWithSharedCores) {
  auto m = init_random<float>(small_options(1, true, 4));
  m.core_backward = m.core_forward;
  Rng rng(4);
  const auto half = random_normal<float>({1, 32, m.cfg.d_model}, rng);
  Tensor<float> mapped({1, 64, m.cfg.d_model});
  for (std::size_t t = 0; t < 32; ++t)
    for (std::size_t c = 0; c < m.cfg.d_model; ++c) {
      mapped.at(0, t, c) = half.at(0, t, c);
      mapped.at(0, 63 - t, c) = half.at(0, t, c);
    }
  ASSERT_EQ(flip_tokens(mapped), mapped);
  const auto h = fused_features(m, mapped);
  EXPECT_LE(oracle::rel_error(flip_tokens(h), h), 1e-6);
}

TEST(FlipTokens, InvolutionAndUnitLength) {
  Rng rng(5);
  const auto h = random_normal<float>({2, 7, 3}, rng);
  EXPECT_EQ(flip_tokens(flip_tokens(h)), h);
  const auto one = random_normal<float>({2, 1, 3}, rng);
  EXPECT_EQ(flip_tokens(one), one);
  EXPECT_THROW(flip_tokens(Tensor<float>({2, 3})), ShapeError);
}

TEST(FlipTokens, BackwardPathIsAntiCausal) {
  const auto m = init_random<float>(small_options(1, true, 6));
  Rng rng(6);
  const auto x = random_normal<float>({1, 64, m.cfg.d_model}, rng);
  auto backward = [&](const Tensor<float>& in) {
    return flip_tokens(mamba2_forward(flip_tokens(in), *m.core_backward, m.cfg));
  };
  const auto base = backward(x);
  for (std::size_t t : {0, 10, 33, 50, 63}) {
    auto xp = x;
    for (std::size_t c = 0; c < m.cfg.d_model; ++c) xp.at(0, t, c) += 1.0f;
    const auto y = backward(xp);
    for (std::size_t s = 0; s < 64; ++s) {
      if (s > t) EXPECT_FALSE(row_changed(y, base, s)) << t << " " << s;
    }
    EXPECT_TRUE(row_changed(y, base, t));
  }
}

TEST(Fuse, Algebra) {
  Rng rng(7);
  const auto a = random_normal<float>({1, 4, 3}, rng);
  const auto b = random_normal<float>({1, 4, 3}, rng);
  EXPECT_EQ(fuse(a, Tensor<float>(a.shape())), a);
  for (float v : fuse(a, scale(a, -1.0f)).vec()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(fuse(a, b), fuse(b, a));
  EXPECT_THROW(fuse(a, Tensor<float>({1, 4, 2})), ShapeError);
}

TEST(InitRandom, Determinism) {
  const auto a = init_random<float>(small_options(3, true, 42));
  const auto b = init_random<float>(small_options(3, true, 42));
  const auto c = init_random<float>(small_options(3, true, 43));
  EXPECT_EQ(a, b);
  EXPECT_NE(a.fc_in_weight, c.fc_in_weight);
  EXPECT_NE(a.core_forward.in_proj, c.core_forward.in_proj);
}

TEST(InitRandom, DecayAndStepRanges) {
  const auto m = init_random<float>(small_options(1, true, 8));
  for (float v : m.core_forward.A_log.vec()) {
    const double a = std::exp(-std::exp(double(v)));
    EXPECT_GT(a, 0.5);
    EXPECT_LT(a, 1.0);
  }
  for (float v : m.core_forward.dt_bias.vec()) {
    const double dt = softplus_scalar(double(v));
    EXPECT_GE(dt, 1e-3 * 0.999);
    EXPECT_LE(dt, 1e-1 * 1.001);
  }
}

TEST(InitRandom, ActivationBandOnGaussianInput) {
  InitOptions o;
  o.bidirectional = true;
  const auto m = init_random<float>(o);
  const auto y = forward(m, random_normal<float>({1, 64, 1024}, 9));
  double ss = 0;
  for (float v : y.vec()) {
    ASSERT_TRUE(std::isfinite(v));
    ss += double(v) * v;
  }
  const double rms = std::sqrt(ss / y.size());
  EXPECT_GT(rms, 1e-4);
  EXPECT_LT(rms, 1e2);
}

TEST(Forward, ShapePreservationAcrossRanks) {
  Rng rng(10);
  const Shape primes[] = {{1001}, {113, 127}, {27, 33, 31}};
  for (std::size_t rank = 1; rank <= 3; ++rank) {
    const auto m = init_random<float>(small_options(rank, rank != 2, rank));
    for (int trial = 0; trial < 6; ++trial) {
      Shape spatial;
      if (trial == 0) {
        spatial = primes[rank - 1];
      } else {
        for (std::size_t i = 0; i < rank; ++i) spatial.push_back(1 + rng.next_u64() % (rank == 1 ? 300 : 19));
      }
      Shape shape{1 + rng.next_u64() % 2, 3};
      shape.insert(shape.end(), spatial.begin(), spatial.end());
      const auto y = forward(m, random_normal<float>(shape, rng));
      Shape expect = shape;
      expect[1] = 5;
      EXPECT_EQ(y.shape(), expect);
    }
  }
}

TEST(Forward, DirectionalReceptiveField) {
  for (bool bi : {false, true}) {
    const auto m = init_random<float>(small_options(1, bi, 11));
    Rng rng(11);
    const auto x = random_normal<float>({1, 128, 3}, rng);
    const auto base = forward_tokens(m, x);
    for (std::size_t t : {1, 40, 64, 100, 126}) {
      auto xp = x;
      xp.at(0, t, 0) += 1.0f;
      const auto y = forward_tokens(m, xp);
      bool before = false, after = false;
      for (std::size_t s = 0; s < t; ++s) before |= row_changed(y, base, s);
      for (std::size_t s = t + 1; s < 128; ++s) after |= row_changed(y, base, s);
      EXPECT_TRUE(after) << "t=" << t;
      EXPECT_EQ(before, bi) << "t=" << t;
    }
  }
}

TEST(Forward, SpatialPerturbationFollowsRowMajorTokenOrder) {
  const auto m = init_random<float>(small_options(2, false, 12));
  Rng rng(12);
  const auto x = random_normal<float>({1, 3, 8, 8}, rng);
  const auto base = forward(m, x);
  auto xp = x;
  xp.at(0, 1, 3, 4) += 1.0f;  // token 3 * 8 + 4 = 28
  const auto y = forward(m, xp);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      if (i * 8 + j >= 28) continue;
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y.at(0, c, i, j), base.at(0, c, i, j));
    }
}

TEST(Forward, FlipTransportWithSwappedCores) {
  const auto m = init_random<float>(small_options(1, true, 13));
  auto swapped = m;
  std::swap(swapped.core_forward, *swapped.core_backward);
  Rng rng(13);
  const auto x = random_normal<float>({2, 64, 3}, rng);
  const auto lhs = forward_tokens(m, flip_tokens(x));
  const auto rhs = flip_tokens(forward_tokens(swapped, x));
  EXPECT_LE(oracle::rel_error(lhs, rhs), 1e-5);
}

TEST(Forward, DeterministicAcrossThreadCounts) {
  const auto m = init_random<float>(small_options(3, true, 14));
  const auto x = random_normal<float>({1, 3, 5, 6, 7}, 14);
  set_num_threads(1);
  const auto a = forward(m, x);
  set_num_threads(std::max(4, max_threads()));
  const auto b = forward(m, x);
  set_num_threads(0);
  EXPECT_EQ(a, b);
}

TEST(Forward, PremixPathPreservesShapeAndUsesBothDirections) {
  auto opt = small_options(2, true, 15);
  opt.premix_kernel = 3;
  const auto m = init_random<float>(opt);
  ASSERT_TRUE(m.premix.has_value());
  const auto x = random_normal<float>({1, 3, 9, 10}, 15);
  const auto y = forward(m, x);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 9, 10}));

  auto changed_bwd = m;
  for (auto& v : changed_bwd.premix->backward.weight.data()) v *= 2;
  EXPECT_NE(forward(changed_bwd, x), y);
}

TEST(Forward, Errors) {
  const auto m = init_random<float>(small_options(2, false));
  EXPECT_THROW(forward(m, Tensor<float>({1, 3, 8})), ShapeError);
  EXPECT_THROW(forward(m, Tensor<float>({1, 4, 8, 8})), ShapeError);
  auto broken = m;
  broken.bidirectional = true;
  EXPECT_THROW(forward(broken, Tensor<float>({1, 3, 8, 8})), ValidationError);
  broken = m;
  broken.fc_out_bias = Tensor<float>({4});
  EXPECT_THROW(broken.validate(), ValidationError);
}
