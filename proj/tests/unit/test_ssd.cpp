#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ndbm2/pipeline.hpp"
#include "ndbm2/random.hpp"
#include "ndbm2/ssd.hpp"
#include "oracles.hpp"

using namespace ndbm2;

namespace {

template <typename T>
struct ScanInputs {
  Tensor<T> x, dt, A, B, C, D;
};

template <typename T>
ScanInputs<T> random_scan(Rng& rng, std::size_t batch, std::size_t len, std::size_t heads,
                          std::size_t headdim, std::size_t groups, std::size_t state) {
  ScanInputs<T> s;
  s.x = random_normal<T>({batch, len, heads, headdim}, rng);
  s.dt = map(random_normal<T>({batch, len, heads}, rng), softplus_scalar<T>);
  s.A = map(random_uniform<T>({heads}, rng, -1.0, 1.0), [](T v) { return -std::exp(v); });
  s.B = random_normal<T>({batch, len, groups, state}, rng);
  s.C = random_normal<T>({batch, len, groups, state}, rng);
  s.D = random_normal<T>({heads}, rng);
  return s;
}

Mamba2Config small_config() {
  Mamba2Config cfg;
  cfg.d_model = 16;
  cfg.expand = 2;
  cfg.d_state = 8;
  cfg.headdim = 8;
  cfg.chunk = 16;
  return cfg;
}

Mamba2Weights<float> random_core(const Mamba2Config& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return detail::init_core<float>(cfg, rng);
}

}  // namespace

TEST(ScanNaive, PrefixSumWhenDecayIsOne) {
  Tensor<float> x({1, 3, 1, 1}, {1, 2, 3});
  Tensor<float> dt({1, 3, 1}, {1, 1, 1});
  Tensor<float> A({1}, {0});
  Tensor<float> B({1, 3, 1, 1}, {1, 1, 1});
  Tensor<float> D({1}, {0});
  EXPECT_EQ(ssd_scan_naive(x, dt, A, B, B, D).vec(), (std::vector<float>{1, 3, 6}));
}

TEST(ScanNaive, MemorylessLimit) {
  Rng rng(1);
  auto s = random_scan<double>(rng, 1, 8, 2, 3, 1, 4);
  const Tensor<double> A_log({2}, {50.0, 50.0});
  s.A = map(A_log, [](double v) { return -std::exp(v); });
  const auto y = ssd_scan_naive(s.x, s.dt, s.A, s.B, s.C, s.D);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t p = 0; p < 3; ++p) {
        double bc = 0;
        for (std::size_t n = 0; n < 4; ++n) bc += s.B.at(0, t, 0, n) * s.C.at(0, t, 0, n);
        const double expect = s.dt.at(0, t, h) * bc * s.x.at(0, t, h, p) + s.D[h] * s.x.at(0, t, h, p);
        EXPECT_NEAR(y.at(0, t, h, p), expect, 1e-12);
      }
}

TEST(ScanNaive, SingleStepClosedForm) {
  Rng rng(2);
  const auto s = random_scan<double>(rng, 1, 1, 1, 1, 1, 3);
  const auto y = ssd_scan_naive(s.x, s.dt, s.A, s.B, s.C, s.D);
  double bc = 0;
  for (std::size_t n = 0; n < 3; ++n) bc += s.B[n] * s.C[n];
  EXPECT_NEAR(y[0], s.dt[0] * s.x[0] * bc + s.D[0] * s.x[0], 1e-14);
}

TEST(ScanNaive, ShapeErrors) {
  Rng rng(3);
  auto s = random_scan<float>(rng, 1, 4, 2, 2, 1, 2);
  EXPECT_THROW(ssd_scan_naive(s.x, s.dt, Tensor<float>({3}), s.B, s.C, s.D), ShapeError);
  EXPECT_THROW(ssd_scan_naive(s.x, Tensor<float>({1, 5, 2}), s.A, s.B, s.C, s.D), ShapeError);
}

TEST(ScanChunked, MatchesNaiveOnGrid) {
  Rng rng(4);
  for (std::size_t len : {64, 128, 256})
    for (std::size_t heads : {1, 4})
      for (std::size_t state : {16, 128})
        for (std::size_t chunk : {std::size_t{1}, std::size_t{16}, std::size_t{64}, len}) {
          const auto s = random_scan<float>(rng, 1, len, heads, 4, 1, state);
          const auto ref = ssd_scan_naive(s.x, s.dt, s.A, s.B, s.C, s.D);
          const auto got = ssd_scan_chunked(s.x, s.dt, s.A, s.B, s.C, s.D, chunk);
          EXPECT_LE(oracle::rel_error(got, ref), 1e-4) << len << " " << heads << " " << state << " " << chunk;
        }
}

TEST(ScanChunked, DoublePrecisionAndGroups) {
  Rng rng(5);
  const auto s = random_scan<double>(rng, 2, 96, 4, 5, 2, 12);
  const auto ref = ssd_scan_naive(s.x, s.dt, s.A, s.B, s.C, s.D);
  for (std::size_t chunk : {1, 8, 32, 96}) {
    EXPECT_LE(oracle::rel_error(ssd_scan_chunked(s.x, s.dt, s.A, s.B, s.C, s.D, chunk), ref), 1e-9);
  }
}

TEST(ScanChunked, RejectsIndivisibleLength) {
  Rng rng(6);
  const auto s = random_scan<float>(rng, 1, 100, 1, 2, 1, 2);
  EXPECT_THROW(ssd_scan_chunked(s.x, s.dt, s.A, s.B, s.C, s.D, 64), ContractError);
}

TEST(CausalConv, CurrentTapIdentity) {
  Rng rng(7);
  const auto x = random_normal<float>({2, 9, 3}, rng);
  Tensor<float> w({3, 4});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, 3) = 1;
  EXPECT_EQ(causal_conv(x, w, Tensor<float>({3})), gelu(x));
}

TEST(CausalConv, MatchesPadThenConvComposition) {
  Rng rng(8);
  const auto x = random_normal<float>({2, 11, 3}, rng);
  const auto w = random_normal<float>({3, 4}, rng);
  const auto b = random_normal<float>({3}, rng);
  // (B, L, C) -> (B, C, L), left-pad K-1 zeros, valid depthwise conv, GELU.
  const auto xc = pad_zero(permute(x, {0, 2, 1}), 2, 3, 0);
  auto ref = oracle::conv1d(xc, w, &b, 4, 1, true);
  for (auto& v : ref.data()) v = static_cast<float>(oracle::gelu(v));
  EXPECT_LE(oracle::rel_error(causal_conv(x, w, b), permute(ref, {0, 2, 1})), 1e-5);
}

TEST(CausalConv, FirstOutputSeesOnlyFirstInput) {
  Rng rng(9);
  const auto x = random_normal<float>({1, 6, 2}, rng);
  const auto w = random_normal<float>({2, 4}, rng);
  const auto b = random_normal<float>({2}, rng);
  const auto base = causal_conv(x, w, b);
  for (std::size_t t = 1; t < 6; ++t) {
    auto xp = x;
    xp.at(0, t, 0) += 3.0f;
    const auto y = causal_conv(xp, w, b);
    for (std::size_t s = 0; s < t; ++s) EXPECT_EQ(y.at(0, s, 0), base.at(0, s, 0));
  }
}

TEST(Mamba2Forward, ZeroWeightsGiveZero) {
  const auto cfg = small_config();
  Mamba2Weights<float> w(cfg);
  Rng rng(10);
  const auto y = mamba2_forward(random_normal<float>({1, 32, cfg.d_model}, rng), w, cfg);
  for (float v : y.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(Mamba2Forward, ShapeContractDocumentedConfig) {
  const Mamba2Config cfg;
  const auto w = random_core(cfg, 11);
  Rng rng(12);
  for (auto [b, l] : {std::pair<std::size_t, std::size_t>{1, 64}, {2, 128}}) {
    const auto x = random_normal<float>({b, l, cfg.d_model}, rng);
    EXPECT_EQ(mamba2_forward(x, w, cfg).shape(), x.shape());
  }
  EXPECT_THROW(mamba2_forward(random_normal<float>({1, 65, cfg.d_model}, rng), w, cfg), ContractError);
}

TEST(Mamba2Forward, ChunkedEqualsNaiveSubstitution) {
  const Mamba2Config cfg;
  const auto w = random_core(cfg, 13);
  Rng rng(14);
  const auto x = random_normal<float>({2, 128, cfg.d_model}, rng);
  EXPECT_LE(oracle::rel_error(mamba2_forward(x, w, cfg, ScanKind::kChunked),
                              mamba2_forward(x, w, cfg, ScanKind::kNaive)),
            1e-4);
}

TEST(Mamba2Forward, CausalInTokens) {
  const auto cfg = small_config();
  const auto w = random_core(cfg, 15);
  Rng rng(16);
  const auto x = random_normal<float>({1, 64, cfg.d_model}, rng);
  const auto base = mamba2_forward(x, w, cfg);
  for (std::size_t t : {0, 5, 16, 31, 63}) {
    auto xp = x;
    for (std::size_t c = 0; c < cfg.d_model; ++c) xp.at(0, t, c) += 1.0f;
    const auto y = mamba2_forward(xp, w, cfg);
    for (std::size_t s = 0; s < 64; ++s) {
      bool changed = false;
      for (std::size_t c = 0; c < cfg.d_model; ++c) changed |= y.at(0, s, c) != base.at(0, s, c);
      if (s < t) EXPECT_FALSE(changed) << "t=" << t << " s=" << s;
      if (s == t) EXPECT_TRUE(changed);
    }
  }
}

TEST(Mamba2Forward, FiniteForLargeInputs) {
  const auto cfg = small_config();
  const auto w = random_core(cfg, 17);
  Rng rng(18);
  const auto x = random_normal<float>({2, 64, cfg.d_model}, rng, 1e3);
  for (float v : mamba2_forward(x, w, cfg).vec()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Mamba2Forward, DeterministicAcrossThreadCounts) {
  const auto cfg = small_config();
  const auto w = random_core(cfg, 19);
  Rng rng(20);
  const auto x = random_normal<float>({2, 64, cfg.d_model}, rng);
  set_num_threads(1);
  const auto y1 = mamba2_forward(x, w, cfg);
  set_num_threads(std::max(4, max_threads()));
  const auto y2 = mamba2_forward(x, w, cfg);
  set_num_threads(0);
  EXPECT_EQ(y1, y2);
}

TEST(Mamba2Weights, ValidateRejectsWrongShapes) {
  const auto cfg = small_config();
  Mamba2Weights<float> w(cfg);
  EXPECT_NO_THROW(w.validate(cfg));
  w.norm_gain = Tensor<float>({3});
  EXPECT_THROW(w.validate(cfg), ValidationError);
  Mamba2Config bad = cfg;
  bad.headdim = 5;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Mamba2Forward, SiluVariantRuns) {
  auto cfg = small_config();
  cfg.activation = Activation::kSilu;
  const auto w = random_core(cfg, 21);
  Rng rng(22);
  const auto x = random_normal<float>({1, 32, cfg.d_model}, rng);
  const auto y = mamba2_forward(x, w, cfg);
  cfg.activation = Activation::kGelu;
  EXPECT_NE(y, mamba2_forward(x, w, cfg));
}
