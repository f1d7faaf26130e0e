#include <set>

#include "common.hpp"
#include "forge/gradcheck_suite.hpp"
#include "forge/nn.hpp"

namespace forge::testing {
namespace {

double dot_rows(const Td& a, std::size_t ra, const Td& b, std::size_t rb) {
  double s = 0;
  for (std::size_t j = 0; j < a.dim(1); ++j) s += a.at(ra, j) * b.at(rb, j);
  return s;
}

double row_norm(const Td& a, std::size_t r) { return std::sqrt(dot_rows(a, r, a, r)); }

// ---------------------------------------------------------------------------
// layer_norm / rms_norm

TEST(LayerNorm, ConstantRowWithZeroBiasIsZero) {
  const auto out = layer_norm(Td::full({2, 5}, 3.5), Td::full({5}, 1.0), Td::zeros({5}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRowMapsToMinusOneOne) {
  const auto out = layer_norm(tensor({1, 2}, {1, 3}), Td::full({2}, 1.0), Td::zeros({2}), 1e-14);
  EXPECT_NEAR(out[0], -1.0, 1e-12);
  EXPECT_NEAR(out[1], 1.0, 1e-12);
}

TEST(LayerNorm, MatchesScalarOracle) {
  Rng rng(21, "ln");
  const auto x = random_tensor(rng, {3, 7}, 2.0);
  const auto g = random_tensor(rng, {7});
  const auto b = random_tensor(rng, {7});
  const auto out = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 3; ++r) {
    long double mu = 0, var = 0;
    for (std::size_t j = 0; j < 7; ++j) mu += x.at(r, j);
    mu /= 7;
    for (std::size_t j = 0; j < 7; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu);
    var /= 7;
    for (std::size_t j = 0; j < 7; ++j) {
      const long double want = (x.at(r, j) - mu) / std::sqrt(var + 1e-5L) * g[j] + b[j];
      EXPECT_NEAR(out.at(r, j), static_cast<double>(want), 1e-6);
    }
  }
}

TEST(LayerNorm, InvariantToShiftAndScale) {
  Rng rng(22, "ln-inv");
  const auto x = random_tensor(rng, {4, 8});
  auto moved = x.clone();
  for (auto& v : moved.data()) v = 3.0 * v - 7.5;
  const auto g = Td::full({8}, 1.0), b = Td::zeros({8});
  EXPECT_LT(max_abs_diff(layer_norm(x, g, b, 1e-12).data(), layer_norm(moved, g, b, 1e-12).data()), 1e-6);
}

TEST(RmsNorm, ThreeFour) {
  const auto out = rms_norm(tensor({1, 2}, {3, 4}), Td::full({2}, 1.0));
  const double rms = std::sqrt(12.5 + 1e-6);
  EXPECT_NEAR(out[0], 3 / rms, 1e-12);
  EXPECT_NEAR(out[1], 4 / rms, 1e-12);
  EXPECT_NEAR(out[0], 0.84853, 1e-5);
  EXPECT_NEAR(out[1], 1.13137, 1e-5);
}

TEST(RmsNorm, OnesStayOnes) {
  const auto out = rms_norm(Td::full({3, 6}, 1.0), Td::full({6}, 1.0));
  for (double v : out.data()) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(RmsNorm, ScaleInvariant) {
  Rng rng(23, "rms-inv");
  const auto x = random_tensor(rng, {5, 8});
  const auto g = random_tensor(rng, {8});
  for (double c : {0.5, 3.0, 40.0}) {
    auto scaled = x.clone();
    for (auto& v : scaled.data()) v *= c;
    // eps is negligible here so the identity is exact up to rounding.
    EXPECT_LT(max_abs_diff(rms_norm(x, g, 1e-14).data(), rms_norm(scaled, g, 1e-14).data()), 1e-12) << c;
  }
}

TEST(Norms, NonPositiveEpsIsRejected) {
  EXPECT_THROW(rms_norm(Td::zeros({1, 2}), Td::full({2}, 1.0), 0.0), ContractError);
  EXPECT_THROW(layer_norm(Td::zeros({1, 2}), Td::full({2}, 1.0), Td::zeros({2}), -1.0), ContractError);
}

// ---------------------------------------------------------------------------
// silu / swiglu

TEST(Silu, KnownValues) {
  const auto out = silu(tensor({2}, {0, 1}));
  EXPECT_EQ(out[0], 0.0);
  EXPECT_NEAR(out[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(out[1], 0.73106, 1e-5);
}

TEST(Silu, ReflectionIdentity) {
  Rng rng(24, "silu");
  const auto x = random_tensor(rng, {50}, 4.0);
  auto neg = x.clone();
  for (auto& v : neg.data()) v = -v;
  const auto a = silu(neg), b = silu(x);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(a[i], -x[i] + b[i], 1e-6);
}

TEST(Swiglu, ZeroInputGivesZero) {
  Rng rng(25, "swiglu0");
  const auto out = swiglu_ffn(Td::zeros({1, 4}), random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8}),
                              random_tensor(rng, {8, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Swiglu, ZeroGateWeightsKillSignal) {
  Rng rng(26, "swiglu-gate");
  const auto out = swiglu_ffn(random_tensor(rng, {3, 4}), random_tensor(rng, {4, 8}), Td::zeros({4, 8}),
                              random_tensor(rng, {8, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Swiglu, MatchesScalarOracle) {
  Rng rng(27, "swiglu-oracle");
  const auto x = random_tensor(rng, {1, 4});
  const auto w1 = random_tensor(rng, {4, 8}), w3 = random_tensor(rng, {4, 8}), w2 = random_tensor(rng, {8, 4});
  const auto out = swiglu_ffn(x, w1, w3, w2);
  for (std::size_t o = 0; o < 4; ++o) {
    double acc = 0;
    for (std::size_t h = 0; h < 8; ++h) {
      double a = 0, b = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        a += x[i] * w1.at(i, h);
        b += x[i] * w3.at(i, h);
      }
      acc += a / (1 + std::exp(-a)) * b * w2.at(h, o);
    }
    EXPECT_NEAR(out[o], acc, 1e-5);
  }
}

TEST(Swiglu, ShapeMismatchIsRejected) {
  EXPECT_THROW(swiglu_ffn(Td::zeros({1, 4}), Td::zeros({4, 8}), Td::zeros({4, 6}), Td::zeros({8, 4})),
               DimensionError);
}

// ---------------------------------------------------------------------------
// QK normalization

TEST(QkNorm, UnitGainsGiveUnitRms) {
  Rng rng(28, "qk-rms");
  const auto q = random_tensor(rng, {5, 16}, 3.0), k = random_tensor(rng, {5, 16}, 0.2);
  const auto [qn, kn] = qk_normalize(q, k, Td::full({8}, 1.0), Td::full({8}, 1.0), 1e-14);
  for (const Td* t : {&qn, &kn}) {
    for (std::size_t row = 0; row < 10; ++row) {  // 5 positions x 2 heads
      double ss = 0;
      for (std::size_t j = 0; j < 8; ++j) ss += (*t)[row * 8 + j] * (*t)[row * 8 + j];
      EXPECT_NEAR(std::sqrt(ss / 8), 1.0, 1e-12);
    }
  }
}

TEST(QkNorm, ScalingQueriesChangesNothing) {
  Rng rng(29, "qk-scale");
  const auto q = random_tensor(rng, {4, 8}), k = random_tensor(rng, {4, 8});
  auto q10 = q.clone();
  for (auto& v : q10.data()) v *= 10;
  const auto g = random_tensor(rng, {8});
  const auto a = qk_normalize(q, k, g, g, 1e-14).first, b = qk_normalize(q10, k, g, g, 1e-14).first;
  EXPECT_LT(max_abs_diff(a.data(), b.data()), 1e-9);
}

TEST(QkNorm, LogitBoundHoldsOverThousandDraws) {
  Rng rng(30, "qk-bound");
  const std::size_t dh = 64;
  const auto ones = Td::full({dh}, 1.0);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto q = random_tensor(rng, {4, dh}, 5.0), k = random_tensor(rng, {4, dh}, 5.0);
    const auto [qn, kn] = qk_normalize(q, k, ones, ones);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        worst = std::max(worst, std::abs(dot_rows(qn, i, kn, j)) / std::sqrt(double(dh)));
  }
  EXPECT_LE(worst, 8.0 + 1e-6);
}

// ---------------------------------------------------------------------------
// RoPE

TEST(Rope1d, PositionZeroIsIdentity) {
  Rng rng(31, "rope0");
  const auto x = random_tensor(rng, {1, 16});
  const std::vector<std::int32_t> pos{0};
  const auto ctx = make_rope_context(10000.0, 8, 64, 64);
  EXPECT_EQ(values_of(rope_1d(x, std::span<const std::int32_t>(pos), ctx)), values_of(x));
}

TEST(Rope1d, MatchesScalarRotationOracle) {
  Rng rng(32, "rope-oracle");
  const std::size_t dh = 8;
  const auto x = random_tensor(rng, {3, 2 * dh});
  const std::vector<std::int32_t> pos{0, 5, 17};
  const auto ctx = make_rope_context(500.0, dh, 64, 64);
  const auto out = rope_1d(x, std::span<const std::int32_t>(pos), ctx);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const double angle = pos[r] * std::pow(500.0, -2.0 * double(i) / double(dh));
        const double a = x.at(r, h * dh + 2 * i), b = x.at(r, h * dh + 2 * i + 1);
        EXPECT_NEAR(out.at(r, h * dh + 2 * i), a * std::cos(angle) - b * std::sin(angle), 1e-12);
        EXPECT_NEAR(out.at(r, h * dh + 2 * i + 1), a * std::sin(angle) + b * std::cos(angle), 1e-12);
      }
    }
  }
}

TEST(Rope1d, PreservesNorm) {
  Rng rng(33, "rope-norm");
  const auto x = random_tensor(rng, {6, 32});
  const std::vector<std::int32_t> pos{0, 1, 7, 100, 1000, 16383};
  const auto ctx = make_rope_context(125000.0, 32, 16384, 16384);
  const auto out = rope_1d(x, std::span<const std::int32_t>(pos), ctx);
  for (std::size_t r = 0; r < 6; ++r) EXPECT_NEAR(row_norm(out, r), row_norm(x, r), 1e-6);
}

TEST(Rope1d, DotProductDependsOnlyOnOffset) {
  Rng rng(34, "rope-rel");
  const auto q = random_tensor(rng, {1, 16}), k = random_tensor(rng, {1, 16});
  const auto ctx = make_rope_context(10000.0, 16, 64, 64);
  auto at = [&](const Td& x, int p) {
    const std::vector<std::int32_t> pos{p};
    return rope_1d(x, std::span<const std::int32_t>(pos), ctx);
  };
  EXPECT_NEAR(dot_rows(at(q, 5), 0, at(k, 3), 0), dot_rows(at(q, 7), 0, at(k, 5), 0), 1e-9);
}

TEST(Rope1d, OddHeadDimIsRejected) {
  EXPECT_THROW(make_rope_context(10000.0, 7, 16, 16), ContractError);
}

TEST(RopeDynamicScale, BaseThetaWithinTrainedLength) {
  EXPECT_EQ(rope_dynamic_scale(125000.0, 16384, 16384, 64), 125000.0);
  EXPECT_EQ(rope_dynamic_scale(125000.0, 16384, 100, 64), 125000.0);
}

TEST(RopeDynamicScale, DoublingContextAtHeadDim64) {
  const double want = 125000.0 * std::pow(2.0, 64.0 / 62.0);
  EXPECT_NEAR(rope_dynamic_scale(125000.0, 1024, 2048, 64), want, 1e-6);
  EXPECT_NEAR(want, 255700.0, 100.0);
}

TEST(RopeDynamicScale, StrictlyIncreasingBeyondTrainedLength) {
  double prev = rope_dynamic_scale(10000.0, 64, 64, 32);
  for (std::size_t target = 65; target < 2048; target += 37) {
    const double next = rope_dynamic_scale(10000.0, 64, target, 32);
    EXPECT_GT(next, prev);
    prev = next;
  }
}

TEST(RopeDynamicScale, SmallHeadDimIsRejected) {
  EXPECT_THROW(rope_dynamic_scale(10000.0, 16, 32, 2), ContractError);
}

TEST(RopeContext, LinearInterpolationScalesPositions) {
  const auto ctx = make_rope_context(10000.0, 8, 16, 64, RopeScaling::LinearInterpolation);
  EXPECT_EQ(ctx.effective_theta, 10000.0);
  EXPECT_EQ(ctx.position_scale, 4.0);
  EXPECT_EQ(ctx.context_len, 64u);
}

TEST(Rope2d, OriginIsIdentity) {
  Rng rng(35, "rope2d-0");
  const auto x = random_tensor(rng, {1, 8});
  const std::vector<std::int32_t> r{0}, c{0};
  const auto ctx = make_rope_context(10000.0, 8, 0, 0);
  EXPECT_EQ(values_of(rope_2d(x, std::span<const std::int32_t>(r), std::span<const std::int32_t>(c), ctx)),
            values_of(x));
}

TEST(Rope2d, PreservesNormAndRelativeIdentity) {
  Rng rng(36, "rope2d");
  const std::size_t dh = 16;
  const auto q = random_tensor(rng, {1, dh}), k = random_tensor(rng, {1, dh});
  const auto ctx = make_rope_context(100.0, dh, 0, 0);
  auto at = [&](const Td& x, int row, int col) {
    const std::vector<std::int32_t> r{row}, c{col};
    return rope_2d(x, std::span<const std::int32_t>(r), std::span<const std::int32_t>(c), ctx);
  };
  EXPECT_NEAR(row_norm(at(q, 9, 4), 0), row_norm(q, 0), 1e-6);
  // (2,3)->(5,7) and (1,1)->(4,5) share the offset (3,4).
  EXPECT_NEAR(dot_rows(at(q, 2, 3), 0, at(k, 5, 7), 0), dot_rows(at(q, 1, 1), 0, at(k, 4, 5), 0), 1e-9);
}

TEST(Rope2d, RowsRotateFirstHalfColumnsSecondHalf) {
  Rng rng(37, "rope2d-split");
  const auto x = random_tensor(rng, {1, 8});
  const auto ctx = make_rope_context(100.0, 8, 0, 0);
  const std::vector<std::int32_t> r{3}, c{0};
  const auto out = rope_2d(x, std::span<const std::int32_t>(r), std::span<const std::int32_t>(c), ctx);
  for (std::size_t j = 4; j < 8; ++j) EXPECT_EQ(out[j], x[j]);
  EXPECT_NE(out[0], x[0]);
}

TEST(Rope2d, HeadDimMustBeMultipleOfFour) {
  const std::vector<std::int32_t> r{0}, c{0};
  const auto ctx = make_rope_context(100.0, 6, 0, 0);
  EXPECT_THROW(rope_2d(Td::zeros({1, 6}), std::span<const std::int32_t>(r), std::span<const std::int32_t>(c), ctx),
               ContractError);
}

// ---------------------------------------------------------------------------
// Absolute positional bias

TEST(AbsPosBias, SameGridReturnsTable) {
  Rng rng(38, "bias-id");
  PosBiasTable<double> t{3, 4, random_tensor(rng, {12, 5})};
  EXPECT_EQ(values_of(abs_pos_bias(3, 4, t)), values_of(t.table));
}

TEST(AbsPosBias, UpsampledCentreIsCornerMean) {
  PosBiasTable<double> t{2, 2, tensor({4, 1}, {1, 2, 4, 9})};
  const auto out = abs_pos_bias(3, 3, t);
  EXPECT_NEAR(out[4], (1 + 2 + 4 + 9) / 4.0, 1e-12);
}

TEST(AbsPosBias, MatchesBilinearOracle) {
  Rng rng(39, "bias-oracle");
  PosBiasTable<double> t{4, 4, random_tensor(rng, {16, 3})};
  const auto out = abs_pos_bias(7, 7, t);
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 7; ++c) {
      const double y = r * 3.0 / 6.0, x = c * 3.0 / 6.0;
      const int y0 = std::min(2, int(y)), x0 = std::min(2, int(x));
      const double fy = y - y0, fx = x - x0;
      for (std::size_t d = 0; d < 3; ++d) {
        auto v = [&](int yy, int xx) { return t.table.at(std::size_t(yy * 4 + xx), d); };
        const double want = (1 - fy) * (1 - fx) * v(y0, x0) + (1 - fy) * fx * v(y0, x0 + 1) +
                            fy * (1 - fx) * v(y0 + 1, x0) + fy * fx * v(y0 + 1, x0 + 1);
        EXPECT_NEAR(out.at(r * 7 + c, d), want, 1e-6);
      }
    }
  }
}

TEST(AbsPosBias, ZeroGridIsRejected) {
  PosBiasTable<double> t{2, 2, Td::zeros({4, 1})};
  EXPECT_THROW(abs_pos_bias(0, 3, t), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Gradcheck, EveryPrimitivePassesOnTenSeeds) {
  const std::set<std::string> ops{"layer_norm", "rms_norm", "silu", "swiglu_ffn", "qk_normalize",
                                  "rope_1d", "rope_2d", "abs_pos_bias"};
  std::size_t seen = 0;
  for (const auto& c : gradcheck_cases()) {
    if (!ops.count(c.name)) continue;
    ++seen;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) EXPECT_LT(c.run(seed), c.threshold) << c.name << " seed " << seed;
  }
  EXPECT_EQ(seen, ops.size());
}

}  // namespace
}  // namespace forge::testing
