#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace semnoma;

TEST(ToSymbols, PairsAndNormalizesToExactPower) {
  auto s = to_symbols(torch::ones({4}), 1.0);
  ASSERT_EQ(s.k(), 2);
  const double v = 1.0 / std::sqrt(2.0);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(s.iq[0][j][0].item<double>(), v, 1e-7);
    EXPECT_NEAR(s.iq[0][j][1].item<double>(), v, 1e-7);
  }
  EXPECT_NEAR(s.power()[0].item<double>(), 1.0, 1e-6);
}

TEST(ToSymbols, ZeroInputIsDegenerate) {
  EXPECT_THROW(to_symbols(torch::zeros({4}), 1.0), DegenerateInputError);
}

TEST(ToSymbols, OddLengthIsShapeError) { EXPECT_THROW(to_symbols(torch::ones({5}), 1.0), ShapeError); }

TEST(ToSymbols, RandomVectorMeetsPowerConstraint) {
  RandomStream rng(3);
  auto s = to_symbols(rng.normal({1024}, 3.0), 1.0);
  EXPECT_EQ(s.k(), 512);
  EXPECT_NEAR(s.iq.pow(2).sum().item<double>() / 512.0, 1.0, 1e-6);
}

TEST(ToSymbols, BatchNormalizesEachSampleAndHonoursPavg) {
  RandomStream rng(4);
  auto f = rng.normal({5, 16, 4, 4});
  f[2].mul_(100.0);
  auto s = to_symbols(f, 2.0);
  auto p = s.power();
  for (int b = 0; b < 5; ++b) EXPECT_NEAR(p[b].item<double>(), 2.0, 1e-5);
}

TEST(ToSymbols, IsDifferentiable) {
  RandomStream rng(5);
  auto f = rng.normal({8}).set_requires_grad(true);
  to_symbols(f, 1.0).iq.select(-1, 0).sum().backward();
  ASSERT_TRUE(f.grad().defined());
  EXPECT_GT(f.grad().abs().sum().item<double>(), 0.0);
}

TEST(FromSymbols, InvertsPairing) {
  auto y = torch::tensor({1.0f, 2.0f}).view({1, 1, 2});
  auto f = from_symbols(y);
  EXPECT_FLOAT_EQ(f[0][0].item<float>(), 1.0f);
  EXPECT_FLOAT_EQ(f[0][1].item<float>(), 2.0f);
  auto z = from_symbols(torch::zeros({1, 1, 2}));
  EXPECT_EQ(z.abs().sum().item<float>(), 0.0f);
}

TEST(FromSymbols, RoundTripIsPositiveScaling) {
  RandomStream rng(6);
  auto f = rng.normal({1, 32});
  auto back = from_symbols(to_symbols(f, 1.0).iq).reshape({1, 32});
  auto ratio = back / f;
  EXPECT_GT(ratio.min().item<double>(), 0.0);
  EXPECT_NEAR((ratio.max() - ratio.min()).item<double>(), 0.0, 1e-5);
}

TEST(SnrToSigma2, ClosedForm) {
  EXPECT_DOUBLE_EQ(snr_to_sigma2(0.0, 1.0), 1.0);
  EXPECT_NEAR(snr_to_sigma2(10.0, 1.0), 0.1, 1e-15);
  EXPECT_NEAR(snr_to_sigma2(20.0, 2.0), 0.02, 1e-15);
}

namespace {

SymbolVector symbols(const torch::Tensor& iq) { return SymbolVector{iq, 1.0}; }

ChannelBatch noiseless(std::int64_t users, std::int64_t batch) {
  RandomStream rng(0);
  auto st = fixed_snr_batch(ChannelKind::awgn, users, batch, 0.0, rng);
  st.sigma2.zero_();
  return st;
}

}  // namespace

TEST(NomaTransmit, NoiselessAwgnIsSuperposition) {
  RandomStream rng(7);
  auto s1 = rng.normal({2, 8, 2});
  auto s2 = rng.normal({2, 8, 2});
  std::vector<SymbolVector> s{symbols(s1), symbols(s2)};
  auto rx = noma_transmit(s, noiseless(2, 2), rng);
  EXPECT_TRUE(torch::allclose(rx.y, s1 + s2, 0.0, 0.0));
}

TEST(NomaTransmit, ComplexGain) {
  ChannelState st;
  st.kind = ChannelKind::rayleigh;
  st.h = {0.6, 0.8};
  st.sigma2 = 0.0;
  RandomStream rng(1);
  std::vector<SymbolVector> s{symbols(torch::tensor({1.0f, 0.0f}).view({1, 1, 2}))};
  auto rx = noma_transmit(s, std::vector<ChannelState>{st}, rng);
  EXPECT_NEAR(rx.y[0][0][0].item<double>(), 0.6, 1e-7);
  EXPECT_NEAR(rx.y[0][0][1].item<double>(), 0.8, 1e-7);
}

TEST(NomaTransmit, MismatchedKIsShapeError) {
  RandomStream rng(1);
  std::vector<SymbolVector> s{symbols(torch::ones({1, 4, 2})), symbols(torch::ones({1, 3, 2}))};
  EXPECT_THROW(noma_transmit(s, noiseless(2, 1), rng), ShapeError);
}

TEST(NomaTransmit, NoiseVarianceMatchesSigma2) {
  RandomStream rng(11);
  const std::int64_t k = 100000;
  auto s = torch::zeros({1, k, 2});
  auto st = fixed_snr_batch(ChannelKind::awgn, 1, 1, 0.0, rng);
  std::vector<SymbolVector> sv{symbols(s)};
  auto n = noma_transmit(sv, st, rng).y.to(torch::kFloat64);
  EXPECT_NEAR(n.pow(2).sum(-1).mean().item<double>(), 1.0, 0.02);
  EXPECT_NEAR(n.select(-1, 0).var().item<double>(), 0.5, 0.01);
  EXPECT_NEAR(n.select(-1, 1).var().item<double>(), 0.5, 0.01);
}

TEST(NomaTransmit, LinearWithoutNoise) {
  RandomStream rng(12);
  auto a = rng.normal({3, 6, 2}), b = rng.normal({3, 6, 2}), c = rng.normal({3, 6, 2});
  auto st = noiseless(2, 3);
  st.h = rng.normal({2, 3, 2}, 1.0, torch::kFloat64);
  auto y = [&](const torch::Tensor& s1) {
    std::vector<SymbolVector> s{symbols(s1), symbols(c)};
    return noma_transmit(s, st, rng).y;
  };
  EXPECT_TRUE(torch::allclose(y(a + b) + y(torch::zeros_like(a)), y(a) + y(b), 1e-6, 1e-6));
}

TEST(NomaTransmit, NoiseCarriesNoGradientAndGainDoes) {
  RandomStream rng(13);
  auto f = rng.normal({1, 8}).set_requires_grad(true);
  auto sv = to_symbols(f, 1.0);
  auto st = fixed_snr_batch(ChannelKind::awgn, 1, 1, 10.0, rng);
  std::vector<SymbolVector> s{sv};
  auto rx = noma_transmit(s, st, rng);
  rx.y.pow(2).sum().backward();
  EXPECT_GT(f.grad().abs().sum().item<double>(), 0.0);
}

TEST(NomaTransmit, FiniteDifferenceGradient) {
  RandomStream rng(14);
  auto base = rng.normal({1, 8}, 1.0, torch::kFloat64);
  auto st = noiseless(1, 1);
  st.h = torch::tensor({0.3, -1.1}, torch::kFloat64).view({1, 1, 2});
  auto energy = [&](const torch::Tensor& f) {
    std::vector<SymbolVector> s{to_symbols(f * torch::arange(1, 9, torch::kFloat64), 1.0)};
    return noma_transmit(s, st, rng).y.pow(2).sum();
  };
  auto f = base.clone().set_requires_grad(true);
  energy(f).backward();
  const double eps = 1e-6;
  for (int j = 0; j < 8; ++j) {
    auto plus = base.clone();
    auto minus = base.clone();
    plus[0][j] += eps;
    minus[0][j] -= eps;
    const double fd = (energy(plus) - energy(minus)).item<double>() / (2 * eps);
    const double ad = f.grad()[0][j].item<double>();
    EXPECT_NEAR(ad, fd, 1e-3 * std::max(1.0, std::abs(fd))) << j;
  }
}

TEST(OrthogonalTransmit, NoiselessUnitGainIsIdentity) {
  RandomStream rng(15);
  auto s = rng.normal({2, 4, 2});
  auto rx = orthogonal_transmit(symbols(s), noiseless(1, 2), rng);
  EXPECT_TRUE(torch::equal(rx.y, s));
}

TEST(OrthogonalTransmit, EqualsSingleUserNoma) {
  RandomStream data(16);
  auto s = data.normal({2, 4, 2});
  RandomStream r1(99), r2(99);
  auto st = sample_channel_batch(ChannelKind::rayleigh, 1, 2, 0, 20, data);
  std::vector<SymbolVector> sv{symbols(s)};
  auto a = orthogonal_transmit(symbols(s), st, r1);
  auto b = noma_transmit(sv, st, r2);
  EXPECT_TRUE(torch::equal(a.y, b.y));
}

TEST(OrthogonalTransmit, EqualizeUndoesGain) {
  RandomStream rng(17);
  auto s = rng.normal({3, 4, 2});
  auto st = sample_channel_batch(ChannelKind::rayleigh, 1, 3, 0, 20, rng);
  st.sigma2.zero_();
  auto rx = orthogonal_transmit(symbols(s), st, rng, true);
  EXPECT_TRUE(torch::allclose(rx.y, s, 1e-5, 1e-5));
}

TEST(SampleChannelState, DegenerateRangeAwgn) {
  RandomStream rng(18);
  auto st = sample_channel_state(ChannelKind::awgn, 5.0, 5.0, rng);
  EXPECT_EQ(st.gamma_db, 5.0);
  EXPECT_EQ(st.h, std::complex<double>(1.0, 0.0));
}

TEST(SampleChannelState, RayleighReproducible) {
  RandomStream a(19), b(19);
  auto s1 = sample_channel_state(ChannelKind::rayleigh, 0, 20, a);
  auto s2 = sample_channel_state(ChannelKind::rayleigh, 0, 20, b);
  EXPECT_EQ(s1.amplitude(), s2.amplitude());
  EXPECT_EQ(s1.phase(), s2.phase());
  EXPECT_GE(s1.phase(), -std::numbers::pi);
  EXPECT_LT(s1.phase(), std::numbers::pi);
}

TEST(SampleChannelState, UniformSnrMean) {
  RandomStream rng(20);
  auto b = sample_channel_batch(ChannelKind::awgn, 1, 100000, 0.0, 20.0, rng);
  EXPECT_NEAR(b.gamma_db.mean().item<double>(), 10.0, 0.1);
  EXPECT_THROW(sample_channel_state(ChannelKind::awgn, 3, 1, rng), ConfigError);
}

TEST(SampleChannelState, RayleighAmplitudeMean) {
  RandomStream rng(21);
  auto b = sample_channel_batch(ChannelKind::rayleigh, 1, 100000, 0.0, 20.0, rng);
  auto a = b.h.pow(2).sum(-1).sqrt();
  EXPECT_NEAR(a.mean().item<double>(), std::sqrt(std::numbers::pi / 4.0), 0.02 * std::sqrt(std::numbers::pi / 4.0));
  EXPECT_NEAR(a.pow(2).mean().item<double>(), 1.0, 0.02);
}

TEST(ChannelBatch, SharedSnrPerImageAndSideInfo) {
  RandomStream rng(22);
  auto b = sample_channel_batch(ChannelKind::rayleigh, 3, 4, 0.0, 20.0, rng);
  EXPECT_EQ(b.users(), 3);
  EXPECT_EQ(b.batch(), 4);
  auto side = b.side_info(1, 0.0, 20.0);
  ASSERT_EQ(side.sizes(), (std::vector<std::int64_t>{4, 3}));
  for (int i = 0; i < 4; ++i) {
    auto st = b.state(1, i);
    EXPECT_NEAR(side[i][0].item<double>(), st.gamma_db / 20.0, 1e-6);
    EXPECT_NEAR(side[i][1].item<double>(), st.amplitude(), 1e-6);
    EXPECT_NEAR(side[i][2].item<double>(), st.phase(), 1e-6);
    EXPECT_EQ(b.state(0, i).gamma_db, st.gamma_db);
  }
  auto awgn = sample_channel_batch(ChannelKind::awgn, 2, 3, 0.0, 20.0, rng).side_info(0, 0.0, 20.0);
  EXPECT_TRUE(torch::equal(awgn.select(1, 1), torch::ones({3})));
  EXPECT_TRUE(torch::equal(awgn.select(1, 2), torch::zeros({3})));
}

TEST(Determinism, SameSeedSameDraws) {
  RandomStream a(23), b(23);
  auto x = sample_channel_batch(ChannelKind::rayleigh, 2, 5, 0, 20, a);
  auto y = sample_channel_batch(ChannelKind::rayleigh, 2, 5, 0, 20, b);
  EXPECT_TRUE(torch::equal(x.h, y.h));
  EXPECT_TRUE(torch::equal(x.gamma_db, y.gamma_db));
  std::vector<SymbolVector> s{symbols(torch::ones({5, 3, 2})), symbols(torch::ones({5, 3, 2}))};
  EXPECT_TRUE(torch::equal(noma_transmit(s, x, a).y, noma_transmit(s, y, b).y));
}

TEST(ParseChannelKind, RoundTripAndRejects) {
  EXPECT_EQ(parse_channel_kind(to_string(ChannelKind::rayleigh)), ChannelKind::rayleigh);
  EXPECT_EQ(parse_channel_kind("awgn"), ChannelKind::awgn);
  EXPECT_THROW(parse_channel_kind("rician"), ConfigError);
}
