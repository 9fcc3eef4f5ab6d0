#include "helpers.hpp"
#include "stae/embedding.hpp"
#include "stae/error.hpp"

using namespace stae;
using stae::testing::expect_gradients_match;
using stae::testing::probe_loss;
using stae::testing::random_tensor;
using stae::testing::to_vector;

namespace {

CalendarIndices calendar_of(std::size_t batch, std::size_t frames, std::vector<std::int32_t> dow,
                            std::vector<std::int32_t> tod) {
  return {batch, frames, std::move(dow), std::move(tod)};
}

}  // namespace

TEST(FeatureEmbed, ZeroInputZeroBiasGivesZero) {
  Rng rng(1);
  const FeatureProjection proj = FeatureProjection::init(5, rng);
  const Tensor out = feature_embed(proj, Tensor::zeros({2, 3, 4, 1}));
  EXPECT_EQ(out.shape(), (Shape{2, 3, 4, 5}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(FeatureEmbed, UnitWeightCopiesValueIntoFirstChannel) {
  FeatureProjection proj{Tensor({1, 3}, {1, 0, 0}, true), Tensor::zeros({3}, true)};
  const Tensor out = feature_embed(proj, Tensor({1, 1, 1, 1}, {2}));
  EXPECT_EQ(to_vector(out), (std::vector<double>{2, 0, 0}));
}

TEST(FeatureEmbed, MatchesScalarOracle) {
  Rng rng(2);
  FeatureProjection proj = FeatureProjection::init(4, rng);
  proj.bias = random_tensor({4}, rng, true);
  const Tensor x = random_tensor({2, 3, 5, 1}, rng);
  const Tensor out = feature_embed(proj, x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(out.values()[i * 4 + c], x.values()[i] * proj.weight.values()[c] + proj.bias.values()[c]);
    }
  }
}

TEST(FeatureEmbed, WrongLastDimIsShapeError) {
  Rng rng(3);
  const FeatureProjection proj = FeatureProjection::init(4, rng);
  EXPECT_THROW(feature_embed(proj, Tensor::zeros({1, 2, 3, 2})), ShapeError);
}

TEST(Periodicity, TablesHaveCalendarRowCounts) {
  Rng rng(4);
  const PeriodicityTables t = PeriodicityTables::init(24, rng);
  EXPECT_EQ(t.day_of_week.shape(), (Shape{7, 24}));
  EXPECT_EQ(t.time_of_day.shape(), (Shape{288, 24}));
  const double bound = 1.0 / std::sqrt(24.0);
  for (double v : t.time_of_day.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Periodicity, ZeroIndicesGatherFirstRows) {
  Rng rng(5);
  const PeriodicityTables t = PeriodicityTables::init(3, rng);
  const Tensor out = periodicity_embed(t, calendar_of(2, 2, {0, 0, 0, 0}, {0, 0, 0, 0}), 3);
  ASSERT_EQ(out.shape(), (Shape{2, 2, 3, 6}));
  std::vector<double> expect(t.day_of_week.values().begin(), t.day_of_week.values().begin() + 3);
  expect.insert(expect.end(), t.time_of_day.values().begin(), t.time_of_day.values().begin() + 3);
  for (std::size_t cell = 0; cell < 12; ++cell) {
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(out.values()[cell * 6 + c], expect[c]);
  }
}

TEST(Periodicity, ConstantAlongNodeAxis) {
  Rng rng(6);
  const PeriodicityTables t = PeriodicityTables::init(4, rng);
  const Tensor out = periodicity_embed(t, calendar_of(2, 3, {0, 1, 2, 3, 4, 6}, {5, 17, 287, 0, 100, 3}), 4);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t f = 0; f < 3; ++f) {
      for (std::size_t n = 1; n < 4; ++n) {
        for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at({b, f, n, c}), out.at({b, f, 0, c}));
      }
    }
  }
}

TEST(Periodicity, OutOfRangeIndexIsIndexError) {
  Rng rng(7);
  const PeriodicityTables t = PeriodicityTables::init(2, rng);
  EXPECT_THROW(periodicity_embed(t, calendar_of(1, 1, {7}, {0}), 2), IndexError);
  EXPECT_THROW(periodicity_embed(t, calendar_of(1, 1, {0}, {288}), 2), IndexError);
}

TEST(Periodicity, TimeOfDayGradientCountsUses) {
  Rng rng(8);
  const PeriodicityTables t = PeriodicityTables::init(2, rng);
  const std::size_t nodes = 3;
  const CalendarIndices cal = calendar_of(2, 3, {1, 1, 1, 2, 2, 2}, {10, 11, 10, 10, 12, 13});
  backward(sum(periodicity_embed(t, cal, nodes)));
  auto grad_row = [&](std::size_t r) { return t.time_of_day.grad()[r * 2]; };
  EXPECT_EQ(grad_row(10), 3.0 * nodes);
  EXPECT_EQ(grad_row(11), 1.0 * nodes);
  EXPECT_EQ(grad_row(13), 1.0 * nodes);
  EXPECT_EQ(grad_row(0), 0.0);
  EXPECT_EQ(t.day_of_week.grad()[1 * 2 + 1], 3.0 * nodes);
  Tensor(t.time_of_day).zero_grad();
  Tensor(t.day_of_week).zero_grad();
  expect_gradients_match([&] { return sum(periodicity_embed(t, cal, nodes)); },
                         {{"dow", t.day_of_week}, {"tod", t.time_of_day}});
}

TEST(Adaptive, PemsShapeHoldsExpectedLearnables) {
  Rng rng(9);
  const AdaptiveEmbedding e = AdaptiveEmbedding::init(12, 170, 80, rng);
  EXPECT_EQ(e.table.numel(), 163200u);
}

TEST(Adaptive, BroadcastOverBatchIsExact) {
  Rng rng(10);
  const AdaptiveEmbedding e = AdaptiveEmbedding::init(3, 2, 4, rng);
  const Tensor out = adaptive_embed(e, 2);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 2, 4}));
  const std::size_t per = 3 * 2 * 4;
  for (std::size_t i = 0; i < per; ++i) {
    EXPECT_EQ(out.values()[i], out.values()[per + i]);
    EXPECT_EQ(out.values()[i], e.table.values()[i]);
  }
}

TEST(Adaptive, GradientScalesWithBatch) {
  Rng rng(11);
  const AdaptiveEmbedding e = AdaptiveEmbedding::init(2, 3, 2, rng);
  const Tensor weights = random_tensor({1, 2, 3, 2}, rng);
  backward(probe_loss(adaptive_embed(e, 1), weights));
  const std::vector<double> single(e.table.grad().begin(), e.table.grad().end());
  Tensor(e.table).zero_grad();
  const Tensor tripled = broadcast_to(weights, {3, 2, 3, 2});
  backward(probe_loss(adaptive_embed(e, 3), tripled));
  for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(e.table.grad()[i], 3.0 * single[i], 1e-12);
  Tensor(e.table).zero_grad();
  expect_gradients_match([&] { return probe_loss(adaptive_embed(e, 3), tripled); }, {{"table", e.table}});
}

TEST(Spatial, ConstantAlongFrameAxis) {
  Rng rng(12);
  const SpatialEmbedding e = SpatialEmbedding::init(3, 4, rng);
  const Tensor out = spatial_embed(e, 2, 5);
  ASSERT_EQ(out.shape(), (Shape{2, 5, 3, 4}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t f = 0; f < 5; ++f) {
      for (std::size_t n = 0; n < 3; ++n) {
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at({b, f, n, c}), out.at({0, 0, n, c}));
      }
    }
  }
}

TEST(Assemble, HiddenWidthFollowsComponents) {
  Rng rng(13);
  auto width = [&](std::size_t d_f, std::size_t d_a) {
    const Tensor e_f = Tensor::zeros({1, 1, 1, d_f});
    const Tensor e_p = Tensor::zeros({1, 1, 1, 2 * d_f});
    const Tensor e_a = Tensor::zeros({1, 1, 1, d_a});
    return assemble_hidden(e_f, e_p, e_a).dim(-1);
  };
  EXPECT_EQ(width(24, 80), 152u);
  EXPECT_EQ(width(1, 1), 4u);
}

TEST(Assemble, FeatureChannelsComeFirst) {
  Rng rng(14);
  const Tensor e_f = random_tensor({2, 3, 4, 2}, rng);
  const Tensor e_p = random_tensor({2, 3, 4, 4}, rng);
  const Tensor e_a = random_tensor({2, 3, 4, 5}, rng);
  const Tensor z = assemble_hidden(e_f, e_p, e_a);
  EXPECT_EQ(stae::testing::to_vector(slice(z, -1, 0, 2)), to_vector(e_f));
  EXPECT_EQ(to_vector(slice(z, -1, 2, 4)), to_vector(e_p));
  EXPECT_EQ(to_vector(slice(z, -1, 6, 5)), to_vector(e_a));
  EXPECT_THROW(assemble_hidden(e_f, e_a, Tensor()), ShapeError);
}
