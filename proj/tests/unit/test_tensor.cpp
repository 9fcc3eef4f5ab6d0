#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "stae/error.hpp"

using namespace stae;
using stae::testing::expect_gradients_match;
using stae::testing::probe_loss;
using stae::testing::random_tensor;
using stae::testing::to_vector;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(to_vector(matmul(eye, b)), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  const Tensor a({1, 2}, {1, 2});
  const Tensor b({2, 1}, {3, 4});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  const Tensor a = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5, 3}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), acc, 1e-12);
    }
  }
}

TEST(Matmul, BatchedWithBroadcastMatchesLoop) {
  Rng rng(2);
  const Tensor a = random_tensor({2, 1, 3, 4}, rng);
  const Tensor b = random_tensor({3, 4, 2}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 3, 2}));
  for (std::size_t p = 0; p < 2; ++p) {
    for (std::size_t q = 0; q < 3; ++q) {
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < 4; ++k) acc += a.at({p, 0, i, k}) * b.at({q, k, j});
          EXPECT_NEAR(c.at({p, q, i, j}), acc, 1e-12);
        }
      }
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 2)"), std::string::npos) << msg;
  }
}

TEST(Softmax, SymmetricPair) {
  const Tensor y = softmax_last(Tensor({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor y = softmax_last(Tensor({3}, {1000, 1000, 1000}));
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  const Tensor y = softmax_last(Tensor({3}, {1, 2, 3}));
  long double total = 0.0L;
  for (int i = 1; i <= 3; ++i) total += std::exp(static_cast<long double>(i));
  for (int i = 1; i <= 3; ++i) {
    const long double expect = std::exp(static_cast<long double>(i)) / total;
    EXPECT_NEAR(y.values()[i - 1], static_cast<double>(expect), 1e-12);
  }
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(3);
  const Tensor y = softmax_last(random_tensor({5, 4, 7}, rng, false, 10.0));
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      const double v = y.values()[r * 7 + j];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(LayerNorm, ConstantSliceMapsToZero) {
  const Tensor y = layer_norm(Tensor({4}, {5, 5, 5, 5}), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalisedInputIsFixedPoint) {
  const Tensor y = layer_norm(Tensor({2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-300);
  EXPECT_NEAR(y.values()[0], 1.0, 1e-15);
  EXPECT_NEAR(y.values()[1], -1.0, 1e-15);
}

TEST(LayerNorm, OutputStatistics) {
  Rng rng(4);
  const Tensor x = random_tensor({8}, rng, false, 10.0);
  double xm = 0.0, xvar = 0.0;
  for (double v : x.values()) xm += v / 8.0;
  for (double v : x.values()) xvar += (v - xm) * (v - xm) / 8.0;
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  double m = 0.0;
  for (double v : y.values()) m += v;
  m /= 8.0;
  double var = 0.0;
  for (double v : y.values()) var += (v - m) * (v - m);
  var /= 8.0;
  EXPECT_LT(std::abs(m), 1e-9);
  EXPECT_NEAR(var, 1.0, 1e-6);
  EXPECT_NEAR(var, xvar / (xvar + 1e-5), 1e-12);
}

TEST(Backward, SumGivesOnes) {
  const Tensor w = Tensor::full({2, 3}, 0.7, true);
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareHandDerivative) {
  const Tensor w({2}, {1, 2}, true);
  backward(sum(mul(w, w)));
  EXPECT_EQ(to_vector(Tensor({2}, {w.grad()[0], w.grad()[1]})), (std::vector<double>{2, 4}));
}

TEST(Backward, RepeatedCallsAccumulate) {
  const Tensor w({2}, {1, 2}, true);
  const Tensor loss = sum(mul(w, w));
  backward(loss);
  backward(loss);
  EXPECT_EQ(w.grad()[0], 4.0);
  EXPECT_EQ(w.grad()[1], 8.0);
  Tensor(w).zero_grad();
  EXPECT_EQ(w.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  const Tensor w = Tensor::full({3}, 1.0, true);
  EXPECT_THROW(backward(scale(w, 2.0)), ContractError);
}

TEST(Backward, SharedSubexpressionCountsEveryUse) {
  const Tensor w({1}, {3}, true);
  const Tensor u = scale(w, 2.0);
  backward(sum(add(u, mul(u, u))));  // d/dw (2w + 4w²) = 2 + 8w
  EXPECT_DOUBLE_EQ(w.grad()[0], 26.0);
}

TEST(Tape, TopologicalOrder) {
  const Tensor a({2}, {1, 2}, true);
  const Tensor b({2}, {3, 4}, true);
  const Tensor c = mul(add(a, b), a);
  const Tensor loss = sum(c);
  const Tape tape = Tape::record(loss);
  std::vector<const detail::Node*> seen;
  for (const detail::Node* node : tape.nodes()) {
    for (const auto& in : node->inputs) {
      if (in->requires_grad) {
        EXPECT_NE(std::find(seen.begin(), seen.end(), in.get()), seen.end()) << node->op;
      }
    }
    seen.push_back(node);
  }
  EXPECT_EQ(tape.nodes().back(), loss.node().get());
}

TEST(GradMode, NoGradGuardSkipsRecording) {
  const Tensor w = Tensor::full({2}, 1.0, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(scale(w, 2.0).requires_grad());
  }
  EXPECT_TRUE(scale(w, 2.0).requires_grad());
}

TEST(Broadcast, AddMatchesExplicitExpansion) {
  Rng rng(5);
  const Tensor a = random_tensor({2, 1, 3}, rng);
  const Tensor b = random_tensor({4, 1}, rng);
  const Tensor c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 3}));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(c.at({i, j, k}), a.at({i, 0, k}) + b.at({j, 0}));
    }
  }
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({4, 3})), ShapeError);
}

TEST(Layout, PermuteAndReshapeRoundTripExactly) {
  Rng rng(6);
  const Tensor a = random_tensor({2, 3, 4, 5}, rng);
  const Tensor p = permute(a, {2, 0, 3, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 5, 3}));
  EXPECT_EQ(p.at({3, 1, 4, 2}), a.at({1, 2, 3, 4}));
  EXPECT_EQ(to_vector(permute(p, {1, 3, 0, 2})), to_vector(a));
  const Tensor q = permute(a, {1, 0, 2, 3});  // innermost axis kept
  EXPECT_EQ(q.at({2, 1, 3, 4}), a.at({1, 2, 3, 4}));
  EXPECT_EQ(to_vector(permute(q, {1, 0, 2, 3})), to_vector(a));
  EXPECT_EQ(to_vector(reshape(reshape(a, {6, 20}), {2, 3, 4, 5})), to_vector(a));
  EXPECT_THROW(reshape(a, {7, 3}), ShapeError);
  EXPECT_THROW(permute(a, {0, 0, 1, 2}), ShapeError);
}

TEST(Layout, ConcatAndSlice) {
  const Tensor a({2, 1}, {1, 2});
  const Tensor b({2, 2}, {3, 4, 5, 6});
  const Tensor c = concat_last({a, b});
  EXPECT_EQ(to_vector(c), (std::vector<double>{1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(to_vector(slice(c, -1, 1, 2)), to_vector(b));
  EXPECT_EQ(to_vector(slice(c, 0, 1, 1)), (std::vector<double>{2, 5, 6}));
  EXPECT_THROW(slice(c, 1, 2, 2), IndexError);
}

TEST(Relu, ClampsNegatives) {
  EXPECT_EQ(to_vector(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Mean, AveragesAllEntries) { EXPECT_DOUBLE_EQ(mean(Tensor({2, 2}, {1, 2, 3, 6})).item(), 3.0); }

TEST(Dropout, IdentityInEvalModeAndAtZero) {
  Rng rng(7);
  const Tensor x = random_tensor({10}, rng);
  EXPECT_EQ(to_vector(dropout(x, 0.5, false, rng)), to_vector(x));
  EXPECT_EQ(to_vector(dropout(x, 0.0, true, rng)), to_vector(x));
  EXPECT_THROW(dropout(x, 1.0, true, rng), ConfigError);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
  Rng rng(8);
  const Tensor x = Tensor::full({200000}, 1.0);
  const Tensor y = dropout(x, 0.3, true, rng);
  std::size_t zeros = 0;
  double total = 0.0;
  for (double v : y.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.7);
    }
    total += v;
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 200000.0, 0.3, 0.01);
  EXPECT_NEAR(total / 200000.0, 1.0, 0.01);
}

TEST(Dropout, SameSeedSameMask) {
  Rng r1(9), r2(9);
  const Tensor x = Tensor::full({64}, 1.0);
  EXPECT_EQ(to_vector(dropout(x, 0.5, true, r1)), to_vector(dropout(x, 0.5, true, r2)));
}

TEST(Gather, OutOfRangeNamesTheValue) {
  const Tensor table = Tensor::zeros({7, 2});
  const std::vector<std::int32_t> idx{1, 7};
  try {
    gather_rows(table, idx, {2});
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
  }
  const std::vector<std::int32_t> neg{-1};
  EXPECT_THROW(gather_rows(table, neg, {1}), IndexError);
}

TEST(Gather, ScatterAddsRepeatedRows) {
  const Tensor table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::int32_t> idx{2, 0, 2};
  const Tensor g = gather_rows(table, idx, {3});
  EXPECT_EQ(to_vector(g), (std::vector<double>{5, 6, 1, 2, 5, 6}));
  backward(sum(g));
  EXPECT_EQ(std::vector<double>(table.grad().begin(), table.grad().end()), (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

TEST(Init, XavierBoundsAndUniformBounds) {
  Rng rng(10);
  const Tensor w = xavier_uniform({30, 50}, rng);
  const double bound = std::sqrt(6.0 / 80.0);
  for (double v : w.values()) EXPECT_LE(std::abs(v), bound);
  EXPECT_TRUE(w.requires_grad());
  const Tensor e = xavier_uniform({12, 170, 80}, rng);
  const double bound3 = std::sqrt(6.0 / (170.0 * 80 + 12.0 * 80));
  for (double v : e.values()) EXPECT_LE(std::abs(v), bound3);
  const Tensor u = uniform({7, 24}, -0.2, 0.2, rng);
  for (double v : u.values()) {
    EXPECT_GE(v, -0.2);
    EXPECT_LT(v, 0.2);
  }
}

TEST(Finite, ForwardOpsStayFiniteOnFiniteInputs) {
  Rng rng(11);
  const Tensor x = random_tensor({3, 4, 5}, rng, false, 50.0);
  const Tensor w = random_tensor({5, 5}, rng);
  for (const Tensor& t : {softmax_last(x), layer_norm(x, Tensor::full({5}, 1.0), Tensor::zeros({5})),
                          matmul(x, w), relu(x), mean(x)}) {
    for (double v : t.values()) EXPECT_TRUE(std::isfinite(v));
  }
}

// Central differences for every differentiable op on random small shapes.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  Rng rng(GetParam());
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  const std::size_t p = dim(rng), q = dim(rng), r = dim(rng), s = dim(rng);
  const Tensor a = random_tensor({p, q, r}, rng, true);
  const Tensor b = random_tensor({p, q, r}, rng, true);
  const Tensor row = random_tensor({1, q, r}, rng, true);
  const Tensor m = random_tensor({r, s}, rng, true);
  const Tensor bm = random_tensor({p, 1, r, s}, rng, true);
  const Tensor bias = random_tensor({s}, rng, true);
  const Tensor gain = random_tensor({r}, rng, true);
  const Tensor shift = random_tensor({r}, rng, true);
  const Tensor table = random_tensor({5, r}, rng, true);
  std::vector<std::int32_t> idx(p * q);
  for (auto& i : idx) i = static_cast<std::int32_t>(rng() % 5);
  // Keep relu arguments away from the kink.
  Tensor away = random_tensor({p, q, r}, rng, true);
  for (double& v : away.mutable_values()) v += v >= 0 ? 0.1 : -0.1;

  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<NamedParam> params) {
    SCOPED_TRACE(name);
    const Tensor probe = random_tensor(f().shape(), rng);
    expect_gradients_match([&] { return probe_loss(f(), probe); }, std::move(params));
  };
  check("add", [&] { return add(a, row); }, {{"a", a}, {"row", row}});
  check("sub", [&] { return sub(row, a); }, {{"a", a}, {"row", row}});
  check("mul", [&] { return mul(a, b); }, {{"a", a}, {"b", b}});
  check("mul_broadcast", [&] { return mul(a, row); }, {{"a", a}, {"row", row}});
  check("scale", [&] { return add_scalar(scale(a, -1.7), 0.3); }, {{"a", a}});
  check("matmul", [&] { return matmul(a, m); }, {{"a", a}, {"m", m}});
  check("matmul_batched", [&] { return matmul(reshape(a, {p, q, r}), bm); }, {{"a", a}, {"bm", bm}});
  check("affine", [&] { return affine(a, m, bias); }, {{"a", a}, {"m", m}, {"bias", bias}});
  check("permute", [&] { return permute(a, {2, 0, 1}); }, {{"a", a}});
  check("concat", [&] { return concat_last({a, b, row * 1.0 + a}); }, {{"a", a}, {"b", b}, {"row", row}});
  check("slice", [&] { return slice(a, 1, 0, q); }, {{"a", a}});
  check("relu", [&] { return relu(away); }, {{"away", away}});
  check("mean", [&] { return mean(mul(a, a)); }, {{"a", a}});
  check("softmax", [&] { return softmax_last(a); }, {{"a", a}});
  check("layer_norm", [&] { return layer_norm(a, gain, shift); }, {{"a", a}, {"gain", gain}, {"shift", shift}});
  check("broadcast_to", [&] { return broadcast_to(row, {p, q, r}); }, {{"row", row}});
  check("gather", [&] { return gather_rows(table, idx, {p, q}); }, {{"table", table}});
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, OpGradients, ::testing::Range<std::uint64_t>(100, 112));
