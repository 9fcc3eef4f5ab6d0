#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "oracles.hpp"
#include "stae/analysis.hpp"
#include "stae/error.hpp"

using namespace stae;
using stae::testing::random_tensor;
using stae::testing::to_vector;

namespace {

ModelConfig small_model(const std::string& variant = "full") {
  ModelConfig c;
  c.frames = 4;
  c.horizon = 2;
  c.d_f = 4;
  c.d_a = 4;
  c.heads = 2;
  c.layers = 1;
  c.d_ff = 8;
  c.dropout = 0.0;
  c.variant = ModelVariant::parse(variant);
  return c;
}

DataBundle small_data() {
  GeneratorConfig g;
  g.nodes = 3;
  g.steps = 400;
  g.clusters = 2;
  g.seed = 2;
  return prepare_data(generate_synthetic(g), SplitSpec::parse("6:2:2"), 4, 2);
}

TrainConfig short_run() {
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.lr = 0.003;
  cfg.decay_milestones = {};
  cfg.seed = 9;
  return cfg;
}

std::vector<double> frame(const Tensor& table, std::size_t t) {
  const std::size_t w = table.numel() / table.dim(0);
  return {table.values().begin() + static_cast<long>(t * w), table.values().begin() + static_cast<long>((t + 1) * w)};
}

}  // namespace

TEST(FrameCorrelationTest, IdenticalFramesGiveAllOnes) {
  Rng rng(1);
  const Tensor one = random_tensor({1, 5, 3}, rng);
  const Tensor table = broadcast_to(one, {4, 5, 3});
  const FrameCorrelation c = frame_correlation(table);
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(c.matrix(i, j), 1.0, 1e-12);
  }
}

TEST(FrameCorrelationTest, NegatedFrameGivesMinusOne) {
  Rng rng(2);
  Tensor table = random_tensor({5, 4, 3}, rng);
  auto v = table.mutable_values();
  for (std::size_t k = 0; k < 12; ++k) v[3 * 12 + k] = -v[1 * 12 + k];
  const FrameCorrelation c = frame_correlation(table);
  EXPECT_NEAR(c.matrix(1, 3), -1.0, 1e-12);
  EXPECT_NEAR(c.matrix(3, 1), -1.0, 1e-12);
}

TEST(FrameCorrelationTest, MatchesPearsonLoopOracle) {
  Rng rng(3);
  const Tensor table = random_tensor({12, 7, 5}, rng, false, 2.0);
  const FrameCorrelation c = frame_correlation(table);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      EXPECT_NEAR(c.matrix(ii, jj), oracle::pearson(frame(table, i), frame(table, j)), 1e-10);
      EXPECT_EQ(c.matrix(ii, jj), c.matrix(jj, ii));
    }
    EXPECT_NEAR(c.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)), 1.0, 1e-12);
  }
}

TEST(FrameCorrelationTest, ZeroVarianceFrameIsMarkedUndefined) {
  Rng rng(4);
  Tensor table = random_tensor({4, 3, 2}, rng);
  for (std::size_t k = 0; k < 6; ++k) table.mutable_values()[2 * 6 + k] = 7.5;
  const FrameCorrelation c = frame_correlation(table);
  EXPECT_FALSE(c.defined[2]);
  EXPECT_TRUE(c.defined[1]);
  EXPECT_FALSE(c.entry_defined(2, 0));
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_TRUE(std::isfinite(c.matrix(i, j)));
  }
  const std::string csv = correlation_csv(c);
  EXPECT_NE(csv.find("NA"), std::string::npos);
  EXPECT_EQ(csv.find("nan"), std::string::npos);
  // Adjacent pairs (0,1) only; (1,2) and (2,3) are undefined.
  EXPECT_EQ(c.adjacent_mean(), c.matrix(0, 1));
}

TEST(FrameCorrelationTest, AdjacentAndDistantMeans) {
  Eigen::MatrixXd m(3, 3);
  m << 1, 0.5, -0.2, 0.5, 1, 0.3, -0.2, 0.3, 1;
  FrameCorrelation c{m, {true, true, true}};
  EXPECT_DOUBLE_EQ(c.adjacent_mean(), 0.4);
  EXPECT_DOUBLE_EQ(c.distant_mean(2), -0.2);
  EXPECT_TRUE(std::isnan(c.distant_mean(3)));
}

TEST(FrameCorrelationTest, PpmHeader) {
  Rng rng(5);
  const FrameCorrelation c = frame_correlation(random_tensor({3, 2, 2}, rng));
  const std::string ppm = correlation_ppm(c, 4);
  const std::string header = "P6\n12 12\n255\n";
  ASSERT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_EQ(ppm.size(), header.size() + 12 * 12 * 3);
  // Top-left cell is the diagonal: pure red.
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size()]), 255);
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size() + 1]), 0);
}

TEST(Dump, RoundTripAndTableShapes) {
  const auto dir = std::filesystem::temp_directory_path() / "stae_analysis_dump";
  std::filesystem::remove_all(dir);
  ModelConfig mc = small_model();
  mc.nodes = 3;
  const Model model(mc, 1);
  for (const char* name : {"Ea", "Tw", "Td"}) {
    const EmbeddingTable which = parse_embedding_table(name);
    EXPECT_STREQ(to_string(which), name);
    dump_embedding(model, which, dir / (std::string(name) + ".stts"));
    const Tensor back = load_stts_tensor(dir / (std::string(name) + ".stts"));
    EXPECT_EQ(back.shape(), embedding_table(model, which).shape());
    EXPECT_EQ(to_vector(back), to_vector(embedding_table(model, which)));
  }
  EXPECT_EQ(load_stts_tensor(dir / "Tw.stts").dim(0), 7u);
  EXPECT_EQ(load_stts_tensor(dir / "Ea.stts").shape(), (Shape{4, 3, 4}));
  std::filesystem::remove_all(dir);
}

TEST(Dump, MissingTableIsNamedError) {
  ModelConfig mc = small_model("no_Ea");
  mc.nodes = 3;
  const Model model(mc, 1);
  try {
    embedding_table(model, EmbeddingTable::Adaptive);
    FAIL();
  } catch (const MissingTableError& e) {
    EXPECT_NE(std::string(e.what()).find("no_Ea"), std::string::npos) << e.what();
  }
  EXPECT_THROW(embedding_table(model, EmbeddingTable::Spatial), MissingTableError);
  EXPECT_THROW(parse_embedding_table("Ex"), ConfigError);
  mc.variant = ModelVariant::parse("no_Ep");
  EXPECT_THROW(embedding_table(Model(mc, 1), EmbeddingTable::DayOfWeek), MissingTableError);
}

TEST(ShuffleProbeTest, PermutationsAreValidAndSeeded) {
  const auto a = random_permutations(12, 10, 3);
  EXPECT_EQ(a.size(), 10u);
  for (const auto& p : a) {
    std::vector<std::size_t> sorted = p;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(sorted[i], i);
  }
  EXPECT_EQ(a, random_permutations(12, 10, 3));
  EXPECT_NE(a, random_permutations(12, 10, 4));
}

TEST(ShuffleProbeTest, IdentityAndEmptyPermutationSets) {
  const DataBundle data = small_data();
  ModelConfig ea = small_model(), es = small_model("Es");
  ea.nodes = es.nodes = 3;
  Model a(ea, 1), s(es, 2);
  EvalOptions opts;
  EXPECT_THROW(shuffle_probe(a, s, data.test, {}, opts), ContractError);
  a.set_trained(true);
  s.set_trained(true);

  const ShuffleReport id = shuffle_probe(a, s, data.test, {{0, 1, 2, 3}}, opts);
  EXPECT_EQ(id.adaptive.delta, 0.0);
  EXPECT_EQ(id.spatial.delta, 0.0);

  const ShuffleReport none = shuffle_probe(a, s, data.test, {}, opts);
  EXPECT_EQ(none.adaptive.mae_intact, evaluate(a, data.test, opts).average.mae);
  EXPECT_EQ(none.spatial.mae_intact, evaluate(s, data.test, opts).average.mae);
  EXPECT_EQ(none.adaptive.delta, 0.0);

  const ShuffleReport real = shuffle_probe(a, s, data.test, random_permutations(4, 3, 1), opts);
  EXPECT_EQ(real.adaptive.mae_shuffled.size(), 3u);
  double mean_delta = 0.0;
  for (double m : real.adaptive.mae_shuffled) mean_delta += (m - real.adaptive.mae_intact) / real.adaptive.mae_intact;
  EXPECT_NEAR(real.adaptive.delta, mean_delta / 3.0, 1e-15);
  EXPECT_NE(shuffle_csv(real).find("Ea/Es,ratio"), std::string::npos);

  EXPECT_THROW(shuffle_probe(s, a, data.test, {}, opts), ConfigError);
}

TEST(Ablation, SingleRowMatchesDirectRun) {
  const DataBundle data = small_data();
  const TrainConfig cfg = short_run();
  const auto rows = run_ablation(data, small_model(), cfg, {"full"});
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_TRUE(rows[0].ok) << rows[0].error;
  const RunOutcome direct = train_and_evaluate(data, small_model(), cfg);
  EXPECT_EQ(rows[0].test.mae, direct.test.average.mae);
  EXPECT_EQ(rows[0].test.rmse, direct.test.average.rmse);
  EXPECT_EQ(rows[0].parameters, direct.model.parameter_count());
  EXPECT_EQ(rows[0].best_epoch, direct.result.best_epoch);
}

TEST(Ablation, FailingVariantIsIsolated) {
  const DataBundle data = small_data();
  const auto rows = run_ablation(data, small_model(), short_run(), {"no_Bogus", "no_STTrans"});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].ok);
  EXPECT_NE(rows[0].error.find("no_Bogus"), std::string::npos);
  EXPECT_TRUE(rows[1].ok);
  const std::string csv = ablation_csv(rows);
  EXPECT_NE(csv.find("no_Bogus,error:"), std::string::npos);
  EXPECT_EQ(csv, ablation_csv(run_ablation(data, small_model(), short_run(), {"no_Bogus", "no_STTrans"})));
}

TEST(GradCheckPreset, TinyPresetMatchesSpecShape) {
  const ModelConfig c = tiny_preset();
  EXPECT_EQ(c.frames, 4u);
  EXPECT_EQ(c.horizon, 4u);
  EXPECT_EQ(c.nodes, 3u);
  EXPECT_EQ(c.heads, 2u);
  EXPECT_EQ(c.layers, 1u);
  EXPECT_EQ(c.variant, ModelVariant{});
  const GradCheckReport r = check_model_gradients(c, 1, 3);
  EXPECT_TRUE(r.passed());
  const std::string csv = grad_check_csv(r);
  EXPECT_EQ(csv.find("FAIL"), std::string::npos);
  EXPECT_THROW(check_model_gradients(c, 0, 3), ConfigError);
}
