#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "psam/errors.hpp"
#include "psam/metrics.hpp"
#include "psam/model.hpp"

namespace psam {
namespace {

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double density) {
  std::bernoulli_distribution on(density);
  BinaryMask m(h, w);
  for (auto& v : m.values) v = on(rng);
  return m;
}

// Written independently of the library: explicit counts and a flat all-pairs loop.
double brute_distance(const BinaryMask& a, const BinaryMask& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += a.values[i] && b.values[i];
    uni += a.values[i] || b.values[i];
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / uni;
}

double brute_ged(const std::vector<BinaryMask>& s, const std::vector<BinaryMask>& y) {
  double sy = 0.0, ss = 0.0, yy = 0.0;
  for (const auto& a : s)
    for (const auto& b : y) sy += brute_distance(a, b);
  for (const auto& a : s)
    for (const auto& b : s) ss += brute_distance(a, b);
  for (const auto& a : y)
    for (const auto& b : y) yy += brute_distance(a, b);
  const double ns = s.size(), ny = y.size();
  return 2.0 * sy / (ns * ny) - ss / (ns * ns) - yy / (ny * ny);
}

TEST(Overlap, EmptyConventions) {
  const BinaryMask empty(3, 3);
  EXPECT_EQ(iou(empty, empty), 1.0);
  EXPECT_EQ(dsc(empty, empty), 1.0);
  EXPECT_EQ(mask_distance(empty, empty), 0.0);
  BinaryMask one(3, 3);
  one.values[4] = 1;
  EXPECT_EQ(iou(empty, one), 0.0);
  EXPECT_EQ(dsc(one, empty), 0.0);
}

TEST(Overlap, Examples) {
  BinaryMask a(1, 4), b(1, 4);
  a.values = {1, 1, 0, 0};
  b.values = {0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(dsc(a, b), 0.5);
  EXPECT_THROW(iou(a, BinaryMask(2, 2)), DimensionError);
}

TEST(Overlap, DistanceIsAMetricLikeQuantity) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const BinaryMask a = random_mask(rng, 4, 5, 0.3), b = random_mask(rng, 4, 5, 0.3);
    const double d = mask_distance(a, b);
    EXPECT_EQ(d, mask_distance(b, a));
    EXPECT_EQ(mask_distance(a, a), 0.0);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
    const double j = iou(a, b);
    EXPECT_NEAR(dsc(a, b), 2.0 * j / (1.0 + j), 1e-12);
  }
}

TEST(GedSquared, MatchesBruteForce) {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<int> count(1, 4);
  std::uniform_real_distribution<double> density(0.0, 0.6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<BinaryMask> s(count(rng)), y(count(rng));
    for (auto& m : s) m = random_mask(rng, 5, 4, density(rng));
    for (auto& m : y) m = random_mask(rng, 5, 4, density(rng));
    EXPECT_NEAR(ged_squared(s, y), brute_ged(s, y), 1e-12);
  }
}

TEST(GedSquared, ZeroOnIdenticalMultisets) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<BinaryMask> s;
    for (int i = 0; i < 3; ++i) s.push_back(random_mask(rng, 4, 4, 0.4));
    std::vector<BinaryMask> y{s[2], s[0], s[1]};
    EXPECT_NEAR(ged_squared(s, y), 0.0, 1e-12);
  }
  const std::vector<BinaryMask> same(4, random_mask(rng, 4, 4, 0.5));
  EXPECT_EQ(ged_squared(same, same), 0.0);
}

TEST(GedSquared, RejectsEmptySets) {
  const std::vector<BinaryMask> one{BinaryMask(2, 2)};
  EXPECT_THROW(ged_squared({}, one), ValidationError);
  EXPECT_THROW(ged_squared(one, {}), ValidationError);
}

TEST(MeanPairwiseDistance, ExcludesDiagonal) {
  BinaryMask a(1, 2), b(1, 2);
  a.values = {1, 0};
  b.values = {0, 1};
  const std::vector<BinaryMask> two{a, b};
  EXPECT_EQ(mean_pairwise_distance(two), 1.0);
  EXPECT_EQ(mean_pairwise_distance(std::vector<BinaryMask>{a}), 0.0);
}

TEST(StudentT, ClosedFormTails) {
  for (double t : {0.1, 0.7, 1.5, 3.4641016, 8.0}) {
    // df = 1 is Cauchy; df = 2 has the algebraic tail 1/2 - t / (2 sqrt(t^2 + 2)).
    EXPECT_NEAR(student_t_upper_tail(t, 1), 0.5 - std::atan(t) / std::numbers::pi, 1e-10);
    EXPECT_NEAR(student_t_upper_tail(t, 2), 0.5 - t / (2.0 * std::sqrt(t * t + 2.0)), 1e-10);
    EXPECT_NEAR(student_t_upper_tail(-t, 2), 1.0 - student_t_upper_tail(t, 2), 1e-12);
  }
  EXPECT_EQ(student_t_upper_tail(0.0, 5), 0.5);
  EXPECT_THROW(student_t_upper_tail(1.0, 0), ValidationError);
}

TEST(StudentT, MonotoneInT) {
  for (int dof : {1, 2, 5, 30}) {
    double prev = 1.0;
    for (double t = -6.0; t <= 6.0; t += 0.25) {
      const double p = student_t_upper_tail(t, dof);
      EXPECT_LT(p, prev);
      prev = p;
    }
  }
}

TEST(PairedT, ReferenceValues) {
  const std::vector<double> a{1.0, 2.0, 3.0}, zero{0.0, 0.0, 0.0};
  const TTest r = paired_t_one_tailed(a, zero);
  EXPECT_NEAR(r.t, 2.0 * std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(r.t, 3.4641, 1e-3);
  EXPECT_NEAR(r.p, 0.0371, 1e-3);
  EXPECT_EQ(paired_t_one_tailed(a, a).p, 0.5);
}

TEST(PairedT, Errors) {
  const std::vector<double> a{1.0, 2.0}, b{1.0};
  EXPECT_THROW(paired_t_one_tailed(a, b), DimensionError);
  EXPECT_THROW(paired_t_one_tailed(b, b), ValidationError);
}

TEST(SamplingMode, RoundTrip) {
  for (SamplingMode m : {SamplingMode::prior, SamplingMode::prior_mean, SamplingMode::dropout})
    EXPECT_EQ(parse_sampling_mode(to_string(m)), m);
  EXPECT_THROW(parse_sampling_mode("mc"), ValidationError);
}

class Evaluate : public ::testing::Test {
 protected:
  void SetUp() override {
    const ModelConfig cfg = ModelConfig::tiny();
    params_ = init_params(cfg, 3);
    GeneratorConfig gc;
    gc.n_samples = 4;
    gc.height = cfg.height;
    gc.width = cfg.width;
    for (int i = 0; i < gc.n_samples; ++i) ds_.samples.push_back(generate_sample(gc, 5, i));
  }
  ModelParams params_;
  Dataset ds_;
};

TEST_F(Evaluate, OneRowPerSampleAndDeterministic) {
  EvalOptions opts;
  opts.samples_per_image = 3;
  opts.seed = 9;
  const MetricsReport a = evaluate(params_, ds_, opts), b = evaluate(params_, ds_, opts);
  ASSERT_EQ(a.samples.size(), ds_.samples.size());
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.M, 3);
  for (const SampleMetrics& r : a.samples) {
    EXPECT_GE(r.ged2, -1e-12);
    EXPECT_GE(r.dsc, 0.0);
    EXPECT_LE(r.iou, 1.0);
  }
}

TEST_F(Evaluate, RejectsSingleSample) {
  EvalOptions opts;
  opts.samples_per_image = 1;
  EXPECT_THROW(evaluate(params_, ds_, opts), ValidationError);
}

TEST_F(Evaluate, BaselineComparisonAgainstItselfIsNeutral) {
  EvalOptions opts;
  opts.samples_per_image = 2;
  opts.mode = SamplingMode::prior_mean;
  const MetricsReport r = evaluate(params_, ds_, opts, Baseline{"self", &params_, SamplingMode::prior_mean});
  ASSERT_TRUE(r.comparison.has_value());
  EXPECT_EQ(r.comparison->ged2.p, 0.5);
  const nlohmann::json j = to_json(r);
  for (const char* key : {"M", "seed", "samples", "aggregate", "comparison"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["comparison"]["ged2"].contains("p_value"));
  EXPECT_TRUE(j["comparison"]["ged2"].contains("t_stat"));
  EXPECT_TRUE(j["samples"][0].contains("ged2"));
}

TEST_F(Evaluate, PriorMeanDrawsAreIdentical) {
  const auto masks = draw_masks(params_, ds_.samples[0], 4, SamplingMode::prior_mean, 1);
  ASSERT_EQ(masks.size(), 4u);
  EXPECT_EQ(mean_pairwise_distance(masks), 0.0);
}

}  // namespace
}  // namespace psam
