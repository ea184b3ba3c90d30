#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "psam/data.hpp"
#include "psam/grid.hpp"
#include "psam/model.hpp"

namespace psam {

// |a ∩ b| / |a ∪ b|, with iou(∅, ∅) = 1.
double iou(const BinaryMask& a, const BinaryMask& b);
// 2|a ∩ b| / (|a| + |b|), with dsc(∅, ∅) = 1.
double dsc(const BinaryMask& a, const BinaryMask& b);
// 1 - iou
double mask_distance(const BinaryMask& a, const BinaryMask& b);

// Squared generalized energy distance 2E[d(s,y)] - E[d(s,s')] - E[d(y,y')], d = 1 - IoU.
// Every expectation runs over all ordered pairs, identical indices included.
double ged_squared(std::span<const BinaryMask> samples, std::span<const BinaryMask> gts);

// Mean of d over ordered pairs i != j; 0 for a single mask.
double mean_pairwise_distance(std::span<const BinaryMask> masks);

struct TTest {
  double t = 0.0;
  double p = 0.5;
};

// Upper tail P(T > t) of Student's t with `dof` degrees of freedom, by adaptive quadrature of the density.
double student_t_upper_tail(double t, int dof);

// d_i = a_i - b_i; t = mean(d) / (sd(d) / sqrt(n)); p = P(T_{n-1} > t).
TTest paired_t_one_tailed(std::span<const double> a, std::span<const double> b);

enum class SamplingMode {
  prior,       // z ~ prior, no dropout
  prior_mean,  // z = prior mean, no dropout (deterministic)
  dropout,     // z = prior mean, dropout active per draw
};
std::string to_string(SamplingMode m);
SamplingMode parse_sampling_mode(const std::string& s);

struct SampleMetrics {
  int id = 0;
  double ged2 = 0.0;
  double dsc = 0.0;
  double iou = 0.0;
  double diversity = 0.0;  // mean pairwise d between the M samples
};

struct MetricAggregate {
  double ged2 = 0.0;
  double dsc = 0.0;
  double iou = 0.0;
  double diversity = 0.0;
};

// Positive t means the evaluated model beats the baseline (lower GED², higher DSC / IoU).
struct Comparison {
  std::string baseline_name;
  std::string baseline_mode;
  MetricAggregate baseline_aggregate;
  std::vector<SampleMetrics> baseline_samples;
  TTest ged2;
  TTest dsc;
  TTest iou;
};

struct MetricsReport {
  int M = 0;
  std::uint64_t seed = 0;
  std::string mode;
  std::vector<SampleMetrics> samples;
  MetricAggregate aggregate;
  std::optional<Comparison> comparison;
};

MetricAggregate aggregate(std::span<const SampleMetrics> rows);

nlohmann::json to_json(const MetricsReport& report);

struct EvalOptions {
  int samples_per_image = 16;
  std::uint64_t seed = 0;
  SamplingMode mode = SamplingMode::prior;
};

struct Baseline {
  std::string name;
  const ModelParams* params = nullptr;
  SamplingMode mode = SamplingMode::dropout;
};

// Per sample: M masks drawn in `mode`, GED² against the annotations, and DSC / IoU of the
// prior-mean prediction averaged over annotators. With a baseline, paired one-tailed t-tests.
MetricsReport evaluate(const ModelParams& params, const Dataset& ds, const EvalOptions& opts,
                       const std::optional<Baseline>& baseline = std::nullopt);

// The M masks evaluate() draws for one sample.
std::vector<BinaryMask> draw_masks(const ModelParams& params, const AnnotatedSample& sample, int count,
                                   SamplingMode mode, std::uint64_t seed);

}  // namespace psam
