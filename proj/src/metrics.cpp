#include "psam/metrics.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "psam/errors.hpp"

namespace psam {

using nlohmann::json;

namespace {

struct Overlap {
  std::size_t inter = 0;
  std::size_t a = 0;
  std::size_t b = 0;
};

Overlap overlap(const BinaryMask& a, const BinaryMask& b) {
  if (!same_extent(a, b))
    throw DimensionError("mask extents differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
  Overlap o;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool x = a.values[i] != 0, y = b.values[i] != 0;
    o.inter += x && y;
    o.a += x;
    o.b += y;
  }
  return o;
}

double mean_distance(std::span<const BinaryMask> xs, std::span<const BinaryMask> ys) {
  double acc = 0.0;
  for (const BinaryMask& x : xs)
    for (const BinaryMask& y : ys) acc += mask_distance(x, y);
  return acc / (static_cast<double>(xs.size()) * static_cast<double>(ys.size()));
}

std::mt19937_64 sample_stream(std::uint64_t seed, int id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), 0x5eedu};
  return std::mt19937_64(seq);
}

json metrics_json(const SampleMetrics& m) {
  return json{{"id", m.id}, {"ged2", m.ged2}, {"dsc", m.dsc}, {"iou", m.iou}, {"diversity", m.diversity}};
}

json aggregate_json(const MetricAggregate& a) {
  return json{{"ged2", a.ged2}, {"dsc", a.dsc}, {"iou", a.iou}, {"diversity", a.diversity}};
}

json ttest_json(const TTest& t) { return json{{"t_stat", t.t}, {"p_value", t.p}}; }

std::vector<SampleMetrics> evaluate_rows(const ModelParams& params, const Dataset& ds, int m, SamplingMode mode,
                                         std::uint64_t seed) {
  std::vector<SampleMetrics> rows;
  rows.reserve(ds.samples.size());
  for (const AnnotatedSample& s : ds.samples) {
    const std::vector<BinaryMask> draws = draw_masks(params, s, m, mode, seed);
    const BinaryMask central = predict_at_prior_mean(params, s.image, s.box);
    SampleMetrics row;
    row.id = s.id;
    row.ged2 = ged_squared(draws, s.annotations);
    row.diversity = mean_pairwise_distance(draws);
    for (const BinaryMask& gt : s.annotations) {
      row.dsc += dsc(central, gt);
      row.iou += iou(central, gt);
    }
    row.dsc /= static_cast<double>(s.annotations.size());
    row.iou /= static_cast<double>(s.annotations.size());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
  const Overlap o = overlap(a, b);
  const std::size_t uni = o.a + o.b - o.inter;
  return uni == 0 ? 1.0 : static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dsc(const BinaryMask& a, const BinaryMask& b) {
  const Overlap o = overlap(a, b);
  const std::size_t total = o.a + o.b;
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(o.inter) / static_cast<double>(total);
}

double mask_distance(const BinaryMask& a, const BinaryMask& b) { return 1.0 - iou(a, b); }

double ged_squared(std::span<const BinaryMask> samples, std::span<const BinaryMask> gts) {
  if (samples.empty() || gts.empty()) throw ValidationError("ged_squared: sample and annotation sets must be non-empty");
  return 2.0 * mean_distance(samples, gts) - mean_distance(samples, samples) - mean_distance(gts, gts);
}

double mean_pairwise_distance(std::span<const BinaryMask> masks) {
  if (masks.size() < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i)
    for (std::size_t j = 0; j < masks.size(); ++j)
      if (i != j) acc += mask_distance(masks[i], masks[j]);
  return acc / static_cast<double>(masks.size() * (masks.size() - 1));
}

double student_t_upper_tail(double t, int dof) {
  if (dof < 1) throw ValidationError("student_t_upper_tail: degrees of freedom must be >= 1");
  if (std::isnan(t)) throw NumericError("student_t_upper_tail: t is NaN");
  if (t == 0.0) return 0.5;
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  const double nu = dof;
  const double log_norm = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi);
  auto density = [&](double x) { return std::exp(log_norm - 0.5 * (nu + 1.0) * std::log1p(x * x / nu)); };
  using Quadrature = boost::math::quadrature::gauss_kronrod<double, 61>;
  const double tail = Quadrature::integrate(density, std::abs(t), std::numeric_limits<double>::infinity(), 15, 1e-13);
  return t > 0 ? tail : 1.0 - tail;
}

TTest paired_t_one_tailed(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("paired_t_one_tailed: lists differ in length");
  if (a.size() < 2) throw ValidationError("paired_t_one_tailed: need at least 2 pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  TTest out;
  if (sd == 0.0) {
    // Constant differences: symmetric null when all zero, otherwise an infinite statistic.
    out.t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
  } else {
    out.t = mean / (sd / std::sqrt(n));
  }
  out.p = student_t_upper_tail(out.t, static_cast<int>(a.size()) - 1);
  return out;
}

std::string to_string(SamplingMode m) {
  switch (m) {
    case SamplingMode::prior: return "prior";
    case SamplingMode::prior_mean: return "prior_mean";
    case SamplingMode::dropout: return "dropout";
  }
  return "?";
}

SamplingMode parse_sampling_mode(const std::string& s) {
  if (s == "prior") return SamplingMode::prior;
  if (s == "prior_mean") return SamplingMode::prior_mean;
  if (s == "dropout") return SamplingMode::dropout;
  throw ValidationError("unknown sampling mode '" + s + "' (expected prior, prior_mean or dropout)");
}

MetricAggregate aggregate(std::span<const SampleMetrics> rows) {
  MetricAggregate a;
  if (rows.empty()) return a;
  for (const SampleMetrics& r : rows) {
    a.ged2 += r.ged2;
    a.dsc += r.dsc;
    a.iou += r.iou;
    a.diversity += r.diversity;
  }
  const auto n = static_cast<double>(rows.size());
  a.ged2 /= n;
  a.dsc /= n;
  a.iou /= n;
  a.diversity /= n;
  return a;
}

json to_json(const MetricsReport& r) {
  json rows = json::array();
  for (const SampleMetrics& m : r.samples) rows.push_back(metrics_json(m));
  json out{{"M", r.M}, {"seed", r.seed}, {"mode", r.mode}, {"samples", rows}, {"aggregate", aggregate_json(r.aggregate)}};
  if (r.comparison) {
    const Comparison& c = *r.comparison;
    json base_rows = json::array();
    for (const SampleMetrics& m : c.baseline_samples) base_rows.push_back(metrics_json(m));
    out["comparison"] = json{{"baseline_name", c.baseline_name},
                             {"baseline_mode", c.baseline_mode},
                             {"baseline_aggregate", aggregate_json(c.baseline_aggregate)},
                             {"baseline_samples", base_rows},
                             {"ged2", ttest_json(c.ged2)},
                             {"dsc", ttest_json(c.dsc)},
                             {"iou", ttest_json(c.iou)}};
  }
  return out;
}

std::vector<BinaryMask> draw_masks(const ModelParams& params, const AnnotatedSample& sample, int count,
                                   SamplingMode mode, std::uint64_t seed) {
  std::mt19937_64 rng = sample_stream(seed, sample.id);
  switch (mode) {
    case SamplingMode::prior: return forward_sample(params, sample.image, sample.box, count, rng);
    case SamplingMode::dropout: return forward_sample_dropout(params, sample.image, sample.box, count, rng);
    case SamplingMode::prior_mean: {
      if (count < 1) throw ValidationError("draw_masks: sample count must be >= 1");
      return std::vector<BinaryMask>(static_cast<std::size_t>(count),
                                     predict_at_prior_mean(params, sample.image, sample.box));
    }
  }
  return {};
}

MetricsReport evaluate(const ModelParams& params, const Dataset& ds, const EvalOptions& opts,
                       const std::optional<Baseline>& baseline) {
  if (opts.samples_per_image < 2) throw ValidationError("evaluate: M must be >= 2 for GED");
  ds.validate();
  MetricsReport report;
  report.M = opts.samples_per_image;
  report.seed = opts.seed;
  report.mode = to_string(opts.mode);
  report.samples = evaluate_rows(params, ds, opts.samples_per_image, opts.mode, opts.seed);
  report.aggregate = aggregate(report.samples);
  if (baseline) {
    if (!baseline->params) throw ValidationError("evaluate: baseline has no parameters");
    Comparison c;
    c.baseline_name = baseline->name;
    c.baseline_mode = to_string(baseline->mode);
    c.baseline_samples = evaluate_rows(*baseline->params, ds, opts.samples_per_image, baseline->mode, opts.seed);
    c.baseline_aggregate = aggregate(c.baseline_samples);
    std::vector<double> mg, md, mi, bg, bd, bi;
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
      mg.push_back(report.samples[i].ged2);
      md.push_back(report.samples[i].dsc);
      mi.push_back(report.samples[i].iou);
      bg.push_back(c.baseline_samples[i].ged2);
      bd.push_back(c.baseline_samples[i].dsc);
      bi.push_back(c.baseline_samples[i].iou);
    }
    if (report.samples.size() >= 2) {
      c.ged2 = paired_t_one_tailed(bg, mg);
      c.dsc = paired_t_one_tailed(md, bd);
      c.iou = paired_t_one_tailed(mi, bi);
    }
    report.comparison = std::move(c);
  }
  return report;
}

}  // namespace psam
