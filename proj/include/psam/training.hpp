#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "psam/data.hpp"
#include "psam/losses.hpp"
#include "psam/metrics.hpp"
#include "psam/model.hpp"

namespace psam {

enum class TrainMode {
  probabilistic,  // posterior sample, recon + beta * KL
  dropout,        // baseline: z at the prior mean, dropout on, recon only
};
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
  double beta = kDefaultBeta;
  double lr = 1e-4;
  int steps = 1000;
  int batch_size = 16;
  std::uint64_t seed = 0;
  bool freeze_decoder = false;
  int eval_every = 0;    // 0 disables validation during fit
  int eval_samples = 4;  // M for periodic validation
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  TrainMode mode = TrainMode::probabilistic;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepRecord {
  int step = 0;  // 1-based
  LossBreakdown loss;  // batch mean
};

struct EvalRecord {
  int step = 0;
  MetricAggregate metrics;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // Mean total loss over the `window` steps ending at `step` (1-based).
  double smoothed_total(int step, int window = 50) const;
};

// Header "step,bce,dice,kl,total", one line per step.
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);

// First-order adaptive optimizer (Adam) over named tensors.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads);
  int steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

// Each step draws a batch with replacement; per example one annotator mask uniformly at random and
// fresh standard-normal noise. Throws NumericError naming the step and loss component on NaN / Inf.
TrainResult fit(ModelParams params, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                const StepCallback& on_step = {});

// Loss and parameter gradients for one example.
struct LossGradients {
  LossBreakdown loss;
  std::map<std::string, Tensor> grads;
};
LossGradients loss_and_gradients(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt,
                                 std::span<const double> noise, double beta, const LossOptions& opts = {});
double loss_value(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt,
                  std::span<const double> noise, double beta, const LossOptions& opts = {});

struct GradCheckOptions {
  double step = 1e-3;
  double beta = kDefaultBeta;
  int annotator = 0;
  std::uint64_t noise_seed = 7;
  // Round every loss evaluation to float before differencing (emulates a single-precision check).
  bool single_precision = false;
  // Denominator floor for relative errors.
  double abs_floor = 1e-6;
  LossOptions loss;
};

struct GradCheckResult {
  // Max over tensors of |a - n|_2 / max(|a|_2, |n|_2, abs_floor).
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::map<std::string, double> per_tensor;
  // Diagnostic: the largest single-element |a - n| / max(|a|, |n|, abs_floor).
  double max_element_rel_error = 0.0;
  std::string worst_element_tensor;
  std::size_t worst_element_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central differences over every element of every trainable tensor.
GradCheckResult grad_check(const ModelParams& params, const AnnotatedSample& sample, const GradCheckOptions& opts);

// Tiny model with the projector output layer re-drawn from N(0, 0.3^2), so the reconstruction gradient
// reaches the posterior and projector; the zero-initialized layer would block it.
ModelParams gradcheck_model(std::uint64_t seed);
// A 16x16 synthetic sample with two annotators and no misses.
AnnotatedSample gradcheck_sample(std::uint64_t seed);

inline constexpr double kGradCheckThreshold = 1e-4;
inline constexpr double kGradCheckThresholdSingle = 5e-2;
inline constexpr double kGradCheckStepSingle = 1e-2;

}  // namespace psam
