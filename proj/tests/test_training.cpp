#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "psam/errors.hpp"
#include "psam/training.hpp"

namespace psam {
namespace {

namespace fs = std::filesystem;

Dataset tiny_dataset(int n, std::uint64_t seed) {
  GeneratorConfig g;
  g.height = g.width = 16;
  g.annotators = 2;
  Dataset ds;
  for (int i = 0; i < n; ++i) ds.samples.push_back(generate_sample(g, seed, i));
  return ds;
}

TrainConfig short_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 2;
  c.lr = 1e-3;
  c.seed = 4;
  return c;
}

double l2(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.beta = -1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.checkpoint_every = 5;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = short_config(7);
  c.mode = TrainMode::dropout;
  c.freeze_decoder = true;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(c).dump());
  EXPECT_THROW(parse_train_mode("mcmc"), ValidationError);
}

TEST(Fit, RejectsZeroSteps) {
  EXPECT_THROW(fit(init_params(ModelConfig::tiny(), 0), tiny_dataset(2, 1), nullptr, short_config(0)),
               ValidationError);
}

TEST(Fit, DeterministicForFixedSeed) {
  const Dataset ds = tiny_dataset(3, 1);
  const ModelParams init = init_params(ModelConfig::tiny(), 0);
  const TrainResult a = fit(init, ds, nullptr, short_config(3));
  const TrainResult b = fit(init, ds, nullptr, short_config(3));
  EXPECT_TRUE(a.params == b.params);
  ASSERT_EQ(a.history.steps.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.history.steps[i].loss.total, b.history.steps[i].loss.total);
  EXPECT_FALSE(a.params == init);
}

TEST(Fit, FreezeDecoderKeepsDecoderBitIdentical) {
  const ModelParams init = init_params(ModelConfig::tiny(), 0);
  TrainConfig c = short_config(2);
  c.freeze_decoder = true;
  const TrainResult r = fit(init, tiny_dataset(2, 1), nullptr, c);
  bool other_changed = false;
  for (const auto& [name, t] : init.tensors) {
    if (ModelParams::is_decoder(name))
      EXPECT_EQ(r.params.at(name), t) << name;
    else
      other_changed |= !(r.params.at(name) == t);
  }
  EXPECT_TRUE(other_changed);
}

TEST(Fit, DropoutModeHasNoKlTerm) {
  TrainConfig c = short_config(2);
  c.mode = TrainMode::dropout;
  const TrainResult r = fit(init_params(ModelConfig::tiny(), 0), tiny_dataset(2, 1), nullptr, c);
  for (const StepRecord& s : r.history.steps) {
    EXPECT_EQ(s.loss.kl, 0.0);
    EXPECT_EQ(s.loss.total, s.loss.recon);
  }
}

TEST(Fit, PeriodicValidationAndCheckpoints) {
  const fs::path dir = fs::temp_directory_path() / "psam_fit_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  TrainConfig c = short_config(4);
  c.eval_every = 2;
  c.eval_samples = 2;
  c.checkpoint_every = 2;
  c.checkpoint_dir = dir;
  const Dataset ds = tiny_dataset(2, 1), val = tiny_dataset(2, 9);
  int calls = 0;
  const TrainResult r = fit(init_params(ModelConfig::tiny(), 0), ds, &val, c, [&](const StepRecord&) { ++calls; });
  EXPECT_EQ(calls, 4);
  ASSERT_EQ(r.history.evals.size(), 2u);
  EXPECT_EQ(r.history.evals[1].step, 4);
  EXPECT_TRUE(fs::exists(dir / "step_2.ckpt"));
  EXPECT_TRUE(load_checkpoint(dir / "step_4.ckpt") == r.params);
  fs::remove_all(dir);
}

TEST(History, SmoothedTotalAndCsv) {
  TrainHistory h;
  for (int s = 1; s <= 4; ++s) {
    StepRecord r;
    r.step = s;
    r.loss.total = s;
    h.steps.push_back(r);
  }
  EXPECT_DOUBLE_EQ(h.smoothed_total(4, 2), 3.5);
  EXPECT_DOUBLE_EQ(h.smoothed_total(2, 50), 1.5);
  EXPECT_THROW(h.smoothed_total(5), ValidationError);

  const fs::path path = fs::temp_directory_path() / "psam_history.csv";
  write_history_csv(h, path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "step,bce,dice,kl,total");
  int lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 4);
  fs::remove(path);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias correction makes the first update lr * sign(g) for any nonzero gradient.
  std::map<std::string, Tensor> p{{"w", Tensor({3}, {1.0, 2.0, 3.0})}};
  const std::map<std::string, Tensor> g{{"w", Tensor({3}, {0.5, -4.0, 1e-3})}};
  Adam adam(0.1, 0.9, 0.999, 1e-12);
  adam.step(p, g);
  EXPECT_NEAR(p["w"][0], 0.9, 1e-9);
  EXPECT_NEAR(p["w"][1], 2.1, 1e-9);
  EXPECT_NEAR(p["w"][2], 2.9, 1e-6);
  EXPECT_EQ(adam.steps_taken(), 1);
}

TEST(Adam, MinimizesAQuadratic) {
  std::map<std::string, Tensor> p{{"w", Tensor({2}, {3.0, -2.0})}};
  Adam adam(0.05, 0.9, 0.999, 1e-8);
  for (int i = 0; i < 2000; ++i) {
    const std::map<std::string, Tensor> g{{"w", Tensor({2}, {2.0 * p["w"][0], 2.0 * p["w"][1]})}};
    adam.step(p, g);
  }
  EXPECT_NEAR(p["w"][0], 0.0, 1e-2);
  EXPECT_NEAR(p["w"][1], 0.0, 1e-2);
}

TEST(LossGradients, PriorIsDrivenOnlyByKl) {
  const ModelParams params = gradcheck_model(0);
  const AnnotatedSample s = gradcheck_sample(0);
  const std::vector<double> noise{0.3, -0.7};
  const LossGradients off = loss_and_gradients(params, s, s.annotations[0], noise, 0.0);
  const LossGradients on = loss_and_gradients(params, s, s.annotations[0], noise, 10.0);
  for (const char* name : {"prior.fc2.weight", "prior.fc2.bias"}) {
    const auto it = off.grads.find(name);
    if (it != off.grads.end()) EXPECT_EQ(l2(it->second), 0.0) << name;
    EXPECT_GT(l2(on.grads.at(name)), 0.0) << name;
  }
  EXPECT_GT(l2(off.grads.at("posterior.fc2.weight")), 0.0);
  EXPECT_GT(l2(off.grads.at("projector.fc1.weight")), 0.0);
}

TEST(LossGradients, ValueMatchesLossValue) {
  const ModelParams params = gradcheck_model(1);
  const AnnotatedSample s = gradcheck_sample(1);
  const std::vector<double> noise{0.1, 0.2};
  EXPECT_DOUBLE_EQ(loss_and_gradients(params, s, s.annotations[1], noise, 10.0).loss.total,
                   loss_value(params, s, s.annotations[1], noise, 10.0));
}

TEST(GradCheck, TinyModelAgreesWithFiniteDifferences) {
  const GradCheckResult r = grad_check(gradcheck_model(0), gradcheck_sample(0), {});
  EXPECT_LT(r.max_rel_error, kGradCheckThreshold) << r.worst_tensor;
  EXPECT_EQ(r.checked, gradcheck_model(0).parameter_count());
  EXPECT_EQ(r.per_tensor.size(), gradcheck_model(0).tensors.size());
}

TEST(GradCheck, CorruptedDiceGradientIsDetected) {
  GradCheckOptions opts;
  opts.loss.corrupt_dice_gradient = true;
  const GradCheckResult r = grad_check(gradcheck_model(0), gradcheck_sample(0), opts);
  EXPECT_GT(r.max_rel_error, kGradCheckThreshold);
}

TEST(GradCheck, SinglePrecisionModeUsesLooserThreshold) {
  GradCheckOptions opts;
  opts.single_precision = true;
  opts.step = kGradCheckStepSingle;
  const GradCheckResult r = grad_check(gradcheck_model(0), gradcheck_sample(0), opts);
  EXPECT_LT(r.max_rel_error, kGradCheckThresholdSingle) << r.worst_tensor;
}

TEST(GradCheck, RejectsBadOptions) {
  GradCheckOptions opts;
  opts.step = 0.0;
  EXPECT_THROW(grad_check(gradcheck_model(0), gradcheck_sample(0), opts), ValidationError);
  opts = GradCheckOptions{};
  opts.annotator = 5;
  EXPECT_THROW(grad_check(gradcheck_model(0), gradcheck_sample(0), opts), ValidationError);
}

}  // namespace
}  // namespace psam
