#include "psam/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "psam/errors.hpp"

namespace psam {

using nlohmann::json;

std::string to_string(TrainMode m) { return m == TrainMode::probabilistic ? "probabilistic" : "dropout"; }

TrainMode parse_train_mode(const std::string& s) {
  if (s == "probabilistic") return TrainMode::probabilistic;
  if (s == "dropout") return TrainMode::dropout;
  throw ValidationError("unknown training mode '" + s + "' (expected probabilistic or dropout)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("train config: " + m); };
  if (!(beta >= 0.0)) fail("beta must be >= 0");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (steps < 1) fail("steps must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (eval_every < 0 || checkpoint_every < 0) fail("eval_every and checkpoint_every must be >= 0");
  if (eval_every > 0 && eval_samples < 2) fail("eval_samples must be >= 2");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) fail("checkpoint_every needs checkpoint_dir");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"beta", c.beta},
           {"lr", c.lr},
           {"steps", c.steps},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"freeze_decoder", c.freeze_decoder},
           {"eval_every", c.eval_every},
           {"eval_samples", c.eval_samples},
           {"checkpoint_every", c.checkpoint_every},
           {"checkpoint_dir", c.checkpoint_dir.string()},
           {"mode", to_string(c.mode)},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.beta = j.value("beta", d.beta);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.freeze_decoder = j.value("freeze_decoder", d.freeze_decoder);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", std::string{});
  c.mode = parse_train_mode(j.value("mode", to_string(d.mode)));
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
}

double TrainHistory::smoothed_total(int step, int window) const {
  if (step < 1 || step > static_cast<int>(steps.size()) || window < 1)
    throw ValidationError("smoothed_total: step " + std::to_string(step) + " outside history");
  const int first = std::max(1, step - window + 1);
  double acc = 0.0;
  for (int s = first; s <= step; ++s) acc += steps[static_cast<std::size_t>(s - 1)].loss.total;
  return acc / (step - first + 1);
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << "step,bce,dice,kl,total\n" << std::setprecision(17);
  for (const StepRecord& r : history.steps)
    os << r.step << ',' << r.loss.bce << ',' << r.loss.dice << ',' << r.loss.kl << ',' << r.loss.total << '\n';
  if (!os) throw IoError(path.string() + ": write failed");
}

void Adam::step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mi, fresh_m] = m_.try_emplace(name, Tensor(g.shape()));
    auto [vi, fresh_v] = v_.try_emplace(name, Tensor(g.shape()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

namespace {

void add_grads(std::map<std::string, Tensor>& acc, const ad::Tape& tape, const BoundParams& bound, double weight) {
  for (const auto& [name, var] : bound.vars()) {
    const Tensor* g = tape.grad_if(var);
    if (!g) continue;
    auto [it, fresh] = acc.try_emplace(name, Tensor(g->shape()));
    Tensor& dst = it->second;
    for (std::size_t i = 0; i < g->size(); ++i) dst[i] += weight * (*g)[i];
  }
}

void check_finite(const LossBreakdown& l, int step, int sample_id) {
  const std::pair<const char*, double> parts[] = {{"bce", l.bce}, {"dice", l.dice}, {"kl", l.kl}, {"total", l.total}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v))
      throw NumericError("non-finite " + std::string(name) + " loss at step " + std::to_string(step) + " (sample " +
                         std::to_string(sample_id) + ")");
}

std::vector<double> standard_normal(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace

LossGradients loss_and_gradients(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt,
                                 std::span<const double> noise, double beta, const LossOptions& opts) {
  ad::Tape tape;
  BoundParams bound(tape, params, true);
  const GraphOutputs g = build_train_graph(bound, sample, gt, noise);
  const LossTerms loss = total_loss(g.logits, gt, g.mu_q, g.log_var_q, g.mu_p, g.log_var_p, beta, opts);
  tape.backward(loss.total);
  LossGradients out;
  out.loss = loss.values;
  add_grads(out.grads, tape, bound, 1.0);
  return out;
}

double loss_value(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt,
                  std::span<const double> noise, double beta, const LossOptions& opts) {
  ad::Tape tape(false);
  BoundParams bound(tape, params, false);
  const GraphOutputs g = build_train_graph(bound, sample, gt, noise);
  return total_loss(g.logits, gt, g.mu_q, g.log_var_q, g.mu_p, g.log_var_p, beta, opts).values.total;
}

TrainResult fit(ModelParams params, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                const StepCallback& on_step) {
  cfg.validate();
  train.validate();
  if (val && cfg.eval_every > 0) val->validate();
  if (!params.all_finite()) throw NumericError("fit: initial parameters are not finite");
  const bool freeze = cfg.freeze_decoder || params.config.freeze_decoder;

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.samples.size() - 1);
  Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  TrainResult result;
  result.history.steps.reserve(static_cast<std::size_t>(cfg.steps));
  const double weight = 1.0 / cfg.batch_size;

  for (int step = 1; step <= cfg.steps; ++step) {
    std::map<std::string, Tensor> grads;
    StepRecord rec;
    rec.step = step;
    rec.loss.beta = cfg.mode == TrainMode::probabilistic ? cfg.beta : 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const AnnotatedSample& s = train.samples[pick(rng)];
      std::uniform_int_distribution<std::size_t> annotator(0, s.annotations.size() - 1);
      const BinaryMask& gt = s.annotations[annotator(rng)];
      ad::Tape tape;
      BoundParams bound(tape, params, true, freeze);
      LossTerms loss;
      if (cfg.mode == TrainMode::probabilistic) {
        const std::vector<double> noise = standard_normal(rng, params.config.latent_dim);
        const GraphOutputs g = build_train_graph(bound, s, gt, noise);
        loss = total_loss(g.logits, gt, g.mu_q, g.log_var_q, g.mu_p, g.log_var_p, cfg.beta);
      } else {
        const GraphOutputs g = build_dropout_graph(bound, s, rng);
        loss = recon_loss(g.logits, gt);
      }
      check_finite(loss.values, step, s.id);
      tape.backward(loss.total);
      add_grads(grads, tape, bound, weight);
      rec.loss.bce += weight * loss.values.bce;
      rec.loss.dice += weight * loss.values.dice;
      rec.loss.kl += weight * loss.values.kl;
    }
    rec.loss.recon = rec.loss.bce + rec.loss.dice;
    rec.loss.total = rec.loss.recon + rec.loss.beta * rec.loss.kl;
    adam.step(params.tensors, grads);
    if (!params.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(step));
    result.history.steps.push_back(rec);
    if (on_step) on_step(rec);

    if (val && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      EvalOptions eo;
      eo.samples_per_image = cfg.eval_samples;
      eo.seed = cfg.seed;
      eo.mode = cfg.mode == TrainMode::probabilistic ? SamplingMode::prior : SamplingMode::dropout;
      result.history.evals.push_back({step, evaluate(params, *val, eo).aggregate});
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_checkpoint(params, cfg.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt"));
  }
  result.params = std::move(params);
  return result;
}

ModelParams gradcheck_model(std::uint64_t seed) {
  ModelParams p = init_params(ModelConfig::tiny(), seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (const char* name : {"projector.fc2.weight", "projector.fc2.bias"})
    for (double& v : p.tensors.at(name).values()) v = n(rng);
  return p;
}

AnnotatedSample gradcheck_sample(std::uint64_t seed) {
  GeneratorConfig g;
  g.height = g.width = 16;
  g.n_samples = 1;
  g.annotators = 2;
  g.p_miss = 0.0;
  return generate_sample(g, seed + 10, 0);
}

GradCheckResult grad_check(const ModelParams& params, const AnnotatedSample& sample, const GradCheckOptions& opts) {
  if (!(opts.step > 0.0)) throw ValidationError("grad_check: step must be > 0");
  if (opts.annotator < 0 || opts.annotator >= static_cast<int>(sample.annotations.size()))
    throw ValidationError("grad_check: annotator index out of range");
  const BinaryMask& gt = sample.annotations[static_cast<std::size_t>(opts.annotator)];
  std::mt19937_64 rng(opts.noise_seed);
  const std::vector<double> noise = standard_normal(rng, params.config.latent_dim);

  const LossGradients analytic = loss_and_gradients(params, sample, gt, noise, opts.beta, opts.loss);
  auto eval = [&](const ModelParams& p) {
    const double v = loss_value(p, sample, gt, noise, opts.beta, opts.loss);
    return opts.single_precision ? static_cast<double>(static_cast<float>(v)) : v;
  };

  ModelParams probe = params;
  GradCheckResult out;
  for (auto& [name, tensor] : probe.tensors) {
    if (params.config.freeze_decoder && ModelParams::is_decoder(name)) continue;
    auto g_it = analytic.grads.find(name);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + opts.step;
      const double up = eval(probe);
      tensor[i] = saved - opts.step;
      const double down = eval(probe);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = g_it == analytic.grads.end() ? 0.0 : g_it->second[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++out.checked;
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      if (rel > out.max_element_rel_error || out.worst_element_tensor.empty()) {
        out.max_element_rel_error = rel;
        out.worst_element_tensor = name;
        out.worst_element_index = i;
        out.worst_analytic = a;
        out.worst_numeric = numeric;
      }
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), opts.abs_floor});
    out.per_tensor[name] = rel;
    if (rel > out.max_rel_error || out.worst_tensor.empty()) {
      out.max_rel_error = rel;
      out.worst_tensor = name;
    }
  }
  return out;
}

}  // namespace psam
