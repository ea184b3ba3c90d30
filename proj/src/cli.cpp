#include "psam/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "psam/data.hpp"
#include "psam/errors.hpp"
#include "psam/figures.hpp"
#include "psam/image_io.hpp"
#include "psam/metrics.hpp"
#include "psam/model.hpp"
#include "psam/training.hpp"

namespace psam::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "JSON config file; command-line flags take precedence")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed (default: config 'seed', else 0)");
  CLI::Option* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw IoError(path + ": cannot open config");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ValidationError(path + ": config must be a JSON object");
  return j;
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

std::uint64_t resolve_seed(const Common& c, const json& cfg) {
  return c.seed ? *c.seed : cfg.value("seed", std::uint64_t{0});
}

template <typename T>
void override(T& field, const std::optional<T>& flag) {
  if (flag) field = *flag;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError(path.string() + ": write failed");
}

void write_resolved(const fs::path& dir, const std::string& command, json body) {
  body["command"] = command;
  write_json(dir / "config.json", body);
}

void write_mask(const fs::path& path, const BinaryMask& m) {
  png::GrayImage g;
  g.height = m.height;
  g.width = m.width;
  g.bit_depth = 8;
  g.samples.resize(m.values.size());
  std::transform(m.values.begin(), m.values.end(), g.samples.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
  png::write_gray(path, g);
}

Image read_image(const fs::path& path) {
  const png::GrayImage g = png::read_gray(path);
  const double top = g.bit_depth == 16 ? 65535.0 : 255.0;
  Image img(g.height, g.width);
  for (std::size_t i = 0; i < g.samples.size(); ++i) img.values[i] = g.samples[i] / top;
  return img;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// gen-data

struct GenDataFlags {
  Common common;
  std::optional<int> n, size, annotators, jitter;
  std::optional<double> p_miss, spread, noise;
};

int cmd_gen_data(const GenDataFlags& f, std::ostream& out) {
  const json cfg = load_config(f.common.config);
  GeneratorConfig g = section(cfg, "data").get<GeneratorConfig>();
  override(g.n_samples, f.n);
  if (f.size) g.height = g.width = *f.size;
  override(g.annotators, f.annotators);
  override(g.box_jitter, f.jitter);
  override(g.p_miss, f.p_miss);
  override(g.threshold_spread, f.spread);
  override(g.noise_sigma, f.noise);
  g.validate();
  const std::uint64_t seed = resolve_seed(f.common, cfg);

  const SplitDatasets ds = gen_synthetic(g, seed);
  fs::create_directories(f.common.out);
  save_dataset(ds, f.common.out);
  write_resolved(f.common.out, "gen-data", {{"seed", seed}, {"data", g}});
  out << "wrote " << ds.total() << " samples to " << f.common.out << " (train " << ds.train.samples.size()
      << ", val " << ds.val.samples.size() << ", test " << ds.test.samples.size() << ")\n";
  return kOk;
}

// train

struct TrainFlags {
  Common common;
  std::string data;
  std::optional<int> steps, batch_size, channels, eval_every, checkpoint_every;
  std::optional<double> lr, beta;
  std::optional<std::string> mode;
  bool freeze_decoder = false;
  int log_every = 50;
};

int cmd_train(const TrainFlags& f, std::ostream& out) {
  const json cfg = load_config(f.common.config);
  const json model_section = section(cfg, "model");
  ModelConfig m = model_section.get<ModelConfig>();
  TrainConfig t = section(cfg, "train").get<TrainConfig>();
  override(t.steps, f.steps);
  override(t.batch_size, f.batch_size);
  override(t.lr, f.lr);
  override(t.beta, f.beta);
  override(t.eval_every, f.eval_every);
  override(t.checkpoint_every, f.checkpoint_every);
  if (f.mode) t.mode = parse_train_mode(*f.mode);
  if (f.freeze_decoder) t.freeze_decoder = true;
  override(m.channels, f.channels);
  t.seed = resolve_seed(f.common, cfg);
  const fs::path dir = f.common.out;
  if (t.checkpoint_every > 0 && t.checkpoint_dir.empty()) t.checkpoint_dir = dir / "checkpoints";
  t.validate();

  const SplitDatasets ds = load_dataset(f.data);
  ds.train.validate();
  if (!model_section.contains("height")) m.height = ds.train.height();
  if (!model_section.contains("width")) m.width = ds.train.width();
  m.validate();
  if (m.height != ds.train.height() || m.width != ds.train.width())
    throw ValidationError("model extent " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                          " differs from dataset " + std::to_string(ds.train.height()) + "x" +
                          std::to_string(ds.train.width()));

  fs::create_directories(dir);
  write_resolved(dir, "train", {{"seed", t.seed}, {"data", f.data}, {"model", m}, {"train", t}});
  const Dataset* val = ds.val.samples.empty() ? nullptr : &ds.val;
  const TrainResult r = fit(init_params(m, t.seed), ds.train, val, t, [&](const StepRecord& s) {
    if (f.log_every > 0 && (s.step == 1 || s.step % f.log_every == 0 || s.step == t.steps))
      out << "step " << s.step << "/" << t.steps << "  total " << fixed(s.loss.total) << "  bce "
          << fixed(s.loss.bce) << "  dice " << fixed(s.loss.dice) << "  kl " << fixed(s.loss.kl, 6) << '\n'
          << std::flush;
  });
  save_checkpoint(r.params, dir / "model.ckpt");
  write_history_csv(r.history, dir / "history.csv");
  png::write_rgb(dir / "loss_curve.png", loss_curve_figure(r.history));
  for (const EvalRecord& e : r.history.evals)
    out << "val step " << e.step << "  ged2 " << fixed(e.metrics.ged2) << "  dsc " << fixed(e.metrics.dsc)
        << "  iou " << fixed(e.metrics.iou) << '\n';
  out << "wrote " << (dir / "model.ckpt").string() << ", history.csv, loss_curve.png\n";
  return kOk;
}

// sample

struct SampleFlags {
  Common common;
  std::string checkpoint, data, image;
  std::optional<int> id;
  std::vector<int> box;
  int m = 16;
  std::string mode = "prior";
};

const AnnotatedSample& find_sample(const SplitDatasets& ds, int id) {
  for (const Dataset* d : {&ds.train, &ds.val, &ds.test})
    for (const AnnotatedSample& s : d->samples)
      if (s.id == id) return s;
  throw ValidationError("no sample with id " + std::to_string(id) + " in the dataset");
}

int cmd_sample(const SampleFlags& f, std::ostream& out) {
  const json cfg = load_config(f.common.config);
  const std::uint64_t seed = resolve_seed(f.common, cfg);
  if (f.m < 1) throw ValidationError("M must be >= 1");
  const SamplingMode mode = parse_sampling_mode(f.mode);
  if (!f.box.empty() && f.box.size() != 4) throw ValidationError("--box takes four integers x1 y1 x2 y2");
  if (f.image.empty() == f.data.empty()) throw ValidationError("give exactly one of --image or --data");
  const ModelParams params = load_checkpoint(f.checkpoint);

  AnnotatedSample s;
  if (!f.image.empty()) {
    if (f.box.empty()) throw ValidationError("--image needs --box");
    s.image = read_image(f.image);
  } else {
    if (!f.id) throw ValidationError("--data needs --id");
    s = find_sample(load_dataset(f.data), *f.id);
  }
  if (!f.box.empty()) s.box = {f.box[0], f.box[1], f.box[2], f.box[3]};
  s.box.validate(s.image.height, s.image.width);
  if (s.image.height != params.config.height || s.image.width != params.config.width)
    throw ValidationError("image extent " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                          " differs from the model's " + std::to_string(params.config.height) + "x" +
                          std::to_string(params.config.width));

  const std::vector<BinaryMask> masks = draw_masks(params, s, f.m, mode, seed);
  const fs::path dir = f.common.out;
  fs::create_directories(dir);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%02zu.png", k);
    write_mask(dir / name, masks[k]);
  }
  png::write_rgb(dir / "grid.png", sample_grid_figure(s.image, s.box, s.annotations, masks));
  json resolved{{"seed", seed}, {"checkpoint", f.checkpoint}, {"M", f.m}, {"mode", to_string(mode)},
                {"box", {s.box.x1, s.box.y1, s.box.x2, s.box.y2}}};
  if (!f.image.empty()) resolved["image"] = f.image;
  else resolved["data"] = f.data, resolved["id"] = *f.id;
  write_resolved(dir, "sample", resolved);
  out << "wrote " << masks.size() << " masks and grid.png to " << dir.string() << " (mean pairwise d "
      << fixed(mean_pairwise_distance(masks)) << ")\n";
  return kOk;
}

// eval

struct EvalFlags {
  Common common;
  std::string checkpoint, data, baseline_checkpoint;
  std::optional<std::string> split, mode, baseline;
  std::optional<int> m;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  const json cfg = load_config(f.common.config);
  const json ev = section(cfg, "eval");
  EvalOptions opts;
  opts.samples_per_image = f.m.value_or(ev.value("M", opts.samples_per_image));
  opts.mode = parse_sampling_mode(f.mode.value_or(ev.value("mode", to_string(opts.mode))));
  opts.seed = resolve_seed(f.common, cfg);
  const Split split = parse_split(f.split.value_or(ev.value("split", std::string("test"))));
  const std::string baseline_mode = f.baseline.value_or(ev.value("baseline", std::string{}));
  if (opts.samples_per_image < 2) throw ValidationError("M must be >= 2 for GED (got " +
                                                        std::to_string(opts.samples_per_image) + ")");

  const ModelParams params = load_checkpoint(f.checkpoint);
  const SplitDatasets ds = load_dataset(f.data);
  const Dataset& data = ds.get(split);
  std::optional<ModelParams> baseline_params;
  std::optional<Baseline> baseline;
  if (!baseline_mode.empty()) {
    const SamplingMode bm = parse_sampling_mode(baseline_mode);
    if (!f.baseline_checkpoint.empty()) baseline_params = load_checkpoint(f.baseline_checkpoint);
    baseline = Baseline{f.baseline_checkpoint.empty() ? "self" : f.baseline_checkpoint,
                        baseline_params ? &*baseline_params : &params, bm};
  }
  const MetricsReport report = evaluate(params, data, opts, baseline);

  const fs::path dir = f.common.out;
  fs::create_directories(dir);
  json j = to_json(report);
  j["split"] = to_string(split);
  write_json(dir / "report.json", j);
  json resolved{{"seed", opts.seed},        {"checkpoint", f.checkpoint}, {"data", f.data},
                {"split", to_string(split)}, {"M", opts.samples_per_image}, {"mode", to_string(opts.mode)}};
  if (baseline) resolved["baseline"] = {{"mode", baseline_mode}, {"checkpoint", f.baseline_checkpoint}};
  write_resolved(dir, "eval", resolved);

  const MetricAggregate& a = report.aggregate;
  out << "split " << to_string(split) << "  n " << report.samples.size() << "  M " << report.M << "  mode "
      << report.mode << '\n'
      << "model     ged2 " << fixed(a.ged2) << "  dsc " << fixed(a.dsc) << "  iou " << fixed(a.iou)
      << "  diversity " << fixed(a.diversity) << '\n';
  if (report.comparison) {
    const Comparison& c = *report.comparison;
    const MetricAggregate& b = c.baseline_aggregate;
    out << "baseline  ged2 " << fixed(b.ged2) << "  dsc " << fixed(b.dsc) << "  iou " << fixed(b.iou)
        << "  diversity " << fixed(b.diversity) << "  (" << c.baseline_mode << ")\n"
        << "one-tailed paired t (model better):  ged2 t " << fixed(c.ged2.t, 3) << " p " << fixed(c.ged2.p)
        << "  dsc t " << fixed(c.dsc.t, 3) << " p " << fixed(c.dsc.p) << "  iou t " << fixed(c.iou.t, 3) << " p "
        << fixed(c.iou.p) << '\n';
  }
  out << "wrote " << (dir / "report.json").string() << '\n';
  return kOk;
}

// gradcheck

struct GradCheckFlags {
  Common common;
  std::optional<double> step;
  std::string precision = "double";
  bool corrupt_dice = false;
};

int cmd_gradcheck(const GradCheckFlags& f, std::ostream& out) {
  const json cfg = load_config(f.common.config);
  const std::uint64_t seed = resolve_seed(f.common, cfg);
  GradCheckOptions opts;
  if (f.precision == "single") {
    opts.single_precision = true;
    opts.step = kGradCheckStepSingle;
  } else if (f.precision != "double") {
    throw ValidationError("--precision must be double or single");
  }
  override(opts.step, f.step);
  opts.loss.corrupt_dice_gradient = f.corrupt_dice;
  const double threshold = opts.single_precision ? kGradCheckThresholdSingle : kGradCheckThreshold;

  const GradCheckResult r = grad_check(gradcheck_model(seed), gradcheck_sample(seed), opts);
  const bool pass = r.max_rel_error < threshold;
  out << "checked " << r.checked << " parameters (" << f.precision << " precision, step " << opts.step << ")\n"
      << "max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error << " in "
      << r.worst_tensor << " (threshold " << threshold << ")\n"
      << "largest element ratio " << r.max_element_rel_error << " at " << r.worst_element_tensor << "["
      << r.worst_element_index << "]\n"
      << std::defaultfloat << (pass ? "PASS" : "FAIL") << '\n';
  if (!f.common.out.empty()) {
    fs::create_directories(f.common.out);
    write_json(fs::path(f.common.out) / "gradcheck.json",
               {{"max_rel_error", r.max_rel_error},
                {"worst_tensor", r.worst_tensor},
                {"per_tensor", r.per_tensor},
                {"max_element_rel_error", r.max_element_rel_error},
                {"threshold", threshold},
                {"pass", pass}});
    write_resolved(f.common.out, "gradcheck",
                   {{"seed", seed}, {"step", opts.step}, {"precision", f.precision}, {"corrupt_dice", f.corrupt_dice}});
  }
  return pass ? kOk : kCheckFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Box-prompted segmentation with a latent variable for annotator ambiguity", "psam"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenDataFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic multi-annotator dataset");
  add_common(gen_cmd, gen.common, true);
  gen_cmd->add_option("--n", gen.n, "Number of samples (n_samples)");
  gen_cmd->add_option("--size", gen.size, "Image height and width");
  gen_cmd->add_option("--annotators", gen.annotators, "Annotators per image");
  gen_cmd->add_option("--p-miss", gen.p_miss, "Probability an annotator marks nothing");
  gen_cmd->add_option("--spread", gen.spread, "Width of the annotator threshold window (0 = unambiguous)");
  gen_cmd->add_option("--noise", gen.noise, "Image noise sigma");
  gen_cmd->add_option("--jitter", gen.jitter, "Box jitter in pixels");

  TrainFlags train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and loss curve");
  add_common(train_cmd, train.common, true);
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--steps", train.steps, "Optimizer steps");
  train_cmd->add_option("--batch-size", train.batch_size, "Examples per step");
  train_cmd->add_option("--lr", train.lr, "Adam learning rate");
  train_cmd->add_option("--beta", train.beta, "KL weight");
  train_cmd->add_option("--mode", train.mode, "probabilistic or dropout (baseline)");
  train_cmd->add_option("--channels", train.channels, "Embedding width C");
  train_cmd->add_option("--eval-every", train.eval_every, "Validate every N steps (0 = never)");
  train_cmd->add_option("--checkpoint-every", train.checkpoint_every, "Save a checkpoint every N steps");
  train_cmd->add_flag("--freeze-decoder", train.freeze_decoder, "Keep decoder weights fixed");
  train_cmd->add_option("--log-every", train.log_every, "Print a loss line every N steps (0 = quiet)");

  SampleFlags sample;
  CLI::App* sample_cmd = app.add_subcommand("sample", "Draw M masks for one image and write a grid figure");
  add_common(sample_cmd, sample.common, true);
  sample_cmd->add_option("--checkpoint", sample.checkpoint, "Model checkpoint")->required();
  sample_cmd->add_option("--data", sample.data, "Dataset directory (with --id)");
  sample_cmd->add_option("--id", sample.id, "Sample id in the dataset");
  sample_cmd->add_option("--image", sample.image, "Grayscale PNG (with --box)");
  sample_cmd->add_option("--box", sample.box, "Box x1 y1 x2 y2, lower-right exclusive")->expected(4);
  sample_cmd->add_option("--M", sample.m, "Number of samples");
  sample_cmd->add_option("--mode", sample.mode, "prior, prior_mean or dropout");

  EvalFlags eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate GED², DSC and IoU on a dataset split");
  add_common(eval_cmd, eval.common, true);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", eval.split, "train, val or test (default test)");
  eval_cmd->add_option("--M", eval.m, "Samples per image (>= 2, default 16)");
  eval_cmd->add_option("--mode", eval.mode, "Sampling mode of the model: prior, prior_mean or dropout");
  eval_cmd->add_option("--baseline", eval.baseline, "Compare against a baseline sampled in this mode, e.g. dropout");
  eval_cmd->add_option("--baseline-checkpoint", eval.baseline_checkpoint,
                       "Baseline model (default: the evaluated checkpoint)");

  GradCheckFlags grad;
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  add_common(grad_cmd, grad.common, false);
  grad_cmd->add_option("--step", grad.step, "Finite-difference step");
  grad_cmd->add_option("--precision", grad.precision, "double (threshold 1e-4) or single (threshold 5e-2)");
  grad_cmd->add_flag("--corrupt-dice", grad.corrupt_dice, "Test hook: perturb the Dice gradient");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(train, out);
    if (*sample_cmd) return cmd_sample(sample, out);
    if (*eval_cmd) return cmd_eval(eval, out);
    return cmd_gradcheck(grad, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const json::exception& e) {
    err << "error: bad config value: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace psam::cli
