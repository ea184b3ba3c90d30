#include "psam/model.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <numbers>

#include "psam/errors.hpp"

namespace psam {

namespace {

std::atomic<std::uint64_t> g_image_calls{0};
std::atomic<std::uint64_t> g_prompt_calls{0};

// Self-attention keeps the full width; the two cross-attentions work at half width.
constexpr int kCrossDownsample = 2;

std::string idx(const std::string& base, int i) { return base + std::to_string(i); }

int encoder_stage_channels(const ModelConfig& c, int stage) {
  // Narrow early stages collapse activations on small models; keep at least 8 channels.
  return std::max(std::min(c.channels, 8), c.channels >> (c.stages() - 1 - stage));
}

int upscale_stage_channels(const ModelConfig& c, int stage) { return std::max(1, c.channels >> (stage + 1)); }

// ---- initialization ----

class Initializer {
 public:
  Initializer(ModelParams& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : t.values()) v = stddev * dist(rng_);
    params_.tensors.emplace(name, std::move(t));
  }
  void constant(const std::string& name, Shape shape, double value) {
    params_.tensors.emplace(name, Tensor(std::move(shape), value));
  }
  void linear(const std::string& prefix, int in, int out, double gain = 1.0) {
    normal(prefix + ".weight", {out, in}, gain / std::sqrt(static_cast<double>(in)));
    constant(prefix + ".bias", {out}, 0.0);
  }
  void norm(const std::string& prefix, int width) {
    constant(prefix + ".gamma", {width}, 1.0);
    constant(prefix + ".beta", {width}, 0.0);
  }
  void attention(const std::string& prefix, int width, int internal) {
    linear(prefix + ".q", width, internal);
    linear(prefix + ".k", width, internal);
    linear(prefix + ".v", width, internal);
    linear(prefix + ".o", internal, width);
  }

 private:
  ModelParams& params_;
  std::mt19937_64 rng_;
};

// ---- graph pieces ----

// Fixed input standardization so the first convolution sees both signs.
constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

ad::Var lin(const BoundParams& p, const std::string& prefix, ad::Var x) {
  return ad::linear(x, p[prefix + ".weight"], p[prefix + ".bias"]);
}

ad::Var norm_rows(const BoundParams& p, const std::string& prefix, ad::Var x) {
  return ad::layer_norm_rows(x, p[prefix + ".gamma"], p[prefix + ".beta"]);
}

ad::Var norm_channels(const BoundParams& p, const std::string& prefix, ad::Var x) {
  return ad::layer_norm_channels(x, p[prefix + ".gamma"], p[prefix + ".beta"]);
}

struct Dropout {
  double p = 0.0;
  std::mt19937_64* rng = nullptr;

  ad::Var operator()(ad::Var x) const {
    if (!rng) return x;
    Tensor keep(x.shape());
    std::bernoulli_distribution coin(1.0 - p);
    const double scale = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
    for (double& v : keep.values()) v = coin(*rng) ? scale : 0.0;
    return ad::mul_const(x, keep);
  }
};

ad::Var attend(const BoundParams& p, const std::string& prefix, ad::Var q, ad::Var k, ad::Var v) {
  ad::Var out = ad::attention(lin(p, prefix + ".q", q), lin(p, prefix + ".k", k), lin(p, prefix + ".v", v),
                              p.config().heads);
  return lin(p, prefix + ".o", out);
}

// sin/cos of pi * 2^f * coordinate, for each coordinate in turn.
void sinusoid(double u, double v, int freqs, double* out) {
  int at = 0;
  for (double coord : {u, v})
    for (int f = 0; f < freqs; ++f) {
      const double angle = std::numbers::pi * std::ldexp(coord, f);
      out[at++] = std::sin(angle);
      out[at++] = std::cos(angle);
    }
}

Tensor corner_features(const ModelConfig& c, const BoxPrompt& box) {
  const int f = 4 * c.pe_freqs;
  Tensor feats({2, f});
  sinusoid(static_cast<double>(box.x1) / c.width, static_cast<double>(box.y1) / c.height, c.pe_freqs, feats.data());
  sinusoid(static_cast<double>(box.x2) / c.width, static_cast<double>(box.y2) / c.height, c.pe_freqs,
           feats.data() + f);
  return feats;
}

Tensor grid_features(const ModelConfig& c) {
  const int gh = c.grid_h(), gw = c.grid_w(), f = 4 * c.pe_freqs;
  Tensor feats({gh * gw, f});
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j)
      sinusoid((j + 0.5) / gw, (i + 0.5) / gh, c.pe_freqs, feats.data() + static_cast<std::size_t>(i * gw + j) * f);
  return feats;
}

ad::Var image_encoder(const BoundParams& p, const Image& img) {
  const ModelConfig& c = p.config();
  ad::Tape& t = *p["image_encoder.neck.weight"].tape;
  Tensor pixels({1, img.height, img.width});
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = (img.values[i] - kPixelMean) / kPixelStd;
  ad::Var x = t.constant(std::move(pixels));
  for (int s = 0; s < c.stages(); ++s) {
    const std::string pre = idx("image_encoder.conv", s);
    x = ad::gelu(ad::conv2d(x, p[pre + ".weight"], p[pre + ".bias"], 2, 1));
  }
  x = ad::conv2d(x, p["image_encoder.neck.weight"], p["image_encoder.neck.bias"], 1, 0);
  return norm_channels(p, "image_encoder.neck_norm", x);
}

ad::Var sparse_tokens(const BoundParams& p, const BoxPrompt& box) {
  ad::Tape& t = *p["prompt_encoder.corner_embed"].tape;
  ad::Var pe = lin(p, "prompt_encoder.pe_proj", t.constant(corner_features(p.config(), box)));
  return ad::add(pe, p["prompt_encoder.corner_embed"]);
}

ad::Var dense_embedding(const BoundParams& p) {
  const ModelConfig& c = p.config();
  ad::Tape& t = *p["prompt_encoder.no_mask"].tape;
  return ad::add_channels(t.constant(Tensor({c.channels, c.grid_h(), c.grid_w()})), p["prompt_encoder.no_mask"]);
}

ad::Var grid_pe(const BoundParams& p) {
  ad::Tape& t = *p["prompt_encoder.pe_proj.weight"].tape;
  return lin(p, "prompt_encoder.pe_proj", t.constant(grid_features(p.config())));
}

ad::Var gaussian_mlp(const BoundParams& p, const std::string& prefix, ad::Var pooled) {
  return lin(p, prefix + ".fc2", ad::gelu(lin(p, prefix + ".fc1", pooled)));
}

struct Gaussian {
  ad::Var mu, log_var;
};

Gaussian split(ad::Var stats, int latent) { return {ad::slice(stats, 0, latent), ad::slice(stats, latent, latent)}; }

Gaussian prior_head(const BoundParams& p, ad::Var emb) {
  return split(gaussian_mlp(p, "prior", ad::spatial_mean(emb)), p.config().latent_dim);
}

// Fraction of foreground per s x s cell.
Tensor area_pool(const BinaryMask& gt, const ModelConfig& c) {
  const int s = c.downscale;
  Tensor pooled({1, c.grid_h(), c.grid_w()});
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x)
      pooled[static_cast<std::size_t>((y / s) * c.grid_w() + x / s)] += gt.at(y, x);
  for (double& v : pooled.values()) v /= s * s;
  return pooled;
}

Gaussian posterior_head(const BoundParams& p, ad::Var emb, const BinaryMask& gt) {
  ad::Tape& t = *emb.tape;
  ad::Var joined = ad::concat_channels(emb, t.constant(area_pool(gt, p.config())));
  ad::Var mixed = ad::gelu(ad::conv2d(joined, p["posterior.mix.weight"], p["posterior.mix.bias"], 1, 0));
  return split(gaussian_mlp(p, "posterior", ad::spatial_mean(mixed)), p.config().latent_dim);
}

ad::Var project_latent(const BoundParams& p, ad::Var z) {
  return lin(p, "projector.fc2", ad::gelu(lin(p, "projector.fc1", z)));
}

ad::Var mask_decoder(const BoundParams& p, ad::Var emb, ad::Var tokens, ad::Var dense, const Dropout& drop) {
  const ModelConfig& c = p.config();
  const int gh = c.grid_h(), gw = c.grid_w(), hw = gh * gw;

  ad::Var src = ad::add(emb, dense);
  ad::Var keys = ad::transpose(ad::reshape(src, {c.channels, hw}));
  ad::Var key_pe = grid_pe(p);
  ad::Var query_pe = ad::concat_rows(p["decoder.output_token"], tokens);
  ad::Var queries = query_pe;

  for (int b = 0; b < c.decoder_depth; ++b) {
    const std::string pre = idx("decoder.block", b);
    ad::Var q = ad::add(queries, query_pe);
    queries = norm_rows(p, pre + ".norm1", ad::add(queries, drop(attend(p, pre + ".self_attn", q, q, queries))));

    q = ad::add(queries, query_pe);
    ad::Var k = ad::add(keys, key_pe);
    queries = norm_rows(p, pre + ".norm2", ad::add(queries, drop(attend(p, pre + ".cross_t2i", q, k, keys))));

    ad::Var hidden = drop(ad::gelu(lin(p, pre + ".mlp.fc1", queries)));
    queries = norm_rows(p, pre + ".norm3", ad::add(queries, drop(lin(p, pre + ".mlp.fc2", hidden))));

    q = ad::add(queries, query_pe);
    k = ad::add(keys, key_pe);
    keys = norm_rows(p, pre + ".norm4", ad::add(keys, drop(attend(p, pre + ".cross_i2t", k, q, queries))));
  }
  {
    ad::Var q = ad::add(queries, query_pe);
    ad::Var k = ad::add(keys, key_pe);
    queries = norm_rows(p, "decoder.final_norm", ad::add(queries, drop(attend(p, "decoder.final_attn", q, k, keys))));
  }

  ad::Var x = ad::reshape(ad::transpose(keys), {c.channels, gh, gw});
  for (int s = 0; s < c.stages(); ++s) {
    const std::string pre = idx("decoder.up", s);
    x = ad::conv_transpose2x2(x, p[pre + ".weight"], p[pre + ".bias"]);
    if (s == 0) x = norm_channels(p, "decoder.up_norm", x);
    x = ad::gelu(x);
  }
  const int cu = c.upscaled_channels();
  ad::Var out_token = ad::slice_rows(queries, 0, 1);
  ad::Var hyper = lin(p, "decoder.hyper.fc2", drop(ad::gelu(lin(p, "decoder.hyper.fc1", out_token))));
  ad::Var logits = ad::matmul(hyper, ad::reshape(x, {cu, c.height * c.width}));
  return ad::reshape(logits, {c.height, c.width});
}

void check_image(const ModelConfig& c, const Image& img) {
  if (img.height != c.height || img.width != c.width)
    throw DimensionError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         ", model expects " + std::to_string(c.height) + "x" + std::to_string(c.width));
  validate_image(img);
}

void check_embedding(const ModelConfig& c, const Tensor& grid, const char* what) {
  const Shape want{c.channels, c.grid_h(), c.grid_w()};
  if (grid.shape() != want)
    throw DimensionError(std::string(what) + " has shape " + shape_str(grid.shape()) + ", expected " + shape_str(want));
}

void check_mask(const ModelConfig& c, const BinaryMask& m) {
  if (m.height != c.height || m.width != c.width)
    throw DimensionError("mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) + ", model expects " +
                         std::to_string(c.height) + "x" + std::to_string(c.width));
  validate_binary(m);
}

void check_tokens(const ModelConfig& c, const Tensor& t) {
  if (t.rank() != 2 || t.dim(0) < 1 || t.dim(1) != c.channels)
    throw DimensionError("sparse tokens have shape " + shape_str(t.shape()) + ", expected {K, " +
                         std::to_string(c.channels) + "}");
}

GaussianDiag to_gaussian(const Gaussian& g) {
  const Tensor& m = g.mu.value();
  const Tensor& lv = g.log_var.value();
  return {std::vector<double>(m.values().begin(), m.values().end()),
          std::vector<double>(lv.values().begin(), lv.values().end())};
}

Logits to_logits(const Tensor& t) {
  Logits out(t.dim(0), t.dim(1));
  out.values.assign(t.storage().begin(), t.storage().end());
  return out;
}

std::vector<double> standard_normal(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace

// ---- config ----

int ModelConfig::stages() const { return std::countr_zero(static_cast<unsigned>(downscale)); }

int ModelConfig::upscaled_channels() const { return upscale_stage_channels(*this, stages() - 1); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (channels < 2) fail("channels must be >= 2");
  if (downscale < 2 || !std::has_single_bit(static_cast<unsigned>(downscale))) fail("downscale must be a power of two >= 2");
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (height < downscale || width < downscale || height % downscale || width % downscale)
    fail("image extent must be a positive multiple of downscale");
  if (heads < 1 || channels % heads || (channels / kCrossDownsample) % heads || channels % kCrossDownsample)
    fail("heads must divide channels and channels / 2");
  if (mlp_dim < 1 || pe_freqs < 1 || decoder_depth < 1) fail("mlp_dim, pe_freqs and decoder_depth must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.channels = 8;
  c.latent_dim = 2;
  c.height = 16;
  c.width = 16;
  c.heads = 2;
  c.mlp_dim = 16;
  c.pe_freqs = 4;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels},   {"downscale", c.downscale},
                     {"latent_dim", c.latent_dim}, {"height", c.height},
                     {"width", c.width},           {"heads", c.heads},
                     {"mlp_dim", c.mlp_dim},       {"pe_freqs", c.pe_freqs},
                     {"decoder_depth", c.decoder_depth}, {"dropout_p", c.dropout_p},
                     {"freeze_decoder", c.freeze_decoder}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.channels = j.value("channels", d.channels);
  c.downscale = j.value("downscale", d.downscale);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.heads = j.value("heads", d.heads);
  c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
  c.pe_freqs = j.value("pe_freqs", d.pe_freqs);
  c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.freeze_decoder = j.value("freeze_decoder", d.freeze_decoder);
}

// ---- params ----

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : tensors)
    if (!t.all_finite()) return false;
  return true;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params;
  params.config = config;
  Initializer init(params, seed);
  const int c = config.channels, pe = 4 * config.pe_freqs, latent = config.latent_dim;

  int in = 1;
  for (int s = 0; s < config.stages(); ++s) {
    const int out = encoder_stage_channels(config, s);
    init.normal(idx("image_encoder.conv", s) + ".weight", {out, in, 3, 3}, std::sqrt(2.0 / (in * 9)));
    init.constant(idx("image_encoder.conv", s) + ".bias", {out}, 0.0);
    in = out;
  }
  init.normal("image_encoder.neck.weight", {c, c, 1, 1}, std::sqrt(1.0 / c));
  init.constant("image_encoder.neck.bias", {c}, 0.0);
  init.norm("image_encoder.neck_norm", c);

  init.linear("prompt_encoder.pe_proj", pe, c);
  init.normal("prompt_encoder.corner_embed", {2, c}, 1.0);
  init.normal("prompt_encoder.no_mask", {c}, 0.1);

  init.linear("prior.fc1", c, c);
  init.linear("prior.fc2", c, 2 * latent, 0.1);
  init.normal("posterior.mix.weight", {c, c + 1, 1, 1}, std::sqrt(2.0 / (c + 1)));
  init.constant("posterior.mix.bias", {c}, 0.0);
  init.linear("posterior.fc1", c, c);
  init.linear("posterior.fc2", c, 2 * latent, 0.1);

  init.linear("projector.fc1", latent, c);
  // Zero output layer: at initialization the latent has no effect on predictions.
  init.constant("projector.fc2.weight", {c, c}, 0.0);
  init.constant("projector.fc2.bias", {c}, 0.0);

  init.normal("decoder.output_token", {1, c}, 1.0);
  for (int b = 0; b < config.decoder_depth; ++b) {
    const std::string pre = idx("decoder.block", b);
    init.attention(pre + ".self_attn", c, c);
    init.attention(pre + ".cross_t2i", c, c / kCrossDownsample);
    init.attention(pre + ".cross_i2t", c, c / kCrossDownsample);
    init.linear(pre + ".mlp.fc1", c, config.mlp_dim);
    init.linear(pre + ".mlp.fc2", config.mlp_dim, c);
    for (int n = 1; n <= 4; ++n) init.norm(idx(pre + ".norm", n), c);
  }
  init.attention("decoder.final_attn", c, c / kCrossDownsample);
  init.norm("decoder.final_norm", c);
  in = c;
  for (int s = 0; s < config.stages(); ++s) {
    const int out = upscale_stage_channels(config, s);
    init.normal(idx("decoder.up", s) + ".weight", {in, out, 2, 2}, std::sqrt(2.0 / in));
    init.constant(idx("decoder.up", s) + ".bias", {out}, 0.0);
    if (s == 0) init.norm("decoder.up_norm", out);
    in = out;
  }
  init.linear("decoder.hyper.fc1", c, c);
  init.linear("decoder.hyper.fc2", c, config.upscaled_channels());
  return params;
}

// ---- bound parameters ----

BoundParams::BoundParams(ad::Tape& tape, const ModelParams& params, bool trainable, bool freeze_decoder)
    : config_(params.config) {
  const bool freeze = freeze_decoder || params.config.freeze_decoder;
  for (const auto& [name, tensor] : params.tensors)
    vars_.emplace(name, tape.param(tensor, trainable && !(freeze && ModelParams::is_decoder(name))));
}

ad::Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

GraphOutputs build_train_graph(const BoundParams& p, const AnnotatedSample& sample, const BinaryMask& chosen_gt,
                               std::span<const double> noise) {
  const ModelConfig& c = p.config();
  check_image(c, sample.image);
  check_mask(c, chosen_gt);
  sample.box.validate(c.height, c.width);
  if (noise.size() != static_cast<std::size_t>(c.latent_dim))
    throw DimensionError("noise has " + std::to_string(noise.size()) + " entries, latent_dim is " +
                         std::to_string(c.latent_dim));
  ad::Var emb = image_encoder(p, sample.image);
  ad::Var tokens = sparse_tokens(p, sample.box);
  Gaussian post = posterior_head(p, emb, chosen_gt);
  Gaussian prior = prior_head(p, emb);
  ad::Var z = sample_reparam(post.mu, post.log_var, noise);
  tokens = ad::add_rows(tokens, project_latent(p, z));
  ad::Var logits = mask_decoder(p, emb, tokens, dense_embedding(p), Dropout{});
  return {logits, post.mu, post.log_var, prior.mu, prior.log_var};
}

GraphOutputs build_dropout_graph(const BoundParams& p, const AnnotatedSample& sample, std::mt19937_64& rng) {
  const ModelConfig& c = p.config();
  check_image(c, sample.image);
  sample.box.validate(c.height, c.width);
  ad::Var emb = image_encoder(p, sample.image);
  ad::Var tokens = sparse_tokens(p, sample.box);
  Gaussian prior = prior_head(p, emb);
  tokens = ad::add_rows(tokens, project_latent(p, prior.mu));
  ad::Var logits = mask_decoder(p, emb, tokens, dense_embedding(p), Dropout{c.dropout_p, &rng});
  GraphOutputs out;
  out.logits = logits;
  out.mu_p = prior.mu;
  out.log_var_p = prior.log_var;
  return out;
}

// ---- public inference operations ----

ImageEmbedding encode_image(const ModelParams& params, const Image& img) {
  check_image(params.config, img);
  g_image_calls.fetch_add(1, std::memory_order_relaxed);
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  return {image_encoder(p, img).value()};
}

PromptEmbedding encode_prompt(const ModelParams& params, const BoxPrompt& box) {
  box.validate(params.config.height, params.config.width);
  g_prompt_calls.fetch_add(1, std::memory_order_relaxed);
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  return {{sparse_tokens(p, box).value()}, {dense_embedding(p).value()}};
}

GaussianDiag prior_forward(const ModelParams& params, const ImageEmbedding& emb) {
  check_embedding(params.config, emb.grid, "image embedding");
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  return to_gaussian(prior_head(p, tape.param(emb.grid, false)));
}

GaussianDiag posterior_forward(const ModelParams& params, const ImageEmbedding& emb, const BinaryMask& gt) {
  check_embedding(params.config, emb.grid, "image embedding");
  check_mask(params.config, gt);
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  return to_gaussian(posterior_head(p, tape.param(emb.grid, false), gt));
}

SparseTokens inject_latent(const ModelParams& params, std::span<const double> z, const SparseTokens& tokens) {
  const ModelConfig& c = params.config;
  if (z.size() != static_cast<std::size_t>(c.latent_dim))
    throw DimensionError("latent has " + std::to_string(z.size()) + " entries, latent_dim is " +
                         std::to_string(c.latent_dim));
  check_tokens(c, tokens.tokens);
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  ad::Var zv = tape.constant(Tensor({c.latent_dim}, std::vector<double>(z.begin(), z.end())));
  return {ad::add_rows(tape.param(tokens.tokens, false), project_latent(p, zv)).value()};
}

Logits decode(const ModelParams& params, const ImageEmbedding& emb, const SparseTokens& tokens,
              const DenseEmbedding& dense, bool dropout_active, std::mt19937_64* rng) {
  const ModelConfig& c = params.config;
  check_embedding(c, emb.grid, "image embedding");
  check_embedding(c, dense.grid, "dense embedding");
  check_tokens(c, tokens.tokens);
  if (dropout_active && !rng) throw ValidationError("decode: dropout requires an rng");
  ad::Tape tape(false);
  BoundParams p(tape, params, false);
  Dropout drop;
  if (dropout_active) drop = Dropout{c.dropout_p, rng};
  ad::Var logits = mask_decoder(p, tape.param(emb.grid, false), tape.param(tokens.tokens, false),
                                tape.param(dense.grid, false), drop);
  return to_logits(logits.value());
}

TrainOutputs forward_train(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& chosen_gt,
                           std::span<const double> noise) {
  const ModelConfig& c = params.config;
  if (noise.size() != static_cast<std::size_t>(c.latent_dim))
    throw DimensionError("noise has " + std::to_string(noise.size()) + " entries, latent_dim is " +
                         std::to_string(c.latent_dim));
  const ImageEmbedding emb = encode_image(params, sample.image);
  const PromptEmbedding prompt = encode_prompt(params, sample.box);
  TrainOutputs out;
  out.posterior = posterior_forward(params, emb, chosen_gt);
  out.prior = prior_forward(params, emb);
  const std::vector<double> z = sample_reparam(out.posterior, noise);
  out.logits = decode(params, emb, inject_latent(params, z, prompt.sparse), prompt.dense, false);
  return out;
}

BinaryMask threshold(const Logits& logits) {
  BinaryMask m(logits.height, logits.width);
  // sigmoid(l) > 0.5 exactly when l > 0
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = logits.values[i] > 0.0 ? 1 : 0;
  return m;
}

std::vector<BinaryMask> forward_sample(const ModelParams& params, const Image& img, const BoxPrompt& box, int count,
                                       std::mt19937_64& rng) {
  if (count < 1) throw ValidationError("forward_sample: sample count must be >= 1");
  const ImageEmbedding emb = encode_image(params, img);
  const PromptEmbedding prompt = encode_prompt(params, box);
  const GaussianDiag prior = prior_forward(params, emb);
  std::vector<BinaryMask> masks;
  masks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::vector<double> noise = standard_normal(rng, params.config.latent_dim);
    const SparseTokens tokens = inject_latent(params, sample_reparam(prior, noise), prompt.sparse);
    masks.push_back(threshold(decode(params, emb, tokens, prompt.dense, false)));
  }
  return masks;
}

std::vector<BinaryMask> forward_sample_dropout(const ModelParams& params, const Image& img, const BoxPrompt& box,
                                               int count, std::mt19937_64& rng) {
  if (count < 1) throw ValidationError("forward_sample_dropout: sample count must be >= 1");
  const ImageEmbedding emb = encode_image(params, img);
  const PromptEmbedding prompt = encode_prompt(params, box);
  const GaussianDiag prior = prior_forward(params, emb);
  const SparseTokens tokens = inject_latent(params, prior.mu, prompt.sparse);
  std::vector<BinaryMask> masks;
  masks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) masks.push_back(threshold(decode(params, emb, tokens, prompt.dense, true, &rng)));
  return masks;
}

BinaryMask predict_at_prior_mean(const ModelParams& params, const Image& img, const BoxPrompt& box) {
  const ImageEmbedding emb = encode_image(params, img);
  const PromptEmbedding prompt = encode_prompt(params, box);
  const GaussianDiag prior = prior_forward(params, emb);
  return threshold(decode(params, emb, inject_latent(params, prior.mu, prompt.sparse), prompt.dense, false));
}

BinaryMask predict_at_posterior_mean(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt) {
  const std::vector<double> zero(static_cast<std::size_t>(params.config.latent_dim), 0.0);
  return threshold(forward_train(params, sample, gt, zero).logits);
}

EncoderCallCounts encoder_calls() {
  return {g_image_calls.load(std::memory_order_relaxed), g_prompt_calls.load(std::memory_order_relaxed)};
}

}  // namespace psam
