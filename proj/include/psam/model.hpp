#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "psam/autodiff.hpp"
#include "psam/distributions.hpp"
#include "psam/grid.hpp"
#include "psam/sample.hpp"

namespace psam {

struct ModelConfig {
  int channels = 64;    // embedding width C
  int downscale = 8;    // encoder stride s, a power of two
  int latent_dim = 6;   // L
  int height = 64;
  int width = 64;
  int heads = 4;
  int mlp_dim = 128;    // hidden width of the decoder token MLP
  int pe_freqs = 8;     // sinusoid frequencies per coordinate
  int decoder_depth = 2;
  double dropout_p = 0.5;
  bool freeze_decoder = false;

  int grid_h() const { return height / downscale; }
  int grid_w() const { return width / downscale; }
  int stages() const;  // log2(downscale)
  int upscaled_channels() const;
  void validate() const;

  // C=8, L=2, 16x16: the configuration used for finite-difference checks.
  static ModelConfig tiny();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  static bool is_decoder(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// {C, h, w}
struct ImageEmbedding {
  Tensor grid;
};
// {K, C}, one row per box corner.
struct SparseTokens {
  Tensor tokens;
};
// {C, h, w}
struct DenseEmbedding {
  Tensor grid;
};
struct PromptEmbedding {
  SparseTokens sparse;
  DenseEmbedding dense;
};

ImageEmbedding encode_image(const ModelParams& params, const Image& img);
PromptEmbedding encode_prompt(const ModelParams& params, const BoxPrompt& box);
GaussianDiag prior_forward(const ModelParams& params, const ImageEmbedding& emb);
GaussianDiag posterior_forward(const ModelParams& params, const ImageEmbedding& emb, const BinaryMask& gt);
SparseTokens inject_latent(const ModelParams& params, std::span<const double> z, const SparseTokens& tokens);
// rng is required iff dropout_active.
Logits decode(const ModelParams& params, const ImageEmbedding& emb, const SparseTokens& tokens,
              const DenseEmbedding& dense, bool dropout_active, std::mt19937_64* rng = nullptr);

struct TrainOutputs {
  Logits logits;
  GaussianDiag posterior;
  GaussianDiag prior;
};
TrainOutputs forward_train(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& chosen_gt,
                           std::span<const double> noise);

// Latent samples from the prior; image and prompt are encoded once.
std::vector<BinaryMask> forward_sample(const ModelParams& params, const Image& img, const BoxPrompt& box, int count,
                                       std::mt19937_64& rng);
// Dropout baseline: z at the prior mean, fresh dropout masks per draw.
std::vector<BinaryMask> forward_sample_dropout(const ModelParams& params, const Image& img, const BoxPrompt& box,
                                               int count, std::mt19937_64& rng);
// Deterministic prediction with z = prior mean and no dropout.
BinaryMask predict_at_prior_mean(const ModelParams& params, const Image& img, const BoxPrompt& box);
// Deterministic prediction with z = posterior mean for `gt`.
BinaryMask predict_at_posterior_mean(const ModelParams& params, const AnnotatedSample& sample, const BinaryMask& gt);

BinaryMask threshold(const Logits& logits);

struct EncoderCallCounts {
  std::uint64_t image = 0;
  std::uint64_t prompt = 0;
};
// Process-wide counters of encode_image / encode_prompt invocations.
EncoderCallCounts encoder_calls();

// ---- differentiable graph used by training and gradient checks ----

class BoundParams {
 public:
  // freeze_decoder leaves decoder tensors without gradients.
  BoundParams(ad::Tape& tape, const ModelParams& params, bool trainable, bool freeze_decoder = false);
  ad::Var operator[](const std::string& name) const;
  const std::map<std::string, ad::Var>& vars() const { return vars_; }
  const ModelConfig& config() const { return config_; }

 private:
  std::map<std::string, ad::Var> vars_;
  ModelConfig config_;
};

struct GraphOutputs {
  ad::Var logits;  // {H, W}
  ad::Var mu_q, log_var_q;
  ad::Var mu_p, log_var_p;
};

// Posterior path: z = mu_q + sigma_q * noise.
GraphOutputs build_train_graph(const BoundParams& p, const AnnotatedSample& sample, const BinaryMask& chosen_gt,
                               std::span<const double> noise);
// Dropout baseline path: z = prior mean, dropout active; mu_q / log_var_q are unset.
GraphOutputs build_dropout_graph(const BoundParams& p, const AnnotatedSample& sample, std::mt19937_64& rng);

// ---- checkpoint container ----

inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace psam
