#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "psam/data.hpp"
#include "psam/errors.hpp"
#include "psam/model.hpp"
#include "psam/training.hpp"

namespace psam {
namespace {

namespace fs = std::filesystem;

AnnotatedSample sample_for(const ModelConfig& c, std::uint64_t seed) {
  GeneratorConfig g;
  g.height = c.height;
  g.width = c.width;
  g.n_samples = 1;
  return generate_sample(g, seed, 0);
}

// Projector output layer drawn at random so the latent affects predictions.
ModelParams with_live_projector(ModelParams p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  for (const char* name : {"projector.fc2.weight", "projector.fc2.bias"})
    for (double& v : p.tensors.at(name).values()) v = n(rng);
  return p;
}

class DefaultModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { params_ = new ModelParams(init_params(ModelConfig{}, 0)); }
  static void TearDownTestSuite() { delete params_; }
  static ModelParams* params_;
};
ModelParams* DefaultModel::params_ = nullptr;

TEST_F(DefaultModel, EncodeImageShapeAndDeterminism) {
  const AnnotatedSample s = sample_for(params_->config, 1);
  const ImageEmbedding a = encode_image(*params_, s.image);
  EXPECT_EQ(a.grid.shape(), (Shape{64, 8, 8}));
  EXPECT_TRUE(a.grid.all_finite());
  EXPECT_EQ(a.grid, encode_image(*params_, s.image).grid);
}

TEST_F(DefaultModel, ConstantZeroImageIsFinite) {
  EXPECT_TRUE(encode_image(*params_, Image(64, 64, 0.0)).grid.all_finite());
}

TEST_F(DefaultModel, EncodeImageRejectsWrongExtent) {
  EXPECT_THROW(encode_image(*params_, Image(32, 64, 0.5)), DimensionError);
}

TEST_F(DefaultModel, EncodePrompt) {
  const PromptEmbedding a = encode_prompt(*params_, {10, 12, 30, 40});
  EXPECT_EQ(a.sparse.tokens.shape(), (Shape{2, 64}));
  EXPECT_EQ(a.dense.grid.shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(a.sparse.tokens, encode_prompt(*params_, {10, 12, 30, 40}).sparse.tokens);
  EXPECT_NE(a.sparse.tokens, encode_prompt(*params_, {11, 12, 30, 40}).sparse.tokens);
  // The dense embedding is the no-mask vector broadcast over the grid.
  const Tensor& no_mask = params_->at("prompt_encoder.no_mask");
  for (int ch = 0; ch < 64; ++ch)
    for (int i = 0; i < 64; ++i) EXPECT_EQ(a.dense.grid[static_cast<std::size_t>(ch * 64 + i)], no_mask[ch]);
}

TEST_F(DefaultModel, EncodePromptRejectsDegenerateBox) {
  EXPECT_THROW(encode_prompt(*params_, {10, 10, 10, 20}), ValidationError);
  EXPECT_THROW(encode_prompt(*params_, {10, 20, 20, 19}), ValidationError);
  EXPECT_THROW(encode_prompt(*params_, {0, 0, 65, 10}), ValidationError);
}

TEST_F(DefaultModel, PriorAndPosteriorHeads) {
  const AnnotatedSample s = sample_for(params_->config, 2);
  const ImageEmbedding emb = encode_image(*params_, s.image);
  const GaussianDiag prior = prior_forward(*params_, emb);
  EXPECT_EQ(prior.dim(), 6);
  EXPECT_EQ(static_cast<int>(prior.log_var.size()), 6);
  for (double v : prior.log_var) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(prior, prior_forward(*params_, emb));

  const GaussianDiag post = posterior_forward(*params_, emb, s.annotations[0]);
  EXPECT_EQ(post.dim(), 6);
  EXPECT_EQ(post, posterior_forward(*params_, emb, s.annotations[0]));
  const GaussianDiag empty = posterior_forward(*params_, emb, BinaryMask(64, 64, 0));
  EXPECT_NO_THROW(empty.validate());

  BinaryMask bad(64, 64, 0);
  bad.values[5] = 7;
  EXPECT_THROW(posterior_forward(*params_, emb, bad), ValidationError);
  EXPECT_THROW(prior_forward(*params_, ImageEmbedding{Tensor({64, 4, 4})}), DimensionError);
}

TEST_F(DefaultModel, InjectLatent) {
  const PromptEmbedding prompt = encode_prompt(*params_, {5, 5, 20, 20});
  const std::vector<double> zero(6, 0.0), any{1.0, -2.0, 0.5, 3.0, -1.0, 0.2};
  EXPECT_EQ(inject_latent(*params_, zero, prompt.sparse).tokens, prompt.sparse.tokens);
  EXPECT_EQ(inject_latent(*params_, any, prompt.sparse).tokens, prompt.sparse.tokens);
  EXPECT_THROW(inject_latent(*params_, std::vector<double>(5, 0.0), prompt.sparse), DimensionError);

  // Zero tokens plus projected vector v: every row equals v.
  const ModelParams live = with_live_projector(*params_, 3);
  const SparseTokens zeros{Tensor({2, 64})};
  const Tensor out = inject_latent(live, any, zeros).tokens;
  for (int c = 0; c < 64; ++c) EXPECT_EQ(out[static_cast<std::size_t>(c)], out[static_cast<std::size_t>(64 + c)]);
  EXPECT_NE(out, zeros.tokens);
}

TEST_F(DefaultModel, DecodeShapeDeterminismAndDropout) {
  const AnnotatedSample s = sample_for(params_->config, 4);
  const ImageEmbedding emb = encode_image(*params_, s.image);
  const PromptEmbedding prompt = encode_prompt(*params_, s.box);
  const Logits a = decode(*params_, emb, prompt.sparse, prompt.dense, false);
  EXPECT_EQ(a.height, 64);
  EXPECT_EQ(a.width, 64);
  EXPECT_EQ(a, decode(*params_, emb, prompt.sparse, prompt.dense, false));

  std::mt19937_64 rng(5);
  const Logits d1 = decode(*params_, emb, prompt.sparse, prompt.dense, true, &rng);
  const Logits d2 = decode(*params_, emb, prompt.sparse, prompt.dense, true, &rng);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < d1.size(); ++i) max_diff = std::max(max_diff, std::abs(d1.values[i] - d2.values[i]));
  EXPECT_GT(max_diff, 0.0);
  EXPECT_THROW(decode(*params_, emb, prompt.sparse, prompt.dense, true, nullptr), ValidationError);
}

TEST_F(DefaultModel, ForwardTrainShapes) {
  const AnnotatedSample s = sample_for(params_->config, 6);
  const TrainOutputs out = forward_train(*params_, s, s.annotations[0], std::vector<double>(6, 0.3));
  EXPECT_EQ(out.logits.height, 64);
  EXPECT_EQ(out.posterior.dim(), 6);
  EXPECT_EQ(out.prior.dim(), 6);
  EXPECT_THROW(forward_train(*params_, s, s.annotations[0], std::vector<double>(4, 0.0)), DimensionError);
}

TEST_F(DefaultModel, ZeroLatentIdentityAtInitialization) {
  std::mt19937_64 pick(7);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const AnnotatedSample s = sample_for(params_->config, seed);
    std::mt19937_64 rng(seed * 31);
    const std::vector<BinaryMask> masks = forward_sample(*params_, s.image, s.box, 8, rng);
    ASSERT_EQ(masks.size(), 8u);
    for (const BinaryMask& m : masks) EXPECT_EQ(m, masks[0]);
    EXPECT_EQ(masks[0], predict_at_prior_mean(*params_, s.image, s.box));
  }
}

TEST_F(DefaultModel, SamplingEncodesOnce) {
  const AnnotatedSample s = sample_for(params_->config, 8);
  std::mt19937_64 rng(9);
  const EncoderCallCounts before = encoder_calls();
  forward_sample(*params_, s.image, s.box, 5, rng);
  const EncoderCallCounts after = encoder_calls();
  EXPECT_EQ(after.image - before.image, 1u);
  EXPECT_EQ(after.prompt - before.prompt, 1u);
}

TEST_F(DefaultModel, SampleCountValidation) {
  const AnnotatedSample s = sample_for(params_->config, 10);
  std::mt19937_64 rng(1);
  EXPECT_THROW(forward_sample(*params_, s.image, s.box, 0, rng), ValidationError);
  EXPECT_TRUE(forward_sample(*params_, s.image, s.box, 1, rng).size() == 1);
}

TEST(Model, LiveProjectorSamplesVary) {
  const ModelParams p = with_live_projector(init_params(ModelConfig{}, 0), 11);
  const AnnotatedSample s = sample_for(p.config, 12);
  std::mt19937_64 rng(13);
  const ImageEmbedding emb = encode_image(p, s.image);
  const PromptEmbedding prompt = encode_prompt(p, s.box);
  const std::vector<double> z1{1, 0, 0, 0, 0, 0}, z2{-1, 0, 0, 0, 0, 0};
  EXPECT_NE(decode(p, emb, inject_latent(p, z1, prompt.sparse), prompt.dense, false),
            decode(p, emb, inject_latent(p, z2, prompt.sparse), prompt.dense, false));
}

TEST(Model, InitIsSeededAndProjectorOutputIsZero) {
  const ModelParams a = init_params(ModelConfig::tiny(), 5);
  EXPECT_EQ(a, init_params(ModelConfig::tiny(), 5));
  EXPECT_NE(a, init_params(ModelConfig::tiny(), 6));
  for (const char* name : {"projector.fc2.weight", "projector.fc2.bias"})
    for (double v : a.at(name).values()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(a.all_finite());
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.downscale = 6;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig{};
  c.dropout_p = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig{};
  c.height = 60;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Model, ConfigJsonRoundTrip) {
  ModelConfig c = ModelConfig::tiny();
  c.freeze_decoder = true;
  c.dropout_p = 0.25;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
}

class Checkpoint : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("psam_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(Checkpoint, RoundTripIsBitExact) {
  ModelParams p = with_live_projector(init_params(ModelConfig::tiny(), 3), 4);
  p.tensors.at("decoder.hyper.fc1.bias")[0] = 0.1 + 0.2;  // a value with a long binary expansion
  save_checkpoint(p, dir_ / "a.ckpt");
  EXPECT_EQ(load_checkpoint(dir_ / "a.ckpt"), p);
  EXPECT_FALSE(fs::exists(dir_ / "a.ckpt.tmp"));
}

TEST_F(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), IoError);
  std::ofstream(dir_ / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir_ / "junk.ckpt"), IoError);

  save_checkpoint(init_params(ModelConfig::tiny(), 1), dir_ / "t.ckpt");
  const auto size = fs::file_size(dir_ / "t.ckpt");
  fs::resize_file(dir_ / "t.ckpt", size - 100);
  EXPECT_THROW(load_checkpoint(dir_ / "t.ckpt"), IoError);
}

TEST_F(Checkpoint, RejectsTensorSetMismatch) {
  ModelParams p = init_params(ModelConfig::tiny(), 1);
  p.tensors.erase("decoder.hyper.fc1.bias");
  save_checkpoint(p, dir_ / "m.ckpt");
  EXPECT_THROW(load_checkpoint(dir_ / "m.ckpt"), IoError);
}

TEST(BoundParams, FreezeDecoderLeavesDecoderWithoutGradients) {
  const ModelParams p = gradcheck_model(0);
  const AnnotatedSample s = gradcheck_sample(0);
  ad::Tape tape;
  BoundParams bound(tape, p, true, true);
  for (const auto& [name, var] : bound.vars())
    EXPECT_EQ(tape.requires_grad(var), !ModelParams::is_decoder(name)) << name;
}

}  // namespace
}  // namespace psam
