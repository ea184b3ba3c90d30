#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "psam/data.hpp"
#include "psam/errors.hpp"
#include "psam/image_io.hpp"

namespace psam {
namespace {

namespace fs = std::filesystem;

bool subset(const BinaryMask& inner, const BinaryMask& outer) {
  for (std::size_t i = 0; i < inner.size(); ++i)
    if (inner.values[i] && !outer.values[i]) return false;
  return true;
}

GeneratorConfig small_config(int n = 20) {
  GeneratorConfig c;
  c.n_samples = n;
  return c;
}

TEST(GenSynthetic, DeterministicAndSeedSensitive) {
  const GeneratorConfig c = small_config();
  EXPECT_EQ(gen_synthetic(c, 4), gen_synthetic(c, 4));
  EXPECT_NE(gen_synthetic(c, 4).train.samples[0].image, gen_synthetic(c, 5).train.samples[0].image);
}

TEST(GenSynthetic, ValidationErrorsNameTheField) {
  GeneratorConfig c = small_config();
  c.n_samples = 0;
  try {
    gen_synthetic(c, 0);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("n_samples"), std::string::npos);
  }
  c = small_config();
  c.p_miss = 1.0;
  EXPECT_THROW(gen_synthetic(c, 0), ValidationError);
  c = small_config();
  c.p_miss = -0.1;
  EXPECT_THROW(gen_synthetic(c, 0), ValidationError);
}

TEST(GenSynthetic, NoAmbiguityGivesIdenticalMasks) {
  GeneratorConfig c = small_config();
  c.threshold_spread = 0.0;
  c.p_miss = 0.0;
  const SplitDatasets ds = gen_synthetic(c, 1);
  for (Split s : {Split::train, Split::val, Split::test})
    for (const AnnotatedSample& smp : ds.get(s).samples)
      for (const BinaryMask& m : smp.annotations) EXPECT_EQ(m, smp.annotations[0]);
}

TEST(GenSynthetic, MasksAreNestedByThreshold) {
  GeneratorConfig c = small_config(60);
  c.p_miss = 0.0;
  const SplitDatasets ds = gen_synthetic(c, 2);
  for (Split s : {Split::train, Split::val, Split::test})
    for (const AnnotatedSample& smp : ds.get(s).samples) {
      const std::vector<double>& tau = smp.oracle->thresholds;
      for (std::size_t a = 0; a < tau.size(); ++a)
        for (std::size_t b = 0; b < tau.size(); ++b)
          if (tau[a] <= tau[b]) EXPECT_TRUE(subset(smp.annotations[b], smp.annotations[a])) << smp.id;
    }
}

TEST(GenSynthetic, SplitsAreDisjointAndProportional) {
  const SplitDatasets ds = gen_synthetic(small_config(200), 3);
  EXPECT_EQ(ds.train.samples.size(), 144u);
  EXPECT_EQ(ds.val.samples.size(), 28u);
  EXPECT_EQ(ds.test.samples.size(), 28u);
  std::set<int> ids;
  for (Split s : {Split::train, Split::val, Split::test})
    for (const AnnotatedSample& smp : ds.get(s).samples) EXPECT_TRUE(ids.insert(smp.id).second);
  EXPECT_EQ(ids.size(), 200u);
  EXPECT_EQ(*ids.begin(), 0);
  EXPECT_EQ(*ids.rbegin(), 199);
}

TEST(GenSynthetic, SamplesMatchTheirIndexStream) {
  const GeneratorConfig c = small_config();
  const SplitDatasets ds = gen_synthetic(c, 9);
  for (const AnnotatedSample& smp : ds.test.samples) EXPECT_EQ(smp, generate_sample(c, 9, smp.id));
}

TEST(GenSynthetic, EverySampleSatisfiesInvariantsAndOracle) {
  GeneratorConfig c;
  c.n_samples = 1000;
  c.height = c.width = 32;
  const SplitDatasets ds = gen_synthetic(c, 6);
  std::size_t fallbacks = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    EXPECT_NO_THROW(ds.get(s).validate());
    for (const AnnotatedSample& smp : ds.get(s).samples) {
      EXPECT_NO_THROW(smp.validate());
      ASSERT_TRUE(smp.oracle.has_value());
      EXPECT_EQ(smp.annotations.size(), 4u);
      for (double v : smp.image.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      for (int k = 0; k < 4; ++k) {
        const BinaryMask again = render_annotation(*smp.oracle, k, 32, 32);
        EXPECT_EQ(again, smp.annotations[static_cast<std::size_t>(k)]);
        if (smp.oracle->missed[static_cast<std::size_t>(k)]) EXPECT_EQ(count_foreground(again), 0u);
      }
      fallbacks += smp.oracle->fallback_box;
    }
  }
  // All four annotators miss with probability 1e-4 per sample.
  EXPECT_LE(fallbacks, 5u);
}

TEST(GenSynthetic, MissRateIsNearConfigured) {
  GeneratorConfig c;
  c.n_samples = 500;
  c.height = c.width = 16;
  const SplitDatasets ds = gen_synthetic(c, 8);
  int misses = 0, total = 0;
  for (Split s : {Split::train, Split::val, Split::test})
    for (const AnnotatedSample& smp : ds.get(s).samples)
      for (bool m : smp.oracle->missed) {
        misses += m;
        ++total;
      }
  EXPECT_NEAR(static_cast<double>(misses) / total, 0.1, 0.03);
}

TEST(DeriveBox, SinglePixelTightBox) {
  BinaryMask m(20, 20, 0);
  m.at(12, 10) = 1;
  std::mt19937_64 rng(0);
  const DerivedBox b = derive_box({m}, 0, rng);
  EXPECT_EQ(b.box, (BoxPrompt{10, 12, 11, 13}));
  EXPECT_FALSE(b.fallback);
}

TEST(DeriveBox, NestedMasksGiveLargestMaskBox) {
  BinaryMask big(20, 20, 0), small(20, 20, 0);
  for (int y = 3; y < 15; ++y)
    for (int x = 4; x < 9; ++x) big.at(y, x) = 1;
  small.at(6, 6) = 1;
  std::mt19937_64 rng(0);
  EXPECT_EQ(derive_box({small, big}, 0, rng).box, (BoxPrompt{4, 3, 9, 15}));
}

TEST(DeriveBox, JitterIsBoundedClampedAndSeeded) {
  BinaryMask m(20, 20, 0);
  for (int y = 1; y < 6; ++y)
    for (int x = 8; x < 12; ++x) m.at(y, x) = 1;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const BoxPrompt box = derive_box({m}, 3, a).box;
    EXPECT_EQ(box, derive_box({m}, 3, b).box);
    EXPECT_NO_THROW(box.validate(20, 20));
    EXPECT_LE(std::abs(box.x1 - 8), 3);
    EXPECT_LE(std::abs(box.x2 - 12), 3);
    EXPECT_LE(std::abs(box.y2 - 6), 3);
    EXPECT_GE(box.y1, 0);
    EXPECT_LE(box.y1, 4);
  }
}

TEST(DeriveBox, EmptyUnionFallsBackToCenteredBox) {
  std::mt19937_64 rng(0);
  const DerivedBox b = derive_box({BinaryMask(16, 24, 0)}, 2, rng);
  EXPECT_TRUE(b.fallback);
  EXPECT_EQ(b.box, (BoxPrompt{6, 4, 18, 12}));
}

TEST(Quantize, IsIdempotentAndSixteenBit) {
  for (double v : {0.0, 1.0, 0.123456789, 0.5}) {
    const double q = quantize_intensity(v);
    EXPECT_EQ(quantize_intensity(q), q);
    EXPECT_NEAR(q, v, 0.5 / 65535.0 + 1e-15);
  }
  EXPECT_EQ(quantize_intensity(-0.2), 0.0);
  EXPECT_EQ(quantize_intensity(1.7), 1.0);
}

class DatasetDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("psam_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(DatasetDir, RoundTripIsExact) {
  GeneratorConfig c = small_config(12);
  c.height = c.width = 32;
  const SplitDatasets ds = gen_synthetic(c, 3);
  save_dataset(ds, dir_);
  EXPECT_TRUE(fs::exists(dir_ / "manifest.json"));
  EXPECT_FALSE(fs::exists(dir_ / "manifest.json.tmp"));
  EXPECT_EQ(load_dataset(dir_), ds);
}

TEST_F(DatasetDir, ManifestFields) {
  save_dataset(gen_synthetic(small_config(5), 3), dir_);
  std::ifstream is(dir_ / "manifest.json");
  const nlohmann::json j = nlohmann::json::parse(is);
  for (const char* key : {"schema_version", "H", "W", "A", "seed", "generator", "splits", "samples"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["samples"][0].contains("box"));
}

TEST_F(DatasetDir, MissingManifestIsAnError) {
  save_dataset(gen_synthetic(small_config(5), 3), dir_);
  fs::remove(dir_ / "manifest.json");
  EXPECT_THROW(load_dataset(dir_), IoError);
}

TEST_F(DatasetDir, NonBinaryMaskPixelIsAValidationError) {
  const SplitDatasets ds = gen_synthetic(small_config(5), 3);
  save_dataset(ds, dir_);
  const int id = ds.train.samples[0].id;
  const fs::path mask = dir_ / "masks" / (std::to_string(id) + "_0.png");
  png::GrayImage img = png::read_gray(mask);
  img.samples[0] = 17;
  png::write_gray(mask, img);
  try {
    load_dataset(dir_);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(mask.filename().string()), std::string::npos);
  }
}

TEST_F(DatasetDir, CorruptImageNamesTheFile) {
  const SplitDatasets ds = gen_synthetic(small_config(5), 3);
  save_dataset(ds, dir_);
  const fs::path image = dir_ / "images" / (std::to_string(ds.val.samples[0].id) + ".png");
  std::ofstream(image, std::ios::trunc) << "garbage";
  try {
    load_dataset(dir_);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find(image.filename().string()), std::string::npos);
  }
}

TEST_F(DatasetDir, ShapeMismatchVsManifestIsAnError) {
  const SplitDatasets ds = gen_synthetic(small_config(5), 3);
  save_dataset(ds, dir_);
  const fs::path image = dir_ / "images" / (std::to_string(ds.train.samples.at(0).id) + ".png");
  png::GrayImage small;
  small.height = 8;
  small.width = 8;
  small.bit_depth = 16;
  small.samples.assign(64, 0);
  png::write_gray(image, small);
  EXPECT_ANY_THROW(load_dataset(dir_));
}

TEST(Dataset, ValidateRejectsEmptyAndMixedShapes) {
  Dataset empty;
  EXPECT_THROW(empty.validate(), ValidationError);
  GeneratorConfig a = small_config(2), b = small_config(2);
  b.height = b.width = 32;
  Dataset mixed{{generate_sample(a, 0, 0), generate_sample(b, 0, 1)}, Split::train};
  EXPECT_THROW(mixed.validate(), ValidationError);
}

TEST(Split, ParseAndPrint) {
  for (Split s : {Split::train, Split::val, Split::test}) EXPECT_EQ(parse_split(to_string(s)), s);
  EXPECT_THROW(parse_split("holdout"), ValidationError);
}

}  // namespace
}  // namespace psam
