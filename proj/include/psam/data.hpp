#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "psam/sample.hpp"

namespace psam {

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Dataset {
  std::vector<AnnotatedSample> samples;
  Split split = Split::train;

  // Non-empty, every sample valid, shared H / W / annotator count.
  void validate() const;
  int height() const { return samples.at(0).height(); }
  int width() const { return samples.at(0).width(); }
  int annotators() const { return static_cast<int>(samples.at(0).annotations.size()); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GeneratorConfig {
  int n_samples = 200;
  int height = 64;
  int width = 64;
  int annotators = 4;
  double p_miss = 0.1;
  // Width of the uniform window of annotator thresholds around 0.5 on the blob profile.
  double threshold_spread = 0.8;
  double noise_sigma = 0.05;
  int box_jitter = 2;
  double train_fraction = 0.72;
  double val_fraction = 0.14;

  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// A generated corpus partitioned into disjoint splits. Sample ids are global.
struct SplitDatasets {
  GeneratorConfig config;
  std::uint64_t seed = 0;
  Dataset train{{}, Split::train};
  Dataset val{{}, Split::val};
  Dataset test{{}, Split::test};

  const Dataset& get(Split s) const;
  std::size_t total() const { return train.samples.size() + val.samples.size() + test.samples.size(); }
  friend bool operator==(const SplitDatasets&, const SplitDatasets&) = default;
};

SplitDatasets gen_synthetic(const GeneratorConfig& config, std::uint64_t seed);

// One sample, generated with the stream of (seed, index) used by gen_synthetic.
AnnotatedSample generate_sample(const GeneratorConfig& config, std::uint64_t seed, int index);

// Noiseless blob profile in (0, 1] described by the oracle record.
std::vector<double> blob_profile(const OracleMeta& meta, int height, int width);
// Annotator k's mask as recomputed from the oracle record.
BinaryMask render_annotation(const OracleMeta& meta, int annotator, int height, int width);

struct DerivedBox {
  BoxPrompt box;
  bool fallback = false;  // the union was empty; a centered half-size box was used
};
// Tight box around the union of the masks, each side jittered by a uniform integer in [-jitter, jitter].
DerivedBox derive_box(const std::vector<BinaryMask>& annotations, int jitter, std::mt19937_64& rng);

// Directory layout: manifest.json, images/{id}.png (16-bit), masks/{id}_{k}.png (0 / 255).
inline constexpr int kDatasetSchemaVersion = 1;
void save_dataset(const SplitDatasets& data, const std::filesystem::path& dir);
SplitDatasets load_dataset(const std::filesystem::path& dir);

// Intensity quantization used on disk.
double quantize_intensity(double v);

}  // namespace psam
