#include "psam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "psam/errors.hpp"
#include "psam/image_io.hpp"

namespace psam {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kBackground = 0.15;
constexpr double kBlobAmplitude = 0.7;
constexpr double kThresholdCenter = 0.5;

std::mt19937_64 stream_for(std::uint64_t seed, std::uint64_t index, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), purpose};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::string image_name(int id) { return "images/" + std::to_string(id) + ".png"; }
std::string mask_name(int id, int k) { return "masks/" + std::to_string(id) + "_" + std::to_string(k) + ".png"; }

json oracle_to_json(const OracleMeta& m) {
  return json{{"thresholds", m.thresholds}, {"missed", m.missed},           {"center_y", m.center_y},
              {"center_x", m.center_x},     {"sigma_major", m.sigma_major}, {"sigma_minor", m.sigma_minor},
              {"angle", m.angle},           {"fallback_box", m.fallback_box}};
}

OracleMeta oracle_from_json(const json& j) {
  OracleMeta m;
  m.thresholds = j.at("thresholds").get<std::vector<double>>();
  m.missed = j.at("missed").get<std::vector<bool>>();
  m.center_y = j.at("center_y").get<double>();
  m.center_x = j.at("center_x").get<double>();
  m.sigma_major = j.at("sigma_major").get<double>();
  m.sigma_minor = j.at("sigma_minor").get<double>();
  m.angle = j.at("angle").get<double>();
  m.fallback_box = j.at("fallback_box").get<bool>();
  return m;
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

void Dataset::validate() const {
  if (samples.empty()) throw ValidationError(to_string(split) + " dataset is empty");
  for (const AnnotatedSample& s : samples) {
    s.validate();
    if (s.height() != height() || s.width() != width() || static_cast<int>(s.annotations.size()) != annotators())
      throw ValidationError(to_string(split) + " dataset mixes extents or annotator counts (sample " +
                            std::to_string(s.id) + ")");
  }
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("generator config: " + m); };
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (height < 8 || width < 8) fail("height and width must be >= 8");
  if (annotators < 1) fail("annotators must be >= 1");
  if (!(p_miss >= 0.0 && p_miss < 1.0)) fail("p_miss must lie in [0, 1)");
  if (!(threshold_spread >= 0.0 && threshold_spread <= 0.96)) fail("threshold_spread must lie in [0, 0.96]");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (box_jitter < 0) fail("box_jitter must be >= 0");
  if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0))
    fail("split fractions must be non-negative with train > 0 and train + val <= 1");
}

void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"n_samples", c.n_samples},
           {"height", c.height},
           {"width", c.width},
           {"annotators", c.annotators},
           {"p_miss", c.p_miss},
           {"threshold_spread", c.threshold_spread},
           {"noise_sigma", c.noise_sigma},
           {"box_jitter", c.box_jitter},
           {"train_fraction", c.train_fraction},
           {"val_fraction", c.val_fraction}};
}

void from_json(const json& j, GeneratorConfig& c) {
  const GeneratorConfig d;
  c.n_samples = j.value("n_samples", d.n_samples);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.annotators = j.value("annotators", d.annotators);
  c.p_miss = j.value("p_miss", d.p_miss);
  c.threshold_spread = j.value("threshold_spread", d.threshold_spread);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.box_jitter = j.value("box_jitter", d.box_jitter);
  c.train_fraction = j.value("train_fraction", d.train_fraction);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
}

const Dataset& SplitDatasets::get(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return train;
}

double quantize_intensity(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0; }

std::vector<double> blob_profile(const OracleMeta& m, int height, int width) {
  std::vector<double> g(static_cast<std::size_t>(height) * width);
  const double c = std::cos(m.angle), s = std::sin(m.angle);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dy = y + 0.5 - m.center_y, dx = x + 0.5 - m.center_x;
      const double u = (c * dx + s * dy) / m.sigma_major;
      const double v = (-s * dx + c * dy) / m.sigma_minor;
      g[static_cast<std::size_t>(y) * width + x] = std::exp(-0.5 * (u * u + v * v));
    }
  return g;
}

BinaryMask render_annotation(const OracleMeta& m, int annotator, int height, int width) {
  BinaryMask mask(height, width, 0);
  const auto k = static_cast<std::size_t>(annotator);
  if (k >= m.thresholds.size() || k >= m.missed.size())
    throw ValidationError("oracle record has no annotator " + std::to_string(annotator));
  if (m.missed[k]) return mask;
  const std::vector<double> g = blob_profile(m, height, width);
  for (std::size_t i = 0; i < g.size(); ++i) mask.values[i] = g[i] >= m.thresholds[k] ? 1 : 0;
  return mask;
}

DerivedBox derive_box(const std::vector<BinaryMask>& annotations, int jitter, std::mt19937_64& rng) {
  if (annotations.empty()) throw ValidationError("derive_box: no annotations");
  if (jitter < 0) throw ValidationError("derive_box: jitter must be >= 0");
  const int h = annotations[0].height, w = annotations[0].width;
  int x1 = w, y1 = h, x2 = 0, y2 = 0;
  for (const BinaryMask& m : annotations) {
    if (m.height != h || m.width != w) throw DimensionError("derive_box: annotation extents differ");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (m.at(y, x)) {
          x1 = std::min(x1, x);
          y1 = std::min(y1, y);
          x2 = std::max(x2, x + 1);
          y2 = std::max(y2, y + 1);
        }
  }
  DerivedBox out;
  if (x2 == 0) {
    out.fallback = true;
    out.box = {w / 4, h / 4, w / 4 + std::max(1, w / 2), h / 4 + std::max(1, h / 2)};
    return out;
  }
  std::uniform_int_distribution<int> shift(-jitter, jitter);
  const int jx1 = std::clamp(x1 + shift(rng), 0, w - 1);
  const int jy1 = std::clamp(y1 + shift(rng), 0, h - 1);
  const int jx2 = std::clamp(x2 + shift(rng), 1, w);
  const int jy2 = std::clamp(y2 + shift(rng), 1, h);
  out.box = {jx1, jy1, jx2, jy2};
  if (out.box.x1 >= out.box.x2) out.box.x1 = std::min(x1, jx1), out.box.x2 = std::max(x2, jx2);
  if (out.box.y1 >= out.box.y2) out.box.y1 = std::min(y1, jy1), out.box.y2 = std::max(y2, jy2);
  return out;
}

AnnotatedSample generate_sample(const GeneratorConfig& cfg, std::uint64_t seed, int index) {
  std::mt19937_64 rng = stream_for(seed, static_cast<std::uint64_t>(index), 1);
  const int h = cfg.height, w = cfg.width;
  const double scale = std::min(h, w) / 64.0;

  OracleMeta m;
  m.center_y = uniform(rng, 0.3 * h, 0.7 * h);
  m.center_x = uniform(rng, 0.3 * w, 0.7 * w);
  m.sigma_major = scale * uniform(rng, 3.5, 7.0);
  m.sigma_minor = m.sigma_major * uniform(rng, 0.6, 1.0);
  m.angle = uniform(rng, 0.0, std::numbers::pi);
  std::bernoulli_distribution miss(cfg.p_miss);
  for (int k = 0; k < cfg.annotators; ++k) {
    const double half = 0.5 * cfg.threshold_spread;
    m.thresholds.push_back(half > 0 ? uniform(rng, kThresholdCenter - half, kThresholdCenter + half) : kThresholdCenter);
    m.missed.push_back(miss(rng));
  }

  AnnotatedSample s;
  s.id = index;
  const std::vector<double> g = blob_profile(m, h, w);
  s.image = Image(h, w);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    s.image.values[i] = quantize_intensity(kBackground + kBlobAmplitude * g[i] + cfg.noise_sigma * noise(rng));
  for (int k = 0; k < cfg.annotators; ++k) s.annotations.push_back(render_annotation(m, k, h, w));
  const DerivedBox box = derive_box(s.annotations, cfg.box_jitter, rng);
  s.box = box.box;
  m.fallback_box = box.fallback;
  s.oracle = std::move(m);
  return s;
}

SplitDatasets gen_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int n = cfg.n_samples;
  int n_train = std::max(1, static_cast<int>(std::lround(n * cfg.train_fraction)));
  int n_val = static_cast<int>(std::lround(n * cfg.val_fraction));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng = stream_for(seed, 0, 2);
  std::shuffle(order.begin(), order.end(), split_rng);
  std::sort(order.begin(), order.begin() + n_train);
  std::sort(order.begin() + n_train, order.begin() + n_train + n_val);
  std::sort(order.begin() + n_train + n_val, order.end());

  SplitDatasets out;
  out.config = cfg;
  out.seed = seed;
  for (int i = 0; i < n; ++i) {
    Dataset& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.samples.push_back(generate_sample(cfg, seed, order[static_cast<std::size_t>(i)]));
  }
  return out;
}

// ---- on-disk format ----

void save_dataset(const SplitDatasets& data, const fs::path& dir) {
  if (data.total() == 0) throw ValidationError("save_dataset: nothing to save");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const AnnotatedSample& first = data.train.samples.empty()
                                     ? (data.val.samples.empty() ? data.test.samples.at(0) : data.val.samples[0])
                                     : data.train.samples[0];
  const int h = first.height(), w = first.width(), a = static_cast<int>(first.annotations.size());

  json samples = json::array();
  json splits = json::object();
  for (Split split : {Split::train, Split::val, Split::test}) {
    json ids = json::array();
    for (const AnnotatedSample& s : data.get(split).samples) {
      s.validate();
      if (s.height() != h || s.width() != w || static_cast<int>(s.annotations.size()) != a)
        throw ValidationError("save_dataset: sample " + std::to_string(s.id) + " differs in extent or annotators");
      png::GrayImage img{h, w, 16, {}};
      img.samples.reserve(s.image.values.size());
      for (double v : s.image.values) img.samples.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0)));
      png::write_gray(dir / image_name(s.id), img);
      json masks = json::array();
      for (int k = 0; k < a; ++k) {
        png::GrayImage m{h, w, 8, {}};
        m.samples.reserve(s.annotations[static_cast<std::size_t>(k)].values.size());
        for (std::uint8_t v : s.annotations[static_cast<std::size_t>(k)].values) m.samples.push_back(v ? 255 : 0);
        png::write_gray(dir / mask_name(s.id, k), m);
        masks.push_back(mask_name(s.id, k));
      }
      json rec{{"id", s.id},
               {"split", to_string(split)},
               {"box", {s.box.x1, s.box.y1, s.box.x2, s.box.y2}},
               {"annotators", a},
               {"image", image_name(s.id)},
               {"masks", masks}};
      if (s.oracle) rec["oracle"] = oracle_to_json(*s.oracle);
      samples.push_back(std::move(rec));
      ids.push_back(s.id);
    }
    splits[to_string(split)] = std::move(ids);
  }
  const json manifest{{"schema_version", kDatasetSchemaVersion},
                      {"H", h},
                      {"W", w},
                      {"A", a},
                      {"seed", data.seed},
                      {"generator", data.config},
                      {"splits", splits},
                      {"samples", samples}};
  // Written last and renamed into place so a failed run never leaves a partial manifest.
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw IoError(tmp.string() + ": cannot open for writing");
    os << manifest.dump(1) << '\n';
    if (!os) throw IoError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, dir / "manifest.json");
}

SplitDatasets load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IoError(manifest_path.string() + ": missing manifest");
  json manifest;
  try {
    std::ifstream is(manifest_path);
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": unreadable manifest: " + e.what());
  }
  SplitDatasets out;
  try {
    if (manifest.at("schema_version").get<int>() != kDatasetSchemaVersion)
      throw IoError(manifest_path.string() + ": unsupported schema_version");
    const int h = manifest.at("H").get<int>(), w = manifest.at("W").get<int>(), a = manifest.at("A").get<int>();
    out.seed = manifest.value("seed", std::uint64_t{0});
    if (manifest.contains("generator")) out.config = manifest.at("generator").get<GeneratorConfig>();
    for (const json& rec : manifest.at("samples")) {
      AnnotatedSample s;
      s.id = rec.at("id").get<int>();
      const auto box = rec.at("box").get<std::vector<int>>();
      if (box.size() != 4) throw IoError(manifest_path.string() + ": sample " + std::to_string(s.id) + " box needs 4 values");
      s.box = {box[0], box[1], box[2], box[3]};
      const fs::path img_path = dir / rec.at("image").get<std::string>();
      const png::GrayImage img = png::read_gray(img_path);
      if (img.height != h || img.width != w || img.bit_depth != 16)
        throw IoError(img_path.string() + ": expected a 16-bit " + std::to_string(h) + "x" + std::to_string(w) + " image");
      s.image = Image(h, w);
      for (std::size_t i = 0; i < img.samples.size(); ++i) s.image.values[i] = img.samples[i] / 65535.0;
      const auto masks = rec.at("masks").get<std::vector<std::string>>();
      if (static_cast<int>(masks.size()) != a)
        throw IoError(manifest_path.string() + ": sample " + std::to_string(s.id) + " lists " +
                      std::to_string(masks.size()) + " masks, manifest A = " + std::to_string(a));
      for (const std::string& name : masks) {
        const fs::path mask_path = dir / name;
        const png::GrayImage m = png::read_gray(mask_path);
        if (m.height != h || m.width != w || m.bit_depth != 8)
          throw IoError(mask_path.string() + ": expected an 8-bit " + std::to_string(h) + "x" + std::to_string(w) + " mask");
        BinaryMask mask(h, w);
        for (std::size_t i = 0; i < m.samples.size(); ++i) {
          if (m.samples[i] != 0 && m.samples[i] != 255)
            throw ValidationError(mask_path.string() + ": pixel value " + std::to_string(m.samples[i]) +
                                  " is not 0 or 255");
          mask.values[i] = m.samples[i] ? 1 : 0;
        }
        s.annotations.push_back(std::move(mask));
      }
      if (rec.contains("oracle")) s.oracle = oracle_from_json(rec.at("oracle"));
      s.validate();
      const Split split = parse_split(rec.at("split").get<std::string>());
      (split == Split::train ? out.train : split == Split::val ? out.val : out.test).samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace psam
