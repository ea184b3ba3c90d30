// Checkpoint layout (little-endian):
//   "PSAMCKPT" | u32 version | u64 config length | config JSON
//   u32 tensor count, then per tensor:
//   u32 name length | name | u32 rank | i32 extents[rank] | f64 values[numel]
#include <bit>
#include <cstring>
#include <fstream>

#include "psam/errors.hpp"
#include "psam/model.hpp"

namespace psam {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'S', 'A', 'M', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(path.string() + ": truncated checkpoint");
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::filesystem::path& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError(path.string() + ": truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(tmp.string() + ": cannot open for writing");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string config = nlohmann::json(params.config).dump();
    put<std::uint64_t>(os, config.size());
    os.write(config.data(), static_cast<std::streamsize>(config.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) put<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw IoError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open checkpoint");
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError(path.string() + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  ModelParams params;
  const auto config_len = get<std::uint64_t>(is, path);
  if (config_len > (1u << 20)) throw IoError(path.string() + ": corrupt config block");
  try {
    params.config = nlohmann::json::parse(get_string(is, config_len, path)).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt config block: " + e.what());
  }
  params.config.validate();
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, path);
    if (name_len > 4096) throw IoError(path.string() + ": corrupt tensor name");
    std::string name = get_string(is, name_len, path);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw IoError(path.string() + ": corrupt rank for " + name);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = get<std::int32_t>(is, path);
      if (d < 0 || d > (1 << 24)) throw IoError(path.string() + ": corrupt extent for " + name);
      shape.push_back(d);
    }
    Tensor t(shape);
    if (t.size() && !is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw IoError(path.string() + ": truncated tensor " + name);
    params.tensors.emplace(std::move(name), std::move(t));
  }
  // Catch files written by a different architecture.
  const ModelParams reference = init_params(params.config, 0);
  if (reference.tensors.size() != params.tensors.size())
    throw IoError(path.string() + ": tensor set does not match the stored config");
  for (const auto& [name, t] : reference.tensors) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end() || it->second.shape() != t.shape())
      throw IoError(path.string() + ": tensor " + name + " missing or misshapen");
  }
  return params;
}

}  // namespace psam
