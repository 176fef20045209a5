#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbt/model.hpp"

namespace sbt {

inline constexpr std::uint16_t kContainerVersion = 1;

enum class ModuleKind : std::uint8_t {
  kBinaryLinear = 0,
  kBinaryGain = 1,
  kDenseLinear = 2,
  kNorm = 3,
  kPosTable = 4,
  kActivationMask = 5,
};
std::string to_string(ModuleKind k);
ModuleKind parse_module_kind(const std::string& s);

/// LSB-first: element e lives in byte e/8 at bit e%8.
std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> flags);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count);

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes);

/// One module record of the container, decoded.
struct ModuleRecord {
  std::string name;
  ModuleKind kind = ModuleKind::kDenseLinear;
  std::vector<std::uint32_t> dims;
  float alpha = 0.0f;
  std::vector<std::uint8_t> mask_bits;  // packed
  std::vector<std::uint8_t> sign_bits;  // packed, 1 = +1
  std::vector<float> residual;

  std::size_t elements() const;
};

/// Container layout (little-endian):
///   "SBT1" | u16 version | u64 length | u64 ~length | u32 n + config JSON |
///   u32 module count | modules | u32 CRC32 of everything before it.
/// Each module: u16 n + name | u8 kind | u8 rank | u32 dims[rank] | f32 alpha |
///   u32 n + mask bytes | u32 n + sign bytes | u32 n + f32 residual[n].
struct Container {
  nlohmann::json config;  // {"model": ..., "meta": ...}
  std::vector<ModuleRecord> modules;

  std::vector<std::uint8_t> encode() const;
  /// Throws TruncatedError, ChecksumError, VersionError or FormatError.
  static Container decode(std::span<const std::uint8_t> bytes);

  nlohmann::json to_json() const;
  static Container from_json(const nlohmann::json& j);
};

/// Serializes a frozen model; `meta` carries extra data such as
/// normalization statistics.
std::vector<std::uint8_t> pack(const FrozenModel& model, const nlohmann::json& meta = nlohmann::json::object());

struct Unpacked {
  FrozenModel model;
  nlohmann::json meta;
};
Unpacked unpack(std::span<const std::uint8_t> bytes);

Container to_container(const FrozenModel& model, const nlohmann::json& meta = nlohmann::json::object());
Unpacked from_container(const Container& c);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

struct ModuleSize {
  std::string name;
  ModuleKind kind;
  std::uint64_t container_bits = 0;    // mask and sign bits per element, 32 for alpha, 32 per residual
  std::uint64_t information_bits = 0;  // what the cost model counts
};

struct SizeReport {
  std::vector<ModuleSize> modules;
  std::uint64_t container_bits = 0;    // sum over modules
  std::uint64_t information_bits = 0;  // parameter modules only
  std::uint64_t structural_bits = 0;   // stored activation masks
  std::uint64_t overhead_bits = 0;     // header, names, length fields, CRC
  std::uint64_t file_bits = 0;

  nlohmann::json to_json() const;
};

SizeReport size_report(std::span<const std::uint8_t> bytes);

/// Binary-weight inference over a frozen model. Binary linears accumulate
/// the inputs selected by the packed positive and negative bit sets and scale
/// once by alpha. Step-T attention computes only the last row's scores and
/// copies V for the earlier rows.
class PackedRuntime {
 public:
  explicit PackedRuntime(const FrozenModel& model);

  const FrozenModel& model() const { return model_; }
  TensorF infer(const TensorF& x, std::span<const std::uint8_t> valid = {}, bool step_t_fast_path = true) const;

 private:
  struct Linear {
    std::size_t out = 0, in = 0, words = 0;
    bool binary = false;
    float alpha = 0.0f;
    std::vector<std::uint64_t> pos, neg;  // out x words
    std::vector<float> weight;  // dense only
    std::vector<float> bias;
  };
  static Linear build(const FrozenLinear& f);
  static void apply(const Linear& l, const float* x, float* y, std::size_t rows);
  TensorF apply(const Linear& l, const TensorF& x) const;
  TensorF step_t_attention(std::size_t layer, const TensorF& z, std::span<const std::uint8_t> key_valid) const;

  FrozenModel model_;
  Linear input_, decoder_;
  struct Layer {
    Linear q, k, v, o, ff1, ff2;
  };
  std::vector<Layer> layers_;
};

}  // namespace sbt
