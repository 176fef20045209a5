#include "sbt/artifact.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "sbt/error.hpp"
#include "sbt/ops.hpp"

namespace sbt {

namespace {

constexpr char kMagic[4] = {'S', 'B', 'T', '1'};
// magic + version + length + ~length
constexpr std::size_t kFixedHeader = 4 + 2 + 8 + 8;

constexpr const char* kKindNames[] = {"binary_linear", "binary_gain", "dense_linear",
                                      "norm",          "pos_table",   "activation_mask"};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw TruncatedError("container ends inside a record");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t n, const char* what) {
  if (n > 0xffffffffu) throw FormatError(std::string(what) + " too large for the container");
  return static_cast<std::uint32_t>(n);
}

std::string to_hex(std::span<const std::uint8_t> b) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(b.size() * 2);
  for (std::uint8_t v : b) {
    s.push_back(kDigits[v >> 4]);
    s.push_back(kDigits[v & 15]);
  }
  return s;
}

std::vector<std::uint8_t> from_hex(const std::string& s) {
  if (s.size() % 2) throw FormatError("odd-length hex string");
  auto nibble = [](char c) -> std::uint8_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
    throw FormatError(std::string("bad hex digit '") + c + "'");
  };
  std::vector<std::uint8_t> out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint8_t>(nibble(s[2 * i]) << 4 | nibble(s[2 * i + 1]));
  return out;
}

std::vector<std::uint32_t> dims_of(const Shape& s) {
  std::vector<std::uint32_t> d;
  for (std::size_t i = 0; i < s.rank(); ++i) d.push_back(checked_u32(s[i], "dimension"));
  return d;
}

Shape shape_of(const std::vector<std::uint32_t>& dims) {
  if (dims.size() == 1) return Shape{dims[0]};
  if (dims.size() == 2) return Shape{dims[0], dims[1]};
  if (dims.size() == 3) return Shape{dims[0], dims[1], dims[2]};
  throw FormatError("module rank must be 1, 2 or 3");
}

ModuleRecord binary_record(const std::string& name, ModuleKind kind, const EffectiveWeights& e) {
  ModuleRecord r;
  r.name = name;
  r.kind = kind;
  r.dims = dims_of(e.shape);
  r.alpha = e.alpha;
  r.mask_bits = pack_bits(e.mask);
  r.sign_bits = pack_bits(e.sign);
  return r;
}

ModuleRecord linear_record(const FrozenLinear& f) {
  if (f.binary) return binary_record(f.name, ModuleKind::kBinaryLinear, *f.binary);
  if (f.weight.size() != f.out * f.in) throw FormatError("module '" + f.name + "' has no frozen weights");
  ModuleRecord r;
  r.name = f.name;
  r.kind = ModuleKind::kDenseLinear;
  r.dims = {checked_u32(f.out, "dimension"), checked_u32(f.in, "dimension")};
  r.residual.assign(f.weight.values().begin(), f.weight.values().end());
  r.residual.insert(r.residual.end(), f.bias.begin(), f.bias.end());
  return r;
}

ModuleRecord norm_record(const FrozenNorm& n) {
  ModuleRecord r;
  if (n.binary_gain) {
    r = binary_record(n.name, ModuleKind::kBinaryGain, *n.binary_gain);
    r.residual = n.bias;
    return r;
  }
  r.name = n.name;
  r.kind = ModuleKind::kNorm;
  r.dims = {checked_u32(n.gain.size(), "dimension")};
  for (const auto* v : {&n.gain, &n.bias, &n.mean, &n.var}) r.residual.insert(r.residual.end(), v->begin(), v->end());
  return r;
}

void check_bits(const ModuleRecord& r) {
  const std::size_t want = (r.elements() + 7) / 8;
  if (r.mask_bits.size() != want) throw FormatError("module '" + r.name + "': mask bitstream length mismatch");
  if (r.kind != ModuleKind::kActivationMask && r.sign_bits.size() != want)
    throw FormatError("module '" + r.name + "': sign bitstream length mismatch");
}

EffectiveWeights effective_of(const ModuleRecord& r) {
  check_bits(r);
  EffectiveWeights e;
  e.shape = shape_of(r.dims);
  e.alpha = r.alpha;
  e.mask = unpack_bits(r.mask_bits, r.elements());
  e.sign = unpack_bits(r.sign_bits, r.elements());
  return e;
}

FrozenLinear linear_of(const ModuleRecord& r, std::size_t out, std::size_t in) {
  if (r.dims.size() != 2 || r.dims[0] != out || r.dims[1] != in)
    throw FormatError("module '" + r.name + "' does not match the configured shape");
  FrozenLinear f;
  f.name = r.name;
  f.out = out;
  f.in = in;
  if (r.kind == ModuleKind::kBinaryLinear) {
    f.binary = effective_of(r);
    return f;
  }
  if (r.kind != ModuleKind::kDenseLinear) throw FormatError("module '" + r.name + "' is not a linear layer");
  const std::size_t n = out * in;
  if (r.residual.size() != n && r.residual.size() != n + out)
    throw FormatError("module '" + r.name + "': residual holds " + std::to_string(r.residual.size()) + " values");
  f.weight = TensorF(Shape{out, in});
  std::copy(r.residual.begin(), r.residual.begin() + static_cast<std::ptrdiff_t>(n), f.weight.values().begin());
  f.bias.assign(r.residual.begin() + static_cast<std::ptrdiff_t>(n), r.residual.end());
  return f;
}

FrozenNorm norm_of(const ModuleRecord& r, NormKind kind, std::size_t d) {
  if (r.dims.size() != 1 || r.dims[0] != d) throw FormatError("module '" + r.name + "' does not match d");
  FrozenNorm n;
  n.name = r.name;
  n.kind = kind;
  if (r.kind == ModuleKind::kBinaryGain) {
    n.binary_gain = effective_of(r);
    n.bias = r.residual;
    return n;
  }
  if (r.kind != ModuleKind::kNorm) throw FormatError("module '" + r.name + "' is not a norm");
  const std::size_t parts = kind == NormKind::kBatch ? 4 : 2;
  if (r.residual.size() != parts * d) throw FormatError("module '" + r.name + "': residual length mismatch");
  auto part = [&](std::size_t i) {
    return std::vector<float>(r.residual.begin() + static_cast<std::ptrdiff_t>(i * d),
                              r.residual.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  };
  n.gain = part(0);
  n.bias = part(1);
  if (kind == NormKind::kBatch) {
    n.mean = part(2);
    n.var = part(3);
  }
  return n;
}

}  // namespace

std::string to_string(ModuleKind k) {
  const auto i = static_cast<std::size_t>(k);
  return i < std::size(kKindNames) ? kKindNames[i] : "?";
}

ModuleKind parse_module_kind(const std::string& s) {
  for (std::size_t i = 0; i < std::size(kKindNames); ++i)
    if (s == kKindNames[i]) return static_cast<ModuleKind>(i);
  throw FormatError("unknown module kind '" + s + "'");
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> flags) {
  std::vector<std::uint8_t> out((flags.size() + 7) / 8, 0);
  for (std::size_t e = 0; e < flags.size(); ++e)
    if (flags[e]) out[e / 8] |= static_cast<std::uint8_t>(1u << (e % 8));
  return out;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() * 8 < count) throw FormatError("bitstream shorter than its element count");
  std::vector<std::uint8_t> out(count);
  for (std::size_t e = 0; e < count; ++e) out[e] = (bytes[e / 8] >> (e % 8)) & 1u;
  return out;
}

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - off);
    c = crc32(c, bytes.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(c);
}

std::size_t ModuleRecord::elements() const {
  std::size_t n = 1;
  for (auto v : dims) n *= v;
  return n;
}

std::vector<std::uint8_t> Container::encode() const {
  Writer w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.put<std::uint16_t>(kContainerVersion);
  w.put<std::uint64_t>(0);  // length, patched below
  w.put<std::uint64_t>(0);
  const std::string cfg = config.dump();
  w.put<std::uint32_t>(checked_u32(cfg.size(), "config"));
  w.bytes({reinterpret_cast<const std::uint8_t*>(cfg.data()), cfg.size()});
  w.put<std::uint32_t>(checked_u32(modules.size(), "module count"));
  for (const ModuleRecord& m : modules) {
    if (m.name.size() > 0xffff) throw FormatError("module name too long");
    if (m.dims.empty() || m.dims.size() > 3) throw FormatError("module '" + m.name + "' must have rank 1 to 3");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(m.name.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(m.name.data()), m.name.size()});
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.kind));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.dims.size()));
    for (auto d : m.dims) w.put<std::uint32_t>(d);
    w.put<float>(m.alpha);
    w.put<std::uint32_t>(checked_u32(m.mask_bits.size(), "mask"));
    w.bytes(m.mask_bits);
    w.put<std::uint32_t>(checked_u32(m.sign_bits.size(), "sign"));
    w.bytes(m.sign_bits);
    w.put<std::uint32_t>(checked_u32(m.residual.size(), "residual"));
    for (float v : m.residual) w.put<float>(v);
  }
  auto& out = w.data();
  const std::uint64_t len = out.size() + 4;
  const std::uint64_t inv = ~len;
  std::memcpy(out.data() + 6, &len, 8);
  std::memcpy(out.data() + 14, &inv, 8);
  const std::uint32_t crc = crc32_ieee(out);
  w.put<std::uint32_t>(crc);
  return std::move(out);
}

Container Container::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFixedHeader + 4) throw TruncatedError("container shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an SBT container (bad magic)");
  std::uint64_t len = 0, inv = 0;
  std::memcpy(&len, bytes.data() + 6, 8);
  std::memcpy(&inv, bytes.data() + 14, 8);
  if (len != ~inv) throw ChecksumError("container header length fields disagree");
  if (bytes.size() < len)
    throw TruncatedError("container holds " + std::to_string(bytes.size()) + " bytes, header declares " +
                         std::to_string(len));
  if (bytes.size() > len) throw FormatError("trailing bytes after the container");
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + len - 4, 4);
  if (crc32_ieee(bytes.first(len - 4)) != stored) throw ChecksumError("container CRC32 mismatch");

  Reader r(bytes.first(len - 4));
  r.bytes(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kContainerVersion)
    throw VersionError("unsupported container version " + std::to_string(version) + " (this build reads " +
                       std::to_string(kContainerVersion) + ")");
  r.get<std::uint64_t>();
  r.get<std::uint64_t>();
  Container c;
  const auto cfg = r.bytes(r.get<std::uint32_t>());
  try {
    c.config = nlohmann::json::parse(cfg.begin(), cfg.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container config is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ModuleRecord m;
    const auto name = r.bytes(r.get<std::uint16_t>());
    m.name.assign(name.begin(), name.end());
    const auto kind = r.get<std::uint8_t>();
    if (kind >= std::size(kKindNames)) throw FormatError("module '" + m.name + "' has unknown kind");
    m.kind = static_cast<ModuleKind>(kind);
    const auto rank = r.get<std::uint8_t>();
    if (rank < 1 || rank > 3) throw FormatError("module '" + m.name + "' has rank " + std::to_string(rank));
    for (int k = 0; k < rank; ++k) m.dims.push_back(r.get<std::uint32_t>());
    m.alpha = r.get<float>();
    const auto mask = r.bytes(r.get<std::uint32_t>());
    m.mask_bits.assign(mask.begin(), mask.end());
    const auto sign = r.bytes(r.get<std::uint32_t>());
    m.sign_bits.assign(sign.begin(), sign.end());
    const auto n = r.get<std::uint32_t>();
    const auto res = r.bytes(std::size_t{n} * 4);
    m.residual.resize(n);
    std::memcpy(m.residual.data(), res.data(), res.size());
    c.modules.push_back(std::move(m));
  }
  if (r.pos() != len - 4) throw FormatError("unparsed bytes before the checksum");
  return c;
}

nlohmann::json Container::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const ModuleRecord& m : modules) {
    mods.push_back({{"name", m.name},
                    {"kind", to_string(m.kind)},
                    {"dims", m.dims},
                    {"alpha", m.alpha},
                    {"mask", to_hex(m.mask_bits)},
                    {"sign", to_hex(m.sign_bits)},
                    {"residual", m.residual}});
  }
  return {{"format", "SBT1"}, {"version", kContainerVersion}, {"config", config}, {"modules", mods}};
}

Container Container::from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "SBT1") throw FormatError("JSON is not an SBT container dump");
    if (j.at("version").get<int>() != kContainerVersion)
      throw VersionError("unsupported container version " + j.at("version").dump());
    Container c;
    c.config = j.at("config");
    for (const auto& m : j.at("modules")) {
      ModuleRecord r;
      r.name = m.at("name").get<std::string>();
      r.kind = parse_module_kind(m.at("kind").get<std::string>());
      r.dims = m.at("dims").get<std::vector<std::uint32_t>>();
      r.alpha = m.at("alpha").get<float>();
      r.mask_bits = from_hex(m.at("mask").get<std::string>());
      r.sign_bits = from_hex(m.at("sign").get<std::string>());
      r.residual = m.at("residual").get<std::vector<float>>();
      c.modules.push_back(std::move(r));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed container JSON: ") + e.what());
  }
}

Container to_container(const FrozenModel& model, const nlohmann::json& meta) {
  Container c;
  c.config = {{"model", model.config.to_json()}, {"meta", meta}};
  c.modules.push_back(linear_record(model.input));
  if (*model.config.pos == PosEncoding::kLearnable) {
    ModuleRecord r;
    r.name = "pos_table";
    r.kind = ModuleKind::kPosTable;
    r.dims = dims_of(model.pos.shape());
    r.residual.assign(model.pos.values().begin(), model.pos.values().end());
    c.modules.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const FrozenLayer& l = model.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    for (const FrozenLinear* f : {&l.q, &l.k, &l.v, &l.o}) c.modules.push_back(linear_record(*f));
    if (l.plan.variant == AttentionVariant::kQkvRandom) {
      const char* tags[] = {"q", "k", "v"};
      for (int s = 0; s < 3; ++s) {
        ModuleRecord r;
        r.name = p + "qkv_mask." + tags[s];
        r.kind = ModuleKind::kActivationMask;
        r.dims = {checked_u32(l.plan.w, "dimension"), checked_u32(l.plan.d, "dimension")};
        r.mask_bits = pack_bits(l.plan.qkv_masks[s]);
        c.modules.push_back(std::move(r));
      }
    }
    c.modules.push_back(linear_record(l.ff1));
    c.modules.push_back(linear_record(l.ff2));
    if (l.norm1) c.modules.push_back(norm_record(*l.norm1));
    if (l.norm2) c.modules.push_back(norm_record(*l.norm2));
  }
  c.modules.push_back(linear_record(model.decoder));
  return c;
}

Unpacked from_container(const Container& c) {
  Unpacked out;
  try {
    out.model.config = ModelConfig::from_json(c.config.at("model")).resolved();
    out.meta = c.config.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container config: ") + e.what());
  }
  const ModelConfig& cfg = out.model.config;
  cfg.validate();
  std::map<std::string, const ModuleRecord*> by_name;
  for (const ModuleRecord& m : c.modules)
    if (!by_name.emplace(m.name, &m).second) throw FormatError("duplicate module '" + m.name + "'");
  std::size_t used = 0;
  auto take = [&](const std::string& name) -> const ModuleRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("container lacks module '" + name + "'");
    ++used;
    return *it->second;
  };
  const std::size_t d = cfg.d, w = cfg.w;
  out.model.input = linear_of(take("input"), d, cfg.m);
  if (*cfg.pos == PosEncoding::kLearnable) {
    const ModuleRecord& r = take("pos_table");
    if (r.kind != ModuleKind::kPosTable || r.dims.size() != 2 || r.dims[1] != d || r.dims[0] < w ||
        r.residual.size() != r.elements())
      throw FormatError("malformed pos_table module");
    out.model.pos = TensorF(shape_of(r.dims));
    std::copy(r.residual.begin(), r.residual.end(), out.model.pos.values().begin());
  }
  const NormKind nk = *cfg.norm == NormPolicy::kBatch ? NormKind::kBatch : NormKind::kLayer;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    FrozenLayer l;
    l.q = linear_of(take(p + "q"), d, d);
    l.k = linear_of(take(p + "k"), d, d);
    l.v = linear_of(take(p + "v"), d, d);
    l.o = linear_of(take(p + "o"), d, d);
    l.ff1 = linear_of(take(p + "ff1"), cfg.ff, d);
    l.ff2 = linear_of(take(p + "ff2"), d, cfg.ff);
    if (*cfg.attention == AttentionVariant::kQkvRandom) {
      const char* tags[] = {"q", "k", "v"};
      for (int s = 0; s < 3; ++s) {
        const ModuleRecord& r = take(p + "qkv_mask." + tags[s]);
        if (r.kind != ModuleKind::kActivationMask || r.dims.size() != 2 || r.dims[0] != w || r.dims[1] != d)
          throw FormatError("malformed activation mask '" + r.name + "'");
        check_bits(r);
        l.plan.qkv_masks[s] = unpack_bits(r.mask_bits, w * d);
      }
    }
    if (*cfg.norm != NormPolicy::kNone) {
      l.norm1 = norm_of(take(p + "norm1"), nk, d);
      l.norm2 = norm_of(take(p + "norm2"), nk, d);
    }
    out.model.layers.push_back(std::move(l));
  }
  if (cfg.task == Task::kClassification)
    out.model.decoder = linear_of(take("decoder"), cfg.classes, cfg.head == ClassHead::kStepAverage ? d : w);
  else
    out.model.decoder = linear_of(take("decoder"), cfg.m, d);
  if (used != c.modules.size()) throw FormatError("container holds modules the configuration does not use");
  out.model.rebuild();
  return out;
}

std::vector<std::uint8_t> pack(const FrozenModel& model, const nlohmann::json& meta) {
  return to_container(model, meta).encode();
}

Unpacked unpack(std::span<const std::uint8_t> bytes) { return from_container(Container::decode(bytes)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

nlohmann::json SizeReport::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : modules)
    mods.push_back({{"name", m.name},
                    {"kind", to_string(m.kind)},
                    {"container_bits", m.container_bits},
                    {"information_bits", m.information_bits}});
  return {{"modules", mods},
          {"container_bits", container_bits},
          {"information_bits", information_bits},
          {"structural_bits", structural_bits},
          {"overhead_bits", overhead_bits},
          {"file_bits", file_bits}};
}

SizeReport size_report(std::span<const std::uint8_t> bytes) {
  const Container c = Container::decode(bytes);
  SizeReport rep;
  rep.file_bits = bytes.size() * 8;
  for (const ModuleRecord& m : c.modules) {
    ModuleSize s{m.name, m.kind};
    const std::uint64_t stream = (m.mask_bits.empty() ? 0 : m.elements()) + (m.sign_bits.empty() ? 0 : m.elements());
    s.container_bits = stream + 32 + 32 * m.residual.size();
    switch (m.kind) {
      case ModuleKind::kBinaryLinear:
      case ModuleKind::kBinaryGain:
        s.information_bits = m.elements() + 32 + 32 * m.residual.size();
        break;
      case ModuleKind::kDenseLinear:
      case ModuleKind::kPosTable:
        s.information_bits = 32 * m.residual.size();
        break;
      case ModuleKind::kNorm:
        // Gain and bias are parameters; running statistics are buffers.
        s.information_bits = 32 * 2 * m.elements();
        rep.structural_bits += 32 * (m.residual.size() - 2 * m.elements());
        break;
      case ModuleKind::kActivationMask:
        rep.structural_bits += m.elements();
        break;
    }
    rep.container_bits += s.container_bits;
    rep.information_bits += s.information_bits;
    rep.modules.push_back(std::move(s));
  }
  rep.overhead_bits = rep.file_bits - rep.container_bits;
  return rep;
}

// ---------------------------------------------------------------------------
// Packed runtime

PackedRuntime::PackedRuntime(const FrozenModel& model) : model_(model) {
  input_ = build(model_.input);
  decoder_ = build(model_.decoder);
  for (const FrozenLayer& l : model_.layers)
    layers_.push_back({build(l.q), build(l.k), build(l.v), build(l.o), build(l.ff1), build(l.ff2)});
}

PackedRuntime::Linear PackedRuntime::build(const FrozenLinear& f) {
  Linear l;
  l.out = f.out;
  l.in = f.in;
  l.bias = f.bias;
  if (!f.binary) {
    l.weight = f.weight.storage();
    return l;
  }
  l.binary = true;
  l.alpha = f.binary->alpha;
  l.words = (f.in + 63) / 64;
  l.pos.assign(l.out * l.words, 0);
  l.neg.assign(l.out * l.words, 0);
  for (std::size_t o = 0; o < l.out; ++o)
    for (std::size_t i = 0; i < l.in; ++i) {
      const std::size_t e = o * l.in + i;
      if (!f.binary->mask[e]) continue;
      auto& set = f.binary->sign[e] ? l.pos : l.neg;
      set[o * l.words + i / 64] |= std::uint64_t{1} << (i % 64);
    }
  return l;
}

void PackedRuntime::apply(const Linear& l, const float* x, float* y, std::size_t rows) {
  if (!l.binary) {
    linear_nt<float>({x, rows * l.in}, l.weight, {y, rows * l.out}, rows, l.in, l.out);
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      const float* xr = x + r * l.in;
      for (std::size_t o = 0; o < l.out; ++o) {
        double acc = 0.0;
        const std::uint64_t* pw = l.pos.data() + o * l.words;
        const std::uint64_t* nw = l.neg.data() + o * l.words;
        for (std::size_t wi = 0; wi < l.words; ++wi) {
          for (std::uint64_t bits = pw[wi]; bits; bits &= bits - 1) acc += xr[wi * 64 + std::countr_zero(bits)];
          for (std::uint64_t bits = nw[wi]; bits; bits &= bits - 1) acc -= xr[wi * 64 + std::countr_zero(bits)];
        }
        y[r * l.out + o] = static_cast<float>(l.alpha * acc);
      }
    }
  }
  if (!l.bias.empty())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < l.out; ++o) y[r * l.out + o] += l.bias[o];
}

TensorF PackedRuntime::apply(const Linear& l, const TensorF& x) const {
  if (x.shape().back() != l.in) throw ShapeError("packed linear: input " + x.shape().str());
  TensorF y(x.rank() == 3 ? Shape{x.dim(0), x.dim(1), l.out} : Shape{x.dim(0), l.out});
  apply(l, x.values().data(), y.values().data(), x.size() / l.in);
  return y;
}

TensorF PackedRuntime::step_t_attention(std::size_t li, const TensorF& z,
                                        std::span<const std::uint8_t> key_valid) const {
  const Layer& L = layers_[li];
  const AttentionPlan& plan = model_.layers[li].plan;
  const std::size_t B = z.dim(0), w = plan.w, d = plan.d, h = plan.heads, dh = plan.head_dim();
  const auto scale = static_cast<float>(plan.scale());
  TensorF out(Shape{B, w, d});
  std::vector<float> k((w - 1) * d), v((w - 1) * d), q(d), p(w - 1);
  for (std::size_t b = 0; b < B; ++b) {
    const float* zb = z.values().data() + b * w * d;
    apply(L.k, zb, k.data(), w - 1);
    apply(L.v, zb, v.data(), w - 1);
    apply(L.q, zb + (w - 1) * d, q.data(), 1);
    auto valid = [&](std::size_t t) { return key_valid.empty() || key_valid[b * w + t]; };
    // Rows before the last attend only to themselves.
    for (std::size_t t = 0; t + 1 < w; ++t)
      if (valid(t))
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(t * d), v.begin() + static_cast<std::ptrdiff_t>((t + 1) * d),
                  out.values().begin() + static_cast<std::ptrdiff_t>((b * w + t) * d));
    float* last = out.values().data() + (b * w + w - 1) * d;
    for (std::size_t hd = 0; hd < h; ++hd) {
      float mx = -INFINITY;
      bool any = false;
      for (std::size_t j = 0; j + 1 < w; ++j) {
        if (!valid(j)) continue;
        float s = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) s += q[hd * dh + c] * k[j * d + hd * dh + c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
        any = true;
      }
      if (!any) continue;
      float sum = 0.0f;
      for (std::size_t j = 0; j + 1 < w; ++j)
        if (valid(j)) sum += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j + 1 < w; ++j) {
        if (!valid(j)) continue;
        const float a = p[j] / sum;
        for (std::size_t c = 0; c < dh; ++c) last[hd * dh + c] += a * v[j * d + hd * dh + c];
      }
    }
  }
  return out;
}

TensorF PackedRuntime::infer(const TensorF& x, std::span<const std::uint8_t> valid, bool step_t_fast_path) const {
  std::map<const FrozenLinear*, const Linear*> lookup{{&model_.input, &input_}, {&model_.decoder, &decoder_}};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const FrozenLayer& f = model_.layers[i];
    const Layer& l = layers_[i];
    lookup.insert({{&f.q, &l.q}, {&f.k, &l.k}, {&f.v, &l.v}, {&f.o, &l.o}, {&f.ff1, &l.ff1}, {&f.ff2, &l.ff2}});
  }
  ForwardHooks hooks;
  hooks.linear = [&](const FrozenLinear& f, const TensorF& in) { return apply(*lookup.at(&f), in); };
  if (step_t_fast_path && *model_.config.attention == AttentionVariant::kStepT)
    hooks.attention = [&](std::size_t li, const TensorF& z, std::span<const std::uint8_t> kv) {
      return std::optional<TensorF>(step_t_attention(li, z, kv));
    };
  return model_.forward(x, valid, hooks);
}

}  // namespace sbt
