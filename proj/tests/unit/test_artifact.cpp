#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <thread>

#include "generators.hpp"
#include "sbt/artifact.hpp"
#include "sbt/costmodel.hpp"

using namespace sbt;
using sbt::testing::gen_config;
using sbt::testing::gen_tensor;
using sbt::testing::gen_valid;

namespace {

// max|a - b| / max|b| over the whole output.
double normwise(const TensorF& a, const TensorF& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(double(a[i]) - double(b[i])));
    den = std::max(den, std::abs(double(b[i])));
  }
  return num / std::max(den, 1e-30);
}

FrozenModel random_frozen(Rng& rng, Task task, bool dense, std::uint64_t seed) {
  return TransformerModel(gen_config(rng, task, dense), seed).freeze();
}

void put_u16(std::vector<std::uint8_t>& b, std::size_t at, std::uint16_t v) {
  b[at] = v & 0xff;
  b[at + 1] = v >> 8;
}

void reseal(std::vector<std::uint8_t>& b) {
  const std::uint32_t crc = crc32_ieee(std::span(b).first(b.size() - 4));
  for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = (crc >> (8 * i)) & 0xff;
}

}  // namespace

TEST(Bits, LsbFirstPacking) {
  const std::vector<std::uint8_t> bits = {1, 0, 1, 1, 0, 0, 0, 1};
  EXPECT_EQ(pack_bits(bits), (std::vector<std::uint8_t>{0x8D}));
  EXPECT_EQ(unpack_bits(std::vector<std::uint8_t>{0x8D}, 8), bits);
  EXPECT_EQ(pack_bits(std::vector<std::uint8_t>{1, 1, 1}), (std::vector<std::uint8_t>{0x07}));
  EXPECT_TRUE(pack_bits({}).empty());
}

TEST(Bits, PropertyRoundTripAndLength) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = sbt::testing::gen_size(rng, 0, 300);
    const auto flags = sbt::testing::gen_flags(rng, n, rng.uniform());
    const auto bytes = pack_bits(flags);
    ASSERT_EQ(bytes.size(), (n + 7) / 8);
    EXPECT_EQ(unpack_bits(bytes, n), flags);
  }
}

TEST(Crc32, KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_ieee(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST(Container, EmptyResidualRoundTrip) {
  Container c;
  c.config = {{"model", {{"x", 1}}}, {"meta", nlohmann::json::object()}};
  ModuleRecord r;
  r.name = "w";
  r.kind = ModuleKind::kBinaryLinear;
  r.dims = {2, 4};
  r.alpha = 0.5f;
  r.mask_bits = {0xAB};
  r.sign_bits = {0x0F};
  c.modules.push_back(r);
  const auto bytes = c.encode();
  const Container back = Container::decode(bytes);
  ASSERT_EQ(back.modules.size(), 1u);
  EXPECT_TRUE(back.modules[0].residual.empty());
  EXPECT_EQ(back.modules[0].mask_bits, r.mask_bits);
  EXPECT_EQ(back.modules[0].alpha, 0.5f);
  EXPECT_EQ(back.encode(), bytes);
  EXPECT_EQ(Container::from_json(back.to_json()).encode(), bytes);
}

TEST(Pack, RoundTripIsByteIdentical) {
  Rng rng(2);
  for (int trial = 0; trial < 12; ++trial) {
    const FrozenModel f = random_frozen(rng, static_cast<Task>(trial % 3), trial % 4 == 0, trial);
    const nlohmann::json meta = {{"norm_stats", {{"mean", {1.0}}}}, {"trial", trial}};
    const auto bytes = pack(f, meta);
    const Unpacked u = unpack(bytes);
    EXPECT_EQ(u.meta, meta);
    EXPECT_EQ(pack(u.model, u.meta), bytes);
    EXPECT_EQ(Container::from_json(Container::decode(bytes).to_json()).encode(), bytes);
  }
}

TEST(Pack, UnpackedForwardIsBitIdentical) {
  Rng rng(3);
  for (int trial = 0; trial < 12; ++trial) {
    const Task task = static_cast<Task>(trial % 3);
    const FrozenModel f = random_frozen(rng, task, trial % 4 == 1, trial);
    const FrozenModel g = unpack(pack(f)).model;
    const TensorF x = gen_tensor<float>(rng, Shape{3, f.config.w, f.config.m});
    std::vector<std::uint8_t> valid;
    if (task == Task::kClassification) valid = gen_valid(rng, 3, f.config.w);
    EXPECT_EQ(f.forward(x, valid).storage(), g.forward(x, valid).storage());
  }
}

TEST(Unpack, CorruptByteIsAChecksumError) {
  Rng rng(4);
  const auto bytes = pack(random_frozen(rng, Task::kAnomaly, false, 1));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    if (i < 4)
      EXPECT_THROW(unpack(bad), FormatError) << "byte " << i;
    else
      EXPECT_THROW(unpack(bad), ChecksumError) << "byte " << i;
  }
}

TEST(Unpack, VersionBumpIsAVersionError) {
  Rng rng(5);
  auto bytes = pack(random_frozen(rng, Task::kForecasting, false, 2));
  put_u16(bytes, 4, kContainerVersion + 1);
  reseal(bytes);
  EXPECT_THROW(unpack(bytes), VersionError);
}

TEST(Unpack, EveryPrefixIsTruncated) {
  Rng rng(6);
  const auto bytes = pack(random_frozen(rng, Task::kClassification, false, 3));
  for (std::size_t n = 0; n < bytes.size(); ++n)
    EXPECT_THROW(unpack(std::span(bytes).first(n)), TruncatedError) << "prefix " << n;
}

TEST(Unpack, BadMagicAndTrailingBytes) {
  Rng rng(7);
  auto bytes = pack(random_frozen(rng, Task::kAnomaly, true, 4));
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(unpack(longer), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(unpack(bytes), FormatError);
}

TEST(Files, WriteThenRead) {
  Rng rng(8);
  const auto bytes = pack(random_frozen(rng, Task::kAnomaly, false, 5));
  const auto path = std::filesystem::temp_directory_path() / "sbt_test_model.sbt";
  write_file(path, bytes);
  EXPECT_EQ(read_file(path), bytes);
  std::filesystem::remove(path);
}

TEST(SizeReport, InformationBitsReconcileWithCostModel) {
  for (const auto& name : {"smd", "japanese_vowels", "ecl"}) {
    for (bool dense : {false, true}) {
      ModelConfig c = preset_config(name, dense);
      const auto bytes = pack(TransformerModel(c, 0).freeze());
      const SizeReport r = size_report(bytes);
      const SizeScenario s = dense ? SizeScenario::kDenseFp32 : SizeScenario::kSbt;
      EXPECT_EQ(static_cast<double>(r.information_bits), bit_size(count_params(c), s)) << name << dense;
      EXPECT_EQ(r.file_bits, 8 * bytes.size());
      std::uint64_t container = 0;
      for (const auto& m : r.modules) container += m.container_bits;
      EXPECT_EQ(container, r.container_bits);
    }
  }
}

TEST(SizeReport, PerModuleContainerBits) {
  Rng rng(9);
  const auto bytes = pack(random_frozen(rng, Task::kForecasting, false, 6));
  const Container c = Container::decode(bytes);
  const SizeReport r = size_report(bytes);
  ASSERT_EQ(r.modules.size(), c.modules.size());
  for (std::size_t i = 0; i < c.modules.size(); ++i) {
    const ModuleRecord& m = c.modules[i];
    const std::uint64_t e = m.elements();
    std::uint64_t want = (m.mask_bits.empty() ? 0 : e) + (m.sign_bits.empty() ? 0 : e) + 32 * m.residual.size();
    if (m.kind != ModuleKind::kActivationMask) want += 32;
    EXPECT_EQ(r.modules[i].container_bits, want) << m.name;
  }
}

TEST(PackedRuntime, MatchesReferencePath) {
  Rng rng(10);
  int batches = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Task task = static_cast<Task>(trial % 3);
    const FrozenModel f = random_frozen(rng, task, trial % 5 == 0, trial);
    const PackedRuntime rt(f);
    for (int b = 0; b < 5; ++b, ++batches) {
      const TensorF x = gen_tensor<float>(rng, Shape{4, f.config.w, f.config.m});
      std::vector<std::uint8_t> valid;
      if (task == Task::kClassification) valid = gen_valid(rng, 4, f.config.w);
      EXPECT_LE(normwise(rt.infer(x, valid), f.forward(x, valid)), 1e-5) << f.config.to_json().dump();
    }
  }
  EXPECT_EQ(batches, 100);
}

TEST(PackedRuntime, AllPositiveSignsGiveMaskedRowSums) {
  Rng rng(11);
  FrozenModel f = random_frozen(rng, Task::kAnomaly, false, 7);
  auto flip = [](FrozenLinear& l) {
    if (l.binary) std::fill(l.binary->sign.begin(), l.binary->sign.end(), 1);
  };
  flip(f.input);
  flip(f.decoder);
  for (auto& l : f.layers)
    for (FrozenLinear* p : {&l.q, &l.k, &l.v, &l.o, &l.ff1, &l.ff2}) flip(*p);
  f.rebuild();
  const EffectiveWeights& ew = *f.input.binary;
  for (std::size_t k = 0; k < ew.elements(); ++k) EXPECT_EQ(f.input.weight[k], ew.mask[k] ? ew.alpha : 0.0f);

  // Input projection of a single step: alpha times the sum of the kept inputs.
  TensorF x = gen_tensor<float>(rng, Shape{1, f.config.w, f.config.m});
  ForwardHooks hooks;
  std::vector<TensorF> seen;
  hooks.linear = [&](const FrozenLinear& l, const TensorF& in) {
    if (&l == &f.input) seen.push_back(in);
    // Inputs arrive as (..., in); rows are flattened.
    TensorF y(in.rank() == 3 ? Shape{in.dim(0), in.dim(1), l.out} : Shape{in.size() / l.in, l.out});
    const std::size_t rows = in.size() / l.in;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < l.out; ++o) {
        double acc = 0.0;
        if (&l == &f.input) {
          for (std::size_t i = 0; i < l.in; ++i)
            if (ew.mask[o * l.in + i]) acc += in[r * l.in + i];
          acc *= ew.alpha;
        } else {
          for (std::size_t i = 0; i < l.in; ++i) acc += double(l.weight[o * l.in + i]) * in[r * l.in + i];
        }
        y[r * l.out + o] = static_cast<float>(acc) + (l.bias.empty() ? 0.0f : l.bias[o]);
      }
    return y;
  };
  const TensorF via_sums = f.forward(x, {}, hooks);
  ASSERT_FALSE(seen.empty());
  EXPECT_LE(normwise(PackedRuntime(f).infer(x), via_sums), 1e-5);
}

TEST(PackedRuntime, StepTFastPathEqualsFullPath) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const FrozenModel f = random_frozen(rng, trial % 2 ? Task::kAnomaly : Task::kForecasting, false, trial);
    ASSERT_EQ(*f.config.attention, AttentionVariant::kStepT);
    const PackedRuntime rt(f);
    const TensorF x = gen_tensor<float>(rng, Shape{3, f.config.w, f.config.m});
    const TensorF fast = rt.infer(x, {}, true), full = rt.infer(x, {}, false);
    EXPECT_LE(normwise(fast, full), 1e-6);
  }
}

TEST(PackedRuntime, RejectsShapeMismatch) {
  Rng rng(13);
  const FrozenModel f = random_frozen(rng, Task::kAnomaly, false, 1);
  EXPECT_THROW(PackedRuntime(f).infer(TensorF(Shape{1, f.config.w + 1, f.config.m})), ShapeError);
}

TEST(PackedRuntime, ConcurrentInferenceIsDeterministic) {
  Rng rng(14);
  const FrozenModel f = random_frozen(rng, Task::kClassification, false, 9);
  const PackedRuntime rt(f);
  std::vector<TensorF> inputs;
  std::vector<TensorF> expected;
  for (int i = 0; i < 8; ++i) {
    inputs.push_back(gen_tensor<float>(rng, Shape{2, f.config.w, f.config.m}));
    expected.push_back(rt.infer(inputs.back()));
  }
  std::vector<int> mismatches(4, 0);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int rep = 0; rep < 20; ++rep)
        for (std::size_t i = 0; i < inputs.size(); ++i)
          if (rt.infer(inputs[i]).storage() != expected[i].storage()) ++mismatches[t];
    });
  for (auto& th : threads) th.join();
  for (int m : mismatches) EXPECT_EQ(m, 0);
}
