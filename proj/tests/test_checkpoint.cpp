#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "cropmae/checkpoint.hpp"
#include "cropmae/config.hpp"
#include "support.hpp"

using namespace cropmae;
using testing_support::TempDir;

namespace {

ckpt::Checkpoint<float> sample() {
    ckpt::Checkpoint<float> ck;
    ck.step = 17;
    ck.rng_algorithm = "splitmix64-stream-v1";
    ck.rng_seed = 5;
    ck.rng_counter = 17;
    ck.config.set("mask_ratio", "0.985");
    ck.config.set("strategy", "global-to-local");
    Tensor<float> a({2, 3});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.1f * static_cast<float>(i) - 0.2f;
    a[4] = -0.0f;
    ck.tensors.push_back({"encoder.patch_embed.w", a});
    ck.tensors.push_back({"decoder.mask_token", Tensor<float>::scalar(3.25f)});
    return ck;
}

}  // namespace

TEST(Config, ParseCommentsAndWhitespace) {
    const auto c = ConfigMap::parse("# comment\n  seed = 4 \n\nstrategy=random\n");
    EXPECT_EQ(c.get_uint("seed", 0), 4u);
    EXPECT_EQ(c.get_string("strategy", ""), "random");
    EXPECT_THROW(ConfigMap::parse("novalue\n"), ConfigError);
}

TEST(Config, TypedGettersNameTheKey) {
    const auto c = ConfigMap::parse("a = x\nb = 1.5\nc = maybe\n");
    try {
        c.get_double("a", 0);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
    }
    EXPECT_EQ(c.get_double("b", 0), 1.5);
    EXPECT_THROW(c.get_uint("b", 0), ConfigError);
    EXPECT_THROW(c.get_bool("c", false), ConfigError);
    EXPECT_THROW(c.require_known({"a", "b"}), ConfigError);
}

TEST(Config, LaterLayersWin) {
    auto base = ConfigMap::parse("seed = 1\nsteps = 5\n");
    base.merge(ConfigMap::parse("seed = 2\n"));
    EXPECT_EQ(base.get_uint("seed", 0), 2u);
    EXPECT_EQ(base.get_uint("steps", 0), 5u);
}

TEST(Checkpoint, RoundtripIsBitExact) {
    const auto ck = sample();
    const auto back = ckpt::decode<float>(ckpt::encode(ck));
    EXPECT_EQ(back.step, 17u);
    EXPECT_EQ(back.rng_algorithm, ck.rng_algorithm);
    EXPECT_EQ(back.rng_seed, 5u);
    EXPECT_EQ(back.rng_counter, 17u);
    EXPECT_EQ(back.config.entries(), ck.config.entries());
    ASSERT_EQ(back.tensors.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
        EXPECT_EQ(back.tensors[i].tensor.shape(), ck.tensors[i].tensor.shape());
        EXPECT_EQ(std::memcmp(back.tensors[i].tensor.data().data(), ck.tensors[i].tensor.data().data(),
                              ck.tensors[i].tensor.size() * sizeof(float)),
                  0);
    }
}

TEST(Checkpoint, FileLayout) {
    const auto bytes = ckpt::encode(sample());
    ASSERT_GE(bytes.size(), 12u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CMAE");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
    const std::uint32_t hlen = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | bytes[11] << 24;
    const std::string header(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    EXPECT_NE(header.find("tensor encoder.patch_embed.w:f32:2x3:0\n"), std::string::npos) << header;
    EXPECT_NE(header.find("tensor decoder.mask_token:f32:scalar:24\n"), std::string::npos) << header;
    EXPECT_EQ(bytes.size(), 12 + hlen + 7 * sizeof(float));
}

TEST(Checkpoint, CorruptionIsReportedWithOffsets) {
    auto bytes = ckpt::encode(sample());
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(ckpt::decode<float>(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 2;
    try {
        ckpt::decode<float>(bad_version);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
    auto long_header = bytes;
    long_header[11] = 0x7f;
    EXPECT_THROW(ckpt::decode<float>(long_header), FormatError);
    for (std::size_t cut : {std::size_t{3}, std::size_t{11}, bytes.size() - 1, bytes.size() - 9}) {
        std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            ckpt::decode<float>(t);
            FAIL() << "cut " << cut;
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
        }
    }
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(ckpt::decode<float>(extra), FormatError);
}

TEST(Checkpoint, PrecisionConversionOnLoad) {
    const auto back = ckpt::decode<double>(ckpt::encode(sample()));
    EXPECT_EQ(back.tensors[1].tensor.item(), 3.25);
}

TEST(Checkpoint, SaveLoadFile) {
    TempDir dir("ckpt");
    ckpt::save(sample(), dir / "a.cmae");
    const auto back = ckpt::load<float>(dir / "a.cmae");
    EXPECT_EQ(back.tensors[0].tensor, sample().tensors[0].tensor);
    EXPECT_FALSE(std::filesystem::exists(dir / "a.cmae.tmp"));
    EXPECT_THROW(ckpt::load<float>(dir / "missing.cmae"), IoError);
}
