#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "dmlram/binary_io.hpp"
#include "dmlram/error.hpp"
#include "test_util.hpp"

using namespace dml;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
    return true;
}

}  // namespace

TEST(ByteOrder, LittleEndianRegardlessOfHost) {
    ByteWriter w;
    w.u16(0x0102);
    w.u32(0x03040506);
    w.u64(0x0708090a0b0c0d0eULL);
    w.f32(1.0f);  // 0x3f800000
    const std::vector<std::uint8_t> want{0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0x0e, 0x0d, 0x0c, 0x0b,
                                         0x0a, 0x09, 0x08, 0x07, 0x00, 0x00, 0x80, 0x3f};
    EXPECT_EQ(w.buffer(), want);

    ByteReader r(w.buffer(), "test");
    EXPECT_EQ(r.u16(), 0x0102);
    EXPECT_EQ(r.u32(), 0x03040506u);
    EXPECT_EQ(r.u64(), 0x0708090a0b0c0d0eULL);
    EXPECT_EQ(r.f32(), 1.0f);
    EXPECT_TRUE(r.at_end());
    EXPECT_THROW(r.u8(), IoError);
}

TEST(TensorFile, HandAssembledLayout) {
    Tensor t({1, 2}, {1.0f, -2.0f});
    const auto bytes = encode_tensor_file(t);
    const std::vector<std::uint8_t> want{'D', 'M', 'L', 'T', 1, 0,                // magic, version
                                         2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0,      // rank, extents
                                         0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0};        // 1.0f, -2.0f
    EXPECT_EQ(bytes, want);
}

TEST(TensorFile, RoundTripIsBitExactIncludingSpecialValues) {
    const float specials[] = {0.0f, -0.0f, std::numeric_limits<float>::denorm_min(),
                              std::numeric_limits<float>::infinity(), -std::numeric_limits<float>::max(),
                              std::numeric_limits<float>::quiet_NaN(), 1e-30f, 3.14159f};
    Tensor t({2, 4}, std::vector<float>(std::begin(specials), std::end(specials)));
    test::TempDir dir;
    write_tensor_file(dir.path() / "t.dmlt", t);
    EXPECT_TRUE(bit_equal(read_tensor_file(dir.path() / "t.dmlt"), t));
}

TEST(TensorFile, RandomShapesRoundTrip) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Shape s;
        const std::size_t rank = 1 + rng.index(4);
        for (std::size_t k = 0; k < rank; ++k) s.push_back(1 + rng.index(5));
        Tensor t(s);
        for (auto& v : t.data()) v = static_cast<float>(rng.normal());
        EXPECT_TRUE(bit_equal(decode_tensor_file(encode_tensor_file(t), "mem"), t));
    }
}

TEST(TensorFile, CorruptInputsAreRejected) {
    auto bytes = encode_tensor_file(Tensor({3}, {1, 2, 3}));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_tensor_file(bad_magic, "m"), IoError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(decode_tensor_file(bad_version, "m"), IoError);
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() - 1})
        EXPECT_THROW(decode_tensor_file(std::span(bytes).first(cut), "m"), IoError) << "cut " << cut;
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_tensor_file(trailing, "m"), IoError);
    EXPECT_THROW(read_tensor_file("/nonexistent/dir/file.dmlt"), IoError);
}

TEST(Checkpoint, RoundTripWithSections) {
    Checkpoint c;
    c.tensors.push_back(Tensor({2, 2}, {1, 2, 3, 4}));
    c.tensors.push_back(Tensor({1}, {-0.5f}));
    c.set_text_section("config", "{\"a\":1}");
    c.sections["blob"] = {0, 255, 7};
    const auto bytes = encode_checkpoint(c);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DMLW");
    const Checkpoint d = decode_checkpoint(bytes, "mem");
    ASSERT_EQ(d.tensors.size(), 2u);
    EXPECT_TRUE(bit_equal(d.tensors[0], c.tensors[0]));
    EXPECT_TRUE(bit_equal(d.tensors[1], c.tensors[1]));
    EXPECT_EQ(d.text_section("config"), "{\"a\":1}");
    EXPECT_EQ(d.section("blob"), c.sections["blob"]);
    EXPECT_THROW(d.section("missing"), IoError);
    EXPECT_EQ(encode_checkpoint(d), bytes);
}

TEST(Checkpoint, TruncationAnywhereIsAnIoError) {
    Checkpoint c;
    c.tensors.push_back(Tensor({3}, {1, 2, 3}));
    c.set_text_section("x", "hello");
    const auto bytes = encode_checkpoint(c);
    for (std::size_t cut = 0; cut < bytes.size(); ++cut)
        EXPECT_THROW(decode_checkpoint(std::span(bytes).first(cut), "m"), IoError) << "cut " << cut;
}

TEST(Fnv1a, ReferenceVectors) {
    EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
    const std::uint8_t a[] = {'a'};
    EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cULL);
    const char* s = "foobar";
    EXPECT_EQ(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s), 6)), 0x85944171f73967e8ULL);
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
