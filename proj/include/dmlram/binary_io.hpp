#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dmlram/tensor.hpp"

namespace dml {

// Little-endian byte buffer writer; every multi-byte value is emitted LSB
// first regardless of host order.
class ByteWriter {
public:
    void bytes(const void* data, std::size_t n);
    void magic(const char (&tag)[5]) { bytes(tag, 4); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f32s(std::span<const float> values);

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string context)
        : data_(data), context_(std::move(context)) {}

    void expect_magic(const char (&tag)[5]);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    void f32s(std::span<float> out);
    std::span<const std::uint8_t> bytes(std::size_t n);

    std::size_t remaining() const { return data_.size() - pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    const std::string& context() const { return context_; }

private:
    void need(std::size_t n);

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string context_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Single-tensor file: "DMLT", u16 version, u32 rank, u32 extents, f32 payload.
inline constexpr std::uint16_t kTensorFileVersion = 1;
void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor_file(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_tensor_file(const Tensor& tensor);
Tensor decode_tensor_file(std::span<const std::uint8_t> bytes, const std::string& context);

// Parameter checkpoint: "DMLW", u16 version, u32 tensor count, per tensor
// (u32 rank, u32 extents, f32 payload). Optional named binary sections
// follow: u32 section count (always present), then per section u32 name length, name bytes,
// u64 payload length, payload bytes.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    std::vector<Tensor> tensors;
    std::map<std::string, std::vector<std::uint8_t>> sections;

    const std::vector<std::uint8_t>& section(const std::string& name) const;
    std::string text_section(const std::string& name) const;
    void set_text_section(const std::string& name, const std::string& text);
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a; used for dataset fingerprints and checkpoint checksums.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace dml
