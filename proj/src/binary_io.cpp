#include "dmlram/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dml {

void ByteWriter::bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
}

void ByteWriter::u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f32s(std::span<const float> values) {
    buf_.reserve(buf_.size() + 4 * values.size());
    for (float v : values) f32(v);
}

void ByteReader::need(std::size_t n) {
    if (remaining() < n)
        throw IoError(context_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
}

void ByteReader::expect_magic(const char (&tag)[5]) {
    need(4);
    if (std::memcmp(data_.data() + pos_, tag, 4) != 0)
        throw IoError(context_ + ": bad magic, expected \"" + std::string(tag, 4) + "\"");
    pos_ += 4;
}

std::uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

void ByteReader::f32s(std::span<float> out) {
    need(4 * out.size());
    for (float& v : out) v = f32();
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

namespace {

void put_tensor_body(ByteWriter& w, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.f32s(t.data());
}

Tensor get_tensor_body(ByteReader& r) {
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw IoError(r.context() + ": unsupported tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
        e = r.u32();
        if (e == 0) throw IoError(r.context() + ": zero tensor extent");
        count *= e;
    }
    if (count * 4 > r.remaining())
        throw IoError(r.context() + ": truncated tensor payload " + shape_string(shape));
    std::vector<float> data(count);
    r.f32s(data);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace

std::vector<std::uint8_t> encode_tensor_file(const Tensor& tensor) {
    ByteWriter w;
    w.magic("DMLT");
    w.u16(kTensorFileVersion);
    put_tensor_body(w, tensor);
    return w.take();
}

Tensor decode_tensor_file(std::span<const std::uint8_t> bytes, const std::string& context) {
    ByteReader r(bytes, context);
    r.expect_magic("DMLT");
    const std::uint16_t version = r.u16();
    if (version != kTensorFileVersion)
        throw IoError(context + ": unsupported tensor file version " + std::to_string(version));
    Tensor t = get_tensor_body(r);
    if (!r.at_end()) throw IoError(context + ": trailing bytes after tensor payload");
    return t;
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor) {
    write_file_bytes(path, encode_tensor_file(tensor));
}

Tensor read_tensor_file(const std::filesystem::path& path) {
    return decode_tensor_file(read_file_bytes(path), path.string());
}

const std::vector<std::uint8_t>& Checkpoint::section(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw IoError("checkpoint has no section '" + name + "'");
    return it->second;
}

std::string Checkpoint::text_section(const std::string& name) const {
    const auto& s = section(name);
    return std::string(s.begin(), s.end());
}

void Checkpoint::set_text_section(const std::string& name, const std::string& text) {
    sections[name] = std::vector<std::uint8_t>(text.begin(), text.end());
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    ByteWriter w;
    w.magic("DMLW");
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) put_tensor_body(w, t);
    w.u32(static_cast<std::uint32_t>(ckpt.sections.size()));
    for (const auto& [name, payload] : ckpt.sections) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u64(payload.size());
        w.bytes(payload.data(), payload.size());
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context) {
    ByteReader r(bytes, context);
    r.expect_magic("DMLW");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw IoError(context + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    const std::uint32_t count = r.u32();
    ckpt.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) ckpt.tensors.push_back(get_tensor_body(r));
    const std::uint32_t nsec = r.u32();
    for (std::uint32_t i = 0; i < nsec; ++i) {
        const std::uint32_t name_len = r.u32();
        auto name = r.bytes(name_len);
        const std::uint64_t len = r.u64();
        auto payload = r.bytes(static_cast<std::size_t>(len));
        ckpt.sections.emplace(std::string(name.begin(), name.end()),
                              std::vector<std::uint8_t>(payload.begin(), payload.end()));
    }
    if (!r.at_end()) throw IoError(context + ": trailing bytes after checkpoint sections");
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path), path.string());
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

}  // namespace dml
