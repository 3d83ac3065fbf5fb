#include "humdex/wire_format.hpp"

#include <array>
#include <cstring>

#include "humdex/error.hpp"

namespace humdex::pipeline {

namespace {

constexpr std::uint8_t kMagic0 = 0x48;  // 'H'
constexpr std::uint8_t kMagic1 = 0x44;  // 'D'
constexpr std::uint8_t kVersion = 0x01;

// Fixed bytes besides topic and payload: magic(2) + version(1) + topic_len(1)
// + timestamp(8) + payload_len(4) + crc(4).
constexpr size_t kOverhead = 20;

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes) {
    static const auto table = make_crc_table();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::uint8_t b : bytes) crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

const char* to_string(DecodeStatus status) {
    switch (status) {
        case DecodeStatus::Ok: return "ok";
        case DecodeStatus::BadMagic: return "bad magic";
        case DecodeStatus::BadVersion: return "bad version";
        case DecodeStatus::BadCrc: return "bad crc";
        case DecodeStatus::Truncated: return "truncated frame";
        case DecodeStatus::LengthMismatch: return "frame length mismatch";
    }
    return "unknown";
}

std::vector<std::uint8_t> encode_message(const WireMessage& message) {
    if (message.topic.empty() || message.topic.size() > 255) {
        throw Error(ErrorKind::Validation, "topic must be 1..255 bytes");
    }
    if (message.payload.size() > 0xFFFFFFFFull) {
        throw Error(ErrorKind::Validation, "payload exceeds u32 length");
    }
    std::vector<std::uint8_t> out;
    out.reserve(kOverhead + message.topic.size() + message.payload.size());
    out.push_back(kMagic0);
    out.push_back(kMagic1);
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(message.topic.size()));
    out.insert(out.end(), message.topic.begin(), message.topic.end());
    put_u64_le(out, message.timestamp_us);
    put_u32_le(out, static_cast<std::uint32_t>(message.payload.size()));
    out.insert(out.end(), message.payload.begin(), message.payload.end());
    const std::uint32_t crc = crc32_ieee({out.data() + 2, out.size() - 2});
    put_u32_le(out, crc);
    return out;
}

DecodeResult try_decode_message(std::span<const std::uint8_t> bytes) {
    DecodeResult result;
    if (bytes.size() < kOverhead + 1) {  // topic is at least one byte
        result.status = DecodeStatus::Truncated;
        return result;
    }
    if (bytes[0] != kMagic0 || bytes[1] != kMagic1) {
        result.status = DecodeStatus::BadMagic;
        return result;
    }
    if (bytes[2] != kVersion) {
        result.status = DecodeStatus::BadVersion;
        return result;
    }
    const size_t topic_len = bytes[3];
    if (topic_len == 0) {
        result.status = DecodeStatus::LengthMismatch;
        return result;
    }
    if (bytes.size() < 4 + topic_len + 12) {
        result.status = DecodeStatus::Truncated;
        return result;
    }
    const std::uint64_t timestamp = get_u64_le(bytes.data() + 4 + topic_len);
    const std::uint32_t payload_len = get_u32_le(bytes.data() + 4 + topic_len + 8);
    const size_t total = kOverhead + topic_len + payload_len;
    if (bytes.size() < total) {
        result.status = DecodeStatus::Truncated;
        return result;
    }
    if (bytes.size() > total) {
        result.status = DecodeStatus::LengthMismatch;
        return result;
    }
    const std::uint32_t stored_crc = get_u32_le(bytes.data() + total - 4);
    const std::uint32_t actual_crc = crc32_ieee({bytes.data() + 2, total - 6});
    if (stored_crc != actual_crc) {
        result.status = DecodeStatus::BadCrc;
        return result;
    }
    result.message.topic.assign(reinterpret_cast<const char*>(bytes.data() + 4), topic_len);
    result.message.timestamp_us = timestamp;
    result.message.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(4 + topic_len + 12),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(total - 4));
    return result;
}

WireMessage decode_message(std::span<const std::uint8_t> bytes) {
    DecodeResult result = try_decode_message(bytes);
    if (result.status != DecodeStatus::Ok) {
        throw Error(ErrorKind::Parse, std::string("wire decode: ") + to_string(result.status));
    }
    return std::move(result.message);
}

void FrameParser::feed(std::span<const std::uint8_t> bytes) {
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<DecodeResult> FrameParser::next() {
    if (buffer_.size() < kOverhead + 1) return std::nullopt;
    const size_t topic_len = buffer_[3];
    if (buffer_.size() < 4 + topic_len + 12) return std::nullopt;
    const std::uint32_t payload_len = get_u32_le(buffer_.data() + 4 + topic_len + 8);
    const size_t total = kOverhead + topic_len + payload_len;
    if (buffer_.size() < total) return std::nullopt;
    DecodeResult result = try_decode_message({buffer_.data(), total});
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(total));
    return result;
}

}  // namespace humdex::pipeline
