#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace humdex::pipeline {

// Framed pub/sub message. Payload carries one JSON document whose schema is
// selected by the topic ("cmd", "pedal", "frame").
struct WireMessage {
    std::string topic;
    std::uint64_t timestamp_us = 0;
    std::vector<std::uint8_t> payload;

    bool operator==(const WireMessage&) const = default;
};

enum class DecodeStatus { Ok, BadMagic, BadVersion, BadCrc, Truncated, LengthMismatch };

const char* to_string(DecodeStatus status);

// Frame layout, little-endian:
//   magic 'H' 'D', version 0x01, topic length u8, topic bytes,
//   timestamp u64, payload length u32, payload bytes,
//   CRC32 (IEEE) over everything after the magic.
std::vector<std::uint8_t> encode_message(const WireMessage& message);

struct DecodeResult {
    DecodeStatus status = DecodeStatus::Ok;
    WireMessage message;
};

// Decodes one complete frame occupying the whole span.
DecodeResult try_decode_message(std::span<const std::uint8_t> bytes);

// Throwing variant: Error{Parse} with the status name on failure.
WireMessage decode_message(std::span<const std::uint8_t> bytes);

// Standard IEEE CRC32 (reflected 0xEDB88320, init/xorout 0xFFFFFFFF).
std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes);

// Incremental parser for back-to-back frames on a byte stream.
class FrameParser {
  public:
    void feed(std::span<const std::uint8_t> bytes);
    // Next complete frame, if any. Corrupt frames surface as errors.
    std::optional<DecodeResult> next();

  private:
    std::vector<std::uint8_t> buffer_;
};

}  // namespace humdex::pipeline
