#pragma once

// Wire format for sequences of QuantizedBlock (all integers little-endian):
//
//   header   version:u8  bit_width:u8  bucket_size:u32  block_count:u32     (10 bytes)
//   metadata block_count x { length:u32  shift:f32  scale_lo:f32  scale_hi:f32 }
//   payload  block_count x { ceil(length * bit_width / 8) bytes }
//
// Codes are packed least-significant bit first: bit j of code i of a block is
// bit (i * bit_width + j) of that block's payload, counting from bit 0 of byte
// 0. Each block's payload starts on a byte boundary. docs/wire_format.md has
// a worked example.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsdp/quantizers.hpp"

namespace qsdp::wire {

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 10;
inline constexpr std::size_t kBlockMetadataBytes = 16;

enum class DecodeErrorKind { truncated, unsupported_version, invalid_bit_width, trailing_bytes };

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DecodeErrorKind kind() const noexcept { return kind_; }

 private:
  DecodeErrorKind kind_;
};

class EncodeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MessageHeader {
  std::uint8_t version = kVersion;
  std::uint8_t bit_width = 0;  // 0 for an empty block list
  std::uint32_t bucket_size = 0;
  std::uint32_t block_count = 0;
};

struct EncodedMessage {
  MessageHeader header;
  std::vector<quant::QuantizedBlock> blocks;
};

/// Serializes blocks. Throws EncodeError on mixed bit widths, a code that does
/// not fit its bit width, or metadata that is not exactly representable as f32.
std::vector<std::uint8_t> encode(std::span<const quant::QuantizedBlock> blocks,
                                 std::uint32_t bucket_size = 0);

/// Parses a full message including its header.
EncodedMessage decode_message(std::span<const std::uint8_t> bytes);

/// Inverse of encode.
std::vector<quant::QuantizedBlock> decode(std::span<const std::uint8_t> bytes);

/// Exact size in bits of encode(blocks), metadata and padding included.
std::uint64_t message_size_bits(std::span<const quant::QuantizedBlock> blocks);

/// Payload bits only (codes plus per-block byte padding).
std::uint64_t payload_bits(std::span<const quant::QuantizedBlock> blocks);

}  // namespace qsdp::wire
