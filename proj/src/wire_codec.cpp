#include "qsdp/wire_codec.hpp"

#include <bit>
#include <cstring>

namespace qsdp::wire {
namespace {

std::size_t payload_bytes(std::size_t length, unsigned bit_width) {
  return (static_cast<std::uint64_t>(length) * bit_width + 7) / 8;
}

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  void codes(std::span<const std::uint32_t> codes, unsigned bit_width) {
    const std::size_t base = out_.size();
    out_.resize(base + payload_bytes(codes.size(), bit_width), 0);
    std::uint64_t pos = 0;
    for (std::uint32_t code : codes) {
      for (unsigned j = 0; j < bit_width; ++j, ++pos) {
        if ((code >> j) & 1u) out_[base + pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
      }
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() {
    need(1, "header");
    return in_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::vector<std::uint32_t> codes(std::size_t length, unsigned bit_width) {
    const std::size_t bytes = payload_bytes(length, bit_width);
    need(bytes, "payload");
    std::vector<std::uint32_t> out(length, 0);
    std::uint64_t pos = 0;
    for (std::size_t i = 0; i < length; ++i) {
      std::uint32_t code = 0;
      for (unsigned j = 0; j < bit_width; ++j, ++pos) {
        code |= static_cast<std::uint32_t>((in_[pos_ + pos / 8] >> (pos % 8)) & 1u) << j;
      }
      out[i] = code;
    }
    pos_ += bytes;
    return out;
  }

  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw DecodeError(DecodeErrorKind::truncated,
                        std::string("message truncated while reading ") + what);
    }
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

float exact_f32(double v, const char* field) {
  const auto f = static_cast<float>(v);
  if (static_cast<double>(f) != v) {
    throw EncodeError(std::string(field) + " is not exactly representable as f32");
  }
  return f;
}

}  // namespace

std::vector<std::uint8_t> encode(std::span<const quant::QuantizedBlock> blocks,
                                 std::uint32_t bucket_size) {
  const unsigned bit_width = blocks.empty() ? 0 : blocks.front().bit_width;
  for (const auto& b : blocks) {
    if (b.bit_width != bit_width) throw EncodeError("blocks have mixed bit widths");
    if (b.codes.size() > UINT32_MAX) throw EncodeError("block longer than 2^32 - 1 codes");
    try {
      b.validate();
    } catch (const std::exception& e) {
      throw EncodeError(e.what());
    }
  }

  std::vector<std::uint8_t> out;
  out.reserve(message_size_bits(blocks) / 8);
  Writer w(out);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(bit_width));
  w.u32(bucket_size);
  w.u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    w.u32(static_cast<std::uint32_t>(b.codes.size()));
    w.f32(exact_f32(b.shift, "shift"));
    w.f32(exact_f32(b.scale_lo, "scale_lo"));
    w.f32(exact_f32(b.scale_hi, "scale_hi"));
  }
  for (const auto& b : blocks) w.codes(b.codes, bit_width);
  return out;
}

EncodedMessage decode_message(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  EncodedMessage msg;
  msg.header.version = r.u8();
  if (msg.header.version != kVersion) {
    throw DecodeError(DecodeErrorKind::unsupported_version,
                      "unsupported wire version " + std::to_string(msg.header.version));
  }
  msg.header.bit_width = r.u8();
  msg.header.bucket_size = r.u32("header");
  msg.header.block_count = r.u32("header");
  const unsigned bit_width = msg.header.bit_width;
  if (msg.header.block_count > 0 && (bit_width < 1 || bit_width > 32)) {
    throw DecodeError(DecodeErrorKind::invalid_bit_width,
                      "invalid bit width " + std::to_string(bit_width));
  }
  // Every block costs at least its metadata; reject absurd counts before allocating.
  if (static_cast<std::uint64_t>(msg.header.block_count) * kBlockMetadataBytes > r.remaining()) {
    throw DecodeError(DecodeErrorKind::truncated, "message truncated while reading block metadata");
  }

  msg.blocks.resize(msg.header.block_count);
  std::vector<std::uint32_t> lengths(msg.header.block_count);
  for (std::size_t i = 0; i < msg.blocks.size(); ++i) {
    lengths[i] = r.u32("block metadata");
    msg.blocks[i].shift = r.f32("block metadata");
    msg.blocks[i].scale_lo = r.f32("block metadata");
    msg.blocks[i].scale_hi = r.f32("block metadata");
    msg.blocks[i].bit_width = bit_width;
  }
  for (std::size_t i = 0; i < msg.blocks.size(); ++i) {
    msg.blocks[i].codes = r.codes(lengths[i], bit_width);
  }
  if (r.remaining() != 0) {
    throw DecodeError(DecodeErrorKind::trailing_bytes,
                      std::to_string(r.remaining()) + " trailing bytes after payload");
  }
  return msg;
}

std::vector<quant::QuantizedBlock> decode(std::span<const std::uint8_t> bytes) {
  return decode_message(bytes).blocks;
}

std::uint64_t payload_bits(std::span<const quant::QuantizedBlock> blocks) {
  std::uint64_t bits = 0;
  for (const auto& b : blocks) bits += 8 * payload_bytes(b.codes.size(), b.bit_width);
  return bits;
}

std::uint64_t message_size_bits(std::span<const quant::QuantizedBlock> blocks) {
  return 8 * (kHeaderBytes + kBlockMetadataBytes * blocks.size()) + payload_bits(blocks);
}

}  // namespace qsdp::wire
