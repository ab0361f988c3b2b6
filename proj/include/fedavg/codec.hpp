#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "fedavg/error.hpp"
#include "fedavg/messages.hpp"

namespace fedavg {

using Bytes = std::vector<std::uint8_t>;

/// Frame layout:
///
///   offset 0  4 bytes  magic "FAVG"
///   offset 4  1 byte   version (1)
///   offset 5  1 byte   message type
///   offset 6  4 bytes  payload length, little-endian u32
///   offset 10 ...      payload
///
/// Payload primitives are little-endian fixed width; strings are a u32 byte
/// count followed by UTF-8; a ParameterSet is a u32 layer count followed by,
/// per layer, its name, a u64 element count and the binary64 values.
inline constexpr std::size_t kFrameHeaderSize = 10;
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameSize = 64u << 20;

enum class CodecErrc {
  bad_magic,
  unsupported_version,
  unknown_message_type,
  truncated,
  payload_length_mismatch,
  trailing_bytes,
  non_finite_value,
  frame_too_large,
  invalid_payload,
};

const char* to_string(CodecErrc code);

class CodecError : public ProtocolError {
 public:
  CodecError(CodecErrc code, const std::string& detail);
  CodecErrc code() const noexcept { return code_; }

 private:
  CodecErrc code_;
};

Bytes encode(const Message& m);

// Decodes exactly one frame; any byte after it is a trailing_bytes error.
Message decode(std::span<const std::uint8_t> frame);

// Payload-level helpers, exposed for the model file format.
Bytes encode_global_model_payload(const GlobalModel& m);
GlobalModel decode_global_model_payload(std::span<const std::uint8_t> payload);

/// Incremental frame reassembly over a byte stream. Header fields are checked
/// as soon as the header is complete, so an oversize or foreign frame is
/// rejected before its payload is buffered.
class FrameReassembler {
 public:
  void feed(std::span<const std::uint8_t> chunk);
  // Next complete message, if any. Throws CodecError on a malformed frame.
  std::optional<Message> next();
  std::size_t buffered() const { return buffer_.size() - consumed_; }

 private:
  Bytes buffer_;
  std::size_t consumed_ = 0;
};

/// Saved-model files: "FMDL" followed by a GlobalModel payload.
Bytes encode_model_file(const GlobalModel& m);
GlobalModel decode_model_file(std::span<const std::uint8_t> bytes);
void save_model(const std::filesystem::path& path, const ParameterSet& params, std::uint32_t round_index = 0);
GlobalModel load_model(const std::filesystem::path& path);

}  // namespace fedavg
