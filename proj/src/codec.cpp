#include "fedavg/codec.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fedavg {

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

MessageType message_type(const Message& m) {
  return static_cast<MessageType>(m.index() + 1);
}

const char* message_name(MessageType t) {
  switch (t) {
    case MessageType::join_request: return "JoinRequest";
    case MessageType::join_ack: return "JoinAck";
    case MessageType::global_model: return "GlobalModel";
    case MessageType::client_update: return "ClientUpdate";
    case MessageType::round_complete: return "RoundComplete";
    case MessageType::shutdown: return "Shutdown";
  }
  return "Unknown";
}

const char* to_string(CodecErrc code) {
  switch (code) {
    case CodecErrc::bad_magic: return "bad magic";
    case CodecErrc::unsupported_version: return "unsupported version";
    case CodecErrc::unknown_message_type: return "unknown message type";
    case CodecErrc::truncated: return "truncated frame";
    case CodecErrc::payload_length_mismatch: return "payload length mismatch";
    case CodecErrc::trailing_bytes: return "trailing bytes";
    case CodecErrc::non_finite_value: return "non-finite value";
    case CodecErrc::frame_too_large: return "frame too large";
    case CodecErrc::invalid_payload: return "invalid payload";
  }
  return "codec error";
}

CodecError::CodecError(CodecErrc code, const std::string& detail)
    : ProtocolError(std::string(to_string(code)) + ": " + detail), code_(code) {}

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'A', 'V', 'G'};
constexpr std::uint8_t kModelMagic[4] = {'F', 'M', 'D', 'L'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) {
    if (!std::isfinite(v)) throw CodecError(CodecErrc::non_finite_value, "refusing to encode " + std::to_string(v));
    raw(&v, sizeof v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void params(const ParameterSet& p) {
    u32(static_cast<std::uint32_t>(p.layer_count()));
    for (const auto& layer : p.layers()) {
      str(layer.name);
      u64(layer.values.size());
      for (double v : layer.values) {
        if (!std::isfinite(v)) throw CodecError(CodecErrc::non_finite_value, "layer '" + layer.name + "'");
      }
      raw(layer.values.data(), layer.values.size() * sizeof(double));
    }
  }
  Bytes take() { return std::move(out_); }

 private:
  void raw(const void* data, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), b, b + n);
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64(const char* field) {
    double v;
    raw(&v, sizeof v);
    if (!std::isfinite(v)) throw CodecError(CodecErrc::non_finite_value, field);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  ParameterSet params() {
    const std::uint32_t count = u32();
    std::vector<Layer> layers;
    for (std::uint32_t l = 0; l < count; ++l) {
      Layer layer;
      layer.name = str();
      const std::uint64_t n = u64();
      if (n > remaining() / sizeof(double)) {
        throw CodecError(CodecErrc::payload_length_mismatch,
                         "layer '" + layer.name + "' claims " + std::to_string(n) + " values");
      }
      layer.values.resize(static_cast<std::size_t>(n));
      raw(layer.values.data(), layer.values.size() * sizeof(double));
      for (double v : layer.values) {
        if (!std::isfinite(v)) throw CodecError(CodecErrc::non_finite_value, "layer '" + layer.name + "'");
      }
      layers.push_back(std::move(layer));
    }
    try {
      return ParameterSet(std::move(layers));
    } catch (const StructuralError& e) {
      throw CodecError(CodecErrc::invalid_payload, e.what());
    }
  }
  void finish() const {
    if (pos_ != in_.size()) {
      throw CodecError(CodecErrc::payload_length_mismatch,
                       std::to_string(in_.size() - pos_) + " unread payload bytes");
    }
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) {
      throw CodecError(CodecErrc::payload_length_mismatch, "payload ends inside a field");
    }
  }
  void raw(void* out, std::size_t n) {
    need(n);
    if (n > 0) std::memcpy(out, in_.data() + pos_, n);
    pos_ += n;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_model_spec(Writer& w, const ModelSpec& spec) {
  w.u32(static_cast<std::uint32_t>(spec.input_dim));
  w.u32(static_cast<std::uint32_t>(spec.hidden_dims.size()));
  for (auto h : spec.hidden_dims) w.u32(static_cast<std::uint32_t>(h));
  w.u8(static_cast<std::uint8_t>(spec.activation));
}

ModelSpec read_model_spec(Reader& r) {
  ModelSpec spec;
  spec.input_dim = r.u32();
  const std::uint32_t n = r.u32();
  if (n > r.remaining() / 4) throw CodecError(CodecErrc::payload_length_mismatch, "hidden layer count");
  for (std::uint32_t i = 0; i < n; ++i) spec.hidden_dims.push_back(r.u32());
  const std::uint8_t act = r.u8();
  if (act != static_cast<std::uint8_t>(Activation::relu)) {
    throw CodecError(CodecErrc::invalid_payload, "unknown activation " + std::to_string(act));
  }
  spec.activation = Activation::relu;
  return spec;
}

void write_train_config(Writer& w, const TrainConfig& c) {
  w.f64(c.learning_rate);
  w.u32(c.epochs);
  w.u32(c.batch_size);
  w.f64(c.adam_beta1);
  w.f64(c.adam_beta2);
  w.f64(c.adam_epsilon);
  w.u64(c.seed);
  w.u8(static_cast<std::uint8_t>(c.checkpoint));
}

TrainConfig read_train_config(Reader& r) {
  TrainConfig c;
  c.learning_rate = r.f64("learning_rate");
  c.epochs = r.u32();
  c.batch_size = r.u32();
  c.adam_beta1 = r.f64("adam_beta1");
  c.adam_beta2 = r.f64("adam_beta2");
  c.adam_epsilon = r.f64("adam_epsilon");
  c.seed = r.u64();
  const std::uint8_t policy = r.u8();
  if (policy > 1) throw CodecError(CodecErrc::invalid_payload, "unknown checkpoint policy");
  c.checkpoint = static_cast<CheckpointPolicy>(policy);
  return c;
}

Bytes encode_payload(const Message& m) {
  Writer w;
  std::visit(
      [&](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, JoinRequest>) {
          w.str(msg.client_id);
        } else if constexpr (std::is_same_v<T, JoinAck>) {
          w.str(msg.client_id);
          write_model_spec(w, msg.model);
          write_train_config(w, msg.train);
        } else if constexpr (std::is_same_v<T, GlobalModel>) {
          w.u32(msg.round_index);
          w.params(msg.params);
        } else if constexpr (std::is_same_v<T, ClientUpdate>) {
          const auto& u = msg.update;
          w.str(u.client_id);
          w.u32(u.round_index);
          w.params(u.params);
          w.u64(u.num_train_samples);
          w.f64(u.best_val_loss);
          w.u32(u.epochs_run);
        } else if constexpr (std::is_same_v<T, RoundComplete>) {
          w.u32(msg.round_index);
        } else {
          w.str(msg.reason);
        }
      },
      m);
  return w.take();
}

Message decode_payload(MessageType type, std::span<const std::uint8_t> payload) {
  Reader r(payload);
  Message out;
  switch (type) {
    case MessageType::join_request:
      out = JoinRequest{r.str()};
      break;
    case MessageType::join_ack: {
      JoinAck ack;
      ack.client_id = r.str();
      ack.model = read_model_spec(r);
      ack.train = read_train_config(r);
      out = std::move(ack);
      break;
    }
    case MessageType::global_model: {
      GlobalModel g;
      g.round_index = r.u32();
      g.params = r.params();
      out = std::move(g);
      break;
    }
    case MessageType::client_update: {
      ModelUpdate u;
      u.client_id = r.str();
      u.round_index = r.u32();
      u.params = r.params();
      u.num_train_samples = r.u64();
      u.best_val_loss = r.f64("best_val_loss");
      u.epochs_run = r.u32();
      out = ClientUpdate{std::move(u)};
      break;
    }
    case MessageType::round_complete:
      out = RoundComplete{r.u32()};
      break;
    case MessageType::shutdown:
      out = Shutdown{r.str()};
      break;
  }
  r.finish();
  return out;
}

struct Header {
  MessageType type;
  std::uint32_t payload_len;
};

// Validates the fixed header; `bytes` must hold at least kFrameHeaderSize.
Header parse_header(std::span<const std::uint8_t> bytes) {
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CodecError(CodecErrc::bad_magic, "frame does not start with FAVG");
  if (bytes[4] != kProtocolVersion) {
    throw CodecError(CodecErrc::unsupported_version, "version " + std::to_string(bytes[4]));
  }
  const std::uint8_t type = bytes[5];
  if (type < 1 || type > 6) throw CodecError(CodecErrc::unknown_message_type, "type " + std::to_string(type));
  std::uint32_t len;
  std::memcpy(&len, bytes.data() + 6, 4);
  if (len > kMaxFrameSize - kFrameHeaderSize) {
    throw CodecError(CodecErrc::frame_too_large, std::to_string(len) + " byte payload");
  }
  return {static_cast<MessageType>(type), len};
}

}  // namespace

Bytes encode(const Message& m) {
  const Bytes payload = encode_payload(m);
  Bytes frame;
  frame.reserve(kFrameHeaderSize + payload.size());
  frame.insert(frame.end(), std::begin(kMagic), std::end(kMagic));
  frame.push_back(kProtocolVersion);
  frame.push_back(static_cast<std::uint8_t>(message_type(m)));
  const auto len = static_cast<std::uint32_t>(payload.size());
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
  frame.insert(frame.end(), lp, lp + 4);
  frame.insert(frame.end(), payload.begin(), payload.end());
  return frame;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < kFrameHeaderSize) {
    // Report a foreign prefix as such rather than as truncation.
    if (std::memcmp(frame.data(), kMagic, std::min<std::size_t>(frame.size(), 4)) != 0) {
      throw CodecError(CodecErrc::bad_magic, "frame does not start with FAVG");
    }
    throw CodecError(CodecErrc::truncated, std::to_string(frame.size()) + " bytes, header needs 10");
  }
  const Header h = parse_header(frame);
  const std::size_t end = kFrameHeaderSize + h.payload_len;
  if (frame.size() < end) {
    throw CodecError(CodecErrc::truncated, "payload_len " + std::to_string(h.payload_len) + " but only " +
                                               std::to_string(frame.size() - kFrameHeaderSize) + " bytes follow");
  }
  if (frame.size() > end) {
    throw CodecError(CodecErrc::trailing_bytes, std::to_string(frame.size() - end) + " bytes after frame");
  }
  return decode_payload(h.type, frame.subspan(kFrameHeaderSize, h.payload_len));
}

Bytes encode_global_model_payload(const GlobalModel& m) { return encode_payload(m); }

GlobalModel decode_global_model_payload(std::span<const std::uint8_t> payload) {
  return std::get<GlobalModel>(decode_payload(MessageType::global_model, payload));
}

void FrameReassembler::feed(std::span<const std::uint8_t> chunk) {
  if (consumed_ > 0 && consumed_ == buffer_.size()) {
    buffer_.clear();
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), chunk.begin(), chunk.end());
}

std::optional<Message> FrameReassembler::next() {
  const std::span<const std::uint8_t> pending(buffer_.data() + consumed_, buffer_.size() - consumed_);
  if (pending.size() < 4) {
    if (!pending.empty() && std::memcmp(pending.data(), kMagic, pending.size()) != 0) {
      throw CodecError(CodecErrc::bad_magic, "stream does not start with FAVG");
    }
    return std::nullopt;
  }
  if (pending.size() < kFrameHeaderSize) {
    if (std::memcmp(pending.data(), kMagic, 4) != 0) throw CodecError(CodecErrc::bad_magic, "stream does not start with FAVG");
    return std::nullopt;
  }
  const Header h = parse_header(pending);
  const std::size_t total = kFrameHeaderSize + h.payload_len;
  if (pending.size() < total) return std::nullopt;
  Message m = decode_payload(h.type, pending.subspan(kFrameHeaderSize, h.payload_len));
  consumed_ += total;
  if (consumed_ > (1u << 20) && consumed_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed_));
    consumed_ = 0;
  }
  return m;
}

Bytes encode_model_file(const GlobalModel& m) {
  Bytes out(std::begin(kModelMagic), std::end(kModelMagic));
  const Bytes payload = encode_payload(m);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

GlobalModel decode_model_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    throw CodecError(CodecErrc::bad_magic, "model file does not start with FMDL");
  }
  return decode_global_model_payload(bytes.subspan(4));
}

void save_model(const std::filesystem::path& path, const ParameterSet& params, std::uint32_t round_index) {
  const Bytes bytes = encode_model_file(GlobalModel{round_index, params});
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write model file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing model file " + path.string());
}

GlobalModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file " + path.string());
  const Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model_file(bytes);
}

}  // namespace fedavg
