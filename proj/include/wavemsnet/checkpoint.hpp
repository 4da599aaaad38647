#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wavemsnet/config.hpp"
#include "wavemsnet/dsp.hpp"
#include "wavemsnet/model.hpp"
#include "wavemsnet/optim.hpp"

namespace wavemsnet {

inline constexpr char kCheckpointMagic[8] = {'W', 'M', 'S', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMomentumPrefix = "momentum:";

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const CheckpointRecord&) const = default;
};

/// Serialized model state.
///
/// File layout, all integers little-endian u32:
///   "WMSNCKPT" version meta_len meta_text record_count
///   then per record: name_len name rank dims... float32 values
/// Records hold parameters, then BN running statistics, then momentum
/// buffers under "momentum:<parameter>". `meta` carries the config echo and
/// the training phase tag.
struct Checkpoint {
  KeyValues meta;
  std::vector<CheckpointRecord> records;

  std::string phase() const { return meta.get("phase").value_or(""); }

  const CheckpointRecord* find(std::string_view name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto v = read_u32(b_, pos_);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw Error(ErrorCode::format, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                         std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_string(out, ckpt.meta.str());
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (shape_size(r.shape) != r.values.size()) {
      throw Error(ErrorCode::shape_mismatch, "checkpoint record '" + r.name + "' has " +
                                                 std::to_string(r.values.size()) + " values for shape " +
                                                 to_string(r.shape));
    }
    detail::put_string(out, r.name);
    detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : r.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw Error(ErrorCode::format, "not a checkpoint (bad magic)");
  }
  detail::Reader in(bytes.subspan(8));
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::format, "checkpoint version " + std::to_string(version) + ", expected " +
                                       std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  const auto meta_len = in.u32("meta length");
  ckpt.meta = KeyValues::parse(in.str(meta_len, "meta"));
  const auto count = in.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.str(in.u32("name length"), "name");
    const auto rank = in.u32("rank");
    if (rank > 8) throw Error(ErrorCode::format, "record '" + r.name + "' has rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.shape.push_back(in.u32("dims"));
      if (r.shape.back() == 0) throw Error(ErrorCode::format, "record '" + r.name + "' has a zero extent");
      n *= r.shape.back();
    }
    if (n > bytes.size()) throw Error(ErrorCode::format, "record '" + r.name + "' larger than the file");
    r.values.resize(n);
    for (auto& v : r.values) v = in.f32("values");
    ckpt.records.push_back(std::move(r));
  }
  if (!in.done()) throw Error(ErrorCode::format, "trailing bytes after last checkpoint record");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

template <typename T>
CheckpointRecord to_record(const std::string& name, const Tensor<T>& t) {
  CheckpointRecord r{name, t.shape(), {}};
  r.values.reserve(t.size());
  for (T v : t.data()) r.values.push_back(static_cast<float>(v));
  return r;
}

/// Snapshot of a model, its optimizer state and `meta`. The model config is
/// merged into the meta block.
template <typename T>
Checkpoint capture(const WaveMsNet<T>& model, const SgdState<T>* state, KeyValues meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  ckpt.meta.merge(model.config().to_key_values());
  for (const auto& p : model.parameters()) ckpt.records.push_back(to_record(p.name, p.tensor));
  for (const auto& b : model.buffers()) ckpt.records.push_back(to_record(b.name, b.tensor));
  if (state) {
    for (const auto& [name, v] : state->entries()) ckpt.records.push_back(to_record(kMomentumPrefix + name, v));
  }
  return ckpt;
}

/// Copies checkpoint values into `model` (and `state` when given). Every
/// parameter and buffer must be present with a matching shape.
template <typename T>
void restore(WaveMsNet<T>& model, SgdState<T>* state, const Checkpoint& ckpt) {
  auto copy_into = [&](const std::string& name, Tensor<T>& t) {
    const auto* r = ckpt.find(name);
    if (!r) throw Error(ErrorCode::format, "checkpoint lacks parameter '" + name + "'");
    if (r->shape != t.shape()) {
      throw Error(ErrorCode::shape_mismatch, "parameter '" + name + "': checkpoint shape " + to_string(r->shape) +
                                                 ", model shape " + to_string(t.shape()));
    }
    for (std::size_t i = 0; i < r->values.size(); ++i) t[i] = static_cast<T>(r->values[i]);
  };
  for (auto& p : model.parameters()) copy_into(p.name, p.tensor);
  for (auto& b : model.buffers()) copy_into(b.name, b.tensor);
  if (state) {
    state->clear();
    const std::string prefix = kMomentumPrefix;
    for (const auto& r : ckpt.records) {
      if (!r.name.starts_with(prefix)) continue;
      const std::string name = r.name.substr(prefix.size());
      Tensor<T>* target = nullptr;
      for (auto& p : model.parameters()) {
        if (p.name == name) target = &p.tensor;
      }
      if (!target) throw Error(ErrorCode::format, "momentum buffer for unknown parameter '" + name + "'");
      auto& v = state->slot(name, r.shape);
      if (r.shape != target->shape()) {
        throw Error(ErrorCode::shape_mismatch, "momentum buffer '" + name + "' does not match its parameter");
      }
      for (std::size_t i = 0; i < r.values.size(); ++i) v[i] = static_cast<T>(r.values[i]);
    }
  }
}

/// Rebuilds the model described by the checkpoint's config echo.
template <typename T>
WaveMsNet<T> model_from_checkpoint(const Checkpoint& ckpt, SgdState<T>* state = nullptr) {
  WaveMsNet<T> model(ModelConfig::from_key_values(ckpt.meta), 0);
  restore(model, state, ckpt);
  return model;
}

}  // namespace wavemsnet
