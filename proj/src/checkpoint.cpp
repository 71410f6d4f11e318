#include "mmgen/checkpoint.hpp"

#include "mmgen/config.hpp"
#include "mmgen/error.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mmgen {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'M', 'G', 'C', 'K', 'P', 'T', '\0'};

uint32_t crc32_of(const void* data, size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* bytes = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<size_t>(size, 1u << 30));
    crc = crc32(crc, bytes, chunk);
    bytes += chunk;
    size -= chunk;
  }
  return static_cast<uint32_t>(crc);
}

class Writer {
 public:
  template <typename U>
  void scalar(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void bytes(const void* data, size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  template <typename U>
  U scalar(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const char* take(size_t n, const char* what) {
    if (n > buf_.size() - pos_) {
      throw Error(ErrorCode::kTruncated, std::string("checkpoint truncated while reading ") + what,
                  path_ + " offset=" + std::to_string(pos_));
    }
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::vector<char>& buf_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, Tensor<float> tensor) {
  for (auto& [n, t] : sections) {
    if (n == name) {
      t = std::move(tensor);
      return;
    }
  }
  sections.emplace_back(name, std::move(tensor));
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : sections) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor<float>& Checkpoint::require(const std::string& name) const {
  const Tensor<float>* t = find(name);
  if (!t) throw Error(ErrorCode::kSectionMissing, "checkpoint lacks section " + name, name);
  return *t;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.scalar<uint32_t>(kCheckpointVersion);
  nlohmann::json header = checkpoint.header;
  header["format_version"] = kCheckpointVersion;
  const std::string text = header.dump();
  w.scalar<uint32_t>(static_cast<uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.scalar<uint32_t>(crc32_of(text.data(), text.size()));
  w.scalar<uint32_t>(static_cast<uint32_t>(checkpoint.sections.size()));
  for (const auto& [name, tensor] : checkpoint.sections) {
    if (shape_numel(tensor.shape) != tensor.numel()) {
      throw Error(ErrorCode::kInputShape, "tensor shape does not match its data", name);
    }
    w.scalar<uint32_t>(static_cast<uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.scalar<uint32_t>(static_cast<uint32_t>(tensor.shape.size()));
    for (int64_t d : tensor.shape) w.scalar<uint64_t>(static_cast<uint64_t>(d));
    const size_t bytes = tensor.data.size() * sizeof(float);
    w.scalar<uint64_t>(bytes);
    w.bytes(tensor.data.data(), bytes);
    w.scalar<uint32_t>(crc32_of(tensor.data.data(), bytes));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint", path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw Error(ErrorCode::kIo, "checkpoint write failed", path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint", path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf, path.string());
  if (std::memcmp(r.take(sizeof(kMagic), "magic"), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kVersion, "not a checkpoint file (bad magic)", path.string());
  }
  const auto version = r.scalar<uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersion, "unsupported checkpoint version",
                "found=" + std::to_string(version) + " expected=" + std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  const auto header_len = r.scalar<uint32_t>("header length");
  const char* header = r.take(header_len, "header");
  if (r.scalar<uint32_t>("header checksum") != crc32_of(header, header_len)) {
    throw Error(ErrorCode::kChecksum, "header checksum mismatch", path.string());
  }
  try {
    ckpt.header = nlohmann::json::parse(header, header + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kVersion, "unreadable checkpoint header", e.what());
  }
  const auto count = r.scalar<uint32_t>("section count");
  for (uint32_t s = 0; s < count; ++s) {
    const auto name_len = r.scalar<uint32_t>("section name length");
    const char* name_ptr = r.take(name_len, "section name");
    std::string name(name_ptr, name_len);
    const auto rank = r.scalar<uint32_t>("rank");
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(r.scalar<uint64_t>("dims")));
    const auto bytes = r.scalar<uint64_t>("byte length");
    if (bytes != static_cast<uint64_t>(shape_numel(shape)) * sizeof(float)) {
      throw Error(ErrorCode::kChecksum, "section byte length disagrees with its shape", name);
    }
    const char* data = r.take(static_cast<size_t>(bytes), "tensor data");
    const auto crc = r.scalar<uint32_t>("section checksum");
    if (crc != crc32_of(data, static_cast<size_t>(bytes))) {
      throw Error(ErrorCode::kChecksum, "section checksum mismatch", name);
    }
    Tensor<float> t(shape);
    std::memcpy(t.data.data(), data, static_cast<size_t>(bytes));
    ckpt.sections.emplace_back(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw Error(ErrorCode::kChecksum, "trailing bytes after last section", path.string());
  return ckpt;
}

void store_vq(Checkpoint& ckpt, const VqModel<float>& model) {
  ckpt.header["vq"] = vq_config_to_json(model.config());
  for (const auto& e : model.params().entries()) ckpt.put(e.name, e.tensor);
  ckpt.put("vq.codebook", model.codebook().entries);
  ckpt.put("vq.codebook.ema_count", model.ema_count());
  ckpt.put("vq.codebook.ema_sum", model.ema_sum());
}

namespace {

void copy_into(Tensor<float>& dst, const Tensor<float>& src, const std::string& name) {
  if (dst.shape != src.shape) {
    throw Error(ErrorCode::kInputShape, "checkpoint tensor has unexpected shape",
                name + " " + shape_to_string(src.shape) + " expected " + shape_to_string(dst.shape));
  }
  dst.data = src.data;
}

}  // namespace

VqModel<float> restore_vq(const Checkpoint& ckpt) {
  const Tensor<float>& codebook = ckpt.require("vq.codebook");
  if (!ckpt.header.contains("vq")) {
    throw Error(ErrorCode::kSectionMissing, "checkpoint header lacks tokenizer config", "vq");
  }
  VqModel<float> model(vq_config_from_json(ckpt.header.at("vq")));
  for (auto& e : model.params().entries()) copy_into(e.tensor, ckpt.require(e.name), e.name);
  copy_into(model.codebook().entries, codebook, "vq.codebook");
  copy_into(model.ema_count(), ckpt.require("vq.codebook.ema_count"), "vq.codebook.ema_count");
  copy_into(model.ema_sum(), ckpt.require("vq.codebook.ema_sum"), "vq.codebook.ema_sum");
  return model;
}

void store_lm(Checkpoint& ckpt, const Transformer<float>& model, const VocabLayout& layout) {
  ckpt.header["model"] = model_config_to_json(model.config());
  ckpt.header["layout"] = layout_to_json(layout);
  for (const auto& e : model.params().entries()) ckpt.put(e.name, e.tensor);
}

Transformer<float> restore_lm(const Checkpoint& ckpt) {
  ckpt.require("lm.embed");
  if (!ckpt.header.contains("model")) {
    throw Error(ErrorCode::kSectionMissing, "checkpoint header lacks model config", "model");
  }
  Transformer<float> model(model_config_from_json(ckpt.header.at("model")));
  for (auto& e : model.params().entries()) copy_into(e.tensor, ckpt.require(e.name), e.name);
  return model;
}

VocabLayout restore_layout(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("layout")) {
    throw Error(ErrorCode::kSectionMissing, "checkpoint header lacks vocabulary layout", "layout");
  }
  return layout_from_json(ckpt.header.at("layout"));
}

}  // namespace mmgen
