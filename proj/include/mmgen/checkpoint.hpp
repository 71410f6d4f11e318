#pragma once

#include "mmgen/tensor.hpp"
#include "mmgen/transformer.hpp"
#include "mmgen/vocab.hpp"
#include "mmgen/vq.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace mmgen {

inline constexpr uint32_t kCheckpointVersion = 1;

// Layout on disk (all integers little-endian):
//   "MMGCKPT\0" | u32 version | u32 header_len | header JSON | u32 crc32(header)
//   | u32 section_count | sections...
// section: u32 name_len | name | u32 rank | u64 dims[rank] | u64 byte_len
//          | f32 data (row-major) | u32 crc32(data)
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> sections;

  void put(const std::string& name, Tensor<float> tensor);
  const Tensor<float>* find(const std::string& name) const;
  // Throws kSectionMissing naming the section.
  const Tensor<float>& require(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void store_vq(Checkpoint& ckpt, const VqModel<float>& model);
VqModel<float> restore_vq(const Checkpoint& ckpt);

void store_lm(Checkpoint& ckpt, const Transformer<float>& model, const VocabLayout& layout);
Transformer<float> restore_lm(const Checkpoint& ckpt);
VocabLayout restore_layout(const Checkpoint& ckpt);

}  // namespace mmgen
