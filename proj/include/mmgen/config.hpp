#pragma once

#include "mmgen/decoder.hpp"
#include "mmgen/finetune.hpp"
#include "mmgen/optimizer.hpp"
#include "mmgen/transformer.hpp"
#include "mmgen/vocab.hpp"
#include "mmgen/vq.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>

namespace mmgen {

struct VqTrainConfig {
  int steps = 1500;
  int batch_size = 16;
};

struct PretrainConfig {
  OptimizerConfig optimizer{OptimizerKind::kAdam, 2.5e-4};
  int epochs = 12;
  int batch_size = 16;
  // Loss weight on image-token targets during pre-training.
  double image_loss_weight = 0.1;
};

struct EvalConfig {
  int heldout_count = 256;
  uint64_t heldout_seed = 0x5eed0001;
  int prompts = 50;
};

struct RunConfig {
  uint64_t seed = 0;
  int text_size = 256;
  VqConfig vq;
  VqTrainConfig vq_train;
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  GenerationParams generation;
  EvalConfig eval;

  VocabLayout layout() const { return make_layout(vq, text_size); }
  // Sets the base seed and every per-stage seed derived from it.
  void apply_seed(uint64_t base);
  // Fills model.vocab_size from the layout when unset, then checks
  // cross-field consistency. Throws kConfig.
  void finalize();
};

// Missing keys keep their defaults; unknown keys are rejected (kConfig).
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json vq_config_to_json(const VqConfig& c);
VqConfig vq_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json layout_to_json(const VocabLayout& l);
VocabLayout layout_from_json(const nlohmann::json& j);

}  // namespace mmgen
