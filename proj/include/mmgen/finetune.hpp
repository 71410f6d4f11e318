#pragma once

#include "mmgen/optimizer.hpp"
#include "mmgen/transformer.hpp"
#include "mmgen/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mmgen {

// Output-head rows open for training; every other tensor is frozen.
struct TrainableMask {
  std::vector<bool> rows;  // length V_total, covers weight row and bias entry

  int64_t count() const;
  std::vector<int> row_ids() const;
};

// Image-token rows only. `include_sentinel_rows` additionally opens BOI/EOI.
TrainableMask build_mask(const VocabLayout& layout, bool include_sentinel_rows = false);

struct TrainableCount {
  int64_t weight = 0;
  int64_t bias = 0;
  int64_t total() const { return weight + bias; }
};

// K rows of the head: K*d_model weights plus K bias entries.
TrainableCount count_trainable(int64_t image_rows, int64_t d_model);
TrainableCount count_trainable(const VocabLayout& layout, const ModelConfig& model);
TrainableCount count_trainable(const TrainableMask& mask, const ModelConfig& model);

// Optimizer whose state exists only for the masked head rows. Frozen rows
// and frozen tensors are never written.
class SelectiveHeadOptimizer {
 public:
  SelectiveHeadOptimizer(OptimizerConfig config, TrainableMask mask);

  const TrainableMask& mask() const { return mask_; }
  const OptimizerConfig& config() const { return config_; }
  int64_t steps() const { return step_; }
  // Number of rows holding optimizer state.
  size_t state_rows() const { return weight_state_.size(); }

  void step(Transformer<float>& model, const ParamStore<float>& grads);

 private:
  OptimizerConfig config_;
  TrainableMask mask_;
  std::vector<int> rows_;
  int64_t step_ = 0;
  std::vector<SliceState<float>> weight_state_;
  std::vector<SliceState<float>> bias_state_;
};

// Full forward pass, head-row gradient, update restricted to masked rows.
double finetune_step(Transformer<float>& model, SelectiveHeadOptimizer& optimizer,
                     const Batch& batch);

// Frozen-trunk features of a dataset: the final hidden state at every
// position whose target carries fine-tuning loss, with that target.
struct HeadFeatures {
  Mat<float> hidden;  // one row per kept position
  std::vector<TokenId> targets;
  std::vector<float> weights;
  std::vector<size_t> offsets;  // sequence i owns rows [offsets[i], offsets[i+1])

  size_t sequences() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

HeadFeatures head_features(const Transformer<float>& model, const VocabLayout& layout,
                           const std::vector<TokenSequence>& dataset);

// Same update as finetune_step for the listed sequences, reading the
// cached features instead of running the frozen trunk.
double finetune_step(Transformer<float>& model, SelectiveHeadOptimizer& optimizer,
                     const HeadFeatures& features, std::span<const size_t> sequence_ids);

struct FinetuneConfig {
  OptimizerConfig optimizer{OptimizerKind::kSgd, 0.1, 0.9};
  int epochs = 64;
  int batch_size = 16;
  int max_steps = 0;  // 0 = no cap beyond epochs
  bool train_sentinel_rows = false;
  uint64_t seed = 0;
};

struct FinetuneReport {
  TrainableCount trainable;
  int64_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<std::string, double>> frozen_drift;  // max-abs change
  std::optional<std::string> error;  // set when a step failed and the run stopped

  double max_frozen_drift() const;
  std::string to_text() const;  // key: value lines
};

// Max-abs difference between `before` and `after` for every entry outside
// the trainable head rows.
std::vector<std::pair<std::string, double>> frozen_drift(const Transformer<float>& before,
                                                         const Transformer<float>& after,
                                                         const TrainableMask& mask);

// Loss over image tokens and the BOI/EOI sentinels; captions carry none.
float finetune_loss_weight(const VocabLayout& layout, TokenId target);

// Builds the mask, iterates seeded shuffled batches of the dataset and
// reports drift of everything the mask froze.
FinetuneReport finetune_run(const std::vector<TokenSequence>& dataset, Transformer<float>& model,
                            const VocabLayout& layout, const FinetuneConfig& config);

void write_report(const std::filesystem::path& path, const std::string& text);

}  // namespace mmgen
