#pragma once

#include "mmgen/optimizer.hpp"
#include "mmgen/param_store.hpp"
#include "mmgen/vocab.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mmgen {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 96;
  int vocab_size = 0;  // V_total of the layout this model serves
  uint64_t seed = 0;

  // image_block_length: the model must fit at least one image block plus
  // sentinels.
  void validate(int image_block_length = 0) const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// B x T token matrix with next-token targets and per-position loss weights
// (weight 0 excludes a position; PAD positions always carry 0).
struct Batch {
  int batch = 0;
  int length = 0;
  std::vector<TokenId> tokens;
  std::vector<TokenId> targets;
  std::vector<float> weights;

  // Builds inputs seq[0..n-2] and targets seq[1..n-1] for each sequence,
  // padding to the longest. weight_of(target_id) gives the loss weight.
  template <typename WeightFn>
  static Batch from_sequences(std::span<const TokenSequence> sequences, TokenId pad,
                              WeightFn&& weight_of);
};

enum class GradientScope { kAll, kHeadOnly };

// Mean of -log softmax(logits)[target] over positions with nonzero weight;
// each position's term is scaled by its weight. Accumulates in double.
// Writes d(loss)/d(logits) when `dlogits` is non-null.
template <typename T>
double cross_entropy(const Mat<T>& logits, std::span<const TokenId> targets,
                     std::span<const float> weights, Mat<T>* dlogits = nullptr);

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits);

// Pre-norm decoder-only transformer: learned absolute positions, GELU
// feed-forward, untied output head ("lm.head.weight" / "lm.head.bias").
template <typename T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  int head_weight_index() const { return head_weight_; }
  int head_bias_index() const { return head_bias_; }

  // Logits for every position, rows ordered (b, t): [B*T, V].
  Mat<T> forward(std::span<const TokenId> tokens, int batch, int length) const;

  // Final-norm hidden states feeding the output head: [B*T, d_model].
  Mat<T> hidden(std::span<const TokenId> tokens, int batch, int length) const;

  // Logits at the last position of one sequence.
  std::vector<T> next_logits(std::span<const TokenId> prefix) const;

  // Weighted cross-entropy for the batch; gradients accumulated into
  // `grads` (same layout as params) when non-null.
  double loss_and_gradient(const Batch& batch, ParamStore<T>* grads,
                           GradientScope scope = GradientScope::kAll) const;

  struct LayerIndex {
    int ln1_gain, ln1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias;
    int ln2_gain, ln2_bias, up_weight, up_bias, down_weight, down_bias;
  };

 private:
  struct Cache;
  enum class Output { kLogits, kLastLogits, kHidden };
  Mat<T> run(std::span<const TokenId> tokens, int batch, int length, Cache* cache,
             Output output) const;
  void check_tokens(std::span<const TokenId> tokens, int length) const;

  ModelConfig config_;
  ParamStore<T> params_;
  int embed_ = -1, pos_ = -1, final_gain_ = -1, final_bias_ = -1;
  int head_weight_ = -1, head_bias_ = -1;
  std::vector<LayerIndex> layers_;
};

struct StepResult {
  double loss = 0.0;
  int64_t step = 0;
};

// One optimizer update over all parameters.
StepResult train_step(Transformer<float>& model, Optimizer<float>& optimizer, const Batch& batch);

template <typename WeightFn>
Batch Batch::from_sequences(std::span<const TokenSequence> sequences, TokenId pad,
                            WeightFn&& weight_of) {
  Batch b;
  b.batch = static_cast<int>(sequences.size());
  for (const auto& s : sequences) b.length = std::max(b.length, static_cast<int>(s.size()) - 1);
  const size_t cells = static_cast<size_t>(b.batch) * b.length;
  b.tokens.assign(cells, pad);
  b.targets.assign(cells, pad);
  b.weights.assign(cells, 0.0f);
  for (int i = 0; i < b.batch; ++i) {
    const auto& s = sequences[static_cast<size_t>(i)];
    for (size_t t = 0; t + 1 < s.size(); ++t) {
      const size_t cell = static_cast<size_t>(i) * b.length + t;
      b.tokens[cell] = s[t];
      b.targets[cell] = s[t + 1];
      b.weights[cell] = s[t + 1] == pad ? 0.0f : static_cast<float>(weight_of(s[t + 1]));
    }
  }
  return b;
}

}  // namespace mmgen
