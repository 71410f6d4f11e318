#pragma once

#include "mmgen/rng.hpp"
#include "mmgen/transformer.hpp"
#include "mmgen/vocab.hpp"
#include "mmgen/vq.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mmgen {

enum class DecodeMode { kText, kImage, kDone };

// Tracks where a sequence is in BOS (text | BOI image^N EOI)* EOS and the
// remaining budgets.
class DecoderState {
 public:
  // max_tokens bounds the whole sequence including prompt and EOS.
  DecoderState(const VocabLayout& layout, int max_tokens, int max_images);

  DecodeMode mode() const { return mode_; }
  int image_count() const { return image_count_; }  // tokens so far in the open block
  int images_emitted() const { return images_emitted_; }
  const TokenSequence& tokens() const { return tokens_; }
  int max_tokens() const { return max_tokens_; }
  int max_images() const { return max_images_; }

  // Appends a token; throws kParse if the grammar forbids it here.
  void push(TokenId id);

  // 1 = allowed. TEXT: text ids, EOS, and BOI while an image budget remains
  // and a whole block (plus EOI, EOS) still fits. IMAGE(count<N): image ids.
  // IMAGE(N): EOI only. DONE: nothing.
  std::vector<uint8_t> allowed_mask() const;

 private:
  int remaining() const { return max_tokens_ - static_cast<int>(tokens_.size()); }

  VocabLayout layout_;
  int max_tokens_;
  int max_images_;
  DecodeMode mode_ = DecodeMode::kText;
  bool started_ = false;
  int image_count_ = 0;
  int images_emitted_ = 0;
  TokenSequence tokens_;
};

struct SamplingParams {
  double temperature = 1.0;  // 0 = greedy
  int top_k = 0;             // 0 = off
  double top_p = 1.0;        // 1 = off

  void validate() const;
  friend bool operator==(const SamplingParams&, const SamplingParams&) = default;
};

// Forbidden tokens are removed before normalization, then temperature,
// top-k and top-p apply within the allowed set. Greedy ties go to the
// lowest id.
TokenId sample_next(std::span<const float> logits, std::span<const uint8_t> allowed,
                    const SamplingParams& params, Rng& rng);

struct GenerationParams {
  SamplingParams text{0.9, 0, 0.95};
  SamplingParams image{1.0, 0, 1.0};
  uint64_t seed = 0;
  int max_tokens = 96;
  int max_images = 1;
  bool force_image = false;  // append BOI after the prompt

  void validate() const;
};

struct Generation {
  TokenSequence tokens;
  int prompt_length = 0;  // includes a forced BOI
  MultimodalDocument document;
};

// Samples a continuation of `prompt` under the grammar mask. Image
// segments of the result are decoded to pixels when `vq` is given.
Generation generate(const MultimodalDocument& prompt, const Transformer<float>& model,
                    const VocabLayout& layout, const TextTokenizer& text,
                    const VqModel<float>* vq, const GenerationParams& params);

struct RenderResult {
  std::filesystem::path markdown;
  std::vector<std::filesystem::path> images;
};

// Writes images/img_NNN.ppm and a markdown file interleaving text and image
// references in segment order.
RenderResult render(const MultimodalDocument& doc, const std::filesystem::path& out_dir,
                    const std::string& markdown_name = "report.md");

// key: value lines describing how a generation was produced.
std::string generation_manifest(const std::string& prompt, const GenerationParams& params,
                                const Generation& generation);

}  // namespace mmgen
