#pragma once

#include "mmgen/image.hpp"
#include "mmgen/vq.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mmgen {

using TokenId = int32_t;
using TokenSequence = std::vector<TokenId>;

enum class TokenClass { kText, kImage, kBos, kEos, kBoi, kEoi, kPad };

// Fused id space: [0, text) text, [text, text+K) image, then BOS, EOS, BOI,
// EOI, PAD.
struct VocabLayout {
  int text_size = 256;
  int image_size = 256;        // K
  int image_block_length = 64;  // N

  TokenId bos() const { return text_size + image_size; }
  TokenId eos() const { return bos() + 1; }
  TokenId boi() const { return bos() + 2; }
  TokenId eoi() const { return bos() + 3; }
  TokenId pad() const { return bos() + 4; }
  int total_size() const { return text_size + image_size + 5; }

  bool is_text(TokenId id) const { return id >= 0 && id < text_size; }
  bool is_image(TokenId id) const { return id >= text_size && id < text_size + image_size; }
  TokenClass classify(TokenId id) const;

  void validate() const;
  friend bool operator==(const VocabLayout&, const VocabLayout&) = default;
};

VocabLayout make_layout(const VqConfig& vq, int text_size = 256);

TokenId to_global(int32_t local_image_id, const VocabLayout& layout);
int32_t to_local(TokenId global_id, const VocabLayout& layout);

// Byte-level tokenizer: byte b maps to text id b. Bytes >= text_size are
// outside the alphabet.
class TextTokenizer {
 public:
  explicit TextTokenizer(int text_size = 256) : text_size_(text_size) {}

  int size() const { return text_size_; }
  TokenSequence encode(const std::string& text) const;
  std::string decode(const TokenSequence& ids) const;

 private:
  int text_size_;
};

struct TextSegment {
  std::string text;
  friend bool operator==(const TextSegment&, const TextSegment&) = default;
};

// Either already tokenized or raw pixels awaiting the tokenizer (or both,
// after generation decodes tokens into pixels).
struct ImageSegment {
  std::optional<TokenGrid> tokens;
  std::optional<Image> pixels;
};

using Segment = std::variant<TextSegment, ImageSegment>;

struct MultimodalDocument {
  std::vector<Segment> segments;

  size_t image_count() const;
};

// Segment-wise equality comparing text and image token grids.
bool same_content(const MultimodalDocument& a, const MultimodalDocument& b);

// BOS, then per segment: text tokens or BOI + N image tokens + EOI, then
// EOS (omitted with `terminate` false, for generation prompts).
TokenSequence compose(const MultimodalDocument& doc, const VocabLayout& layout,
                      const TextTokenizer& text, const VqModel<float>* vq,
                      bool terminate = true);

// Inverse of compose over BOS (text | BOI image^N EOI)* EOS. Consecutive
// text tokens form one text segment. Violations throw kParse with the
// offending position in the context.
MultimodalDocument parse(const TokenSequence& sequence, const VocabLayout& layout,
                         const TextTokenizer& text);

// Grid shape used when rebuilding TokenGrids from a flat block.
struct GridShape {
  int height = 0;
  int width = 0;
};

MultimodalDocument parse(const TokenSequence& sequence, const VocabLayout& layout,
                         const TextTokenizer& text, GridShape grid);

}  // namespace mmgen
