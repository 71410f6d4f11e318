#include "mmgen/vocab.hpp"

#include "mmgen/error.hpp"

#include <cmath>
#include <string>

namespace mmgen {

TokenClass VocabLayout::classify(TokenId id) const {
  if (is_text(id)) return TokenClass::kText;
  if (is_image(id)) return TokenClass::kImage;
  if (id == bos()) return TokenClass::kBos;
  if (id == eos()) return TokenClass::kEos;
  if (id == boi()) return TokenClass::kBoi;
  if (id == eoi()) return TokenClass::kEoi;
  if (id == pad()) return TokenClass::kPad;
  throw Error(ErrorCode::kTokenRange, "token id outside vocabulary",
              "id=" + std::to_string(id) + " total=" + std::to_string(total_size()));
}

void VocabLayout::validate() const {
  if (text_size < 0 || image_size < 0 || image_block_length < 1) {
    throw Error(ErrorCode::kConfig, "invalid vocabulary layout",
                "text=" + std::to_string(text_size) + " K=" + std::to_string(image_size) +
                    " N=" + std::to_string(image_block_length));
  }
}

VocabLayout make_layout(const VqConfig& vq, int text_size) {
  VocabLayout layout{text_size, vq.codebook_size, vq.tokens_per_image()};
  layout.validate();
  return layout;
}

TokenId to_global(int32_t local_image_id, const VocabLayout& layout) {
  if (local_image_id < 0 || local_image_id >= layout.image_size) {
    throw Error(ErrorCode::kTokenRange, "local image id out of range",
                "local=" + std::to_string(local_image_id) +
                    " K=" + std::to_string(layout.image_size));
  }
  return layout.text_size + local_image_id;
}

int32_t to_local(TokenId global_id, const VocabLayout& layout) {
  if (!layout.is_image(global_id)) {
    throw Error(ErrorCode::kTokenRange, "global id is not an image token",
                "id=" + std::to_string(global_id));
  }
  return global_id - layout.text_size;
}

TokenSequence TextTokenizer::encode(const std::string& text) const {
  TokenSequence out;
  out.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i) {
    int byte = static_cast<unsigned char>(text[i]);
    if (byte >= text_size_) {
      throw Error(ErrorCode::kTokenization, "character outside the text alphabet",
                  "offset=" + std::to_string(i) + " byte=" + std::to_string(byte));
    }
    out.push_back(byte);
  }
  return out;
}

std::string TextTokenizer::decode(const TokenSequence& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || id >= text_size_) {
      throw Error(ErrorCode::kTokenRange, "not a text token", "id=" + std::to_string(id));
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

size_t MultimodalDocument::image_count() const {
  size_t n = 0;
  for (const auto& s : segments) n += std::holds_alternative<ImageSegment>(s);
  return n;
}

bool same_content(const MultimodalDocument& a, const MultimodalDocument& b) {
  if (a.segments.size() != b.segments.size()) return false;
  for (size_t i = 0; i < a.segments.size(); ++i) {
    const auto& sa = a.segments[i];
    const auto& sb = b.segments[i];
    if (sa.index() != sb.index()) return false;
    if (const auto* ta = std::get_if<TextSegment>(&sa)) {
      if (!(*ta == std::get<TextSegment>(sb))) return false;
    } else {
      const auto& ia = std::get<ImageSegment>(sa);
      const auto& ib = std::get<ImageSegment>(sb);
      if (ia.tokens.has_value() != ib.tokens.has_value()) return false;
      if (ia.tokens && !(*ia.tokens == *ib.tokens)) return false;
    }
  }
  return true;
}

TokenSequence compose(const MultimodalDocument& doc, const VocabLayout& layout,
                      const TextTokenizer& text, const VqModel<float>* vq, bool terminate) {
  TokenSequence seq;
  seq.push_back(layout.bos());
  for (size_t si = 0; si < doc.segments.size(); ++si) {
    const auto& segment = doc.segments[si];
    if (const auto* t = std::get_if<TextSegment>(&segment)) {
      TokenSequence ids = text.encode(t->text);
      seq.insert(seq.end(), ids.begin(), ids.end());
      continue;
    }
    const auto& img = std::get<ImageSegment>(segment);
    TokenGrid grid;
    if (img.tokens) {
      grid = *img.tokens;
    } else if (img.pixels) {
      if (!vq) {
        throw Error(ErrorCode::kInputShape, "raw image segment needs an image tokenizer",
                    "segment=" + std::to_string(si));
      }
      grid = vq->tokenize(*img.pixels);
    } else {
      throw Error(ErrorCode::kInputShape, "empty image segment", "segment=" + std::to_string(si));
    }
    if (static_cast<int>(grid.ids.size()) != layout.image_block_length) {
      throw Error(ErrorCode::kInputShape, "image block length mismatch",
                  "segment=" + std::to_string(si) + " tokens=" + std::to_string(grid.ids.size()) +
                      " expected=" + std::to_string(layout.image_block_length));
    }
    seq.push_back(layout.boi());
    for (int32_t id : grid.ids) seq.push_back(to_global(id, layout));
    seq.push_back(layout.eoi());
  }
  if (terminate) seq.push_back(layout.eos());
  return seq;
}

namespace {

GridShape default_grid(const VocabLayout& layout) {
  int side = static_cast<int>(std::lround(std::sqrt(layout.image_block_length)));
  if (side * side == layout.image_block_length) return {side, side};
  return {1, layout.image_block_length};
}

[[noreturn]] void parse_fail(const std::string& what, size_t position) {
  throw Error(ErrorCode::kParse, what, "position=" + std::to_string(position));
}

}  // namespace

MultimodalDocument parse(const TokenSequence& sequence, const VocabLayout& layout,
                         const TextTokenizer& text) {
  return parse(sequence, layout, text, default_grid(layout));
}

MultimodalDocument parse(const TokenSequence& sequence, const VocabLayout& layout,
                         const TextTokenizer& text, GridShape grid) {
  if (grid.height * grid.width != layout.image_block_length) {
    throw Error(ErrorCode::kInputShape, "grid shape does not match block length", "parse");
  }
  MultimodalDocument doc;
  if (sequence.empty()) parse_fail("empty sequence (missing BOS)", 0);
  if (sequence[0] != layout.bos()) parse_fail("sequence must start with BOS", 0);

  TokenSequence pending_text;
  auto flush_text = [&] {
    if (pending_text.empty()) return;
    doc.segments.emplace_back(TextSegment{text.decode(pending_text)});
    pending_text.clear();
  };

  size_t i = 1;
  bool terminated = false;
  while (i < sequence.size()) {
    const TokenId id = sequence[i];
    if (id < 0 || id >= layout.total_size()) parse_fail("token id outside vocabulary", i);
    switch (layout.classify(id)) {
      case TokenClass::kText:
        pending_text.push_back(id);
        ++i;
        break;
      case TokenClass::kImage:
        parse_fail("image token outside image block", i);
      case TokenClass::kBos:
        parse_fail("unexpected BOS", i);
      case TokenClass::kPad:
        parse_fail("PAD inside sequence", i);
      case TokenClass::kEoi:
        parse_fail("EOI without matching BOI", i);
      case TokenClass::kEos:
        terminated = true;
        ++i;
        break;
      case TokenClass::kBoi: {
        flush_text();
        const size_t start = i + 1;
        TokenGrid tokens{grid.height, grid.width, {}};
        size_t j = start;
        while (j < sequence.size() && layout.is_image(sequence[j])) {
          tokens.ids.push_back(to_local(sequence[j], layout));
          ++j;
        }
        const size_t count = j - start;
        if (count > static_cast<size_t>(layout.image_block_length)) {
          parse_fail("image block longer than " + std::to_string(layout.image_block_length) +
                         " tokens",
                     start + static_cast<size_t>(layout.image_block_length));
        }
        if (j >= sequence.size()) parse_fail("unterminated image block", j);
        if (sequence[j] != layout.eoi()) {
          parse_fail(count < static_cast<size_t>(layout.image_block_length)
                         ? "image block shorter than " +
                               std::to_string(layout.image_block_length) + " tokens"
                         : "image block not closed by EOI",
                     j);
        }
        if (count != static_cast<size_t>(layout.image_block_length)) {
          parse_fail("image block shorter than " + std::to_string(layout.image_block_length) +
                         " tokens",
                     j);
        }
        doc.segments.emplace_back(ImageSegment{std::move(tokens), std::nullopt});
        i = j + 1;
        break;
      }
    }
    if (terminated) break;
  }
  if (!terminated) parse_fail("missing EOS", sequence.size());
  if (i != sequence.size()) parse_fail("tokens after EOS", i);
  flush_text();
  return doc;
}

}  // namespace mmgen
