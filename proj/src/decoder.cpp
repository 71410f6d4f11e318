#include "mmgen/decoder.hpp"

#include "mmgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mmgen {

DecoderState::DecoderState(const VocabLayout& layout, int max_tokens, int max_images)
    : layout_(layout), max_tokens_(max_tokens), max_images_(max_images) {}

namespace {

[[noreturn]] void reject_at(size_t pos, const std::string& why) {
  throw Error(ErrorCode::kParse, why, "position=" + std::to_string(pos));
}

}  // namespace

void DecoderState::push(TokenId id) {
  const size_t pos = tokens_.size();
  auto reject = [pos](const std::string& why) { reject_at(pos, why); };
  if (!started_) {
    if (id != layout_.bos()) reject("sequence must start with BOS");
    started_ = true;
    tokens_.push_back(id);
    return;
  }
  if (static_cast<int>(pos) >= max_tokens_) reject("token budget exhausted");
  switch (mode_) {
    case DecodeMode::kDone:
      reject_at(pos, "token after EOS");
    case DecodeMode::kText:
      if (layout_.is_text(id)) break;
      if (id == layout_.eos()) {
        mode_ = DecodeMode::kDone;
        break;
      }
      if (id == layout_.boi()) {
        if (images_emitted_ >= max_images_) reject("image budget exhausted");
        mode_ = DecodeMode::kImage;
        image_count_ = 0;
        break;
      }
      reject_at(pos, layout_.is_image(id) ? "image token outside image block" : "token not allowed in text");
    case DecodeMode::kImage:
      if (image_count_ < layout_.image_block_length) {
        if (!layout_.is_image(id)) reject("image block interrupted");
        ++image_count_;
        break;
      }
      if (id != layout_.eoi()) reject("image block must close with EOI");
      mode_ = DecodeMode::kText;
      image_count_ = 0;
      ++images_emitted_;
      break;
  }
  tokens_.push_back(id);
}

std::vector<uint8_t> DecoderState::allowed_mask() const {
  std::vector<uint8_t> mask(static_cast<size_t>(layout_.total_size()), 0);
  if (!started_) {
    mask[static_cast<size_t>(layout_.bos())] = 1;
    return mask;
  }
  switch (mode_) {
    case DecodeMode::kDone:
      break;
    case DecodeMode::kText: {
      const int left = remaining();
      if (left <= 0) break;
      mask[static_cast<size_t>(layout_.eos())] = 1;
      if (left >= 2) std::fill(mask.begin(), mask.begin() + layout_.text_size, 1);
      if (images_emitted_ < max_images_ && left >= layout_.image_block_length + 3) {
        mask[static_cast<size_t>(layout_.boi())] = 1;
      }
      break;
    }
    case DecodeMode::kImage:
      if (image_count_ < layout_.image_block_length) {
        std::fill(mask.begin() + layout_.text_size,
                  mask.begin() + layout_.text_size + layout_.image_size, 1);
      } else {
        mask[static_cast<size_t>(layout_.eoi())] = 1;
      }
      break;
  }
  return mask;
}

void SamplingParams::validate() const {
  if (!(temperature >= 0.0) || top_k < 0 || !(top_p > 0.0 && top_p <= 1.0)) {
    throw Error(ErrorCode::kConfig, "invalid sampling parameters",
                "temperature=" + std::to_string(temperature) + " top_k=" + std::to_string(top_k) +
                    " top_p=" + std::to_string(top_p));
  }
}

void GenerationParams::validate() const {
  text.validate();
  image.validate();
  if (max_tokens < 2 || max_images < 0) {
    throw Error(ErrorCode::kConfig, "invalid generation budgets",
                "max_tokens=" + std::to_string(max_tokens) +
                    " max_images=" + std::to_string(max_images));
  }
  if (force_image && max_images < 1) {
    throw Error(ErrorCode::kConfig, "force_image requires max_images >= 1",
                "max_images=" + std::to_string(max_images));
  }
}

TokenId sample_next(std::span<const float> logits, std::span<const uint8_t> allowed,
                    const SamplingParams& params, Rng& rng) {
  if (logits.size() != allowed.size()) {
    throw Error(ErrorCode::kInputShape, "logits and mask differ in length", "sample_next");
  }
  std::vector<TokenId> candidates;
  for (size_t i = 0; i < allowed.size(); ++i) {
    if (allowed[i]) candidates.push_back(static_cast<TokenId>(i));
  }
  if (candidates.empty()) {
    throw Error(ErrorCode::kDecodeStuck, "no token allowed in this decoder state", "sample_next");
  }
  if (candidates.size() == 1) return candidates[0];
  // Highest logit first; equal logits keep ascending id order.
  std::stable_sort(candidates.begin(), candidates.end(), [&](TokenId a, TokenId b) {
    return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
  });
  if (params.temperature == 0.0 || params.top_k == 1) return candidates[0];
  if (params.top_k > 0 && static_cast<size_t>(params.top_k) < candidates.size()) {
    candidates.resize(static_cast<size_t>(params.top_k));
  }
  const double top = logits[static_cast<size_t>(candidates[0])];
  std::vector<double> probs(candidates.size());
  double sum = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    probs[i] = std::exp((logits[static_cast<size_t>(candidates[i])] - top) / params.temperature);
    sum += probs[i];
  }
  size_t keep = candidates.size();
  if (params.top_p < 1.0) {
    double cumulative = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      cumulative += probs[i] / sum;
      if (cumulative >= params.top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  const double total = std::accumulate(probs.begin(), probs.begin() + static_cast<long>(keep), 0.0);
  const double u = rng.uniform() * total;
  double cumulative = 0.0;
  for (size_t i = 0; i < keep; ++i) {
    cumulative += probs[i];
    if (u < cumulative) return candidates[i];
  }
  return candidates[keep - 1];
}

Generation generate(const MultimodalDocument& prompt, const Transformer<float>& model,
                    const VocabLayout& layout, const TextTokenizer& text,
                    const VqModel<float>* vq, const GenerationParams& params) {
  params.validate();
  if (model.config().vocab_size != layout.total_size()) {
    throw Error(ErrorCode::kLayoutMismatch, "model vocabulary does not match layout",
                std::to_string(model.config().vocab_size) + " vs " +
                    std::to_string(layout.total_size()));
  }
  // The final token is never fed back, so the context bounds max_tokens - 1.
  const int max_tokens = std::min(params.max_tokens, model.config().max_seq_len + 1);
  TokenSequence prefix = compose(prompt, layout, text, vq, /*terminate=*/false);
  if (params.force_image) prefix.push_back(layout.boi());
  const int needed = params.force_image ? layout.image_block_length + 2 : 1;
  if (static_cast<int>(prefix.size()) + needed > max_tokens) {
    throw Error(ErrorCode::kPromptTooLong, "prompt does not leave room to finish",
                "prompt_tokens=" + std::to_string(prefix.size()) +
                    " max_tokens=" + std::to_string(max_tokens));
  }
  const int prompt_images = static_cast<int>(prompt.image_count());
  DecoderState state(layout, max_tokens, prompt_images + params.max_images);
  for (TokenId id : prefix) state.push(id);

  Rng rng(params.seed);
  while (state.mode() != DecodeMode::kDone) {
    const auto mask = state.allowed_mask();
    const auto allowed = std::count(mask.begin(), mask.end(), uint8_t{1});
    TokenId next;
    if (allowed == 1) {
      next = static_cast<TokenId>(std::find(mask.begin(), mask.end(), uint8_t{1}) - mask.begin());
    } else {
      std::vector<float> logits = model.next_logits(state.tokens());
      const auto& sampling = state.mode() == DecodeMode::kImage ? params.image : params.text;
      next = sample_next(logits, mask, sampling, rng);
    }
    state.push(next);
  }

  Generation out;
  out.tokens = state.tokens();
  out.prompt_length = static_cast<int>(prefix.size());
  GridShape grid{vq ? vq->config().grid_height() : 0, vq ? vq->config().grid_width() : 0};
  out.document = vq ? parse(out.tokens, layout, text, grid) : parse(out.tokens, layout, text);
  if (vq) {
    for (auto& segment : out.document.segments) {
      if (auto* img = std::get_if<ImageSegment>(&segment)) img->pixels = vq->decode(*img->tokens);
    }
  }
  return out;
}

RenderResult render(const MultimodalDocument& doc, const std::filesystem::path& out_dir,
                    const std::string& markdown_name) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create output directory", out_dir.string());
  RenderResult result;
  result.markdown = out_dir / markdown_name;
  std::ofstream md(result.markdown);
  if (!md) throw Error(ErrorCode::kIo, "cannot write markdown", result.markdown.string());
  int index = 0;
  for (const auto& segment : doc.segments) {
    if (const auto* t = std::get_if<TextSegment>(&segment)) {
      md << t->text << "\n\n";
      continue;
    }
    const auto& img = std::get<ImageSegment>(segment);
    if (!img.pixels) {
      throw Error(ErrorCode::kInputShape, "image segment has no pixels to render",
                  "image=" + std::to_string(index));
    }
    char name[32];
    std::snprintf(name, sizeof(name), "img_%03d.ppm", index);
    const fs::path rel = fs::path("images") / name;
    write_ppm(out_dir / rel, *img.pixels);
    result.images.push_back(out_dir / rel);
    md << "![image " << index << "](" << rel.generic_string() << ")\n\n";
    ++index;
  }
  if (!md) throw Error(ErrorCode::kIo, "write failed", result.markdown.string());
  return result;
}

std::string generation_manifest(const std::string& prompt, const GenerationParams& params,
                                const Generation& generation) {
  std::ostringstream out;
  out << "prompt: " << prompt << "\n";
  out << "seed: " << params.seed << "\n";
  out << "force_image: " << (params.force_image ? "true" : "false") << "\n";
  out << "text_temperature: " << params.text.temperature << "\n";
  out << "text_top_k: " << params.text.top_k << "\n";
  out << "text_top_p: " << params.text.top_p << "\n";
  out << "image_temperature: " << params.image.temperature << "\n";
  out << "image_top_k: " << params.image.top_k << "\n";
  out << "image_top_p: " << params.image.top_p << "\n";
  out << "max_tokens: " << params.max_tokens << "\n";
  out << "max_images: " << params.max_images << "\n";
  out << "prompt_tokens: " << generation.prompt_length << "\n";
  out << "generated_tokens: " << generation.tokens.size() - generation.prompt_length << "\n";
  out << "total_tokens: " << generation.tokens.size() << "\n";
  out << "images: " << generation.document.image_count() << "\n";
  return out.str();
}

}  // namespace mmgen
