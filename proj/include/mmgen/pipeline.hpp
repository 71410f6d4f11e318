#pragma once

#include "mmgen/checkpoint.hpp"
#include "mmgen/config.hpp"
#include "mmgen/corpus.hpp"
#include "mmgen/dataset.hpp"
#include "mmgen/decoder.hpp"
#include "mmgen/finetune.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace mmgen {

// Tokenizer plus language model restored from one checkpoint.
struct LoadedModel {
  VqModel<float> vq;
  Transformer<float> lm;
  VocabLayout layout;
};

LoadedModel load_model(const std::filesystem::path& ckpt);
VqModel<float> load_vq(const std::filesystem::path& ckpt);

// Fresh samples from the evaluation seed, quantized to 8 bits like the
// images a synthesized corpus stores on disk.
std::vector<SynthSample> heldout_samples(const RunConfig& config);

// PSNR of the pooled reconstruction error over all images.
double reconstruction_psnr(const VqModel<float>& vq, const std::vector<SynthSample>& samples);

// Mean cross-entropy over image-token targets of caption-then-image
// sequences built from the samples.
double image_token_ce(const Transformer<float>& lm, const VqModel<float>& vq,
                      const VocabLayout& layout, const std::vector<SynthSample>& samples);

struct LabelAgreement {
  int prompts = 0;
  int agreed = 0;
  double rate() const { return prompts ? static_cast<double>(agreed) / prompts : 0.0; }
};

// Prompt i asks for label i mod 18 with image generation forced; the first
// generated image is checked against the requested label.
LabelAgreement label_agreement(const LoadedModel& model, const RunConfig& config);

struct VqStageResult {
  int64_t steps = 0;
  double final_reconstruction = 0.0;
  double heldout_psnr = 0.0;
  int reseeded = 0;
};

VqStageResult run_train_vq(const RunConfig& config, const std::filesystem::path& manifest,
                           const std::filesystem::path& out_ckpt, std::ostream* log = nullptr);

void run_tokenize(const std::filesystem::path& vq_ckpt, const std::filesystem::path& manifest,
                  int text_size, const std::filesystem::path& out_tokens);

struct LmStageResult {
  int64_t steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
};

// Pre-training on the manifest with image-token loss scaled by
// pretrain.image_loss_weight. The output checkpoint carries the tokenizer too.
LmStageResult run_train_lm(const RunConfig& config, const std::filesystem::path& vq_ckpt,
                           const std::filesystem::path& manifest,
                           const std::filesystem::path& out_ckpt, std::ostream* log = nullptr);

struct FinetuneStageResult {
  FinetuneReport report;
  double heldout_ce_before = 0.0;
  double heldout_ce_after = 0.0;
};

FinetuneStageResult run_finetune_head(const RunConfig& config,
                                      const std::filesystem::path& base_ckpt,
                                      const std::filesystem::path& manifest,
                                      const std::filesystem::path& out_ckpt,
                                      const std::filesystem::path& report_path);

struct GenerateStageResult {
  Generation generation;
  RenderResult rendered;
};

// Writes report.md, images/ and manifest.txt under out_dir.
GenerateStageResult run_generate(const std::filesystem::path& ckpt, const std::string& prompt,
                                 const GenerationParams& params,
                                 const std::filesystem::path& out_dir);

struct EvalResult {
  double psnr = 0.0;
  double image_ce = 0.0;
  LabelAgreement labels;
  std::string to_text() const;
};

EvalResult run_eval(const RunConfig& config, const std::filesystem::path& ckpt);

// "16640" -> "16,640"
std::string with_thousands(int64_t value);

}  // namespace mmgen
