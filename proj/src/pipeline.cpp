#include "mmgen/pipeline.hpp"

#include "mmgen/batching.hpp"
#include "mmgen/error.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace mmgen {

namespace fs = std::filesystem;

namespace {

uint64_t mix(uint64_t base, uint64_t stream) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void ensure_parent(const fs::path& path) {
  if (!path.has_parent_path()) return;
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create directory", path.parent_path().string());
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::vector<TokenSequence> caption_image_sequences(const VqModel<float>& vq,
                                                   const VocabLayout& layout,
                                                   const std::vector<SynthSample>& samples) {
  TextTokenizer text(layout.text_size);
  std::vector<TokenSequence> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    MultimodalDocument doc;
    doc.segments.push_back(TextSegment{s.caption});
    doc.segments.push_back(ImageSegment{std::nullopt, s.image});
    out.push_back(compose(doc, layout, text, &vq));
  }
  return out;
}

}  // namespace

LoadedModel load_model(const fs::path& ckpt) {
  const Checkpoint c = load_checkpoint(ckpt);
  LoadedModel m{restore_vq(c), restore_lm(c), restore_layout(c)};
  if (m.layout.total_size() != m.lm.config().vocab_size ||
      m.layout.image_size != m.vq.config().codebook_size ||
      m.layout.image_block_length != m.vq.config().tokens_per_image()) {
    throw Error(ErrorCode::kLayoutMismatch, "checkpoint layout disagrees with its models",
                ckpt.string());
  }
  return m;
}

VqModel<float> load_vq(const fs::path& ckpt) { return restore_vq(load_checkpoint(ckpt)); }

std::vector<SynthSample> heldout_samples(const RunConfig& config) {
  Rng rng(config.eval.heldout_seed);
  std::vector<SynthSample> out;
  for (int i = 0; i < config.eval.heldout_count; ++i) {
    SynthSample s = render_sample(rng, config.vq.image_height);
    s.image = quantize_8bit(s.image);
    out.push_back(std::move(s));
  }
  return out;
}

double reconstruction_psnr(const VqModel<float>& vq, const std::vector<SynthSample>& samples) {
  double se = 0.0;
  size_t n = 0;
  for (const auto& s : samples) {
    const Image r = vq.reconstruct(s.image);
    for (size_t i = 0; i < r.pixels.size(); ++i) {
      const double d = static_cast<double>(r.pixels[i]) - s.image.pixels[i];
      se += d * d;
    }
    n += r.pixels.size();
  }
  if (n == 0) return 0.0;
  const double mse = se / static_cast<double>(n);
  return mse <= 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double image_token_ce(const Transformer<float>& lm, const VqModel<float>& vq,
                      const VocabLayout& layout, const std::vector<SynthSample>& samples) {
  const auto seqs = caption_image_sequences(vq, layout, samples);
  auto weight = [&](TokenId t) { return layout.is_image(t) ? 1.0f : 0.0f; };
  double total = 0.0;
  double count = 0.0;
  constexpr size_t kChunk = 32;
  for (size_t begin = 0; begin < seqs.size(); begin += kChunk) {
    const size_t end = std::min(seqs.size(), begin + kChunk);
    const Batch b = Batch::from_sequences(
        std::span<const TokenSequence>(seqs.data() + begin, end - begin), layout.pad(), weight);
    double n = 0.0;
    for (float w : b.weights) n += w != 0.0f ? 1.0 : 0.0;
    if (n == 0.0) continue;
    total += lm.loss_and_gradient(b, nullptr) * n;
    count += n;
  }
  if (count == 0.0) throw Error(ErrorCode::kEmptyLoss, "no image tokens to evaluate", "image_token_ce");
  return total / count;
}

LabelAgreement label_agreement(const LoadedModel& model, const RunConfig& config) {
  TextTokenizer text(model.layout.text_size);
  LabelAgreement result;
  for (int i = 0; i < config.eval.prompts; ++i) {
    const int index = i % kLabelCount;
    const Label want{index / 3, static_cast<Shape2D>(index % 3)};
    MultimodalDocument prompt;
    prompt.segments.push_back(TextSegment{caption_for(want)});
    GenerationParams params = config.generation;
    params.force_image = true;
    params.max_images = std::max(1, params.max_images);
    params.seed = mix(config.generation.seed, static_cast<uint64_t>(i));
    const Generation g = generate(prompt, model.lm, model.layout, text, &model.vq, params);
    ++result.prompts;
    for (const auto& segment : g.document.segments) {
      if (const auto* img = std::get_if<ImageSegment>(&segment)) {
        const auto got = check_label(*img->pixels);
        if (got && *got == want) ++result.agreed;
        break;
      }
    }
  }
  return result;
}

VqStageResult run_train_vq(const RunConfig& config, const fs::path& manifest_path,
                           const fs::path& out_ckpt, std::ostream* log) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  std::vector<Image> images;
  for (const auto& r : manifest.records) {
    if (r.image) images.push_back(load_record_image(manifest, r, config.vq));
  }
  if (images.empty()) throw Error(ErrorCode::kManifest, "manifest has no images", manifest_path.string());

  VqModel<float> model(config.vq);
  VqTrainer trainer(model);
  VqStageResult result;
  const size_t batch = static_cast<size_t>(config.vq_train.batch_size);
  std::vector<size_t> order;
  size_t cursor = 0;
  uint64_t epoch = 0;
  for (int step = 0; step < config.vq_train.steps; ++step) {
    std::vector<Image> chunk;
    while (chunk.size() < batch) {
      if (cursor == order.size()) {
        order = shuffled_order(images.size(), mix(config.vq.seed, 100 + epoch++));
        cursor = 0;
      }
      chunk.push_back(images[order[cursor++]]);
    }
    const VqLoss loss = trainer.step(chunk);
    result.final_reconstruction = loss.reconstruction;
    if (log && (step % 100 == 0 || step + 1 == config.vq_train.steps)) {
      *log << "train-vq step " << step << " reconstruction " << fixed(loss.reconstruction)
           << " commitment " << fixed(loss.commitment) << "\n";
    }
  }
  result.steps = trainer.steps();
  result.reseeded = trainer.reseeded_total();
  result.heldout_psnr = reconstruction_psnr(model, heldout_samples(config));

  Checkpoint ckpt;
  ckpt.header["run_config"] = run_config_to_json(config);
  store_vq(ckpt, model);
  ensure_parent(out_ckpt);
  save_checkpoint(out_ckpt, ckpt);
  std::ostringstream report;
  report << "stage: train-vq\n"
         << "steps: " << result.steps << "\n"
         << "images: " << images.size() << "\n"
         << "final_reconstruction_mse: " << fixed(result.final_reconstruction) << "\n"
         << "reseeded_codes: " << result.reseeded << "\n"
         << "heldout_psnr_db: " << fixed(result.heldout_psnr, 3) << "\n";
  write_report(fs::path(out_ckpt).replace_extension(".report.txt"), report.str());
  return result;
}

void run_tokenize(const fs::path& vq_ckpt, const fs::path& manifest, int text_size,
                  const fs::path& out_tokens) {
  const VqModel<float> vq = load_vq(vq_ckpt);
  const VocabLayout layout = make_layout(vq.config(), text_size);
  const auto seqs = ingest(read_manifest(manifest), layout, TextTokenizer(text_size), vq);
  ensure_parent(out_tokens);
  write_token_file(out_tokens, seqs);
}

LmStageResult run_train_lm(const RunConfig& config, const fs::path& vq_ckpt,
                           const fs::path& manifest, const fs::path& out_ckpt, std::ostream* log) {
  const VqModel<float> vq = load_vq(vq_ckpt);
  if (!(vq.config().codebook_size == config.vq.codebook_size &&
        vq.config().tokens_per_image() == config.vq.tokens_per_image())) {
    throw Error(ErrorCode::kLayoutMismatch, "tokenizer checkpoint disagrees with the run config",
                vq_ckpt.string());
  }
  const VocabLayout layout = config.layout();
  const auto seqs = ingest(read_manifest(manifest), layout, TextTokenizer(layout.text_size), vq);
  if (seqs.empty()) throw Error(ErrorCode::kManifest, "manifest has no records", manifest.string());

  LossWeights weights;
  weights.image = static_cast<float>(config.pretrain.image_loss_weight);
  auto weight_of = [&](TokenId t) { return weights(layout, t); };

  Transformer<float> model(config.model);
  Optimizer<float> optimizer(config.pretrain.optimizer);
  LmStageResult result;
  for (int epoch = 0; epoch < config.pretrain.epochs; ++epoch) {
    const auto batches = make_batches(seqs, config.pretrain.batch_size,
                                      mix(config.model.seed, 200 + epoch), layout.pad(), weight_of);
    double sum = 0.0;
    for (const Batch& b : batches) {
      const StepResult r = train_step(model, optimizer, b);
      if (result.steps == 0) result.first_loss = r.loss;
      result.final_loss = r.loss;
      ++result.steps;
      sum += r.loss;
    }
    if (log) {
      *log << "train-lm epoch " << epoch << " mean_loss "
           << fixed(sum / static_cast<double>(batches.size())) << "\n";
    }
  }

  Checkpoint ckpt;
  ckpt.header["run_config"] = run_config_to_json(config);
  store_vq(ckpt, vq);
  store_lm(ckpt, model, layout);
  ensure_parent(out_ckpt);
  save_checkpoint(out_ckpt, ckpt);
  std::ostringstream report;
  report << "stage: train-lm\n"
         << "sequences: " << seqs.size() << "\n"
         << "steps: " << result.steps << "\n"
         << "image_loss_weight: " << fixed(config.pretrain.image_loss_weight, 3) << "\n"
         << "first_loss: " << fixed(result.first_loss) << "\n"
         << "final_loss: " << fixed(result.final_loss) << "\n";
  write_report(fs::path(out_ckpt).replace_extension(".report.txt"), report.str());
  return result;
}

FinetuneStageResult run_finetune_head(const RunConfig& config, const fs::path& base_ckpt,
                                      const fs::path& manifest, const fs::path& out_ckpt,
                                      const fs::path& report_path) {
  const Checkpoint base = load_checkpoint(base_ckpt);
  Transformer<float> lm = restore_lm(base);
  const VqModel<float> vq = restore_vq(base);
  const VocabLayout layout = restore_layout(base);
  const auto seqs = ingest(read_manifest(manifest), layout, TextTokenizer(layout.text_size), vq);

  const auto heldout = heldout_samples(config);
  FinetuneStageResult result;
  result.heldout_ce_before = image_token_ce(lm, vq, layout, heldout);
  FinetuneConfig ft = config.finetune;
  result.report = finetune_run(seqs, lm, layout, ft);
  if (result.report.error) {
    write_report(report_path, result.report.to_text());
    throw Error(ErrorCode::kDivergence, "fine-tuning stopped", *result.report.error);
  }
  result.heldout_ce_after = image_token_ce(lm, vq, layout, heldout);

  Checkpoint ckpt;
  ckpt.header = base.header;
  ckpt.header["finetune_config"] = run_config_to_json(config)["finetune"];
  store_vq(ckpt, vq);
  store_lm(ckpt, lm, layout);
  ensure_parent(out_ckpt);
  save_checkpoint(out_ckpt, ckpt);

  std::ostringstream text;
  text << result.report.to_text()
       << "heldout_image_ce_before: " << fixed(result.heldout_ce_before) << "\n"
       << "heldout_image_ce_after: " << fixed(result.heldout_ce_after) << "\n"
       << "heldout_image_ce_reduction: "
       << fixed(1.0 - result.heldout_ce_after / result.heldout_ce_before, 4) << "\n";
  ensure_parent(report_path);
  write_report(report_path, text.str());
  return result;
}

GenerateStageResult run_generate(const fs::path& ckpt, const std::string& prompt,
                                 const GenerationParams& params, const fs::path& out_dir) {
  const LoadedModel m = load_model(ckpt);
  MultimodalDocument doc;
  if (!prompt.empty()) doc.segments.push_back(TextSegment{prompt});
  GenerateStageResult result;
  result.generation = generate(doc, m.lm, m.layout, TextTokenizer(m.layout.text_size), &m.vq, params);
  result.rendered = render(result.generation.document, out_dir);
  write_report(out_dir / "manifest.txt", generation_manifest(prompt, params, result.generation));
  return result;
}

std::string EvalResult::to_text() const {
  std::ostringstream s;
  s << "heldout_psnr_db: " << fixed(psnr, 3) << "\n"
    << "heldout_image_ce: " << fixed(image_ce) << "\n"
    << "label_prompts: " << labels.prompts << "\n"
    << "label_agreed: " << labels.agreed << "\n"
    << "label_agreement: " << fixed(labels.rate(), 4) << "\n";
  return s.str();
}

EvalResult run_eval(const RunConfig& config, const fs::path& ckpt) {
  const LoadedModel m = load_model(ckpt);
  const auto heldout = heldout_samples(config);
  EvalResult r;
  r.psnr = reconstruction_psnr(m.vq, heldout);
  r.image_ce = image_token_ce(m.lm, m.vq, m.layout, heldout);
  r.labels = label_agreement(m, config);
  return r;
}

std::string with_thousands(int64_t value) {
  std::string digits = std::to_string(value < 0 ? -value : value);
  std::string out;
  for (size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return value < 0 ? "-" + out : out;
}

}  // namespace mmgen
