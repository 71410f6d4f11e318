#include "mmgen/error.hpp"
#include "mmgen/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace mmgen;

namespace {

struct Shared {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

void add_shared(CLI::App* cmd, Shared& s, bool out_required = true) {
  cmd->add_option("--config", s.config, "JSON run configuration");
  cmd->add_option("--seed", s.seed, "base seed");
  auto* out = cmd->add_option("--out", s.out, "output path");
  if (out_required) out->required();
}

RunConfig resolve(const Shared& s) {
  RunConfig c = s.config.empty() ? RunConfig{} : load_run_config(s.config);
  if (s.seed) c.apply_seed(*s.seed);
  c.finalize();
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"Multimodal token model: tokenizer, language model, head fine-tuning, generation"};
  app.require_subcommand(1);
  Shared shared;

  auto* synth = app.add_subcommand("synth", "render a labelled shape corpus and its manifest");
  int count = 0;
  synth->add_option("--count", count, "number of images")->required()->check(CLI::PositiveNumber);
  add_shared(synth, shared);

  auto* train_vq = app.add_subcommand("train-vq", "train the image tokenizer");
  std::string data;
  train_vq->add_option("--data", data, "manifest.jsonl")->required();
  add_shared(train_vq, shared);

  auto* tokenize = app.add_subcommand("tokenize", "write token sequences for a manifest");
  std::string ckpt;
  tokenize->add_option("--ckpt", ckpt, "tokenizer checkpoint")->required();
  tokenize->add_option("--data", data, "manifest.jsonl")->required();
  add_shared(tokenize, shared);

  auto* train_lm = app.add_subcommand("train-lm", "pre-train the language model");
  std::string vq_ckpt;
  train_lm->add_option("--vq", vq_ckpt, "tokenizer checkpoint")->required();
  train_lm->add_option("--data", data, "manifest.jsonl")->required();
  add_shared(train_lm, shared);

  auto* finetune = app.add_subcommand("finetune-head", "train only the image rows of the output head");
  std::string base;
  std::string report;
  finetune->add_option("--base", base, "base checkpoint")->required();
  finetune->add_option("--data", data, "manifest.jsonl")->required();
  finetune->add_option("--report", report, "report path (default: next to --out)");
  add_shared(finetune, shared);

  auto* gen = app.add_subcommand("generate", "sample a continuation and render it");
  std::string prompt;
  bool force_image = false;
  std::optional<int> max_tokens;
  std::optional<int> max_images;
  gen->add_option("--ckpt", ckpt, "model checkpoint")->required();
  gen->add_option("--prompt", prompt, "text prompt");
  gen->add_flag("--force-image", force_image, "open an image block right after the prompt");
  gen->add_option("--max-tokens", max_tokens, "total sequence budget");
  gen->add_option("--max-images", max_images, "images the model may add");
  add_shared(gen, shared);

  auto* eval = app.add_subcommand("eval", "held-out PSNR, image-token CE and label agreement");
  eval->add_option("--ckpt", ckpt, "model checkpoint")->required();
  add_shared(eval, shared);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string message = e.what();
    for (char& ch : message) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << Error(ErrorCode::kUsage, message, "argv").one_line() << "\n";
    return 2;
  }

  const RunConfig config = resolve(shared);
  const fs::path out = shared.out;

  if (*synth) {
    const auto m = synth_corpus(count, config.seed, out);
    std::cout << "wrote " << m.records.size() << " records to " << (out / "manifest.jsonl").string()
              << "\n";
  } else if (*train_vq) {
    const auto r = run_train_vq(config, data, out, &std::cout);
    std::cout << "heldout psnr: " << r.heldout_psnr << " dB\n";
  } else if (*tokenize) {
    run_tokenize(ckpt, data, config.text_size, out);
    std::cout << "wrote " << out.string() << "\n";
  } else if (*train_lm) {
    const auto r = run_train_lm(config, vq_ckpt, data, out, &std::cout);
    std::cout << "final loss: " << r.final_loss << "\n";
  } else if (*finetune) {
    const fs::path report_path =
        report.empty() ? fs::path(out).replace_extension(".report.txt") : fs::path(report);
    const auto r = run_finetune_head(config, base, data, out, report_path);
    std::cout << "trainable parameters: " << with_thousands(r.report.trainable.total()) << "\n"
              << "heldout image CE: " << r.heldout_ce_before << " -> " << r.heldout_ce_after
              << "\n";
  } else if (*gen) {
    GenerationParams params = config.generation;
    if (shared.seed) params.seed = *shared.seed;
    params.force_image = force_image;
    if (max_tokens) params.max_tokens = *max_tokens;
    if (max_images) params.max_images = *max_images;
    const auto r = run_generate(ckpt, prompt, params, out);
    std::cout << "wrote " << r.rendered.markdown.string() << " with " << r.rendered.images.size()
              << " image(s)\n";
  } else if (*eval) {
    const auto r = run_eval(config, ckpt);
    fs::create_directories(out);
    write_report(out / "eval.txt", r.to_text());
    std::cout << r.to_text();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << e.one_line() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << Error(ErrorCode::kIo, e.what(), "unexpected").one_line() << "\n";
    return 1;
  }
}
