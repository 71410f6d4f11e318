#include "gradcheck.hpp"

#include "mmgen/batching.hpp"
#include "mmgen/checkpoint.hpp"
#include "mmgen/config.hpp"
#include "mmgen/corpus.hpp"
#include "mmgen/dataset.hpp"
#include "mmgen/decoder.hpp"
#include "mmgen/error.hpp"
#include "mmgen/finetune.hpp"
#include "mmgen/optimizer.hpp"
#include "mmgen/pipeline.hpp"
#include "mmgen/transformer.hpp"
#include "mmgen/vq.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace mmgen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

fs::path workdir(const std::string& name) {
  const fs::path p = g_work / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

VqConfig tiny_vq() {
  VqConfig c;
  c.codebook_size = 8;
  c.latent_dim = 3;
  c.image_height = 8;
  c.image_width = 8;
  c.downsample = 2;
  c.hidden_channels = 4;
  c.seed = 11;
  return c;
}

ModelConfig tiny_lm(int vocab, int max_seq, uint64_t seed) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = max_seq;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

Batch finetune_batch(const VocabLayout& l, std::span<const TokenSequence> seqs) {
  return Batch::from_sequences(seqs, l.pad(), [&](TokenId t) { return finetune_loss_weight(l, t); });
}

// Caption then one image block.
std::vector<TokenSequence> image_documents(const VocabLayout& l, int count, uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < count; ++i) {
    TokenSequence s{l.bos()};
    const int text = 1 + static_cast<int>(rng.below(4));
    for (int t = 0; t < text; ++t) s.push_back(static_cast<TokenId>(rng.below(static_cast<uint64_t>(l.text_size))));
    s.push_back(l.boi());
    for (int t = 0; t < l.image_block_length; ++t) {
      s.push_back(to_global(static_cast<int32_t>(rng.below(static_cast<uint64_t>(l.image_size))), l));
    }
    s.push_back(l.eoi());
    s.push_back(l.eos());
    out.push_back(s);
  }
  return out;
}

// 1. Parameter accounting at the reference scale.
Outcome parameter_accounting() {
  const TrainableCount ref = count_trainable(8192, 4096);
  const TrainableCount toy = count_trainable(256, 64);
  const bool ok = ref.weight == 33554432 && ref.total() < 40000000 && toy.total() == 16640;
  return {ok, "weights=" + with_thousands(ref.weight) + " with_bias=" + with_thousands(ref.total()) +
                  " toy=" + with_thousands(toy.total())};
}

// 2. 100 selective steps on a synthesized corpus leave every frozen entry
// bitwise unchanged.
Outcome freeze_exactness() {
  const fs::path dir = workdir("freeze");
  RunConfig config;
  config.apply_seed(2);
  config.finalize();
  const DatasetManifest manifest = synth_corpus(256, 2, dir);
  const VqModel<float> vq(config.vq);
  const VocabLayout layout = config.layout();
  const auto seqs = ingest(manifest, layout, TextTokenizer(layout.text_size), vq);
  Transformer<float> model(config.model);
  const Transformer<float> before = model;
  const TrainableMask mask = build_mask(layout);
  SelectiveHeadOptimizer opt(OptimizerConfig{OptimizerKind::kSgd, 0.1, 0.9}, mask);
  const int batch = 8;
  for (int step = 0; step < 100; ++step) {
    const size_t first = static_cast<size_t>(step * batch) % seqs.size();
    std::vector<TokenSequence> chunk(seqs.begin() + static_cast<long>(first),
                                     seqs.begin() + static_cast<long>(first + batch));
    finetune_step(model, opt, finetune_batch(layout, chunk));
  }
  const int hw = model.head_weight_index();
  const int hb = model.head_bias_index();
  int changed_frozen = 0;
  int64_t changed_rows = 0;
  for (size_t t = 0; t < model.params().size(); ++t) {
    const int ti = static_cast<int>(t);
    const auto& a = before.params()[ti];
    const auto& b = model.params()[ti];
    if (ti != hw && ti != hb) {
      changed_frozen += !bitwise_equal(a, b);
      continue;
    }
    const size_t width = ti == hw ? static_cast<size_t>(a.dim(1)) : 1;
    for (size_t row = 0; row < mask.rows.size(); ++row) {
      const bool same = std::memcmp(a.data.data() + row * width, b.data.data() + row * width,
                                    width * sizeof(float)) == 0;
      if (mask.rows[row]) {
        changed_rows += !same;
      } else {
        changed_frozen += !same;
      }
    }
  }
  double drift = 0.0;
  for (const auto& [name, d] : frozen_drift(before, model, mask)) drift = std::max(drift, d);
  const bool ok = changed_frozen == 0 && drift == 0.0 && changed_rows > 0;
  return {ok, "steps=100 max_abs_drift=" + fmt(drift) + " changed_frozen=" + std::to_string(changed_frozen) +
                  " updated_head_rows=" + std::to_string(changed_rows)};
}

// 3. Masked step versus dense step followed by restoring frozen entries.
Outcome selective_equivalence() {
  const VocabLayout l{16, 8, 4};
  const auto seqs = image_documents(l, 4, 3);
  const Batch batch = finetune_batch(l, seqs);
  const OptimizerConfig sgd{OptimizerKind::kSgd, 0.1, 0.9};
  Transformer<float> masked(tiny_lm(l.total_size(), 24, 21));
  Transformer<float> full = masked;
  const Transformer<float> snapshot = masked;
  const TrainableMask mask = build_mask(l);

  SelectiveHeadOptimizer opt(sgd, mask);
  finetune_step(masked, opt, batch);
  Optimizer<float> dense(sgd);
  train_step(full, dense, batch);
  for (size_t t = 0; t < full.params().size(); ++t) {
    const int ti = static_cast<int>(t);
    auto& p = full.params()[ti];
    const auto& s = snapshot.params()[ti];
    const bool head = ti == full.head_weight_index() || ti == full.head_bias_index();
    const int64_t width = ti == full.head_weight_index() ? p.dim(1) : 1;
    for (int64_t i = 0; i < p.numel(); ++i) {
      if (!head || !mask.rows[static_cast<size_t>(i / width)]) p.data[static_cast<size_t>(i)] = s.data[static_cast<size_t>(i)];
    }
  }
  double worst = 0.0;
  for (size_t t = 0; t < full.params().size(); ++t) {
    const auto& a = full.params()[static_cast<int>(t)].data;
    const auto& b = masked.params()[static_cast<int>(t)].data;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  }
  const bool moved = !(masked.params() == snapshot.params());
  return {worst <= 1e-7 && moved, "max_abs_diff=" + fmt(worst) + " (limit 1e-7)"};
}

// 4. quantize against exhaustive nearest neighbour with lowest-index ties.
Outcome quantizer_oracle() {
  Rng rng(4);
  int64_t cells = 0, agree = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(64));
    const int D = 1 + static_cast<int>(rng.below(8));
    const int h = 1 + static_cast<int>(rng.below(8));
    const int w = 1 + static_cast<int>(rng.below(8));
    const bool lattice = trial % 2 == 0;  // coarse values make exact ties common
    Codebook<float> cb{Tensor<float>({K, D})};
    for (float& v : cb.entries.data) v = lattice ? static_cast<float>(rng.below(3)) : static_cast<float>(rng.normal());
    LatentGrid<float> z{h, w, D, std::vector<float>(static_cast<size_t>(h * w * D))};
    for (float& v : z.values) v = lattice ? static_cast<float>(rng.below(5)) * 0.5f : static_cast<float>(rng.normal());
    const TokenGrid got = quantize(z, cb);
    for (int cell = 0; cell < h * w; ++cell) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      int at_best = 0;
      for (int k = 0; k < K; ++k) {
        double d2 = 0.0;
        for (int d = 0; d < D; ++d) {
          const double diff = double(z.values[static_cast<size_t>(cell * D + d)]) - double(cb.row(k)[d]);
          d2 += diff * diff;
        }
        if (d2 < best_d) {
          best_d = d2;
          best = k;
          at_best = 1;
        } else if (d2 == best_d) {
          ++at_best;
        }
      }
      ++cells;
      ties += at_best > 1;
      agree += got.ids[static_cast<size_t>(cell)] == best;
    }
  }
  return {agree == cells, "grids=1000 cells=" + std::to_string(cells) + " agree=" + std::to_string(agree) +
                              " tied_cells=" + std::to_string(ties)};
}

// 5. Finite-difference gradient checks for both networks at both precisions.
template <typename T>
double vq_gradcheck(double eps) {
  Rng rng(9);
  std::vector<Image> batch;
  for (int i = 0; i < 2; ++i) {
    Image img(8, 8);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
    batch.push_back(img);
  }
  VqModel<T> model(tiny_vq());
  FrozenAssignment<T> frozen;
  auto grads = model.params().zeros_like();
  model.loss_and_gradient(batch, nullptr, nullptr, &frozen);
  model.loss_and_gradient(batch, &grads, &frozen);
  return testing::worst(testing::check_gradients(
      model.params(), grads, [&] { return model.loss_and_gradient(batch, nullptr, &frozen).total(); }, eps, 40));
}

template <typename T>
double lm_gradcheck(double eps) {
  Rng rng(11);
  Batch batch;
  batch.batch = 2;
  batch.length = 6;
  for (int i = 0; i < 12; ++i) {
    batch.tokens.push_back(static_cast<TokenId>(rng.below(30)));
    batch.targets.push_back(static_cast<TokenId>(rng.below(30)));
    batch.weights.push_back(i % 5 == 4 ? 0.0f : 1.0f);
  }
  Transformer<T> model(tiny_lm(30, 12, 5));
  Rng init(4);
  for (auto& e : model.params().entries()) {
    for (T& v : e.tensor.data) {
      v = e.name.ends_with(".gain") ? static_cast<T>(1.0 + 0.2 * init.normal()) : static_cast<T>(0.3 * init.normal());
    }
  }
  auto grads = model.params().zeros_like();
  model.loss_and_gradient(batch, &grads);
  return testing::worst(
      testing::check_gradients(model.params(), grads, [&] { return model.loss_and_gradient(batch, nullptr); }, eps, 30));
}

Outcome gradient_checks() {
  const double vq32 = vq_gradcheck<float>(1e-3), vq64 = vq_gradcheck<double>(1e-6);
  const double lm32 = lm_gradcheck<float>(3e-3), lm64 = lm_gradcheck<double>(1e-6);
  const bool ok = vq32 < 1e-3 && lm32 < 1e-3 && vq64 < 1e-5 && lm64 < 1e-5;
  return {ok, "worst rel_error vq32=" + fmt(vq32, 3) + " lm32=" + fmt(lm32, 3) + " vq64=" + fmt(vq64, 3) +
                  " lm64=" + fmt(lm64, 3)};
}

// 6. Grammar conformance of generations plus masked sampling.
bool conforms(const TokenSequence& s, const VocabLayout& l) {
  if (s.size() < 2 || s.front() != l.bos() || s.back() != l.eos()) return false;
  for (size_t i = 1; i + 1 < s.size();) {
    if (l.is_text(s[i])) {
      ++i;
      continue;
    }
    if (s[i] != l.boi()) return false;
    const size_t n = static_cast<size_t>(l.image_block_length);
    if (i + n + 1 >= s.size()) return false;
    for (size_t j = 1; j <= n; ++j) {
      if (!l.is_image(s[i + j])) return false;
    }
    if (s[i + n + 1] != l.eoi()) return false;
    i += n + 2;
  }
  return true;
}

Outcome grammar_conformance() {
  const VocabLayout l{16, 8, 4};
  const Transformer<float> model(tiny_lm(l.total_size(), 40, 31));
  TextTokenizer text(16);
  Rng rng(6);
  int ok_generations = 0, parse_failures = 0, over_budget = 0, images = 0;
  for (int g = 0; g < 500; ++g) {
    std::string prompt;
    const int len = static_cast<int>(rng.below(4));
    for (int i = 0; i < len; ++i) prompt.push_back(static_cast<char>(rng.below(16)));
    GenerationParams p;
    p.seed = static_cast<uint64_t>(g);
    p.max_images = static_cast<int>(rng.below(4));
    p.force_image = p.max_images > 0 && rng.below(2) == 0;
    p.max_tokens = (p.force_image ? 8 + len : 2 + len) + static_cast<int>(rng.below(30));
    p.image.top_k = static_cast<int>(rng.below(4));
    MultimodalDocument doc;
    doc.segments.push_back(TextSegment{prompt});
    const Generation out = generate(doc, model, l, text, nullptr, p);
    try {
      parse(out.tokens, l, text);
    } catch (const Error&) {
      ++parse_failures;
      continue;
    }
    const bool budget = static_cast<int>(out.tokens.size()) <= p.max_tokens &&
                        static_cast<int>(out.document.image_count()) <= p.max_images;
    over_budget += !budget;
    images += static_cast<int>(out.document.image_count());
    ok_generations += conforms(out.tokens, l) && budget;
  }

  // Draws from reachable decoder states with the forbidden ids given the
  // largest logits.
  int forbidden = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    DecoderState state(l, 64, 2);
    state.push(l.bos());
    const int walk = static_cast<int>(rng.below(12));
    for (int i = 0; i < walk && state.mode() != DecodeMode::kDone; ++i) {
      const auto m = state.allowed_mask();
      std::vector<TokenId> ids;
      for (size_t k = 0; k < m.size(); ++k) {
        if (m[k] && static_cast<TokenId>(k) != l.eos()) ids.push_back(static_cast<TokenId>(k));
      }
      if (ids.empty()) break;
      state.push(ids[rng.below(ids.size())]);
    }
    const auto mask = state.allowed_mask();
    if (std::count(mask.begin(), mask.end(), uint8_t{1}) == 0) continue;
    std::vector<float> logits(mask.size());
    for (size_t k = 0; k < mask.size(); ++k) logits[k] = static_cast<float>(rng.normal()) + (mask[k] ? 0.0f : 25.0f);
    const SamplingParams sp{0.5 + rng.uniform(), static_cast<int>(rng.below(5)), 0.5 + 0.5 * rng.uniform()};
    const TokenId id = sample_next(logits, mask, sp, rng);
    forbidden += !mask[static_cast<size_t>(id)];
  }
  const bool ok = ok_generations == 500 && parse_failures == 0 && forbidden == 0 && images > 0;
  return {ok, "generations=500 conforming=" + std::to_string(ok_generations) + " parse_failures=" +
                  std::to_string(parse_failures) + " over_budget=" + std::to_string(over_budget) +
                  " images=" + std::to_string(images) + " forbidden_draws=" + std::to_string(forbidden) + "/10000"};
}

// 7. Synthesize, train the tokenizer, pre-train, fine-tune the head,
// generate.
Outcome toy_pipeline() {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const fs::path dir = workdir("pipeline");
  RunConfig config;
  config.apply_seed(0);
  config.finalize();
  synth_corpus(2048, 7, dir / "data");
  const fs::path manifest = dir / "data" / "manifest.jsonl";

  const VqStageResult vq = run_train_vq(config, manifest, dir / "vq.ckpt");
  run_train_lm(config, dir / "vq.ckpt", manifest, dir / "lm.ckpt");
  const FinetuneStageResult ft =
      run_finetune_head(config, dir / "lm.ckpt", manifest, dir / "ft.ckpt", dir / "ft.report.txt");
  const LoadedModel tuned = load_model(dir / "ft.ckpt");
  const LabelAgreement labels = label_agreement(tuned, config);
  GenerationParams gp = config.generation;
  gp.force_image = true;
  gp.seed = 3;
  const GenerateStageResult sample = run_generate(dir / "ft.ckpt", "a red circle", gp, dir / "out");
  const double minutes = std::chrono::duration<double>(clock::now() - start).count() / 60.0;

  const double reduction = 1.0 - ft.heldout_ce_after / ft.heldout_ce_before;
  const int64_t expected = static_cast<int64_t>(tuned.layout.image_size) * (tuned.lm.config().d_model + 1);
  const bool psnr_ok = vq.heldout_psnr >= 22.0;
  const bool ce_ok = reduction >= 0.20;
  const bool count_ok = ft.report.trainable.total() == expected;
  const bool labels_ok = labels.rate() >= 0.60;
  const bool sample_ok = !sample.rendered.images.empty();
  const bool time_ok = minutes <= 20.0;
  std::ostringstream d;
  d << "psnr=" << fmt(vq.heldout_psnr) << "dB" << (psnr_ok ? "" : "(<22)")
    << " ce=" << fmt(ft.heldout_ce_before) << "->" << fmt(ft.heldout_ce_after) << " reduction="
    << fmt(100.0 * reduction, 3) << "%" << (ce_ok ? "" : "(<20%)")
    << " trainable=" << with_thousands(ft.report.trainable.total()) << (count_ok ? "" : "(!=K*(d+1))")
    << " labels=" << labels.agreed << "/" << labels.prompts << (labels_ok ? "" : "(<60%)")
    << " sample_images=" << sample.rendered.images.size() << " minutes=" << fmt(minutes, 3)
    << (time_ok ? "" : "(>20)");
  return {psnr_ok && ce_ok && count_ok && labels_ok && sample_ok && time_ok, d.str()};
}

// 8. Bitwise checkpoint round trip and corruption detection.
Outcome persistence() {
  const fs::path dir = workdir("persistence");
  RunConfig config;
  config.apply_seed(8);
  config.finalize();
  const VqModel<float> vq(config.vq);
  const Transformer<float> lm(config.model);
  Checkpoint c;
  store_vq(c, vq);
  store_lm(c, lm, config.layout());
  save_checkpoint(dir / "a.ckpt", c);
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  int mismatched = 0;
  if (back.sections.size() != c.sections.size()) return {false, "section count differs"};
  for (size_t i = 0; i < c.sections.size(); ++i) {
    mismatched += back.sections[i].first != c.sections[i].first ||
                  !bitwise_equal(back.sections[i].second, c.sections[i].second);
  }
  mismatched += !(restore_lm(back).params() == lm.params());

  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // Flip one bit in the middle of the last tensor's payload.
  bytes[bytes.size() - 4 - c.sections.back().second.data.size() * 2] ^= 0x01;
  std::ofstream(dir / "b.ckpt", std::ios::binary) << bytes;
  std::string detected = "none";
  try {
    load_checkpoint(dir / "b.ckpt");
  } catch (const Error& e) {
    detected = std::string(error_code_name(e.code())) + "@" + e.context();
  }
  const bool ok = mismatched == 0 && detected.starts_with("checksum@");
  return {ok, "sections=" + std::to_string(c.sections.size()) + " mismatched=" + std::to_string(mismatched) +
                  " corrupted_file=" + detected};
}

// 9. Two pipeline runs with one config produce identical files.
void pipeline_once(const RunConfig& config, const fs::path& dir) {
  synth_corpus(96, 9, dir / "data");
  const fs::path manifest = dir / "data" / "manifest.jsonl";
  run_train_vq(config, manifest, dir / "vq.ckpt");
  run_tokenize(dir / "vq.ckpt", manifest, config.text_size, dir / "tokens.jsonl");
  run_train_lm(config, dir / "vq.ckpt", manifest, dir / "lm.ckpt");
  run_finetune_head(config, dir / "lm.ckpt", manifest, dir / "ft.ckpt", dir / "ft.report.txt");
  GenerationParams gp = config.generation;
  gp.force_image = true;
  gp.seed = 3;
  run_generate(dir / "ft.ckpt", "a blue square", gp, dir / "out");
  std::ofstream(dir / "eval.txt") << run_eval(config, dir / "ft.ckpt").to_text();
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] =
        std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  return out;
}

Outcome determinism() {
  RunConfig config;
  config.apply_seed(9);
  config.vq_train.steps = 40;
  config.pretrain.epochs = 1;
  config.finetune.epochs = 2;
  config.eval.heldout_count = 16;
  config.eval.prompts = 4;
  config.finalize();
  const fs::path a = workdir("determinism_a"), b = workdir("determinism_b");
  pipeline_once(config, a);
  pipeline_once(config, b);
  const auto ta = tree_contents(a), tb = tree_contents(b);
  int differ = 0, checkpoints = 0, reports = 0;
  for (const auto& [name, bytes] : ta) {
    const auto it = tb.find(name);
    differ += it == tb.end() || it->second != bytes;
    checkpoints += name.ends_with(".ckpt");
    reports += name.ends_with(".txt") || name.ends_with(".md");
  }
  const bool ok = differ == 0 && ta.size() == tb.size() && checkpoints == 3 && reports > 0;
  return {ok, "files=" + std::to_string(ta.size()) + " checkpoints=" + std::to_string(checkpoints) +
                  " reports=" + std::to_string(reports) + " differing=" + std::to_string(differ)};
}

// 10. Uniform-logit cross-entropy and softmax normalization.
Outcome losses() {
  double ce_err = 0.0, sum_err = 0.0;
  for (int V : {30, 325, 517}) {
    Mat<float> logits = Mat<float>::Constant(7, V, 1.25f);
    std::vector<TokenId> targets(7);
    for (int i = 0; i < 7; ++i) targets[static_cast<size_t>(i)] = (i * 37) % V;
    std::vector<float> weights(7, 1.0f);
    ce_err = std::max(ce_err, std::abs(cross_entropy<float>(logits, targets, weights) - std::log(double(V))));
  }
  Rng rng(10);
  Mat<float> logits(64, 517);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = static_cast<float>(8.0 * rng.normal());
  const Mat<float> p = softmax_rows<float>(logits);
  for (Eigen::Index r = 0; r < p.rows(); ++r) sum_err = std::max(sum_err, std::abs(p.row(r).cast<double>().sum() - 1.0));
  return {ce_err < 1e-6 && sum_err < 1e-6, "max |ce-ln V|=" + fmt(ce_err, 3) + " max |row sum-1|=" + fmt(sum_err, 3)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "parameter-accounting", parameter_accounting},
      {2, "freeze-exactness", freeze_exactness},
      {3, "selective-step-equivalence", selective_equivalence},
      {4, "quantizer-oracle", quantizer_oracle},
      {5, "gradient-checks", gradient_checks},
      {6, "grammar-conformance", grammar_conformance},
      {7, "toy-end-to-end", toy_pipeline},
      {8, "persistence", persistence},
      {9, "determinism", determinism},
      {10, "losses", losses},
  };
  std::set<int> selected;
  g_work = fs::temp_directory_path() / "mmgen_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      selected.insert(std::stoi(arg));
    }
  }
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const Error& e) {
      o = {false, e.one_line()};
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << o.detail << " ["
              << fmt(secs, 3) << "s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
