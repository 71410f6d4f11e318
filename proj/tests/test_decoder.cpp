#include "mmgen/decoder.hpp"
#include "mmgen/error.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

using namespace mmgen;
namespace fs = std::filesystem;

namespace {

VocabLayout tiny_layout() { return VocabLayout{16, 8, 4}; }

Transformer<float> tiny_model(const VocabLayout& l, int max_seq = 40) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = max_seq;
  c.vocab_size = l.total_size();
  c.seed = 31;
  return Transformer<float>(c);
}

MultimodalDocument text_prompt(const std::string& s) {
  MultimodalDocument d;
  d.segments.push_back(TextSegment{s});
  return d;
}

int count_allowed(const std::vector<uint8_t>& m) { return static_cast<int>(std::count(m.begin(), m.end(), 1)); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmgen_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("allowed mask per decoder mode") {
  const VocabLayout l{256, 64, 16};
  DecoderState s(l, 200, 1);
  CHECK(count_allowed(s.allowed_mask()) == 1);
  s.push(l.bos());
  auto m = s.allowed_mask();
  CHECK(count_allowed(m) == 256 + 2);
  CHECK(m[static_cast<size_t>(l.boi())]);
  CHECK(m[static_cast<size_t>(l.eos())]);
  CHECK(!m[static_cast<size_t>(l.eoi())]);
  CHECK(!m[static_cast<size_t>(l.bos())]);
  CHECK(!m[static_cast<size_t>(l.pad())]);
  CHECK(!m[256]);

  s.push(l.boi());
  m = s.allowed_mask();
  CHECK(count_allowed(m) == 64);
  for (TokenId id = 0; id < l.total_size(); ++id) CHECK(bool(m[static_cast<size_t>(id)]) == l.is_image(id));
  for (int i = 0; i < 16; ++i) s.push(256 + i);
  m = s.allowed_mask();
  CHECK(count_allowed(m) == 1);
  CHECK(m[static_cast<size_t>(l.eoi())]);

  s.push(l.eoi());
  m = s.allowed_mask();
  CHECK(count_allowed(m) == 256 + 1);
  CHECK(!m[static_cast<size_t>(l.boi())]);
  s.push(l.eos());
  CHECK(s.mode() == DecodeMode::kDone);
  CHECK(count_allowed(s.allowed_mask()) == 0);
}

TEST_CASE("BOI is masked when a whole block no longer fits") {
  const VocabLayout l = tiny_layout();
  // BOS + BOI + 4 image + EOI + EOS = 8 tokens.
  DecoderState fits(l, 8, 1);
  fits.push(l.bos());
  CHECK(fits.allowed_mask()[static_cast<size_t>(l.boi())]);
  DecoderState tight(l, 7, 1);
  tight.push(l.bos());
  CHECK(!tight.allowed_mask()[static_cast<size_t>(l.boi())]);
  DecoderState last(l, 2, 1);
  last.push(l.bos());
  CHECK(count_allowed(last.allowed_mask()) == 1);
  CHECK(last.allowed_mask()[static_cast<size_t>(l.eos())]);
}

TEST_CASE("decoder state rejects grammar violations") {
  const VocabLayout l = tiny_layout();
  auto expect_parse = [](auto&& fn) {
    try {
      fn();
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kParse);
    }
  };
  expect_parse([&] { DecoderState(l, 20, 1).push(3); });
  expect_parse([&] {
    DecoderState s(l, 20, 1);
    s.push(l.bos());
    s.push(17);
  });
  expect_parse([&] {
    DecoderState s(l, 20, 0);
    s.push(l.bos());
    s.push(l.boi());
  });
  expect_parse([&] {
    DecoderState s(l, 20, 1);
    s.push(l.bos());
    s.push(l.boi());
    s.push(16);
    s.push(l.eoi());
  });
}

TEST_CASE("greedy sampling picks the best allowed id") {
  Rng rng(1);
  std::vector<float> logits(12, 0.0f);
  logits[5] = 1.0f;
  logits[9] = 2.0f;
  logits[11] = 50.0f;
  std::vector<uint8_t> allowed(12, 0);
  allowed[5] = allowed[9] = 1;
  CHECK(sample_next(logits, allowed, SamplingParams{0.0, 0, 1.0}, rng) == 9);
  logits[5] = 2.0f;
  CHECK(sample_next(logits, allowed, SamplingParams{0.0, 0, 1.0}, rng) == 5);
}

TEST_CASE("top-k of one equals the greedy choice") {
  Rng gen(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> logits(20);
    std::vector<uint8_t> allowed(20);
    for (size_t i = 0; i < 20; ++i) {
      logits[i] = static_cast<float>(gen.normal() * 3.0);
      allowed[i] = gen.below(3) != 0;
    }
    allowed[static_cast<size_t>(gen.below(20))] = 1;
    Rng a(trial), b(trial);
    CHECK(sample_next(logits, allowed, SamplingParams{1.3, 1, 1.0}, a) ==
          sample_next(logits, allowed, SamplingParams{0.0, 0, 1.0}, b));
  }
}

TEST_CASE("forbidden tokens are never drawn") {
  std::vector<float> logits{0.5f, 1.0f, 30.0f, -1.0f, 0.0f, 2.0f};
  std::vector<uint8_t> allowed{1, 1, 0, 1, 1, 1};
  Rng rng(3);
  std::map<TokenId, int> counts;
  for (int i = 0; i < 10000; ++i) ++counts[sample_next(logits, allowed, SamplingParams{1.0, 0, 1.0}, rng)];
  CHECK(counts.count(2) == 0);
  CHECK(counts.size() == 5);
  counts.clear();
  for (int i = 0; i < 10000; ++i) ++counts[sample_next(logits, allowed, SamplingParams{2.0, 2, 1.0}, rng)];
  CHECK(counts.size() == 2);
  CHECK(counts.count(5) == 1);
  CHECK(counts.count(1) == 1);
}

TEST_CASE("sampling frequencies follow the softmax") {
  std::vector<float> logits{0.0f, std::log(3.0f)};
  std::vector<uint8_t> allowed{1, 1};
  Rng rng(4);
  int ones = 0;
  for (int i = 0; i < 20000; ++i) ones += sample_next(logits, allowed, SamplingParams{1.0, 0, 1.0}, rng) == 1;
  CHECK(ones / 20000.0 == doctest::Approx(0.75).epsilon(0.02));
  int nucleus = 0;
  for (int i = 0; i < 2000; ++i) nucleus += sample_next(logits, allowed, SamplingParams{1.0, 0, 0.7}, rng) == 1;
  CHECK(nucleus == 2000);
}

TEST_CASE("sampling errors") {
  Rng rng(5);
  std::vector<float> logits(4, 0.0f);
  std::vector<uint8_t> none(4, 0);
  try {
    sample_next(logits, none, SamplingParams{}, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDecodeStuck);
  }
  CHECK_THROWS_AS(SamplingParams({-1.0, 0, 1.0}).validate(), Error);
  CHECK_THROWS_AS(SamplingParams({1.0, 0, 0.0}).validate(), Error);
  CHECK_THROWS_AS(SamplingParams({1.0, -2, 1.0}).validate(), Error);
}

TEST_CASE("generations conform to the grammar under every budget") {
  const VocabLayout l = tiny_layout();
  const Transformer<float> model = tiny_model(l);
  TextTokenizer text(16);
  Rng rng(6);
  int images = 0;
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
    const Generation out = generate(text_prompt(prompt), model, l, text, nullptr, p);
    INFO("generation " << g);
    CHECK(static_cast<int>(out.tokens.size()) <= p.max_tokens);
    CHECK(out.tokens.back() == l.eos());
    CHECK(static_cast<int>(out.document.image_count()) <= p.max_images);
    images += static_cast<int>(out.document.image_count());
    for (size_t i = 0; i < out.tokens.size(); ++i) {
      if (out.tokens[i] != l.boi()) continue;
      REQUIRE(i + 5 < out.tokens.size());
      for (size_t j = 1; j <= 4; ++j) CHECK(l.is_image(out.tokens[i + j]));
      CHECK(out.tokens[i + 5] == l.eoi());
    }
    CHECK_NOTHROW(parse(out.tokens, l, text));
  }
  CHECK(images > 0);
}

TEST_CASE("no image budget means no image tokens") {
  const VocabLayout l = tiny_layout();
  const Transformer<float> model = tiny_model(l);
  TextTokenizer text(16);
  GenerationParams p;
  p.max_images = 0;
  p.max_tokens = 30;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    p.seed = seed;
    const Generation out = generate(text_prompt(std::string(1, '\x02')), model, l, text, nullptr, p);
    for (TokenId id : out.tokens) {
      CHECK(id != l.boi());
      CHECK(!l.is_image(id));
    }
  }
}

TEST_CASE("same seed and prompt give the same document") {
  const VocabLayout l = tiny_layout();
  const Transformer<float> model = tiny_model(l);
  TextTokenizer text(16);
  GenerationParams p;
  p.seed = 77;
  p.max_tokens = 30;
  p.max_images = 2;
  const auto a = generate(text_prompt("\x01\x02"), model, l, text, nullptr, p);
  const auto b = generate(text_prompt("\x01\x02"), model, l, text, nullptr, p);
  CHECK(a.tokens == b.tokens);
  CHECK(same_content(a.document, b.document));
}

TEST_CASE("generation errors") {
  const VocabLayout l = tiny_layout();
  const Transformer<float> model = tiny_model(l, 10);
  TextTokenizer text(16);
  GenerationParams p;
  p.force_image = true;
  try {
    generate(text_prompt("\x01\x02\x03\x04"), model, l, text, nullptr, p);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kPromptTooLong);
  }
  try {
    generate(text_prompt("a"), model, VocabLayout{16, 9, 4}, text, nullptr, GenerationParams{});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kLayoutMismatch);
  }
  p.max_images = 0;
  CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("forced image prompts decode through the tokenizer") {
  VqConfig vc;
  vc.codebook_size = 8;
  vc.latent_dim = 3;
  vc.image_height = 8;
  vc.image_width = 8;
  vc.downsample = 4;
  vc.hidden_channels = 4;
  const VqModel<float> vq(vc);
  const VocabLayout l = make_layout(vc, 16);
  REQUIRE(l.image_block_length == 4);
  const Transformer<float> model = tiny_model(l);
  TextTokenizer text(16);
  GenerationParams p;
  p.force_image = true;
  p.max_images = 1;
  p.max_tokens = 20;
  const Generation out = generate(text_prompt("\x03"), model, l, text, &vq, p);
  CHECK(out.prompt_length == 3);
  CHECK(out.tokens[2] == l.boi());
  REQUIRE(out.document.image_count() == 1);
  const auto* img = std::get_if<ImageSegment>(&out.document.segments[1]);
  REQUIRE(img);
  REQUIRE(img->pixels);
  CHECK(img->pixels->height == 8);
  CHECK(*img->pixels == vq.decode(*img->tokens));
}

TEST_CASE("render writes files in segment order") {
  MultimodalDocument doc;
  doc.segments.push_back(TextSegment{"first"});
  Image a(4, 4, 0.2f), b(4, 4, 0.6f);
  a.at(1, 2, 0) = 1.0f;
  doc.segments.push_back(ImageSegment{std::nullopt, a});
  doc.segments.push_back(TextSegment{"second"});
  doc.segments.push_back(ImageSegment{std::nullopt, b});
  const fs::path dir = scratch("render");
  const RenderResult r = render(doc, dir);
  REQUIRE(r.images.size() == 2);
  CHECK(r.images[0].filename() == "img_000.ppm");
  CHECK(r.images[1].filename() == "img_001.ppm");
  CHECK(read_ppm(r.images[0]) == quantize_8bit(a));
  CHECK(read_ppm(r.images[1]) == quantize_8bit(b));
  std::ifstream in(r.markdown);
  const std::string md((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto p0 = md.find("first"), p1 = md.find("images/img_000.ppm"), p2 = md.find("second"),
             p3 = md.find("images/img_001.ppm");
  CHECK(p0 < p1);
  CHECK(p1 < p2);
  CHECK(p2 < p3);
  CHECK(p3 != std::string::npos);

  const RenderResult t = render(text_prompt("only text"), scratch("render_text"));
  CHECK(t.images.empty());
  std::ifstream tin(t.markdown);
  const std::string tmd((std::istreambuf_iterator<char>(tin)), std::istreambuf_iterator<char>());
  CHECK(tmd.find("](") == std::string::npos);
  fs::remove_all(dir);
  fs::remove_all(scratch("render_text"));
}

TEST_CASE("generation manifest lists the settings") {
  Generation g;
  g.tokens = {1, 2, 3, 4};
  g.prompt_length = 2;
  GenerationParams p;
  p.seed = 12;
  const std::string m = generation_manifest("hi", p, g);
  CHECK(m.find("prompt: hi\n") != std::string::npos);
  CHECK(m.find("seed: 12\n") != std::string::npos);
  CHECK(m.find("generated_tokens: 2\n") != std::string::npos);
  CHECK(m.find("image_temperature: 1\n") != std::string::npos);
}
