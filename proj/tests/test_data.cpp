#include "mmgen/checkpoint.hpp"
#include "mmgen/config.hpp"
#include "mmgen/corpus.hpp"
#include "mmgen/dataset.hpp"
#include "mmgen/error.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <cstring>
#include <iterator>

using namespace mmgen;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmgen_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

VqConfig small_vq() {
  VqConfig c;
  c.codebook_size = 16;
  c.latent_dim = 4;
  c.hidden_channels = 8;
  c.seed = 3;
  return c;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kUsage;
}

}  // namespace

TEST_CASE("synthetic corpus is reproducible byte for byte") {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  const DatasetManifest ma = synth_corpus(1, 42, a);
  synth_corpus(1, 42, b);
  REQUIRE(ma.records.size() == 1);
  CHECK(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"));
  CHECK(slurp(a / *ma.records[0].image) == slurp(b / *ma.records[0].image));
  int files = 0;
  for (const auto& entry : fs::directory_iterator(a / "images")) files += entry.is_regular_file();
  CHECK(files == 1);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("captions come from the 18-label product set") {
  for (int c = 0; c < 6; ++c) {
    for (int s = 0; s < 3; ++s) {
      const Label l{c, static_cast<Shape2D>(s)};
      const auto back = label_from_caption(caption_for(l));
      REQUIRE(back);
      CHECK(*back == l);
    }
  }
  CHECK(caption_for(Label{0, Shape2D::kCircle}) == "a red circle");
  CHECK(!label_from_caption("a purple circle"));
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const SynthSample s = render_sample(rng);
    CHECK(label_from_caption(s.caption) == std::optional<Label>(s.label));
    CHECK(s.image.height == 32);
  }
}

TEST_CASE("label checker recovers at least 99% of generated labels") {
  Rng rng(11);
  int hits = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    const SynthSample s = render_sample(rng);
    hits += check_label(quantize_8bit(s.image)) == std::optional<Label>(s.label);
  }
  CHECK(hits >= 0.99 * n);
  CHECK(!check_label(Image(32, 32, 0.5f)).has_value());
}

TEST_CASE("manifest errors carry line numbers") {
  const fs::path dir = scratch("manifest");
  spit(dir / "m.jsonl", "{\"caption\": \"a red circle\"}\n\n{\"caption\": 3}\n");
  try {
    read_manifest(dir / "m.jsonl");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kManifest);
    CHECK(e.context().ends_with(":3"));
  }
  spit(dir / "m.jsonl", "{\"order\": \"caption_first\"}\n");
  CHECK(code_of([&] { read_manifest(dir / "m.jsonl"); }) == ErrorCode::kManifest);
  spit(dir / "m.jsonl", "not json\n");
  CHECK(code_of([&] { read_manifest(dir / "m.jsonl"); }) == ErrorCode::kManifest);
  spit(dir / "m.jsonl", "{\"caption\": \"x\", \"order\": \"sideways\"}\n");
  CHECK(code_of([&] { read_manifest(dir / "m.jsonl"); }) == ErrorCode::kManifest);
  CHECK(code_of([&] { read_manifest(dir / "absent.jsonl"); }) == ErrorCode::kIo);
  fs::remove_all(dir);
}

TEST_CASE("ingest lengths and record kinds") {
  const fs::path dir = scratch("ingest");
  synth_corpus(2, 9, dir);
  DatasetManifest m = read_manifest(dir / "manifest.jsonl");
  const VqConfig vc = small_vq();
  const VqModel<float> vq(vc);
  const VocabLayout l = make_layout(vc);
  REQUIRE(l.image_block_length == 64);
  TextTokenizer text;

  m.records[0].caption = "a red square";  // 12 bytes
  m.records[1].image.reset();
  const auto seqs = ingest(m, l, text, vq);
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].size() == 80);
  CHECK(seqs[0][1] == 'a');
  CHECK(seqs[0][13] == l.boi());
  for (TokenId id : seqs[1]) CHECK(!l.is_image(id));

  DatasetManifest empty{dir, {}};
  CHECK(ingest_batches(empty, l, text, vq, 4, 1, LossWeights{}).empty());

  const auto b1 = ingest_batches(m, l, text, vq, 1, 5, LossWeights{});
  const auto b2 = ingest_batches(m, l, text, vq, 1, 5, LossWeights{});
  REQUIRE(b1.size() == 2);
  for (size_t i = 0; i < b1.size(); ++i) CHECK(b1[i].tokens == b2[i].tokens);

  m.records[0].image = "images/missing.ppm";
  m.records[0].line = 1;
  try {
    ingest(m, l, text, vq);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.context().starts_with("line 1: "));
  }
  write_ppm(dir / "images" / "small.ppm", Image(16, 16));
  m.records[0].image = "images/small.ppm";
  CHECK(code_of([&] { ingest(m, l, text, vq); }) == ErrorCode::kInputShape);
  fs::remove_all(dir);
}

TEST_CASE("token files round trip") {
  const fs::path dir = scratch("tokens");
  const std::vector<TokenSequence> seqs{{1, 2, 3}, {}, {500, 0}};
  write_token_file(dir / "t.jsonl", seqs);
  CHECK(read_token_file(dir / "t.jsonl") == seqs);
  fs::remove_all(dir);
}

TEST_CASE("checkpoints round trip bitwise") {
  const fs::path dir = scratch("ckpt");
  VqModel<float> vq(small_vq());
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq_len = 80;
  const VocabLayout l = make_layout(vq.config());
  mc.vocab_size = l.total_size();
  const Transformer<float> lm(mc);
  Checkpoint c;
  store_vq(c, vq);
  store_lm(c, lm, l);
  save_checkpoint(dir / "a.ckpt", c);

  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  nlohmann::json header = back.header;
  CHECK(header["format_version"] == 1);
  header.erase("format_version");
  CHECK(header == c.header);
  REQUIRE(back.sections.size() == c.sections.size());
  for (size_t i = 0; i < c.sections.size(); ++i) {
    CHECK(back.sections[i].first == c.sections[i].first);
    CHECK(back.sections[i].second.shape == c.sections[i].second.shape);
    CHECK(std::memcmp(back.sections[i].second.data.data(), c.sections[i].second.data.data(),
                      c.sections[i].second.data.size() * sizeof(float)) == 0);
  }
  CHECK(restore_lm(back).params() == lm.params());
  CHECK(restore_vq(back).params() == vq.params());
  CHECK(restore_layout(back) == l);
  save_checkpoint(dir / "b.ckpt", back);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("damaged checkpoints are rejected") {
  const fs::path dir = scratch("ckpt_bad");
  VqModel<float> vq(small_vq());
  Checkpoint c;
  store_vq(c, vq);
  save_checkpoint(dir / "vq.ckpt", c);
  const std::string good = slurp(dir / "vq.ckpt");

  std::string flipped = good;
  flipped[good.size() - 100] ^= 0x10;
  spit(dir / "x.ckpt", flipped);
  CHECK(code_of([&] { load_checkpoint(dir / "x.ckpt"); }) == ErrorCode::kChecksum);

  spit(dir / "x.ckpt", good.substr(0, good.size() / 2));
  CHECK(code_of([&] { load_checkpoint(dir / "x.ckpt"); }) == ErrorCode::kTruncated);

  std::string version = good;
  version[8] = 9;
  spit(dir / "x.ckpt", version);
  CHECK(code_of([&] { load_checkpoint(dir / "x.ckpt"); }) == ErrorCode::kVersion);

  std::string magic = good;
  magic[0] = 'X';
  spit(dir / "x.ckpt", magic);
  CHECK(code_of([&] { load_checkpoint(dir / "x.ckpt"); }) == ErrorCode::kVersion);

  spit(dir / "x.ckpt", good + "junk");
  CHECK(code_of([&] { load_checkpoint(dir / "x.ckpt"); }) == ErrorCode::kChecksum);

  CHECK(code_of([&] { load_checkpoint(dir / "absent.ckpt"); }) == ErrorCode::kIo);

  try {
    restore_lm(load_checkpoint(dir / "vq.ckpt"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSectionMissing);
    CHECK(e.context().find("lm.embed") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("run config JSON") {
  RunConfig c;
  c.apply_seed(99);
  c.finalize();
  const RunConfig back = run_config_from_json(run_config_to_json(c));
  CHECK(run_config_to_json(back) == run_config_to_json(c));
  CHECK(c.model.vocab_size == 517);

  try {
    run_config_from_json(nlohmann::json::parse(R"({"pretrain": {"epoch": 3}})"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    CHECK(e.context().find("epoch") != std::string::npos);
  }
  CHECK(code_of([] { run_config_from_json(nlohmann::json::parse(R"({"vq": {"codebook_size": "x"}})")); }) ==
        ErrorCode::kConfig);

  RunConfig bad;
  bad.model.max_seq_len = 8;
  CHECK(code_of([&] { bad.finalize(); }) == ErrorCode::kConfig);

  RunConfig a, b;
  a.apply_seed(1);
  b.apply_seed(2);
  CHECK(a.vq.seed != b.vq.seed);
  CHECK(a.vq.seed != a.model.seed);
}

TEST_CASE("errors format as one line") {
  const Error e(ErrorCode::kChecksum, "section checksum mismatch", "section=lm.embed");
  CHECK(e.one_line() == "error code=checksum message=\"section checksum mismatch\" context=\"section=lm.embed\"");
  CHECK(e.one_line().find('\n') == std::string::npos);
}
