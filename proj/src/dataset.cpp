#include "mmgen/dataset.hpp"

#include "mmgen/batching.hpp"
#include "mmgen/corpus.hpp"
#include "mmgen/error.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

namespace mmgen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void manifest_fail(const std::string& what, const fs::path& path, int line) {
  throw Error(ErrorCode::kManifest, what, path.string() + ":" + std::to_string(line));
}

}  // namespace

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest", path.string());
  DatasetManifest manifest;
  manifest.base_dir = path.parent_path();
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      manifest_fail("malformed record: " + std::string(e.what()), path, line);
    }
    if (!j.is_object()) manifest_fail("record is not a JSON object", path, line);
    ManifestRecord rec;
    rec.line = line;
    for (const auto& [key, value] : j.items()) {
      if (key == "image" || key == "caption") {
        if (!value.is_string()) manifest_fail("field '" + key + "' must be a string", path, line);
        (key == "image" ? rec.image : rec.caption) = value.get<std::string>();
      } else if (key == "order") {
        if (!value.is_string()) manifest_fail("field 'order' must be a string", path, line);
        const auto order = value.get<std::string>();
        if (order == "image_first") {
          rec.image_first = true;
        } else if (order != "caption_first") {
          manifest_fail("unknown order '" + order + "'", path, line);
        }
      } else {
        manifest_fail("unknown field '" + key + "'", path, line);
      }
    }
    if (!rec.image && !rec.caption) manifest_fail("record needs an image or a caption", path, line);
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest", path.string());
  for (const auto& rec : manifest.records) {
    json j = json::object();
    if (rec.caption) j["caption"] = *rec.caption;
    if (rec.image) j["image"] = *rec.image;
    if (rec.image && rec.caption) j["order"] = rec.image_first ? "image_first" : "caption_first";
    out << j.dump() << "\n";
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed", path.string());
}

DatasetManifest synth_corpus(int count, uint64_t seed, const fs::path& out_dir) {
  if (count < 1) throw Error(ErrorCode::kConfig, "corpus count must be >= 1", std::to_string(count));
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create corpus directory", out_dir.string());
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    SynthSample sample = render_sample(rng);
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.ppm", i);
    const std::string rel = (fs::path("images") / name).generic_string();
    write_ppm(out_dir / rel, sample.image);
    ManifestRecord rec;
    rec.image = rel;
    rec.caption = sample.caption;
    rec.line = i + 1;
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.jsonl", manifest);
  return manifest;
}

Image load_record_image(const DatasetManifest& manifest, const ManifestRecord& record,
                        const VqConfig& vq) {
  const fs::path path = manifest.base_dir / *record.image;
  const std::string where = "line " + std::to_string(record.line) + ": " + path.string();
  if (!fs::exists(path)) throw Error(ErrorCode::kIo, "missing image file", where);
  Image img = read_ppm(path);
  if (img.height != vq.image_height || img.width != vq.image_width) {
    throw Error(ErrorCode::kInputShape, "image size does not match tokenizer config", where);
  }
  return img;
}

MultimodalDocument record_document(const DatasetManifest& manifest, const ManifestRecord& record,
                                   const VqConfig& vq) {
  MultimodalDocument doc;
  std::optional<Segment> caption, image;
  if (record.caption) caption = TextSegment{*record.caption};
  if (record.image) image = ImageSegment{std::nullopt, load_record_image(manifest, record, vq)};
  if (record.image_first) std::swap(caption, image);
  if (caption) doc.segments.push_back(std::move(*caption));
  if (image) doc.segments.push_back(std::move(*image));
  return doc;
}

std::vector<TokenSequence> ingest(const DatasetManifest& manifest, const VocabLayout& layout,
                                  const TextTokenizer& text, const VqModel<float>& vq) {
  std::vector<TokenSequence> out;
  out.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    try {
      out.push_back(compose(record_document(manifest, rec, vq.config()), layout, text, &vq));
    } catch (const Error& e) {
      if (e.context().find("line ") == 0) throw;
      throw Error(e.code(), e.message(), "line " + std::to_string(rec.line) + ": " + e.context());
    }
  }
  return out;
}

float LossWeights::operator()(const VocabLayout& layout, TokenId target) const {
  if (layout.is_text(target)) return text;
  if (layout.is_image(target)) return image;
  if (target == layout.boi()) return boi;
  if (target == layout.eoi()) return eoi;
  if (target == layout.eos()) return eos;
  return 0.0f;
}

std::vector<Batch> ingest_batches(const DatasetManifest& manifest, const VocabLayout& layout,
                                  const TextTokenizer& text, const VqModel<float>& vq,
                                  int batch_size, uint64_t seed, const LossWeights& weights) {
  const auto sequences = ingest(manifest, layout, text, vq);
  return make_batches(sequences, batch_size, seed, layout.pad(),
                      [&](TokenId t) { return weights(layout, t); });
}

void write_token_file(const fs::path& path, const std::vector<TokenSequence>& seqs) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write token file", path.string());
  for (const auto& s : seqs) out << json(s).dump() << "\n";
  if (!out) throw Error(ErrorCode::kIo, "write failed", path.string());
}

std::vector<TokenSequence> read_token_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open token file", path.string());
  std::vector<TokenSequence> out;
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    try {
      out.push_back(json::parse(text).get<TokenSequence>());
    } catch (const json::exception& e) {
      manifest_fail("malformed token line: " + std::string(e.what()), path, line);
    }
  }
  return out;
}

}  // namespace mmgen
