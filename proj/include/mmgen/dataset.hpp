#pragma once

#include "mmgen/transformer.hpp"
#include "mmgen/vocab.hpp"
#include "mmgen/vq.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mmgen {

// One JSON object per line:
//   {"image": "images/00000.ppm", "caption": "a red circle", "order": "caption_first"}
// At least one of image/caption; order is "caption_first" (default) or
// "image_first". Image paths are relative to the manifest's directory.
struct ManifestRecord {
  std::optional<std::string> image;
  std::optional<std::string> caption;
  bool image_first = false;
  int line = 0;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Renders `count` labelled shape images under out_dir/images and writes
// out_dir/manifest.jsonl. Deterministic per seed.
DatasetManifest synth_corpus(int count, uint64_t seed, const std::filesystem::path& out_dir);

// Loads the record's image (if any), checking the tokenizer's size.
Image load_record_image(const DatasetManifest& manifest, const ManifestRecord& record,
                        const VqConfig& vq);

MultimodalDocument record_document(const DatasetManifest& manifest, const ManifestRecord& record,
                                   const VqConfig& vq);

// Every record composed into a flat token sequence, in manifest order.
// Errors carry the manifest line number.
std::vector<TokenSequence> ingest(const DatasetManifest& manifest, const VocabLayout& layout,
                                  const TextTokenizer& text, const VqModel<float>& vq);

// Per-class loss weights used to build training batches.
struct LossWeights {
  float text = 1.0f;
  float image = 1.0f;
  float boi = 1.0f;
  float eoi = 1.0f;
  float eos = 1.0f;

  float operator()(const VocabLayout& layout, TokenId target) const;
};

// ingest + seeded shuffle + padded batches with loss weights.
std::vector<Batch> ingest_batches(const DatasetManifest& manifest, const VocabLayout& layout,
                                  const TextTokenizer& text, const VqModel<float>& vq,
                                  int batch_size, uint64_t seed, const LossWeights& weights);

// Tokenized sequences as JSON arrays, one per line.
void write_token_file(const std::filesystem::path& path, const std::vector<TokenSequence>& seqs);
std::vector<TokenSequence> read_token_file(const std::filesystem::path& path);

}  // namespace mmgen
