#pragma once

#include "mmgen/image.hpp"
#include "mmgen/optimizer.hpp"
#include "mmgen/param_store.hpp"
#include "mmgen/rng.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace mmgen {

struct VqConfig {
  int codebook_size = 256;  // K
  int latent_dim = 16;      // D
  int image_height = 32;
  int image_width = 32;
  int downsample = 4;  // f, power of two; grid is (H/f) x (W/f)
  int hidden_channels = 64;
  double commitment_weight = 0.25;  // beta
  double ema_decay = 0.99;          // gamma
  double learning_rate = 2e-3;
  // Codebook entries whose EMA count falls below this are reseeded.
  double dead_code_threshold = 0.1;
  uint64_t seed = 0;

  int grid_height() const { return image_height / downsample; }
  int grid_width() const { return image_width / downsample; }
  int tokens_per_image() const { return grid_height() * grid_width(); }
  void validate() const;

  friend bool operator==(const VqConfig&, const VqConfig&) = default;
};

template <typename T>
struct Codebook {
  Tensor<T> entries;  // K x D

  int size() const { return static_cast<int>(entries.dim(0)); }
  int dim() const { return static_cast<int>(entries.dim(1)); }
  const T* row(int i) const { return entries.ptr() + static_cast<size_t>(i) * dim(); }
  T* row(int i) { return entries.ptr() + static_cast<size_t>(i) * dim(); }
};

template <typename T>
struct LatentGrid {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<T> values;  // height*width*dim, cell-major

  const T* cell(int y, int x) const {
    return values.data() + (static_cast<size_t>(y) * width + x) * dim;
  }
};

struct TokenGrid {
  int height = 0;
  int width = 0;
  std::vector<int32_t> ids;  // local image-token ids, row-major

  int32_t at(int y, int x) const { return ids[static_cast<size_t>(y) * width + x]; }
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Nearest codebook entry by squared Euclidean distance; ties go to the
// lowest index.
template <typename T>
int32_t nearest_code(const T* latent, const Codebook<T>& codebook);

template <typename T>
TokenGrid quantize(const LatentGrid<T>& latent, const Codebook<T>& codebook);

// Codebook lookup; inverse direction of quantize.
template <typename T>
LatentGrid<T> embed(const TokenGrid& tokens, const Codebook<T>& codebook);

struct VqLoss {
  double reconstruction = 0.0;
  double commitment = 0.0;
  double total() const { return reconstruction + commitment; }
};

// Assignment and straight-through offset (z_q - z_e) captured at one
// parameter point. Supplying it to loss_and_gradient freezes the
// quantizer so the objective becomes smooth in the network weights.
template <typename T>
struct FrozenAssignment {
  std::vector<int32_t> ids;
  Mat<T> offset;
};

// Convolutional encoder/decoder pair plus codebook.
template <typename T>
class VqModel {
 public:
  explicit VqModel(const VqConfig& config);
  VqModel(const VqModel&);
  VqModel(VqModel&&) noexcept;
  VqModel& operator=(const VqModel&);
  VqModel& operator=(VqModel&&) noexcept;
  ~VqModel();

  const VqConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  Codebook<T>& codebook() { return codebook_; }
  const Codebook<T>& codebook() const { return codebook_; }
  // EMA statistics backing the codebook: per-entry counts (K) and sums (K x D).
  Tensor<T>& ema_count() { return ema_count_; }
  Tensor<T>& ema_sum() { return ema_sum_; }
  const Tensor<T>& ema_count() const { return ema_count_; }
  const Tensor<T>& ema_sum() const { return ema_sum_; }

  LatentGrid<T> encode(const Image& image) const;
  TokenGrid tokenize(const Image& image) const;
  Image decode(const TokenGrid& tokens) const;
  Image reconstruct(const Image& image) const { return decode(tokenize(image)); }

  // Reconstruction + commitment loss over a batch with straight-through
  // gradients for encoder and decoder written into `grads` (when non-null,
  // accumulated). With `frozen` set, uses its ids/offset instead of the
  // nearest-neighbour search; `capture` receives the assignment used.
  VqLoss loss_and_gradient(std::span<const Image> batch, ParamStore<T>* grads,
                           const FrozenAssignment<T>* frozen = nullptr,
                           FrozenAssignment<T>* capture = nullptr,
                           Mat<T>* latents_out = nullptr) const;

  // Runs the encoder on a batch, rows ordered (image, y, x).
  Mat<T> encode_batch(std::span<const Image> batch) const;

  struct Layer;

 private:
  void check_image(const Image& image) const;
  Mat<T> images_to_rows(std::span<const Image> batch) const;

  VqConfig config_;
  ParamStore<T> params_;
  Codebook<T> codebook_;
  Tensor<T> ema_count_;
  Tensor<T> ema_sum_;
  std::vector<Layer> encoder_;
  std::vector<Layer> decoder_;
};

// EMA codebook update from a batch of latents and their assignments.
// count <- g*count + (1-g)*n, sum <- g*sum + (1-g)*S, entry = sum/count.
// Entries whose count drops below the dead-code threshold are reseeded from
// random latents of the batch.
template <typename T>
int ema_codebook_update(VqModel<T>& model, const Mat<T>& latents,
                        std::span<const int32_t> ids, Rng& rng);

// Owns the optimizer and RNG for tokenizer training.
class VqTrainer {
 public:
  explicit VqTrainer(VqModel<float>& model);

  // One gradient step on encoder/decoder plus one EMA codebook update.
  VqLoss step(std::span<const Image> batch);
  int64_t steps() const { return step_; }
  int reseeded_total() const { return reseeded_; }

 private:
  VqModel<float>& model_;
  Optimizer<float> optimizer_;
  Rng rng_;
  int64_t step_ = 0;
  int reseeded_ = 0;
  bool codebook_seeded_ = false;
};

}  // namespace mmgen
