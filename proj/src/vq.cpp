#include "mmgen/vq.hpp"

#include "conv.hpp"
#include "mmgen/error.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <string>

namespace mmgen {

void VqConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, what, "vq"); };
  if (codebook_size < 1) fail("codebook size must be >= 1");
  if (latent_dim < 1) fail("latent dim must be >= 1");
  if (downsample < 1 || !std::has_single_bit(static_cast<unsigned>(downsample))) {
    fail("downsample factor must be a power of two");
  }
  if (image_height <= 0 || image_width <= 0 || image_height % downsample != 0 ||
      image_width % downsample != 0) {
    fail("image size must be positive and divisible by the downsample factor");
  }
  if (hidden_channels < 1) fail("hidden channels must be >= 1");
  if (!(commitment_weight >= 0.0)) fail("commitment weight must be >= 0");
  if (!(ema_decay > 0.0 && ema_decay <= 1.0)) fail("ema decay must be in (0, 1]");
  if (!(learning_rate >= 0.0)) fail("learning rate must be >= 0");
}

template <typename T>
int32_t nearest_code(const T* latent, const Codebook<T>& codebook) {
  const int dim = codebook.dim();
  int32_t best = 0;
  T best_dist = std::numeric_limits<T>::infinity();
  for (int i = 0; i < codebook.size(); ++i) {
    const T* e = codebook.row(i);
    T dist = 0;
    for (int d = 0; d < dim; ++d) {
      T diff = latent[d] - e[d];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = i;
    }
  }
  return best;
}

template <typename T>
TokenGrid quantize(const LatentGrid<T>& latent, const Codebook<T>& codebook) {
  if (latent.dim != codebook.dim()) {
    throw Error(ErrorCode::kInputShape, "latent dimension does not match codebook",
                std::to_string(latent.dim) + " vs " + std::to_string(codebook.dim()));
  }
  for (T v : latent.values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw Error(ErrorCode::kNumericInput, "non-finite latent value", "quantize");
    }
  }
  TokenGrid out{latent.height, latent.width, {}};
  out.ids.resize(static_cast<size_t>(latent.height) * latent.width);
  for (int y = 0; y < latent.height; ++y) {
    for (int x = 0; x < latent.width; ++x) {
      out.ids[static_cast<size_t>(y) * latent.width + x] = nearest_code(latent.cell(y, x), codebook);
    }
  }
  return out;
}

template <typename T>
LatentGrid<T> embed(const TokenGrid& tokens, const Codebook<T>& codebook) {
  LatentGrid<T> out{tokens.height, tokens.width, codebook.dim(), {}};
  out.values.reserve(tokens.ids.size() * static_cast<size_t>(codebook.dim()));
  for (int32_t id : tokens.ids) {
    if (id < 0 || id >= codebook.size()) {
      throw Error(ErrorCode::kTokenRange, "image token id out of range",
                  "id=" + std::to_string(id) + " K=" + std::to_string(codebook.size()));
    }
    const T* e = codebook.row(id);
    out.values.insert(out.values.end(), e, e + codebook.dim());
  }
  return out;
}

template <typename T>
struct VqModel<T>::Layer {
  bool transposed = false;
  bool relu = false;
  int in_ch = 0, out_ch = 0;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  detail::ConvGeometry geom;  // large side is the input (conv) or output (transposed)
  int weight = -1, bias = -1;
};

template <typename T>
VqModel<T>::VqModel(const VqModel&) = default;
template <typename T>
VqModel<T>::VqModel(VqModel&&) noexcept = default;
template <typename T>
VqModel<T>& VqModel<T>::operator=(const VqModel&) = default;
template <typename T>
VqModel<T>& VqModel<T>::operator=(VqModel&&) noexcept = default;
template <typename T>
VqModel<T>::~VqModel() = default;

namespace {

template <typename Layer>
Layer conv_layer(int in_ch, int out_ch, int in_h, int in_w, int kernel, int stride, int pad,
                 bool relu) {
  Layer l;
  l.transposed = false;
  l.relu = relu;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.in_h = in_h;
  l.in_w = in_w;
  l.geom = detail::ConvGeometry::make(in_ch, in_h, in_w, kernel, stride, pad);
  l.out_h = l.geom.out_height;
  l.out_w = l.geom.out_width;
  return l;
}

// Transposed conv doubling spatial size: kernel 4, stride 2, pad 1.
template <typename Layer>
Layer upsample_layer(int in_ch, int out_ch, int in_h, int in_w, bool relu) {
  Layer l;
  l.transposed = true;
  l.relu = relu;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.in_h = in_h;
  l.in_w = in_w;
  l.out_h = in_h * 2;
  l.out_w = in_w * 2;
  l.geom = detail::ConvGeometry::make(out_ch, l.out_h, l.out_w, 4, 2, 1);
  return l;
}

template <typename T>
struct LayerCache {
  Mat<T> input;
  Mat<T> cols;
  Mat<T> pre;
};

template <typename T, typename Layer>
Mat<T> run_layers(const std::vector<Layer>& layers, const ParamStore<T>& params, Mat<T> x,
                  int batch, std::vector<LayerCache<T>>* caches) {
  if (caches) caches->resize(layers.size());
  for (size_t li = 0; li < layers.size(); ++li) {
    const Layer& l = layers[li];
    const auto w = params[l.weight].matrix();
    const auto b = params[l.bias].matrix();
    Mat<T> cols;
    Mat<T> pre;
    if (!l.transposed) {
      detail::im2col(x.data(), batch, l.geom, cols);
      pre.noalias() = cols * w.transpose();
    } else {
      cols.noalias() = x * w;
      pre.setZero(static_cast<Eigen::Index>(batch) * l.out_h * l.out_w, l.out_ch);
      detail::col2im(cols, batch, l.geom, pre.data());
    }
    pre.rowwise() += RowVec<T>(b.row(0));
    Mat<T> out = l.relu ? Mat<T>(pre.cwiseMax(T(0))) : pre;
    if (caches) {
      auto& c = (*caches)[li];
      c.input = std::move(x);
      c.cols = std::move(cols);
      c.pre = std::move(pre);
    }
    x = std::move(out);
  }
  return x;
}

// Backpropagates d(output) through the layer stack; returns d(input) unless
// `need_input_grad` is false.
template <typename T, typename Layer>
Mat<T> backprop_layers(const std::vector<Layer>& layers, const ParamStore<T>& params,
                       const std::vector<LayerCache<T>>& caches, Mat<T> grad, int batch,
                       ParamStore<T>& grads, bool need_input_grad) {
  for (size_t i = layers.size(); i-- > 0;) {
    const Layer& l = layers[i];
    const auto& c = caches[i];
    if (l.relu) grad = grad.cwiseProduct((c.pre.array() > T(0)).matrix().template cast<T>());
    const auto w = params[l.weight].matrix();
    auto dw = grads[l.weight].matrix();
    add_column_sums(grad, grads[l.bias].ptr());
    const bool want_dx = need_input_grad || i > 0;
    if (!l.transposed) {
      dw.noalias() += grad.transpose() * c.cols;
      if (want_dx) {
        Mat<T> dcols = grad * w;
        Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * l.in_h * l.in_w, l.in_ch);
        detail::col2im(dcols, batch, l.geom, dx.data());
        grad = std::move(dx);
      }
    } else {
      Mat<T> dcols;
      detail::im2col(grad.data(), batch, l.geom, dcols);
      dw.noalias() += c.input.transpose() * dcols;
      if (want_dx) grad = dcols * w.transpose();
    }
  }
  return grad;
}

}  // namespace

template <typename T>
VqModel<T>::VqModel(const VqConfig& config) : config_(config) {
  config_.validate();
  const int C = config_.hidden_channels;
  const int n_down = std::countr_zero(static_cast<unsigned>(config_.downsample));
  int h = config_.image_height;
  int w = config_.image_width;
  int ch = 3;
  if (n_down == 0) {
    encoder_.push_back(conv_layer<Layer>(ch, C, h, w, 3, 1, 1, true));
    ch = C;
  }
  for (int i = 0; i < n_down; ++i) {
    encoder_.push_back(conv_layer<Layer>(ch, C, h, w, 3, 2, 1, true));
    ch = C;
    h /= 2;
    w /= 2;
  }
  encoder_.push_back(conv_layer<Layer>(ch, config_.latent_dim, h, w, 1, 1, 0, false));

  decoder_.push_back(conv_layer<Layer>(config_.latent_dim, C, h, w, 3, 1, 1, true));
  for (int i = 0; i < n_down; ++i) {
    bool last = i + 1 == n_down;
    decoder_.push_back(upsample_layer<Layer>(C, last ? 3 : C, h, w, !last));
    h *= 2;
    w *= 2;
  }
  if (n_down == 0) decoder_.push_back(conv_layer<Layer>(C, 3, h, w, 3, 1, 1, false));

  Rng rng(config_.seed);
  auto register_layers = [&](std::vector<Layer>& layers, const std::string& prefix) {
    for (size_t i = 0; i < layers.size(); ++i) {
      Layer& l = layers[i];
      const std::string base = prefix + ".layer" + std::to_string(i);
      const int k = l.geom.kernel;
      if (!l.transposed) {
        l.weight = params_.add(base + ".weight", {l.out_ch, k * k * l.in_ch});
      } else {
        l.weight = params_.add(base + ".weight", {l.in_ch, k * k * l.out_ch});
      }
      l.bias = params_.add(base + ".bias", {1, l.out_ch});
      const double fan_in = l.transposed ? l.in_ch * k * k / 4.0 : l.in_ch * k * k;
      const double stddev = std::sqrt(2.0 / fan_in);
      for (T& v : params_[l.weight].data) v = static_cast<T>(rng.normal() * stddev);
    }
  };
  register_layers(encoder_, "vq.encoder");
  register_layers(decoder_, "vq.decoder");

  const int K = config_.codebook_size;
  const int D = config_.latent_dim;
  codebook_.entries = Tensor<T>({K, D});
  for (T& v : codebook_.entries.data) v = static_cast<T>(rng.normal());
  ema_count_ = Tensor<T>({K});
  ema_count_.fill(T(1));
  ema_sum_ = codebook_.entries;
}

template <typename T>
void VqModel<T>::check_image(const Image& image) const {
  if (image.height != config_.image_height || image.width != config_.image_width ||
      image.pixels.size() != static_cast<size_t>(image.height) * image.width * 3) {
    throw Error(ErrorCode::kInputShape, "image does not match tokenizer size",
                std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " expected " + std::to_string(config_.image_height) + "x" +
                    std::to_string(config_.image_width));
  }
}

template <typename T>
Mat<T> VqModel<T>::images_to_rows(std::span<const Image> batch) const {
  const size_t pixels = static_cast<size_t>(config_.image_height) * config_.image_width;
  Mat<T> x(static_cast<Eigen::Index>(batch.size() * pixels), 3);
  T* dst = x.data();
  for (const Image& img : batch) {
    check_image(img);
    for (float v : img.pixels) *dst++ = static_cast<T>(v);
  }
  return x;
}

template <typename T>
Mat<T> VqModel<T>::encode_batch(std::span<const Image> batch) const {
  return run_layers<T>(encoder_, params_, images_to_rows(batch), static_cast<int>(batch.size()),
                       nullptr);
}

template <typename T>
LatentGrid<T> VqModel<T>::encode(const Image& image) const {
  Mat<T> z = encode_batch(std::span<const Image>(&image, 1));
  LatentGrid<T> out{config_.grid_height(), config_.grid_width(), config_.latent_dim, {}};
  out.values.assign(z.data(), z.data() + z.size());
  return out;
}

template <typename T>
TokenGrid VqModel<T>::tokenize(const Image& image) const {
  return quantize(encode(image), codebook_);
}

template <typename T>
Image VqModel<T>::decode(const TokenGrid& tokens) const {
  if (tokens.height != config_.grid_height() || tokens.width != config_.grid_width()) {
    throw Error(ErrorCode::kInputShape, "token grid does not match tokenizer grid",
                std::to_string(tokens.height) + "x" + std::to_string(tokens.width));
  }
  LatentGrid<T> z = embed(tokens, codebook_);
  Mat<T> zq = ConstMatMap<T>(z.values.data(), static_cast<Eigen::Index>(tokens.ids.size()),
                             config_.latent_dim);
  Mat<T> x = run_layers<T>(decoder_, params_, std::move(zq), 1, nullptr);
  Image out(config_.image_height, config_.image_width);
  for (size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = static_cast<float>(x.data()[i]);
  out.clamp();
  return out;
}

template <typename T>
VqLoss VqModel<T>::loss_and_gradient(std::span<const Image> batch, ParamStore<T>* grads,
                                     const FrozenAssignment<T>* frozen,
                                     FrozenAssignment<T>* capture, Mat<T>* latents_out) const {
  if (batch.empty()) throw Error(ErrorCode::kInputShape, "empty batch", "vq");
  const int B = static_cast<int>(batch.size());
  const int D = config_.latent_dim;
  Mat<T> x = images_to_rows(batch);
  std::vector<LayerCache<T>> enc_cache, dec_cache;
  Mat<T> ze = run_layers<T>(encoder_, params_, x, B, grads ? &enc_cache : nullptr);
  const Eigen::Index n_lat = ze.rows();

  std::vector<int32_t> ids(static_cast<size_t>(n_lat));
  Mat<T> codes(n_lat, D);
  Mat<T> zq;
  if (frozen) {
    if (frozen->ids.size() != ids.size() || frozen->offset.rows() != n_lat) {
      throw Error(ErrorCode::kInputShape, "frozen assignment does not match batch", "vq");
    }
    ids = frozen->ids;
    zq = ze + frozen->offset;
  } else {
    for (Eigen::Index r = 0; r < n_lat; ++r) {
      for (Eigen::Index d = 0; d < D; ++d) {
        if (!std::isfinite(static_cast<double>(ze(r, d)))) {
          throw Error(ErrorCode::kNumericInput, "non-finite latent value", "vq encode");
        }
      }
      ids[static_cast<size_t>(r)] = nearest_code(ze.row(r).data(), codebook_);
    }
  }
  for (Eigen::Index r = 0; r < n_lat; ++r) {
    const T* e = codebook_.row(ids[static_cast<size_t>(r)]);
    for (Eigen::Index d = 0; d < D; ++d) codes(r, d) = e[d];
  }
  if (!frozen) zq = codes;
  if (capture) {
    capture->ids = ids;
    capture->offset = zq - ze;
  }

  Mat<T> xhat = run_layers<T>(decoder_, params_, zq, B, grads ? &dec_cache : nullptr);
  const double n_pix = static_cast<double>(xhat.size());
  const double n_lat_el = static_cast<double>(ze.size());
  double rec = 0.0;
  for (Eigen::Index i = 0; i < xhat.size(); ++i) {
    double d = static_cast<double>(xhat.data()[i]) - static_cast<double>(x.data()[i]);
    rec += d * d;
  }
  double com = 0.0;
  for (Eigen::Index i = 0; i < ze.size(); ++i) {
    double d = static_cast<double>(ze.data()[i]) - static_cast<double>(codes.data()[i]);
    com += d * d;
  }
  VqLoss loss{rec / n_pix, config_.commitment_weight * com / n_lat_el};

  if (grads) {
    Mat<T> dxhat = (xhat - x) * static_cast<T>(2.0 / n_pix);
    Mat<T> dzq = backprop_layers<T>(decoder_, params_, dec_cache, std::move(dxhat), B, *grads, true);
    // Straight-through: the decoder-side gradient passes to z_e unchanged.
    Mat<T> dze = dzq + (ze - codes) * static_cast<T>(2.0 * config_.commitment_weight / n_lat_el);
    backprop_layers<T>(encoder_, params_, enc_cache, std::move(dze), B, *grads, false);
  }
  if (latents_out) *latents_out = std::move(ze);
  return loss;
}

template <typename T>
int ema_codebook_update(VqModel<T>& model, const Mat<T>& latents, std::span<const int32_t> ids,
                        Rng& rng) {
  auto& cb = model.codebook();
  const int K = cb.size();
  const int D = cb.dim();
  const T g = static_cast<T>(model.config().ema_decay);
  const T one_minus = static_cast<T>(1.0 - model.config().ema_decay);
  std::vector<T> counts(static_cast<size_t>(K), T(0));
  Mat<T> sums = Mat<T>::Zero(K, D);
  for (size_t r = 0; r < ids.size(); ++r) {
    counts[static_cast<size_t>(ids[r])] += T(1);
    sums.row(ids[r]) += latents.row(static_cast<Eigen::Index>(r));
  }
  auto& count = model.ema_count();
  auto& sum = model.ema_sum();
  int reseeded = 0;
  for (int i = 0; i < K; ++i) {
    T& c = count.data[static_cast<size_t>(i)];
    c = g * c + one_minus * counts[static_cast<size_t>(i)];
    T* s = sum.ptr() + static_cast<size_t>(i) * D;
    T* e = cb.row(i);
    for (int d = 0; d < D; ++d) s[d] = g * s[d] + one_minus * sums(i, d);
    if (c < static_cast<T>(model.config().dead_code_threshold) && latents.rows() > 0) {
      auto r = static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(latents.rows())));
      for (int d = 0; d < D; ++d) {
        e[d] = latents(r, d);
        s[d] = e[d];
      }
      c = T(1);
      ++reseeded;
    } else {
      for (int d = 0; d < D; ++d) e[d] = s[d] / c;
    }
  }
  return reseeded;
}

namespace {

OptimizerConfig vq_optimizer(const VqConfig& config) {
  OptimizerConfig oc;
  oc.kind = OptimizerKind::kAdam;
  oc.learning_rate = config.learning_rate;
  return oc;
}

}  // namespace

VqTrainer::VqTrainer(VqModel<float>& model)
    : model_(model), optimizer_(vq_optimizer(model.config())), rng_(model.config().seed ^ 0x5eedull) {}

VqLoss VqTrainer::step(std::span<const Image> batch) {
  if (batch.empty()) throw Error(ErrorCode::kInputShape, "empty batch", "vq train");
  if (!codebook_seeded_) {
    // Data-dependent init: codebook rows drawn from the first batch's latents.
    Mat<float> z = model_.encode_batch(batch);
    auto& cb = model_.codebook();
    for (int i = 0; i < cb.size(); ++i) {
      auto r = static_cast<Eigen::Index>(rng_.below(static_cast<uint64_t>(z.rows())));
      for (int d = 0; d < cb.dim(); ++d) {
        cb.row(i)[d] = z(r, d);
        model_.ema_sum().ptr()[static_cast<size_t>(i) * cb.dim() + d] = z(r, d);
      }
      model_.ema_count().data[static_cast<size_t>(i)] = 1.0f;
    }
    codebook_seeded_ = true;
  }
  ParamStore<float> grads = model_.params().zeros_like();
  FrozenAssignment<float> assignment;
  Mat<float> latents;
  const std::string diagnostic = "learning_rate=" + std::to_string(model_.config().learning_rate) +
                                 " step=" + std::to_string(step_);
  VqLoss loss;
  try {
    loss = model_.loss_and_gradient(batch, &grads, nullptr, &assignment, &latents);
  } catch (const Error& e) {
    // Weights that blew up on the previous step surface as non-finite latents.
    if (e.code() != ErrorCode::kNumericInput) throw;
    throw Error(ErrorCode::kDivergence, "non-finite tokenizer activations", diagnostic);
  }
  if (!std::isfinite(loss.total()) || !grads.all_finite()) {
    throw Error(ErrorCode::kDivergence, "non-finite tokenizer loss", diagnostic);
  }
  optimizer_.step(model_.params(), grads);
  reseeded_ += ema_codebook_update(model_, latents, assignment.ids, rng_);
  ++step_;
  return loss;
}

template int32_t nearest_code<float>(const float*, const Codebook<float>&);
template int32_t nearest_code<double>(const double*, const Codebook<double>&);
template TokenGrid quantize<float>(const LatentGrid<float>&, const Codebook<float>&);
template TokenGrid quantize<double>(const LatentGrid<double>&, const Codebook<double>&);
template LatentGrid<float> embed<float>(const TokenGrid&, const Codebook<float>&);
template LatentGrid<double> embed<double>(const TokenGrid&, const Codebook<double>&);
template int ema_codebook_update<float>(VqModel<float>&, const Mat<float>&,
                                        std::span<const int32_t>, Rng&);
template int ema_codebook_update<double>(VqModel<double>&, const Mat<double>&,
                                         std::span<const int32_t>, Rng&);
template class VqModel<float>;
template class VqModel<double>;

}  // namespace mmgen
