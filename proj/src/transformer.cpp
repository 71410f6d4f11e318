#include "mmgen/transformer.hpp"

#include "mmgen/error.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace mmgen {

void ModelConfig::validate(int image_block_length) const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, what, "model"); };
  if (d_model < 1 || n_layers < 0 || n_heads < 1 || d_ff < 1) fail("non-positive model size");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (vocab_size < 1) fail("vocab size must be >= 1");
  if (max_seq_len < 1) fail("max sequence length must be >= 1");
  if (image_block_length > 0 && max_seq_len < image_block_length + 4) {
    fail("max sequence length must fit one image block plus sentinels");
  }
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T* in = logits.row(r).data();
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c) mx = std::max(mx, static_cast<double>(in[c]));
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<double>(in[c]) - mx);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = static_cast<T>(std::exp(static_cast<double>(in[c]) - mx) / sum);
    }
  }
  return out;
}

template <typename T>
double cross_entropy(const Mat<T>& logits, std::span<const TokenId> targets,
                     std::span<const float> weights, Mat<T>* dlogits) {
  const Eigen::Index rows = logits.rows();
  const Eigen::Index V = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != rows ||
      static_cast<Eigen::Index>(weights.size()) != rows) {
    throw Error(ErrorCode::kInputShape, "targets/weights do not match logits rows", "loss");
  }
  int64_t active = 0;
  for (float w : weights) active += w != 0.0f;
  if (active == 0) throw Error(ErrorCode::kEmptyLoss, "no position contributes to the loss", "loss");
  if (dlogits) dlogits->setZero(rows, V);
  const double norm = 1.0 / static_cast<double>(active);
  double total = 0.0;
  std::vector<double> expv(static_cast<size_t>(V));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double w = weights[static_cast<size_t>(r)];
    if (w == 0.0) continue;
    const TokenId target = targets[static_cast<size_t>(r)];
    if (target < 0 || target >= V) {
      throw Error(ErrorCode::kTokenRange, "target id out of range", "row=" + std::to_string(r));
    }
    const T* in = logits.row(r).data();
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(in[c]));
    double sum = 0.0;
    for (Eigen::Index c = 0; c < V; ++c) {
      expv[static_cast<size_t>(c)] = std::exp(static_cast<double>(in[c]) - mx);
      sum += expv[static_cast<size_t>(c)];
    }
    const double lse = mx + std::log(sum);
    total += w * (lse - static_cast<double>(in[target]));
    if (dlogits) {
      T* d = dlogits->row(r).data();
      const double scale = w * norm;
      for (Eigen::Index c = 0; c < V; ++c) {
        d[c] = static_cast<T>(scale * (expv[static_cast<size_t>(c)] / sum));
      }
      d[target] -= static_cast<T>(scale);
    }
  }
  return total * norm;
}

namespace {

constexpr double kLayerNormEps = 1e-5;

// y = (x - mean) * rstd * gain + bias, row-wise. Stores normalized x and rstd.
template <typename T>
void layer_norm(const Mat<T>& x, const T* gain, const T* bias, Mat<T>& xhat,
                std::vector<T>& rstd, Mat<T>& y) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  xhat.resize(rows, cols);
  y.resize(rows, cols);
  rstd.resize(static_cast<size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T* in = x.row(r).data();
    T mean = 0;
    for (Eigen::Index c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (Eigen::Index c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[static_cast<size_t>(r)] = rs;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const T n = (in[c] - mean) * rs;
      xhat(r, c) = n;
      y(r, c) = n * gain[c] + bias[c];
    }
  }
}

// Returns dx; accumulates dgain, dbias.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd,
                           const T* gain, T* dgain, T* dbias) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  Mat<T> dx(rows, cols);
  std::vector<T> dn(static_cast<size_t>(cols));
  for (Eigen::Index r = 0; r < rows; ++r) {
    T mean_dn = 0, mean_dn_x = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const T g = dy(r, c);
      if (dgain) dgain[c] += g * xhat(r, c);
      if (dbias) dbias[c] += g;
      dn[static_cast<size_t>(c)] = g * gain[c];
      mean_dn += dn[static_cast<size_t>(c)];
      mean_dn_x += dn[static_cast<size_t>(c)] * xhat(r, c);
    }
    mean_dn /= static_cast<T>(cols);
    mean_dn_x /= static_cast<T>(cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      dx(r, c) = rstd[static_cast<size_t>(r)] *
                 (dn[static_cast<size_t>(c)] - mean_dn - xhat(r, c) * mean_dn_x);
    }
  }
  return dx;
}

template <typename T>
T gelu(T u) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T c = static_cast<T>(0.7978845608028654);
  const T th = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + th) +
         T(0.5) * u * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * u * u);
}

template <typename T>
void add_bias(Mat<T>& m, const Tensor<T>& bias) {
  m.rowwise() += ConstMatMap<T>(bias.ptr(), 1, bias.numel()).row(0);
}

template <typename T>
void accumulate_bias_grad(const Mat<T>& d, Tensor<T>& dbias) {
  add_column_sums(d, dbias.ptr());
}

}  // namespace

template <typename T>
struct Transformer<T>::Cache {
  struct Layer {
    Mat<T> a_hat, a, qkv, att, c_hat, c, u, g;
    std::vector<T> rstd1, rstd2;
    std::vector<Mat<T>> probs;  // per (b, head): T x T
  };
  std::vector<Layer> layers;
  Mat<T> x_final, h_hat, h;
  std::vector<T> rstd_final;
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int d = config_.d_model;
  const int V = config_.vocab_size;
  embed_ = params_.add("lm.embed", {V, d});
  pos_ = params_.add("lm.pos", {config_.max_seq_len, d});
  for (int i = 0; i < config_.n_layers; ++i) {
    const std::string p = "lm.layer" + std::to_string(i) + ".";
    LayerIndex l{};
    l.ln1_gain = params_.add(p + "ln1.gain", {d});
    l.ln1_bias = params_.add(p + "ln1.bias", {d});
    l.qkv_weight = params_.add(p + "attn.qkv.weight", {3 * d, d});
    l.qkv_bias = params_.add(p + "attn.qkv.bias", {3 * d});
    l.proj_weight = params_.add(p + "attn.proj.weight", {d, d});
    l.proj_bias = params_.add(p + "attn.proj.bias", {d});
    l.ln2_gain = params_.add(p + "ln2.gain", {d});
    l.ln2_bias = params_.add(p + "ln2.bias", {d});
    l.up_weight = params_.add(p + "ffn.up.weight", {config_.d_ff, d});
    l.up_bias = params_.add(p + "ffn.up.bias", {config_.d_ff});
    l.down_weight = params_.add(p + "ffn.down.weight", {d, config_.d_ff});
    l.down_bias = params_.add(p + "ffn.down.bias", {d});
    layers_.push_back(l);
  }
  final_gain_ = params_.add("lm.final_norm.gain", {d});
  final_bias_ = params_.add("lm.final_norm.bias", {d});
  head_weight_ = params_.add("lm.head.weight", {V, d});
  head_bias_ = params_.add("lm.head.bias", {V});

  Rng rng(config_.seed);
  for (auto& e : params_.entries()) {
    const std::string& n = e.name;
    if (n.ends_with(".gain")) {
      e.tensor.fill(T(1));
    } else if (n.ends_with("bias")) {
      e.tensor.fill(T(0));
    } else {
      for (T& v : e.tensor.data) v = static_cast<T>(0.02 * rng.normal());
    }
  }
}

template <typename T>
void Transformer<T>::check_tokens(std::span<const TokenId> tokens, int length) const {
  if (length > config_.max_seq_len) {
    throw Error(ErrorCode::kInputShape, "sequence longer than the model context",
                "length=" + std::to_string(length) + " max=" + std::to_string(config_.max_seq_len));
  }
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw Error(ErrorCode::kTokenRange, "token id out of range",
                  "index=" + std::to_string(i) + " id=" + std::to_string(tokens[i]));
    }
  }
}

template <typename T>
Mat<T> Transformer<T>::run(std::span<const TokenId> tokens, int batch, int length, Cache* cache,
                           Output output) const {
  check_tokens(tokens, length);
  if (static_cast<int64_t>(tokens.size()) != static_cast<int64_t>(batch) * length) {
    throw Error(ErrorCode::kInputShape, "token count does not match B x T", "forward");
  }
  const int d = config_.d_model;
  const int H = config_.n_heads;
  const int hd = d / H;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const Eigen::Index R = static_cast<Eigen::Index>(batch) * length;

  Mat<T> x(R, d);
  const auto& E = params_[embed_];
  const auto& P = params_[pos_];
  for (Eigen::Index r = 0; r < R; ++r) {
    const T* e = E.ptr() + static_cast<size_t>(tokens[static_cast<size_t>(r)]) * d;
    const T* p = P.ptr() + static_cast<size_t>(r % length) * d;
    for (int c = 0; c < d; ++c) x(r, c) = e[c] + p[c];
  }
  if (cache) cache->layers.resize(layers_.size());

  for (size_t li = 0; li < layers_.size(); ++li) {
    const LayerIndex& L = layers_[li];
    typename Cache::Layer local;
    typename Cache::Layer& c = cache ? cache->layers[li] : local;
    layer_norm<T>(x, params_[L.ln1_gain].ptr(), params_[L.ln1_bias].ptr(), c.a_hat, c.rstd1, c.a);
    c.qkv.noalias() = c.a * params_[L.qkv_weight].matrix().transpose();
    add_bias(c.qkv, params_[L.qkv_bias]);
    c.att.setZero(R, d);
    if (cache) c.probs.resize(static_cast<size_t>(batch) * H);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * length;
      for (int h = 0; h < H; ++h) {
        auto q = c.qkv.block(r0, h * hd, length, hd);
        auto k = c.qkv.block(r0, d + h * hd, length, hd);
        auto v = c.qkv.block(r0, 2 * d + h * hd, length, hd);
        Mat<T> s = (q * k.transpose()) * scale;
        for (int i = 0; i < length; ++i) {
          T mx = s(i, 0);
          for (int j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
          }
          for (int j = 0; j <= i; ++j) s(i, j) /= sum;
          for (int j = i + 1; j < length; ++j) s(i, j) = 0;
        }
        c.att.block(r0, h * hd, length, hd).noalias() = s * v;
        if (cache) c.probs[static_cast<size_t>(b) * H + h] = std::move(s);
      }
    }
    Mat<T> y = c.att * params_[L.proj_weight].matrix().transpose();
    add_bias(y, params_[L.proj_bias]);
    x += y;
    layer_norm<T>(x, params_[L.ln2_gain].ptr(), params_[L.ln2_bias].ptr(), c.c_hat, c.rstd2, c.c);
    c.u.noalias() = c.c * params_[L.up_weight].matrix().transpose();
    add_bias(c.u, params_[L.up_bias]);
    c.g = c.u.unaryExpr([](T v) { return gelu(v); });
    Mat<T> f = c.g * params_[L.down_weight].matrix().transpose();
    add_bias(f, params_[L.down_bias]);
    x += f;
  }

  Mat<T> h_hat, h;
  std::vector<T> rstd;
  layer_norm<T>(x, params_[final_gain_].ptr(), params_[final_bias_].ptr(), h_hat, rstd, h);
  if (output == Output::kHidden) return h;
  Mat<T> logits;
  const auto W = params_[head_weight_].matrix();
  if (output == Output::kLastLogits) {
    logits = h.bottomRows(1) * W.transpose();
  } else {
    logits.noalias() = h * W.transpose();
  }
  add_bias(logits, params_[head_bias_]);
  if (cache) {
    cache->x_final = std::move(x);
    cache->h_hat = std::move(h_hat);
    cache->h = std::move(h);
    cache->rstd_final = std::move(rstd);
  }
  return logits;
}

template <typename T>
Mat<T> Transformer<T>::forward(std::span<const TokenId> tokens, int batch, int length) const {
  return run(tokens, batch, length, nullptr, Output::kLogits);
}

template <typename T>
Mat<T> Transformer<T>::hidden(std::span<const TokenId> tokens, int batch, int length) const {
  return run(tokens, batch, length, nullptr, Output::kHidden);
}

template <typename T>
std::vector<T> Transformer<T>::next_logits(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw Error(ErrorCode::kInputShape, "empty prefix", "next_logits");
  Mat<T> logits = run(prefix, 1, static_cast<int>(prefix.size()), nullptr, Output::kLastLogits);
  return std::vector<T>(logits.data(), logits.data() + logits.size());
}

template <typename T>
double Transformer<T>::loss_and_gradient(const Batch& batch, ParamStore<T>* grads,
                                         GradientScope scope) const {
  Cache cache;
  Mat<T> logits = run(batch.tokens, batch.batch, batch.length, grads ? &cache : nullptr, Output::kLogits);
  Mat<T> dlogits;
  const double loss = cross_entropy<T>(logits, batch.targets, batch.weights,
                                       grads ? &dlogits : nullptr);
  if (!grads) return loss;
  ParamStore<T>& G = *grads;

  G[head_weight_].matrix().noalias() += dlogits.transpose() * cache.h;
  accumulate_bias_grad(dlogits, G[head_bias_]);
  if (scope == GradientScope::kHeadOnly) return loss;

  const int d = config_.d_model;
  const int H = config_.n_heads;
  const int hd = d / H;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const int length = batch.length;

  Mat<T> dh = dlogits * params_[head_weight_].matrix();
  Mat<T> dx = layer_norm_backward<T>(dh, cache.h_hat, cache.rstd_final, params_[final_gain_].ptr(),
                                     G[final_gain_].ptr(), G[final_bias_].ptr());

  for (size_t li = layers_.size(); li-- > 0;) {
    const LayerIndex& L = layers_[li];
    const auto& c = cache.layers[li];
    // Feed-forward residual branch.
    G[L.down_weight].matrix().noalias() += dx.transpose() * c.g;
    accumulate_bias_grad(dx, G[L.down_bias]);
    Mat<T> dg = dx * params_[L.down_weight].matrix();
    Mat<T> du = dg.cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
    G[L.up_weight].matrix().noalias() += du.transpose() * c.c;
    accumulate_bias_grad(du, G[L.up_bias]);
    Mat<T> dc = du * params_[L.up_weight].matrix();
    dx += layer_norm_backward<T>(dc, c.c_hat, c.rstd2, params_[L.ln2_gain].ptr(),
                                 G[L.ln2_gain].ptr(), G[L.ln2_bias].ptr());
    // Attention residual branch.
    G[L.proj_weight].matrix().noalias() += dx.transpose() * c.att;
    accumulate_bias_grad(dx, G[L.proj_bias]);
    Mat<T> datt = dx * params_[L.proj_weight].matrix();
    Mat<T> dqkv = Mat<T>::Zero(c.qkv.rows(), c.qkv.cols());
    for (int b = 0; b < batch.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * length;
      for (int h = 0; h < H; ++h) {
        const Mat<T>& p = c.probs[static_cast<size_t>(b) * H + h];
        auto q = c.qkv.block(r0, h * hd, length, hd);
        auto k = c.qkv.block(r0, d + h * hd, length, hd);
        auto v = c.qkv.block(r0, 2 * d + h * hd, length, hd);
        auto dout = datt.block(r0, h * hd, length, hd);
        Mat<T> dp = dout * v.transpose();
        dqkv.block(r0, 2 * d + h * hd, length, hd).noalias() += p.transpose() * dout;
        Mat<T> ds(length, length);
        for (int i = 0; i < length; ++i) {
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
          for (int j = 0; j < length; ++j) {
            ds(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * scale : T(0);
          }
        }
        dqkv.block(r0, h * hd, length, hd).noalias() += ds * k;
        dqkv.block(r0, d + h * hd, length, hd).noalias() += ds.transpose() * q;
      }
    }
    G[L.qkv_weight].matrix().noalias() += dqkv.transpose() * c.a;
    accumulate_bias_grad(dqkv, G[L.qkv_bias]);
    Mat<T> da = dqkv * params_[L.qkv_weight].matrix();
    dx += layer_norm_backward<T>(da, c.a_hat, c.rstd1, params_[L.ln1_gain].ptr(),
                                 G[L.ln1_gain].ptr(), G[L.ln1_bias].ptr());
  }

  auto& dE = G[embed_];
  auto& dP = G[pos_];
  for (Eigen::Index r = 0; r < dx.rows(); ++r) {
    T* e = dE.ptr() + static_cast<size_t>(batch.tokens[static_cast<size_t>(r)]) * d;
    T* p = dP.ptr() + static_cast<size_t>(r % length) * d;
    for (int col = 0; col < d; ++col) {
      e[col] += dx(r, col);
      p[col] += dx(r, col);
    }
  }
  return loss;
}

StepResult train_step(Transformer<float>& model, Optimizer<float>& optimizer, const Batch& batch) {
  ParamStore<float> grads = model.params().zeros_like();
  const double loss = model.loss_and_gradient(batch, &grads);
  if (!std::isfinite(loss) || !grads.all_finite()) {
    throw Error(ErrorCode::kDivergence, "non-finite language-model loss",
                "learning_rate=" + std::to_string(optimizer.config().learning_rate) +
                    " step=" + std::to_string(optimizer.steps()));
  }
  optimizer.step(model.params(), grads);
  return {loss, optimizer.steps()};
}

template Mat<float> softmax_rows<float>(const Mat<float>&);
template Mat<double> softmax_rows<double>(const Mat<double>&);
template double cross_entropy<float>(const Mat<float>&, std::span<const TokenId>,
                                     std::span<const float>, Mat<float>*);
template double cross_entropy<double>(const Mat<double>&, std::span<const TokenId>,
                                      std::span<const float>, Mat<double>*);
template class Transformer<float>;
template class Transformer<double>;

}  // namespace mmgen
