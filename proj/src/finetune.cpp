#include "mmgen/finetune.hpp"

#include "mmgen/batching.hpp"
#include "mmgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mmgen {

int64_t TrainableMask::count() const {
  return std::count(rows.begin(), rows.end(), true);
}

std::vector<int> TrainableMask::row_ids() const {
  std::vector<int> out;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

TrainableMask build_mask(const VocabLayout& layout, bool include_sentinel_rows) {
  TrainableMask mask;
  mask.rows.assign(static_cast<size_t>(layout.total_size()), false);
  for (int i = 0; i < layout.image_size; ++i) {
    mask.rows[static_cast<size_t>(layout.text_size + i)] = true;
  }
  if (include_sentinel_rows) {
    mask.rows[static_cast<size_t>(layout.boi())] = true;
    mask.rows[static_cast<size_t>(layout.eoi())] = true;
  }
  return mask;
}

TrainableCount count_trainable(int64_t image_rows, int64_t d_model) {
  return {image_rows * d_model, image_rows};
}

TrainableCount count_trainable(const VocabLayout& layout, const ModelConfig& model) {
  return count_trainable(layout.image_size, model.d_model);
}

TrainableCount count_trainable(const TrainableMask& mask, const ModelConfig& model) {
  return count_trainable(mask.count(), model.d_model);
}

SelectiveHeadOptimizer::SelectiveHeadOptimizer(OptimizerConfig config, TrainableMask mask)
    : config_(config), mask_(std::move(mask)), rows_(mask_.row_ids()) {}

void SelectiveHeadOptimizer::step(Transformer<float>& model, const ParamStore<float>& grads) {
  auto& params = model.params();
  const int wi = model.head_weight_index();
  const int bi = model.head_bias_index();
  auto& W = params[wi];
  auto& b = params[bi];
  if (static_cast<int64_t>(mask_.rows.size()) != W.dim(0)) {
    throw Error(ErrorCode::kLayoutMismatch, "trainable mask does not match the output head",
                "mask=" + std::to_string(mask_.rows.size()) + " head=" + std::to_string(W.dim(0)));
  }
  ++step_;
  const auto& gW = grads[wi];
  const auto& gb = grads[bi];
  const int64_t d = W.dim(1);
  double scale = 1.0;
  if (config_.grad_clip > 0.0) {
    double sum = 0.0;
    for (int r : rows_) {
      for (int64_t c = 0; c < d; ++c) {
        double g = gW.data[static_cast<size_t>(r * d + c)];
        sum += g * g;
      }
      sum += static_cast<double>(gb.data[static_cast<size_t>(r)]) * gb.data[static_cast<size_t>(r)];
    }
    const double norm = std::sqrt(sum);
    if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
  }
  weight_state_.resize(rows_.size());
  bias_state_.resize(rows_.size());
  for (size_t i = 0; i < rows_.size(); ++i) {
    const size_t r = static_cast<size_t>(rows_[i]);
    apply_update<float>(config_, step_, std::span<float>(W.ptr() + r * d, static_cast<size_t>(d)),
                        std::span<const float>(gW.ptr() + r * d, static_cast<size_t>(d)),
                        weight_state_[i], scale);
    apply_update<float>(config_, step_, std::span<float>(b.ptr() + r, 1),
                        std::span<const float>(gb.ptr() + r, 1), bias_state_[i], scale);
  }
}

double finetune_step(Transformer<float>& model, SelectiveHeadOptimizer& optimizer,
                     const Batch& batch) {
  if (static_cast<int>(optimizer.mask().rows.size()) != model.config().vocab_size) {
    throw Error(ErrorCode::kLayoutMismatch, "trainable mask built for a different vocabulary",
                "mask=" + std::to_string(optimizer.mask().rows.size()) +
                    " vocab=" + std::to_string(model.config().vocab_size));
  }
  ParamStore<float> grads = model.params().zeros_like();
  const double loss = model.loss_and_gradient(batch, &grads, GradientScope::kHeadOnly);
  if (!std::isfinite(loss) || !grads.all_finite()) {
    throw Error(ErrorCode::kDivergence, "non-finite fine-tuning loss",
                "learning_rate=" + std::to_string(optimizer.config().learning_rate) +
                    " step=" + std::to_string(optimizer.steps()));
  }
  optimizer.step(model, grads);
  return loss;
}

double FinetuneReport::max_frozen_drift() const {
  double m = 0.0;
  for (const auto& [name, drift] : frozen_drift) m = std::max(m, drift);
  return m;
}

std::string FinetuneReport::to_text() const {
  std::ostringstream out;
  out.precision(9);
  out << "trainable_parameters: " << trainable.total() << "\n";
  out << "trainable_weight_parameters: " << trainable.weight << "\n";
  out << "trainable_bias_parameters: " << trainable.bias << "\n";
  out << "steps: " << steps << "\n";
  out << "initial_loss: " << initial_loss << "\n";
  out << "final_loss: " << final_loss << "\n";
  out << "max_frozen_drift: " << max_frozen_drift() << "\n";
  for (const auto& [name, drift] : frozen_drift) out << "drift." << name << ": " << drift << "\n";
  out << "status: " << (error ? "stopped" : "ok") << "\n";
  if (error) out << "error: " << *error << "\n";
  return out.str();
}

std::vector<std::pair<std::string, double>> frozen_drift(const Transformer<float>& before,
                                                         const Transformer<float>& after,
                                                         const TrainableMask& mask) {
  std::vector<std::pair<std::string, double>> out;
  const auto& a = before.params();
  const auto& b = after.params();
  const int wi = after.head_weight_index();
  const int bi = after.head_bias_index();
  for (size_t i = 0; i < a.size(); ++i) {
    const int idx = static_cast<int>(i);
    const auto& ta = a[idx];
    const auto& tb = b[idx];
    const bool head = idx == wi || idx == bi;
    const int64_t row_len = idx == wi ? ta.dim(1) : 1;
    double m = 0.0;
    for (int64_t k = 0; k < ta.numel(); ++k) {
      if (head && mask.rows[static_cast<size_t>(k / row_len)]) continue;
      m = std::max(m, std::abs(static_cast<double>(ta.data[static_cast<size_t>(k)]) -
                               tb.data[static_cast<size_t>(k)]));
    }
    out.emplace_back(head ? a.name(idx) + "[frozen_rows]" : a.name(idx), m);
  }
  return out;
}

float finetune_loss_weight(const VocabLayout& layout, TokenId target) {
  return layout.is_image(target) || target == layout.boi() || target == layout.eoi() ? 1.0f
                                                                                      : 0.0f;
}

HeadFeatures head_features(const Transformer<float>& model, const VocabLayout& layout,
                           const std::vector<TokenSequence>& dataset) {
  HeadFeatures f;
  const int d = model.config().d_model;
  std::vector<float> rows;
  f.offsets.push_back(0);
  constexpr size_t kChunk = 32;
  auto weight = [&](TokenId t) { return finetune_loss_weight(layout, t); };
  for (size_t begin = 0; begin < dataset.size(); begin += kChunk) {
    const size_t end = std::min(dataset.size(), begin + kChunk);
    const Batch b = Batch::from_sequences(
        std::span<const TokenSequence>(dataset.data() + begin, end - begin), layout.pad(), weight);
    const Mat<float> h = model.hidden(b.tokens, b.batch, b.length);
    for (int i = 0; i < b.batch; ++i) {
      for (int t = 0; t < b.length; ++t) {
        const size_t cell = static_cast<size_t>(i) * b.length + t;
        if (b.weights[cell] == 0.0f) continue;
        rows.insert(rows.end(), h.row(static_cast<Eigen::Index>(cell)).data(),
                    h.row(static_cast<Eigen::Index>(cell)).data() + d);
        f.targets.push_back(b.targets[cell]);
        f.weights.push_back(b.weights[cell]);
      }
      f.offsets.push_back(f.targets.size());
    }
  }
  f.hidden = Eigen::Map<Mat<float>>(rows.data(), static_cast<Eigen::Index>(f.targets.size()), d);
  return f;
}

double finetune_step(Transformer<float>& model, SelectiveHeadOptimizer& optimizer,
                     const HeadFeatures& features, std::span<const size_t> sequence_ids) {
  const int d = model.config().d_model;
  size_t n = 0;
  for (size_t s : sequence_ids) n += features.offsets[s + 1] - features.offsets[s];
  if (n == 0) throw Error(ErrorCode::kEmptyLoss, "batch has no fine-tuning targets", "finetune_step");
  Mat<float> H(static_cast<Eigen::Index>(n), d);
  std::vector<TokenId> targets;
  std::vector<float> weights;
  targets.reserve(n);
  weights.reserve(n);
  Eigen::Index r = 0;
  for (size_t s : sequence_ids) {
    const auto lo = static_cast<Eigen::Index>(features.offsets[s]);
    const auto len = static_cast<Eigen::Index>(features.offsets[s + 1]) - lo;
    H.middleRows(r, len) = features.hidden.middleRows(lo, len);
    targets.insert(targets.end(), features.targets.begin() + lo, features.targets.begin() + lo + len);
    weights.insert(weights.end(), features.weights.begin() + lo, features.weights.begin() + lo + len);
    r += len;
  }
  auto& params = model.params();
  const int wi = model.head_weight_index();
  const int bi = model.head_bias_index();
  Mat<float> logits = H * params[wi].matrix().transpose();
  logits.rowwise() += ConstMatMap<float>(params[bi].ptr(), 1, params[bi].numel()).row(0);
  Mat<float> dlogits;
  const double loss = cross_entropy<float>(logits, targets, weights, &dlogits);
  ParamStore<float> grads = params.zeros_like();
  grads[wi].matrix().noalias() = dlogits.transpose() * H;
  add_column_sums(dlogits, grads[bi].ptr());
  if (!std::isfinite(loss) || !grads.all_finite()) {
    throw Error(ErrorCode::kDivergence, "non-finite fine-tuning loss",
                "learning_rate=" + std::to_string(optimizer.config().learning_rate) +
                    " step=" + std::to_string(optimizer.steps()));
  }
  optimizer.step(model, grads);
  return loss;
}

FinetuneReport finetune_run(const std::vector<TokenSequence>& dataset, Transformer<float>& model,
                            const VocabLayout& layout, const FinetuneConfig& config) {
  if (model.config().vocab_size != layout.total_size()) {
    throw Error(ErrorCode::kLayoutMismatch, "model vocabulary does not match layout",
                std::to_string(model.config().vocab_size) + " vs " +
                    std::to_string(layout.total_size()));
  }
  const Transformer<float> snapshot = model;
  TrainableMask mask = build_mask(layout, config.train_sentinel_rows);
  FinetuneReport report;
  report.trainable = count_trainable(mask, model.config());
  SelectiveHeadOptimizer optimizer(config.optimizer, mask);
  try {
    const HeadFeatures features = head_features(model, layout, dataset);
    const size_t batch = static_cast<size_t>(config.batch_size);
    bool first = true;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const auto order = shuffled_order(features.sequences(), config.seed + epoch);
      for (size_t begin = 0; begin < order.size(); begin += batch) {
        if (config.max_steps > 0 && report.steps >= config.max_steps) break;
        std::span<const size_t> ids(order.data() + begin, std::min(batch, order.size() - begin));
        size_t rows = 0;
        for (size_t s : ids) rows += features.offsets[s + 1] - features.offsets[s];
        if (rows == 0) continue;
        const double loss = finetune_step(model, optimizer, features, ids);
        if (first) {
          report.initial_loss = loss;
          first = false;
        }
        report.final_loss = loss;
        ++report.steps;
      }
    }
  } catch (const Error& e) {
    report.error = e.one_line();
  }
  report.frozen_drift = frozen_drift(snapshot, model, mask);
  return report;
}

void write_report(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write report", path.string());
  out << text;
}

}  // namespace mmgen
