#include "mmgen/optimizer.hpp"

#include <cmath>

namespace mmgen {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw Error(ErrorCode::kConfig, "unknown optimizer", name);
}

std::string optimizer_kind_name(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

template <typename T>
void apply_update(const OptimizerConfig& config, int64_t step, std::span<T> param,
                  std::span<const T> grad, SliceState<T>& state, double grad_scale) {
  const size_t n = param.size();
  const T lr = static_cast<T>(config.learning_rate);
  const T scale = static_cast<T>(grad_scale);
  if (config.kind == OptimizerKind::kSgd) {
    if (config.momentum == 0.0) {
      for (size_t i = 0; i < n; ++i) param[i] -= lr * (scale * grad[i]);
      return;
    }
    if (state.first.size() != n) state.first.assign(n, T(0));
    const T mu = static_cast<T>(config.momentum);
    for (size_t i = 0; i < n; ++i) {
      state.first[i] = mu * state.first[i] + scale * grad[i];
      param[i] -= lr * state.first[i];
    }
    return;
  }
  if (state.first.size() != n) {
    state.first.assign(n, T(0));
    state.second.assign(n, T(0));
  }
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
  const T eps = static_cast<T>(config.epsilon);
  for (size_t i = 0; i < n; ++i) {
    const T g = scale * grad[i];
    state.first[i] = b1 * state.first[i] + (T(1) - b1) * g;
    state.second[i] = b2 * state.second[i] + (T(1) - b2) * g * g;
    const T m_hat = state.first[i] / c1;
    const T v_hat = state.second[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <typename T>
double global_grad_norm(const ParamStore<T>& grads) {
  double sum = 0.0;
  for (const auto& e : grads.entries()) {
    for (T g : e.tensor.data) sum += static_cast<double>(g) * g;
  }
  return std::sqrt(sum);
}

template <typename T>
void Optimizer<T>::step(ParamStore<T>& params, const ParamStore<T>& grads) {
  ++step_;
  if (state_.size() != params.size()) state_.resize(params.size());
  double scale = 1.0;
  if (config_.grad_clip > 0.0) {
    double norm = global_grad_norm(grads);
    if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[static_cast<int>(i)];
    const auto& g = grads[static_cast<int>(i)];
    apply_update<T>(config_, step_, std::span<T>(p.data), std::span<const T>(g.data),
                    state_[i], scale);
  }
}

template void apply_update<float>(const OptimizerConfig&, int64_t, std::span<float>,
                                  std::span<const float>, SliceState<float>&, double);
template void apply_update<double>(const OptimizerConfig&, int64_t, std::span<double>,
                                   std::span<const double>, SliceState<double>&, double);
template double global_grad_norm<float>(const ParamStore<float>&);
template double global_grad_norm<double>(const ParamStore<double>&);
template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace mmgen
