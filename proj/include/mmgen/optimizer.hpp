#pragma once

#include "mmgen/param_store.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmgen {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.1;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
};

// Per-element update state for one contiguous slice of a parameter tensor.
// SGD: v = momentum*v + g; p -= lr*v.  Adam: bias-corrected first/second
// moments.
template <typename T>
struct SliceState {
  std::vector<T> first;
  std::vector<T> second;
};

template <typename T>
void apply_update(const OptimizerConfig& config, int64_t step, std::span<T> param,
                  std::span<const T> grad, SliceState<T>& state, double grad_scale);

// Dense optimizer over every tensor in a store. State is created lazily on
// the first step.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  OptimizerConfig& config() { return config_; }
  int64_t steps() const { return step_; }

  void step(ParamStore<T>& params, const ParamStore<T>& grads);

 private:
  OptimizerConfig config_;
  int64_t step_ = 0;
  std::vector<SliceState<T>> state_;
};

template <typename T>
double global_grad_norm(const ParamStore<T>& grads);

}  // namespace mmgen
