#pragma once

#include "mmgen/error.hpp"
#include "mmgen/tensor.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace mmgen {

// Ordered collection of named tensors. Models register their parameters at
// construction; gradients and optimizer state use stores of identical layout.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  int add(std::string name, Shape shape) {
    entries_.push_back({std::move(name), Tensor<T>(std::move(shape))});
    return static_cast<int>(entries_.size() - 1);
  }

  size_t size() const { return entries_.size(); }
  Tensor<T>& operator[](int i) { return entries_[static_cast<size_t>(i)].tensor; }
  const Tensor<T>& operator[](int i) const {
    return entries_[static_cast<size_t>(i)].tensor;
  }
  const std::string& name(int i) const { return entries_[static_cast<size_t>(i)].name; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }

  Tensor<T>& at(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw Error(ErrorCode::kSectionMissing, "no tensor named " + name, name);
    return (*this)[i];
  }
  const Tensor<T>& at(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw Error(ErrorCode::kSectionMissing, "no tensor named " + name, name);
    return (*this)[i];
  }

  // Same names and shapes, zero-filled.
  ParamStore zeros_like() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.shape);
    return out;
  }

  void zero() {
    for (auto& e : entries_) e.tensor.fill(T(0));
  }

  int64_t total_numel() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& e : entries_) {
      for (T v : e.tensor.data) {
        if (!std::isfinite(static_cast<double>(v))) return false;
      }
    }
    return true;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      int i = out.add(e.name, e.tensor.shape);
      out[i] = e.tensor.template cast<U>();
    }
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name ||
          !(a.entries_[i].tensor == b.entries_[i].tensor)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace mmgen
