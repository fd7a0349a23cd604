#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "llbb/errors.hpp"

namespace llbb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

template <typename T>
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<T> data;

  std::size_t size() const { return data.size(); }
  bool operator==(const NamedTensor&) const = default;
};

// Ordered collection of named tensors. Order is part of the contract: it is
// the manifest order, the checkpoint order, and the reduction order.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;

  std::size_t add(std::string name, Shape shape, T fill = T(0)) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    const std::size_t n = shape_size(shape);
    index_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill)});
    return tensors_.size() - 1;
  }

  std::size_t num_tensors() const { return tensors_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  NamedTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }
  NamedTensor<T>& at(const std::string& name) { return tensors_[index_of(name)]; }
  const NamedTensor<T>& at(const std::string& name) const { return tensors_[index_of(name)]; }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& t : tensors_) out.add(t.name, t.shape);
    return out;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors_) {
      auto i = out.add(t.name, t.shape);
      for (std::size_t k = 0; k < t.size(); ++k) out[i].data[k] = static_cast<U>(t.data[k]);
    }
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), T(0));
  }

  // this += scale * other, tensor by tensor in manifest order.
  void axpy(T scale, const ParamSet& other) {
    check_same_layout(other);
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      auto& dst = tensors_[i].data;
      const auto& src = other.tensors_[i].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
    }
  }

  void scale(T s) {
    for (auto& t : tensors_)
      for (auto& v : t.data) v *= s;
  }

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& t : tensors_)
      for (auto v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
  }

  // Name of the first tensor holding a non-finite value, or empty.
  std::string first_non_finite() const {
    for (const auto& t : tensors_)
      for (auto v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return t.name;
    return {};
  }

  bool same_layout(const ParamSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name != other.tensors_[i].name || tensors_[i].shape != other.tensors_[i].shape) return false;
    }
    return true;
  }

  void check_same_layout(const ParamSet& other) const {
    if (!same_layout(other)) throw ContractError("parameter sets have different layouts");
  }

  bool operator==(const ParamSet& o) const { return tensors_ == o.tensors_; }

 private:
  std::vector<NamedTensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace llbb
