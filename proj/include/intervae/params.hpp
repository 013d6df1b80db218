#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// All trainable parameters live in one flat array; named entries are
// contiguous blocks. Registration order fixes the layout, so the same model
// config always produces the same offsets — that is what makes flat gradient
// vectors, Adam state, and checkpoints line up across runs.
template <typename Scalar>
class BasicParamStore {
 public:
  struct Entry {
    std::string name;
    Index offset = 0;
    Index count = 0;
    std::vector<Index> shape;
  };

  // Reserves a zero-initialized block; returns its entry index.
  Index add(const std::string& name, std::vector<Index> shape) {
    check(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    Entry e;
    e.name = name;
    e.offset = values_.size();
    e.count = 1;
    for (Index d : shape) e.count *= d;
    e.shape = std::move(shape);
    values_.conservativeResize(e.offset + e.count);
    values_.segment(e.offset, e.count).setZero();
    index_[name] = static_cast<Index>(entries_.size());
    entries_.push_back(std::move(e));
    return static_cast<Index>(entries_.size()) - 1;
  }

  Index add(const std::string& name, const Tensor<Scalar>& init) {
    Index i = add(name, init.shape);
    values_.segment(entries_[static_cast<std::size_t>(i)].offset, init.size()) = init.data;
    return i;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter: " + name);
    return entries_[static_cast<std::size_t>(it->second)];
  }

  const std::vector<Entry>& entries() const { return entries_; }

  Tensor<Scalar> get(const std::string& name) const {
    const Entry& e = entry(name);
    Tensor<Scalar> t;
    t.shape = e.shape;
    t.data = values_.segment(e.offset, e.count);
    return t;
  }

  void set(const std::string& name, const Tensor<Scalar>& v) {
    const Entry& e = entry(name);
    check(v.size() == e.count, "parameter size mismatch for " + name);
    values_.segment(e.offset, e.count) = v.data;
  }

  Index size() const { return values_.size(); }
  const ArrayX<Scalar>& values() const { return values_; }
  ArrayX<Scalar>& values_mut() { return values_; }

  template <typename Other>
  BasicParamStore<Other> cast() const {
    BasicParamStore<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.shape);
    out.values_mut() = values_.template cast<Other>();
    return out;
  }

 private:
  ArrayX<Scalar> values_;
  std::vector<Entry> entries_;
  std::map<std::string, Index> index_;
};

using ParamStore = BasicParamStore<double>;

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); used for weights, with zero-init biases
// handled by the caller registering a plain zero block.
template <typename Scalar>
Tensor<Scalar> uniform_fan_in(std::vector<Index> shape, Index fan_in, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
  return Tensor<Scalar>::uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace intervae
