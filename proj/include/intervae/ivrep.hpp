#pragma once

#include <cstdint>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// An intervention query: which value (1-based index into the corpus value
// list) is applied to which target variables.
struct InterventionQuery {
  Index value_index = 1;            // i ∈ [1, |I|]
  std::vector<std::uint8_t> targets;  // t ∈ {0,1}^d

  Index d() const { return static_cast<Index>(targets.size()); }

  Index popcount() const {
    Index n = 0;
    for (auto b : targets) n += b;
    return n;
  }
};

// Masked one-hot representation: row j is one-hot at column i-1 if t_j = 1,
// all-zero otherwise. The value index is 1-based in queries and 0-based in
// the matrix column.
template <typename Scalar>
Tensor<Scalar> encode_intervention(const InterventionQuery& q, Index num_values) {
  check(q.value_index >= 1 && q.value_index <= num_values, "intervention value index out of range");
  check(!q.targets.empty(), "intervention query needs a target vector");
  Tensor<Scalar> rep({q.d(), num_values});
  for (Index j = 0; j < q.d(); ++j)
    if (q.targets[static_cast<std::size_t>(j)]) rep.at2(j, q.value_index - 1) = Scalar(1);
  return rep;
}

inline Tensord encode_intervention(const InterventionQuery& q, Index num_values) {
  return encode_intervention<double>(q, num_values);
}

// Single-target helper: do(V_j = value i) at dimension d.
inline InterventionQuery single_target_query(Index d, Index target, Index value_index = 1) {
  check(target >= 0 && target < d, "target variable out of range");
  InterventionQuery q;
  q.value_index = value_index;
  q.targets.assign(static_cast<std::size_t>(d), 0);
  q.targets[static_cast<std::size_t>(target)] = 1;
  return q;
}

}  // namespace intervae
