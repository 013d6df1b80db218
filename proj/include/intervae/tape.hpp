#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "intervae/common.hpp"
#include "intervae/params.hpp"
#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

namespace intervae {

// Reverse-mode tape. Ops append nodes in topological order; backward() walks
// the tape once in reverse. Values live on the tape, so backprop closures only
// capture node ids (plus forward-pass caches such as dropout masks).
//
// Gradients are pulled lazily: a node's grad buffer is allocated the first
// time something downstream writes into it, and constants are skipped
// entirely, so data-sized leaves never cost a backward pass.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    Tensor<Scalar> value;
    bool requires_grad = false;
    Index param_offset = -1;  // >= 0 when the leaf mirrors a ParamStore block
    std::function<void(Tape&)> backprop;
  };

  int add(Tensor<Scalar> value, bool requires_grad, std::function<void(Tape&)> backprop = {}) {
    nodes_.push_back(Node{std::move(value), requires_grad, -1, std::move(backprop)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  Tensor<Scalar>& grad(int id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0) g = Tensor<Scalar>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
    return g;
  }
  bool has_grad(int id) const { return grads_[static_cast<std::size_t>(id)].size() != 0; }

  void set_param_offset(int id, Index offset) { nodes_[static_cast<std::size_t>(id)].param_offset = offset; }

  // Seeds d(root)/d(root) = 1 and propagates to every leaf that wants a grad.
  void backward(int root) {
    check(value(root).size() == 1, "backward: root must be scalar");
    grad(root).data.setConstant(Scalar(1));
    run_backward(root);
  }

  // Starts the reverse sweep from externally supplied output gradients
  // (used when a downstream tape hands gradients back to this one).
  void backward_seeded(const std::vector<std::pair<int, Tensor<Scalar>>>& seeds) {
    int top = -1;
    for (const auto& [id, g] : seeds) {
      check(g.same_shape(value(id)), "backward_seeded: seed shape mismatch");
      grad(id).data += g.data;
      top = std::max(top, id);
    }
    run_backward(top);
  }

  // Flat parameter gradient in ParamStore layout. Untouched parameters stay 0.
  ArrayX<Scalar> param_grads(Index store_size) const {
    ArrayX<Scalar> out = ArrayX<Scalar>::Zero(store_size);
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const auto& node = nodes_[id];
      if (node.param_offset < 0 || grads_[id].size() == 0) continue;
      out.segment(node.param_offset, grads_[id].size()) += grads_[id].data;
    }
    return out;
  }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  void run_backward(int top) {
    for (int id = top; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (!node.requires_grad || !has_grad(id) || !node.backprop) continue;
      node.backprop(*this);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<Scalar>> grads_;
};

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  const std::vector<Index>& shape() const { return value().shape; }
  Scalar scalar() const { return value().value(); }
};

using Vard = Var<double>;

template <typename Scalar>
Var<Scalar> constant(Tape<Scalar>& t, Tensor<Scalar> v) {
  return {&t, t.add(std::move(v), false)};
}

// Grad-tracked leaf that is not a model parameter (e.g. a value bridged in
// from another tape).
template <typename Scalar>
Var<Scalar> input(Tape<Scalar>& t, Tensor<Scalar> v) {
  return {&t, t.add(std::move(v), true)};
}

template <typename Scalar>
Var<Scalar> param(Tape<Scalar>& t, const BasicParamStore<Scalar>& store, const std::string& name) {
  const auto& e = store.entry(name);
  Tensor<Scalar> v;
  v.shape = e.shape;
  v.data = store.values().segment(e.offset, e.count);
  int id = t.add(std::move(v), true);
  t.set_param_offset(id, e.offset);
  return {&t, id};
}

namespace detail {

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vs) {
  for (const auto& v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<Scalar> out = a.value();
  out.data += b.value().data;
  int id = t.add(std::move(out), detail::any_grad({a, b}), [a, b, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    if (t.requires_grad(a.id)) t.grad(a.id).data += g;
    if (t.requires_grad(b.id)) t.grad(b.id).data += g;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<Scalar> out = a.value();
  out.data -= b.value().data;
  int id = t.add(std::move(out), detail::any_grad({a, b}), [a, b, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    if (t.requires_grad(a.id)) t.grad(a.id).data += g;
    if (t.requires_grad(b.id)) t.grad(b.id).data -= g;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<Scalar> out = a.value();
  out.data *= b.value().data;
  int id = t.add(std::move(out), detail::any_grad({a, b}), [a, b, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    if (t.requires_grad(a.id)) t.grad(a.id).data += g * t.value(b.id).data;
    if (t.requires_grad(b.id)) t.grad(b.id).data += g * t.value(a.id).data;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> scalar_mul(Var<Scalar> a, Scalar c) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value();
  out.data *= c;
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, c, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += c * t.grad(self).data;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Scalar c) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value();
  out.data += c;
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += t.grad(self).data;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> neg(Var<Scalar> a) {
  return scalar_mul(a, Scalar(-1));
}

template <typename Scalar>
Var<Scalar> vexp(Var<Scalar> a) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value();
  out.data = out.data.exp();
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += t.grad(self).data * t.value(self).data;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> vlog(Var<Scalar> a) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value();
  out.data = out.data.log();
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += t.grad(self).data / t.value(a.id).data;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> a) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value();
  out.data = out.data.square();
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += Scalar(2) * t.grad(self).data * t.value(a.id).data;
  });
  return {&t, id};
}

// Exact GELU, x * Phi(x); smooth, so finite-difference checks stay clean.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  auto& t = *a.tape;
  constexpr Scalar inv_sqrt2 = Scalar(0.7071067811865475244);
  constexpr Scalar inv_sqrt2pi = Scalar(0.3989422804014326779);
  Tensor<Scalar> out = a.value();
  const auto& x = a.value().data;
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar cdf = Scalar(0.5) * std::erfc(-x[i] * inv_sqrt2);
    out.data[i] = x[i] * cdf;
  }
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(a.id)) return;
    const auto& x = t.value(a.id).data;
    const auto& g = t.grad(self).data;
    auto& ga = t.grad(a.id).data;
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar cdf = Scalar(0.5) * std::erfc(-x[i] * inv_sqrt2);
      const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, std::vector<Index> shape) {
  auto& t = *a.tape;
  Tensor<Scalar> out = a.value().reshaped(shape);
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += t.grad(self).data;
  });
  return {&t, id};
}

// Swap the first two axes of a rank-2 or rank-3 tensor.
template <typename Scalar>
Var<Scalar> transpose01(Var<Scalar> a) {
  auto& t = *a.tape;
  const auto& v = a.value();
  check(v.rank() == 2 || v.rank() == 3, "transpose01: rank must be 2 or 3");
  const Index d0 = v.dim(0), d1 = v.dim(1);
  const Index inner = v.rank() == 3 ? v.dim(2) : 1;
  Tensor<Scalar> out(v.rank() == 3 ? std::vector<Index>{d1, d0, inner} : std::vector<Index>{d1, d0});
  for (Index i = 0; i < d0; ++i)
    for (Index j = 0; j < d1; ++j)
      out.data.segment((j * d0 + i) * inner, inner) = v.data.segment((i * d1 + j) * inner, inner);
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, d0, d1, inner, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self).data;
    auto& ga = t.grad(a.id).data;
    for (Index i = 0; i < d0; ++i)
      for (Index j = 0; j < d1; ++j)
        ga.segment((i * d1 + j) * inner, inner) += g.segment((j * d0 + i) * inner, inner);
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> concat_last(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  const auto& va = a.value();
  const auto& vb = b.value();
  check(va.rows_flat() == vb.rows_flat(), "concat_last: leading dims mismatch");
  const Index rows = va.rows_flat(), pa = va.last_dim(), pb = vb.last_dim();
  std::vector<Index> shape = va.shape;
  shape.back() = pa + pb;
  Tensor<Scalar> out(shape);
  for (Index r = 0; r < rows; ++r) {
    out.data.segment(r * (pa + pb), pa) = va.data.segment(r * pa, pa);
    out.data.segment(r * (pa + pb) + pa, pb) = vb.data.segment(r * pb, pb);
  }
  int id = t.add(std::move(out), detail::any_grad({a, b}), [a, b, rows, pa, pb, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    for (Index r = 0; r < rows; ++r) {
      if (t.requires_grad(a.id)) t.grad(a.id).data.segment(r * pa, pa) += g.segment(r * (pa + pb), pa);
      if (t.requires_grad(b.id)) t.grad(b.id).data.segment(r * pb, pb) += g.segment(r * (pa + pb) + pa, pb);
    }
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> slice_last(Var<Scalar> a, Index start, Index len) {
  auto& t = *a.tape;
  const auto& v = a.value();
  const Index rows = v.rows_flat(), p = v.last_dim();
  check(start >= 0 && start + len <= p, "slice_last: out of range");
  std::vector<Index> shape = v.shape;
  shape.back() = len;
  Tensor<Scalar> out(shape);
  for (Index r = 0; r < rows; ++r) out.data.segment(r * len, len) = v.data.segment(r * p + start, len);
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, rows, p, start, len, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self).data;
    auto& ga = t.grad(a.id).data;
    for (Index r = 0; r < rows; ++r) ga.segment(r * p + start, len) += g.segment(r * len, len);
  });
  return {&t, id};
}

// Tile a tensor n times along a new leading axis: [shape...] -> [n, shape...].
template <typename Scalar>
Var<Scalar> tile_rows(Var<Scalar> a, Index n) {
  auto& t = *a.tape;
  check(n >= 1, "tile_rows: need n >= 1");
  const auto& v = a.value();
  const Index block = v.size();
  std::vector<Index> shape;
  shape.push_back(n);
  shape.insert(shape.end(), v.shape.begin(), v.shape.end());
  Tensor<Scalar> out(shape);
  for (Index i = 0; i < n; ++i) out.data.segment(i * block, block) = v.data;
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, n, block, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self).data;
    auto& ga = t.grad(a.id).data;
    for (Index i = 0; i < n; ++i) ga += g.segment(i * block, block);
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> stack_scalars(Tape<Scalar>& t, const std::vector<Var<Scalar>>& vs) {
  check(!vs.empty(), "stack_scalars: empty");
  Tensor<Scalar> out({static_cast<Index>(vs.size())});
  bool rg = false;
  for (std::size_t k = 0; k < vs.size(); ++k) {
    check(vs[k].value().size() == 1, "stack_scalars: non-scalar element");
    out.data[static_cast<Index>(k)] = vs[k].scalar();
    rg = rg || t.requires_grad(vs[k].id);
  }
  int id = t.add(std::move(out), rg, [vs, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    for (std::size_t k = 0; k < vs.size(); ++k)
      if (t.requires_grad(vs[k].id)) t.grad(vs[k].id).data[0] += g[static_cast<Index>(k)];
  });
  return {&t, id};
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// Mean over the first axis: [r, rest...] -> [rest...].
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  auto& t = *a.tape;
  const auto& v = a.value();
  check(v.rank() >= 2, "mean_rows: rank must be >= 2");
  const Index r = v.dim(0);
  const Index rest = v.size() / r;
  Tensor<Scalar> out(std::vector<Index>(v.shape.begin() + 1, v.shape.end()));
  for (Index i = 0; i < r; ++i) out.data += v.data.segment(i * rest, rest);
  out.data /= Scalar(r);
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, r, rest, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(a.id)) return;
    const auto& g = t.grad(self).data;
    auto& ga = t.grad(a.id).data;
    for (Index i = 0; i < r; ++i) ga.segment(i * rest, rest) += g / Scalar(r);
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> sum_all(Var<Scalar> a) {
  auto& t = *a.tape;
  Tensor<Scalar> out = Tensor<Scalar>::scalar(a.value().data.sum());
  int id = t.add(std::move(out), t.requires_grad(a.id), [a, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(a.id)) t.grad(a.id).data += t.grad(self).data[0];
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> mean_all(Var<Scalar> a) {
  const Index n = a.value().size();
  return scalar_mul(sum_all(a), Scalar(1) / Scalar(n));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// y[..., out] = x[..., in] * W[in, out] + b[out]
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> W, Var<Scalar> b) {
  auto& t = *x.tape;
  const auto& vx = x.value();
  const auto& vw = W.value();
  const auto& vb = b.value();
  check(vw.rank() == 2 && vx.last_dim() == vw.dim(0), "linear: weight shape mismatch");
  check(vb.rank() == 1 && vb.dim(0) == vw.dim(1), "linear: bias shape mismatch");
  const Index rows = vx.rows_flat(), in = vw.dim(0), out_dim = vw.dim(1);
  std::vector<Index> shape = vx.shape;
  shape.back() = out_dim;
  Tensor<Scalar> out(shape);
  out.matrix(rows, out_dim).noalias() = vx.matrix(rows, in) * vw.matrix(in, out_dim);
  out.matrix(rows, out_dim).rowwise() += vb.data.matrix().transpose();
  int id = t.add(std::move(out), detail::any_grad({x, W, b}),
                 [x, W, b, rows, in, out_dim, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto g = t.grad(self).matrix(rows, out_dim);
    if (t.requires_grad(x.id))
      t.grad(x.id).matrix(rows, in).noalias() += g * t.value(W.id).matrix(in, out_dim).transpose();
    if (t.requires_grad(W.id))
      t.grad(W.id).matrix(in, out_dim).noalias() += t.value(x.id).matrix(rows, in).transpose() * g;
    if (t.requires_grad(b.id)) t.grad(b.id).data.matrix() += g.colwise().sum().transpose();
  });
  return {&t, id};
}

// Batched matmul over the leading axis: C[i] = A[i] * op(B[i]), rank-3 inputs.
template <typename Scalar>
Var<Scalar> bmm(Var<Scalar> a, Var<Scalar> b, bool transpose_b = false) {
  auto& t = *a.tape;
  const auto& va = a.value();
  const auto& vb = b.value();
  check(va.rank() == 3 && vb.rank() == 3 && va.dim(0) == vb.dim(0), "bmm: rank-3 with equal batch required");
  const Index B = va.dim(0), n = va.dim(1), k = va.dim(2);
  const Index m = transpose_b ? vb.dim(1) : vb.dim(2);
  check(transpose_b ? vb.dim(2) == k : vb.dim(1) == k, "bmm: inner dim mismatch");
  Tensor<Scalar> out({B, n, m});
  for (Index i = 0; i < B; ++i) {
    if (transpose_b)
      out.slab(i).noalias() = va.slab(i) * vb.slab(i).transpose();
    else
      out.slab(i).noalias() = va.slab(i) * vb.slab(i);
  }
  int id = t.add(std::move(out), detail::any_grad({a, b}),
                 [a, b, B, transpose_b, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self);
    const auto& va = t.value(a.id);
    const auto& vb = t.value(b.id);
    for (Index i = 0; i < B; ++i) {
      if (t.requires_grad(a.id)) {
        if (transpose_b)
          t.grad(a.id).slab(i).noalias() += g.slab(i) * vb.slab(i);
        else
          t.grad(a.id).slab(i).noalias() += g.slab(i) * vb.slab(i).transpose();
      }
      if (t.requires_grad(b.id)) {
        if (transpose_b)
          t.grad(b.id).slab(i).noalias() += g.slab(i).transpose() * va.slab(i);
        else
          t.grad(b.id).slab(i).noalias() += va.slab(i).transpose() * g.slab(i);
      }
    }
  });
  return {&t, id};
}

// [B, n, e] -> [B*h, n, e/h]: head hh of batch b lands in slab b*h + hh.
template <typename Scalar>
Var<Scalar> split_heads(Var<Scalar> x, Index h) {
  auto& t = *x.tape;
  const auto& v = x.value();
  check(v.rank() == 3 && v.dim(2) % h == 0, "split_heads: embed dim not divisible by heads");
  const Index B = v.dim(0), n = v.dim(1), e = v.dim(2), k = e / h;
  Tensor<Scalar> out({B * h, n, k});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < n; ++i)
      for (Index hh = 0; hh < h; ++hh)
        out.data.segment(((b * h + hh) * n + i) * k, k) = v.data.segment((b * n + i) * e + hh * k, k);
  int id = t.add(std::move(out), t.requires_grad(x.id), [x, B, n, e, k, h, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(x.id)) return;
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(x.id).data;
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < n; ++i)
        for (Index hh = 0; hh < h; ++hh)
          gx.segment((b * n + i) * e + hh * k, k) += g.segment(((b * h + hh) * n + i) * k, k);
  });
  return {&t, id};
}

// Inverse of split_heads: [B*h, n, k] -> [B, n, h*k].
template <typename Scalar>
Var<Scalar> merge_heads(Var<Scalar> x, Index h) {
  auto& t = *x.tape;
  const auto& v = x.value();
  check(v.rank() == 3 && v.dim(0) % h == 0, "merge_heads: batch not divisible by heads");
  const Index B = v.dim(0) / h, n = v.dim(1), k = v.dim(2), e = h * k;
  Tensor<Scalar> out({B, n, e});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < n; ++i)
      for (Index hh = 0; hh < h; ++hh)
        out.data.segment((b * n + i) * e + hh * k, k) = v.data.segment(((b * h + hh) * n + i) * k, k);
  int id = t.add(std::move(out), t.requires_grad(x.id), [x, B, n, e, k, h, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(x.id)) return;
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(x.id).data;
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < n; ++i)
        for (Index hh = 0; hh < h; ++hh)
          gx.segment(((b * h + hh) * n + i) * k, k) += g.segment((b * n + i) * e + hh * k, k);
  });
  return {&t, id};
}

// ---------------------------------------------------------------------------
// nonlinear rows
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> softmax_last(Var<Scalar> x) {
  auto& t = *x.tape;
  const auto& v = x.value();
  const Index rows = v.rows_flat(), p = v.last_dim();
  Tensor<Scalar> out(v.shape);
  for (Index r = 0; r < rows; ++r) {
    auto row = v.data.segment(r * p, p);
    const Scalar mx = row.maxCoeff();
    ArrayX<Scalar> e = (row - mx).exp();
    out.data.segment(r * p, p) = e / e.sum();
  }
  int id = t.add(std::move(out), t.requires_grad(x.id), [x, rows, p, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(x.id)) return;
    const auto& y = t.value(self).data;
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(x.id).data;
    for (Index r = 0; r < rows; ++r) {
      auto yr = y.segment(r * p, p);
      auto gr = g.segment(r * p, p);
      const Scalar dot = (yr * gr).sum();
      gx.segment(r * p, p) += yr * (gr - dot);
    }
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> log_softmax_last(Var<Scalar> x) {
  auto& t = *x.tape;
  const auto& v = x.value();
  const Index rows = v.rows_flat(), p = v.last_dim();
  Tensor<Scalar> out(v.shape);
  for (Index r = 0; r < rows; ++r) {
    auto row = v.data.segment(r * p, p);
    const Scalar mx = row.maxCoeff();
    const Scalar lse = mx + std::log((row - mx).exp().sum());
    out.data.segment(r * p, p) = row - lse;
  }
  int id = t.add(std::move(out), t.requires_grad(x.id), [x, rows, p, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(x.id)) return;
    const auto& y = t.value(self).data;
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(x.id).data;
    for (Index r = 0; r < rows; ++r) {
      auto gr = g.segment(r * p, p);
      const Scalar gsum = gr.sum();
      gx.segment(r * p, p) += gr - y.segment(r * p, p).exp() * gsum;
    }
  });
  return {&t, id};
}

// Log-sum-exp over the last axis; drops that axis (scalar for rank-1 input).
template <typename Scalar>
Var<Scalar> logsumexp_last(Var<Scalar> x) {
  auto& t = *x.tape;
  const auto& v = x.value();
  const Index rows = v.rows_flat(), p = v.last_dim();
  std::vector<Index> shape(v.shape.begin(), v.shape.end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<Scalar> out(shape);
  for (Index r = 0; r < rows; ++r) {
    auto row = v.data.segment(r * p, p);
    const Scalar mx = row.maxCoeff();
    out.data[r] = mx + std::log((row - mx).exp().sum());
  }
  int id = t.add(std::move(out), t.requires_grad(x.id), [x, rows, p, self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (!t.requires_grad(x.id)) return;
    const auto& y = t.value(self).data;
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(x.id).data;
    for (Index r = 0; r < rows; ++r)
      gx.segment(r * p, p) += g[r] * (t.value(x.id).data.segment(r * p, p) - y[r]).exp();
  });
  return {&t, id};
}

// Normalizes each last-axis row to mean 0, variance 1, then applies the
// affine (gamma, beta).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps = Scalar(1e-5)) {
  auto& t = *x.tape;
  const auto& v = x.value();
  const Index rows = v.rows_flat(), p = v.last_dim();
  check(gamma.value().size() == p && beta.value().size() == p, "layer_norm: affine shape mismatch");
  Tensor<Scalar> out(v.shape);
  Tensor<Scalar> xhat(v.shape);            // cached for backward
  ArrayX<Scalar> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    auto row = v.data.segment(r * p, p);
    const Scalar mu = row.mean();
    const Scalar var = (row - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.data.segment(r * p, p) = (row - mu) * inv_std[r];
    out.data.segment(r * p, p) = xhat.data.segment(r * p, p) * gamma.value().data + beta.value().data;
  }
  int id = t.add(std::move(out), detail::any_grad({x, gamma, beta}),
                 [x, gamma, beta, rows, p, xhat = std::move(xhat), inv_std = std::move(inv_std),
                  self = int(t.num_nodes())](Tape<Scalar>& t) {
    const auto& g = t.grad(self).data;
    for (Index r = 0; r < rows; ++r) {
      auto gr = g.segment(r * p, p);
      auto xh = xhat.data.segment(r * p, p);
      if (t.requires_grad(gamma.id)) t.grad(gamma.id).data += gr * xh;
      if (t.requires_grad(beta.id)) t.grad(beta.id).data += gr;
      if (t.requires_grad(x.id)) {
        ArrayX<Scalar> gxh = gr * t.value(gamma.id).data;
        const Scalar m1 = gxh.mean();
        const Scalar m2 = (gxh * xh).mean();
        t.grad(x.id).data.segment(r * p, p) += inv_std[r] * (gxh - m1 - xh * m2);
      }
    }
  });
  return {&t, id};
}

// Inverted dropout; identity when not training or rate == 0.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, Scalar rate, Rng& rng, bool training) {
  if (!training || rate <= Scalar(0)) return x;
  auto& t = *x.tape;
  check(rate < Scalar(1), "dropout: rate must be < 1");
  const auto& v = x.value();
  ArrayX<Scalar> mask(v.size());
  const Scalar keep = Scalar(1) - rate;
  for (Index i = 0; i < v.size(); ++i)
    mask[i] = rng.uniform01() < static_cast<double>(rate) ? Scalar(0) : Scalar(1) / keep;
  Tensor<Scalar> out = v;
  out.data *= mask;
  int id = t.add(std::move(out), t.requires_grad(x.id),
                 [x, mask = std::move(mask), self = int(t.num_nodes())](Tape<Scalar>& t) {
    if (t.requires_grad(x.id)) t.grad(x.id).data += t.grad(self).data * mask;
  });
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Gaussian-mixture log-likelihood (fused)
// ---------------------------------------------------------------------------

// Mean over the rows of X of log sum_k exp(logw_k) N(x; means_k, U_k U_k^T + eps I).
// Fusing the whole mixture evaluation keeps the reconstruction term at one
// node instead of O(N * c), and lets the covariance gradient reuse the
// Cholesky factors from the forward pass.
//
// Shapes: means [c, d], us [c, d, e], logw [c], X [N, d] (constant).
template <typename Scalar>
Var<Scalar> mixture_mean_loglik(Var<Scalar> means, Var<Scalar> us, Var<Scalar> logw,
                                const Tensor<Scalar>& X, Scalar eps_jitter) {
  auto& t = *means.tape;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Index c = means.value().dim(0), d = means.value().dim(1);
  check(us.value().rank() == 3 && us.value().dim(0) == c && us.value().dim(1) == d, "mixture: us shape");
  check(logw.value().size() == c, "mixture: logw shape");
  check(X.rank() == 2 && X.dim(1) == d, "mixture: data shape");
  const Index N = X.dim(0);
  constexpr Scalar log2pi = Scalar(1.8378770664093454836);

  // Per-component precision and log-determinant via Cholesky.
  std::vector<Mat> prec(static_cast<std::size_t>(c));
  Vec logdet(c);
  for (Index k = 0; k < c; ++k) {
    auto Uk = us.value().slab(k);  // d x e
    Mat sigma = Uk * Uk.transpose();
    sigma.diagonal().array() += eps_jitter;
    Eigen::LLT<Mat> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("mixture covariance not positive definite");
    prec[static_cast<std::size_t>(k)] = llt.solve(Mat::Identity(d, d));
    logdet[k] = Scalar(2) * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  }

  // Per-sample, per-component log densities; kept for the backward pass.
  MatrixX<Scalar> ll(N, c);
  VectorX<Scalar> lse(N);
  for (Index n = 0; n < N; ++n) {
    Vec xn = X.matrix(N, d).row(n).transpose();
    for (Index k = 0; k < c; ++k) {
      Vec delta = xn - means.value().matrix(c, d).row(k).transpose();
      const Scalar quad = delta.dot(prec[static_cast<std::size_t>(k)] * delta);
      ll(n, k) = logw.value().data[k] - Scalar(0.5) * (quad + logdet[k] + Scalar(d) * log2pi);
    }
    const Scalar mx = ll.row(n).maxCoeff();
    lse[n] = mx + std::log((ll.row(n).array() - mx).exp().sum());
  }

  Tensor<Scalar> out = Tensor<Scalar>::scalar(lse.mean());
  int id = t.add(std::move(out), detail::any_grad({means, us, logw}),
                 [means, us, logw, X, prec = std::move(prec), ll = std::move(ll), lse = std::move(lse),
                  N, c, d, self = int(t.num_nodes())](Tape<Scalar>& t) {
    const Scalar gout = t.grad(self).data[0] / Scalar(N);
    std::vector<Mat> gsigma(static_cast<std::size_t>(c), Mat::Zero(d, d));
    for (Index n = 0; n < N; ++n) {
      Vec xn = X.matrix(N, d).row(n).transpose();
      for (Index k = 0; k < c; ++k) {
        const Scalar rho = gout * std::exp(ll(n, k) - lse[n]);
        if (rho == Scalar(0)) continue;
        const auto& P = prec[static_cast<std::size_t>(k)];
        Vec delta = xn - t.value(means.id).matrix(c, d).row(k).transpose();
        Vec alpha = P * delta;
        if (t.requires_grad(logw.id)) t.grad(logw.id).data[k] += rho;
        if (t.requires_grad(means.id))
          t.grad(means.id).matrix(c, d).row(k) += rho * alpha.transpose();
        if (t.requires_grad(us.id))
          gsigma[static_cast<std::size_t>(k)] += rho * Scalar(0.5) * (alpha * alpha.transpose() - P);
      }
    }
    if (t.requires_grad(us.id)) {
      for (Index k = 0; k < c; ++k)
        t.grad(us.id).slab(k) += Scalar(2) * gsigma[static_cast<std::size_t>(k)] * t.value(us.id).slab(k);
    }
  });
  return {&t, id};
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Max over parameters of |analytic - finite difference| / max(|analytic|,
// |finite difference|, 1e-6). The floor keeps cancellation noise in the
// difference quotient from registering as error on structurally zero
// gradients (e.g. a key-projection bias, which softmax invariance kills).
// Differences use the fourth-order five-point stencil: plain central
// differences bottom out near 1e-4 relative error on this loss (truncation
// at usable steps, rounding below them), too close to the tolerances the
// tests pin; the extra order buys that margin back.
template <typename Scalar, typename BuildFn>
double grad_check(BasicParamStore<Scalar>& store, BuildFn build, double step = 4e-5) {
  Tape<Scalar> tape;
  Var<Scalar> loss = build(tape, store);
  if (!std::isfinite(static_cast<double>(loss.scalar())))
    throw NumericalError("grad_check: loss not finite at base point");
  tape.backward(loss.id);
  ArrayX<Scalar> analytic = tape.param_grads(store.size());

  auto eval_at = [&](Index i, double delta) {
    const Scalar saved = store.values()[i];
    store.values_mut()[i] = saved + static_cast<Scalar>(delta);
    Tape<Scalar> t;
    const double f = static_cast<double>(build(t, store).scalar());
    store.values_mut()[i] = saved;
    return f;
  };

  double max_err = 0.0;
  for (Index i = 0; i < store.size(); ++i) {
    const double f1p = eval_at(i, step), f1m = eval_at(i, -step);
    const double f2p = eval_at(i, 2.0 * step), f2m = eval_at(i, -2.0 * step);
    const double numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * step);
    const double err =
        std::abs(static_cast<double>(analytic[i]) - numeric) /
        std::max({std::abs(static_cast<double>(analytic[i])), std::abs(numeric), 1e-6});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace intervae
