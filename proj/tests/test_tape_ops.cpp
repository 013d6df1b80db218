#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "intervae/params.hpp"
#include "intervae/rng.hpp"
#include "intervae/tape.hpp"
#include "intervae/tensor.hpp"

using namespace intervae;

namespace {

// Contract a tensor against fixed weights so every output entry feeds the
// scalar the finite-difference check differentiates.
Vard contract(Tape<double>& t, Vard x, unsigned seed = 1234) {
  Rng rng(seed);
  Tensord w = Tensord::uniform(x.shape(), -1.0, 1.0, rng);
  return sum_all(mul(x, constant(t, w)));
}

constexpr double kTol = 1e-6;  // per-op bar; spec end-to-end bar is 1e-4

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(1);
  ParamStore store;
  store.add("a", Tensord::uniform({3, 4}, -1.0, 1.0, rng));
  store.add("b", Tensord::uniform({3, 4}, 0.5, 2.0, rng));

  auto check_op = [&](auto op) {
    double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
      return contract(t, op(t, param(t, s, "a"), param(t, s, "b")));
    });
    CHECK(err < kTol);
  };

  check_op([](Tape<double>&, Vard a, Vard b) { return add(a, b); });
  check_op([](Tape<double>&, Vard a, Vard b) { return sub(a, b); });
  check_op([](Tape<double>&, Vard a, Vard b) { return mul(a, b); });
  check_op([](Tape<double>&, Vard a, Vard b) { return mul(neg(a), vexp(b)); });
  check_op([](Tape<double>&, Vard a, Vard b) { return add(square(a), vlog(b)); });
  check_op([](Tape<double>&, Vard a, Vard b) { return add(gelu(a), gelu(b)); });
  check_op([](Tape<double>&, Vard a, Vard b) { return mul(scalar_mul(a, 1.7), add_scalar(b, -0.3)); });
}

TEST_CASE("gelu matches x*Phi(x) values") {
  Tape<double> t;
  Tensord x({5});
  x.data << -2.0, -0.5, 0.0, 0.5, 2.0;
  Vard y = gelu(input(t, x));
  for (Index i = 0; i < 5; ++i) {
    const double phi = 0.5 * std::erfc(-x.data[i] / std::sqrt(2.0));
    CHECK(y.value().data[i] == doctest::Approx(x.data[i] * phi).epsilon(1e-12));
  }
}

TEST_CASE("shape op gradients: reshape, transpose, concat, slice, stack") {
  Rng rng(2);
  ParamStore store;
  store.add("a", Tensord::uniform({2, 3, 4}, -1.0, 1.0, rng));
  store.add("b", Tensord::uniform({2, 3, 2}, -1.0, 1.0, rng));

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, reshape(param(t, s, "a"), {4, 6}));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, transpose01(param(t, s, "a")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, concat_last(param(t, s, "a"), param(t, s, "b")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, slice_last(param(t, s, "a"), 1, 2));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    auto a = param(t, s, "a");
    std::vector<Vard> parts{sum_all(a), mean_all(a), sum_all(square(a))};
    return contract(t, stack_scalars(t, parts));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, tile_rows(param(t, s, "b"), 4));
  });
  CHECK(err < kTol);
}

TEST_CASE("tile_rows repeats along a new leading axis") {
  Tape<double> t;
  Tensord x({2, 2});
  x.data << 1, 2, 3, 4;
  Vard y = tile_rows(input(t, x), 3);
  CHECK(y.value().rank() == 3);
  CHECK(y.value().dim(0) == 3);
  for (Index i = 0; i < 3; ++i) CHECK(y.value().at3(i, 1, 0) == 3.0);
}

TEST_CASE("transpose01 permutes axes correctly") {
  Tape<double> t;
  Tensord x({2, 3});
  x.data << 1, 2, 3, 4, 5, 6;
  Vard y = transpose01(input(t, x));
  CHECK(y.value().dim(0) == 3);
  CHECK(y.value().at2(2, 1) == 6.0);

  Tensord z({2, 2, 2});
  z.data << 0, 1, 2, 3, 4, 5, 6, 7;
  Vard w = transpose01(input(t, z));
  CHECK(w.value().at3(1, 0, 1) == 3.0);  // z[0,1,1]
  CHECK(w.value().at3(0, 1, 0) == 4.0);  // z[1,0,0]
}

TEST_CASE("reduction gradients: mean_rows, sum_all, mean_all") {
  Rng rng(3);
  ParamStore store;
  store.add("a", Tensord::uniform({5, 3, 2}, -1.0, 1.0, rng));

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, mean_rows(param(t, s, "a")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return add(sum_all(param(t, s, "a")), mean_all(square(param(t, s, "a"))));
  });
  CHECK(err < kTol);
}

TEST_CASE("linear layer forward and gradient") {
  Rng rng(4);
  ParamStore store;
  store.add("x", Tensord::uniform({2, 5, 3}, -1.0, 1.0, rng));
  store.add("W", Tensord::uniform({3, 4}, -0.7, 0.7, rng));
  store.add("b", Tensord::uniform({4}, -0.5, 0.5, rng));

  // Value against Eigen.
  {
    Tape<double> t;
    Vard y = linear(param(t, store, "x"), param(t, store, "W"), param(t, store, "b"));
    MatrixXd X = store.get("x").matrix(10, 3);
    MatrixXd W = store.get("W").matrix(3, 4);
    MatrixXd expect = X * W;
    expect.rowwise() += store.get("b").data.matrix().transpose();
    CHECK((y.value().matrix(10, 4) - expect).cwiseAbs().maxCoeff() < 1e-14);
  }

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, linear(param(t, s, "x"), param(t, s, "W"), param(t, s, "b")));
  });
  CHECK(err < kTol);
}

TEST_CASE("bmm forward and gradient, both transpose modes") {
  Rng rng(5);
  ParamStore store;
  store.add("a", Tensord::uniform({3, 2, 4}, -1.0, 1.0, rng));
  store.add("b", Tensord::uniform({3, 4, 5}, -1.0, 1.0, rng));
  store.add("c", Tensord::uniform({3, 5, 4}, -1.0, 1.0, rng));

  {
    Tape<double> t;
    Vard y = bmm(param(t, store, "a"), param(t, store, "b"));
    Tensord a = store.get("a"), b = store.get("b");
    for (Index i = 0; i < 3; ++i)
      CHECK((y.value().slab(i) - (a.slab(i) * b.slab(i))).cwiseAbs().maxCoeff() < 1e-14);
  }
  {
    Tape<double> t;
    Vard y = bmm(param(t, store, "a"), param(t, store, "c"), true);
    Tensord a = store.get("a"), c = store.get("c");
    for (Index i = 0; i < 3; ++i)
      CHECK((y.value().slab(i) - (a.slab(i) * c.slab(i).transpose())).cwiseAbs().maxCoeff() < 1e-14);
  }

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, bmm(param(t, s, "a"), param(t, s, "b")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, bmm(param(t, s, "a"), param(t, s, "c"), true));
  });
  CHECK(err < kTol);
}

TEST_CASE("split/merge heads roundtrip and gradients") {
  Rng rng(6);
  ParamStore store;
  store.add("x", Tensord::uniform({2, 3, 6}, -1.0, 1.0, rng));

  {
    Tape<double> t;
    Vard x = param(t, store, "x");
    Vard r = merge_heads(split_heads(x, 3), 3);
    CHECK((r.value().data - x.value().data).abs().maxCoeff() == 0.0);
    Vard s = split_heads(x, 2);
    CHECK(s.value().dim(0) == 4);
    // head 1 of batch 0, row 2 = x[0, 2, 3:6]
    CHECK(s.value().at3(1, 2, 0) == x.value().at3(0, 2, 3));
  }

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, split_heads(param(t, s, "x"), 2));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, merge_heads(split_heads(param(t, s, "x"), 3), 3));
  });
  CHECK(err < kTol);
}

TEST_CASE("softmax family: values and gradients") {
  Rng rng(7);
  ParamStore store;
  store.add("x", Tensord::uniform({4, 5}, -3.0, 3.0, rng));

  {
    Tape<double> t;
    Vard y = softmax_last(param(t, store, "x"));
    for (Index r = 0; r < 4; ++r) {
      double sum = y.value().data.segment(r * 5, 5).sum();
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    Vard ly = log_softmax_last(param(t, store, "x"));
    CHECK((ly.value().data.exp() - y.value().data).abs().maxCoeff() < 1e-12);

    Vard lse = logsumexp_last(param(t, store, "x"));
    for (Index r = 0; r < 4; ++r) {
      double naive = std::log(store.get("x").data.segment(r * 5, 5).exp().sum());
      CHECK(lse.value().data[r] == doctest::Approx(naive).epsilon(1e-12));
    }
  }

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, softmax_last(param(t, s, "x")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, log_softmax_last(param(t, s, "x")));
  });
  CHECK(err < kTol);

  err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, logsumexp_last(param(t, s, "x")));
  });
  CHECK(err < kTol);
}

TEST_CASE("layer_norm normalizes and backprops") {
  Rng rng(8);
  ParamStore store;
  store.add("x", Tensord::uniform({6, 8}, -2.0, 2.0, rng));
  store.add("g", Tensord::uniform({8}, 0.5, 1.5, rng));
  store.add("be", Tensord::uniform({8}, -0.5, 0.5, rng));

  {
    Tape<double> t;
    Tensord ones = Tensord::full({8}, 1.0);
    Tensord zeros = Tensord::zeros({8});
    Vard y = layer_norm(param(t, store, "x"), constant(t, ones), constant(t, zeros));
    for (Index r = 0; r < 6; ++r) {
      auto row = y.value().data.segment(r * 8, 8);
      CHECK(std::abs(row.mean()) < 1e-6);
      CHECK(std::abs(row.square().mean() - 1.0) < 1e-4);  // eps shifts variance slightly
    }
  }

  double err = grad_check(store, [&](Tape<double>& t, ParamStore& s) {
    return contract(t, layer_norm(param(t, s, "x"), param(t, s, "g"), param(t, s, "be")));
  });
  CHECK(err < kTol);
}

TEST_CASE("dropout: identity in eval, mask in training, gradient through mask") {
  Rng r1(9);
  Tape<double> t;
  Tensord x = Tensord::uniform({10, 10}, 1.0, 2.0, r1);

  Vard xin = input(t, x);
  Rng r2(10);
  Vard eval_out = dropout(xin, 0.5, r2, /*training=*/false);
  CHECK(eval_out.id == xin.id);
  Vard zero_rate = dropout(xin, 0.0, r2, /*training=*/true);
  CHECK(zero_rate.id == xin.id);

  Rng r3(11);
  Vard train_out = dropout(xin, 0.5, r3, /*training=*/true);
  Index zeros = 0;
  for (Index i = 0; i < 100; ++i) {
    const double v = train_out.value().data[i];
    if (v == 0.0)
      ++zeros;
    else
      CHECK(v == doctest::Approx(2.0 * x.data[i]));
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);

  ParamStore store;
  Rng r4(12);
  store.add("x", Tensord::uniform({5, 4}, -1.0, 1.0, r4));
  double err = grad_check(store, [&](Tape<double>& tp, ParamStore& s) {
    Rng mask_rng(77);  // same mask across all finite-difference replays
    return contract(tp, dropout(param(tp, s, "x"), 0.3, mask_rng, true));
  });
  CHECK(err < kTol);
}

TEST_CASE("mixture_mean_loglik matches a naive mixture density oracle") {
  Rng rng(13);
  // e = d keeps U U^T full-rank so the naive density sum cannot underflow.
  const Index c = 4, d = 3, e = 3, N = 6;
  ParamStore store;
  store.add("means", Tensord::uniform({c, d}, -1.0, 1.0, rng));
  store.add("us", Tensord::uniform({c, d, e}, -0.8, 0.8, rng));
  store.add("logw", Tensord::uniform({c}, -1.5, 0.0, rng));
  Tensord X = Tensord::gaussian({N, d}, 0.0, 1.0, rng);
  const double eps = 5e-5;

  // Naive oracle: direct density summation per sample.
  double expect = 0.0;
  {
    Tensord means = store.get("means"), us = store.get("us"), logw = store.get("logw");
    for (Index n = 0; n < N; ++n) {
      double acc = 0.0;
      for (Index k = 0; k < c; ++k) {
        Eigen::MatrixXd U = us.slab(k);
        Eigen::MatrixXd S = U * U.transpose() + eps * Eigen::MatrixXd::Identity(d, d);
        Eigen::VectorXd delta = X.matrix(N, d).row(n).transpose() - means.matrix(c, d).row(k).transpose();
        Eigen::LLT<Eigen::MatrixXd> llt(S);
        const double quad = delta.dot(llt.solve(delta));
        const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        acc += std::exp(logw.data[k]) *
               std::exp(-0.5 * (quad + logdet + d * std::log(2.0 * M_PI)));
      }
      expect += std::log(acc);
    }
    expect /= N;
  }

  Tape<double> t;
  Vard ll = mixture_mean_loglik(param(t, store, "means"), param(t, store, "us"),
                                param(t, store, "logw"), X, eps);
  CHECK(ll.scalar() == doctest::Approx(expect).epsilon(1e-12));

  double err = grad_check(store, [&](Tape<double>& tp, ParamStore& s) {
    return mixture_mean_loglik(param(tp, s, "means"), param(tp, s, "us"), param(tp, s, "logw"), X,
                               eps);
  });
  CHECK(err < 1e-5);  // covariance chain is deeper; still well under the 1e-4 bar
}

TEST_CASE("mixture_mean_loglik stays finite when u u^T is rank-deficient") {
  // e < d leaves the eps-jitter as the only mass along some directions; the
  // log-space path must survive where a naive density sum underflows.
  Rng rng(15);
  const Index c = 2, d = 3, e = 1, N = 4;
  ParamStore store;
  store.add("means", Tensord::uniform({c, d}, -1.0, 1.0, rng));
  store.add("us", Tensord::uniform({c, d, e}, -0.8, 0.8, rng));
  store.add("logw", Tensord::uniform({c}, -1.5, 0.0, rng));
  Tensord X = Tensord::gaussian({N, d}, 0.0, 1.0, rng);

  Tape<double> t;
  Vard ll = mixture_mean_loglik(param(t, store, "means"), param(t, store, "us"),
                                param(t, store, "logw"), X, 5e-5);
  CHECK(std::isfinite(ll.scalar()));
  t.backward(ll.id);
  CHECK(all_finite(t.param_grads(store.size())));
}

TEST_CASE("backward_seeded hands gradients into an upstream tape") {
  Tape<double> t;
  Tensord x({3});
  x.data << 1.0, 2.0, 3.0;
  Vard xv = input(t, x);
  Vard y = scalar_mul(xv, 2.0);

  Tensord seed({3});
  seed.data << 1.0, 10.0, 100.0;
  t.backward_seeded({{y.id, seed}});
  CHECK(t.grad(xv.id).data[0] == 2.0);
  CHECK(t.grad(xv.id).data[1] == 20.0);
  CHECK(t.grad(xv.id).data[2] == 200.0);
}

TEST_CASE("grad_check exact on quadratics and constants") {
  Rng rng(14);
  ParamStore store;
  store.add("p", Tensord::uniform({4}, -1.0, 1.0, rng));

  double err = grad_check(store, [](Tape<double>& t, ParamStore& s) {
    return sum_all(square(param(t, s, "p")));
  });
  CHECK(err < 1e-9);

  // Constant function: both gradients exactly 0 (rel err 0 by the 1e-8 floor).
  err = grad_check(store, [](Tape<double>& t, ParamStore& s) {
    return sub(sum_all(param(t, s, "p")), sum_all(param(t, s, "p")));
  });
  CHECK(err < 1e-9);
}
