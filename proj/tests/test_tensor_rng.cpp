#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "intervae/rng.hpp"
#include "intervae/tensor.hpp"

using namespace intervae;

TEST_CASE("tensor shape bookkeeping and views") {
  Tensord t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.rows_flat() == 6);
  CHECK(t.last_dim() == 4);
  t.at3(1, 2, 3) = 7.0;
  CHECK(t.data[23] == 7.0);
  CHECK(t.slab(1)(2, 3) == 7.0);

  Tensord m({3, 2});
  m.at2(2, 1) = -1.5;
  CHECK(m.matrix(3, 2)(2, 1) == -1.5);
  CHECK(m.rows_view()(2, 1) == -1.5);

  Tensord r = m.reshaped({2, 3});
  CHECK(r.at2(1, 2) == -1.5);

  Tensorf f = m.cast<float>();
  CHECK(f.at2(2, 1) == doctest::Approx(-1.5f));
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(7);
  Rng s1 = base.derive(1, 2, 3);
  Rng s2 = base.derive(1, 2, 3);
  Rng s3 = base.derive(1, 2, 4);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(s1.next_u64() != s3.next_u64());
}

TEST_CASE("uniform01 lies in [0,1) and has the right mean") {
  Rng rng(11);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  // mean 1/2, sd of the mean = 1/sqrt(12 n)
  CHECK(std::abs(sum / n - 0.5) < 4.0 / std::sqrt(12.0 * n));
}

TEST_CASE("normal draws match N(0,1) moments") {
  Rng rng(13);
  const int n = 200000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("gamma and beta moments match closed forms") {
  Rng rng(17);
  const int n = 200000;

  // Gamma(shape k) has mean k, variance k.
  for (double k : {0.7, 1.3, 2.5}) {
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double x = rng.gamma(k);
      s1 += x;
      s2 += x * x;
    }
    const double mean = s1 / n;
    const double var = s2 / n - mean * mean;
    CHECK(mean == doctest::Approx(k).epsilon(0.02));
    CHECK(var == doctest::Approx(k).epsilon(0.05));
  }

  // Beta(a,b) has mean a/(a+b).
  for (auto [a, b] : std::vector<std::pair<double, double>>{{0.5, 0.5}, {2.0, 1.0}, {1.5, 0.7}}) {
    double s1 = 0.0;
    for (int i = 0; i < n; ++i) {
      double x = rng.beta(a, b);
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      s1 += x;
    }
    CHECK(s1 / n == doctest::Approx(a / (a + b)).epsilon(0.02));
  }
}

TEST_CASE("shuffle is a uniform-ish permutation and deterministic") {
  Rng a(99), b(99);
  std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> v2 = v1;
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  std::vector<int> sorted = v1;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});

  // First-position distribution over many shuffles is roughly uniform.
  Rng rng(123);
  std::vector<int> counts(4, 0);
  for (int rep = 0; rep < 40000; ++rep) {
    std::vector<int> v{0, 1, 2, 3};
    rng.shuffle(v);
    ++counts[static_cast<std::size_t>(v[0])];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("tensor random constructors are reproducible") {
  Rng a(5), b(5);
  Tensord u1 = Tensord::uniform({3, 3}, -1.0, 1.0, a);
  Tensord u2 = Tensord::uniform({3, 3}, -1.0, 1.0, b);
  CHECK((u1.data == u2.data).all());
  CHECK((u1.data.abs() <= 1.0).all());
  Tensord g1 = Tensord::gaussian({4}, 2.0, 0.5, a);
  Tensord g2 = Tensord::gaussian({4}, 2.0, 0.5, b);
  CHECK((g1.data == g2.data).all());
}
