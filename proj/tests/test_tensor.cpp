#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mwds/rng.hpp"
#include "mwds/tensor.hpp"

using mwds::Rng;
using mwds::Tape;
using mwds::Tensor;

namespace {

Tensor<double> random_tensor(Rng& rng, int r, int c) {
  Tensor<double> t({r, c});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() * 4.0 - 2.0;
  return t;
}

// Independent scalar triple-loop product used as the matmul oracle.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

Tensor<double> identity(int n) {
  Tensor<double> t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("matmul identity cases") {
  Tape<double> tape;
  Tensor<double> b({2, 3}, {1, 2, 3, 4, 5, 6});
  int prod = tape.matmul(tape.constant(identity(2)), tape.constant(b));
  for (int64_t i = 0; i < 6; ++i) CHECK(tape.value(prod)[i] == b[i]);

  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  int prod2 = tape.matmul(tape.constant(a), tape.constant(identity(2)));
  for (int64_t i = 0; i < 4; ++i) CHECK(tape.value(prod2)[i] == a[i]);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> a = random_tensor(rng, 3, 4);
    Tensor<double> b = random_tensor(rng, 4, 2);
    Tensor<double> expect = matmul_oracle(a, b);
    Tape<double> tape;
    int prod = tape.matmul(tape.constant(a), tape.constant(b));
    for (int64_t i = 0; i < expect.numel(); ++i) {
      CHECK(tape.value(prod)[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  int a = tape.constant(Tensor<double>({3, 4}));
  int b = tape.constant(Tensor<double>({5, 2}));
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       "matmul: inner dimensions disagree: [3x4] vs [5x2]",
                       std::invalid_argument);
}

TEST_CASE("softmax rows") {
  Tape<double> tape;

  SUBCASE("equal values give uniform row") {
    int x = tape.constant(Tensor<double>::row({1.5, 1.5, 1.5, 1.5}));
    int y = tape.softmax_rows(x);
    for (int j = 0; j < 4; ++j) CHECK(tape.value(y)[j] == doctest::Approx(0.25).epsilon(1e-12));
  }

  SUBCASE("row [0, ln 3] gives [0.25, 0.75]") {
    int x = tape.constant(Tensor<double>::row({0.0, std::log(3.0)}));
    int y = tape.softmax_rows(x);
    CHECK(tape.value(y)[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(tape.value(y)[1] == doctest::Approx(0.75).epsilon(1e-12));
  }

  SUBCASE("dominant value gives one-hot") {
    int x = tape.constant(Tensor<double>::row({3.0, 1e6 + 3.0, 2.0}));
    int y = tape.softmax_rows(x);
    CHECK(std::abs(tape.value(y)[1] - 1.0) < 1e-9);
    CHECK(std::abs(tape.value(y)[0]) < 1e-9);
    CHECK(std::abs(tape.value(y)[2]) < 1e-9);
  }

  SUBCASE("rows sum to one and shift invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<double> x = random_tensor(rng, 3, 5);
      Tensor<double> shifted = x.clone();
      const double c = rng.uniform() * 10.0 - 5.0;
      for (int j = 0; j < 5; ++j) shifted.at(1, j) += c;
      Tape<double> t2;
      int y = t2.softmax_rows(t2.constant(x));
      int ys = t2.softmax_rows(t2.constant(shifted));
      for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) s += t2.value(y).at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
      for (int j = 0; j < 5; ++j) {
        CHECK(std::abs(t2.value(y).at(1, j) - t2.value(ys).at(1, j)) < 1e-9);
      }
    }
  }
}

TEST_CASE("layer norm") {
  Tape<double> tape;
  int gain = tape.constant(Tensor<double>::row({1.0, 1.0}));
  int bias = tape.constant(Tensor<double>::row({0.0, 0.0}));

  SUBCASE("constant vector maps to zeros") {
    int x = tape.constant(Tensor<double>::row({4.0, 4.0}));
    int y = tape.layer_norm(x, gain, bias, 1e-5);
    CHECK(tape.value(y)[0] == doctest::Approx(0.0));
    CHECK(tape.value(y)[1] == doctest::Approx(0.0));
  }

  SUBCASE("x=[1,3] standardizes to [-1,1]") {
    int x = tape.constant(Tensor<double>::row({1.0, 3.0}));
    int y = tape.layer_norm(x, gain, bias, 1e-14);
    CHECK(tape.value(y)[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(tape.value(y)[1] == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("zero gain broadcasts the bias") {
    int g0 = tape.constant(Tensor<double>::row({0.0, 0.0}));
    int b = tape.constant(Tensor<double>::row({2.5, -1.0}));
    int x = tape.constant(Tensor<double>::row({0.3, 7.2}));
    int y = tape.layer_norm(x, g0, b, 1e-5);
    CHECK(tape.value(y)[0] == doctest::Approx(2.5));
    CHECK(tape.value(y)[1] == doctest::Approx(-1.0));
  }
}

TEST_CASE("grad_check on sum of squares is near machine precision") {
  Rng rng(3);
  Tensor<double> x = random_tensor(rng, 2, 3);
  x.requires_grad = true;
  double err = mwds::grad_check<double>(
      x, [](Tape<double>& t, int id) { return t.sum(t.mul(id, id)); }, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("every op passes the finite-difference oracle") {
  Rng rng(17);
  const double eps = 1e-5;
  const double tol = 1e-4;

  auto check = [&](const std::vector<Tensor<double>*>& leaves,
                   const std::function<int(Tape<double>&, const std::vector<int>&)>& build) {
    double err = mwds::grad_check<double>(leaves, build, eps);
    CHECK(err < tol);
  };

  for (int trial = 0; trial < 3; ++trial) {
    Tensor<double> a = random_tensor(rng, 4, 3);
    Tensor<double> b = random_tensor(rng, 3, 5);
    check({&a, &b}, [](Tape<double>& t, const std::vector<int>& v) {
      return t.sum(t.matmul(v[0], v[1]));
    });

    Tensor<double> c = random_tensor(rng, 4, 3);
    Tensor<double> d = random_tensor(rng, 5, 3);
    check({&c, &d}, [](Tape<double>& t, const std::vector<int>& v) {
      return t.sum(t.gelu(t.matmul_nt(v[0], v[1])));
    });

    Tensor<double> e = random_tensor(rng, 2, 6);
    Tensor<double> f = random_tensor(rng, 2, 6);
    check({&e, &f}, [](Tape<double>& t, const std::vector<int>& v) {
      return t.mean(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
    });

    Tensor<double> x = random_tensor(rng, 3, 4);
    Tensor<double> gain = random_tensor(rng, 1, 4);
    Tensor<double> bias = random_tensor(rng, 1, 4);
    check({&x, &gain, &bias}, [](Tape<double>& t, const std::vector<int>& v) {
      return t.sum(t.layer_norm(v[0], v[1], v[2], 1e-5));
    });

    Tensor<double> sm = random_tensor(rng, 2, 5);
    check({&sm}, [](Tape<double>& t, const std::vector<int>& v) {
      int y = t.softmax_rows(v[0]);
      return t.sum(t.mul(y, y));
    });
    check({&sm}, [](Tape<double>& t, const std::vector<int>& v) {
      int y = t.log_softmax_rows(v[0]);
      return t.mean(t.mul(y, y));
    });

    Tensor<double> table = random_tensor(rng, 6, 3);
    check({&table}, [](Tape<double>& t, const std::vector<int>& v) {
      int rows = t.embed_rows(v[0], {1, 4, 1, 0});
      return t.sum(t.mul(rows, rows));
    });

    Tensor<double> wide = random_tensor(rng, 3, 8);
    check({&wide}, [](Tape<double>& t, const std::vector<int>& v) {
      int left = t.slice_cols(v[0], 0, 4);
      int right = t.slice_cols(v[0], 4, 8);
      int joined = t.concat_cols({t.mul(left, right), left});
      int picked = t.take_rows(joined, {2, 0});
      return t.sum(picked);
    });

    Tensor<double> gsrc = random_tensor(rng, 4, 4);
    check({&gsrc}, [](Tape<double>& t, const std::vector<int>& v) {
      int g = t.gather_elems(v[0], {0, 1, 2, 3, 3, 0});
      return t.mean(t.mul(g, g));
    });

    Tensor<double> s1 = random_tensor(rng, 1, 1);
    Tensor<double> s2 = random_tensor(rng, 1, 1);
    Tensor<double> s3 = random_tensor(rng, 1, 1);
    check({&s1, &s2, &s3}, [](Tape<double>& t, const std::vector<int>& v) {
      int stacked = t.stack_scalars({v[0], v[1], v[2]});
      int probs = t.softmax_rows(t.scale(stacked, -1.0));
      return t.sum(t.mul(probs, t.constant_row({1.0, 2.0, 3.0})));
    });

    Tensor<double> xb = random_tensor(rng, 4, 3);
    Tensor<double> bb = random_tensor(rng, 1, 3);
    check({&xb, &bb}, [](Tape<double>& t, const std::vector<int>& v) {
      return t.sum(t.gelu(t.add_bias(v[0], v[1])));
    });
  }
}

TEST_CASE("backward yields exact zeros for unused inputs") {
  Tape<double> tape;
  Tensor<double> used = Tensor<double>::row({1.0, 2.0});
  used.requires_grad = true;
  Tensor<double> unused = Tensor<double>::row({3.0, 4.0});
  unused.requires_grad = true;
  int u = tape.leaf(used);
  int v = tape.leaf(unused);
  int loss = tape.sum(tape.mul(u, u));
  tape.backward(loss);
  Tensor<double> gu = tape.grad(u);
  CHECK(gu[0] == doctest::Approx(2.0));
  CHECK(gu[1] == doctest::Approx(4.0));
  Tensor<double> gv = tape.grad(v);
  CHECK(gv[0] == 0.0);
  CHECK(gv[1] == 0.0);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    Tape<double> tape;
    Tensor<double> a = random_tensor(rng, 4, 4);
    Tensor<double> b = random_tensor(rng, 4, 4);
    int x = tape.constant(a);
    int y = tape.constant(b);
    int z = tape.softmax_rows(tape.gelu(tape.matmul(x, y)));
    int g = tape.layer_norm(z, tape.constant_row({1, 1, 1, 1}), tape.constant_row({0, 0, 0, 0}),
                            1e-5);
    CHECK(tape.value(g).all_finite());
  }
}

TEST_CASE("gradients accumulate when a node feeds two consumers") {
  Tensor<double> x = Tensor<double>::row({0.5, -0.25, 1.5});
  x.requires_grad = true;
  double err = mwds::grad_check<double>(
      x,
      [](Tape<double>& t, int id) {
        int a = t.gelu(id);
        int b = t.scale(id, 3.0);
        return t.sum(t.mul(a, b));
      },
      1e-5);
  CHECK(err < 1e-6);
}
