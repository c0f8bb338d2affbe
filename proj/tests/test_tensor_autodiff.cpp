#include <cmath>
#include <sstream>
#include <string>

#include "dyns/checkpoint.hpp"
#include "dyns/gradcheck.hpp"
#include "dyns/gradcheck_suite.hpp"
#include "dyns/ops.hpp"
#include "dyns/tape.hpp"
#include "support.hpp"

using namespace dyns;
using dyns::test::randn;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<Real> out = Vec<Real>::Zero(m * n);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      long double acc = 0;
      for (Index p = 0; p < k; ++p) acc += (long double)a.at({i, p}) * b.at({p, j});
      out[i * n + j] = static_cast<Real>(acc);
    }
  return Tensor({m, n}, out);
}

// Square with a deliberately wrong backward rule (x instead of 2x).
Tensor broken_square(const Tensor& x) {
  Tensor out(x.shape(), x.data().cwiseProduct(x.data()));
  const Tensor saved = x.detach();
  return record_op<Real>(out, {&x}, [saved](const Vec<Real>& g, Tape<Real>::Sink& sink) {
    sink.add(0, g.cwiseProduct(saved.data()));
  });
}

}  // namespace

TEST_SUITE("tensor_autodiff") {
  TEST_CASE("tensor creation validates shape and finiteness") {
    CHECK_THROWS_AS(Tensor({2, 2}, Vec<Real>::Zero(3)), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 2}, Vec<Real>::Zero(0)), DimensionError);
    Vec<Real> bad = Vec<Real>::Zero(2);
    bad[1] = std::nan("");
    CHECK_THROWS_AS(Tensor({2}, bad), NumericalError);
    bad[1] = INFINITY;
    CHECK_THROWS_AS(Tensor({2}, bad), NumericalError);
  }

  TEST_CASE("debug mode flags a non-finite op output") {
    set_debug_checks(true);
    CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), NumericalError);
    set_debug_checks(false);
    CHECK_NOTHROW(exp(Tensor::from({1}, {1000.0})));
  }

  TEST_CASE("matmul examples") {
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor m = Tensor::from({2, 2}, {3, 5, 7, 9});
    CHECK(dyns::test::bit_equal(matmul(eye, m), m));
    CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11);

    CounterRng rng(11);
    const Tensor a = randn({5, 4}, rng), b = randn({4, 3}, rng);
    CHECK(dyns::test::max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
  }

  TEST_CASE("matmul matches the triple loop for dims up to 32") {
    CounterRng rng(12);
    for (int trial = 0; trial < 40; ++trial) {
      const Index m = 1 + Index(rng.below(32)), k = 1 + Index(rng.below(32)), n = 1 + Index(rng.below(32));
      const Tensor a = randn({m, k}, rng), b = randn({k, n}, rng);
      CHECK(dyns::test::max_rel_diff(matmul(a, b), naive_matmul(a, b), 1e-9) < 1e-12);
    }
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }

  TEST_CASE("grouped_conv1d examples") {
    const Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
    CHECK(dyns::test::bit_equal(grouped_conv1d(x, 3, Tensor::zeros({1, 1, 1, 3}), 1), Tensor::zeros({4, 1})));
    CHECK(dyns::test::bit_equal(grouped_conv1d(x, 3, Tensor::from({1, 1, 1, 3}, {0, 1, 0}), 1), x));
    const Tensor box = grouped_conv1d(x, 3, Tensor::from({1, 1, 1, 3}, {1, 1, 1}), 1);
    CHECK(dyns::test::bit_equal(box, Tensor::from({4, 1}, {3, 6, 9, 7})));
    CHECK_THROWS_AS(grouped_conv1d(Tensor::zeros({4, 3}), 3, Tensor::zeros({2, 1, 1, 3}), 2), ConfigError);
    CHECK_THROWS_AS(grouped_conv1d(Tensor::zeros({4, 2}), 2, Tensor::zeros({1, 1, 1, 2}), 2), ConfigError);
  }

  TEST_CASE("grouped_conv1d matches a sliding-window oracle and keeps groups apart") {
    CounterRng rng(13);
    const Index t_len = 9, groups = 3, ci = 2, co = 2, k = 5;
    const Tensor x = randn({t_len, groups * ci}, rng);
    const Tensor w = randn({groups, co, ci, k}, rng);
    const Tensor y = grouped_conv1d(x, k, w, groups);
    REQUIRE(y.shape() == Shape{t_len, groups * co});
    for (Index t = 0; t < t_len; ++t)
      for (Index g = 0; g < groups; ++g)
        for (Index o = 0; o < co; ++o) {
          double acc = 0;
          for (Index i = 0; i < ci; ++i)
            for (Index j = 0; j < k; ++j) {
              const Index src = t + j - (k - 1) / 2;
              if (src >= 0 && src < t_len) acc += w.at({g, o, i, j}) * x.at({src, g * ci + i});
            }
          CHECK(std::abs(y.at({t, g * co + o}) - acc) < 1e-12);
        }
    // Perturbing group 0 inputs leaves groups 1 and 2 unchanged.
    Tensor x2 = x;
    x2.mutable_data()[0] += 1;
    const Tensor y2 = grouped_conv1d(x2, k, w, groups);
    for (Index t = 0; t < t_len; ++t)
      for (Index c = co; c < groups * co; ++c) CHECK(y2.at({t, c}) == y.at({t, c}));
  }

  TEST_CASE("softmax_rows examples and invariants") {
    const Tensor s = softmax_rows(Tensor::from({2, 2}, {0, 0, 1000, 1000}));
    CHECK(dyns::test::max_abs_diff(s, Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5})) == 0);
    const Tensor r = softmax_rows(Tensor::from({1, 3}, {1, 2, 3}));
    const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    for (Index j = 0; j < 3; ++j) CHECK(std::abs(r.at({0, j}) - double(std::exp(j + 1.0L) / z)) < 1e-12);

    CounterRng rng(14);
    const Tensor a = randn({6, 7}, rng, 5.0);
    const Tensor p = softmax_rows(a);
    for (Index i = 0; i < 6; ++i) {
      double total = 0;
      for (Index j = 0; j < 7; ++j) {
        CHECK(p.at({i, j}) >= 0);
        total += p.at({i, j});
      }
      CHECK(std::abs(total - 1) < 1e-12);
    }
    CHECK(dyns::test::max_abs_diff(softmax_rows(add_scalar(a, 3.25)), p) < 1e-12);
  }

  TEST_CASE("backward examples") {
    Tape<Real> tape;
    const Tensor w = tape.watch(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    const Tensor unused = tape.watch(Tensor::from({2}, {1, 1}));
    const auto g = tape.backward(sum(w));
    CHECK(dyns::test::bit_equal(g[w], Tensor::ones({2, 3})));
    CHECK(dyns::test::bit_equal(g[unused], Tensor::zeros({2})));

    Tape<Real> tape2;
    const Tensor v = tape2.watch(Tensor::from({2}, {1, -2}));
    const auto g2 = tape2.backward(sum(mul(v, v)));
    CHECK(dyns::test::bit_equal(g2[v], Tensor::from({2}, {2, -4})));

    CHECK_THROWS_AS(tape2.backward(mul(v, v)), ContractError);
  }

  TEST_CASE("tape order is topological and backward is deterministic") {
    CounterRng rng(15);
    Tape<Real> tape;
    const Tensor a = tape.watch(randn({4, 5}, rng));
    const Tensor b = tape.watch(randn({5, 3}, rng));
    const Tensor loss = sum(mul(softmax_rows(matmul(a, b)), tanh(matmul(a, b))));
    for (std::size_t n = 0; n < tape.size(); ++n)
      for (const auto p : tape.parents(n)) CHECK(p < static_cast<std::int32_t>(n));
    const auto g1 = tape.backward(loss);
    const auto g2 = tape.backward(loss);
    CHECK(dyns::test::bit_equal(g1[a], g2[a]));
    CHECK(dyns::test::bit_equal(g1[b], g2[b]));
  }

  TEST_CASE("finite_diff_check examples") {
    CounterRng rng(16);
    const std::vector<Tensor> p{randn({3, 4}, rng)};
    const ScalarFn<Real> squares = [](std::span<const Tensor> x) { return sum(mul(x[0], x[0])); };
    CHECK(finite_diff_check<Real>(squares, p, 1e-5) < 1e-9);

    const std::vector<Tensor> logits{randn({5, 2}, rng)};
    const Tensor onehot = Tensor::from({5, 2}, {1, 0, 0, 1, 0, 1, 1, 0, 1, 0});
    const ScalarFn<Real> xent = [onehot](std::span<const Tensor> x) {
      return scale(sum(mul(log(softmax_rows(x[0])), onehot)), Real(-1));
    };
    CHECK(finite_diff_check<Real>(xent, logits, 1e-5) < 1e-6);

    const ScalarFn<Real> broken = [](std::span<const Tensor> x) { return sum(broken_square(x[0])); };
    CHECK(finite_diff_check<Real>(broken, p, 1e-5) > 1e-2);
  }

  TEST_CASE("finite_diff_check rejects a non-deterministic function") {
    int calls = 0;
    const ScalarFn<Real> drifting = [&calls](std::span<const Tensor> x) {
      return add_scalar(sum(x[0]), Real(++calls));
    };
    const std::vector<Tensor> p{Tensor::ones({2})};
    CHECK_THROWS_AS(finite_diff_check<Real>(drifting, p, 1e-5), OracleError);
  }

  TEST_CASE("every differentiable op passes the gradient check") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed)
      for (const auto& r : run_gradcheck_suite(seed)) {
        INFO(r.op << " seed " << seed);
        CHECK(r.max_rel_error < 1e-4);
      }
  }

  TEST_CASE("checkpoint round trip and format") {
    CounterRng rng(17);
    const std::vector<NamedTensor> params{{"a.weight", randn({3, 2}, rng)}, {"scalar", Tensor::scalar(2.5)}};
    std::stringstream ss;
    write_checkpoint(ss, params);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "DYNS");
    CHECK(static_cast<unsigned char>(bytes[4]) == kCheckpointVersion);
    const auto back = read_checkpoint(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "a.weight");
    CHECK(dyns::test::bit_equal(back[0].value, params[0].value));
    CHECK(back[1].value.item() == 2.5);
    CHECK(checksum(back) == checksum(params));

    std::stringstream bad("NOPE");
    CHECK_THROWS_AS(read_checkpoint(bad), DataError);
  }
}
