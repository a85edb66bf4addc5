#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "support.hpp"

using namespace knowbias;
using Catch::Approx;

namespace {

// Builds the scalar f(x) on a fresh tape; `x` is the only differentiable leaf.
using Builder = std::function<NodeId(Tape&, NodeId)>;

// Reduce any node to a scalar with fixed random weights so every output
// coordinate reaches the gradient.
NodeId weighted_sum(Tape& t, NodeId y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& v = t.value(y);
  const NodeId w = t.constant(kbtest::random_matrix(rng, v.rows(), v.cols()));
  return t.sum(t.mul(y, w));
}

double eval(const Builder& f, const Tensor& x) {
  Tape t;
  return t.value(f(t, t.input(x)))[0];
}

// Worst |analytic - numeric| / max(|analytic|, |numeric|, 1e-4), with the
// numeric side a 4-point central stencil. The floor keeps rounding noise on
// exactly-zero gradients from counting as relative error.
double worst_rel_error(const Builder& f, const Tensor& x, double h = 1e-4) {
  Tape t;
  const NodeId in = t.input(x);
  const NodeId out = f(t, in);
  const Tensor g = backward(t, out)[in];
  REQUIRE(g.shape() == x.shape());
  double worst = 0.0;
  Tensor p = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double o = p[i];
    auto at = [&](double d) {
      p[i] = o + d;
      const double v = eval(f, p);
      p[i] = o;
      return v;
    };
    const double num = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    const double den = std::max({std::abs(g[i]), std::abs(num), 1e-4});
    worst = std::max(worst, std::abs(g[i] - num) / den);
  }
  return worst;
}

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

TEST_CASE("forward values of single ops") {
  Tape t;
  const NodeId x = t.input(Tensor::row({1.0, 0.0}));
  const Tensor& s = t.value(t.softmax_row(x));
  CHECK(s[0] == Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(s[1] == Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(s[0] == Approx(0.7311).margin(5e-5));
  CHECK(s[1] == Approx(0.2689).margin(5e-5));

  const NodeId z = t.input(Tensor::row({0.0, 1.0, -2.0}));
  const Tensor& si = t.value(t.silu(z));
  CHECK(si[0] == 0.0);
  CHECK(si[1] == Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(si[2] == Approx(-2.0 / (1.0 + std::exp(2.0))));
  const Tensor& ge = t.value(t.gelu(z));
  CHECK(ge[0] == 0.0);
  CHECK(ge[1] == Approx(0.8413447460685429));   // Phi(1)
  CHECK(ge[2] == Approx(-2.0 * 0.0227501319481792));

  const NodeId a = t.input(Tensor::matrix(2, 3, 1.0));
  const NodeId b = t.input(Tensor::matrix(3, 4, 2.0));
  const Tensor& ab = t.value(t.matmul(a, b));
  CHECK(ab.rows() == 2);
  CHECK(ab.cols() == 4);
  CHECK(ab(1, 3) == 6.0);
}

TEST_CASE("causal softmax masks columns beyond the offset") {
  Tape t;
  const NodeId x = t.input(Tensor::matrix(2, 3, {0.0, 5.0, 7.0, 1.0, 1.0, 9.0}));
  const Tensor& s = t.value(t.softmax_row(x, 0));
  CHECK(s(0, 0) == 1.0);
  CHECK(s(0, 1) == 0.0);
  CHECK(s(0, 2) == 0.0);
  CHECK(s(1, 0) == Approx(0.5));
  CHECK(s(1, 1) == Approx(0.5));
  CHECK(s(1, 2) == 0.0);
}

TEST_CASE("rms norm matches the formula") {
  Tape t;
  const NodeId x = t.input(Tensor::row({3.0, 4.0}));
  const NodeId g = t.input(Tensor::row({1.0, 2.0}));
  const Tensor& y = t.value(t.rms_norm(x, g, 0.0));
  const double rms = std::sqrt((9.0 + 16.0) / 2.0);
  CHECK(y[0] == Approx(3.0 / rms));
  CHECK(y[1] == Approx(8.0 / rms));
}

TEST_CASE("simple gradients") {
  SECTION("sum gives ones") {
    Tape t;
    const NodeId x = t.input(Tensor::matrix(3, 2, 0.7));
    const auto g = backward(t, t.sum(x));
    for (double v : g[x].storage()) CHECK(v == 1.0);
  }
  SECTION("x squared at 3") {
    Tape t;
    const NodeId x = t.input(Tensor::scalar(3.0));
    const auto g = backward(t, t.mul(x, x));
    CHECK(g[x][0] == 6.0);
  }
  SECTION("nodes the output ignores get zeros") {
    Tape t;
    const NodeId x = t.input(Tensor::scalar(3.0));
    const NodeId y = t.input(Tensor::scalar(5.0));
    const auto g = backward(t, t.scale(x, 2.0));
    CHECK(g[x][0] == 2.0);
    CHECK(g[y][0] == 0.0);
  }
  SECTION("silu and gelu derivatives") {
    for (double v : {-2.0, -0.3, 0.0, 0.8, 3.0}) {
      Tape t;
      const NodeId x = t.input(Tensor::scalar(v));
      const double sg = 1.0 / (1.0 + std::exp(-v));
      CHECK(backward(t, t.silu(x))[x][0] == Approx(sg + v * sg * (1.0 - sg)).epsilon(1e-12));
      Tape u;
      const NodeId y = u.input(Tensor::scalar(v));
      const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      CHECK(backward(u, u.gelu(y))[y][0] == Approx(cdf + v * pdf).epsilon(1e-12));
    }
  }
}

TEST_CASE("every differentiable op matches central differences on 100 random shapes") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = dim(rng, 1, 4), c = dim(rng, 2, 5), k = dim(rng, 1, 4);
    const Tensor other = kbtest::random_matrix(rng, c, k);
    const Tensor other_nt = kbtest::random_matrix(rng, k, c);
    const Tensor left = kbtest::random_matrix(rng, k, r);
    const Tensor same = kbtest::random_matrix(rng, r, c);
    const Tensor gain = kbtest::random_matrix(rng, 1, c);
    const std::uint64_t ws = rng();
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < 4; ++i) ids.push_back(dim(rng, 0, r - 1));
    const std::size_t r0 = dim(rng, 0, r - 1), r1 = dim(rng, r0 + 1, r);
    const std::size_t c0 = dim(rng, 0, c - 1), c1 = dim(rng, c0 + 1, c);
    const std::vector<std::size_t> flat = {dim(rng, 0, r * c - 1), dim(rng, 0, r * c - 1)};

    const std::vector<std::pair<const char*, Builder>> cases = {
        {"matmul", [&](Tape& t, NodeId x) { return weighted_sum(t, t.matmul(x, t.constant(other)), ws); }},
        {"matmul-rhs", [&](Tape& t, NodeId x) { return weighted_sum(t, t.matmul(t.constant(left), x), ws); }},
        {"matmul-nt", [&](Tape& t, NodeId x) { return weighted_sum(t, t.matmul_nt(x, t.constant(other_nt)), ws); }},
        {"matmul-nt-self", [&](Tape& t, NodeId x) { return weighted_sum(t, t.matmul_nt(x, x), ws); }},
        {"add", [&](Tape& t, NodeId x) { return weighted_sum(t, t.add(x, t.constant(same)), ws); }},
        {"add-row", [&](Tape& t, NodeId x) {
           return weighted_sum(t, t.add(t.constant(same), t.slice(x, 0, 1, 0, c)), ws);
         }},
        {"mul", [&](Tape& t, NodeId x) { return weighted_sum(t, t.mul(x, x), ws); }},
        {"silu", [&](Tape& t, NodeId x) { return weighted_sum(t, t.silu(x), ws); }},
        {"gelu", [&](Tape& t, NodeId x) { return weighted_sum(t, t.gelu(x), ws); }},
        {"softmax", [&](Tape& t, NodeId x) { return weighted_sum(t, t.softmax_row(x), ws); }},
        {"softmax-causal", [&](Tape& t, NodeId x) { return weighted_sum(t, t.softmax_row(x, 0), ws); }},
        {"rms-norm", [&](Tape& t, NodeId x) { return weighted_sum(t, t.rms_norm(x, t.constant(gain)), ws); }},
        {"rms-norm-gain", [&](Tape& t, NodeId x) {
           return weighted_sum(t, t.rms_norm(t.constant(same), t.slice(x, 0, 1, 0, c)), ws);
         }},
        {"embed", [&](Tape& t, NodeId x) { return weighted_sum(t, t.embed_lookup(x, ids), ws); }},
        {"slice", [&](Tape& t, NodeId x) { return weighted_sum(t, t.slice(x, r0, r1, c0, c1), ws); }},
        {"concat-rows", [&](Tape& t, NodeId x) {
           const NodeId p[] = {x, t.scale(x, -0.5)};
           return weighted_sum(t, t.concat_rows(p), ws);
         }},
        {"concat-cols", [&](Tape& t, NodeId x) {
           const NodeId p[] = {t.gelu(x), x};
           return weighted_sum(t, t.concat_cols(p), ws);
         }},
        {"scale", [&](Tape& t, NodeId x) { return weighted_sum(t, t.scale(x, -1.7), ws); }},
        {"log", [&](Tape& t, NodeId x) { return weighted_sum(t, t.log(t.softmax_row(x)), ws); }},
        {"select", [&](Tape& t, NodeId x) { return weighted_sum(t, t.select_index(x, flat), ws); }},
    };
    const Tensor x = kbtest::random_matrix(rng, r, c);
    for (const auto& [name, f] : cases) {
      INFO("op " << name << " trial " << trial << " shape " << r << "x" << c);
      CHECK(worst_rel_error(f, x) < 1e-5);
    }
  }
}

TEST_CASE("random 3-layer MLP gradient against central differences") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor w1 = kbtest::random_matrix(rng, 5, 7, 0.5), w2 = kbtest::random_matrix(rng, 7, 6, 0.5),
                 w3 = kbtest::random_matrix(rng, 6, 1, 0.5), b1 = kbtest::random_matrix(rng, 1, 7, 0.1);
    const Builder mlp = [&](Tape& t, NodeId x) {
      const NodeId h1 = t.gelu(t.add(t.matmul(x, t.constant(w1)), t.constant(b1)));
      const NodeId h2 = t.silu(t.matmul(h1, t.constant(w2)));
      return t.sum(t.matmul(h2, t.constant(w3)));
    };
    const Tensor x = kbtest::random_matrix(rng, 3, 5);
    CHECK(worst_rel_error(mlp, x) < 1e-6);
    CHECK(finite_diff_check(mlp, x, 1e-5) < 1e-6);
  }
}

TEST_CASE("finite_diff_check examples") {
  std::mt19937_64 rng(5);
  const Tensor w = kbtest::random_matrix(rng, 1, 6);
  const TapeFunction dot = [&](Tape& t, NodeId x) { return t.sum(t.mul(x, t.constant(w))); };
  CHECK(finite_diff_check(dot, kbtest::random_matrix(rng, 1, 6), 1e-5) < 1e-10);

  const TapeFunction pick = [](Tape& t, NodeId x) { return t.select_index(t.softmax_row(x), {2}); };
  CHECK(finite_diff_check(pick, Tensor::row({0.3, -1.0, 0.8, 0.1}), 1e-5) < 1e-6);

  try {
    finite_diff_check(dot, Tensor::row({1, 2, 3, 4, 5, 6}), 0.0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::invalid_argument);
  }
}

TEST_CASE("errors") {
  Tape t;
  const NodeId a = t.input(Tensor::matrix(2, 3, 1.0));
  const NodeId b = t.input(Tensor::matrix(2, 3, 1.0));
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    FAIL("no error");
    return ErrorCode::io;
  };
  CHECK(code_of([&] { t.matmul(a, b); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { t.add(a, t.input(Tensor::matrix(3, 2, 0.0))); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { backward(t, a); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { backward(t, NodeId{999}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { t.record(static_cast<OpKind>(200), {a}); }) == ErrorCode::unknown_op);
  CHECK(code_of([] { op_kind_from_string("conv2d"); }) == ErrorCode::unknown_op);
  CHECK(code_of([&] { t.log(t.input(Tensor::row({-1.0}))); }) == ErrorCode::non_finite);
  CHECK(op_kind_from_string("softmax-row") == OpKind::softmax_row);
}

TEST_CASE("replay reproduces recorded values") {
  std::mt19937_64 rng(3);
  Tape t;
  const NodeId x = t.input(kbtest::random_matrix(rng, 3, 4));
  const NodeId w = t.constant(kbtest::random_matrix(rng, 4, 4));
  t.sum(t.softmax_row(t.gelu(t.matmul(x, w)), 0));
  const auto again = t.replay();
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(again[i] == t.value(NodeId{static_cast<std::uint32_t>(i)}));
}
