#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "tlam/autodiff.hpp"
#include "tlam/errors.hpp"
#include "tlam/nn_ops.hpp"
#include "tlam/rng.hpp"
#include "tlam/train.hpp"

using namespace tlam;
using doctest::Approx;

namespace {

std::vector<double> normals(Rng& rng, std::size_t n, double s = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = s * rng.normal();
  return v;
}

nn::BlockParams<double> random_block(std::size_t d, std::size_t heads, std::uint64_t seed) {
  Rng rng(seed);
  nn::BlockParams<double> p;
  p.d = d;
  const double w = 1.0 / std::sqrt(static_cast<double>(d));
  auto shifted = [&](double c) {
    auto v = normals(rng, d, 0.3);
    for (auto& x : v) x += c;
    return v;
  };
  p.ln1 = {shifted(1.0), shifted(0.0)};
  p.ln2 = {shifted(1.0), shifted(0.0)};
  p.attn.heads = heads;
  p.attn.wq = normals(rng, d * d, w);
  p.attn.wk = normals(rng, d * d, w);
  p.attn.wv = normals(rng, d * d, w);
  p.attn.wo = normals(rng, d * d, w);
  p.attn.bo = normals(rng, d, 0.1);
  p.w1 = normals(rng, d * 4 * d, w);
  p.b1 = normals(rng, 4 * d, 0.1);
  p.w2 = normals(rng, 4 * d * d, 0.5 * w);
  p.b2 = normals(rng, d, 0.1);
  return p;
}

ParamStore block_store(const nn::BlockParams<double>& p, const nn::TokenMatrix<double>& z) {
  const std::size_t d = p.d, f = p.hidden();
  ParamStore s;
  s.set("x", {z.rows, d}, z.data);
  s.set("ln1.gamma", {d}, p.ln1.gamma);
  s.set("ln1.beta", {d}, p.ln1.beta);
  s.set("ln2.gamma", {d}, p.ln2.gamma);
  s.set("ln2.beta", {d}, p.ln2.beta);
  s.set("attn.Wq", {d, d}, p.attn.wq);
  s.set("attn.Wk", {d, d}, p.attn.wk);
  s.set("attn.Wv", {d, d}, p.attn.wv);
  s.set("attn.Wo", {d, d}, p.attn.wo);
  s.set("attn.bo", {d}, p.attn.bo);
  s.set("mlp.W1", {d, f}, p.w1);
  s.set("mlp.b1", {f}, p.b1);
  s.set("mlp.W2", {f, d}, p.w2);
  s.set("mlp.b2", {d}, p.b2);
  return s;
}

// One pre-norm block on the tape; the whole token matrix is a single group.
ad::Var tape_block(ad::Tape& t, const ParamStore& s, std::size_t heads) {
  using namespace ad;
  const Var x = t.param("x", s);
  const std::size_t n = t.rows(x);
  const Var h = layer_norm_rows(t, x, t.param("ln1.gamma", s), t.param("ln1.beta", s), nn::kLayerNormEps);
  const Var att = grouped_attention(t, matmul(t, h, t.param("attn.Wq", s)), matmul(t, h, t.param("attn.Wk", s)),
                                    matmul(t, h, t.param("attn.Wv", s)), n, heads);
  const Var z1 = add(t, add_row(t, matmul(t, att, t.param("attn.Wo", s)), t.param("attn.bo", s)), x);
  const Var h2 = layer_norm_rows(t, z1, t.param("ln2.gamma", s), t.param("ln2.beta", s), nn::kLayerNormEps);
  const Var f = gelu(t, add_row(t, matmul(t, h2, t.param("mlp.W1", s)), t.param("mlp.b1", s)));
  return add(t, add_row(t, matmul(t, f, t.param("mlp.W2", s)), t.param("mlp.b2", s)), z1);
}

// Scalar probe of a matrix output: mean squared distance to a fixed target.
DiffLoss probe_loss(std::function<ad::Var(ad::Tape&, const ParamStore&)> build, std::vector<double> target) {
  return [build, target](const ParamStore& s, ParamStore* grads) {
    ad::Tape t;
    const ad::Var out = build(t, s);
    const ad::Var loss = ad::mse(t, out, t.constant(t.rows(out), t.cols(out), target));
    if (grads) *grads = t.backward(loss);
    return t.scalar(loss);
  };
}

}  // namespace

TEST_CASE("gelu matches the reference values") {
  // Oracle: tests/oracles/derive.py
  CHECK(nn::gelu(3.0) == Approx(2.996362607918227).epsilon(1e-12));
  CHECK(nn::gelu(-3.0) == Approx(-0.0036373920817729943).epsilon(1e-12));
  CHECK(nn::gelu(1.0) == Approx(0.8411919906082768).epsilon(1e-12));
  CHECK(nn::gelu(-1.0) == Approx(-0.15880800939172324).epsilon(1e-12));
  CHECK(nn::gelu(0.3) == Approx(0.18537092354275922).epsilon(1e-12));
  CHECK(nn::gelu(0.0) == 0.0);
  for (double x : {-2.5, -0.4, 0.0, 0.7, 3.1}) {
    const double h = 1e-6;
    CHECK(nn::gelu_derivative(x) == Approx((nn::gelu(x + h) - nn::gelu(x - h)) / (2 * h)).epsilon(1e-7));
  }
}

TEST_CASE("linear is A x + b with A output x input") {
  Rng rng(4);
  const auto a = normals(rng, 8 * 4), x = normals(rng, 4), b = normals(rng, 8);
  const auto y = nn::linear(x, a, b);
  REQUIRE(y.size() == 8);
  for (std::size_t o = 0; o < 8; ++o) {
    double ref = b[o];
    for (std::size_t i = 0; i < 4; ++i) ref += a[o * 4 + i] * x[i];
    CHECK(y[o] == Approx(ref).epsilon(1e-14));
  }
  CHECK_THROWS_AS(nn::linear(x, std::vector<double>(31), b), ShapeError);
}

TEST_CASE("layer_norm") {
  const auto y = nn::layer_norm<double>({1.0, 2.0, 4.0}, {1.0, 0.5, 2.0}, {0.0, 1.0, -1.0}, 1e-5);
  CHECK(y[0] == Approx(-1.0690415314502977).epsilon(1e-12));
  CHECK(y[1] == Approx(0.8663698085687127).epsilon(1e-12));
  CHECK(y[2] == Approx(1.6726038286257436).epsilon(1e-12));

  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = normals(rng, 8, 3.0);
    const auto n = nn::layer_norm<double>(x, std::vector<double>(8, 1.0), std::vector<double>(8, 0.0));
    double m = 0, v = 0;
    for (auto t : n) m += t;
    m /= 8;
    for (auto t : n) v += (t - m) * (t - m);
    v /= 8;
    CHECK(std::abs(m) <= 1e-12);
    CHECK(v == Approx(1.0).epsilon(1e-5));
  }
  const auto c = nn::layer_norm<double>({5.0, 5.0, 5.0}, {1, 1, 1}, {0.2, -0.1, 0.0});
  CHECK(c[0] == Approx(0.2));
  CHECK(c[1] == Approx(-0.1));
  CHECK(c[2] == 0.0);
}

TEST_CASE("softmax") {
  const auto y = nn::softmax<double>({1.0, 2.0, 3.0});
  CHECK(y[0] == Approx(0.09003057317038046).epsilon(1e-14));
  CHECK(y[1] == Approx(0.24472847105479764).epsilon(1e-14));
  CHECK(y[2] == Approx(0.6652409557748218).epsilon(1e-14));
  const auto z = nn::softmax<double>({0.0, std::log(3.0)});
  CHECK(z[0] == Approx(0.25).epsilon(1e-14));
  CHECK(z[1] == Approx(0.75).epsilon(1e-14));
  const auto big = nn::softmax<double>({1000.0, 1000.0});
  CHECK(big[0] == 0.5);

  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const auto v = nn::softmax(normals(rng, 1 + trial % 9, 10.0));
    double s = 0;
    for (auto t : v) {
      CHECK(t >= 0.0);
      s += t;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("attention on two scalar tokens") {
  nn::AttentionParams<double> p{1, {1.0}, {1.0}, {1.0}, {1.0}, {0.0}};
  const nn::TokenMatrix<double> z(2, 1, {0.0, 1.0});
  std::uint64_t macs = 0;
  const auto out = nn::multi_head_self_attention(z, p, &macs);
  CHECK(out.data[0] == Approx(0.5).epsilon(1e-14));
  CHECK(out.data[1] == Approx(0.7310585786300049).epsilon(1e-14));
  CHECK(macs == 2 * 2 * 2 * 1);
}

TEST_CASE("attention with one token returns its value projection") {
  Rng rng(12);
  const std::size_t d = 6;
  nn::AttentionParams<double> p{3, normals(rng, d * d), normals(rng, d * d), normals(rng, d * d), normals(rng, d * d),
                                normals(rng, d)};
  const nn::TokenMatrix<double> z(1, d, normals(rng, d));
  const auto out = nn::multi_head_self_attention(z, p);
  for (std::size_t c = 0; c < d; ++c) {
    double ref = p.bo[c];
    for (std::size_t i = 0; i < d; ++i) {
      double v = 0;
      for (std::size_t k = 0; k < d; ++k) v += z.data[k] * p.wv[k * d + i];
      ref += v * p.wo[i * d + c];
    }
    CHECK(out.data[c] == Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("residual identities") {
  Rng rng(13);
  const std::size_t d = 4;
  auto p = random_block(d, 2, 5);
  const nn::TokenMatrix<double> z(3, d, normals(rng, 3 * d));

  SUBCASE("zero output projection makes the MSA block the identity") {
    std::fill(p.attn.wo.begin(), p.attn.wo.end(), 0.0);
    std::fill(p.attn.bo.begin(), p.attn.bo.end(), 0.0);
    const auto out = nn::msa_block(z, p);
    for (std::size_t i = 0; i < z.data.size(); ++i) CHECK(out.data[i] == z.data[i]);
  }
  SUBCASE("zero second MLP layer makes the MLP block the identity") {
    std::fill(p.w2.begin(), p.w2.end(), 0.0);
    std::fill(p.b2.begin(), p.b2.end(), 0.0);
    const auto out = nn::mlp_block(z, p);
    for (std::size_t i = 0; i < z.data.size(); ++i) CHECK(out.data[i] == z.data[i]);
  }
}

TEST_CASE("mlp_block, d = 1") {
  nn::BlockParams<double> p;
  p.d = 1;
  p.ln1 = {{1.0}, {0.0}};
  p.ln2 = {{2.0}, {0.3}};
  p.attn = {1, {1.0}, {1.0}, {1.0}, {1.0}, {0.0}};
  p.w1 = {0.5, -1.0, 2.0, 0.1};
  p.b1 = {0.1, 0.2, -0.3, 0.0};
  p.w2 = {1.0, -0.5, 0.25, 2.0};
  p.b2 = {0.05};
  const auto out = nn::mlp_block(nn::TokenMatrix<double>(1, 1, {1.7}), p);
  CHECK(out.data[0] == Approx(1.999744693936699).epsilon(1e-12));
}

TEST_CASE("msa_block, one token") {
  nn::BlockParams<double> p = random_block(2, 1, 3);
  p.ln1 = {{1.5, 0.5}, {0.1, -0.2}};
  p.attn.wv = {0.3, -0.7, 1.1, 0.2};
  p.attn.wo = {0.5, 0.25, -1.0, 2.0};
  p.attn.bo = {0.01, -0.02};
  const auto out = nn::msa_block(nn::TokenMatrix<double>(1, 2, {0.4, -1.2}), p);
  CHECK(out.data[0] == Approx(1.5249914063507068).epsilon(1e-12));
  CHECK(out.data[1] == Approx(-3.812481836150357).epsilon(1e-12));
}

TEST_CASE("transformer block is permutation-equivariant over tokens") {
  Rng rng(14);
  for (std::size_t n : {2u, 3u, 5u}) {
    const std::size_t d = 8;
    const auto p = random_block(d, 2, 100 + n);
    const nn::TokenMatrix<double> z(n, d, normals(rng, n * d));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = (i * 2 + 1) % n;
    if (n == 2) perm = {1, 0};
    nn::TokenMatrix<double> zp(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) zp.at(i, c) = z.at(perm[i], c);
    }
    const auto y = nn::transformer_block(z, p), yp = nn::transformer_block(zp, p);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) CHECK(yp.at(i, c) == Approx(y.at(perm[i], c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("block shape errors") {
  auto p = random_block(6, 2, 1);
  CHECK_THROWS_AS(nn::transformer_block(nn::TokenMatrix<double>(2, 5), p), ShapeError);
  p.attn.heads = 4;
  CHECK_THROWS_AS(nn::transformer_block(nn::TokenMatrix<double>(2, 6), p), ShapeError);
  CHECK_THROWS_AS(nn::TokenMatrix<double>(2, 2, {1.0}), ShapeError);
}

TEST_CASE("tape block forward equals the direct block") {
  Rng rng(15);
  for (std::size_t n : {1u, 2u, 4u}) {
    for (std::size_t d : {2u, 8u}) {
      const auto p = random_block(d, 2, n * 10 + d);
      const nn::TokenMatrix<double> z(n, d, normals(rng, n * d));
      const auto direct = nn::transformer_block(z, p);
      ad::Tape t;
      const auto out = tape_block(t, block_store(p, z), 2);
      const auto v = t.value(out);
      for (std::size_t i = 0; i < n * d; ++i) CHECK(v[i] == Approx(direct.data[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("tape block gradients match central differences") {
  Rng rng(16);
  GradCheckOptions opts;
  for (std::size_t n : {1u, 2u, 4u}) {
    for (std::size_t d : {2u, 8u}) {
      CAPTURE(n);
      CAPTURE(d);
      const auto p = random_block(d, 2, 1000 + n * 10 + d);
      const nn::TokenMatrix<double> z(n, d, normals(rng, n * d));
      const auto store = block_store(p, z);
      const auto loss = probe_loss([](ad::Tape& t, const ParamStore& s) { return tape_block(t, s, 2); },
                                   normals(rng, n * d));
      const auto r = finite_diff_check(store, loss, opts);
      CHECK(r.checked == store.element_count());
      CHECK(r.max_rel_error <= 1e-4);
      CHECK(r.passed);
    }
  }
}

TEST_CASE("elementwise tape ops match central differences") {
  Rng rng(17);
  ParamStore s;
  s.set("a", {3, 4}, normals(rng, 12));
  s.set("b", {3, 4}, normals(rng, 12));
  s.set("bias", {4}, normals(rng, 4));
  s.set("c", {3, 2}, normals(rng, 6));
  s.set("A", {5, 4}, normals(rng, 20));
  const auto build = [](ad::Tape& t, const ParamStore& st) {
    using namespace ad;
    const Var a = t.param("a", st), b = t.param("b", st);
    Var x = add_row(t, sub(t, a, scale(t, b, 0.7)), t.param("bias", st));
    x = add(t, relu(t, add_scalar(t, x, 0.2)), softmax_rows(t, x));
    Var y = concat_cols(t, matmul_bt(t, x, t.param("A", st)), t.param("c", st));
    return group_mean(t, interleave_rows(t, {y, gelu(t, y)}), 2);
  };
  const auto r = finite_diff_check(s, probe_loss(build, normals(rng, 21)));
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.passed);
}

TEST_CASE("backward basics") {
  ParamStore s;
  s.set("x", {2, 3}, {1, 2, 3, 4, 5, 6});
  s.set("unused", {2}, {1, 1});
  ad::Tape t;
  const auto x = t.param("x", s);
  (void)t.param("unused", s);
  CHECK(t.param("x", s).id == x.id);
  const auto g = t.backward(ad::sum_all(t, x));
  for (auto v : g.values("x")) CHECK(v == 1.0);
  for (auto v : g.values("unused")) CHECK(v == 0.0);

  ad::Tape t2;
  const auto m = ad::mean_all(t2, t2.param("x", s));
  for (auto v : t2.backward(m).values("x")) CHECK(v == Approx(1.0 / 6.0));
  CHECK(t2.scalar(m) == Approx(3.5));

  ad::Tape t3;
  const auto y = ad::scale(t3, t3.param("x", s), 2.0);
  CHECK_THROWS_AS(t3.backward(y), ContractError);
  CHECK_THROWS_AS(t3.scalar(y), ContractError);
}
