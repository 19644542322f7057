#include <array>
#include <cmath>
#include <numeric>

#include <doctest.h>

#include "steer/adam.hpp"
#include "steer/errors.hpp"
#include "steer/nn.hpp"
#include "steer/ops.hpp"
#include "support.hpp"

using namespace steer;
using steer::testing::check_gradients;
using steer::testing::random_parameter;
using steer::testing::uniform_values;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// sum(f(x) * w) with a fixed random weighting so every output entry matters.
Tensor weighted(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

void check_unary(const char* name, Tensor (*f)(const Tensor&), double lo = -2.0,
                 double hi = 2.0) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
    Tensor x = Tensor::parameter({r, c}, uniform_values(rng, r * c, lo, hi));
    const Shape out_shape = f(x).shape();
    const Tensor w = Tensor::from(out_shape, uniform_values(rng, shape_numel(out_shape)));
    const auto res = check_gradients({x}, [&] { return weighted(f(x), w); }, rng);
    INFO(name, " seed ", seed, " ", res.worst);
    CHECK(res.max_rel_error < kTol);
  }
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(values(ops::matmul(eye, m)) == std::vector<double>{1, 2, 3, 4});
  const Tensor proj = Tensor::from({2, 2}, {1, 0, 0, 0});
  const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(values(ops::matmul(proj, b)) == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum(a.b) is b transposed broadcast") {
  Rng rng(7);
  Tensor a = random_parameter(rng, {3, 4});
  Tensor b = random_parameter(rng, {4, 2});
  {
    Graph g;
    GraphScope scope(g);
    g.backward(ops::sum(ops::matmul(a, b)));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(b.at(k, 0) + b.at(k, 1)).epsilon(1e-14));
    }
  }
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng r(seed);
    const std::size_t m = 1 + r.below(4), k = 1 + r.below(4), p = 1 + r.below(4);
    Tensor x = random_parameter(r, {m, k});
    Tensor y = random_parameter(r, {k, p});
    const Tensor w = Tensor::from({m, p}, uniform_values(r, m * p));
    const auto res = check_gradients({x, y}, [&] { return weighted(ops::matmul(x, y), w); }, r);
    INFO(res.worst);
    CHECK(res.max_rel_error < kTol);
  }
}

TEST_CASE("elementwise gradients match finite differences") {
  check_unary("gelu", ops::gelu);
  check_unary("tanh", ops::tanh);
  check_unary("sigmoid", ops::sigmoid);
  check_unary("exp", ops::exp);
  check_unary("square", ops::square);
  check_unary("log_softmax", ops::log_softmax);
  check_unary("row_entropy", [](const Tensor& x) { return ops::row_entropy(ops::log_softmax(x)); });
  check_unary("softmax", [](const Tensor& x) { return ops::softmax(x); });
  check_unary("scale", [](const Tensor& x) { return ops::scale(x, -1.7); });
  check_unary("add_scalar", [](const Tensor& x) { return ops::square(ops::add_scalar(x, 0.3)); });
  check_unary("clamp", [](const Tensor& x) { return ops::clamp(x, -0.5, 0.7); });
  check_unary("mean", [](const Tensor& x) { return ops::scale(ops::mean(ops::square(x)), 3.0); });
}

TEST_CASE("binary and structural gradients match finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(2000 + seed);
    const std::size_t r = 2 + rng.below(3), c = 1 + rng.below(4);
    Tensor a = random_parameter(rng, {r, c});
    Tensor b = random_parameter(rng, {r, c});
    Tensor row = random_parameter(rng, {c});
    Tensor w = random_parameter(rng, {c, 3});
    Tensor bias = random_parameter(rng, {3});
    const Tensor mix = Tensor::from({r, c}, uniform_values(rng, r * c));
    const Tensor mix3 = Tensor::from({r, 3}, uniform_values(rng, r * 3));
    const Tensor lo = Tensor::from({r, c}, uniform_values(rng, r * c, -1.0, -0.2));
    const Tensor hi = Tensor::from({r, c}, uniform_values(rng, r * c, 0.2, 1.0));
    std::vector<std::size_t> index(r + 2), cols(r);
    for (auto& i : index) i = rng.below(r);
    for (auto& i : cols) i = rng.below(c);

    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"add", [&] { return weighted(ops::add(a, b), mix); }},
        {"sub", [&] { return weighted(ops::sub(a, b), mix); }},
        {"mul", [&] { return weighted(ops::mul(a, b), mix); }},
        {"add_row", [&] { return weighted(ops::add_row(a, row), mix); }},
        {"linear", [&] { return weighted(ops::linear(a, w, bias), mix3); }},
        {"minimum", [&] { return weighted(ops::minimum(a, b), mix); }},
        {"maximum", [&] { return weighted(ops::maximum(a, b), mix); }},
        {"clamp_tensor", [&] { return weighted(ops::clamp(a, lo, hi), mix); }},
        {"gather_rows",
         [&] { return ops::sum(ops::square(ops::gather_rows(ops::mul(a, mix), index))); }},
        {"concat_rows",
         [&] {
           const std::array<Tensor, 2> parts{a, ops::square(b)};
           return ops::sum(ops::tanh(ops::concat_rows(parts)));
         }},
        {"concat_cols", [&] { return ops::sum(ops::tanh(ops::concat_cols(a, b))); }},
        {"reshape",
         [&] { return weighted(ops::reshape(ops::square(a), {c, r}), ops::reshape(mix, {c, r})); }},
        {"pick", [&] { return ops::sum(ops::square(ops::pick(ops::mul(a, b), cols))); }},
    };
    for (const auto& [name, f] : cases) {
      const auto res = check_gradients({a, b, row, w, bias}, f, rng);
      INFO(name, " seed ", seed, " ", res.worst);
      CHECK(res.max_rel_error < kTol);
    }
  }
}

TEST_CASE("softmax examples") {
  const Tensor z = Tensor::from({1, 3}, {0, 0, 0});
  const Tensor u = ops::softmax(z);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const std::array<bool, 3> mask{true, true, false};
  const Tensor m = ops::softmax(z, std::span<const bool>(mask));
  CHECK(m.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.at(1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.at(2) == 0.0);

  const Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  const Tensor s = ops::softmax(x);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    CHECK(s.at(i) == doctest::Approx(std::exp(i + 1.0) / denom).epsilon(1e-14));
    total += s.at(i);
  }
  CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("softmax rejects fully masked rows") {
  const Tensor z = Tensor::from({2, 2}, {0, 1, 2, 3});
  const std::array<bool, 4> mask{true, false, false, false};
  CHECK_THROWS_AS(ops::softmax(z, std::span<const bool>(mask)), InvalidMaskError);
}

TEST_CASE("softmax rows sum to one and masked entries are zero") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(6);
    const Tensor x = Tensor::from({r, c}, uniform_values(rng, r * c, -30.0, 30.0));
    std::unique_ptr<bool[]> mask(new bool[r * c]);
    for (std::size_t i = 0; i < r * c; ++i) mask[i] = rng.uniform() < 0.7;
    for (std::size_t i = 0; i < r; ++i) mask[i * c + rng.below(c)] = true;
    const Tensor s = ops::softmax(x, std::span<const bool>(mask.get(), r * c));
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask[i * c + j]) CHECK(s.at(i, j) == 0.0);
        total += s.at(i, j);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer norm examples") {
  const Tensor gain = Tensor::full({3}, 1.0);
  const Tensor bias = Tensor::zeros({3});
  const Tensor flat = ops::layer_norm(Tensor::from({1, 3}, {4, 4, 4}), gain, bias);
  for (double v : flat.data()) CHECK(v == 0.0);

  const Tensor b2 = Tensor::from({3}, {0.5, -1, 2});
  const Tensor shifted = ops::layer_norm(Tensor::from({1, 3}, {4, 4, 4}), gain, b2);
  CHECK(values(shifted) == values(b2));

  const Tensor pm = ops::layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0),
                                    Tensor::zeros({2}));
  // Population variance is 1, so only the epsilon separates this from [1, -1].
  const double expect = 1.0 / std::sqrt(1.0 + ops::kLayerNormEps);
  CHECK(pm.at(0) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(pm.at(1) == doctest::Approx(-expect).epsilon(1e-15));
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer norm gradient matches finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(3000 + seed);
    const std::size_t r = 1 + rng.below(4), c = 2 + rng.below(5);
    Tensor x = random_parameter(rng, {r, c}, 2.0);
    Tensor gain = random_parameter(rng, {c});
    Tensor bias = random_parameter(rng, {c});
    const Tensor w = Tensor::from({r, c}, uniform_values(rng, r * c));
    const auto res = check_gradients(
        {x, gain, bias}, [&] { return weighted(ops::layer_norm(x, gain, bias), w); }, rng);
    INFO("seed ", seed, " ", res.worst);
    CHECK(res.max_rel_error < kTol);
  }
}

TEST_CASE("attention gradients match finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(4000 + seed);
    const std::size_t batch = 1 + rng.below(2), tokens = 1 + rng.below(4), heads = 1 + rng.below(2);
    const std::size_t d = heads * (1 + rng.below(3)), rows = batch * tokens;
    Tensor q = random_parameter(rng, {rows, d});
    Tensor k = random_parameter(rng, {rows, d});
    Tensor v = random_parameter(rng, {rows, d});
    const Tensor w = Tensor::from({rows, d}, uniform_values(rng, rows * d));
    for (bool causal : {false, true}) {
      const auto res = check_gradients(
          {q, k, v},
          [&] { return weighted(ops::attention(q, k, v, batch, tokens, heads, causal).out, w); },
          rng);
      INFO("seed ", seed, " causal ", causal, " ", res.worst);
      CHECK(res.max_rel_error < kTol);
    }
  }
}

TEST_CASE("causal attention weights") {
  Rng rng(5);
  const std::size_t tokens = 4, d = 4, heads = 2;
  const Tensor q = Tensor::from({tokens, d}, uniform_values(rng, tokens * d, -3, 3));
  const Tensor k = Tensor::from({tokens, d}, uniform_values(rng, tokens * d, -3, 3));
  const Tensor v = Tensor::from({tokens, d}, uniform_values(rng, tokens * d));
  const auto out = ops::attention(q, k, v, 1, tokens, heads, true, true);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* w = out.weights.data() + h * tokens * tokens;
    CHECK(w[0] == 1.0);
    for (std::size_t j = 1; j < tokens; ++j) CHECK(w[j] == 0.0);
    for (std::size_t i = 0; i < tokens; ++i) {
      for (std::size_t j = i + 1; j < tokens; ++j) CHECK(w[i * tokens + j] == 0.0);
    }
  }

  const Tensor one = Tensor::from({1, d}, uniform_values(rng, d));
  for (bool causal : {false, true}) {
    const auto single = ops::attention(one, one, one, 1, 1, heads, causal, true);
    for (double w : single.weights) CHECK(w == 1.0);
  }
}

TEST_CASE("causal self-attention ignores later tokens") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(6000 + seed);
    const std::size_t d = 8, tokens = 2 + rng.below(4);
    nn::MultiHeadSelfAttention mhsa(d, 2, rng);
    nn::TransformerBlock block(d, 2, rng);
    Tensor x = Tensor::from({tokens, d}, uniform_values(rng, tokens * d));
    const std::size_t j = rng.below(tokens - 1);
    const Tensor before = mhsa(x, 1, tokens, true);
    const Tensor before_block = block(x, 1, tokens, true);
    Tensor y = x.clone();
    for (std::size_t r = j + 1; r < tokens; ++r) {
      for (std::size_t c = 0; c < d; ++c) y.mutable_data()[r * d + c] = rng.uniform(-5, 5);
    }
    const Tensor after = mhsa(y, 1, tokens, true);
    const Tensor after_block = block(y, 1, tokens, true);
    for (std::size_t r = 0; r <= j; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        CHECK(before.at(r, c) == after.at(r, c));
        CHECK(before_block.at(r, c) == after_block.at(r, c));
      }
    }
  }
}

TEST_CASE("attention width must split across heads") {
  Rng rng(1);
  CHECK_THROWS_AS(nn::MultiHeadSelfAttention(6, 4, rng), ConfigError);
  const Tensor x = Tensor::zeros({2, 6});
  CHECK_THROWS_AS(ops::attention(x, x, x, 1, 2, 4, false), ConfigError);
}

TEST_CASE("layer gradients match finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(7000 + seed);
    const std::size_t d = 4, tokens = 3, batch = 2, rows = batch * tokens;
    const Tensor x = Tensor::from({rows, d}, uniform_values(rng, rows * d));
    const Tensor h = Tensor::from({rows, d}, uniform_values(rng, rows * d));
    const Tensor w = Tensor::from({rows, d}, uniform_values(rng, rows * d));

    nn::Linear linear(d, d, rng);
    nn::LayerNorm norm(d);
    nn::Mlp mlp(d, 3 * d, d, rng);
    nn::MultiHeadSelfAttention mhsa(d, 2, rng);
    nn::TransformerBlock block(d, 2, rng);
    nn::GruCell gru(d, d, rng);
    const auto run = [&](const char* name, auto&& layer, auto&& f) {
      nn::ParameterSet set;
      layer.collect(set, name);
      std::vector<Tensor> ps;
      std::vector<std::string> names;
      for (const auto& p : set.items()) {
        // Perturb from the init so zero biases and unit gains do not hide errors.
        Tensor t = p.tensor;
        for (double& v : t.mutable_data()) v += rng.uniform(-0.3, 0.3);
        ps.push_back(t);
        names.push_back(p.name);
      }
      const auto res = check_gradients(ps, f, rng, 0, names);
      INFO(name, " seed ", seed, " ", res.worst);
      CHECK(res.max_rel_error < kTol);
    };
    run("linear", linear, [&] { return weighted(linear(x), w); });
    run("norm", norm, [&] { return weighted(norm(x), w); });
    run("mlp", mlp, [&] { return weighted(mlp(x), w); });
    run("mhsa", mhsa, [&] { return weighted(mhsa(x, batch, tokens, seed % 2 == 0), w); });
    run("block", block, [&] { return weighted(block(x, batch, tokens, seed % 2 == 1), w); });
    run("gru", gru, [&] { return weighted(gru(x, h), w); });
  }
}

TEST_CASE("backward examples") {
  Rng rng(11);
  Tensor p = random_parameter(rng, {2, 3});
  {
    Graph g;
    GraphScope scope(g);
    g.backward(ops::sum(p));
  }
  for (double v : p.grad()) CHECK(v == 1.0);

  p.zero_grad();
  {
    Graph g;
    GraphScope scope(g);
    g.backward(ops::sum(ops::mul(p, p)));
  }
  for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p.grad()[i] == 2.0 * p.at(i));
}

TEST_CASE("backward accumulates until zeroed") {
  Rng rng(12);
  Tensor p = random_parameter(rng, {4});
  for (int call = 1; call <= 3; ++call) {
    Graph g;
    GraphScope scope(g);
    g.backward(ops::sum(ops::scale(p, 2.0)));
    for (double v : p.grad()) CHECK(v == 2.0 * call);
  }
  p.zero_grad();
  for (double v : p.grad()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Tensor p = Tensor::parameter({2}, {1, 2});
  Graph g;
  GraphScope scope(g);
  const Tensor y = ops::square(p);
  CHECK_THROWS_AS(g.backward(y), ContractError);
}

TEST_CASE("ops without an active graph only compute values") {
  Tensor p = Tensor::parameter({2}, {1, 2});
  const Tensor y = ops::sum(ops::square(p));
  CHECK(y.item() == 5.0);
  CHECK(!y.requires_grad());
  CHECK(active_graph() == nullptr);
}

TEST_CASE("adam examples") {
  nn::ParameterSet set;
  Tensor p = Tensor::parameter({1}, {3.0});
  set.add("p", p);

  AdamState state;
  state.learning_rate = 0.1;
  p.mutable_grad()[0] = 0.0;
  adam_step(set, state);
  CHECK(p.at(0) == 3.0);
  CHECK(state.step == 1);

  AdamState fresh;
  fresh.learning_rate = 0.1;
  p.mutable_grad()[0] = 1.0;
  adam_step(set, fresh);
  CHECK(3.0 - p.at(0) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p.grad()[0] == 0.0);
  CHECK(fresh.first_moment[0].size() == p.numel());
}

TEST_CASE("adam converges on a convex quadratic") {
  Rng rng(13);
  nn::ParameterSet set;
  Tensor p = random_parameter(rng, {3}, 5.0);
  set.add("p", p);
  const Tensor target = Tensor::from({3}, {1.5, -2.0, 0.25});
  AdamState state;
  state.learning_rate = 0.01;
  for (int s = 0; s < 5000; ++s) {
    Graph g;
    GraphScope scope(g);
    g.backward(ops::sum(ops::square(ops::sub(p, target))));
    const std::uint64_t before = state.step;
    adam_step(set, state);
    REQUIRE(state.step == before + 1);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(p.at(i) - target.at(i)) < 1e-3);
}

TEST_CASE("adam rejects state built for other parameters") {
  nn::ParameterSet one, two;
  one.add("p", Tensor::parameter({2}, {1, 2}));
  two.add("p", Tensor::parameter({2}, {1, 2}));
  two.add("q", Tensor::parameter({1}, {3}));
  AdamState state;
  adam_step(one, state);
  CHECK_THROWS_AS(adam_step(two, state), ContractError);
}

TEST_CASE("clip_grad_norm rescales to the bound") {
  nn::ParameterSet set;
  Tensor p = Tensor::parameter({2}, {0, 0});
  set.add("p", p);
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = 4.0;
  CHECK(clip_grad_norm(set, 0.5) == 5.0);
  CHECK(grad_norm(set) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("identical seeds give bit-identical parameters after updates") {
  const auto run = [] {
    Rng rng(99);
    nn::Mlp mlp(3, 8, 2, rng);
    nn::ParameterSet set;
    mlp.collect(set, "mlp");
    AdamState state;
    const Tensor x = Tensor::from({4, 3}, uniform_values(rng, 12));
    for (int k = 0; k < 10; ++k) {
      Graph g;
      GraphScope scope(g);
      g.backward(ops::mean(ops::square(mlp(x))));
      adam_step(set, state);
    }
    std::vector<double> out;
    for (const auto& p : set.items()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
  };
  CHECK(run() == run());
}
