#include <catch2/catch_amalgamated.hpp>

#include "v2s/autodiff.hpp"
#include "v2s/gradcheck.hpp"

using namespace v2s;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// uniform values bounded away from zero, for kinked activations
Tensor<double> rand_away(Shape s, Rng& rng, double lo = 0.2, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) {
    double m = rng.uniform(lo, hi);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

}  // namespace

TEST_CASE("dense identity case") {
  auto x = make_leaf(Tensor<double>::from({1, 2}, {1, 2}));
  auto w = make_leaf(Tensor<double>::from({2, 2}, {1, 0, 0, 1}));
  auto b = make_leaf(Tensor<double>::from({2}, {0, 0}));
  auto y = dense(x, w, b);
  REQUIRE(y->value.shape == Shape{1, 2});
  CHECK(y->value.data[0] == 1.0);
  CHECK(y->value.data[1] == 2.0);
}

TEST_CASE("dense batch of 16 through a 1024-wide layer") {
  Rng rng(7);
  auto x = make_leaf(randn({16, 1024}, rng).cast<float>().cast<double>());
  auto w = make_leaf(randn({1024, 1024}, rng, 0.03));
  auto b = make_leaf(Tensor<double>::zeros({1024}));
  auto y = dense(x, w, b);
  REQUIRE(y->value.shape == Shape{16, 1024});
  for (auto v : y->value.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("dense gradient matches finite differences") {
  Rng rng(11);
  auto x = make_leaf(randn({3, 4}, rng), true);
  auto w = make_leaf(randn({4, 2}, rng), true);
  auto b = make_leaf(randn({2}, rng), true);
  double err = gradcheck({x, w, b}, [&] { return sum(dense(x, w, b)); });
  CHECK(err < 1e-5);
}

TEST_CASE("dense rejects mismatched shapes naming both") {
  auto x = make_leaf(Tensor<double>::zeros({2, 3}));
  auto w = make_leaf(Tensor<double>::zeros({4, 5}));
  auto b = make_leaf(Tensor<double>::zeros({5}));
  try {
    dense(x, w, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(3);
  auto x = make_leaf(randn({1, 1, 5, 5}, rng));
  auto k = make_leaf(Tensor<double>::from({1, 1, 1, 1}, {1.0}));
  auto y = conv2d(x, k, {1, 1}, Padding::same);
  REQUIRE(y->value.shape == x->value.shape);
  for (std::size_t i = 0; i < y->value.size(); ++i)
    CHECK(y->value.data[i] == x->value.data[i]);
}

namespace {

// direct cross-correlation, same layout and padding semantics as conv2d
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& k, std::size_t sy,
                              std::size_t sx, Padding pad) {
  std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  std::size_t F = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  std::size_t ho, wo;
  std::ptrdiff_t pt, pl;
  if (pad == Padding::same) {
    ho = (H + sy - 1) / sy;
    wo = (W + sx - 1) / sx;
    std::size_t nh = (ho - 1) * sy + kh, nw = (wo - 1) * sx + kw;
    pt = nh > H ? static_cast<std::ptrdiff_t>((nh - H) / 2) : 0;
    pl = nw > W ? static_cast<std::ptrdiff_t>((nw - W) / 2) : 0;
  } else {
    ho = (H - kh) / sy + 1;
    wo = (W - kw) / sx + 1;
    pt = pl = 0;
  }
  Tensor<double> out(Shape{N, F, ho, wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * sy + dy) - pt;
                std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * sx + dx) - pl;
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                    ix >= static_cast<std::ptrdiff_t>(W))
                  continue;
                acc += x.at4(n, c, iy, ix) * k.at4(f, c, dy, dx);
              }
          out.at4(n, f, oy, ox) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches nested-loop reference") {
  Rng rng(17);
  auto x = make_leaf(randn({1, 2, 6, 6}, rng));
  auto k = make_leaf(randn({3, 2, 3, 3}, rng));
  for (auto pad : {Padding::same, Padding::valid}) {
    for (std::size_t s : {std::size_t(1), std::size_t(2)}) {
      auto y = conv2d(x, k, {s, s}, pad);
      auto ref = conv_reference(x->value, k->value, s, s, pad);
      REQUIRE(y->value.shape == ref.shape);
      for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(y->value.data[i] - ref.data[i]) < 1e-10);
    }
  }
}

TEST_CASE("stride-2 schedule reduces 160x128 to 5x4") {
  Rng rng(23);
  auto x = make_leaf(randn({1, 1, 160, 128}, rng));
  auto k = make_leaf(randn({1, 1, 3, 3}, rng, 0.1));
  auto cur = x;
  for (int i = 0; i < 5; ++i) cur = conv2d(cur, k, {2, 2}, Padding::same);
  REQUIRE(cur->value.shape == Shape{1, 1, 5, 4});
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(29);
  auto x = make_leaf(randn({1, 2, 5, 4}, rng), true);
  auto k = make_leaf(randn({3, 2, 3, 3}, rng), true);
  double err = gradcheck({x, k}, [&] { return sum(conv2d(x, k, {2, 2}, Padding::same)); });
  CHECK(err < 1e-4);
  err = gradcheck({x, k}, [&] { return sum(conv2d(x, k, {1, 1}, Padding::valid)); });
  CHECK(err < 1e-4);
}

TEST_CASE("conv2d rejects kernels larger than the input") {
  auto x = make_leaf(Tensor<double>::zeros({1, 1, 2, 2}));
  auto k = make_leaf(Tensor<double>::zeros({1, 1, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, k, {1, 1}, Padding::valid), ShapeError);
}

namespace {

struct BnFixture {
  NodePtr<double> x, gamma, beta, rmean, rvar;
  BnFixture(Shape xs, Rng& rng, bool grad = true) {
    std::size_t c = xs[1];
    x = make_leaf(randn(xs, rng), grad);
    gamma = make_leaf(Tensor<double>::full({c}, 1.0), grad);
    beta = make_leaf(Tensor<double>::zeros({c}), grad);
    rmean = make_leaf(Tensor<double>::zeros({c}));
    rvar = make_leaf(Tensor<double>::full({c}, 1.0));
  }
};

}  // namespace

TEST_CASE("batch_norm constant channel yields beta") {
  Rng rng(31);
  BnFixture f({2, 3, 2, 2}, rng, false);
  std::fill(f.x->value.data.begin(), f.x->value.data.end(), 4.2);
  f.beta->value = Tensor<double>::from({3}, {0.5, -1.0, 2.0});
  auto y = batch_norm(f.x, f.gamma, f.beta, Mode::train, f.rmean, f.rvar);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t s = 0; s < 4; ++s)
        CHECK(std::abs(y->value.data[(n * 3 + c) * 4 + s] - f.beta->value.data[c]) < 1e-9);
}

TEST_CASE("batch_norm train mode normalizes per channel") {
  Rng rng(37);
  BnFixture f({4, 3, 5, 5}, rng, false);
  for (auto& v : f.x->value.data) v = 3.0 + 2.0 * v;
  auto y = batch_norm(f.x, f.gamma, f.beta, Mode::train, f.rmean, f.rvar);
  std::size_t spatial = 25, M = 4 * spatial;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t s = 0; s < spatial; ++s) mean += y->value.data[(n * 3 + c) * spatial + s];
    mean /= M;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t s = 0; s < spatial; ++s) {
        double d = y->value.data[(n * 3 + c) * spatial + s] - mean;
        var += d * d;
      }
    var /= M;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  // running stats moved toward batch stats with momentum 0.99
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(f.rmean->value.data[c] != 0.0);
    CHECK(std::abs(f.rmean->value.data[c]) < std::abs(0.011 * 3.0 + 0.01));
  }
}

TEST_CASE("batch_norm gradient matches finite differences") {
  Rng rng(41);
  BnFixture f({4, 3, 2, 2}, rng);
  auto wobble = constant(randn({4, 3, 2, 2}, rng));
  double err = gradcheck({f.x, f.gamma, f.beta}, [&] {
    // fresh running stats per rebuild so the train-mode update never drifts
    auto rm = make_leaf(Tensor<double>::zeros({3}));
    auto rv = make_leaf(Tensor<double>::full({3}, 1.0));
    return sum(mul(batch_norm(f.x, f.gamma, f.beta, Mode::train, rm, rv), wobble));
  });
  CHECK(err < 1e-4);

  f.rmean->value = randn({3}, rng, 0.1);
  f.rvar->value = Tensor<double>::from({3}, {0.5, 1.5, 2.0});
  err = gradcheck({f.x, f.gamma, f.beta}, [&] {
    return sum(mul(batch_norm(f.x, f.gamma, f.beta, Mode::infer, f.rmean, f.rvar), wobble));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("batch_norm single-element channels stay finite via epsilon") {
  Rng rng(43);
  BnFixture f({1, 2, 1, 1}, rng, false);
  auto y = batch_norm(f.x, f.gamma, f.beta, Mode::train, f.rmean, f.rvar);
  for (auto v : y->value.data) CHECK(std::isfinite(v));
}

TEST_CASE("activation fixed points and slopes") {
  auto x = make_leaf(Tensor<double>::from({1, 3}, {0.0, -1.0, 2.0}));
  auto lr = activation(x, Act::leaky_relu, 0.3);
  CHECK(lr->value.data[0] == 0.0);
  CHECK(lr->value.data[1] == Catch::Approx(-0.3));
  CHECK(lr->value.data[2] == 2.0);
  auto th = activation(x, Act::tanh_);
  CHECK(th->value.data[0] == 0.0);
  CHECK(th->value.data[1] < 0.0);
  CHECK(th->value.data[1] > -1.0);
  auto r = activation(x, Act::relu);
  CHECK(r->value.data[1] == 0.0);
  CHECK(r->value.data[2] == 2.0);
}

TEST_CASE("activation gradients match finite differences") {
  Rng rng(47);
  auto x = make_leaf(rand_away({2, 5}, rng), true);
  for (auto kind : {Act::relu, Act::leaky_relu, Act::tanh_, Act::sigmoid}) {
    x->zero_grad();
    double err = gradcheck({x}, [&] { return sum(activation(x, kind, 0.3)); });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("dropout identity cases") {
  Rng rng(53);
  auto x = make_leaf(randn({4, 4}, rng));
  Rng r1(1);
  CHECK(dropout(x, 0.0, Mode::train, r1) == x);
  CHECK(dropout(x, 0.9, Mode::infer, r1) == x);
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, r1), ConfigError);
  CHECK_THROWS_AS(dropout(x, 1.5, Mode::train, r1), ConfigError);
}

TEST_CASE("dropout statistics at rate one half") {
  auto x = make_leaf(Tensor<double>::full({100000}, 1.0));
  Rng rng(59);
  auto y = dropout(x, 0.5, Mode::train, rng);
  std::size_t survivors = 0;
  double total = 0;
  for (auto v : y->value.data) {
    if (v != 0.0) {
      ++survivors;
      CHECK(v == 2.0);
    }
    total += v;
  }
  double frac = double(survivors) / 100000.0;
  CHECK(frac > 0.49);
  CHECK(frac < 0.51);
  CHECK(std::abs(total / 100000.0 - 1.0) < 0.02);
}

namespace {

GruCell<double> make_gru(std::size_t in, std::size_t hidden, Rng& rng, bool grad = true) {
  GruCell<double> c;
  auto mk = [&](Shape s) { return make_leaf(randn(std::move(s), rng, 0.5), grad); };
  c.wz = mk({in, hidden});
  c.uz = mk({hidden, hidden});
  c.bz = mk({hidden});
  c.wr = mk({in, hidden});
  c.ur = mk({hidden, hidden});
  c.br = mk({hidden});
  c.wh = mk({in, hidden});
  c.uh = mk({hidden, hidden});
  c.bh = mk({hidden});
  return c;
}

}  // namespace

TEST_CASE("gru update gate forced open keeps previous state") {
  Rng rng(61);
  auto cell = make_gru(4, 6, rng, false);
  cell.bz->value = Tensor<double>::full({6}, 20.0);  // z ~ 1
  auto x = make_leaf(randn({1, 4}, rng));
  auto h = make_leaf(randn({1, 6}, rng));
  auto h2 = gru_step(x, h, cell);
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(std::abs(h2->value.data[i] - h->value.data[i]) < 1e-3);
}

TEST_CASE("bidirectional gru over T steps gives T x 2H") {
  Rng rng(67);
  std::size_t T = 5, H = 128, in = 16;
  auto fwd = make_gru(in, H, rng, false);
  auto bwd = make_gru(in, H, rng, false);
  std::vector<NodePtr<double>> xs;
  for (std::size_t t = 0; t < T; ++t) xs.push_back(make_leaf(randn({1, in}, rng)));

  std::vector<NodePtr<double>> hf(T), hb(T);
  auto h = make_leaf(Tensor<double>::zeros({1, H}));
  for (std::size_t t = 0; t < T; ++t) hf[t] = h = gru_step(xs[t], h, fwd);
  h = make_leaf(Tensor<double>::zeros({1, H}));
  for (std::size_t t = T; t-- > 0;) hb[t] = h = gru_step(xs[t], h, bwd);

  std::vector<NodePtr<double>> rows;
  for (std::size_t t = 0; t < T; ++t) rows.push_back(concat_cols<double>({hf[t], hb[t]}));
  auto out = concat_rows(rows);
  REQUIRE(out->value.shape == Shape{T, 2 * H});
}

TEST_CASE("gru three-step unroll gradient matches finite differences") {
  Rng rng(71);
  auto cell = make_gru(2, 3, rng);
  auto x1 = make_leaf(randn({1, 2}, rng), true);
  auto x2 = make_leaf(randn({1, 2}, rng), true);
  auto x3 = make_leaf(randn({1, 2}, rng), true);
  auto h0 = make_leaf(randn({1, 3}, rng), true);
  std::vector<NodePtr<double>> leaves = {x1,      x2,      x3,      h0,      cell.wz, cell.uz,
                                         cell.bz, cell.wr, cell.ur, cell.br, cell.wh, cell.uh,
                                         cell.bh};
  double err = gradcheck(leaves, [&] {
    auto h = gru_step(x1, h0, cell);
    h = gru_step(x2, h, cell);
    h = gru_step(x3, h, cell);
    return sum(h);
  });
  CHECK(err < 1e-4);
}

namespace {

HighwayParams<double> make_highway(std::size_t d, Rng& rng, bool grad = true) {
  HighwayParams<double> p;
  p.wh = make_leaf(randn({d, d}, rng, 0.5), grad);
  p.bh = make_leaf(randn({d}, rng, 0.2), grad);
  p.wt = make_leaf(randn({d, d}, rng, 0.5), grad);
  p.bt = make_leaf(randn({d}, rng, 0.2), grad);
  return p;
}

}  // namespace

TEST_CASE("highway carry and transform extremes") {
  Rng rng(73);
  auto p = make_highway(4, rng, false);
  auto x = make_leaf(randn({2, 4}, rng));

  p.bt->value = Tensor<double>::full({4}, -20.0);
  auto carry = highway(x, p);
  for (std::size_t i = 0; i < carry->value.size(); ++i)
    CHECK(std::abs(carry->value.data[i] - x->value.data[i]) < 1e-6);

  p.bt->value = Tensor<double>::full({4}, 20.0);
  auto through = highway(x, p);
  auto href = activation(dense(x, p.wh, p.bh), Act::relu);
  for (std::size_t i = 0; i < through->value.size(); ++i)
    CHECK(std::abs(through->value.data[i] - href->value.data[i]) < 1e-6);
}

TEST_CASE("highway gradient matches finite differences") {
  Rng rng(79);
  auto p = make_highway(8, rng);
  auto x = make_leaf(rand_away({2, 8}, rng), true);
  // keep relu preactivations away from the kink so central differences hold
  p.bh->value = Tensor<double>::full({8}, 3.0);
  double err = gradcheck({x, p.wh, p.bh, p.wt, p.bt}, [&] { return sum(highway(x, p)); });
  CHECK(err < 1e-4);
}

TEST_CASE("backward of sum gives all-ones") {
  Rng rng(83);
  auto x = make_leaf(randn({3, 4}, rng), true);
  auto loss = sum(x);
  backward(loss);
  for (auto g : x->grad.data) CHECK(g == 1.0);
}

TEST_CASE("mse of identical tensors backpropagates zeros") {
  Rng rng(89);
  auto a = make_leaf(randn({4, 4}, rng), true);
  auto b = make_leaf(a->value, true);
  auto loss = mse(a, b);
  CHECK(loss->value.data[0] == 0.0);
  backward(loss);
  for (auto g : a->grad.data) CHECK(g == 0.0);
  for (auto g : b->grad.data) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = make_leaf(Tensor<double>::zeros({2, 2}), true);
  CHECK_THROWS_AS(backward(add(x, x)), ShapeError);
}

TEST_CASE("parameter outside the graph keeps zero gradient") {
  Rng rng(97);
  auto x = make_leaf(randn({2, 2}, rng), true);
  auto unused = make_leaf(randn({2, 2}, rng), true);
  unused->ensure_grad();
  backward(sum(mul(x, x)));
  for (auto g : unused->grad.data) CHECK(g == 0.0);
}

TEST_CASE("backward accumulates across calls until zeroed") {
  Rng rng(101);
  auto x = make_leaf(randn({3}, rng), true);
  backward(sum(x));
  backward(sum(x));
  for (auto g : x->grad.data) CHECK(g == 2.0);
  x->zero_grad();
  backward(sum(x));
  for (auto g : x->grad.data) CHECK(g == 1.0);
}

TEST_CASE("forward is deterministic under a fixed seed") {
  Rng data_rng(103);
  auto x = make_leaf(randn({8, 8}, data_rng), true);
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    auto y = dropout(activation(x, Act::tanh_), 0.25, Mode::train, rng);
    return y->value.data;
  };
  CHECK(run(5) == run(5));
  CHECK(run(5) != run(6));
}

TEST_CASE("shape plumbing ops backpropagate exactly") {
  Rng rng(107);
  auto a = make_leaf(randn({3, 4}, rng), true);
  auto b = make_leaf(randn({3, 2}, rng), true);
  auto wob = constant(randn({2, 12}, rng));
  double err = gradcheck({a, b}, [&] {
    auto cat = concat_cols<double>({a, b});               // 3x6
    auto t = transpose2d(slice_rows(cat, 1, 3));          // 2x6 -> 6x2
    auto r = reshape(transpose2d(t), {2, 6});             // 2x6
    auto r2 = concat_rows<double>({r, r});                // 4x6
    return sum(mul(reshape(r2, {2, 12}), wob));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("maxpool and global average pool gradients") {
  Rng rng(109);
  auto x = make_leaf(randn({2, 3, 2, 7}, rng), true);
  double err = gradcheck({x}, [&] { return sum(maxpool_w(x, 2)); });
  CHECK(err < 1e-4);
  err = gradcheck({x}, [&] { return sum(global_avg_pool(x)); });
  CHECK(err < 1e-6);
  auto y = maxpool_w(x, 2);
  REQUIRE(y->value.shape == x->value.shape);
  // last column pools only itself
  for (std::size_t p = 0; p < 2 * 3 * 2; ++p)
    CHECK(y->value.data[p * 7 + 6] == x->value.data[p * 7 + 6]);
}
