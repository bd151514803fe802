#pragma once

// The full gradient verification suite: central finite differences against
// analytic gradients for every layer type plus a miniature end-to-end model.
// Shared by the gradcheck command and the acceptance checks.

#include <iostream>
#include <string>
#include <vector>

#include "v2s/gradcheck.hpp"
#include "v2s/model.hpp"

namespace v2s::gradsuite {

struct CheckResult {
  std::string name;
  double error = 0;
};

namespace detail {

inline Tensor<double> randn(Shape s, Rng& rng, double scale = 0.5) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

inline NodePtr<double> leaf(Shape s, Rng& rng, double scale = 0.5) {
  return make_leaf(randn(std::move(s), rng, scale), true);
}

}  // namespace detail

// Runs every check and returns (name, max relative error) per layer type.
inline std::vector<CheckResult> run(std::ostream* log = nullptr) {
  using detail::leaf;
  using detail::randn;
  std::vector<CheckResult> results;
  Rng rng(20240915);

  auto record = [&](const std::string& name, double err) {
    results.push_back({name, err});
    if (log) *log << "  " << name << ": max relative error " << err << "\n";
  };

  {
    auto x = leaf({3, 4}, rng), w = leaf({4, 5}, rng), b = leaf({5}, rng);
    auto target = constant(randn({3, 5}, rng));
    record("dense+tanh", gradcheck({x, w, b}, [&] {
             return mse(activation(dense(x, w, b), Act::tanh_), target);
           }));
  }
  {
    auto x = leaf({2, 3, 6, 5}, rng), k = leaf({4, 3, 3, 3}, rng);
    auto target = constant(randn({2, 4, 3, 3}, rng));
    record("conv2d stride 2 + relu", gradcheck({x, k}, [&] {
             return mse(activation(conv2d(x, k, {2, 2}, Padding::same), Act::relu), target);
           }));
  }
  {
    auto x = leaf({2, 3, 4, 3}, rng);
    auto gamma = make_leaf(Tensor<double>({3}, 1.0), true);
    auto beta = make_leaf(Tensor<double>({3}, 0.0), true);
    auto target = constant(randn({2, 3, 4, 3}, rng));
    record("batch_norm train", gradcheck({x, gamma, beta}, [&] {
             auto rm = make_leaf(Tensor<double>({3}, 0.0));
             auto rv = make_leaf(Tensor<double>({3}, 1.0));
             return mse(batch_norm(x, gamma, beta, Mode::train, rm, rv), target);
           }));
  }
  {
    auto x = leaf({2, 3, 4, 6}, rng);
    auto target = constant(randn({2, 3, 4, 6}, rng));
    record("maxpool_w", gradcheck({x}, [&] { return mse(maxpool_w(x, 2), target); }));
  }
  {
    auto x = leaf({2, 5, 3, 4}, rng);
    auto target = constant(randn({2, 5}, rng));
    record("global_avg_pool",
           gradcheck({x}, [&] { return mse(global_avg_pool(x), target); }));
  }
  {
    GruCell<double> cell;
    cell.wz = leaf({4, 6}, rng);
    cell.uz = leaf({6, 6}, rng);
    cell.bz = leaf({6}, rng);
    cell.wr = leaf({4, 6}, rng);
    cell.ur = leaf({6, 6}, rng);
    cell.br = leaf({6}, rng);
    cell.wh = leaf({4, 6}, rng);
    cell.uh = leaf({6, 6}, rng);
    cell.bh = leaf({6}, rng);
    auto x = leaf({2, 4}, rng), h = leaf({2, 6}, rng);
    auto target = constant(randn({2, 6}, rng));
    record("gru_step",
           gradcheck({x, h, cell.wz, cell.uz, cell.bz, cell.wr, cell.ur, cell.br, cell.wh,
                      cell.uh, cell.bh},
                     [&] { return mse(gru_step(x, h, cell), target); }));
  }
  {
    HighwayParams<double> hw;
    hw.wh = leaf({5, 5}, rng);
    hw.bh = leaf({5}, rng);
    hw.wt = leaf({5, 5}, rng);
    hw.bt = leaf({5}, rng);
    auto x = leaf({3, 5}, rng);
    auto target = constant(randn({3, 5}, rng));
    record("highway", gradcheck({x, hw.wh, hw.bh, hw.wt, hw.bt},
                                [&] { return mse(highway(x, hw), target); }));
  }
  {
    auto x = leaf({4, 6}, rng);
    auto target = constant(randn({4, 6}, rng));
    record("dropout train", gradcheck({x}, [&] {
             Rng mask_rng(77);  // same mask on every rebuild
             return mse(dropout(x, 0.3, Mode::train, mask_rng), target);
           }));
  }

  // Miniature end-to-end: a representative low-dimensional leaf from every
  // parameter family, checked through encoder, decoder, and post-net.
  {
    auto cfg = model::miniature_config();
    cfg.dropout = 0;
    cfg.conv_dropout = 0;
    auto params = model::to_double(model::init_params(cfg, 5));
    Tensor<double> pix = randn({cfg.t, cfg.k, cfg.h, cfg.w}, rng, 0.3);
    Tensor<double> flow = randn({cfg.t, (cfg.k - 1) * 2, cfg.h, cfg.w}, rng, 0.3);
    Tensor<double> mel_t(Shape{cfg.t, cfg.n_mels * cfg.l});
    Tensor<double> lin_t(Shape{cfg.t * cfg.l, cfg.d_lin});
    for (auto& v : mel_t.data) v = rng.uniform(0.0, 1.0);
    for (auto& v : lin_t.data) v = rng.uniform(0.0, 1.0);

    std::vector<std::string> names = {
        "enc.pix.stem.bn.beta",   "enc.pix.b1.c2.bn.gamma", "enc.flow.b2.c1.bn.beta",
        "enc.flow.b3.c3.bn.beta", "dec.fc2.b",              "post.bank1.bn.beta",
        "post.hw0.t.b",           "post.gru.fw.bz",
    };
    std::vector<NodePtr<double>> leaves;
    for (const auto& n : names) leaves.push_back(params.at(n));

    auto build = [&] {
      auto emb = model::encoder_forward(pix, flow, params, cfg, Mode::infer);
      Rng drop(1);
      auto dec = model::decoder_forward(emb, params, cfg, Mode::infer, drop);
      auto feats = model::to_feature_space(dec);
      auto seq = model::mel_sequence(feats, cfg.n_mels, cfg.l);
      auto lin = model::postnet_forward(seq, params, cfg, Mode::infer);
      return add(mse(feats, constant(Tensor<double>(mel_t))),
                 mse(lin, constant(Tensor<double>(lin_t))));
    };
    record("miniature end-to-end", gradcheck(leaves, build));
  }

  return results;
}

inline double max_error(const std::vector<CheckResult>& results) {
  double worst = 0;
  for (const auto& r : results) worst = std::max(worst, r.error);
  return worst;
}

}  // namespace v2s::gradsuite
