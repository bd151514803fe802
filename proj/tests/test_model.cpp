#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "v2s/gradcheck.hpp"
#include "v2s/model.hpp"

using namespace v2s;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

Tensor<float> randu(const Shape& s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor<float> t(s);
  for (auto& v : t.data) v = float(rng.uniform(lo, hi));
  return t;
}

Tensor<double> randu_d(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

std::vector<NodePtr<double>> trainable_leaves(const model::ParamsT<double>& p,
                                              const std::string& prefix = "") {
  std::vector<NodePtr<double>> out;
  for (const auto& [name, node] : p.tensors)
    if (model::is_trainable(p, name) && name.rfind(prefix, 0) == 0) out.push_back(node);
  return out;
}

}  // namespace

TEST_CASE("init_params is deterministic per seed") {
  auto cfg = model::tiny_config();
  auto a = model::init_params(cfg, 5);
  auto b = model::init_params(cfg, 5);
  auto c = model::init_params(cfg, 6);

  REQUIRE(a.tensors.size() == b.tensors.size());
  bool identical = true;
  bool differs_somewhere = false;
  for (const auto& [name, node] : a.tensors) {
    REQUIRE(b.tensors.count(name) == 1);
    if (node->value.data != b.tensors.at(name)->value.data) identical = false;
    if (node->value.data != c.tensors.at(name)->value.data) differs_somewhere = true;
  }
  CHECK(identical);
  CHECK(differs_somewhere);
}

TEST_CASE("paper config follows the published tower schedule and He init") {
  auto cfg = model::paper_config();
  REQUIRE(cfg.widths ==
          std::vector<std::size_t>{128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512});
  REQUIRE(cfg.embedding == 1024);

  auto params = model::init_params(cfg, 11);

  // ten residual blocks behind the stem
  for (std::size_t i = 1; i <= 10; ++i)
    REQUIRE(params.has("enc.pix.b" + std::to_string(i) + ".c2.w"));
  REQUIRE_FALSE(params.has("enc.pix.b11.c1.w"));
  REQUIRE(params.at("enc.pix.b10.c3.w")->value.shape == Shape{512, 512, 1, 1});

  // He: empirical std within 10% of sqrt(2/fan_in) on a large kernel
  const auto& w = params.at("enc.pix.b8.c2.w")->value;
  REQUIRE(w.shape == Shape{512, 512, 3, 3});
  double fan_in = 512.0 * 9.0;
  double mean = 0;
  for (float v : w.data) mean += v;
  mean /= double(w.size());
  double var = 0;
  for (float v : w.data) var += (v - mean) * (v - mean);
  double std_emp = std::sqrt(var / double(w.size()));
  double std_he = std::sqrt(2.0 / fan_in);
  CHECK(std_emp > 0.9 * std_he);
  CHECK(std_emp < 1.1 * std_he);

  // zero-input smoke pass: 1024-value finite embedding, 5x4 pre-pool maps
  Tensor<float> pix = Tensor<float>::zeros({1, cfg.k, cfg.h, cfg.w});
  Tensor<float> flow = Tensor<float>::zeros({1, (cfg.k - 1) * 2, cfg.h, cfg.w});
  model::EncoderTrace trace;
  auto emb = model::encoder_forward(pix, flow, params, cfg, Mode::infer, nullptr, &trace);
  REQUIRE(emb->value.shape == Shape{1, 1024});
  CHECK(trace.pre_pool_pix == Shape{1, 512, 5, 4});
  CHECK(trace.pre_pool_flow == Shape{1, 512, 5, 4});
  for (float v : emb->value.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("decoder emits an 80x4 mel block strictly inside tanh range") {
  auto cfg = model::miniature_config();
  REQUIRE(cfg.n_mels * cfg.l == 320);
  auto params = model::init_params(cfg, 3);
  Rng rng(4);

  auto emb = constant(randu({2, cfg.embedding}, rng));
  auto out = model::decoder_forward(emb, params, cfg, Mode::infer, rng);
  REQUIRE(out->value.shape == Shape{2, 320});
  for (float v : out->value.data) {
    REQUIRE(v > -1.0f);
    REQUIRE(v < 1.0f);
  }

  auto feats = model::to_feature_space(out);
  for (float v : feats->value.data) {
    REQUIRE(v > 0.0f);
    REQUIRE(v < 1.0f);
  }
}

TEST_CASE("decoder gradcheck") {
  auto cfg = model::tiny_config();
  auto params = model::to_double(model::init_params(cfg, 7));
  Rng data_rng(8);
  auto emb = constant(randu_d({2, cfg.embedding}, data_rng));
  auto target = constant(randu_d({2, cfg.n_mels * cfg.l}, data_rng, 0.0, 1.0));

  auto build = [&]() {
    Rng rng(1);
    auto out = model::decoder_forward(emb, params, cfg, Mode::train, rng);
    return mse(model::to_feature_space(out), target);
  };
  CHECK(gradcheck(trainable_leaves(params, "dec."), build) < 1e-4);
}

TEST_CASE("postnet output shape matches the linear bin count") {
  auto cfg = model::miniature_config();
  REQUIRE(cfg.d_lin == 513);  // 1024-point fft -> 513 bins
  auto params = model::init_params(cfg, 9);
  Rng rng(10);

  std::size_t s = cfg.t * cfg.l;  // 32 spectrogram frames per window
  auto mels = constant(randu({s, cfg.n_mels}, rng, 0.0f, 1.0f));
  auto out = model::postnet_forward(mels, params, cfg, Mode::infer);
  REQUIRE(out->value.shape == Shape{s, 513});
  for (float v : out->value.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("conv bank is time-shift equivariant at interior positions") {
  auto cfg = model::tiny_config();
  auto params = model::to_double(model::init_params(cfg, 13));
  Rng rng(14);

  const std::size_t s = 12;
  auto a = randu_d({s, cfg.n_mels}, rng);
  Tensor<double> b({s, cfg.n_mels});
  for (std::size_t j = 0; j < cfg.n_mels; ++j) b.at(0, j) = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 1; i < s; ++i)
    for (std::size_t j = 0; j < cfg.n_mels; ++j) b.at(i, j) = a.at(i - 1, j);

  auto out_a = model::detail::postnet_bank(constant(a), params, cfg, Mode::infer);
  auto out_b = model::detail::postnet_bank(constant(b), params, cfg, Mode::infer);
  std::size_t cols = out_a->value.shape[1];
  for (std::size_t i = cfg.bank_k; i + cfg.bank_k < s; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      REQUIRE(out_b->value.at(i + 1, j) == Catch::Approx(out_a->value.at(i, j)).margin(1e-6));
}

TEST_CASE("postnet gradcheck on the tiny configuration") {
  auto cfg = model::tiny_config();  // sequence 4, n=8, d_lin=17 below
  auto params = model::to_double(model::init_params(cfg, 15));
  Rng rng(16);
  auto mels = constant(randu_d({4, cfg.n_mels}, rng, 0.0, 1.0));
  auto target = constant(randu_d({4, cfg.d_lin}, rng, 0.0, 1.0));

  auto build = [&]() {
    return mse(model::postnet_forward(mels, params, cfg, Mode::train), target);
  };
  CHECK(gradcheck(trainable_leaves(params, "post."), build) < 1e-3);
}

TEST_CASE("end-to-end gradcheck on the tiny configuration") {
  auto cfg = model::tiny_config();
  auto params = model::to_double(model::init_params(cfg, 17));
  Rng rng(18);

  std::size_t t = cfg.t;
  auto pix = randu_d({t, cfg.k, cfg.h, cfg.w}, rng);
  auto flow = randu_d({t, (cfg.k - 1) * 2, cfg.h, cfg.w}, rng);
  auto mel_target = constant(randu_d({t, cfg.n_mels * cfg.l}, rng, 0.0, 1.0));
  auto lin_target = constant(randu_d({t * cfg.l, cfg.d_lin}, rng, 0.0, 1.0));

  auto build = [&]() {
    Rng drop_rng(1);
    auto emb = model::encoder_forward(pix, flow, params, cfg, Mode::train);
    auto dec = model::decoder_forward(emb, params, cfg, Mode::train, drop_rng);
    auto mel_feats = model::to_feature_space(dec);
    auto seq = model::mel_sequence(mel_feats, cfg.n_mels, cfg.l);
    auto lin = model::postnet_forward(seq, params, cfg, Mode::train);
    return add(mse(mel_feats, mel_target), mse(lin, lin_target));
  };
  CHECK(gradcheck(trainable_leaves(params), build) < 1e-3);
}

TEST_CASE("inference is batch-order independent") {
  auto cfg = model::miniature_config();
  auto params = model::init_params(cfg, 19);
  Rng rng(20);

  const std::size_t n = 3;
  auto pix = randu({n, cfg.k, cfg.h, cfg.w}, rng);
  auto flow = randu({n, (cfg.k - 1) * 2, cfg.h, cfg.w}, rng);

  model::EncoderTrace trace;
  auto emb = model::encoder_forward(pix, flow, params, cfg, Mode::infer, nullptr, &trace);
  CHECK(trace.pre_pool_pix == Shape{n, 32, 5, 4});
  auto dec = model::decoder_forward(emb, params, cfg, Mode::infer, rng);

  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> pix1({1, cfg.k, cfg.h, cfg.w});
    Tensor<float> flow1({1, (cfg.k - 1) * 2, cfg.h, cfg.w});
    std::copy_n(pix.data.begin() + i * pix1.size(), pix1.size(), pix1.data.begin());
    std::copy_n(flow.data.begin() + i * flow1.size(), flow1.size(), flow1.data.begin());
    auto emb1 = model::encoder_forward(pix1, flow1, params, cfg, Mode::infer);
    auto dec1 = model::decoder_forward(emb1, params, cfg, Mode::infer, rng);
    for (std::size_t j = 0; j < cfg.embedding; ++j)
      REQUIRE(emb1->value.at(0, j) == Catch::Approx(emb->value.at(i, j)).margin(1e-5));
    for (std::size_t j = 0; j < cfg.n_mels * cfg.l; ++j)
      REQUIRE(dec1->value.at(0, j) == Catch::Approx(dec->value.at(i, j)).margin(1e-5));
  }
}

TEST_CASE("ablation switches control towers and post-net") {
  SECTION("both towers off is rejected") {
    auto cfg = model::tiny_config();
    cfg.use_pixels = false;
    cfg.use_flow = false;
    REQUIRE_THROWS_AS(model::init_params(cfg, 1), ConfigError);
  }

  SECTION("single tower doubles its head and keeps the embedding size") {
    auto cfg = model::tiny_config();
    cfg.use_flow = false;
    auto params = model::init_params(cfg, 2);
    REQUIRE_FALSE(params.has("enc.flow.stem.w"));
    REQUIRE(params.at("enc.pix.b1.c2.w")->value.shape == Shape{8, 8, 3, 3});

    Rng rng(3);
    auto pix = randu({1, cfg.k, cfg.h, cfg.w}, rng);
    auto emb = model::encoder_forward(pix, Tensor<float>{}, params, cfg, Mode::infer);
    REQUIRE(emb->value.shape == Shape{1, cfg.embedding});

    // supplying flow anyway is ignored with a warning
    auto flow = randu({1, (cfg.k - 1) * 2, cfg.h, cfg.w}, rng);
    auto emb2 = model::encoder_forward(pix, flow, params, cfg, Mode::infer);
    REQUIRE(emb2->value.data == emb->value.data);
  }

  SECTION("use_postnet=false means no post-net parameters at all") {
    auto cfg = model::tiny_config();
    cfg.use_postnet = false;
    auto params = model::init_params(cfg, 4);
    for (const auto& [name, node] : params.tensors) REQUIRE(name.rfind("post.", 0) != 0);

    Rng rng(5);
    auto mels = constant(randu({4, cfg.n_mels}, rng));
    REQUIRE_THROWS_AS(model::postnet_forward(mels, params, cfg, Mode::infer), ConfigError);
  }

  SECTION("missing enabled-tower input is a shape error") {
    auto cfg = model::tiny_config();
    auto params = model::init_params(cfg, 6);
    Rng rng(7);
    auto pix = randu({1, cfg.k, cfg.h, cfg.w}, rng);
    REQUIRE_THROWS_AS(
        model::encoder_forward(pix, Tensor<float>{}, params, cfg, Mode::infer), ShapeError);
  }
}

TEST_CASE("checkpoint round trip preserves config, tensors, and freeze mask") {
  auto dir = fs::temp_directory_path() / "v2s_model_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto path = (dir / "model.v2sm").string();

  auto cfg = model::tiny_config();
  cfg.use_postnet = true;
  auto params = model::init_params(cfg, 21);
  for (const auto& [name, node] : params.tensors)
    if (name.rfind("enc.", 0) == 0 && !model::is_stat(name)) params.frozen.insert(name);

  model::save_checkpoint(path, cfg, params);
  auto [cfg2, params2] = model::load_checkpoint(path);

  CHECK(cfg2.k == cfg.k);
  CHECK(cfg2.widths == cfg.widths);
  CHECK(cfg2.stride2 == cfg.stride2);
  CHECK(cfg2.embedding == cfg.embedding);
  CHECK(cfg2.dropout == Catch::Approx(cfg.dropout));
  CHECK(cfg2.n_mels == cfg.n_mels);
  CHECK(cfg2.d_lin == cfg.d_lin);
  CHECK(cfg2.use_postnet == cfg.use_postnet);
  CHECK(cfg2.gru_width == cfg.gru_width);
  CHECK(params2.frozen == params.frozen);

  REQUIRE(params2.tensors.size() == params.tensors.size());
  for (const auto& [name, node] : params.tensors) {
    REQUIRE(params2.has(name));
    REQUIRE(params2.at(name)->value.shape == node->value.shape);
    REQUIRE(params2.at(name)->value.data == node->value.data);
    CHECK(params2.at(name)->requires_grad == !model::is_stat(name));
  }
}

TEST_CASE("checkpoint loading rejects malformed files") {
  auto dir = fs::temp_directory_path() / "v2s_model_ckpt_bad";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto cfg = model::tiny_config();
  auto params = model::init_params(cfg, 22);
  auto good = (dir / "good.v2sm").string();
  model::save_checkpoint(good, cfg, params);

  std::ifstream in(good, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  auto bytes = ss.str();

  SECTION("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir / "bad.v2sm", std::ios::binary)
        .write(bad.data(), std::streamsize(bad.size()));
    REQUIRE_THROWS_MATCHES(model::load_checkpoint((dir / "bad.v2sm").string()), IoError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("byte 0")));
  }

  SECTION("truncation") {
    auto cut = bytes.substr(0, bytes.size() / 2);
    std::ofstream(dir / "cut.v2sm", std::ios::binary)
        .write(cut.data(), std::streamsize(cut.size()));
    REQUIRE_THROWS_MATCHES(model::load_checkpoint((dir / "cut.v2sm").string()), IoError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("byte")));
  }

  SECTION("non-finite parameter") {
    params.at("dec.fc1.w")->value.data[0] = std::numeric_limits<float>::quiet_NaN();
    auto nan_path = (dir / "nan.v2sm").string();
    model::save_checkpoint(nan_path, cfg, params);
    REQUIRE_THROWS_MATCHES(model::load_checkpoint(nan_path), IoError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("non-finite")));
  }
}
