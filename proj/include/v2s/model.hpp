#pragma once

// Two-tower residual encoder, fully connected mel decoder, and CBHG-style
// post-processing network, plus parameter init and checkpoint IO.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "v2s/autodiff.hpp"
#include "v2s/error.hpp"
#include "v2s/io.hpp"
#include "v2s/tensor.hpp"

namespace v2s::model {

struct ModelConfig {
  std::size_t k = 9;  // frames per clip
  std::size_t h = 160, w = 128;
  // widths[0] is the stem convolution; the rest are residual blocks
  std::vector<std::size_t> widths = {128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512};
  std::vector<std::size_t> stride2 = {1, 2, 4, 6, 8};  // width indices whose 3x3 conv strides
  std::size_t embedding = 1024;
  std::size_t decoder_width = 1024;
  double dropout = 0.5;       // decoder dense layers
  double conv_dropout = 0.25;  // after each residual block
  std::size_t n_mels = 80, l = 4, t = 8, d_lin = 513;
  bool use_pixels = true, use_flow = true, use_postnet = true;
  // post-net (CBHG)
  std::size_t bank_k = 8, bank_width = 128, proj_width = 256;
  std::size_t highway_layers = 4, highway_width = 128, gru_width = 128;
};

inline ModelConfig paper_config() { return {}; }

// Desk-scale configuration that trains in minutes on one core.
inline ModelConfig miniature_config() {
  ModelConfig c;
  c.k = 5;
  c.h = 40;
  c.w = 32;
  c.widths = {16, 16, 32, 32};
  c.stride2 = {1, 2, 3};
  c.embedding = 64;
  c.decoder_width = 64;
  c.dropout = 0.2;
  c.conv_dropout = 0.1;
  c.bank_k = 4;
  c.bank_width = 16;
  c.proj_width = 32;
  c.highway_layers = 2;
  c.highway_width = 16;
  c.gru_width = 16;
  return c;
}

// Smallest config that exercises every code path; used for gradient checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.k = 3;
  c.h = 16;
  c.w = 16;
  c.widths = {3, 4};
  c.stride2 = {1};
  c.embedding = 8;
  c.decoder_width = 8;
  c.dropout = 0.0;
  c.conv_dropout = 0.0;
  c.n_mels = 8;
  c.l = 2;
  c.t = 4;
  c.d_lin = 17;
  c.bank_k = 2;
  c.bank_width = 3;
  c.proj_width = 4;
  c.highway_layers = 1;
  c.highway_width = 6;
  c.gru_width = 4;
  return c;
}

inline std::size_t active_towers(const ModelConfig& c) {
  return (c.use_pixels ? 1 : 0) + (c.use_flow ? 1 : 0);
}

// Width of a tower's final block; doubled for single-tower ablations so the
// embedding size is unchanged.
inline std::size_t tower_out_width(const ModelConfig& c, std::size_t index) {
  std::size_t w = c.widths.at(index);
  if (index + 1 == c.widths.size() && active_towers(c) == 1) w *= 2;
  return w;
}

inline void validate(const ModelConfig& c) {
  if (!c.use_pixels && !c.use_flow)
    throw ConfigError("model: at least one of use-pixels/use-flow must be enabled");
  if (c.widths.size() < 2) throw ConfigError("model: width schedule needs a stem and one block");
  for (auto i : c.stride2)
    if (i == 0 || i >= c.widths.size())
      throw ConfigError("model: stride-2 index " + std::to_string(i) +
                        " outside the residual blocks");
  if (c.embedding != 2 * c.widths.back())
    throw ConfigError("model: embedding " + std::to_string(c.embedding) +
                      " must equal twice the final block width " +
                      std::to_string(c.widths.back()));
  if (c.n_mels == 0 || c.l == 0 || c.t == 0 || c.d_lin == 0)
    throw ConfigError("model: output dimensions must be positive");
  if (c.k < 2 && c.use_flow) throw ConfigError("model: flow tower needs K >= 2");
  if (c.dropout < 0.0 || c.dropout >= 1.0 || c.conv_dropout < 0.0 || c.conv_dropout >= 1.0)
    throw ConfigError("model: dropout rates must be in [0, 1)");
}

// ---- parameters ----

template <typename T>
struct ParamsT {
  std::map<std::string, NodePtr<T>> tensors;
  std::set<std::string> frozen;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const NodePtr<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("model: missing parameter " + name);
    return it->second;
  }
};

using ModelParams = ParamsT<float>;

// Batch-norm running statistics: carried in ModelParams but never optimized.
inline bool is_stat(const std::string& name) {
  auto ends_with = [&](const char* s) {
    std::string suffix(s);
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with("running_mean") || ends_with("running_var");
}

template <typename T>
bool is_trainable(const ParamsT<T>& p, const std::string& name) {
  return !is_stat(name) && p.frozen.count(name) == 0;
}

namespace detail {

// Every parameter tensor in creation order, so init is deterministic.
struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { he, zero, one } init;
  std::size_t fan_in = 0;
};

inline void add_conv(std::vector<ParamSpec>& out, const std::string& name, std::size_t f,
                     std::size_t c, std::size_t kh, std::size_t kw) {
  out.push_back({name, Shape{f, c, kh, kw}, ParamSpec::Init::he, c * kh * kw});
}

inline void add_bn(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".gamma", Shape{c}, ParamSpec::Init::one});
  out.push_back({prefix + ".beta", Shape{c}, ParamSpec::Init::zero});
  out.push_back({prefix + ".running_mean", Shape{c}, ParamSpec::Init::zero});
  out.push_back({prefix + ".running_var", Shape{c}, ParamSpec::Init::one});
}

inline void add_dense(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                      std::size_t n) {
  out.push_back({prefix + ".w", Shape{in, n}, ParamSpec::Init::he, in});
  out.push_back({prefix + ".b", Shape{n}, ParamSpec::Init::zero});
}

inline void add_tower(std::vector<ParamSpec>& out, const ModelConfig& c,
                      const std::string& tower, std::size_t in_ch) {
  auto p = [&](const std::string& s) { return "enc." + tower + "." + s; };
  add_conv(out, p("stem.w"), c.widths[0], in_ch, 3, 3);
  add_bn(out, p("stem.bn"), c.widths[0]);
  std::size_t ch = c.widths[0];
  for (std::size_t i = 1; i < c.widths.size(); ++i) {
    std::size_t width = tower_out_width(c, i);
    bool strided =
        std::find(c.stride2.begin(), c.stride2.end(), i) != c.stride2.end();
    std::string b = p("b" + std::to_string(i));
    add_conv(out, b + ".c1.w", width, ch, 1, 1);
    add_bn(out, b + ".c1.bn", width);
    add_conv(out, b + ".c2.w", width, width, 3, 3);
    add_bn(out, b + ".c2.bn", width);
    add_conv(out, b + ".c3.w", width, width, 1, 1);
    add_bn(out, b + ".c3.bn", width);
    if (strided || ch != width) {
      add_conv(out, b + ".sc.w", width, ch, 1, 1);
      add_bn(out, b + ".sc.bn", width);
    }
    ch = width;
  }
}

inline void add_gru(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                    std::size_t hidden) {
  for (const char* gate : {"z", "r", "h"}) {
    out.push_back({prefix + ".w" + gate, Shape{in, hidden}, ParamSpec::Init::he, in});
    out.push_back({prefix + ".u" + gate, Shape{hidden, hidden}, ParamSpec::Init::he, hidden});
    out.push_back({prefix + ".b" + gate, Shape{hidden}, ParamSpec::Init::zero});
  }
}

inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  if (c.use_pixels) add_tower(out, c, "pix", c.k);
  if (c.use_flow) add_tower(out, c, "flow", (c.k - 1) * 2);

  add_dense(out, "dec.fc1", c.embedding, c.decoder_width);
  add_dense(out, "dec.fc2", c.decoder_width, c.decoder_width);
  add_dense(out, "dec.out", c.decoder_width, c.n_mels * c.l);

  if (c.use_postnet) {
    for (std::size_t k = 1; k <= c.bank_k; ++k) {
      std::string b = "post.bank" + std::to_string(k);
      add_conv(out, b + ".w", c.bank_width, c.n_mels, 1, k);
      add_bn(out, b + ".bn", c.bank_width);
    }
    add_conv(out, "post.proj1.w", c.proj_width, c.bank_k * c.bank_width, 1, 3);
    add_bn(out, "post.proj1.bn", c.proj_width);
    add_conv(out, "post.proj2.w", c.n_mels, c.proj_width, 1, 3);
    add_bn(out, "post.proj2.bn", c.n_mels);
    add_dense(out, "post.pre", c.n_mels, c.highway_width);
    for (std::size_t i = 0; i < c.highway_layers; ++i) {
      std::string hw = "post.hw" + std::to_string(i);
      add_dense(out, hw + ".h", c.highway_width, c.highway_width);
      add_dense(out, hw + ".t", c.highway_width, c.highway_width);
    }
    add_gru(out, "post.gru.fw", c.highway_width, c.gru_width);
    add_gru(out, "post.gru.bw", c.highway_width, c.gru_width);
    add_dense(out, "post.out", 2 * c.gru_width, c.d_lin);
  }
  return out;
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  validate(c);
  Rng rng(seed);
  ModelParams params;
  for (const auto& spec : detail::param_specs(c)) {
    Tensor<float> t(spec.shape);
    switch (spec.init) {
      case detail::ParamSpec::Init::he: {
        double std = std::sqrt(2.0 / double(spec.fan_in));
        for (auto& v : t.data) v = float(std * rng.normal());
        break;
      }
      case detail::ParamSpec::Init::zero:
        break;
      case detail::ParamSpec::Init::one:
        for (auto& v : t.data) v = 1.0f;
        break;
    }
    params.tensors.emplace(spec.name, make_leaf(std::move(t), !is_stat(spec.name)));
  }
  return params;
}

// Double-precision copy for finite-difference gradient checking.
inline ParamsT<double> to_double(const ModelParams& p) {
  ParamsT<double> out;
  out.frozen = p.frozen;
  for (const auto& [name, node] : p.tensors)
    out.tensors.emplace(name, make_leaf(node->value.template cast<double>(), !is_stat(name)));
  return out;
}

// ---- forward passes ----

struct EncoderTrace {
  Shape pre_pool_pix;   // shape of the pixel tower's final map before pooling
  Shape pre_pool_flow;  // same for the flow tower
};

namespace detail {

template <typename T>
NodePtr<T> conv_bn(NodePtr<T> x, const ParamsT<T>& p, const std::string& prefix,
                   std::pair<std::size_t, std::size_t> stride, Mode mode) {
  auto y = conv2d(x, p.at(prefix + ".w"), stride, Padding::same);
  return batch_norm(y, p.at(prefix + ".bn.gamma"), p.at(prefix + ".bn.beta"), mode,
                    p.at(prefix + ".bn.running_mean"), p.at(prefix + ".bn.running_var"));
}

template <typename T>
NodePtr<T> residual_block(NodePtr<T> x, const ParamsT<T>& p, const std::string& b,
                          std::size_t stride, Mode mode) {
  auto y = activation(conv_bn(x, p, b + ".c1", {1, 1}, mode), Act::relu);
  y = activation(conv_bn(y, p, b + ".c2", {stride, stride}, mode), Act::relu);
  y = conv_bn(y, p, b + ".c3", {1, 1}, mode);
  auto shortcut = p.has(b + ".sc.w") ? conv_bn(x, p, b + ".sc", {stride, stride}, mode) : x;
  return activation(add(y, shortcut), Act::relu);
}

template <typename T>
NodePtr<T> tower_forward(NodePtr<T> x, const ParamsT<T>& p, const ModelConfig& c,
                         const std::string& tower, Mode mode, Rng* rng, Shape* pre_pool) {
  auto pfx = [&](const std::string& s) { return "enc." + tower + "." + s; };
  auto y = activation(conv_bn(x, p, pfx("stem"), {1, 1}, mode), Act::relu);
  for (std::size_t i = 1; i < c.widths.size(); ++i) {
    bool strided =
        std::find(c.stride2.begin(), c.stride2.end(), i) != c.stride2.end();
    y = residual_block(y, p, pfx("b" + std::to_string(i)), strided ? 2 : 1, mode);
    if (c.conv_dropout > 0.0 && mode == Mode::train) {
      if (!rng) throw ConfigError("encoder: conv dropout in train mode needs an rng");
      y = dropout(y, c.conv_dropout, mode, *rng);
    }
  }
  if (pre_pool) *pre_pool = y->value.shape;
  return global_avg_pool(y);
}

}  // namespace detail

// pix: [N, K, H, W]; flow: [N, (K-1)*2, H, W]; either may be empty when the
// matching tower is disabled. Returns the [N, embedding] clip encoding.
template <typename T>
NodePtr<T> encoder_forward(const Tensor<T>& pix, const Tensor<T>& flow, const ParamsT<T>& p,
                           const ModelConfig& c, Mode mode, Rng* rng = nullptr,
                           EncoderTrace* trace = nullptr) {
  validate(c);
  if (c.use_pixels && pix.size() == 0)
    throw ShapeError("encoder: pixel tower enabled but no pixel input given");
  if (c.use_flow && flow.size() == 0)
    throw ShapeError("encoder: flow tower enabled but no flow input given");
  if (!c.use_pixels && pix.size() != 0)
    std::fprintf(stderr, "warning: pixel input supplied but the pixel tower is disabled; ignored\n");
  if (!c.use_flow && flow.size() != 0)
    std::fprintf(stderr, "warning: flow input supplied but the flow tower is disabled; ignored\n");

  std::vector<NodePtr<T>> parts;
  if (c.use_pixels) {
    if (pix.rank() != 4 || pix.shape[1] != c.k || pix.shape[2] != c.h || pix.shape[3] != c.w)
      throw ShapeError("encoder: pixel input " + shape_str(pix.shape) + ", expected [N, " +
                       std::to_string(c.k) + ", " + std::to_string(c.h) + ", " +
                       std::to_string(c.w) + "]");
    parts.push_back(detail::tower_forward(constant(pix), p, c, "pix", mode, rng,
                                          trace ? &trace->pre_pool_pix : nullptr));
  }
  if (c.use_flow) {
    std::size_t fc = (c.k - 1) * 2;
    if (flow.rank() != 4 || flow.shape[1] != fc || flow.shape[2] != c.h || flow.shape[3] != c.w)
      throw ShapeError("encoder: flow input " + shape_str(flow.shape) + ", expected [N, " +
                       std::to_string(fc) + ", " + std::to_string(c.h) + ", " +
                       std::to_string(c.w) + "]");
    parts.push_back(detail::tower_forward(constant(flow), p, c, "flow", mode, rng,
                                          trace ? &trace->pre_pool_flow : nullptr));
  }
  auto emb = parts.size() == 1 ? parts[0] : concat_cols(parts);
  if (emb->value.shape[1] != c.embedding)
    throw ShapeError("encoder: produced embedding " + shape_str(emb->value.shape) +
                     ", config says " + std::to_string(c.embedding));
  return emb;
}

// Embedding [N, E] -> mel block rows [N, n*l], tanh range (-1, 1).
template <typename T>
NodePtr<T> decoder_forward(NodePtr<T> emb, const ParamsT<T>& p, const ModelConfig& c, Mode mode,
                           Rng& rng) {
  if (emb->value.rank() != 2 || emb->value.shape[1] != c.embedding)
    throw ShapeError("decoder: embedding " + shape_str(emb->value.shape) + ", expected [N, " +
                     std::to_string(c.embedding) + "]");
  auto h1 = activation(dense(emb, p.at("dec.fc1.w"), p.at("dec.fc1.b")), Act::relu);
  h1 = dropout(h1, c.dropout, mode, rng);
  auto h2 = activation(dense(h1, p.at("dec.fc2.w"), p.at("dec.fc2.b")), Act::relu);
  h2 = dropout(h2, c.dropout, mode, rng);
  return activation(dense(h2, p.at("dec.out.w"), p.at("dec.out.b")), Act::tanh_);
}

// Decoder outputs live in tanh range; features live in [0, 1].
template <typename T>
NodePtr<T> to_feature_space(NodePtr<T> x) {
  return affine(x, T(0.5), T(0.5));
}

// Decoder rows [T, n*l] (one mel block per clip, row-major n x l) rearranged
// into the post-net's time-major [T*l, n] sequence.
template <typename T>
NodePtr<T> mel_sequence(NodePtr<T> dec_rows, std::size_t n, std::size_t l) {
  std::size_t t = dec_rows->value.shape[0];
  std::vector<NodePtr<T>> steps;
  steps.reserve(t);
  for (std::size_t c2 = 0; c2 < t; ++c2)
    steps.push_back(transpose2d(reshape(slice_rows(dec_rows, c2, c2 + 1), Shape{n, l})));
  return t == 1 ? steps[0] : concat_rows(steps);
}

namespace detail {

// Convolution bank: kernels of widths 1..bank_k over time, BN + ReLU, outputs
// concatenated along channels. In and out as [S, channels] sequences.
template <typename T>
NodePtr<T> postnet_bank(NodePtr<T> mels, const ParamsT<T>& p, const ModelConfig& c, Mode mode) {
  std::size_t s = mels->value.shape[0];
  auto x4 = reshape(transpose2d(mels), Shape{1, c.n_mels, 1, s});
  std::vector<NodePtr<T>> outs;
  for (std::size_t k = 1; k <= c.bank_k; ++k) {
    auto y = activation(conv_bn(x4, p, "post.bank" + std::to_string(k), {1, 1}, mode), Act::relu);
    outs.push_back(transpose2d(reshape(y, Shape{c.bank_width, s})));
  }
  return concat_cols(outs);
}

template <typename T>
GruCell<T> gru_cell(const ParamsT<T>& p, const std::string& prefix) {
  GruCell<T> cell;
  cell.wz = p.at(prefix + ".wz");
  cell.uz = p.at(prefix + ".uz");
  cell.bz = p.at(prefix + ".bz");
  cell.wr = p.at(prefix + ".wr");
  cell.ur = p.at(prefix + ".ur");
  cell.br = p.at(prefix + ".br");
  cell.wh = p.at(prefix + ".wh");
  cell.uh = p.at(prefix + ".uh");
  cell.bh = p.at(prefix + ".bh");
  return cell;
}

}  // namespace detail

// Mel sequence [S, n] -> linear-scale sequence [S, d_lin] (CBHG).
template <typename T>
NodePtr<T> postnet_forward(NodePtr<T> mels, const ParamsT<T>& p, const ModelConfig& c,
                           Mode mode) {
  if (!c.use_postnet) throw ConfigError("postnet: disabled by config");
  if (mels->value.rank() != 2 || mels->value.shape[1] != c.n_mels)
    throw ShapeError("postnet: input " + shape_str(mels->value.shape) + ", expected [S, " +
                     std::to_string(c.n_mels) + "]");
  std::size_t s = mels->value.shape[0];

  auto bank = detail::postnet_bank(mels, p, c, mode);
  auto x4 = reshape(transpose2d(bank), Shape{1, c.bank_k * c.bank_width, 1, s});
  x4 = maxpool_w(x4, 2);
  x4 = activation(detail::conv_bn(x4, p, "post.proj1", {1, 1}, mode), Act::relu);
  x4 = detail::conv_bn(x4, p, "post.proj2", {1, 1}, mode);

  // residual connection back to the input mels
  auto res = add(reshape(x4, Shape{c.n_mels, s}), transpose2d(mels));
  auto seq = transpose2d(res);  // [S, n]

  seq = activation(dense(seq, p.at("post.pre.w"), p.at("post.pre.b")), Act::relu);
  for (std::size_t i = 0; i < c.highway_layers; ++i) {
    std::string hw = "post.hw" + std::to_string(i);
    HighwayParams<T> hp{p.at(hw + ".h.w"), p.at(hw + ".h.b"), p.at(hw + ".t.w"),
                        p.at(hw + ".t.b")};
    seq = highway(seq, hp);
  }

  auto fw_cell = detail::gru_cell(p, "post.gru.fw");
  auto bw_cell = detail::gru_cell(p, "post.gru.bw");
  std::vector<NodePtr<T>> fw(s), bw(s);
  auto h0 = constant(Tensor<T>::zeros(Shape{1, c.gru_width}));
  auto h = h0;
  for (std::size_t i = 0; i < s; ++i) {
    h = gru_step(slice_rows(seq, i, i + 1), h, fw_cell);
    fw[i] = h;
  }
  h = h0;
  for (std::size_t i = s; i-- > 0;) {
    h = gru_step(slice_rows(seq, i, i + 1), h, bw_cell);
    bw[i] = h;
  }
  std::vector<NodePtr<T>> steps(s);
  for (std::size_t i = 0; i < s; ++i) steps[i] = concat_cols(std::vector<NodePtr<T>>{fw[i], bw[i]});
  auto rnn = s == 1 ? steps[0] : concat_rows(steps);

  return dense(rnn, p.at("post.out.w"), p.at("post.out.b"));
}

// ---- checkpoint IO ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ModelConfig& c,
                            const ModelParams& p) {
  std::string out = "V2SM";
  io::put_u32(out, kCheckpointVersion);

  auto put_sz = [&](std::size_t v) { io::put_u32(out, static_cast<std::uint32_t>(v)); };
  put_sz(c.k);
  put_sz(c.h);
  put_sz(c.w);
  put_sz(c.widths.size());
  for (auto v : c.widths) put_sz(v);
  put_sz(c.stride2.size());
  for (auto v : c.stride2) put_sz(v);
  put_sz(c.embedding);
  put_sz(c.decoder_width);
  io::put_f32(out, float(c.dropout));
  io::put_f32(out, float(c.conv_dropout));
  put_sz(c.n_mels);
  put_sz(c.l);
  put_sz(c.t);
  put_sz(c.d_lin);
  out.push_back(char(c.use_pixels));
  out.push_back(char(c.use_flow));
  out.push_back(char(c.use_postnet));
  put_sz(c.bank_k);
  put_sz(c.bank_width);
  put_sz(c.proj_width);
  put_sz(c.highway_layers);
  put_sz(c.highway_width);
  put_sz(c.gru_width);

  put_sz(p.tensors.size());
  for (const auto& [name, node] : p.tensors) {
    put_sz(name.size());
    out += name;
    put_sz(node->value.rank());
    for (auto d : node->value.shape) put_sz(d);
    for (float v : node->value.data) io::put_f32(out, v);
  }
  put_sz(p.frozen.size());
  for (const auto& name : p.frozen) {
    put_sz(name.size());
    out += name;
  }
  io::write_file(path, out);
}

inline std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
  io::ByteReader r(path);
  if (r.str(4, "magic") != "V2SM") throw IoError(path, 0, "bad magic, expected V2SM");
  std::uint32_t version = r.u32("format version");
  if (version != kCheckpointVersion)
    throw IoError(path, 4, "unsupported checkpoint version " + std::to_string(version));

  ModelConfig c;
  auto get_sz = [&](const char* what) { return std::size_t(r.u32(what)); };
  c.k = get_sz("k");
  c.h = get_sz("h");
  c.w = get_sz("w");
  c.widths.assign(get_sz("width count"), 0);
  for (auto& v : c.widths) v = get_sz("width");
  c.stride2.assign(get_sz("stride count"), 0);
  for (auto& v : c.stride2) v = get_sz("stride index");
  c.embedding = get_sz("embedding");
  c.decoder_width = get_sz("decoder width");
  c.dropout = double(r.f32("dropout"));
  c.conv_dropout = double(r.f32("conv dropout"));
  c.n_mels = get_sz("n_mels");
  c.l = get_sz("l");
  c.t = get_sz("t");
  c.d_lin = get_sz("d_lin");
  c.use_pixels = r.u8("use_pixels") != 0;
  c.use_flow = r.u8("use_flow") != 0;
  c.use_postnet = r.u8("use_postnet") != 0;
  c.bank_k = get_sz("bank_k");
  c.bank_width = get_sz("bank_width");
  c.proj_width = get_sz("proj_width");
  c.highway_layers = get_sz("highway_layers");
  c.highway_width = get_sz("highway_width");
  c.gru_width = get_sz("gru_width");
  validate(c);

  ModelParams p;
  std::size_t count = get_sz("tensor count");
  for (std::size_t i = 0; i < count; ++i) {
    auto name = r.str(get_sz("name length"), "tensor name");
    Shape shape(get_sz("rank"));
    if (shape.size() > 8)
      throw IoError(path, static_cast<long long>(r.pos), "implausible tensor rank");
    for (auto& d : shape) d = get_sz("dimension");
    Tensor<float> t(shape);
    for (auto& v : t.data) {
      v = r.f32("value");
      if (!std::isfinite(v))
        throw IoError(path, static_cast<long long>(r.pos), "non-finite value in tensor " + name);
    }
    p.tensors.emplace(name, make_leaf(std::move(t), !is_stat(name)));
  }
  std::size_t frozen = get_sz("frozen count");
  for (std::size_t i = 0; i < frozen; ++i)
    p.frozen.insert(r.str(get_sz("frozen name length"), "frozen name"));
  if (r.pos != r.bytes.size())
    throw IoError(path, static_cast<long long>(r.pos), "trailing bytes after checkpoint");
  return {c, p};
}

}  // namespace v2s::model
