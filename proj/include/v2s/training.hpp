#pragma once

// Two-phase optimization: Adam on the two-term L2 loss with plateau decay,
// early stopping, and encoder freezing in phase 2.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "v2s/data.hpp"
#include "v2s/model.hpp"
#include "v2s/pipeline.hpp"

namespace v2s::training {

struct TrainConfig {
  double lr = 0.001;
  std::size_t batch_size = 16;
  double conv_dropout = 0.25;
  double dense_dropout = 0.5;
  double plateau_factor = 0.5;     // lr multiplier on plateau
  std::size_t plateau_patience = 5;
  double min_delta = 1e-4;         // improvement below this counts as plateau
  std::size_t early_stop = 10;     // epochs without improvement
  std::size_t max_epochs = 150;    // per phase
  double w_mel = 0.5, w_lin = 0.5;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("training: batch size must be >= 1");
  if (c.w_mel + c.w_lin <= 0.0) throw ConfigError("training: loss weights must sum > 0");
  if (c.lr <= 0.0 || !std::isfinite(c.lr)) throw ConfigError("training: bad learning rate");
  if (c.max_epochs < 1) throw ConfigError("training: max epochs must be >= 1");
}

// ---- loss ----

// w_mel*MSE(mel) + w_lin*MSE(lin), normalized by the weight sum. Pass a null
// lin prediction when the post-net is disabled; the loss is then MSE(mel).
template <typename T>
NodePtr<T> two_term_loss(NodePtr<T> mel_pred, NodePtr<T> mel_true, NodePtr<T> lin_pred,
                         NodePtr<T> lin_true, double w_mel, double w_lin) {
  if (w_mel + w_lin <= 0.0) throw ConfigError("two_term_loss: weights must sum > 0");
  auto mel = mse(mel_pred, mel_true);
  if (!lin_pred) return mel;
  auto lin = mse(lin_pred, lin_true);
  T s = T(w_mel + w_lin);
  return add(affine(mel, T(w_mel) / s, T(0)), affine(lin, T(w_lin) / s, T(0)));
}

// ---- Adam ----

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::map<std::string, Tensor<float>> m, v;
};

// One standard Adam update from the gradients accumulated in the parameter
// nodes. Frozen parameters and running statistics are untouched.
inline void adam_step(model::ModelParams& params, AdamState& st, double lr) {
  ++st.t;
  double c1 = 1.0 - std::pow(st.beta1, double(st.t));
  double c2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (auto& [name, node] : params.tensors) {
    if (!model::is_trainable(params, name)) continue;
    if (node->grad.size() == 0) continue;  // never reached by backward
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.size() == 0) m = Tensor<float>::zeros(node->value.shape);
    if (v.size() == 0) v = Tensor<float>::zeros(node->value.shape);
    for (std::size_t i = 0; i < node->value.size(); ++i) {
      double g = double(node->grad.data[i]);
      double mi = st.beta1 * double(m.data[i]) + (1.0 - st.beta1) * g;
      double vi = st.beta2 * double(v.data[i]) + (1.0 - st.beta2) * g * g;
      m.data[i] = float(mi);
      v.data[i] = float(vi);
      node->value.data[i] -= float(lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps));
    }
  }
}

inline void zero_grads(model::ModelParams& params) {
  for (auto& [name, node] : params.tensors)
    if (node->grad.size() != 0) node->zero_grad();
}

// ---- dataset ----

struct Dataset {
  data::SampleSpec spec;
  std::vector<data::PreparedUtterance> train;
  std::vector<data::PreparedUtterance> val;
};

// 80/20 split by utterance (never by clip), shuffled deterministically.
inline Dataset split_dataset(const data::SampleSpec& spec,
                             std::vector<data::PreparedUtterance> utts, double val_fraction,
                             std::uint64_t seed) {
  if (utts.size() < 2) throw DataError("split_dataset: need at least 2 utterances");
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw ConfigError("split_dataset: validation fraction must be in (0, 1)");
  std::vector<std::size_t> order(utts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::size_t n_val = std::max<std::size_t>(1, std::size_t(val_fraction * double(utts.size())));
  if (n_val >= utts.size()) n_val = utts.size() - 1;
  Dataset ds;
  ds.spec = spec;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_val ? ds.val : ds.train;
    dst.push_back(std::move(utts[order[i]]));
  }
  return ds;
}

// ---- history ----

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based within the phase
  int phase = 1;
  double train_loss = 0, val_loss = 0;
  double lr = 0;
};

struct TrainResult {
  model::ModelParams params;         // best-validation parameters overall
  model::ModelParams phase1_params;  // best-validation parameters after phase 1
  std::vector<EpochRecord> history;
};

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& h) {
  std::string out = "epoch,phase,train_loss,val_loss,lr\n";
  char line[128];
  for (const auto& r : h) {
    std::snprintf(line, sizeof(line), "%zu,%d,%.9g,%.9g,%.9g\n", r.epoch, r.phase, r.train_loss,
                  r.val_loss, r.lr);
    out += line;
  }
  io::write_file(path, out);
}

// ---- training ----

namespace detail {

inline model::ModelParams clone_params(const model::ModelParams& p) {
  model::ModelParams out;
  out.frozen = p.frozen;
  for (const auto& [name, node] : p.tensors)
    out.tensors.emplace(name, make_leaf(Tensor<float>(node->value), node->requires_grad));
  return out;
}

struct ClipRef {
  std::size_t u = 0, frame = 0;
};

struct WindowRef {
  std::size_t u = 0, start = 0;
};

// [B, K, H, W] pixel batch, [B, (K-1)*2, H, W] flow batch, [B, n*l] targets
struct ClipBatch {
  Tensor<float> pix, flow, targets;
};

inline ClipBatch assemble_clip_batch(const std::vector<data::PreparedUtterance>& utts,
                                     const std::vector<ClipRef>& refs, std::size_t b0,
                                     std::size_t b1, const data::SampleSpec& sp,
                                     const model::ModelConfig& cfg) {
  std::size_t b = b1 - b0;
  ClipBatch batch;
  if (cfg.use_pixels) batch.pix = Tensor<float>({b, cfg.k, cfg.h, cfg.w});
  if (cfg.use_flow) batch.flow = Tensor<float>({b, (cfg.k - 1) * 2, cfg.h, cfg.w});
  batch.targets = Tensor<float>({b, cfg.n_mels * cfg.l});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& ref = refs[b0 + i];
    const auto& prep = utts[ref.u];
    if (cfg.use_pixels) {
      auto t = data::clip_tensor(prep, ref.frame, sp);
      std::copy(t.data.begin(), t.data.end(), batch.pix.data.begin() + i * t.size());
    }
    if (cfg.use_flow) {
      auto t = data::flow_tensor(prep, ref.frame, sp);
      std::copy(t.data.begin(), t.data.end(), batch.flow.data.begin() + i * t.size());
    }
    auto mb = data::mel_block(prep, ref.frame);
    std::copy(mb.data.begin(), mb.data.end(), batch.targets.data.begin() + i * mb.size());
  }
  return batch;
}

inline NodePtr<float> phase1_forward(const ClipBatch& batch, const model::ModelParams& params,
                                     const model::ModelConfig& cfg, Mode mode, Rng& rng) {
  auto emb = model::encoder_forward(batch.pix, batch.flow, params, cfg, mode, &rng);
  auto dec = model::decoder_forward(emb, params, cfg, mode, rng);
  return mse(model::to_feature_space(dec), constant(batch.targets));
}

inline double eval_phase1(const std::vector<data::PreparedUtterance>& utts,
                          const std::vector<ClipRef>& refs, const model::ModelParams& params,
                          const model::ModelConfig& cfg, const data::SampleSpec& sp,
                          std::size_t batch_size, Rng& rng) {
  double total = 0;
  for (std::size_t b0 = 0; b0 < refs.size(); b0 += batch_size) {
    std::size_t b1 = std::min(refs.size(), b0 + batch_size);
    auto batch = assemble_clip_batch(utts, refs, b0, b1, sp, cfg);
    auto loss = phase1_forward(batch, params, cfg, Mode::infer, rng);
    total += double(loss->value.data[0]) * double(b1 - b0);
  }
  return total / double(refs.size());
}

// Per-frame embeddings for every utterance; valid because the encoder is
// frozen and evaluated in infer mode throughout phase 2.
inline std::vector<Tensor<float>> cache_embeddings(
    const std::vector<data::PreparedUtterance>& utts, const model::ModelParams& params,
    const model::ModelConfig& cfg, const data::SampleSpec& sp, std::size_t batch_size) {
  std::vector<Tensor<float>> out;
  out.reserve(utts.size());
  for (const auto& prep : utts)
    out.push_back(pipeline::embed_utterance(prep, params, cfg, sp, batch_size));
  return out;
}

struct WindowTargets {
  Tensor<float> mel;  // [T, n*l]
  Tensor<float> lin;  // [T*l, d_lin]
};

inline WindowTargets window_targets(const data::PreparedUtterance& prep, std::size_t start,
                                    const model::ModelConfig& cfg) {
  WindowTargets wt;
  wt.mel = Tensor<float>({cfg.t, cfg.n_mels * cfg.l});
  for (std::size_t c = 0; c < cfg.t; ++c) {
    auto mb = data::mel_block(prep, start + c);
    std::copy(mb.data.begin(), mb.data.end(), wt.mel.data.begin() + c * mb.size());
  }
  wt.lin = Tensor<float>({cfg.t * cfg.l, cfg.d_lin});
  for (std::size_t r = 0; r < cfg.t * cfg.l; ++r)
    for (std::size_t col = 0; col < cfg.d_lin; ++col)
      wt.lin.at(r, col) = float(prep.feat.lin.at(start * cfg.l + r, col));
  return wt;
}

inline NodePtr<float> phase2_forward(const Tensor<float>& emb_rows, const WindowTargets& wt,
                                     const model::ModelParams& params,
                                     const model::ModelConfig& cfg, Mode mode, Rng& rng,
                                     double w_mel, double w_lin) {
  auto dec = model::decoder_forward(constant(emb_rows), params, cfg, mode, rng);
  auto feats = model::to_feature_space(dec);
  auto seq = model::mel_sequence(feats, cfg.n_mels, cfg.l);
  auto lin = model::postnet_forward(seq, params, cfg, mode);
  return two_term_loss(feats, constant(wt.mel), lin, constant(wt.lin), w_mel, w_lin);
}

inline Tensor<float> embedding_rows(const Tensor<float>& cache, std::size_t start,
                                    std::size_t t, std::size_t e) {
  Tensor<float> out({t, e});
  std::copy(cache.data.begin() + start * e, cache.data.begin() + (start + t) * e,
            out.data.begin());
  return out;
}

// Plateau decay, early stopping, and best-checkpoint tracking for one phase.
struct PhaseTracker {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  model::ModelParams best_params;

  // returns false when training should stop
  bool observe(double val_loss, const model::ModelParams& current, const TrainConfig& tc,
               double& lr) {
    if (val_loss < best - tc.min_delta) {
      best = val_loss;
      bad = 0;
      best_params = clone_params(current);
      return true;
    }
    ++bad;
    if (bad >= tc.early_stop) return false;
    if (tc.plateau_patience > 0 && bad % tc.plateau_patience == 0) lr *= tc.plateau_factor;
    return true;
  }
};

}  // namespace detail

// Mean infer-mode mel MSE of the decoder output over every clip of `utts`.
inline double eval_mel_mse(const model::ModelParams& params, const model::ModelConfig& cfg,
                           const data::SampleSpec& sp,
                           const std::vector<data::PreparedUtterance>& utts,
                           std::size_t batch_size = 16) {
  std::vector<detail::ClipRef> refs;
  for (std::size_t u = 0; u < utts.size(); ++u)
    for (std::size_t i = 0; i < utts[u].frames; ++i) refs.push_back({u, i});
  Rng rng(0);
  return detail::eval_phase1(utts, refs, params, cfg, sp, batch_size, rng);
}

inline TrainResult train(const Dataset& ds, model::ModelConfig cfg, const TrainConfig& tc) {
  validate(tc);
  model::validate(cfg);
  if (ds.train.empty() || ds.val.empty())
    throw DataError("train: need nonempty train and validation splits");
  const auto& sp = ds.spec;
  if (cfg.k != sp.clip_frames || cfg.h != sp.height || cfg.w != sp.width)
    throw ConfigError("train: model clip geometry disagrees with the sample spec");
  if (cfg.n_mels != sp.feat.n_mels)
    throw ConfigError("train: model n_mels " + std::to_string(cfg.n_mels) +
                      " vs feature n_mels " + std::to_string(sp.feat.n_mels));
  for (const auto& prep : {std::cref(ds.train.front()), std::cref(ds.val.front())}) {
    if (prep.get().l != cfg.l)
      throw ConfigError("train: model l " + std::to_string(cfg.l) + " vs prepared l " +
                        std::to_string(prep.get().l));
    if (cfg.use_postnet && prep.get().feat.lin.bins != cfg.d_lin)
      throw ConfigError("train: model d_lin " + std::to_string(cfg.d_lin) +
                        " vs feature bins " + std::to_string(prep.get().feat.lin.bins));
  }
  cfg.dropout = tc.dense_dropout;
  cfg.conv_dropout = tc.conv_dropout;

  TrainResult result;
  auto params = model::init_params(cfg, tc.seed);
  Rng rng(tc.seed ^ 0x5851f42d4c957f2dULL);

  // ---- phase 1: encoder + decoder on the mel loss ----
  std::vector<detail::ClipRef> train_refs, val_refs;
  for (std::size_t u = 0; u < ds.train.size(); ++u)
    for (std::size_t i = 0; i < ds.train[u].frames; ++i) train_refs.push_back({u, i});
  for (std::size_t u = 0; u < ds.val.size(); ++u)
    for (std::size_t i = 0; i < ds.val[u].frames; ++i) val_refs.push_back({u, i});

  AdamState adam;
  detail::PhaseTracker track;
  double lr = tc.lr;
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    rng.shuffle(train_refs);
    double train_loss = 0;
    for (std::size_t b0 = 0; b0 < train_refs.size(); b0 += tc.batch_size) {
      std::size_t b1 = std::min(train_refs.size(), b0 + tc.batch_size);
      auto batch = detail::assemble_clip_batch(ds.train, train_refs, b0, b1, sp, cfg);
      auto loss = detail::phase1_forward(batch, params, cfg, Mode::train, rng);
      backward(loss);
      adam_step(params, adam, lr);
      zero_grads(params);
      train_loss += double(loss->value.data[0]) * double(b1 - b0);
    }
    train_loss /= double(train_refs.size());
    double val_loss = detail::eval_phase1(ds.val, val_refs, params, cfg, sp, tc.batch_size, rng);
    result.history.push_back({epoch, 1, train_loss, val_loss, lr});
    if (!std::isfinite(val_loss))
      throw NumericError("train: validation loss is not finite at epoch " +
                         std::to_string(epoch) + " (phase 1)");
    if (!track.observe(val_loss, params, tc, lr)) break;
  }
  params = track.best_params.tensors.empty() ? std::move(params)
                                             : detail::clone_params(track.best_params);
  result.phase1_params = detail::clone_params(params);

  if (!cfg.use_postnet) {
    result.params = std::move(params);
    return result;
  }

  // ---- phase 2: decoder + post-net on the two-term loss, encoder frozen ----
  for (const auto& [name, node] : params.tensors)
    if (name.rfind("enc.", 0) == 0 && !model::is_stat(name)) params.frozen.insert(name);

  std::vector<detail::WindowRef> train_wins, val_wins;
  for (std::size_t u = 0; u < ds.train.size(); ++u)
    for (std::size_t s = 0; s + cfg.t <= ds.train[u].frames; ++s) train_wins.push_back({u, s});
  for (std::size_t u = 0; u < ds.val.size(); ++u)
    for (std::size_t s = 0; s + cfg.t <= ds.val[u].frames; ++s) val_wins.push_back({u, s});
  if (train_wins.empty() || val_wins.empty())
    throw DataError("train: phase 2 needs at least one " + std::to_string(cfg.t) +
                    "-clip window in both splits");

  auto train_emb = detail::cache_embeddings(ds.train, params, cfg, sp, tc.batch_size);
  auto val_emb = detail::cache_embeddings(ds.val, params, cfg, sp, tc.batch_size);

  AdamState adam2;
  detail::PhaseTracker track2;
  lr = tc.lr;
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    rng.shuffle(train_wins);
    double train_loss = 0;
    for (std::size_t b0 = 0; b0 < train_wins.size(); b0 += tc.batch_size) {
      std::size_t b1 = std::min(train_wins.size(), b0 + tc.batch_size);
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& ref = train_wins[i];
        auto emb = detail::embedding_rows(train_emb[ref.u], ref.start, cfg.t, cfg.embedding);
        auto wt = detail::window_targets(ds.train[ref.u], ref.start, cfg);
        auto loss = detail::phase2_forward(emb, wt, params, cfg, Mode::train, rng, tc.w_mel,
                                           tc.w_lin);
        backward(affine(loss, float(1.0 / double(b1 - b0)), 0.0f));
        train_loss += double(loss->value.data[0]);
      }
      adam_step(params, adam2, lr);
      zero_grads(params);
    }
    train_loss /= double(train_wins.size());

    double val_loss = 0;
    for (const auto& ref : val_wins) {
      auto emb = detail::embedding_rows(val_emb[ref.u], ref.start, cfg.t, cfg.embedding);
      auto wt = detail::window_targets(ds.val[ref.u], ref.start, cfg);
      auto loss =
          detail::phase2_forward(emb, wt, params, cfg, Mode::infer, rng, tc.w_mel, tc.w_lin);
      val_loss += double(loss->value.data[0]);
    }
    val_loss /= double(val_wins.size());

    result.history.push_back({epoch, 2, train_loss, val_loss, lr});
    if (!std::isfinite(val_loss))
      throw NumericError("train: validation loss is not finite at epoch " +
                         std::to_string(epoch) + " (phase 2)");
    if (!track2.observe(val_loss, params, tc, lr)) break;
  }
  result.params = track2.best_params.tensors.empty() ? std::move(params)
                                                     : detail::clone_params(track2.best_params);
  return result;
}

}  // namespace v2s::training
