#pragma once

// End-to-end inference: sliding-window model evaluation over a prepared
// utterance, Gaussian overlap averaging, and comparison helpers.

#include <algorithm>
#include <string>
#include <vector>

#include "v2s/data.hpp"
#include "v2s/model.hpp"
#include "v2s/synthesis.hpp"

namespace v2s::pipeline {

// [F, embedding] infer-mode encoder outputs, evaluated in batches. Valid as a
// cache because inference never updates batch statistics.
inline Tensor<float> embed_utterance(const data::PreparedUtterance& prep,
                                     const model::ModelParams& params,
                                     const model::ModelConfig& cfg, const data::SampleSpec& sp,
                                     std::size_t batch_size = 16) {
  if (batch_size < 1) throw ConfigError("embed_utterance: batch size must be >= 1");
  Tensor<float> emb({prep.frames, cfg.embedding});
  for (std::size_t b0 = 0; b0 < prep.frames; b0 += batch_size) {
    std::size_t b1 = std::min(prep.frames, b0 + batch_size);
    std::size_t b = b1 - b0;
    Tensor<float> pix, flow;
    if (cfg.use_pixels) pix = Tensor<float>({b, cfg.k, cfg.h, cfg.w});
    if (cfg.use_flow) flow = Tensor<float>({b, (cfg.k - 1) * 2, cfg.h, cfg.w});
    for (std::size_t i = 0; i < b; ++i) {
      if (cfg.use_pixels) {
        auto t = data::clip_tensor(prep, b0 + i, sp);
        std::copy(t.data.begin(), t.data.end(), pix.data.begin() + i * t.size());
      }
      if (cfg.use_flow) {
        auto t = data::flow_tensor(prep, b0 + i, sp);
        std::copy(t.data.begin(), t.data.end(), flow.data.begin() + i * t.size());
      }
    }
    auto node = model::encoder_forward(pix, flow, params, cfg, Mode::infer);
    std::copy(node->value.data.begin(), node->value.data.end(),
              emb.data.begin() + b0 * cfg.embedding);
  }
  return emb;
}

struct InferResult {
  Tensor<float> mel;  // [F*l, n_mels]
  Tensor<float> lin;  // [F*l, d_lin]; empty when the post-net is disabled
};

// Runs the model over every T-clip sliding window and Gaussian-averages the
// stacked per-frame predictions. sigma = 0 selects the default T*l/4.
inline InferResult infer_utterance(const data::PreparedUtterance& prep,
                                   const model::ModelParams& params,
                                   const model::ModelConfig& cfg, const data::SampleSpec& sp,
                                   double sigma = 0, std::size_t batch_size = 16) {
  model::validate(cfg);
  if (cfg.k != sp.clip_frames || cfg.h != sp.height || cfg.w != sp.width)
    throw ConfigError("infer_utterance: model clip geometry disagrees with the sample spec");
  if (prep.l != cfg.l)
    throw ConfigError("infer_utterance: model l " + std::to_string(cfg.l) +
                      " vs prepared l " + std::to_string(prep.l));
  if (prep.frames < cfg.t)
    throw DataError("infer_utterance: utterance " + prep.id + " has " +
                    std::to_string(prep.frames) + " frames, needs at least " +
                    std::to_string(cfg.t));

  auto emb = embed_utterance(prep, params, cfg, sp, batch_size);
  synthesis::PredictionSet mel_ps(prep.frames, cfg.l, cfg.n_mels);
  synthesis::PredictionSet lin_ps(prep.frames, cfg.l, cfg.d_lin);
  Rng unused(0);  // dropout is inert at inference
  for (std::size_t s = 0; s + cfg.t <= prep.frames; ++s) {
    Tensor<float> rows({cfg.t, cfg.embedding});
    std::copy(emb.data.begin() + s * cfg.embedding,
              emb.data.begin() + (s + cfg.t) * cfg.embedding, rows.data.begin());
    auto dec = model::decoder_forward(constant(std::move(rows)), params, cfg, Mode::infer,
                                      unused);
    auto seq = model::mel_sequence(model::to_feature_space(dec), cfg.n_mels, cfg.l);
    synthesis::add_window(mel_ps, s, seq->value, cfg.t);
    if (cfg.use_postnet) {
      auto lin = model::postnet_forward(seq, params, cfg, Mode::infer);
      synthesis::add_window(lin_ps, s, lin->value, cfg.t);
    }
  }
  double sg = sigma > 0 ? sigma : synthesis::default_sigma(cfg.t, cfg.l);
  InferResult out;
  out.mel = synthesis::gaussian_average(mel_ps, sg);
  if (cfg.use_postnet) out.lin = synthesis::gaussian_average(lin_ps, sg);
  return out;
}

// Mean squared error of averaged mel predictions against the utterance's own
// feature targets.
inline double mel_mse_vs_target(const InferResult& result,
                                const data::PreparedUtterance& prep) {
  std::size_t rows = prep.frames * prep.l, bins = prep.feat.mel.bins;
  if (result.mel.shape != Shape{rows, bins})
    throw ShapeError("mel_mse_vs_target: prediction shape mismatch");
  double acc = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < bins; ++c) {
      double d = double(result.mel.at(r, c)) - prep.feat.mel.at(r, c);
      acc += d * d;
    }
  return acc / double(rows * bins);
}

}  // namespace v2s::pipeline
