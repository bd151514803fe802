#pragma once

// Utterance assembly from per-window model outputs: Gaussian-weighted overlap
// averaging, Griffin-Lim synthesis of linear spectrograms, and exemplar-based
// synthesis from mel features.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "v2s/dsp.hpp"
#include "v2s/tensor.hpp"

namespace v2s::synthesis {

// ---- overlap averaging ----

struct FramePrediction {
  Tensor<float> values;  // [l, bins] spectrogram rows for one video frame
  double offset = 0;     // prediction center minus window center, in spectrogram frames
};

struct PredictionSet {
  std::size_t frames = 0;  // video frames
  std::size_t l = 0;       // spectrogram frames per video frame
  std::size_t bins = 0;
  std::vector<std::vector<FramePrediction>> preds;

  PredictionSet() = default;
  PredictionSet(std::size_t frames_, std::size_t l_, std::size_t bins_)
      : frames(frames_), l(l_), bins(bins_), preds(frames_) {}
};

// Splits one window's output rows [t*l, bins] into per-frame predictions for
// video frames [start, start+t).
inline void add_window(PredictionSet& ps, std::size_t start, const Tensor<float>& rows,
                       std::size_t t) {
  if (t == 0 || ps.l == 0) throw ConfigError("add_window: empty window");
  if (rows.shape != Shape{t * ps.l, ps.bins})
    throw ShapeError("add_window: rows must be [t*l, bins]");
  if (start + t > ps.frames)
    throw ShapeError("add_window: window [" + std::to_string(start) + ", " +
                     std::to_string(start + t) + ") exceeds " + std::to_string(ps.frames) +
                     " frames");
  double center = double(t - 1) / 2.0;
  for (std::size_t c = 0; c < t; ++c) {
    FramePrediction fp;
    fp.offset = (double(c) - center) * double(ps.l);
    fp.values = Tensor<float>({ps.l, ps.bins});
    std::copy(rows.data.begin() + c * ps.l * ps.bins,
              rows.data.begin() + (c + 1) * ps.l * ps.bins, fp.values.data.begin());
    ps.preds[start + c].push_back(std::move(fp));
  }
}

inline double default_sigma(std::size_t t, std::size_t l) { return double(t * l) / 4.0; }

// Per frame, the Gaussian-weighted mean of its stacked predictions; weights
// are renormalized over however many predictions the frame accumulated.
inline Tensor<float> gaussian_average(const PredictionSet& ps, double sigma) {
  if (sigma <= 0) throw ConfigError("gaussian_average: sigma must be positive");
  if (ps.frames == 0) throw DataError("gaussian_average: empty prediction set");
  Tensor<float> out({ps.frames * ps.l, ps.bins});
  std::vector<double> acc(ps.l * ps.bins);
  for (std::size_t f = 0; f < ps.frames; ++f) {
    const auto& list = ps.preds[f];
    if (list.empty())
      throw DataError("gaussian_average: frame " + std::to_string(f) + " has no predictions");
    std::fill(acc.begin(), acc.end(), 0.0);
    double wsum = 0;
    for (const auto& fp : list) {
      double w = std::exp(-fp.offset * fp.offset / (2.0 * sigma * sigma));
      wsum += w;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * double(fp.values.data[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i)
      out.data[f * acc.size() + i] = float(acc[i] / wsum);
  }
  return out;
}

// ---- direct linear synthesis ----

inline Tensor<float> feature_tensor(const dsp::LogMagSpectrogram& m) {
  Tensor<float> t({m.num_frames, m.bins});
  for (std::size_t i = 0; i < m.values.size(); ++i) t.data[i] = float(m.values[i]);
  return t;
}

// Griffin-Lim on predicted linear-scale features in [0, 1]. The original
// magnitude peak is unknown for predictions, so synthesis runs at unit peak
// and the waveform is peak-normalized afterwards. Output is trimmed to
// rows*hop samples, the duration the spectrogram represents.
inline dsp::Waveform lin_synth(const Tensor<float>& lin, const dsp::FeatParams& fp,
                               double sample_rate, std::size_t iterations = 60,
                               dsp::GlReport* report = nullptr) {
  if (lin.shape.size() != 2 || lin.shape[1] != fp.fft / 2 + 1)
    throw ShapeError("lin_synth: features must be [frames, " + std::to_string(fp.fft / 2 + 1) +
                     "]");
  dsp::LogMagSpectrogram m;
  m.num_frames = lin.shape[0];
  m.bins = lin.shape[1];
  m.scale = dsp::Scale::linear;
  m.peak = 1.0;
  m.compress = fp.compress;
  m.window = fp.window;
  m.hop = fp.hop;
  m.fft = fp.fft;
  m.sample_rate = sample_rate;
  m.values.resize(lin.size());
  for (std::size_t i = 0; i < lin.size(); ++i)
    m.values[i] = std::clamp(double(lin.data[i]), 0.0, 1.0);
  auto wave = dsp::griffin_lim(m, iterations, report);
  wave.samples.resize(m.num_frames * fp.hop, 0.0);
  dsp::peak_normalize(wave, 0.95);
  return wave;
}

// ---- exemplar synthesis ----

enum class ExemplarQuery { mel, linear };

// Paired mel/linear feature frames drawn from training audio. Per-entry peaks
// preserve the linear-magnitude relation between the two representations.
struct ExemplarIndex {
  std::size_t n_mels = 0, bins = 0, entries = 0;
  std::vector<float> mel;  // entries x n_mels
  std::vector<float> lin;  // entries x bins
  std::vector<double> mel_peak, lin_peak;
};

inline ExemplarIndex build_exemplar_index(const std::vector<dsp::Features>& train) {
  if (train.empty()) throw DataError("build_exemplar_index: empty training set");
  ExemplarIndex idx;
  idx.n_mels = train.front().mel.bins;
  idx.bins = train.front().lin.bins;
  for (const auto& f : train) {
    if (f.mel.bins != idx.n_mels || f.lin.bins != idx.bins)
      throw ShapeError("build_exemplar_index: inconsistent feature dimensions");
    if (f.mel.num_frames != f.lin.num_frames)
      throw DataError("build_exemplar_index: mel/linear frame counts differ");
    for (std::size_t r = 0; r < f.mel.num_frames; ++r) {
      for (std::size_t c = 0; c < idx.n_mels; ++c)
        idx.mel.push_back(float(f.mel.at(r, c)));
      for (std::size_t c = 0; c < idx.bins; ++c) idx.lin.push_back(float(f.lin.at(r, c)));
      idx.mel_peak.push_back(f.mel.peak);
      idx.lin_peak.push_back(f.lin.peak);
      ++idx.entries;
    }
  }
  return idx;
}

// Exhaustive L2 scan; ties break to the lowest entry position.
inline std::size_t nearest(const ExemplarIndex& idx, const float* query,
                           ExemplarQuery space = ExemplarQuery::mel) {
  if (idx.entries == 0) throw DataError("nearest: empty index");
  const auto& table = space == ExemplarQuery::mel ? idx.mel : idx.lin;
  std::size_t dim = space == ExemplarQuery::mel ? idx.n_mels : idx.bins;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < idx.entries; ++e) {
    double d = 0;
    const float* row = table.data() + e * dim;
    for (std::size_t c = 0; c < dim; ++c) {
      double diff = double(row[c]) - double(query[c]);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  return best;
}

// Replaces each query frame by its nearest entry's linear frame.
inline Tensor<float> exemplar_spectrogram(const Tensor<float>& query, const ExemplarIndex& idx,
                                          ExemplarQuery space = ExemplarQuery::mel) {
  std::size_t dim = space == ExemplarQuery::mel ? idx.n_mels : idx.bins;
  if (query.shape.size() != 2 || query.shape[1] != dim)
    throw ShapeError("exemplar_spectrogram: query must be [frames, " + std::to_string(dim) +
                     "]");
  std::size_t s = query.shape[0];
  Tensor<float> out({s, idx.bins});
  for (std::size_t r = 0; r < s; ++r) {
    std::size_t e = nearest(idx, query.data.data() + r * dim, space);
    std::copy(idx.lin.begin() + e * idx.bins, idx.lin.begin() + (e + 1) * idx.bins,
              out.data.begin() + r * idx.bins);
  }
  return out;
}

inline dsp::Waveform mel_exemplar_synth(const Tensor<float>& mels, const ExemplarIndex& idx,
                                        const dsp::FeatParams& fp, double sample_rate,
                                        std::size_t iterations = 60,
                                        ExemplarQuery space = ExemplarQuery::mel) {
  return lin_synth(exemplar_spectrogram(mels, idx, space), fp, sample_rate, iterations);
}

}  // namespace v2s::synthesis
