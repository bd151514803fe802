#pragma once

// Short-time objective intelligibility measures (STOI and its extended
// variant) plus report plumbing. Both follow the published constructions:
// 10 kHz analysis rate, 256/128/512 STFT, 15 one-third-octave bands from
// 150 Hz, 384 ms (30-frame) segments, 40 dB energy VAD.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "v2s/dsp.hpp"
#include "v2s/io.hpp"

namespace v2s::metrics {

namespace detail {

constexpr double kRate = 10000.0;
constexpr std::size_t kWin = 256, kHop = 128, kFft = 512;
constexpr std::size_t kBands = 15;
constexpr double kBandBase = 150.0;  // lowest one-third-octave center
constexpr std::size_t kSegFrames = 30;  // 384 ms at 10 kHz / 128 hop
constexpr double kDynRange = 40.0;      // VAD dynamic range, dB
constexpr double kBeta = -15.0;         // clipping bound, dB

// Removes frames whose clean-signal energy is more than 40 dB below the peak
// frame, applying the same mask to both signals, and overlap-adds the kept
// frames back into contiguous waveforms.
inline void remove_silent_frames(std::vector<double>& x, std::vector<double>& y) {
  if (x.size() < kWin) {
    x.clear();
    y.clear();
    return;
  }
  auto win = dsp::hann_window(kWin);
  std::size_t frames = (x.size() - kWin) / kHop + 1;
  std::vector<double> energy(frames);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < frames; ++f) {
    double e = 0;
    for (std::size_t i = 0; i < kWin; ++i) {
      double v = win[i] * x[f * kHop + i];
      e += v * v;
    }
    energy[f] = 10.0 * std::log10(e + 1e-300);
    peak = std::max(peak, energy[f]);
  }
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < frames; ++f)
    if (energy[f] > peak - kDynRange) keep.push_back(f);

  auto rebuild = [&](const std::vector<double>& src) {
    std::vector<double> out;
    if (keep.empty()) return out;
    out.assign((keep.size() - 1) * kHop + kWin, 0.0);
    for (std::size_t k = 0; k < keep.size(); ++k)
      for (std::size_t i = 0; i < kWin; ++i)
        out[k * kHop + i] += win[i] * src[keep[k] * kHop + i];
    return out;
  };
  auto nx = rebuild(x);
  y = rebuild(y);
  x = std::move(nx);
}

// One-third-octave band edges mapped to fft bins of the 10 kHz analysis;
// edges snap to the nearest bin frequency.
struct BandLayout {
  std::size_t lo[kBands], hi[kBands];  // bin range [lo, hi)
};

inline BandLayout band_layout() {
  BandLayout b{};
  std::size_t bins = kFft / 2 + 1;
  double bin_hz = kRate / double(kFft);
  auto snap = [&](double f) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < bins; ++k) {
      double d = std::abs(double(k) * bin_hz - f);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    return best;
  };
  for (std::size_t j = 0; j < kBands; ++j) {
    double cf = kBandBase * std::pow(2.0, double(j) / 3.0);
    b.lo[j] = snap(cf / std::pow(2.0, 1.0 / 6.0));
    b.hi[j] = snap(cf * std::pow(2.0, 1.0 / 6.0));
  }
  return b;
}

// [frames x kBands] one-third-octave band envelopes of a 10 kHz signal.
inline std::vector<double> band_envelopes(const std::vector<double>& x, std::size_t& frames) {
  dsp::Waveform w;
  w.samples = x;
  w.sample_rate = kRate;
  auto spec = dsp::stft(w, kWin, kHop, kFft);
  auto layout = band_layout();
  frames = spec.num_frames;
  std::vector<double> env(frames * kBands);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t j = 0; j < kBands; ++j) {
      double e = 0;
      for (std::size_t k = layout.lo[j]; k < layout.hi[j]; ++k) {
        double m = std::abs(spec.at(f, k));
        e += m * m;
      }
      env[f * kBands + j] = std::sqrt(e);
    }
  return env;
}

// Correlation with explicit zero-norm handling: two all-zero sequences are
// perfectly correlated, one zero against nonzero is uncorrelated.
inline double correlate(const double* a, const double* b, std::size_t n) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double na = 0, nb = 0, dot = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    na += da * da;
    nb += db * db;
    dot += da * db;
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

// Shared front end: resample to 10 kHz, trim to equal length, VAD by clean
// energy, band decomposition. Returns envelope matrices [frames x kBands].
inline void front_end(const dsp::Waveform& clean, const dsp::Waveform& degraded,
                      std::vector<double>& ex, std::vector<double>& ey, std::size_t& frames,
                      const char* who) {
  if (clean.sample_rate <= 0 || degraded.sample_rate <= 0)
    throw ConfigError(std::string(who) + ": waveforms need a sample rate");
  auto x = dsp::resample(clean, kRate).samples;
  auto y = dsp::resample(degraded, kRate).samples;
  if (x.size() != y.size()) {
    std::cerr << who << ": length mismatch (" << x.size() << " vs " << y.size()
              << " samples at 10 kHz), trimming to the shorter\n";
    std::size_t n = std::min(x.size(), y.size());
    x.resize(n);
    y.resize(n);
  }
  remove_silent_frames(x, y);
  std::size_t fx = 0, fy = 0;
  if (x.size() >= kWin) {
    ex = band_envelopes(x, fx);
    ey = band_envelopes(y, fy);
  }
  frames = fx;
  if (frames < kSegFrames)
    throw DataError(std::string(who) + ": need at least 384 ms of active signal, got " +
                    std::to_string(frames) + " frames after silence removal");
}

}  // namespace detail

// Mean over bands and sliding 30-frame segments of the correlation between
// clean and normalized, clipped degraded band envelopes.
inline double stoi(const dsp::Waveform& clean, const dsp::Waveform& degraded) {
  std::vector<double> ex, ey;
  std::size_t frames = 0;
  detail::front_end(clean, degraded, ex, ey, frames, "stoi");

  constexpr std::size_t n = detail::kSegFrames, nb = detail::kBands;
  const double clip = std::pow(10.0, -detail::kBeta / 20.0);  // 10^(15/20)
  double total = 0;
  std::size_t count = 0;
  std::vector<double> xs(n), ys(n);
  for (std::size_t m = n; m <= frames; ++m) {
    for (std::size_t j = 0; j < nb; ++j) {
      double nx = 0, ny = 0;
      for (std::size_t i = 0; i < n; ++i) {
        xs[i] = ex[(m - n + i) * nb + j];
        ys[i] = ey[(m - n + i) * nb + j];
        nx += xs[i] * xs[i];
        ny += ys[i] * ys[i];
      }
      double alpha = ny == 0.0 ? 0.0 : std::sqrt(nx / ny);
      for (std::size_t i = 0; i < n; ++i)
        ys[i] = std::min(alpha * ys[i], (1.0 + clip) * xs[i]);
      total += detail::correlate(xs.data(), ys.data(), n);
      ++count;
    }
  }
  return total / double(count);
}

// Extended variant: per segment, band envelopes are row- then column-
// normalized and the mean column dot product is taken (spectral correlation).
inline double estoi(const dsp::Waveform& clean, const dsp::Waveform& degraded) {
  std::vector<double> ex, ey;
  std::size_t frames = 0;
  detail::front_end(clean, degraded, ex, ey, frames, "estoi");

  constexpr std::size_t n = detail::kSegFrames, nb = detail::kBands;
  // [nb x n] segment matrices, row-major by band
  std::vector<double> xs(nb * n), ys(nb * n);
  auto normalize_rows = [&](std::vector<double>& a) {
    for (std::size_t j = 0; j < nb; ++j) {
      double* row = a.data() + j * n;
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += row[i];
      mean /= double(n);
      double norm = 0;
      for (std::size_t i = 0; i < n; ++i) {
        row[i] -= mean;
        norm += row[i] * row[i];
      }
      norm = std::sqrt(norm);
      if (norm > 0)
        for (std::size_t i = 0; i < n; ++i) row[i] /= norm;
    }
  };
  auto normalize_cols = [&](std::vector<double>& a) {
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0;
      for (std::size_t j = 0; j < nb; ++j) mean += a[j * n + i];
      mean /= double(nb);
      double norm = 0;
      for (std::size_t j = 0; j < nb; ++j) {
        a[j * n + i] -= mean;
        norm += a[j * n + i] * a[j * n + i];
      }
      norm = std::sqrt(norm);
      if (norm > 0)
        for (std::size_t j = 0; j < nb; ++j) a[j * n + i] /= norm;
    }
  };

  double total = 0;
  std::size_t count = 0;
  for (std::size_t m = n; m <= frames; ++m) {
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        xs[j * n + i] = ex[(m - n + i) * nb + j];
        ys[j * n + i] = ey[(m - n + i) * nb + j];
      }
    normalize_rows(xs);
    normalize_rows(ys);
    normalize_cols(xs);
    normalize_cols(ys);
    double d = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < nb; ++j) dot += xs[j * n + i] * ys[j * n + i];
      d += dot;
    }
    total += d / double(n);
    ++count;
  }
  return total / double(count);
}

// ---- report ----

struct UttScore {
  std::string id;
  double stoi = 0, estoi = 0;
  bool ok = false;
  std::string error;  // reason when not scored
};

struct ScoreReport {
  std::vector<UttScore> utts;
  double mean_stoi = 0, mean_estoi = 0;
  std::size_t scored = 0;
};

struct EvalPair {
  std::string id;
  dsp::Waveform clean, reconstructed;
};

inline ScoreReport eval_report(const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw DataError("eval_report: no pairs given");
  ScoreReport rep;
  for (const auto& p : pairs) {
    UttScore s;
    s.id = p.id;
    try {
      s.stoi = stoi(p.clean, p.reconstructed);
      s.estoi = estoi(p.clean, p.reconstructed);
      s.ok = true;
      rep.mean_stoi += s.stoi;
      rep.mean_estoi += s.estoi;
      ++rep.scored;
    } catch (const Error& e) {
      s.error = e.what();
    }
    rep.utts.push_back(std::move(s));
  }
  if (rep.scored == 0) throw DataError("eval_report: no pair could be scored");
  rep.mean_stoi /= double(rep.scored);
  rep.mean_estoi /= double(rep.scored);
  return rep;
}

// One row per pair (blank scores when a pair failed) plus a mean row.
inline void write_score_csv(const std::string& path, const ScoreReport& rep) {
  std::string out = "utterance,stoi,estoi\n";
  char line[160];
  for (const auto& s : rep.utts) {
    if (s.ok) {
      std::snprintf(line, sizeof(line), "%s,%.6f,%.6f\n", s.id.c_str(), s.stoi, s.estoi);
      out += line;
    } else {
      out += s.id + ",,\n";
    }
  }
  std::snprintf(line, sizeof(line), "mean,%.6f,%.6f\n", rep.mean_stoi, rep.mean_estoi);
  out += line;
  io::write_file(path, out);
}

}  // namespace v2s::metrics
