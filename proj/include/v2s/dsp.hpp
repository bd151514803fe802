#pragma once

// STFT / ISTFT, mel filterbank, log-magnitude features, Griffin-Lim and
// windowed-sinc resampling. Everything here runs in double precision.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "v2s/error.hpp"
#include "v2s/tensor.hpp"

namespace v2s::dsp {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 0;
};

enum class Scale { linear, mel };

struct ComplexSpectrogram {
  std::vector<std::complex<double>> values;  // frames x bins, row-major
  std::size_t num_frames = 0;
  std::size_t bins = 0;
  std::size_t window = 0, hop = 0, fft = 0;
  double sample_rate = 0;

  std::complex<double>& at(std::size_t f, std::size_t b) { return values[f * bins + b]; }
  std::complex<double> at(std::size_t f, std::size_t b) const { return values[f * bins + b]; }
};

struct LogMagSpectrogram {
  std::vector<double> values;  // frames x bins, row-major, in [0,1]
  std::size_t num_frames = 0;
  std::size_t bins = 0;
  Scale scale = Scale::linear;
  double peak = 0;  // linear-magnitude peak removed before compression; 0 for silence
  double compress = 10000.0;
  std::size_t window = 0, hop = 0, fft = 0;
  double sample_rate = 0;

  double& at(std::size_t f, std::size_t b) { return values[f * bins + b]; }
  double at(std::size_t f, std::size_t b) const { return values[f * bins + b]; }
};

// ---- FFT (iterative radix-2) ----

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  std::size_t n = a.size();
  if (!is_pow2(n)) throw ConfigError("fft size must be a power of two, got " + std::to_string(n));
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / double(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& v : a) v /= double(n);
}

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / double(n));
  return w;
}

// ---- STFT / ISTFT ----

inline ComplexSpectrogram stft(const Waveform& w, std::size_t window, std::size_t hop,
                               std::size_t fft) {
  if (window == 0 || hop == 0 || fft < window)
    throw ConfigError("stft: need 0 < hop, 0 < window <= fft (window " + std::to_string(window) +
                      ", hop " + std::to_string(hop) + ", fft " + std::to_string(fft) + ")");
  if (hop > window) throw ConfigError("stft: hop must not exceed window length");
  if (w.samples.size() < window)
    throw ShapeError("stft: waveform of " + std::to_string(w.samples.size()) +
                     " samples is shorter than one " + std::to_string(window) + "-sample window");
  ComplexSpectrogram s;
  s.num_frames = (w.samples.size() - window) / hop + 1;
  s.bins = fft / 2 + 1;
  s.window = window;
  s.hop = hop;
  s.fft = fft;
  s.sample_rate = w.sample_rate;
  s.values.resize(s.num_frames * s.bins);
  auto win = hann_window(window);
  std::vector<std::complex<double>> buf(fft);
  for (std::size_t f = 0; f < s.num_frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0, 0));
    const double* x = w.samples.data() + f * hop;
    for (std::size_t i = 0; i < window; ++i) buf[i] = x[i] * win[i];
    fft_inplace(buf, false);
    for (std::size_t b = 0; b < s.bins; ++b) s.at(f, b) = buf[b];
  }
  return s;
}

// Weighted overlap-add with window-sum-of-squares normalization: the
// least-squares inverse of stft for these analysis windows.
inline Waveform istft(const ComplexSpectrogram& s) {
  if (s.hop > s.window || s.window > s.fft || s.bins != s.fft / 2 + 1)
    throw ConfigError("istft: inconsistent spectrogram metadata");
  std::size_t out_len = s.num_frames == 0 ? 0 : (s.num_frames - 1) * s.hop + s.window;
  Waveform w;
  w.sample_rate = s.sample_rate;
  w.samples.assign(out_len, 0.0);
  std::vector<double> wsum(out_len, 0.0);
  auto win = hann_window(s.window);
  std::vector<std::complex<double>> buf(s.fft);
  for (std::size_t f = 0; f < s.num_frames; ++f) {
    for (std::size_t b = 0; b < s.bins; ++b) buf[b] = s.at(f, b);
    for (std::size_t b = s.bins; b < s.fft; ++b) buf[b] = std::conj(s.at(f, s.fft - b));
    fft_inplace(buf, true);
    double* y = w.samples.data() + f * s.hop;
    double* ws = wsum.data() + f * s.hop;
    for (std::size_t i = 0; i < s.window; ++i) {
      y[i] += buf[i].real() * win[i];
      ws[i] += win[i] * win[i];
    }
  }
  for (std::size_t i = 0; i < out_len; ++i)
    w.samples[i] = wsum[i] > 1e-12 ? w.samples[i] / wsum[i] : 0.0;
  return w;
}

// ---- mel filterbank ----

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

struct MelFilterbank {
  Tensor<double> weights;  // n_mels x bins
  std::vector<double> centers_hz;
};

inline MelFilterbank mel_filterbank(std::size_t n_mels, std::size_t fft, double sample_rate,
                                    double f_min, double f_max) {
  if (n_mels == 0) throw ConfigError("mel_filterbank: n_mels must be positive");
  if (!(f_min < f_max) || f_max > sample_rate / 2.0 || f_min < 0)
    throw ConfigError("mel_filterbank: need 0 <= f_min < f_max <= rate/2, got f_min " +
                      std::to_string(f_min) + ", f_max " + std::to_string(f_max) + " at rate " +
                      std::to_string(sample_rate));
  std::size_t bins = fft / 2 + 1;
  double m_lo = hz_to_mel(f_min), m_hi = hz_to_mel(f_max);
  std::vector<double> pts(n_mels + 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = mel_to_hz(m_lo + (m_hi - m_lo) * double(i) / double(n_mels + 1));

  MelFilterbank fb;
  fb.weights = Tensor<double>::zeros({n_mels, bins});
  fb.centers_hz.assign(pts.begin() + 1, pts.end() - 1);
  double bin_hz = sample_rate / double(fft);
  for (std::size_t m = 0; m < n_mels; ++m) {
    double lo = pts[m], mid = pts[m + 1], hi = pts[m + 2];
    bool any = false;
    for (std::size_t b = 0; b < bins; ++b) {
      double f = b * bin_hz;
      double w = 0;
      if (f > lo && f < mid)
        w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        w = (hi - f) / (hi - mid);
      if (w > 0) {
        fb.weights.at(m, b) = w;
        any = true;
      }
    }
    if (!any)
      throw ConfigError("mel_filterbank: filter " + std::to_string(m) +
                        " is empty; n_mels too large for fft resolution");
  }
  return fb;
}

// ---- features ----

struct FeatParams {
  std::size_t window = 640;
  std::size_t hop = 160;
  std::size_t fft = 1024;
  std::size_t n_mels = 80;
  double f_min = 20.0;
  double f_max = 7800.0;
  double compress = 10000.0;
};

struct Features {
  LogMagSpectrogram mel;
  LogMagSpectrogram lin;
};

inline double compress_value(double s, double c) { return std::log1p(s * c) / std::log1p(c); }
inline double decompress_value(double v, double c) { return std::expm1(v * std::log1p(c)) / c; }

namespace detail {

inline LogMagSpectrogram normalize_compress(std::vector<double> mag, std::size_t frames,
                                            std::size_t bins, Scale scale, double compress,
                                            const ComplexSpectrogram& meta) {
  LogMagSpectrogram out;
  out.num_frames = frames;
  out.bins = bins;
  out.scale = scale;
  out.compress = compress;
  out.window = meta.window;
  out.hop = meta.hop;
  out.fft = meta.fft;
  out.sample_rate = meta.sample_rate;
  double peak = 0;
  for (double v : mag) peak = std::max(peak, v);
  out.peak = peak;
  out.values.assign(mag.size(), 0.0);
  if (peak > 0)
    for (std::size_t i = 0; i < mag.size(); ++i)
      out.values[i] = compress_value(mag[i] / peak, compress);
  return out;
}

}  // namespace detail

inline Features featurize(const Waveform& w, const FeatParams& p) {
  if (p.f_max > w.sample_rate / 2.0)
    throw ConfigError("featurize: f_max above Nyquist for rate " + std::to_string(w.sample_rate));
  auto spec = stft(w, p.window, p.hop, p.fft);
  std::size_t F = spec.num_frames, B = spec.bins;
  std::vector<double> lin_mag(F * B);
  for (std::size_t i = 0; i < lin_mag.size(); ++i) lin_mag[i] = std::abs(spec.values[i]);

  auto fb = mel_filterbank(p.n_mels, p.fft, w.sample_rate, p.f_min, p.f_max);
  std::vector<double> mel_mag(F * p.n_mels, 0.0);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t m = 0; m < p.n_mels; ++m) {
      double acc = 0;
      const double* row = fb.weights.data.data() + m * B;
      const double* src = lin_mag.data() + f * B;
      for (std::size_t b = 0; b < B; ++b) acc += row[b] * src[b];
      mel_mag[f * p.n_mels + m] = acc;
    }

  Features out;
  out.lin = detail::normalize_compress(std::move(lin_mag), F, B, Scale::linear, p.compress, spec);
  out.mel =
      detail::normalize_compress(std::move(mel_mag), F, p.n_mels, Scale::mel, p.compress, spec);
  return out;
}

// ---- Griffin-Lim ----

struct GlReport {
  std::vector<double> errors;  // spectral-convergence error per iteration
};

// Core loop on a raw magnitude matrix (frames x bins, linear units).
inline Waveform griffin_lim_mag(const std::vector<double>& mag, std::size_t frames,
                                std::size_t bins, std::size_t window, std::size_t hop,
                                std::size_t fft, double sample_rate, std::size_t iterations,
                                GlReport* report = nullptr) {
  if (iterations < 1) throw ConfigError("griffin_lim: iterations must be >= 1");
  double mnorm = 0;
  for (double v : mag) mnorm += v * v;
  mnorm = std::sqrt(mnorm);

  ComplexSpectrogram s;
  s.num_frames = frames;
  s.bins = bins;
  s.window = window;
  s.hop = hop;
  s.fft = fft;
  s.sample_rate = sample_rate;
  s.values.resize(frames * bins);

  if (mnorm == 0.0) {
    if (report) report->errors.assign(iterations, 0.0);
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(frames == 0 ? 0 : (frames - 1) * hop + window, 0.0);
    return w;
  }

  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = mag[i];  // zero phase
  for (std::size_t it = 0; it < iterations; ++it) {
    Waveform x = istft(s);
    ComplexSpectrogram c = stft(x, window, hop, fft);
    double err = 0;
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      double d = std::abs(c.values[i]) - mag[i];
      err += d * d;
    }
    err = std::sqrt(err) / mnorm;
    if (report) report->errors.push_back(err);
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      double a = std::abs(c.values[i]);
      s.values[i] = a > 0 ? c.values[i] * (mag[i] / a) : std::complex<double>(mag[i], 0.0);
    }
  }
  return istft(s);
}

inline Waveform griffin_lim(const LogMagSpectrogram& m, std::size_t iterations,
                            GlReport* report = nullptr) {
  if (m.scale != Scale::linear)
    throw ConfigError("griffin_lim: requires a linear-scale spectrogram");
  std::vector<double> mag(m.values.size());
  for (std::size_t i = 0; i < mag.size(); ++i)
    mag[i] = decompress_value(std::clamp(m.values[i], 0.0, 1.0), m.compress) * m.peak;
  return griffin_lim_mag(mag, m.num_frames, m.bins, m.window, m.hop, m.fft, m.sample_rate,
                         iterations, report);
}

// ---- resampling ----

inline Waveform resample(const Waveform& w, double target_rate) {
  if (w.sample_rate <= 0 || target_rate <= 0)
    throw ConfigError("resample: rates must be positive");
  if (w.sample_rate == target_rate) return w;
  double ratio = target_rate / w.sample_rate;
  std::size_t out_len =
      static_cast<std::size_t>(std::llround(double(w.samples.size()) * ratio));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.assign(out_len, 0.0);

  double cutoff = std::min(1.0, ratio);  // fraction of source Nyquist
  double hw = std::ceil(32.0 / cutoff);  // half-width in source samples
  auto kernel = [&](double d) {
    if (std::abs(d) > hw) return 0.0;
    double x = cutoff * d;
    double sinc = x == 0.0 ? 1.0 : std::sin(M_PI * x) / (M_PI * x);
    double t = d / hw;
    double win = 0.42 + 0.5 * std::cos(M_PI * t) + 0.08 * std::cos(2.0 * M_PI * t);
    return cutoff * sinc * win;
  };

  std::ptrdiff_t n = static_cast<std::ptrdiff_t>(w.samples.size());
  for (std::size_t j = 0; j < out_len; ++j) {
    double t = double(j) / ratio;
    std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(std::ceil(t - hw));
    std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(std::floor(t + hw));
    double acc = 0;
    for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(0, lo); k <= std::min(n - 1, hi); ++k)
      acc += w.samples[static_cast<std::size_t>(k)] * kernel(t - double(k));
    out.samples[j] = std::clamp(acc, -1.0, 1.0);
  }
  return out;
}

inline void peak_normalize(Waveform& w, double target = 0.95) {
  double peak = 0;
  for (double v : w.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0) {
    double s = target / peak;
    for (auto& v : w.samples) v *= s;
  }
}

}  // namespace v2s::dsp
