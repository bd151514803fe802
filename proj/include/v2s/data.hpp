#pragma once

// Corpus handling: PGM/WAV/tensor file IO, synthetic audiovisual corpus
// generation, utterance loading and training-sample assembly.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "v2s/dsp.hpp"
#include "v2s/error.hpp"
#include "v2s/io.hpp"
#include "v2s/tensor.hpp"
#include "v2s/vision.hpp"

namespace v2s::data {

namespace fs = std::filesystem;

namespace detail {
using io::ByteReader;
using io::put_f32;
using io::put_u16;
using io::put_u32;
using io::write_file;
}  // namespace detail

// ---- PGM (P5, 8-bit) ----

inline void write_pgm(const std::string& path, const vision::Frame& f) {
  std::string out = "P5\n" + std::to_string(f.w) + " " + std::to_string(f.h) + "\n255\n";
  out.reserve(out.size() + f.px.size());
  for (double v : f.px) {
    int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.push_back(static_cast<char>(q));
  }
  detail::write_file(path, out);
}

inline vision::Frame read_pgm(const std::string& path) {
  detail::ByteReader r(path);
  auto token = [&]() -> std::string {
    // skip whitespace and '#' comments
    while (r.pos < r.bytes.size()) {
      char c = r.bytes[r.pos];
      if (c == '#') {
        while (r.pos < r.bytes.size() && r.bytes[r.pos] != '\n') ++r.pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++r.pos;
      } else {
        break;
      }
    }
    std::size_t start = r.pos;
    while (r.pos < r.bytes.size() &&
           !std::isspace(static_cast<unsigned char>(r.bytes[r.pos])))
      ++r.pos;
    if (start == r.pos)
      throw IoError(path, static_cast<long long>(r.pos), "expected PGM header token");
    return r.bytes.substr(start, r.pos - start);
  };
  if (token() != "P5") throw IoError(path, 0, "bad magic, expected P5");
  std::size_t w, h, maxval;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(path, static_cast<long long>(r.pos), "bad PGM header number");
  }
  if (maxval != 255)
    throw IoError(path, static_cast<long long>(r.pos), "unsupported maxval (need 255)");
  r.pos += 1;  // single whitespace byte after maxval
  r.need(w * h, "pixel payload");
  vision::Frame f(h, w);
  for (std::size_t i = 0; i < w * h; ++i)
    f.px[i] = double(std::uint8_t(r.bytes[r.pos + i])) / 255.0;
  return f;
}

// ---- WAV (PCM16 mono) ----

inline void write_wav(const std::string& path, const dsp::Waveform& w) {
  std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  std::uint32_t rate = static_cast<std::uint32_t>(std::llround(w.sample_rate));
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  detail::put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, rate);
  detail::put_u32(out, rate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, 2 * n);
  for (double s : w.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    long q = std::clamp(std::lround(c * 32768.0), -32768L, 32767L);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  detail::write_file(path, out);
}

inline dsp::Waveform read_wav(const std::string& path) {
  detail::ByteReader r(path);
  if (r.str(4, "RIFF magic") != "RIFF") throw IoError(path, 0, "bad magic, expected RIFF");
  r.u32("riff size");
  if (r.str(4, "WAVE tag") != "WAVE") throw IoError(path, 8, "not a WAVE file");

  std::optional<std::uint32_t> rate;
  dsp::Waveform w;
  bool got_data = false;
  while (r.pos + 8 <= r.bytes.size()) {
    std::string id = r.str(4, "chunk id");
    std::uint32_t size = r.u32("chunk size");
    std::size_t body = r.pos;
    if (id == "fmt ") {
      std::uint16_t fmt = r.u16("audio format");
      std::uint16_t channels = r.u16("channel count");
      std::uint32_t sr = r.u32("sample rate");
      r.u32("byte rate");
      r.u16("block align");
      std::uint16_t bits = r.u16("bits per sample");
      if (fmt != 1 || bits != 16)
        throw IoError(path, static_cast<long long>(body),
                      "unsupported WAV encoding (need PCM16), format " + std::to_string(fmt) +
                          " with " + std::to_string(bits) + " bits");
      if (channels != 1)
        throw IoError(path, static_cast<long long>(body),
                      "unsupported WAV encoding (need mono), got " + std::to_string(channels) +
                          " channels");
      rate = sr;
    } else if (id == "data") {
      r.need(size, "sample payload");
      std::size_t n = size / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto q = static_cast<std::int16_t>(
            std::uint16_t(std::uint8_t(r.bytes[body + 2 * i])) |
            (std::uint16_t(std::uint8_t(r.bytes[body + 2 * i + 1])) << 8));
        w.samples[i] = double(q) / 32768.0;
      }
      got_data = true;
    }
    r.pos = body + size + (size & 1);  // chunks are word-aligned
  }
  if (!rate) throw IoError(path, static_cast<long long>(r.bytes.size()), "missing fmt chunk");
  if (!got_data) throw IoError(path, static_cast<long long>(r.bytes.size()), "missing data chunk");
  w.sample_rate = double(*rate);
  return w;
}

// ---- tensor file ("V2ST") ----

inline void write_tensor(const std::string& path, const Tensor<float>& t) {
  std::string out = "V2ST";
  detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.data) detail::put_f32(out, v);
  detail::write_file(path, out);
}

inline Tensor<float> read_tensor(const std::string& path) {
  detail::ByteReader r(path);
  if (r.str(4, "magic") != "V2ST") throw IoError(path, 0, "bad magic, expected V2ST");
  std::uint32_t rank = r.u32("rank");
  if (rank > 8) throw IoError(path, 4, "implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = r.u32("dimension");
  std::size_t n = shape_numel(shape);
  if (r.pos + 4 * n != r.bytes.size())
    throw IoError(path, static_cast<long long>(r.pos),
                  "declared size " + std::to_string(4 * n) + " does not match payload " +
                      std::to_string(r.bytes.size() - r.pos));
  Tensor<float> t(shape);
  for (auto& v : t.data) v = r.f32("value");
  return t;
}

// ---- utterance ----

struct Utterance {
  std::string id;
  double fps = 0;
  std::vector<vision::Frame> frames;
  std::vector<vision::Landmarks> landmarks;
  dsp::Waveform audio;
  std::vector<double> articulation;  // per-frame mouth opening, if recorded
};

// ---- synthetic corpus generation ----

struct SynthParams {
  std::size_t frames_min = 45;
  std::size_t frames_max = 75;
};

namespace detail {

struct FaceLayout {
  double eye_dx = 19.2, eye_dy = -24.0, eye_r = 4.5;
  double nose_dy = 4.0, nose_r = 3.0;
  double mouth_dy = 34.0;
  double head_rx = 46.0, head_ry = 60.0;
};

// smooth coverage of an axis-aligned ellipse, ~1.5 px soft edge
inline double ellipse_soft(double x, double y, double cx, double cy, double rx, double ry) {
  double dx = (x - cx) / rx, dy = (y - cy) / ry;
  double d = std::sqrt(dx * dx + dy * dy);
  double edge = 1.5 / std::min(rx, ry);  // in normalized units
  if (d <= 1.0 - edge) return 1.0;
  if (d >= 1.0 + edge) return 0.0;
  double t = (d - (1.0 - edge)) / (2.0 * edge);
  return 1.0 - t * t * (3.0 - 2.0 * t);  // smoothstep down
}

struct UttPlan {
  std::size_t frames;
  std::vector<double> opening;      // o_i in [0,1]
  std::vector<double> jx, jy;       // head translation per frame, <= 3 px
  double mouth_hw;                  // mouth half-width
  double f0;
  std::array<double, 64> phases;    // harmonic start phases
  double tex_p1, tex_p2;
};

inline UttPlan plan_utterance(Rng& rng, std::size_t frames_min, std::size_t frames_max,
                              double fps) {
  UttPlan p;
  p.frames = frames_min + static_cast<std::size_t>(rng.integer(frames_max - frames_min + 1));

  // articulation: sum of slow sinusoids, normalized, thresholded so the mouth
  // fully closes for at least 3 consecutive frames
  std::array<double, 3> amp, freq, ph;
  for (int j = 0; j < 3; ++j) {
    amp[j] = rng.uniform(0.5, 1.0);
    freq[j] = rng.uniform(0.6, 2.2);
    ph[j] = rng.uniform(0.0, 2.0 * M_PI);
  }
  std::vector<double> s(p.frames);
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < p.frames; ++i) {
    double t = double(i) / fps;
    double v = 0;
    for (int j = 0; j < 3; ++j) v += amp[j] * std::sin(2.0 * M_PI * freq[j] * t + ph[j]);
    s[i] = v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (auto& v : s) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;

  double theta = 0.35;
  auto has_closure_run = [&](double th) {
    std::size_t run = 0;
    for (double v : s) {
      run = v < th ? run + 1 : 0;
      if (run >= 3) return true;
    }
    return false;
  };
  while (theta < 0.85 && !has_closure_run(theta)) theta += 0.05;

  p.opening.resize(p.frames);
  for (std::size_t i = 0; i < p.frames; ++i)
    p.opening[i] = std::max(0.0, (s[i] - theta) / (1.0 - theta));

  // head translation: clamped random walk within +-3 px
  p.jx.resize(p.frames);
  p.jy.resize(p.frames);
  double x = rng.uniform(-1.5, 1.5), y = rng.uniform(-1.5, 1.5);
  for (std::size_t i = 0; i < p.frames; ++i) {
    p.jx[i] = x;
    p.jy[i] = y;
    x = std::clamp(x + 0.8 * rng.normal(), -3.0, 3.0);
    y = std::clamp(y + 0.8 * rng.normal(), -3.0, 3.0);
  }

  p.mouth_hw = rng.uniform(15.0, 19.0);
  p.f0 = rng.uniform(100.0, 150.0);
  for (auto& v : p.phases) v = rng.uniform(0.0, 2.0 * M_PI);
  p.tex_p1 = rng.uniform(0.0, 2.0 * M_PI);
  p.tex_p2 = rng.uniform(0.0, 2.0 * M_PI);
  return p;
}

inline vision::Frame render_face(const UttPlan& p, std::size_t i, std::size_t H, std::size_t W) {
  FaceLayout L;
  double cx = double(W) / 2.0 + p.jx[i];
  double cy = double(H) * 0.45 + p.jy[i];
  double open = p.opening[i];
  double mouth_hh = 2.0 + 13.0 * open;
  double mouth_cy = cy + L.mouth_dy;
  double jaw_cy = mouth_cy + mouth_hh + 11.0;

  vision::Frame f(H, W);
  for (std::size_t yy = 0; yy < H; ++yy) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      double x = double(xx), y = double(yy);
      double v = 0.12;  // background

      double head = ellipse_soft(x, y, cx, cy, L.head_rx, L.head_ry);
      if (head > 0) {
        double dx = (x - cx) / L.head_rx, dy = (y - cy) / L.head_ry;
        double shade = 1.0 - 0.22 * (dx * dx + dy * dy);
        double tex = 0.05 * std::sin(2.0 * M_PI * x / 17.0 + p.tex_p1) *
                     std::sin(2.0 * M_PI * y / 19.0 + p.tex_p2);
        double skin = 0.72 * shade + tex;
        v = v * (1.0 - head) + skin * head;

        double jaw = ellipse_soft(x, y, cx, jaw_cy, 24.0, 6.5);
        v = v * (1.0 - 0.35 * jaw * head) + 0.0;
      }

      double mouth = ellipse_soft(x, y, cx, mouth_cy, p.mouth_hw, mouth_hh);
      v = v * (1.0 - mouth) + 0.08 * mouth;

      for (double side : {-1.0, 1.0}) {
        double eye = ellipse_soft(x, y, cx + side * L.eye_dx, cy + L.eye_dy, L.eye_r, L.eye_r);
        v = v * (1.0 - eye) + 0.15 * eye;
      }
      double nose = ellipse_soft(x, y, cx, cy + L.nose_dy, L.nose_r, L.nose_r * 1.4);
      v = v * (1.0 - nose) + 0.35 * nose;

      f.at(yy, xx) = std::clamp(v, 0.0, 1.0);
    }
  }
  return f;
}

inline vision::Landmarks face_landmarks(const UttPlan& p, std::size_t i, std::size_t H,
                                        std::size_t W) {
  FaceLayout L;
  double cx = double(W) / 2.0 + p.jx[i];
  double cy = double(H) * 0.45 + p.jy[i];
  vision::Landmarks lm;
  lm.left_eye = {cx - L.eye_dx, cy + L.eye_dy};
  lm.right_eye = {cx + L.eye_dx, cy + L.eye_dy};
  lm.nose = {cx, cy + L.nose_dy};
  lm.mouth_left = {cx - p.mouth_hw, cy + L.mouth_dy};
  lm.mouth_right = {cx + p.mouth_hw, cy + L.mouth_dy};
  return lm;
}

// harmonic source whose amplitude tracks the opening exactly and whose
// first-formant weighting follows it
inline dsp::Waveform synth_audio(const UttPlan& p, double fps, double sample_rate) {
  std::size_t spf = static_cast<std::size_t>(std::llround(sample_rate / fps));
  std::size_t n = p.frames * spf;
  dsp::Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(n, 0.0);

  std::size_t nharm = 0;
  while (nharm < p.phases.size() && (nharm + 1) * p.f0 < 0.45 * sample_rate) ++nharm;

  std::vector<double> phase(nharm);
  for (std::size_t k = 0; k < nharm; ++k) phase[k] = p.phases[k];

  std::vector<double> wk(nharm);
  for (std::size_t s = 0; s < n; ++s) {
    double t = double(s) / sample_rate;
    // envelope is constant within each frame window so a closed mouth means
    // an exactly silent frame
    double open = p.opening[s / spf];

    double f_inst = p.f0 * (1.0 + 0.012 * std::sin(2.0 * M_PI * 4.7 * t));
    double formant = 300.0 + 1100.0 * open;
    double norm = 0;
    for (std::size_t k = 0; k < nharm; ++k) {
      double fk = (k + 1) * p.f0;
      double g = std::exp(-std::pow((fk - formant) / 350.0, 2.0)) + 0.1 / double(k + 1);
      wk[k] = g;
      norm += g * g;
    }
    norm = std::sqrt(norm);
    double acc = 0;
    for (std::size_t k = 0; k < nharm; ++k) {
      phase[k] += 2.0 * M_PI * (k + 1) * f_inst / sample_rate;
      acc += (wk[k] / norm) * std::sin(phase[k]);
    }
    w.samples[s] = open * acc;
  }

  double peak = 0;
  for (double v : w.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0)
    for (auto& v : w.samples) v *= 0.8 / peak;
  return w;
}

}  // namespace detail

inline std::string utterance_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt%05zu", index);
  return buf;
}

inline void gen_synthetic_corpus(std::size_t count, std::uint64_t seed, double fps,
                                 double sample_rate, const std::string& out_dir,
                                 const SynthParams& sp = {}) {
  if (count < 1) throw ConfigError("gen_synthetic_corpus: count must be >= 1");
  if (sp.frames_min < 4 || sp.frames_max < sp.frames_min)
    throw ConfigError("gen_synthetic_corpus: bad frame range");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw IoError(out_dir, "cannot create corpus directory");

  const std::size_t H = 160, W = 128;
  for (std::size_t u = 0; u < count; ++u) {
    Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (u + 1)));
    auto plan = detail::plan_utterance(rng, sp.frames_min, sp.frames_max, fps);

    fs::path dir = fs::path(out_dir) / utterance_dir_name(u);
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir.string(), "cannot create utterance directory");

    std::string lm_text, art_text;
    for (std::size_t i = 0; i < plan.frames; ++i) {
      auto frame = detail::render_face(plan, i, H, W);
      char name[32];
      std::snprintf(name, sizeof(name), "frame-%05zu.pgm", i);
      write_pgm((dir / name).string(), frame);

      auto lm = detail::face_landmarks(plan, i, H, W);
      char line[256];
      std::snprintf(line, sizeof(line), "%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n",
                    lm.left_eye.x, lm.left_eye.y, lm.right_eye.x, lm.right_eye.y, lm.nose.x,
                    lm.nose.y, lm.mouth_left.x, lm.mouth_left.y, lm.mouth_right.x,
                    lm.mouth_right.y);
      lm_text += line;
      std::snprintf(line, sizeof(line), "%.6f\n", plan.opening[i]);
      art_text += line;
    }
    detail::write_file((dir / "landmarks.txt").string(), lm_text);
    detail::write_file((dir / "articulation.txt").string(), art_text);

    auto audio = detail::synth_audio(plan, fps, sample_rate);
    write_wav((dir / "audio.wav").string(), audio);

    char meta[64];
    std::snprintf(meta, sizeof(meta), "fps=%g\nsample_rate=%d\n", fps,
                  int(std::llround(sample_rate)));
    detail::write_file((dir / "meta.txt").string(), meta);
  }
}

// ---- loading ----

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

inline Utterance load_utterance(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir, "utterance directory does not exist");
  Utterance u;
  u.id = fs::path(dir).filename().string();

  // meta
  fs::path meta = fs::path(dir) / "meta.txt";
  if (!fs::exists(meta)) throw IoError(meta.string(), "missing meta.txt");
  double sample_rate = 0;
  for (const auto& line : detail::read_lines(meta.string())) {
    if (line.rfind("fps=", 0) == 0) u.fps = std::stod(line.substr(4));
    if (line.rfind("sample_rate=", 0) == 0) sample_rate = std::stod(line.substr(12));
  }
  if (u.fps <= 0 || sample_rate <= 0)
    throw DataError(dir + ": meta.txt must define positive fps and sample_rate");

  // frames
  for (std::size_t i = 0;; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame-%05zu.pgm", i);
    fs::path p = fs::path(dir) / name;
    if (!fs::exists(p)) break;
    u.frames.push_back(read_pgm(p.string()));
  }
  if (u.frames.empty()) throw DataError(dir + ": no frame-%05d.pgm files found");

  // landmarks
  fs::path lmp = fs::path(dir) / "landmarks.txt";
  if (!fs::exists(lmp)) throw IoError(lmp.string(), "missing landmarks.txt");
  auto lines = detail::read_lines(lmp.string());
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() != u.frames.size())
    throw DataError(dir + ": " + std::to_string(u.frames.size()) + " frames but " +
                    std::to_string(lines.size()) + " landmark lines");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::istringstream ss(lines[i]);
    std::array<double, 10> v{};
    for (auto& x : v)
      if (!(ss >> x))
        throw DataError(dir + ": landmarks.txt line " + std::to_string(i + 1) +
                        " needs 10 reals");
    vision::Landmarks lm;
    lm.left_eye = {v[0], v[1]};
    lm.right_eye = {v[2], v[3]};
    lm.nose = {v[4], v[5]};
    lm.mouth_left = {v[6], v[7]};
    lm.mouth_right = {v[8], v[9]};
    const auto& f = u.frames[i];
    for (auto p : {lm.left_eye, lm.right_eye, lm.nose, lm.mouth_left, lm.mouth_right})
      if (p.x < 0 || p.y < 0 || p.x >= double(f.w) || p.y >= double(f.h))
        throw DataError(dir + ": landmark out of bounds on line " + std::to_string(i + 1));
    if (!(lm.left_eye.x < lm.right_eye.x))
      throw DataError(dir + ": eyes not horizontally ordered on line " + std::to_string(i + 1));
    u.landmarks.push_back(lm);
  }

  // audio
  u.audio = read_wav((fs::path(dir) / "audio.wav").string());
  if (std::abs(u.audio.sample_rate - sample_rate) > 0.5)
    throw DataError(dir + ": meta sample_rate " + std::to_string(int(sample_rate)) +
                    " disagrees with WAV header " + std::to_string(int(u.audio.sample_rate)));
  double dur = double(u.audio.samples.size()) / u.audio.sample_rate;
  double vid = double(u.frames.size()) / u.fps;
  if (std::abs(dur - vid) > 1.0 / u.fps + 1e-9)
    throw DataError(dir + ": audio duration " + std::to_string(dur) +
                    "s is more than one frame away from video duration " + std::to_string(vid) +
                    "s");

  // optional articulation trace
  fs::path art = fs::path(dir) / "articulation.txt";
  if (fs::exists(art)) {
    for (const auto& line : detail::read_lines(art.string()))
      if (!line.empty()) u.articulation.push_back(std::stod(line));
  }
  return u;
}

inline std::vector<std::string> list_corpus(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir, "corpus directory does not exist");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind("utt", 0) == 0)
      out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError(dir + ": no utt* directories found");
  return out;
}

// ---- training samples ----

struct SampleSpec {
  std::size_t clip_frames = 9;   // K, frames per clip
  std::size_t window_clips = 8;  // T, clips per training window
  std::size_t height = 160;
  std::size_t width = 128;
  dsp::FeatParams feat;
  double flow_alpha = 15.0;
  std::size_t flow_iters = 40;
};

// Registration, optical flow and spectrogram features computed once per
// utterance; windows are assembled from these on demand.
struct PreparedUtterance {
  std::string id;
  double fps = 0;
  std::size_t frames = 0;  // F
  std::size_t l = 0;       // spectrogram frames per video frame
  std::vector<vision::Frame> registered;
  std::vector<vision::FlowField> pair_flows;  // F-1 fields, frame i -> i+1
  dsp::Features feat;                         // F*l spectrogram frames each
};

inline PreparedUtterance prepare_utterance(const Utterance& u, const SampleSpec& sp) {
  PreparedUtterance p;
  p.id = u.id;
  p.fps = u.fps;
  p.frames = u.frames.size();

  auto spf = static_cast<std::size_t>(std::llround(u.audio.sample_rate / u.fps));
  if (spf == 0 || spf % sp.feat.hop != 0)
    throw ConfigError("prepare_utterance: hop " + std::to_string(sp.feat.hop) +
                      " must divide the " + std::to_string(spf) + " samples per video frame");
  p.l = spf / sp.feat.hop;

  // pad or trim so the spectrogram has exactly F*l frames
  dsp::Waveform audio = u.audio;
  audio.samples.resize(p.frames * spf + sp.feat.window - sp.feat.hop, 0.0);
  p.feat = dsp::featurize(audio, sp.feat);
  if (p.feat.lin.num_frames != p.frames * p.l)
    throw NumericError("prepare_utterance: expected " + std::to_string(p.frames * p.l) +
                       " spectrogram frames, got " + std::to_string(p.feat.lin.num_frames));

  p.registered.reserve(p.frames);
  for (std::size_t i = 0; i < p.frames; ++i)
    p.registered.push_back(
        vision::register_frame(u.frames[i], u.landmarks[i], sp.height, sp.width));
  p.pair_flows.reserve(p.frames > 0 ? p.frames - 1 : 0);
  for (std::size_t i = 0; i + 1 < p.frames; ++i)
    p.pair_flows.push_back(
        vision::optical_flow(p.registered[i], p.registered[i + 1], sp.flow_alpha, sp.flow_iters));
  return p;
}

namespace detail {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  return static_cast<std::size_t>(
      std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
}

}  // namespace detail

// K registered frames around `center` (edges replicated), volume mean
// subtracted, as a [K, H, W] encoder input.
inline Tensor<float> clip_tensor(const PreparedUtterance& p, std::size_t center,
                                 const SampleSpec& sp) {
  std::size_t k = sp.clip_frames, h = sp.height, w = sp.width;
  if (center >= p.frames)
    throw DataError("clip_tensor: center " + std::to_string(center) + " out of " +
                    std::to_string(p.frames) + " frames");
  std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(center) - std::ptrdiff_t((k - 1) / 2);
  Tensor<float> t({k, h, w});
  double mean = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const auto& f = p.registered[detail::clamp_index(lo + std::ptrdiff_t(j), p.frames)];
    for (std::size_t i = 0; i < h * w; ++i) t.data[j * h * w + i] = float(f.px[i]);
    for (double v : f.px) mean += v;
  }
  mean /= double(k * h * w);
  for (auto& v : t.data) v -= float(mean);
  return t;
}

// Flow between the K consecutive clip frames as [(K-1)*2, H, W]; channel 2j is
// the u plane and 2j+1 the v plane of pair j. Replicated edge frames yield
// zero flow.
inline Tensor<float> flow_tensor(const PreparedUtterance& p, std::size_t center,
                                 const SampleSpec& sp) {
  std::size_t k = sp.clip_frames, h = sp.height, w = sp.width;
  if (k < 2) throw ConfigError("flow_tensor: need at least 2 frames per clip");
  if (center >= p.frames)
    throw DataError("flow_tensor: center " + std::to_string(center) + " out of " +
                    std::to_string(p.frames) + " frames");
  std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(center) - std::ptrdiff_t((k - 1) / 2);
  Tensor<float> t({(k - 1) * 2, h, w});
  for (std::size_t j = 0; j + 1 < k; ++j) {
    std::size_t a = detail::clamp_index(lo + std::ptrdiff_t(j), p.frames);
    std::size_t b = detail::clamp_index(lo + std::ptrdiff_t(j) + 1, p.frames);
    float* up = t.data.data() + (2 * j) * h * w;
    float* vp = t.data.data() + (2 * j + 1) * h * w;
    if (a == b) continue;  // replicated edge, zero flow
    const auto& fl = p.pair_flows[a];
    for (std::size_t i = 0; i < h * w; ++i) {
      up[i] = float(fl.u[i]);
      vp[i] = float(fl.v[i]);
    }
  }
  return t;
}

// Mel target for one video frame: [n_mels, l], column j from spectrogram
// frame `frame`*l + j.
inline Tensor<float> mel_block(const PreparedUtterance& p, std::size_t frame) {
  std::size_t n = p.feat.mel.bins, l = p.l;
  Tensor<float> t({n, l});
  for (std::size_t j = 0; j < l; ++j)
    for (std::size_t m = 0; m < n; ++m)
      t.data[m * l + j] = float(p.feat.mel.at(frame * l + j, m));
  return t;
}

struct TrainingSample {
  std::size_t start = 0;   // first clip-center frame of the window
  Tensor<float> pix;       // [T, K, H, W]
  Tensor<float> flow;      // [T, (K-1)*2, H, W]
  Tensor<float> mel;       // [T, n_mels, l]
  Tensor<float> lin;       // [T*l, bins]
};

inline std::vector<TrainingSample> make_samples(const Utterance& u, const SampleSpec& sp) {
  std::size_t f = u.frames.size(), t = sp.window_clips;
  if (f < t) {
    std::fprintf(stderr, "warning: utterance %s has %zu frames, shorter than one %zu-clip window; skipping\n",
                 u.id.c_str(), f, t);
    return {};
  }
  auto prep = prepare_utterance(u, sp);
  std::size_t k = sp.clip_frames, h = sp.height, w = sp.width;
  std::size_t n = prep.feat.mel.bins, l = prep.l, bins = prep.feat.lin.bins;

  std::vector<TrainingSample> out;
  out.reserve(f - t + 1);
  for (std::size_t s = 0; s + t <= f; ++s) {
    TrainingSample ts;
    ts.start = s;
    ts.pix = Tensor<float>({t, k, h, w});
    ts.flow = Tensor<float>({t, (k - 1) * 2, h, w});
    ts.mel = Tensor<float>({t, n, l});
    ts.lin = Tensor<float>({t * l, bins});
    for (std::size_t c = 0; c < t; ++c) {
      auto pix = clip_tensor(prep, s + c, sp);
      auto flo = flow_tensor(prep, s + c, sp);
      auto mb = mel_block(prep, s + c);
      std::copy(pix.data.begin(), pix.data.end(), ts.pix.data.begin() + c * pix.size());
      std::copy(flo.data.begin(), flo.data.end(), ts.flow.data.begin() + c * flo.size());
      std::copy(mb.data.begin(), mb.data.end(), ts.mel.data.begin() + c * mb.size());
    }
    for (std::size_t r = 0; r < t * l; ++r)
      for (std::size_t b = 0; b < bins; ++b)
        ts.lin.data[r * bins + b] = float(prep.feat.lin.at(s * l + r, b));
    out.push_back(std::move(ts));
  }
  return out;
}

}  // namespace v2s::data
