#pragma once

// Plain-text key=value run configuration covering the model, training, data,
// and synthesis settings. Unknown and duplicate keys are rejected; every key
// has a default, so an empty file is a valid configuration.

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "v2s/data.hpp"
#include "v2s/model.hpp"
#include "v2s/training.hpp"

namespace v2s::config {

struct RunConfig {
  // model
  std::string model_preset = "miniature";  // paper | miniature | tiny
  bool use_pixels = true, use_flow = true, use_postnet = true;
  std::vector<std::size_t> widths;   // empty: preset schedule
  std::vector<std::size_t> stride2;  // empty: preset schedule
  std::size_t embedding = 0;         // 0: twice the final width
  std::size_t decoder_width = 0;     // 0: preset width
  // training
  training::TrainConfig train;
  double val_fraction = 0.2;
  // data
  double fps = 25.0, sample_rate = 16000.0;
  std::size_t clip_frames = 9, window_clips = 8;
  std::size_t height = 160, width = 128;
  std::size_t window = 640, hop = 160, fft = 1024, n_mels = 80;
  double f_min = 20.0, f_max = 7800.0;
  double flow_alpha = 15.0;
  std::size_t flow_iters = 40;
  // synthesis
  std::string synth = "lin";  // lin | mel-exemplar
  std::size_t gl_iters = 60;
  double sigma = 0;  // 0: T*l/4

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for '" + key + "': " + v);
  }
  if (used != v.size()) throw ConfigError("config: bad number for '" + key + "': " + v);
  return d;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  }
  if (used != v.size() || v[0] == '-')
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  return std::size_t(n);
}

inline std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    std::size_t comma = v.find(',', pos);
    std::string item = trim(v.substr(pos, comma == std::string::npos ? comma : comma - pos));
    if (item.empty()) throw ConfigError("config: bad list for '" + key + "': " + v);
    out.push_back(to_size(key, item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

inline void set_key(RunConfig& rc, const std::string& key, const std::string& v) {
  auto& t = rc.train;
  if (key == "model_preset") rc.model_preset = v;
  else if (key == "use_pixels") rc.use_pixels = to_bool(key, v);
  else if (key == "use_flow") rc.use_flow = to_bool(key, v);
  else if (key == "use_postnet") rc.use_postnet = to_bool(key, v);
  else if (key == "widths") rc.widths = to_list(key, v);
  else if (key == "stride2") rc.stride2 = to_list(key, v);
  else if (key == "embedding") rc.embedding = to_size(key, v);
  else if (key == "decoder_width") rc.decoder_width = to_size(key, v);
  else if (key == "lr") t.lr = to_double(key, v);
  else if (key == "batch_size") t.batch_size = to_size(key, v);
  else if (key == "conv_dropout") t.conv_dropout = to_double(key, v);
  else if (key == "dense_dropout") t.dense_dropout = to_double(key, v);
  else if (key == "plateau_factor") t.plateau_factor = to_double(key, v);
  else if (key == "plateau_patience") t.plateau_patience = to_size(key, v);
  else if (key == "min_delta") t.min_delta = to_double(key, v);
  else if (key == "early_stop") t.early_stop = to_size(key, v);
  else if (key == "max_epochs") t.max_epochs = to_size(key, v);
  else if (key == "w_mel") t.w_mel = to_double(key, v);
  else if (key == "w_lin") t.w_lin = to_double(key, v);
  else if (key == "seed") t.seed = to_size(key, v);
  else if (key == "val_fraction") rc.val_fraction = to_double(key, v);
  else if (key == "fps") rc.fps = to_double(key, v);
  else if (key == "sample_rate") rc.sample_rate = to_double(key, v);
  else if (key == "clip_frames") rc.clip_frames = to_size(key, v);
  else if (key == "window_clips") rc.window_clips = to_size(key, v);
  else if (key == "height") rc.height = to_size(key, v);
  else if (key == "width") rc.width = to_size(key, v);
  else if (key == "window") rc.window = to_size(key, v);
  else if (key == "hop") rc.hop = to_size(key, v);
  else if (key == "fft") rc.fft = to_size(key, v);
  else if (key == "n_mels") rc.n_mels = to_size(key, v);
  else if (key == "f_min") rc.f_min = to_double(key, v);
  else if (key == "f_max") rc.f_max = to_double(key, v);
  else if (key == "flow_alpha") rc.flow_alpha = to_double(key, v);
  else if (key == "flow_iters") rc.flow_iters = to_size(key, v);
  else if (key == "synth") rc.synth = v;
  else if (key == "gl_iters") rc.gl_iters = to_size(key, v);
  else if (key == "sigma") rc.sigma = to_double(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace detail

inline void validate(const RunConfig& rc) {
  if (rc.model_preset != "paper" && rc.model_preset != "miniature" && rc.model_preset != "tiny")
    throw ConfigError("config: model_preset must be paper, miniature, or tiny, got '" +
                      rc.model_preset + "'");
  if (rc.synth != "lin" && rc.synth != "mel-exemplar")
    throw ConfigError("config: synth must be lin or mel-exemplar, got '" + rc.synth + "'");
  if (rc.val_fraction <= 0.0 || rc.val_fraction >= 1.0)
    throw ConfigError("config: val_fraction must be in (0, 1)");
  if (rc.fps <= 0 || rc.sample_rate <= 0)
    throw ConfigError("config: fps and sample_rate must be positive");
  if (rc.gl_iters < 1) throw ConfigError("config: gl_iters must be >= 1");
}

inline RunConfig parse(const std::string& text) {
  RunConfig rc;
  std::set<std::string> seen;
  std::size_t pos = 0, line_no = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? nl : nl - pos);
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (!line.empty()) {
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value: " +
                          line);
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config: line " + std::to_string(line_no) + " has an empty key");
      if (!seen.insert(key).second)
        throw ConfigError("config: duplicate key '" + key + "'");
      detail::set_key(rc, key, value);
    }
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  validate(rc);
  return rc;
}

inline RunConfig load(const std::string& path) {
  io::ByteReader r(path);
  return parse(r.bytes);
}

inline std::string serialize(const RunConfig& rc) {
  using detail::fmt_double;
  using detail::fmt_list;
  std::string o = "# video-to-speech run configuration\n";
  o += "\n# model (preset: paper | miniature | tiny; empty lists keep the preset schedule)\n";
  o += "model_preset = " + rc.model_preset + "\n";
  o += "use_pixels = " + std::string(rc.use_pixels ? "true" : "false") + "\n";
  o += "use_flow = " + std::string(rc.use_flow ? "true" : "false") + "\n";
  o += "use_postnet = " + std::string(rc.use_postnet ? "true" : "false") + "\n";
  o += "widths = " + fmt_list(rc.widths) + "\n";
  o += "stride2 = " + fmt_list(rc.stride2) + "\n";
  o += "embedding = " + std::to_string(rc.embedding) + "\n";
  o += "decoder_width = " + std::to_string(rc.decoder_width) + "\n";
  o += "\n# training\n";
  o += "lr = " + fmt_double(rc.train.lr) + "\n";
  o += "batch_size = " + std::to_string(rc.train.batch_size) + "\n";
  o += "conv_dropout = " + fmt_double(rc.train.conv_dropout) + "\n";
  o += "dense_dropout = " + fmt_double(rc.train.dense_dropout) + "\n";
  o += "plateau_factor = " + fmt_double(rc.train.plateau_factor) + "\n";
  o += "plateau_patience = " + std::to_string(rc.train.plateau_patience) + "\n";
  o += "min_delta = " + fmt_double(rc.train.min_delta) + "\n";
  o += "early_stop = " + std::to_string(rc.train.early_stop) + "\n";
  o += "max_epochs = " + std::to_string(rc.train.max_epochs) + "\n";
  o += "w_mel = " + fmt_double(rc.train.w_mel) + "\n";
  o += "w_lin = " + fmt_double(rc.train.w_lin) + "\n";
  o += "seed = " + std::to_string(rc.train.seed) + "\n";
  o += "val_fraction = " + fmt_double(rc.val_fraction) + "\n";
  o += "\n# data\n";
  o += "fps = " + fmt_double(rc.fps) + "\n";
  o += "sample_rate = " + fmt_double(rc.sample_rate) + "\n";
  o += "clip_frames = " + std::to_string(rc.clip_frames) + "\n";
  o += "window_clips = " + std::to_string(rc.window_clips) + "\n";
  o += "height = " + std::to_string(rc.height) + "\n";
  o += "width = " + std::to_string(rc.width) + "\n";
  o += "window = " + std::to_string(rc.window) + "\n";
  o += "hop = " + std::to_string(rc.hop) + "\n";
  o += "fft = " + std::to_string(rc.fft) + "\n";
  o += "n_mels = " + std::to_string(rc.n_mels) + "\n";
  o += "f_min = " + fmt_double(rc.f_min) + "\n";
  o += "f_max = " + fmt_double(rc.f_max) + "\n";
  o += "flow_alpha = " + fmt_double(rc.flow_alpha) + "\n";
  o += "flow_iters = " + std::to_string(rc.flow_iters) + "\n";
  o += "\n# synthesis (synth: lin | mel-exemplar; sigma 0 selects T*l/4)\n";
  o += "synth = " + rc.synth + "\n";
  o += "gl_iters = " + std::to_string(rc.gl_iters) + "\n";
  o += "sigma = " + fmt_double(rc.sigma) + "\n";
  return o;
}

// Spectrogram frames per video frame; the hop must divide the samples per
// video frame exactly.
inline std::size_t frames_per_video_frame(const RunConfig& rc) {
  auto spf = std::size_t(std::llround(rc.sample_rate / rc.fps));
  if (rc.hop == 0 || spf % rc.hop != 0)
    throw ConfigError("config: hop " + std::to_string(rc.hop) +
                      " must divide the samples per video frame " + std::to_string(spf));
  return spf / rc.hop;
}

inline data::SampleSpec sample_spec(const RunConfig& rc) {
  data::SampleSpec sp;
  sp.clip_frames = rc.clip_frames;
  sp.window_clips = rc.window_clips;
  sp.height = rc.height;
  sp.width = rc.width;
  sp.feat.window = rc.window;
  sp.feat.hop = rc.hop;
  sp.feat.fft = rc.fft;
  sp.feat.n_mels = rc.n_mels;
  sp.feat.f_min = rc.f_min;
  sp.feat.f_max = rc.f_max;
  sp.flow_alpha = rc.flow_alpha;
  sp.flow_iters = rc.flow_iters;
  return sp;
}

// Model settings resolved against the preset and the data geometry.
inline model::ModelConfig model_config(const RunConfig& rc) {
  validate(rc);
  model::ModelConfig cfg;
  if (rc.model_preset == "paper") cfg = model::ModelConfig{};
  else if (rc.model_preset == "miniature") cfg = model::miniature_config();
  else cfg = model::tiny_config();
  cfg.use_pixels = rc.use_pixels;
  cfg.use_flow = rc.use_flow;
  cfg.use_postnet = rc.use_postnet;
  if (!rc.widths.empty()) {
    cfg.widths = rc.widths;
    cfg.embedding = 2 * rc.widths.back();
  }
  if (!rc.stride2.empty()) cfg.stride2 = rc.stride2;
  if (rc.embedding != 0) cfg.embedding = rc.embedding;
  if (rc.decoder_width != 0) cfg.decoder_width = rc.decoder_width;
  cfg.k = rc.clip_frames;
  cfg.h = rc.height;
  cfg.w = rc.width;
  cfg.n_mels = rc.n_mels;
  cfg.l = frames_per_video_frame(rc);
  cfg.t = rc.window_clips;
  cfg.d_lin = rc.fft / 2 + 1;
  model::validate(cfg);
  return cfg;
}

}  // namespace v2s::config
