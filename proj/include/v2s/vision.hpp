#pragma once

// Face-clip preparation: similarity registration, bilinear warping and
// Horn-Schunck dense optical flow.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "v2s/error.hpp"
#include "v2s/tensor.hpp"

namespace v2s::vision {

struct Frame {
  std::size_t h = 0, w = 0;
  std::vector<double> px;  // row-major, grayscale

  Frame() = default;
  Frame(std::size_t h_, std::size_t w_, double fill = 0.0) : h(h_), w(w_), px(h_ * w_, fill) {}
  double& at(std::size_t y, std::size_t x) { return px[y * w + x]; }
  double at(std::size_t y, std::size_t x) const { return px[y * w + x]; }
};

struct Pt {
  double x = 0, y = 0;
};

struct Landmarks {
  Pt left_eye, right_eye, nose, mouth_left, mouth_right;
};

// z' = s*z + t over complex coordinates, i.e. rotation + uniform scale +
// translation: x' = a*x - b*y + tx, y' = b*x + a*y + ty
struct Similarity {
  double a = 1, b = 0, tx = 0, ty = 0;

  Pt apply(Pt p) const { return {a * p.x - b * p.y + tx, b * p.x + a * p.y + ty}; }

  Similarity inverse() const {
    double n = a * a + b * b;
    if (n < 1e-300) throw GeometryError("similarity not invertible (zero scale)");
    double ia = a / n, ib = -b / n;
    return {ia, ib, -(ia * tx - ib * ty), -(ib * tx + ia * ty)};
  }

  double rotation() const { return std::atan2(b, a); }
  double scale() const { return std::sqrt(a * a + b * b); }
};

inline Similarity estimate_similarity(Pt s1, Pt s2, Pt r1, Pt r2) {
  double dx = s2.x - s1.x, dy = s2.y - s1.y;
  double rx = r2.x - r1.x, ry = r2.y - r1.y;
  if (dx * dx + dy * dy < 1e-24)
    throw GeometryError("estimate_similarity: coincident source points");
  if (rx * rx + ry * ry < 1e-24)
    throw GeometryError("estimate_similarity: coincident reference points");
  // s = (r2-r1)/(s2-s1) in complex arithmetic
  double den = dx * dx + dy * dy;
  double a = (rx * dx + ry * dy) / den;
  double b = (ry * dx - rx * dy) / den;
  return {a, b, r1.x - (a * s1.x - b * s1.y), r1.y - (b * s1.x + a * s1.y)};
}

// Inverse-mapped bilinear sampling; samples outside the source are zero.
inline Frame warp_frame(const Frame& f, const Similarity& t, std::size_t out_h,
                        std::size_t out_w) {
  Frame out(out_h, out_w, 0.0);
  Similarity inv = t.inverse();
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      Pt p = inv.apply({double(x), double(y)});
      double fx = std::floor(p.x), fy = std::floor(p.y);
      std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx);
      std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy);
      double ax = p.x - fx, ay = p.y - fy;
      double acc = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          std::ptrdiff_t sx = x0 + dx, sy = y0 + dy;
          if (sx < 0 || sy < 0 || sx >= static_cast<std::ptrdiff_t>(f.w) ||
              sy >= static_cast<std::ptrdiff_t>(f.h))
            continue;
          double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
          acc += wgt * f.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
      out.at(y, x) = acc;
    }
  return out;
}

inline std::pair<Pt, Pt> canonical_eyes(std::size_t h, std::size_t w) {
  return {{0.35 * double(w), 0.3 * double(h)}, {0.65 * double(w), 0.3 * double(h)}};
}

// Registers one frame into the canonical H x W crop by mapping its eye points
// onto the canonical eye positions. Equivalent to registering to the clip's
// central frame and then placing that frame canonically, since two-point
// similarities compose into the same unique transform.
inline Frame register_frame(const Frame& f, const Landmarks& lm, std::size_t h, std::size_t w) {
  auto [le, re] = canonical_eyes(h, w);
  Similarity t = estimate_similarity(lm.left_eye, lm.right_eye, le, re);
  return warp_frame(f, t, h, w);
}

struct VideoClip {
  std::size_t k = 0, h = 0, w = 0;
  std::size_t center_index = 0;
  bool mean_subtracted = false;
  std::vector<Frame> frames;
};

inline VideoClip build_clip(const std::vector<Frame>& frames,
                            const std::vector<Landmarks>& landmarks, std::size_t center,
                            std::size_t k, std::size_t h, std::size_t w) {
  if (frames.empty()) throw DataError("build_clip: no frames");
  if (k == 0) throw ConfigError("build_clip: K must be positive");
  if (center >= frames.size())
    throw DataError("build_clip: center index " + std::to_string(center) + " out of " +
                    std::to_string(frames.size()) + " frames");
  std::ptrdiff_t half = static_cast<std::ptrdiff_t>((k - 1) / 2);
  std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(center) - half;

  VideoClip clip;
  clip.k = k;
  clip.h = h;
  clip.w = w;
  clip.center_index = center;
  clip.frames.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    std::ptrdiff_t idx = lo + static_cast<std::ptrdiff_t>(j);
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(frames.size()) - 1);
    std::size_t i = static_cast<std::size_t>(idx);
    if (i >= landmarks.size())
      throw DataError("build_clip: missing landmarks for frame " + std::to_string(i));
    clip.frames.push_back(register_frame(frames[i], landmarks[i], h, w));
  }

  double mean = 0;
  for (const auto& f : clip.frames)
    for (double v : f.px) mean += v;
  mean /= double(k * h * w);
  for (auto& f : clip.frames)
    for (auto& v : f.px) v -= mean;
  clip.mean_subtracted = true;
  return clip;
}

// ---- Horn-Schunck optical flow ----

struct FlowField {
  std::size_t h = 0, w = 0;
  std::vector<double> u, v;  // pixels/frame

  FlowField() = default;
  FlowField(std::size_t h_, std::size_t w_) : h(h_), w(w_), u(h_ * w_, 0.0), v(h_ * w_, 0.0) {}
};

struct FlowReport {
  std::vector<double> energy;  // after each sweep
};

namespace detail {

struct FlowDerivs {
  std::vector<double> ix, iy, it;
};

// Derivatives use the classical 8-bit luminance convention (values scaled by
// 255) so that the alpha=15 smoothness default keeps its textbook meaning on
// [0,1] frames.
constexpr double kFlowLuma = 255.0;

inline FlowDerivs flow_derivatives(const Frame& a, const Frame& b) {
  std::size_t h = a.h, w = a.w;
  FlowDerivs d;
  d.ix.resize(h * w);
  d.iy.resize(h * w);
  d.it.resize(h * w);
  auto gx = [&](const Frame& f, std::size_t y, std::size_t x) {
    std::size_t xl = x > 0 ? x - 1 : 0, xr = x + 1 < w ? x + 1 : w - 1;
    return (f.at(y, xr) - f.at(y, xl)) / double(xr - xl == 0 ? 1 : xr - xl);
  };
  auto gy = [&](const Frame& f, std::size_t y, std::size_t x) {
    std::size_t yl = y > 0 ? y - 1 : 0, yr = y + 1 < h ? y + 1 : h - 1;
    return (f.at(yr, x) - f.at(yl, x)) / double(yr - yl == 0 ? 1 : yr - yl);
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t i = y * w + x;
      d.ix[i] = kFlowLuma * 0.5 * (gx(a, y, x) + gx(b, y, x));
      d.iy[i] = kFlowLuma * 0.5 * (gy(a, y, x) + gy(b, y, x));
      d.it[i] = kFlowLuma * (b.at(y, x) - a.at(y, x));
    }
  return d;
}

}  // namespace detail

// E = sum (Ix u + Iy v + It)^2 + alpha * sum over grid edges of
//     ((du)^2 + (dv)^2), forward differences.
inline double hs_energy(const Frame& a, const Frame& b, const FlowField& f, double alpha) {
  auto d = detail::flow_derivatives(a, b);
  std::size_t h = a.h, w = a.w;
  double e = 0;
  for (std::size_t i = 0; i < h * w; ++i) {
    double r = d.ix[i] * f.u[i] + d.iy[i] * f.v[i] + d.it[i];
    e += r * r;
  }
  double s = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t i = y * w + x;
      if (x + 1 < w) {
        double du = f.u[i + 1] - f.u[i], dv = f.v[i + 1] - f.v[i];
        s += du * du + dv * dv;
      }
      if (y + 1 < h) {
        double du = f.u[i + w] - f.u[i], dv = f.v[i + w] - f.v[i];
        s += du * du + dv * dv;
      }
    }
  return e + alpha * s;
}

// Gauss-Seidel sweeps where each pixel update is the exact minimizer of the
// local quadratic, so the energy is non-increasing by construction.
inline FlowField optical_flow(const Frame& a, const Frame& b, double alpha = 15.0,
                              std::size_t iterations = 100, FlowReport* report = nullptr) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError("optical_flow: frame sizes differ (" + std::to_string(a.h) + "x" +
                     std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                     std::to_string(b.w) + ")");
  std::size_t h = a.h, w = a.w;
  FlowField f(h, w);
  if (h == 0 || w == 0) return f;
  auto d = detail::flow_derivatives(a, b);

  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t i = y * w + x;
        double su = 0, sv = 0;
        int n = 0;
        if (x > 0) {
          su += f.u[i - 1];
          sv += f.v[i - 1];
          ++n;
        }
        if (x + 1 < w) {
          su += f.u[i + 1];
          sv += f.v[i + 1];
          ++n;
        }
        if (y > 0) {
          su += f.u[i - w];
          sv += f.v[i - w];
          ++n;
        }
        if (y + 1 < h) {
          su += f.u[i + w];
          sv += f.v[i + w];
          ++n;
        }
        double ix = d.ix[i], iy = d.iy[i], itv = d.it[i];
        double an = alpha * double(n);
        if (an == 0.0) continue;  // 1x1 image: keep zero flow
        double a11 = ix * ix + an, a22 = iy * iy + an, a12 = ix * iy;
        double b1 = alpha * su - ix * itv;
        double b2 = alpha * sv - iy * itv;
        double det = a11 * a22 - a12 * a12;
        f.u[i] = (b1 * a22 - a12 * b2) / det;
        f.v[i] = (a11 * b2 - a12 * b1) / det;
      }
    }
    if (report) report->energy.push_back(hs_energy(a, b, f, alpha));
  }
  return f;
}

struct FlowClip {
  std::size_t count = 0, h = 0, w = 0;
  std::vector<FlowField> fields;
};

inline FlowClip build_flow_clip(const VideoClip& clip, double alpha = 15.0,
                                std::size_t iterations = 100) {
  if (clip.k < 2) throw ConfigError("build_flow_clip: need at least 2 frames, got " +
                                    std::to_string(clip.k));
  FlowClip fc;
  fc.count = clip.k - 1;
  fc.h = clip.h;
  fc.w = clip.w;
  fc.fields.reserve(fc.count);
  for (std::size_t i = 0; i + 1 < clip.k; ++i)
    fc.fields.push_back(optical_flow(clip.frames[i], clip.frames[i + 1], alpha, iterations));
  return fc;
}

}  // namespace v2s::vision
