#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "v2s/error.hpp"

namespace v2s {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0))
      : shape(std::move(s)), data(shape_numel(shape), fill) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
  static Tensor scalar(T v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
  }
  static Tensor from(Shape s, std::vector<T> d) {
    if (shape_numel(s) != d.size())
      throw ShapeError("tensor init: " + shape_str(s) + " needs " +
                       std::to_string(shape_numel(s)) + " values, got " +
                       std::to_string(d.size()));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape.size())
      throw ShapeError("dim " + std::to_string(i) + " out of rank " +
                       std::to_string(shape.size()));
    return shape[i];
  }

  T& at(std::size_t i, std::size_t j) {
    return data[i * shape[1] + j];
  }
  T at(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }
  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  T at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* where) {
  if (a != b)
    throw ShapeError(std::string(where) + ": " + shape_str(a) + " vs " + shape_str(b));
}

// Deterministic RNG used for init, dropout, shuffles and the synthetic corpus.
// Normal draws use Box-Muller directly (no cached spare, no libstdc++
// distribution objects) so streams are reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {
    return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
  }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::uint64_t integer(std::uint64_t n) {  // [0, n)
    if (n == 0) return 0;
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(integer(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace v2s
