#pragma once

// Central finite-difference gradient checking at 64-bit precision.

#include <functional>
#include <vector>

#include "v2s/autodiff.hpp"

namespace v2s {

// Rebuilds the scalar loss from the given leaves, compares analytic gradients
// against central differences, returns the max relative error over all leaf
// elements. The builder must be deterministic (seed any rng it uses per call).
inline double gradcheck(std::vector<NodePtr<double>> leaves,
                        const std::function<NodePtr<double>()>& build, double eps = 1e-5) {
  for (auto& l : leaves) {
    l->ensure_grad();
    l->zero_grad();
  }
  auto loss = build();
  backward(loss);

  double worst = 0.0;
  for (auto& l : leaves) {
    for (std::size_t i = 0; i < l->value.size(); ++i) {
      double keep = l->value.data[i];
      l->value.data[i] = keep + eps;
      double fp = build()->value.data[0];
      l->value.data[i] = keep - eps;
      double fm = build()->value.data[0];
      l->value.data[i] = keep;
      double fd = (fp - fm) / (2.0 * eps);
      double an = l->grad.data[i];
      double rel = std::abs(an - fd) / std::max(1e-6, std::abs(an) + std::abs(fd));
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace v2s
