#include "ibcircuit/optim.hpp"

#include <algorithm>
#include <cmath>

#include "ibcircuit/errors.hpp"

namespace ibc {

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeError("Adam: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

double warmup_lr(double lr, std::size_t step, std::size_t warmup) {
  if (warmup == 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t state = 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t k : keys) {
    state ^= k + 0x9E3779B97F4A7C15ULL + (state << 6) + (state >> 2);
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    state = z ^ (z >> 31);
  }
  return state;
}

}  // namespace ibc
