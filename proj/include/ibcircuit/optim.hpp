#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace ibc {

class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::span<double> params, std::span<const double> grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Linear ramp from lr/warmup to lr over the first `warmup` steps (0-based step index).
double warmup_lr(double lr, std::size_t step, std::size_t warmup);

// splitmix64 over a sequence of keys; used to derive independent RNG streams.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys);

}  // namespace ibc
