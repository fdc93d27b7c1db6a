#include "ibcircuit/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ibcircuit/errors.hpp"
#include "ibcircuit/ib.hpp"
#include "ibcircuit/model.hpp"

namespace ibc {

namespace {

void check_token(std::span<const double> row, int token) {
  if (token < 0 || static_cast<std::size_t>(token) >= row.size()) throw LookupError("metric token outside the logits");
}

}  // namespace

double logit_difference(std::span<const double> answer_logits, const MetricSpec& spec) {
  const auto* ld = std::get_if<LogitDiff>(&spec);
  if (!ld) throw DomainError("logit_difference needs a logit-diff metric spec");
  check_token(answer_logits, ld->io_token);
  check_token(answer_logits, ld->s_token);
  return answer_logits[static_cast<std::size_t>(ld->io_token)] - answer_logits[static_cast<std::size_t>(ld->s_token)];
}

double greater_probability(std::span<const double> answer_logits, const MetricSpec& spec) {
  const auto* gp = std::get_if<GreaterProb>(&spec);
  if (!gp) throw DomainError("greater_probability needs a greater-prob metric spec");
  check_token(answer_logits, gp->year_begin);
  check_token(answer_logits, gp->year_begin + gp->year_count - 1);
  const auto years = answer_logits.subspan(static_cast<std::size_t>(gp->year_begin),
                                           static_cast<std::size_t>(gp->year_count));
  const double top = *std::max_element(years.begin(), years.end());
  double z = 0.0, signed_mass = 0.0;
  for (int y = 0; y < gp->year_count; ++y) {
    const double e = std::exp(years[static_cast<std::size_t>(y)] - top);
    z += e;
    signed_mass += y > gp->threshold ? e : -e;
  }
  return signed_mass / z;
}

double task_metric(std::span<const double> answer_logits, const MetricSpec& spec) {
  return std::holds_alternative<LogitDiff>(spec) ? logit_difference(answer_logits, spec)
                                                 : greater_probability(answer_logits, spec);
}

std::vector<std::size_t> answer_positions(std::span<const TaskSample> samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.answer_position);
  return out;
}

std::vector<double> task_metrics(const Tensor& logits, std::span<const TaskSample> samples) {
  if (logits.rank() != 3 || logits.dim(0) != samples.size()) throw ShapeError("task_metrics: batch mismatch");
  const std::size_t T = logits.dim(1), V = logits.dim(2);
  std::vector<double> out;
  out.reserve(samples.size());
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b].answer_position >= T) throw LookupError("answer position out of range");
    out.push_back(task_metric(logits.values().subspan((b * T + samples[b].answer_position) * V, V), samples[b].metric));
  }
  return out;
}

double mean_task_metric(const Tensor& logits, std::span<const TaskSample> samples) {
  const auto m = task_metrics(logits, samples);
  double total = 0.0;
  for (double x : m) total += x;
  return total / static_cast<double>(m.size());
}

Tensor task_metric_tensor(const Tensor& logits, std::span<const TaskSample> samples) {
  if (samples.empty()) throw ShapeError("task_metric_tensor: no samples");
  const auto positions = answer_positions(samples);
  const Tensor rows = gather_positions(logits, positions);
  const std::size_t B = rows.dim(0), V = rows.dim(1);
  const double inv_b = 1.0 / static_cast<double>(B);

  if (std::holds_alternative<LogitDiff>(samples[0].metric)) {
    std::vector<double> coef(B * V, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& ld = std::get<LogitDiff>(samples[b].metric);
      check_token(rows.values().subspan(b * V, V), ld.io_token);
      check_token(rows.values().subspan(b * V, V), ld.s_token);
      coef[b * V + static_cast<std::size_t>(ld.io_token)] += inv_b;
      coef[b * V + static_cast<std::size_t>(ld.s_token)] -= inv_b;
    }
    return sum(mul(rows, Tensor::from({B, V}, std::move(coef))));
  }

  const auto& first = std::get<GreaterProb>(samples[0].metric);
  const std::size_t y0 = static_cast<std::size_t>(first.year_begin), ny = static_cast<std::size_t>(first.year_count);
  std::vector<double> sign(B * ny);
  for (std::size_t b = 0; b < B; ++b) {
    const auto* gp = std::get_if<GreaterProb>(&samples[b].metric);
    if (!gp || gp->year_begin != first.year_begin || gp->year_count != first.year_count) {
      throw DomainError("task_metric_tensor: mixed metric specs in one batch");
    }
    for (std::size_t y = 0; y < ny; ++y) sign[b * ny + y] = (static_cast<int>(y) > gp->threshold ? inv_b : -inv_b);
  }
  const Tensor probs = softmax(slice(rows, 1, y0, y0 + ny));
  return sum(mul(probs, Tensor::from({B, ny}, std::move(sign))));
}

double kl_faithfulness(const Tensor& clean_logits, const Tensor& circuit_logits,
                       std::span<const std::size_t> answer_positions) {
  NoGradGuard guard;
  return std::max(0.0, kl_output_loss(clean_logits, circuit_logits, answer_positions).item());
}

}  // namespace ibc
