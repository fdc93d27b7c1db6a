#pragma once

#include <span>
#include <vector>

#include "ibcircuit/task.hpp"
#include "ibcircuit/tensor.hpp"

namespace ibc {

// Both take the logit row at the answer position (length vocab).
double logit_difference(std::span<const double> answer_logits, const MetricSpec& spec);
// Softmax over the year block only; sum of P(y > YY) minus sum of P(y <= YY).
double greater_probability(std::span<const double> answer_logits, const MetricSpec& spec);
double task_metric(std::span<const double> answer_logits, const MetricSpec& spec);

// Per-sample metric from [batch, seq, vocab] logits.
std::vector<double> task_metrics(const Tensor& logits, std::span<const TaskSample> samples);
double mean_task_metric(const Tensor& logits, std::span<const TaskSample> samples);

// Batch mean of the task metric as a differentiable scalar.
Tensor task_metric_tensor(const Tensor& logits, std::span<const TaskSample> samples);

// Mean over samples of KL(softmax(clean) || softmax(circuit)) at the answer positions.
double kl_faithfulness(const Tensor& clean_logits, const Tensor& circuit_logits,
                       std::span<const std::size_t> answer_positions);

std::vector<std::size_t> answer_positions(std::span<const TaskSample> samples);

}  // namespace ibc
