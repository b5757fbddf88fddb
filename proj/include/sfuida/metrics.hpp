#pragma once

#include <array>
#include <span>

#include "sfuida/core.hpp"

namespace sfuida::metrics {

using PerClass = std::array<double, kNumStages>;

double accuracy(std::span<const int> preds, std::span<const int> labels);

// Unweighted mean of per-class F1 over the classes present in `labels`.
// A present class that is never predicted scores 0.
double macro_f1(std::span<const int> preds, std::span<const int> labels);

// F1 per class; classes absent from `labels` report 0.
PerClass per_class_f1(std::span<const int> preds, std::span<const int> labels);

}  // namespace sfuida::metrics
