#include "sfuida/metrics.hpp"

namespace sfuida::metrics {

namespace {

struct Counts {
  std::array<long, kNumStages> tp{}, fp{}, fn{}, support{};
};

Counts count(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty() || labels.empty()) throw Error(ErrorCode::EmptyInput, "metrics need at least one epoch");
  if (preds.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "preds and labels differ in length");
  Counts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int y = labels[i];
    const int p = preds[i];
    if (y < 0 || y >= kNumStages || p < 0 || p >= kNumStages) {
      throw Error(ErrorCode::LabelOutOfRange, "class index outside 0..4");
    }
    ++c.support[y];
    if (p == y) {
      ++c.tp[y];
    } else {
      ++c.fp[p];
      ++c.fn[y];
    }
  }
  return c;
}

double f1(const Counts& c, int k) {
  const double denom = 2.0 * c.tp[k] + c.fp[k] + c.fn[k];
  return denom > 0 ? 2.0 * c.tp[k] / denom : 0.0;
}

}  // namespace

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  const Counts c = count(preds, labels);
  long correct = 0;
  for (auto t : c.tp) correct += t;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels) {
  const Counts c = count(preds, labels);
  double total = 0.0;
  int present = 0;
  for (int k = 0; k < kNumStages; ++k) {
    if (c.support[k] == 0) continue;
    total += f1(c, k);
    ++present;
  }
  return total / present;
}

PerClass per_class_f1(std::span<const int> preds, std::span<const int> labels) {
  const Counts c = count(preds, labels);
  PerClass out{};
  for (int k = 0; k < kNumStages; ++k) out[k] = c.support[k] > 0 ? f1(c, k) : 0.0;
  return out;
}

}  // namespace sfuida::metrics
