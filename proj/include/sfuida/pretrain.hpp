#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfuida/model.hpp"

namespace sfuida::pretrain {

// Mean over all B*L rows of -log softmax(logits)[label].
model::Var sequence_cross_entropy(const model::Var& logits, std::span<const int> labels);

// Labels of every sequence, flattened in (sequence, position) order.
std::vector<int> flatten_labels(std::span<const SleepSequence> seqs);

// Argmax predictions in inference mode, flattened like flatten_labels.
std::vector<int> predict(const model::SscModel& m, std::span<const SleepSequence> seqs, int batch_size);

// Index batches over n items: shuffled with `seed`, or in order if seed is
// absent. The last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, const std::uint64_t* seed);

std::vector<SleepSequence> gather(std::span<const SleepSequence> seqs, std::span<const std::size_t> idx);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_mf1 = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;  // -1: initial parameters kept
  double best_val_mf1 = 0.0;

  std::string to_csv() const;
};

// Supervised training of the classification path. On return `m` holds the
// parameters with the best validation MF1 seen across epochs. A non-finite
// loss restores the last good state and throws DivergedLoss.
History pretrain(model::SscModel& m, std::span<const SleepSequence> train, std::span<const SleepSequence> val,
                 const Hyperparameters& h);

}  // namespace sfuida::pretrain
