#include "sfuida/pretrain.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "sfuida/metrics.hpp"
#include "sfuida/optim.hpp"

namespace sfuida::pretrain {

using model::Matrix;
using model::Var;

Var sequence_cross_entropy(const Var& logits, std::span<const int> labels) {
  if (logits.cols() != kNumStages || logits.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "cross entropy: logits must be [B*L, 5] with one label per row");
  }
  if (labels.empty()) throw Error(ErrorCode::EmptyInput, "cross entropy over zero rows");
  Matrix targets = Matrix::Zero(logits.rows(), kNumStages);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= kNumStages) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[r]));
    }
    targets(static_cast<Eigen::Index>(r), labels[r]) = 1.0;
  }
  const std::vector<double> weights(labels.size(), 1.0);
  return ag::softmax_cross_entropy(logits, targets, weights, static_cast<double>(labels.size()));
}

std::vector<int> flatten_labels(std::span<const SleepSequence> seqs) {
  std::vector<int> out;
  for (const auto& s : seqs) {
    if (!s.labels) throw Error(ErrorCode::NoLabels, "sequence from " + s.origin.subject_id + " is unlabeled");
    for (auto l : *s.labels) out.push_back(to_index(l));
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, const std::uint64_t* seed) {
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (seed) {
    std::mt19937_64 rng(*seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<SleepSequence> gather(std::span<const SleepSequence> seqs, std::span<const std::size_t> idx) {
  std::vector<SleepSequence> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(seqs[i]);
  return out;
}

std::vector<int> predict(const model::SscModel& m, std::span<const SleepSequence> seqs, int batch_size) {
  ag::NoGradGuard no_grad;
  std::vector<int> preds;
  for (const auto& idx : make_batches(seqs.size(), batch_size, nullptr)) {
    const auto part = gather(seqs, idx);
    const Matrix logits = m.forward_classify(model::SequenceBatch::from_sequences(part)).value();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index arg;
      logits.row(r).maxCoeff(&arg);
      preds.push_back(static_cast<int>(arg));
    }
  }
  return preds;
}

std::string History::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_acc,val_mf1\n";
  for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_acc << ',' << e.val_mf1 << '\n';
  return out.str();
}

History pretrain(model::SscModel& m, std::span<const SleepSequence> train, std::span<const SleepSequence> val,
                 const Hyperparameters& h) {
  validate_hyperparameters(h);
  History history;
  if (h.pretrain_epochs == 0) return history;
  if (train.empty()) throw Error(ErrorCode::EmptyInput, "no training sequences");
  for (const auto& s : train) {
    if (!s.labels) throw Error(ErrorCode::NoLabels, "training sequence from " + s.origin.subject_id);
  }
  // Without a validation split, model selection falls back to the training set.
  const std::span<const SleepSequence> select = val.empty() ? train : val;
  const std::vector<int> select_labels = flatten_labels(select);

  optim::Adam adam(m, m.parameters_in({model::ParamGroup::Extractor, model::ParamGroup::Encoder,
                                       model::ParamGroup::Classifier}),
                   optim::adam_options(h, h.lr_pretrain));
  model::ParameterSnapshot best = m.snapshot();
  double best_mf1 = -std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < h.pretrain_epochs; ++epoch) {
    const std::uint64_t seed = derive_seed(h.seed, "pretrain-epoch-" + std::to_string(epoch));
    double loss_sum = 0.0;
    std::size_t rows = 0;
    for (const auto& idx : make_batches(train.size(), h.batch_size, &seed)) {
      const auto part = gather(train, idx);
      const auto labels = flatten_labels(part);
      adam.zero_grad();
      const Var loss = sequence_cross_entropy(m.forward_classify(model::SequenceBatch::from_sequences(part)), labels);
      if (!std::isfinite(loss.item())) {
        m.load(best);
        throw Error(ErrorCode::DivergedLoss, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      ag::backward(loss);
      adam.step();
      loss_sum += loss.item() * static_cast<double>(labels.size());
      rows += labels.size();
    }
    adam.zero_grad();

    const auto preds = predict(m, select, h.batch_size);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(rows), metrics::accuracy(preds, select_labels),
                    metrics::macro_f1(preds, select_labels)};
    history.epochs.push_back(rec);
    if (rec.val_mf1 > best_mf1) {
      best_mf1 = rec.val_mf1;
      best = m.snapshot();
      history.best_epoch = epoch;
      history.best_val_mf1 = rec.val_mf1;
    }
  }
  m.load(best);
  return history;
}

}  // namespace sfuida::pretrain
