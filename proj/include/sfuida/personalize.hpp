#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "sfuida/model.hpp"

namespace sfuida::personalize {

using model::Matrix;
using model::Var;

struct TeacherState {
  std::unique_ptr<model::SscModel> model;
  double alpha = 0.996;
};

TeacherState make_teacher(const model::SscModel& student, double alpha);

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
void ema_update(TeacherState& teacher, const model::SscModel& student);

struct PseudoLabelBatch {
  int batch = 0;
  int length = 0;
  Matrix probs;                           // [B*L x 5] teacher softmax rows
  std::vector<int> hard_labels;           // argmax per row
  std::vector<std::uint8_t> epoch_confident;    // max prob > xi (strict)
  std::vector<std::uint8_t> sequence_retained;  // confident count >= n_c

  std::size_t retained_count() const;
};

// Confidence filter applied to given probability rows (rows ordered
// (sequence, position)).
PseudoLabelBatch filter_confident(Matrix probs, int batch, int length, double xi, int n_c);

PseudoLabelBatch pseudo_label(const TeacherState& teacher, std::span<const SleepSequence> batch,
                              const Hyperparameters& h);

// Cross-entropy of the student against teacher labels over every epoch of
// the retained sequences; 0 with no gradient when nothing is retained.
// `soft` uses the teacher probability rows as targets instead of argmax.
Var pseudo_ce_loss(const Var& student_logits, const PseudoLabelBatch& plb, bool soft = false);

struct SspStats {
  std::vector<double> epoch_retention;  // fraction of sequences retained per pass
  double retained_fraction = 0.0;       // over all passes
  std::size_t steps = 0;
  std::size_t gradient_steps = 0;
  std::uint64_t teacher_optimizer_steps = 0;
  std::uint64_t teacher_ema_updates = 0;
};

// Teacher-student pseudo-label fine-tuning on one unlabeled subject. Works
// on a clone of `student` and returns it.
std::unique_ptr<model::SscModel> adapt_ssp(const model::SscModel& student, const SubjectRecording& subject,
                                           const Hyperparameters& h, SspStats* stats = nullptr);

}  // namespace sfuida::personalize
