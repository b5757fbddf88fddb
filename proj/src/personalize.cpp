#include "sfuida/personalize.hpp"

#include <cmath>

#include "sfuida/access_log.hpp"
#include "sfuida/dataio.hpp"
#include "sfuida/optim.hpp"
#include "sfuida/pretrain.hpp"

namespace sfuida::personalize {

TeacherState make_teacher(const model::SscModel& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidConfig, "0 <= alpha <= 1");
  return TeacherState{student.clone(), alpha};
}

void ema_update(TeacherState& teacher, const model::SscModel& student) {
  auto& tp = teacher.model->parameters();
  const auto& sp = student.parameters();
  if (tp.size() != sp.size()) throw Error(ErrorCode::StructureMismatch, "teacher and student differ in structure");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].name != sp[i].name || tp[i].var.rows() != sp[i].var.rows() || tp[i].var.cols() != sp[i].var.cols()) {
      throw Error(ErrorCode::StructureMismatch, "teacher parameter '" + tp[i].name + "' vs '" + sp[i].name + "'");
    }
  }
  const double a = teacher.alpha;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    Matrix& t = tp[i].var.mutable_value();
    t = a * t + (1.0 - a) * sp[i].var.value();
  }
  teacher.model->note_ema_update();
}

std::size_t PseudoLabelBatch::retained_count() const {
  std::size_t n = 0;
  for (auto r : sequence_retained) n += r;
  return n;
}

PseudoLabelBatch filter_confident(Matrix probs, int batch, int length, double xi, int n_c) {
  if (probs.rows() != static_cast<Eigen::Index>(batch) * length || probs.cols() != kNumStages) {
    throw Error(ErrorCode::ShapeMismatch, "pseudo labels: probs must be [B*L x 5]");
  }
  PseudoLabelBatch plb;
  plb.batch = batch;
  plb.length = length;
  plb.hard_labels.resize(static_cast<std::size_t>(probs.rows()));
  plb.epoch_confident.resize(static_cast<std::size_t>(probs.rows()));
  plb.sequence_retained.resize(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    int confident = 0;
    for (int t = 0; t < length; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * length + t;
      Eigen::Index arg;
      const double top = probs.row(r).maxCoeff(&arg);
      plb.hard_labels[static_cast<std::size_t>(r)] = static_cast<int>(arg);
      const bool sure = top > xi;
      plb.epoch_confident[static_cast<std::size_t>(r)] = sure;
      confident += sure;
    }
    plb.sequence_retained[static_cast<std::size_t>(b)] = confident >= n_c;
  }
  plb.probs = std::move(probs);
  return plb;
}

PseudoLabelBatch pseudo_label(const TeacherState& teacher, std::span<const SleepSequence> batch,
                              const Hyperparameters& h) {
  ag::NoGradGuard no_grad;
  const auto input = model::SequenceBatch::from_sequences(batch);
  if (input.length != h.L) throw Error(ErrorCode::ShapeMismatch, "pseudo labels: sequences must have length L");
  Matrix probs = ag::softmax_rows(teacher.model->forward_classify(input).value());
  return filter_confident(std::move(probs), input.batch, input.length, h.xi, h.n_c);
}

Var pseudo_ce_loss(const Var& student_logits, const PseudoLabelBatch& plb, bool soft) {
  const Eigen::Index rows = static_cast<Eigen::Index>(plb.batch) * plb.length;
  if (student_logits.rows() != rows || student_logits.cols() != kNumStages || plb.probs.rows() != rows) {
    throw Error(ErrorCode::ShapeMismatch, "pseudo CE: logits must align with the pseudo-label batch");
  }
  std::vector<double> weights(static_cast<std::size_t>(rows), 0.0);
  double used = 0.0;
  for (int b = 0; b < plb.batch; ++b) {
    if (!plb.sequence_retained[static_cast<std::size_t>(b)]) continue;
    for (int t = 0; t < plb.length; ++t) weights[static_cast<std::size_t>(b) * plb.length + t] = 1.0;
    used += plb.length;
  }
  if (used == 0.0) return ag::scalar(0.0);
  Matrix targets;
  if (soft) {
    targets = plb.probs;
  } else {
    targets = Matrix::Zero(rows, kNumStages);
    for (Eigen::Index r = 0; r < rows; ++r) targets(r, plb.hard_labels[static_cast<std::size_t>(r)]) = 1.0;
  }
  return ag::softmax_cross_entropy(student_logits, targets, weights, used);
}

std::unique_ptr<model::SscModel> adapt_ssp(const model::SscModel& student_in, const SubjectRecording& subject,
                                           const Hyperparameters& h, SspStats* stats) {
  validate_hyperparameters(h);
  StageTag tag("ssp");
  auto student = student_in.clone();
  const auto sequences = dataio::make_sequences(subject.without_labels(), h.L, h.L);  // labels never reach adaptation
  if (sequences.empty()) {
    throw Error(ErrorCode::SubjectTooShort, subject.subject_id() + " has " + std::to_string(subject.num_epochs()) +
                                                " epochs, fewer than L = " + std::to_string(h.L));
  }
  SspStats local;
  TeacherState teacher = make_teacher(*student, h.alpha);
  optim::Adam adam(*student, [&] {
    std::vector<model::Parameter*> all;
    for (auto& p : student->parameters()) all.push_back(&p);
    return all;
  }(), optim::adam_options(h, h.lr_ssp));

  const std::uint64_t stage_seed = derive_seed(h.seed, "ssp:" + subject.subject_id());
  std::size_t retained_total = 0;
  std::size_t seen_total = 0;
  for (int epoch = 0; epoch < h.ssp_epochs; ++epoch) {
    const std::uint64_t seed = derive_seed(stage_seed, static_cast<std::uint64_t>(epoch));
    std::size_t retained = 0;
    for (const auto& idx : pretrain::make_batches(sequences.size(), h.batch_size, &seed)) {
      const auto part = pretrain::gather(sequences, idx);
      const PseudoLabelBatch plb = pseudo_label(teacher, part, h);
      retained += plb.retained_count();
      adam.zero_grad();
      const Var logits = student->forward_classify(model::SequenceBatch::from_sequences(part));
      const Var loss = pseudo_ce_loss(logits, plb, h.soft_pseudo_labels);
      if (!std::isfinite(loss.item())) throw Error(ErrorCode::DivergedLoss, "non-finite pseudo-label loss");
      if (loss.requires_grad()) {
        ag::backward(loss);
        adam.step();
        ++local.gradient_steps;
      }
      ema_update(teacher, *student);
      ++local.steps;
    }
    local.epoch_retention.push_back(static_cast<double>(retained) / static_cast<double>(sequences.size()));
    retained_total += retained;
    seen_total += sequences.size();
  }
  adam.zero_grad();
  local.retained_fraction = seen_total ? static_cast<double>(retained_total) / static_cast<double>(seen_total) : 0.0;
  local.teacher_optimizer_steps = teacher.model->optimizer_steps();
  local.teacher_ema_updates = teacher.model->ema_updates();
  if (stats) *stats = std::move(local);
  return student;
}

}  // namespace sfuida::personalize
