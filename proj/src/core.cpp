#include "sfuida/core.hpp"

#include <cmath>

#include "sfuida/access_log.hpp"

namespace sfuida {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::EmptyRecording: return "EmptyRecording";
    case ErrorCode::TooFewSubjects: return "TooFewSubjects";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::StructureMismatch: return "StructureMismatch";
    case ErrorCode::NoLabels: return "NoLabels";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::HeadCountMismatch: return "HeadCountMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::SubjectTooShort: return "SubjectTooShort";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::PlanMismatch: return "PlanMismatch";
  }
  return "Unknown";
}

StageLabel stage_from_index(int value) {
  if (value < 0 || value >= kNumStages) {
    throw Error(ErrorCode::LabelOutOfRange, "stage index " + std::to_string(value));
  }
  return static_cast<StageLabel>(value);
}

std::string_view stage_name(StageLabel s) {
  switch (s) {
    case StageLabel::W: return "W";
    case StageLabel::N1: return "N1";
    case StageLabel::N2: return "N2";
    case StageLabel::N3: return "N3";
    case StageLabel::REM: return "REM";
  }
  return "?";
}

std::optional<StageLabel> parse_stage(std::string_view name) {
  for (auto s : kAllStages) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Epoch::Epoch(int channels, int samples)
    : channels_(channels), samples_(samples),
      data_(static_cast<std::size_t>(channels) * samples, 0.0F) {}

Epoch::Epoch(int channels, int samples, std::vector<float> data)
    : channels_(channels), samples_(samples), data_(std::move(data)) {
  if (data_.size() != static_cast<std::size_t>(channels) * samples) {
    throw Error(ErrorCode::ShapeMismatch, "epoch payload does not match channels x samples");
  }
}

bool Epoch::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

int samples_per_epoch(double sample_rate) {
  return static_cast<int>(std::lround(kEpochSeconds * sample_rate));
}

// ---------------------------------------------------------------------------

SubjectRecording::SubjectRecording(std::string subject_id, double sample_rate,
                                   std::vector<EpochPtr> epochs,
                                   std::optional<std::vector<StageLabel>> labels)
    : subject_id_(std::move(subject_id)), sample_rate_(sample_rate),
      epochs_(std::move(epochs)), labels_(std::move(labels)) {
  if (epochs_.empty()) throw Error(ErrorCode::EmptyRecording, "subject " + subject_id_);
  const int c = epochs_.front()->channels();
  const int s = epochs_.front()->samples();
  for (const auto& e : epochs_) {
    if (e->channels() != c || e->samples() != s) {
      throw Error(ErrorCode::ShapeMismatch, "epochs of subject " + subject_id_ + " differ in shape");
    }
  }
  if (labels_ && labels_->size() != epochs_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "labels do not align with epochs for " + subject_id_);
  }
}

int SubjectRecording::channels() const { return epochs_.empty() ? 0 : epochs_.front()->channels(); }
int SubjectRecording::samples() const { return epochs_.empty() ? 0 : epochs_.front()->samples(); }

const std::vector<EpochPtr>& SubjectRecording::epochs() const {
  record_access(subject_id_, AccessKind::Signals);
  return epochs_;
}

const std::vector<StageLabel>& SubjectRecording::labels() const {
  if (!labels_) throw Error(ErrorCode::NoLabels, "subject " + subject_id_ + " is unlabeled");
  record_access(subject_id_, AccessKind::Labels);
  return *labels_;
}

SubjectRecording SubjectRecording::without_labels() const {
  SubjectRecording copy = *this;
  copy.labels_.reset();
  return copy;
}

bool operator==(const SubjectRecording& a, const SubjectRecording& b) {
  if (a.subject_id_ != b.subject_id_ || a.sample_rate_ != b.sample_rate_ ||
      a.labels_ != b.labels_ || a.epochs_.size() != b.epochs_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.epochs_.size(); ++i) {
    if (!(*a.epochs_[i] == *b.epochs_[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

void validate_hyperparameters(const Hyperparameters& h) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  if (h.T <= 1) fail("1 < T");
  if (h.T >= h.L) fail("T < L");
  if (h.n_c > h.L) fail("n_c <= L");
  if (h.n_c < 0) fail("n_c >= 0");
  if (!(h.xi > 0.0 && h.xi < 1.0)) fail("0 < xi < 1");
  if (!(h.alpha >= 0.0 && h.alpha <= 1.0)) fail("0 <= alpha <= 1");
  if (h.batch_size < 1) fail("batch_size >= 1");
  if (h.pretrain_epochs < 0 || h.ssa_epochs < 0 || h.ssp_epochs < 0) fail("epoch counts >= 0");
  if (h.lr_pretrain < 0 || h.lr_ssa < 0 || h.lr_ssp < 0) fail("learning rates >= 0");
  if (!(h.adam_betas.first >= 0 && h.adam_betas.first < 1 && h.adam_betas.second >= 0 &&
        h.adam_betas.second < 1)) {
    fail("adam betas in [0,1)");
  }
  if (h.weight_decay < 0) fail("weight_decay >= 0");
  if (h.pretrain_stride < 0) fail("pretrain_stride >= 0");
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t counter) {
  return splitmix64(splitmix64(base) ^ splitmix64(counter + 0x632BE59BD9B4E019ULL));
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view key) {
  // FNV-1a over the key, then counter derivation.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return derive_seed(base, h);
}

}  // namespace sfuida
