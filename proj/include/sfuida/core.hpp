#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sfuida {

enum class ErrorCode {
  InvalidConfig,
  IoError,
  FormatError,
  EmptyRecording,
  TooFewSubjects,
  InvalidSpec,
  ShapeMismatch,
  StructureMismatch,
  NoLabels,
  DivergedLoss,
  LabelOutOfRange,
  HeadCountMismatch,
  DimMismatch,
  SubjectTooShort,
  EmptyInput,
  PlanMismatch,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// ---------------------------------------------------------------------------
// Stage labels

enum class StageLabel : std::uint8_t { W = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };

inline constexpr int kNumStages = 5;
inline constexpr std::array<StageLabel, kNumStages> kAllStages = {
    StageLabel::W, StageLabel::N1, StageLabel::N2, StageLabel::N3, StageLabel::REM};

constexpr int to_index(StageLabel s) { return static_cast<int>(s); }
StageLabel stage_from_index(int value);  // throws LabelOutOfRange
std::string_view stage_name(StageLabel s);
std::optional<StageLabel> parse_stage(std::string_view name);

inline constexpr double kEpochSeconds = 30.0;

// ---------------------------------------------------------------------------
// Epoch: one 30-s window, row-major [channel][sample].

class Epoch {
 public:
  Epoch() = default;
  Epoch(int channels, int samples);
  Epoch(int channels, int samples, std::vector<float> data);

  int channels() const { return channels_; }
  int samples() const { return samples_; }
  float at(int channel, int sample) const { return data_[index(channel, sample)]; }
  float& at(int channel, int sample) { return data_[index(channel, sample)]; }
  const std::vector<float>& data() const { return data_; }
  bool all_finite() const;

  friend bool operator==(const Epoch&, const Epoch&) = default;

 private:
  std::size_t index(int c, int s) const { return static_cast<std::size_t>(c) * samples_ + s; }
  int channels_ = 0;
  int samples_ = 0;
  std::vector<float> data_;
};

using EpochPtr = std::shared_ptr<const Epoch>;

int samples_per_epoch(double sample_rate);

// ---------------------------------------------------------------------------
// SubjectRecording: one individual domain.
//
// Accessors for signals and labels report to the active DataAccessLog (see
// access_log.hpp), which is how adaptation stages are shown to stay on the
// target subject and away from its labels.

class SubjectRecording {
 public:
  SubjectRecording() = default;
  SubjectRecording(std::string subject_id, double sample_rate, std::vector<EpochPtr> epochs,
                   std::optional<std::vector<StageLabel>> labels = std::nullopt);

  const std::string& subject_id() const { return subject_id_; }
  double sample_rate() const { return sample_rate_; }
  std::size_t num_epochs() const { return epochs_.size(); }
  int channels() const;
  int samples() const;
  bool has_labels() const { return labels_.has_value(); }

  const std::vector<EpochPtr>& epochs() const;
  const std::vector<StageLabel>& labels() const;  // throws NoLabels when absent

  SubjectRecording without_labels() const;

  friend bool operator==(const SubjectRecording& a, const SubjectRecording& b);

 private:
  std::string subject_id_;
  double sample_rate_ = 0.0;
  std::vector<EpochPtr> epochs_;
  std::optional<std::vector<StageLabel>> labels_;
};

// ---------------------------------------------------------------------------

struct SequenceOrigin {
  std::string subject_id;
  std::size_t start_index = 0;
  friend bool operator==(const SequenceOrigin&, const SequenceOrigin&) = default;
};

struct SleepSequence {
  std::vector<EpochPtr> epochs;
  std::optional<std::vector<StageLabel>> labels;
  SequenceOrigin origin;

  std::size_t length() const { return epochs.size(); }
};

// ---------------------------------------------------------------------------

struct Hyperparameters {
  int L = 20;
  int T = 17;
  int pretrain_epochs = 100;
  int ssa_epochs = 5;
  int ssp_epochs = 10;
  double lr_pretrain = 1e-4;
  double lr_ssa = 1e-7;
  double lr_ssp = 1e-7;
  double alpha = 0.996;
  double xi = 0.8;
  int n_c = 15;
  int batch_size = 32;
  std::pair<double, double> adam_betas{0.5, 0.99};
  double weight_decay = 3e-4;

  // Artifact knobs, not tied to any single stage.
  std::uint64_t seed = 0;
  int pretrain_stride = 0;  // 0 means stride = L
  bool soft_pseudo_labels = false;

  int K() const { return L - T; }
  int effective_pretrain_stride() const { return pretrain_stride > 0 ? pretrain_stride : L; }
};

void validate_hyperparameters(const Hyperparameters& h);

// splitmix64-style counter derivation: one global seed fans out to
// independent, reproducible per-subject/per-stage streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t counter);
std::uint64_t derive_seed(std::uint64_t base, std::string_view key);

}  // namespace sfuida
