#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sfuida/core.hpp"

namespace sfuida::dataio {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Canonical on-disk format, one directory per subject:
//   meta          key=value text (subject_id, num_epochs, channels, sample_rate, channel_names)
//   signals.f32le row-major [epoch][channel][sample], little-endian float32
//   labels.u8     optional, one byte per epoch (0..4 = W,N1,N2,N3,REM)

void write_subject(const SubjectRecording& rec, const fs::path& root,
                   const std::vector<std::string>& channel_names = {});
SubjectRecording read_subject(const fs::path& root, const std::string& subject_id);

struct ManifestEntry {
  std::string subject_id;
  std::size_t num_epochs = 0;
  bool has_labels = false;
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestEntry> subjects;
  double sample_rate = 100.0;
  std::vector<std::string> channels;

  std::vector<std::string> subject_ids() const;
};

// Writes root/manifest. Subjects must already be on disk.
void write_manifest(const DatasetManifest& manifest);
// Reads root/manifest when present, otherwise scans subject directories.
// Verifies every listed subject's files exist and match the declared shape.
DatasetManifest load_manifest(const fs::path& root);

// Writes `content` to `path` through a temporary sibling and a rename.
void write_file_atomic(const fs::path& path, std::string_view content);

// ---------------------------------------------------------------------------

std::vector<SleepSequence> make_sequences(const SubjectRecording& rec, int L, int stride);

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
};

struct FoldPlan {
  std::vector<Fold> folds;
};

// Subject-disjoint k-fold plan. Fold f tests group f, validates on group
// f+1 (mod k) and trains on the rest, giving 8:1:1 for k = 10.
FoldPlan plan_folds(const std::vector<std::string>& subject_ids, int n_folds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic benchmark

using TransitionMatrix = Eigen::Matrix<double, kNumStages, kNumStages, Eigen::RowMajor>;

struct SyntheticSubjectSpec {
  std::string subject_id = "synthetic";
  std::uint64_t seed = 0;
  TransitionMatrix stage_transition_matrix = TransitionMatrix::Identity();
  double amplitude_gain = 1.0;
  double frequency_shift = 0.0;  // Hz, added to every stage component
  double noise_sigma = 0.0;
  int channels = 1;
  double sample_rate = 100.0;
  StageLabel initial_stage = StageLabel::W;
};

// A sleep-like chain: long dwell times, W -> N1 -> N2 <-> N3, N2 <-> REM.
TransitionMatrix default_transition_matrix();
Eigen::Matrix<double, 1, kNumStages> stationary_distribution(const TransitionMatrix& p);

SubjectRecording generate_synthetic(const SyntheticSubjectSpec& spec, std::size_t num_epochs);

// Draws the per-subject spec for subject `index` of a population. Source
// subjects vary mildly; shifted subjects get a larger frequency shift,
// different gain and heavier noise.
struct PopulationShift {
  double source_frequency_jitter = 0.3;
  double target_frequency_shift = 0.4;
  double target_noise_sigma = 0.6;
  double source_noise_sigma = 0.3;
};
SyntheticSubjectSpec population_subject_spec(std::uint64_t seed, int index, bool shifted,
                                             const PopulationShift& shift = {}, int channels = 1,
                                             double sample_rate = 100.0);

// ---------------------------------------------------------------------------
// Ingestion helpers for pre-extracted continuous recordings

// R&K and AASM hypnogram tokens -> AASM 5-class. S3/S4 merge into N3;
// movement and unscored tokens return nullopt (epoch dropped).
std::optional<StageLabel> map_hypnogram_token(std::string_view token);

// Zero-phase 2nd-order Butterworth band-pass (forward-backward biquads).
std::vector<float> bandpass(const std::vector<float>& x, double sample_rate, double low_hz, double high_hz);

// Low-pass then linear-interpolation resampling.
std::vector<float> resample(const std::vector<float>& x, double from_rate, double to_rate);

struct ImportOptions {
  std::string subject_id;
  double source_rate = 100.0;
  int channels = 1;
  double target_rate = 100.0;
  std::optional<std::pair<double, double>> bandpass_hz;
};

// signal: channel-major continuous samples [channel][sample] at source_rate;
// hypnogram: one token per 30-s epoch.
SubjectRecording import_continuous(const std::vector<std::vector<float>>& signal,
                                   const std::vector<std::string>& hypnogram, const ImportOptions& opts);

}  // namespace sfuida::dataio
