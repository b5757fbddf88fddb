#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sfuida/dataio.hpp"
#include "sfuida/metrics.hpp"
#include "sfuida/model.hpp"
#include "sfuida/pretrain.hpp"

namespace sfuida::eval {

enum class Variant { SO, SSA, SSP, Full };
inline constexpr std::array<Variant, 4> kAllVariants = {Variant::SO, Variant::SSA, Variant::SSP, Variant::Full};

// "SO", "SO+SSA", "SO+SSP", "SO+SSA+SSP"
std::string_view to_string(Variant v);
// Accepts the names above (any case) plus the short forms so, ssa, ssp, full.
std::optional<Variant> parse_variant(std::string_view name);

struct AdaptationReport {
  std::string subject_id;
  Variant variant = Variant::SO;
  double acc = 0.0;
  double mf1 = 0.0;
  metrics::PerClass per_class_f1{};
  double ssa_seconds = 0.0;
  double ssp_seconds = 0.0;
  double eval_seconds = 0.0;
  double total_seconds = 0.0;
  double retained_sequence_fraction = 0.0;  // SSP only
  std::vector<double> ssa_epoch_loss;       // mean SCC loss per SSA pass
  std::size_t epochs_scored = 0;
};

// Predictions for every epoch of `subject`, in order. Windows of length L
// with stride L; a trailing partial window is scored with the last full
// window [N-L, N) and only its unscored epochs are kept.
std::vector<int> predict_subject(const model::SscModel& m, const SubjectRecording& subject, const Hyperparameters& h);

// Adapts a clone of `source` to the subject for each requested variant and
// scores it against the subject's labels. Adaptation only ever sees a
// label-stripped copy. SO+SSA and SO+SSA+SSP share one SSA run.
// `adapted` (optional) receives the adapted model per variant, in order.
std::vector<AdaptationReport> run_subject_variants(const model::SscModel& source, const SubjectRecording& subject,
                                                   std::span<const Variant> variants, const Hyperparameters& h,
                                                   std::vector<std::unique_ptr<model::SscModel>>* adapted = nullptr);

AdaptationReport run_subject(const model::SscModel& source, const SubjectRecording& subject, Variant variant,
                             const Hyperparameters& h, std::unique_ptr<model::SscModel>* adapted = nullptr);

struct VariantSummary {
  Variant variant = Variant::SO;
  std::size_t subjects = 0;
  double mean_acc = 0.0;
  double mean_mf1 = 0.0;
  metrics::PerClass mean_per_class_f1{};
  double mean_ssa_seconds = 0.0;
  double mean_ssp_seconds = 0.0;
  double mean_retained_fraction = 0.0;
};

// Subject-equal averages per variant, in kAllVariants order (variants with
// no rows are omitted).
std::vector<VariantSummary> summarize(std::span<const AdaptationReport> reports);

struct FoldReport {
  int fold_index = 0;
  std::vector<AdaptationReport> reports;
  std::vector<VariantSummary> averages;
  pretrain::History pretrain_history;
  double pretrain_seconds = 0.0;
};

struct CvOptions {
  model::ModelConfig model;  // channels/samples/seq_len/context_steps are taken from the data and h
  std::vector<Variant> variants{kAllVariants.begin(), kAllVariants.end()};
  int jobs = 1;
  std::filesystem::path output_dir;  // when set, reports are written here
};

// Per fold: pretrain a fresh model on train (val for selection) under stage
// tag "pretrain:<fold>", then run every test subject independently from that
// frozen source.
std::vector<FoldReport> run_cv(const dataio::DatasetManifest& manifest, const dataio::FoldPlan& plan,
                               const Hyperparameters& h, const CvOptions& options);

// Header plus one row per epoch: epoch index, label (empty if unlabeled), D_z latent values.
void export_embeddings(const model::SscModel& m, const SubjectRecording& subject, const std::filesystem::path& path);

std::string reports_to_csv(std::span<const AdaptationReport> reports);
std::string summary_text(std::span<const VariantSummary> summary, std::string_view title);
// fold_<i>.csv and fold_<i>_summary.txt per fold, plus aggregate.csv and
// aggregate_summary.txt over all folds.
void write_cv_outputs(const std::filesystem::path& dir, std::span<const FoldReport> folds);

// ---------------------------------------------------------------------------
// Synthetic ablation benchmark (source population vs. shifted targets).

// Learning rates and epoch counts that let adaptation move a desk-scale
// model within a few passes; the full-scale default rates are a no-op here.
Hyperparameters desk_hyperparameters();

struct BenchmarkOptions {
  std::uint64_t seed = 0;
  int source_subjects = 12;
  int target_subjects = 4;
  int val_subjects = 2;  // taken from the source subjects
  std::size_t epochs_per_subject = 400;
  dataio::PopulationShift shift{};
  double sample_rate = 100.0;
  Hyperparameters h = desk_hyperparameters();
  std::vector<Variant> variants{kAllVariants.begin(), kAllVariants.end()};
};

struct BenchmarkResult {
  std::vector<AdaptationReport> reports;
  std::vector<VariantSummary> summary;
  pretrain::History history;
  double seconds = 0.0;

  double mean_acc(Variant v) const;
};

BenchmarkResult run_synthetic_benchmark(const BenchmarkOptions& options);

}  // namespace sfuida::eval
