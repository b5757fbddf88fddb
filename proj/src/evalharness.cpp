#include "sfuida/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "sfuida/access_log.hpp"
#include "sfuida/personalize.hpp"
#include "sfuida/scc.hpp"

namespace sfuida::eval {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool uses_ssa(Variant v) { return v == Variant::SSA || v == Variant::Full; }
bool uses_ssp(Variant v) { return v == Variant::SSP || v == Variant::Full; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Workers inherit the
// caller's access log so instrumentation sees their reads.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  DataAccessLog* log = active_access_log();
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    std::optional<ScopedAccessLog> scope;
    if (log) scope.emplace(*log);
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::SO: return "SO";
    case Variant::SSA: return "SO+SSA";
    case Variant::SSP: return "SO+SSP";
    case Variant::Full: return "SO+SSA+SSP";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
  const std::string n = lower(name);
  if (n == "so") return Variant::SO;
  if (n == "so+ssa" || n == "ssa") return Variant::SSA;
  if (n == "so+ssp" || n == "ssp") return Variant::SSP;
  if (n == "so+ssa+ssp" || n == "full") return Variant::Full;
  return std::nullopt;
}

std::vector<int> predict_subject(const model::SscModel& m, const SubjectRecording& subject, const Hyperparameters& h) {
  const std::size_t n = subject.num_epochs();
  const auto L = static_cast<std::size_t>(h.L);
  if (n < L) {
    throw Error(ErrorCode::SubjectTooShort,
                subject.subject_id() + " has " + std::to_string(n) + " epochs, fewer than L = " + std::to_string(h.L));
  }
  auto seqs = dataio::make_sequences(subject, h.L, h.L);
  const std::size_t covered = seqs.size() * L;
  if (covered < n) {
    const auto& all = subject.epochs();
    SleepSequence tail;
    tail.epochs.assign(all.end() - static_cast<std::ptrdiff_t>(L), all.end());
    tail.origin = {subject.subject_id(), n - L};
    seqs.push_back(std::move(tail));
  }
  std::vector<int> flat = pretrain::predict(m, seqs, h.batch_size);
  if (covered < n) {
    // Keep only the tail window's epochs that the stride-L windows missed.
    const std::size_t skip = covered - (n - L);
    flat.erase(flat.begin() + static_cast<std::ptrdiff_t>(covered),
               flat.begin() + static_cast<std::ptrdiff_t>(covered + skip));
  }
  return flat;
}

std::vector<AdaptationReport> run_subject_variants(const model::SscModel& source, const SubjectRecording& subject,
                                                   std::span<const Variant> variants, const Hyperparameters& h,
                                                   std::vector<std::unique_ptr<model::SscModel>>* adapted) {
  validate_hyperparameters(h);
  if (subject.num_epochs() < static_cast<std::size_t>(h.L)) {
    throw Error(ErrorCode::SubjectTooShort, subject.subject_id() + " has " + std::to_string(subject.num_epochs()) +
                                                " epochs, fewer than L = " + std::to_string(h.L));
  }
  const SubjectRecording unlabeled = subject.without_labels();

  std::unique_ptr<model::SscModel> ssa_model;
  double ssa_seconds = 0.0;
  scc::SsaStats ssa_stats;
  if (std::any_of(variants.begin(), variants.end(), uses_ssa)) {
    const auto t0 = Clock::now();
    ssa_model = scc::adapt_ssa(source, unlabeled, h, &ssa_stats);
    ssa_seconds = seconds_since(t0);
  }

  std::vector<AdaptationReport> out;
  for (Variant v : variants) {
    const auto t_start = Clock::now();
    AdaptationReport r;
    r.subject_id = subject.subject_id();
    r.variant = v;
    std::unique_ptr<model::SscModel> m;
    if (uses_ssa(v)) {
      r.ssa_seconds = ssa_seconds;
      r.ssa_epoch_loss = ssa_stats.epoch_mean_loss;
      m = ssa_model->clone();
    } else {
      m = source.clone();
    }
    if (uses_ssp(v)) {
      const auto t0 = Clock::now();
      personalize::SspStats stats;
      m = personalize::adapt_ssp(*m, unlabeled, h, &stats);
      r.ssp_seconds = seconds_since(t0);
      r.retained_sequence_fraction = stats.retained_fraction;
    }
    const auto t_eval = Clock::now();
    {
      StageTag tag("evaluate");
      const std::vector<int> preds = predict_subject(*m, subject, h);
      std::vector<int> labels;
      labels.reserve(subject.num_epochs());
      for (StageLabel s : subject.labels()) labels.push_back(to_index(s));
      r.acc = metrics::accuracy(preds, labels);
      r.mf1 = metrics::macro_f1(preds, labels);
      r.per_class_f1 = metrics::per_class_f1(preds, labels);
      r.epochs_scored = preds.size();
    }
    r.eval_seconds = seconds_since(t_eval);
    // The shared SSA run is charged to every variant that uses it.
    r.total_seconds = seconds_since(t_start) + r.ssa_seconds;
    out.push_back(r);
    if (adapted) adapted->push_back(std::move(m));
  }
  return out;
}

AdaptationReport run_subject(const model::SscModel& source, const SubjectRecording& subject, Variant variant,
                             const Hyperparameters& h, std::unique_ptr<model::SscModel>* adapted) {
  std::vector<std::unique_ptr<model::SscModel>> models;
  const Variant one[] = {variant};
  auto reports = run_subject_variants(source, subject, one, h, adapted ? &models : nullptr);
  if (adapted) *adapted = std::move(models.front());
  return reports.front();
}

std::vector<VariantSummary> summarize(std::span<const AdaptationReport> reports) {
  std::vector<VariantSummary> out;
  for (Variant v : kAllVariants) {
    VariantSummary s;
    s.variant = v;
    for (const auto& r : reports) {
      if (r.variant != v) continue;
      ++s.subjects;
      s.mean_acc += r.acc;
      s.mean_mf1 += r.mf1;
      for (int c = 0; c < kNumStages; ++c) s.mean_per_class_f1[c] += r.per_class_f1[c];
      s.mean_ssa_seconds += r.ssa_seconds;
      s.mean_ssp_seconds += r.ssp_seconds;
      s.mean_retained_fraction += r.retained_sequence_fraction;
    }
    if (s.subjects == 0) continue;
    const double n = static_cast<double>(s.subjects);
    s.mean_acc /= n;
    s.mean_mf1 /= n;
    for (auto& f : s.mean_per_class_f1) f /= n;
    s.mean_ssa_seconds /= n;
    s.mean_ssp_seconds /= n;
    s.mean_retained_fraction /= n;
    out.push_back(s);
  }
  return out;
}

namespace {

void check_plan(const dataio::DatasetManifest& manifest, const dataio::FoldPlan& plan) {
  if (plan.folds.empty()) throw Error(ErrorCode::PlanMismatch, "fold plan is empty");
  const auto ids = manifest.subject_ids();
  const std::set<std::string> known(ids.begin(), ids.end());
  std::map<std::string, int> tested;
  for (const auto& fold : plan.folds) {
    for (const auto* group : {&fold.train_ids, &fold.val_ids, &fold.test_ids}) {
      for (const auto& id : *group) {
        if (!known.count(id)) throw Error(ErrorCode::PlanMismatch, "plan names unknown subject " + id);
      }
    }
    for (const auto& id : fold.test_ids) {
      if (std::find(fold.train_ids.begin(), fold.train_ids.end(), id) != fold.train_ids.end() ||
          std::find(fold.val_ids.begin(), fold.val_ids.end(), id) != fold.val_ids.end()) {
        throw Error(ErrorCode::PlanMismatch, "subject " + id + " is both test and train/val in one fold");
      }
      ++tested[id];
    }
    if (fold.train_ids.empty()) throw Error(ErrorCode::PlanMismatch, "a fold has no training subjects");
  }
  for (const auto& id : ids) {
    auto it = tested.find(id);
    if (it == tested.end() || it->second != 1) {
      throw Error(ErrorCode::PlanMismatch, "subject " + id + " must be tested in exactly one fold");
    }
  }
}

std::vector<SleepSequence> load_sequences(const dataio::DatasetManifest& manifest, const std::vector<std::string>& ids,
                                          int L, int stride) {
  std::vector<SleepSequence> out;
  for (const auto& id : ids) {
    const auto rec = dataio::read_subject(manifest.root, id);
    auto seqs = dataio::make_sequences(rec, L, stride);
    std::move(seqs.begin(), seqs.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace

std::vector<FoldReport> run_cv(const dataio::DatasetManifest& manifest, const dataio::FoldPlan& plan,
                               const Hyperparameters& h, const CvOptions& options) {
  validate_hyperparameters(h);
  check_plan(manifest, plan);
  if (options.variants.empty()) throw Error(ErrorCode::InvalidConfig, "no variants requested");

  std::vector<FoldReport> folds;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    FoldReport report;
    report.fold_index = static_cast<int>(f);

    model::ModelConfig cfg = options.model;
    cfg.channels = static_cast<int>(manifest.channels.size());
    cfg.samples = samples_per_epoch(manifest.sample_rate);
    cfg.seq_len = h.L;
    cfg.context_steps = h.T;
    cfg.seed = derive_seed(h.seed, "model:fold" + std::to_string(f));
    auto source = model::make_model(cfg);
    {
      StageTag tag("pretrain:" + std::to_string(f));
      const auto t0 = Clock::now();
      const auto train = load_sequences(manifest, fold.train_ids, h.L, h.effective_pretrain_stride());
      const auto val = load_sequences(manifest, fold.val_ids, h.L, h.L);
      Hyperparameters hf = h;
      hf.seed = derive_seed(h.seed, "pretrain:fold" + std::to_string(f));
      report.pretrain_history = pretrain::pretrain(*source, train, val, hf);
      report.pretrain_seconds = seconds_since(t0);
    }

    std::vector<std::vector<AdaptationReport>> per_subject(fold.test_ids.size());
    parallel_for(fold.test_ids.size(), options.jobs, [&](std::size_t i) {
      SubjectRecording subject = [&] {
        StageTag tag("load:" + std::to_string(f));
        return dataio::read_subject(manifest.root, fold.test_ids[i]);
      }();
      per_subject[i] = run_subject_variants(*source, subject, options.variants, h);
    });
    for (auto& rows : per_subject) std::move(rows.begin(), rows.end(), std::back_inserter(report.reports));
    report.averages = summarize(report.reports);
    folds.push_back(std::move(report));
  }
  if (!options.output_dir.empty()) write_cv_outputs(options.output_dir, folds);
  return folds;
}

void export_embeddings(const model::SscModel& m, const SubjectRecording& subject, const std::filesystem::path& path) {
  const auto& epochs = subject.epochs();
  if (epochs.empty()) throw Error(ErrorCode::EmptyRecording, subject.subject_id() + " has no epochs");
  const int d = m.latent_dim();
  std::ostringstream out;
  out << "epoch,label";
  for (int k = 0; k < d; ++k) out << ",z" << k;
  out << '\n';
  out << std::setprecision(9);

  const std::vector<StageLabel>* labels = subject.has_labels() ? &subject.labels() : nullptr;
  ag::NoGradGuard no_grad;
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < epochs.size(); start += chunk) {
    const std::size_t end = std::min(epochs.size(), start + chunk);
    SleepSequence seq;
    seq.epochs.assign(epochs.begin() + static_cast<std::ptrdiff_t>(start),
                      epochs.begin() + static_cast<std::ptrdiff_t>(end));
    const SleepSequence one[] = {seq};
    const model::Matrix z = m.extract(model::SequenceBatch::from_sequences(one)).value();
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const std::size_t e = start + static_cast<std::size_t>(r);
      out << e << ',';
      if (labels) out << stage_name((*labels)[e]);
      for (int k = 0; k < d; ++k) out << ',' << z(r, k);
      out << '\n';
    }
  }
  dataio::write_file_atomic(path, out.str());
}

std::string reports_to_csv(std::span<const AdaptationReport> reports) {
  std::ostringstream s;
  s << "subject_id,variant,acc,mf1";
  for (StageLabel c : kAllStages) s << ",f1_" << stage_name(c);
  s << ",ssa_seconds,ssp_seconds,eval_seconds,total_seconds,retained_sequence_fraction,epochs_scored\n";
  for (const auto& r : reports) {
    s << r.subject_id << ',' << to_string(r.variant) << ',' << fmt(r.acc) << ',' << fmt(r.mf1);
    for (double f : r.per_class_f1) s << ',' << fmt(f);
    s << ',' << fmt(r.ssa_seconds, 3) << ',' << fmt(r.ssp_seconds, 3) << ',' << fmt(r.eval_seconds, 3) << ','
      << fmt(r.total_seconds, 3) << ',' << fmt(r.retained_sequence_fraction) << ',' << r.epochs_scored << '\n';
  }
  return s.str();
}

std::string summary_text(std::span<const VariantSummary> summary, std::string_view title) {
  std::ostringstream s;
  s << "[" << title << "]\n";
  for (const auto& v : summary) {
    s << to_string(v.variant) << ".subjects=" << v.subjects << '\n'
      << to_string(v.variant) << ".acc=" << fmt(v.mean_acc) << '\n'
      << to_string(v.variant) << ".mf1=" << fmt(v.mean_mf1) << '\n';
    for (int c = 0; c < kNumStages; ++c) {
      s << to_string(v.variant) << ".f1_" << stage_name(stage_from_index(c)) << '=' << fmt(v.mean_per_class_f1[c])
        << '\n';
    }
    s << to_string(v.variant) << ".ssa_seconds=" << fmt(v.mean_ssa_seconds, 3) << '\n'
      << to_string(v.variant) << ".ssp_seconds=" << fmt(v.mean_ssp_seconds, 3) << '\n'
      << to_string(v.variant) << ".retained_fraction=" << fmt(v.mean_retained_fraction) << '\n';
  }
  return s.str();
}

void write_cv_outputs(const std::filesystem::path& dir, std::span<const FoldReport> folds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<AdaptationReport> all;
  for (const auto& f : folds) {
    const std::string stem = "fold_" + std::to_string(f.fold_index);
    dataio::write_file_atomic(dir / (stem + ".csv"), reports_to_csv(f.reports));
    std::string text = summary_text(f.averages, stem);
    text += "pretrain.best_epoch=" + std::to_string(f.pretrain_history.best_epoch) + '\n';
    text += "pretrain.best_val_mf1=" + fmt(f.pretrain_history.best_val_mf1) + '\n';
    text += "pretrain.seconds=" + fmt(f.pretrain_seconds, 3) + '\n';
    dataio::write_file_atomic(dir / (stem + "_summary.txt"), text);
    all.insert(all.end(), f.reports.begin(), f.reports.end());
  }
  dataio::write_file_atomic(dir / "aggregate.csv", reports_to_csv(all));
  dataio::write_file_atomic(dir / "aggregate_summary.txt", summary_text(summarize(all), "aggregate"));
}

// ---------------------------------------------------------------------------

Hyperparameters desk_hyperparameters() {
  Hyperparameters h;
  h.pretrain_epochs = 10;
  h.lr_pretrain = 3e-3;
  h.lr_ssa = 3e-4;
  h.lr_ssp = 3e-4;
  h.batch_size = 8;
  return h;
}

double BenchmarkResult::mean_acc(Variant v) const {
  for (const auto& s : summary) {
    if (s.variant == v) return s.mean_acc;
  }
  throw Error(ErrorCode::InvalidConfig, std::string("variant ") + std::string(to_string(v)) + " was not run");
}

BenchmarkResult run_synthetic_benchmark(const BenchmarkOptions& o) {
  if (o.source_subjects <= o.val_subjects || o.val_subjects < 0 || o.target_subjects < 1) {
    throw Error(ErrorCode::InvalidConfig, "benchmark needs more source than validation subjects and >= 1 target");
  }
  const auto t0 = Clock::now();
  Hyperparameters h = o.h;
  h.seed = o.seed;
  validate_hyperparameters(h);

  auto make = [&](int index, bool shifted) {
    return dataio::generate_synthetic(
        dataio::population_subject_spec(o.seed, index, shifted, o.shift, 1, o.sample_rate), o.epochs_per_subject);
  };

  model::ModelConfig cfg = model::ModelConfig::tiny(1, samples_per_epoch(o.sample_rate));
  cfg.seq_len = h.L;
  cfg.context_steps = h.T;
  cfg.seed = derive_seed(o.seed, "model");
  auto source = model::make_model(cfg);

  BenchmarkResult result;
  {
    StageTag tag("pretrain");
    std::vector<SleepSequence> train;
    std::vector<SleepSequence> val;
    for (int i = 0; i < o.source_subjects; ++i) {
      auto seqs = dataio::make_sequences(make(i, false), h.L,
                                         i < o.source_subjects - o.val_subjects ? h.effective_pretrain_stride() : h.L);
      auto& dst = i < o.source_subjects - o.val_subjects ? train : val;
      std::move(seqs.begin(), seqs.end(), std::back_inserter(dst));
    }
    result.history = pretrain::pretrain(*source, train, val, h);
  }
  for (int j = 0; j < o.target_subjects; ++j) {
    // Targets take indices after the sources so no hypnogram is shared.
    const SubjectRecording target = make(o.source_subjects + j, true);
    auto rows = run_subject_variants(*source, target, o.variants, h);
    std::move(rows.begin(), rows.end(), std::back_inserter(result.reports));
  }
  result.summary = summarize(result.reports);
  result.seconds = seconds_since(t0);
  return result;
}

}  // namespace sfuida::eval
