#include "sfuida/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sfuida/dataio.hpp"
#include "sfuida/evalharness.hpp"
#include "sfuida/model.hpp"
#include "sfuida/pretrain.hpp"

namespace sfuida::cli {

namespace {

// Bad invocation discovered after parsing (missing path, empty selection...).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void require_path(const fs::path& p, const char* flag, const char* what) {
  if (p.empty()) throw UsageError(std::string(flag) + " is required (" + what + ")");
  if (!fs::exists(p)) throw UsageError(std::string(flag) + ": " + what + " '" + p.string() + "' does not exist");
}

void require_value(const std::string& v, const char* flag) {
  if (v.empty()) throw UsageError(std::string(flag) + " is required");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  dataio::write_file_atomic(path, text);
}

model::ModelConfig model_config(const Settings& s, int channels, int samples) {
  model::ModelConfig c;
  if (s.model == "tiny") {
    c = model::ModelConfig::tiny(channels, samples);
  } else if (s.model == "reference") {
    c = model::ModelConfig::reference();
    c.channels = channels;
    c.samples = samples;
  } else {
    throw UsageError("--model must be 'tiny' or 'reference', got '" + s.model + "'");
  }
  c.seq_len = s.h.L;
  c.context_steps = s.h.T;
  c.seed = derive_seed(s.h.seed, "model");
  return c;
}

dataio::DatasetManifest open_dataset(const Settings& s) {
  require_path(s.data, "--data", "dataset root");
  return dataio::load_manifest(s.data);
}

std::unique_ptr<model::SscModel> open_checkpoint(const Settings& s) {
  require_path(s.source, "--source", "checkpoint");
  auto m = model::load_checkpoint(s.source);
  if (m->num_heads() != s.h.K()) {
    throw UsageError("--source: checkpoint has " + std::to_string(m->num_heads()) + " prediction heads but L - T = " +
                     std::to_string(s.h.K()));
  }
  return m;
}

void require_subject(const dataio::DatasetManifest& m, const std::string& id) {
  const auto ids = m.subject_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
    throw UsageError("--subject: '" + id + "' is not in the dataset");
  }
}

std::vector<SleepSequence> sequences_of(const dataio::DatasetManifest& m, const std::vector<std::string>& ids,
                                        int L, int stride) {
  std::vector<SleepSequence> out;
  for (const auto& id : ids) {
    auto seqs = dataio::make_sequences(dataio::read_subject(m.root, id), L, stride);
    std::move(seqs.begin(), seqs.end(), std::back_inserter(out));
  }
  return out;
}

// --- commands --------------------------------------------------------------

int cmd_synth(const Settings& s, std::ostream& out) {
  if (s.subjects < 1) throw UsageError("--subjects must be at least 1");
  if (s.shifted_subjects < 0 || s.shifted_subjects > s.subjects) {
    throw UsageError("--shifted-subjects must lie in [0, --subjects]");
  }
  if (s.epochs_per_subject < 1) throw UsageError("--epochs-per-subject must be at least 1");
  if (s.channels < 1) throw UsageError("--channels must be at least 1");
  if (s.data.empty()) throw UsageError("--data is required (output dataset root)");

  dataio::DatasetManifest manifest;
  manifest.root = s.data;
  manifest.sample_rate = s.sample_rate;
  for (int c = 0; c < s.channels; ++c) manifest.channels.push_back("ch" + std::to_string(c));
  fs::create_directories(s.data);
  const int sources = s.subjects - s.shifted_subjects;
  for (int i = 0; i < s.subjects; ++i) {
    const bool shifted = i >= sources;
    const auto spec =
        dataio::population_subject_spec(s.h.seed, i, shifted, s.shift, s.channels, s.sample_rate);
    const auto rec = dataio::generate_synthetic(spec, s.epochs_per_subject);
    dataio::write_subject(rec, s.data, manifest.channels);
    manifest.subjects.push_back({rec.subject_id(), rec.num_epochs(), true});
  }
  dataio::write_manifest(manifest);
  if (!s.quiet) {
    out << "wrote " << manifest.subjects.size() << " subjects (" << sources << " source, " << s.shifted_subjects
        << " shifted) x " << s.epochs_per_subject << " epochs at " << s.sample_rate << " Hz to " << s.data.string()
        << '\n';
  }
  return kOk;
}

std::vector<std::vector<float>> read_signal_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::vector<std::vector<float>> channels;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    std::vector<float> values;
    for (float v; row >> v;) values.push_back(v);
    if (values.empty()) continue;
    if (channels.empty()) channels.resize(values.size());
    if (values.size() != channels.size()) {
      throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(line_no) + " has " +
                                              std::to_string(values.size()) + " columns, expected " +
                                              std::to_string(channels.size()));
    }
    for (std::size_t c = 0; c < values.size(); ++c) channels[c].push_back(values[c]);
  }
  if (channels.empty()) throw Error(ErrorCode::EmptyRecording, path.string() + " holds no samples");
  return channels;
}

int cmd_import(const Settings& s, std::ostream& out) {
  require_path(s.signal, "--signal", "signal file");
  require_path(s.hypnogram, "--hypnogram", "hypnogram file");
  require_value(s.subject, "--subject");
  if (s.data.empty()) throw UsageError("--data is required (dataset root)");
  const auto signal = read_signal_text(s.signal);
  std::vector<std::string> tokens;
  {
    std::ifstream in(s.hypnogram);
    for (std::string t; in >> t;) tokens.push_back(t);
  }
  dataio::ImportOptions opt;
  opt.subject_id = s.subject;
  opt.source_rate = s.source_rate;
  opt.channels = static_cast<int>(signal.size());
  opt.target_rate = s.sample_rate;
  if (s.bandpass_low > 0.0 || s.bandpass_high > 0.0) opt.bandpass_hz = {s.bandpass_low, s.bandpass_high};
  const auto rec = dataio::import_continuous(signal, tokens, opt);

  fs::create_directories(s.data);
  std::vector<std::string> names;
  for (std::size_t c = 0; c < signal.size(); ++c) names.push_back("ch" + std::to_string(c));
  dataio::write_subject(rec, s.data, names);
  // Rebuild the manifest from disk so it lists the new subject.
  fs::remove(s.data / "manifest");
  dataio::write_manifest(dataio::load_manifest(s.data));
  if (!s.quiet) out << "imported " << rec.subject_id() << ": " << rec.num_epochs() << " epochs\n";
  return kOk;
}

int cmd_pretrain(const Settings& s, std::ostream& out) {
  const auto manifest = open_dataset(s);
  if (s.out.empty()) throw UsageError("--out is required (checkpoint path)");
  std::vector<std::string> val = split_list(s.val);
  std::vector<std::string> train = split_list(s.train);
  if (train.empty()) {
    for (const auto& e : manifest.subjects) {
      if (e.has_labels && std::find(val.begin(), val.end(), e.subject_id) == val.end()) train.push_back(e.subject_id);
    }
  }
  if (train.empty()) throw UsageError("no labeled training subjects (see --train)");
  for (const auto& id : train) require_subject(manifest, id);
  for (const auto& id : val) require_subject(manifest, id);

  auto m = model::make_model(model_config(s, static_cast<int>(manifest.channels.size()),
                                          samples_per_epoch(manifest.sample_rate)));
  const auto train_seqs = sequences_of(manifest, train, s.h.L, s.h.effective_pretrain_stride());
  const auto val_seqs = sequences_of(manifest, val, s.h.L, s.h.L);
  Hyperparameters h = s.h;
  h.seed = derive_seed(s.h.seed, "pretrain");
  const auto history = pretrain::pretrain(*m, train_seqs, val_seqs, h);
  if (s.out.has_parent_path()) fs::create_directories(s.out.parent_path());
  model::save_checkpoint(s.out, *m);
  if (!s.quiet) {
    out << history.to_csv();
    out << "best_epoch=" << history.best_epoch << " best_val_mf1=" << history.best_val_mf1 << '\n';
    out << "checkpoint=" << s.out.string() << '\n';
  }
  return kOk;
}

int cmd_adapt(const Settings& s, std::ostream& out) {
  auto source = open_checkpoint(s);
  const auto manifest = open_dataset(s);
  require_value(s.subject, "--subject");
  require_subject(manifest, s.subject);
  const auto variant = eval::parse_variant(s.variant);
  if (!variant) throw UsageError("--variant: unknown variant '" + s.variant + "' (so, ssa, ssp, full)");
  const auto subject = dataio::read_subject(manifest.root, s.subject);
  std::unique_ptr<model::SscModel> adapted;
  const auto report = eval::run_subject(*source, subject, *variant, s.h, s.save_model.empty() ? nullptr : &adapted);
  const eval::AdaptationReport one[] = {report};
  const std::string csv = eval::reports_to_csv(one);
  if (s.out.empty()) {
    out << csv;
  } else {
    write_text(s.out, csv);
    if (!s.quiet) out << "report=" << s.out.string() << '\n';
  }
  if (!s.save_model.empty()) {
    if (s.save_model.has_parent_path()) fs::create_directories(s.save_model.parent_path());
    model::save_checkpoint(s.save_model, *adapted);
  }
  return kOk;
}

int cmd_evaluate(const Settings& s, std::ostream& out) {
  const auto manifest = open_dataset(s);
  eval::CvOptions opt;
  opt.variants.clear();
  for (const auto& name : split_list(s.variant)) {
    const auto v = eval::parse_variant(name);
    if (!v) throw UsageError("--variant: unknown variant '" + name + "'");
    opt.variants.push_back(*v);
  }
  if (opt.variants.empty()) throw UsageError("--variant selects nothing");
  if (s.jobs < 1) throw UsageError("--jobs must be at least 1");
  opt.jobs = s.jobs;
  opt.output_dir = s.out;
  opt.model = model_config(s, static_cast<int>(manifest.channels.size()), samples_per_epoch(manifest.sample_rate));
  const auto plan = dataio::plan_folds(manifest.subject_ids(), s.folds, s.h.seed);
  const auto folds = eval::run_cv(manifest, plan, s.h, opt);
  if (!s.quiet) {
    std::vector<eval::AdaptationReport> all;
    for (const auto& f : folds) all.insert(all.end(), f.reports.begin(), f.reports.end());
    out << eval::summary_text(eval::summarize(all), "aggregate");
  }
  return kOk;
}

int cmd_export(const Settings& s, std::ostream& out) {
  auto m = open_checkpoint(s);
  const auto manifest = open_dataset(s);
  if (s.out.empty()) throw UsageError("--out is required (output directory)");
  std::vector<std::string> ids;
  if (s.subject.empty()) {
    ids = manifest.subject_ids();
  } else {
    require_subject(manifest, s.subject);
    ids = {s.subject};
  }
  fs::create_directories(s.out);
  for (const auto& id : ids) {
    eval::export_embeddings(*m, dataio::read_subject(manifest.root, id), s.out / (id + ".csv"));
  }
  if (!s.quiet) out << "exported " << ids.size() << " subject(s) to " << s.out.string() << '\n';
  return kOk;
}

bool is_config_error(ErrorCode c) {
  return c == ErrorCode::InvalidConfig || c == ErrorCode::PlanMismatch || c == ErrorCode::TooFewSubjects;
}

}  // namespace

Parsed parse_arguments(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Parsed parsed;
  Settings& s = parsed.settings;
  Hyperparameters& h = s.h;

  CLI::App app{"Source-free per-subject adaptation for sleep staging", "sfuida"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "key=value configuration file (flags override it)");
  app.allow_config_extras(false);
  app.require_subcommand(1, 1);
  app.fallthrough();

  const std::string hp = "Hyperparameters";
  app.add_option("-L,--seq_len", h.L, "sequence length L")->group(hp);
  app.add_option("-T,--context_steps", h.T, "context steps T (K = L - T heads)")->group(hp);
  app.add_option("--pretrain_epochs,--pretrain-epochs", h.pretrain_epochs)->group(hp);
  app.add_option("--ssa_epochs,--ssa-epochs", h.ssa_epochs)->group(hp);
  app.add_option("--ssp_epochs,--ssp-epochs", h.ssp_epochs)->group(hp);
  app.add_option("--lr_pretrain,--lr-pretrain", h.lr_pretrain)->group(hp);
  app.add_option("--lr_ssa,--lr-ssa", h.lr_ssa)->group(hp);
  app.add_option("--lr_ssp,--lr-ssp", h.lr_ssp)->group(hp);
  app.add_option("--alpha", h.alpha, "EMA teacher momentum")->group(hp);
  app.add_option("--xi", h.xi, "pseudo-label confidence threshold (strict)")->group(hp);
  app.add_option("--n_c,--n-c", h.n_c, "confident epochs needed to keep a sequence")->group(hp);
  app.add_option("--batch_size,--batch-size", h.batch_size)->group(hp);
  app.add_option("--adam_beta1,--adam-beta1", s.adam_beta1)->group(hp);
  app.add_option("--adam_beta2,--adam-beta2", s.adam_beta2)->group(hp);
  app.add_option("--weight_decay,--weight-decay", h.weight_decay)->group(hp);
  app.add_option("--pretrain_stride,--pretrain-stride", h.pretrain_stride, "0 means L")->group(hp);
  app.add_flag("--soft_pseudo_labels,--soft-pseudo-labels", h.soft_pseudo_labels)->group(hp);
  app.add_option("--seed", h.seed, "global seed; every stage derives its stream from it");

  app.add_option("--data", s.data, "dataset root")->envname("SFUIDA_DATA_ROOT");
  app.add_option("--out", s.out, "output file or directory");
  app.add_option("--source", s.source, "model checkpoint");
  app.add_option("--save_model,--save-model", s.save_model, "adapt: also write the adapted checkpoint");
  app.add_option("--subject", s.subject, "subject id");
  app.add_option("--variant", s.variant, "so | ssa | ssp | full (evaluate: comma list)");
  app.add_option("--model", s.model, "tiny | reference");
  app.add_option("--train", s.train, "pretrain: comma-separated training subjects (default: all labeled)");
  app.add_option("--val", s.val, "pretrain: comma-separated validation subjects");
  app.add_option("--jobs", s.jobs, "evaluate: subjects adapted in parallel");
  app.add_option("--folds", s.folds, "evaluate: cross-validation folds");
  app.add_flag("--quiet", s.quiet, "suppress summaries");

  const std::string sy = "Synthetic data";
  app.add_option("--subjects", s.subjects)->group(sy);
  app.add_option("--shifted_subjects,--shifted-subjects", s.shifted_subjects, "how many of them are shifted")->group(sy);
  app.add_option("--epochs_per_subject,--epochs-per-subject", s.epochs_per_subject)->group(sy);
  app.add_option("--sample_rate,--sample-rate", s.sample_rate, "Hz (import: target rate)")->group(sy);
  app.add_option("--channels", s.channels)->group(sy);
  app.add_option("--source_frequency_jitter,--source-frequency-jitter", s.shift.source_frequency_jitter)->group(sy);
  app.add_option("--target_frequency_shift,--target-frequency-shift", s.shift.target_frequency_shift)->group(sy);
  app.add_option("--target_noise_sigma,--target-noise-sigma", s.shift.target_noise_sigma)->group(sy);
  app.add_option("--source_noise_sigma,--source-noise-sigma", s.shift.source_noise_sigma)->group(sy);

  const std::string im = "Import";
  app.add_option("--signal", s.signal, "text samples, one row per sample, one column per channel")->group(im);
  app.add_option("--hypnogram", s.hypnogram, "one stage token per 30-s epoch")->group(im);
  app.add_option("--source_rate,--source-rate", s.source_rate, "Hz of --signal")->group(im);
  app.add_option("--bandpass_low,--bandpass-low", s.bandpass_low, "Hz, 0 = off")->group(im);
  app.add_option("--bandpass_high,--bandpass-high", s.bandpass_high, "Hz, 0 = off")->group(im);

  for (const auto& [name, about] : std::vector<std::pair<const char*, const char*>>{
           {"synth", "write a synthetic population dataset"},
           {"import", "convert a continuous recording and hypnogram into a subject"},
           {"pretrain", "supervised source training; writes a checkpoint"},
           {"adapt", "adapt a checkpoint to one subject and report"},
           {"evaluate", "k-fold cross-validation over all variants"},
           {"export-embeddings", "write per-epoch latent vectors"}}) {
    app.add_subcommand(name, about);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    parsed.exit_code = code == 0 ? kOk : kUsageError;
    return parsed;
  }
  s.command = app.get_subcommands().front()->get_name();
  h.adam_betas = {s.adam_beta1, s.adam_beta2};
  try {
    validate_hyperparameters(h);
  } catch (const Error& e) {
    err << "configuration error: " << e.what() << '\n';
    parsed.exit_code = kUsageError;
  }
  return parsed;
}

int execute(const Settings& s, std::ostream& out, std::ostream& err) {
  try {
    if (s.command == "synth") return cmd_synth(s, out);
    if (s.command == "import") return cmd_import(s, out);
    if (s.command == "pretrain") return cmd_pretrain(s, out);
    if (s.command == "adapt") return cmd_adapt(s, out);
    if (s.command == "evaluate") return cmd_evaluate(s, out);
    if (s.command == "export-embeddings") return cmd_export(s, out);
    err << "unknown command '" << s.command << "'\n";
    return kUsageError;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return is_config_error(e.code()) ? kUsageError : kRuntimeError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Parsed p = parse_arguments(args, out, err);
  if (p.exit_code >= 0) return p.exit_code;
  return execute(p.settings, out, err);
}

}  // namespace sfuida::cli
