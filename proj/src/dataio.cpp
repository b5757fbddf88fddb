#include "sfuida/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "sfuida/access_log.hpp"

namespace sfuida::dataio {

namespace {

constexpr const char* kMetaFile = "meta";
constexpr const char* kSignalFile = "signals.f32le";
constexpr const char* kLabelFile = "labels.u8";
constexpr const char* kManifestFile = "manifest";

[[noreturn]] void io_error(const std::string& what) { throw Error(ErrorCode::IoError, what); }
[[noreturn]] void format_error(const std::string& what) { throw Error(ErrorCode::FormatError, what); }

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) io_error("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) format_error("malformed line in " + path.string() + ": " + t);
    kv[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key,
                        const fs::path& where) {
  auto it = kv.find(key);
  if (it == kv.end()) format_error("missing key '" + key + "' in " + where.string());
  return it->second;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

std::string format_rate(double r) {
  std::ostringstream ss;
  ss.precision(17);
  ss << r;
  return ss.str();
}

struct SubjectMeta {
  std::string subject_id;
  std::size_t num_epochs = 0;
  int channels = 0;
  double sample_rate = 0;
  std::vector<std::string> channel_names;
};

SubjectMeta read_meta(const fs::path& dir) {
  const auto path = dir / kMetaFile;
  const auto kv = read_key_values(path);
  SubjectMeta m;
  try {
    m.subject_id = need(kv, "subject_id", path);
    m.num_epochs = std::stoull(need(kv, "num_epochs", path));
    m.channels = std::stoi(need(kv, "channels", path));
    m.sample_rate = std::stod(need(kv, "sample_rate", path));
  } catch (const std::invalid_argument&) {
    format_error("non-numeric value in " + path.string());
  } catch (const std::out_of_range&) {
    format_error("value out of range in " + path.string());
  }
  if (auto it = kv.find("channel_names"); it != kv.end()) m.channel_names = split(it->second, ',');
  if (m.channels < 1 || m.sample_rate <= 0) format_error("bad shape in " + path.string());
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) io_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) io_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) io_error("rename to " + path.string() + ": " + ec.message());
}

void write_subject(const SubjectRecording& rec, const fs::path& root,
                   const std::vector<std::string>& channel_names) {
  const auto& epochs = rec.epochs();
  if (epochs.empty()) throw Error(ErrorCode::EmptyRecording, rec.subject_id());
  const fs::path dir = root / rec.subject_id();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) io_error("cannot create " + dir.string() + ": " + ec.message());

  const int channels = rec.channels();
  const int samples = rec.samples();
  std::string payload;
  payload.resize(epochs.size() * static_cast<std::size_t>(channels) * samples * sizeof(float));
  char* out = payload.data();
  for (const auto& e : epochs) {
    if (!e->all_finite()) throw Error(ErrorCode::FormatError, "non-finite sample in " + rec.subject_id());
    for (float v : e->data()) {
      const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(v));
      std::memcpy(out, &bits, sizeof bits);
      out += sizeof bits;
    }
  }
  write_file_atomic(dir / kSignalFile, payload);

  if (rec.has_labels()) {
    std::string labels;
    for (auto s : rec.labels()) labels.push_back(static_cast<char>(to_index(s)));
    write_file_atomic(dir / kLabelFile, labels);
  } else {
    fs::remove(dir / kLabelFile, ec);
  }

  std::vector<std::string> names = channel_names;
  if (names.empty()) {
    for (int c = 0; c < channels; ++c) names.push_back("ch" + std::to_string(c));
  }
  if (static_cast<int>(names.size()) != channels) {
    throw Error(ErrorCode::ShapeMismatch, "channel name count differs from channel count");
  }
  std::ostringstream meta;
  meta << "subject_id=" << rec.subject_id() << '\n'
       << "num_epochs=" << epochs.size() << '\n'
       << "channels=" << channels << '\n'
       << "sample_rate=" << format_rate(rec.sample_rate()) << '\n'
       << "channel_names=" << join(names, ',') << '\n';
  write_file_atomic(dir / kMetaFile, meta.str());
}

SubjectRecording read_subject(const fs::path& root, const std::string& subject_id) {
  const fs::path dir = root / subject_id;
  if (!fs::is_directory(dir)) io_error("no subject directory " + dir.string());
  record_access(subject_id, AccessKind::DiskRead);
  const SubjectMeta meta = read_meta(dir);
  if (meta.subject_id != subject_id) {
    format_error("meta subject_id '" + meta.subject_id + "' does not match directory " + subject_id);
  }
  const int samples = samples_per_epoch(meta.sample_rate);
  const std::size_t per_epoch = static_cast<std::size_t>(meta.channels) * samples;

  const std::string payload = read_file(dir / kSignalFile);
  const std::size_t expected = meta.num_epochs * per_epoch * sizeof(float);
  if (payload.size() != expected) {
    format_error("signals for " + subject_id + " hold " + std::to_string(payload.size()) +
                 " bytes, header implies " + std::to_string(expected));
  }
  std::vector<EpochPtr> epochs;
  epochs.reserve(meta.num_epochs);
  const char* in = payload.data();
  for (std::size_t e = 0; e < meta.num_epochs; ++e) {
    std::vector<float> data(per_epoch);
    for (auto& v : data) {
      std::uint32_t bits;
      std::memcpy(&bits, in, sizeof bits);
      in += sizeof bits;
      v = std::bit_cast<float>(to_little_endian(bits));
    }
    epochs.push_back(std::make_shared<const Epoch>(meta.channels, samples, std::move(data)));
  }

  std::optional<std::vector<StageLabel>> labels;
  const fs::path label_path = dir / kLabelFile;
  if (fs::exists(label_path)) {
    const std::string raw = read_file(label_path);
    if (raw.size() != meta.num_epochs) {
      format_error("labels for " + subject_id + " hold " + std::to_string(raw.size()) + " entries, header says " +
                   std::to_string(meta.num_epochs));
    }
    labels.emplace();
    labels->reserve(raw.size());
    for (unsigned char b : raw) {
      if (b >= kNumStages) format_error("label byte " + std::to_string(b) + " out of range in " + subject_id);
      labels->push_back(static_cast<StageLabel>(b));
    }
  }
  if (epochs.empty()) throw Error(ErrorCode::EmptyRecording, subject_id);
  return SubjectRecording(subject_id, meta.sample_rate, std::move(epochs), std::move(labels));
}

std::vector<std::string> DatasetManifest::subject_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.subject_id);
  return ids;
}

void write_manifest(const DatasetManifest& manifest) {
  std::ostringstream out;
  out << "sample_rate=" << format_rate(manifest.sample_rate) << '\n';
  out << "channels=" << join(manifest.channels, ',') << '\n';
  for (const auto& s : manifest.subjects) {
    out << "subject=" << s.subject_id << ',' << s.num_epochs << ',' << (s.has_labels ? 1 : 0) << '\n';
  }
  write_file_atomic(manifest.root / kManifestFile, out.str());
}

DatasetManifest load_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) io_error("dataset root " + root.string() + " is not a directory");
  DatasetManifest m;
  m.root = root;
  const fs::path path = root / kManifestFile;
  if (fs::exists(path)) {
    std::ifstream in(path);
    if (!in) io_error("cannot open " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      const auto t = trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) format_error("malformed manifest line: " + t);
      const std::string key = t.substr(0, eq);
      const std::string value = t.substr(eq + 1);
      if (key == "sample_rate") {
        m.sample_rate = std::stod(value);
      } else if (key == "channels") {
        m.channels = split(value, ',');
      } else if (key == "subject") {
        const auto f = split(value, ',');
        if (f.size() != 3) format_error("manifest subject line needs id,num_epochs,has_labels: " + t);
        m.subjects.push_back({f[0], std::stoull(f[1]), f[2] == "1"});
      }
    }
  } else {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && fs::exists(entry.path() / kMetaFile)) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    bool first = true;
    for (const auto& d : dirs) {
      const auto meta = read_meta(d);
      if (first) {
        m.sample_rate = meta.sample_rate;
        m.channels = meta.channel_names;
        first = false;
      }
      m.subjects.push_back({meta.subject_id, meta.num_epochs, fs::exists(d / kLabelFile)});
    }
  }

  std::set<std::string> seen;
  for (const auto& s : m.subjects) {
    if (!seen.insert(s.subject_id).second) format_error("duplicate subject id " + s.subject_id);
    const fs::path dir = root / s.subject_id;
    if (!fs::exists(dir / kMetaFile) || !fs::exists(dir / kSignalFile)) {
      io_error("missing files for subject " + s.subject_id);
    }
    const auto meta = read_meta(dir);
    if (meta.num_epochs != s.num_epochs) format_error("epoch count mismatch for " + s.subject_id);
    const auto bytes = fs::file_size(dir / kSignalFile);
    const auto expected =
        meta.num_epochs * static_cast<std::uintmax_t>(meta.channels) * samples_per_epoch(meta.sample_rate) * 4;
    if (bytes != expected) format_error("signal size mismatch for " + s.subject_id);
    if (s.has_labels != fs::exists(dir / kLabelFile)) format_error("label presence mismatch for " + s.subject_id);
  }
  return m;
}

// ---------------------------------------------------------------------------

std::vector<SleepSequence> make_sequences(const SubjectRecording& rec, int L, int stride) {
  if (L < 1 || stride < 1) throw Error(ErrorCode::InvalidConfig, "make_sequences needs L >= 1 and stride >= 1");
  if (rec.num_epochs() == 0) throw Error(ErrorCode::EmptyRecording, rec.subject_id());
  const auto& epochs = rec.epochs();
  const std::vector<StageLabel>* labels = rec.has_labels() ? &rec.labels() : nullptr;
  std::vector<SleepSequence> out;
  const auto n = epochs.size();
  for (std::size_t start = 0; start + L <= n; start += stride) {
    SleepSequence seq;
    seq.epochs.assign(epochs.begin() + static_cast<std::ptrdiff_t>(start),
                      epochs.begin() + static_cast<std::ptrdiff_t>(start + L));
    if (labels) {
      seq.labels.emplace(labels->begin() + static_cast<std::ptrdiff_t>(start),
                         labels->begin() + static_cast<std::ptrdiff_t>(start + L));
    }
    seq.origin = {rec.subject_id(), start};
    out.push_back(std::move(seq));
  }
  return out;
}

FoldPlan plan_folds(const std::vector<std::string>& subject_ids, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw Error(ErrorCode::InvalidConfig, "n_folds >= 2");
  if (static_cast<int>(subject_ids.size()) < n_folds) {
    throw Error(ErrorCode::TooFewSubjects,
                std::to_string(subject_ids.size()) + " subjects for " + std::to_string(n_folds) + " folds");
  }
  std::set<std::string> unique(subject_ids.begin(), subject_ids.end());
  if (unique.size() != subject_ids.size()) throw Error(ErrorCode::InvalidConfig, "duplicate subject ids");

  // Fisher-Yates with an explicit engine so the plan does not depend on the
  // standard library's shuffle implementation.
  std::vector<std::string> ids(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(ids[i - 1], ids[j]);
  }

  const std::size_t k = static_cast<std::size_t>(n_folds);
  std::vector<std::vector<std::string>> groups(k);
  for (std::size_t i = 0; i < ids.size(); ++i) groups[i % k].push_back(ids[i]);

  FoldPlan plan;
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    fold.test_ids = groups[f];
    fold.val_ids = groups[(f + 1) % k];
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f || g == (f + 1) % k) continue;
      fold.train_ids.insert(fold.train_ids.end(), groups[g].begin(), groups[g].end());
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

// ---------------------------------------------------------------------------

TransitionMatrix default_transition_matrix() {
  TransitionMatrix p;
  // rows: from W, N1, N2, N3, REM
  p << 0.90, 0.08, 0.01, 0.00, 0.01,
       0.05, 0.70, 0.22, 0.00, 0.03,
       0.01, 0.03, 0.86, 0.06, 0.04,
       0.01, 0.00, 0.10, 0.89, 0.00,
       0.02, 0.03, 0.05, 0.00, 0.90;
  return p;
}

Eigen::Matrix<double, 1, kNumStages> stationary_distribution(const TransitionMatrix& p) {
  Eigen::Matrix<double, 1, kNumStages> pi = Eigen::Matrix<double, 1, kNumStages>::Constant(1.0 / kNumStages);
  for (int it = 0; it < 100000; ++it) {
    Eigen::Matrix<double, 1, kNumStages> next = pi * p;
    const double delta = (next - pi).cwiseAbs().sum();
    pi = next;
    if (delta < 1e-15) break;
  }
  return pi / pi.sum();
}

namespace {

struct Component {
  double freq;
  double amp;
};

// Stage waveform family: W 10 Hz alpha, N1 7 Hz theta, N2 5 Hz background
// with 13 Hz spindle bursts, N3 1.5 Hz high-amplitude delta, REM 6 Hz
// low-amplitude theta.
std::vector<Component> stage_components(StageLabel s) {
  switch (s) {
    case StageLabel::W: return {{10.0, 1.0}, {20.0, 0.3}};
    case StageLabel::N1: return {{7.0, 1.0}, {2.0, 0.3}};
    case StageLabel::N2: return {{5.0, 1.0}};
    case StageLabel::N3: return {{1.5, 3.0}, {4.0, 0.3}};
    case StageLabel::REM: return {{6.0, 0.6}, {20.0, 0.2}};
  }
  return {};
}

void check_spec(const SyntheticSubjectSpec& spec) {
  for (int r = 0; r < kNumStages; ++r) {
    if ((spec.stage_transition_matrix.row(r).array() < 0.0).any()) {
      throw Error(ErrorCode::InvalidSpec, "negative transition probability");
    }
    if (std::abs(spec.stage_transition_matrix.row(r).sum() - 1.0) > 1e-9) {
      throw Error(ErrorCode::InvalidSpec, "transition row " + std::to_string(r) + " does not sum to 1");
    }
  }
  if (!(spec.noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidSpec, "noise_sigma >= 0");
  if (spec.channels < 1 || spec.sample_rate <= 0) throw Error(ErrorCode::InvalidSpec, "bad channel/rate");
}

}  // namespace

SubjectRecording generate_synthetic(const SyntheticSubjectSpec& spec, std::size_t num_epochs) {
  check_spec(spec);
  if (num_epochs < 1) throw Error(ErrorCode::InvalidSpec, "num_epochs >= 1");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::vector<StageLabel> labels(num_epochs);
  int state = to_index(spec.initial_stage);
  for (std::size_t i = 0; i < num_epochs; ++i) {
    labels[i] = static_cast<StageLabel>(state);
    const double u = unit(rng);
    double acc = 0.0;
    int next = kNumStages - 1;
    for (int j = 0; j < kNumStages; ++j) {
      acc += spec.stage_transition_matrix(state, j);
      if (u < acc) {
        next = j;
        break;
      }
    }
    state = next;
  }

  const int samples = samples_per_epoch(spec.sample_rate);
  const double dt = 1.0 / spec.sample_rate;
  std::vector<EpochPtr> epochs;
  epochs.reserve(num_epochs);
  for (std::size_t i = 0; i < num_epochs; ++i) {
    Epoch epoch(spec.channels, samples);
    const auto comps = stage_components(labels[i]);
    // Per-epoch variability shared across channels.
    std::vector<double> freq(comps.size()), amp(comps.size()), phase(comps.size());
    for (std::size_t c = 0; c < comps.size(); ++c) {
      freq[c] = std::max(0.2, comps[c].freq + spec.frequency_shift + 0.15 * gauss(rng));
      amp[c] = comps[c].amp * (0.8 + 0.4 * unit(rng));
      phase[c] = two_pi * unit(rng);
    }
    // N2 spindles: two ~1.5 s bursts at random onsets.
    std::vector<double> burst_onsets;
    if (labels[i] == StageLabel::N2) {
      for (int b = 0; b < 2; ++b) burst_onsets.push_back(unit(rng) * (kEpochSeconds - 1.5));
    }
    const double spindle_freq = 13.0 + spec.frequency_shift;
    for (int ch = 0; ch < spec.channels; ++ch) {
      const double mix = 1.0 - 0.2 * ch;
      const double ch_phase = 0.7 * ch;
      for (int s = 0; s < samples; ++s) {
        const double t = s * dt;
        double v = 0.0;
        for (std::size_t c = 0; c < comps.size(); ++c) v += amp[c] * std::sin(two_pi * freq[c] * t + phase[c] + ch_phase);
        for (double onset : burst_onsets) {
          if (t >= onset && t < onset + 1.5) {
            const double env = std::sin(std::numbers::pi * (t - onset) / 1.5);
            v += 1.2 * env * std::sin(two_pi * spindle_freq * t);
          }
        }
        v *= spec.amplitude_gain * mix;
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * gauss(rng);
        epoch.at(ch, s) = static_cast<float>(v);
      }
    }
    epochs.push_back(std::make_shared<const Epoch>(std::move(epoch)));
  }
  return SubjectRecording(spec.subject_id, spec.sample_rate, std::move(epochs), std::move(labels));
}

SyntheticSubjectSpec population_subject_spec(std::uint64_t seed, int index, bool shifted,
                                             const PopulationShift& shift, int channels, double sample_rate) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SyntheticSubjectSpec spec;
  spec.subject_id = (shifted ? "t" : "s") + std::string(index < 10 ? "0" : "") + std::to_string(index);
  spec.seed = derive_seed(seed, "subject-" + std::to_string(index));
  spec.stage_transition_matrix = default_transition_matrix();
  spec.channels = channels;
  spec.sample_rate = sample_rate;
  if (shifted) {
    spec.frequency_shift = shift.target_frequency_shift * (0.85 + 0.3 * unit(rng));
    spec.amplitude_gain = 1.5 + unit(rng);
    spec.noise_sigma = shift.target_noise_sigma * spec.amplitude_gain;
  } else {
    spec.frequency_shift = shift.source_frequency_jitter * (2.0 * unit(rng) - 1.0);
    spec.amplitude_gain = 0.8 + 0.45 * unit(rng);
    spec.noise_sigma = shift.source_noise_sigma * spec.amplitude_gain;
  }
  return spec;
}

// ---------------------------------------------------------------------------

std::optional<StageLabel> map_hypnogram_token(std::string_view raw) {
  std::string token;
  for (char c : raw) {
    if (c == ' ' || c == '\t' || c == '\r') continue;
    token.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  // Common prefixes in exported hypnograms.
  for (std::string_view prefix : {"SLEEPSTAGE", "SLEEP_STAGE_", "STAGE"}) {
    if (token.rfind(prefix, 0) == 0) token = token.substr(prefix.size());
  }
  if (token == "W" || token == "WAKE" || token == "0") return StageLabel::W;
  if (token == "N1" || token == "S1" || token == "1") return StageLabel::N1;
  if (token == "N2" || token == "S2" || token == "2") return StageLabel::N2;
  if (token == "N3" || token == "S3" || token == "S4" || token == "N4" || token == "3" || token == "4") {
    return StageLabel::N3;
  }
  if (token == "R" || token == "REM" || token == "5") return StageLabel::REM;
  return std::nullopt;  // MOVEMENT, M, ?, UNKNOWN, ...
}

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;

  std::vector<double> run(const std::vector<double>& x) const {
    std::vector<double> y(x.size());
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = b0 * x[i] + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = x[i];
      y2 = y1;
      y1 = v;
      y[i] = v;
    }
    return y;
  }
};

// RBJ audio-EQ cookbook coefficients, Q = 1/sqrt(2).
Biquad butterworth(double cutoff, double rate, bool highpass) {
  const double w0 = 2.0 * std::numbers::pi * cutoff / rate;
  constexpr double q_factor = 1.0 / std::numbers::sqrt2;
  const double alpha = std::sin(w0) / (2.0 * q_factor);
  const double cw = std::cos(w0);
  const double a0 = 1.0 + alpha;
  Biquad q{};
  if (highpass) {
    q.b0 = (1.0 + cw) / 2.0 / a0;
    q.b1 = -(1.0 + cw) / a0;
    q.b2 = q.b0;
  } else {
    q.b0 = (1.0 - cw) / 2.0 / a0;
    q.b1 = (1.0 - cw) / a0;
    q.b2 = q.b0;
  }
  q.a1 = -2.0 * cw / a0;
  q.a2 = (1.0 - alpha) / a0;
  return q;
}

std::vector<double> filtfilt(const Biquad& q, std::vector<double> x) {
  x = q.run(x);
  std::reverse(x.begin(), x.end());
  x = q.run(x);
  std::reverse(x.begin(), x.end());
  return x;
}

}  // namespace

std::vector<float> bandpass(const std::vector<float>& x, double sample_rate, double low_hz, double high_hz) {
  if (!(low_hz > 0 && high_hz > low_hz && high_hz < sample_rate / 2)) {
    throw Error(ErrorCode::InvalidConfig, "band-pass needs 0 < low < high < Nyquist");
  }
  std::vector<double> v(x.begin(), x.end());
  v = filtfilt(butterworth(low_hz, sample_rate, true), std::move(v));
  v = filtfilt(butterworth(high_hz, sample_rate, false), std::move(v));
  return {v.begin(), v.end()};
}

std::vector<float> resample(const std::vector<float>& x, double from_rate, double to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw Error(ErrorCode::InvalidConfig, "sample rates must be positive");
  if (from_rate == to_rate || x.empty()) return x;
  std::vector<double> v(x.begin(), x.end());
  if (to_rate < from_rate) v = filtfilt(butterworth(0.45 * to_rate, from_rate, false), std::move(v));
  const auto n_out = static_cast<std::size_t>(std::floor(static_cast<double>(x.size()) * to_rate / from_rate));
  std::vector<float> out(n_out);
  const double step = from_rate / to_rate;
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = static_cast<float>(v[i0] * (1.0 - frac) + v[i1] * frac);
  }
  return out;
}

SubjectRecording import_continuous(const std::vector<std::vector<float>>& signal,
                                   const std::vector<std::string>& hypnogram, const ImportOptions& opts) {
  if (signal.empty() || static_cast<int>(signal.size()) != opts.channels) {
    throw Error(ErrorCode::ShapeMismatch, "signal channel count differs from options");
  }
  std::vector<std::vector<float>> chans;
  for (const auto& ch : signal) {
    std::vector<float> v = ch;
    if (opts.bandpass_hz) v = bandpass(v, opts.source_rate, opts.bandpass_hz->first, opts.bandpass_hz->second);
    chans.push_back(resample(v, opts.source_rate, opts.target_rate));
  }
  const int samples = samples_per_epoch(opts.target_rate);
  std::size_t available = chans.front().size() / static_cast<std::size_t>(samples);
  for (const auto& c : chans) available = std::min(available, c.size() / static_cast<std::size_t>(samples));
  const std::size_t n = std::min(available, hypnogram.size());

  std::vector<EpochPtr> epochs;
  std::vector<StageLabel> labels;
  for (std::size_t e = 0; e < n; ++e) {
    const auto stage = map_hypnogram_token(hypnogram[e]);
    if (!stage) continue;
    Epoch epoch(opts.channels, samples);
    for (int c = 0; c < opts.channels; ++c) {
      for (int s = 0; s < samples; ++s) epoch.at(c, s) = chans[c][e * samples + s];
    }
    epochs.push_back(std::make_shared<const Epoch>(std::move(epoch)));
    labels.push_back(*stage);
  }
  if (epochs.empty()) throw Error(ErrorCode::EmptyRecording, "no scorable epochs for " + opts.subject_id);
  return SubjectRecording(opts.subject_id, opts.target_rate, std::move(epochs), std::move(labels));
}

}  // namespace sfuida::dataio
