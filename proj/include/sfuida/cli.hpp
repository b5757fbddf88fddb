#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sfuida/dataio.hpp"

namespace sfuida::cli {

namespace fs = std::filesystem;

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

// Everything a command needs, resolved with precedence
// command-line flag > config file > environment > default.
struct Settings {
  std::string command;  // synth, import, pretrain, adapt, evaluate, export-embeddings
  Hyperparameters h;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.99;

  fs::path data;  // dataset root (SFUIDA_DATA_ROOT)
  fs::path out;
  fs::path source;  // checkpoint
  fs::path save_model;  // adapt: optional adapted checkpoint
  std::string subject;
  std::string variant = "full";  // comma-separated for evaluate
  std::string model = "tiny";    // tiny | reference
  std::string train;             // comma-separated ids
  std::string val;
  int jobs = 1;
  int folds = 10;

  // synth
  int subjects = 10;
  int shifted_subjects = 0;
  std::size_t epochs_per_subject = 800;
  double sample_rate = 100.0;
  int channels = 1;
  dataio::PopulationShift shift;

  // import
  fs::path signal;     // text, one row per sample, one column per channel
  fs::path hypnogram;  // one token per 30-s epoch
  double source_rate = 100.0;
  double bandpass_low = 0.0;  // 0 disables the filter
  double bandpass_high = 0.0;

  bool quiet = false;
};

struct Parsed {
  int exit_code = -1;  // >= 0: stop here with this code (help, usage error)
  Settings settings;
};

// Parses argv-style arguments (without the program name).
Parsed parse_arguments(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int execute(const Settings& s, std::ostream& out, std::ostream& err);

// parse + execute; what main() calls.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sfuida::cli
