#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "sfuida/autograd.hpp"
#include "sfuida/core.hpp"
#include "sfuida/dataio.hpp"
#include "sfuida/model.hpp"

namespace testing {

using sfuida::ag::Matrix;
using sfuida::ag::Var;

inline Matrix random_matrix(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct GradCheck {
  double worst_relative = 0.0;
  std::string worst_name;
};

// Compares backprop gradients of `loss()` w.r.t. each input against central
// differences. Relative error is per tensor: |g - n| / max(|g|, |n|, floor).
// At most `max_probes` coordinates per tensor are probed.
inline GradCheck check_gradients(const std::function<Var()>& loss, std::vector<std::pair<std::string, Var>> inputs,
                                 double step = 1e-5, int max_probes = 40, double floor = 1e-8) {
  for (auto& [name, v] : inputs) v.zero_grad();
  const Var l = loss();
  sfuida::ag::backward(l);
  GradCheck out;
  std::mt19937_64 rng(17);
  for (auto& [name, v] : inputs) {
    const Matrix analytic = v.grad();
    const Eigen::Index n = v.value().size();
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    if (n > max_probes) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(max_probes));
    }
    Eigen::VectorXd a(static_cast<Eigen::Index>(coords.size()));
    Eigen::VectorXd numeric(static_cast<Eigen::Index>(coords.size()));
    for (std::size_t j = 0; j < coords.size(); ++j) {
      double& x = v.mutable_value().data()[coords[j]];
      const double saved = x;
      x = saved + step;
      const double up = loss().item();
      x = saved - step;
      const double down = loss().item();
      x = saved;
      numeric[static_cast<Eigen::Index>(j)] = (up - down) / (2 * step);
      a[static_cast<Eigen::Index>(j)] = analytic.data()[coords[j]];
    }
    const double denom = std::max({a.norm(), numeric.norm(), floor});
    const double rel = (a - numeric).norm() / denom;
    if (rel > out.worst_relative) {
      out.worst_relative = rel;
      out.worst_name = name;
    }
  }
  return out;
}

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("sfuida_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Small labeled subject from the synthetic generator.
inline sfuida::SubjectRecording small_subject(const std::string& id, std::size_t epochs, std::uint64_t seed,
                                              double sample_rate = 100.0, int channels = 1) {
  sfuida::dataio::SyntheticSubjectSpec spec;
  spec.subject_id = id;
  spec.seed = seed;
  spec.stage_transition_matrix = sfuida::dataio::default_transition_matrix();
  spec.noise_sigma = 0.2;
  spec.sample_rate = sample_rate;
  spec.channels = channels;
  return sfuida::dataio::generate_synthetic(spec, epochs);
}

// Micro model for 2 Hz epochs (60 samples); fast enough for whole pipelines.
inline sfuida::model::ModelConfig micro_config(int L = 6, int T = 4, int channels = 1) {
  sfuida::model::ModelConfig c;
  c.channels = channels;
  c.samples = 60;
  c.conv1_filters = 4;
  c.conv1_kernel = 8;
  c.conv1_stride = 4;
  c.conv2_filters = 4;
  c.conv2_kernel = 3;
  c.conv2_stride = 2;
  c.latent_dim = 4;
  c.hidden_dim = 3;
  c.context_dim = 4;
  c.ffn_dim = 5;
  c.seq_len = L;
  c.context_steps = T;
  return c;
}

inline sfuida::Hyperparameters micro_hyperparameters() {
  sfuida::Hyperparameters h;
  h.L = 6;
  h.T = 4;
  h.n_c = 4;
  h.batch_size = 4;
  h.pretrain_epochs = 2;
  h.ssa_epochs = 1;
  h.ssp_epochs = 1;
  h.lr_pretrain = 1e-2;
  h.lr_ssa = 1e-3;
  h.lr_ssp = 1e-3;
  h.xi = 0.3;
  return h;
}

}  // namespace testing
