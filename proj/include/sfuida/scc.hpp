#pragma once

#include <memory>
#include <span>
#include <vector>

#include "sfuida/model.hpp"

namespace sfuida::scc {

using model::Matrix;
using model::Var;

// 1-based positions: original-view position T+k pairs with reversed-view
// position k.
struct PairIndex {
  int i_pos = 0;
  int j_pos = 0;
  friend bool operator==(const PairIndex&, const PairIndex&) = default;
};

std::vector<PairIndex> pair_index(int L, int T);

struct CrossViewBatch {
  std::vector<SleepSequence> view_i;  // original order
  std::vector<SleepSequence> view_j;  // reversed
  std::vector<PairIndex> pair_index;
  int T = 0;
};

// Epoch pointers are shared between views; only their order changes.
CrossViewBatch reverse_augment(std::span<const SleepSequence> batch, int T);

struct CrossViewPrediction {
  std::vector<Var> z_i;  // K entries of [B x D_z]: head k applied to C_j
  std::vector<Var> z_j;  // K entries of [B x D_z]: head k applied to C_i
};

// C_i is the context over the first T latents of view i, C_j over the first
// T latents of view j. Head k serves both the forward target T+k and the
// reversed target k, which sit at the same epoch after reversal.
CrossViewPrediction cross_view_predict(const model::SscModel& m, const CrossViewBatch& cvb);

// Multi-kernel Gaussian MMD (biased V-statistic), k(a,b) = exp(-|a-b|^2 / 2s^2),
// averaged over the given bandwidths and clamped at 0.
Var mmd_distance(const Var& a, const Var& b, std::span<const double> bandwidths);

inline constexpr double kDefaultMultipliersArr[] = {0.5, 1.0, 2.0};
inline constexpr std::span<const double> kDefaultMultipliers{kDefaultMultipliersArr};

// Same estimator with bandwidths s * sigma for s in `multipliers`, where
// sigma^2 is the median pairwise squared distance over the pooled rows. The
// median element stays in the graph, so gradients include the bandwidth.
Var mmd_median_heuristic(const Var& a, const Var& b, std::span<const double> multipliers = kDefaultMultipliers);

// (1/K) sum_k MMD(z_i[k], z_j[k]) with median-heuristic bandwidths.
Var scc_loss(std::span<const Var> z_i, std::span<const Var> z_j);

struct SsaStats {
  std::vector<double> epoch_mean_loss;
  std::size_t sequences = 0;
  std::size_t steps = 0;
};

// Sequential cross-view contrasting on one unlabeled subject. Works on a
// clone of `source` and returns it; the classifier is frozen and the context
// model and heads are re-drawn before the first epoch.
std::unique_ptr<model::SscModel> adapt_ssa(const model::SscModel& source, const SubjectRecording& subject,
                                           const Hyperparameters& h, SsaStats* stats = nullptr);

}  // namespace sfuida::scc
