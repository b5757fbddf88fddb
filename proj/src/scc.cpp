#include "sfuida/scc.hpp"

#include <algorithm>
#include <cmath>

#include "sfuida/access_log.hpp"
#include "sfuida/dataio.hpp"
#include "sfuida/optim.hpp"
#include "sfuida/pretrain.hpp"

namespace sfuida::scc {

namespace {
constexpr double kSigmaFloor = 1e-8;
}

std::vector<PairIndex> pair_index(int L, int T) {
  if (!(T > 1 && T < L)) throw Error(ErrorCode::InvalidConfig, "pair_index needs 1 < T < L");
  std::vector<PairIndex> out;
  for (int k = 1; k <= L - T; ++k) out.push_back({T + k, k});
  return out;
}

CrossViewBatch reverse_augment(std::span<const SleepSequence> batch, int T) {
  if (batch.empty()) throw Error(ErrorCode::ShapeMismatch, "reverse_augment: empty batch");
  const std::size_t L = batch.front().length();
  CrossViewBatch cvb;
  cvb.T = T;
  for (const auto& seq : batch) {
    if (seq.length() != L) throw Error(ErrorCode::ShapeMismatch, "reverse_augment: sequences differ in length");
    cvb.view_i.push_back(seq);
    SleepSequence rev;
    rev.epochs.assign(seq.epochs.rbegin(), seq.epochs.rend());
    if (seq.labels) rev.labels.emplace(seq.labels->rbegin(), seq.labels->rend());
    rev.origin = seq.origin;
    cvb.view_j.push_back(std::move(rev));
  }
  cvb.pair_index = pair_index(static_cast<int>(L), T);
  return cvb;
}

CrossViewPrediction cross_view_predict(const model::SscModel& m, const CrossViewBatch& cvb) {
  const int B = static_cast<int>(cvb.view_i.size());
  if (B == 0 || cvb.view_j.size() != cvb.view_i.size()) {
    throw Error(ErrorCode::ShapeMismatch, "cross_view_predict: views differ in batch size");
  }
  const int L = static_cast<int>(cvb.view_i.front().length());
  const int T = cvb.T;
  const int K = L - T;
  if (m.num_heads() != K) {
    throw Error(ErrorCode::HeadCountMismatch,
                "model has " + std::to_string(m.num_heads()) + " heads, pairing needs K = " + std::to_string(K));
  }

  // Per-epoch extraction is order independent, so view j's latents are the
  // rows of view i's latents reversed within each sequence.
  const auto batch_i = model::SequenceBatch::from_sequences(cvb.view_i);
  const Var raw_i = m.extract(batch_i);
  std::vector<Eigen::Index> reverse_rows;
  std::vector<Eigen::Index> prefix_rows;
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < L; ++t) reverse_rows.push_back(static_cast<Eigen::Index>(b) * L + (L - 1 - t));
    for (int t = 0; t < T; ++t) prefix_rows.push_back(static_cast<Eigen::Index>(b) * L + t);
  }
  const Var raw_j = ag::gather_rows(raw_i, reverse_rows);
  const Var z_i = m.encode(raw_i, B, L);
  const Var z_j = m.encode(raw_j, B, L);
  const Var c_i = m.context(ag::gather_rows(z_i, prefix_rows), B, T);
  const Var c_j = m.context(ag::gather_rows(z_j, prefix_rows), B, T);

  CrossViewPrediction out;
  for (int k = 0; k < K; ++k) {
    out.z_i.push_back(m.predict(k, c_j));
    out.z_j.push_back(m.predict(k, c_i));
  }
  return out;
}

namespace {

Var mmd_with_sigma2(const Var& a, const Var& b, const Var& sigma2, std::span<const double> multipliers) {
  const Var kaa_d = ag::pairwise_sqdist(a, a);
  const Var kbb_d = ag::pairwise_sqdist(b, b);
  const Var kab_d = ag::pairwise_sqdist(a, b);
  Var total;
  for (double s : multipliers) {
    const Var denom = ag::scale(sigma2, 2.0 * s * s);
    auto kernel_mean = [&](const Var& d) { return ag::mean(ag::exp(ag::scale(ag::divide_by_scalar(d, denom), -1.0))); };
    const Var term = ag::sub(ag::add(kernel_mean(kaa_d), kernel_mean(kbb_d)), ag::scale(kernel_mean(kab_d), 2.0));
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::relu(ag::scale(total, 1.0 / static_cast<double>(multipliers.size())));
}

void check_sets(const Var& a, const Var& b) {
  if (a.rows() < 1 || b.rows() < 1) throw Error(ErrorCode::EmptyInput, "MMD needs non-empty sample sets");
  if (a.cols() != b.cols()) throw Error(ErrorCode::DimMismatch, "MMD sample sets differ in dimension");
}

}  // namespace

Var mmd_distance(const Var& a, const Var& b, std::span<const double> bandwidths) {
  check_sets(a, b);
  if (bandwidths.empty()) throw Error(ErrorCode::InvalidConfig, "MMD needs at least one bandwidth");
  Var total;
  for (double bw : bandwidths) {
    if (!(bw > 0.0)) throw Error(ErrorCode::InvalidConfig, "MMD bandwidth must be positive");
    const std::array<double, 1> unit{1.0};
    const Var term = mmd_with_sigma2(a, b, ag::scalar(bw * bw), unit);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / static_cast<double>(bandwidths.size()));
}

Var mmd_median_heuristic(const Var& a, const Var& b, std::span<const double> multipliers) {
  check_sets(a, b);
  const std::vector<Var> both{a, b};
  const Var pooled = ag::concat_rows(both);
  const Var d = ag::pairwise_sqdist(pooled, pooled);
  const Eigen::Index n = pooled.rows();
  std::vector<std::pair<double, std::pair<Eigen::Index, Eigen::Index>>> upper;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) upper.push_back({d.value()(i, j), {i, j}});
  }
  const std::size_t mid = (upper.size() - 1) / 2;
  std::nth_element(upper.begin(), upper.begin() + static_cast<std::ptrdiff_t>(mid), upper.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  const auto [i, j] = upper[mid].second;
  const Var sigma2 = ag::add_scalar(ag::element(d, i, j), kSigmaFloor);
  return mmd_with_sigma2(a, b, sigma2, multipliers);
}

Var scc_loss(std::span<const Var> z_i, std::span<const Var> z_j) {
  if (z_i.empty() || z_i.size() != z_j.size()) {
    throw Error(ErrorCode::ShapeMismatch, "scc_loss: both views need the same K > 0 predictions");
  }
  Var total;
  for (std::size_t k = 0; k < z_i.size(); ++k) {
    if (z_i[k].rows() != z_j[k].rows() || z_i[k].cols() != z_j[k].cols()) {
      throw Error(ErrorCode::ShapeMismatch, "scc_loss: prediction shapes differ at k = " + std::to_string(k));
    }
    const Var term = mmd_median_heuristic(z_i[k], z_j[k]);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / static_cast<double>(z_i.size()));
}

std::unique_ptr<model::SscModel> adapt_ssa(const model::SscModel& source, const SubjectRecording& subject,
                                           const Hyperparameters& h, SsaStats* stats) {
  validate_hyperparameters(h);
  StageTag tag("ssa");
  auto m = source.clone();
  const auto sequences = dataio::make_sequences(subject.without_labels(), h.L, h.L);  // labels never reach adaptation
  if (sequences.empty()) {
    throw Error(ErrorCode::SubjectTooShort, subject.subject_id() + " has " + std::to_string(subject.num_epochs()) +
                                                " epochs, fewer than L = " + std::to_string(h.L));
  }
  if (m->num_heads() != h.K()) {
    throw Error(ErrorCode::HeadCountMismatch, "model heads differ from K = L - T");
  }
  if (stats) *stats = SsaStats{{}, sequences.size(), 0};
  if (h.ssa_epochs == 0) return m;

  const std::uint64_t stage_seed = derive_seed(h.seed, "ssa:" + subject.subject_id());
  m->reset_context_and_heads(stage_seed);
  optim::Adam adam(*m, m->parameters_in({model::ParamGroup::Extractor, model::ParamGroup::Encoder,
                                         model::ParamGroup::Context, model::ParamGroup::Heads}),
                   optim::adam_options(h, h.lr_ssa));

  for (int epoch = 0; epoch < h.ssa_epochs; ++epoch) {
    const std::uint64_t seed = derive_seed(stage_seed, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (const auto& idx : pretrain::make_batches(sequences.size(), h.batch_size, &seed)) {
      const auto part = pretrain::gather(sequences, idx);
      const auto cvb = reverse_augment(part, h.T);
      adam.zero_grad();
      const auto pred = cross_view_predict(*m, cvb);
      const Var loss = scc_loss(pred.z_i, pred.z_j);
      if (!std::isfinite(loss.item())) throw Error(ErrorCode::DivergedLoss, "non-finite SCC loss");
      ag::backward(loss);
      adam.step();
      loss_sum += loss.item() * static_cast<double>(part.size());
      count += part.size();
      if (stats) ++stats->steps;
    }
    if (stats) stats->epoch_mean_loss.push_back(loss_sum / static_cast<double>(count));
  }
  adam.zero_grad();
  return m;
}

}  // namespace sfuida::scc
