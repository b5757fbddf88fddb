#include <doctest.h>

#include <cmath>

#include "sfuida/metrics.hpp"
#include "sfuida/model.hpp"
#include "sfuida/pretrain.hpp"
#include "support.hpp"

using namespace sfuida;
using model::Matrix;
using model::Var;

namespace {

model::ModelConfig small_config(int samples) {
  auto c = model::ModelConfig::tiny(1, samples);
  c.conv1_kernel = 16;
  c.conv1_stride = 4;
  c.conv2_kernel = 4;
  c.conv2_stride = 2;
  c.seq_len = 8;
  c.context_steps = 6;
  c.seed = 1;
  return c;
}

Hyperparameters small_h() {
  Hyperparameters h;
  h.L = 8;
  h.T = 6;
  h.n_c = 6;
  h.batch_size = 4;
  h.pretrain_epochs = 2;
  h.lr_pretrain = 3e-3;
  return h;
}

std::vector<SleepSequence> sequences_of(const std::vector<SubjectRecording>& recs, int L) {
  std::vector<SleepSequence> out;
  for (const auto& r : recs) {
    auto s = dataio::make_sequences(r, L, L);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace

TEST_CASE("accuracy and macro F1 examples") {
  const std::vector<int> y = {0, 0, 1, 1, 2};
  CHECK(metrics::accuracy(y, y) == 1.0);
  CHECK(metrics::macro_f1(y, y) == 1.0);

  // Hand confusion: class 0 tp=1 fp=0 fn=1 -> 2/3; class 1 tp=2 fp=1 fn=0 -> 4/5; class 2 -> 1.
  const std::vector<int> p = {0, 1, 1, 1, 2};
  CHECK(metrics::macro_f1(p, y) == doctest::Approx((2.0 / 3 + 4.0 / 5 + 1.0) / 3).epsilon(1e-12));
  CHECK(metrics::macro_f1(p, y) == doctest::Approx(0.8222).epsilon(1e-4));
  CHECK(metrics::accuracy(p, y) == doctest::Approx(0.8));

  std::vector<int> balanced, zeros;
  for (int i = 0; i < 50; ++i) {
    balanced.push_back(i % 5);
    zeros.push_back(0);
  }
  CHECK(metrics::accuracy(zeros, balanced) == doctest::Approx(0.2));
  const auto f1 = metrics::per_class_f1(zeros, balanced);
  CHECK(f1[0] == doctest::Approx(2 * 0.2 / 1.2));
  for (int c = 1; c < 5; ++c) CHECK(f1[c] == 0.0);
}

TEST_CASE("metrics errors") {
  const std::vector<int> empty;
  try {
    (void)metrics::accuracy(empty, empty);
    FAIL("expected EmptyInput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
  CHECK_THROWS_AS(metrics::macro_f1(std::vector<int>{0}, std::vector<int>{0, 1}), Error);
  CHECK_THROWS_AS(metrics::macro_f1(std::vector<int>{7}, std::vector<int>{0}), Error);
}

TEST_CASE("macro F1 against a brute-force oracle on random labelings") {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + int(rng() % 60);
    std::vector<int> y(n), p(n);
    for (int i = 0; i < n; ++i) {
      y[i] = int(rng() % 5);
      p[i] = rng() % 3 == 0 ? y[i] : int(rng() % 5);
    }
    double sum = 0;
    int present = 0;
    for (int c = 0; c < 5; ++c) {
      int tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        tp += p[i] == c && y[i] == c;
        fp += p[i] == c && y[i] != c;
        fn += p[i] != c && y[i] == c;
      }
      if (tp + fn == 0) continue;
      ++present;
      sum += tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    }
    CHECK(metrics::macro_f1(p, y) == doctest::Approx(sum / present).epsilon(1e-12));
  }
}

TEST_CASE("sequence cross-entropy: ln 5, margin limit, hand case, range check") {
  const std::vector<int> labels = {0, 3, 4, 1};
  CHECK(pretrain::sequence_cross_entropy(Var(Matrix::Zero(4, 5)), labels).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  Matrix big = Matrix::Zero(4, 5);
  for (int r = 0; r < 4; ++r) big(r, labels[r]) = 50.0;
  CHECK(pretrain::sequence_cross_entropy(Var(big), labels).item() < 1e-20);
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 20.0}) {
    Matrix m = Matrix::Zero(4, 5);
    for (int r = 0; r < 4; ++r) m(r, labels[r]) = margin;
    const double l = pretrain::sequence_cross_entropy(Var(m), labels).item();
    CHECK(l < previous);
    CHECK(l >= 0.0);
    previous = l;
  }

  Matrix two(2, 5);
  two << 1.0, 2.0, 0.5, -1.0, 0.0, 0.3, -0.2, 2.5, 1.0, 0.1;
  const std::vector<int> y2 = {1, 3};
  double expect = 0.0;
  for (int r = 0; r < 2; ++r) {
    double z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(two(r, c));
    expect += -(two(r, y2[r]) - std::log(z));
  }
  CHECK(pretrain::sequence_cross_entropy(Var(two), y2).item() == doctest::Approx(expect / 2).epsilon(1e-9));

  try {
    (void)pretrain::sequence_cross_entropy(Var(two), std::vector<int>{1, 5});
    FAIL("expected LabelOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LabelOutOfRange);
  }
}

TEST_CASE("pretrain: zero epochs and lr = 0 leave parameters unchanged") {
  const auto data = sequences_of({testing::small_subject("a", 32, 1, 4.0)}, 8);
  auto m = model::make_model(small_config(120));
  const auto before = m->snapshot();
  auto h = small_h();
  h.pretrain_epochs = 0;
  const auto hist = pretrain::pretrain(*m, data, {}, h);
  CHECK(hist.epochs.empty());
  CHECK(m->snapshot() == before);

  h.pretrain_epochs = 3;
  h.lr_pretrain = 0.0;
  (void)pretrain::pretrain(*m, data, {}, h);
  CHECK(m->snapshot() == before);
}

TEST_CASE("pretrain: unlabeled training data throws NoLabels") {
  const auto rec = testing::small_subject("a", 16, 1, 4.0).without_labels();
  const auto data = dataio::make_sequences(rec, 8, 8);
  auto m = model::make_model(small_config(120));
  try {
    (void)pretrain::pretrain(*m, data, {}, small_h());
    FAIL("expected NoLabels");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoLabels);
  }
}

TEST_CASE("pretrain: non-finite loss restores the last good state and throws") {
  auto rec = testing::small_subject("a", 16, 1, 4.0);
  auto data = dataio::make_sequences(rec, 8, 8);
  std::vector<float> bad(120, std::numeric_limits<float>::quiet_NaN());
  data[1].epochs[0] = std::make_shared<Epoch>(1, 120, bad);
  auto m = model::make_model(small_config(120));
  const auto before = m->snapshot();
  auto h = small_h();
  h.batch_size = 1;
  try {
    (void)pretrain::pretrain(*m, data, {}, h);
    FAIL("expected DivergedLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DivergedLoss);
  }
  CHECK(m->snapshot() == before);  // no epoch completed, so the initial state is the last good one
}

TEST_CASE("pretrain: best validation MF1 is the history maximum, and is reproducible") {
  const auto train = sequences_of({testing::small_subject("a", 48, 1, 4.0), testing::small_subject("b", 48, 2, 4.0)}, 8);
  const auto val = sequences_of({testing::small_subject("c", 48, 3, 4.0)}, 8);
  auto h = small_h();
  h.pretrain_epochs = 5;
  auto m1 = model::make_model(small_config(120));
  auto m2 = model::make_model(small_config(120));
  const auto hist = pretrain::pretrain(*m1, train, val, h);
  const auto hist2 = pretrain::pretrain(*m2, train, val, h);
  REQUIRE(hist.epochs.size() == 5);
  double best = -1;
  for (const auto& e : hist.epochs) best = std::max(best, e.val_mf1);
  CHECK(hist.best_val_mf1 == best);
  CHECK(hist.epochs[hist.best_epoch].val_mf1 == best);
  CHECK(m1->snapshot() == m2->snapshot());
  CHECK(hist.to_csv() == hist2.to_csv());
  // The returned state scores exactly the recorded best.
  const auto preds = pretrain::predict(*m1, val, h.batch_size);
  CHECK(metrics::macro_f1(preds, pretrain::flatten_labels(val)) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("overfit sanity: 4 synthetic subjects reach train ACC >= 0.95 within 200 steps") {
  std::vector<SubjectRecording> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(testing::small_subject("o" + std::to_string(i), 40, 10 + i, 20.0));
  const auto train = sequences_of(recs, 8);  // 20 sequences
  auto cfg = model::ModelConfig::tiny(1, 600);
  cfg.conv1_kernel = 16;
  cfg.conv1_stride = 4;
  cfg.seq_len = 8;
  cfg.context_steps = 6;
  auto m = model::make_model(cfg);
  auto h = small_h();
  h.batch_size = 4;       // 5 steps per epoch
  h.pretrain_epochs = 40;  // 200 steps
  (void)pretrain::pretrain(*m, train, {}, h);
  const auto preds = pretrain::predict(*m, train, 8);
  CHECK(metrics::accuracy(preds, pretrain::flatten_labels(train)) >= 0.95);
}

TEST_CASE("make_batches covers every index once; shuffling is seeded") {
  const std::uint64_t seed = 9;
  const auto a = pretrain::make_batches(23, 5, &seed);
  const auto b = pretrain::make_batches(23, 5, &seed);
  CHECK(a == b);
  CHECK(a.size() == 5);
  CHECK(a.back().size() == 3);
  std::vector<int> seen(23, 0);
  for (const auto& batch : a) for (auto i : batch) ++seen[i];
  for (int s : seen) CHECK(s == 1);
  const auto ordered = pretrain::make_batches(7, 3, nullptr);
  CHECK(ordered[0] == std::vector<std::size_t>{0, 1, 2});
}
