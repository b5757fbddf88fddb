#include <doctest.h>

#include <cmath>
#include <random>

#include "sfuida/access_log.hpp"
#include "sfuida/model.hpp"
#include "sfuida/personalize.hpp"
#include "support.hpp"

using namespace sfuida;
using model::Matrix;
using model::ParamGroup;
using model::Var;
namespace ps = sfuida::personalize;

namespace {

model::ModelConfig micro() {
  model::ModelConfig c;
  c.channels = 1;
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
  c.seq_len = 6;
  c.context_steps = 4;
  c.seed = 11;
  return c;
}

Hyperparameters micro_h() {
  Hyperparameters h;
  h.L = 6;
  h.T = 4;
  h.n_c = 4;
  h.batch_size = 4;
  h.lr_ssp = 1e-2;
  h.ssp_epochs = 2;
  return h;
}

// Rows with a chosen top probability; the rest spread evenly.
Matrix rows_with_top(const std::vector<double>& top, const std::vector<int>& arg) {
  Matrix p(static_cast<Eigen::Index>(top.size()), kNumStages);
  for (std::size_t r = 0; r < top.size(); ++r) {
    p.row(static_cast<Eigen::Index>(r)).setConstant((1.0 - top[r]) / 4.0);
    p(static_cast<Eigen::Index>(r), arg[r]) = top[r];
  }
  return p;
}

Matrix random_probs(int rows, std::mt19937_64& rng, double sharpness) {
  std::normal_distribution<double> g(0.0, sharpness);
  Matrix logits(rows, kNumStages);
  for (int i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
  return ag::softmax_rows(logits);
}

}  // namespace

TEST_CASE("ema_update: blend arithmetic and fixed points") {
  auto student = model::make_model(micro());
  student->fill_group(ParamGroup::Classifier, 0.0);
  auto teacher = ps::make_teacher(*student, 0.996);
  teacher.model->fill_group(ParamGroup::Classifier, 1.0);
  ps::ema_update(teacher, *student);
  for (const auto& p : teacher.model->parameters()) {
    if (p.group == ParamGroup::Classifier) CHECK(p.var.value().cwiseAbs().maxCoeff() == doctest::Approx(0.996));
  }

  auto other = model::make_model([] { auto c = micro(); c.seed = 99; return c; }());
  auto t1 = ps::make_teacher(*student, 1.0);
  const auto before = t1.model->snapshot();
  ps::ema_update(t1, *other);
  CHECK(t1.model->snapshot() == before);

  auto t0 = ps::make_teacher(*student, 0.0);
  ps::ema_update(t0, *other);
  CHECK(t0.model->snapshot() == other->snapshot());
  CHECK(t0.model->ema_updates() == 1);
}

TEST_CASE("ema_update matches the elementwise blend within 1e-12") {
  auto a = model::make_model(micro());
  auto b = model::make_model([] { auto c = micro(); c.seed = 12; return c; }());
  for (double alpha : {0.0, 0.3, 0.996, 1.0}) {
    auto t = ps::make_teacher(*a, alpha);
    ps::ema_update(t, *b);
    const auto& tp = t.model->parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) {
      const Matrix& pa = a->parameters()[i].var.value();
      const Matrix& pb = b->parameters()[i].var.value();
      for (Eigen::Index j = 0; j < pa.size(); ++j) {
        CHECK(std::abs(tp[i].var.value().data()[j] - (alpha * pa.data()[j] + (1 - alpha) * pb.data()[j])) < 1e-12);
      }
    }
  }
}

TEST_CASE("ema contraction: distance to a constant student scales by alpha^n") {
  auto s = model::make_model(micro());
  auto init = model::make_model([] { auto c = micro(); c.seed = 77; return c; }());
  auto t = ps::make_teacher(*init, 0.9);
  auto distance = [&] {
    double d = 0;
    for (std::size_t i = 0; i < s->parameters().size(); ++i)
      d += (t.model->parameters()[i].var.value() - s->parameters()[i].var.value()).squaredNorm();
    return std::sqrt(d);
  };
  const double d0 = distance();
  for (int n = 1; n <= 20; ++n) {
    ps::ema_update(t, *s);
    CHECK(distance() == doctest::Approx(d0 * std::pow(0.9, n)).epsilon(1e-9));
  }
}

TEST_CASE("ema_update rejects structurally different students") {
  auto a = model::make_model(micro());
  auto c = micro();
  c.latent_dim = 5;
  auto b = model::make_model(c);
  auto t = ps::make_teacher(*a, 0.5);
  try {
    ps::ema_update(t, *b);
    FAIL("expected StructureMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StructureMismatch);
  }
  CHECK_THROWS_AS(ps::make_teacher(*a, 1.5), Error);
}

TEST_CASE("filter_confident: retention boundary and strict confidence") {
  std::vector<int> arg(20, 2);
  std::vector<double> top(20, 0.5);
  for (int i = 0; i < 15; ++i) top[i] = 0.85;
  auto plb = ps::filter_confident(rows_with_top(top, arg), 1, 20, 0.8, 15);
  CHECK(plb.sequence_retained[0] == 1);

  top[14] = 0.5;
  plb = ps::filter_confident(rows_with_top(top, arg), 1, 20, 0.8, 15);
  CHECK(plb.sequence_retained[0] == 0);

  top[14] = 0.80;  // equality is not confidence
  plb = ps::filter_confident(rows_with_top(top, arg), 1, 20, 0.8, 15);
  CHECK(plb.epoch_confident[14] == 0);
  CHECK(plb.sequence_retained[0] == 0);
  for (int i = 0; i < 20; ++i) CHECK(plb.hard_labels[i] == 2);

  CHECK_THROWS_AS(ps::filter_confident(Matrix::Zero(19, 5), 1, 20, 0.8, 15), Error);
}

TEST_CASE("filter_confident agrees with a brute-force recount on 1000 batches") {
  std::mt19937_64 rng(8);
  int disagreements = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int B = 1 + int(rng() % 4);
    const Matrix probs = random_probs(B * 20, rng, 0.5 + double(rng() % 40) / 10.0);
    const auto plb = ps::filter_confident(probs, B, 20, 0.8, 15);
    for (int b = 0; b < B; ++b) {
      int count = 0;
      for (int t = 0; t < 20; ++t) {
        double best = -1;
        int arg = -1;
        for (int c = 0; c < 5; ++c) {
          if (probs(b * 20 + t, c) > best) {
            best = probs(b * 20 + t, c);
            arg = c;
          }
        }
        if (plb.hard_labels[b * 20 + t] != arg) ++disagreements;
        if ((best > 0.8) != bool(plb.epoch_confident[b * 20 + t])) ++disagreements;
        count += best > 0.8;
      }
      if ((count >= 15) != bool(plb.sequence_retained[b])) ++disagreements;
    }
    for (Eigen::Index r = 0; r < plb.probs.rows(); ++r) CHECK(std::abs(plb.probs.row(r).sum() - 1.0) < 1e-6);
  }
  CHECK(disagreements == 0);
}

TEST_CASE("retention is monotone in xi and n_c; hard labels ignore logit scale") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix logits(3 * 10, kNumStages);
    std::normal_distribution<double> g(0.0, 2.5);
    for (int i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
    const Matrix probs = ag::softmax_rows(logits);
    const double xi = 0.3 + 0.6 * double(rng() % 100) / 100.0;
    const int nc = 1 + int(rng() % 10);
    const auto base = ps::filter_confident(probs, 3, 10, xi, nc);
    const auto stricter_xi = ps::filter_confident(probs, 3, 10, xi + 0.05, nc);
    const auto stricter_nc = ps::filter_confident(probs, 3, 10, xi, std::min(nc + 1, 10));
    for (int b = 0; b < 3; ++b) {
      CHECK(stricter_xi.sequence_retained[b] <= base.sequence_retained[b]);
      CHECK(stricter_nc.sequence_retained[b] <= base.sequence_retained[b]);
    }
    const double c = 0.1 + double(rng() % 50) / 10.0;
    const auto scaled = ps::filter_confident(ag::softmax_rows(c * logits), 3, 10, xi, nc);
    CHECK(scaled.hard_labels == base.hard_labels);
  }
}

TEST_CASE("pseudo_ce_loss: nothing retained, margin limit, hand case") {
  const Matrix low = rows_with_top(std::vector<double>(12, 0.5), std::vector<int>(12, 1));
  const auto none = ps::filter_confident(low, 2, 6, 0.8, 4);
  Var logits(testing::random_matrix(12, 5, 1), true);
  const Var zero = ps::pseudo_ce_loss(logits, none);
  CHECK(zero.item() == 0.0);
  CHECK_FALSE(zero.requires_grad());

  // Retained sequence 0, rejected sequence 1.
  std::vector<double> top(12, 0.9);
  for (int i = 6; i < 12; ++i) top[i] = 0.3;
  std::vector<int> arg = {0, 1, 2, 3, 4, 0, 1, 1, 1, 1, 1, 1};
  const auto plb = ps::filter_confident(rows_with_top(top, arg), 2, 6, 0.8, 4);
  REQUIRE(plb.sequence_retained == std::vector<std::uint8_t>{1, 0});
  Matrix m = Matrix::Zero(12, 5);
  for (int r = 0; r < 6; ++r) m(r, arg[r]) = 60.0;
  CHECK(ps::pseudo_ce_loss(Var(m), plb).item() < 1e-20);
  // Sequence 1 never contributes, whatever its logits.
  Matrix m2 = m;
  m2.bottomRows(6) = testing::random_matrix(6, 5, 3, 10.0);
  CHECK(ps::pseudo_ce_loss(Var(m2), plb).item() == ps::pseudo_ce_loss(Var(m), plb).item());

  // B=1, L=2: labels 3 and 0; mean negative log-softmax of those entries.
  const auto hand = ps::filter_confident(rows_with_top({0.95, 0.9}, {3, 0}), 1, 2, 0.8, 2);
  Matrix z(2, 5);
  z << 0.1, -0.4, 0.3, 1.2, 0.0,
       2.0, 0.5, -1.0, 0.0, 0.25;
  double expect = 0;
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int c = 0; c < 5; ++c) s += std::exp(z(r, c));
    expect += -(z(r, r == 0 ? 3 : 0) - std::log(s));
  }
  expect /= 2;
  CHECK(std::abs(ps::pseudo_ce_loss(Var(z), hand).item() - expect) < 1e-6);
  CHECK(expect == doctest::Approx(0.63316).epsilon(1e-4));  // (0.80762 + 0.45871) / 2 by hand

  CHECK_THROWS_AS(ps::pseudo_ce_loss(Var(Matrix::Zero(4, 5)), hand), Error);
}

TEST_CASE("pseudo_ce_loss gradients match central differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 4; ++trial) {
    const int B = 1 + trial, L = 3;
    const auto plb = ps::filter_confident(random_probs(B * L, rng, 4.0), B, L, 0.4, 1);
    Var logits(testing::random_matrix(B * L, 5, 40 + trial), true);
    for (bool soft : {false, true}) {
      auto loss = [&] { return ps::pseudo_ce_loss(logits, plb, soft); };
      const auto r = testing::check_gradients(loss, {{"logits", logits}}, 1e-6);
      CHECK(r.worst_relative < 1e-4);
    }
  }

  // Through the classifier and encoder of a model.
  auto m = model::make_model(micro());
  const auto rec = testing::small_subject("g", 12, 4, 2.0);
  const auto seqs = dataio::make_sequences(rec, 6, 6);
  const auto probs = ag::softmax_rows(3.0 * testing::random_matrix(12, 5, 9));
  const auto plb = ps::filter_confident(probs, 2, 6, 0.3, 2);
  std::vector<std::pair<std::string, Var>> inputs;
  for (auto& p : m->parameters()) {
    if (p.group == ParamGroup::Classifier || p.group == ParamGroup::Encoder) inputs.emplace_back(p.name, p.var);
  }
  auto loss = [&] {
    return ps::pseudo_ce_loss(m->forward_classify(model::SequenceBatch::from_sequences(seqs)), plb);
  };
  const auto r = testing::check_gradients(loss, inputs, 1e-6, 16);
  INFO("worst " << r.worst_name);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("adapt_ssp: counters, zero epochs, frozen when nothing is confident") {
  auto student = model::make_model(micro());
  auto h = micro_h();
  const auto subject = testing::small_subject("p1", 48, 6, 2.0).without_labels();
  const auto before = student->snapshot();

  h.ssp_epochs = 0;
  CHECK(ps::adapt_ssp(*student, subject, h)->snapshot() == before);

  h.ssp_epochs = 2;
  h.xi = 0.01;  // max prob is at least 0.2: everything confident
  h.n_c = 1;
  ps::SspStats stats;
  auto out = ps::adapt_ssp(*student, subject, h, &stats);
  CHECK(student->snapshot() == before);
  CHECK(stats.steps == 4);
  CHECK(stats.gradient_steps == 4);
  CHECK(stats.teacher_optimizer_steps == 0);
  CHECK(stats.teacher_ema_updates == 4);
  CHECK(stats.retained_fraction == 1.0);
  CHECK_FALSE(out->snapshot() == before);
  CHECK(out->snapshot() == ps::adapt_ssp(*student, subject, h)->snapshot());

  // A zeroed classifier predicts uniform 0.2 everywhere: no epoch clears xi.
  auto flat = student->clone();
  flat->fill_group(ParamGroup::Classifier, 0.0);
  h.xi = 0.8;
  h.n_c = 4;
  auto same = ps::adapt_ssp(*flat, subject, h, &stats);
  CHECK(same->snapshot() == flat->snapshot());
  CHECK(stats.gradient_steps == 0);
  CHECK(stats.retained_fraction == 0.0);

  try {
    (void)ps::adapt_ssp(*student, testing::small_subject("p2", 5, 6, 2.0), h);
    FAIL("expected SubjectTooShort");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SubjectTooShort);
  }
}

TEST_CASE("adapt_ssp reads only the target's signals") {
  auto student = model::make_model(micro());
  auto h = micro_h();
  h.xi = 0.01;
  h.n_c = 1;
  DataAccessLog log;
  {
    ScopedAccessLog scope(log);
    (void)ps::adapt_ssp(*student, testing::small_subject("target", 24, 2, 2.0), h);
  }
  REQUIRE(log.size() > 0);
  for (const auto& e : log.events()) {
    CHECK(e.subject_id == "target");
    CHECK(e.kind != AccessKind::Labels);
    CHECK(e.stage == "ssp");
  }
}
