#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ff/goodness.hpp"
#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace ff;
using M = GoodnessMode;

namespace {

Matrix rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t r = 0;
  for (const auto& row : rows) {
    std::size_t c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

double value_of(GoodnessMode mode, const Matrix& h, const GoodnessParams& p = {}) {
  return goodness_pointwise(mode, h, p).values(0, 0);
}

double sos(std::span<const double> row) {
  double s = 0.0;
  for (double v : row) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("gradient suite: every mode, ten seeds") {
  double worst = 0.0;
  for (const auto& desc : registry()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = gradcheck::check(desc, seed);
      INFO(desc.name << " seed " << seed << " rel err " << r.worst);
      CHECK(r.worst <= gradcheck::kTolerance);
      CHECK(r.value_gap <= 1e-12);
      worst = std::max(worst, r.worst);
    }
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("gradient suite under non-default params") {
  GoodnessParams p;
  p.delta = 0.5;
  p.temperature = 2.5;
  p.trim_fraction = 0.3;
  p.oja_alpha = 0.05;
  p.bcm_lambda = 0.7;
  p.pc_lambda = 0.4;
  p.decorr_lambda = 0.3;
  p.ntxent_tau = 0.2;
  p.infonce_weight = 2.0;
  p.triplet_weight = 3.0;
  p.l1_lambda = 0.5;
  p.pca_k = 5;
  for (const auto& desc : registry()) {
    for (std::uint64_t seed = 100; seed < 103; ++seed) {
      const auto r = gradcheck::check(desc, seed, p);
      INFO(desc.name << " seed " << seed << " rel err " << r.worst);
      CHECK(r.worst <= gradcheck::kTolerance);
    }
  }
}

TEST_CASE("registry") {
  CHECK(registry().size() == 21);
  std::set<std::string_view> names;
  for (const auto& d : registry()) names.insert(d.name);
  CHECK(names.size() == 21);
  CHECK(registry_lookup("sum_of_squares").family == Family::pointwise);
  CHECK(registry_lookup("sum_of_squares").state_needs == kNeedsNone);
  CHECK(registry_lookup("bcm").family == Family::stateful);
  CHECK((registry_lookup("bcm").state_needs & kNeedsBcmThreshold) != 0);
  CHECK(registry_lookup("nt_xent").family == Family::contrastive);
  CHECK(registry_lookup("pca_energy").family == Family::batch);
  try {
    registry_lookup("quadratic_frobnitz");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("quadratic_frobnitz") != std::string::npos);
    for (const auto& d : registry()) CHECK(msg.find(d.name) != std::string::npos);
  }
  for (const auto& d : registry()) CHECK(&registry_lookup(d.mode) == &d);
}

TEST_CASE("pointwise examples") {
  const auto r = goodness_pointwise(M::sum_of_squares, rows_of({{1, 2, 3}}), {});
  CHECK(r.values(0, 0) == 14.0);
  CHECK(r.grad(0, 0) == 2.0);
  CHECK(r.grad(0, 1) == 4.0);
  CHECK(r.grad(0, 2) == 6.0);

  GoodnessParams p;
  p.epsilon = 1e-6;
  const double l2 = value_of(M::l2_normalized_energy, rows_of({{3, 4}}), p);
  CHECK(l2 == doctest::Approx(25.0 / ((5.0 + 1e-6) * (5.0 + 1e-6))).epsilon(1e-14));
  CHECK(l2 < 1.0);
  CHECK(l2 == doctest::Approx(0.9999996).epsilon(1e-9));

  CHECK(value_of(M::huber_norm, rows_of({{0.5, 3}})) == doctest::Approx(2.625).epsilon(1e-15));

  GoodnessParams third;
  third.trim_fraction = 1.0 / 3.0;
  CHECK(value_of(M::outlier_trimmed_energy, rows_of({{1, 2, 10}}), third) == 5.0);
  const auto tg = goodness_pointwise(M::outlier_trimmed_energy, rows_of({{1, 2, 10}}), third).grad;
  CHECK(tg(0, 2) == 0.0);
  CHECK(tg(0, 1) == 4.0);

  GoodnessParams l1;
  l1.l1_lambda = 3.7;
  CHECK(value_of(M::sparse_l1, Matrix(1, 5, 0.0), l1) == 0.0);

  CHECK(value_of(M::tempered_energy, Matrix(1, 7, 0.0)) == 7.0);
  GoodnessParams oja;
  oja.oja_alpha = 0.5;
  CHECK(value_of(M::oja, rows_of({{2}}), oja) == doctest::Approx(4.0 - 0.5 * 16.0));
}

TEST_CASE("tempered overflow names the temperature") {
  GoodnessParams p;
  p.temperature = 0.01;
  try {
    goodness_pointwise(M::tempered_energy, rows_of({{3.0}}), p);
    FAIL("expected an error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("temperature") != std::string::npos);
  }
}

TEST_CASE("non-finite input is rejected") {
  Matrix h = rows_of({{1, NAN}});
  CHECK_THROWS_AS(goodness_pointwise(M::sum_of_squares, h, {}), NumericError);
  auto s = GoodnessState::for_width(2);
  CHECK_THROWS_AS(goodness_stateful(M::hebbian, h, s, {}, false), NumericError);
}

TEST_CASE("stateful examples") {
  auto s = GoodnessState::for_width(2);
  const Matrix h = rows_of({{1, 2}});
  auto heb = goodness_stateful(M::hebbian, h, s, {}, false);
  CHECK(heb.values(0, 0) == 5.0);
  CHECK(heb.grad(0, 0) == 2.0);
  CHECK(heb.grad(0, 1) == 4.0);

  GoodnessParams bcm;
  bcm.bcm_lambda = 1.0;
  CHECK(goodness_stateful(M::bcm, rows_of({{1, 1}}), s, bcm, false).values(0, 0) == 4.0);

  GoodnessParams pc;
  pc.pc_lambda = 1.0;
  auto with_baseline = s;
  with_baseline.pred_baseline = rows_of({{1, 2}});
  CHECK(goodness_stateful(M::predictive_coding, h, with_baseline, pc, false).values(0, 0) == 5.0);

  CHECK(goodness_stateful(M::gaussian_energy, h, s, {}, false).values(0, 0) == -2.5);

  auto bad = s;
  bad.running_var(0, 1) = 0.0;
  CHECK_THROWS_AS(goodness_stateful(M::gaussian_energy, h, bad, {}, false), NumericError);
  auto narrow = GoodnessState::for_width(3);
  CHECK_THROWS_AS(goodness_stateful(M::hebbian, h, narrow, {}, false), ShapeError);
}

TEST_CASE("running statistics advance by EMA from positive batches") {
  GoodnessParams p;
  const Matrix h = rows_of({{1, 2}, {3, 6}});
  auto s = GoodnessState::for_width(2);
  goodness_stateful(M::hebbian, h, s, p, true);
  CHECK(s.running_mean(0, 0) == doctest::Approx(0.1 * 2.0));
  CHECK(s.running_mean(0, 1) == doctest::Approx(0.1 * 4.0));
  CHECK(s.updates == 1);

  auto b = GoodnessState::for_width(2);
  goodness_stateful(M::bcm, h, b, p, true);
  CHECK(b.bcm_threshold(0, 0) == doctest::Approx(0.1 * 5.0));
  CHECK(b.bcm_threshold(0, 1) == doctest::Approx(0.1 * 20.0));

  auto g = GoodnessState::for_width(2);
  goodness_stateful(M::gaussian_energy, h, g, p, true);
  CHECK(g.running_var(0, 0) == doctest::Approx(0.9 * 1.0 + 0.1 * (1.0 + p.epsilon)));
  CHECK(g.running_mean(0, 0) == doctest::Approx(0.2));

  // Evaluation uses the state from before the update.
  auto fresh = GoodnessState::for_width(2);
  const auto r = goodness_stateful(M::hebbian, h, fresh, p, true);
  CHECK(r.values(0, 0) == 5.0);
}

TEST_CASE("bcm threshold stays non-negative") {
  Rng rng(3);
  auto s = GoodnessState::for_width(8);
  for (int step = 0; step < 200; ++step) {
    const Matrix h = oracle::random_matrix(rng, 5, 8, 3.0);
    goodness_stateful(M::bcm, h, s, {}, true);
    for (double v : s.bcm_threshold.data()) REQUIRE(v >= 0.0);
  }
}

TEST_CASE("state freeze gives bit-identical results") {
  Rng rng(11);
  const Matrix h = oracle::random_matrix(rng, 6, 16);
  const Matrix other = oracle::random_matrix(rng, 6, 16);
  for (const auto& desc : registry()) {
    auto state = gradcheck::random_state(desc.mode, rng, {});
    const auto before = state;
    auto a = evaluate_pair(desc, h, other, state, {}, false);
    auto b = evaluate_pair(desc, h, other, state, {}, false);
    INFO(desc.name);
    CHECK(state == before);
    CHECK(a.first.values == b.first.values);
    CHECK(a.first.grad == b.first.grad);
    CHECK(a.second.values == b.second.values);
    CHECK(inference_score(desc, h, state, {}) == inference_score(desc, h, state, {}));
  }
}

TEST_CASE("pointwise gradients depend only on their own row") {
  Rng rng(5);
  Matrix h = oracle::random_matrix(rng, 3, 10);
  for (const auto& desc : registry()) {
    if (desc.family != Family::pointwise) continue;
    const auto a = goodness_pointwise(desc.mode, h, {});
    Matrix h2 = h;
    for (std::size_t i = 0; i < 10; ++i) h2(1, i) *= -2.0;
    const auto b = goodness_pointwise(desc.mode, h2, {});
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(a.grad(0, i) == b.grad(0, i));
      CHECK(a.grad(2, i) == b.grad(2, i));
    }
  }
}

TEST_CASE("pointwise invariants on random rows") {
  Rng rng(21);
  GoodnessParams p;
  for (int t = 0; t < 500; ++t) {
    const double scale = std::exp(3.0 * rng.normal());
    const Matrix h = oracle::random_matrix(rng, 1, 12, scale);
    const double s = sos(h.row(0));
    const double l2 = value_of(M::l2_normalized_energy, h, p);
    CHECK(l2 > 0.0);
    CHECK(l2 < 1.0);
    CHECK(value_of(M::outlier_trimmed_energy, h, p) <= s);
    CHECK(value_of(M::sparse_l1, h, p) < s);

    // Growing the row along its direction increases the normalised energy.
    Matrix bigger = h;
    for (double& v : bigger.data()) v *= 1.5;
    CHECK(value_of(M::l2_normalized_energy, bigger, p) > l2);

    Matrix small = h;
    double peak = 0.0;
    for (double v : small.data()) peak = std::max(peak, std::abs(v));
    for (double& v : small.data()) v *= p.delta / peak * rng.uniform();
    CHECK(value_of(M::huber_norm, small, p) == doctest::Approx(sos(small.row(0)) / 2.0).epsilon(1e-13));
  }
  CHECK(value_of(M::sparse_l1, Matrix(1, 12, 0.0), p) == sos(Matrix(1, 12, 0.0).row(0)));
}

TEST_CASE("gaussian energy is maximal at the mean") {
  Rng rng(8);
  auto s = GoodnessState::for_width(6);
  for (std::size_t i = 0; i < 6; ++i) {
    s.running_mean(0, i) = rng.normal();
    s.running_var(0, i) = 0.1 + rng.uniform();
  }
  for (int t = 0; t < 200; ++t) {
    const Matrix h = oracle::random_matrix(rng, 1, 6, 2.0);
    CHECK(goodness_stateful(M::gaussian_energy, h, s, {}, false).values(0, 0) <= 0.0);
  }
  CHECK(goodness_stateful(M::gaussian_energy, s.running_mean, s, {}, false).values(0, 0) == 0.0);
}

TEST_CASE("batch examples") {
  auto s = GoodnessState::for_width(2);
  const auto dec = goodness_batch(M::decorrelation, rows_of({{1, 1}, {1, 1}}), s, {});
  CHECK(dec.values(0, 0) == 2.0);
  CHECK(dec.values(1, 0) == 2.0);
  CHECK_THROWS_AS(goodness_batch(M::decorrelation, rows_of({{1, 1}}), s, {}), ShapeError);

  const auto att = goodness_batch(M::attention_weighted, rows_of({{1, 1}}), s, {});
  CHECK(att.values(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  auto ident = GoodnessState::for_width(3);
  ident.pca = Matrix::identity(3);
  Rng rng(4);
  const Matrix h = oracle::random_matrix(rng, 5, 3);
  const auto pca = goodness_batch(M::pca_energy, h, ident, {});
  for (std::size_t b = 0; b < 5; ++b) CHECK(pca.values(b, 0) == doctest::Approx(sos(h.row(b))).epsilon(1e-14));

  auto unfitted = GoodnessState::for_width(3);
  CHECK_THROWS_AS(goodness_batch(M::whitened_energy, h, unfitted, {}, false), std::invalid_argument);
}

TEST_CASE("decorrelation matches energy when covariance vanishes") {
  Rng rng(6);
  auto s = GoodnessState::for_width(9);
  const Matrix one = oracle::random_matrix(rng, 1, 9);
  Matrix h(4, 9);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t i = 0; i < 9; ++i) h(b, i) = one(0, i);
  const auto r = goodness_batch(M::decorrelation, h, s, {});
  for (std::size_t b = 0; b < 4; ++b) CHECK(r.values(b, 0) == doctest::Approx(sos(one.row(0))).epsilon(1e-14));
}

TEST_CASE("whitening fitted on a batch whitens it") {
  Rng rng(12);
  const std::size_t n = 8, rows = 400;
  const Matrix mix = oracle::random_matrix(rng, n, n);
  const Matrix h = oracle::naive_matmul(oracle::random_matrix(rng, rows, n), mix);
  auto s = GoodnessState::for_width(n);
  goodness_batch(M::whitened_energy, h, s, {}, true);
  REQUIRE(s.whitening.has_value());
  const Matrix wh = matmul_nt(h, *s.whitening);
  const Matrix cov = batch_covariance(wh);
  CHECK(max_abs_diff(cov, Matrix::identity(n)) * n <= 1e-2);
  CHECK(frobenius_norm([&] {
          Matrix d = cov;
          for (std::size_t i = 0; i < n; ++i) d(i, i) -= 1.0;
          return d;
        }()) <= 1e-2);
}

TEST_CASE("pca energy never exceeds total energy") {
  Rng rng(13);
  GoodnessParams p;
  p.pca_k = 4;
  auto s = GoodnessState::for_width(10);
  fit_projections_from_batch(M::pca_energy, oracle::random_matrix(rng, 50, 10), s, p);
  REQUIRE(s.pca->rows() == 4);
  const Matrix gram = matmul_nt(*s.pca, *s.pca);
  CHECK(max_abs_diff(gram, Matrix::identity(4)) <= 1e-8);
  for (int t = 0; t < 100; ++t) {
    const Matrix h = oracle::random_matrix(rng, 3, 10);
    const auto r = goodness_batch(M::pca_energy, h, s, p);
    for (std::size_t b = 0; b < 3; ++b) CHECK(r.values(b, 0) <= sos(h.row(b)) + 1e-8);
  }
}

TEST_CASE("projections refit from the covariance EMA") {
  Rng rng(14);
  auto s = GoodnessState::for_width(6);
  const Matrix first = oracle::random_matrix(rng, 20, 6);
  goodness_batch(M::pca_energy, first, s, {}, true);
  const Matrix fitted = *s.pca;
  goodness_batch(M::pca_energy, oracle::random_matrix(rng, 20, 6, 3.0), s, {}, true);
  CHECK(*s.pca == fitted);  // frozen within an epoch
  refit_projections(M::pca_energy, s, {});
  CHECK(!(*s.pca == fitted));
  CHECK(s.updates == 2);
}

TEST_CASE("box-counting dimension") {
  CHECK(box_counting_dimension(std::vector<double>(10, 0.0)) == 0.0);
  CHECK(box_counting_dimension(std::vector<double>(10, 2.5)) == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<double> spread(1024);
  for (std::size_t i = 0; i < spread.size(); ++i) spread[i] = (i + 0.5) / 1024.0;
  CHECK(box_counting_dimension(spread) == doctest::Approx(1.0).epsilon(1e-12));
  // Sign and scale do not matter.
  std::vector<double> flipped = spread;
  for (auto& v : flipped) v *= -7.0;
  CHECK(box_counting_dimension(flipped) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("trimmed count") {
  CHECK(trimmed_count(3, 1.0 / 3.0) == 1);
  CHECK(trimmed_count(2000, 0.1) == 200);
  CHECK(trimmed_count(5, 0.1) == 0);
}

TEST_CASE("contrastive examples") {
  Rng rng(31);
  const Matrix h = oracle::random_matrix(rng, 3, 5);
  const auto [tp, tn] = goodness_contrastive(M::triplet_margin, h, h, {});
  for (std::size_t b = 0; b < 3; ++b) CHECK(tp.values(b, 0) == sos(h.row(b)));

  const auto [sp, sn] = goodness_contrastive(M::softmax_energy_margin, h, h, {});
  for (std::size_t b = 0; b < 3; ++b) CHECK(sp.values(b, 0) == doctest::Approx(std::log(0.5)).epsilon(1e-15));

  // Monotone increasing in the positive energy, approaching 0 from below.
  const Matrix neg = rows_of({{1, 1}});
  double prev = -INFINITY;
  for (double s = 0.0; s <= 20.0; s += 0.25) {
    const auto [p, n] = goodness_contrastive(M::softmax_energy_margin, rows_of({{s, s}}), neg, {});
    CHECK(p.values(0, 0) > prev);
    CHECK(p.values(0, 0) < 0.0);
    prev = p.values(0, 0);
  }
  CHECK(prev > -1e-100);

  // nt_xent on identical rows: scalar evaluation of the cross-entropy with
  // smoothed cosines.
  GoodnessParams tau;
  tau.ntxent_tau = 0.5;
  const Matrix same = rows_of({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  const auto [np, nn] = goodness_contrastive(M::nt_xent, same, same, tau);
  const double sq = 14.0;
  const double c = sq / (sq + tau.epsilon * tau.epsilon);
  const double expected = -c / 0.5 + std::log(2.0 * std::exp(c / 0.5));
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(np.values(b, 0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(np.values(b, 0) == doctest::Approx(-std::log(1.0 / 2.0)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(goodness_contrastive(M::nt_xent, rows_of({{1, 2}}), rows_of({{1, 2}}), {}), ShapeError);
  CHECK_THROWS_AS(goodness_contrastive(M::info_nce, rows_of({{1, 2}}), rows_of({{1, 2}}), {}), ShapeError);
  CHECK_THROWS_AS(goodness_contrastive(M::triplet_margin, h, rows_of({{1, 2}}), {}), ShapeError);
}

TEST_CASE("inference scores rank like the energy for coupled objectives") {
  Rng rng(41);
  const Matrix h = oracle::random_matrix(rng, 4, 6);
  auto s = GoodnessState::for_width(6);
  for (const char* name : {"decorrelation", "triplet_margin", "info_nce", "nt_xent"}) {
    const Matrix sc = inference_score(registry_lookup(name), h, s, {});
    for (std::size_t b = 0; b < 4; ++b) CHECK(sc(b, 0) == doctest::Approx(sos(h.row(b))).epsilon(1e-14));
  }
  const Matrix sm = inference_score(registry_lookup("softmax_energy_margin"), h, s, {});
  for (std::size_t b = 0; b < 4; ++b) CHECK(sm(b, 0) == doctest::Approx(sos(h.row(b)) / 6.0).epsilon(1e-14));
}

TEST_CASE("params validation") {
  GoodnessParams p;
  CHECK_NOTHROW(p.validate());
  p.temperature = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.trim_fraction = 1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.ntxent_tau = -1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.delta = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}
