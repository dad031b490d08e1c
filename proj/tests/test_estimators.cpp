#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "refdiff/errors.hpp"
#include "refdiff/estimators.hpp"

using namespace refdiff;

namespace {

double tukey_psi_oracle(double u, double c) {
  if (std::abs(u) >= c) return 0.0;
  const double t = 1.0 - (u / c) * (u / c);
  return u * t * t;
}

double plain_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Root of sum psi((v - w) / s) by bisection on a sign-changing bracket.
double bisect_root(const std::vector<double>& v, double s, double c, double lo, double hi) {
  auto f = [&](double w) {
    double acc = 0.0;
    for (double x : v) acc += tukey_psi_oracle((x - w) / s, c);
    return acc;
  };
  double flo = f(lo);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if ((fm > 0) == (flo > 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

std::vector<double> random_weights(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> ud(0.1, 1.0);
  std::vector<double> w(n);
  for (auto& x : w) x = ud(rng);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= total;
  double drift = 1.0 - std::accumulate(w.begin(), w.end(), 0.0);
  w.back() += drift;
  return w;
}

void check_weights_normalized(const std::vector<double>& w) {
  double total = 0.0;
  for (double x : w) {
    CHECK(x >= 0.0);
    total += x;
  }
  CHECK(std::abs(total - 1.0) <= 1e-10);
}

}  // namespace

TEST_CASE("b_weight reference values") {
  const LossSpec tukey = LossSpec::tukey();
  CHECK(b_weight(0.0, 1.0, tukey) == 1.0);
  CHECK(b_weight(10.0, 1.0, tukey) == 0.0);
  CHECK(b_weight(kTukeyDefaultTuning / 2, 1.0, tukey) == doctest::Approx(0.5625).epsilon(1e-15));
  for (double y : {-3.0, 0.5, 7.0, 1e6}) CHECK(b_weight(y, 1.0, LossSpec::squared()) == 1.0);
  CHECK(b_weight(0.5, 1.0, LossSpec::huber()) == 1.0);
  CHECK(b_weight(2.69, 1.0, LossSpec::huber()) == doctest::Approx(0.5));
  CHECK(b_weight(-4.0, 2.0, LossSpec::absolute()) == doctest::Approx(0.5));
}

TEST_CASE("psi matches the derivative of each loss") {
  CHECK(psi(2.0, LossSpec::squared()) == 2.0);
  CHECK(psi(-2.0, LossSpec::absolute()) == -1.0);
  CHECK(psi(5.0, LossSpec::huber(1.5)) == 1.5);
  CHECK(psi(1.0, LossSpec::tukey()) == doctest::Approx(tukey_psi_oracle(1.0, kTukeyDefaultTuning)));
  CHECK(psi(5.0, LossSpec::tukey()) == 0.0);
}

TEST_CASE("settings validation") {
  CHECK_THROWS_AS(LossSpec::tukey(0.0).validate(), InvalidInput);
  CHECK_THROWS_AS(LossSpec::huber(-1.0).validate(), InvalidInput);
  CHECK_NOTHROW(LossSpec{LossFamily::SquaredError, -3.0}.validate());
  IrlsSettings cfg;
  cfg.max_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  cfg = {};
  cfg.tol = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  cfg = {};
  cfg.scale_floor = -1.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}

TEST_CASE("WeightedSample invariants") {
  CHECK_THROWS_AS(WeightedSample({}, {}), InvalidInput);
  CHECK_THROWS_AS(WeightedSample({1.0, 2.0}, {1.0}), InvalidInput);
  CHECK_THROWS_AS(WeightedSample({1.0, 2.0}, {0.6, 0.6}), InvalidInput);
  CHECK_THROWS_AS(WeightedSample({1.0, 2.0}, {1.5, -0.5}), InvalidInput);
  CHECK_THROWS_AS(WeightedSample::uniform({1.0, std::nan("")}), InvalidInput);
  CHECK_NOTHROW(WeightedSample({1.0, 2.0}, {0.25, 0.75}));
}

TEST_CASE("weighted_median conventions") {
  CHECK(weighted_median(WeightedSample::uniform({1, 2, 3})) == 2.0);
  CHECK(weighted_median(WeightedSample::uniform({1, 2, 100, 101})) == 51.0);
  CHECK(weighted_median(WeightedSample::uniform({0, 0, 0, 1e6})) == 0.0);
  CHECK(weighted_median(WeightedSample({1, 2, 3}, {0.6, 0.2, 0.2})) == 1.0);
  CHECK(weighted_median(WeightedSample({1, 2, 3}, {0.2, 0.2, 0.6})) == 3.0);
  // cumulative weight lands exactly on 1/2; the next value with weight is 5
  CHECK(weighted_median(WeightedSample({1, 3, 5}, {0.5, 0.0, 0.5})) == 3.0);
  const auto fit = weighted_median_fit(WeightedSample::uniform({4, 1, 9}));
  CHECK(fit.location == 4.0);
  check_weights_normalized(fit.final_weights);
  CHECK(fit.final_weights[0] == 1.0);
}

TEST_CASE("weighted_mad reference values") {
  CHECK(weighted_mad(WeightedSample::uniform({1, 2, 3, 4, 5}), 3.0) ==
        doctest::Approx(1.4826).epsilon(1e-15));
  CHECK(weighted_mad(WeightedSample::uniform({7, 7, 7}), 7.0) == 0.0);
  CHECK(weighted_mad(WeightedSample::uniform({0, 0, 0, 0, 1000}), 0.0) == 0.0);
}

TEST_CASE("m_estimate reference cases") {
  SUBCASE("symmetric pair") {
    for (const LossSpec& loss : {LossSpec::tukey(), LossSpec::huber(), LossSpec::squared()}) {
      CHECK(m_estimate(WeightedSample::uniform({-1, 1}), loss, 1.0, 0.0).location == doctest::Approx(0.0));
    }
  }
  SUBCASE("constant sample") {
    const auto r = m_estimate(WeightedSample::uniform({7, 7, 7, 7}), LossSpec::tukey(), 1.0, 7.0);
    CHECK(r.location == 7.0);
    for (double w : r.final_weights) CHECK(w == doctest::Approx(0.25));
  }
  SUBCASE("gross outlier gets zero weight") {
    const std::vector<double> v{0.9, 1.0, 1.1, 1.2, 0.8, 100};
    const auto s = WeightedSample::uniform(v);
    const double med = plain_median(v);
    std::vector<double> dev;
    for (double x : v) dev.push_back(std::abs(x - med));
    const double scale = 1.4826 * plain_median(dev);
    const double oracle = bisect_root(v, scale, kTukeyDefaultTuning, 0.85, 1.15);
    CHECK(oracle == doctest::Approx(1.0).epsilon(1e-12));

    const auto r = m_estimate(s, LossSpec::tukey(), weighted_mad(s, weighted_median(s)), weighted_median(s));
    CHECK(r.converged);
    CHECK(std::abs(r.location - oracle) <= 1e-9);
    CHECK(std::abs(r.location - 1.0) <= 1e-3);
    CHECK(r.final_weights[5] == 0.0);
    check_weights_normalized(r.final_weights);
  }
  SUBCASE("squared loss is the weighted mean in one iteration") {
    const WeightedSample s({1.0, 2.0, 10.0}, {0.5, 0.25, 0.25});
    const auto r = m_estimate(s, LossSpec::squared(), 1.0, 0.0);
    CHECK(r.location == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(r.iterations == 1);
    CHECK(r.final_weights[0] == doctest::Approx(0.5));
  }
  SUBCASE("all weights zero is an error") {
    CHECK_THROWS_AS(m_estimate(WeightedSample::uniform({100, 101}), LossSpec::tukey(), 1.0, 0.0),
                    DegenerateScale);
  }
}

TEST_CASE("mm_estimate reference cases") {
  CHECK(mm_estimate(WeightedSample::uniform({3, 3, 3})).location == 3.0);
  CHECK(mm_estimate(WeightedSample::uniform({-2, -1, 0, 1, 2})).location == doctest::Approx(0.0));
  // MAD is zero; the floor concentrates everything on the majority value
  const auto r = mm_estimate(WeightedSample::uniform({0, 0, 0, 0, 1000}));
  CHECK(r.location == 0.0);
  CHECK(r.final_weights[4] == 0.0);
}

TEST_CASE("trimmed_mean reference cases") {
  CHECK(trimmed_mean(WeightedSample::uniform({1, 2, 3, 4, 5}), 0.2) == doctest::Approx(3.0));
  CHECK(trimmed_mean(WeightedSample({1, 2, 9}, {0.5, 0.25, 0.25}), 0.0) == doctest::Approx(3.25));
  CHECK(trimmed_mean(WeightedSample::uniform({0, 0, 0, 0, 1000}), 0.2) == 0.0);
  CHECK_THROWS_AS(trimmed_mean(WeightedSample::uniform({1, 2}), 0.5), InvalidInput);
  check_weights_normalized(trimmed_mean_fit(WeightedSample::uniform({5, 1, 4, 2, 3}), 0.2).final_weights);
}

TEST_CASE("fixed-point residual at every converged IRLS result") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    auto v = gaussian(rng, 5 + trial % 20);
    if (trial % 3 == 0) v.back() = 1e3;
    const WeightedSample s(v, random_weights(rng, v.size()));
    const auto mm = mm_estimate(s);
    if (mm.converged) CHECK(std::abs(fixed_point_residual(s, LossSpec::tukey(), mm.scale, mm.location)) <= 1e-8);
    check_weights_normalized(mm.final_weights);
    const auto hu = m_estimate(s, LossSpec::huber(), 1.0, weighted_median(s));
    if (hu.converged) CHECK(std::abs(fixed_point_residual(s, LossSpec::huber(), 1.0, hu.location)) <= 1e-8);
  }
}

TEST_CASE("translation, scale and permutation equivariance") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + trial % 17;
    auto v = gaussian(rng, n);
    const auto w = random_weights(rng, n);
    const double shift = 50.0 * (trial % 5) - 100.0;
    const double alpha = 0.1 + 0.37 * (trial % 7);

    std::vector<double> shifted(v), scaled(v);
    for (auto& x : shifted) x += shift;
    for (auto& x : scaled) x *= alpha;
    const WeightedSample s(v, w), st(shifted, w), ss(scaled, w);

    auto estimators = std::vector<double (*)(const WeightedSample&)>{
        [](const WeightedSample& x) { return weighted_median(x); },
        [](const WeightedSample& x) { return mm_estimate(x).location; },
        [](const WeightedSample& x) { return trimmed_mean(x, 0.1); },
    };
    for (auto est : estimators) {
      const double base = est(s);
      CHECK(std::abs(est(st) - (base + shift)) <= 1e-9 * std::max(1.0, std::abs(shift)));
      CHECK(std::abs(est(ss) - alpha * base) <= 1e-9);
    }

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pv, pw;
    for (auto i : perm) {
      pv.push_back(v[i]);
      pw.push_back(w[i]);
    }
    const WeightedSample sp(pv, pw);
    CHECK(weighted_median(sp) == weighted_median(s));
    CHECK(mm_estimate(sp).location == mm_estimate(s).location);
    CHECK(trimmed_mean(sp, 0.1) == trimmed_mean(s, 0.1));
    CHECK(weighted_mad(sp, 0.3) == weighted_mad(s, 0.3));
  }
}

TEST_CASE("breakdown under less than half contamination") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 11;
    const std::size_t bad = 1 + trial % 5;
    auto v = gaussian(rng, n);
    const double lo = *std::min_element(v.begin(), v.begin() + (n - bad));
    const double hi = *std::max_element(v.begin(), v.begin() + (n - bad));
    for (std::size_t i = n - bad; i < n; ++i) v[i] = (trial % 2 ? 1e9 : -1e9) * (i % 2 ? 1 : -1) * (trial % 4 < 2 ? 1 : -1);
    const auto s = WeightedSample::uniform(v);
    for (double est : {weighted_median(s), mm_estimate(s).location}) {
      CHECK(est >= lo);
      CHECK(est <= hi);
    }
    std::vector<ModelVector> pts;
    for (double x : v) pts.push_back(ModelVector::Constant(2, x));
    const std::vector<double> uw(n, 1.0 / n);
    const ModelVector g = weiszfeld(pts, uw);
    CHECK(g[0] >= lo - 1e-6);
    CHECK(g[0] <= hi + 1e-6);
  }
}

TEST_CASE("weiszfeld reference cases") {
  const ModelVector p = (ModelVector(3) << 1.0, -2.0, 5.0).finished();
  CHECK(weiszfeld(std::vector<ModelVector>{p}, std::vector<double>{1.0}) == p);

  const std::vector<ModelVector> tri{(ModelVector(2) << 0.0, 0.0).finished(),
                                     (ModelVector(2) << 1.0, 0.0).finished(),
                                     (ModelVector(2) << 0.5, std::sqrt(3.0) / 2).finished()};
  const std::vector<double> third(3, 1.0 / 3);
  const ModelVector c = weiszfeld(tri, third);
  CHECK(c[0] == doctest::Approx(0.5).epsilon(1e-8));
  CHECK(c[1] == doctest::Approx(std::sqrt(3.0) / 6).epsilon(1e-8));

  const auto r = geometric_median(tri, third);
  CHECK(r.converged);
  check_weights_normalized(r.final_weights);

  // Coincident start with a dominant data point: the optimum is that point.
  const std::vector<ModelVector> heavy{(ModelVector(2) << 0.0, 0.0).finished(),
                                       (ModelVector(2) << 1.0, 0.0).finished(),
                                       (ModelVector(2) << 0.0, 1.0).finished()};
  const ModelVector h = weiszfeld(heavy, std::vector<double>{0.6, 0.2, 0.2});
  CHECK(h.norm() <= 1e-9);
}

TEST_CASE("weiszfeld agrees with a grid-search oracle") {
  const std::vector<ModelVector> pts{(ModelVector(2) << 0.0, 0.0).finished(),
                                     (ModelVector(2) << 1.0, 0.0).finished(),
                                     (ModelVector(2) << 10.0, 0.0).finished()};
  const std::vector<double> w(3, 1.0 / 3);
  auto cost = [&](double x, double y) {
    double acc = 0.0;
    for (const auto& p : pts) acc += std::hypot(p[0] - x, p[1] - y) / 3.0;
    return acc;
  };
  // coarse grid then successive refinement around the best cell
  double bx = 0.0, by = 0.0, step = 0.5;
  for (double x = -2; x <= 12; x += step)
    for (double y = -5; y <= 5; y += step)
      if (cost(x, y) < cost(bx, by)) bx = x, by = y;
  for (int level = 0; level < 30; ++level) {
    const double cx = bx, cy = by;
    for (int i = -10; i <= 10; ++i)
      for (int j = -10; j <= 10; ++j)
        if (cost(cx + i * step / 10, cy + j * step / 10) < cost(bx, by)) bx = cx + i * step / 10, by = cy + j * step / 10;
    step /= 5;
  }
  CHECK(std::abs(bx - 1.0) <= 1e-6);
  CHECK(std::abs(by) <= 1e-6);
  const ModelVector g = weiszfeld(pts, w);
  CHECK(std::abs(g[0] - bx) <= 1e-4);
  CHECK(std::abs(g[1] - by) <= 1e-4);
}
