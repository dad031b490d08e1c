#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"
#include "refdiff/errors.hpp"
#include "refdiff/simulate.hpp"

using namespace refdiff;

namespace {

LinearModelTask task_with(std::size_t dim, double noise, ModelVector w) {
  LinearModelTask t;
  t.dimension = dim;
  t.noise_variance = noise;
  t.w_true = std::move(w);
  return t;
}

// Plain-array ATC with uniform averaging over a fully connected graph and
// its own copy of the documented per-agent seeding.
std::vector<double> reference_atc_msd(const LinearModelTask& task, std::size_t K, double mu,
                                      std::size_t iters, std::uint64_t seed) {
  const std::size_t M = task.dimension;
  std::vector<std::mt19937_64> engines;
  std::vector<std::normal_distribution<double>> normals(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      0u, static_cast<std::uint32_t>(k), 1u};
    engines.emplace_back(seq);
  }
  std::vector<std::vector<double>> w(K, std::vector<double>(M, 0.0)), phi = w;
  std::vector<double> out;
  for (std::size_t i = 0; i < iters; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> u(M);
      for (auto& x : u) x = normals[k](engines[k]);
      double d = normals[k](engines[k]) * std::sqrt(task.noise_variance);
      double pred = 0.0;
      for (std::size_t m = 0; m < M; ++m) d += u[m] * task.w_true[m];
      for (std::size_t m = 0; m < M; ++m) pred += u[m] * w[k][m];
      for (std::size_t m = 0; m < M; ++m) phi[k][m] = w[k][m] + mu * u[m] * (d - pred);
    }
    std::vector<double> avg(M, 0.0);
    for (std::size_t l = 0; l < K; ++l)
      for (std::size_t m = 0; m < M; ++m) avg[m] += phi[l][m] / static_cast<double>(K);
    double msd = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      w[k] = avg;
      for (std::size_t m = 0; m < M; ++m) msd += (task.w_true[m] - avg[m]) * (task.w_true[m] - avg[m]);
    }
    out.push_back(msd / static_cast<double>(K));
  }
  return out;
}

}  // namespace

TEST_CASE("sample_data") {
  RandomStream rng(1, 0, 0);
  const auto zero = task_with(4, 0.0, ModelVector::Zero(4));
  CHECK(sample_data(zero, 0, rng).d == 0.0);
  const auto exact = task_with(4, 0.0, (ModelVector(4) << 1, -2, 3, 0.5).finished());
  const auto s = sample_data(exact, 0, rng);
  CHECK(s.d == doctest::Approx(s.u.dot(exact.w_true)).epsilon(1e-15));

  // d - u^T w_true is the noise; its mean over 1e5 draws sits within 3 sigma / sqrt(n)
  const auto noisy = task_with(3, 0.04, ModelVector::Ones(3));
  RandomStream r2(2, 0, 0);
  const int n = 100000;
  double acc = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto x = sample_data(noisy, 0, r2);
    const double e = x.d - x.u.dot(noisy.w_true);
    acc += e;
    sq += e * e;
  }
  CHECK(std::abs(acc / n) <= 3.0 * 0.2 / std::sqrt(double(n)));
  CHECK(sq / n == doctest::Approx(0.04).epsilon(0.02));
}

TEST_CASE("stochastic_gradient") {
  const ModelVector wt = (ModelVector(3) << 1, 2, 3).finished();
  RandomStream rng(3, 0, 0);
  const auto clean = task_with(3, 0.0, wt);
  const auto s = sample_data(clean, 0, rng);
  CHECK(stochastic_gradient(wt, s.u, s.d).norm() <= 1e-14);
  CHECK(stochastic_gradient(wt, ModelVector::Zero(3), 4.0).norm() == 0.0);

  // E grad = R (w - w_true) with R = I
  const auto noisy = task_with(3, 0.01, wt);
  const ModelVector w = ModelVector::Zero(3);
  ModelVector mean = ModelVector::Zero(3);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto x = sample_data(noisy, 0, rng);
    mean += stochastic_gradient(w, x.u, x.d) / n;
  }
  // per-coordinate std of the gradient is about ||w - w_true|| + 1
  CHECK((mean - (w - wt)).cwiseAbs().maxCoeff() <= 5.0 * 4.8 / std::sqrt(double(n)));
}

TEST_CASE("adapt_step and apply_attack") {
  const ModelVector w = ModelVector::LinSpaced(4, 0, 3);
  CHECK(adapt_step(w, ModelVector::Ones(4), 0.0) == w);
  CHECK(adapt_step(w, ModelVector::Zero(4), 0.3) == w);
  CHECK(adapt_step(ModelVector::Zero(4), ModelVector::Ones(4), 0.1).isApprox(ModelVector::Constant(4, -0.1)));

  CHECK(apply_attack(w, AttackSpec::none()) == w);
  CHECK(apply_attack(ModelVector::Zero(3), AttackSpec::additive_shift(1000)) == ModelVector::Constant(3, 1000));
  const auto flip = AttackSpec::sign_flip(1.0);
  CHECK(apply_attack(apply_attack(w, flip), flip) == w);
  const ModelVector r = ModelVector::Constant(4, 9.0);
  CHECK(apply_attack(w, AttackSpec::value_replace(r)) == r);
  CHECK_THROWS_AS(AttackSpec::value_replace(ModelVector::Ones(2)).validate(4), InvalidInput);
}

TEST_CASE("msd helpers") {
  const ModelVector ref = ModelVector::Ones(3);
  const std::vector<ModelVector> same(4, ref);
  CHECK(msd(same, ref) == 0.0);
  ModelVector e1 = ref;
  e1[0] += 1.0;
  CHECK(msd(std::vector<ModelVector>{e1}, ref) == 1.0);
  std::vector<ModelVector> dev{ref + ModelVector::Constant(3, 0.5), ref - ModelVector::Constant(3, 0.2)};
  std::vector<ModelVector> dev2{ref + ModelVector::Constant(3, 1.0), ref - ModelVector::Constant(3, 0.4)};
  CHECK(msd(dev2, ref) == doctest::Approx(4.0 * msd(dev, ref)));
  CHECK(steady_window(2000) == 200);
  CHECK(steady_window(5) == 1);
  CHECK(steady_window(5, 1.0) == 5);
}

TEST_CASE("run_diffusion matches a plain reference implementation") {
  const auto task = task_with(10, 0.01, ModelVector::LinSpaced(10, -1, 1));
  const auto topo = build_topology({TopologyKind::FullyConnected}, 8, {});
  DiffusionSettings s;
  s.iterations = 50;
  s.seed = 0x1234567890abcdefULL;
  const auto trace = run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mean(), s);
  const auto ref = reference_atc_msd(task, 8, s.step_size, 50, s.seed);
  REQUIRE(trace.msd.size() == 50);
  for (std::size_t i = 0; i < 50; ++i) CHECK(std::abs(trace.msd[i] - ref[i]) <= 1e-12);
}

TEST_CASE("clean Mean-rule diffusion reaches a small steady state") {
  LinearModelTask task = task_with(10, 0.01, ModelVector::Ones(10));
  const auto topo = build_topology({TopologyKind::FullyConnected}, 32, {});
  DiffusionSettings s;
  s.seed = 42;
  const auto trace = run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mean(), s);
  CHECK(trace.msd.back() <= 1e-2);
  // theory for a fully connected uniform network: mu sigma^2 M / (2 K)
  const double theory = 0.01 * 0.01 * 10 / (2.0 * 32);
  const double observed = steady_state_msd(std::vector<Trace>{trace});
  CHECK(observed == doctest::Approx(theory).epsilon(0.5));
  double early = 0, late = 0;
  for (std::size_t i = 200; i < 400; ++i) early += trace.msd[i];
  for (std::size_t i = 1800; i < 2000; ++i) late += trace.msd[i];
  CHECK(late <= early);
}

TEST_CASE("noiseless start at the optimum stays there under every rule") {
  const auto task = task_with(5, 0.0, ModelVector::LinSpaced(5, 0, 1));
  const auto topo = build_topology({TopologyKind::Ring}, 6, {});
  DiffusionSettings s;
  s.iterations = 30;
  s.initial = task.w_true;
  for (const auto& spec : {AggregatorSpec::mean(), AggregatorSpec::coordinate_median(),
                           AggregatorSpec::mm_estimator(), AggregatorSpec::geometric_median(),
                           AggregatorSpec::trimmed_mean(0.2)}) {
    const auto trace = run_diffusion(task, topo, uniform_combination(topo), spec, s);
    for (double x : trace.msd) CHECK(x <= 1e-28);
  }
}

TEST_CASE("determinism and error paths") {
  const auto task = task_with(4, 0.01, ModelVector::Ones(4));
  const std::vector<std::size_t> one{0};
  const auto topo = build_topology({TopologyKind::FullyConnected}, 8, one);
  DiffusionSettings s;
  s.iterations = 100;
  s.seed = 9;
  s.attack = AttackSpec::additive_shift(1000);
  const auto a = run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mm_estimator(), s);
  const auto b = run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mm_estimator(), s);
  CHECK(a.msd == b.msd);
  CHECK(a.malicious_weight_mass == b.malicious_weight_mass);

  const std::vector<std::size_t> many{0, 1, 2, 3};
  const auto bad = build_topology({TopologyKind::FullyConnected}, 8, many);
  CHECK_THROWS_AS(run_diffusion(task, bad, uniform_combination(bad), AggregatorSpec::mm_estimator(), s),
                  AssumptionViolation);
  s.override_assumption1 = true;
  CHECK_NOTHROW(run_diffusion(task, bad, uniform_combination(bad), AggregatorSpec::mm_estimator(), s));

  s.iterations = 0;
  CHECK_THROWS_AS(run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mean(), s), InvalidInput);
}

TEST_CASE("mean rule diverges to a recorded event under a huge shift") {
  const auto task = task_with(4, 0.01, ModelVector::Ones(4));
  const std::vector<std::size_t> one{0};
  const auto topo = build_topology({TopologyKind::FullyConnected}, 4, one);
  DiffusionSettings s;
  s.iterations = 1000;
  s.step_size = 5.0;  // beyond the mean-square stability limit
  s.attack = AttackSpec::additive_shift(1e10);
  const auto t = run_diffusion(task, topo, uniform_combination(topo), AggregatorSpec::mean(), s);
  REQUIRE(t.divergence.has_value());
  CHECK(t.msd.size() + 1 == t.divergence->iteration);
  CHECK(std::isinf(steady_state_msd(std::vector<Trace>{t})));
}

TEST_CASE("benign oracle run uses only benign data") {
  const auto task = task_with(4, 0.01, ModelVector::Ones(4));
  const std::vector<std::size_t> one{0};
  const auto topo = build_topology({TopologyKind::FullyConnected}, 8, one);
  DiffusionSettings s;
  s.iterations = 300;
  s.attack = AttackSpec::additive_shift(1000);
  const auto t = run_benign_oracle(task, topo, uniform_combination(topo), s);
  CHECK(t.msd.back() < 1e-2);
  for (double m : t.malicious_weight_mass) CHECK(m == 0.0);
}

TEST_CASE("limit_point") {
  const ModelVector wo = ModelVector::LinSpaced(3, 1, 3);
  LinearModelTask shared = task_with(3, 0.01, wo);
  const std::vector<std::size_t> agents{0, 1, 2};
  CHECK(limit_point(shared, agents, Eigen::Vector3d(0.2, 0.3, 0.5)).isApprox(wo));

  LinearModelTask two = task_with(3, 0.01, wo);
  two.agent_w_true = {ModelVector::Zero(3), ModelVector::Ones(3)};
  const std::vector<std::size_t> pair{0, 1};
  CHECK(limit_point(two, pair, Eigen::Vector2d(0.5, 0.5)).isApprox(ModelVector::Constant(3, 0.5)));

  // non-identity Hessians and non-uniform p against gradient descent on the weighted sum
  std::vector<QuadraticObjective> obj;
  Eigen::Matrix3d r0, r1, r2;
  r0 << 2, 0.3, 0, 0.3, 1, 0.1, 0, 0.1, 0.5;
  r1 << 1, 0, 0, 0, 3, -0.4, 0, -0.4, 1;
  r2 << 0.7, 0.2, 0.1, 0.2, 0.9, 0, 0.1, 0, 2;
  obj.push_back({r0, Eigen::Vector3d(1, -1, 0)});
  obj.push_back({r1, Eigen::Vector3d(0, 2, 5)});
  obj.push_back({r2, Eigen::Vector3d(-3, 0, 1)});
  const Eigen::Vector3d p(2.0 / 7, 3.0 / 7, 2.0 / 7);
  Eigen::Vector3d w = Eigen::Vector3d::Zero();
  for (int it = 0; it < 20000; ++it) {
    Eigen::Vector3d g = Eigen::Vector3d::Zero();
    for (int k = 0; k < 3; ++k) g += p[k] * obj[k].hessian * (w - obj[k].minimizer);
    w -= 0.2 * g;
  }
  const ModelVector lp = limit_point(obj, p);
  CHECK((lp - w).cwiseAbs().maxCoeff() <= 1e-8);

  std::vector<QuadraticObjective> singular{{Eigen::Matrix3d::Zero(), Eigen::Vector3d::Ones()}};
  CHECK_THROWS_AS(limit_point(singular, Eigen::VectorXd::Ones(1)), InvalidInput);
}

TEST_CASE("gradient noise bound") {
  const auto task = task_with(5, 0.01, ModelVector::Ones(5));
  RandomStream rng(4, 0, 0, RandomStream::Purpose::NoiseProbe);
  std::vector<GradientNoiseStats> probes;
  for (double r : {0.0, 0.5, 1.0, 2.0}) {
    probes.push_back(measure_gradient_noise(task, 0, ModelVector::Ones(5) * (1.0 + r), 20000, rng));
  }
  for (const auto& pr : probes) CHECK(pr.mean.norm() < 0.2);
  // for Gaussian regressors E||s||^2 = (M + 1) ||w - w_true||^2 + M sigma^2
  const auto bound = fit_noise_bound(probes);
  CHECK(bound.slack >= 0.0);
  CHECK(bound.beta2 == doctest::Approx(6.0).epsilon(0.15));
  CHECK(bound.sigma2 == doctest::Approx(0.05).epsilon(0.5));
}
