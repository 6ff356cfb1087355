#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cib/estimators.hpp"
#include "doctest.h"

using namespace cib;

namespace {

const Tensor kHandTable = Tensor::from({2, 2}, {-1.0, -2.0, -3.0, -1.5});

// Direct double sum over a dense matrix, no tensor ops.
double club_direct(const std::vector<std::vector<double>>& m) {
  const double n = static_cast<double>(m.size());
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) s += m[i][i] - m[j][i];
  return s / (n * n);
}

double l1out_direct(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) acc += std::exp(m[j][i]);
    s += m[i][i] - std::log(acc / static_cast<double>(n - 1));
  }
  return s / static_cast<double>(n);
}

std::vector<std::vector<double>> to_rows(const Tensor& m) {
  std::vector<std::vector<double>> rows(m.shape()[0], std::vector<double>(m.shape()[1]));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) rows[i][j] = m.at(i, j);
  return rows;
}

double scalar_log_normal(double t, double mu, double lv) {
  return -0.5 * (std::log(2.0 * M_PI) + lv + (t - mu) * (t - mu) * std::exp(-lv));
}

DiagGaussian random_rows(std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::vector<double> mu(n * d), lv(n * d);
  for (auto& x : mu) x = u(rng);
  for (auto& x : lv) x = u(rng);
  return DiagGaussian(Tensor::from({n, d}, mu, grad), Tensor::from({n, d}, lv, grad));
}

std::vector<std::vector<double>> random_table(std::size_t r, std::size_t c, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> t(r, std::vector<double>(c));
  double total = 0.0;
  for (auto& row : t)
    for (auto& p : row) total += (p = u(rng) < 0.2 ? 0.0 : u(rng));
  if (total == 0.0) total = t[0][0] = 1.0;
  for (auto& row : t)
    for (auto& p : row) p /= total;
  return t;
}

double trained_lower_bound(Estimator which, double rho, std::size_t d, std::size_t n_eval, double step_scale,
                           std::uint64_t seed, std::size_t infonce_batch = 256) {
  Rng rng(seed);
  Critic critic(d, d, 32, rng);
  CriticTraining cfg;
  cfg.steps = static_cast<std::size_t>(cfg.steps * step_scale);
  cfg.infonce_steps = static_cast<std::size_t>(cfg.infonce_steps * step_scale);
  const PairSampler sampler = [rho, d](std::size_t n, Rng& r) { return sample_correlated_gaussian(rho, d, n, r); };
  fit_critic(critic, which, sampler, cfg, rng);
  const auto [u, v] = sample_correlated_gaussian(rho, d, n_eval, rng);
  return evaluate_lower_bound(critic, which, u, v, infonce_batch).value;
}

}  // namespace

TEST_CASE("hand table") {
  const MIEstimate club = club_from_log_prob_matrix(kHandTable);
  CHECK(club.value == doctest::Approx(0.625).epsilon(1e-14));
  CHECK(club.bound == BoundDirection::kUpper);
  CHECK(club.n_samples == 2);
  const MIEstimate l1o = l1out_from_log_prob_matrix(kHandTable);
  CHECK(l1o.value == doctest::Approx(1.25).epsilon(1e-14));
  CHECK(l1o.estimator == Estimator::kL1Out);
  CHECK(club_direct(to_rows(kHandTable)) == doctest::Approx(0.625));
  CHECK(l1out_direct(to_rows(kHandTable)) == doctest::Approx(1.25));
}

TEST_CASE("fewer than two samples rejected") {
  const Tensor one = Tensor::from({1, 1}, {0.3});
  CHECK_THROWS_AS(club_from_log_prob_matrix(one), std::invalid_argument);
  CHECK_THROWS_AS(l1out_from_log_prob_matrix(one), std::invalid_argument);
  const DiagGaussian g(Tensor::from({1, 2}, {0, 0}), Tensor::from({1, 2}, {0, 0}));
  CHECK_THROWS_AS(club_upper(g, Tensor::from({1, 2}, {1, 1})), std::invalid_argument);
  CHECK_THROWS_AS(l1out_upper(g, Tensor::from({1, 2}, {1, 1})), std::invalid_argument);
  CHECK_THROWS_AS(nwj_lower(Tensor::from({1}, {1.0}), Tensor::from({1}, {1.0})), std::invalid_argument);
  CHECK_THROWS_AS(infonce_lower(one), std::invalid_argument);
  MineState s;
  CHECK_THROWS_AS(mine_lower(Tensor::from({1}, {1.0}), Tensor::from({1}, {1.0}), s), std::invalid_argument);
  CHECK_THROWS_AS(club_from_log_prob_matrix(Tensor::from({2, 3}, std::vector<double>(6, 0.0))), ShapeError);
}

TEST_CASE("pairwise log density matches per-pair evaluation") {
  Rng rng(3);
  const DiagGaussian cond = random_rows(7, 3, rng);
  const Tensor t = standard_normal({5, 3}, rng);
  const Tensor m = pairwise_log_prob(cond, t);
  REQUIRE(m.shape() == Shape{7, 5});
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double expect = 0.0;
      for (std::size_t k = 0; k < 3; ++k)
        expect += scalar_log_normal(t.at(j, k), cond.mu().at(i, k), cond.log_var().at(i, k));
      CHECK(m.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("fast paths agree with the dense double sum") {
  Rng rng(5);
  for (std::size_t n : {2u, 9u, 300u, 700u}) {
    const DiagGaussian cond = random_rows(n, 2, rng);
    const Tensor t = sample(cond, standard_normal({n, 2}, rng));
    const auto rows = to_rows(pairwise_log_prob(cond, t));
    CHECK(club_upper(cond, t).value == doctest::Approx(club_direct(rows)).epsilon(1e-10));
    CHECK(l1out_upper(cond, t).value == doctest::Approx(l1out_direct(rows)).epsilon(1e-10));
    const Tensor tg = Tensor::from(t.shape(), t.to_vector(), true);
    const MIEstimate graph = l1out_upper(cond, tg);
    CHECK(graph.objective.requires_grad());
    CHECK(graph.value == doctest::Approx(l1out_direct(rows)).epsilon(1e-10));
  }
}

TEST_CASE("conditional independent of x gives zero") {
  Rng rng(8);
  const std::size_t n = 50;
  const Tensor mu = broadcast_to(Tensor::from({1, 2}, {0.4, -1.0}), {n, 2});
  const DiagGaussian cond(mu, Tensor::from({2}, {0.3, -0.2}));
  const Tensor t = standard_normal({n, 2}, rng);
  CHECK(std::abs(club_upper(cond, t).value) < 1e-12);
  CHECK(std::abs(l1out_upper(cond, t).value) < 1e-12);
  const Tensor m = pairwise_log_prob(cond, t);
  CHECK(std::abs(club_from_log_prob_matrix(m).value) < 1e-12);
  CHECK(std::abs(l1out_from_log_prob_matrix(m).value) < 1e-12);
}

TEST_CASE("upper bounds on Gaussian pairs with the true conditional") {
  Rng rng(11);
  const auto [x, y] = sample_correlated_gaussian(0.8, 1, 10000, rng);
  const ConditionalModel cond = gaussian_true_conditional(0.8, 1);
  // With the true conditional CLUB converges to d rho^2 / (1 - rho^2), not to the MI.
  CHECK(std::abs(club_upper(x, y, cond).value - 0.64 / 0.36) < 0.05);
  CHECK(club_upper(x, y, cond).value > 0.5108);
  CHECK(std::abs(l1out_upper(x, y, cond).value - 0.5108) < 0.08);

  for (double rho : {0.3, 0.5, 0.8}) {
    for (std::size_t d : {1u, 4u}) {
      CAPTURE(rho);
      CAPTURE(d);
      const auto [xs, ys] = sample_correlated_gaussian(rho, d, 10000, rng);
      const double oracle = gaussian_mi_oracle(rho, d).value;
      const ConditionalModel c = gaussian_true_conditional(rho, d);
      CHECK(club_upper(xs, ys, c).value >= oracle - 0.05);
      CHECK(l1out_upper(xs, ys, c).value >= oracle - 0.05);
    }
  }
}

TEST_CASE("gaussian oracle") {
  CHECK(gaussian_mi_oracle(0.0, 5).value == 0.0);
  CHECK(gaussian_mi_oracle(0.8, 1).value == doctest::Approx(0.510826).epsilon(1e-6));
  CHECK(gaussian_mi_oracle(0.5, 3).value == doctest::Approx(0.431523).epsilon(1e-6));
  CHECK(gaussian_mi_oracle(-0.8, 1).value == gaussian_mi_oracle(0.8, 1).value);
  CHECK(gaussian_mi_oracle(0.8, 1).bound == BoundDirection::kExact);
  CHECK_THROWS_AS(gaussian_mi_oracle(1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_mi_oracle(-1.2, 1), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_mi_oracle(0.1, 0), std::invalid_argument);
}

TEST_CASE("discrete oracle") {
  CHECK(discrete_mi_oracle({{0.25, 0.25}, {0.25, 0.25}}).value == 0.0);
  CHECK(discrete_mi_oracle({{0.5, 0.0}, {0.0, 0.5}}).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(discrete_mi_oracle({{0.4, 0.1}, {0.1, 0.4}}).value == doctest::Approx(0.192745).epsilon(1e-6));
  CHECK(discrete_mi_oracle({{0.4, 0.1}, {0.1, 0.4}}).estimator == Estimator::kDiscreteExact);
  CHECK_THROWS_AS(discrete_mi_oracle({{0.5, 0.6}}), std::invalid_argument);
  CHECK_THROWS_AS(discrete_mi_oracle({{1.2, -0.2}}), std::invalid_argument);
  CHECK_THROWS_AS(discrete_mi_oracle({{0.5}, {0.25, 0.25}}), std::invalid_argument);
  CHECK_THROWS_AS(discrete_mi_oracle({}), std::invalid_argument);
}

TEST_CASE("discrete oracle is invariant to row and column permutations") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 2 + rng() % 4, c = 2 + rng() % 4;
    const auto t = random_table(r, c, rng);
    std::vector<std::size_t> pr(r), pc(c);
    std::iota(pr.begin(), pr.end(), std::size_t{0});
    std::iota(pc.begin(), pc.end(), std::size_t{0});
    std::shuffle(pr.begin(), pr.end(), rng);
    std::shuffle(pc.begin(), pc.end(), rng);
    std::vector<std::vector<double>> p(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p[i][j] = t[pr[i]][pc[j]];
    CHECK(discrete_mi_oracle(p).value == doctest::Approx(discrete_mi_oracle(t).value).epsilon(1e-12));
  }
}

TEST_CASE("deterministic map carries at least as much information about its input") {
  Rng rng(33);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n1 = 2 + rng() % 4, n2 = 2 + rng() % 4, k = 1 + rng() % 3;
    const auto joint = random_table(n1, n2, rng);
    std::vector<std::size_t> f(n1);
    for (auto& v : f) v = rng() % k;
    std::vector<std::vector<double>> x1_f(n1, std::vector<double>(k, 0.0)), x2_f(n2, std::vector<double>(k, 0.0));
    for (std::size_t a = 0; a < n1; ++a) {
      for (std::size_t b = 0; b < n2; ++b) {
        x1_f[a][f[a]] += joint[a][b];
        x2_f[b][f[a]] += joint[a][b];
      }
    }
    CHECK(discrete_mi_oracle(x1_f).value >= discrete_mi_oracle(x2_f).value - 1e-12);
  }
}

TEST_CASE("joint Gaussian oracle") {
  CHECK(gaussian_joint_mi_oracle({1, 0.8, 0.8, 1}, 2, 1).value == doctest::Approx(0.510826).epsilon(1e-6));
  CHECK(std::abs(gaussian_joint_mi_oracle({2, 0.3, 0, 0.3, 1, 0, 0, 0, 4}, 3, 2).value) < 1e-14);
  const std::vector<double> cov = {2.0, 0.5, 0.7, 0.5, 1.5, 0.2, 0.7, 0.2, 1.0};
  const double base = gaussian_joint_mi_oracle(cov, 3, 1).value;
  CHECK(base > 0.0);
  for (double c : {0.1, 3.0, 17.0}) {
    std::vector<double> scaled = cov;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const double si = i < 1 ? c : 1.0 / c, sj = j < 1 ? c : 1.0 / c;
        scaled[i * 3 + j] *= si * sj;
      }
    CHECK(gaussian_joint_mi_oracle(scaled, 3, 1).value == doctest::Approx(base).epsilon(1e-10));
  }
  CHECK_THROWS_AS(gaussian_joint_mi_oracle({1, 2, 2, 1}, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_joint_mi_oracle({1, 0.5, 0.4, 1}, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_joint_mi_oracle({1, 0, 0, 1}, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_joint_mi_oracle({1, 0, 0}, 2, 1), std::invalid_argument);
}

TEST_CASE("critic is positive and pairwise matches paired evaluation") {
  Rng rng(2);
  Critic critic(3, 2, 16, rng);
  const Tensor u = scalar_mul(standard_normal({6, 3}, rng), 30.0);
  const Tensor v = scalar_mul(standard_normal({6, 2}, rng), 30.0);
  const Tensor paired = critic(u, v);
  const Tensor all = critic.pairwise(u, v);
  REQUIRE(all.shape() == Shape{6, 6});
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(paired.at(i) > 0.0);
    CHECK(std::isfinite(paired.at(i)));
    CHECK(all.at(i, i) == doctest::Approx(paired.at(i)).epsilon(1e-12));
  }
  const Tensor shifted = cyclic_shift(v);
  for (std::size_t i = 0; i < 6; ++i) CHECK(shifted.at(i, 1) == v.at((i + 1) % 6, 1));
  CHECK(critic.params().size() == 4);
}

TEST_CASE("constant critics give zero") {
  const std::size_t n = 64;
  CHECK(nwj_lower(Tensor::full({n}, std::exp(1.0)), Tensor::full({n}, std::exp(1.0))).value ==
        doctest::Approx(0.0).epsilon(1e-15));
  CHECK(infonce_lower(Tensor::full({n, n}, 3.7)).value == doctest::Approx(0.0).scale(1.0).epsilon(1e-13));
  MineState s;
  CHECK(std::abs(mine_lower(Tensor::full({n}, 2.5), Tensor::full({n}, 2.5), s).value) < 1e-15);
}

TEST_CASE("non-positive critic output rejected") {
  const Tensor ok = Tensor::from({3}, {1.0, 2.0, 3.0});
  const Tensor bad = Tensor::from({3}, {1.0, 0.0, 3.0});
  CHECK_THROWS_AS(nwj_lower(ok, bad), DomainError);
  CHECK_THROWS_AS(nwj_lower(Tensor::from({3}, {1.0, -1.0, 3.0}), ok), DomainError);
  CHECK_THROWS_AS(infonce_lower(Tensor::from({2, 2}, {1.0, 1.0, 1.0, -0.5})), DomainError);
  MineState s;
  CHECK_THROWS_AS(mine_lower(ok, bad, s), DomainError);
  CHECK(!s.ema.has_value());
  CHECK_THROWS_AS(mine_lower(ok, ok, s, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(mine_lower(ok, ok, s, 1.5), std::invalid_argument);
}

TEST_CASE("infonce never exceeds ln N") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-12.0, 12.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 30;
    std::vector<double> s(n * n);
    for (auto& x : s) x = std::exp(u(rng));
    if (trial % 3 == 0)
      for (std::size_t i = 0; i < n; ++i) s[i * n + i] = 1e300;
    CHECK(infonce_lower(Tensor::from({n, n}, s)).value <= std::log(static_cast<double>(n)) + 1e-12);
  }
}

TEST_CASE("nwj with the optimal critic on a discrete joint") {
  const double p[2][2] = {{0.4, 0.1}, {0.1, 0.4}};
  const double oracle = discrete_mi_oracle({{0.4, 0.1}, {0.1, 0.4}}).value;
  Rng rng(9);
  std::discrete_distribution<int> cell({0.4, 0.1, 0.1, 0.4});
  const std::size_t n = 100000;
  std::vector<int> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = cell(rng);
    a[i] = c / 2;
    b[i] = c % 2;
  }
  auto fstar = [&](int x, int y) { return std::exp(1.0) * p[x][y] / (0.5 * 0.5); };
  std::vector<double> joint(n), marginal(n);
  for (std::size_t i = 0; i < n; ++i) {
    joint[i] = fstar(a[i], b[i]);
    marginal[i] = fstar(a[i], b[(i + 1) % n]);
  }
  const MIEstimate est = nwj_lower(Tensor::from({n}, joint), Tensor::from({n}, marginal));
  CHECK(est.bound == BoundDirection::kLower);
  CHECK(std::abs(est.value - oracle) < 0.02);
}

TEST_CASE("mine moving average") {
  const Tensor joint = Tensor::from({4}, {1.0, 2.0, 3.0, 4.0});
  MineState s;
  const MIEstimate first = mine_lower(joint, Tensor::from({4}, {1.0, 1.0, 2.0, 4.0}), s, 0.1);
  REQUIRE(s.ema.has_value());
  CHECK(*s.ema == doctest::Approx(2.0));
  const double joint_term = (std::log(1.0) + std::log(2.0) + std::log(3.0) + std::log(4.0)) / 4.0;
  CHECK(first.value == doctest::Approx(joint_term - std::log(2.0)));

  const Tensor marg = Tensor::from({4}, {3.0, 3.0, 4.0, 6.0}, true);
  const MIEstimate second = mine_lower(joint, marg, s, 0.1);
  CHECK(*s.ema == doctest::Approx(0.9 * 2.0 + 0.1 * 4.0));
  CHECK(second.value == doctest::Approx(joint_term - std::log(4.0)));
  // Partition gradient uses the moving average, not the batch mean.
  const GradientMap g = backward(second.objective);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.of(marg).at(i) == doctest::Approx(-1.0 / (4.0 * 2.2)));
}

TEST_CASE("estimators are differentiable end to end") {
  Rng rng(12);
  const std::size_t n = 5, d = 2;
  const ConditionalModel cond(3, d, Activation::kTanh, rng, true, -0.5);
  ParamSet cp;
  cond.register_into(cp, "cond");
  const Tensor x = standard_normal({n, 3}, rng);
  const Tensor t = standard_normal({n, d}, rng);
  CHECK(finite_diff_check([&] { return club_upper(x, t, cond).objective; }, cp.tensors()) < 1e-4);
  CHECK(finite_diff_check([&] { return l1out_upper(x, t, cond).objective; }, cp.tensors()) < 1e-4);
  CHECK(finite_diff_check([&] { return club_from_log_prob_matrix(pairwise_log_prob(cond(x), t)).objective; },
                          cp.tensors()) < 1e-4);

  const Critic critic(d, d, 8, rng);
  const auto params = critic.params().tensors();
  const Tensor u = standard_normal({n, d}, rng);
  const Tensor v = standard_normal({n, d}, rng);
  CHECK(finite_diff_check([&] { return nwj_lower(u, v, critic).objective; }, params) < 1e-4);
  CHECK(finite_diff_check([&] { return infonce_lower(u, v, critic).objective; }, params) < 1e-4);
  CHECK(finite_diff_check(
            [&] {
              MineState s;
              return mine_lower(u, v, critic, s).objective;
            },
            params) < 1e-4);
}

TEST_CASE("trained critics") {
  SUBCASE("nwj on independent pairs stays near zero") {
    Rng rng(41);
    Critic critic(1, 1, 32, rng);
    CriticTraining cfg;
    const PairSampler indep = [](std::size_t n, Rng& r) {
      return std::pair{standard_normal({n, 1}, r), standard_normal({n, 1}, r)};
    };
    fit_critic(critic, Estimator::kNwj, indep, cfg, rng);
    const auto [u, v] = indep(10000, rng);
    CHECK(evaluate_lower_bound(critic, Estimator::kNwj, u, v).value <= 0.02);
  }
  SUBCASE("infonce approaches the oracle") {
    const double v = trained_lower_bound(Estimator::kInfoNce, 0.9, 1, 512, 1.0, 5, 512);
    CHECK(std::abs(v - std::min(0.8304, std::log(512.0))) < 0.1);
  }
  SUBCASE("mine approaches the oracle") {
    const double v = trained_lower_bound(Estimator::kMine, 0.8, 1, 10000, 1.0, 6);
    CHECK(std::abs(v - 0.5108) < 0.08);
  }
  SUBCASE("nwj approaches the oracle") {
    const double v = trained_lower_bound(Estimator::kNwj, 0.8, 1, 10000, 1.0, 7);
    CHECK(std::abs(v - 0.5108) < 0.08);
  }
}

TEST_CASE("lower bounds stay below the oracle") {
  for (double rho : {0.3, 0.5, 0.8}) {
    for (std::size_t d : {1u, 4u}) {
      const double oracle = gaussian_mi_oracle(rho, d).value;
      for (Estimator e : {Estimator::kNwj, Estimator::kInfoNce, Estimator::kMine}) {
        CAPTURE(rho);
        CAPTURE(d);
        CAPTURE(to_string(e));
        const double v = trained_lower_bound(e, rho, d, 10000, 0.2, 100 + d);
        CHECK(v <= oracle + 0.05);
        if (e == Estimator::kInfoNce) CHECK(v <= std::log(10000.0));
      }
    }
  }
}

TEST_CASE("estimator names") {
  for (Estimator e : {Estimator::kClub, Estimator::kL1Out, Estimator::kNwj, Estimator::kInfoNce, Estimator::kMine,
                      Estimator::kGaussianExact, Estimator::kDiscreteExact}) {
    CHECK(parse_estimator(to_string(e)) == e);
  }
  CHECK_THROWS_AS(parse_estimator("jsd"), std::invalid_argument);
  CHECK(direction_of(Estimator::kL1Out) == BoundDirection::kUpper);
  CHECK(direction_of(Estimator::kMine) == BoundDirection::kLower);
  CHECK(to_string(BoundDirection::kExact) == "exact");
}
