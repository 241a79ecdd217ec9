#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/errors.hpp"
#include "ebfkit/mcmc.hpp"
#include "ebfkit/parallel.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>

using namespace ebfkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Dataset grouped(int J, int n, double tau, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> y;
    std::vector<std::string> g;
    for (int j = 0; j < J; ++j) {
        const double u = tau * nd(rng);
        for (int i = 0; i < n; ++i) {
            y.push_back(2.0 + u + nd(rng));
            g.push_back("g" + std::to_string(j));
        }
    }
    Dataset d;
    d.add_numeric("y", y);
    d.add_categorical("g", g);
    return d;
}

McmcConfig small_config(int chains, int iterations, std::uint64_t seed = 3) {
    McmcConfig c;
    c.chains = chains;
    c.iterations = iterations;
    c.burn_in = iterations / 2;
    c.seed = seed;
    c.adapt_window = 200;
    return c;
}

}  // namespace

TEST_CASE("inverse-gamma variance draws", "[mcmc]") {
    std::mt19937_64 rng(1);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    bool grid = false;
    for (int i = 0; i < n; ++i) {
        const double v = draw_variance(6.0, 10.0, rng, &grid);
        s += v;
        s2 += v * v;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    CHECK_FALSE(grid);
    CHECK_THAT(mean, WithinRel(2.0, 0.01));              // b / (a - 1)
    CHECK_THAT(var, WithinRel(4.0 / 4.0, 0.05));         // b^2 / ((a-1)^2 (a-2))
    const double g = draw_variance(-0.3, 2.0, rng, &grid);
    CHECK(grid);
    CHECK(std::isfinite(g));
    CHECK(g > 0.0);
}

TEST_CASE("split R-hat and ESS on known chains", "[mcmc]") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd x(2000, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    CHECK(std::abs(split_rhat(x) - 1.0) < 0.01);
    CHECK(bulk_ess(x) > 5000.0);
    CHECK(ess_raw(x) > 5000.0);

    // chains at different locations
    Eigen::MatrixXd shifted = x;
    shifted.col(0).array() += 3.0;
    CHECK(split_rhat(shifted) > 1.3);

    // an AR(1) chain with phi = 0.9 has ESS near n (1 - phi) / (1 + phi)
    Eigen::MatrixXd ar(20000, 1);
    double v = 0.0;
    for (int i = 0; i < 20000; ++i) ar(i, 0) = v = 0.9 * v + nd(rng);
    CHECK_THAT(ess_raw(ar), WithinRel(20000.0 * 0.1 / 1.9, 0.25));

    const Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(100, 2, 0.95);
    CHECK(split_rhat(constant) == 1.0);
    CHECK(std::isnan(split_rhat(x.leftCols(1))));
}

TEST_CASE("sample moments and singular detection", "[mcmc]") {
    Eigen::MatrixXd d(2, 2);
    d << 1, 2, 3, 4;
    const auto m = sample_moments(d);
    CHECK(m.theta.isApprox(Eigen::Vector2d(2, 3)));
    CHECK(m.omega.isApprox((Eigen::Matrix2d() << 2, 2, 2, 2).finished()));
    CHECK(m.singular);
    Eigen::MatrixXd e(3, 1);
    e << 1, 2, 4;
    const auto n = sample_moments(e);
    CHECK_THAT(n.omega(0, 0), WithinAbs(7.0 / 3.0, 1e-14));
    CHECK_FALSE(n.singular);
    CHECK_THROWS_AS(sample_moments(Eigen::MatrixXd(1, 2)), InputError);
}

TEST_CASE("config validation", "[mcmc]") {
    McmcConfig c;
    c.burn_in = c.iterations;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = McmcConfig{};
    c.chains = 0;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = McmcConfig{};
    c.thin = 0;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = McmcConfig{};
    c.thin = 7;
    CHECK(c.retained_per_chain() == 357);
}

TEST_CASE("Gibbs draws match the conditional posterior of the random effects", "[mcmc]") {
    // With many groups the variance posteriors are tight, so the marginal
    // posterior of (beta, theta) is close to the Gaussian conditional at
    // the posterior means. A wrong permutation in the joint draw would
    // scramble the covariance.
    const int J = 40, n = 25;
    const auto data = grouped(J, n, 0.8, 12);
    const auto design = build_design(parse_formula("y ~ (1 | g)"), data);
    const auto fit = gibbs_lmm(design, small_config(2, 6000));
    REQUIRE(fit.draws.rows() == 6000);
    const double s2 = fit.sigma2_mean();
    const double t2 = fit.gamma_mean()[0].tau2[0];
    // conditional precision of (beta0, theta)
    Eigen::MatrixXd C(design.n(), 1 + J);
    C << design.X, Eigen::MatrixXd(design.Z);
    Eigen::MatrixXd Q = C.transpose() * C / s2;
    Q.bottomRightCorner(J, J).diagonal().array() += 1.0 / t2;
    const Eigen::MatrixXd S = Q.inverse();
    const Eigen::VectorXd mu = S * (C.transpose() * design.y / s2);
    Eigen::MatrixXd sub(fit.draws.rows(), 6);
    std::vector<int> cols{fit.column("(Intercept)")};
    for (int j = 0; j < 5; ++j) cols.push_back(fit.block("theta:g").begin + j);
    for (int i = 0; i < 6; ++i) sub.col(i) = fit.draws.col(cols[i]);
    const auto m = sample_moments(sub);
    for (int i = 0; i < 6; ++i) {
        CHECK(std::abs(m.theta(i) - mu(i)) < 4.0 * std::sqrt(S(i, i) / 300.0));
        CHECK_THAT(m.omega(i, i), WithinRel(S(i, i), 0.15));
    }
    // intercept and group effects are negatively correlated a posteriori
    const double corr = m.omega(0, 1) / std::sqrt(m.omega(0, 0) * m.omega(1, 1));
    const double corr_expected = S(0, 1) / std::sqrt(S(0, 0) * S(1, 1));
    CHECK_THAT(corr, WithinAbs(corr_expected, 0.1));
    CHECK_THAT(t2, WithinRel(0.64, 0.6));
    CHECK_THAT(s2, WithinRel(1.0, 0.1));
}

TEST_CASE("variance posterior matches numerical integration", "[mcmc]") {
    // Flat priors on beta, tau2 and sigma2: the (tau2, sigma2) posterior of a
    // balanced one-way model is the restricted likelihood, integrated on a grid.
    const int J = 12, n = 4;
    const Dataset d = grouped(J, n, 0.4, 31);
    const auto& y = d.numeric("y");
    double grand = 0.0, ssw = 0.0, ssb = 0.0;
    for (double v : y) grand += v;
    grand /= y.size();
    for (int j = 0; j < J; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += y[j * n + i];
        m /= n;
        ssb += n * (m - grand) * (m - grand);
        for (int i = 0; i < n; ++i) ssw += (y[j * n + i] - m) * (y[j * n + i] - m);
    }
    auto logpost = [&](double t2, double s2) {
        const double v = s2 + n * t2;
        return -0.5 * (J * (n - 1) * std::log(s2) + ssw / s2 + (J - 1) * std::log(v) + ssb / v);
    };
    const int G = 1500;
    const double tmax = 40.0 * ssb / (J - 1) / n, smax = 4.0 * ssw / (J * (n - 1));
    std::vector<double> lp(G * G);
    double top = -1e300;
    for (int a = 0; a < G; ++a)
        for (int b = 0; b < G; ++b) {
            lp[a * G + b] = logpost((a + 0.5) * tmax / G, (b + 0.5) * smax / G);
            top = std::max(top, lp[a * G + b]);
        }
    double z = 0.0, mt = 0.0, ms = 0.0;
    for (int a = 0; a < G; ++a)
        for (int b = 0; b < G; ++b) {
            const double w = std::exp(lp[a * G + b] - top);
            z += w;
            mt += w * (a + 0.5) * tmax / G;
            ms += w * (b + 0.5) * smax / G;
        }
    mt /= z;
    ms /= z;

    McmcConfig cfg{4, 12000, 2000, 1, 8, 500};
    const auto fit = gibbs_lmm(parse_formula("y ~ 1 + (1 | g)"), d, cfg);
    const Eigen::MatrixXd t2 = fit.draws.col(fit.column("g:tau2[(Intercept)]"));
    const Eigen::MatrixXd s2 = fit.draws.col(fit.column("sigma2"));
    auto mc_se = [](const Eigen::MatrixXd& x) {
        const double m = x.mean();
        const double sd = std::sqrt((x.array() - m).square().sum() / (x.size() - 1));
        return sd / std::sqrt(ess_raw(x.reshaped(x.size() / 4, 4)));
    };
    CHECK(std::abs(t2.mean() - mt) < 4.0 * mc_se(t2));
    CHECK(std::abs(s2.mean() - ms) < 4.0 * mc_se(s2));
    CHECK(fit.acceptance.count("g:scale[(Intercept)]") == 1);
}

TEST_CASE("Poisson intercept posterior is the conjugate gamma", "[mcmc]") {
    // flat prior on beta0: exp(beta0) | y ~ Gamma(sum y, n)
    Dataset d;
    std::vector<double> y{3, 0, 5, 2, 4, 1, 6, 2, 3, 4};
    d.add_numeric("y", y);
    auto spec = parse_formula("y ~ 1");
    spec.family = Family::Poisson;
    const auto fit = mwg_glmm(spec, d, small_config(2, 20000, 5));
    const Eigen::ArrayXd rate = fit.draws.col(fit.column("(Intercept)")).array().exp();
    const double sum = 30.0, n = 10.0;
    CHECK_THAT(rate.mean(), WithinRel(sum / n, 0.02));
    const double var = (rate - rate.mean()).square().sum() / (rate.size() - 1);
    CHECK_THAT(var, WithinRel(sum / (n * n), 0.1));
}

TEST_CASE("seeded runs are reproducible and thread-count independent", "[mcmc]") {
    const auto data = grouped(8, 5, 1.0, 2);
    const auto spec = parse_formula("y ~ (1 | g)");
    const auto a = gibbs_lmm(spec, data, small_config(3, 400, 9));
    const auto b = gibbs_lmm(spec, data, small_config(3, 400, 9));
    CHECK(a.draws == b.draws);
    const auto c = gibbs_lmm(spec, data, small_config(3, 400, 10));
    CHECK(a.draws != c.draws);
    setenv("EBFKIT_THREADS", "1", 1);
    const auto s = gibbs_lmm(spec, data, small_config(3, 400, 9));
    unsetenv("EBFKIT_THREADS");
    CHECK(a.draws == s.draws);
    CHECK(worker_count() >= 1);
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) == derive_seed(1, 0));
}

TEST_CASE("posterior layout and accessors", "[mcmc]") {
    Dataset d;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    std::vector<double> y, x;
    std::vector<std::string> g;
    for (int j = 0; j < 6; ++j)
        for (int i = 0; i < 6; ++i) {
            x.push_back(nd(rng));
            y.push_back(1 + 0.3 * j + (0.5 + 0.2 * j) * x.back() + nd(rng));
            g.push_back("g" + std::to_string(j));
        }
    d.add_numeric("y", y);
    d.add_numeric("x", x);
    d.add_categorical("g", g);
    const auto fit = gibbs_lmm(parse_formula("y ~ x + (1 + x | g)"), d, small_config(2, 600));
    CHECK(fit.block("phi").size == 3);
    CHECK(fit.names[fit.block("phi").begin + 2] == "sigma2");
    CHECK(fit.block("theta:g").size == 12);
    CHECK(fit.names[fit.block("theta:g").begin + 1] == "g[g0,x]");
    CHECK(fit.theta_columns(parse_selector("g[x]")).size() == 6);
    CHECK(fit.column("g:rho") >= 0);
    CHECK(fit.beta_mean().size() == 2);
    const auto gm = fit.gamma_mean();
    CHECK(gm[0].tau2.size() == 2);
    CHECK(std::abs(gm[0].rho) < 1.0);
    CHECK(fit.theta_at(0).size() == 12);
    CHECK(fit.gamma_at(5)[0].tau2[0] == fit.draws(5, fit.column("g:tau2[(Intercept)]")));
    const auto ga = gaussian_approx(fit, parse_selector("g[1]"));
    CHECK(ga.theta.size() == 6);
    CHECK_FALSE(ga.singular);
    CHECK_THROWS_AS(fit.column("nope"), InputError);
    const auto diag = diagnostics(fit);
    CHECK(diag.rhat_available);
    CHECK(diag.params.size() == fit.names.size());
}

TEST_CASE("structured terms under the Gibbs sampler", "[mcmc]") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::vector<double> y, t;
    for (int i = 0; i < 40; ++i) {
        t.push_back(i / 4.0);
        y.push_back(std::sin(t.back()) + 0.3 * nd(rng));
    }
    Dataset d;
    d.add_numeric("y", y);
    d.add_numeric("t", t);
    const auto fit = gibbs_lmm(parse_formula("y ~ (1|unit:gp(t))"), d, small_config(2, 1000));
    const auto lam = fit.draws.col(fit.column("unit:gp(t):lambda"));
    CHECK(lam.minCoeff() > 0.0);
    CHECK(lam.maxCoeff() < 10.0 * 9.75);
    CHECK(fit.acceptance.count("unit:gp(t):tau2_marginal") == 1);
    CHECK(fit.acceptance.count("unit:gp(t):lambda_marginal") == 1);

    std::vector<std::vector<int>> nb(40);
    for (int i = 0; i + 1 < 40; ++i) {
        nb[i].push_back(i + 1);
        nb[i + 1].push_back(i);
    }
    auto adj = std::make_shared<const Adjacency>(nb);
    const auto car = gibbs_lmm(parse_formula("y ~ (1|unit:car)"), d, small_config(2, 1000), adj);
    CHECK(car.draws.allFinite());
    CHECK(car.draws.col(car.column("unit:car:alpha")).isConstant(kDefaultCarAlpha));
    auto est = small_config(2, 1000);
    est.estimate_car_alpha = true;
    const auto car2 = gibbs_lmm(parse_formula("y ~ (1|unit:car)"), d, est, adj);
    const auto al = car2.draws.col(car2.column("unit:car:alpha"));
    CHECK(al.minCoeff() >= 0.0);
    CHECK(al.maxCoeff() < 1.0);
    CHECK_FALSE(al.isConstant(al(0)));
}

TEST_CASE("gp hyperparameters mix between chains on a null input", "[mcmc]") {
    // x2 has no effect; the conditional moves alone leave chains in
    // separate smooth and wiggly modes
    std::mt19937_64 rng(905);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 0.5);
    std::vector<double> y, x1, x2;
    for (int i = 0; i < 60; ++i) {
        x1.push_back(unif(rng));
        x2.push_back(unif(rng));
        y.push_back(std::sin(2.0 * std::numbers::pi * x1.back()) + nd(rng));
    }
    Dataset d;
    d.add_numeric("y", y);
    d.add_numeric("x1", x1);
    d.add_numeric("x2", x2);
    const auto fit = gibbs_lmm(parse_formula("y ~ 1 + (1 | unit:gp(x1)) + (1 | unit:gp(x2))"), d,
                               McmcConfig{4, 2000, 1000, 1, 6, 500});
    const auto diag = diagnostics(fit);
    for (const auto& p : diag.params)
        if (p.name == "unit:gp(x2):lambda" || p.name == "unit:gp(x1):lambda") CHECK(p.rhat < 1.1);
}

TEST_CASE("bernoulli MWG", "[mcmc]") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u;
    std::vector<double> y;
    std::vector<std::string> g;
    for (int j = 0; j < 10; ++j)
        for (int i = 0; i < 20; ++i) {
            const double p = 1.0 / (1.0 + std::exp(-(-0.5 + 0.8 * (j % 3 - 1))));
            y.push_back(u(rng) < p ? 1.0 : 0.0);
            g.push_back("g" + std::to_string(j));
        }
    Dataset d;
    d.add_numeric("y", y);
    d.add_categorical("g", g);
    auto spec = parse_formula("y ~ (1 | g)");
    spec.family = Family::Bernoulli;
    const auto fit = fit_mcmc(build_design(spec, d), small_config(2, 3000));
    CHECK(fit.draws.allFinite());
    CHECK_FALSE(fit.flags.clamped);
    CHECK(fit.acceptance.count("theta:g") == 1);
    const double acc = fit.acceptance.at("theta:g");
    CHECK(acc > 0.2);
    CHECK(acc < 0.7);
    auto gauss = parse_formula("y ~ (1 | g)");
    CHECK_THROWS_AS(mwg_glmm(gauss, d, small_config(1, 100)), InputError);
}
