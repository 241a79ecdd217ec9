#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/errors.hpp"
#include "ebfkit/lmm.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace ebfkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Dataset one_way(const std::vector<double>& y, int n_per) {
    Dataset d;
    d.add_numeric("y", y);
    std::vector<std::string> g;
    for (std::size_t i = 0; i < y.size(); ++i) g.push_back("g" + std::to_string(i / n_per));
    d.add_categorical("g", g);
    return d;
}

struct Anova {
    double msb, msw;
};

Anova anova(const std::vector<double>& y, int J, int n) {
    double grand = 0.0;
    for (double v : y) grand += v;
    grand /= y.size();
    double ssb = 0.0, ssw = 0.0;
    for (int j = 0; j < J; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += y[j * n + i];
        m /= n;
        ssb += n * (m - grand) * (m - grand);
        for (int i = 0; i < n; ++i) ssw += (y[j * n + i] - m) * (y[j * n + i] - m);
    }
    return {ssb / (J - 1), ssw / (J * (n - 1))};
}

// log N(y; X beta, sigma2 I + Z G Z') by dense Cholesky.
double dense_loglik(const DesignMatrices& d, const Eigen::VectorXd& beta, double sigma2, const Eigen::MatrixXd& G) {
    const Eigen::MatrixXd Z(d.Z);
    Eigen::MatrixXd V = sigma2 * Eigen::MatrixXd::Identity(d.n(), d.n()) + Z * G * Z.transpose();
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    const Eigen::VectorXd r = d.y - d.X * beta;
    const Eigen::VectorXd w = llt.matrixL().solve(r);
    double logdet = 0.0;
    for (int i = 0; i < d.n(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    return -0.5 * (d.n() * std::log(2.0 * std::numbers::pi) + logdet + w.squaredNorm());
}

Dataset random_crossed(int J, int K, int reps, std::uint64_t seed, double t1, double slope_sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> a(J), b(J), c(K);
    for (auto& v : a) v = t1 * nd(rng);
    for (auto& v : b) v = slope_sd * nd(rng);
    for (auto& v : c) v = 0.7 * nd(rng);
    std::vector<double> y, x;
    std::vector<std::string> g1, g2;
    for (int j = 0; j < J; ++j)
        for (int k = 0; k < K; ++k)
            for (int r = 0; r < reps; ++r) {
                const double xv = nd(rng);
                x.push_back(xv);
                y.push_back(1.0 + 0.5 * xv + a[j] + b[j] * xv + c[k] + nd(rng));
                g1.push_back("j" + std::to_string(j));
                g2.push_back("k" + std::to_string(k));
            }
    Dataset d;
    d.add_numeric("y", y);
    d.add_numeric("x", x);
    d.add_categorical("g1", g1);
    d.add_categorical("g2", g2);
    return d;
}

}  // namespace

TEST_CASE("REML on a tiny balanced one-way layout", "[lmm]") {
    const auto d = one_way({0, 2, 1, 3, 5, 7}, 2);
    const auto fit = fit_lmm(parse_formula("y ~ (1 | g)"), d, FitMethod::Reml);
    CHECK_THAT(fit.sigma2, WithinRel(2.0, 1e-6));
    CHECK_THAT(fit.gamma[0].tau2[0], WithinRel(6.0, 1e-6));
    CHECK_THAT(fit.beta(0), WithinAbs(3.0, 1e-8));
    CHECK_FALSE(fit.flags.boundary);
    CHECK(fit.n_params() == 3);
}

TEST_CASE("balanced one-way REML and ML match the ANOVA estimators", "[lmm]") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int J : {3, 5, 8})
        for (int n : {2, 4}) {
            std::vector<double> y;
            for (int j = 0; j < J; ++j) {
                const double u = 2.0 * nd(rng);
                for (int i = 0; i < n; ++i) y.push_back(u + nd(rng));
            }
            const auto a = anova(y, J, n);
            if (a.msb <= a.msw * 1.2) continue;
            const auto d = one_way(y, n);
            const auto spec = parse_formula("y ~ (1 | g)");
            const auto reml = fit_lmm(spec, d, FitMethod::Reml);
            CHECK_THAT(reml.sigma2, WithinRel(a.msw, 1e-6));
            CHECK_THAT(reml.gamma[0].tau2[0], WithinRel((a.msb - a.msw) / n, 1e-6));
            const double ml_tau2 = ((J - 1.0) / J * a.msb - a.msw) / n;
            if (ml_tau2 > 0.05 * a.msw) {
                const auto ml = fit_lmm(spec, d, FitMethod::Ml);
                CHECK_THAT(ml.sigma2, WithinRel(a.msw, 1e-6));
                CHECK_THAT(ml.gamma[0].tau2[0], WithinRel(ml_tau2, 1e-6));
            }
        }
}

TEST_CASE("ML log-likelihood agrees with dense evaluation", "[lmm]") {
    const auto data = random_crossed(6, 5, 2, 3, 1.0, 0.4);
    const auto design = build_design(parse_formula("y ~ x + (1 + x | g1) + (1 | g2)"), data);
    const auto fit = fit_lmm(design, FitMethod::Ml);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(design.q(), design.q());
    for (std::size_t k = 0; k < design.terms.size(); ++k) {
        const auto& t = design.terms[k];
        G.block(t.offset, t.offset, t.size(), t.size()) = term_cov(t, fit.gamma[k]);
    }
    const double dense = dense_loglik(design, fit.beta, fit.sigma2, G);
    CHECK_THAT(fit.loglik, WithinAbs(dense, 1e-7));
    CHECK_THAT(gaussian_loglik(design, fit.beta, fit.sigma2, fit.gamma), WithinAbs(dense, 1e-8));
    CHECK_THAT(profile_loglik(design, fit.gamma), WithinAbs(fit.loglik, 1e-7));
}

TEST_CASE("the fit is a local optimum of the profile likelihood", "[lmm]") {
    const auto data = random_crossed(8, 6, 2, 17, 1.0, 0.5);
    const auto design = build_design(parse_formula("y ~ x + (1 + x | g1) + (1 | g2)"), data);
    const auto fit = fit_lmm(design, FitMethod::Ml);
    REQUIRE_FALSE(fit.flags.boundary);
    const double best = profile_loglik(design, fit.gamma);
    for (int k = 0; k < 2; ++k) {
        const auto& t = design.terms[k];
        auto vals = param_values(t, fit.gamma[k]);
        for (std::size_t i = 0; i < vals.size(); ++i)
            for (double f : {0.97, 1.03}) {
                auto v = vals;
                v[i] *= f;
                auto g = fit.gamma;
                g[k] = params_from_values(t, v);
                CHECK(profile_loglik(design, g) <= best + 1e-9);
            }
    }
}

TEST_CASE("omega is the conditional covariance of the random effects", "[lmm]") {
    const auto data = random_crossed(5, 4, 3, 8, 1.0, 0.3);
    const auto design = build_design(parse_formula("y ~ x + (1 + x | g1) + (1 | g2)"), data);
    const auto fit = fit_lmm(design, FitMethod::Reml);
    const auto blup = blup_with_covariance(fit, design);
    CHECK((blup.omega - fit.omega).cwiseAbs().maxCoeff() < 1e-8 * fit.omega.cwiseAbs().maxCoeff());
    CHECK((blup.theta - fit.theta).cwiseAbs().maxCoeff() < 1e-7);
    CHECK(is_symmetric(fit.omega));
    CHECK(min_eigenvalue(fit.omega) > 0.0);
}

TEST_CASE("BLUP of a single observation", "[lmm]") {
    Dataset d;
    d.add_numeric("y", {1.0});
    d.add_categorical("g", std::vector<std::string>{"a"});
    const auto design = build_design(parse_formula("y ~ (1 | g)"), d);
    FittedModel fit;
    fit.beta = Eigen::VectorXd::Zero(1);
    fit.sigma2 = 1.0;
    fit.gamma = {TermParams{{1.0}}};
    fit.terms = term_layout(design);
    const auto b = blup_with_covariance(fit, design);
    CHECK_THAT(b.theta(0), WithinAbs(0.5, 1e-15));
    CHECK_THAT(b.omega(0, 0), WithinAbs(0.5, 1e-15));
    fit.gamma[0].tau2[0] = 0.0;
    CHECK_THROWS_AS(blup_with_covariance(fit, design), NumericalError);
}

TEST_CASE("no between-group variation gives a boundary fit", "[lmm]") {
    // group means identical
    const auto d = one_way({0, 2, 2, 0, 1, 1}, 2);
    const auto fit = fit_lmm(parse_formula("y ~ (1 | g)"), d, FitMethod::Reml);
    CHECK(fit.flags.boundary);
    REQUIRE(fit.flags.boundary_params.size() == 1);
    CHECK(fit.flags.boundary_params[0] == "g[(Intercept)]");
    CHECK(fit.gamma[0].tau2[0] < 1e-6 * fit.sigma2);
}

TEST_CASE("diagonal omega option", "[lmm]") {
    const auto d = one_way({0, 2, 1, 3, 5, 7}, 2);
    LmmOptions opts;
    opts.diagonal_omega = true;
    const auto full = fit_lmm(parse_formula("y ~ (1 | g)"), d, FitMethod::Reml);
    const auto diag = fit_lmm(parse_formula("y ~ (1 | g)"), d, FitMethod::Reml, opts);
    CHECK(diag.flags.diagonal_approx);
    CHECK(diag.omega.isDiagonal());
    CHECK((diag.omega.diagonal() - full.omega.diagonal()).norm() < 1e-12);
    CHECK(diagonal_omega_fallback(Eigen::Vector2d(0.5, 2.0)).isApprox(Eigen::Vector2d(0.25, 4.0).asDiagonal().toDenseMatrix()));
    CHECK_THROWS_AS(diagonal_omega_fallback(Eigen::Vector2d(0.5, 0.0)), InputError);
}

TEST_CASE("lmm input checks", "[lmm]") {
    auto d = one_way({0, 1, 1, 0}, 2);
    auto spec = parse_formula("y ~ (1 | g)");
    spec.family = Family::Poisson;
    CHECK_THROWS_AS(fit_lmm(spec, d, FitMethod::Reml), InputError);
    CHECK_THROWS_AS(fit_lmm(parse_formula("y ~ (1 | g)"), d, FitMethod::Mcmc), InputError);
    CHECK(parse_fit_method("reml") == FitMethod::Reml);
    CHECK(to_string(FitMethod::Ml) == "ml");
    CHECK_THROWS_AS(parse_fit_method("laplace"), InputError);
}
