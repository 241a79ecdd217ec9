#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/errors.hpp"
#include "ebfkit/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

using namespace ebfkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

double sample_sd(const Eigen::VectorXd& v) {
    return std::sqrt((v.array() - v.mean()).square().sum() / double(v.size() - 1));
}

Eigen::VectorXd as_vec(const std::vector<double>& v) { return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()); }

}  // namespace

TEST_CASE("exact_scale hits the requested moments", "[simulate]") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(5.0, 2.0);
    for (int m : {2, 7, 100}) {
        Eigen::VectorXd v(m);
        for (int i = 0; i < m; ++i) v(i) = nd(rng);
        for (double sd : {0.01, 0.5, 3.0}) {
            const Eigen::VectorXd s = exact_scale(v, sd);
            CHECK_THAT(s.mean(), WithinAbs(0.0, 1e-13));
            CHECK_THAT(sample_sd(s), WithinRel(sd, 1e-12));
        }
        CHECK(exact_scale(v, 0.0).isZero(0.0));
    }
}

TEST_CASE("exact_scale rejects bad input", "[simulate]") {
    CHECK_THROWS_AS(exact_scale(Eigen::VectorXd::Constant(4, 1.0), 1.0), InputError);
    CHECK_THROWS_AS(exact_scale(Eigen::VectorXd::Ones(1), 1.0), InputError);
    CHECK_THROWS_AS(exact_scale(Eigen::VectorXd::LinSpaced(4, 0, 1), -1.0), InputError);
}

TEST_CASE("gen_crossed layout and moments", "[simulate]") {
    const TauHats tau{0.3, 0.5, 0.5, 0.01};
    const auto sim = gen_crossed(6, 4, 3, tau, 0.0, 11);
    const Dataset& d = sim.data;
    REQUIRE(d.n_rows() == 72);
    const auto& g1 = d.categorical("g1");
    const auto& g2 = d.categorical("g2");
    CHECK(g1.levels.size() == 6);
    CHECK(g2.levels.size() == 4);
    CHECK(g1.levels[g1.codes[0]] == "j1");
    CHECK(g2.levels[g2.codes[3]] == "k2");
    CHECK(g1.levels[g1.codes[12]] == "j2");

    CHECK_THAT(sample_sd(sim.theta11), WithinRel(0.3, 1e-12));
    CHECK_THAT(sample_sd(sim.theta12), WithinRel(0.5, 1e-12));
    CHECK_THAT(sample_sd(sim.theta21), WithinRel(0.5, 1e-12));
    CHECK_THAT(sample_sd(sim.theta22), WithinRel(0.01, 1e-12));
    const Eigen::VectorXd x = as_vec(d.numeric("x"));
    CHECK_THAT(x.mean(), WithinAbs(0.0, 1e-13));
    CHECK_THAT(sample_sd(x), WithinRel(1.0, 1e-12));

    // residual reconstructs to an exactly scaled vector
    const Eigen::VectorXd y = as_vec(d.numeric("y"));
    Eigen::VectorXd e(y.size());
    for (int r = 0; r < y.size(); ++r) {
        const int j = g1.codes[r], k = g2.codes[r];
        e(r) = y(r) - sim.theta11(j) - sim.theta21(k) - (sim.theta12(j) + sim.theta22(k)) * x(r);
    }
    CHECK_THAT(e.mean(), WithinAbs(0.0, 1e-12));
    CHECK_THAT(sample_sd(e), WithinRel(1.0, 1e-10));
}

TEST_CASE("gen_crossed is seeded and correlates the pair", "[simulate]") {
    const TauHats tau{1.0, 1.0, 1.0, 1.0};
    const auto a = gen_crossed(200, 2, 2, tau, 0.8, 5);
    const auto b = gen_crossed(200, 2, 2, tau, 0.8, 5);
    CHECK(a.data.numeric("y") == b.data.numeric("y"));
    const double r = a.theta11.dot(a.theta12) / double(a.theta11.size() - 1);
    CHECK(r > 0.6);
    CHECK_THROWS_AS(gen_crossed(1, 2, 2, tau, 0.0, 1), InputError);
    CHECK_THROWS_AS(gen_crossed(3, 2, 2, tau, 1.0, 1), InputError);
}

TEST_CASE("grid config parsing", "[simulate]") {
    const SimGrid j = parse_grid_json(
        R"({"J_values": [10, 30], "n_values": [5], "tau11_values": [0, 0.5], "K": 12, "estimator": "classical",
            "iterations": 500, "burn_in": 100})");
    CHECK(j.J_values == std::vector<int>{10, 30});
    CHECK(j.K == 12);
    CHECK(j.estimator == Estimator::Classical);
    CHECK(j.mcmc.iterations == 500);

    const SimGrid t = parse_grid_toml("# grid\nJ_values = [10, 30]  # comment\nn_values = [5]\n"
                                      "tau11_values = [0, 0.5]\nK = 12\nestimator = \"classical\"\n"
                                      "iterations = 500\nburn_in = 100\n");
    CHECK(t.J_values == j.J_values);
    CHECK(t.tau11_values == j.tau11_values);
    CHECK(t.K == 12);

    CHECK_THROWS_AS(parse_grid_json(R"({"J_value": [10]})"), InputError);
    CHECK_THROWS_AS(parse_grid_json(R"({"J_values": [1]})"), InputError);
    CHECK_THROWS_AS(parse_grid_json("{"), InputError);
    CHECK_THROWS_AS(parse_grid_toml("[grid]\nK = 3\n"), InputError);
    CHECK_THROWS_AS(parse_grid_toml("K 3\n"), InputError);
    CHECK_THROWS_AS(parse_grid_toml("estimator = \"frequentist\"\n"), InputError);
    CHECK_THROWS_AS(read_grid_config("/nonexistent/grid.json"), InputError);
}

TEST_CASE("ks_test", "[simulate]") {
    auto unif = [](double v) { return std::clamp(v, 0.0, 1.0); };
    // evenly spaced midpoints: D = 1/(2m)
    std::vector<double> s;
    for (int i = 0; i < 50; ++i) s.push_back((i + 0.5) / 50.0);
    const auto [d, p] = ks_test(s, unif);
    CHECK_THAT(d, WithinAbs(0.01, 1e-12));
    CHECK(p > 0.99);

    std::vector<double> shifted;
    for (int i = 0; i < 200; ++i) shifted.push_back(0.5 + 0.5 * (i + 0.5) / 200.0);
    CHECK(ks_test(shifted, unif).second < 1e-6);
    CHECK_THROWS_AS(ks_test({}, unif), InputError);
}

TEST_CASE("run_cell produces one row per tested term", "[simulate]") {
    SimGrid g;
    g.K = 5;
    g.mcmc = McmcConfig{2, 600, 300, 1, 1, 100};
    const auto rows = run_cell(g, 10, 4, 0.0, 0, 99, Estimator::Both);
    REQUIRE(rows.size() == 7);
    int bayes = 0;
    for (const auto& r : rows) {
        if (r.estimator == Estimator::Bayesian) {
            ++bayes;
            CHECK(r.status == "ok");
            CHECK(std::isfinite(r.log_ebf));
        } else {
            CHECK_THAT(r.tau11_used, WithinAbs(0.04, 0.0));
            // tiny cells often give singular classical fits
            CHECK((r.status == "ok" || r.status == "missing: singular fit"));
            CHECK(std::isfinite(r.log_ebf) == (r.status == "ok"));
        }
    }
    CHECK(bayes == 4);

    const auto again = run_cell(g, 10, 4, 0.0, 0, 99, Estimator::Both);
    for (std::size_t i = 0; i < rows.size(); ++i)
        CHECK((rows[i].log_ebf == again[i].log_ebf || (std::isnan(rows[i].log_ebf) && std::isnan(again[i].log_ebf))));

    SimResult res{rows};
    std::ostringstream csv;
    write_sim_csv(csv, res);
    const std::string text = csv.str();
    CHECK(text.rfind("J,n,tau11_hat,tau11_used,estimator,term,selector,log_ebf,flags,status,replication,seed\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 8);
    std::ostringstream plot;
    write_plot_csv(plot, res);
    const std::string ptext = plot.str();
    CHECK(std::count(ptext.begin(), ptext.end(), '\n') == 3);
}

TEST_CASE("chibar study small run", "[simulate]") {
    ChibarConfig c;
    c.N_values = {40};
    c.replications = 60;
    c.seed = 4;
    const auto out = pvalue_study_chibar(c);
    REQUIRE(out.size() == 1);
    CHECK(out[0].J == 20);
    CHECK(out[0].replications == 60);
    CHECK(out[0].frac_zero > 0.25);
    CHECK(out[0].frac_zero < 0.75);
    int total = 0;
    for (int h : out[0].histogram) total += h;
    CHECK(total == 60 - out[0].failures);

    c.cluster_size = 1;
    CHECK_THROWS_AS(pvalue_study_chibar(c), InputError);
}
