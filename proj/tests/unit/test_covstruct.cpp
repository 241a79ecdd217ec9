#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/covstruct.hpp"
#include "ebfkit/errors.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace ebfkit;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// 0-1-2-3 path plus a triangle 3-4-5.
Adjacency small_graph() { return Adjacency({{1}, {0, 2}, {1, 3}, {2, 4, 5}, {3, 5}, {3, 4}}); }

}  // namespace

TEST_CASE("adjacency file format", "[covstruct]") {
    std::istringstream in("3\n2 3\n1\n1\n");
    const auto adj = read_adjacency(in);
    REQUIRE(adj.size() == 3);
    CHECK(adj.neighbors(0) == std::vector<int>{1, 2});
    CHECK(adj.count(1) == 1);
    std::ostringstream out;
    write_adjacency(out, adj);
    CHECK(out.str() == "3\n2 3\n1\n1\n");

    std::istringstream asym("2\n2\n\n");
    CHECK_THROWS_AS(read_adjacency(asym), InputError);
    std::istringstream bad("2\n2\nx\n");
    CHECK_THROWS_AS(read_adjacency(bad), InputError);
    std::istringstream short_file("3\n2\n1\n");
    CHECK_THROWS_AS(read_adjacency(short_file), InputError);
}

TEST_CASE("bundled Scotland adjacency is symmetric and connected", "[covstruct]") {
    const auto adj = read_adjacency_file(std::string(EBFKIT_DATA_DIR) + "/scotland.adj");
    REQUIRE(adj.size() == 56);
    std::vector<bool> seen(56, false);
    std::vector<int> stack{0};
    seen[0] = true;
    int edges = 0;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int v : adj.neighbors(u)) {
            const auto& back = adj.neighbors(v);
            CHECK(std::find(back.begin(), back.end(), u) != back.end());
            if (!seen[v]) {
                seen[v] = true;
                stack.push_back(v);
            }
        }
    }
    for (int j = 0; j < 56; ++j) {
        CHECK(seen[j]);
        edges += adj.count(j);
    }
    CHECK(edges == 2 * 120);
}

TEST_CASE("row-normalised weights", "[covstruct]") {
    const auto W = small_graph().row_normalized();
    for (int j = 0; j < W.rows(); ++j) CHECK_THAT(W.row(j).sum(), WithinAbs(1.0, 1e-15));
    CHECK(W(3, 4) == 1.0 / 3.0);
}

TEST_CASE("car covariance and precision are inverses", "[covstruct]") {
    const auto adj = small_graph();
    for (double alpha : {0.0, 0.5, 0.95, 0.999}) {
        const auto S = car_cov(0.7, adj, alpha);
        const auto Q = car_precision(0.7, adj, alpha);
        CHECK(is_symmetric(S));
        CHECK(min_eigenvalue(S) > 0.0);
        CHECK((S * Q - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-8);
        const double direct = std::log(car_cov(1.0, adj, alpha).determinant());
        CHECK_THAT(car_log_det_unit(adj, alpha), WithinAbs(direct, 1e-9));
    }
    // alpha = 0 reduces to diag(tau2 / L_j)
    const auto S0 = car_cov(2.0, adj, 0.0);
    CHECK_THAT(S0(3, 3), WithinAbs(2.0 / 3.0, 1e-15));
    CHECK_THAT(S0(0, 1), WithinAbs(0.0, 1e-15));
}

TEST_CASE("car covariance matches simulation of the generating equation", "[covstruct]") {
    const auto adj = small_graph();
    const double tau2 = 1.3, alpha = 0.8;
    const auto S = car_cov(tau2, adj, alpha);
    const Eigen::MatrixXd M = Eigen::MatrixXd::Identity(6, 6) - alpha * adj.row_normalized();
    const auto lu = M.partialPivLu();
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    const int draws = 200000;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(6, 6);
    Eigen::MatrixXd acc2 = Eigen::MatrixXd::Zero(6, 6);
    Eigen::VectorXd e(6);
    for (int s = 0; s < draws; ++s) {
        for (int j = 0; j < 6; ++j) e(j) = nd(rng) * std::sqrt(tau2 / adj.count(j));
        const Eigen::VectorXd th = lu.solve(e);
        const Eigen::MatrixXd o = th * th.transpose();
        acc += o;
        acc2 += o.cwiseProduct(o);
    }
    const Eigen::MatrixXd mean = acc / draws;
    const Eigen::MatrixXd var = acc2 / draws - mean.cwiseProduct(mean);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) CHECK(std::abs(mean(i, j) - S(i, j)) < 3.0 * std::sqrt(var(i, j) / draws) + 1e-12);
}

TEST_CASE("car alpha bounds", "[covstruct]") {
    const auto adj = small_graph();
    CHECK_THROWS_AS(car_cov(1.0, adj, 1.0), InputError);
    CHECK_THROWS_AS(car_cov(1.0, adj, -0.1), InputError);
    CHECK_THROWS_AS(check_alpha(1.0 - 1e-12), NumericalError);
    CHECK_THROWS_AS(car_cov(-1.0, adj, 0.5), InputError);
}

TEST_CASE("squared-exponential kernel", "[covstruct]") {
    const std::vector<double> x{0.0, 1.0, 3.0};
    const auto K = gp_se_kernel(2.0, 1.5, x);
    CHECK_THAT(K(0, 0), WithinAbs(4.0, 1e-15));
    CHECK_THAT(K(0, 1), WithinRel(4.0 * std::exp(-1.0 / 4.5), 1e-14));
    CHECK_THAT(K(2, 0), WithinRel(4.0 * std::exp(-9.0 / 4.5), 1e-14));
    const auto C = gp_se_cov(2.0, 1.5, x);
    CHECK_THAT(C(1, 1), WithinRel(4.0 * (1.0 + kGpJitter), 1e-14));
    CHECK(is_symmetric(C));
    CHECK_THROWS_AS(gp_se_kernel(1.0, 0.0, x), InputError);

    // Coincident inputs make the bare kernel singular; the jitter fixes it.
    const std::vector<double> dup{0.0, 0.0, 1.0};
    CHECK_NOTHROW(log_det_psd(gp_se_cov(1.0, 1.0, dup)));
}

TEST_CASE("log determinant via Cholesky", "[covstruct]") {
    Eigen::MatrixXd A(2, 2);
    A << 4, 1, 1, 3;
    const auto ld = log_det_psd(A);
    CHECK_THAT(ld.value, WithinAbs(std::log(11.0), 1e-14));
    CHECK_FALSE(ld.jittered);
    Eigen::MatrixXd S = Eigen::MatrixXd::Ones(2, 2);
    const auto ls = log_det_psd(S);
    CHECK(ls.jittered);
    Eigen::MatrixXd N(2, 2);
    N << 1, 0, 0, -1;
    CHECK_THROWS_AS(log_det_psd(N), NumericalError);
}

TEST_CASE("intercept-slope block", "[covstruct]") {
    const auto B = intercept_slope_cov(2.0, 0.5, -0.3);
    CHECK(B(0, 0) == 4.0);
    CHECK(B(1, 1) == 0.25);
    CHECK_THAT(B(0, 1), WithinAbs(-0.3, 1e-15));
    CHECK(diag_cov(0.5, 3).isApprox(0.5 * Eigen::MatrixXd::Identity(3, 3)));
}
