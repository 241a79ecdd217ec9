#pragma once

#include "ebfkit/dataset.hpp"
#include "ebfkit/lmm.hpp"
#include "ebfkit/mcmc.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ebfkit {

// Affine map of v to sample mean 0 and sample sd target_sd (divisor n - 1).
// target_sd = 0 gives exact zeros.
Eigen::VectorXd exact_scale(const Eigen::VectorXd& v, double target_sd);

struct TauHats {
    double t11 = 0.0;   // first factor, intercept
    double t12 = 0.5;   // first factor, slope
    double t21 = 0.5;   // second factor, intercept
    double t22 = 0.01;  // second factor, slope
};

struct CrossedData {
    Dataset data;  // columns y, x, g1, g2
    Eigen::VectorXd theta11, theta12, theta21, theta22;
};

// Crossed two-factor data: y = th11[g1] + th21[g2] + (th12[g1] + th22[g2]) x + e
// with every random-effect vector, x and e scaled to exact sample moments.
// Rows are ordered by g1 level, then g2 level, then replicate.
CrossedData gen_crossed(int J, int K, int n, const TauHats& tau, double rho, std::uint64_t seed);

enum class Estimator { Classical, Bayesian, Both };
std::string to_string(Estimator e);
Estimator parse_estimator(const std::string& text);

struct SimGrid {
    std::vector<int> J_values{10, 30, 100};
    std::vector<int> n_values{10, 30, 100};
    std::vector<double> tau11_values{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    double tau12 = 0.5;
    double tau21 = 0.5;
    double tau22 = 0.01;
    double rho = 0.0;
    int K = 20;
    int replications = 1;
    std::uint64_t seed = 1;
    Estimator estimator = Estimator::Both;
    double classical_tau11_floor = 0.04;
    FitMethod classical_objective = FitMethod::Reml;
    McmcConfig mcmc{2, 2000, 1000, 1, 1, 500};

    void validate() const;
};

// Reads a flat JSON object or a flat TOML file (key = value, arrays in
// brackets, # comments). Unknown keys are errors.
SimGrid read_grid_config(const std::string& path);
SimGrid parse_grid_json(const std::string& text);
SimGrid parse_grid_toml(const std::string& text);

struct SimRow {
    int J = 0;
    int n = 0;
    double tau11_hat = 0.0;   // grid value
    double tau11_used = 0.0;  // after the classical floor
    Estimator estimator = Estimator::Bayesian;
    std::string term;         // tau2_11, tau2_12, tau2_21, tau2_22
    std::string selector;     // g1[1], g1[x], g2[1], g2[x]
    double log_ebf = 0.0;     // NaN when missing
    std::string flags;        // ';'-separated
    std::string status;       // "ok", "missing: ..." or "error: ..."
    int replication = 0;
    std::uint64_t seed = 0;
};

struct SimResult {
    std::vector<SimRow> rows;
};

// Models used by the grid.
inline constexpr const char* kBayesianSimModel = "y ~ 1 + x + (1 + x | g1) + (1 + x | g2)";
inline constexpr const char* kClassicalSimModel = "y ~ 1 + x + (1 + x | g1) + (1 | g2)";

SimResult run_grid(const SimGrid& grid);

// One grid cell; exposed for tests and the acceptance harness.
std::vector<SimRow> run_cell(const SimGrid& grid, int J, int n, double tau11, int replication,
                             std::uint64_t cell_seed, Estimator estimator);

void write_sim_csv(std::ostream& out, const SimResult& result);
// Figure-style long table: J, n, estimator, tau11_hat, mean log EBF of tau2_11.
void write_plot_csv(std::ostream& out, const SimResult& result);

struct ChibarConfig {
    std::vector<int> N_values{50, 250, 1000};
    int replications = 500;
    std::uint64_t seed = 1;
    int cluster_size = 2;
    FitMethod objective = FitMethod::Reml;
};

struct ChibarSummary {
    int N = 0;
    int J = 0;
    int replications = 0;
    int failures = 0;
    double frac_zero = 0.0;       // point mass at p = 1
    double mean_p = 0.0;          // over all replications
    double mean_p_continuous = 0.0;  // mean of 2p over nonzero statistics (0.5 under the asymptotics)
    double ks_stat = 0.0;         // nonzero statistics vs chi2_1
    double ks_pvalue = 1.0;
    bool ks_reject_01 = false;
    bool mean_deviates = false;   // |mean_p_continuous - 0.5| beyond 3 standard errors
    std::vector<int> histogram;   // 10 bins of p on [0, 1]
};

std::vector<ChibarSummary> pvalue_study_chibar(const ChibarConfig& config);
void write_chibar_csv(std::ostream& out, const std::vector<ChibarSummary>& rows);

// Kolmogorov-Smirnov statistic of a sample against a continuous CDF, with
// the asymptotic p-value.
std::pair<double, double> ks_test(std::vector<double> sample, const std::function<double(double)>& cdf);

}  // namespace ebfkit
