#pragma once

#include "ebfkit/design.hpp"
#include "ebfkit/term_cov.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace ebfkit {

struct McmcConfig {
    int chains = 4;
    int iterations = 5000;  // per chain, including burn-in
    int burn_in = 2500;
    int thin = 1;
    std::uint64_t seed = 1;
    int adapt_window = 500;  // step sizes are tuned in batches of adapt_window / 10 during burn-in
    double car_alpha = kDefaultCarAlpha;
    bool estimate_car_alpha = false;

    void validate() const;
    int retained_per_chain() const { return (iterations - burn_in) / thin; }
};

struct ParamSummary {
    std::string name;
    double mean = 0.0;
    double sd = 0.0;
    double q025 = 0.0;
    double q50 = 0.0;
    double q975 = 0.0;
    double rhat = 0.0;  // NaN with a single chain
    double ess = 0.0;
};

struct McmcDiagnostics {
    std::vector<ParamSummary> params;
    bool rhat_available = false;
    double max_rhat = 0.0;
    double min_ess = 0.0;
    std::vector<std::string> warnings;
};

struct McmcFlags {
    bool clamped = false;          // linear predictor hit +-35
    bool low_acceptance = false;   // some Metropolis acceptance rate < 0.05 after burn-in
    bool grid_fallback = false;    // a variance was drawn by the log-grid inverse CDF
    std::vector<std::string> low_acceptance_params;

    bool operator==(const McmcFlags&) const = default;
};

// Columns [begin, begin + size) of the draws matrix.
struct DrawBlock {
    std::string name;  // "phi", "theta:<label>", "gamma:<label>"
    int begin = 0;
    int size = 0;
};

struct PosteriorFit {
    ModelSpec spec;
    std::vector<std::string> fixed_names;
    std::vector<TermDesign> terms;  // layout only
    std::vector<std::string> names;  // one per draws column
    std::vector<DrawBlock> blocks;
    Eigen::MatrixXd draws;  // chains stacked in order, retained_per_chain rows each
    int chains = 0;
    int n_obs = 0;
    McmcConfig config;
    McmcFlags flags;
    std::map<std::string, double> acceptance;  // mean acceptance per Metropolis group

    int draws_per_chain() const { return chains > 0 ? static_cast<int>(draws.rows()) / chains : 0; }
    int column(const std::string& name) const;
    const DrawBlock& block(const std::string& name) const;

    // Columns of the theta block for a term, or one design column of it.
    std::vector<int> theta_columns(const TermSelector& sel) const;

    Eigen::VectorXd beta_mean() const;
    double sigma2_mean() const;  // gaussian only
    CovarianceParams gamma_mean() const;

    // Parameters of one retained draw.
    Eigen::VectorXd beta_at(int row) const;
    double sigma2_at(int row) const;
    Eigen::VectorXd theta_at(int row) const;
    CovarianceParams gamma_at(int row) const;
};

// Column names used in draws.
std::string theta_name(const TermDesign& term, int level, int column);
std::string gamma_name(const TermDesign& term, const std::string& param);

PosteriorFit gibbs_lmm(const DesignMatrices& design, const McmcConfig& config);
PosteriorFit gibbs_lmm(const ModelSpec& spec, const Dataset& data, const McmcConfig& config,
                       std::shared_ptr<const Adjacency> adjacency = nullptr);

PosteriorFit mwg_glmm(const DesignMatrices& design, const McmcConfig& config);
PosteriorFit mwg_glmm(const ModelSpec& spec, const Dataset& data, const McmcConfig& config,
                      std::shared_ptr<const Adjacency> adjacency = nullptr);

// Dispatches on the family.
PosteriorFit fit_mcmc(const DesignMatrices& design, const McmcConfig& config);

struct GaussianApprox {
    Eigen::VectorXd theta;
    Eigen::MatrixXd omega;
    TermParams gamma;
    bool singular = false;  // omega not positive definite
};

GaussianApprox gaussian_approx(const PosteriorFit& fit, const TermSelector& sel);

// Moments of selected draw columns (divisor n - 1).
GaussianApprox sample_moments(const Eigen::MatrixXd& draws);

// Split R-hat and bulk ESS on rank-normalised draws. x holds one column
// per chain.
double split_rhat(const Eigen::MatrixXd& x);
double bulk_ess(const Eigen::MatrixXd& x);
// Effective sample size of the raw draws (no rank normalisation).
double ess_raw(const Eigen::MatrixXd& x);

McmcDiagnostics diagnostics(const PosteriorFit& fit);

// Inverse-gamma draw for a variance with conditional density
// v^{-(shape+1)} exp(-scale / v). Falls back to a log-spaced grid inverse
// CDF when shape <= 0 (returns true in *grid_used).
double draw_variance(double shape, double scale, std::mt19937_64& rng, bool* grid_used = nullptr);

}  // namespace ebfkit
