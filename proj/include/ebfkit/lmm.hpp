#pragma once

#include "ebfkit/design.hpp"
#include "ebfkit/term_cov.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace ebfkit {

enum class FitMethod { Ml, Reml, Mcmc };
std::string to_string(FitMethod m);
FitMethod parse_fit_method(const std::string& text);

struct FitFlags {
    bool boundary = false;         // a variance or correlation sits at its bound
    bool singular = false;
    bool jittered = false;
    bool diagonal_approx = false;  // omega replaced by squared standard errors
    std::vector<std::string> boundary_params;  // e.g. "g[(Intercept)]", "g:rho"

    bool operator==(const FitFlags&) const = default;
};

// A classical fit. theta is the stacked random-effect vector in design
// order; omega its joint conditional covariance given the estimates.
struct FittedModel {
    FitMethod method = FitMethod::Reml;
    std::vector<std::string> fixed_names;
    Eigen::VectorXd beta;
    double sigma2 = 0.0;
    CovarianceParams gamma;
    Eigen::VectorXd theta;
    Eigen::MatrixXd omega;
    double loglik = 0.0;  // ML log-likelihood, or the REML criterion for REML fits
    int n_obs = 0;
    FitFlags flags;
    std::vector<TermDesign> terms;  // layout only (level_of_row cleared)
    std::vector<double> deviance_trace;  // objective after each outer sweep
    int sweeps = 0;

    int n_params() const;  // fixed effects + sigma2 + free covariance parameters
};

struct LmmOptions {
    int max_sweeps = 500;
    double dev_tol = 1e-8;
    double param_tol = 1e-6;
    double floor_ratio = 1e-4;   // lower bound on tau / sigma
    double car_alpha = kDefaultCarAlpha;
    bool estimate_car_alpha = false;
    bool diagonal_omega = false;  // replace omega by diag(se^2)
    std::optional<CovarianceParams> start;
};

FittedModel fit_lmm(const DesignMatrices& design, FitMethod objective, const LmmOptions& opts = {});
FittedModel fit_lmm(const ModelSpec& spec, const Dataset& data, FitMethod objective,
                    const LmmOptions& opts = {});

struct Blup {
    Eigen::VectorXd theta;
    Eigen::MatrixXd omega;
};

// Conditional mean and covariance of the random effects given the fit's
// fixed effects, sigma2 and covariance parameters:
//   omega = (Z'Z / sigma2 + G^{-1})^{-1},  theta = omega Z'(y - X beta) / sigma2.
Blup blup_with_covariance(const FittedModel& fit, const DesignMatrices& design);

// diag(se^2); every entry must be positive.
Eigen::MatrixXd diagonal_omega_fallback(const Eigen::VectorXd& se);

// Gaussian log-likelihood of y ~ N(X beta + offset, sigma2 I + Z G Z').
double gaussian_loglik(const DesignMatrices& design, const Eigen::VectorXd& beta, double sigma2,
                       const CovarianceParams& gamma);

// Log-likelihood maximised over beta and sigma2 with the covariance
// parameters held fixed. Zero variances drop the term.
double profile_loglik(const DesignMatrices& design, const CovarianceParams& gamma);
double profile_loglik(const ModelSpec& spec, const Dataset& data, const CovarianceParams& gamma);

// Layout of the design's random terms without row assignments.
std::vector<TermDesign> term_layout(const DesignMatrices& design);

}  // namespace ebfkit
