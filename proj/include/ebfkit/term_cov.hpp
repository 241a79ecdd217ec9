#pragma once

#include "ebfkit/design.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace ebfkit {

inline constexpr double kDefaultCarAlpha = 0.95;

// Covariance parameters of one random term, on the response-variance scale.
//   diagonal:   tau2[c] per design column
//   correlated: tau2[0], tau2[1], rho (two columns only)
//   car:        tau2[0], alpha
//   gp-se:      tau2[0] (squared magnitude), lambda
struct TermParams {
    std::vector<double> tau2;
    double rho = 0.0;
    double alpha = kDefaultCarAlpha;
    double lambda = 1.0;

    bool operator==(const TermParams&) const = default;
};

using CovarianceParams = std::vector<TermParams>;

void check_params(const TermDesign& term, const TermParams& params);

// Named scalar parameters, e.g. {"tau2[(Intercept)]", "tau2[x]", "rho"}.
std::vector<std::string> param_names(const TermDesign& term);
std::vector<double> param_values(const TermDesign& term, const TermParams& params);
TermParams params_from_values(const TermDesign& term, const std::vector<double>& values);

// d x d covariance of one level (diagonal and correlated kinds only).
Eigen::MatrixXd level_cov(const TermDesign& term, const TermParams& params);

// Covariance of the whole term's coefficient vector, size() x size().
Eigen::MatrixXd term_cov(const TermDesign& term, const TermParams& params);

// Prior covariance of a subset of a term's coefficients: the whole term, or
// a single column of a diagonal/correlated term (tau2_c * I_J).
Eigen::MatrixXd selector_cov(const TermDesign& term, const TermParams& params,
                             const std::optional<std::string>& column);

// Inverse of term_cov. Requires strictly positive variances.
Eigen::MatrixXd term_precision(const TermDesign& term, const TermParams& params);

// Lower factor T with T T^T = term_cov / scale2, as sparse triplets placed
// at the term's offset.
void append_factor_triplets(const TermDesign& term, const TermParams& params, double scale2,
                            std::vector<Eigen::Triplet<double>>& out);

// Block-diagonal lower factor over all terms (q x q), divided by sqrt(scale2).
SparseMatrix relative_factor(const std::vector<TermDesign>& terms, const CovarianceParams& params,
                             double scale2);

}  // namespace ebfkit
