#pragma once

#include "ebfkit/lmm.hpp"
#include "ebfkit/mcmc.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace ebfkit {

struct EbfComponents {
    double half_logdet_prior = 0.0;     //  1/2 log|Psi|
    double neg_half_logdet_post = 0.0;  // -1/2 log|Omega|
    double neg_half_quadform = 0.0;     // -1/2 theta' Omega^{-1} theta
};

struct EbfFlags {
    bool diagonal_approx = false;
    bool boundary = false;
    bool jittered = false;
    bool unreliable_classical = false;

    bool operator==(const EbfFlags&) const = default;
};

// Natural-log empirical Bayes factor of "block = 0" against the model
// with the block. Negative values favour keeping the random effect.
struct EbfResult {
    double log_ebf = 0.0;
    EbfComponents components;
    std::vector<std::string> tested_terms;
    EbfFlags flags;
    std::vector<std::string> warnings;

    double log10_ebf() const;
    std::string reading() const;
};

EbfResult log_ebf(const Eigen::VectorXd& theta, const Eigen::MatrixXd& omega, const Eigen::MatrixXd& psi);

// log N(0; mean, cov) by dense Cholesky.
double log_mvn_density_at_zero(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov);

EbfResult ebf_for_term(const FittedModel& fit, const TermSelector& sel);
EbfResult ebf_for_term(const PosteriorFit& fit, const TermSelector& sel);

EbfResult ebf_joint(const FittedModel& fit, const std::vector<TermSelector>& sels);
EbfResult ebf_joint(const PosteriorFit& fit, const std::vector<TermSelector>& sels);

inline constexpr const char* kConservativeWarning = "interpret conservatively";

}  // namespace ebfkit
