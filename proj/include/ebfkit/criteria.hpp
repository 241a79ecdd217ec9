#pragma once

#include "ebfkit/lmm.hpp"
#include "ebfkit/mcmc.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ebfkit {

double aic(double loglik, int q);
double bic(double loglik, int q, long n);

struct DicResult {
    double dic = 0.0;
    double p_dic = 0.0;
    double loglik_at_mean = 0.0;
    double mean_loglik = 0.0;
    bool negative_p = false;
};

// From per-draw log-likelihoods and the log-likelihood at the posterior means.
DicResult dic(const std::vector<double>& draw_logliks, double loglik_at_mean);

// log p(y | beta, sigma2, theta) for the design's family (sigma2 ignored
// for bernoulli and poisson).
double conditional_loglik(const DesignMatrices& design, const Eigen::VectorXd& beta, double sigma2,
                          const Eigen::VectorXd& theta);

// DIC with the conditional likelihood evaluated at every retained draw and
// at the posterior means of (beta, sigma2, theta).
DicResult dic(const PosteriorFit& fit, const DesignMatrices& design);

struct LrtResult {
    double stat = 0.0;
    double p = 1.0;
};

// Boundary likelihood-ratio test for one variance: p from 0.5 chi2_0 + 0.5 chi2_1.
LrtResult lrt_chibar(double loglik1, double loglik0, int tested_variances = 1);

// P(chi2_1 > x).
double chi2_1_sf(double x);

enum class CvMetric { Squared, Absolute };
std::string to_string(CvMetric m);
CvMetric parse_cv_metric(const std::string& text);

struct CvResult {
    int K = 0;
    CvMetric metric = CvMetric::Squared;
    double mean_error = 0.0;
    std::vector<int> fold_of_row;
};

// Folds are a seeded shuffle of the rows dealt round-robin; K = N is
// leave-one-out. Levels unseen in a training fold predict theta = 0.
CvResult kfold_cv(const DesignMatrices& design, int K, CvMetric metric, std::uint64_t seed,
                  FitMethod objective = FitMethod::Reml, const LmmOptions& opts = {});
CvResult kfold_cv(const ModelSpec& spec, const Dataset& data, int K, CvMetric metric, std::uint64_t seed,
                  FitMethod objective = FitMethod::Reml);

struct CriteriaRow {
    std::string label;
    double loglik = 0.0;
    int q = 0;
    double aic = 0.0;
    long n_rows = 0;
    double bic_rows = 0.0;
    std::string cluster_label;  // grouping factor used for the cluster-count BIC
    long n_clusters = 0;
    double bic_clusters = 0.0;
    std::optional<DicResult> dic;
};

struct PairwiseLrt {
    std::string model0, model1;
    LrtResult lrt;
};

struct CriteriaReport {
    std::vector<CriteriaRow> rows;
    std::vector<PairwiseLrt> pairwise;
    std::optional<CvResult> cv;
    std::string cv_label;
    static constexpr const char* kQConvention =
        "q counts fixed effects, the residual variance and free covariance parameters; random-effect levels are "
        "not counted";
};

// AIC/BIC row for a classical fit; BIC is given for n = rows and n = levels
// of the largest grouping factor.
CriteriaRow criteria_row(const std::string& label, const FittedModel& fit);

// DIC row for a posterior fit. loglik is the conditional log-likelihood at
// the posterior means; AIC and BIC are NaN (not defined for draws).
CriteriaRow criteria_row(const std::string& label, const PosteriorFit& fit, const DesignMatrices& design);

void write_criteria_csv(std::ostream& out, const CriteriaReport& report);
std::string criteria_json(const CriteriaReport& report);

}  // namespace ebfkit
