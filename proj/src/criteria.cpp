#include "ebfkit/criteria.hpp"

#include "ebfkit/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace ebfkit {

double aic(double loglik, int q) {
    if (!std::isfinite(loglik)) throw InputError("aic: non-finite log-likelihood");
    if (q < 0) throw InputError("aic: negative parameter count");
    return -2.0 * loglik + 2.0 * q;
}

double bic(double loglik, int q, long n) {
    if (!std::isfinite(loglik)) throw InputError("bic: non-finite log-likelihood");
    if (q < 0) throw InputError("bic: negative parameter count");
    if (n < 1) throw InputError("bic: n must be at least 1");
    return -2.0 * loglik + q * std::log(double(n));
}

DicResult dic(const std::vector<double>& draw_logliks, double loglik_at_mean) {
    if (draw_logliks.empty()) throw InputError("dic: no draws");
    for (double v : draw_logliks)
        if (!std::isfinite(v)) throw NumericalError("dic: non-finite log-likelihood at a draw");
    if (!std::isfinite(loglik_at_mean)) throw NumericalError("dic: non-finite log-likelihood at the posterior mean");
    DicResult r;
    r.loglik_at_mean = loglik_at_mean;
    r.mean_loglik = std::accumulate(draw_logliks.begin(), draw_logliks.end(), 0.0) / double(draw_logliks.size());
    r.p_dic = 2.0 * (loglik_at_mean - r.mean_loglik);
    r.dic = -2.0 * loglik_at_mean + 2.0 * r.p_dic;
    r.negative_p = r.p_dic < 0.0;
    return r;
}

double conditional_loglik(const DesignMatrices& design, const Eigen::VectorXd& beta, double sigma2,
                          const Eigen::VectorXd& theta) {
    Eigen::VectorXd eta = design.offset + design.X * beta;
    if (design.q() > 0) eta += design.Z * theta;
    const Eigen::VectorXd& y = design.y;
    double ll = 0.0;
    switch (design.spec.family) {
        case Family::Gaussian: {
            if (!(sigma2 > 0.0)) throw InputError("conditional_loglik: sigma2 must be positive");
            const double rss = (y - eta).squaredNorm();
            ll = -0.5 * (design.n() * std::log(2.0 * std::numbers::pi * sigma2) + rss / sigma2);
            break;
        }
        case Family::Bernoulli:
            for (int r = 0; r < design.n(); ++r) {
                const double e = eta(r);
                const double log1pexp = e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
                ll += y(r) * e - log1pexp;
            }
            break;
        case Family::Poisson:
            for (int r = 0; r < design.n(); ++r) ll += y(r) * eta(r) - std::exp(eta(r)) - std::lgamma(y(r) + 1.0);
            break;
    }
    return ll;
}

DicResult dic(const PosteriorFit& fit, const DesignMatrices& design) {
    const bool gaussian = design.spec.family == Family::Gaussian;
    std::vector<double> ll(static_cast<std::size_t>(fit.draws.rows()));
    for (Eigen::Index r = 0; r < fit.draws.rows(); ++r) {
        const int row = static_cast<int>(r);
        ll[r] = conditional_loglik(design, fit.beta_at(row), gaussian ? fit.sigma2_at(row) : 1.0, fit.theta_at(row));
    }
    Eigen::VectorXd theta_mean = Eigen::VectorXd::Zero(design.q());
    for (Eigen::Index r = 0; r < fit.draws.rows(); ++r) theta_mean += fit.theta_at(static_cast<int>(r));
    theta_mean /= double(fit.draws.rows());
    const double at_mean =
        conditional_loglik(design, fit.beta_mean(), gaussian ? fit.sigma2_mean() : 1.0, theta_mean);
    return dic(ll, at_mean);
}

double chi2_1_sf(double x) {
    if (!(x > 0.0)) return 1.0;
    return std::erfc(std::sqrt(0.5 * x));
}

LrtResult lrt_chibar(double loglik1, double loglik0, int tested_variances) {
    if (tested_variances != 1)
        throw InputError("lrt_chibar: only a single tested variance (0.5 chi2_0 + 0.5 chi2_1) is supported");
    if (!std::isfinite(loglik1) || !std::isfinite(loglik0)) throw InputError("lrt_chibar: non-finite log-likelihood");
    if (loglik1 < loglik0 - 1e-8)
        throw InputError("lrt_chibar: models are not nested (larger model has the lower log-likelihood)");
    LrtResult r;
    r.stat = std::max(0.0, 2.0 * (loglik1 - loglik0));
    r.p = r.stat == 0.0 ? 1.0 : 0.5 * chi2_1_sf(r.stat);
    return r;
}

std::string to_string(CvMetric m) { return m == CvMetric::Squared ? "squared" : "absolute"; }

CvMetric parse_cv_metric(const std::string& text) {
    if (text == "squared") return CvMetric::Squared;
    if (text == "absolute") return CvMetric::Absolute;
    throw InputError("unknown cv metric '" + text + "' (expected squared or absolute)");
}

CvResult kfold_cv(const DesignMatrices& design, int K, CvMetric metric, std::uint64_t seed, FitMethod objective,
                  const LmmOptions& opts) {
    const int n = design.n();
    if (design.spec.family != Family::Gaussian) throw InputError("kfold_cv supports the gaussian family only");
    if (K < 2 || K > n) throw InputError("kfold_cv: K must lie in [2, N]");
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    CvResult out;
    out.K = K;
    out.metric = metric;
    out.fold_of_row.assign(n, 0);
    for (int i = 0; i < n; ++i) out.fold_of_row[perm[i]] = i % K;

    const Eigen::SparseMatrix<double, Eigen::RowMajor> Zr = design.Z;
    double total = 0.0;
    for (int f = 0; f < K; ++f) {
        std::vector<int> train, test;
        for (int r = 0; r < n; ++r) (out.fold_of_row[r] == f ? test : train).push_back(r);
        const DesignMatrices sub = select_rows(design, train);
        FittedModel fit;
        try {
            fit = fit_lmm(sub, objective, opts);
        } catch (const InputError& e) {
            throw InputError("kfold_cv: fold " + std::to_string(f + 1) + " cannot be fitted: " + e.what());
        }
        for (int r : test) {
            double pred = design.offset(r) + design.X.row(r).dot(fit.beta);
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Zr, r); it; ++it)
                pred += it.value() * fit.theta(it.col());
            const double e = design.y(r) - pred;
            total += metric == CvMetric::Squared ? e * e : std::abs(e);
        }
    }
    out.mean_error = total / n;
    return out;
}

CvResult kfold_cv(const ModelSpec& spec, const Dataset& data, int K, CvMetric metric, std::uint64_t seed,
                  FitMethod objective) {
    return kfold_cv(build_design(spec, data), K, metric, seed, objective);
}

namespace {

int count_params(const std::vector<TermDesign>& terms, int p, bool with_sigma) {
    int k = p + (with_sigma ? 1 : 0);
    for (const auto& t : terms) {
        switch (t.kind) {
            case CovKind::Diagonal: k += t.dim(); break;
            case CovKind::Correlated: k += 3; break;
            case CovKind::Car: k += 1; break;
            case CovKind::GpSe: k += 2; break;
        }
    }
    return k;
}

void fill_cluster_count(CriteriaRow& row, const std::vector<TermDesign>& terms) {
    for (const auto& t : terms) {
        if (t.kind == CovKind::Car || t.kind == CovKind::GpSe) continue;
        if (t.n_levels() > row.n_clusters) {
            row.n_clusters = t.n_levels();
            row.cluster_label = t.label;
        }
    }
}

}  // namespace

CriteriaRow criteria_row(const std::string& label, const FittedModel& fit) {
    CriteriaRow row;
    row.label = label;
    row.loglik = fit.loglik;
    row.q = fit.n_params();
    row.aic = aic(fit.loglik, row.q);
    row.n_rows = fit.n_obs;
    row.bic_rows = bic(fit.loglik, row.q, fit.n_obs);
    fill_cluster_count(row, fit.terms);
    row.bic_clusters = row.n_clusters > 0 ? bic(fit.loglik, row.q, row.n_clusters)
                                          : std::numeric_limits<double>::quiet_NaN();
    return row;
}

CriteriaRow criteria_row(const std::string& label, const PosteriorFit& fit, const DesignMatrices& design) {
    CriteriaRow row;
    row.label = label;
    row.dic = dic(fit, design);
    row.loglik = row.dic->loglik_at_mean;
    row.q = count_params(fit.terms, static_cast<int>(fit.fixed_names.size()), design.spec.family == Family::Gaussian);
    row.aic = std::numeric_limits<double>::quiet_NaN();
    row.n_rows = design.n();
    row.bic_rows = std::numeric_limits<double>::quiet_NaN();
    fill_cluster_count(row, fit.terms);
    row.bic_clusters = std::numeric_limits<double>::quiet_NaN();
    return row;
}

namespace {

std::string num(double v) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

nlohmann::json jnum(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void write_criteria_csv(std::ostream& out, const CriteriaReport& report) {
    out << "label,loglik,q,aic,bic_n_rows,n_rows,bic_n_clusters,n_clusters,cluster_term,dic,p_dic,p_dic_negative\n";
    for (const auto& r : report.rows) {
        out << r.label << ',' << num(r.loglik) << ',' << r.q << ',' << num(r.aic) << ',' << num(r.bic_rows) << ','
            << r.n_rows << ',' << num(r.bic_clusters) << ',' << r.n_clusters << ',' << r.cluster_label << ',';
        if (r.dic)
            out << num(r.dic->dic) << ',' << num(r.dic->p_dic) << ',' << (r.dic->negative_p ? "true" : "false");
        else
            out << "NA,NA,NA";
        out << '\n';
    }
}

std::string criteria_json(const CriteriaReport& report) {
    nlohmann::json j;
    j["q_convention"] = CriteriaReport::kQConvention;
    j["models"] = nlohmann::json::array();
    for (const auto& r : report.rows) {
        nlohmann::json m{{"label", r.label},
                         {"loglik", jnum(r.loglik)},
                         {"q", r.q},
                         {"aic", jnum(r.aic)},
                         {"bic", nlohmann::json::array({{{"n", r.n_rows}, {"n_label", "rows"}, {"value", jnum(r.bic_rows)}},
                                                        {{"n", r.n_clusters},
                                                         {"n_label", "clusters:" + r.cluster_label},
                                                         {"value", jnum(r.bic_clusters)}}})}};
        if (r.dic) {
            m["dic"] = jnum(r.dic->dic);
            m["p_dic"] = jnum(r.dic->p_dic);
            m["p_dic_negative"] = r.dic->negative_p;
        }
        j["models"].push_back(m);
    }
    j["pairwise"] = nlohmann::json::array();
    for (const auto& p : report.pairwise)
        j["pairwise"].push_back(
            {{"model0", p.model0}, {"model1", p.model1}, {"lrt_stat", jnum(p.lrt.stat)}, {"lrt_p", jnum(p.lrt.p)}});
    if (report.cv)
        j["cv"] = {{"label", report.cv_label},
                   {"K", report.cv->K},
                   {"metric", to_string(report.cv->metric)},
                   {"mean_error", jnum(report.cv->mean_error)}};
    return j.dump(2);
}

}  // namespace ebfkit
