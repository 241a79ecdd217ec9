#include "ebfkit/ebf.hpp"

#include "ebfkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace ebfkit {

double EbfResult::log10_ebf() const { return log_ebf / std::numbers::ln10; }

std::string EbfResult::reading() const {
    if (log_ebf < 0.0) return "evidence for random effect";
    if (log_ebf > 0.0) return "evidence for fixing the effect at zero";
    return "no evidence either way";
}

namespace {

struct Factor {
    Eigen::LLT<Eigen::MatrixXd> llt;
    bool jittered = false;
    double logdet = 0.0;
};

Factor factor_psd(const Eigen::MatrixXd& M, const char* what) {
    if (!is_symmetric(M)) throw InputError(std::string(what) + " is not symmetric");
    Factor f;
    f.llt.compute(M);
    if (f.llt.info() != Eigen::Success) {
        const double jitter = 1e-8 * std::abs(M.trace()) / double(M.rows());
        Eigen::MatrixXd Mj = M;
        Mj.diagonal().array() += jitter;
        f.llt.compute(Mj);
        f.jittered = true;
        if (f.llt.info() != Eigen::Success || !(jitter > 0.0))
            throw NumericalError(std::string(what) + " is not positive semi-definite");
    }
    f.logdet = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
    if (!std::isfinite(f.logdet)) throw NumericalError(std::string(what) + " has a non-finite determinant");
    return f;
}

void add_conservative_warning(EbfResult& r) {
    if (r.flags.boundary || r.flags.diagonal_approx || r.flags.unreliable_classical) {
        r.warnings.insert(r.warnings.begin(), kConservativeWarning);
    }
    if (r.flags.jittered) r.warnings.push_back("a covariance matrix needed diagonal jitter");
}

int term_position(const std::vector<TermDesign>& terms, const std::string& label) {
    for (std::size_t k = 0; k < terms.size(); ++k)
        if (terms[k].label == label) return static_cast<int>(k);
    throw InputError("unknown random term '" + label + "'");
}

std::vector<int> coef_indices(const TermDesign& t, const TermSelector& sel) {
    std::vector<int> idx;
    if (!sel.column) {
        for (int i = 0; i < t.size(); ++i) idx.push_back(t.offset + i);
    } else {
        const int c = t.column_index(*sel.column);
        for (int j = 0; j < t.n_levels(); ++j) idx.push_back(t.coef_index(j, c));
    }
    return idx;
}

Eigen::MatrixXd block_diag(const std::vector<Eigen::MatrixXd>& blocks) {
    Eigen::Index n = 0;
    for (const auto& b : blocks) n += b.rows();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
        out.block(at, at, b.rows(), b.cols()) = b;
        at += b.rows();
    }
    return out;
}

// Orthonormal Helmert contrasts, (n-1) x n with rows orthogonal to 1.
Eigen::MatrixXd helmert(int n) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n - 1, n);
    for (int i = 1; i < n; ++i) {
        const double c = 1.0 / std::sqrt(double(i) * (i + 1));
        H.row(i - 1).head(i).setConstant(c);
        H(i - 1, i) = -i * c;
    }
    return H;
}

// GP terms are tested for constancy (all elements equal), not for f = 0:
// the common level of f is confounded with the intercept. Every other
// block passes through unchanged.
EbfResult contrast_ebf(const Eigen::VectorXd& theta, const Eigen::MatrixXd& omega,
                       const std::vector<Eigen::MatrixXd>& priors, const std::vector<bool>& constancy) {
    if (std::none_of(constancy.begin(), constancy.end(), [](bool b) { return b; }))
        return log_ebf(theta, omega, block_diag(priors));
    std::vector<Eigen::MatrixXd> maps;
    for (std::size_t b = 0; b < priors.size(); ++b) {
        const int n = static_cast<int>(priors[b].rows());
        if (constancy[b] && n < 2) throw InputError("constancy test needs at least two gp points");
        maps.push_back(constancy[b] ? helmert(n) : Eigen::MatrixXd::Identity(n, n));
    }
    Eigen::Index rows = 0, cols = 0;
    for (const auto& m : maps) rows += m.rows(), cols += m.cols();
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(rows, cols);
    std::vector<Eigen::MatrixXd> tp;
    for (std::size_t b = 0, r = 0, c = 0; b < maps.size(); ++b) {
        T.block(r, c, maps[b].rows(), maps[b].cols()) = maps[b];
        tp.push_back(maps[b] * priors[b] * maps[b].transpose());
        r += maps[b].rows();
        c += maps[b].cols();
    }
    const Eigen::MatrixXd to = T * omega * T.transpose();
    return log_ebf(T * theta, 0.5 * (to + to.transpose()), block_diag(tp));
}

void check_distinct(const std::vector<TermSelector>& sels) {
    if (sels.size() < 2) throw InputError("joint test needs at least two terms");
    std::set<std::string> seen;
    for (const auto& s : sels)
        if (!seen.insert(s.text()).second) throw InputError("term '" + s.text() + "' listed twice");
}

bool at_boundary(const FittedModel& fit, const TermDesign& t, const TermSelector& sel) {
    for (const auto& name : fit.flags.boundary_params) {
        if (sel.column) {
            const int c = t.column_index(*sel.column);
            if (name == t.label + "[" + t.columns[c] + "]") return true;
        } else if (name.rfind(t.label + "[", 0) == 0) {
            return true;
        }
    }
    return false;
}

EbfResult classical(const FittedModel& fit, const std::vector<TermSelector>& sels) {
    if (fit.method == FitMethod::Mcmc) throw InputError("classical EBF needs an ml or reml fit");
    std::vector<int> idx;
    std::vector<Eigen::MatrixXd> priors;
    std::vector<bool> constancy;
    bool unreliable = false;
    for (const auto& sel : sels) {
        const int k = term_position(fit.terms, sel.label);
        const auto& t = fit.terms[k];
        const auto ti = coef_indices(t, sel);
        idx.insert(idx.end(), ti.begin(), ti.end());
        priors.push_back(selector_cov(t, fit.gamma[k], sel.column));
        constancy.push_back(t.kind == CovKind::GpSe);
        unreliable |= at_boundary(fit, t, sel);
    }
    const int m = static_cast<int>(idx.size());
    Eigen::VectorXd theta(m);
    Eigen::MatrixXd omega(m, m);
    for (int i = 0; i < m; ++i) {
        theta(i) = fit.theta(idx[i]);
        for (int j = 0; j < m; ++j) omega(i, j) = fit.omega(idx[i], idx[j]);
    }
    EbfResult r = contrast_ebf(theta, omega, priors, constancy);
    for (const auto& s : sels) r.tested_terms.push_back(s.text());
    r.flags.diagonal_approx = fit.flags.diagonal_approx;
    r.flags.boundary = fit.flags.boundary;
    r.flags.jittered |= fit.flags.jittered;
    r.flags.unreliable_classical = unreliable;
    r.warnings.clear();
    add_conservative_warning(r);
    return r;
}

EbfResult bayesian(const PosteriorFit& fit, const std::vector<TermSelector>& sels) {
    if (fit.draws.rows() < 10) throw InputError("EBF needs at least 10 retained draws");
    std::vector<int> cols;
    std::vector<Eigen::MatrixXd> priors;
    std::vector<bool> constancy;
    const auto gm = fit.gamma_mean();
    for (const auto& sel : sels) {
        const int k = term_position(fit.terms, sel.label);
        const auto c = fit.theta_columns(sel);
        cols.insert(cols.end(), c.begin(), c.end());
        if (fit.terms[k].kind == CovKind::GpSe) {
            // the kernel is far from linear in lambda: Psi at the mean lambda
            // shrinks the directions the data do not inform much harder than
            // the posterior does, so average Psi over the draws instead
            Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(fit.terms[k].size(), fit.terms[k].size());
            for (Eigen::Index r = 0; r < fit.draws.rows(); ++r)
                acc += selector_cov(fit.terms[k], fit.gamma_at(static_cast<int>(r))[k], sel.column);
            priors.push_back(acc / double(fit.draws.rows()));
        } else {
            priors.push_back(selector_cov(fit.terms[k], gm[k], sel.column));
        }
        constancy.push_back(fit.terms[k].kind == CovKind::GpSe);
    }
    Eigen::MatrixXd sub(fit.draws.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = fit.draws.col(cols[i]);
    const auto mom = sample_moments(sub);
    EbfResult r = contrast_ebf(mom.theta, mom.omega, priors, constancy);
    for (const auto& s : sels) r.tested_terms.push_back(s.text());
    add_conservative_warning(r);
    return r;
}

}  // namespace

EbfResult log_ebf(const Eigen::VectorXd& theta, const Eigen::MatrixXd& omega, const Eigen::MatrixXd& psi) {
    const Eigen::Index J = theta.size();
    if (J == 0) throw InputError("log_ebf: empty block");
    if (omega.rows() != J || omega.cols() != J || psi.rows() != J || psi.cols() != J)
        throw InputError("log_ebf: dimension mismatch");
    if (!theta.allFinite() || !omega.allFinite() || !psi.allFinite())
        throw InputError("log_ebf: non-finite input");
    const Factor fo = factor_psd(omega, "posterior covariance");
    const Factor fp = factor_psd(psi, "prior covariance");
    const Eigen::VectorXd w = fo.llt.matrixL().solve(theta);
    EbfResult r;
    r.components.half_logdet_prior = 0.5 * fp.logdet;
    r.components.neg_half_logdet_post = -0.5 * fo.logdet;
    r.components.neg_half_quadform = -0.5 * w.squaredNorm();
    r.log_ebf = r.components.half_logdet_prior + r.components.neg_half_logdet_post + r.components.neg_half_quadform;
    r.flags.jittered = fo.jittered || fp.jittered;
    add_conservative_warning(r);
    return r;
}

double log_mvn_density_at_zero(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double quad = llt.matrixL().solve(mean).squaredNorm();
    return -0.5 * (double(mean.size()) * std::log(2.0 * std::numbers::pi) + logdet + quad);
}

EbfResult ebf_for_term(const FittedModel& fit, const TermSelector& sel) { return classical(fit, {sel}); }

EbfResult ebf_for_term(const PosteriorFit& fit, const TermSelector& sel) { return bayesian(fit, {sel}); }

EbfResult ebf_joint(const FittedModel& fit, const std::vector<TermSelector>& sels) {
    check_distinct(sels);
    if (fit.flags.diagonal_approx)
        throw InputError(
            "joint EBF refused: this fit uses the diagonal squared-standard-error approximation, so the "
            "cross-term posterior covariances are unavailable; refit without the diagonal approximation");
    return classical(fit, sels);
}

EbfResult ebf_joint(const PosteriorFit& fit, const std::vector<TermSelector>& sels) {
    check_distinct(sels);
    return bayesian(fit, sels);
}

}  // namespace ebfkit
