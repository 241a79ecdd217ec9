#include "ebfkit/lmm.hpp"

#include "ebfkit/errors.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

namespace ebfkit {

std::string to_string(FitMethod m) {
    switch (m) {
        case FitMethod::Ml: return "ml";
        case FitMethod::Reml: return "reml";
        case FitMethod::Mcmc: return "mcmc";
    }
    return "?";
}

FitMethod parse_fit_method(const std::string& text) {
    if (text == "ml") return FitMethod::Ml;
    if (text == "reml") return FitMethod::Reml;
    if (text == "mcmc") return FitMethod::Mcmc;
    throw InputError("unknown method '" + text + "' (expected ml, reml or mcmc)");
}

int FittedModel::n_params() const {
    int k = static_cast<int>(beta.size()) + 1;
    for (std::size_t t = 0; t < terms.size(); ++t) {
        switch (terms[t].kind) {
            case CovKind::Diagonal: k += terms[t].dim(); break;
            case CovKind::Correlated: k += 3; break;
            case CovKind::Car: k += 1; break;
            case CovKind::GpSe: k += 2; break;
        }
    }
    return k;
}

std::vector<TermDesign> term_layout(const DesignMatrices& design) {
    auto terms = design.terms;
    for (auto& t : terms) t.level_of_row.clear();
    return terms;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
const double kRhoBound = std::atanh(0.999);

using SparseLLT = Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

struct SuffStats {
    int n = 0, p = 0, q = 0;
    SparseMatrix ZtZ;
    Eigen::MatrixXd ZtX, XtX;
    Eigen::VectorXd Zty, Xty;
    double yty = 0.0;

    explicit SuffStats(const DesignMatrices& d) {
        n = d.n();
        p = d.p();
        q = d.q();
        const Eigen::VectorXd y = d.y - d.offset;
        ZtZ = (d.Z.transpose() * d.Z).pruned(0.0, 0.0);
        ZtZ.makeCompressed();
        ZtX = d.Z.transpose() * d.X;
        XtX = d.X.transpose() * d.X;
        Zty = d.Z.transpose() * y;
        Xty = d.X.transpose() * y;
        yty = y.squaredNorm();
    }
};

// Penalised least squares solution for a given relative factor Lambda:
// minimises ||y - X beta - Z Lambda u||^2 + ||u||^2.
struct PlsSolution {
    bool ok = false;
    Eigen::VectorXd beta, u;
    double r2 = 0.0;
    double logdet_a = 0.0;
    double logdet_schur = 0.0;
};

PlsSolution solve_pls(const SuffStats& s, const SparseMatrix& lambda, SparseLLT* keep = nullptr) {
    PlsSolution out;
    Eigen::MatrixXd B;  // Lambda' Z'X
    Eigen::VectorXd b;  // Lambda' Z'y
    Eigen::VectorXd u0;
    Eigen::MatrixXd UX;
    SparseLLT local;
    SparseLLT& llt = keep ? *keep : local;
    if (s.q > 0) {
        SparseMatrix A = lambda.transpose() * s.ZtZ * lambda;
        SparseMatrix I(s.q, s.q);
        I.setIdentity();
        A += I;
        llt.compute(A);
        if (llt.info() != Eigen::Success) return out;
        const auto diag = llt.matrixL().nestedExpression().diagonal();
        for (Eigen::Index i = 0; i < diag.size(); ++i) {
            if (!(diag(i) > 0.0)) return out;
            out.logdet_a += 2.0 * std::log(diag(i));
        }
        B = lambda.transpose() * s.ZtX;
        b = lambda.transpose() * s.Zty;
        u0 = llt.solve(b);
        UX = llt.solve(B);
    }
    Eigen::MatrixXd schur = s.XtX;
    Eigen::VectorXd rhs = s.Xty;
    if (s.q > 0) {
        schur.noalias() -= B.transpose() * UX;
        rhs.noalias() -= B.transpose() * u0;
    }
    Eigen::LLT<Eigen::MatrixXd> sl(schur);
    if (sl.info() != Eigen::Success) return out;
    for (Eigen::Index i = 0; i < schur.rows(); ++i) {
        const double d = sl.matrixLLT()(i, i);
        if (!(d > 0.0)) return out;
        out.logdet_schur += 2.0 * std::log(d);
    }
    out.beta = sl.solve(rhs);
    out.r2 = s.yty - out.beta.dot(s.Xty);
    if (s.q > 0) {
        out.u = u0 - UX * out.beta;
        out.r2 -= out.u.dot(b);
    } else {
        out.u.resize(0);
    }
    if (!(out.r2 > 0.0)) out.r2 = std::numeric_limits<double>::min();
    out.ok = std::isfinite(out.r2) && std::isfinite(out.logdet_a);
    return out;
}

double profiled_deviance(const PlsSolution& pls, int n, int p, FitMethod method) {
    if (method == FitMethod::Ml) {
        return pls.logdet_a + n * (1.0 + kLog2Pi + std::log(pls.r2 / n));
    }
    const int dof = n - p;
    return pls.logdet_a + pls.logdet_schur + dof * (1.0 + kLog2Pi + std::log(pls.r2 / dof));
}

// Optimiser coordinates for the covariance parameters, on the relative
// (tau / sigma) scale.
struct Coordinates {
    std::vector<double> x, lo, hi;
    std::vector<std::string> names;
    std::vector<int> kind;  // 0 log relative sd, 1 atanh rho, 2 alpha, 3 log lambda
};

Coordinates initial_coordinates(const std::vector<TermDesign>& terms, const LmmOptions& opts,
                                double sigma2_guess) {
    Coordinates c;
    const double ulo = std::log(opts.floor_ratio);
    const double uhi = std::log(1e4);
    auto add = [&](double x, double lo, double hi, const std::string& name, int kind) {
        c.x.push_back(std::clamp(x, lo, hi));
        c.lo.push_back(lo);
        c.hi.push_back(hi);
        c.names.push_back(name);
        c.kind.push_back(kind);
    };
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto& t = terms[k];
        const TermParams* st = opts.start ? &opts.start->at(k) : nullptr;
        auto u_start = [&](int col) {
            if (!st) return 0.0;
            const double v = std::max(st->tau2.at(col), 1e-12);
            return 0.5 * std::log(v / sigma2_guess);
        };
        switch (t.kind) {
            case CovKind::Diagonal:
                for (int col = 0; col < t.dim(); ++col)
                    add(u_start(col), ulo, uhi, t.label + "[" + t.columns[col] + "]", 0);
                break;
            case CovKind::Correlated:
                if (t.dim() != 2)
                    throw InputError("correlated term '" + t.label + "': only two-column blocks are supported");
                add(u_start(0), ulo, uhi, t.label + "[" + t.columns[0] + "]", 0);
                add(u_start(1), ulo, uhi, t.label + "[" + t.columns[1] + "]", 0);
                add(st ? std::atanh(st->rho) : 0.0, -kRhoBound, kRhoBound, t.label + ":rho", 1);
                break;
            case CovKind::Car:
                add(u_start(0), ulo, uhi, t.label + "[" + t.columns[0] + "]", 0);
                if (opts.estimate_car_alpha) add(st ? st->alpha : opts.car_alpha, 0.0, 0.99, t.label + ":alpha", 2);
                break;
            case CovKind::GpSe: {
                const auto [mn, mx] = std::minmax_element(t.gp_x.begin(), t.gp_x.end());
                const double range = std::max(*mx - *mn, 1e-8);
                add(u_start(0), ulo, uhi, t.label + "[" + t.columns[0] + "]", 0);
                add(std::log(st ? st->lambda : range / 4.0), std::log(range * 1e-3), std::log(range * 10.0),
                    t.label + ":lambda", 3);
                break;
            }
        }
    }
    return c;
}

// Relative covariance parameters (sigma2 = 1) from coordinates.
CovarianceParams params_from_coordinates(const std::vector<TermDesign>& terms, const std::vector<double>& x,
                                         const LmmOptions& opts) {
    CovarianceParams out;
    std::size_t i = 0;
    for (const auto& t : terms) {
        TermParams p;
        switch (t.kind) {
            case CovKind::Diagonal:
                for (int col = 0; col < t.dim(); ++col) p.tau2.push_back(std::exp(2.0 * x[i++]));
                break;
            case CovKind::Correlated:
                p.tau2 = {std::exp(2.0 * x[i]), std::exp(2.0 * x[i + 1])};
                p.rho = std::tanh(x[i + 2]);
                i += 3;
                break;
            case CovKind::Car:
                p.tau2 = {std::exp(2.0 * x[i++])};
                p.alpha = opts.estimate_car_alpha ? x[i++] : opts.car_alpha;
                break;
            case CovKind::GpSe:
                p.tau2 = {std::exp(2.0 * x[i])};
                p.lambda = std::exp(x[i + 1]);
                i += 2;
                break;
        }
        out.push_back(std::move(p));
    }
    return out;
}

constexpr double kGolden = 0.38196601125010515;

// Minimises f on [lo, hi] starting from (x0, f0); never returns a point
// worse than x0.
std::pair<double, double> line_minimize(const std::function<double(double)>& f, double x0, double f0,
                                        double lo, double hi, double tol) {
    double best_x = x0, best_f = f0;
    auto eval = [&](double x) {
        double v = f(x);
        if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
        if (v < best_f) {
            best_f = v;
            best_x = x;
        }
        return v;
    };
    // Bracket the minimum by expanding steps from x0.
    double step = 0.5;
    double a = lo, c = hi;
    double xr = std::min(x0 + step, hi);
    double fr = xr > x0 ? eval(xr) : f0;
    if (xr > x0 && fr < f0) {
        double prev = x0;
        double cur = xr, fcur = fr;
        for (;;) {
            if (cur >= hi) {
                a = prev;
                c = hi;
                break;
            }
            step *= 2.0;
            const double nx = std::min(cur + step, hi);
            const double fn = eval(nx);
            if (fn >= fcur) {
                a = prev;
                c = nx;
                break;
            }
            prev = cur;
            cur = nx;
            fcur = fn;
        }
    } else {
        double prev = xr;
        double cur = x0, fcur = f0;
        for (;;) {
            if (cur <= lo) {
                a = lo;
                c = prev;
                break;
            }
            const double nx = std::max(cur - step, lo);
            const double fn = eval(nx);
            if (fn >= fcur) {
                a = nx;
                c = prev;
                break;
            }
            prev = cur;
            cur = nx;
            fcur = fn;
            step *= 2.0;
        }
    }
    // Golden-section refinement on [a, c].
    double x1 = a + kGolden * (c - a);
    double x2 = c - kGolden * (c - a);
    double f1 = eval(x1), f2 = eval(x2);
    while (c - a > tol) {
        if (f1 <= f2) {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + kGolden * (c - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = c - kGolden * (c - a);
            f2 = eval(x2);
        }
    }
    if (best_x - lo < 2.0 * tol) eval(lo);
    if (hi - best_x < 2.0 * tol) eval(hi);
    return {best_x, best_f};
}

void check_lmm_inputs(const DesignMatrices& design) {
    if (design.spec.family != Family::Gaussian)
        throw InputError("classical fitting supports the gaussian family only");
    if (design.n() <= design.p()) throw InputError("need more rows than fixed effects");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.X);
    if (qr.rank() < design.p()) throw InputError("rank-deficient fixed-effects design");
}

double response_sd(const DesignMatrices& design) {
    const Eigen::VectorXd y = design.y - design.offset;
    if (y.size() < 2) return 0.0;
    return std::sqrt((y.array() - y.mean()).square().sum() / double(y.size() - 1));
}

}  // namespace

FittedModel fit_lmm(const DesignMatrices& design, FitMethod objective, const LmmOptions& opts) {
    if (objective == FitMethod::Mcmc) throw InputError("fit_lmm: objective must be ml or reml");
    check_lmm_inputs(design);
    const SuffStats stats(design);
    const auto terms = term_layout(design);

    // OLS residual variance as the scale for starting values.
    double sigma2_guess = 1.0;
    {
        const SparseMatrix empty(0, 0);
        SuffStats ols = stats;
        ols.q = 0;
        auto pls = solve_pls(ols, empty);
        if (pls.ok) sigma2_guess = std::max(pls.r2 / std::max(1, stats.n - stats.p), 1e-300);
    }

    Coordinates coord = initial_coordinates(terms, opts, sigma2_guess);
    auto deviance_at = [&](const std::vector<double>& x) {
        const auto rel = params_from_coordinates(terms, x, opts);
        SparseMatrix lambda = relative_factor(terms, rel, 1.0);
        auto pls = solve_pls(stats, lambda);
        if (!pls.ok) return std::numeric_limits<double>::infinity();
        return profiled_deviance(pls, stats.n, stats.p, objective);
    };

    FittedModel fit;
    fit.method = objective;
    double dev = deviance_at(coord.x);
    if (!std::isfinite(dev)) throw NumericalError("deviance is not finite at the starting values");
    fit.deviance_trace.push_back(dev);

    const std::size_t m = coord.x.size();
    bool converged = m == 0;
    double tol = 1e-3;
    int sweep = 0;
    while (!converged && sweep < opts.max_sweeps) {
        ++sweep;
        const double dev_before = dev;
        double max_change = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            auto f1 = [&](double v) {
                auto x = coord.x;
                x[i] = v;
                return deviance_at(x);
            };
            auto [xi, fi] = line_minimize(f1, coord.x[i], dev, coord.lo[i], coord.hi[i], tol);
            max_change = std::max(max_change, std::abs(xi - coord.x[i]));
            coord.x[i] = xi;
            dev = fi;
        }
        fit.deviance_trace.push_back(dev);
        const double improvement = dev_before - dev;
        if (improvement < opts.dev_tol && max_change < opts.param_tol && tol <= 1e-9) converged = true;
        tol = std::clamp(0.01 * max_change, 1e-10, 1e-3);
    }
    fit.sweeps = sweep;
    if (!converged)
        throw NumericalError("fit_lmm did not converge after " + std::to_string(opts.max_sweeps) + " sweeps");

    for (std::size_t i = 0; i < m; ++i) {
        const bool at_lo = coord.x[i] - coord.lo[i] < 1e-6;
        const bool at_hi = coord.hi[i] - coord.x[i] < 1e-6;
        if ((coord.kind[i] == 0 && at_lo) || (coord.kind[i] == 1 && (at_lo || at_hi))) {
            fit.flags.boundary = true;
            fit.flags.boundary_params.push_back(coord.names[i]);
        }
    }

    const auto rel = params_from_coordinates(terms, coord.x, opts);
    const SparseMatrix lambda = relative_factor(terms, rel, 1.0);
    SparseLLT llt;
    const auto pls = solve_pls(stats, lambda, &llt);
    if (!pls.ok) throw NumericalError("fit_lmm: final factorisation failed");

    const int dof = objective == FitMethod::Ml ? stats.n : stats.n - stats.p;
    fit.sigma2 = pls.r2 / dof;
    fit.beta = pls.beta;
    fit.fixed_names = design.fixed_names;
    fit.gamma = rel;
    for (auto& g : fit.gamma)
        for (auto& v : g.tau2) v *= fit.sigma2;
    fit.loglik = -0.5 * profiled_deviance(pls, stats.n, stats.p, objective);
    fit.n_obs = stats.n;
    fit.terms = terms;
    if (stats.q > 0) {
        fit.theta = lambda * pls.u;
        const Eigen::MatrixXd lam = Eigen::MatrixXd(lambda);
        const Eigen::MatrixXd ainv_lt = llt.solve(Eigen::MatrixXd(lambda.transpose()));
        Eigen::MatrixXd omega = fit.sigma2 * (lam * ainv_lt);
        fit.omega = 0.5 * (omega + omega.transpose());
    } else {
        fit.theta.resize(0);
        fit.omega.resize(0, 0);
    }
    if (opts.diagonal_omega && stats.q > 0) {
        fit.omega = diagonal_omega_fallback(fit.omega.diagonal().cwiseSqrt());
        fit.flags.diagonal_approx = true;
    }
    return fit;
}

FittedModel fit_lmm(const ModelSpec& spec, const Dataset& data, FitMethod objective, const LmmOptions& opts) {
    return fit_lmm(build_design(spec, data), objective, opts);
}

Blup blup_with_covariance(const FittedModel& fit, const DesignMatrices& design) {
    if (fit.gamma.size() != design.terms.size()) throw InputError("blup: fit and design disagree on terms");
    if (!(fit.sigma2 > 0.0)) throw InputError("blup: residual variance must be positive");
    for (std::size_t k = 0; k < fit.gamma.size(); ++k) {
        for (double v : fit.gamma[k].tau2)
            if (!(v > 0.0))
                throw NumericalError("blup: term '" + design.terms[k].label +
                                     "' has zero variance, so G is singular");
    }
    const SparseMatrix lambda = relative_factor(design.terms, fit.gamma, fit.sigma2);
    const int q = design.q();
    SparseMatrix A = lambda.transpose() * (design.Z.transpose() * design.Z) * lambda;
    SparseMatrix I(q, q);
    I.setIdentity();
    A += I;
    SparseLLT llt(A);
    if (llt.info() != Eigen::Success) throw NumericalError("blup: factorisation failed");
    const Eigen::VectorXd r = design.y - design.offset - design.X * fit.beta;
    const Eigen::VectorXd u = llt.solve(Eigen::VectorXd(lambda.transpose() * (design.Z.transpose() * r)));
    Blup out;
    out.theta = lambda * u;
    const Eigen::MatrixXd lam = Eigen::MatrixXd(lambda);
    Eigen::MatrixXd omega = fit.sigma2 * (lam * llt.solve(Eigen::MatrixXd(lambda.transpose())));
    out.omega = 0.5 * (omega + omega.transpose());
    return out;
}

Eigen::MatrixXd diagonal_omega_fallback(const Eigen::VectorXd& se) {
    for (Eigen::Index i = 0; i < se.size(); ++i)
        if (!(se(i) > 0.0) || !std::isfinite(se(i)))
            throw InputError("diagonal_omega_fallback: standard errors must be positive");
    return se.array().square().matrix().asDiagonal();
}

double gaussian_loglik(const DesignMatrices& design, const Eigen::VectorXd& beta, double sigma2,
                       const CovarianceParams& gamma) {
    if (!(sigma2 > 0.0)) throw InputError("gaussian_loglik: sigma2 must be positive");
    const int n = design.n();
    const Eigen::VectorXd r = design.y - design.offset - design.X * beta;
    double logdet = n * std::log(sigma2);
    double quad = r.squaredNorm();
    if (design.q() > 0) {
        const SparseMatrix lambda = relative_factor(design.terms, gamma, sigma2);
        SparseMatrix A = lambda.transpose() * (design.Z.transpose() * design.Z) * lambda;
        SparseMatrix I(design.q(), design.q());
        I.setIdentity();
        A += I;
        SparseLLT llt(A);
        if (llt.info() != Eigen::Success) throw NumericalError("gaussian_loglik: marginal covariance is not PSD");
        const auto diag = llt.matrixL().nestedExpression().diagonal();
        for (Eigen::Index i = 0; i < diag.size(); ++i) logdet += 2.0 * std::log(diag(i));
        const Eigen::VectorXd w = lambda.transpose() * (design.Z.transpose() * r);
        quad -= w.dot(llt.solve(w));
    }
    return -0.5 * (n * kLog2Pi + logdet + quad / sigma2);
}

double profile_loglik(const DesignMatrices& design, const CovarianceParams& gamma) {
    check_lmm_inputs(design);
    const SuffStats stats(design);
    for (std::size_t k = 0; k < gamma.size(); ++k) check_params(design.terms.at(k), gamma[k]);
    auto neg2ll = [&](double log_s2) {
        const double s2 = std::exp(log_s2);
        const SparseMatrix lambda = stats.q > 0 ? relative_factor(design.terms, gamma, s2) : SparseMatrix(0, 0);
        auto pls = solve_pls(stats, lambda);
        if (!pls.ok) return std::numeric_limits<double>::infinity();
        return pls.logdet_a + stats.n * (kLog2Pi + log_s2) + pls.r2 / s2;
    };
    double scale = response_sd(design);
    scale = scale > 0.0 ? scale * scale : 1.0;
    const double lo = std::log(scale) - 40.0;
    const double hi = std::log(scale) + 10.0;
    const double x0 = std::log(scale);
    const double f0 = neg2ll(x0);
    auto [x, f] = line_minimize(neg2ll, x0, f0, lo, hi, 1e-12);
    if (!std::isfinite(f)) throw NumericalError("profile_loglik: marginal covariance is not PSD");
    return -0.5 * f;
}

double profile_loglik(const ModelSpec& spec, const Dataset& data, const CovarianceParams& gamma) {
    return profile_loglik(build_design(spec, data), gamma);
}

}  // namespace ebfkit
