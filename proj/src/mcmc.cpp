#include "ebfkit/mcmc.hpp"

#include "ebfkit/errors.hpp"
#include "ebfkit/lmm.hpp"
#include "ebfkit/parallel.hpp"

#include <Eigen/SparseCholesky>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ebfkit {

void McmcConfig::validate() const {
    if (chains < 1) throw InputError("mcmc: chains must be at least 1");
    if (iterations < 1) throw InputError("mcmc: iterations must be at least 1");
    if (burn_in < 0 || burn_in >= iterations) throw InputError("mcmc: burn_in must be in [0, iterations)");
    if (thin < 1) throw InputError("mcmc: thin must be at least 1");
    if (adapt_window < 1) throw InputError("mcmc: adapt_window must be at least 1");
    if (retained_per_chain() < 1) throw InputError("mcmc: no draws retained");
}

std::string theta_name(const TermDesign& term, int level, int column) {
    return term.label + "[" + term.level_names.at(level) + "," + term.columns.at(column) + "]";
}

std::string gamma_name(const TermDesign& term, const std::string& param) { return term.label + ":" + param; }

int PosteriorFit::column(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw InputError("posterior has no parameter '" + name + "'");
    return static_cast<int>(it - names.begin());
}

const DrawBlock& PosteriorFit::block(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return b;
    throw InputError("posterior has no block '" + name + "'");
}

std::vector<int> PosteriorFit::theta_columns(const TermSelector& sel) const {
    const TermDesign* term = nullptr;
    for (const auto& t : terms)
        if (t.label == sel.label) term = &t;
    if (!term) throw InputError("unknown random term '" + sel.label + "'");
    const auto& b = block("theta:" + term->label);
    std::vector<int> cols;
    if (!sel.column) {
        for (int i = 0; i < b.size; ++i) cols.push_back(b.begin + i);
        return cols;
    }
    const int c = term->column_index(*sel.column);
    for (int j = 0; j < term->n_levels(); ++j) cols.push_back(b.begin + j * term->dim() + c);
    return cols;
}

Eigen::VectorXd PosteriorFit::beta_mean() const {
    const auto& b = block("phi");
    return draws.middleCols(b.begin, static_cast<int>(fixed_names.size())).colwise().mean().transpose();
}

double PosteriorFit::sigma2_mean() const { return draws.col(column("sigma2")).mean(); }

CovarianceParams PosteriorFit::gamma_mean() const {
    CovarianceParams out;
    for (const auto& t : terms) {
        const auto& b = block("gamma:" + t.label);
        const Eigen::VectorXd m = draws.middleCols(b.begin, b.size).colwise().mean().transpose();
        out.push_back(params_from_values(t, std::vector<double>(m.data(), m.data() + m.size())));
    }
    return out;
}

Eigen::VectorXd PosteriorFit::beta_at(int row) const {
    const auto& b = block("phi");
    return draws.row(row).segment(b.begin, static_cast<int>(fixed_names.size())).transpose();
}

double PosteriorFit::sigma2_at(int row) const { return draws(row, column("sigma2")); }

Eigen::VectorXd PosteriorFit::theta_at(int row) const {
    int q = 0;
    for (const auto& t : terms) q += t.size();
    Eigen::VectorXd out(q);
    for (const auto& t : terms) {
        const auto& b = block("theta:" + t.label);
        out.segment(t.offset, t.size()) = draws.row(row).segment(b.begin, b.size).transpose();
    }
    return out;
}

CovarianceParams PosteriorFit::gamma_at(int row) const {
    CovarianceParams out;
    for (const auto& t : terms) {
        const auto& b = block("gamma:" + t.label);
        std::vector<double> v(b.size);
        for (int i = 0; i < b.size; ++i) v[i] = draws(row, b.begin + i);
        out.push_back(params_from_values(t, v));
    }
    return out;
}

double draw_variance(double shape, double scale, std::mt19937_64& rng, bool* grid_used) {
    if (!std::isfinite(shape) || !std::isfinite(scale) || scale < 0.0)
        throw NumericalError("variance draw with non-finite conditional");
    if (scale == 0.0) return 0.0;
    if (shape > 0.0) {
        std::gamma_distribution<double> g(shape, 1.0);
        double x = g(rng);
        if (!(x > 0.0)) x = std::numeric_limits<double>::min();
        return scale / x;
    }
    // Inverse CDF on a log grid: density of t = log v is
    // exp(-shape t - scale e^{-t}), truncated to [log scale - 30, log scale + 15].
    if (grid_used) *grid_used = true;
    constexpr int kGrid = 4001;
    const double lo = std::log(scale) - 30.0;
    const double hi = std::log(scale) + 15.0;
    const double h = (hi - lo) / (kGrid - 1);
    std::vector<double> logw(kGrid);
    for (int i = 0; i < kGrid; ++i) {
        const double t = lo + i * h;
        logw[i] = -shape * t - scale * std::exp(-t);
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    std::vector<double> cdf(kGrid, 0.0);
    for (int i = 1; i < kGrid; ++i)
        cdf[i] = cdf[i - 1] + 0.5 * h * (std::exp(logw[i - 1] - mx) + std::exp(logw[i] - mx));
    const double total = cdf.back();
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError("variance grid fallback failed");
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * total;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const int i = std::clamp(static_cast<int>(it - cdf.begin()), 1, kGrid - 1);
    const double frac = (u - cdf[i - 1]) / std::max(cdf[i] - cdf[i - 1], 1e-300);
    return std::exp(lo + (i - 1 + std::clamp(frac, 0.0, 1.0)) * h);
}

namespace {

using Rng = std::mt19937_64;

struct Random {
    Rng eng;
    std::normal_distribution<double> norm{0.0, 1.0};
    std::uniform_real_distribution<double> unif{0.0, 1.0};

    explicit Random(std::uint64_t seed) : eng(seed) {}
    double normal() { return norm(eng); }
    double uniform() { return unif(eng); }
    // (0, 1], safe for logarithms
    double uniform_pos() { return 1.0 - unif(eng); }
};

struct Counter {
    long accepted = 0, proposed = 0;          // after burn-in
    long batch_accepted = 0, batch_proposed = 0;

    void record(bool acc, bool burning) {
        if (burning) {
            ++batch_proposed;
            batch_accepted += acc;
        } else {
            ++proposed;
            accepted += acc;
        }
    }
    double rate() const { return proposed > 0 ? double(accepted) / proposed : 1.0; }
};

constexpr double kTargetAcceptance = 0.44;

// Robbins-Monro style tweak of a log step size after one adaptation batch.
void adapt_step(double& log_step, Counter& c, int batch_index) {
    if (c.batch_proposed == 0) return;
    const double rate = double(c.batch_accepted) / c.batch_proposed;
    const double delta = std::min(0.5, 1.0 / std::sqrt(double(batch_index)));
    log_step += rate > kTargetAcceptance ? delta : -delta;
    log_step = std::clamp(log_step, -20.0, 5.0);
    c.batch_accepted = c.batch_proposed = 0;
}

struct TermState {
    const TermDesign* term = nullptr;
    TermParams params;
    Eigen::MatrixXd unit_prec;  // car / gp precision at tau2 = 1
    double unit_logdet = 0.0;   // log|unit_prec|
    double gp_range = 0.0;
    double log_step_rho = std::log(0.3);
    double log_step_struct = std::log(0.3);
    Counter rho_counter, struct_counter;
    std::vector<double> log_step_scale;  // per column, Gibbs rescaling move
    std::vector<Counter> scale_counter;
    double log_step_mtau = std::log(0.5), log_step_mlambda = std::log(0.5);  // gp, theta integrated out
    Counter mtau_counter, mlambda_counter;

    void refresh_structure() {
        if (term->kind == CovKind::Car) {
            unit_prec = car_precision(1.0, *term->adjacency, params.alpha);
            unit_logdet = -car_log_det_unit(*term->adjacency, params.alpha);
        } else if (term->kind == CovKind::GpSe) {
            Eigen::LLT<Eigen::MatrixXd> llt(gp_se_cov(1.0, params.lambda, term->gp_x));
            if (llt.info() != Eigen::Success) throw NumericalError("gp kernel factorisation failed");
            unit_logdet = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
            unit_prec = llt.solve(Eigen::MatrixXd::Identity(term->size(), term->size()));
            unit_prec = 0.5 * (unit_prec + unit_prec.transpose()).eval();
        }
    }
};

// Structural zero pattern of a car precision: self, neighbours and
// neighbours of neighbours.
std::vector<std::pair<int, int>> car_pattern(const Adjacency& adj) {
    const int J = adj.size();
    std::vector<std::vector<char>> mask(J, std::vector<char>(J, 0));
    for (int i = 0; i < J; ++i) {
        mask[i][i] = 1;
        for (int a : adj.neighbors(i)) {
            mask[i][a] = mask[a][i] = 1;
            for (int b : adj.neighbors(a)) mask[i][b] = mask[b][i] = 1;
        }
    }
    std::vector<std::pair<int, int>> out;
    for (int j = 0; j < J; ++j)
        for (int i = 0; i < J; ++i)
            if (mask[i][j]) out.emplace_back(i, j);
    return out;
}

// Full-scale prior precision of a term as triplets at `base`. The emitted
// positions depend only on the term layout, never on parameter values.
void prior_triplets(const TermState& s, const std::vector<std::pair<int, int>>& car_pat, int base,
                    std::vector<Eigen::Triplet<double>>& out) {
    const auto& t = *s.term;
    switch (t.kind) {
        case CovKind::Diagonal:
            for (int j = 0; j < t.n_levels(); ++j)
                for (int c = 0; c < t.dim(); ++c)
                    out.emplace_back(base + j * t.dim() + c, base + j * t.dim() + c, 1.0 / s.params.tau2[c]);
            break;
        case CovKind::Correlated: {
            const Eigen::Matrix2d P = level_cov(t, s.params).inverse();
            for (int j = 0; j < t.n_levels(); ++j)
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b) out.emplace_back(base + 2 * j + a, base + 2 * j + b, P(a, b));
            break;
        }
        case CovKind::Car:
            for (auto [i, j] : car_pat) out.emplace_back(base + i, base + j, s.unit_prec(i, j) / s.params.tau2[0]);
            break;
        case CovKind::GpSe:
            for (int j = 0; j < t.size(); ++j)
                for (int i = 0; i < t.size(); ++i)
                    out.emplace_back(base + i, base + j, s.unit_prec(i, j) / s.params.tau2[0]);
            break;
    }
}

// Log conditional density of a two-column block's (log tau1^2, log tau2^2,
// atanh rho) given the scatter matrix S of J level vectors, under flat
// priors on the variances and on rho.
double correlated_logpost(double u1, double u2, double z, const Eigen::Matrix2d& S, int J) {
    const double t1 = std::exp(u1), t2 = std::exp(u2);
    const double rho = std::tanh(z);
    const double one_m = 1.0 - rho * rho;
    if (!(one_m > 0.0)) return -std::numeric_limits<double>::infinity();
    const double logdet = u1 + u2 + std::log(one_m);
    const double tr = (S(0, 0) / t1 + S(1, 1) / t2 - 2.0 * rho * S(0, 1) / std::sqrt(t1 * t2)) / one_m;
    return -0.5 * J * logdet - 0.5 * tr + u1 + u2 + std::log(one_m);
}

// Univariate slice sampler (stepping out, then shrinkage).
template <class F>
double slice_sample(const F& logf, double x0, double w, double lower, Random& rng) {
    const double f0 = logf(x0);
    const double level = f0 + std::log(rng.uniform_pos());
    double l = x0 - w * rng.uniform();
    double r = l + w;
    for (int k = 0; k < 50 && l > lower && logf(l) > level; ++k) l -= w;
    for (int k = 0; k < 50 && logf(r) > level; ++k) r += w;
    l = std::max(l, lower);
    for (int k = 0; k < 200; ++k) {
        const double x = l + (r - l) * rng.uniform();
        if (logf(x) > level) return x;
        if (x < x0) l = x;
        else r = x;
    }
    return x0;
}

struct SamplerCommon {
    double var_floor = 1e-10;
    // gp magnitude tau ~ N+(0, gp_tau_var); the flat prior leaves a ridge
    // at long length scales where the kernel is nearly constant
    double gp_tau_var = 100.0;
    bool grid_used = false;
};

double quad_unit(const TermState& s, const Eigen::VectorXd& th) { return th.dot(s.unit_prec * th); }

// Updates a term's covariance parameters given its coefficients.
void update_term(TermState& s, const Eigen::VectorXd& th, Random& rng, SamplerCommon& common, bool burning,
                 bool estimate_alpha) {
    const auto& t = *s.term;
    const int J = t.n_levels();
    const double floor = common.var_floor;
    switch (t.kind) {
        case CovKind::Diagonal:
            for (int c = 0; c < t.dim(); ++c) {
                double S = 0.0;
                for (int j = 0; j < J; ++j) S += th(j * t.dim() + c) * th(j * t.dim() + c);
                s.params.tau2[c] =
                    std::max(floor, draw_variance(0.5 * J - 1.0, 0.5 * S, rng.eng, &common.grid_used));
            }
            break;
        case CovKind::Correlated: {
            Eigen::Matrix2d S = Eigen::Matrix2d::Zero();
            for (int j = 0; j < J; ++j) {
                const Eigen::Vector2d v = th.segment<2>(2 * j);
                S += v * v.transpose();
            }
            double u1 = std::log(s.params.tau2[0]);
            double u2 = std::log(s.params.tau2[1]);
            double z = std::atanh(s.params.rho);
            const double lo = std::log(floor);
            u1 = slice_sample([&](double u) { return correlated_logpost(u, u2, z, S, J); }, u1, 1.0, lo, rng);
            u2 = slice_sample([&](double u) { return correlated_logpost(u1, u, z, S, J); }, u2, 1.0, lo, rng);
            const double zp = z + std::exp(s.log_step_rho) * rng.normal();
            const double bound = std::atanh(1.0 - 1e-12);
            bool acc = false;
            if (std::abs(zp) < bound) {
                const double lr = correlated_logpost(u1, u2, zp, S, J) - correlated_logpost(u1, u2, z, S, J);
                acc = std::log(rng.uniform_pos()) < lr;
            }
            if (acc) z = zp;
            s.rho_counter.record(acc, burning);
            s.params.tau2 = {std::exp(u1), std::exp(u2)};
            s.params.rho = std::tanh(z);
            break;
        }
        case CovKind::Car: {
            double Q = quad_unit(s, th);
            s.params.tau2[0] = std::max(floor, draw_variance(0.5 * J - 1.0, 0.5 * Q, rng.eng, &common.grid_used));
            if (estimate_alpha) {
                // random walk on logit(alpha), uniform prior on [0, 1)
                const double a = s.params.alpha;
                const double za = std::log(a / (1.0 - a));
                const double zp = za + std::exp(s.log_step_struct) * rng.normal();
                const double ap = 1.0 / (1.0 + std::exp(-zp));
                bool acc = false;
                if (ap > 0.0 && 1.0 - ap > 1e-8) {
                    const Eigen::MatrixXd Pp = car_precision(1.0, *t.adjacency, ap);
                    const double ldp = -car_log_det_unit(*t.adjacency, ap);
                    const double tau2 = s.params.tau2[0];
                    const double lp_new = 0.5 * ldp - 0.5 * th.dot(Pp * th) / tau2 + std::log(ap * (1.0 - ap));
                    const double lp_old = 0.5 * s.unit_logdet - 0.5 * Q / tau2 + std::log(a * (1.0 - a));
                    acc = std::log(rng.uniform_pos()) < lp_new - lp_old;
                    if (acc) {
                        s.params.alpha = ap;
                        s.unit_prec = Pp;
                        s.unit_logdet = ldp;
                    }
                }
                s.struct_counter.record(acc, burning);
            }
            break;
        }
        case CovKind::GpSe: {
            const double Q = quad_unit(s, th);
            // independence proposal from the flat-prior part, corrected for exp(-tau2 / 2v)
            const double prop = std::max(floor, draw_variance(0.5 * J - 0.5, 0.5 * Q, rng.eng, &common.grid_used));
            if (std::log(rng.uniform_pos()) < -(prop - s.params.tau2[0]) / (2.0 * common.gp_tau_var))
                s.params.tau2[0] = prop;
            // random walk on log lambda, flat prior on (0, 10 range)
            const double l = s.params.lambda;
            const double lp = l * std::exp(std::exp(s.log_step_struct) * rng.normal());
            bool acc = false;
            if (lp < 10.0 * s.gp_range) {
                Eigen::LLT<Eigen::MatrixXd> llt(gp_se_cov(1.0, lp, t.gp_x));
                if (llt.info() == Eigen::Success) {
                    const double ld_prec = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
                    const Eigen::VectorXd w = llt.matrixL().solve(th);
                    const double tau2 = s.params.tau2[0];
                    const double lp_new = 0.5 * ld_prec - 0.5 * w.squaredNorm() / tau2 + std::log(lp);
                    const double lp_old = 0.5 * s.unit_logdet - 0.5 * Q / tau2 + std::log(l);
                    acc = std::log(rng.uniform_pos()) < lp_new - lp_old;
                    if (acc) {
                        s.params.lambda = lp;
                        s.refresh_structure();
                    }
                }
            }
            s.struct_counter.record(acc, burning);
            break;
        }
    }
}

void adapt_term(TermState& s, int batch_index) {
    adapt_step(s.log_step_rho, s.rho_counter, batch_index);
    adapt_step(s.log_step_struct, s.struct_counter, batch_index);
    for (std::size_t c = 0; c < s.scale_counter.size(); ++c)
        adapt_step(s.log_step_scale[c], s.scale_counter[c], batch_index);
    adapt_step(s.log_step_mtau, s.mtau_counter, batch_index);
    adapt_step(s.log_step_mlambda, s.mlambda_counter, batch_index);
}

void initial_term_state(TermState& s, const TermDesign& t, double scale, const McmcConfig& cfg, Random& rng) {
    s.term = &t;
    s.params = TermParams{};
    const int d = t.dim();
    for (int c = 0; c < d; ++c) s.params.tau2.push_back(scale * std::exp(rng.uniform() * 2.0 - 1.0));
    s.log_step_scale.assign(d, std::log(0.3));
    s.scale_counter.assign(d, Counter{});
    s.params.alpha = cfg.car_alpha;
    if (t.kind == CovKind::GpSe) {
        const auto [mn, mx] = std::minmax_element(t.gp_x.begin(), t.gp_x.end());
        s.gp_range = std::max(*mx - *mn, 1e-8);
        s.params.lambda = 0.25 * s.gp_range * std::exp(rng.uniform() - 0.5);
    }
    if (t.kind == CovKind::Car) check_alpha(cfg.car_alpha);
    s.refresh_structure();
}

// Layout of the draws matrix shared by both samplers.
struct Layout {
    std::vector<std::string> names;
    std::vector<DrawBlock> blocks;
    int n_phi = 0;
    std::vector<int> gamma_begin;
    std::vector<int> theta_begin;
};

Layout make_layout(const DesignMatrices& d, bool with_sigma) {
    Layout L;
    for (const auto& n : d.fixed_names) L.names.push_back(n);
    if (with_sigma) L.names.push_back("sigma2");
    L.n_phi = static_cast<int>(L.names.size());
    L.blocks.push_back({"phi", 0, L.n_phi});
    for (const auto& t : d.terms) {
        const int b = static_cast<int>(L.names.size());
        L.theta_begin.push_back(b);
        for (int j = 0; j < t.n_levels(); ++j)
            for (int c = 0; c < t.dim(); ++c) L.names.push_back(theta_name(t, j, c));
        L.blocks.push_back({"theta:" + t.label, b, t.size()});
    }
    for (const auto& t : d.terms) {
        const int b = static_cast<int>(L.names.size());
        L.gamma_begin.push_back(b);
        for (const auto& pn : param_names(t)) L.names.push_back(gamma_name(t, pn));
        L.blocks.push_back({"gamma:" + t.label, b, static_cast<int>(param_names(t).size())});
    }
    return L;
}

void store_gamma(const Layout& L, const std::vector<TermState>& states, Eigen::MatrixXd& draws, int row) {
    for (std::size_t k = 0; k < states.size(); ++k) {
        const auto v = param_values(*states[k].term, states[k].params);
        for (std::size_t i = 0; i < v.size(); ++i) draws(row, L.gamma_begin[k] + static_cast<int>(i)) = v[i];
    }
}

struct ChainResult {
    Eigen::MatrixXd draws;
    McmcFlags flags;
    std::map<std::string, std::pair<long, long>> acceptance;
};

PosteriorFit assemble(const DesignMatrices& design, const McmcConfig& cfg, const Layout& L,
                      std::vector<ChainResult>& chains) {
    PosteriorFit fit;
    fit.spec = design.spec;
    fit.fixed_names = design.fixed_names;
    fit.terms = term_layout(design);
    fit.names = L.names;
    fit.blocks = L.blocks;
    fit.chains = cfg.chains;
    fit.n_obs = design.n();
    fit.config = cfg;
    const int per = cfg.retained_per_chain();
    fit.draws.resize(static_cast<Eigen::Index>(per) * cfg.chains, static_cast<Eigen::Index>(L.names.size()));
    std::map<std::string, std::pair<long, long>> acc;
    for (int c = 0; c < cfg.chains; ++c) {
        fit.draws.middleRows(static_cast<Eigen::Index>(c) * per, per) = chains[c].draws;
        fit.flags.clamped |= chains[c].flags.clamped;
        fit.flags.grid_fallback |= chains[c].flags.grid_fallback;
        for (const auto& [k, v] : chains[c].acceptance) {
            acc[k].first += v.first;
            acc[k].second += v.second;
        }
    }
    for (const auto& [k, v] : acc) {
        const double rate = v.second > 0 ? double(v.first) / v.second : 1.0;
        fit.acceptance[k] = rate;
        if (rate < 0.05) {
            fit.flags.low_acceptance = true;
            fit.flags.low_acceptance_params.push_back(k);
        }
    }
    if (!fit.draws.allFinite()) throw NumericalError("mcmc produced non-finite draws");
    return fit;
}

void record_term_acceptance(const std::vector<TermState>& states, bool estimate_alpha,
                            std::map<std::string, std::pair<long, long>>& acc) {
    for (const auto& s : states) {
        const auto& t = *s.term;
        if (t.kind == CovKind::Correlated)
            acc[gamma_name(t, "rho")] = {s.rho_counter.accepted, s.rho_counter.proposed};
        if (t.kind == CovKind::GpSe) {
            acc[gamma_name(t, "lambda")] = {s.struct_counter.accepted, s.struct_counter.proposed};
            if (s.mtau_counter.proposed > 0) {
                acc[gamma_name(t, "tau2_marginal")] = {s.mtau_counter.accepted, s.mtau_counter.proposed};
                acc[gamma_name(t, "lambda_marginal")] = {s.mlambda_counter.accepted, s.mlambda_counter.proposed};
            }
        }
        if (t.kind == CovKind::Car && estimate_alpha)
            acc[gamma_name(t, "alpha")] = {s.struct_counter.accepted, s.struct_counter.proposed};
        for (std::size_t c = 0; c < s.scale_counter.size(); ++c)
            if (s.scale_counter[c].proposed > 0)
                acc[gamma_name(t, "scale[" + t.columns[c] + "]")] = {s.scale_counter[c].accepted,
                                                                     s.scale_counter[c].proposed};
    }
}

int adapt_batch(const McmcConfig& cfg) { return std::max(10, cfg.adapt_window / 10); }

// ---------------------------------------------------------------- Gibbs

struct GibbsData {
    int n = 0, p = 0, q = 0;
    SparseMatrix CtC;  // (p + q) square, pattern widened to the full precision pattern
    Eigen::VectorXd Cty;
    double yty = 0.0;
    double yvar = 1.0;
    std::vector<std::vector<std::pair<int, int>>> car_patterns;
    // dense copies, only kept for models with gp terms
    bool marginal_gp = false;
    Eigen::MatrixXd X, Zd;
    Eigen::VectorXd yt;
};

constexpr int kMarginalGpMaxRows = 2000;

// log p(y | variances) with beta (flat) and all random coefficients
// integrated out, up to a constant.
double marginal_loglik(const Eigen::MatrixXd& V, const GibbsData& gd) {
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd ys = llt.matrixL().solve(gd.yt);
    double out = -llt.matrixLLT().diagonal().array().log().sum() - 0.5 * ys.squaredNorm();
    if (gd.p > 0) {
        const Eigen::MatrixXd Xs = llt.matrixL().solve(gd.X);
        Eigen::LLT<Eigen::MatrixXd> lx(Xs.transpose() * Xs);
        if (lx.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
        const Eigen::VectorXd b = lx.matrixL().solve(Xs.transpose() * ys);
        out += -lx.matrixLLT().diagonal().array().log().sum() + 0.5 * b.squaredNorm();
    }
    return out;
}

bool is_identity(const Eigen::MatrixXd& Z) { return Z.rows() == Z.cols() && Z.isIdentity(0.0); }

void add_term_cov(Eigen::MatrixXd& V, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& G) {
    if (is_identity(Z)) V += G;
    else V.noalias() += Z * G * Z.transpose();
}

// Random-walk updates of a gp term's log tau2 and log lambda against the
// marginal likelihood. Given theta the chain cannot leave a smooth
// (large lambda) or a wiggly (small lambda) mode; with theta integrated
// out it can pass through tau2 near zero, where lambda is free. The
// coefficients are redrawn right after, so the scan stays valid.
void marginal_gp_update(std::vector<TermState>& states, std::size_t k, const GibbsData& gd, double sigma2,
                        const SamplerCommon& common, Random& rng, bool burning) {
    Eigen::MatrixXd rest = Eigen::MatrixXd::Identity(gd.n, gd.n) * sigma2;
    for (std::size_t j = 0; j < states.size(); ++j) {
        if (j == k) continue;
        const auto& t = *states[j].term;
        add_term_cov(rest, gd.Zd.middleCols(t.offset, t.size()), term_cov(t, states[j].params));
    }
    auto& s = states[k];
    const auto& t = *s.term;
    const Eigen::MatrixXd Zk = gd.Zd.middleCols(t.offset, t.size());
    auto target = [&](double tau2, double lambda) {
        Eigen::MatrixXd V = rest;
        add_term_cov(V, Zk, gp_se_cov(std::sqrt(tau2), lambda, t.gp_x));
        // half-normal on tau and flat lambda, both in log coordinates
        return marginal_loglik(V, gd) + 0.5 * std::log(tau2) - tau2 / (2.0 * common.gp_tau_var) +
               std::log(lambda);
    };
    double cur = target(s.params.tau2[0], s.params.lambda);

    const double tp = s.params.tau2[0] * std::exp(std::exp(s.log_step_mtau) * rng.normal());
    bool acc = false;
    if (tp > common.var_floor) {
        const double lp = target(tp, s.params.lambda);
        acc = std::log(rng.uniform_pos()) < lp - cur;
        if (acc) {
            s.params.tau2[0] = tp;
            cur = lp;
        }
    }
    s.mtau_counter.record(acc, burning);

    const double lp_lambda = s.params.lambda * std::exp(std::exp(s.log_step_mlambda) * rng.normal());
    acc = false;
    if (lp_lambda < 10.0 * s.gp_range) {
        acc = std::log(rng.uniform_pos()) < target(s.params.tau2[0], lp_lambda) - cur;
        if (acc) {
            s.params.lambda = lp_lambda;
            s.refresh_structure();
        }
    }
    s.mlambda_counter.record(acc, burning);
}

// Moves one column of a term's coefficients and its variance together,
// theta_c -> a theta_c and tau2_c -> a^2 tau2_c. Under the flat variance prior
// the target ratio is L(a) / L(1) times a^2. Without it small variances
// stick near zero (theta shrinks, so tau2 shrinks, and so on).
void rescale_term(TermState& s, Eigen::VectorXd& x, int base, const GibbsData& gd, double sigma2,
                  const SamplerCommon& common, Random& rng, bool burning) {
    const double floor = common.var_floor;
    const auto& t = *s.term;
    const int d = t.dim(), J = t.n_levels();
    Eigen::VectorXd r = gd.CtC * x - gd.Cty;
    Eigen::VectorXd e(x.size());
    for (int c = 0; c < d; ++c) {
        e.setZero();
        for (int j = 0; j < J; ++j) e(base + j * d + c) = x(base + j * d + c);
        const Eigen::VectorXd g = gd.CtC * e;
        const double A = e.dot(g), B = e.dot(r);
        const double la = std::exp(s.log_step_scale[c]) * rng.normal();
        const double a = std::exp(la);
        bool acc = false;
        if (A > 0.0 && s.params.tau2[c] * a * a > floor) {
            double lr = -(2.0 * (a - 1.0) * B + (a - 1.0) * (a - 1.0) * A) / (2.0 * sigma2) + 2.0 * la;
            if (t.kind == CovKind::GpSe) lr += -la - s.params.tau2[c] * (a * a - 1.0) / (2.0 * common.gp_tau_var);
            acc = std::log(rng.uniform_pos()) < lr;
        }
        if (acc) {
            for (int j = 0; j < J; ++j) x(base + j * d + c) *= a;
            s.params.tau2[c] *= a * a;
            r += (a - 1.0) * g;
        }
        s.scale_counter[c].record(acc, burning);
    }
}

ChainResult run_gibbs_chain(const DesignMatrices& design, const GibbsData& gd, const McmcConfig& cfg,
                            const Layout& L, int chain) {
    Random rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(chain)));
    const int p = gd.p, q = gd.q, m = p + q;
    SamplerCommon common;
    common.var_floor = 1e-10 * gd.yvar;
    common.gp_tau_var = 100.0 * gd.yvar;

    std::vector<TermState> states(design.terms.size());
    const double init_scale = gd.yvar / std::max<std::size_t>(1, 2 * design.terms.size());
    for (std::size_t k = 0; k < states.size(); ++k)
        initial_term_state(states[k], design.terms[k], init_scale, cfg, rng);
    double sigma2 = gd.yvar * std::exp(rng.uniform() - 0.5);

    std::vector<Eigen::Triplet<double>> trip;
    auto prior_matrix = [&]() {
        trip.clear();
        for (std::size_t k = 0; k < states.size(); ++k)
            prior_triplets(states[k], gd.car_patterns[k], p + design.terms[k].offset, trip);
        SparseMatrix P(m, m);
        P.setFromTriplets(trip.begin(), trip.end());
        return P;
    };

    Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> llt;
    {
        SparseMatrix Q = gd.CtC + prior_matrix();
        llt.analyzePattern(Q);
    }
    Eigen::Index pattern_nnz = -1;

    ChainResult res;
    const int per = cfg.retained_per_chain();
    res.draws.resize(per, static_cast<Eigen::Index>(L.names.size()));
    Eigen::VectorXd x(m), z(m);
    const int batch = adapt_batch(cfg);
    int batch_index = 0;
    int stored = 0;
    for (int it = 0; it < cfg.iterations; ++it) {
        const bool burning = it < cfg.burn_in;
        if (gd.marginal_gp)
            for (std::size_t k = 0; k < states.size(); ++k)
                if (design.terms[k].kind == CovKind::GpSe) marginal_gp_update(states, k, gd, sigma2, common, rng, burning);
        // (beta, theta) | variances
        SparseMatrix Q = gd.CtC / sigma2 + prior_matrix();
        if (pattern_nnz < 0) pattern_nnz = Q.nonZeros();
        if (Q.nonZeros() != pattern_nnz) throw NumericalError("gibbs: precision pattern changed");
        llt.factorize(Q);
        if (llt.info() != Eigen::Success) throw NumericalError("gibbs: conditional precision is not positive definite");
        x = llt.solve(gd.Cty / sigma2);
        for (int i = 0; i < m; ++i) z(i) = rng.normal();
        const Eigen::VectorXd noise = llt.matrixU().solve(z);
        x += Eigen::VectorXd(llt.permutationPinv() * noise);
        if (!x.allFinite()) throw NumericalError("gibbs: non-finite coefficient draw");

        // sigma2 | rest
        double rss = gd.yty - 2.0 * x.dot(gd.Cty) + x.dot(gd.CtC * x);
        rss = std::max(rss, 0.0);
        sigma2 = std::max(common.var_floor, draw_variance(0.5 * gd.n - 1.0, 0.5 * rss, rng.eng, &common.grid_used));

        // covariance parameters | theta
        for (std::size_t k = 0; k < states.size(); ++k) {
            const auto& t = design.terms[k];
            update_term(states[k], x.segment(p + t.offset, t.size()), rng, common, burning, cfg.estimate_car_alpha);
            rescale_term(states[k], x, p + t.offset, gd, sigma2, common, rng, burning);
        }
        if (burning && (it + 1) % batch == 0) {
            ++batch_index;
            for (auto& s : states) adapt_term(s, batch_index);
        }
        if (!std::isfinite(sigma2)) throw NumericalError("gibbs: divergent chain");

        if (!burning && (it - cfg.burn_in) % cfg.thin == 0 && stored < per) {
            auto row = res.draws.row(stored);
            row.head(p) = x.head(p).transpose();
            row(p) = sigma2;
            for (std::size_t k = 0; k < states.size(); ++k) {
                const auto& t = design.terms[k];
                row.segment(L.theta_begin[k], t.size()) = x.segment(p + t.offset, t.size()).transpose();
            }
            store_gamma(L, states, res.draws, stored);
            ++stored;
        }
    }
    res.flags.grid_fallback = common.grid_used;
    record_term_acceptance(states, cfg.estimate_car_alpha, res.acceptance);
    return res;
}

// ---------------------------------------------------------------- MWG

constexpr double kEtaClamp = 35.0;

struct GlmmLik {
    Family family;
    const Eigen::VectorXd* y;
    bool clamped = false;

    double operator()(int r, double eta) {
        if (eta > kEtaClamp || eta < -kEtaClamp) {
            clamped = true;
            eta = std::clamp(eta, -kEtaClamp, kEtaClamp);
        }
        const double yr = (*y)(r);
        if (family == Family::Poisson) return yr * eta - std::exp(eta);
        // bernoulli-logit
        const double log1pexp = eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
        return yr * eta - log1pexp;
    }
};

ChainResult run_mwg_chain(const DesignMatrices& design, const McmcConfig& cfg, const Layout& L, int chain,
                          const std::vector<std::vector<std::pair<int, int>>>& car_patterns) {
    Random rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(chain)));
    const int n = design.n(), p = design.p();
    SamplerCommon common;
    common.var_floor = 1e-10;
    GlmmLik lik{design.spec.family, &design.y};

    std::vector<TermState> states(design.terms.size());
    for (std::size_t k = 0; k < states.size(); ++k) initial_term_state(states[k], design.terms[k], 0.1, cfg, rng);

    // Start at the intercept-only estimate, jittered per chain.
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    {
        const double ybar = design.y.mean();
        double b0 = 0.0;
        if (design.spec.family == Family::Poisson) {
            const double ebar = design.offset.array().exp().mean();
            b0 = std::log(std::max(ybar, 0.5 / n) / ebar);
        } else {
            const double pb = std::clamp(ybar, 0.5 / n, 1.0 - 0.5 / n);
            b0 = std::log(pb / (1.0 - pb));
        }
        if (p > 0 && design.fixed_names[0] == kInterceptName) beta(0) = b0 + 0.1 * rng.normal();
    }
    std::vector<Eigen::VectorXd> theta(states.size());
    for (std::size_t k = 0; k < states.size(); ++k) theta[k] = Eigen::VectorXd::Zero(design.terms[k].size());
    Eigen::VectorXd eta = design.offset + design.X * beta;

    // Prior precision per term (full scale) and cached P theta.
    std::vector<SparseMatrix> prec(states.size());
    std::vector<Eigen::VectorXd> ptheta(states.size());
    std::vector<Eigen::Triplet<double>> trip;
    auto refresh_prec = [&](std::size_t k) {
        trip.clear();
        prior_triplets(states[k], car_patterns[k], 0, trip);
        const int sz = design.terms[k].size();
        prec[k].resize(sz, sz);
        prec[k].setFromTriplets(trip.begin(), trip.end());
        ptheta[k] = prec[k] * theta[k];
    };
    for (std::size_t k = 0; k < states.size(); ++k) refresh_prec(k);

    // Intercept column of each term (-1 if none) and pairs of terms whose
    // intercepts enter the same rows.
    const bool intercept_fixed = p > 0 && design.fixed_names[0] == kInterceptName;
    std::vector<int> icol(states.size(), -1);
    for (std::size_t k = 0; k < states.size(); ++k) {
        const auto& cols = design.terms[k].columns;
        const auto it = std::find(cols.begin(), cols.end(), std::string(kInterceptName));
        if (it != cols.end()) icol[k] = static_cast<int>(it - cols.begin());
    }
    std::vector<std::pair<std::size_t, std::size_t>> paired;
    for (std::size_t k1 = 0; k1 < states.size(); ++k1)
        for (std::size_t k2 = k1 + 1; k2 < states.size(); ++k2)
            if (icol[k1] >= 0 && icol[k2] >= 0 &&
                design.terms[k1].level_of_row == design.terms[k2].level_of_row)
                paired.emplace_back(k1, k2);

    std::vector<double> log_step_beta(p, std::log(0.1));
    std::vector<Counter> beta_counter(p);
    const int q = design.q();
    std::vector<double> log_step_theta(q, std::log(0.5));
    std::vector<Counter> theta_counter(q);

    ChainResult res;
    const int per = cfg.retained_per_chain();
    res.draws.resize(per, static_cast<Eigen::Index>(L.names.size()));
    const int batch = adapt_batch(cfg);
    int batch_index = 0;
    int stored = 0;
    std::vector<double> eta_new;
    for (int it = 0; it < cfg.iterations; ++it) {
        const bool burning = it < cfg.burn_in;
        for (int i = 0; i < p; ++i) {
            const double delta = std::exp(log_step_beta[i]) * rng.normal();
            double dl = 0.0;
            for (int r = 0; r < n; ++r) {
                const double xr = design.X(r, i);
                if (xr != 0.0) dl += lik(r, eta(r) + delta * xr) - lik(r, eta(r));
            }
            const bool acc = std::log(rng.uniform_pos()) < dl;
            if (acc) {
                beta(i) += delta;
                eta += delta * design.X.col(i);
            }
            beta_counter[i].record(acc, burning);
        }
        for (std::size_t k = 0; k < states.size(); ++k) {
            const auto& t = design.terms[k];
            for (int l = 0; l < t.size(); ++l) {
                const int col = t.offset + l;
                const double delta = std::exp(log_step_theta[col]) * rng.normal();
                double dl = 0.0;
                for (SparseMatrix::InnerIterator zit(design.Z, col); zit; ++zit) {
                    const int r = static_cast<int>(zit.row());
                    dl += lik(r, eta(r) + delta * zit.value()) - lik(r, eta(r));
                }
                const double pll = prec[k].coeff(l, l);
                const double old = theta[k](l);
                dl += -0.5 * pll * ((old + delta) * (old + delta) - old * old) - delta * (ptheta[k](l) - pll * old);
                const bool acc = std::log(rng.uniform_pos()) < dl;
                if (acc) {
                    theta[k](l) += delta;
                    for (SparseMatrix::InnerIterator zit(design.Z, col); zit; ++zit)
                        eta(zit.row()) += delta * zit.value();
                    for (SparseMatrix::InnerIterator pit(prec[k], l); pit; ++pit)
                        ptheta[k](pit.row()) += delta * pit.value();
                }
                theta_counter[col].record(acc, burning);
            }
        }
        // Moves along directions that leave the linear predictor unchanged;
        // their conditionals are Gaussian and are drawn exactly.
        if (intercept_fixed) {
            for (std::size_t k = 0; k < states.size(); ++k) {
                if (icol[k] < 0) continue;
                const int d = design.terms[k].dim();
                double a = 0.0, b = 0.0;
                for (int l = icol[k]; l < theta[k].size(); l += d) {
                    b += ptheta[k](l);
                    for (SparseMatrix::InnerIterator pit(prec[k], l); pit; ++pit)
                        if (static_cast<int>(pit.row()) % d == icol[k]) a += pit.value();
                }
                if (!(a > 0.0)) continue;
                const double c = -b / a + rng.normal() / std::sqrt(a);
                for (int l = icol[k]; l < theta[k].size(); l += d) {
                    theta[k](l) += c;
                    for (SparseMatrix::InnerIterator pit(prec[k], l); pit; ++pit)
                        ptheta[k](pit.row()) += c * pit.value();
                }
                beta(0) -= c;
            }
        }
        for (const auto& [k1, k2] : paired) {
            const int d1 = design.terms[k1].dim(), d2 = design.terms[k2].dim();
            for (int j = 0; j < design.terms[k1].n_levels(); ++j) {
                const int l1 = j * d1 + icol[k1], l2 = j * d2 + icol[k2];
                const double a = prec[k1].coeff(l1, l1) + prec[k2].coeff(l2, l2);
                const double b = ptheta[k1](l1) - ptheta[k2](l2);
                const double c = -b / a + rng.normal() / std::sqrt(a);
                theta[k1](l1) += c;
                theta[k2](l2) -= c;
                for (SparseMatrix::InnerIterator pit(prec[k1], l1); pit; ++pit) ptheta[k1](pit.row()) += c * pit.value();
                for (SparseMatrix::InnerIterator pit(prec[k2], l2); pit; ++pit) ptheta[k2](pit.row()) -= c * pit.value();
            }
        }
        for (std::size_t k = 0; k < states.size(); ++k) {
            update_term(states[k], theta[k], rng, common, burning, cfg.estimate_car_alpha);
            refresh_prec(k);
        }
        if (burning && (it + 1) % batch == 0) {
            ++batch_index;
            for (int i = 0; i < p; ++i) adapt_step(log_step_beta[i], beta_counter[i], batch_index);
            for (int i = 0; i < q; ++i) adapt_step(log_step_theta[i], theta_counter[i], batch_index);
            for (auto& s : states) adapt_term(s, batch_index);
        }
        if (!beta.allFinite() || !eta.allFinite()) throw NumericalError("mwg: divergent chain");
        if (it % 256 == 255) {
            // resynchronise the running linear predictor
            eta = design.offset + design.X * beta;
            for (std::size_t k = 0; k < states.size(); ++k) {
                const auto& t = design.terms[k];
                eta += design.Z.middleCols(t.offset, t.size()) * theta[k];
            }
        }

        if (!burning && (it - cfg.burn_in) % cfg.thin == 0 && stored < per) {
            auto row = res.draws.row(stored);
            row.head(p) = beta.transpose();
            for (std::size_t k = 0; k < states.size(); ++k)
                row.segment(L.theta_begin[k], design.terms[k].size()) = theta[k].transpose();
            store_gamma(L, states, res.draws, stored);
            ++stored;
        }
    }
    res.flags.clamped = lik.clamped;
    res.flags.grid_fallback = common.grid_used;
    // Acceptance of coefficient updates is summarised per block.
    long ba = 0, bp = 0;
    for (const auto& c : beta_counter) {
        ba += c.accepted;
        bp += c.proposed;
        if (c.proposed > 0 && c.rate() < 0.05) res.acceptance["phi:min"] = {c.accepted, c.proposed};
    }
    if (p > 0) res.acceptance["phi"] = {ba, bp};
    for (const auto& t : design.terms) {
        long a = 0, pr = 0;
        for (int l = 0; l < t.size(); ++l) {
            const auto& c = theta_counter[t.offset + l];
            a += c.accepted;
            pr += c.proposed;
            if (c.proposed > 0 && c.rate() < 0.05) res.acceptance["theta:" + t.label + ":min"] = {c.accepted, c.proposed};
        }
        res.acceptance["theta:" + t.label] = {a, pr};
    }
    record_term_acceptance(states, cfg.estimate_car_alpha, res.acceptance);
    return res;
}

std::vector<std::vector<std::pair<int, int>>> car_patterns_of(const DesignMatrices& design) {
    std::vector<std::vector<std::pair<int, int>>> out;
    for (const auto& t : design.terms)
        out.push_back(t.kind == CovKind::Car ? car_pattern(*t.adjacency) : std::vector<std::pair<int, int>>{});
    return out;
}

void check_design_for_mcmc(const DesignMatrices& design) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.X);
    if (qr.rank() < design.p()) throw InputError("rank-deficient fixed-effects design");
    for (const auto& t : design.terms)
        if (t.kind == CovKind::Correlated && t.dim() != 2)
            throw InputError("correlated term '" + t.label + "': only two-column blocks are supported");
}

}  // namespace

PosteriorFit gibbs_lmm(const DesignMatrices& design, const McmcConfig& cfg) {
    cfg.validate();
    if (design.spec.family != Family::Gaussian) throw InputError("gibbs_lmm requires the gaussian family");
    check_design_for_mcmc(design);
    GibbsData gd;
    gd.n = design.n();
    gd.p = design.p();
    gd.q = design.q();
    if (gd.n < 3) throw InputError("gibbs_lmm: need at least 3 rows");
    const Eigen::VectorXd yt = design.y - design.offset;
    gd.yty = yt.squaredNorm();
    gd.yvar = (yt.array() - yt.mean()).square().sum() / (gd.n - 1);
    if (!(gd.yvar > 0.0)) gd.yvar = std::max(1e-12, yt.squaredNorm() / gd.n);
    if (!(gd.yvar > 0.0)) gd.yvar = 1.0;
    const int m = gd.p + gd.q;
    std::vector<Eigen::Triplet<double>> trip;
    for (int c = 0; c < gd.p; ++c)
        for (int r = 0; r < gd.n; ++r)
            if (design.X(r, c) != 0.0) trip.emplace_back(r, c, design.X(r, c));
    for (int c = 0; c < gd.q; ++c)
        for (SparseMatrix::InnerIterator it(design.Z, c); it; ++it) trip.emplace_back(it.row(), gd.p + c, it.value());
    SparseMatrix C(gd.n, m);
    C.setFromTriplets(trip.begin(), trip.end());
    gd.Cty = C.transpose() * yt;
    SparseMatrix CtC = (C.transpose() * C);
    // Widen the pattern with the prior's structural positions so every
    // iteration factorises the same pattern.
    gd.car_patterns = car_patterns_of(design);
    trip.clear();
    for (std::size_t k = 0; k < design.terms.size(); ++k) {
        TermState s;
        s.term = &design.terms[k];
        s.params.tau2.assign(s.term->dim(), 1.0);
        s.params.rho = 0.5;
        s.params.alpha = 0.5;
        if (s.term->kind == CovKind::GpSe) {
            s.unit_prec = Eigen::MatrixXd::Ones(s.term->size(), s.term->size());
        } else if (s.term->kind == CovKind::Car) {
            s.unit_prec = Eigen::MatrixXd::Ones(s.term->size(), s.term->size());
        }
        prior_triplets(s, gd.car_patterns[k], gd.p + s.term->offset, trip);
    }
    for (int i = 0; i < m; ++i) trip.emplace_back(i, i, 1.0);
    SparseMatrix pattern(m, m);
    pattern.setFromTriplets(trip.begin(), trip.end());
    gd.CtC = CtC + 0.0 * pattern;
    const bool has_gp = std::any_of(design.terms.begin(), design.terms.end(),
                                    [](const TermDesign& t) { return t.kind == CovKind::GpSe; });
    if (has_gp && gd.n <= kMarginalGpMaxRows) {
        gd.marginal_gp = true;
        gd.X = design.X;
        gd.Zd = Eigen::MatrixXd(design.Z);
        gd.yt = yt;
    }

    const Layout L = make_layout(design, true);
    std::vector<ChainResult> chains(cfg.chains);
    parallel_for(cfg.chains, [&](int c) { chains[c] = run_gibbs_chain(design, gd, cfg, L, c); });
    return assemble(design, cfg, L, chains);
}

PosteriorFit gibbs_lmm(const ModelSpec& spec, const Dataset& data, const McmcConfig& config,
                       std::shared_ptr<const Adjacency> adjacency) {
    return gibbs_lmm(build_design(spec, data, std::move(adjacency)), config);
}

PosteriorFit mwg_glmm(const DesignMatrices& design, const McmcConfig& cfg) {
    cfg.validate();
    if (design.spec.family == Family::Gaussian)
        throw InputError("mwg_glmm requires the bernoulli or poisson family");
    check_design_for_mcmc(design);
    const auto car_pats = car_patterns_of(design);
    const Layout L = make_layout(design, false);
    std::vector<ChainResult> chains(cfg.chains);
    parallel_for(cfg.chains, [&](int c) { chains[c] = run_mwg_chain(design, cfg, L, c, car_pats); });
    return assemble(design, cfg, L, chains);
}

PosteriorFit mwg_glmm(const ModelSpec& spec, const Dataset& data, const McmcConfig& config,
                      std::shared_ptr<const Adjacency> adjacency) {
    return mwg_glmm(build_design(spec, data, std::move(adjacency)), config);
}

PosteriorFit fit_mcmc(const DesignMatrices& design, const McmcConfig& config) {
    return design.spec.family == Family::Gaussian ? gibbs_lmm(design, config) : mwg_glmm(design, config);
}

GaussianApprox sample_moments(const Eigen::MatrixXd& draws) {
    if (draws.rows() < 2) throw InputError("sample moments need at least two draws");
    GaussianApprox out;
    out.theta = draws.colwise().mean().transpose();
    const Eigen::MatrixXd centered = draws.rowwise() - out.theta.transpose();
    out.omega = (centered.transpose() * centered) / double(draws.rows() - 1);
    out.omega = 0.5 * (out.omega + out.omega.transpose()).eval();
    Eigen::LLT<Eigen::MatrixXd> llt(out.omega);
    out.singular = llt.info() != Eigen::Success;
    if (!out.singular) {
        const auto d = llt.matrixLLT().diagonal();
        // relative pivot check catches numerically rank-deficient samples
        const double scale = out.omega.diagonal().maxCoeff();
        out.singular = !(d.minCoeff() * d.minCoeff() > 1e-14 * scale);
    }
    return out;
}

GaussianApprox gaussian_approx(const PosteriorFit& fit, const TermSelector& sel) {
    if (fit.draws.rows() < 10) throw InputError("gaussian_approx needs at least 10 retained draws");
    const auto cols = fit.theta_columns(sel);
    Eigen::MatrixXd sub(fit.draws.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = fit.draws.col(cols[i]);
    GaussianApprox out = sample_moments(sub);
    const auto gm = fit.gamma_mean();
    for (std::size_t k = 0; k < fit.terms.size(); ++k)
        if (fit.terms[k].label == sel.label) out.gamma = gm[k];
    return out;
}

namespace {

// Columns of x split in half (the middle draw is dropped when odd).
Eigen::MatrixXd split_chains(const Eigen::MatrixXd& x) {
    const Eigen::Index n = x.rows() / 2;
    Eigen::MatrixXd out(n, 2 * x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        out.col(2 * c) = x.col(c).head(n);
        out.col(2 * c + 1) = x.col(c).tail(n);
    }
    return out;
}

Eigen::MatrixXd rank_normalize(const Eigen::MatrixXd& x) {
    const Eigen::Index S = x.size();
    std::vector<Eigen::Index> idx(S);
    std::iota(idx.begin(), idx.end(), 0);
    const double* v = x.data();
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    Eigen::MatrixXd out(x.rows(), x.cols());
    double* o = out.data();
    const boost::math::normal_distribution<double> nd;
    Eigen::Index i = 0;
    while (i < S) {
        Eigen::Index j = i;
        while (j + 1 < S && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double rank = 0.5 * double(i + j) + 1.0;  // average rank for ties
        const double z = boost::math::quantile(nd, (rank - 0.375) / (double(S) + 0.25));
        for (Eigen::Index k = i; k <= j; ++k) o[idx[k]] = z;
        i = j + 1;
    }
    return out;
}

double rhat_of(const Eigen::MatrixXd& s) {
    const double n = double(s.rows());
    const Eigen::RowVectorXd means = s.colwise().mean();
    Eigen::RowVectorXd vars(s.cols());
    for (Eigen::Index c = 0; c < s.cols(); ++c) vars(c) = (s.col(c).array() - means(c)).square().sum() / (n - 1);
    const double W = vars.mean();
    const double B = n * (means.array() - means.mean()).square().sum() / double(s.cols() - 1);
    if (!(W > 0.0)) return B > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    return std::sqrt(((n - 1) / n * W + B / n) / W);
}

double ess_of(const Eigen::MatrixXd& s) {
    const Eigen::Index n = s.rows(), M = s.cols();
    if (n < 4) return double(n * M);
    Eigen::RowVectorXd means = s.colwise().mean();
    Eigen::MatrixXd c = s.rowwise() - means;
    Eigen::RowVectorXd var0(M);
    for (Eigen::Index k = 0; k < M; ++k) var0(k) = c.col(k).squaredNorm() / double(n);
    const double W = (var0.array() * double(n) / double(n - 1)).mean();
    const double B_over_n = M > 1 ? (means.array() - means.mean()).square().sum() / double(M - 1) : 0.0;
    const double var_plus = double(n - 1) / double(n) * W + B_over_n;
    if (!(var_plus > 0.0)) return double(n * M);
    auto rho = [&](Eigen::Index t) {
        double acov = 0.0;
        for (Eigen::Index k = 0; k < M; ++k)
            acov += c.col(k).head(n - t).dot(c.col(k).tail(n - t)) / double(n);
        acov /= double(M);
        return 1.0 - (W - acov) / var_plus;
    };
    double sum = 0.0;
    double prev_pair = std::numeric_limits<double>::infinity();
    Eigen::Index t = 0;
    for (; t + 1 < n; t += 2) {
        double pair = (t == 0 ? 1.0 : rho(t)) + rho(t + 1);
        if (pair < 0.0) break;
        pair = std::min(pair, prev_pair);
        prev_pair = pair;
        sum += pair;
    }
    const double tau = std::max(-1.0 + 2.0 * sum, 1.0 / std::log10(double(n * M)));
    return double(n * M) / tau;
}

bool constant_matrix(const Eigen::MatrixXd& x) { return (x.array() == x(0, 0)).all(); }

}  // namespace

double split_rhat(const Eigen::MatrixXd& x) {
    if (x.cols() < 2 || x.rows() < 4) return std::numeric_limits<double>::quiet_NaN();
    if (constant_matrix(x)) return 1.0;
    return rhat_of(rank_normalize(split_chains(x)));
}

double bulk_ess(const Eigen::MatrixXd& x) {
    if (x.rows() < 4) return double(x.size());
    if (constant_matrix(x)) return double(x.size());
    return ess_of(rank_normalize(split_chains(x)));
}

double ess_raw(const Eigen::MatrixXd& x) {
    if (x.rows() < 4 || constant_matrix(x)) return double(x.size());
    return ess_of(x);
}

McmcDiagnostics diagnostics(const PosteriorFit& fit) {
    McmcDiagnostics out;
    const int per = fit.draws_per_chain();
    out.rhat_available = fit.chains >= 2;
    out.max_rhat = out.rhat_available ? 0.0 : std::numeric_limits<double>::quiet_NaN();
    out.min_ess = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < fit.draws.cols(); ++j) {
        ParamSummary s;
        s.name = fit.names[j];
        const Eigen::VectorXd col = fit.draws.col(j);
        s.mean = col.mean();
        s.sd = col.size() > 1 ? std::sqrt((col.array() - s.mean).square().sum() / double(col.size() - 1)) : 0.0;
        std::vector<double> v(col.data(), col.data() + col.size());
        std::sort(v.begin(), v.end());
        auto quant = [&](double pr) {
            const double h = (v.size() - 1) * pr;
            const std::size_t lo = static_cast<std::size_t>(std::floor(h));
            const std::size_t hi = std::min(lo + 1, v.size() - 1);
            return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
        };
        s.q025 = quant(0.025);
        s.q50 = quant(0.5);
        s.q975 = quant(0.975);
        const Eigen::Map<const Eigen::MatrixXd> chains(col.data(), per, fit.chains);
        s.rhat = out.rhat_available ? split_rhat(chains) : std::numeric_limits<double>::quiet_NaN();
        s.ess = bulk_ess(chains);
        if (out.rhat_available) {
            out.max_rhat = std::max(out.max_rhat, s.rhat);
            if (s.rhat > 1.05) out.warnings.push_back(s.name + ": R-hat " + std::to_string(s.rhat) + " > 1.05");
        }
        out.min_ess = std::min(out.min_ess, s.ess);
        if (s.ess < 100.0) out.warnings.push_back(s.name + ": ESS " + std::to_string(s.ess) + " < 100");
        out.params.push_back(std::move(s));
    }
    if (!out.rhat_available) out.warnings.push_back("single chain: R-hat unavailable");
    return out;
}

}  // namespace ebfkit
