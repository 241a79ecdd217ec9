#include "ebfkit/simulate.hpp"

#include "ebfkit/criteria.hpp"
#include "ebfkit/ebf.hpp"
#include "ebfkit/errors.hpp"
#include "ebfkit/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

namespace ebfkit {

Eigen::VectorXd exact_scale(const Eigen::VectorXd& v, double target_sd) {
    if (v.size() < 2) throw InputError("exact_scale: need at least two values");
    if (!(target_sd >= 0.0) || !std::isfinite(target_sd)) throw InputError("exact_scale: target sd must be >= 0");
    const double mean = v.mean();
    const Eigen::VectorXd c = v.array() - mean;
    const double sd = std::sqrt(c.squaredNorm() / double(v.size() - 1));
    if (!(sd > 0.0)) throw InputError("exact_scale: input vector is constant");
    if (target_sd == 0.0) return Eigen::VectorXd::Zero(v.size());
    Eigen::VectorXd out = c * (target_sd / sd);
    out.array() -= out.mean();  // removes the rounding residue of the first centring
    return out;
}

CrossedData gen_crossed(int J, int K, int n, const TauHats& tau, double rho, std::uint64_t seed) {
    if (J < 2 || K < 2 || n < 2) throw InputError("gen_crossed: J, K and n must be at least 2");
    if (!(tau.t11 >= 0.0 && tau.t12 >= 0.0 && tau.t21 >= 0.0 && tau.t22 >= 0.0))
        throw InputError("gen_crossed: standard deviations must be >= 0");
    if (!(rho > -1.0 && rho < 1.0)) throw InputError("gen_crossed: rho must lie in (-1, 1)");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> norm;
    auto normals = [&](int m) {
        Eigen::VectorXd v(m);
        for (int i = 0; i < m; ++i) v(i) = norm(rng);
        return v;
    };
    const int N = J * K * n;
    CrossedData out;
    auto pair_effects = [&](int m, double sd_int, double sd_slope, Eigen::VectorXd& a, Eigen::VectorXd& b) {
        const Eigen::VectorXd z1 = normals(m);
        const Eigen::VectorXd z2 = normals(m);
        const Eigen::VectorXd w = rho * z1 + std::sqrt(1.0 - rho * rho) * z2;
        a = exact_scale(z1, sd_int);
        b = exact_scale(w, sd_slope);
    };
    pair_effects(J, tau.t11, tau.t12, out.theta11, out.theta12);
    pair_effects(K, tau.t21, tau.t22, out.theta21, out.theta22);
    const Eigen::VectorXd x = exact_scale(normals(N), 1.0);
    const Eigen::VectorXd e = exact_scale(normals(N), 1.0);

    std::vector<double> y(N), xs(N);
    std::vector<std::string> g1(N), g2(N);
    int r = 0;
    for (int j = 0; j < J; ++j)
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < n; ++i, ++r) {
                xs[r] = x(r);
                y[r] = out.theta11(j) + out.theta21(k) + (out.theta12(j) + out.theta22(k)) * x(r) + e(r);
                g1[r] = "j" + std::to_string(j + 1);
                g2[r] = "k" + std::to_string(k + 1);
            }
    out.data.add_numeric("y", std::move(y));
    out.data.add_numeric("x", std::move(xs));
    out.data.add_categorical("g1", make_categorical(g1));
    out.data.add_categorical("g2", make_categorical(g2));
    return out;
}

std::string to_string(Estimator e) {
    switch (e) {
        case Estimator::Classical: return "classical";
        case Estimator::Bayesian: return "bayesian";
        case Estimator::Both: return "both";
    }
    return "?";
}

Estimator parse_estimator(const std::string& text) {
    if (text == "classical") return Estimator::Classical;
    if (text == "bayesian") return Estimator::Bayesian;
    if (text == "both") return Estimator::Both;
    throw InputError("unknown estimator '" + text + "' (expected classical, bayesian or both)");
}

void SimGrid::validate() const {
    if (J_values.empty() || n_values.empty() || tau11_values.empty()) throw InputError("grid: empty dimension");
    for (int J : J_values)
        if (J < 2) throw InputError("grid: J values must be at least 2");
    for (int n : n_values)
        if (n < 2) throw InputError("grid: n values must be at least 2");
    for (double t : tau11_values)
        if (!(t >= 0.0)) throw InputError("grid: tau11 values must be >= 0");
    if (!(tau12 >= 0.0 && tau21 >= 0.0 && tau22 >= 0.0)) throw InputError("grid: standard deviations must be >= 0");
    if (K < 2) throw InputError("grid: K must be at least 2");
    if (replications < 1) throw InputError("grid: replications must be at least 1");
    if (!(rho > -1.0 && rho < 1.0)) throw InputError("grid: rho must lie in (-1, 1)");
    if (!(classical_tau11_floor >= 0.0)) throw InputError("grid: classical floor must be >= 0");
    if (classical_objective == FitMethod::Mcmc) throw InputError("grid: classical objective must be ml or reml");
    mcmc.validate();
}

namespace {

SimGrid grid_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InputError("grid config must be an object");
    SimGrid g;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "J_values") g.J_values = v.get<std::vector<int>>();
            else if (key == "n_values") g.n_values = v.get<std::vector<int>>();
            else if (key == "tau11_values") g.tau11_values = v.get<std::vector<double>>();
            else if (key == "tau12") g.tau12 = v.get<double>();
            else if (key == "tau21") g.tau21 = v.get<double>();
            else if (key == "tau22") g.tau22 = v.get<double>();
            else if (key == "rho") g.rho = v.get<double>();
            else if (key == "K") g.K = v.get<int>();
            else if (key == "replications") g.replications = v.get<int>();
            else if (key == "seed") g.seed = v.get<std::uint64_t>();
            else if (key == "estimator") g.estimator = parse_estimator(v.get<std::string>());
            else if (key == "classical_tau11_floor") g.classical_tau11_floor = v.get<double>();
            else if (key == "classical_objective") g.classical_objective = parse_fit_method(v.get<std::string>());
            else if (key == "chains") g.mcmc.chains = v.get<int>();
            else if (key == "iterations") g.mcmc.iterations = v.get<int>();
            else if (key == "burn_in") g.mcmc.burn_in = v.get<int>();
            else if (key == "thin") g.mcmc.thin = v.get<int>();
            else if (key == "adapt_window") g.mcmc.adapt_window = v.get<int>();
            else throw InputError("grid config: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("grid config: ") + e.what());
    }
    g.validate();
    return g;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

}  // namespace

SimGrid parse_grid_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("grid config: invalid JSON: ") + e.what());
    }
    return grid_from_json(j);
}

SimGrid parse_grid_toml(const std::string& text) {
    // TOML scalars and arrays used here are valid JSON once quoted keys are
    // added, so each value is parsed as a JSON fragment.
    nlohmann::json j = nlohmann::json::object();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') throw InputError("grid config line " + std::to_string(lineno) + ": tables are not supported");
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InputError("grid config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw InputError("grid config line " + std::to_string(lineno) + ": expected key = value");
        try {
            j[key] = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            throw InputError("grid config line " + std::to_string(lineno) + ": cannot parse value '" + value + "'");
        }
    }
    return grid_from_json(j);
}

SimGrid read_grid_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open grid config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "json") return parse_grid_json(text);
    if (ext == "toml") return parse_grid_toml(text);
    throw InputError("grid config '" + path + "': expected a .json or .toml file");
}

namespace {

struct TestedTerm {
    const char* term;
    const char* selector;
};

constexpr TestedTerm kBayesTerms[] = {
    {"tau2_11", "g1[1]"}, {"tau2_12", "g1[x]"}, {"tau2_21", "g2[1]"}, {"tau2_22", "g2[x]"}};
constexpr TestedTerm kClassicalTerms[] = {{"tau2_11", "g1[1]"}, {"tau2_12", "g1[x]"}, {"tau2_21", "g2[1]"}};

std::string flag_string(const EbfResult& r) {
    std::vector<std::string> f;
    if (r.flags.boundary) f.push_back("boundary");
    if (r.flags.unreliable_classical) f.push_back("unreliable-classical");
    if (r.flags.diagonal_approx) f.push_back("diagonal-approx");
    if (r.flags.jittered) f.push_back("jittered");
    std::string out;
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? ";" : "") + f[i];
    return out;
}

}  // namespace

std::vector<SimRow> run_cell(const SimGrid& grid, int J, int n, double tau11, int replication,
                             std::uint64_t cell_seed, Estimator estimator) {
    std::vector<SimRow> rows;
    const std::uint64_t data_seed = derive_seed(cell_seed, 0);
    TauHats tau{tau11, grid.tau12, grid.tau21, grid.tau22};
    auto base_row = [&](Estimator e, double used, const TestedTerm& t) {
        SimRow r;
        r.J = J;
        r.n = n;
        r.tau11_hat = tau11;
        r.tau11_used = used;
        r.estimator = e;
        r.term = t.term;
        r.selector = t.selector;
        r.log_ebf = std::numeric_limits<double>::quiet_NaN();
        r.replication = replication;
        r.seed = cell_seed;
        return r;
    };
    if (estimator == Estimator::Bayesian || estimator == Estimator::Both) {
        try {
            const auto sim = gen_crossed(J, grid.K, n, tau, grid.rho, data_seed);
            const auto design = build_design(parse_formula(kBayesianSimModel), sim.data);
            McmcConfig cfg = grid.mcmc;
            cfg.seed = derive_seed(cell_seed, 1);
            const auto fit = gibbs_lmm(design, cfg);
            for (const auto& t : kBayesTerms) {
                SimRow r = base_row(Estimator::Bayesian, tau11, t);
                try {
                    const auto e = ebf_for_term(fit, parse_selector(t.selector));
                    r.log_ebf = e.log_ebf;
                    r.flags = flag_string(e);
                    r.status = "ok";
                } catch (const std::exception& ex) {
                    r.status = std::string("error: ") + ex.what();
                }
                rows.push_back(r);
            }
        } catch (const std::exception& ex) {
            for (const auto& t : kBayesTerms) {
                SimRow r = base_row(Estimator::Bayesian, tau11, t);
                r.status = std::string("error: ") + ex.what();
                rows.push_back(r);
            }
        }
    }
    if (estimator == Estimator::Classical || estimator == Estimator::Both) {
        const double used = std::max(tau11, grid.classical_tau11_floor);
        TauHats tc = tau;
        tc.t11 = used;
        try {
            const auto sim = gen_crossed(J, grid.K, n, tc, grid.rho, data_seed);
            const auto design = build_design(parse_formula(kClassicalSimModel), sim.data);
            const auto fit = fit_lmm(design, grid.classical_objective);
            for (const auto& t : kClassicalTerms) {
                SimRow r = base_row(Estimator::Classical, used, t);
                const auto sel = parse_selector(t.selector);
                const TermDesign& term = design.term(sel.label);
                const int c = term.column_index(*sel.column);
                const auto& bp = fit.flags.boundary_params;
                auto at_bound = [&](const std::string& name) { return std::find(bp.begin(), bp.end(), name) != bp.end(); };
                // |rho| = 1 makes the smaller-variance column a deterministic
                // function of the other one, so its block of omega degenerates
                const auto& tau2 = fit.gamma[design.term_index(sel.label)].tau2;
                const bool degenerate = at_bound(term.label + ":rho") &&
                                        tau2[c] <= *std::min_element(tau2.begin(), tau2.end());
                const bool singular = at_bound(term.label + "[" + term.columns[c] + "]") || degenerate;
                if (singular) {
                    // mirrors the omitted singular cells of the classical table
                    r.status = "missing: singular fit";
                    r.flags = "boundary;unreliable-classical";
                } else {
                    try {
                        const auto e = ebf_for_term(fit, sel);
                        r.log_ebf = e.log_ebf;
                        r.flags = flag_string(e);
                        r.status = "ok";
                    } catch (const std::exception& ex) {
                        r.status = std::string("error: ") + ex.what();
                    }
                }
                rows.push_back(r);
            }
        } catch (const std::exception& ex) {
            for (const auto& t : kClassicalTerms) {
                SimRow r = base_row(Estimator::Classical, used, t);
                r.status = std::string("error: ") + ex.what();
                rows.push_back(r);
            }
        }
    }
    return rows;
}

SimResult run_grid(const SimGrid& grid) {
    grid.validate();
    struct Cell {
        int J, n;
        double tau11;
        int rep;
    };
    std::vector<Cell> cells;
    for (int J : grid.J_values)
        for (int n : grid.n_values)
            for (double t : grid.tau11_values)
                for (int rep = 0; rep < grid.replications; ++rep) cells.push_back({J, n, t, rep});
    std::vector<std::vector<SimRow>> out(cells.size());
    parallel_for(static_cast<int>(cells.size()), [&](int i) {
        const auto& c = cells[i];
        out[i] = run_cell(grid, c.J, c.n, c.tau11, c.rep, derive_seed(grid.seed, static_cast<std::uint64_t>(i)),
                          grid.estimator);
    });
    SimResult res;
    for (auto& v : out) res.rows.insert(res.rows.end(), v.begin(), v.end());
    return res;
}

namespace {

std::string fmt(double v) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

void write_sim_csv(std::ostream& out, const SimResult& result) {
    out << "J,n,tau11_hat,tau11_used,estimator,term,selector,log_ebf,flags,status,replication,seed\n";
    for (const auto& r : result.rows) {
        out << r.J << ',' << r.n << ',' << fmt(r.tau11_hat) << ',' << fmt(r.tau11_used) << ',' << to_string(r.estimator)
            << ',' << r.term << ',' << r.selector << ',' << fmt(r.log_ebf) << ',' << csv_field(r.flags) << ','
            << csv_field(r.status) << ',' << r.replication << ',' << r.seed << '\n';
    }
}

void write_plot_csv(std::ostream& out, const SimResult& result) {
    struct Acc {
        double sum = 0.0;
        int count = 0;
    };
    std::map<std::tuple<int, int, std::string, double>, Acc> acc;
    for (const auto& r : result.rows) {
        if (r.term != "tau2_11") continue;
        auto& a = acc[{r.J, r.n, to_string(r.estimator), r.tau11_hat}];
        if (std::isfinite(r.log_ebf)) {
            a.sum += r.log_ebf;
            ++a.count;
        }
    }
    out << "J,n,estimator,tau11_hat,mean_log_ebf,count\n";
    for (const auto& [k, a] : acc) {
        const auto& [J, n, est, t] = k;
        out << J << ',' << n << ',' << est << ',' << fmt(t) << ','
            << fmt(a.count ? a.sum / a.count : std::numeric_limits<double>::quiet_NaN()) << ',' << a.count << '\n';
    }
}

std::pair<double, double> ks_test(std::vector<double> sample, const std::function<double(double)>& cdf) {
    const std::size_t m = sample.size();
    if (m == 0) throw InputError("ks_test: empty sample");
    std::sort(sample.begin(), sample.end());
    double d = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double f = cdf(sample[i]);
        d = std::max({d, double(i + 1) / m - f, f - double(i) / m});
    }
    const double sm = std::sqrt(double(m));
    const double lambda = (sm + 0.12 + 0.11 / sm) * d;
    // Kolmogorov distribution tail
    double p = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
        p += term;
        if (std::abs(term) < 1e-12) break;
    }
    return {d, std::clamp(p, 0.0, 1.0)};
}

std::vector<ChibarSummary> pvalue_study_chibar(const ChibarConfig& config) {
    if (config.N_values.empty()) throw InputError("chibar study: no sample sizes");
    if (config.replications < 1) throw InputError("chibar study: replications must be at least 1");
    if (config.cluster_size < 2) throw InputError("chibar study: cluster size must be at least 2");
    if (config.objective == FitMethod::Mcmc) throw InputError("chibar study: objective must be ml or reml");
    const ModelSpec m1 = parse_formula("y ~ 1 + (1 | g)");
    const ModelSpec m0 = parse_formula("y ~ 1");
    std::vector<ChibarSummary> out;
    for (std::size_t s = 0; s < config.N_values.size(); ++s) {
        const int N = config.N_values[s];
        const int J = N / config.cluster_size;
        if (J < 2 || J * config.cluster_size != N)
            throw InputError("chibar study: N=" + std::to_string(N) + " is not a multiple of the cluster size");
        std::vector<double> stat(config.replications, std::numeric_limits<double>::quiet_NaN());
        std::vector<double> pval(config.replications, std::numeric_limits<double>::quiet_NaN());
        parallel_for(config.replications, [&](int rep) {
            std::mt19937_64 rng(derive_seed(config.seed, (static_cast<std::uint64_t>(s) << 32) | unsigned(rep)));
            std::normal_distribution<double> norm;
            std::vector<double> y(N);
            std::vector<std::string> g(N);
            for (int i = 0; i < N; ++i) {
                y[i] = norm(rng);
                g[i] = "c" + std::to_string(i / config.cluster_size + 1);
            }
            Dataset d;
            d.add_numeric("y", std::move(y));
            d.add_categorical("g", make_categorical(g));
            try {
                const auto f1 = fit_lmm(m1, d, config.objective);
                const auto f0 = fit_lmm(m0, d, config.objective);
                // a variance at its lower bound is the boundary solution: statistic exactly 0
                const auto lrt = f1.flags.boundary ? LrtResult{0.0, 1.0}
                                                   : lrt_chibar(std::max(f1.loglik, f0.loglik), f0.loglik);
                stat[rep] = lrt.stat;
                pval[rep] = lrt.p;
            } catch (const std::exception&) {
            }
        });
        ChibarSummary sum;
        sum.N = N;
        sum.J = J;
        sum.replications = config.replications;
        sum.histogram.assign(10, 0);
        std::vector<double> nonzero, scaled_p;
        int zeros = 0, ok = 0;
        double psum = 0.0;
        for (int rep = 0; rep < config.replications; ++rep) {
            if (!std::isfinite(stat[rep])) {
                ++sum.failures;
                continue;
            }
            ++ok;
            psum += pval[rep];
            sum.histogram[std::min(9, static_cast<int>(pval[rep] * 10.0))]++;
            if (stat[rep] == 0.0) {
                ++zeros;
            } else {
                nonzero.push_back(stat[rep]);
                scaled_p.push_back(2.0 * pval[rep]);
            }
        }
        sum.frac_zero = ok ? double(zeros) / ok : std::numeric_limits<double>::quiet_NaN();
        sum.mean_p = ok ? psum / ok : std::numeric_limits<double>::quiet_NaN();
        if (!nonzero.empty()) {
            double m = 0.0;
            for (double v : scaled_p) m += v;
            sum.mean_p_continuous = m / double(scaled_p.size());
            const double se = std::sqrt(1.0 / 12.0 / double(scaled_p.size()));
            sum.mean_deviates = std::abs(sum.mean_p_continuous - 0.5) > 3.0 * se;
            const auto [d, p] = ks_test(nonzero, [](double x) { return 1.0 - chi2_1_sf(x); });
            sum.ks_stat = d;
            sum.ks_pvalue = p;
            sum.ks_reject_01 = p < 0.01;
        } else {
            sum.mean_p_continuous = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(sum);
    }
    return out;
}

void write_chibar_csv(std::ostream& out, const std::vector<ChibarSummary>& rows) {
    out << "N,J,replications,failures,frac_zero,mean_p,mean_p_continuous,mean_deviates,ks_stat,ks_pvalue,"
           "ks_reject_01";
    for (int b = 0; b < 10; ++b) out << ",bin_" << b;
    out << '\n';
    for (const auto& r : rows) {
        out << r.N << ',' << r.J << ',' << r.replications << ',' << r.failures << ',' << fmt(r.frac_zero) << ','
            << fmt(r.mean_p) << ',' << fmt(r.mean_p_continuous) << ',' << (r.mean_deviates ? "true" : "false") << ','
            << fmt(r.ks_stat) << ',' << fmt(r.ks_pvalue) << ',' << (r.ks_reject_01 ? "true" : "false");
        for (int b : r.histogram) out << ',' << b;
        out << '\n';
    }
}

}  // namespace ebfkit
