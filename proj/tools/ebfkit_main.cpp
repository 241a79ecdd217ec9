#include "ebfkit/artifact.hpp"
#include "ebfkit/criteria.hpp"
#include "ebfkit/ebf.hpp"
#include "ebfkit/errors.hpp"
#include "ebfkit/simulate.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace ebfkit;
using nlohmann::json;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    for (char c : s) {
        if (c == '[') ++depth;
        if (c == ']') --depth;
        if (c == ',' && depth == 0) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string fmt(double v, int digits = 6) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write '" + path + "'");
    f << text;
}

struct ModelArgs {
    std::string data;
    std::string family = "gaussian";
    std::string offset;
    std::string adjacency;
};

ModelSpec make_spec(const std::string& model, const ModelArgs& m) {
    ModelSpec spec = parse_formula(model);
    spec.family = parse_family(m.family);
    if (!m.offset.empty()) spec.offset = m.offset;
    return spec;
}

std::shared_ptr<const Adjacency> load_adjacency(const std::string& path) {
    if (path.empty()) return nullptr;
    return std::make_shared<const Adjacency>(read_adjacency_file(path));
}

// ------------------------------------------------------------------ fit

struct FitArgs {
    ModelArgs m;
    std::string model;
    std::string method = "reml";
    std::uint64_t seed = 1;
    std::string out;
    McmcConfig mcmc;
    bool diagonal_omega = false;
};

void print_classical(const FittedModel& f) {
    std::printf("method: %s   loglik: %s   sigma2: %s   sweeps: %d\n", to_string(f.method).c_str(),
                fmt(f.loglik, 10).c_str(), fmt(f.sigma2).c_str(), f.sweeps);
    std::printf("%-24s %14s\n", "fixed effect", "estimate");
    for (std::size_t i = 0; i < f.fixed_names.size(); ++i)
        std::printf("%-24s %14s\n", f.fixed_names[i].c_str(), fmt(f.beta(static_cast<Eigen::Index>(i))).c_str());
    std::printf("%-32s %14s\n", "covariance parameter", "estimate");
    for (std::size_t k = 0; k < f.terms.size(); ++k) {
        const auto names = param_names(f.terms[k]);
        const auto vals = param_values(f.terms[k], f.gamma[k]);
        for (std::size_t i = 0; i < names.size(); ++i)
            std::printf("%-32s %14s\n", (f.terms[k].label + ":" + names[i]).c_str(), fmt(vals[i]).c_str());
    }
    if (f.flags.boundary) {
        std::printf("boundary:");
        for (const auto& b : f.flags.boundary_params) std::printf(" %s", b.c_str());
        std::printf("\n");
    }
}

void print_posterior(const PosteriorFit& p) {
    const auto d = diagnostics(p);
    std::printf("method: mcmc   chains: %d   retained draws: %lld\n", p.chains, static_cast<long long>(p.draws.rows()));
    std::printf("%-32s %12s %12s %12s %12s %8s %8s\n", "parameter", "mean", "sd", "2.5%", "97.5%", "rhat", "ess");
    const int phi = p.block("phi").size;
    for (const auto& s : d.params) {
        const int col = p.column(s.name);
        bool show = col < phi;
        for (const auto& b : p.blocks)
            show |= b.name.rfind("gamma:", 0) == 0 && col >= b.begin && col < b.begin + b.size;
        if (!show) continue;
        std::printf("%-32s %12s %12s %12s %12s %8s %8s\n", s.name.c_str(), fmt(s.mean).c_str(), fmt(s.sd).c_str(),
                    fmt(s.q025).c_str(), fmt(s.q975).c_str(), fmt(s.rhat, 4).c_str(), fmt(s.ess, 4).c_str());
    }
    std::printf("max R-hat: %s   min ESS: %s\n", fmt(d.max_rhat, 4).c_str(), fmt(d.min_ess, 4).c_str());
    if (p.flags.clamped) std::printf("warning: linear predictor clamped at +-35\n");
    if (p.flags.low_acceptance) std::printf("warning: Metropolis acceptance below 0.05\n");
}

int cmd_fit(const FitArgs& a) {
    const ModelSpec spec = make_spec(a.model, a.m);
    const Dataset data = read_csv_file(a.m.data);
    const auto adj = load_adjacency(a.m.adjacency);
    const auto design = build_design(spec, data, adj);
    const FitMethod method = parse_fit_method(a.method);
    FitArtifact art;
    if (method == FitMethod::Mcmc) {
        McmcConfig cfg = a.mcmc;
        cfg.seed = a.seed;
        art = make_artifact(fit_mcmc(design, cfg));
        print_posterior(*art.posterior);
    } else {
        LmmOptions opts;
        opts.diagonal_omega = a.diagonal_omega;
        opts.car_alpha = a.mcmc.car_alpha;
        art = make_artifact(spec, fit_lmm(design, method, opts));
        print_classical(*art.classical);
    }
    art.data_path = a.m.data;
    art.adjacency_path = a.m.adjacency;
    if (!a.out.empty()) {
        save_artifact(art, a.out);
        std::printf("artifact written to %s\n", a.out.c_str());
    }
    return 0;
}

// ------------------------------------------------------------------ ebf

json ebf_json(const EbfResult& r) {
    return {{"tested_terms", r.tested_terms},
            {"log_ebf", r.log_ebf},
            {"log10_ebf", r.log10_ebf()},
            {"components",
             {{"half_logdet_prior", r.components.half_logdet_prior},
              {"neg_half_logdet_post", r.components.neg_half_logdet_post},
              {"neg_half_quadform", r.components.neg_half_quadform}}},
            {"flags",
             {{"diagonal_approx", r.flags.diagonal_approx},
              {"boundary", r.flags.boundary},
              {"jittered", r.flags.jittered},
              {"unreliable_classical", r.flags.unreliable_classical}}},
            {"warnings", r.warnings},
            {"reading", r.reading()}};
}

std::vector<EbfResult> compute_ebfs(const FitArtifact& art, const std::vector<std::string>& terms,
                                    const std::vector<std::string>& joint) {
    std::vector<EbfResult> out;
    if (!joint.empty()) {
        std::vector<TermSelector> sels;
        for (const auto& t : joint) sels.push_back(parse_selector(t));
        out.push_back(art.classical ? ebf_joint(*art.classical, sels) : ebf_joint(*art.posterior, sels));
        return out;
    }
    std::vector<std::string> list = terms;
    if (list.empty())
        for (const auto& t : art.terms()) list.push_back(t.label);
    for (const auto& t : list) {
        const auto sel = parse_selector(t);
        out.push_back(art.classical ? ebf_for_term(*art.classical, sel) : ebf_for_term(*art.posterior, sel));
    }
    return out;
}

void print_ebf_table(const std::vector<EbfResult>& rs) {
    std::printf("%-28s %12s %12s  %s\n", "term", "log EBF", "log10 EBF", "reading");
    for (const auto& r : rs) {
        std::string label;
        for (std::size_t i = 0; i < r.tested_terms.size(); ++i) label += (i ? "+" : "") + r.tested_terms[i];
        std::printf("%-28s %12s %12s  %s\n", label.c_str(), fmt(r.log_ebf).c_str(), fmt(r.log10_ebf()).c_str(),
                    r.reading().c_str());
        for (const auto& w : r.warnings) std::printf("    warning: %s\n", w.c_str());
    }
}

int cmd_ebf(const std::string& fit_path, const std::string& terms, const std::string& joint, const std::string& out) {
    const FitArtifact art = load_artifact(fit_path);
    const auto rs = compute_ebfs(art, split_list(terms), split_list(joint));
    json j = {{"format_version", kArtifactVersion}, {"fit", fit_path}, {"method", to_string(art.method)},
              {"ebf", json::array()}};
    for (const auto& r : rs) j["ebf"].push_back(ebf_json(r));
    print_ebf_table(rs);
    if (out.empty()) std::printf("%s\n", j.dump(2).c_str());
    else write_file(out, j.dump(2) + "\n");
    return 0;
}

// ------------------------------------------------------------- criteria

struct CriteriaArgs {
    ModelArgs m;
    std::vector<std::string> models;
    std::string method = "ml";
    std::vector<std::string> compare;
    int cv = 0;
    std::string cv_metric = "squared";
    std::uint64_t seed = 1;
    std::string out;
    McmcConfig mcmc;
};

// Model labels are m1, m2, ... in command-line order; --compare accepts
// labels or 1-based indices.
int model_index(const std::string& s, std::size_t n) {
    std::string t = s;
    if (!t.empty() && t[0] == 'm') t = t.substr(1);
    try {
        const int i = std::stoi(t);
        if (i >= 1 && static_cast<std::size_t>(i) <= n) return i - 1;
    } catch (const std::exception&) {
    }
    throw InputError("--compare: unknown model '" + s + "'");
}

void check_nested(const ModelSpec& m0, const ModelSpec& m1) {
    for (const auto& f : m0.fixed_terms)
        if (std::find(m1.fixed_terms.begin(), m1.fixed_terms.end(), f) == m1.fixed_terms.end())
            throw InputError("--compare: fixed term '" + f + "' of the smaller model is missing from the larger one");
    if (m0.fixed_terms.size() != m1.fixed_terms.size())
        throw InputError("--compare: models must share their fixed effects");
    for (const auto& r : m0.random_terms) {
        bool found = false;
        for (const auto& s : m1.random_terms)
            found |= s.label == r.label && s.cov_kind == r.cov_kind && s.design_columns == r.design_columns;
        if (!found) throw InputError("--compare: random term '" + r.label + "' is not in the larger model");
    }
}

int cmd_criteria(const CriteriaArgs& a) {
    if (a.models.empty()) throw InputError("criteria: at least one --model is required");
    const Dataset data = read_csv_file(a.m.data);
    const auto adj = load_adjacency(a.m.adjacency);
    const FitMethod method = parse_fit_method(a.method);
    CriteriaReport report;
    std::vector<ModelSpec> specs;
    std::vector<FittedModel> fits;
    for (std::size_t i = 0; i < a.models.size(); ++i) {
        const std::string label = "m" + std::to_string(i + 1);
        specs.push_back(make_spec(a.models[i], a.m));
        const auto design = build_design(specs.back(), data, adj);
        if (method == FitMethod::Mcmc) {
            McmcConfig cfg = a.mcmc;
            cfg.seed = a.seed;
            const auto post = fit_mcmc(design, cfg);
            report.rows.push_back(criteria_row(label, post, design));
        } else {
            fits.push_back(fit_lmm(design, method));
            report.rows.push_back(criteria_row(label, fits.back()));
        }
    }
    if (!a.compare.empty()) {
        if (a.compare.size() != 2) throw InputError("--compare takes two models");
        if (method == FitMethod::Mcmc) throw InputError("--compare needs ml or reml fits");
        const int i0 = model_index(a.compare[0], a.models.size());
        const int i1 = model_index(a.compare[1], a.models.size());
        check_nested(specs[i0], specs[i1]);
        const int tested = fits[i1].n_params() - fits[i0].n_params();
        PairwiseLrt p{"m" + std::to_string(i0 + 1), "m" + std::to_string(i1 + 1),
                      lrt_chibar(fits[i1].loglik, fits[i0].loglik, tested)};
        report.pairwise.push_back(p);
    }
    if (a.cv > 0) {
        const auto design = build_design(specs.front(), data, adj);
        report.cv = kfold_cv(design, a.cv, parse_cv_metric(a.cv_metric), a.seed,
                             method == FitMethod::Mcmc ? FitMethod::Reml : method);
        report.cv_label = "m1";
    }
    std::ostringstream csv;
    write_criteria_csv(csv, report);
    std::printf("%s", csv.str().c_str());
    for (const auto& p : report.pairwise)
        std::printf("LRT %s vs %s: stat %s  p %s (0.5 chi2_0 + 0.5 chi2_1)\n", p.model0.c_str(), p.model1.c_str(),
                    fmt(p.lrt.stat).c_str(), fmt(p.lrt.p).c_str());
    if (report.cv)
        std::printf("%d-fold CV (%s) mean error: %s\n", report.cv->K, to_string(report.cv->metric).c_str(),
                    fmt(report.cv->mean_error).c_str());
    for (const auto& r : report.rows)
        if (r.dic && r.dic->negative_p) std::printf("warning: %s has a negative p_DIC\n", r.label.c_str());
    json j = json::parse(criteria_json(report));
    j["format_version"] = kArtifactVersion;
    j["kind"] = "criteria";
    j["models_text"] = a.models;
    if (!a.out.empty()) {
        write_file(a.out + ".csv", csv.str());
        write_file(a.out + ".json", j.dump(2) + "\n");
    }
    return 0;
}

// ------------------------------------------------------------- simulate

int cmd_simulate(const std::string& grid_path, const std::string& out_dir, const std::string& study,
                 const std::uint64_t* seed, int replications, const std::vector<int>& N_values) {
    std::filesystem::create_directories(out_dir);
    if (study == "chibar") {
        ChibarConfig cfg;
        if (seed) cfg.seed = *seed;
        if (replications > 0) cfg.replications = replications;
        if (!N_values.empty()) cfg.N_values = N_values;
        const auto rows = pvalue_study_chibar(cfg);
        std::ostringstream csv;
        write_chibar_csv(csv, rows);
        write_file(out_dir + "/chibar_summary.csv", csv.str());
        std::printf("%s", csv.str().c_str());
        return 0;
    }
    if (study != "grid") throw InputError("unknown study '" + study + "' (expected grid or chibar)");
    SimGrid grid = grid_path.empty() ? SimGrid{} : read_grid_config(grid_path);
    if (seed) grid.seed = *seed;
    if (replications > 0) grid.replications = replications;
    const auto res = run_grid(grid);
    std::ostringstream a, b;
    write_sim_csv(a, res);
    write_plot_csv(b, res);
    write_file(out_dir + "/sim_results.csv", a.str());
    write_file(out_dir + "/plot_data.csv", b.str());
    std::printf("%zu rows written to %s/sim_results.csv\n", res.rows.size(), out_dir.c_str());
    return 0;
}

// --------------------------------------------------------------- report

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    if (inputs.empty()) throw InputError("report: no inputs");
    std::vector<std::pair<std::string, std::string>> versions;
    std::vector<std::string> texts;
    for (const auto& p : inputs) {
        texts.push_back(read_file(p));
        versions.emplace_back(p, artifact_version(texts.back()));
    }
    for (const auto& [p, v] : versions)
        if (v != versions.front().second)
            throw InputError("report: format_version mismatch: '" + versions.front().first + "' has " +
                             versions.front().second + ", '" + p + "' has " + v);
    if (versions.front().second != kArtifactVersion)
        throw InputError("report: unsupported format_version " + versions.front().second);

    json rep = {{"format_version", kArtifactVersion}, {"fits", json::array()}, {"criteria", json::array()}};
    std::ostringstream md;
    md << "# ebfkit report\n\n";
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const json j = json::parse(texts[i]);
        if (j.value("kind", "") == "criteria") {
            rep["criteria"].push_back(j);
            md << "## Criteria: " << inputs[i] << "\n\n";
            md << "| model | loglik | q | AIC | BIC (n=rows) | BIC (n=clusters) | DIC | p_DIC |\n";
            md << "|---|---|---|---|---|---|---|---|\n";
            for (const auto& m : j.at("models")) {
                auto g = [&](const json& v) { return v.is_null() ? std::string("NA") : fmt(v.get<double>()); };
                md << "| " << m.at("label").get<std::string>() << " | " << g(m.at("loglik")) << " | "
                   << m.at("q").get<int>() << " | " << g(m.at("aic")) << " | " << g(m.at("bic")[0].at("value"))
                   << " | " << g(m.at("bic")[1].at("value")) << " | " << (m.contains("dic") ? g(m["dic"]) : "NA")
                   << " | " << (m.contains("p_dic") ? g(m["p_dic"]) : "NA") << " |\n";
            }
            for (const auto& p : j.at("pairwise"))
                md << "\nLRT " << p.at("model0").get<std::string>() << " vs " << p.at("model1").get<std::string>()
                   << ": stat " << fmt(p.at("lrt_stat").get<double>()) << ", p " << fmt(p.at("lrt_p").get<double>())
                   << "\n";
            md << "\n";
            continue;
        }
        const FitArtifact art = artifact_from_json(texts[i]);
        const auto rs = compute_ebfs(art, {}, {});
        json f = {{"path", inputs[i]}, {"spec_text", render_formula(art.spec)}, {"method", to_string(art.method)},
                  {"ebf", json::array()}};
        md << "## EBF: " << inputs[i] << "\n\nModel: `" << render_formula(art.spec) << "` (" << to_string(art.method)
           << ")\n\n| term | log EBF | log10 EBF | reading | warnings |\n|---|---|---|---|---|\n";
        for (const auto& r : rs) {
            f["ebf"].push_back(ebf_json(r));
            std::string w;
            for (std::size_t k = 0; k < r.warnings.size(); ++k) w += (k ? "; " : "") + r.warnings[k];
            md << "| " << r.tested_terms.front() << " | " << fmt(r.log_ebf) << " | " << fmt(r.log10_ebf()) << " | "
               << r.reading() << " | " << w << " |\n";
        }
        md << "\n";
        rep["fits"].push_back(f);
    }
    if (out.empty()) {
        std::printf("%s", md.str().c_str());
    } else {
        write_file(out + ".json", rep.dump(2) + "\n");
        write_file(out + ".md", md.str());
        std::printf("report written to %s.json and %s.md\n", out.c_str(), out.c_str());
    }
    return 0;
}

void add_mcmc_options(CLI::App* app, McmcConfig& c) {
    app->add_option("--chains", c.chains, "MCMC chains");
    app->add_option("--iterations", c.iterations, "MCMC iterations per chain, including burn-in");
    app->add_option("--burn-in", c.burn_in, "MCMC burn-in iterations");
    app->add_option("--thin", c.thin, "MCMC thinning interval");
    app->add_option("--car-alpha", c.car_alpha, "CAR propriety parameter");
    app->add_flag("--estimate-car-alpha", c.estimate_car_alpha, "sample the CAR alpha instead of fixing it");
}

void add_model_options(CLI::App* app, ModelArgs& m) {
    app->add_option("--data", m.data, "CSV data file")->required();
    app->add_option("--family", m.family, "gaussian, bernoulli-logit or poisson-log");
    app->add_option("--offset", m.offset, "offset column (linear-predictor scale)");
    app->add_option("--adjacency", m.adjacency, "adjacency file for car terms");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Empirical Bayes factors for variance components"};
    app.require_subcommand(1);

    FitArgs fa;
    auto* fit = app.add_subcommand("fit", "fit a model and write an artifact");
    add_model_options(fit, fa.m);
    fit->add_option("--model", fa.model, "model formula")->required();
    fit->add_option("--method", fa.method, "ml, reml or mcmc");
    fit->add_option("--seed", fa.seed, "random seed");
    fit->add_option("--out", fa.out, "artifact output path");
    fit->add_flag("--diagonal-omega", fa.diagonal_omega, "use squared standard errors for the posterior covariance");
    add_mcmc_options(fit, fa.mcmc);

    std::string ebf_fit, ebf_terms, ebf_joint, ebf_out;
    auto* ebf = app.add_subcommand("ebf", "compute EBFs from an artifact");
    ebf->add_option("--fit", ebf_fit, "artifact path")->required();
    auto* terms_opt = ebf->add_option("--terms", ebf_terms, "comma-separated terms, e.g. g1,g2[x]");
    ebf->add_option("--joint", ebf_joint, "comma-separated terms tested jointly")->excludes(terms_opt);
    ebf->add_option("--out", ebf_out, "JSON output path");

    CriteriaArgs ca;
    auto* crit = app.add_subcommand("criteria", "AIC, BIC, DIC, LRT and cross-validation");
    add_model_options(crit, ca.m);
    crit->add_option("--model", ca.models, "model formula (repeatable)")->required();
    crit->add_option("--method", ca.method, "ml, reml or mcmc");
    crit->add_option("--compare", ca.compare, "smaller and larger model for the LRT (m1 m2)")->expected(2);
    crit->add_option("--cv", ca.cv, "number of cross-validation folds for the first model");
    crit->add_option("--cv-metric", ca.cv_metric, "squared or absolute");
    crit->add_option("--seed", ca.seed, "seed for folds and MCMC");
    crit->add_option("--out", ca.out, "output prefix for .csv and .json");
    add_mcmc_options(crit, ca.mcmc);

    std::string grid_path, sim_out = "sim_out", study = "grid";
    std::uint64_t sim_seed = 0;
    int sim_reps = 0;
    std::vector<int> sim_N;
    auto* sim = app.add_subcommand("simulate", "synthetic study grid or chi-bar calibration");
    sim->add_option("--grid", grid_path, "grid config (.json or .toml)");
    sim->add_option("--out", sim_out, "output directory");
    sim->add_option("--study", study, "grid or chibar");
    auto* seed_opt = sim->add_option("--seed", sim_seed, "seed override");
    sim->add_option("--replications", sim_reps, "replications override");
    sim->add_option("--N", sim_N, "sample sizes for the chibar study");

    std::vector<std::string> rep_inputs;
    std::string rep_out;
    auto* rep = app.add_subcommand("report", "combine artifacts and criteria into one report");
    rep->add_option("inputs", rep_inputs, "artifact or criteria JSON files");
    rep->add_option("--out", rep_out, "output prefix for .json and .md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    }
    try {
        if (*fit) return cmd_fit(fa);
        if (*ebf) return cmd_ebf(ebf_fit, ebf_terms, ebf_joint, ebf_out);
        if (*crit) return cmd_criteria(ca);
        if (*sim) return cmd_simulate(grid_path, sim_out, study, seed_opt->count() ? &sim_seed : nullptr, sim_reps, sim_N);
        if (*rep) return cmd_report(rep_inputs, rep_out);
    } catch (const InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInput;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
