#include "ebfkit/artifact.hpp"

#include "ebfkit/errors.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace ebfkit {

using nlohmann::json;

const std::vector<TermDesign>& FitArtifact::terms() const {
    if (classical) return classical->terms;
    if (posterior) return posterior->terms;
    throw InputError("artifact holds no fit");
}

FitArtifact make_artifact(const ModelSpec& spec, const FittedModel& fit) {
    FitArtifact a;
    a.spec = spec;
    a.method = fit.method;
    a.classical = fit;
    return a;
}

FitArtifact make_artifact(const PosteriorFit& fit) {
    FitArtifact a;
    a.spec = fit.spec;
    a.method = FitMethod::Mcmc;
    a.posterior = fit;
    return a;
}

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mat_json(const Eigen::MatrixXd& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Eigen::MatrixXd mat_from(const json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw InputError("artifact: matrix size mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    return m;
}

CovKind parse_kind(const std::string& s) {
    if (s == "diagonal") return CovKind::Diagonal;
    if (s == "correlated") return CovKind::Correlated;
    if (s == "car") return CovKind::Car;
    if (s == "gp-se") return CovKind::GpSe;
    throw InputError("artifact: unknown covariance kind '" + s + "'");
}

json term_json(const TermDesign& t) {
    json j{{"label", t.label},
           {"kind", to_string(t.kind)},
           {"columns", t.columns},
           {"levels", t.level_names},
           {"offset", t.offset}};
    if (t.kind == CovKind::GpSe) j["gp_x"] = t.gp_x;
    if (t.kind == CovKind::Car && t.adjacency) {
        std::vector<std::vector<int>> nb;
        for (int i = 0; i < t.adjacency->size(); ++i) nb.push_back(t.adjacency->neighbors(i));
        j["adjacency"] = nb;
    }
    return j;
}

TermDesign term_from(const json& j) {
    TermDesign t;
    t.label = j.at("label").get<std::string>();
    t.kind = parse_kind(j.at("kind").get<std::string>());
    t.columns = j.at("columns").get<std::vector<std::string>>();
    t.level_names = j.at("levels").get<std::vector<std::string>>();
    t.offset = j.at("offset").get<int>();
    if (j.contains("gp_x")) t.gp_x = j.at("gp_x").get<std::vector<double>>();
    if (j.contains("adjacency"))
        t.adjacency = std::make_shared<const Adjacency>(j.at("adjacency").get<std::vector<std::vector<int>>>());
    return t;
}

json gamma_json(const std::vector<TermDesign>& terms, const CovarianceParams& gamma) {
    json out = json::array();
    for (std::size_t k = 0; k < terms.size(); ++k)
        out.push_back({{"label", terms[k].label},
                       {"names", param_names(terms[k])},
                       {"values", param_values(terms[k], gamma.at(k))}});
    return out;
}

CovarianceParams gamma_from(const std::vector<TermDesign>& terms, const json& j) {
    CovarianceParams out;
    if (j.size() != terms.size()) throw InputError("artifact: gamma does not match the terms");
    for (std::size_t k = 0; k < terms.size(); ++k) {
        if (j[k].at("label").get<std::string>() != terms[k].label) throw InputError("artifact: gamma label mismatch");
        out.push_back(params_from_values(terms[k], j[k].at("values").get<std::vector<double>>()));
    }
    return out;
}

json config_json(const McmcConfig& c) {
    return {{"chains", c.chains},       {"iterations", c.iterations}, {"burn_in", c.burn_in},
            {"thin", c.thin},           {"seed", c.seed},             {"adapt_window", c.adapt_window},
            {"car_alpha", c.car_alpha}, {"estimate_car_alpha", c.estimate_car_alpha}};
}

McmcConfig config_from(const json& j) {
    McmcConfig c;
    c.chains = j.at("chains").get<int>();
    c.iterations = j.at("iterations").get<int>();
    c.burn_in = j.at("burn_in").get<int>();
    c.thin = j.at("thin").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.adapt_window = j.at("adapt_window").get<int>();
    c.car_alpha = j.at("car_alpha").get<double>();
    c.estimate_car_alpha = j.at("estimate_car_alpha").get<bool>();
    return c;
}

}  // namespace

std::string artifact_to_json(const FitArtifact& a) {
    json j;
    j["format_version"] = a.format_version;
    j["spec_text"] = render_formula(a.spec);
    j["family"] = to_string(a.spec.family);
    j["offset"] = a.spec.offset ? json(*a.spec.offset) : json(nullptr);
    j["method"] = to_string(a.method);
    j["data_path"] = a.data_path;
    j["adjacency_path"] = a.adjacency_path;
    json terms = json::array();
    for (const auto& t : a.terms()) terms.push_back(term_json(t));
    j["terms"] = terms;
    if (a.classical) {
        const auto& f = *a.classical;
        j["phi"] = {{"names", f.fixed_names}, {"values", vec_json(f.beta)}, {"sigma2", f.sigma2}};
        j["gamma"] = gamma_json(f.terms, f.gamma);
        json theta = json::object();
        for (const auto& t : f.terms) theta[t.label] = vec_json(f.theta.segment(t.offset, t.size()));
        j["theta"] = theta;
        json blocks = json::array();
        for (const auto& t : f.terms) blocks.push_back({{"label", t.label}, {"begin", t.offset}, {"size", t.size()}});
        if (f.flags.diagonal_approx) {
            j["omega"] = {{"layout", "diagonal"}, {"approx", true}, {"diag", vec_json(f.omega.diagonal())},
                          {"blocks", blocks}};
        } else {
            j["omega"] = {{"layout", "full"}, {"approx", false}, {"matrix", mat_json(f.omega)}, {"blocks", blocks}};
        }
        j["loglik"] = f.loglik;
        j["n_obs"] = f.n_obs;
        j["sweeps"] = f.sweeps;
        j["deviance_trace"] = f.deviance_trace;
        j["flags"] = {{"boundary", f.flags.boundary},
                      {"singular", f.flags.singular},
                      {"jittered", f.flags.jittered},
                      {"diagonal_approx", f.flags.diagonal_approx},
                      {"boundary_params", f.flags.boundary_params}};
    }
    if (a.posterior) {
        const auto& p = *a.posterior;
        j["phi"] = {{"names", p.fixed_names}};
        j["n_obs"] = p.n_obs;
        j["config"] = config_json(p.config);
        j["flags"] = {{"clamped", p.flags.clamped},
                      {"low_acceptance", p.flags.low_acceptance},
                      {"grid_fallback", p.flags.grid_fallback},
                      {"low_acceptance_params", p.flags.low_acceptance_params}};
        j["acceptance"] = p.acceptance;
        json blocks = json::array();
        for (const auto& b : p.blocks) blocks.push_back({{"name", b.name}, {"begin", b.begin}, {"size", b.size}});
        j["draws"] = {{"names", p.names}, {"chains", p.chains}, {"blocks", blocks}, {"matrix", mat_json(p.draws)}};
    }
    return j.dump(1);
}

FitArtifact artifact_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("artifact: invalid JSON: ") + e.what());
    }
    try {
        FitArtifact a;
        a.format_version = j.at("format_version").get<std::string>();
        if (a.format_version != kArtifactVersion)
            throw InputError("artifact format_version '" + a.format_version + "' is not supported (expected '" +
                             kArtifactVersion + "')");
        a.spec = parse_formula(j.at("spec_text").get<std::string>());
        a.spec.family = parse_family(j.at("family").get<std::string>());
        if (!j.at("offset").is_null()) a.spec.offset = j.at("offset").get<std::string>();
        a.method = parse_fit_method(j.at("method").get<std::string>());
        a.data_path = j.value("data_path", "");
        a.adjacency_path = j.value("adjacency_path", "");
        std::vector<TermDesign> terms;
        for (const auto& t : j.at("terms")) terms.push_back(term_from(t));
        if (a.method != FitMethod::Mcmc) {
            FittedModel f;
            f.method = a.method;
            f.terms = terms;
            f.fixed_names = j.at("phi").at("names").get<std::vector<std::string>>();
            f.beta = vec_from(j.at("phi").at("values"));
            f.sigma2 = j.at("phi").at("sigma2").get<double>();
            f.gamma = gamma_from(terms, j.at("gamma"));
            int q = 0;
            for (const auto& t : terms) q = std::max(q, t.offset + t.size());
            f.theta = Eigen::VectorXd::Zero(q);
            for (const auto& t : terms) {
                const Eigen::VectorXd v = vec_from(j.at("theta").at(t.label));
                if (v.size() != t.size()) throw InputError("artifact: theta size mismatch for '" + t.label + "'");
                f.theta.segment(t.offset, t.size()) = v;
            }
            const auto& om = j.at("omega");
            if (om.at("layout").get<std::string>() == "diagonal") {
                f.omega = vec_from(om.at("diag")).asDiagonal();
            } else {
                f.omega = mat_from(om.at("matrix"));
            }
            if (f.omega.rows() != q || f.omega.cols() != q) throw InputError("artifact: omega size mismatch");
            f.loglik = j.at("loglik").get<double>();
            f.n_obs = j.at("n_obs").get<int>();
            f.sweeps = j.value("sweeps", 0);
            f.deviance_trace = j.value("deviance_trace", std::vector<double>{});
            const auto& fl = j.at("flags");
            f.flags.boundary = fl.at("boundary").get<bool>();
            f.flags.singular = fl.at("singular").get<bool>();
            f.flags.jittered = fl.at("jittered").get<bool>();
            f.flags.diagonal_approx = fl.at("diagonal_approx").get<bool>();
            f.flags.boundary_params = fl.at("boundary_params").get<std::vector<std::string>>();
            a.classical = std::move(f);
        } else {
            PosteriorFit p;
            p.spec = a.spec;
            p.terms = terms;
            p.fixed_names = j.at("phi").at("names").get<std::vector<std::string>>();
            p.n_obs = j.at("n_obs").get<int>();
            p.config = config_from(j.at("config"));
            const auto& fl = j.at("flags");
            p.flags.clamped = fl.at("clamped").get<bool>();
            p.flags.low_acceptance = fl.at("low_acceptance").get<bool>();
            p.flags.grid_fallback = fl.at("grid_fallback").get<bool>();
            p.flags.low_acceptance_params = fl.at("low_acceptance_params").get<std::vector<std::string>>();
            p.acceptance = j.at("acceptance").get<std::map<std::string, double>>();
            const auto& d = j.at("draws");
            p.names = d.at("names").get<std::vector<std::string>>();
            p.chains = d.at("chains").get<int>();
            for (const auto& b : d.at("blocks"))
                p.blocks.push_back({b.at("name").get<std::string>(), b.at("begin").get<int>(), b.at("size").get<int>()});
            p.draws = mat_from(d.at("matrix"));
            if (p.draws.cols() != static_cast<Eigen::Index>(p.names.size()))
                throw InputError("artifact: draws columns do not match names");
            a.posterior = std::move(p);
        }
        return a;
    } catch (const json::exception& e) {
        throw InputError(std::string("artifact: ") + e.what());
    }
}

void save_artifact(const FitArtifact& a, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write artifact '" + path + "'");
    f << artifact_to_json(a) << '\n';
}

FitArtifact load_artifact(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open artifact '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return artifact_from_json(ss.str());
}

std::string artifact_version(const std::string& text) {
    try {
        const json j = json::parse(text);
        return j.at("format_version").get<std::string>();
    } catch (const json::exception& e) {
        throw InputError(std::string("cannot read format_version: ") + e.what());
    }
}

}  // namespace ebfkit
