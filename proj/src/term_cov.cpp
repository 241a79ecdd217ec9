#include "ebfkit/term_cov.hpp"

#include "ebfkit/errors.hpp"

#include <cmath>

namespace ebfkit {

void check_params(const TermDesign& term, const TermParams& params) {
    const std::size_t expected =
        (term.kind == CovKind::Car || term.kind == CovKind::GpSe) ? 1u : static_cast<std::size_t>(term.dim());
    if (params.tau2.size() != expected)
        throw InputError("term '" + term.label + "' expects " + std::to_string(expected) + " variances");
    for (double v : params.tau2)
        if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("term '" + term.label + "' has an invalid variance");
    if (term.kind == CovKind::Correlated) {
        if (term.dim() != 2)
            throw InputError("correlated term '" + term.label + "': only two-column blocks are supported");
        if (!(std::abs(params.rho) < 1.0)) throw InputError("term '" + term.label + "': |rho| must be < 1");
    }
    if (term.kind == CovKind::Car && !(params.alpha >= 0.0 && params.alpha < 1.0))
        throw InputError("term '" + term.label + "': alpha must lie in [0, 1)");
    if (term.kind == CovKind::GpSe && !(params.lambda > 0.0))
        throw InputError("term '" + term.label + "': length-scale must be positive");
}

std::vector<std::string> param_names(const TermDesign& term) {
    std::vector<std::string> out;
    switch (term.kind) {
        case CovKind::Diagonal:
            for (const auto& c : term.columns) out.push_back("tau2[" + c + "]");
            break;
        case CovKind::Correlated:
            for (const auto& c : term.columns) out.push_back("tau2[" + c + "]");
            out.push_back("rho");
            break;
        case CovKind::Car:
            out = {"tau2", "alpha"};
            break;
        case CovKind::GpSe:
            out = {"tau2", "lambda"};
            break;
    }
    return out;
}

std::vector<double> param_values(const TermDesign& term, const TermParams& params) {
    std::vector<double> out = params.tau2;
    if (term.kind == CovKind::Correlated) out.push_back(params.rho);
    if (term.kind == CovKind::Car) out.push_back(params.alpha);
    if (term.kind == CovKind::GpSe) out.push_back(params.lambda);
    return out;
}

TermParams params_from_values(const TermDesign& term, const std::vector<double>& values) {
    if (values.size() != param_names(term).size())
        throw InputError("term '" + term.label + "': wrong number of parameter values");
    TermParams p;
    switch (term.kind) {
        case CovKind::Diagonal:
            p.tau2 = values;
            break;
        case CovKind::Correlated:
            p.tau2.assign(values.begin(), values.end() - 1);
            p.rho = values.back();
            break;
        case CovKind::Car:
            p.tau2 = {values[0]};
            p.alpha = values[1];
            break;
        case CovKind::GpSe:
            p.tau2 = {values[0]};
            p.lambda = values[1];
            break;
    }
    check_params(term, p);
    return p;
}

Eigen::MatrixXd level_cov(const TermDesign& term, const TermParams& params) {
    check_params(term, params);
    if (term.kind == CovKind::Diagonal) {
        return Eigen::Map<const Eigen::VectorXd>(params.tau2.data(), term.dim()).asDiagonal();
    }
    if (term.kind == CovKind::Correlated) {
        return intercept_slope_cov(std::sqrt(params.tau2[0]), std::sqrt(params.tau2[1]), params.rho);
    }
    throw InputError("level_cov: term '" + term.label + "' is structured");
}

namespace {

Eigen::MatrixXd kron_identity(int J, const Eigen::MatrixXd& block) {
    const int d = static_cast<int>(block.rows());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(J * d, J * d);
    for (int j = 0; j < J; ++j) out.block(j * d, j * d, d, d) = block;
    return out;
}

}  // namespace

Eigen::MatrixXd term_cov(const TermDesign& term, const TermParams& params) {
    check_params(term, params);
    switch (term.kind) {
        case CovKind::Diagonal:
        case CovKind::Correlated:
            return kron_identity(term.n_levels(), level_cov(term, params));
        case CovKind::Car:
            return car_cov(params.tau2[0], *term.adjacency, params.alpha);
        case CovKind::GpSe:
            return gp_se_cov(std::sqrt(params.tau2[0]), params.lambda, term.gp_x);
    }
    return {};
}

Eigen::MatrixXd selector_cov(const TermDesign& term, const TermParams& params,
                             const std::optional<std::string>& column) {
    if (!column) return term_cov(term, params);
    check_params(term, params);
    if (term.kind == CovKind::Car || term.kind == CovKind::GpSe) {
        term.column_index(*column);
        return term_cov(term, params);
    }
    const int c = term.column_index(*column);
    return diag_cov(params.tau2[c], term.n_levels());
}

Eigen::MatrixXd term_precision(const TermDesign& term, const TermParams& params) {
    check_params(term, params);
    for (double v : params.tau2)
        if (!(v > 0.0)) throw NumericalError("term '" + term.label + "': zero variance has no precision");
    switch (term.kind) {
        case CovKind::Diagonal:
        case CovKind::Correlated:
            return kron_identity(term.n_levels(), level_cov(term, params).inverse());
        case CovKind::Car:
            return car_precision(params.tau2[0], *term.adjacency, params.alpha);
        case CovKind::GpSe: {
            Eigen::MatrixXd K = gp_se_cov(std::sqrt(params.tau2[0]), params.lambda, term.gp_x);
            Eigen::LLT<Eigen::MatrixXd> llt(K);
            if (llt.info() != Eigen::Success) throw NumericalError("gp kernel factorisation failed");
            Eigen::MatrixXd P = llt.solve(Eigen::MatrixXd::Identity(K.rows(), K.cols()));
            return 0.5 * (P + P.transpose());
        }
    }
    return {};
}

void append_factor_triplets(const TermDesign& term, const TermParams& params, double scale2,
                            std::vector<Eigen::Triplet<double>>& out) {
    check_params(term, params);
    const double s = 1.0 / std::sqrt(scale2);
    const int base = term.offset;
    auto push_dense = [&](const Eigen::MatrixXd& L, int at) {
        for (int i = 0; i < L.rows(); ++i)
            for (int j = 0; j <= i; ++j) out.emplace_back(at + i, at + j, L(i, j) * s);
    };
    switch (term.kind) {
        case CovKind::Diagonal: {
            for (int j = 0; j < term.n_levels(); ++j)
                for (int c = 0; c < term.dim(); ++c)
                    out.emplace_back(base + j * term.dim() + c, base + j * term.dim() + c,
                                     std::sqrt(params.tau2[c]) * s);
            break;
        }
        case CovKind::Correlated: {
            const double t1 = std::sqrt(params.tau2[0]);
            const double t2 = std::sqrt(params.tau2[1]);
            Eigen::Matrix2d L;
            L << t1, 0.0, params.rho * t2, t2 * std::sqrt(1.0 - params.rho * params.rho);
            for (int j = 0; j < term.n_levels(); ++j) push_dense(L, base + 2 * j);
            break;
        }
        case CovKind::Car:
        case CovKind::GpSe: {
            TermParams unit = params;
            unit.tau2 = {1.0};
            Eigen::MatrixXd C = term_cov(term, unit);
            Eigen::LLT<Eigen::MatrixXd> llt(C);
            if (llt.info() != Eigen::Success)
                throw NumericalError("term '" + term.label + "': covariance factorisation failed");
            Eigen::MatrixXd L = llt.matrixL();
            push_dense(L * std::sqrt(params.tau2[0]), base);
            break;
        }
    }
}

SparseMatrix relative_factor(const std::vector<TermDesign>& terms, const CovarianceParams& params,
                             double scale2) {
    if (terms.size() != params.size()) throw InputError("relative_factor: parameter count mismatch");
    int q = 0;
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        append_factor_triplets(terms[k], params[k], scale2, trip);
        q = std::max(q, terms[k].offset + terms[k].size());
    }
    SparseMatrix L(q, q);
    L.setFromTriplets(trip.begin(), trip.end());
    L.makeCompressed();
    return L;
}

}  // namespace ebfkit
