#include "ebfkit/covstruct.hpp"

#include "ebfkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace ebfkit {

Adjacency::Adjacency(std::vector<std::vector<int>> neighbors) : neighbors_(std::move(neighbors)) {
    const int J = size();
    if (J < 1) throw InputError("adjacency has no nodes");
    std::vector<std::set<int>> sets(J);
    for (int j = 0; j < J; ++j) {
        for (int l : neighbors_[j]) {
            if (l < 0 || l >= J)
                throw InputError("adjacency: node " + std::to_string(j + 1) + " has out-of-range neighbour " +
                                 std::to_string(l + 1));
            if (l == j) throw InputError("adjacency: self-loop at node " + std::to_string(j + 1));
            if (!sets[j].insert(l).second)
                throw InputError("adjacency: duplicate neighbour at node " + std::to_string(j + 1));
        }
    }
    for (int j = 0; j < J; ++j) {
        if (neighbors_[j].empty())
            throw InputError("adjacency: node " + std::to_string(j + 1) + " is isolated");
        for (int l : neighbors_[j]) {
            if (!sets[l].count(j))
                throw InputError("adjacency is not symmetric: " + std::to_string(j + 1) + " ~ " +
                                 std::to_string(l + 1) + " but not the reverse");
        }
    }
}

Eigen::MatrixXd Adjacency::row_normalized() const {
    const int J = size();
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(J, J);
    for (int j = 0; j < J; ++j) {
        const double w = 1.0 / count(j);
        for (int l : neighbors_[j]) W(j, l) = w;
    }
    return W;
}

Adjacency read_adjacency(std::istream& in) {
    std::string line;
    int J = -1;
    while (J < 0 && std::getline(in, line)) {
        std::istringstream ls(line);
        if (!(ls >> J)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            throw InputError("adjacency: first line must hold the node count");
        }
    }
    if (J < 1) throw InputError("adjacency: missing or invalid node count");
    std::vector<std::vector<int>> nb;
    nb.reserve(J);
    while (static_cast<int>(nb.size()) < J && std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<int> row;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                int v = std::stoi(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
                row.push_back(v - 1);
            } catch (const std::exception&) {
                throw InputError("adjacency: bad neighbour index '" + tok + "' on node line " +
                                 std::to_string(nb.size() + 1));
            }
        }
        nb.push_back(std::move(row));
    }
    if (static_cast<int>(nb.size()) != J)
        throw InputError("adjacency: expected " + std::to_string(J) + " node lines, found " +
                         std::to_string(nb.size()));
    return Adjacency(std::move(nb));
}

Adjacency read_adjacency_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open adjacency file '" + path + "'");
    return read_adjacency(in);
}

void write_adjacency(std::ostream& out, const Adjacency& adj) {
    out << adj.size() << '\n';
    for (int j = 0; j < adj.size(); ++j) {
        const auto& nb = adj.neighbors(j);
        for (std::size_t i = 0; i < nb.size(); ++i) out << (i ? " " : "") << nb[i] + 1;
        out << '\n';
    }
}

Eigen::MatrixXd diag_cov(double tau2, int J) {
    if (!(tau2 >= 0.0)) throw InputError("diag_cov: negative variance");
    if (J < 1) throw InputError("diag_cov: J must be at least 1");
    return tau2 * Eigen::MatrixXd::Identity(J, J);
}

Eigen::Matrix2d intercept_slope_cov(double tau1, double tau2, double rho) {
    if (!(tau1 >= 0.0) || !(tau2 >= 0.0)) throw InputError("intercept_slope_cov: negative standard deviation");
    if (!(std::abs(rho) < 1.0)) throw InputError("intercept_slope_cov: |rho| must be < 1");
    Eigen::Matrix2d m;
    m << tau1 * tau1, rho * tau1 * tau2, rho * tau1 * tau2, tau2 * tau2;
    return m;
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw InputError("CAR propriety alpha must lie in [0, 1)");
    if (1.0 - alpha < 1e-10) throw NumericalError("CAR: (I - alpha W) is numerically singular");
}

Eigen::MatrixXd car_cov(double tau2, const Adjacency& adj, double alpha) {
    if (!(tau2 >= 0.0)) throw InputError("car_cov: negative variance");
    check_alpha(alpha);
    const int J = adj.size();
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(J, J) - alpha * adj.row_normalized();
    Eigen::MatrixXd sqrtB = Eigen::MatrixXd::Zero(J, J);
    for (int j = 0; j < J; ++j) sqrtB(j, j) = 1.0 / std::sqrt(static_cast<double>(adj.count(j)));
    Eigen::MatrixXd X = M.partialPivLu().solve(sqrtB);
    Eigen::MatrixXd psi = tau2 * (X * X.transpose());
    return 0.5 * (psi + psi.transpose());
}

Eigen::MatrixXd car_precision(double tau2, const Adjacency& adj, double alpha) {
    if (!(tau2 > 0.0)) throw InputError("car_precision: variance must be positive");
    check_alpha(alpha);
    const int J = adj.size();
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(J, J) - alpha * adj.row_normalized();
    Eigen::VectorXd L(J);
    for (int j = 0; j < J; ++j) L(j) = adj.count(j);
    Eigen::MatrixXd Q = M.transpose() * L.asDiagonal() * M / tau2;
    return 0.5 * (Q + Q.transpose());
}

double car_log_det_unit(const Adjacency& adj, double alpha) {
    check_alpha(alpha);
    const int J = adj.size();
    // W = D^{-1} A is similar to D^{-1/2} A D^{-1/2}, which is symmetric.
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(J, J);
    for (int j = 0; j < J; ++j)
        for (int l : adj.neighbors(j)) S(j, l) = 1.0 / std::sqrt(double(adj.count(j)) * adj.count(l));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    double log_det_m = 0.0;
    for (int i = 0; i < J; ++i) log_det_m += std::log(1.0 - alpha * es.eigenvalues()(i));
    double log_det_b = 0.0;
    for (int j = 0; j < J; ++j) log_det_b -= std::log(double(adj.count(j)));
    return log_det_b - 2.0 * log_det_m;
}

Eigen::MatrixXd gp_se_kernel(double tau, double lambda, const std::vector<double>& x) {
    if (!(lambda > 0.0)) throw InputError("gp_se_kernel: length-scale must be positive");
    if (!std::isfinite(tau)) throw InputError("gp_se_kernel: magnitude must be finite");
    const int N = static_cast<int>(x.size());
    const double tau2 = tau * tau;
    const double denom = 2.0 * lambda * lambda;
    Eigen::MatrixXd K(N, N);
    for (int i = 0; i < N; ++i) {
        if (!std::isfinite(x[i])) throw InputError("gp_se_kernel: non-finite input");
        K(i, i) = tau2;
        for (int j = 0; j < i; ++j) {
            const double d = x[i] - x[j];
            K(i, j) = K(j, i) = tau2 * std::exp(-d * d / denom);
        }
    }
    return K;
}

Eigen::MatrixXd gp_se_cov(double tau, double lambda, const std::vector<double>& x) {
    Eigen::MatrixXd K = gp_se_kernel(tau, lambda, x);
    K.diagonal().array() += kGpJitter * tau * tau;
    return K;
}

bool is_symmetric(const Eigen::MatrixXd& M, double rel_tol) {
    if (M.rows() != M.cols()) return false;
    const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
    return (M - M.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

double min_eigenvalue(const Eigen::MatrixXd& M) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

namespace {

bool chol_log_det(const Eigen::MatrixXd& M, double& out) {
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) return false;
    const auto& L = llt.matrixLLT();
    double s = 0.0;
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        const double d = L(i, i);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        s += std::log(d);
    }
    out = 2.0 * s;
    return true;
}

}  // namespace

LogDet log_det_psd(const Eigen::MatrixXd& M) {
    if (!is_symmetric(M)) throw InputError("log_det_psd: matrix is not symmetric");
    LogDet out;
    if (M.rows() == 0) return out;
    if (chol_log_det(M, out.value)) return out;
    const double jitter = 1e-8 * M.trace() / static_cast<double>(M.rows());
    if (jitter > 0.0) {
        Eigen::MatrixXd Mj = M;
        Mj.diagonal().array() += jitter;
        if (chol_log_det(Mj, out.value)) {
            out.jittered = true;
            return out;
        }
    }
    throw NumericalError("log_det_psd: factorisation failed after jitter");
}

}  // namespace ebfkit
