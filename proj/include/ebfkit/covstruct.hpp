#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <vector>

namespace ebfkit {

// Undirected neighbourhood graph over J areas (0-based internally).
class Adjacency {
public:
    Adjacency() = default;
    explicit Adjacency(std::vector<std::vector<int>> neighbors);

    int size() const { return static_cast<int>(neighbors_.size()); }
    const std::vector<int>& neighbors(int j) const { return neighbors_[j]; }
    int count(int j) const { return static_cast<int>(neighbors_[j].size()); }

    // Row-normalised weights W (W_jl = 1/L_j for l ~ j).
    Eigen::MatrixXd row_normalized() const;

private:
    std::vector<std::vector<int>> neighbors_;
};

// First line J, then one line per node with space-separated 1-based
// neighbour indices.
Adjacency read_adjacency(std::istream& in);
Adjacency read_adjacency_file(const std::string& path);
void write_adjacency(std::ostream& out, const Adjacency& adj);

Eigen::MatrixXd diag_cov(double tau2, int J);

// [[t1^2, rho t1 t2], [rho t1 t2, t2^2]] from standard deviations.
Eigen::Matrix2d intercept_slope_cov(double tau1, double tau2, double rho);

// alpha outside [0, 1) is an InputError; 1 - alpha < 1e-10 a NumericalError.
void check_alpha(double alpha);

// tau2 (I - alpha W)^{-1} B (I - alpha W)^{-T}, B = diag(1/L_j).
Eigen::MatrixXd car_cov(double tau2, const Adjacency& adj, double alpha);

// Inverse of car_cov: (I - alpha W)^T diag(L) (I - alpha W) / tau2.
Eigen::MatrixXd car_precision(double tau2, const Adjacency& adj, double alpha);

// log|(I - alpha W)^{-1} B (I - alpha W)^{-T}| without forming the matrix.
double car_log_det_unit(const Adjacency& adj, double alpha);

inline constexpr double kGpJitter = 1e-8;

// K_ij = tau^2 exp(-(x_i - x_j)^2 / (2 lambda^2)). No jitter; see
// gp_se_cov for the factorisable version.
Eigen::MatrixXd gp_se_kernel(double tau, double lambda, const std::vector<double>& x);

// Kernel with 1e-8 tau^2 added to the diagonal.
Eigen::MatrixXd gp_se_cov(double tau, double lambda, const std::vector<double>& x);

struct LogDet {
    double value = 0.0;
    bool jittered = false;
};

// log|M| through a Cholesky factorisation. A matrix that is not numerically
// positive definite is retried once with 1e-8 * trace / J on the diagonal;
// a second failure throws NumericalError.
LogDet log_det_psd(const Eigen::MatrixXd& M);

bool is_symmetric(const Eigen::MatrixXd& M, double rel_tol = 1e-10);

// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Eigen::MatrixXd& M);

}  // namespace ebfkit
