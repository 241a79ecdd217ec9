#pragma once

#include "ebfkit/covstruct.hpp"
#include "ebfkit/dataset.hpp"
#include "ebfkit/formula.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <memory>
#include <string>
#include <vector>

namespace ebfkit {

using SparseMatrix = Eigen::SparseMatrix<double>;

inline constexpr const char* kInterceptName = "(Intercept)";

// Layout of one random term inside the stacked coefficient vector. The
// coefficients of level j occupy [offset + j*dim, offset + (j+1)*dim).
struct TermDesign {
    std::string label;
    CovKind kind = CovKind::Diagonal;
    std::vector<std::string> columns;      // "(Intercept)" or covariate names
    std::vector<std::string> level_names;
    std::vector<int> level_of_row;
    std::vector<double> gp_x;              // per level, gp-se only
    std::shared_ptr<const Adjacency> adjacency;  // car only

    int offset = 0;

    int n_levels() const { return static_cast<int>(level_names.size()); }
    int dim() const { return static_cast<int>(columns.size()); }
    int size() const { return n_levels() * dim(); }
    int column_index(const std::string& column) const;  // accepts "1" for the intercept
    int coef_index(int level, int column) const { return offset + level * dim() + column; }
};

struct DesignMatrices {
    ModelSpec spec;
    Eigen::VectorXd y;
    Eigen::VectorXd offset;                 // zeros when the spec has none
    Eigen::MatrixXd X;                      // n x p, intercept first
    std::vector<std::string> fixed_names;
    SparseMatrix Z;                         // n x q, all terms side by side
    std::vector<TermDesign> terms;

    int n() const { return static_cast<int>(y.size()); }
    int p() const { return static_cast<int>(X.cols()); }
    int q() const { return static_cast<int>(Z.cols()); }

    const TermDesign& term(const std::string& label) const;
    int term_index(const std::string& label) const;

    SparseMatrix z_block(int k) const;
    // Half-open [begin, end) index ranges of each term's coefficients.
    std::vector<std::pair<int, int>> block_offsets() const;

    // Coefficient indices picked out by a selector ("g" or "g[x]").
    std::vector<int> selector_indices(const TermSelector& sel) const;
};

// Levels are coded by first appearance. The adjacency is required when the
// spec has a car term and must have one node per row.
DesignMatrices build_design(const ModelSpec& spec, const Dataset& data,
                            std::shared_ptr<const Adjacency> adjacency = nullptr);

// Same design restricted to the given rows. All levels are kept, so a level
// without rows is informed by its prior alone.
DesignMatrices select_rows(const DesignMatrices& design, const std::vector<int>& rows);

struct TermDiagnostics {
    std::string label;
    int n_levels = 0;
    int min_obs = 0;
    int max_obs = 0;
};

struct DiagnosticsReport {
    std::vector<TermDiagnostics> terms;
    bool family_compatible = true;
    std::vector<std::string> issues;

    bool ok() const { return issues.empty(); }
};

// Report-only: never throws on bad input, lists problems instead.
DiagnosticsReport validate(const ModelSpec& spec, const Dataset& data);

}  // namespace ebfkit
