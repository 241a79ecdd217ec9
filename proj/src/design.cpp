#include "ebfkit/design.hpp"

#include "ebfkit/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ebfkit {

int TermDesign::column_index(const std::string& column) const {
    const std::string name = column == kIntercept ? kInterceptName : column;
    for (int c = 0; c < dim(); ++c)
        if (columns[c] == name) return c;
    throw InputError("random term '" + label + "' has no column '" + column + "'");
}

const TermDesign& DesignMatrices::term(const std::string& label) const {
    return terms.at(term_index(label));
}

int DesignMatrices::term_index(const std::string& label) const {
    for (std::size_t k = 0; k < terms.size(); ++k)
        if (terms[k].label == label) return static_cast<int>(k);
    throw InputError("unknown random term '" + label + "'");
}

SparseMatrix DesignMatrices::z_block(int k) const {
    const auto& t = terms.at(k);
    return Z.middleCols(t.offset, t.size());
}

std::vector<std::pair<int, int>> DesignMatrices::block_offsets() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& t : terms) out.emplace_back(t.offset, t.offset + t.size());
    return out;
}

std::vector<int> DesignMatrices::selector_indices(const TermSelector& sel) const {
    const auto& t = term(sel.label);
    std::vector<int> idx;
    if (sel.column) {
        const int c = t.column_index(*sel.column);
        for (int j = 0; j < t.n_levels(); ++j) idx.push_back(t.coef_index(j, c));
    } else {
        for (int i = 0; i < t.size(); ++i) idx.push_back(t.offset + i);
    }
    return idx;
}

namespace {

const std::vector<double>& finite_numeric(const Dataset& data, const std::string& name,
                                          const std::string& role) {
    if (!data.has(name)) throw InputError("unknown column '" + name + "' (" + role + ")");
    if (!data.is_numeric(name)) throw InputError("column '" + name + "' (" + role + ") must be numeric");
    const auto& v = data.numeric(name);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw InputError("column '" + name + "' has a non-finite value in row " + std::to_string(i + 1));
    }
    return v;
}

std::string family_problem(Family family, const std::vector<double>& y) {
    for (double v : y) {
        if (family == Family::Bernoulli && v != 0.0 && v != 1.0)
            return "bernoulli response must be 0/1, found " + std::to_string(v);
        if (family == Family::Poisson && (v < 0.0 || v != std::floor(v)))
            return "poisson response must be a nonnegative integer, found " + std::to_string(v);
    }
    return {};
}

}  // namespace

DesignMatrices build_design(const ModelSpec& spec, const Dataset& data,
                            std::shared_ptr<const Adjacency> adjacency) {
    DesignMatrices d;
    d.spec = spec;
    const int n = static_cast<int>(data.n_rows());
    if (n < 1) throw InputError("dataset has no rows");

    const auto& y = finite_numeric(data, spec.response, "response");
    if (auto msg = family_problem(spec.family, y); !msg.empty()) throw InputError(msg);
    d.y = Eigen::Map<const Eigen::VectorXd>(y.data(), n);

    d.offset = Eigen::VectorXd::Zero(n);
    if (spec.offset) {
        const auto& o = finite_numeric(data, *spec.offset, "offset");
        d.offset = Eigen::Map<const Eigen::VectorXd>(o.data(), n);
    }

    d.X.resize(n, static_cast<Eigen::Index>(spec.n_fixed()));
    d.X.col(0).setOnes();
    d.fixed_names.push_back(kInterceptName);
    for (std::size_t f = 0; f < spec.fixed_terms.size(); ++f) {
        const auto& v = finite_numeric(data, spec.fixed_terms[f], "fixed effect");
        d.X.col(static_cast<Eigen::Index>(f + 1)) = Eigen::Map<const Eigen::VectorXd>(v.data(), n);
        d.fixed_names.push_back(spec.fixed_terms[f]);
    }

    std::vector<Eigen::Triplet<double>> trip;
    int offset = 0;
    for (const auto& rt : spec.random_terms) {
        TermDesign t;
        t.label = rt.label;
        t.kind = rt.cov_kind;
        t.offset = offset;
        if (rt.design_columns.empty()) throw InputError("random term '" + rt.label + "' has no columns");
        std::vector<const std::vector<double>*> cols;
        for (const auto& c : rt.design_columns) {
            if (c == kIntercept) {
                t.columns.push_back(kInterceptName);
                cols.push_back(nullptr);
            } else {
                t.columns.push_back(c);
                cols.push_back(&finite_numeric(data, c, "random-effect covariate"));
            }
        }
        if (rt.cov_kind == CovKind::Correlated && t.dim() < 2)
            throw InputError("correlated term '" + rt.label + "' needs at least two columns");

        if (rt.group == kUnitGroup) {
            t.level_of_row.resize(n);
            t.level_names.resize(n);
            for (int i = 0; i < n; ++i) {
                t.level_of_row[i] = i;
                t.level_names[i] = std::to_string(i + 1);
            }
        } else {
            if (!data.has(rt.group)) throw InputError("unknown column '" + rt.group + "' (grouping factor)");
            if (!data.is_categorical(rt.group))
                throw InputError("grouping column '" + rt.group + "' must be categorical");
            const auto& cat = data.categorical(rt.group);
            t.level_of_row = cat.codes;
            t.level_names = cat.levels;
            std::vector<int> counts(cat.levels.size(), 0);
            for (int c : cat.codes) ++counts[c];
            for (std::size_t j = 0; j < counts.size(); ++j) {
                if (counts[j] == 0)
                    throw InputError("level '" + cat.levels[j] + "' of '" + rt.group + "' has no observations");
            }
        }
        if (rt.cov_kind == CovKind::Car || rt.cov_kind == CovKind::GpSe) {
            if (rt.group != kUnitGroup || t.dim() != 1 || t.columns[0] != kInterceptName)
                throw InputError("term '" + rt.label + "' must be an intercept on the unit group");
        }
        if (rt.cov_kind == CovKind::GpSe) {
            t.gp_x = finite_numeric(data, rt.gp_input, "gp input");
        }
        if (rt.cov_kind == CovKind::Car) {
            if (!adjacency) throw InputError("term '" + rt.label + "' needs an adjacency file");
            if (adjacency->size() != n)
                throw InputError("adjacency has " + std::to_string(adjacency->size()) + " nodes but data has " +
                                 std::to_string(n) + " rows");
            t.adjacency = adjacency;
        }
        for (int i = 0; i < n; ++i) {
            const int lvl = t.level_of_row[i];
            for (int c = 0; c < t.dim(); ++c) {
                const double v = cols[c] ? (*cols[c])[i] : 1.0;
                if (v != 0.0) trip.emplace_back(i, t.coef_index(lvl, c), v);
            }
        }
        offset += t.size();
        d.terms.push_back(std::move(t));
    }
    d.Z.resize(n, offset);
    d.Z.setFromTriplets(trip.begin(), trip.end());
    d.Z.makeCompressed();
    return d;
}

DesignMatrices select_rows(const DesignMatrices& design, const std::vector<int>& rows) {
    DesignMatrices d;
    d.spec = design.spec;
    d.fixed_names = design.fixed_names;
    const int m = static_cast<int>(rows.size());
    d.y.resize(m);
    d.offset.resize(m);
    d.X.resize(m, design.p());
    SparseMatrix S(m, design.n());
    std::vector<Eigen::Triplet<double>> trip;
    for (int r = 0; r < m; ++r) {
        const int i = rows[r];
        if (i < 0 || i >= design.n()) throw InputError("select_rows: row index out of range");
        d.y(r) = design.y(i);
        d.offset(r) = design.offset(i);
        d.X.row(r) = design.X.row(i);
        trip.emplace_back(r, i, 1.0);
    }
    S.setFromTriplets(trip.begin(), trip.end());
    d.Z = S * design.Z;
    d.Z.makeCompressed();
    d.terms = design.terms;
    for (auto& t : d.terms) {
        std::vector<int> lor;
        lor.reserve(m);
        for (int i : rows) lor.push_back(t.level_of_row[i]);
        t.level_of_row = std::move(lor);
    }
    return d;
}

DiagnosticsReport validate(const ModelSpec& spec, const Dataset& data) {
    DiagnosticsReport rep;
    const int n = static_cast<int>(data.n_rows());
    auto check_numeric = [&](const std::string& name, const std::string& role) -> const std::vector<double>* {
        if (!data.has(name)) {
            rep.issues.push_back("missing column '" + name + "' (" + role + ")");
            return nullptr;
        }
        if (!data.is_numeric(name)) {
            rep.issues.push_back("column '" + name + "' (" + role + ") is not numeric");
            return nullptr;
        }
        const auto& v = data.numeric(name);
        for (double x : v) {
            if (!std::isfinite(x)) {
                rep.issues.push_back("column '" + name + "' has non-finite values");
                break;
            }
        }
        return &v;
    };

    if (const auto* y = check_numeric(spec.response, "response")) {
        auto msg = family_problem(spec.family, *y);
        if (!msg.empty()) {
            rep.family_compatible = false;
            rep.issues.push_back(msg);
        }
    } else {
        rep.family_compatible = false;
    }
    if (spec.offset) {
        if (const auto* o = check_numeric(*spec.offset, "offset")) {
            // Offsets are on the log scale; a zero-valued column usually means
            // the raw exposure was passed instead of its logarithm.
            if (spec.family == Family::Poisson) {
                for (double v : *o) {
                    if (v == 0.0 || !std::isfinite(v)) {
                        rep.issues.push_back("offset '" + *spec.offset +
                                             "' contains zero (log of zero exposure?)");
                        break;
                    }
                }
            }
        }
    }
    for (const auto& f : spec.fixed_terms) check_numeric(f, "fixed effect");
    for (const auto& rt : spec.random_terms) {
        TermDiagnostics td;
        td.label = rt.label;
        for (const auto& c : rt.design_columns)
            if (c != kIntercept) check_numeric(c, "random-effect covariate");
        if (rt.cov_kind == CovKind::GpSe) check_numeric(rt.gp_input, "gp input");
        if (rt.group == kUnitGroup) {
            td.n_levels = n;
            td.min_obs = td.max_obs = 1;
        } else if (!data.has(rt.group)) {
            rep.issues.push_back("missing column '" + rt.group + "' (grouping factor)");
        } else if (!data.is_categorical(rt.group)) {
            rep.issues.push_back("grouping column '" + rt.group + "' is not categorical");
        } else {
            const auto& cat = data.categorical(rt.group);
            std::vector<int> counts(cat.levels.size(), 0);
            for (int c : cat.codes) ++counts[c];
            td.n_levels = static_cast<int>(counts.size());
            if (!counts.empty()) {
                td.min_obs = *std::min_element(counts.begin(), counts.end());
                td.max_obs = *std::max_element(counts.begin(), counts.end());
            }
            if (td.min_obs == 0) rep.issues.push_back("term '" + rt.label + "' has a level without observations");
        }
        if (rt.cov_kind == CovKind::Correlated && rt.design_columns.size() < 2)
            rep.issues.push_back("correlated term '" + rt.label + "' has fewer than two columns");
        rep.terms.push_back(td);
    }
    return rep;
}

}  // namespace ebfkit
