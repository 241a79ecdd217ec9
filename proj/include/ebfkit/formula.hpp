#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ebfkit {

enum class Family { Gaussian, Bernoulli, Poisson };
enum class CovKind { Diagonal, Correlated, Car, GpSe };

std::string to_string(Family f);     // "gaussian", "bernoulli", "poisson"
std::string to_string(CovKind k);    // "diagonal", "correlated", "car", "gp-se"
Family parse_family(const std::string& text);  // accepts "gaussian"/"gaussian-identity" etc.

// The literal "1" in a random or fixed term list.
inline constexpr const char* kIntercept = "1";
// Pseudo-grouping with one level per row (structured and observation-level terms).
inline constexpr const char* kUnitGroup = "unit";

struct RandomTerm {
    std::string label;                      // unique; e.g. "g", "unit:car", "unit:gp(x)"
    std::string group;                      // categorical column name or "unit"
    std::vector<std::string> design_columns;  // "1" or numeric column names
    CovKind cov_kind = CovKind::Diagonal;
    std::string gp_input;                   // input variable for gp-se

    std::size_t dim() const { return design_columns.size(); }
    bool operator==(const RandomTerm&) const = default;
};

struct ModelSpec {
    std::string response;
    Family family = Family::Gaussian;
    std::optional<std::string> offset;
    std::vector<std::string> fixed_terms;   // covariate names; the intercept is implicit
    std::vector<RandomTerm> random_terms;

    std::size_t n_fixed() const { return fixed_terms.size() + 1; }
    const RandomTerm& term(const std::string& label) const;
    std::optional<std::size_t> term_index(const std::string& label) const;
    bool operator==(const ModelSpec&) const = default;
};

// Grammar:
//   formula  := name "~" item ("+" item)*
//   item     := "1" | name | "(" reterms ("|" | "||") group ")"
//   reterms  := ("1" | name) ("+" ("1" | name))*
//   group    := name | "unit" | "unit:iid" | "unit:car" | "unit:gp(" name ")"
// "|" gives a correlated term when it has two or more columns, "||" a
// diagonal one. Syntax errors carry the byte offset of the offending token.
ModelSpec parse_formula(const std::string& text);

// Inverse of parse_formula for the formula part of a spec.
std::string render_formula(const ModelSpec& spec);

// Selector for one column of a random term: "g[x]" or "g[1]". A plain label
// selects the whole term.
struct TermSelector {
    std::string label;
    std::optional<std::string> column;
    std::string text() const;
};
TermSelector parse_selector(const std::string& text);

}  // namespace ebfkit
