#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/errors.hpp"
#include "ebfkit/formula.hpp"

#include <string>

using namespace ebfkit;

TEST_CASE("crossed intercept-slope formula", "[formula]") {
    const auto spec = parse_formula("y ~ 1 + x + (1 + x | g1) + (1 | g2)");
    REQUIRE(spec.response == "y");
    REQUIRE(spec.fixed_terms == std::vector<std::string>{"x"});
    REQUIRE(spec.n_fixed() == 2);
    REQUIRE(spec.random_terms.size() == 2);
    const auto& g1 = spec.term("g1");
    CHECK(g1.cov_kind == CovKind::Correlated);
    CHECK(g1.design_columns == std::vector<std::string>{"1", "x"});
    CHECK(spec.term("g2").cov_kind == CovKind::Diagonal);
    CHECK_FALSE(spec.term_index("g3").has_value());
    CHECK_THROWS_AS(spec.term("g3"), InputError);
}

TEST_CASE("double bar gives a diagonal block", "[formula]") {
    const auto spec = parse_formula("y ~ x + (1 + x || g)");
    CHECK(spec.random_terms[0].cov_kind == CovKind::Diagonal);
    CHECK(spec.random_terms[0].dim() == 2);
}

TEST_CASE("structured unit terms", "[formula]") {
    const auto spec = parse_formula("obs ~ (1|unit:iid) + (1|unit:car)");
    REQUIRE(spec.random_terms.size() == 2);
    CHECK(spec.random_terms[0].label == "unit:iid");
    CHECK(spec.random_terms[0].cov_kind == CovKind::Diagonal);
    CHECK(spec.random_terms[1].label == "unit:car");
    CHECK(spec.random_terms[1].cov_kind == CovKind::Car);
    CHECK(spec.fixed_terms.empty());

    const auto gp = parse_formula("y ~ (1|unit:gp(x1)) + (1|unit:gp(x2))");
    CHECK(gp.random_terms[0].cov_kind == CovKind::GpSe);
    CHECK(gp.random_terms[0].gp_input == "x1");
    CHECK(gp.random_terms[1].label == "unit:gp(x2)");
}

TEST_CASE("render is the inverse of parse", "[formula]") {
    for (const std::string f : {"y ~ 1 + x + (1 + x | g1) + (1 | g2)", "obs ~ 1 + (1 | unit:iid) + (1 | unit:car)",
                                "y ~ 1 + a + b + (1 + a || g)", "y ~ 1 + (1 | unit:gp(t))", "y ~ 1 + (a | g)"}) {
        const auto spec = parse_formula(f);
        CHECK(render_formula(spec) == f);
        CHECK(parse_formula(render_formula(spec)) == spec);
    }
}

TEST_CASE("syntax errors report a byte offset", "[formula]") {
    try {
        parse_formula("y ~ x + (1 + x g)");
        FAIL("expected an error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("byte 15") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_formula("y x"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ (1 | g) + (1 | g)"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ x + x"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ (x + 1 | unit:car)"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ (1 | g:car)"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ (1 | unit:ar1)"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ $"), InputError);
    CHECK_THROWS_AS(parse_formula("y ~ ( | g)"), InputError);
}

TEST_CASE("families", "[formula]") {
    CHECK(parse_family("gaussian") == Family::Gaussian);
    CHECK(parse_family("bernoulli-logit") == Family::Bernoulli);
    CHECK(parse_family("poisson-log") == Family::Poisson);
    CHECK(parse_family("poisson") == Family::Poisson);
    CHECK(to_string(Family::Bernoulli) == "bernoulli");
    CHECK(to_string(CovKind::GpSe) == "gp-se");
    CHECK_THROWS_AS(parse_family("gamma"), InputError);
}

TEST_CASE("term selectors", "[formula]") {
    auto s = parse_selector("g1[x]");
    CHECK(s.label == "g1");
    CHECK(s.column == std::optional<std::string>("x"));
    CHECK(s.text() == "g1[x]");
    s = parse_selector("unit:car");
    CHECK(s.label == "unit:car");
    CHECK_FALSE(s.column.has_value());
    CHECK_THROWS_AS(parse_selector("g1[]"), InputError);
    CHECK_THROWS_AS(parse_selector("[x]"), InputError);
    CHECK_THROWS_AS(parse_selector("g1[x"), InputError);
}
