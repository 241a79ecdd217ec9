#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/artifact.hpp"
#include "ebfkit/criteria.hpp"
#include "ebfkit/ebf.hpp"
#include "ebfkit/errors.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <random>

using namespace ebfkit;

namespace {

Dataset grouped(int J, int n, double tau, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> y, x;
    std::vector<std::string> g;
    for (int j = 0; j < J; ++j) {
        const double u = tau * nd(rng), s = 0.4 * nd(rng);
        for (int i = 0; i < n; ++i) {
            x.push_back(nd(rng));
            y.push_back(1.0 + (0.5 + s) * x.back() + u + nd(rng));
            g.push_back("g" + std::to_string(j));
        }
    }
    Dataset d;
    d.add_numeric("y", y);
    d.add_numeric("x", x);
    d.add_categorical("g", g);
    return d;
}

bool same(const EbfResult& a, const EbfResult& b) {
    return a.log_ebf == b.log_ebf && a.components.half_logdet_prior == b.components.half_logdet_prior &&
           a.components.neg_half_quadform == b.components.neg_half_quadform && a.tested_terms == b.tested_terms &&
           a.warnings == b.warnings;
}

}  // namespace

TEST_CASE("classical artifact round trip is bit exact", "[artifact]") {
    const auto spec = parse_formula("y ~ 1 + x + (1 + x | g)");
    const auto fit = fit_lmm(spec, grouped(12, 8, 1.0, 2), FitMethod::Ml);
    auto art = make_artifact(spec, fit);
    art.data_path = "some/data.csv";
    const std::string text = artifact_to_json(art);
    const FitArtifact back = artifact_from_json(text);
    CHECK(artifact_to_json(back) == text);
    REQUIRE(back.classical);
    CHECK(back.method == FitMethod::Ml);
    CHECK(back.data_path == "some/data.csv");
    CHECK(back.classical->beta == fit.beta);
    CHECK(back.classical->theta == fit.theta);
    CHECK(back.classical->omega == fit.omega);
    CHECK(back.classical->sigma2 == fit.sigma2);
    CHECK(back.classical->flags == fit.flags);
    for (const char* sel : {"g", "g[1]", "g[x]"})
        CHECK(same(ebf_for_term(*back.classical, parse_selector(sel)), ebf_for_term(fit, parse_selector(sel))));
    const auto r0 = criteria_row("m", fit);
    const auto r1 = criteria_row("m", *back.classical);
    CHECK(r0.aic == r1.aic);
    CHECK(r0.bic_rows == r1.bic_rows);
    CHECK(r0.bic_clusters == r1.bic_clusters);
}

TEST_CASE("posterior artifact round trip is bit exact", "[artifact]") {
    const auto spec = parse_formula("y ~ 1 + x + (1 | g)");
    const Dataset d = grouped(8, 6, 1.0, 5);
    McmcConfig cfg{2, 400, 200, 1, 3, 100};
    const auto fit = gibbs_lmm(spec, d, cfg);
    const std::string text = artifact_to_json(make_artifact(fit));
    const FitArtifact back = artifact_from_json(text);
    CHECK(artifact_to_json(back) == text);
    REQUIRE(back.posterior);
    CHECK(back.method == FitMethod::Mcmc);
    CHECK(back.posterior->draws == fit.draws);
    CHECK(back.posterior->names == fit.names);
    CHECK(back.posterior->chains == fit.chains);
    CHECK(same(ebf_for_term(*back.posterior, parse_selector("g")), ebf_for_term(fit, parse_selector("g"))));
    const auto design = build_design(spec, d);
    const auto r0 = criteria_row("m", fit, design);
    const auto r1 = criteria_row("m", *back.posterior, design);
    CHECK(r0.dic->dic == r1.dic->dic);
    CHECK(r0.dic->p_dic == r1.dic->p_dic);
}

TEST_CASE("artifact files and versions", "[artifact]") {
    const auto spec = parse_formula("y ~ 1 + (1 | g)");
    const auto fit = fit_lmm(spec, grouped(6, 5, 1.0, 9), FitMethod::Reml);
    const auto art = make_artifact(spec, fit);
    const auto path = std::filesystem::temp_directory_path() / "ebfkit_test_artifact.json";
    save_artifact(art, path.string());
    const auto loaded = load_artifact(path.string());
    CHECK(artifact_to_json(loaded) == artifact_to_json(art));
    std::filesystem::remove(path);

    auto j = nlohmann::json::parse(artifact_to_json(art));
    CHECK(artifact_version(j.dump()) == "1");
    j["format_version"] = "2";
    CHECK(artifact_version(j.dump()) == "2");
    CHECK_THROWS_AS(artifact_from_json(j.dump()), InputError);
    CHECK_THROWS_AS(artifact_from_json("not json"), InputError);
    CHECK_THROWS_AS(artifact_version("{}"), InputError);
    CHECK_THROWS_AS(load_artifact("/nonexistent/artifact.json"), InputError);
}
