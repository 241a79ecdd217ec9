#pragma once

#include "ebfkit/lmm.hpp"
#include "ebfkit/mcmc.hpp"

#include <iosfwd>
#include <optional>
#include <string>

namespace ebfkit {

inline constexpr const char* kArtifactVersion = "1";

// Everything needed to recompute EBFs and criteria without the data.
struct FitArtifact {
    std::string format_version = kArtifactVersion;
    ModelSpec spec;
    FitMethod method = FitMethod::Reml;
    std::optional<FittedModel> classical;   // ml / reml
    std::optional<PosteriorFit> posterior;  // mcmc
    std::string data_path;
    std::string adjacency_path;

    const std::vector<TermDesign>& terms() const;
};

FitArtifact make_artifact(const ModelSpec& spec, const FittedModel& fit);
FitArtifact make_artifact(const PosteriorFit& fit);

std::string artifact_to_json(const FitArtifact& a);
FitArtifact artifact_from_json(const std::string& text);

void save_artifact(const FitArtifact& a, const std::string& path);
FitArtifact load_artifact(const std::string& path);

// format_version of a JSON document without full parsing of the rest.
std::string artifact_version(const std::string& text);

}  // namespace ebfkit
