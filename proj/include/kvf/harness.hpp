#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "kvf/analysis.hpp"
#include "kvf/calibration.hpp"
#include "kvf/kvcache.hpp"
#include "kvf/model.hpp"

#include "json.hpp"

namespace kvf {

struct GenerationConfig {
    PolicyKind policy = PolicyKind::QFilters;
    std::size_t budget = 512;  // 0 = unlimited
    std::size_t sink_count = 4;
    std::size_t window_size = 64;
    std::set<std::size_t> protected_layers;
    std::uint64_t seed = 0;
    // capture attention even for policies that do not need it; outputs must
    // not change (exercised by the policy-isolation test)
    bool force_capture = false;
};

struct GenerationRun {
    std::string policy;
    std::size_t budget = 0;
    std::size_t seq_len = 0;
    std::uint64_t seed = 0;
    std::vector<double> nll;  // teacher-forced, one entry per predicted token
    double perplexity = 0.0;  // exp(mean nll)
    std::size_t peak_cache = 0;  // max per-head entries on unprotected layers
    double wall_seconds = 0.0;
    double mean_step_seconds = 0.0;
};

// Teacher-forced pass over the stream with per-step eviction once the
// budget is first exceeded. Budget compliance is asserted at every step.
GenerationRun constrained_generate(const ModelWeights& weights,
                                   const QFilterSet* filters,
                                   const GenerationConfig& config,
                                   const std::vector<std::uint32_t>& stream);

struct NeedleConfig {
    PolicyKind policy = PolicyKind::QFilters;
    std::size_t budget = 64;
    std::size_t haystack_len = 512;
    std::vector<double> depth_fractions = {0.1, 0.25, 0.5, 0.75, 0.9};
    std::size_t needle_span = 8;
    std::set<std::size_t> protected_layers = {0, 1};
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_head = 16;
    double kappa = 2.0;
    double noise = 0.05;
    // Haystack structure: n_salient scattered keys carry a moderate positive
    // projection (the "facts" worth keeping); the rest sit far below. Filler
    // keys then receive negligible attention at every position, so the
    // average-attention ranking and the projection ranking agree on which
    // set to keep even though they order keys within a group differently.
    std::size_t n_salient = 56;
    double salient_offset = 1.5;
    double filler_offset_min = -6.5;
    double filler_offset_max = -5.5;
    double needle_offset = 6.0;
    std::uint64_t seed = 0;
};

struct NeedleRun {
    std::string policy;
    std::size_t budget = 0;
    std::size_t haystack_len = 0;
    double depth = 0.0;
    std::size_t needle_span = 0;
    std::uint64_t seed = 0;
    // averaged over the compressed (layer, head) pairs; protected layers
    // retain everything and are excluded from the averages
    double retained_fraction = 0.0;
    double oracle_overlap = 0.0;
};

// Synthetic retrieval protocol on a planted-attention source: the needle
// span gets large positive key projections, so its true average attention
// dominates; retention measures how much of it each policy keeps.
std::vector<NeedleRun> needle_retention(const NeedleConfig& config);

nlohmann::json to_json(const GenerationRun& run);
nlohmann::json to_json(const std::vector<NeedleRun>& runs);

// CLI entry point; subcommands: calibrate, correlate, generate, needle,
// similarity, validate, sweep. Returns 0 on success, 1 on validation
// failure, 2 on usage error.
int run_cli(int argc, const char* const* argv);

}  // namespace kvf
