#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kvf/linalg.hpp"

namespace kvf {

enum class PolicyKind { QFilters, KNorm, StreamingLLM, Random, Oracle };

std::string to_string(PolicyKind kind);
std::optional<PolicyKind> parse_policy(const std::string& name);

struct KvEntry {
    std::size_t position = 0;
    std::vector<double> key;
    std::vector<double> value;
};

struct HeadCache {
    std::vector<KvEntry> entries;  // positions strictly increasing
};

// Per-(layer, kv-head) budgeted store. budget == 0 means unlimited.
struct KvCache {
    std::size_t n_layers = 0;
    std::size_t n_kv_heads = 0;
    std::size_t d_head = 0;
    std::size_t budget = 0;
    std::set<std::size_t> protected_layers;
    std::size_t sink_count = 1;
    std::size_t window_size = 8;

    std::vector<std::vector<HeadCache>> heads;  // [layer][kv_head]

    KvCache() = default;
    KvCache(std::size_t layers, std::size_t kv_heads, std::size_t dim);

    HeadCache& head(std::size_t layer, std::size_t kv_head) {
        return heads[layer][kv_head];
    }
    const HeadCache& head(std::size_t layer, std::size_t kv_head) const {
        return heads[layer][kv_head];
    }

    void append(std::size_t layer, std::size_t kv_head, std::size_t position,
                std::vector<double> key, std::vector<double> value);

    std::size_t max_head_size() const;
};

// Scores for the eviction engine; higher score = keep. None of the scoring
// functions below except score_oracle has access to attention maps.

// score_t = <K_t, filter>
std::vector<double> score_qfilters(const Matrix& keys, const UnitVector& filter);
std::vector<double> score_qfilters(const HeadCache& cache,
                                   std::span<const double> filter);

// score_t = -||K_t||_2 (small norms are kept)
std::vector<double> score_knorm(const Matrix& keys);
std::vector<double> score_knorm(const HeadCache& cache);

// Sink tokens and the trailing window get the max sentinel, everything else
// the min sentinel; ties among evictable entries fall to the oldest-first
// tie-break of the eviction engine.
std::vector<double> score_streaming(const std::vector<std::size_t>& positions,
                                    std::size_t current_pos, std::size_t sink_count,
                                    std::size_t window_size);

// Seeded per (layer, head, step) so runs are reproducible.
std::vector<double> score_random(std::size_t n, std::uint64_t seed,
                                 std::size_t layer, std::size_t head,
                                 std::size_t step);

// Average attention received by each position: S_t = mean of column t over
// rows i >= t. Requires a captured causal attention map.
std::vector<double> score_oracle(const Matrix& attn_map);

// Running per-position attention totals for the oracle policy during
// incremental decoding, where full maps are never materialized at once.
struct OracleAccumulator {
    // [layer][query_head]: position -> (sum of attention received, row count)
    std::vector<std::vector<std::map<std::size_t, std::pair<double, std::size_t>>>>
        received;

    OracleAccumulator() = default;
    OracleAccumulator(std::size_t n_layers, std::size_t n_heads);

    void add_row(std::size_t layer, std::size_t head,
                 const std::vector<std::size_t>& positions,
                 const std::vector<double>& weights);

    // Mean attention received, averaged over the query heads of the group
    // [group_begin, group_end).
    std::vector<double> scores(std::size_t layer, std::size_t group_begin,
                               std::size_t group_end,
                               const std::vector<std::size_t>& positions) const;
};

struct EvictionResult {
    std::vector<std::size_t> evicted_positions;
    // protected entries alone exceeded the budget; all were kept anyway
    bool budget_override = false;
};

// Retains the `budget` highest-scoring entries plus all protected positions.
// Ties evict the smaller position first. budget == 0 keeps protected entries
// only (reported as an override when any exist).
EvictionResult evict_to_budget(HeadCache& cache, const std::vector<double>& scores,
                               std::size_t budget,
                               const std::set<std::size_t>& protected_positions = {});

}  // namespace kvf
