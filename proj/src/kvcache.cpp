#include "kvf/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace kvf {

std::string to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::QFilters: return "qfilters";
        case PolicyKind::KNorm: return "knorm";
        case PolicyKind::StreamingLLM: return "streaming";
        case PolicyKind::Random: return "random";
        case PolicyKind::Oracle: return "oracle";
    }
    return "unknown";
}

std::optional<PolicyKind> parse_policy(const std::string& name) {
    if (name == "qfilters") return PolicyKind::QFilters;
    if (name == "knorm") return PolicyKind::KNorm;
    if (name == "streaming") return PolicyKind::StreamingLLM;
    if (name == "random") return PolicyKind::Random;
    if (name == "oracle") return PolicyKind::Oracle;
    return std::nullopt;
}

KvCache::KvCache(std::size_t layers, std::size_t kv_heads, std::size_t dim)
    : n_layers(layers), n_kv_heads(kv_heads), d_head(dim),
      heads(layers, std::vector<HeadCache>(kv_heads)) {}

void KvCache::append(std::size_t layer, std::size_t kv_head, std::size_t position,
                     std::vector<double> key, std::vector<double> value) {
    if (layer >= n_layers || kv_head >= n_kv_heads)
        throw InvalidArgument("KvCache::append: layer/head out of range");
    if (key.size() != d_head || value.size() != d_head)
        throw InvalidArgument("KvCache::append: key/value dimension mismatch");
    auto& entries = heads[layer][kv_head].entries;
    if (!entries.empty() && entries.back().position >= position)
        throw InvalidArgument("KvCache::append: positions must be strictly increasing");
    entries.push_back({position, std::move(key), std::move(value)});
}

std::size_t KvCache::max_head_size() const {
    std::size_t mx = 0;
    for (const auto& layer : heads)
        for (const auto& h : layer) mx = std::max(mx, h.entries.size());
    return mx;
}

std::vector<double> score_qfilters(const Matrix& keys, const UnitVector& filter) {
    if (keys.cols != filter.dim())
        throw InvalidArgument("score_qfilters: filter dimension mismatch");
    std::vector<double> scores(keys.rows);
    for (std::size_t t = 0; t < keys.rows; ++t)
        scores[t] = dot(keys.row(t), filter.data);
    return scores;
}

std::vector<double> score_qfilters(const HeadCache& cache,
                                   std::span<const double> filter) {
    std::vector<double> scores(cache.entries.size());
    for (std::size_t t = 0; t < cache.entries.size(); ++t) {
        const auto& k = cache.entries[t].key;
        if (k.size() != filter.size())
            throw InvalidArgument("score_qfilters: filter dimension mismatch");
        scores[t] = dot(k, filter);
    }
    return scores;
}

std::vector<double> score_knorm(const Matrix& keys) {
    std::vector<double> scores(keys.rows);
    for (std::size_t t = 0; t < keys.rows; ++t) scores[t] = -norm2(keys.row(t));
    return scores;
}

std::vector<double> score_knorm(const HeadCache& cache) {
    std::vector<double> scores(cache.entries.size());
    for (std::size_t t = 0; t < cache.entries.size(); ++t)
        scores[t] = -norm2(cache.entries[t].key);
    return scores;
}

std::vector<double> score_streaming(const std::vector<std::size_t>& positions,
                                    std::size_t current_pos, std::size_t sink_count,
                                    std::size_t window_size) {
    constexpr double kKeep = std::numeric_limits<double>::infinity();
    constexpr double kEvict = -std::numeric_limits<double>::infinity();
    std::vector<double> scores(positions.size(), kEvict);
    const std::size_t window_start =
        window_size > current_pos ? 0 : current_pos - window_size;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (i < sink_count || positions[i] > window_start) scores[i] = kKeep;
    }
    return scores;
}

std::vector<double> score_random(std::size_t n, std::uint64_t seed,
                                 std::size_t layer, std::size_t head,
                                 std::size_t step) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(layer),
                      static_cast<std::uint32_t>(head),
                      static_cast<std::uint32_t>(step)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> scores(n);
    for (double& s : scores) s = unif(rng);
    return scores;
}

std::vector<double> score_oracle(const Matrix& attn_map) {
    if (attn_map.empty() || attn_map.rows != attn_map.cols)
        throw InvalidArgument("score_oracle: missing or non-square attention map");
    const std::size_t L = attn_map.rows;
    std::vector<double> scores(L, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
        double sum = 0.0;
        for (std::size_t i = t; i < L; ++i) sum += attn_map.at(i, t);
        scores[t] = sum / static_cast<double>(L - t);
    }
    return scores;
}

OracleAccumulator::OracleAccumulator(std::size_t n_layers, std::size_t n_heads)
    : received(n_layers, std::vector<std::map<std::size_t, std::pair<double, std::size_t>>>(
                             n_heads)) {}

void OracleAccumulator::add_row(std::size_t layer, std::size_t head,
                                const std::vector<std::size_t>& positions,
                                const std::vector<double>& weights) {
    auto& m = received[layer][head];
    for (std::size_t i = 0; i < positions.size(); ++i) {
        auto& slot = m[positions[i]];
        slot.first += weights[i];
        slot.second += 1;
    }
}

std::vector<double> OracleAccumulator::scores(
    std::size_t layer, std::size_t group_begin, std::size_t group_end,
    const std::vector<std::size_t>& positions) const {
    std::vector<double> out(positions.size(), 0.0);
    for (std::size_t h = group_begin; h < group_end; ++h) {
        const auto& m = received[layer][h];
        for (std::size_t i = 0; i < positions.size(); ++i) {
            const auto it = m.find(positions[i]);
            if (it != m.end())
                out[i] += it->second.first / static_cast<double>(it->second.second);
        }
    }
    const double g = static_cast<double>(group_end - group_begin);
    for (double& s : out) s /= g;
    return out;
}

EvictionResult evict_to_budget(HeadCache& cache, const std::vector<double>& scores,
                               std::size_t budget,
                               const std::set<std::size_t>& protected_positions) {
    if (scores.size() != cache.entries.size())
        throw InvalidArgument("evict_to_budget: scores/entries length mismatch");

    EvictionResult result;
    std::vector<std::size_t> protected_idx;
    std::vector<std::size_t> evictable_idx;
    for (std::size_t i = 0; i < cache.entries.size(); ++i) {
        if (protected_positions.count(cache.entries[i].position))
            protected_idx.push_back(i);
        else
            evictable_idx.push_back(i);
    }

    std::size_t free_slots = 0;
    if (protected_idx.size() >= budget) {
        result.budget_override = protected_idx.size() > budget;
    } else {
        free_slots = budget - protected_idx.size();
    }

    // keep the highest scores; on equal scores keep the larger position
    std::sort(evictable_idx.begin(), evictable_idx.end(),
              [&](std::size_t a, std::size_t b) {
                  if (scores[a] != scores[b]) return scores[a] > scores[b];
                  return cache.entries[a].position > cache.entries[b].position;
              });

    std::vector<bool> keep(cache.entries.size(), false);
    for (std::size_t i : protected_idx) keep[i] = true;
    for (std::size_t r = 0; r < evictable_idx.size() && r < free_slots; ++r)
        keep[evictable_idx[r]] = true;

    std::vector<KvEntry> kept;
    kept.reserve(budget);
    for (std::size_t i = 0; i < cache.entries.size(); ++i) {
        if (keep[i])
            kept.push_back(std::move(cache.entries[i]));
        else
            result.evicted_positions.push_back(cache.entries[i].position);
    }
    cache.entries = std::move(kept);
    return result;
}

}  // namespace kvf
