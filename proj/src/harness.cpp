#include "kvf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace kvf {

namespace {

std::vector<std::size_t> cache_positions(const HeadCache& head) {
    std::vector<std::size_t> positions(head.entries.size());
    for (std::size_t i = 0; i < head.entries.size(); ++i)
        positions[i] = head.entries[i].position;
    return positions;
}

}  // namespace

GenerationRun constrained_generate(const ModelWeights& weights,
                                   const QFilterSet* filters,
                                   const GenerationConfig& config,
                                   const std::vector<std::uint32_t>& stream) {
    const ModelConfig& cfg = weights.config;
    if (stream.size() < 2)
        throw InvalidArgument("constrained_generate: stream too short");
    if (config.policy == PolicyKind::QFilters) {
        if (!filters)
            throw InvalidArgument("constrained_generate: QFilters policy needs filters");
        check_filter_compatibility(*filters, cfg);
    }
    if (config.policy == PolicyKind::StreamingLLM && config.budget > 0 &&
        config.budget < config.sink_count + 1)
        throw InvalidArgument(
            "constrained_generate: budget must be >= sink_count + 1 for streaming");

    const bool capture = config.policy == PolicyKind::Oracle || config.force_capture;
    DecodeState state = make_decode_state(weights, capture);
    const std::size_t group = cfg.group_size();

    GenerationRun run;
    run.policy = to_string(config.policy);
    run.budget = config.budget;
    run.seq_len = stream.size();
    run.seed = config.seed;

    const auto t_begin = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < stream.size(); ++t) {
        const std::vector<double> logits = decode_step(stream[t], state);
        if (t + 1 < stream.size()) {
            const std::vector<double> probs = softmax(logits);
            run.nll.push_back(-std::log(probs[stream[t + 1]]));
        }

        if (config.budget > 0) {
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                if (config.protected_layers.count(l)) continue;
                for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
                    HeadCache& head = state.cache.head(l, g);
                    if (head.entries.size() <= config.budget) continue;
                    std::vector<double> scores;
                    switch (config.policy) {
                        case PolicyKind::QFilters:
                            scores = score_qfilters(head, filters->heads[l][g].filter);
                            break;
                        case PolicyKind::KNorm:
                            scores = score_knorm(head);
                            break;
                        case PolicyKind::StreamingLLM:
                            scores = score_streaming(cache_positions(head), t,
                                                     config.sink_count,
                                                     config.window_size);
                            break;
                        case PolicyKind::Random:
                            scores = score_random(head.entries.size(), config.seed, l,
                                                  g, t);
                            break;
                        case PolicyKind::Oracle:
                            scores = state.oracle.scores(l, g * group, (g + 1) * group,
                                                         cache_positions(head));
                            break;
                    }
                    evict_to_budget(head, scores, config.budget);
                }
            }
            // budget compliance, checked at every step
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                if (config.protected_layers.count(l)) continue;
                for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
                    const std::size_t n = state.cache.head(l, g).entries.size();
                    if (n > config.budget)
                        throw std::logic_error(
                            "constrained_generate: budget exceeded after eviction");
                    run.peak_cache = std::max(run.peak_cache, n);
                }
            }
        } else {
            run.peak_cache = std::max(run.peak_cache, state.cache.max_head_size());
        }
    }
    const auto t_end = std::chrono::steady_clock::now();
    run.wall_seconds = std::chrono::duration<double>(t_end - t_begin).count();
    run.mean_step_seconds = run.wall_seconds / static_cast<double>(stream.size());

    const double mean_nll =
        std::accumulate(run.nll.begin(), run.nll.end(), 0.0) /
        static_cast<double>(run.nll.size());
    run.perplexity = std::exp(mean_nll);
    return run;
}

std::vector<NeedleRun> needle_retention(const NeedleConfig& config) {
    if (config.needle_span == 0)
        throw InvalidArgument("needle_retention: needle span must be >= 1");
    if (config.budget > 0 && config.needle_span > config.budget)
        throw InvalidArgument("needle_retention: needle span exceeds budget");
    for (double d : config.depth_fractions)
        if (!(d > 0.0 && d < 1.0))
            throw InvalidArgument("needle_retention: depth fractions must be in (0, 1)");

    const std::size_t L = config.haystack_len;
    const std::size_t budget =
        config.budget == 0 || config.budget > L ? L : config.budget;
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_head));
    if (config.n_salient + config.needle_span > L)
        throw InvalidArgument(
            "needle_retention: salient keys plus needle exceed haystack length");

    std::vector<NeedleRun> runs;
    for (double depth : config.depth_fractions) {
        const std::size_t needle_start = static_cast<std::size_t>(
            depth * static_cast<double>(L - config.needle_span));

        double retained_sum = 0.0;
        double overlap_sum = 0.0;
        std::size_t compressed_heads = 0;

        std::mt19937_64 rng(config.seed ^
                            static_cast<std::uint64_t>(depth * 1e6));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> off(config.filler_offset_min,
                                                   config.filler_offset_max);

        for (std::size_t l = 0; l < config.n_layers; ++l) {
            const bool is_protected = config.protected_layers.count(l) > 0;
            for (std::size_t h = 0; h < config.n_heads; ++h) {
                std::vector<double> dir(config.d_head);
                for (double& x : dir) x = gauss(rng);
                const UnitVector u = UnitVector::normalized(std::move(dir));

                std::vector<double> offsets(L);
                for (std::size_t t = 0; t < L; ++t) offsets[t] = off(rng);

                // scatter the salient keys over the non-needle positions
                std::vector<std::size_t> slots;
                slots.reserve(L - config.needle_span);
                for (std::size_t t = 0; t < L; ++t)
                    if (t < needle_start ||
                        t >= needle_start + config.needle_span)
                        slots.push_back(t);
                for (std::size_t i = 0; i < config.n_salient; ++i) {
                    std::uniform_int_distribution<std::size_t> pick(
                        i, slots.size() - 1);
                    std::swap(slots[i], slots[pick(rng)]);
                    offsets[slots[i]] = config.salient_offset;
                }

                for (std::size_t t = needle_start;
                     t < needle_start + config.needle_span; ++t)
                    offsets[t] = config.needle_offset;

                const PlantedSample sample = planted_qk_sample(
                    config.d_head, L, L, u, config.kappa, offsets, config.noise,
                    config.seed ^ (l * 104729 + h * 1299709 + 17));

                // calibrated filter for this head (QFilters path)
                TopDirectionResult top = top_singular_direction(
                    sample.q, 1e-6, 10000, config.seed ^ (l * 53 + h * 7 + 3));
                std::vector<double> filter = top.direction.data;
                {
                    double mean = 0.0;
                    for (std::size_t i = 0; i < L; ++i)
                        mean += dot(sample.q.row(i), filter);
                    if (mean < 0.0)
                        for (double& x : filter) x = -x;
                }

                // reference importance: average attention received in the
                // uncompressed run, S_t = mean over rows i >= t
                std::vector<double> s_full(L, 0.0);
                {
                    std::vector<double> full_logits;
                    for (std::size_t i = 0; i < L; ++i) {
                        full_logits.resize(i + 1);
                        for (std::size_t j = 0; j <= i; ++j)
                            full_logits[j] =
                                dot(sample.q.row(i), sample.k.row(j)) * scale;
                        const std::vector<double> attn = softmax(full_logits);
                        for (std::size_t j = 0; j <= i; ++j) s_full[j] += attn[j];
                    }
                    for (std::size_t t = 0; t < L; ++t)
                        s_full[t] /= static_cast<double>(L - t);
                }

                // per-position attention received in the compressed run,
                // accumulated row by row so the oracle policy only ever sees
                // attention that was actually computed
                std::vector<double> col_sum(L, 0.0);
                std::vector<std::size_t> col_count(L, 0);

                HeadCache cache;
                std::vector<double> row_logits;
                for (std::size_t t = 0; t < L; ++t) {
                    cache.entries.push_back(
                        {t,
                         {sample.k.row(t).begin(), sample.k.row(t).end()},
                         std::vector<double>(config.d_head, 0.0)});

                    // attention row of query t over the surviving entries
                    row_logits.resize(cache.entries.size());
                    for (std::size_t s = 0; s < cache.entries.size(); ++s)
                        row_logits[s] =
                            dot(sample.q.row(t), cache.entries[s].key) * scale;
                    const std::vector<double> attn = softmax(row_logits);
                    for (std::size_t s = 0; s < cache.entries.size(); ++s) {
                        col_sum[cache.entries[s].position] += attn[s];
                        col_count[cache.entries[s].position] += 1;
                    }

                    if (is_protected || cache.entries.size() <= budget) continue;

                    std::vector<double> scores;
                    switch (config.policy) {
                        case PolicyKind::QFilters:
                            scores = score_qfilters(cache, filter);
                            break;
                        case PolicyKind::KNorm:
                            scores = score_knorm(cache);
                            break;
                        case PolicyKind::StreamingLLM:
                            scores = score_streaming(cache_positions(cache), t, 1,
                                                     budget / 2);
                            break;
                        case PolicyKind::Random:
                            scores = score_random(cache.entries.size(), config.seed,
                                                  l, h, t);
                            break;
                        case PolicyKind::Oracle:
                            scores.resize(cache.entries.size());
                            for (std::size_t s = 0; s < cache.entries.size(); ++s) {
                                const std::size_t p = cache.entries[s].position;
                                scores[s] = col_sum[p] /
                                            static_cast<double>(col_count[p]);
                            }
                            break;
                    }
                    evict_to_budget(cache, scores, budget);
                }

                if (is_protected) continue;
                ++compressed_heads;

                std::size_t needle_kept = 0;
                std::vector<bool> kept(L, false);
                for (const KvEntry& e : cache.entries) kept[e.position] = true;
                for (std::size_t t = needle_start;
                     t < needle_start + config.needle_span; ++t)
                    if (kept[t]) ++needle_kept;
                retained_sum += static_cast<double>(needle_kept) /
                                static_cast<double>(config.needle_span);

                // oracle top-budget set from the uncompressed attention means
                std::vector<std::size_t> order(L);
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::sort(order.begin(), order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (s_full[a] != s_full[b]) return s_full[a] > s_full[b];
                              return a > b;
                          });
                std::size_t shared = 0;
                for (std::size_t r = 0; r < budget; ++r)
                    if (kept[order[r]]) ++shared;
                overlap_sum += static_cast<double>(shared) /
                               static_cast<double>(budget);
            }
        }

        NeedleRun run;
        run.policy = to_string(config.policy);
        run.budget = budget;
        run.haystack_len = L;
        run.depth = depth;
        run.needle_span = config.needle_span;
        run.seed = config.seed;
        if (compressed_heads > 0) {
            run.retained_fraction =
                retained_sum / static_cast<double>(compressed_heads);
            run.oracle_overlap = overlap_sum / static_cast<double>(compressed_heads);
        } else {
            run.retained_fraction = 1.0;
            run.oracle_overlap = 1.0;
        }
        runs.push_back(run);
    }
    return runs;
}

nlohmann::json to_json(const GenerationRun& run) {
    return {{"policy", run.policy},
            {"budget", run.budget},
            {"seq_len", run.seq_len},
            {"seed", run.seed},
            {"perplexity", run.perplexity},
            {"peak_cache", run.peak_cache},
            {"nll", run.nll},
            {"wall_seconds", run.wall_seconds},
            {"mean_step_seconds", run.mean_step_seconds}};
}

nlohmann::json to_json(const std::vector<NeedleRun>& runs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const NeedleRun& r : runs) {
        arr.push_back({{"policy", r.policy},
                       {"budget", r.budget},
                       {"haystack_len", r.haystack_len},
                       {"depth", r.depth},
                       {"needle_span", r.needle_span},
                       {"seed", r.seed},
                       {"retained_fraction", r.retained_fraction},
                       {"oracle_overlap", r.oracle_overlap}});
    }
    return arr;
}

}  // namespace kvf
