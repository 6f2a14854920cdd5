#include "kvf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace kvf {

std::vector<double> attention_stats(const Matrix& attn_map) {
    if (attn_map.empty()) throw InvalidArgument("attention_stats: empty map");
    if (attn_map.rows != attn_map.cols)
        throw InvalidArgument("attention_stats: map must be square");
    const std::size_t L = attn_map.rows;
    std::vector<double> s(L, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
        double sum = 0.0;
        for (std::size_t i = t; i < L; ++i) sum += attn_map.at(i, t);
        s[t] = sum / static_cast<double>(L - t);
    }
    return s;
}

AttentionStats compute_attention_stats(const std::vector<LayerActivations>& layers) {
    AttentionStats stats;
    for (const LayerActivations& layer : layers) {
        if (layer.attn.empty())
            throw InvalidArgument("compute_attention_stats: maps were not captured");
        std::vector<std::vector<double>> per_head;
        for (const Matrix& m : layer.attn) per_head.push_back(attention_stats(m));
        stats.s.push_back(std::move(per_head));
    }
    return stats;
}

PlantedSource make_planted_source(std::size_t n_heads, std::size_t d_head,
                                  std::size_t seq_len, double kappa, double noise,
                                  double offset_min, double offset_max,
                                  std::uint64_t seed) {
    if (n_heads == 0 || d_head == 0 || seq_len == 0)
        throw InvalidArgument("make_planted_source: sizes must be positive");
    PlantedSource src;
    src.d_head = d_head;
    src.seq_len = seq_len;
    src.kappa = kappa;
    src.noise = noise;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> off(offset_min, offset_max);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    for (std::size_t h = 0; h < n_heads; ++h) {
        PlantedHead head;
        std::vector<double> dir(d_head);
        for (double& x : dir) x = gauss(rng);
        head.u = UnitVector::normalized(std::move(dir));
        head.kappa = kappa;
        head.offsets.resize(seq_len);
        for (double& o : head.offsets) o = off(rng);

        const PlantedSample sample = planted_qk_sample(
            d_head, seq_len, seq_len, head.u, kappa, head.offsets, noise,
            seed ^ (0x51ABULL + h * 7919));
        head.q = sample.q;
        head.k = sample.k;

        head.attn = Matrix(seq_len, seq_len);
        std::vector<double> logits;
        for (std::size_t t = 0; t < seq_len; ++t) {
            logits.assign(t + 1, 0.0);
            for (std::size_t s = 0; s <= t; ++s)
                logits[s] = dot(head.q.row(t), head.k.row(s)) * scale;
            const std::vector<double> w = softmax(logits);
            for (std::size_t s = 0; s <= t; ++s) head.attn.at(t, s) = w[s];
        }
        head.s = attention_stats(head.attn);
        src.heads.push_back(std::move(head));
    }
    return src;
}

namespace {

// filter calibrated from a single head's queries: dominant direction with
// the sign fixed so the mean query projection is positive
UnitVector head_filter(const Matrix& q, std::uint64_t seed) {
    TopDirectionResult top = top_singular_direction(q, 1e-6, 10000, seed);
    double mean = 0.0;
    for (std::size_t i = 0; i < q.rows; ++i) mean += dot(q.row(i), top.direction.data);
    if (mean < 0.0)
        for (double& x : top.direction.data) x = -x;
    return top.direction;
}

void finalize_report(CorrelationReport& report) {
    for (const std::string& p : report.policies) {
        std::vector<double> valid;
        std::size_t degenerate = 0;
        for (const HeadCorrelation& h : report.per_head[p]) {
            if (h.degenerate)
                ++degenerate;
            else
                valid.push_back(h.rho);
        }
        report.degenerate_count[p] = degenerate;
        if (!valid.empty()) {
            double sum = 0.0;
            for (double v : valid) sum += v;
            report.mean_rho[p] = sum / static_cast<double>(valid.size());
            std::sort(valid.begin(), valid.end());
            const std::size_t n = valid.size();
            report.median_rho[p] =
                n % 2 ? valid[n / 2] : 0.5 * (valid[n / 2 - 1] + valid[n / 2]);
        }
    }
}

void add_head_rho(CorrelationReport& report, const std::string& policy,
                  std::size_t layer, std::size_t head,
                  const std::vector<double>& scores, const std::vector<double>& s) {
    HeadCorrelation hc;
    hc.layer = layer;
    hc.head = head;
    try {
        hc.rho = spearman_rho(scores, s);
    } catch (const DegenerateInput&) {
        hc.degenerate = true;
    }
    report.per_head[policy].push_back(hc);
}

std::vector<double> policy_scores_for_keys(PolicyKind policy, const Matrix& keys,
                                           const UnitVector& filter,
                                           const std::vector<double>& s,
                                           std::size_t layer, std::size_t head,
                                           std::uint64_t seed) {
    const std::size_t L = keys.rows;
    switch (policy) {
        case PolicyKind::QFilters:
            return score_qfilters(keys, filter);
        case PolicyKind::KNorm:
            return score_knorm(keys);
        case PolicyKind::StreamingLLM: {
            std::vector<std::size_t> positions(L);
            for (std::size_t i = 0; i < L; ++i) positions[i] = i;
            return score_streaming(positions, L - 1, 1, std::max<std::size_t>(L / 8, 1));
        }
        case PolicyKind::Random:
            return score_random(L, seed, layer, head, 0);
        case PolicyKind::Oracle:
            return s;
    }
    throw InvalidArgument("unknown policy");
}

}  // namespace

CorrelationReport correlation_report_planted(const PlantedSource& source,
                                             const std::vector<PolicyKind>& policies,
                                             std::uint64_t seed) {
    CorrelationReport report;
    for (PolicyKind p : policies) report.policies.push_back(to_string(p));
    for (std::size_t h = 0; h < source.heads.size(); ++h) {
        const PlantedHead& head = source.heads[h];
        const UnitVector filter = head_filter(head.q, seed ^ (h * 131 + 5));
        for (std::size_t pi = 0; pi < policies.size(); ++pi) {
            const std::vector<double> scores = policy_scores_for_keys(
                policies[pi], head.k, filter, head.s, 0, h, seed);
            add_head_rho(report, report.policies[pi], 0, h, scores, head.s);
        }
    }
    finalize_report(report);
    return report;
}

CorrelationReport correlation_report_model(const ModelWeights& weights,
                                           const std::vector<std::uint32_t>& tokens,
                                           const std::vector<PolicyKind>& policies,
                                           const QFilterSet* filters,
                                           std::uint64_t seed) {
    CaptureOptions capture;
    capture.qkv = true;
    capture.maps = true;
    const ForwardResult fwd = model_forward(tokens, weights, capture);
    const ModelConfig& cfg = weights.config;
    const std::size_t group = cfg.group_size();

    CorrelationReport report;
    for (PolicyKind p : policies) report.policies.push_back(to_string(p));

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t g = h / group;
            const Matrix& keys = fwd.layers[l].k[g];
            const std::vector<double> s = attention_stats(fwd.layers[l].attn[h]);
            const UnitVector filter =
                filters ? filter_direction(filters->heads[l][g])
                        : head_filter(fwd.layers[l].q[h], seed ^ (l * 977 + h));
            for (std::size_t pi = 0; pi < policies.size(); ++pi) {
                const std::vector<double> scores = policy_scores_for_keys(
                    policies[pi], keys, filter, s, l, h, seed);
                add_head_rho(report, report.policies[pi], l, h, scores, s);
            }
        }
    }
    finalize_report(report);
    return report;
}

SpectrumRow spectrum_report(const Matrix& qmatrix, std::uint64_t seed) {
    const std::size_t d = qmatrix.cols;
    if (qmatrix.rows < d)
        throw InvalidArgument("spectrum_report: need at least d_head rows");

    // column means of Q, for the |mean projection| readout
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < qmatrix.rows; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += qmatrix.at(i, j);
    for (double& m : mean) m /= static_cast<double>(qmatrix.rows);

    Matrix g = gram(qmatrix);
    double top_lambda = 0.0;

    SpectrumRow row;
    std::vector<std::vector<double>> basis;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    for (std::size_t m = 0; m < d; ++m) {
        std::vector<double> v(d);
        for (double& x : v) x = gauss(rng);
        // keep the iterate orthogonal to the directions already found
        auto project_out = [&](std::vector<double>& w) {
            for (const auto& b : basis) {
                const double p = dot(w, b);
                for (std::size_t j = 0; j < d; ++j) w[j] -= p * b[j];
            }
        };
        project_out(v);
        double n = norm2(v);
        if (n == 0.0) {
            row.abs_means.push_back(0.0);
            row.rank_deficient = true;
            continue;
        }
        for (double& x : v) x /= n;

        double lambda = 0.0;
        for (int it = 0; it < 2000; ++it) {
            std::vector<double> gv = mat_vec(g, v);
            project_out(gv);
            lambda = dot(v, gv);
            double resid = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double r = gv[j] - lambda * v[j];
                resid += r * r;
            }
            if (std::sqrt(resid) <= 1e-9 * std::max(std::abs(lambda), top_lambda))
                break;
            const double gn = norm2(gv);
            if (gn == 0.0) break;
            for (std::size_t j = 0; j < d; ++j) v[j] = gv[j] / gn;
        }
        if (m == 0) top_lambda = lambda;
        if (lambda <= 1e-12 * std::max(top_lambda, 1.0)) {
            row.abs_means.push_back(0.0);
            row.rank_deficient = true;
            basis.push_back(v);
            continue;
        }
        row.abs_means.push_back(std::abs(dot(mean, v)));
        // deflate
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) g.at(i, j) -= lambda * v[i] * v[j];
        basis.push_back(std::move(v));
    }
    return row;
}

TheoremCheckResult theorem_check(const Matrix& q, const Matrix& k,
                                 const UnitVector& filter, double kappa) {
    if (k.rows < 2) throw InvalidArgument("theorem_check: need at least 2 keys");
    if (q.cols != k.cols || q.cols != filter.dim())
        throw InvalidArgument("theorem_check: dimension mismatch");

    std::vector<double> q_mean(q.cols, 0.0);
    for (std::size_t i = 0; i < q.rows; ++i)
        for (std::size_t j = 0; j < q.cols; ++j) q_mean[j] += q.at(i, j);
    for (double& v : q_mean) v /= static_cast<double>(q.rows);

    std::vector<double> empirical(k.rows), predicted(k.rows);
    TheoremCheckResult res;
    for (std::size_t j = 0; j < k.rows; ++j) {
        empirical[j] = dot(q_mean, k.row(j));
        predicted[j] = kappa * dot(k.row(j), filter.data);
        res.max_abs_err = std::max(res.max_abs_err, std::abs(empirical[j] - predicted[j]));
    }
    res.pearson = pearson_correlation(empirical, predicted);
    return res;
}

SimilarityMatrix filter_similarity(const std::vector<QFilterSet>& sets,
                                   const std::vector<std::string>& labels) {
    if (sets.empty()) throw InvalidArgument("filter_similarity: no sets");
    for (const QFilterSet& s : sets) {
        if (s.n_layers != sets[0].n_layers || s.n_kv_heads != sets[0].n_kv_heads ||
            s.d_head != sets[0].d_head)
            throw InvalidArgument("filter_similarity: shape mismatch between sets");
    }
    SimilarityMatrix sim;
    for (std::size_t i = 0; i < sets.size(); ++i)
        sim.labels.push_back(i < labels.size() ? labels[i]
                                               : "set" + std::to_string(i));
    sim.values = Matrix(sets.size(), sets.size());
    for (std::size_t a = 0; a < sets.size(); ++a) {
        for (std::size_t b = a; b < sets.size(); ++b) {
            double sum = 0.0;
            std::size_t count = 0;
            for (std::uint32_t l = 0; l < sets[a].n_layers; ++l)
                for (std::uint32_t g = 0; g < sets[a].n_kv_heads; ++g) {
                    sum += std::abs(cosine_similarity(sets[a].heads[l][g].filter,
                                                      sets[b].heads[l][g].filter));
                    ++count;
                }
            sim.values.at(a, b) = sim.values.at(b, a) = sum / static_cast<double>(count);
        }
    }
    return sim;
}

nlohmann::json to_json(const CorrelationReport& report) {
    nlohmann::json j;
    j["policies"] = report.policies;
    for (const std::string& p : report.policies) {
        nlohmann::json heads = nlohmann::json::array();
        for (const HeadCorrelation& h : report.per_head.at(p)) {
            heads.push_back({{"layer", h.layer},
                             {"head", h.head},
                             {"rho", h.degenerate ? nlohmann::json() : nlohmann::json(h.rho)},
                             {"degenerate", h.degenerate}});
        }
        j["per_head"][p] = heads;
        if (report.mean_rho.count(p)) j["mean_rho"][p] = report.mean_rho.at(p);
        if (report.median_rho.count(p)) j["median_rho"][p] = report.median_rho.at(p);
        j["degenerate_count"][p] = report.degenerate_count.at(p);
    }
    return j;
}

nlohmann::json to_json(const SimilarityMatrix& sim) {
    nlohmann::json j;
    j["labels"] = sim.labels;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < sim.values.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < sim.values.cols; ++k) row.push_back(sim.values.at(i, k));
        rows.push_back(row);
    }
    j["values"] = rows;
    return j;
}

std::string to_csv(const CorrelationReport& report) {
    std::ostringstream os;
    os << "layer,head,metric,value\n";
    for (const std::string& p : report.policies) {
        for (const HeadCorrelation& h : report.per_head.at(p)) {
            os << h.layer << "," << h.head << ",rho_" << p << ",";
            if (h.degenerate)
                os << "nan";
            else
                os << h.rho;
            os << "\n";
        }
    }
    return os.str();
}

std::string to_csv(const SimilarityMatrix& sim) {
    std::ostringstream os;
    os << "set_a,set_b,mean_abs_cosine\n";
    for (std::size_t a = 0; a < sim.values.rows; ++a)
        for (std::size_t b = 0; b < sim.values.cols; ++b)
            os << sim.labels[a] << "," << sim.labels[b] << "," << sim.values.at(a, b)
               << "\n";
    return os.str();
}

}  // namespace kvf
