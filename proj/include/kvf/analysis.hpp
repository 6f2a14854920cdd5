#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kvf/calibration.hpp"
#include "kvf/kvcache.hpp"
#include "kvf/linalg.hpp"
#include "kvf/model.hpp"

#include "json.hpp"

namespace kvf {

// Average attention received by each position of one causal map:
// S_t = mean of column t over rows i >= t. Entries lie in [0, 1].
std::vector<double> attention_stats(const Matrix& attn_map);

struct AttentionStats {
    // [layer][head] -> S vector of length L
    std::vector<std::vector<std::vector<double>>> s;
};

AttentionStats compute_attention_stats(const std::vector<LayerActivations>& layers);

// Synthetic multi-head source with known drift directions, the ground truth
// for correlation and retention experiments. Each head gets a seeded random
// unit direction, per-position key offsets, and a causal attention map
// derived from the planted Q/K.
struct PlantedHead {
    UnitVector u;
    double kappa = 0.0;
    std::vector<double> offsets;
    Matrix q;     // seq_len x d_head
    Matrix k;     // seq_len x d_head
    Matrix attn;  // causal softmax(Q K^T / sqrt(d))
    std::vector<double> s;
};

struct PlantedSource {
    std::size_t d_head = 0;
    std::size_t seq_len = 0;
    double kappa = 0.0;
    double noise = 0.0;
    std::vector<PlantedHead> heads;
};

PlantedSource make_planted_source(std::size_t n_heads, std::size_t d_head,
                                  std::size_t seq_len, double kappa, double noise,
                                  double offset_min, double offset_max,
                                  std::uint64_t seed);

struct HeadCorrelation {
    std::size_t layer = 0;
    std::size_t head = 0;
    double rho = 0.0;
    bool degenerate = false;
};

struct CorrelationReport {
    std::vector<std::string> policies;
    std::map<std::string, std::vector<HeadCorrelation>> per_head;
    std::map<std::string, double> mean_rho;    // degenerate heads excluded
    std::map<std::string, double> median_rho;
    std::map<std::string, std::size_t> degenerate_count;
};

// Spearman rho of each policy's scores against S per head. The QFilters
// filter is calibrated from each head's own queries; Oracle correlates S
// with itself and acts as the rho = 1 self-check.
CorrelationReport correlation_report_planted(const PlantedSource& source,
                                             const std::vector<PolicyKind>& policies,
                                             std::uint64_t seed);

// Same report over a real model run: a forward pass with map capture
// provides S, policies are scored on the captured keys. Filters may be
// passed in; otherwise they are calibrated from the captured queries.
CorrelationReport correlation_report_model(const ModelWeights& weights,
                                           const std::vector<std::uint32_t>& tokens,
                                           const std::vector<PolicyKind>& policies,
                                           const QFilterSet* filters,
                                           std::uint64_t seed);

struct SpectrumRow {
    std::vector<double> abs_means;  // |mean <Q, v_m>| for m = 1..d_head
    bool rank_deficient = false;
};

// Full right basis via repeated deflation of the Gram matrix; analysis-only,
// the eviction path never needs components beyond v1.
SpectrumRow spectrum_report(const Matrix& qmatrix, std::uint64_t seed = 0);

struct TheoremCheckResult {
    double pearson = 0.0;
    double max_abs_err = 0.0;
};

// Compares empirical mean logits mean_i<Q_i, K_j> against
// kappa * <K_j, filter> across keys.
TheoremCheckResult theorem_check(const Matrix& q, const Matrix& k,
                                 const UnitVector& filter, double kappa);

struct SimilarityMatrix {
    std::vector<std::string> labels;
    Matrix values;  // symmetric, diagonal 1
};

// Entry (a, b) = mean over (layer, head) of |cosine| between filters.
SimilarityMatrix filter_similarity(const std::vector<QFilterSet>& sets,
                                   const std::vector<std::string>& labels = {});

nlohmann::json to_json(const CorrelationReport& report);
nlohmann::json to_json(const SimilarityMatrix& sim);
std::string to_csv(const CorrelationReport& report);
std::string to_csv(const SimilarityMatrix& sim);

}  // namespace kvf
