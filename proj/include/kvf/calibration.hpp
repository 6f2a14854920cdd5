#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvf/linalg.hpp"
#include "kvf/model.hpp"

namespace kvf {

struct CalibrationConfig {
    std::size_t n_documents = 20;
    std::size_t doc_length = 2048;
    std::size_t samples_per_head = 3000;
    std::uint64_t seed = 0;

    void validate() const;
};

// One filter per (layer, kv head). The filter is the sign-fixed dominant
// right direction of the head's gathered queries, quantized to f32 so the
// on-disk representation round-trips exactly; its norm stays within 1e-6
// of 1. kappa is the (positive) mean query projection onto the filter.
// epsilon records the sign of the keys' mean projection when key samples
// were available, 0 otherwise.
struct QFilterEntry {
    std::vector<double> filter;
    double kappa = 0.0;
    std::int8_t epsilon = 0;
};

struct QFilterSet {
    std::uint32_t n_layers = 0;
    std::uint32_t n_kv_heads = 0;
    std::uint32_t d_head = 0;
    std::uint64_t calibration_seed = 0;
    std::array<std::uint8_t, 32> model_fingerprint{};
    std::vector<std::vector<QFilterEntry>> heads;  // [layer][kv_head]
    std::vector<std::string> warnings;             // degenerate-spectrum notes; not persisted

    void validate() const;
};

// Renormalized copy of an entry's filter for callers that need a UnitVector.
UnitVector filter_direction(const QFilterEntry& entry);

// Markov-chain token generator used as a stand-in calibration corpus.
struct MarkovChain {
    std::size_t vocab_size = 0;
    std::vector<std::vector<std::uint32_t>> successors;  // per token
    std::vector<std::vector<double>> probs;              // rows sum to 1 +- 1e-12

    static MarkovChain build(std::size_t vocab_size, std::uint64_t seed);
    std::vector<std::uint32_t> sample(std::size_t length, std::uint64_t seed) const;
};

std::vector<std::vector<std::uint32_t>> synth_corpus(std::size_t vocab_size,
                                                     std::size_t n_docs,
                                                     std::size_t doc_length,
                                                     std::uint64_t seed);

// Per-(layer, query-head) matrices of samples_per_head query rows, sampled
// uniformly without replacement (seeded) from all positions of the first
// n_documents streams. Throws InsufficientData when the corpus is too small,
// naming required vs available counts.
std::vector<std::vector<Matrix>> gather_queries(
    const ModelWeights& weights,
    const std::vector<std::vector<std::uint32_t>>& corpus,
    const CalibrationConfig& config);

// Extracts the dominant right direction per query head, fixes its sign so
// the mean query projection is positive, averages sign-fixed filters across
// each GQA group (then renormalizes), and estimates kappa from the pooled
// group queries. key_samples, when given, is indexed [layer][kv_head] and
// only feeds the epsilon estimate.
QFilterSet compute_qfilters(const std::vector<std::vector<Matrix>>& qmatrices,
                            const std::vector<std::vector<Matrix>>* key_samples,
                            std::uint32_t n_kv_heads, std::uint64_t seed);

// Filter file: magic "QFLT", u32 version = 1, u32 n_layers, u32 n_kv_heads,
// u32 d_head, u64 calibration seed, 32-byte model fingerprint, then per
// layer, per kv head: f32[d_head] filter, f32 kappa, i8 epsilon.
void save_qfilters(const QFilterSet& set, const std::string& path);
QFilterSet load_qfilters(const std::string& path);

// SHA-256 of a file's bytes; the model fingerprint stored in filter files.
std::array<std::uint8_t, 32> file_fingerprint(const std::string& path);

// Throws FilterModelMismatch when the set does not fit the model's
// dimensions, or when expected_fingerprint is given and differs.
void check_filter_compatibility(
    const QFilterSet& set, const ModelConfig& config,
    const std::optional<std::array<std::uint8_t, 32>>& expected_fingerprint =
        std::nullopt);

}  // namespace kvf
