#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvf/kvcache.hpp"
#include "kvf/linalg.hpp"

namespace kvf {

struct ModelConfig {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t n_kv_heads = 0;
    std::uint32_t d_model = 0;
    std::uint32_t d_head = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t max_seq_len = 0;

    // throws InvalidArgument unless d_model == n_heads * d_head,
    // n_kv_heads divides n_heads, and everything is positive
    void validate() const;

    std::uint32_t group_size() const { return n_heads / n_kv_heads; }
    // feed-forward inner width
    std::uint32_t d_ff() const { return 2 * d_model; }
};

struct LayerWeights {
    Matrix w_q;    // d_model x (n_heads * d_head)
    Matrix w_k;    // d_model x (n_kv_heads * d_head)
    Matrix w_v;    // d_model x (n_kv_heads * d_head)
    Matrix w_o;    // d_model x d_model
    Matrix ff_in;  // d_model x d_ff
    Matrix ff_out; // d_ff x d_model
};

// Pre-norm decoder blocks, learned additive position embeddings, no biases
// on the Q/K/V projections and no QK-normalization. Biased projections and
// QK-norm are unsupported by the filter-calibration math.
struct ModelWeights {
    ModelConfig config;
    Matrix token_embedding;  // vocab_size x d_model
    Matrix pos_embedding;    // max_seq_len x d_model
    std::vector<LayerWeights> layers;
    Matrix output_proj;      // d_model x vocab_size

    void check_shapes() const;  // throws InvalidArgument on any mismatch
};

// Captured per-layer activations. q has one L x d_head matrix per query
// head, k/v one per kv head, attn one causal L x L map per query head
// (empty unless map capture was requested).
struct LayerActivations {
    std::vector<Matrix> q;
    std::vector<Matrix> k;
    std::vector<Matrix> v;
    std::vector<Matrix> attn;
};

struct CaptureOptions {
    bool qkv = false;
    bool maps = false;
};

struct MhaResult {
    Matrix output;  // L x d_model
    LayerActivations acts;
};

// One multi-head causal attention sub-layer: Q/K/V projections of x,
// scaled causal attention per head (grouped KV when n_kv_heads < n_heads),
// then the output projection. Norms and residuals live in model_forward.
MhaResult mha_forward(const Matrix& x, const LayerWeights& w,
                      const ModelConfig& config, const CaptureOptions& capture);

struct ForwardResult {
    Matrix logits;  // L x vocab_size
    std::vector<LayerActivations> layers;
};

ForwardResult model_forward(const std::vector<std::uint32_t>& tokens,
                            const ModelWeights& weights,
                            const CaptureOptions& capture = {});

// State for incremental decoding. The cache is owned by the stream; the
// oracle accumulator is filled only when capture_oracle is set (the
// QFilters/KNorm/Streaming scoring paths never read it).
struct DecodeState {
    const ModelWeights* weights = nullptr;
    KvCache cache;
    std::size_t next_pos = 0;
    bool capture_oracle = false;
    OracleAccumulator oracle;
};

DecodeState make_decode_state(const ModelWeights& weights,
                              bool capture_oracle = false);

// Appends exactly one (K, V) pair per (layer, kv head), then returns the
// next-token logits. Eviction is the caller's job, between steps.
std::vector<double> decode_step(std::uint32_t token_id, DecodeState& state);

// Deterministic pseudo-random weights: seeded Gaussian scaled by
// 1/sqrt(d_model), rounded to f32 so file round-trips are exact.
ModelWeights synth_model(const ModelConfig& config, std::uint64_t seed);

// Synthetic Q/K sample with a known drift direction:
//   Q_i = kappa * u + noise * g_i
//   K_j = key_offsets[j] * u + noise * h_j
// with g, h seeded isotropic Gaussian.
struct PlantedSample {
    Matrix q;
    Matrix k;
};
PlantedSample planted_qk_sample(std::size_t d_head, std::size_t n_queries,
                                std::size_t n_keys, const UnitVector& u,
                                double kappa, const std::vector<double>& key_offsets,
                                double noise, std::uint64_t seed);

// Model file: magic "TDM1", u32 version = 1, u32 n_layers, n_heads,
// n_kv_heads, d_model, d_head, vocab_size, max_seq_len, then tensors as
// (u32 rows, u32 cols, f32 row-major data) in the order: token_embedding,
// pos_embedding, per layer {w_q, w_k, w_v, w_o, ff_in, ff_out}, output_proj.
// Little-endian throughout.
void save_model(const ModelWeights& weights, const std::string& path);
ModelWeights load_model(const std::string& path);

}  // namespace kvf
