#include "kvf/calibration.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "binio.hpp"

namespace kvf {

void CalibrationConfig::validate() const {
    if (n_documents == 0 || doc_length == 0 || samples_per_head == 0)
        throw InvalidArgument("CalibrationConfig: all sizes must be positive");
    if (samples_per_head > n_documents * doc_length)
        throw InsufficientData(
            "CalibrationConfig: samples_per_head requires " +
            std::to_string(samples_per_head) + " positions but only " +
            std::to_string(n_documents * doc_length) + " are available");
}

void QFilterSet::validate() const {
    if (heads.size() != n_layers)
        throw InvalidArgument("QFilterSet: layer count mismatch");
    for (const auto& layer : heads) {
        if (layer.size() != n_kv_heads)
            throw InvalidArgument("QFilterSet: kv head count mismatch");
        for (const auto& e : layer) {
            if (e.filter.size() != d_head)
                throw InvalidArgument("QFilterSet: filter dimension mismatch");
            const double n = norm2(e.filter);
            if (std::abs(n - 1.0) > 1e-6)
                throw InvalidArgument("QFilterSet: filter norm " + std::to_string(n) +
                                      " deviates from 1 by more than 1e-6");
            if (!(e.kappa > 0.0))
                throw InvalidArgument("QFilterSet: kappa must be positive");
        }
    }
}

UnitVector filter_direction(const QFilterEntry& entry) {
    return UnitVector::normalized(entry.filter);
}

MarkovChain MarkovChain::build(std::size_t vocab_size, std::uint64_t seed) {
    if (vocab_size < 2) throw InvalidArgument("MarkovChain: vocab_size must be >= 2");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> pick(
        0, static_cast<std::uint32_t>(vocab_size - 1));
    std::uniform_real_distribution<double> unif(0.1, 1.0);

    const std::size_t fanout = std::min<std::size_t>(8, vocab_size);
    MarkovChain chain;
    chain.vocab_size = vocab_size;
    chain.successors.resize(vocab_size);
    chain.probs.resize(vocab_size);
    for (std::size_t t = 0; t < vocab_size; ++t) {
        auto& succ = chain.successors[t];
        while (succ.size() < fanout) {
            const std::uint32_t c = pick(rng);
            if (std::find(succ.begin(), succ.end(), c) == succ.end()) succ.push_back(c);
        }
        auto& p = chain.probs[t];
        p.resize(fanout);
        double sum = 0.0;
        for (double& v : p) {
            v = unif(rng);
            sum += v;
        }
        for (double& v : p) v /= sum;
        // pin the row sum exactly by folding the rounding error into the last entry
        double partial = std::accumulate(p.begin(), p.end() - 1, 0.0);
        p.back() = 1.0 - partial;
    }
    return chain;
}

std::vector<std::uint32_t> MarkovChain::sample(std::size_t length,
                                               std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<std::uint32_t> tokens;
    tokens.reserve(length);
    std::uniform_int_distribution<std::uint32_t> start(
        0, static_cast<std::uint32_t>(vocab_size - 1));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uint32_t cur = start(rng);
    for (std::size_t i = 0; i < length; ++i) {
        tokens.push_back(cur);
        const double r = unif(rng);
        double acc = 0.0;
        const auto& p = probs[cur];
        std::uint32_t next = successors[cur].back();
        for (std::size_t j = 0; j < p.size(); ++j) {
            acc += p[j];
            if (r < acc) {
                next = successors[cur][j];
                break;
            }
        }
        cur = next;
    }
    return tokens;
}

std::vector<std::vector<std::uint32_t>> synth_corpus(std::size_t vocab_size,
                                                     std::size_t n_docs,
                                                     std::size_t doc_length,
                                                     std::uint64_t seed) {
    const MarkovChain chain = MarkovChain::build(vocab_size, seed);
    std::vector<std::vector<std::uint32_t>> docs;
    docs.reserve(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d)
        docs.push_back(chain.sample(doc_length, seed ^ (0xD0C0ULL + d)));
    return docs;
}

std::vector<std::vector<Matrix>> gather_queries(
    const ModelWeights& weights,
    const std::vector<std::vector<std::uint32_t>>& corpus,
    const CalibrationConfig& config) {
    config.validate();
    weights.check_shapes();
    const ModelConfig& cfg = weights.config;

    if (corpus.size() < config.n_documents)
        throw InsufficientData("gather_queries: need " +
                               std::to_string(config.n_documents) + " documents, have " +
                               std::to_string(corpus.size()));
    std::size_t total_positions = 0;
    for (std::size_t d = 0; d < config.n_documents; ++d) {
        if (corpus[d].size() < config.doc_length)
            throw InsufficientData("gather_queries: document " + std::to_string(d) +
                                   " has " + std::to_string(corpus[d].size()) +
                                   " tokens, need " + std::to_string(config.doc_length));
        total_positions += config.doc_length;
    }
    if (total_positions < config.samples_per_head)
        throw InsufficientData("gather_queries: need " +
                               std::to_string(config.samples_per_head) +
                               " samples, corpus provides " +
                               std::to_string(total_positions) + " positions");

    // one shared sample of (document, position) pairs for all heads
    std::vector<std::size_t> flat(total_positions);
    std::iota(flat.begin(), flat.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    for (std::size_t i = 0; i < config.samples_per_head; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, flat.size() - 1);
        std::swap(flat[i], flat[pick(rng)]);
    }
    flat.resize(config.samples_per_head);

    // group sampled positions by document
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> by_doc(
        config.n_documents);  // (position in doc, output row)
    for (std::size_t row = 0; row < flat.size(); ++row) {
        const std::size_t doc = flat[row] / config.doc_length;
        const std::size_t pos = flat[row] % config.doc_length;
        by_doc[doc].push_back({pos, row});
    }

    std::vector<std::vector<Matrix>> out(
        cfg.n_layers,
        std::vector<Matrix>(cfg.n_heads, Matrix(config.samples_per_head, cfg.d_head)));

    CaptureOptions capture;
    capture.qkv = true;
    for (std::size_t d = 0; d < config.n_documents; ++d) {
        if (by_doc[d].empty()) continue;
        std::vector<std::uint32_t> tokens(corpus[d].begin(),
                                          corpus[d].begin() + config.doc_length);
        const ForwardResult fwd = model_forward(tokens, weights, capture);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            for (std::size_t h = 0; h < cfg.n_heads; ++h)
                for (const auto& [pos, row] : by_doc[d])
                    for (std::size_t j = 0; j < cfg.d_head; ++j)
                        out[l][h].at(row, j) = fwd.layers[l].q[h].at(pos, j);
    }
    return out;
}

namespace {

double mean_projection(const Matrix& rows, std::span<const double> dir) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows.rows; ++i) s += dot(rows.row(i), dir);
    return s / static_cast<double>(rows.rows);
}

std::vector<double> quantize_f32(std::span<const double> v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<double>(static_cast<float>(v[i]));
    return out;
}

}  // namespace

QFilterSet compute_qfilters(const std::vector<std::vector<Matrix>>& qmatrices,
                            const std::vector<std::vector<Matrix>>* key_samples,
                            std::uint32_t n_kv_heads, std::uint64_t seed) {
    if (qmatrices.empty() || qmatrices[0].empty())
        throw InvalidArgument("compute_qfilters: empty query matrices");
    const std::size_t n_layers = qmatrices.size();
    const std::size_t n_heads = qmatrices[0].size();
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0)
        throw InvalidArgument("compute_qfilters: n_kv_heads must divide head count");
    const std::size_t group = n_heads / n_kv_heads;
    const std::size_t d_head = qmatrices[0][0].cols;

    QFilterSet set;
    set.n_layers = static_cast<std::uint32_t>(n_layers);
    set.n_kv_heads = n_kv_heads;
    set.d_head = static_cast<std::uint32_t>(d_head);
    set.calibration_seed = seed;
    set.heads.resize(n_layers);

    for (std::size_t l = 0; l < n_layers; ++l) {
        if (qmatrices[l].size() != n_heads)
            throw InvalidArgument("compute_qfilters: ragged head count");
        for (std::size_t g = 0; g < n_kv_heads; ++g) {
            std::vector<double> avg(d_head, 0.0);
            for (std::size_t m = 0; m < group; ++m) {
                const std::size_t h = g * group + m;
                const Matrix& q = qmatrices[l][h];
                if (q.rows < 2)
                    throw InvalidArgument("compute_qfilters: need >= 2 query rows");
                if (q.cols != d_head)
                    throw InvalidArgument("compute_qfilters: inconsistent d_head");
                TopDirectionResult top = top_singular_direction(
                    q, 1e-6, 10000, seed ^ (l * 977 + h * 31 + 1));
                if (top.gap_flag)
                    set.warnings.push_back("near-degenerate spectrum at layer " +
                                           std::to_string(l) + " head " +
                                           std::to_string(h));
                // sign fix: the filter points along the query drift
                std::vector<double> v = top.direction.data;
                if (mean_projection(q, v) < 0.0)
                    for (double& x : v) x = -x;
                for (std::size_t j = 0; j < d_head; ++j) avg[j] += v[j];
            }
            for (double& x : avg) x /= static_cast<double>(group);
            const double n = norm2(avg);
            if (n == 0.0)
                throw DegenerateInput("compute_qfilters: group filters cancelled");
            for (double& x : avg) x /= n;

            // kappa from the pooled group queries; re-fix the sign if the
            // group average flipped it
            double kappa = 0.0;
            std::size_t total_rows = 0;
            for (std::size_t m = 0; m < group; ++m) {
                const Matrix& q = qmatrices[l][g * group + m];
                kappa += mean_projection(q, avg) * static_cast<double>(q.rows);
                total_rows += q.rows;
            }
            kappa /= static_cast<double>(total_rows);
            if (kappa < 0.0) {
                for (double& x : avg) x = -x;
                kappa = -kappa;
            }

            QFilterEntry entry;
            entry.filter = quantize_f32(avg);
            entry.kappa = static_cast<double>(static_cast<float>(kappa));
            if (key_samples) {
                const Matrix& keys = (*key_samples)[l][g];
                if (keys.rows > 0) {
                    const double mk = mean_projection(keys, entry.filter);
                    entry.epsilon = mk > 0.0 ? 1 : (mk < 0.0 ? -1 : 0);
                }
            }
            set.heads[l].push_back(std::move(entry));
        }
    }
    set.validate();
    return set;
}

namespace {
constexpr char kFilterMagic[4] = {'Q', 'F', 'L', 'T'};
constexpr std::uint32_t kFilterVersion = 1;
}  // namespace

void save_qfilters(const QFilterSet& set, const std::string& path) {
    set.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing", 0);
    os.write(kFilterMagic, 4);
    binio::write_u32(os, kFilterVersion);
    binio::write_u32(os, set.n_layers);
    binio::write_u32(os, set.n_kv_heads);
    binio::write_u32(os, set.d_head);
    binio::write_u64(os, set.calibration_seed);
    os.write(reinterpret_cast<const char*>(set.model_fingerprint.data()), 32);
    for (const auto& layer : set.heads) {
        for (const auto& e : layer) {
            for (double v : e.filter) binio::write_f32(os, static_cast<float>(v));
            binio::write_f32(os, static_cast<float>(e.kappa));
            const char eps = static_cast<char>(e.epsilon);
            os.write(&eps, 1);
        }
    }
    if (!os) throw FormatError("write failure on " + path, 0);
}

QFilterSet load_qfilters(const std::string& path) {
    binio::Reader r(path);
    char magic[4];
    r.read_bytes(magic, 4, "magic");
    if (std::memcmp(magic, kFilterMagic, 4) != 0)
        throw FormatError("bad magic in " + path, 0);
    const std::uint32_t version = r.read_u32("version");
    if (version != kFilterVersion)
        throw FormatError("unsupported filter version " + std::to_string(version) +
                              ", reader supports version " +
                              std::to_string(kFilterVersion),
                          4);
    QFilterSet set;
    set.n_layers = r.read_u32("n_layers");
    set.n_kv_heads = r.read_u32("n_kv_heads");
    set.d_head = r.read_u32("d_head");
    set.calibration_seed = r.read_u64("calibration_seed");
    r.read_bytes(set.model_fingerprint.data(), 32, "model_fingerprint");
    set.heads.resize(set.n_layers);
    for (std::uint32_t l = 0; l < set.n_layers; ++l) {
        for (std::uint32_t g = 0; g < set.n_kv_heads; ++g) {
            const std::string what =
                "filter layer" + std::to_string(l) + " head" + std::to_string(g);
            QFilterEntry e;
            e.filter.resize(set.d_head);
            for (double& v : e.filter) v = static_cast<double>(r.read_f32(what));
            e.kappa = static_cast<double>(r.read_f32(what));
            char eps;
            r.read_bytes(&eps, 1, what);
            e.epsilon = static_cast<std::int8_t>(eps);
            set.heads[l].push_back(std::move(e));
        }
    }
    set.validate();
    return set;
}

std::array<std::uint8_t, 32> file_fingerprint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path, 0);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        if (in.gcount() > 0)
            EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    std::array<std::uint8_t, 32> digest{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest.data(), &len);
    EVP_MD_CTX_free(ctx);
    return digest;
}

void check_filter_compatibility(
    const QFilterSet& set, const ModelConfig& config,
    const std::optional<std::array<std::uint8_t, 32>>& expected_fingerprint) {
    if (set.n_layers != config.n_layers || set.n_kv_heads != config.n_kv_heads ||
        set.d_head != config.d_head)
        throw FilterModelMismatch(
            "filter set (" + std::to_string(set.n_layers) + " layers, " +
            std::to_string(set.n_kv_heads) + " kv heads, d_head " +
            std::to_string(set.d_head) + ") does not match model (" +
            std::to_string(config.n_layers) + ", " + std::to_string(config.n_kv_heads) +
            ", " + std::to_string(config.d_head) + ")");
    if (expected_fingerprint && set.model_fingerprint != *expected_fingerprint)
        throw FilterModelMismatch("filter set fingerprint does not match model file");
}

}  // namespace kvf
