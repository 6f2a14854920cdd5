#include "kvf/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "binio.hpp"

namespace kvf {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || n_kv_heads == 0 || d_model == 0 ||
        d_head == 0 || vocab_size == 0 || max_seq_len == 0)
        throw InvalidArgument("ModelConfig: all dimensions must be positive");
    if (d_model != n_heads * d_head)
        throw InvalidArgument("ModelConfig: d_model must equal n_heads * d_head");
    if (n_heads % n_kv_heads != 0)
        throw InvalidArgument("ModelConfig: n_kv_heads must divide n_heads");
}

namespace {

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols,
                 const std::string& name) {
    if (m.rows != rows || m.cols != cols)
        throw InvalidArgument("ModelWeights: " + name + " has shape " +
                              std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                              ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
}

std::vector<double> rms_norm(std::span<const double> x) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double scale = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-8);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale;
    return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// row-vector times matrix
std::vector<double> vec_mat(std::span<const double> v, const Matrix& m) {
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double vi = v[i];
        if (vi == 0.0) continue;
        const auto row = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) out[j] += vi * row[j];
    }
    return out;
}

}  // namespace

void ModelWeights::check_shapes() const {
    config.validate();
    check_shape(token_embedding, config.vocab_size, config.d_model, "token_embedding");
    check_shape(pos_embedding, config.max_seq_len, config.d_model, "pos_embedding");
    if (layers.size() != config.n_layers)
        throw InvalidArgument("ModelWeights: layer count mismatch");
    const std::size_t kv_width = static_cast<std::size_t>(config.n_kv_heads) * config.d_head;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        check_shape(layers[l].w_q, config.d_model, config.d_model, p + "w_q");
        check_shape(layers[l].w_k, config.d_model, kv_width, p + "w_k");
        check_shape(layers[l].w_v, config.d_model, kv_width, p + "w_v");
        check_shape(layers[l].w_o, config.d_model, config.d_model, p + "w_o");
        check_shape(layers[l].ff_in, config.d_model, config.d_ff(), p + "ff_in");
        check_shape(layers[l].ff_out, config.d_ff(), config.d_model, p + "ff_out");
    }
    check_shape(output_proj, config.d_model, config.vocab_size, "output_proj");
}

MhaResult mha_forward(const Matrix& x, const LayerWeights& w,
                      const ModelConfig& config, const CaptureOptions& capture) {
    if (x.cols != config.d_model)
        throw InvalidArgument("mha_forward: input width != d_model");
    if (x.rows > config.max_seq_len)
        throw InvalidArgument("mha_forward: sequence longer than max_seq_len");

    const std::size_t L = x.rows;
    const std::size_t dh = config.d_head;
    const std::size_t H = config.n_heads;
    const std::size_t Hkv = config.n_kv_heads;
    const std::size_t group = config.group_size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix q_all = matmul(x, w.w_q);  // L x H*dh
    const Matrix k_all = matmul(x, w.w_k);  // L x Hkv*dh
    const Matrix v_all = matmul(x, w.w_v);

    MhaResult res;
    res.output = Matrix(L, config.d_model);
    Matrix context(L, config.d_model);  // concatenated per-head outputs

    if (capture.qkv) {
        res.acts.q.assign(H, Matrix(L, dh));
        res.acts.k.assign(Hkv, Matrix(L, dh));
        res.acts.v.assign(Hkv, Matrix(L, dh));
        for (std::size_t t = 0; t < L; ++t) {
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t j = 0; j < dh; ++j)
                    res.acts.q[h].at(t, j) = q_all.at(t, h * dh + j);
            for (std::size_t g = 0; g < Hkv; ++g)
                for (std::size_t j = 0; j < dh; ++j) {
                    res.acts.k[g].at(t, j) = k_all.at(t, g * dh + j);
                    res.acts.v[g].at(t, j) = v_all.at(t, g * dh + j);
                }
        }
    }
    if (capture.maps) res.acts.attn.assign(H, Matrix(L, L));

    std::vector<double> logits;
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / group;
        for (std::size_t t = 0; t < L; ++t) {
            logits.assign(t + 1, 0.0);
            for (std::size_t s = 0; s <= t; ++s) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j)
                    acc += q_all.at(t, h * dh + j) * k_all.at(s, g * dh + j);
                logits[s] = acc * scale;
            }
            const std::vector<double> weights = softmax(logits);
            if (capture.maps)
                for (std::size_t s = 0; s <= t; ++s)
                    res.acts.attn[h].at(t, s) = weights[s];
            for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t j = 0; j < dh; ++j)
                    context.at(t, h * dh + j) += weights[s] * v_all.at(s, g * dh + j);
        }
    }
    res.output = matmul(context, w.w_o);
    return res;
}

ForwardResult model_forward(const std::vector<std::uint32_t>& tokens,
                            const ModelWeights& weights,
                            const CaptureOptions& capture) {
    const ModelConfig& cfg = weights.config;
    const std::size_t L = tokens.size();
    if (L == 0) throw InvalidArgument("model_forward: empty token sequence");
    if (L > cfg.max_seq_len)
        throw InvalidArgument("model_forward: sequence longer than max_seq_len");

    Matrix x(L, cfg.d_model);
    for (std::size_t t = 0; t < L; ++t) {
        if (tokens[t] >= cfg.vocab_size)
            throw InvalidArgument("model_forward: token id out of vocab");
        for (std::size_t j = 0; j < cfg.d_model; ++j)
            x.at(t, j) = weights.token_embedding.at(tokens[t], j) +
                         weights.pos_embedding.at(t, j);
    }

    ForwardResult out;
    for (const LayerWeights& lw : weights.layers) {
        Matrix normed(L, cfg.d_model);
        for (std::size_t t = 0; t < L; ++t) {
            const std::vector<double> n = rms_norm(x.row(t));
            std::copy(n.begin(), n.end(), normed.row(t).begin());
        }
        MhaResult mha = mha_forward(normed, lw, cfg, capture);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            x.data[i] += mha.output.data[i];
        if (capture.qkv || capture.maps) out.layers.push_back(std::move(mha.acts));

        for (std::size_t t = 0; t < L; ++t) {
            const std::vector<double> n = rms_norm(x.row(t));
            std::vector<double> hidden = vec_mat(n, lw.ff_in);
            for (double& v : hidden) v = gelu(v);
            const std::vector<double> ff = vec_mat(hidden, lw.ff_out);
            for (std::size_t j = 0; j < cfg.d_model; ++j) x.at(t, j) += ff[j];
        }
    }

    out.logits = Matrix(L, cfg.vocab_size);
    for (std::size_t t = 0; t < L; ++t) {
        const std::vector<double> n = rms_norm(x.row(t));
        const std::vector<double> lg = vec_mat(n, weights.output_proj);
        std::copy(lg.begin(), lg.end(), out.logits.row(t).begin());
    }
    return out;
}

DecodeState make_decode_state(const ModelWeights& weights, bool capture_oracle) {
    weights.check_shapes();
    DecodeState st;
    st.weights = &weights;
    st.cache = KvCache(weights.config.n_layers, weights.config.n_kv_heads,
                       weights.config.d_head);
    st.capture_oracle = capture_oracle;
    if (capture_oracle)
        st.oracle = OracleAccumulator(weights.config.n_layers, weights.config.n_heads);
    return st;
}

std::vector<double> decode_step(std::uint32_t token_id, DecodeState& state) {
    const ModelWeights& weights = *state.weights;
    const ModelConfig& cfg = weights.config;
    if (state.cache.n_layers != cfg.n_layers || state.cache.n_kv_heads != cfg.n_kv_heads)
        throw InvalidArgument("decode_step: cache layer/head count mismatch");
    if (token_id >= cfg.vocab_size)
        throw InvalidArgument("decode_step: token id out of vocab");
    if (state.next_pos >= cfg.max_seq_len)
        throw InvalidArgument("decode_step: position beyond max_seq_len");

    const std::size_t pos = state.next_pos++;
    const std::size_t dh = cfg.d_head;
    const std::size_t group = cfg.group_size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> x(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        x[j] = weights.token_embedding.at(token_id, j) + weights.pos_embedding.at(pos, j);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        const std::vector<double> n = rms_norm(x);
        const std::vector<double> q = vec_mat(n, lw.w_q);
        const std::vector<double> k = vec_mat(n, lw.w_k);
        const std::vector<double> v = vec_mat(n, lw.w_v);

        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
            state.cache.append(l, g, pos,
                               {k.begin() + static_cast<std::ptrdiff_t>(g * dh),
                                k.begin() + static_cast<std::ptrdiff_t>((g + 1) * dh)},
                               {v.begin() + static_cast<std::ptrdiff_t>(g * dh),
                                v.begin() + static_cast<std::ptrdiff_t>((g + 1) * dh)});
        }

        std::vector<double> context(cfg.d_model, 0.0);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t g = h / group;
            const auto& entries = state.cache.head(l, g).entries;
            std::vector<double> logits(entries.size());
            for (std::size_t s = 0; s < entries.size(); ++s) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j)
                    acc += q[h * dh + j] * entries[s].key[j];
                logits[s] = acc * scale;
            }
            const std::vector<double> attn = softmax(logits);
            for (std::size_t s = 0; s < entries.size(); ++s)
                for (std::size_t j = 0; j < dh; ++j)
                    context[h * dh + j] += attn[s] * entries[s].value[j];
            if (state.capture_oracle) {
                std::vector<std::size_t> positions(entries.size());
                for (std::size_t s = 0; s < entries.size(); ++s)
                    positions[s] = entries[s].position;
                state.oracle.add_row(l, h, positions, attn);
            }
        }
        const std::vector<double> attn_out = vec_mat(context, lw.w_o);
        for (std::size_t j = 0; j < cfg.d_model; ++j) x[j] += attn_out[j];

        const std::vector<double> n2 = rms_norm(x);
        std::vector<double> hidden = vec_mat(n2, lw.ff_in);
        for (double& hv : hidden) hv = gelu(hv);
        const std::vector<double> ff = vec_mat(hidden, lw.ff_out);
        for (std::size_t j = 0; j < cfg.d_model; ++j) x[j] += ff[j];
    }

    return vec_mat(rms_norm(x), weights.output_proj);
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double scale,
                     std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.data)
        v = static_cast<double>(static_cast<float>(gauss(rng) * scale));
    return m;
}

}  // namespace

ModelWeights synth_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));

    ModelWeights w;
    w.config = config;
    w.token_embedding = random_matrix(config.vocab_size, config.d_model, scale, rng);
    w.pos_embedding = random_matrix(config.max_seq_len, config.d_model, scale, rng);
    const std::size_t kv_width = static_cast<std::size_t>(config.n_kv_heads) * config.d_head;
    for (std::uint32_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.w_q = random_matrix(config.d_model, config.d_model, scale, rng);
        lw.w_k = random_matrix(config.d_model, kv_width, scale, rng);
        lw.w_v = random_matrix(config.d_model, kv_width, scale, rng);
        lw.w_o = random_matrix(config.d_model, config.d_model, scale, rng);
        lw.ff_in = random_matrix(config.d_model, config.d_ff(), scale, rng);
        lw.ff_out = random_matrix(config.d_ff(), config.d_model, scale, rng);
        w.layers.push_back(std::move(lw));
    }
    w.output_proj = random_matrix(config.d_model, config.vocab_size, scale, rng);
    return w;
}

PlantedSample planted_qk_sample(std::size_t d_head, std::size_t n_queries,
                                std::size_t n_keys, const UnitVector& u,
                                double kappa, const std::vector<double>& key_offsets,
                                double noise, std::uint64_t seed) {
    if (u.dim() != d_head)
        throw InvalidArgument("planted_qk_sample: u dimension != d_head");
    if (std::abs(norm2(u.data) - 1.0) > 1e-9)
        throw InvalidArgument("planted_qk_sample: u must be a unit vector");
    if (!(kappa > 0.0)) throw InvalidArgument("planted_qk_sample: kappa must be > 0");
    if (key_offsets.size() != n_keys)
        throw InvalidArgument("planted_qk_sample: |key_offsets| != n_keys");
    if (noise < 0.0) throw InvalidArgument("planted_qk_sample: negative noise");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    PlantedSample s;
    s.q = Matrix(n_queries, d_head);
    for (std::size_t i = 0; i < n_queries; ++i)
        for (std::size_t j = 0; j < d_head; ++j)
            s.q.at(i, j) = kappa * u.data[j] + noise * gauss(rng);
    s.k = Matrix(n_keys, d_head);
    for (std::size_t i = 0; i < n_keys; ++i)
        for (std::size_t j = 0; j < d_head; ++j)
            s.k.at(i, j) = key_offsets[i] * u.data[j] + noise * gauss(rng);
    return s;
}

namespace {

constexpr char kModelMagic[4] = {'T', 'D', 'M', '1'};
constexpr std::uint32_t kModelVersion = 1;

void write_tensor(std::ostream& os, const Matrix& m) {
    binio::write_u32(os, static_cast<std::uint32_t>(m.rows));
    binio::write_u32(os, static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) binio::write_f32(os, static_cast<float>(v));
}

Matrix read_tensor(binio::Reader& r, std::size_t rows, std::size_t cols,
                   const std::string& name) {
    const std::size_t header_off = r.offset;
    const std::uint32_t fr = r.read_u32(name);
    const std::uint32_t fc = r.read_u32(name);
    if (fr != rows || fc != cols)
        throw FormatError("tensor " + name + " has shape " + std::to_string(fr) + "x" +
                              std::to_string(fc) + ", expected " + std::to_string(rows) +
                              "x" + std::to_string(cols),
                          header_off);
    Matrix m(rows, cols);
    for (double& v : m.data) v = static_cast<double>(r.read_f32(name));
    return m;
}

}  // namespace

void save_model(const ModelWeights& weights, const std::string& path) {
    weights.check_shapes();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing", 0);
    os.write(kModelMagic, 4);
    binio::write_u32(os, kModelVersion);
    const ModelConfig& c = weights.config;
    for (std::uint32_t v : {c.n_layers, c.n_heads, c.n_kv_heads, c.d_model, c.d_head,
                            c.vocab_size, c.max_seq_len})
        binio::write_u32(os, v);
    write_tensor(os, weights.token_embedding);
    write_tensor(os, weights.pos_embedding);
    for (const LayerWeights& lw : weights.layers) {
        write_tensor(os, lw.w_q);
        write_tensor(os, lw.w_k);
        write_tensor(os, lw.w_v);
        write_tensor(os, lw.w_o);
        write_tensor(os, lw.ff_in);
        write_tensor(os, lw.ff_out);
    }
    write_tensor(os, weights.output_proj);
    if (!os) throw FormatError("write failure on " + path, 0);
}

ModelWeights load_model(const std::string& path) {
    binio::Reader r(path);
    char magic[4];
    r.read_bytes(magic, 4, "magic");
    if (std::memcmp(magic, kModelMagic, 4) != 0)
        throw FormatError("bad magic in " + path, 0);
    const std::uint32_t version = r.read_u32("version");
    if (version != kModelVersion)
        throw FormatError("unsupported model version " + std::to_string(version) +
                              ", reader supports version " + std::to_string(kModelVersion),
                          4);

    ModelConfig c;
    c.n_layers = r.read_u32("n_layers");
    c.n_heads = r.read_u32("n_heads");
    c.n_kv_heads = r.read_u32("n_kv_heads");
    c.d_model = r.read_u32("d_model");
    c.d_head = r.read_u32("d_head");
    c.vocab_size = r.read_u32("vocab_size");
    c.max_seq_len = r.read_u32("max_seq_len");
    c.validate();

    ModelWeights w;
    w.config = c;
    w.token_embedding = read_tensor(r, c.vocab_size, c.d_model, "token_embedding");
    w.pos_embedding = read_tensor(r, c.max_seq_len, c.d_model, "pos_embedding");
    const std::size_t kv_width = static_cast<std::size_t>(c.n_kv_heads) * c.d_head;
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerWeights lw;
        lw.w_q = read_tensor(r, c.d_model, c.d_model, p + "w_q");
        lw.w_k = read_tensor(r, c.d_model, kv_width, p + "w_k");
        lw.w_v = read_tensor(r, c.d_model, kv_width, p + "w_v");
        lw.w_o = read_tensor(r, c.d_model, c.d_model, p + "w_o");
        lw.ff_in = read_tensor(r, c.d_model, c.d_ff(), p + "ff_in");
        lw.ff_out = read_tensor(r, c.d_ff(), c.d_model, p + "ff_out");
        w.layers.push_back(std::move(lw));
    }
    w.output_proj = read_tensor(r, c.d_model, c.vocab_size, "output_proj");
    return w;
}

}  // namespace kvf
