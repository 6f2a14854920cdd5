#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"

#include "kvf/analysis.hpp"
#include "kvf/calibration.hpp"
#include "kvf/harness.hpp"
#include "kvf/model.hpp"

namespace kvf {

namespace {

void write_output(const std::string& out, const std::string& content) {
    if (out.empty() || out == "-") {
        std::cout << content;
        if (content.empty() || content.back() != '\n') std::cout << "\n";
        return;
    }
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw InvalidArgument("cannot open output file " + out);
    os << content;
}

std::vector<std::uint32_t> load_token_stream(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open token stream " + path, 0);
    std::vector<std::uint32_t> tokens;
    unsigned char b[4];
    while (in.read(reinterpret_cast<char*>(b), 4)) {
        tokens.push_back(static_cast<std::uint32_t>(b[0]) |
                         (static_cast<std::uint32_t>(b[1]) << 8) |
                         (static_cast<std::uint32_t>(b[2]) << 16) |
                         (static_cast<std::uint32_t>(b[3]) << 24));
    }
    return tokens;
}

std::vector<PolicyKind> parse_policies(const std::vector<std::string>& names) {
    std::vector<PolicyKind> out;
    for (const std::string& n : names) {
        const auto p = parse_policy(n);
        if (!p) throw CLI::ValidationError("--policies", "unknown policy: " + n);
        out.push_back(*p);
    }
    return out;
}

// key samples for the epsilon estimate: all K rows of the first document
std::vector<std::vector<Matrix>> gather_key_samples(
    const ModelWeights& weights, const std::vector<std::uint32_t>& doc) {
    CaptureOptions capture;
    capture.qkv = true;
    const ForwardResult fwd = model_forward(doc, weights, capture);
    std::vector<std::vector<Matrix>> keys;
    for (const LayerActivations& layer : fwd.layers) keys.push_back(layer.k);
    return keys;
}

int cmd_calibrate(const std::string& model_path, std::uint64_t corpus_seed,
                  std::size_t docs, std::size_t doc_len, std::size_t samples,
                  std::uint64_t seed, const std::string& out) {
    const ModelWeights weights = load_model(model_path);
    const auto corpus =
        synth_corpus(weights.config.vocab_size, docs, doc_len, corpus_seed);

    CalibrationConfig cc;
    cc.n_documents = docs;
    cc.doc_length = doc_len;
    cc.samples_per_head = samples;
    cc.seed = seed;

    const auto qmatrices = gather_queries(weights, corpus, cc);
    const auto key_samples = gather_key_samples(weights, corpus[0]);
    QFilterSet set =
        compute_qfilters(qmatrices, &key_samples, weights.config.n_kv_heads, seed);
    set.model_fingerprint = file_fingerprint(model_path);
    save_qfilters(set, out);
    std::cout << "wrote " << out << " (" << set.n_layers << " layers x "
              << set.n_kv_heads << " kv heads, d_head " << set.d_head << ")\n";
    for (const std::string& w : set.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

int cmd_validate(std::size_t n_heads, std::size_t d_head, std::size_t n_samples,
                 double kappa, double noise, std::uint64_t seed,
                 const std::string& out) {
    nlohmann::json report;
    bool all_pass = true;

    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t h = 0; h < n_heads; ++h) {
        std::mt19937_64 rng(seed ^ (h * 7919 + 1));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<double> dir(d_head);
        for (double& x : dir) x = gauss(rng);
        const UnitVector u = UnitVector::normalized(std::move(dir));

        std::vector<double> offsets(64);
        std::uniform_real_distribution<double> off(-2.0, 2.0);
        for (double& o : offsets) o = off(rng);

        const PlantedSample noisy = planted_qk_sample(
            d_head, n_samples, offsets.size(), u, kappa, offsets, noise, seed + h);
        const PlantedSample clean = planted_qk_sample(
            d_head, 256, offsets.size(), u, kappa, offsets, 0.0, seed + h);

        // drift-direction recovery
        TopDirectionResult top =
            top_singular_direction(noisy.q, 1e-6, 10000, seed + h);
        const double recovery =
            std::abs(cosine_similarity(top.direction.data, u.data));

        // attention-logit approximation, noisy and noiseless
        double mean_proj = 0.0;
        for (std::size_t i = 0; i < noisy.q.rows; ++i)
            mean_proj += dot(noisy.q.row(i), top.direction.data);
        mean_proj /= static_cast<double>(noisy.q.rows);
        UnitVector filter = top.direction;
        if (mean_proj < 0.0) {
            for (double& x : filter.data) x = -x;
            mean_proj = -mean_proj;
        }
        const TheoremCheckResult noisy_check =
            theorem_check(noisy.q, noisy.k, filter, mean_proj);
        const TheoremCheckResult exact_check =
            theorem_check(clean.q, clean.k, u, kappa);

        // uni-directionality of the drift
        const SpectrumRow spectrum = spectrum_report(noisy.q, seed + h);
        double second_best = 0.0;
        for (std::size_t m = 1; m < spectrum.abs_means.size(); ++m)
            second_best = std::max(second_best, spectrum.abs_means[m]);
        const double ratio = second_best > 0.0
                                 ? spectrum.abs_means[0] / second_best
                                 : std::numeric_limits<double>::infinity();

        const bool pass = recovery >= 0.95 && noisy_check.pearson >= 0.99 &&
                          exact_check.max_abs_err < 1e-9 && ratio >= 10.0;
        all_pass = all_pass && pass;
        heads.push_back({{"head", h},
                         {"recovery_cosine", recovery},
                         {"logit_pearson", noisy_check.pearson},
                         {"noiseless_max_abs_err", exact_check.max_abs_err},
                         {"spectrum_ratio", ratio},
                         {"pass", pass}});
    }
    report["heads"] = heads;
    report["all_pass"] = all_pass;
    report["seed"] = seed;
    write_output(out, report.dump(2));
    return all_pass ? 0 : 1;
}

int cmd_sweep(const std::vector<std::size_t>& sample_sizes, std::size_t n_seeds,
              std::size_t n_heads, std::size_t d_head, double kappa, double noise,
              std::uint64_t seed, const std::string& out) {
    std::ostringstream csv;
    csv << "samples,mean_recovery_cosine\n";
    std::vector<double> means;
    for (std::size_t n : sample_sizes) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s < n_seeds; ++s) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                std::mt19937_64 rng(seed ^ (s * 6151 + h * 769 + 7));
                std::normal_distribution<double> gauss(0.0, 1.0);
                std::vector<double> dir(d_head);
                for (double& x : dir) x = gauss(rng);
                const UnitVector u = UnitVector::normalized(std::move(dir));
                const PlantedSample sample = planted_qk_sample(
                    d_head, n, 1, u, kappa, {0.0}, noise,
                    seed ^ (n * 31 + s * 131 + h * 17));
                TopDirectionResult top =
                    top_singular_direction(sample.q, 1e-6, 10000, seed + h);
                sum += std::abs(cosine_similarity(top.direction.data, u.data));
                ++count;
            }
        }
        means.push_back(sum / static_cast<double>(count));
        csv << n << "," << means.back() << "\n";
    }
    write_output(out, csv.str());
    return 0;
}

int run_cli_impl(int argc, const char* const* argv) {
    CLI::App app{"Query-geometry KV cache compression toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string out;
    std::string format = "json";
    app.add_option("--seed", seed, "global seed")->capture_default_str();
    app.add_option("--out", out, "output path (default stdout)");
    app.add_option("--format", format, "json|csv")
        ->check(CLI::IsMember({"json", "csv"}));

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "compute a filter file");
    std::string model_path, filters_path;
    std::uint64_t corpus_seed = 0;
    std::size_t docs = 20, doc_len = 2048, samples = 3000;
    calibrate->add_option("--model", model_path, "model file")->required();
    calibrate->add_option("--corpus-seed", corpus_seed, "corpus seed");
    calibrate->add_option("--docs", docs, "documents")->capture_default_str();
    calibrate->add_option("--doc-len", doc_len, "tokens per document")
        ->capture_default_str();
    calibrate->add_option("--samples", samples, "query samples per head")
        ->capture_default_str();
    std::string calibrate_out = "filters.qflt";
    calibrate->add_option("--out", calibrate_out, "filter file to write")
        ->capture_default_str();

    // correlate
    auto* correlate = app.add_subcommand(
        "correlate", "rank-correlate policy scores against observed attention");
    bool planted = false;
    std::size_t n_heads = 16, d_head = 64, seq_len = 512, n_samples = 3000;
    double kappa = 2.0, noise = 0.2;
    std::vector<std::string> policy_names = {"qfilters", "knorm"};
    correlate->add_flag("--planted", planted, "use a planted source");
    correlate->add_option("--model", model_path, "model file");
    correlate->add_option("--filters", filters_path, "filter file");
    correlate->add_option("--heads", n_heads, "planted heads")->capture_default_str();
    correlate->add_option("--d-head", d_head, "head dimension")->capture_default_str();
    correlate->add_option("--seq-len", seq_len, "sequence length")
        ->capture_default_str();
    correlate->add_option("--kappa", kappa, "planted drift")->capture_default_str();
    correlate->add_option("--noise", noise, "planted noise")->capture_default_str();
    correlate->add_option("--corpus-seed", corpus_seed, "corpus seed");
    correlate->add_option("--policies", policy_names, "policies to score")
        ->delimiter(',');

    // generate
    auto* generate =
        app.add_subcommand("generate", "memory-constrained teacher-forced run");
    std::string policy_name = "qfilters", stream_path;
    std::size_t budget = 512, sink_count = 4, window_size = 64;
    bool synthetic = false;
    generate->add_option("--model", model_path, "model file")->required();
    generate->add_option("--policy", policy_name, "eviction policy")
        ->check(CLI::IsMember({"qfilters", "knorm", "streaming", "random", "oracle"}))
        ->capture_default_str();
    generate->add_option("--budget", budget, "max cache entries per head")
        ->capture_default_str();
    generate->add_option("--filters", filters_path, "filter file");
    generate->add_option("--stream", stream_path, "raw u32-le token file");
    generate->add_flag("--synthetic", synthetic, "use a synthetic stream");
    generate->add_option("--corpus-seed", corpus_seed, "synthetic stream seed");
    generate->add_option("--seq-len", seq_len, "synthetic stream length")
        ->capture_default_str();
    generate->add_option("--sink", sink_count, "streaming sink tokens")
        ->capture_default_str();
    generate->add_option("--window", window_size, "streaming window")
        ->capture_default_str();

    // needle
    auto* needle = app.add_subcommand("needle", "planted needle-retention runs");
    NeedleConfig ncfg;
    std::vector<double> depths = ncfg.depth_fractions;
    std::size_t haystack_len = ncfg.haystack_len, span = ncfg.needle_span;
    std::vector<std::size_t> protected_layers = {0, 1};
    needle->add_option("--policy", policy_name, "eviction policy")
        ->check(CLI::IsMember({"qfilters", "knorm", "streaming", "random", "oracle"}))
        ->capture_default_str();
    needle->add_option("--budget", budget, "cache budget")->capture_default_str();
    needle->add_option("--haystack-len", haystack_len, "sequence length")
        ->capture_default_str();
    needle->add_option("--depths", depths, "needle depth fractions")->delimiter(',');
    needle->add_option("--span", span, "needle span")->capture_default_str();
    needle->add_option("--protected-layers", protected_layers,
                       "layers never evicted")
        ->delimiter(',');

    // similarity
    auto* similarity =
        app.add_subcommand("similarity", "cosine similarity between filter files");
    std::vector<std::string> filter_files;
    similarity->add_option("--filters", filter_files, "filter files")
        ->required()
        ->expected(-1);

    // validate
    auto* validate = app.add_subcommand(
        "validate", "run the geometry checks on a planted source");
    bool validate_planted = true;
    validate->add_flag("--planted", validate_planted, "use a planted source");
    validate->add_option("--heads", n_heads, "heads")->capture_default_str();
    validate->add_option("--d-head", d_head, "head dimension")->capture_default_str();
    validate->add_option("--samples", n_samples, "query samples")
        ->capture_default_str();
    validate->add_option("--kappa", kappa, "planted drift")->capture_default_str();
    validate->add_option("--noise", noise, "planted noise")->capture_default_str();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "calibration-size sweep");
    std::vector<std::size_t> sweep_samples = {100, 300, 1000, 3000};
    std::size_t sweep_seeds = 5;
    double sweep_noise = 2.0;
    sweep->add_option("--samples", sweep_samples, "sample sizes")->delimiter(',');
    sweep->add_option("--seeds", sweep_seeds, "seeds per size")
        ->capture_default_str();
    sweep->add_option("--heads", n_heads, "heads per seed")->capture_default_str();
    sweep->add_option("--d-head", d_head, "head dimension")->capture_default_str();
    sweep->add_option("--kappa", kappa, "planted drift")->capture_default_str();
    sweep->add_option("--noise", sweep_noise, "planted noise")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (calibrate->parsed()) {
            return cmd_calibrate(model_path, corpus_seed, docs, doc_len, samples,
                                 seed, calibrate_out);
        }
        if (correlate->parsed()) {
            const std::vector<PolicyKind> policies = parse_policies(policy_names);
            CorrelationReport report;
            if (planted) {
                const PlantedSource source = make_planted_source(
                    n_heads, d_head, seq_len, kappa, noise, -2.0, 2.0, seed);
                report = correlation_report_planted(source, policies, seed);
            } else {
                if (model_path.empty()) {
                    std::cerr << "correlate: need --model or --planted\n";
                    return 2;
                }
                const ModelWeights weights = load_model(model_path);
                const auto stream = synth_corpus(weights.config.vocab_size, 1,
                                                 seq_len, corpus_seed)[0];
                QFilterSet filters;
                const bool have_filters = !filters_path.empty();
                if (have_filters) {
                    filters = load_qfilters(filters_path);
                    check_filter_compatibility(filters, weights.config,
                                               file_fingerprint(model_path));
                }
                report = correlation_report_model(
                    weights, stream, policies, have_filters ? &filters : nullptr,
                    seed);
            }
            write_output(out, format == "csv" ? to_csv(report)
                                              : to_json(report).dump(2));
            return 0;
        }
        if (generate->parsed()) {
            const PolicyKind policy = *parse_policy(policy_name);
            if (policy == PolicyKind::QFilters && filters_path.empty()) {
                std::cerr << "generate: --policy qfilters requires --filters\n";
                return 2;
            }
            if (stream_path.empty() && !synthetic) {
                std::cerr << "generate: need --stream or --synthetic\n";
                return 2;
            }
            const ModelWeights weights = load_model(model_path);
            const std::vector<std::uint32_t> stream =
                synthetic ? synth_corpus(weights.config.vocab_size, 1, seq_len,
                                         corpus_seed)[0]
                          : load_token_stream(stream_path);
            QFilterSet filters;
            if (policy == PolicyKind::QFilters) {
                filters = load_qfilters(filters_path);
                check_filter_compatibility(filters, weights.config,
                                           file_fingerprint(model_path));
            }
            GenerationConfig gc;
            gc.policy = policy;
            gc.budget = budget;
            gc.sink_count = sink_count;
            gc.window_size = window_size;
            gc.seed = seed;
            const GenerationRun run = constrained_generate(
                weights, policy == PolicyKind::QFilters ? &filters : nullptr, gc,
                stream);
            write_output(out, to_json(run).dump(2));
            return 0;
        }
        if (needle->parsed()) {
            ncfg.policy = *parse_policy(policy_name);
            ncfg.budget = budget;
            ncfg.haystack_len = haystack_len;
            ncfg.depth_fractions = depths;
            ncfg.needle_span = span;
            ncfg.protected_layers.clear();
            for (std::size_t l : protected_layers) ncfg.protected_layers.insert(l);
            ncfg.seed = seed;
            const std::vector<NeedleRun> runs = needle_retention(ncfg);
            write_output(out, to_json(runs).dump(2));
            return 0;
        }
        if (similarity->parsed()) {
            std::vector<QFilterSet> sets;
            for (const std::string& f : filter_files)
                sets.push_back(load_qfilters(f));
            const SimilarityMatrix sim = filter_similarity(sets, filter_files);
            write_output(out,
                         format == "csv" ? to_csv(sim) : to_json(sim).dump(2));
            return 0;
        }
        if (validate->parsed()) {
            return cmd_validate(n_heads, d_head, n_samples, kappa, noise, seed, out);
        }
        if (sweep->parsed()) {
            return cmd_sweep(sweep_samples, sweep_seeds, n_heads, d_head, kappa,
                             sweep_noise, seed, out);
        }
    } catch (const FilterModelMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace

int run_cli(int argc, const char* const* argv) { return run_cli_impl(argc, argv); }

}  // namespace kvf
