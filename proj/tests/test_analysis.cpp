#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "kvf/analysis.hpp"
#include "oracles.hpp"

using namespace kvf;

namespace {

UnitVector seeded_direction(std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(dim);
    for (double& x : v) x = gauss(rng);
    return UnitVector::normalized(std::move(v));
}

Matrix random_causal_map(std::size_t L, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix attn(L, L);
    for (std::size_t i = 0; i < L; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            attn.at(i, j) = u(rng);
            z += attn.at(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) attn.at(i, j) /= z;
    }
    return attn;
}

}  // namespace

TEST_CASE("attention_stats: diagonal map") {
    Matrix attn(4, 4);
    for (std::size_t i = 0; i < 4; ++i) attn.at(i, i) = 1.0;
    const auto s = attention_stats(attn);
    CHECK(s[0] == doctest::Approx(0.25));
    CHECK(s[1] == doctest::Approx(1.0 / 3.0));
    CHECK(s[2] == doctest::Approx(0.5));
    CHECK(s[3] == doctest::Approx(1.0));
}

TEST_CASE("attention_stats: pure sink map") {
    const std::size_t L = 5;
    Matrix attn(L, L);
    for (std::size_t i = 0; i < L; ++i) attn.at(i, 0) = 1.0;
    const auto s = attention_stats(attn);
    CHECK(s[0] == doctest::Approx(1.0));
    for (std::size_t t = 1; t < L; ++t) CHECK(s[t] == doctest::Approx(0.0));
}

TEST_CASE("attention_stats: matches the direct double-loop reference") {
    const Matrix attn = random_causal_map(16, 5);
    const auto s = attention_stats(attn);
    const auto ref = oracles::direct_attention_stats(attn);
    for (std::size_t t = 0; t < 16; ++t) CHECK(std::abs(s[t] - ref[t]) < 1e-12);
}

TEST_CASE("attention_stats: entries bounded and total mass accounted for") {
    const std::size_t L = 20;
    const Matrix attn = random_causal_map(L, 6);
    const auto s = attention_stats(attn);
    double mass = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
        CHECK(s[t] >= 0.0);
        CHECK(s[t] <= 1.0);
        // each column's mean times its row count recovers the column sum
        mass += s[t] * static_cast<double>(L - t);
    }
    CHECK(mass == doctest::Approx(static_cast<double>(L)).epsilon(1e-12));
}

TEST_CASE("attention_stats: empty or non-square maps are rejected") {
    CHECK_THROWS_AS(attention_stats(Matrix{}), InvalidArgument);
    CHECK_THROWS_AS(attention_stats(Matrix(2, 3)), InvalidArgument);
}

TEST_CASE("correlation_report_planted: oracle self-correlates perfectly") {
    const auto source = make_planted_source(4, 8, 64, 2.0, 0.2, -2.0, 2.0, 9);
    const auto report =
        correlation_report_planted(source, {PolicyKind::Oracle}, 9);
    const auto& rows = report.per_head.at("oracle");
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
        CHECK_FALSE(r.degenerate);
        CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("correlation_report_planted: qfilters beats knorm on mixed signs") {
    double qf = 0.0, kn = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto source =
            make_planted_source(8, 16, 128, 2.0, 0.2, -2.0, 2.0, 100 + seed);
        const auto report = correlation_report_planted(
            source, {PolicyKind::QFilters, PolicyKind::KNorm}, seed);
        qf += report.mean_rho.at("qfilters");
        kn += report.mean_rho.at("knorm");
    }
    CHECK(qf / 3.0 > kn / 3.0);
}

TEST_CASE("correlation_report_planted: random scores hover near zero") {
    const auto source = make_planted_source(32, 8, 96, 2.0, 0.2, -2.0, 2.0, 11);
    const auto report =
        correlation_report_planted(source, {PolicyKind::Random}, 11);
    CHECK(std::abs(report.mean_rho.at("random")) <= 0.1);
}

TEST_CASE("correlation ranking is invariant under positive filter rescaling") {
    const auto source = make_planted_source(1, 8, 48, 2.0, 0.2, -2.0, 2.0, 13);
    const auto& head = source.heads[0];
    const auto filter = head.u.data;
    std::vector<double> scaled = filter;
    for (double& x : scaled) x *= 3.7;
    HeadCache cache;
    for (std::size_t t = 0; t < 48; ++t)
        cache.entries.push_back(
            {t, {head.k.row(t).begin(), head.k.row(t).end()}, {0.0}});
    const auto a = score_qfilters(cache, filter);
    const auto b = score_qfilters(cache, scaled);
    CHECK(std::abs(spearman_rho(a, head.s) - spearman_rho(b, head.s)) < 1e-12);
}

TEST_CASE("spectrum_report: noiseless planted data is a single spike") {
    const UnitVector u = seeded_direction(6, 15);
    const auto s = planted_qk_sample(6, 64, 1, u, 2.0, {0.0}, 0.0, 16);
    const auto row = spectrum_report(s.q, 0);
    CHECK(row.abs_means[0] == doctest::Approx(2.0).epsilon(1e-9));
    for (std::size_t m = 1; m < row.abs_means.size(); ++m)
        CHECK(row.abs_means[m] < 1e-9);
    CHECK(row.rank_deficient);  // rank-1 input has null directions
}

TEST_CASE("spectrum_report: planted data dominates every minor direction 10x") {
    const UnitVector u = seeded_direction(16, 17);
    const auto s = planted_qk_sample(16, 3000, 1, u, 2.0, {0.0}, 0.1, 18);
    const auto row = spectrum_report(s.q, 1);
    for (std::size_t m = 1; m < row.abs_means.size(); ++m)
        CHECK(row.abs_means[0] >= 10.0 * row.abs_means[m]);
}

TEST_CASE("spectrum_report: isotropic noise keeps all entries near zero") {
    std::mt19937_64 rng(19);
    const double noise = 0.5;
    std::normal_distribution<double> gauss(0.0, noise);
    const std::size_t n = 4000, d = 8;
    Matrix q(n, d);
    for (double& x : q.data) x = gauss(rng);
    const auto row = spectrum_report(q, 2);
    const double bound = 3.0 * noise / std::sqrt(static_cast<double>(n));
    for (double e : row.abs_means) CHECK(e <= bound);
}

TEST_CASE("spectrum_report: invariant under row permutation") {
    const UnitVector u = seeded_direction(5, 20);
    const auto s = planted_qk_sample(5, 200, 1, u, 1.5, {0.0}, 0.3, 21);
    Matrix shuffled = s.q;
    std::mt19937_64 rng(22);
    std::vector<std::size_t> perm(200);
    for (std::size_t i = 0; i < 200; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t dcol = 0; dcol < 5; ++dcol)
            shuffled.at(i, dcol) = s.q.at(perm[i], dcol);
    const auto a = spectrum_report(s.q, 3);
    const auto b = spectrum_report(shuffled, 3);
    for (std::size_t m = 0; m < a.abs_means.size(); ++m)
        CHECK(std::abs(a.abs_means[m] - b.abs_means[m]) < 1e-6);
}

TEST_CASE("spectrum_report: needs at least d_head rows") {
    CHECK_THROWS_AS(spectrum_report(Matrix(3, 8), 0), InvalidArgument);
}

TEST_CASE("theorem_check: noiseless identity is exact") {
    const UnitVector u = seeded_direction(8, 23);
    std::vector<double> offsets = {-3.0, -1.0, 2.0, 0.5};
    const auto s = planted_qk_sample(8, 32, 4, u, 2.0, offsets, 0.0, 24);
    const auto r = theorem_check(s.q, s.k, u, 2.0);
    CHECK(r.max_abs_err < 1e-9);
    CHECK(r.pearson == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("theorem_check: noisy planted data stays highly linear") {
    const UnitVector u = seeded_direction(16, 25);
    std::mt19937_64 rng(26);
    std::uniform_real_distribution<double> off(-2.0, 2.0);
    std::vector<double> offsets(64);
    for (double& o : offsets) o = off(rng);
    const auto s = planted_qk_sample(16, 3000, 64, u, 2.0, offsets, 0.1, 27);
    const auto r = theorem_check(s.q, s.k, u, 2.0);
    CHECK(r.pearson >= 0.99);
}

TEST_CASE("theorem_check: a random orthogonal filter is a negative control") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const UnitVector u = seeded_direction(32, 30 + seed);
        std::mt19937_64 rng(40 + seed);
        std::uniform_real_distribution<double> off(-2.0, 2.0);
        std::vector<double> offsets(256);
        for (double& o : offsets) o = off(rng);
        const auto s =
            planted_qk_sample(32, 2000, 256, u, 2.0, offsets, 0.1, 50 + seed);
        // Gram–Schmidt a random direction against u
        std::vector<double> w = seeded_direction(32, 60 + seed).data;
        const double proj = dot(w, u.data);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= proj * u.data[i];
        const UnitVector perp = UnitVector::normalized(std::move(w));
        const auto r = theorem_check(s.q, s.k, perp, 2.0);
        worst = std::max(worst, std::abs(r.pearson));
    }
    CHECK(worst <= 0.2);
}

TEST_CASE("theorem_check: needs at least two keys") {
    const UnitVector u = seeded_direction(4, 70);
    const auto s = planted_qk_sample(4, 8, 1, u, 1.0, {0.0}, 0.0, 71);
    CHECK_THROWS_AS(theorem_check(s.q, s.k, u, 1.0), InvalidArgument);
}

TEST_CASE("filter_similarity: diagonal, stability, and orthogonality regimes") {
    auto make_set = [](std::uint64_t dir_seed_base, std::uint64_t sample_seed,
                       double noise) {
        std::vector<std::vector<Matrix>> qm(1);
        for (std::size_t h = 0; h < 2; ++h) {
            const UnitVector u = seeded_direction(64, dir_seed_base + h);
            qm[0].push_back(
                planted_qk_sample(64, 1500, 1, u, 2.0, {0.0}, noise,
                                  sample_seed + h)
                    .q);
        }
        return compute_qfilters(qm, nullptr, 2, 0);
    };
    // same planted directions, disjoint samples, noise = 0.5 * kappa
    const auto a = make_set(900, 10000, 1.0);
    const auto b = make_set(900, 20000, 1.0);
    // unrelated directions
    const auto c = make_set(950, 30000, 0.1);
    const auto sim = filter_similarity({a, b, c}, {"a", "b", "c"});
    CHECK(sim.values.at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sim.values.at(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sim.values.at(0, 1) >= 0.9);
    CHECK(sim.values.at(0, 1) == sim.values.at(1, 0));  // symmetry
    CHECK(sim.values.at(0, 2) <= 0.3);  // near-orthogonal in high dimension
}

TEST_CASE("filter_similarity: shape mismatch is rejected") {
    std::vector<std::vector<Matrix>> qm4 = {
        {planted_qk_sample(4, 64, 1, seeded_direction(4, 1), 1.0, {0.0}, 0.1, 2)
             .q}};
    std::vector<std::vector<Matrix>> qm8 = {
        {planted_qk_sample(8, 64, 1, seeded_direction(8, 3), 1.0, {0.0}, 0.1, 4)
             .q}};
    const auto a = compute_qfilters(qm4, nullptr, 1, 0);
    const auto b = compute_qfilters(qm8, nullptr, 1, 0);
    CHECK_THROWS_AS(filter_similarity({a, b}, {"a", "b"}), InvalidArgument);
}

TEST_CASE("correlation report serializes to JSON and CSV") {
    const auto source = make_planted_source(2, 8, 32, 2.0, 0.2, -1.0, 1.0, 80);
    const auto report = correlation_report_planted(
        source, {PolicyKind::QFilters, PolicyKind::Oracle}, 80);
    const auto j = to_json(report);
    CHECK(j.contains("policies"));
    CHECK(j.contains("mean_rho"));
    const std::string csv = to_csv(report);
    CHECK(csv.find("layer,head,metric,value") != std::string::npos);
    CHECK(csv.find("qfilters") != std::string::npos);
}

TEST_CASE("similarity matrix serializes to JSON and CSV") {
    std::vector<std::vector<Matrix>> qm = {
        {planted_qk_sample(8, 128, 1, seeded_direction(8, 90), 2.0, {0.0}, 0.1,
                           91)
             .q}};
    const auto a = compute_qfilters(qm, nullptr, 1, 0);
    const auto sim = filter_similarity({a, a}, {"x", "y"});
    const auto j = to_json(sim);
    CHECK(j.contains("labels"));
    const std::string csv = to_csv(sim);
    CHECK(csv.find("x") != std::string::npos);
}
