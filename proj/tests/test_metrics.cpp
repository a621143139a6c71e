#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "kdx/metrics.hpp"
#include "oracles.hpp"

using namespace kdx;
namespace fs = std::filesystem;

TEST_CASE("auc anchored case and degenerate conventions") {
    CHECK(*auc_one_vs_rest({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
    CHECK(*auc_one_vs_rest({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    CHECK(*auc_one_vs_rest({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
    // single-class input is undefined, absent rather than zero
    CHECK_FALSE(auc_one_vs_rest({0.1, 0.2}, {1, 1}).has_value());
    CHECK_FALSE(auc_one_vs_rest({0.1, 0.2}, {0, 0}).has_value());
}

TEST_CASE("auc equals the pairwise-counting oracle exactly, ties included") {
    auto rng = std::mt19937_64(2024);
    std::uniform_int_distribution<int> nd(2, 200);
    for (int it = 0; it < 200; ++it) {
        const int n = nd(rng);
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        // quantized scores inject plenty of ties
        std::uniform_int_distribution<int> q(0, 12);
        std::bernoulli_distribution b(0.4);
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            scores[static_cast<std::size_t>(i)] = q(rng) / 12.0;
            labels[static_cast<std::size_t>(i)] = b(rng) ? 1 : 0;
            (labels[static_cast<std::size_t>(i)] ? pos : neg) = true;
        }
        if (!pos || !neg) {
            CHECK_FALSE(auc_one_vs_rest(scores, labels).has_value());
            continue;
        }
        CHECK(*auc_one_vs_rest(scores, labels) == oracle::auc_pairwise(scores, labels));
    }
}

TEST_CASE("auc is invariant under strictly monotone score transforms") {
    auto rng = std::mt19937_64(11);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> scores;
        std::vector<int> labels;
        std::uniform_real_distribution<double> sd(-3.0, 3.0);
        std::bernoulli_distribution b(0.5);
        for (int i = 0; i < 60; ++i) {
            scores.push_back(sd(rng));
            labels.push_back(b(rng) ? 1 : 0);
        }
        auto base = auc_one_vs_rest(scores, labels);
        if (!base.has_value()) continue;
        std::vector<double> warped(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            warped[i] = std::exp(scores[i]) + 3.0 * scores[i];
        }
        CHECK(*auc_one_vs_rest(warped, labels) == doctest::Approx(*base).epsilon(1e-12));
    }
}

TEST_CASE("auc complement symmetry in the binary case") {
    auto rng = std::mt19937_64(31);
    std::uniform_int_distribution<int> q(0, 9);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> scores;
        std::vector<int> labels, flipped;
        for (int i = 0; i < 40; ++i) {
            scores.push_back(q(rng) / 9.0);
            labels.push_back(i % 3 == 0 ? 1 : 0);
            flipped.push_back(1 - labels.back());
        }
        const double a = *auc_one_vs_rest(scores, labels);
        const double b = *auc_one_vs_rest(scores, flipped);
        CHECK(a == doctest::Approx(1.0 - b).epsilon(1e-12));
    }
}

TEST_CASE("f1 from counts") {
    CHECK(f1_from_counts(1, 1, 1) == 0.5);
    CHECK(f1_from_counts(5, 0, 0) == 1.0);
    CHECK(f1_from_counts(0, 0, 0) == 0.0);  // documented degenerate convention
    CHECK(f1_from_counts(0, 3, 2) == 0.0);
}

namespace {

// A split backed by a tiny synthetic set; build once per test binary.
struct EvalFixture {
    fs::path dir;
    DatasetManifest manifest;
    EvalFixture() {
        dir = fs::temp_directory_path() / "kdx_metrics_test";
        fs::remove_all(dir);
        SyntheticSpec spec;
        spec.image_size = 16;
        spec.blob_radius = 2.0;
        spec.noise = 0.05;
        spec.train_per_class = 4;
        spec.val_per_class = 2;
        spec.test_per_class = 6;
        spec.seed = 99;
        manifest = generate_synthetic(spec, (dir / "data").string());
    }
};

}  // namespace

TEST_CASE("evaluate: perfect and random scorers, report round-trip") {
    EvalFixture fx;
    LoadedSplit test = LoadedSplit::load(fx.manifest, SplitRole::Test, 16, 1);
    REQUIRE(test.size() == 18);

    // An untrained model scores near-chance; a report still carries coherent
    // bookkeeping.
    Model net = build_toy_student(5, 1, 16, 16, 3);
    MetricReport r = evaluate(net, test, 8, "cfg-hash", "ckpt-hash");
    CHECK(r.sample_count == 18);
    long row_sum = 0;
    for (int c = 0; c < 3; ++c) {
        long support = 0;
        for (int o = 0; o < 3; ++o) support += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
        CHECK(support == 6);  // confusion row sums equal per-class support
        row_sum += support;
    }
    CHECK(row_sum == r.sample_count);
    long diag = 0;
    for (int c = 0; c < 3; ++c) diag += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(diag) / 18.0));

    const fs::path rp = fx.dir / "report.json";
    r.save(rp);
    const MetricReport back = MetricReport::load(rp);
    CHECK(back.content_hash() == r.content_hash());
    CHECK(back.accuracy == r.accuracy);
    CHECK(back.macro_f1 == r.macro_f1);
    CHECK(back.sample_count == r.sample_count);
    CHECK(back.config_hash == r.config_hash);
    for (int c = 0; c < 3; ++c) {
        CHECK(back.f1[static_cast<std::size_t>(c)] == r.f1[static_cast<std::size_t>(c)]);
        CHECK(back.auc[static_cast<std::size_t>(c)].has_value() == r.auc[static_cast<std::size_t>(c)].has_value());
        if (back.auc[static_cast<std::size_t>(c)].has_value()) {
            CHECK(*back.auc[static_cast<std::size_t>(c)] == *r.auc[static_cast<std::size_t>(c)]);
        }
    }
}

TEST_CASE("uniform-random scorer sits at AUC 0.5 within Monte-Carlo bounds") {
    auto rng = std::mt19937_64(123);
    std::uniform_real_distribution<double> sd(0.0, 1.0);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 2000; ++i) {
        scores.push_back(sd(rng));
        labels.push_back(i % 2);
    }
    CHECK(std::fabs(*auc_one_vs_rest(scores, labels) - 0.5) < 0.05);
}

TEST_CASE("evaluate rejects class mismatch and empty splits") {
    EvalFixture fx;
    LoadedSplit test = LoadedSplit::load(fx.manifest, SplitRole::Test, 16, 1);
    Model wrong = build_toy_student(5, 1, 16, 16, 4);
    CHECK_THROWS_AS(evaluate(wrong, test, 8), ShapeError);
}

TEST_CASE("comparison grid renders one row per report") {
    EvalFixture fx;
    LoadedSplit test = LoadedSplit::load(fx.manifest, SplitRole::Test, 16, 1);
    Model net = build_toy_student(5, 1, 16, 16, 3);
    MetricReport r = evaluate(net, test, 8);
    const std::string grid = render_comparison({{"teacher", r}, {"student", r}});
    CHECK(grid.find("teacher") != std::string::npos);
    CHECK(grid.find("student") != std::string::npos);
}
