#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kdx/losses.hpp"
#include "oracles.hpp"

using namespace kdx;

namespace {

Matrix single(double v) {
    Matrix m(1, 1);
    m.data[0] = v;
    return m;
}

}  // namespace

TEST_CASE("sigmoid values and stability") {
    CHECK(stable_sigmoid(0.0) == doctest::Approx(0.5).epsilon(1e-15));
    // hand-evaluated 1/(1+e^-4) to 16 digits
    CHECK(stable_sigmoid(4.0) == doctest::Approx(0.9820137900379084).epsilon(1e-13));
    CHECK(stable_sigmoid(40.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(stable_sigmoid(700.0) == 1.0);
    CHECK(stable_sigmoid(-700.0) > 0.0);
    CHECK(std::isfinite(stable_sigmoid(-700.0)));
    CHECK(stable_sigmoid(-40.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("bce on hand-evaluated cases") {
    Matrix y = single(1.0);
    CHECK(bce_loss(single(0.5), y) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_loss(single(1.0 - 1e-7), y) <= 1e-6);

    Matrix p(1, 2);
    p.data = {0.9, 0.2};
    Matrix labels(1, 2);
    labels.data = {1.0, 0.0};
    // mean(-ln 0.9, -ln 0.8)
    CHECK(bce_loss(p, labels) == doctest::Approx(0.16425203348601803).epsilon(1e-12));
}

TEST_CASE("bce rejects shape mismatch") {
    Matrix p(2, 2, 0.5);
    Matrix y(2, 3, 0.0);
    CHECK_THROWS_AS(bce_loss(p, y), ShapeError);
}

TEST_CASE("fbce hand-evaluated value and perfect-prediction decay") {
    // 0.25 * ln 2
    CHECK(fbce_loss(single(0.5), single(1.0), 2.0) ==
          doctest::Approx(0.17328679513998632).epsilon(1e-12));
    // modulating factor <= 1, so fbce <= bce at any gamma > 0
    const double b = bce_loss(single(1.0 - 1e-7), single(1.0));
    for (double g : {0.5, 1.0, 2.0, 5.0}) {
        CHECK(fbce_loss(single(1.0 - 1e-7), single(1.0), g) <= b);
    }
}

TEST_CASE("fbce with gamma 0 equals the textbook bce on 1000 random batches") {
    auto rng = std::mt19937_64(20250810);
    std::uniform_int_distribution<int> dim(1, 6);
    for (int it = 0; it < 1000; ++it) {
        const int B = dim(rng), C = dim(rng);
        const Matrix p = oracle::random_probs(rng, B, C);
        const Matrix y = oracle::random_binary_labels(rng, B, C);
        const double ref = oracle::bce_reference(p, y);
        const double fb = fbce_loss(p, y, 0.0);
        const double b = bce_loss(p, y);
        CHECK(std::fabs(fb - ref) <= 1e-12 * std::max(1.0, std::fabs(ref)));
        CHECK(std::fabs(b - ref) <= 1e-12 * std::max(1.0, std::fabs(ref)));
    }
}

TEST_CASE("fbce focusing is elementwise monotone in gamma") {
    auto rng = std::mt19937_64(7);
    std::uniform_real_distribution<double> pd(1e-6, 1.0 - 1e-6);
    for (int it = 0; it < 500; ++it) {
        const double p = pd(rng);
        const int y = it % 2;
        double g1 = std::uniform_real_distribution<double>(0.0, 4.0)(rng);
        double g2 = g1 + std::uniform_real_distribution<double>(0.01, 4.0)(rng);
        CHECK(fbce_element(p, y, g2) <= fbce_element(p, y, g1) + 1e-15);
    }
}

TEST_CASE("fbce rejects negative gamma at config construction") {
    CHECK_THROWS_AS(LossConfig(0.5, -1.0, 2.0, LossVariant::FbceMse), ConfigError);
    CHECK_THROWS_AS(fbce_loss(single(0.5), single(1.0), -0.5), ConfigError);
}

TEST_CASE("loss config validation bounds") {
    CHECK_THROWS_AS(LossConfig(-0.1, 2.0, 2.0, LossVariant::FbceMse), ConfigError);
    CHECK_THROWS_AS(LossConfig(1.1, 2.0, 2.0, LossVariant::FbceMse), ConfigError);
    CHECK_THROWS_AS(LossConfig(0.5, 2.0, 0.0, LossVariant::FbceMse), ConfigError);
    CHECK_THROWS_AS(LossConfig(0.5, 2.0, -1.0, LossVariant::FbceMse), ConfigError);
    CHECK_NOTHROW(LossConfig(0.0, 0.0, 1e-6, LossVariant::FbceMse));
}

TEST_CASE("mse distill loss: zero at identity, hand value, temperature limit") {
    Matrix a(2, 3);
    a.data = {0.3, -1.0, 4.0, 2.0, 0.0, -2.5};
    CHECK(mse_distill_loss(a, a, 3.7) == 0.0);

    // sigma(0)=0.5 vs sigma(4): (0.5 - 0.98201379...)^2
    CHECK(mse_distill_loss(single(0.0), single(4.0), 1.0) ==
          doctest::Approx(0.23233729378670888).epsilon(1e-12));

    // T -> inf limit: T^2 (sigma(s/T)-sigma(t/T))^2 -> (s-t)^2/16
    CHECK(std::fabs(mse_distill_loss(single(0.0), single(4.0), 1e4) - 1.0) < 1e-4);

    CHECK_THROWS_AS(mse_distill_loss(single(0.0), single(1.0), 0.0), ConfigError);
    Matrix b(1, 2, 0.0);
    CHECK_THROWS_AS(mse_distill_loss(single(0.0), b, 1.0), ShapeError);
}

TEST_CASE("temperature limit holds over random batches with |logit| <= 8") {
    auto rng = std::mt19937_64(99);
    std::uniform_int_distribution<int> dim(1, 8);
    for (int it = 0; it < 100; ++it) {
        const int B = dim(rng), C = dim(rng);
        const Matrix s = oracle::random_logits(rng, B, C, 8.0);
        const Matrix t = oracle::random_logits(rng, B, C, 8.0);
        double limit = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double d = s.data[i] - t.data[i];
            limit += d * d;
        }
        limit /= 16.0 * static_cast<double>(s.size());
        CHECK(std::fabs(mse_distill_loss(s, t, 1e4) - limit) < 1e-4);
    }
}

TEST_CASE("kd loss composes its terms and honors the alpha boundaries") {
    const Matrix s = single(0.0);
    const Matrix t = single(4.0);
    const Matrix y = single(1.0);

    SUBCASE("alpha=0.5, gamma=2, T=1: composition of the two hand values") {
        LossValue v = kd_loss(s, t, y, LossConfig(0.5, 2.0, 1.0, LossVariant::FbceMse));
        CHECK(v.total == doctest::Approx(0.20281204446334761).epsilon(1e-12));
        CHECK(v.supervised == doctest::Approx(0.17328679513998632).epsilon(1e-12));
        CHECK(v.distill == doctest::Approx(0.23233729378670888).epsilon(1e-12));
    }
    SUBCASE("alpha=1 reduces to the supervised term") {
        LossValue v = kd_loss(s, t, y, LossConfig(1.0, 2.0, 1.0, LossVariant::FbceMse));
        CHECK(v.total == v.supervised);
        CHECK(v.distill > 0.0);  // reported but weighted out
    }
    SUBCASE("alpha=0 reduces to the distill term") {
        LossValue v = kd_loss(s, t, y, LossConfig(0.0, 2.0, 1.0, LossVariant::FbceMse));
        CHECK(v.total == v.distill);
    }
}

TEST_CASE("kd loss decomposition and convex-combination bound on random batches") {
    auto rng = std::mt19937_64(42);
    std::uniform_int_distribution<int> dim(1, 8);
    std::uniform_real_distribution<double> ad(0.0, 1.0);
    for (int it = 0; it < 300; ++it) {
        const int B = dim(rng), C = dim(rng);
        const Matrix s = oracle::random_logits(rng, B, C);
        const Matrix t = oracle::random_logits(rng, B, C);
        const Matrix y = oracle::random_binary_labels(rng, B, C);
        const LossConfig cfg(ad(rng), 2.0, 2.0, LossVariant::FbceMse);
        const LossValue v = kd_loss(s, t, y, cfg);
        const double recomposed = cfg.alpha * v.supervised + (1.0 - cfg.alpha) * v.distill;
        CHECK(std::fabs(v.total - recomposed) <= 1e-12 * std::max(1.0, std::fabs(v.total)));
        CHECK(v.total >= std::min(v.supervised, v.distill) - 1e-15);
        CHECK(v.total <= std::max(v.supervised, v.distill) + 1e-15);
        CHECK(v.total >= 0.0);
        CHECK(v.supervised >= 0.0);
        CHECK(v.distill >= 0.0);
    }
}

TEST_CASE("kd gradient matches central finite differences (fbce_mse)") {
    auto rng = std::mt19937_64(1234);
    const int dims[] = {1, 3, 8};
    std::uniform_real_distribution<double> ad(0.0, 1.0);
    std::uniform_real_distribution<double> gd(0.0, 3.0);
    std::uniform_real_distribution<double> td(0.5, 5.0);
    for (int it = 0; it < 60; ++it) {
        const int B = dims[static_cast<std::size_t>(it) % 3];
        const int C = dims[(static_cast<std::size_t>(it) / 3) % 3];
        const Matrix s = oracle::random_logits(rng, B, C);
        const Matrix t = oracle::random_logits(rng, B, C);
        const Matrix y = oracle::random_binary_labels(rng, B, C);
        const LossConfig cfg(ad(rng), gd(rng), td(rng), LossVariant::FbceMse);
        const LossValue v = kd_loss(s, t, y, cfg);
        const Matrix fd = oracle::central_diff_gradient(
            [&](const Matrix& x) { return kd_loss(x, t, y, cfg).total; }, s);
        CHECK(oracle::max_rel_err(v.gradient, fd) < 1e-4);
    }
}

TEST_CASE("kd gradient matches central finite differences (ce_kl)") {
    auto rng = std::mt19937_64(4321);
    const int dims[] = {1, 3, 8};
    std::uniform_real_distribution<double> ad(0.0, 1.0);
    std::uniform_real_distribution<double> td(0.5, 5.0);
    for (int it = 0; it < 40; ++it) {
        const int B = dims[static_cast<std::size_t>(it) % 3];
        const int C = 1 + dims[(static_cast<std::size_t>(it) / 3) % 3];
        const Matrix s = oracle::random_logits(rng, B, C);
        const Matrix t = oracle::random_logits(rng, B, C);
        const Matrix y = oracle::random_one_hot_labels(rng, B, C);
        const LossConfig cfg(ad(rng), 0.0, td(rng), LossVariant::CeKl);
        const LossValue v = kd_loss(s, t, y, cfg);
        const Matrix fd = oracle::central_diff_gradient(
            [&](const Matrix& x) { return ce_kl_loss(x, t, y, cfg).total; }, s);
        CHECK(oracle::max_rel_err(v.gradient, fd) < 1e-4);
    }
}

TEST_CASE("ce_kl hand-evaluated cases") {
    SUBCASE("identical logits at alpha=0 give zero") {
        Matrix s(1, 3);
        s.data = {0.2, -1.0, 0.7};
        Matrix y(1, 3);
        y.at(0, 1) = 1.0;
        LossValue v = ce_kl_loss(s, s, y, LossConfig(0.0, 0.0, 2.0, LossVariant::CeKl));
        CHECK(v.total == 0.0);
    }
    SUBCASE("uniform logits, alpha=1, C=4: CE = ln 4") {
        Matrix s(1, 4, 0.0);
        Matrix t(1, 4, 0.0);
        Matrix y(1, 4);
        y.at(0, 2) = 1.0;
        LossValue v = ce_kl_loss(s, t, y, LossConfig(1.0, 0.0, 1.0, LossVariant::CeKl));
        CHECK(v.total == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("swapped two-logit pair, alpha=0, T=1: hand-evaluated KL") {
        Matrix s(1, 2);
        s.data = {1.0, 0.0};
        Matrix t(1, 2);
        t.data = {0.0, 1.0};
        Matrix y(1, 2);
        y.at(0, 0) = 1.0;
        LossValue v = ce_kl_loss(s, t, y, LossConfig(0.0, 0.0, 1.0, LossVariant::CeKl));
        CHECK(v.total == doctest::Approx(0.46211715726000976).epsilon(1e-12));
    }
    SUBCASE("non-one-hot labels rejected") {
        Matrix s(1, 3, 0.0);
        Matrix y(1, 3, 1.0);
        CHECK_THROWS(ce_kl_loss(s, s, y, LossConfig(0.5, 0.0, 1.0, LossVariant::CeKl)));
    }
}

TEST_CASE("teacher logits are constants: only the distill term reacts to them") {
    auto rng = std::mt19937_64(555);
    const Matrix s = oracle::random_logits(rng, 4, 3);
    const Matrix t1 = oracle::random_logits(rng, 4, 3);
    const Matrix t2 = oracle::random_logits(rng, 4, 3);
    const Matrix y = oracle::random_binary_labels(rng, 4, 3);

    SUBCASE("with alpha=1 the gradient ignores the teacher entirely") {
        const LossConfig cfg(1.0, 2.0, 2.0, LossVariant::FbceMse);
        const LossValue a = kd_loss(s, t1, y, cfg);
        const LossValue b = kd_loss(s, t2, y, cfg);
        for (std::size_t i = 0; i < a.gradient.size(); ++i) {
            CHECK(a.gradient.data[i] == b.gradient.data[i]);
        }
        CHECK(a.supervised == b.supervised);
    }
    SUBCASE("gradient difference across teachers is exactly the distill part") {
        const LossConfig cfg(0.3, 2.0, 2.0, LossVariant::FbceMse);
        const LossValue a = kd_loss(s, t1, y, cfg);
        const LossValue b = kd_loss(s, t2, y, cfg);
        const LossConfig mse_only(0.0, 2.0, 2.0, LossVariant::FbceMse);
        const LossValue da = kd_loss(s, t1, y, mse_only);
        const LossValue db = kd_loss(s, t2, y, mse_only);
        for (std::size_t i = 0; i < a.gradient.size(); ++i) {
            const double lhs = a.gradient.data[i] - b.gradient.data[i];
            const double rhs = (1.0 - cfg.alpha) * (da.gradient.data[i] - db.gradient.data[i]);
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        }
    }
}

TEST_CASE("kd loss is zero only for perfect saturated predictions with a matching teacher") {
    Matrix s(1, 2);
    s.data = {40.0, -40.0};  // saturated, correct
    Matrix y(1, 2);
    y.data = {1.0, 0.0};
    const LossConfig cfg(0.5, 2.0, 2.0, LossVariant::FbceMse);
    const LossValue perfect = kd_loss(s, s, y, cfg);
    CHECK(perfect.distill == 0.0);
    CHECK(perfect.total <= 1e-6);  // clamp at 1e-7 keeps a vanishing residue

    Matrix t(1, 2);
    t.data = {40.0, 0.0};  // teacher disagrees
    CHECK(kd_loss(s, t, y, cfg).total > 1e-4);
    Matrix wrong(1, 2);
    wrong.data = {-40.0, 40.0};
    CHECK(kd_loss(wrong, wrong, y, cfg).total > 1.0);
}

TEST_CASE("supervised_loss equals the alpha=1 objective") {
    auto rng = std::mt19937_64(777);
    const Matrix s = oracle::random_logits(rng, 3, 4);
    const Matrix y = oracle::random_binary_labels(rng, 3, 4);
    const LossConfig cfg(0.25, 1.5, 3.0, LossVariant::FbceMse);
    const LossValue sup = supervised_loss(s, y, cfg);
    const LossValue full = kd_loss(s, s, y, cfg);
    CHECK(sup.total == full.supervised);
    CHECK(sup.distill == 0.0);
    CHECK(sup.supervised == doctest::Approx(fbce_loss(sigmoid(s), y, cfg.gamma)).epsilon(1e-12));
}
