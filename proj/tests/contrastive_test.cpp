#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cat/contrastive.hpp"
#include "cat/errors.hpp"
#include "cat/rng.hpp"
#include "cat/tensor.hpp"

using namespace cat;

namespace {

// Direct evaluation with an explicit loop over anchors and candidates,
// deliberately sharing nothing with the graph implementation.
double nt_xent_oracle(const std::vector<std::vector<double>>& clean,
                      const std::vector<std::vector<double>>& adv, double tau) {
    std::vector<std::vector<double>> views = clean;
    views.insert(views.end(), adv.begin(), adv.end());
    const size_t m = views.size();
    const size_t n = clean.size();
    auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    double total = 0.0;
    for (size_t i = 0; i < m; ++i) {
        const size_t partner = i < n ? i + n : i - n;
        const double num = std::exp(cos(views[i], views[partner]) / tau);
        double den = 0.0;
        for (size_t k = 0; k < m; ++k)
            if (k != i) den += std::exp(cos(views[i], views[k]) / tau);
        total += -std::log(num / den);
    }
    return total / static_cast<double>(m);
}

std::vector<std::vector<double>> random_views(uint64_t seed, size_t n, size_t d) {
    Rng rng(seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (auto& row : out)
        for (double& v : row) v = rng.normal();
    return out;
}

std::vector<double> flatten_views(const std::vector<std::vector<double>>& views) {
    std::vector<double> flat;
    for (const auto& row : views) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
}

double nt_xent_value(const std::vector<std::vector<double>>& clean,
                     const std::vector<std::vector<double>>& adv, double tau) {
    Graph g;
    const int64_t n = static_cast<int64_t>(clean.size());
    const int64_t d = static_cast<int64_t>(clean[0].size());
    Tensor zc = g.leaf({n, d}, flatten_views(clean));
    Tensor za = g.leaf({n, d}, flatten_views(adv));
    return nt_xent(g, zc, za, tau).scalar();
}

}  // namespace

TEST_CASE("project") {
    SUBCASE("identity weights pass nonnegative inputs through") {
        Graph g;
        Tensor h = g.leaf({2, 2}, {1.0, 2.0, 0.5, 0.0});
        Tensor eye = g.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
        auto z = project(g, h, eye, eye).values();
        CHECK(z[0] == 1.0);
        CHECK(z[1] == 2.0);
        CHECK(z[2] == 0.5);
        CHECK(z[3] == 0.0);
    }
    SUBCASE("all-negative inputs die at the relu") {
        Graph g;
        Tensor h = g.leaf({1, 2}, {-1.0, -2.0});
        Tensor eye = g.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
        Tensor w2 = g.leaf({3, 2}, {0.3, -0.4, 1.5, 2.0, -0.7, 0.1});
        for (double v : project(g, h, eye, w2).values()) CHECK(v == 0.0);
    }
    SUBCASE("positive homogeneity") {
        Graph g;
        Rng rng(4);
        std::vector<double> hv(6), w1v(9), w2v(6);
        for (double& v : hv) v = rng.normal();
        for (double& v : w1v) v = rng.normal();
        for (double& v : w2v) v = rng.normal();
        Tensor h = g.leaf({2, 3}, hv);
        Tensor w1 = g.leaf({3, 3}, w1v);
        Tensor w2 = g.leaf({2, 3}, w2v);
        Tensor z1 = project(g, h, w1, w2);
        Tensor z2 = project(g, g.scale(h, 2.0), w1, w2);
        for (size_t i = 0; i < z1.values().size(); ++i)
            CHECK(z2.values()[i] == doctest::Approx(2.0 * z1.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("nt_xent matches the brute-force oracle") {
    for (size_t n = 1; n <= 8; ++n) {
        for (uint64_t seed = 0; seed < 4; ++seed) {
            auto clean = random_views(1000 + 10 * n + seed, n, 5);
            auto adv = random_views(2000 + 10 * n + seed, n, 5);
            const double tau = 0.05 + 0.1 * static_cast<double>(seed % 3);
            const double got = nt_xent_value(clean, adv, tau);
            const double want = nt_xent_oracle(clean, adv, tau);
            CAPTURE(n);
            CAPTURE(seed);
            CHECK(got == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("nt_xent closed-form cases") {
    SUBCASE("a single pair costs exactly zero") {
        auto clean = random_views(7, 1, 4);
        auto adv = random_views(8, 1, 4);
        CHECK(nt_xent_value(clean, adv, 0.1) == 0.0);
    }
    SUBCASE("two identical pairs with orthogonal cross terms at tau 0.1") {
        std::vector<std::vector<double>> clean = {{1.0, 0.0}, {0.0, 1.0}};
        const double loss = nt_xent_value(clean, clean, 0.1);
        CHECK(loss == doctest::Approx(std::log1p(2.0 * std::exp(-10.0))).epsilon(1e-12));
        CHECK(std::abs(loss - 9.0796e-05) < 1e-9);
    }
    SUBCASE("all views identical costs ln(2N-1) at any temperature") {
        for (double tau : {0.05, 0.1, 0.7}) {
            for (size_t n : {2ul, 3ul, 5ul}) {
                std::vector<std::vector<double>> same(n, {0.3, -0.4, 0.6});
                CHECK(nt_xent_value(same, same, tau) ==
                      doctest::Approx(std::log(static_cast<double>(2 * n - 1)))
                          .epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("nt_xent properties") {
    auto clean = random_views(31, 4, 6);
    auto adv = random_views(32, 4, 6);
    const double base = nt_xent_value(clean, adv, 0.1);

    SUBCASE("rescaling one view leaves the loss unchanged") {
        auto scaled = adv;
        for (double& v : scaled[2]) v *= 7.5;
        CHECK(nt_xent_value(clean, scaled, 0.1) == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("swapping the clean and adversarial roles leaves the loss unchanged") {
        CHECK(nt_xent_value(adv, clean, 0.1) == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("temperature is not inert") {
        CHECK(std::abs(nt_xent_value(clean, adv, 0.5) - base) > 1e-6);
    }
    SUBCASE("zero-norm rows are rejected with the row index") {
        Graph g;
        Tensor zc = g.leaf({2, 2}, {1.0, 0.0, 0.0, 0.0});
        Tensor za = g.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
        CHECK_THROWS_WITH_AS(nt_xent(g, zc, za, 0.1), doctest::Contains("row 1"),
                             NumericError);
    }
    SUBCASE("mismatched view shapes are rejected") {
        Graph g;
        Tensor zc = g.zeros({2, 3});
        Tensor za = g.zeros({3, 3});
        CHECK_THROWS_AS(nt_xent(g, zc, za, 0.1), std::invalid_argument);
    }
    SUBCASE("non-positive temperature is rejected") {
        Graph g;
        Tensor zc = g.leaf({1, 2}, {1.0, 0.0});
        CHECK_THROWS_AS(nt_xent(g, zc, zc, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(nt_xent(g, zc, zc, -0.1), std::invalid_argument);
    }
}

TEST_CASE("gradient through project and nt_xent matches finite differences") {
    const int64_t n = 3, d_h = 4, d_k = 3;
    // Seed chosen so no coordinate has a near-zero gradient: the relative
    // error criterion is meaningless where central differences only see
    // cancellation noise.
    Rng rng(72);
    Array point = Array::zeros({2 * n * d_h + d_h * d_h + d_k * d_h});
    for (double& v : point.values) v = rng.normal();

    FdiffReport rep = finite_difference_check(
        [n, d_h, d_k](Graph& g, Tensor flat) {
            Tensor row = g.reshape(flat, {1, flat.numel()});
            int64_t at = 0;
            auto take = [&](int64_t r, int64_t c) {
                Tensor t = g.reshape(g.slice_cols(row, at, r * c), {r, c});
                at += r * c;
                return t;
            };
            Tensor h_clean = take(n, d_h);
            Tensor h_adv = take(n, d_h);
            Tensor w1 = take(d_h, d_h);
            Tensor w2 = take(d_k, d_h);
            Tensor zc = project(g, h_clean, w1, w2);
            Tensor za = project(g, h_adv, w1, w2);
            return nt_xent(g, zc, za, 0.1);
        },
        point, 1e-5);
    CAPTURE(rep.worst_coordinate);
    CHECK_FALSE(rep.non_finite);
    CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("projection params and contrastive config") {
    ProjectionParams a = ProjectionParams::init(8, 4, 9);
    ProjectionParams b = ProjectionParams::init(8, 4, 9);
    CHECK(a.w1.values == b.w1.values);
    CHECK(a.w2.values == b.w2.values);
    CHECK(a.d_k() == 4);
    CHECK(a.all_finite());
    CHECK(a.w1.shape == Shape{8, 8});
    CHECK(a.w2.shape == Shape{4, 8});

    ContrastiveConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = ContrastiveConfig{};
    cfg.lambda = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
