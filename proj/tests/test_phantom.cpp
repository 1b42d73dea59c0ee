// Synthetic phantoms and analytic warps.

#include <cmath>
#include <numbers>

#include "doctest.h"

#include "oracles.hpp"
#include "symgrad/losses.hpp"
#include "symgrad/metrics.hpp"
#include "symgrad/phantom.hpp"

using namespace symgrad;

TEST_CASE("empty phantom is uniform background") {
    PhantomSpec s;
    s.dims = {6, 5, 4};
    s.background = 3.5;
    const auto [img, lab] = make_phantom(s);
    CHECK(std::all_of(img.data.begin(), img.data.end(), [](double v) { return v == 3.5; }));
    CHECK(std::all_of(lab.labels.begin(), lab.labels.end(), [](auto v) { return v == 0; }));
}

TEST_CASE("ellipsoid voxel count matches membership") {
    PhantomSpec s;
    s.dims = {21, 21, 21};
    s.ellipsoids.push_back({{10, 10, 10}, {6.5, 6.5, 6.5}, 3, 1.0});
    const auto [img, lab] = make_phantom(s);
    std::size_t expected = 0;
    for (int z = 0; z < 21; ++z) {
        for (int y = 0; y < 21; ++y) {
            for (int x = 0; x < 21; ++x) {
                const double r2 = (x - 10.0) * (x - 10.0) + (y - 10.0) * (y - 10.0) + (z - 10.0) * (z - 10.0);
                expected += r2 <= 6.5 * 6.5 ? 1 : 0;
            }
        }
    }
    CHECK(std::count(lab.labels.begin(), lab.labels.end(), 3) == static_cast<long>(expected));
}

TEST_CASE("later ellipsoids overwrite earlier ones") {
    PhantomSpec s;
    s.dims = {11, 11, 11};
    s.ellipsoids.push_back({{5, 5, 5}, {4, 4, 4}, 1, 1.0});
    s.ellipsoids.push_back({{5, 5, 5}, {2, 2, 2}, 2, 2.0});
    const auto [img, lab] = make_phantom(s);
    CHECK(lab.at(5, 5, 5) == 2);
    CHECK(img.at(0, 5, 5, 5) == 2.0);
    CHECK(lab.at(5, 5, 8) == 1);
}

TEST_CASE("phantom generation is deterministic per seed") {
    PhantomSpec s = abdominal_phantom(Dims{16, 16, 16}, 42);
    const auto a = make_phantom(s), b = make_phantom(s);
    CHECK(a.first.data == b.first.data);
    CHECK(a.second.labels == b.second.labels);
    s.seed = 43;
    CHECK(make_phantom(s).first.data != a.first.data);
}

TEST_CASE("noise generator") {
    Lcg64 g(0);
    CHECK(g.next() == 1442695040888963407ULL);
    Lcg64 h(7);
    double mean = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = h.gaussian();
        mean += v;
        sq += v * v;
    }
    mean /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("phantom validation") {
    PhantomSpec s;
    s.dims = {10, 10, 10};
    s.ellipsoids.push_back({{5, 5, 5}, {2, 2, 2}, 1, 1.0});
    CHECK_NOTHROW(s.validate());
    auto dup = s;
    dup.ellipsoids.push_back({{4, 4, 4}, {1, 1, 1}, 1, 1.0});
    CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
    auto zero = s;
    zero.ellipsoids[0].label = 0;
    CHECK_THROWS_AS(zero.validate(), std::invalid_argument);
    auto out = s;
    out.ellipsoids[0].center = {8, 5, 5};
    CHECK_THROWS_WITH_AS(make_phantom(out), doctest::Contains("leaves the volume"), std::invalid_argument);
    auto flat = s;
    flat.ellipsoids[0].semi_axes = {0, 1, 1};
    CHECK_THROWS_AS(flat.validate(), std::invalid_argument);
    auto inf = s;
    inf.ellipsoids[0].intensity = INFINITY;
    CHECK_THROWS_AS(inf.validate(), std::invalid_argument);
}

TEST_CASE("analytic warps") {
    const Dims d{12, 24, 6};
    SUBCASE("zero amplitude is the identity pair") {
        const auto [f, g] = analytic_field(AnalyticWarp{WarpKind::sinusoidal, 0.0, 24.0}, d);
        CHECK(f == identity_field(d));
        CHECK(g == identity_field(d));
    }
    SUBCASE("translation") {
        const auto [f, g] = analytic_field(AnalyticWarp{WarpKind::translation, 2.0, 0.0}, d);
        CHECK(f.at(0, 3, 4, 5) == 5.0);
        CHECK(g.at(0, 3, 4, 5) == 1.0);
        CHECK(f.at(1, 3, 4, 5) == 4.0);
    }
    SUBCASE("sinusoidal inverse composes to the identity inside") {
        const AnalyticWarp w{WarpKind::sinusoidal, 3.0, 24.0};
        const auto [f, g] = analytic_field(w, d);
        CHECK(f.at(0, 5, 6, 0) == doctest::Approx(8.0));
        CHECK(oracle::composition_error(f, g, 3) < 1e-6);
        CHECK(loss_inv(f, g, 3).value < 1e-6);
        const Volume det = jacobian_det(f);
        for (int z = 1; z < d.nz - 1; ++z) {
            for (int y = 1; y < d.ny - 1; ++y) {
                for (int x = 1; x < d.nx - 1; ++x) {
                    CHECK(det.at(0, x, y, z) == doctest::Approx(1.0).epsilon(1e-12));
                }
            }
        }
    }
    CHECK_THROWS_AS(analytic_field(AnalyticWarp{WarpKind::sinusoidal, 4.0, 24.0}, d), std::invalid_argument);
    CHECK_THROWS_AS(analytic_field(AnalyticWarp{WarpKind::sinusoidal, 1.0, 0.0}, d), std::invalid_argument);
}

TEST_CASE("phantom pairs") {
    PhantomSpec s;
    s.dims = {16, 12, 12};
    s.ellipsoids.push_back({{7, 6, 6}, {3, 3, 3}, 1, 1.0});
    SUBCASE("identity warp keeps the pair equal") {
        const auto p = make_pair(s, AnalyticWarp{WarpKind::translation, 0.0, 0.0});
        CHECK(p.moving.data == p.fixed.data);
        CHECK(p.moving_labels.labels == p.fixed_labels.labels);
    }
    SUBCASE("translation by two shifts the labels") {
        const auto p = make_pair(s, AnalyticWarp{WarpKind::translation, 2.0, 0.0});
        for (int z = 0; z < 12; ++z) {
            for (int y = 0; y < 12; ++y) {
                for (int x = 0; x < 14; ++x) {
                    CHECK(p.moving_labels.at(x, y, z) == p.fixed_labels.at(x + 2, y, z));
                }
            }
        }
        const double dc = dice(p.fixed_labels, p.moving_labels, 1);
        CHECK(dc < 1.0);
        CHECK(dc == oracle::dice(p.fixed_labels, p.moving_labels, 1));
    }
}

TEST_CASE("phantom and warp json") {
    const auto s = phantom_spec_from_json_text(
        R"({"dims":[10,10,10],"background":0.5,"noise_sigma":0.1,"seed":3,
            "ellipsoids":[{"center":[5,5,5],"semi_axes":[2,3,2],"label":4,"intensity":2}]})");
    CHECK(s.dims == Dims{10, 10, 10});
    CHECK(s.ellipsoids.size() == 1);
    CHECK(s.ellipsoids[0].label == 4);
    CHECK(s.seed == 3);
    const auto w = analytic_warp_from_json_text(R"({"kind":"translation","amplitude":1.5})");
    CHECK(w.kind == WarpKind::translation);
    CHECK(w.amplitude == 1.5);
    CHECK_THROWS_AS(analytic_warp_from_json_text(R"({"kind":"twist"})"), std::invalid_argument);
    CHECK_THROWS_AS(phantom_spec_from_json_text(R"({"dims":[10,10]})"), std::invalid_argument);
    CHECK_THROWS_AS(phantom_spec_from_json_text("nope"), std::invalid_argument);
}
