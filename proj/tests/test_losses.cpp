// Loss terms: analytic values, accumulation oracles, symmetry and gradient agreement.

#include "doctest.h"

#include "oracles.hpp"
#include "symgrad/losses.hpp"

using namespace symgrad;

namespace {

DeformationField shifted(const Dims &d, double dx) {
    auto f = identity_field(d);
    for (double &v : f.channel(0)) {
        v += dx;
    }
    return f;
}

Volume indicator(const Dims &d, const std::vector<int> &on) {
    Volume v(d, 1);
    for (int i : on) {
        v.data[static_cast<std::size_t>(i)] = 1.0;
    }
    return v;
}

double brute_mse(const Volume &p, const Volume &q) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        const long double r = static_cast<long double>(p.data[i]) - q.data[i];
        acc += r * r;
    }
    return static_cast<double>(acc / p.data.size());
}

} // namespace

TEST_CASE("loss weights") {
    LossWeights w;
    CHECK(w.alpha == 1.0);
    CHECK(w.beta == 1.0);
    CHECK(w.gamma == 0.1);
    CHECK(w.delta == 0.01);
    CHECK(w.epsilon == 10.0);
    CHECK_NOTHROW(w.validate());
    w.gamma = -1.0;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    w.gamma = std::nan("");
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("similarity") {
    const Dims d{3, 3, 3};
    oracle::Rng rng(1);
    const Volume a = oracle::random_volume(d, 2, rng), b = oracle::random_volume(d, 2, rng);
    CHECK(loss_sim(b, b, a, a).value == 0.0);
    const Volume zero(d, 1), one(d, 1, {1, 1, 1}, 1.0);
    CHECK(loss_sim(one, zero, zero, zero).value == 1.0);
    const Volume aw = oracle::random_volume(d, 2, rng), bw = oracle::random_volume(d, 2, rng);
    const auto s = loss_sim(aw, b, bw, a);
    CHECK(std::abs(s.value - (brute_mse(aw, b) + brute_mse(bw, a))) < 1e-12);
    for (std::size_t i = 0; i < aw.data.size(); ++i) {
        CHECK(s.d_a_warp.data[i] == doctest::Approx(2.0 * (aw.data[i] - b.data[i]) / aw.data.size()));
    }
    CHECK_THROWS_AS(loss_sim(aw, Volume(d, 1), bw, a), std::invalid_argument);
}

TEST_CASE("segmentation dice") {
    const Dims d{4, 4, 1};
    const Volume p = indicator(d, {0, 1, 2, 3});
    CHECK(loss_seg(p, p, p, p).value < 1e-5);
    const Volume q = indicator(d, {8, 9, 10, 11});
    const auto disjoint = loss_seg(p, q, p, p);
    CHECK(disjoint.value == doctest::Approx(1.0).epsilon(1e-5));
    const Volume h = indicator(d, {2, 3, 4, 5});
    const auto half = loss_seg(p, h, p, p);
    CHECK(half.value == doctest::Approx(0.5).epsilon(1e-5));
    Volume two(d, 2);
    CHECK_THROWS_AS(loss_seg(p, two, p, p), std::invalid_argument);
}

TEST_CASE("segmentation gradient") {
    oracle::Rng rng(2);
    const Dims d{3, 4, 3};
    const Volume aw = oracle::random_volume(d, 3, rng), b = oracle::random_volume(d, 3, rng);
    const Volume bw = oracle::random_volume(d, 3, rng), a = oracle::random_volume(d, 3, rng);
    const auto s = loss_seg(aw, b, bw, a);
    for (int k = 0; k < 3; ++k) {
        const auto dir = oracle::unit_direction(aw.data.size(), rng);
        auto f = [&](const std::vector<double> &x) {
            Volume v = aw;
            v.data = x;
            return loss_seg(v, b, bw, a).value;
        };
        const double num = oracle::directional_fd(f, aw.data, dir, 1e-6);
        CHECK(oracle::rel_err(oracle::dot(s.d_a_warp.data, dir), num) < 1e-6);
    }
}

TEST_CASE("smoothness") {
    const Dims d{3, 3, 3};
    CHECK(loss_reg(GradientField(d, 1.0), GradientField(d, 1.0)).value == 0.0);
    CHECK(loss_reg(GradientField(d, 2.0), GradientField(d, 1.0)).value == 1.0);
    oracle::Rng rng(3);
    GradientField g(d), h(d);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        g.data[i] = oracle::uniform(rng, 0.0, 2.0);
        h.data[i] = oracle::uniform(rng, 0.0, 2.0);
    }
    long double acc_g = 0.0L, acc_h = 0.0L;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        acc_g += (g.data[i] - 1.0L) * (g.data[i] - 1.0L);
        acc_h += (h.data[i] - 1.0L) * (h.data[i] - 1.0L);
    }
    const double ref = static_cast<double>(acc_g / g.data.size() + acc_h / h.data.size());
    CHECK(std::abs(loss_reg(g, h).value - ref) < 1e-12);
}

TEST_CASE("negative jacobian") {
    const Dims d{5, 5, 5};
    const auto id = identity_field(d);
    CHECK(loss_jac(id, id).value == 0.0);
    // Pushing one voxel 3 along x gives det = 1 - 3/2 at its +x neighbour only.
    auto bump = id;
    bump.at(0, 1, 2, 2) += 3.0;
    const auto det = jacobian_det(bump);
    CHECK(det.at(0, 2, 2, 2) == -0.5);
    CHECK(std::count_if(det.data.begin(), det.data.end(), [](double v) { return v <= 0.0; }) == 1);
    CHECK(loss_jac(bump, id).value == 0.5 / static_cast<double>(d.voxels()));
    oracle::Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = oracle::random_field(d, rng, 1.2);
        const auto b = oracle::random_field(d, rng, 1.2);
        const double ref = oracle::negative_jacobian_mean(a) + oracle::negative_jacobian_mean(b);
        CHECK(std::abs(loss_jac(a, b).value - ref) < 1e-12);
    }
}

TEST_CASE("negative jacobian against the hand-accumulated hinge") {
    const Dims d{4, 4, 4};
    oracle::Rng rng(5);
    const auto phi = oracle::random_field(d, rng, 0.9);
    const auto det = oracle::jacobian_det(phi);
    double neg = 0.0;
    for (double v : det) {
        neg += v < 0.0 ? -v : 0.0;
    }
    const double n = static_cast<double>(det.size());
    CHECK(std::abs(loss_jac(phi, identity_field(d)).value - neg / n) < 1e-12);
}

TEST_CASE("inverse consistency") {
    const Dims d{8, 6, 6};
    const auto id = identity_field(d);
    CHECK(loss_inv(id, id).value == 0.0);
    const auto fwd = shifted(d, 1.5), back = shifted(d, -1.5);
    CHECK(loss_inv(fwd, back, 2).value < 1e-24);
    CHECK(loss_inv(fwd, back).value > 0.0);
    // Both +1: outer(inner(p)) = p + 2, squared error 4 in x over three channels.
    const auto one = shifted(d, 1.0);
    const auto r = loss_inv(one, one, 2);
    CHECK(r.value == doctest::Approx(2.0 * 4.0 / 3.0).epsilon(1e-14));
    oracle::Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = oracle::random_field(d, rng, 1.0), b = oracle::random_field(d, rng, 1.0);
        for (int m : {0, 1, 2}) {
            const double ref = oracle::composition_error(a, b, m) + oracle::composition_error(b, a, m);
            CHECK(loss_inv(a, b, m).value == doctest::Approx(ref).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(loss_inv(id, id, -1), std::invalid_argument);
    CHECK_THROWS_AS(loss_inv(id, identity_field(Dims{8, 6, 5})), std::invalid_argument);
}

TEST_CASE("field term gradients agree with finite differences") {
    oracle::Rng rng(7);
    const Dims d{5, 5, 5};
    const auto a = oracle::random_field(d, rng, 0.9), b = oracle::random_field(d, rng, 0.9);
    auto flat = [&](const std::vector<double> &x) {
        DeformationField f(d);
        f.data = x;
        return f;
    };
    for (int which = 0; which < 2; ++which) {
        const auto inv = loss_inv(a, b);
        const auto jac = loss_jac(a, b);
        const auto &x = which == 0 ? a.data : b.data;
        const auto &g_inv = which == 0 ? inv.d_phi_ab.data : inv.d_phi_ba.data;
        const auto &g_jac = which == 0 ? jac.d_phi_ab.data : jac.d_phi_ba.data;
        for (int k = 0; k < 3; ++k) {
            const auto dir = oracle::unit_direction(x.size(), rng);
            auto f_inv = [&](const std::vector<double> &p) {
                return which == 0 ? loss_inv(flat(p), b).value : loss_inv(a, flat(p)).value;
            };
            auto f_jac = [&](const std::vector<double> &p) {
                return which == 0 ? loss_jac(flat(p), b).value : loss_jac(a, flat(p)).value;
            };
            CHECK(oracle::rel_err(oracle::dot(g_inv, dir), oracle::directional_fd(f_inv, x, dir, 1e-6)) < 1e-6);
            CHECK(oracle::rel_err(oracle::dot(g_jac, dir), oracle::directional_fd(f_jac, x, dir, 1e-6)) < 1e-6);
        }
    }
}

TEST_CASE("total combines terms and swaps symmetrically") {
    oracle::Rng rng(8);
    const Dims d{4, 5, 4};
    const Volume a = oracle::random_volume(d, 1, rng), b = oracle::random_volume(d, 1, rng);
    const Volume aw = oracle::random_volume(d, 1, rng), bw = oracle::random_volume(d, 1, rng);
    const Volume as = oracle::random_volume(d, 2, rng), bs = oracle::random_volume(d, 2, rng);
    const Volume asw = oracle::random_volume(d, 2, rng), bsw = oracle::random_volume(d, 2, rng);
    GradientField gab(d), gba(d);
    for (std::size_t i = 0; i < gab.data.size(); ++i) {
        gab.data[i] = oracle::uniform(rng, 0.1, 1.9);
        gba.data[i] = oracle::uniform(rng, 0.1, 1.9);
    }
    const auto pab = oracle::random_field(d, rng, 1.0), pba = oracle::random_field(d, rng, 1.0);
    const LossWeights w{0.7, 1.3, 0.2, 0.05, 3.0};
    const LossInputs in{a, b, aw, bw, gab, gba, pab, pba, SegmentationInputs{as, bs, asw, bsw}};
    const auto r = loss_total(in, w);
    CHECK(r.total == w.alpha * r.sim + w.beta * r.seg + w.gamma * r.reg + w.delta * r.jac + w.epsilon * r.inv);
    CHECK(std::abs(r.sim - loss_sim(aw, b, bw, a).value) < 1e-12);
    CHECK(std::abs(r.seg - loss_seg(asw, bs, bsw, as).value) < 1e-12);
    CHECK(std::abs(r.inv - loss_inv(pab, pba).value) < 1e-12);
    for (double t : {r.sim, r.seg, r.reg, r.jac, r.inv}) {
        CHECK(t >= 0.0);
    }
    const LossInputs swapped{b, a, bw, aw, gba, gab, pba, pab, SegmentationInputs{bs, as, bsw, asw}};
    const auto s = loss_total(swapped, w);
    CHECK(s.sim == r.sim);
    CHECK(s.seg == r.seg);
    CHECK(s.reg == r.reg);
    CHECK(s.jac == r.jac);
    CHECK(s.inv == r.inv);
    CHECK(s.total == r.total);
    CHECK(s.grad.phi_ab == r.grad.phi_ba);

    const LossInputs unsup{a, b, aw, bw, gab, gba, pab, pba, std::nullopt};
    const auto u = loss_total(unsup, w);
    CHECK(u.seg == 0.0);
    CHECK(u.grad.a_seg_warp.data.empty());
    const auto nograd = loss_total(in, w, false);
    CHECK(nograd.total == r.total);
    CHECK(nograd.grad.phi_ab.data.empty());

    LossWeights no_inv = w;
    no_inv.epsilon = 0.0;
    no_inv.delta = 0.0;
    const auto z = loss_total(in, no_inv);
    CHECK(std::all_of(z.grad.phi_ab.data.begin(), z.grad.phi_ab.data.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("all-identity configuration scores zero") {
    const Dims d{4, 4, 4};
    oracle::Rng rng(9);
    const Volume a = oracle::random_volume(d, 1, rng);
    const GradientField g(d, 1.0);
    const auto id = identity_field(d);
    const LossInputs in{a, a, a, a, g, g, id, id, std::nullopt};
    const auto r = loss_total(in, LossWeights{});
    CHECK(r.sim == 0.0);
    CHECK(r.reg == 0.0);
    CHECK(r.jac == 0.0);
    CHECK(r.inv == 0.0);
    CHECK(r.total == 0.0);
}

TEST_CASE("breakdown json") {
    LossBreakdown b;
    b.sim = 1.5;
    b.total = 2.0;
    const auto s = breakdown_json(b);
    CHECK(s.find("\"sim\":1.5") != std::string::npos);
    CHECK(s.find("\"total\":2.0") != std::string::npos);
    CHECK(s.find("\"inv\"") != std::string::npos);
}
