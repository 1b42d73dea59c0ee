// losses.cpp - The five registration loss terms and their weighted combination.

#include "symgrad/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace symgrad {

namespace {

void require_same_shape(const Volume &a, const Volume &b, const char *what) {
    if (!(a.dims == b.dims) || a.channels != b.channels || a.data.size() != b.data.size()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
}

template <class T, class U> void require_same_dims(const T &a, const U &b, const char *what) {
    if (!(a.dims == b.dims)) {
        throw std::invalid_argument(std::string(what) + ": dims mismatch " + to_string(a.dims) + " vs " + to_string(b.dims));
    }
}

// One direction of the MSE term; fills the gradient when `grad` is non-null.
double mse(const Volume &warped, const Volume &target, Volume *grad) {
    const double n = static_cast<double>(warped.data.size());
    double sum = 0.0;
    if (grad) {
        *grad = Volume(warped.dims, warped.channels, warped.spacing_mm);
    }
    for (std::size_t i = 0; i < warped.data.size(); ++i) {
        const double r = warped.data[i] - target.data[i];
        sum += r * r;
        if (grad) {
            grad->data[i] = 2.0 * r / n;
        }
    }
    return sum / n;
}

double soft_dice(const Volume &p, const Volume &q, Volume *grad) {
    const int channels = p.channels;
    if (grad) {
        *grad = Volume(p.dims, channels, p.spacing_mm);
    }
    double total = 0.0;
    for (int c = 0; c < channels; ++c) {
        auto pc = p.channel(c);
        auto qc = q.channel(c);
        double s = 0.0, sp = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < pc.size(); ++i) {
            s += pc[i] * qc[i];
            sp += pc[i];
            sq += qc[i];
        }
        const double denom = sp + sq + kDiceSmooth;
        const double numer = 2.0 * s + kDiceSmooth;
        total += 1.0 - numer / denom;
        if (grad) {
            auto gc = grad->channel(c);
            const double inv_d2 = 1.0 / (denom * denom * static_cast<double>(channels));
            for (std::size_t i = 0; i < pc.size(); ++i) {
                gc[i] = -(2.0 * qc[i] * denom - numer) * inv_d2;
            }
        }
    }
    return total / static_cast<double>(channels);
}

double deviation_from_unit(const GradientField &g, GradientField *grad) {
    const double n = static_cast<double>(g.data.size());
    if (grad) {
        *grad = GradientField(g.dims);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double r = g.data[i] - 1.0;
        sum += r * r;
        if (grad) {
            grad->data[i] = 2.0 * r / n;
        }
    }
    return sum / n;
}

double negative_jacobian(const DeformationField &phi, DeformationField *grad) {
    const Volume det = jacobian_det(phi);
    const double n = static_cast<double>(det.data.size());
    double sum = 0.0;
    std::vector<double> upstream(det.data.size(), 0.0);
    for (std::size_t i = 0; i < det.data.size(); ++i) {
        if (det.data[i] < 0.0) {
            sum += -det.data[i];
            upstream[i] = -1.0 / n;
        }
    }
    if (grad) {
        *grad = vjp_jacobian_det(phi, upstream);
    }
    return sum / n;
}

bool inside_margin(const Dims &d, int x, int y, int z, int m) {
    return x >= m && y >= m && z >= m && x < d.nx - m && y < d.ny - m && z < d.nz - m;
}

// ||outer o inner - id||^2 averaged over scored voxels x 3; gradients added into the outputs.
double composition_error(const DeformationField &outer, const DeformationField &inner, int margin,
                         DeformationField *d_outer, DeformationField *d_inner) {
    const Dims d = outer.dims;
    const DeformationField comp = compose(outer, inner);
    std::size_t scored = 0;
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                scored += inside_margin(d, x, y, z, margin) ? 1 : 0;
            }
        }
    }
    if (scored == 0) {
        return 0.0;
    }
    const double n = 3.0 * static_cast<double>(scored);
    DeformationField upstream(d);
    double sum = 0.0;
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                if (!inside_margin(d, x, y, z, margin)) {
                    continue;
                }
                const std::array<double, 3> p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
                for (int c = 0; c < 3; ++c) {
                    const double r = comp.at(c, x, y, z) - p[static_cast<std::size_t>(c)];
                    sum += r * r;
                    upstream.at(c, x, y, z) = 2.0 * r / n;
                }
            }
        }
    }
    if (d_outer && d_inner) {
        const ComposeAdjoint adj = vjp_compose(outer, inner, upstream);
        *d_outer += adj.outer;
        *d_inner += adj.inner;
    }
    return sum / n;
}

FieldLoss jac_term(const DeformationField &phi_ab, const DeformationField &phi_ba, bool grad) {
    require_same_dims(phi_ab, phi_ba, "loss_jac");
    FieldLoss out;
    const double ab = negative_jacobian(phi_ab, grad ? &out.d_phi_ab : nullptr);
    const double ba = negative_jacobian(phi_ba, grad ? &out.d_phi_ba : nullptr);
    out.value = ab + ba;
    return out;
}

FieldLoss inv_term(const DeformationField &phi_ab, const DeformationField &phi_ba, int margin, bool grad) {
    require_same_dims(phi_ab, phi_ba, "loss_inv");
    if (margin < 0) {
        throw std::invalid_argument("loss_inv: margin must be non-negative");
    }
    FieldLoss out;
    if (grad) {
        out.d_phi_ab = DeformationField(phi_ab.dims);
        out.d_phi_ba = DeformationField(phi_ab.dims);
    }
    auto *dab = grad ? &out.d_phi_ab : nullptr;
    auto *dba = grad ? &out.d_phi_ba : nullptr;
    const double ab = composition_error(phi_ab, phi_ba, margin, dab, dba);
    const double ba = composition_error(phi_ba, phi_ab, margin, dba, dab);
    out.value = ab + ba;
    return out;
}

template <class F> void axpy(F &dst, double w, const F &src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) {
        dst.data[i] += w * src.data[i];
    }
}

} // namespace

void LossWeights::validate() const {
    for (double w : {alpha, beta, gamma, delta, epsilon}) {
        if (!(std::isfinite(w) && w >= 0.0)) {
            throw std::invalid_argument("loss weights must be finite and non-negative");
        }
    }
}

ImageLoss loss_sim(const Volume &a_warp, const Volume &b, const Volume &b_warp, const Volume &a) {
    require_same_shape(a_warp, b, "loss_sim");
    require_same_shape(b_warp, a, "loss_sim");
    require_same_shape(a_warp, b_warp, "loss_sim");
    ImageLoss out;
    const double ab = mse(a_warp, b, &out.d_a_warp);
    const double ba = mse(b_warp, a, &out.d_b_warp);
    out.value = ab + ba;
    return out;
}

ImageLoss loss_seg(const Volume &a_seg_warp, const Volume &b_seg, const Volume &b_seg_warp, const Volume &a_seg) {
    require_same_shape(a_seg_warp, b_seg, "loss_seg");
    require_same_shape(b_seg_warp, a_seg, "loss_seg");
    require_same_shape(a_seg_warp, b_seg_warp, "loss_seg");
    ImageLoss out;
    const double ab = soft_dice(a_seg_warp, b_seg, &out.d_a_warp);
    const double ba = soft_dice(b_seg_warp, a_seg, &out.d_b_warp);
    out.value = ab + ba;
    return out;
}

GradientLoss loss_reg(const GradientField &g_ab, const GradientField &g_ba) {
    require_same_dims(g_ab, g_ba, "loss_reg");
    GradientLoss out;
    const double ab = deviation_from_unit(g_ab, &out.d_g_ab);
    const double ba = deviation_from_unit(g_ba, &out.d_g_ba);
    out.value = ab + ba;
    return out;
}

FieldLoss loss_jac(const DeformationField &phi_ab, const DeformationField &phi_ba) { return jac_term(phi_ab, phi_ba, true); }

FieldLoss loss_inv(const DeformationField &phi_ab, const DeformationField &phi_ba, int margin) {
    return inv_term(phi_ab, phi_ba, margin, true);
}

LossBreakdown loss_total(const LossInputs &in, const LossWeights &w, bool with_gradients) {
    w.validate();
    LossBreakdown out;
    LossGradients &g = out.grad;

    const ImageLoss sim = loss_sim(in.a_warp, in.b, in.b_warp, in.a);
    out.sim = sim.value;

    std::optional<ImageLoss> seg;
    if (in.segs) {
        seg = loss_seg(in.segs->a_seg_warp, in.segs->b_seg, in.segs->b_seg_warp, in.segs->a_seg);
        out.seg = seg->value;
    }

    const GradientLoss reg = loss_reg(in.g_ab, in.g_ba);
    out.reg = reg.value;

    // Adjoints of the two field terms are skipped when their weight is zero.
    const FieldLoss jac = jac_term(in.phi_ab, in.phi_ba, with_gradients && w.delta != 0.0);
    out.jac = jac.value;
    const FieldLoss inv = inv_term(in.phi_ab, in.phi_ba, 0, with_gradients && w.epsilon != 0.0);
    out.inv = inv.value;

    out.total = w.alpha * out.sim + w.beta * out.seg + w.gamma * out.reg + w.delta * out.jac + w.epsilon * out.inv;

    if (!with_gradients) {
        return out;
    }
    g.a_warp = Volume(in.a_warp.dims, in.a_warp.channels, in.a_warp.spacing_mm);
    g.b_warp = Volume(in.b_warp.dims, in.b_warp.channels, in.b_warp.spacing_mm);
    axpy(g.a_warp, w.alpha, sim.d_a_warp);
    axpy(g.b_warp, w.alpha, sim.d_b_warp);
    if (seg) {
        g.a_seg_warp = Volume(in.segs->a_seg_warp.dims, in.segs->a_seg_warp.channels, in.segs->a_seg_warp.spacing_mm);
        g.b_seg_warp = Volume(in.segs->b_seg_warp.dims, in.segs->b_seg_warp.channels, in.segs->b_seg_warp.spacing_mm);
        axpy(g.a_seg_warp, w.beta, seg->d_a_warp);
        axpy(g.b_seg_warp, w.beta, seg->d_b_warp);
    }
    g.g_ab = GradientField(in.g_ab.dims);
    g.g_ba = GradientField(in.g_ba.dims);
    axpy(g.g_ab, w.gamma, reg.d_g_ab);
    axpy(g.g_ba, w.gamma, reg.d_g_ba);
    g.phi_ab = DeformationField(in.phi_ab.dims);
    g.phi_ba = DeformationField(in.phi_ba.dims);
    if (w.delta != 0.0) {
        axpy(g.phi_ab, w.delta, jac.d_phi_ab);
        axpy(g.phi_ba, w.delta, jac.d_phi_ba);
    }
    if (w.epsilon != 0.0) {
        axpy(g.phi_ab, w.epsilon, inv.d_phi_ab);
        axpy(g.phi_ba, w.epsilon, inv.d_phi_ba);
    }
    return out;
}

std::string breakdown_json(const LossBreakdown &b) {
    nlohmann::json j;
    j["sim"] = b.sim;
    j["seg"] = b.seg;
    j["reg"] = b.reg;
    j["jac"] = b.jac;
    j["inv"] = b.inv;
    j["total"] = b.total;
    return j.dump();
}

} // namespace symgrad
