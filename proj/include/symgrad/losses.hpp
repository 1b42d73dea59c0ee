// losses.hpp - The five registration loss terms and their weighted combination.
//
// Every term is a symmetric sum over both directions and returns exact partial
// derivatives w.r.t. the fields it reads directly. All sums are normalised to means.

#pragma once

#include <optional>
#include <string>

#include "symgrad/deform.hpp"
#include "symgrad/volume.hpp"

namespace symgrad {

struct LossWeights {
    double alpha = 1.0;   // similarity
    double beta = 1.0;    // segmentation dice
    double gamma = 0.1;   // gradient smoothness
    double delta = 0.01;  // negative jacobian
    double epsilon = 10.0; // inverse consistency

    void validate() const;
};

// Soft dice smoothing constant.
inline constexpr double kDiceSmooth = 1e-5;

struct ImageLoss {
    double value = 0.0;
    Volume d_a_warp;
    Volume d_b_warp;
};

struct GradientLoss {
    double value = 0.0;
    GradientField d_g_ab;
    GradientField d_g_ba;
};

struct FieldLoss {
    double value = 0.0;
    DeformationField d_phi_ab;
    DeformationField d_phi_ba;
};

// mean((a_warp - b)^2) + mean((b_warp - a)^2)
ImageLoss loss_sim(const Volume &a_warp, const Volume &b, const Volume &b_warp, const Volume &a);

// Channel-averaged soft dice loss 1 - (2 sum(pq) + e) / (sum p + sum q + e), both directions.
// The returned gradients are w.r.t. the warped one-hot inputs.
ImageLoss loss_seg(const Volume &a_seg_warp, const Volume &b_seg, const Volume &b_seg_warp, const Volume &a_seg);

// mean((g - 1)^2) per direction, summed.
GradientLoss loss_reg(const GradientField &g_ab, const GradientField &g_ba);

// (1/N) sum max(0, -det J) per direction, summed. Subgradient 0 at det == 0.
FieldLoss loss_jac(const DeformationField &phi_ab, const DeformationField &phi_ba);

// mean squared coordinate error of phi_ab o phi_ba and phi_ba o phi_ab against the identity.
// With margin > 0 only voxels at least `margin` voxels away from every face are scored.
FieldLoss loss_inv(const DeformationField &phi_ab, const DeformationField &phi_ba, int margin = 0);

struct SegmentationInputs {
    const Volume &a_seg;
    const Volume &b_seg;
    const Volume &a_seg_warp;
    const Volume &b_seg_warp;
};

struct LossInputs {
    const Volume &a;
    const Volume &b;
    const Volume &a_warp;
    const Volume &b_warp;
    const GradientField &g_ab;
    const GradientField &g_ba;
    const DeformationField &phi_ab;
    const DeformationField &phi_ba;
    std::optional<SegmentationInputs> segs;
};

// Weighted gradients of the total w.r.t. every direct input. Terms with zero weight
// contribute nothing; seg gradients are empty without segmentations.
struct LossGradients {
    Volume a_warp;
    Volume b_warp;
    Volume a_seg_warp;
    Volume b_seg_warp;
    GradientField g_ab;
    GradientField g_ba;
    DeformationField phi_ab;
    DeformationField phi_ba;
};

struct LossBreakdown {
    double sim = 0.0;
    double seg = 0.0;
    double reg = 0.0;
    double jac = 0.0;
    double inv = 0.0;
    double total = 0.0;
    LossGradients grad;
};

// Without segmentations the seg term is 0 (unsupervised mode).
LossBreakdown loss_total(const LossInputs &in, const LossWeights &w, bool with_gradients = true);

// {"sim":..,"seg":..,"reg":..,"jac":..,"inv":..,"total":..}
std::string breakdown_json(const LossBreakdown &b);

} // namespace symgrad
