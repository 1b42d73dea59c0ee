// deform.hpp - Deformation-field algebra and the adjoint of every forward stage.
//
// Pipeline for one direction:
//
//   control field --upsample--> pre-activation --activate--> axis gradients g in (0,2)
//                 --integrate--> deformation phi (absolute voxel coordinates) --warp--> image
//
// Each forward stage has a matching vjp_* that returns the exact vector-Jacobian product.

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "symgrad/volume.hpp"

namespace symgrad {

// Three-channel real field, channel-major then x-fastest. The tag keeps the different
// roles from being mixed up; adjoints of a field use the same type as the field itself.
template <class Tag> struct Field3 {
    Dims dims;
    std::vector<double> data;

    Field3() = default;
    explicit Field3(Dims d, double fill = 0.0) : dims(d), data(3 * d.voxels(), fill) {}

    [[nodiscard]] std::size_t voxels() const { return dims.voxels(); }
    [[nodiscard]] std::span<double> channel(int c) { return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()}; }
    [[nodiscard]] std::span<const double> channel(int c) const {
        return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
    }
    double &at(int c, int x, int y, int z) { return data[static_cast<std::size_t>(c) * voxels() + dims.index(x, y, z)]; }
    [[nodiscard]] double at(int c, int x, int y, int z) const {
        return data[static_cast<std::size_t>(c) * voxels() + dims.index(x, y, z)];
    }

    Field3 &operator+=(const Field3 &o) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] += o.data[i];
        }
        return *this;
    }
    friend bool operator==(const Field3 &, const Field3 &) = default;
};

struct PreActivationTag {};
struct GradientTag {};
struct DeformationTag {};

// Optimisation variable. At stride s its dims are control_dims(image dims, s).
using PreActivationField = Field3<PreActivationTag>;
// Per-axis derivatives (d phi_x/dx, d phi_y/dy, d phi_z/dz), each in (0, 2).
using GradientField = Field3<GradientTag>;
// Absolute sample coordinates in voxel units; identity is phi(p) = p.
using DeformationField = Field3<DeformationTag>;

// Control points sit at multiples of the stride and must reach the last voxel:
// n_c = ceil((n - 1) / s) + 1 per axis.
Dims control_dims(const Dims &image_dims, int stride);

PreActivationField upsample(const PreActivationField &control, int stride, const Dims &image_dims);
PreActivationField vjp_upsample(const PreActivationField &upstream, int stride, const Dims &control);

// g = 2 sigmoid(x), so x = 0 maps to the identity gradient 1.
GradientField activate(const PreActivationField &x);
PreActivationField vjp_activate(const PreActivationField &x, const GradientField &upstream);

// phi_a(..i..) = sum_{k<=i} g_a(..k..) - 1 along axis a.
DeformationField integrate(const GradientField &g);
GradientField vjp_integrate(const DeformationField &upstream);

DeformationField identity_field(const Dims &dims);

// Backward trilinear sampling: out(p) = img(phi(p)), coordinates clamped to [0, n-1].
Volume warp(const Volume &img, const DeformationField &phi);

struct WarpAdjoint {
    Volume image;
    DeformationField phi;
};

// Adjoint w.r.t. both the sampled image and the sample coordinates. The coordinate part is
// zero along any axis where clamping is active. `need_image` = false skips the scatter.
WarpAdjoint vjp_warp(const Volume &img, const DeformationField &phi, const Volume &upstream, bool need_image = true);

// Nearest-neighbour label sampling; exact .5 rounds toward -inf.
LabelVolume warp_labels(const LabelVolume &l, const DeformationField &phi);

// result(p) = outer(inner(p)), trilinear with clamped coordinates.
DeformationField compose(const DeformationField &outer, const DeformationField &inner);

struct ComposeAdjoint {
    DeformationField outer;
    DeformationField inner;
};

ComposeAdjoint vjp_compose(const DeformationField &outer, const DeformationField &inner, const DeformationField &upstream);

// 3x3 matrix of d(phi_r)/d(axis_c): central differences inside, one-sided on faces.
using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 jacobian_matrix(const DeformationField &phi, int x, int y, int z);
double det3(const Mat3 &m);

// Requires at least 3 voxels per axis.
Volume jacobian_det(const DeformationField &phi);

// Adjoint of jacobian_det: upstream is d(loss)/d(det) per voxel.
DeformationField vjp_jacobian_det(const DeformationField &phi, std::span<const double> upstream);

// Conversions for serialising fields as 3-channel volumes.
Volume to_volume(const DeformationField &phi, Spacing spacing = {1.0, 1.0, 1.0}, Dtype dtype = Dtype::f32);
DeformationField deformation_from_volume(const Volume &v);

} // namespace symgrad
