// deform.cpp - Deformation-field algebra and the adjoint of every forward stage.

#include "symgrad/deform.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace symgrad {

namespace {

// Linear interpolation that returns `a` bit-exactly when f == 0 (integer sample positions)
// and stays inside [min(a,b), max(a,b)] otherwise.
inline double lerp_exact(double a, double b, double f) { return f == 0.0 ? a : std::lerp(a, b, f); }

struct AxisSample {
    int i0 = 0;
    int i1 = 0;
    double f = 0.0;
    bool clamped = false;
};

inline AxisSample axis_sample(double c, int n) {
    AxisSample s;
    if (c < 0.0) {
        c = 0.0;
        s.clamped = true;
    } else if (c > static_cast<double>(n - 1)) {
        c = static_cast<double>(n - 1);
        s.clamped = true;
    }
    const double fl = std::floor(c);
    s.i0 = static_cast<int>(fl);
    if (s.i0 >= n - 1) {
        s.i0 = n - 1;
        s.i1 = n - 1;
        s.f = 0.0;
    } else {
        s.i1 = s.i0 + 1;
        s.f = c - fl;
    }
    return s;
}

struct Corners {
    std::array<std::size_t, 8> idx{};
    AxisSample sx, sy, sz;
};

// Corner order: bit 0 = x, bit 1 = y, bit 2 = z.
inline Corners corners(const Dims &d, double cx, double cy, double cz) {
    Corners c;
    c.sx = axis_sample(cx, d.nx);
    c.sy = axis_sample(cy, d.ny);
    c.sz = axis_sample(cz, d.nz);
    for (int k = 0; k < 8; ++k) {
        const int x = (k & 1) ? c.sx.i1 : c.sx.i0;
        const int y = (k & 2) ? c.sy.i1 : c.sy.i0;
        const int z = (k & 4) ? c.sz.i1 : c.sz.i0;
        c.idx[static_cast<std::size_t>(k)] = d.index(x, y, z);
    }
    return c;
}

inline double trilinear(std::span<const double> v, const Corners &c) {
    const auto &i = c.idx;
    const double fx = c.sx.f, fy = c.sy.f, fz = c.sz.f;
    const double c00 = lerp_exact(v[i[0]], v[i[1]], fx);
    const double c10 = lerp_exact(v[i[2]], v[i[3]], fx);
    const double c01 = lerp_exact(v[i[4]], v[i[5]], fx);
    const double c11 = lerp_exact(v[i[6]], v[i[7]], fx);
    const double c0 = lerp_exact(c00, c10, fy);
    const double c1 = lerp_exact(c01, c11, fy);
    return lerp_exact(c0, c1, fz);
}

inline std::array<double, 8> corner_weights(const Corners &c) {
    const double fx = c.sx.f, fy = c.sy.f, fz = c.sz.f;
    std::array<double, 8> w{};
    for (int k = 0; k < 8; ++k) {
        const double wx = (k & 1) ? fx : 1.0 - fx;
        const double wy = (k & 2) ? fy : 1.0 - fy;
        const double wz = (k & 4) ? fz : 1.0 - fz;
        w[static_cast<std::size_t>(k)] = wx * wy * wz;
    }
    return w;
}

// d(trilinear)/d(coordinate) per axis, zero on clamped axes.
inline std::array<double, 3> trilinear_grad(std::span<const double> v, const Corners &c) {
    const auto &i = c.idx;
    const double fx = c.sx.f, fy = c.sy.f, fz = c.sz.f;
    const double v0 = v[i[0]], v1 = v[i[1]], v2 = v[i[2]], v3 = v[i[3]];
    const double v4 = v[i[4]], v5 = v[i[5]], v6 = v[i[6]], v7 = v[i[7]];
    std::array<double, 3> g{0.0, 0.0, 0.0};
    if (!c.sx.clamped && c.sx.i1 != c.sx.i0) {
        g[0] = (1.0 - fz) * ((1.0 - fy) * (v1 - v0) + fy * (v3 - v2)) + fz * ((1.0 - fy) * (v5 - v4) + fy * (v7 - v6));
    }
    if (!c.sy.clamped && c.sy.i1 != c.sy.i0) {
        g[1] = (1.0 - fz) * ((1.0 - fx) * (v2 - v0) + fx * (v3 - v1)) + fz * ((1.0 - fx) * (v6 - v4) + fx * (v7 - v5));
    }
    if (!c.sz.clamped && c.sz.i1 != c.sz.i0) {
        g[2] = (1.0 - fy) * ((1.0 - fx) * (v4 - v0) + fx * (v5 - v1)) + fy * ((1.0 - fx) * (v6 - v2) + fx * (v7 - v3));
    }
    return g;
}

void require_same_dims(const Dims &a, const Dims &b, const char *what) {
    if (!(a == b)) {
        throw std::invalid_argument(std::string(what) + ": dims mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

template <class Tag> void require_shape(const Field3<Tag> &f, const char *what) {
    if (!f.dims.positive() || f.data.size() != 3 * f.dims.voxels()) {
        throw std::invalid_argument(std::string(what) + ": malformed field");
    }
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Interp1 {
    int c0;
    int c1;
    double f;
};

std::vector<Interp1> interp_table(int n, int stride, int nc) {
    std::vector<Interp1> t(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) {
        const int c0 = x / stride;
        const double f = static_cast<double>(x - c0 * stride) / static_cast<double>(stride);
        t[static_cast<std::size_t>(x)] = {c0, std::min(c0 + 1, nc - 1), f};
    }
    return t;
}

// Linear resampling of all three channels along one axis to `to` samples. The transposed
// variant scatters back onto the coarse axis and is the adjoint of the forward one.
std::vector<double> resample_axis(const std::vector<double> &src, const Dims &src_dims, int axis, int to,
                                  const std::vector<Interp1> &table, bool transpose, Dims &dst_dims) {
    dst_dims = src_dims;
    if (axis == 0) {
        dst_dims.nx = to;
    } else if (axis == 1) {
        dst_dims.ny = to;
    } else {
        dst_dims.nz = to;
    }
    std::vector<double> dst(3 * dst_dims.voxels(), 0.0);
    const Dims &big = transpose ? src_dims : dst_dims;
    for (int c = 0; c < 3; ++c) {
        const std::size_t so = static_cast<std::size_t>(c) * src_dims.voxels();
        const std::size_t dof = static_cast<std::size_t>(c) * dst_dims.voxels();
        for (int z = 0; z < big.nz; ++z) {
            for (int y = 0; y < big.ny; ++y) {
                for (int x = 0; x < big.nx; ++x) {
                    const std::array<int, 3> p{x, y, z};
                    const Interp1 &t = table[static_cast<std::size_t>(p[static_cast<std::size_t>(axis)])];
                    std::array<int, 3> q0 = p, q1 = p;
                    q0[static_cast<std::size_t>(axis)] = t.c0;
                    q1[static_cast<std::size_t>(axis)] = t.c1;
                    if (!transpose) {
                        const double a = src[so + src_dims.index(q0[0], q0[1], q0[2])];
                        const double b = src[so + src_dims.index(q1[0], q1[1], q1[2])];
                        dst[dof + dst_dims.index(x, y, z)] = t.f == 0.0 ? a : (1.0 - t.f) * a + t.f * b;
                    } else {
                        const double u = src[so + src_dims.index(x, y, z)];
                        dst[dof + dst_dims.index(q0[0], q0[1], q0[2])] += (1.0 - t.f) * u;
                        dst[dof + dst_dims.index(q1[0], q1[1], q1[2])] += t.f * u;
                    }
                }
            }
        }
    }
    return dst;
}

inline Mat3 cofactors(const Mat3 &m) {
    const double a = m[0][0], b = m[0][1], c = m[0][2];
    const double d = m[1][0], e = m[1][1], f = m[1][2];
    const double g = m[2][0], h = m[2][1], i = m[2][2];
    return {{{e * i - f * h, -(d * i - f * g), d * h - e * g},
             {-(b * i - c * h), a * i - c * g, -(a * h - b * g)},
             {b * f - c * e, -(a * f - c * d), a * e - b * d}}};
}

} // namespace

Dims control_dims(const Dims &image_dims, int stride) {
    if (stride < 1) {
        throw std::invalid_argument("control stride must be >= 1");
    }
    auto n = [stride](int v) { return (v - 1 + stride - 1) / stride + 1; };
    return {n(image_dims.nx), n(image_dims.ny), n(image_dims.nz)};
}

PreActivationField upsample(const PreActivationField &control, int stride, const Dims &image_dims) {
    require_shape(control, "upsample");
    require_same_dims(control.dims, control_dims(image_dims, stride), "upsample");
    if (stride == 1) {
        return control;
    }
    Dims cur = control.dims, next;
    std::vector<double> buf = control.data;
    for (int axis = 0; axis < 3; ++axis) {
        const auto table = interp_table(image_dims[axis], stride, control.dims[axis]);
        buf = resample_axis(buf, cur, axis, image_dims[axis], table, false, next);
        cur = next;
    }
    PreActivationField out;
    out.dims = cur;
    out.data = std::move(buf);
    return out;
}

PreActivationField vjp_upsample(const PreActivationField &upstream, int stride, const Dims &control) {
    require_shape(upstream, "vjp_upsample");
    require_same_dims(control, control_dims(upstream.dims, stride), "vjp_upsample");
    if (stride == 1) {
        return upstream;
    }
    Dims cur = upstream.dims, next;
    std::vector<double> buf = upstream.data;
    for (int axis = 2; axis >= 0; --axis) {
        const auto table = interp_table(upstream.dims[axis], stride, control[axis]);
        buf = resample_axis(buf, cur, axis, control[axis], table, true, next);
        cur = next;
    }
    PreActivationField out;
    out.dims = cur;
    out.data = std::move(buf);
    return out;
}

GradientField activate(const PreActivationField &x) {
    require_shape(x, "activate");
    GradientField g;
    g.dims = x.dims;
    g.data.resize(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        g.data[i] = 2.0 * sigmoid(x.data[i]);
    }
    return g;
}

PreActivationField vjp_activate(const PreActivationField &x, const GradientField &upstream) {
    require_shape(x, "vjp_activate");
    require_same_dims(x.dims, upstream.dims, "vjp_activate");
    PreActivationField out;
    out.dims = x.dims;
    out.data.resize(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double s = sigmoid(x.data[i]);
        out.data[i] = 2.0 * s * (1.0 - s) * upstream.data[i];
    }
    return out;
}

DeformationField integrate(const GradientField &g) {
    require_shape(g, "integrate");
    const Dims d = g.dims;
    DeformationField phi(d);
    for (int a = 0; a < 3; ++a) {
        auto src = g.channel(a);
        auto dst = phi.channel(a);
        for (int z = 0; z < d.nz; ++z) {
            for (int y = 0; y < d.ny; ++y) {
                for (int x = 0; x < d.nx; ++x) {
                    const std::size_t i = d.index(x, y, z);
                    const int pos = a == 0 ? x : (a == 1 ? y : z);
                    if (pos == 0) {
                        dst[i] = src[i];
                    } else {
                        const std::size_t prev = a == 0 ? d.index(x - 1, y, z) : (a == 1 ? d.index(x, y - 1, z) : d.index(x, y, z - 1));
                        dst[i] = dst[prev] + src[i];
                    }
                }
            }
        }
        for (double &v : dst) {
            v -= 1.0;
        }
    }
    return phi;
}

GradientField vjp_integrate(const DeformationField &upstream) {
    require_shape(upstream, "vjp_integrate");
    const Dims d = upstream.dims;
    GradientField g(d);
    for (int a = 0; a < 3; ++a) {
        auto src = upstream.channel(a);
        auto dst = g.channel(a);
        for (int z = d.nz - 1; z >= 0; --z) {
            for (int y = d.ny - 1; y >= 0; --y) {
                for (int x = d.nx - 1; x >= 0; --x) {
                    const std::size_t i = d.index(x, y, z);
                    const int pos = a == 0 ? x : (a == 1 ? y : z);
                    if (pos == d[a] - 1) {
                        dst[i] = src[i];
                    } else {
                        const std::size_t next = a == 0 ? d.index(x + 1, y, z) : (a == 1 ? d.index(x, y + 1, z) : d.index(x, y, z + 1));
                        dst[i] = dst[next] + src[i];
                    }
                }
            }
        }
    }
    return g;
}

DeformationField identity_field(const Dims &dims) {
    if (!dims.positive()) {
        throw std::invalid_argument("identity_field: dims must be positive");
    }
    DeformationField phi(dims);
    for (int z = 0; z < dims.nz; ++z) {
        for (int y = 0; y < dims.ny; ++y) {
            for (int x = 0; x < dims.nx; ++x) {
                phi.at(0, x, y, z) = x;
                phi.at(1, x, y, z) = y;
                phi.at(2, x, y, z) = z;
            }
        }
    }
    return phi;
}

Volume warp(const Volume &img, const DeformationField &phi) {
    require_shape(phi, "warp");
    require_same_dims(img.dims, phi.dims, "warp");
    Volume out = img;
    const Dims d = img.dims;
    const std::size_t n = d.voxels();
    auto px = phi.channel(0), py = phi.channel(1), pz = phi.channel(2);
    for (std::size_t i = 0; i < n; ++i) {
        const Corners c = corners(d, px[i], py[i], pz[i]);
        for (int ch = 0; ch < img.channels; ++ch) {
            out.channel(ch)[i] = trilinear(img.channel(ch), c);
        }
    }
    return out;
}

WarpAdjoint vjp_warp(const Volume &img, const DeformationField &phi, const Volume &upstream, bool need_image) {
    require_shape(phi, "vjp_warp");
    require_same_dims(img.dims, phi.dims, "vjp_warp");
    require_same_dims(img.dims, upstream.dims, "vjp_warp");
    if (upstream.channels != img.channels) {
        throw std::invalid_argument("vjp_warp: channel mismatch");
    }
    const Dims d = img.dims;
    const std::size_t n = d.voxels();
    WarpAdjoint adj;
    adj.phi = DeformationField(d);
    if (need_image) {
        adj.image = Volume(d, img.channels, img.spacing_mm);
    }
    auto px = phi.channel(0), py = phi.channel(1), pz = phi.channel(2);
    auto gx = adj.phi.channel(0), gy = adj.phi.channel(1), gz = adj.phi.channel(2);
    for (std::size_t i = 0; i < n; ++i) {
        const Corners c = corners(d, px[i], py[i], pz[i]);
        const auto w = need_image ? corner_weights(c) : std::array<double, 8>{};
        for (int ch = 0; ch < img.channels; ++ch) {
            const double u = upstream.channel(ch)[i];
            if (u == 0.0) {
                continue;
            }
            const auto g = trilinear_grad(img.channel(ch), c);
            gx[i] += u * g[0];
            gy[i] += u * g[1];
            gz[i] += u * g[2];
            if (need_image) {
                auto dst = adj.image.channel(ch);
                for (std::size_t k = 0; k < 8; ++k) {
                    dst[c.idx[k]] += w[k] * u;
                }
            }
        }
    }
    return adj;
}

LabelVolume warp_labels(const LabelVolume &l, const DeformationField &phi) {
    require_shape(phi, "warp_labels");
    require_same_dims(l.dims, phi.dims, "warp_labels");
    LabelVolume out = l;
    const Dims d = l.dims;
    auto nearest = [](double c, int n) {
        c = std::clamp(c, 0.0, static_cast<double>(n - 1));
        return std::clamp(static_cast<int>(std::ceil(c - 0.5)), 0, n - 1);
    };
    auto px = phi.channel(0), py = phi.channel(1), pz = phi.channel(2);
    for (std::size_t i = 0; i < d.voxels(); ++i) {
        out.labels[i] = l.at(nearest(px[i], d.nx), nearest(py[i], d.ny), nearest(pz[i], d.nz));
    }
    return out;
}

DeformationField compose(const DeformationField &outer, const DeformationField &inner) {
    require_shape(outer, "compose");
    require_shape(inner, "compose");
    require_same_dims(outer.dims, inner.dims, "compose");
    const Dims d = outer.dims;
    DeformationField out(d);
    auto px = inner.channel(0), py = inner.channel(1), pz = inner.channel(2);
    for (std::size_t i = 0; i < d.voxels(); ++i) {
        const Corners c = corners(d, px[i], py[i], pz[i]);
        for (int ch = 0; ch < 3; ++ch) {
            out.channel(ch)[i] = trilinear(outer.channel(ch), c);
        }
    }
    return out;
}

ComposeAdjoint vjp_compose(const DeformationField &outer, const DeformationField &inner, const DeformationField &upstream) {
    require_shape(outer, "vjp_compose");
    require_shape(inner, "vjp_compose");
    require_same_dims(outer.dims, inner.dims, "vjp_compose");
    require_same_dims(outer.dims, upstream.dims, "vjp_compose");
    const Dims d = outer.dims;
    ComposeAdjoint adj{DeformationField(d), DeformationField(d)};
    auto px = inner.channel(0), py = inner.channel(1), pz = inner.channel(2);
    auto gx = adj.inner.channel(0), gy = adj.inner.channel(1), gz = adj.inner.channel(2);
    for (std::size_t i = 0; i < d.voxels(); ++i) {
        const Corners c = corners(d, px[i], py[i], pz[i]);
        const auto w = corner_weights(c);
        for (int ch = 0; ch < 3; ++ch) {
            const double u = upstream.channel(ch)[i];
            if (u == 0.0) {
                continue;
            }
            const auto g = trilinear_grad(outer.channel(ch), c);
            gx[i] += u * g[0];
            gy[i] += u * g[1];
            gz[i] += u * g[2];
            auto dst = adj.outer.channel(ch);
            for (std::size_t k = 0; k < 8; ++k) {
                dst[c.idx[k]] += w[k] * u;
            }
        }
    }
    return adj;
}

Mat3 jacobian_matrix(const DeformationField &phi, int x, int y, int z) {
    const Dims d = phi.dims;
    Mat3 m{};
    const std::array<int, 3> p{x, y, z};
    for (int c = 0; c < 3; ++c) {
        const int n = d[c];
        const int pos = p[static_cast<std::size_t>(c)];
        std::array<int, 3> lo = p, hi = p;
        double scale = 0.5;
        if (pos == 0) {
            hi[static_cast<std::size_t>(c)] = 1;
            scale = 1.0;
        } else if (pos == n - 1) {
            lo[static_cast<std::size_t>(c)] = n - 2;
            scale = 1.0;
        } else {
            lo[static_cast<std::size_t>(c)] = pos - 1;
            hi[static_cast<std::size_t>(c)] = pos + 1;
        }
        for (int r = 0; r < 3; ++r) {
            m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                scale * (phi.at(r, hi[0], hi[1], hi[2]) - phi.at(r, lo[0], lo[1], lo[2]));
        }
    }
    return m;
}

double det3(const Mat3 &m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Volume jacobian_det(const DeformationField &phi) {
    require_shape(phi, "jacobian_det");
    const Dims d = phi.dims;
    if (d.nx < 3 || d.ny < 3 || d.nz < 3) {
        throw std::invalid_argument("jacobian_det needs at least 3 voxels per axis, got " + to_string(d));
    }
    Volume out(d, 1);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                out.at(0, x, y, z) = det3(jacobian_matrix(phi, x, y, z));
            }
        }
    }
    return out;
}

DeformationField vjp_jacobian_det(const DeformationField &phi, std::span<const double> upstream) {
    require_shape(phi, "vjp_jacobian_det");
    const Dims d = phi.dims;
    if (d.nx < 3 || d.ny < 3 || d.nz < 3) {
        throw std::invalid_argument("vjp_jacobian_det needs at least 3 voxels per axis, got " + to_string(d));
    }
    if (upstream.size() != d.voxels()) {
        throw std::invalid_argument("vjp_jacobian_det: upstream size mismatch");
    }
    DeformationField out(d);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                const double u = upstream[d.index(x, y, z)];
                if (u == 0.0) {
                    continue;
                }
                const Mat3 cof = cofactors(jacobian_matrix(phi, x, y, z));
                const std::array<int, 3> p{x, y, z};
                for (int c = 0; c < 3; ++c) {
                    const int n = d[c];
                    const int pos = p[static_cast<std::size_t>(c)];
                    std::array<int, 3> lo = p, hi = p;
                    double scale = 0.5;
                    if (pos == 0) {
                        hi[static_cast<std::size_t>(c)] = 1;
                        scale = 1.0;
                    } else if (pos == n - 1) {
                        lo[static_cast<std::size_t>(c)] = n - 2;
                        scale = 1.0;
                    } else {
                        lo[static_cast<std::size_t>(c)] = pos - 1;
                        hi[static_cast<std::size_t>(c)] = pos + 1;
                    }
                    for (int r = 0; r < 3; ++r) {
                        const double g = u * scale * cof[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
                        out.at(r, hi[0], hi[1], hi[2]) += g;
                        out.at(r, lo[0], lo[1], lo[2]) -= g;
                    }
                }
            }
        }
    }
    return out;
}

Volume to_volume(const DeformationField &phi, Spacing spacing, Dtype dtype) {
    Volume v(phi.dims, 3, spacing);
    v.dtype = dtype;
    v.data = phi.data;
    return v;
}

DeformationField deformation_from_volume(const Volume &v) {
    if (v.channels != 3) {
        throw std::invalid_argument("a deformation field needs exactly 3 channels, got " + std::to_string(v.channels));
    }
    DeformationField phi;
    phi.dims = v.dims;
    phi.data = v.data;
    require_shape(phi, "deformation_from_volume");
    return phi;
}

} // namespace symgrad
