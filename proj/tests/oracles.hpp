// oracles.hpp - Independent brute-force reference implementations and random generators
// shared by the unit tests and the acceptance runner. Nothing here calls into the code
// under test except for plain data types.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "symgrad/deform.hpp"
#include "symgrad/volume.hpp"

namespace oracle {

using symgrad::DeformationField;
using symgrad::Dims;
using symgrad::LabelVolume;
using symgrad::Spacing;
using symgrad::Volume;

using Rng = std::mt19937_64;

inline double uniform(Rng &rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng &rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
inline double normal(Rng &rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline Volume random_volume(const Dims &d, int channels, Rng &rng, double lo = 0.0, double hi = 1.0) {
    Volume v(d, channels);
    for (double &x : v.data) {
        x = uniform(rng, lo, hi);
    }
    return v;
}

inline LabelVolume random_labels(const Dims &d, int max_label, Rng &rng, double fill = 0.5) {
    LabelVolume l(d);
    for (auto &x : l.labels) {
        x = uniform(rng, 0.0, 1.0) < fill ? static_cast<std::uint16_t>(uniform_int(rng, 1, max_label)) : 0;
    }
    return l;
}

// Identity plus uniform noise of the given amplitude on every coordinate.
inline DeformationField random_field(const Dims &d, Rng &rng, double amplitude) {
    DeformationField f(d);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                f.at(0, x, y, z) = x + uniform(rng, -amplitude, amplitude);
                f.at(1, x, y, z) = y + uniform(rng, -amplitude, amplitude);
                f.at(2, x, y, z) = z + uniform(rng, -amplitude, amplitude);
            }
        }
    }
    return f;
}

// ---- determinant -----------------------------------------------------------------------

// Recursive Laplace expansion along the first row.
inline double laplace_det(const std::vector<std::vector<double>> &m) {
    const std::size_t n = m.size();
    if (n == 1) {
        return m[0][0];
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<std::vector<double>> minor;
        for (std::size_t r = 1; r < n; ++r) {
            std::vector<double> row;
            for (std::size_t c = 0; c < n; ++c) {
                if (c != j) {
                    row.push_back(m[r][c]);
                }
            }
            minor.push_back(row);
        }
        const double term = m[0][j] * laplace_det(minor);
        sum = (j % 2 == 0) ? sum + term : sum - term;
    }
    return sum;
}

// Finite-difference Jacobian determinant map written from scratch.
inline std::vector<double> jacobian_det(const DeformationField &phi) {
    const Dims d = phi.dims;
    std::vector<double> out(d.voxels());
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                std::vector<std::vector<double>> m(3, std::vector<double>(3));
                const int p[3] = {x, y, z};
                for (int c = 0; c < 3; ++c) {
                    int lo[3] = {x, y, z};
                    int hi[3] = {x, y, z};
                    double div = 2.0;
                    if (p[c] == 0) {
                        hi[c] = 1;
                        div = 1.0;
                    } else if (p[c] == d[c] - 1) {
                        lo[c] = d[c] - 2;
                        div = 1.0;
                    } else {
                        lo[c] -= 1;
                        hi[c] += 1;
                    }
                    for (int r = 0; r < 3; ++r) {
                        m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                            (phi.at(r, hi[0], hi[1], hi[2]) - phi.at(r, lo[0], lo[1], lo[2])) / div;
                    }
                }
                out[d.index(x, y, z)] = laplace_det(m);
            }
        }
    }
    return out;
}

// (1/N) sum of max(0, -det) for one field.
inline double negative_jacobian_mean(const DeformationField &phi) {
    const auto det = oracle::jacobian_det(phi);
    double acc = 0.0;
    for (double v : det) {
        if (v < 0.0) {
            acc -= v;
        }
    }
    return acc / static_cast<double>(det.size());
}

// ---- interpolation ---------------------------------------------------------------------

// Trilinear sample of channel c of a generic accessor, coordinates clamped.
inline double trilinear(const Dims &d, const std::function<double(int, int, int)> &f, double px, double py, double pz) {
    const double cx = std::clamp(px, 0.0, static_cast<double>(d.nx - 1));
    const double cy = std::clamp(py, 0.0, static_cast<double>(d.ny - 1));
    const double cz = std::clamp(pz, 0.0, static_cast<double>(d.nz - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int z0 = static_cast<int>(std::floor(cz));
    const int x1 = std::min(x0 + 1, d.nx - 1);
    const int y1 = std::min(y0 + 1, d.ny - 1);
    const int z1 = std::min(z0 + 1, d.nz - 1);
    const double fx = cx - x0, fy = cy - y0, fz = cz - z0;
    double acc = 0.0;
    for (int k = 0; k < 8; ++k) {
        const double wx = (k & 1) ? fx : 1.0 - fx;
        const double wy = (k & 2) ? fy : 1.0 - fy;
        const double wz = (k & 4) ? fz : 1.0 - fz;
        acc += wx * wy * wz * f((k & 1) ? x1 : x0, (k & 2) ? y1 : y0, (k & 4) ? z1 : z0);
    }
    return acc;
}

inline DeformationField compose(const DeformationField &outer, const DeformationField &inner) {
    const Dims d = outer.dims;
    DeformationField out(d);
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                for (int c = 0; c < 3; ++c) {
                    out.at(c, x, y, z) = trilinear(
                        d, [&](int i, int j, int k) { return outer.at(c, i, j, k); }, inner.at(0, x, y, z), inner.at(1, x, y, z),
                        inner.at(2, x, y, z));
                }
            }
        }
    }
    return out;
}

// Mean squared coordinate error of outer o inner against the identity over voxels at least
// `margin` from every face.
inline double composition_error(const DeformationField &outer, const DeformationField &inner, int margin) {
    const Dims d = outer.dims;
    const auto comp = oracle::compose(outer, inner);
    double acc = 0.0;
    std::size_t count = 0;
    for (int z = margin; z < d.nz - margin; ++z) {
        for (int y = margin; y < d.ny - margin; ++y) {
            for (int x = margin; x < d.nx - margin; ++x) {
                const double p[3] = {double(x), double(y), double(z)};
                for (int c = 0; c < 3; ++c) {
                    const double r = comp.at(c, x, y, z) - p[c];
                    acc += r * r;
                    ++count;
                }
            }
        }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

// ---- metrics ---------------------------------------------------------------------------

inline double dice(const LabelVolume &a, const LabelVolume &b, int label) {
    std::set<std::size_t> sa, sb;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
        if (a.labels[i] == label) {
            sa.insert(i);
        }
        if (b.labels[i] == label) {
            sb.insert(i);
        }
    }
    if (sa.empty() && sb.empty()) {
        return 1.0;
    }
    std::size_t both = 0;
    for (auto i : sa) {
        both += sb.count(i);
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(sa.size() + sb.size());
}

inline double dice30(std::vector<double> scores) {
    std::sort(scores.begin(), scores.end());
    std::size_t k = 0;
    while (10 * k < 3 * scores.size()) {
        ++k;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        s += scores[i];
    }
    return s / static_cast<double>(k);
}

struct Voxel {
    int x, y, z;
};

inline std::vector<Voxel> boundary(const LabelVolume &l, int label) {
    const Dims d = l.dims;
    std::vector<Voxel> out;
    const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                if (l.at(x, y, z) != label) {
                    continue;
                }
                bool edge = false;
                for (const auto &o : off) {
                    const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
                    if (nx < 0 || ny < 0 || nz < 0 || nx >= d.nx || ny >= d.ny || nz >= d.nz || l.at(nx, ny, nz) != label) {
                        edge = true;
                    }
                }
                if (edge) {
                    out.push_back({x, y, z});
                }
            }
        }
    }
    return out;
}

inline double percentile95(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    // Smallest value with at least 95% of the sample at or below it.
    std::size_t r = 1;
    while (100 * r < 95 * v.size()) {
        ++r;
    }
    return v[r - 1];
}

inline double hd95(const LabelVolume &a, const LabelVolume &b, int label, const Spacing &sp) {
    const auto ba = boundary(a, label);
    const auto bb = boundary(b, label);
    auto directed = [&sp](const std::vector<Voxel> &from, const std::vector<Voxel> &to) {
        std::vector<double> d;
        for (const auto &p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto &q : to) {
                const double dx = (p.x - q.x) * sp[0], dy = (p.y - q.y) * sp[1], dz = (p.z - q.z) * sp[2];
                best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
            }
            d.push_back(best);
        }
        return percentile95(d);
    };
    return std::max(directed(ba, bb), directed(bb, ba));
}

inline double sdlogj(const std::vector<double> &det) {
    // Welford, to differ from the two-pass implementation.
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (double v : det) {
        const double l = std::log(v > 1e-9 ? v : 1e-9);
        ++n;
        const double delta = l - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (l - mean);
    }
    return std::sqrt(m2 / static_cast<double>(n));
}

// ---- finite differences ----------------------------------------------------------------

// Central difference of f along direction dir at x.
inline double directional_fd(const std::function<double(const std::vector<double> &)> &f, const std::vector<double> &x,
                             const std::vector<double> &dir, double h) {
    std::vector<double> p = x, m = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        p[i] += h * dir[i];
        m[i] -= h * dir[i];
    }
    return (f(p) - f(m)) / (2.0 * h);
}

inline std::vector<double> unit_direction(std::size_t n, Rng &rng) {
    std::vector<double> v(n);
    double s = 0.0;
    for (double &x : v) {
        x = normal(rng);
        s += x * x;
    }
    s = std::sqrt(s);
    for (double &x : v) {
        x /= s;
    }
    return v;
}

inline double dot(const std::vector<double> &a, const std::vector<double> &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-10}); }

} // namespace oracle
