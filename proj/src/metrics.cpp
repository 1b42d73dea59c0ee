// metrics.cpp - Registration evaluation: dice, dice30, hd95, sdlogj.

#include "symgrad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace symgrad {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_dims(const Dims &a, const Dims &b, const char *what) {
    if (!(a == b)) {
        throw std::invalid_argument(std::string(what) + ": dims mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

// Squared Euclidean distance transform of one line (lower envelope of parabolas).
// `f` holds squared distances (inf = no site); positions are i * spacing.
void edt_line(std::vector<double> &f, double spacing, std::vector<int> &v, std::vector<double> &z, std::vector<double> &out) {
    const int n = static_cast<int>(f.size());
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    out.assign(static_cast<std::size_t>(n), kInf);
    auto pos = [spacing](int i) { return static_cast<double>(i) * spacing; };
    int k = -1;
    for (int q = 0; q < n; ++q) {
        const double fq = f[static_cast<std::size_t>(q)];
        if (fq == kInf) {
            continue;
        }
        while (true) {
            if (k < 0) {
                k = 0;
                v[0] = q;
                z[0] = -kInf;
                z[1] = kInf;
                break;
            }
            const int p = v[static_cast<std::size_t>(k)];
            const double s = ((fq + pos(q) * pos(q)) - (f[static_cast<std::size_t>(p)] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
                continue;
            }
            ++k;
            v[static_cast<std::size_t>(k)] = q;
            z[static_cast<std::size_t>(k)] = s;
            z[static_cast<std::size_t>(k) + 1] = kInf;
            break;
        }
    }
    if (k < 0) {
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(j) + 1] < pos(q)) {
            ++j;
        }
        const int p = v[static_cast<std::size_t>(j)];
        const double d = pos(q) - pos(p);
        out[static_cast<std::size_t>(q)] = d * d + f[static_cast<std::size_t>(p)];
    }
}

// Squared mm distance from every voxel to the nearest voxel listed in `sites`.
std::vector<double> squared_distance_map(const Dims &d, const std::vector<std::size_t> &sites, const Spacing &sp) {
    std::vector<double> dist(d.voxels(), kInf);
    for (auto i : sites) {
        dist[i] = 0.0;
    }
    std::vector<double> line, out, z;
    std::vector<int> v;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = d[axis];
        const int o1 = axis == 0 ? d.ny : d.nx;
        const int o2 = axis == 2 ? d.ny : d.nz;
        for (int b = 0; b < o2; ++b) {
            for (int a = 0; a < o1; ++a) {
                auto index = [&](int t) {
                    if (axis == 0) {
                        return d.index(t, a, b);
                    }
                    if (axis == 1) {
                        return d.index(a, t, b);
                    }
                    return d.index(a, b, t);
                };
                line.resize(static_cast<std::size_t>(n));
                for (int t = 0; t < n; ++t) {
                    line[static_cast<std::size_t>(t)] = dist[index(t)];
                }
                edt_line(line, sp[static_cast<std::size_t>(axis)], v, z, out);
                for (int t = 0; t < n; ++t) {
                    dist[index(t)] = out[static_cast<std::size_t>(t)];
                }
            }
        }
    }
    return dist;
}

double nearest_rank(std::vector<double> values, double pct) {
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return values[rank - 1];
}

double directed_hd95(const std::vector<std::size_t> &from, const std::vector<double> &sq_dist) {
    std::vector<double> d;
    d.reserve(from.size());
    for (auto i : from) {
        d.push_back(std::sqrt(sq_dist[i]));
    }
    return nearest_rank(std::move(d), 95.0);
}

std::string full_precision(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

} // namespace

double dice(const LabelVolume &a, const LabelVolume &b, int label) {
    require_same_dims(a.dims, b.dims, "dice");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
        const bool ia = a.labels[i] == label;
        const bool ib = b.labels[i] == label;
        na += ia ? 1 : 0;
        nb += ib ? 1 : 0;
        both += (ia && ib) ? 1 : 0;
    }
    if (na + nb == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice30(std::span<const double> scores) {
    if (scores.empty()) {
        throw std::invalid_argument("dice30 needs at least one score");
    }
    std::vector<double> sorted(scores.begin(), scores.end());
    std::stable_sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(sorted.size())));
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        sum += sorted[i];
    }
    return sum / static_cast<double>(k);
}

std::vector<std::size_t> boundary_voxels(const LabelVolume &l, int label) {
    const Dims d = l.dims;
    std::vector<std::size_t> out;
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                if (l.at(x, y, z) != label) {
                    continue;
                }
                const bool face = x == 0 || y == 0 || z == 0 || x == d.nx - 1 || y == d.ny - 1 || z == d.nz - 1;
                const bool edge = face || l.at(x - 1, y, z) != label || l.at(x + 1, y, z) != label || l.at(x, y - 1, z) != label ||
                                  l.at(x, y + 1, z) != label || l.at(x, y, z - 1) != label || l.at(x, y, z + 1) != label;
                if (edge) {
                    out.push_back(d.index(x, y, z));
                }
            }
        }
    }
    return out;
}

double hd95(const LabelVolume &a, const LabelVolume &b, int label, const Spacing &spacing_mm) {
    require_same_dims(a.dims, b.dims, "hd95");
    const auto ba = boundary_voxels(a, label);
    const auto bb = boundary_voxels(b, label);
    if (ba.empty() || bb.empty()) {
        throw std::invalid_argument("hd95: label " + std::to_string(label) + " is empty in one of the volumes");
    }
    const auto to_b = squared_distance_map(a.dims, bb, spacing_mm);
    const auto to_a = squared_distance_map(a.dims, ba, spacing_mm);
    return std::max(directed_hd95(ba, to_b), directed_hd95(bb, to_a));
}

double sdlogj_of_determinants(std::span<const double> det) {
    if (det.empty()) {
        throw std::invalid_argument("sdlogj needs at least one determinant");
    }
    std::vector<double> logs(det.size());
    for (std::size_t i = 0; i < det.size(); ++i) {
        logs[i] = std::log(std::max(det[i], kLogJacobianFloor));
    }
    const double n = static_cast<double>(logs.size());
    const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / n;
    double ss = 0.0;
    for (double l : logs) {
        ss += (l - mean) * (l - mean);
    }
    return std::sqrt(ss / n);
}

double sdlogj(const DeformationField &phi) {
    const Volume det = jacobian_det(phi);
    return sdlogj_of_determinants(det.data);
}

int PairMetrics::present_count() const {
    return static_cast<int>(std::count_if(labels.begin(), labels.end(), [](const LabelMetrics &m) { return m.present; }));
}

PairMetrics evaluate_pair(const LabelVolume &fixed_labels, const LabelVolume &warped_labels, const DeformationField &phi,
                          std::span<const int> label_set, const Spacing &spacing_mm) {
    require_same_dims(fixed_labels.dims, warped_labels.dims, "evaluate_pair");
    require_same_dims(fixed_labels.dims, phi.dims, "evaluate_pair");
    PairMetrics m;
    std::vector<double> scores;
    for (int label : label_set) {
        LabelMetrics lm;
        lm.label = label;
        const bool in_fixed = std::find(fixed_labels.labels.begin(), fixed_labels.labels.end(), label) != fixed_labels.labels.end();
        const bool in_warped = std::find(warped_labels.labels.begin(), warped_labels.labels.end(), label) != warped_labels.labels.end();
        lm.present = in_fixed && in_warped;
        if (lm.present) {
            lm.dice = dice(fixed_labels, warped_labels, label);
            lm.hd95_mm = hd95(fixed_labels, warped_labels, label, spacing_mm);
            scores.push_back(lm.dice);
        }
        m.labels.push_back(lm);
    }
    if (!scores.empty()) {
        m.mean_dice = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
        m.dice30 = dice30(scores);
    }
    m.sdlogj = sdlogj(phi);
    return m;
}

std::string metrics_csv_header() { return "pair_id,label,dice,hd95_mm,mean_dice,dice30,sdlogj\n"; }

std::string metrics_csv_rows(const std::string &pair_id, const PairMetrics &m) {
    std::ostringstream os;
    for (const auto &l : m.labels) {
        os << pair_id << ',' << l.label << ',';
        if (l.present) {
            os << full_precision(l.dice) << ',' << full_precision(l.hd95_mm);
        } else {
            os << "absent,absent";
        }
        os << ",,,\n";
    }
    os << pair_id << ",all,,,";
    if (m.present_count() > 0) {
        os << full_precision(m.mean_dice) << ',' << full_precision(m.dice30);
    } else {
        os << "absent,absent";
    }
    os << ',' << full_precision(m.sdlogj) << '\n';
    return os.str();
}

PairMetrics pool_pairs(std::span<const PairMetrics> pairs) {
    PairMetrics pooled;
    std::vector<double> scores;
    double sd = 0.0;
    for (const auto &m : pairs) {
        for (const auto &l : m.labels) {
            if (l.present) {
                pooled.labels.push_back(l);
                scores.push_back(l.dice);
            }
        }
        sd += m.sdlogj;
    }
    if (!scores.empty()) {
        pooled.mean_dice = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
        pooled.dice30 = dice30(scores);
    }
    if (!pairs.empty()) {
        pooled.sdlogj = sd / static_cast<double>(pairs.size());
    }
    return pooled;
}

std::string pooled_csv_row(const std::string &id, const PairMetrics &pooled) {
    std::ostringstream os;
    os << id << ",all,,,";
    if (pooled.present_count() > 0) {
        os << full_precision(pooled.mean_dice) << ',' << full_precision(pooled.dice30);
    } else {
        os << "absent,absent";
    }
    os << ',' << full_precision(pooled.sdlogj) << '\n';
    return os.str();
}

} // namespace symgrad
