// metrics.hpp - Registration evaluation: dice, dice30, hd95, sdlogj.

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "symgrad/deform.hpp"
#include "symgrad/volume.hpp"

namespace symgrad {

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const LabelVolume &a, const LabelVolume &b, int label);

// Mean of the lowest ceil(0.3 n) scores.
double dice30(std::span<const double> scores);

// Max of the two directed nearest-rank 95th percentiles of boundary-to-boundary distances in mm.
// Throws if the label is empty in either volume.
double hd95(const LabelVolume &a, const LabelVolume &b, int label, const Spacing &spacing_mm);

// Voxels of `label` with a 6-neighbour outside the label or on a volume face.
std::vector<std::size_t> boundary_voxels(const LabelVolume &l, int label);

// Population std of log(max(det, 1e-9)).
double sdlogj(const DeformationField &phi);
double sdlogj_of_determinants(std::span<const double> det);

inline constexpr double kLogJacobianFloor = 1e-9;

struct LabelMetrics {
    int label = 0;
    bool present = false; // label found in both volumes
    double dice = 0.0;
    double hd95_mm = 0.0;
};

struct PairMetrics {
    std::vector<LabelMetrics> labels;
    double mean_dice = 0.0; // over present labels; 0 when none
    double dice30 = 0.0;    // over present labels of this pair
    double sdlogj = 0.0;
    [[nodiscard]] int present_count() const;
};

// Labels missing from either volume are recorded as absent and excluded from the means.
PairMetrics evaluate_pair(const LabelVolume &fixed_labels, const LabelVolume &warped_labels, const DeformationField &phi,
                          std::span<const int> label_set, const Spacing &spacing_mm);

// Header plus one row per (pair, label) and one summary row per pair. Absent values are
// written as "absent".
std::string metrics_csv_header();
std::string metrics_csv_rows(const std::string &pair_id, const PairMetrics &m);

// Summary over several pairs: mean dice and dice30 pool every present (pair, label) score,
// sdlogj is the mean of the per-pair values.
PairMetrics pool_pairs(std::span<const PairMetrics> pairs);

// "<id>,all,,,mean_dice,dice30,sdlogj" for a pooled summary.
std::string pooled_csv_row(const std::string &id, const PairMetrics &pooled);

} // namespace symgrad
