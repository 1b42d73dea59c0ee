// phantom.hpp - Synthetic labelled phantoms and analytic deformations with exact inverses.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "symgrad/deform.hpp"
#include "symgrad/volume.hpp"

namespace symgrad {

struct Ellipsoid {
    std::array<double, 3> center{};     // voxels
    std::array<double, 3> semi_axes{};  // voxels
    int label = 1;
    double intensity = 1.0;
};

struct PhantomSpec {
    Dims dims{32, 32, 32};
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<Ellipsoid> ellipsoids;
    double background = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class WarpKind { translation, sinusoidal };

struct AnalyticWarp {
    WarpKind kind = WarpKind::sinusoidal;
    double amplitude = 0.0;   // voxels
    double wavelength = 24.0; // voxels, sinusoidal only

    void validate() const;
};

// 64-bit LCG (Knuth MMIX constants) feeding Box-Muller; the noise stream is fully
// specified by the seed.
class Lcg64 {
  public:
    explicit Lcg64(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        return state_;
    }
    // Uniform in (0, 1) from the top 53 bits.
    double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }
    double gaussian();

  private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Later ellipsoids overwrite earlier ones; noise is added to every voxel in linear order.
std::pair<Volume, LabelVolume> make_phantom(const PhantomSpec &spec);

// Returns (phi, phi inverse). translation: p + (A,0,0); sinusoidal: x + A sin(2 pi y / lambda).
std::pair<DeformationField, DeformationField> analytic_field(const AnalyticWarp &w, const Dims &dims);

struct PhantomPair {
    Volume fixed;
    LabelVolume fixed_labels;
    Volume moving;
    LabelVolume moving_labels;
    DeformationField truth;         // moving = fixed o truth
    DeformationField truth_inverse; // maps moving back onto fixed
};

PhantomPair make_pair(const PhantomSpec &spec, const AnalyticWarp &w);

PhantomSpec phantom_spec_from_json_text(const std::string &text);
AnalyticWarp analytic_warp_from_json_text(const std::string &text);

// A small abdominal-like arrangement of organs used by the demos and acceptance runs.
PhantomSpec abdominal_phantom(const Dims &dims, std::uint64_t seed = 1);

} // namespace symgrad
