// volume.hpp - Scalar/label volume data model, raw+JSON sidecar I/O, CT windowing.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace symgrad {

// Raised when an optimisation diverges (non-finite objective). Everything else that is
// the caller's fault is std::invalid_argument, I/O trouble is std::runtime_error.
class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Dims {
    int nx = 0;
    int ny = 0;
    int nz = 0;

    [[nodiscard]] std::size_t voxels() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
    }
    [[nodiscard]] int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    [[nodiscard]] bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
    // x-fastest linear index.
    [[nodiscard]] std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
    }
    friend bool operator==(const Dims &, const Dims &) = default;
};

std::string to_string(const Dims &d);

using Spacing = std::array<double, 3>;

enum class Dtype { f32, f64, u16 };

std::string to_string(Dtype t);
Dtype dtype_from_string(const std::string &s);

// Multi-channel scalar volume; channel-major, x-fastest within each channel.
// `dtype` is the payload type used when the volume is written to disk (f32 or f64).
struct Volume {
    Dims dims;
    int channels = 1;
    Spacing spacing_mm{1.0, 1.0, 1.0};
    Dtype dtype = Dtype::f32;
    std::vector<double> data;

    Volume() = default;
    Volume(Dims d, int ch, Spacing sp = {1.0, 1.0, 1.0}, double fill = 0.0);

    [[nodiscard]] std::size_t voxels() const { return dims.voxels(); }
    [[nodiscard]] std::span<double> channel(int c) { return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()}; }
    [[nodiscard]] std::span<const double> channel(int c) const {
        return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
    }
    double &at(int c, int x, int y, int z) { return data[static_cast<std::size_t>(c) * voxels() + dims.index(x, y, z)]; }
    [[nodiscard]] double at(int c, int x, int y, int z) const {
        return data[static_cast<std::size_t>(c) * voxels() + dims.index(x, y, z)];
    }

    // Throws std::invalid_argument on any invariant violation (length, finiteness, spacing).
    void validate() const;
};

// Integer organ labels, 0 = background.
struct LabelVolume {
    Dims dims;
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<std::uint16_t> labels;
    std::optional<std::map<int, std::string>> label_names;

    LabelVolume() = default;
    explicit LabelVolume(Dims d, Spacing sp = {1.0, 1.0, 1.0});

    [[nodiscard]] std::size_t voxels() const { return dims.voxels(); }
    std::uint16_t &at(int x, int y, int z) { return labels[dims.index(x, y, z)]; }
    [[nodiscard]] std::uint16_t at(int x, int y, int z) const { return labels[dims.index(x, y, z)]; }

    void validate() const;
};

struct VolumeHeader {
    Dims dims;
    int channels = 1;
    Spacing spacing_mm{1.0, 1.0, 1.0};
    Dtype dtype = Dtype::f32;
    std::string byte_order = "little";
    std::string order = "x-fastest";
    std::optional<std::map<int, std::string>> label_names;
};

// `path` may name either file of the pair or the common stem; both "<stem>.json" and
// "<stem>.raw" are used.
std::filesystem::path header_path(const std::filesystem::path &path);
std::filesystem::path payload_path(const std::filesystem::path &path);

VolumeHeader read_header(const std::filesystem::path &path);
std::variant<Volume, LabelVolume> read_volume(const std::filesystem::path &path);
Volume read_scalar_volume(const std::filesystem::path &path);
LabelVolume read_label_volume(const std::filesystem::path &path);

void write_volume(const Volume &v, const std::filesystem::path &path);
void write_volume(const LabelVolume &v, const std::filesystem::path &path);

// Linear ramp of [level - width/2, level + width/2] onto [0, 1], clamped.
Volume hu_window(const Volume &v, double level, double width);

struct HuWindow {
    double level;
    double width;
};

inline constexpr HuWindow kAbdominalWindow{40.0, 400.0};
inline constexpr HuWindow kLungWindow{-500.0, 1400.0};
inline constexpr HuWindow kBoneWindow{400.0, 1000.0};

Volume stack_windows(const Volume &v, std::span<const HuWindow> windows);

// Keeps only the largest 6-connected component of `label`; equal sizes resolve to the
// component whose first voxel (in linear order) comes first.
LabelVolume largest_component(const LabelVolume &l, int label);

// Channel k is the indicator of label_set[k].
Volume one_hot(const LabelVolume &l, std::span<const int> label_set);

// Sorted distinct nonzero labels present in the volume.
std::vector<int> present_labels(const LabelVolume &l);

} // namespace symgrad
