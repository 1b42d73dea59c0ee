// phantom.cpp - Synthetic labelled phantoms and analytic deformations with exact inverses.

#include "symgrad/phantom.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace symgrad {

namespace {

using json = nlohmann::json;

std::array<double, 3> triple(const json &j, const char *key) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 3) {
        throw std::invalid_argument(std::string(key) + " needs three values");
    }
    return {v[0], v[1], v[2]};
}

} // namespace

double Lcg64::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
}

void PhantomSpec::validate() const {
    if (!dims.positive()) {
        throw std::invalid_argument("phantom dims must be positive");
    }
    if (!(std::isfinite(background) && std::isfinite(noise_sigma) && noise_sigma >= 0.0)) {
        throw std::invalid_argument("phantom background/noise must be finite, noise >= 0");
    }
    std::set<int> labels;
    for (const auto &e : ellipsoids) {
        if (e.label <= 0 || e.label > 65535) {
            throw std::invalid_argument("ellipsoid labels must lie in [1, 65535]");
        }
        if (!labels.insert(e.label).second) {
            throw std::invalid_argument("ellipsoid label " + std::to_string(e.label) + " used twice");
        }
        if (!std::isfinite(e.intensity)) {
            throw std::invalid_argument("ellipsoid intensity must be finite");
        }
        for (int a = 0; a < 3; ++a) {
            const double c = e.center[static_cast<std::size_t>(a)];
            const double r = e.semi_axes[static_cast<std::size_t>(a)];
            if (!(r > 0.0) || !std::isfinite(c)) {
                throw std::invalid_argument("ellipsoid semi-axes must be positive");
            }
            if (c - r < 0.0 || c + r > static_cast<double>(dims[a] - 1)) {
                throw std::invalid_argument("ellipsoid with label " + std::to_string(e.label) + " leaves the volume");
            }
        }
    }
}

void AnalyticWarp::validate() const {
    if (!std::isfinite(amplitude)) {
        throw std::invalid_argument("warp amplitude must be finite");
    }
    if (kind == WarpKind::sinusoidal) {
        if (!(wavelength > 0.0)) {
            throw std::invalid_argument("sinusoidal wavelength must be positive");
        }
        if (!(std::abs(amplitude) * 2.0 * std::numbers::pi / wavelength < 1.0)) {
            throw std::invalid_argument("sinusoidal warp needs amplitude * 2 pi / wavelength < 1");
        }
    }
}

std::pair<Volume, LabelVolume> make_phantom(const PhantomSpec &spec) {
    spec.validate();
    const Dims d = spec.dims;
    Volume img(d, 1, spec.spacing_mm, spec.background);
    LabelVolume lab(d, spec.spacing_mm);
    for (const auto &e : spec.ellipsoids) {
        for (int z = 0; z < d.nz; ++z) {
            for (int y = 0; y < d.ny; ++y) {
                for (int x = 0; x < d.nx; ++x) {
                    const double u = (x - e.center[0]) / e.semi_axes[0];
                    const double v = (y - e.center[1]) / e.semi_axes[1];
                    const double w = (z - e.center[2]) / e.semi_axes[2];
                    if (u * u + v * v + w * w <= 1.0) {
                        img.at(0, x, y, z) = e.intensity;
                        lab.at(x, y, z) = static_cast<std::uint16_t>(e.label);
                    }
                }
            }
        }
    }
    if (spec.noise_sigma > 0.0) {
        Lcg64 rng(spec.seed);
        for (double &v : img.data) {
            v += spec.noise_sigma * rng.gaussian();
        }
    }
    return {std::move(img), std::move(lab)};
}

std::pair<DeformationField, DeformationField> analytic_field(const AnalyticWarp &w, const Dims &dims) {
    w.validate();
    DeformationField fwd = identity_field(dims);
    DeformationField inv = fwd;
    for (int z = 0; z < dims.nz; ++z) {
        for (int y = 0; y < dims.ny; ++y) {
            const double shift = w.kind == WarpKind::translation
                                     ? w.amplitude
                                     : w.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(y) / w.wavelength);
            for (int x = 0; x < dims.nx; ++x) {
                fwd.at(0, x, y, z) = x + shift;
                inv.at(0, x, y, z) = x - shift;
            }
        }
    }
    return {std::move(fwd), std::move(inv)};
}

PhantomPair make_pair(const PhantomSpec &spec, const AnalyticWarp &w) {
    auto [fixed, fixed_labels] = make_phantom(spec);
    auto [truth, truth_inverse] = analytic_field(w, spec.dims);
    PhantomPair p;
    p.moving = warp(fixed, truth);
    p.moving_labels = warp_labels(fixed_labels, truth);
    p.fixed = std::move(fixed);
    p.fixed_labels = std::move(fixed_labels);
    p.truth = std::move(truth);
    p.truth_inverse = std::move(truth_inverse);
    return p;
}

PhantomSpec phantom_spec_from_json_text(const std::string &text) {
    PhantomSpec s;
    try {
        const json j = json::parse(text);
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims.size() != 3) {
            throw std::invalid_argument("dims needs three values");
        }
        s.dims = {dims[0], dims[1], dims[2]};
        if (j.contains("spacing_mm")) {
            s.spacing_mm = triple(j, "spacing_mm");
        }
        s.background = j.value("background", 0.0);
        s.noise_sigma = j.value("noise_sigma", 0.0);
        s.seed = j.value("seed", std::uint64_t{0});
        for (const auto &e : j.value("ellipsoids", json::array())) {
            Ellipsoid el;
            el.center = triple(e, "center");
            el.semi_axes = triple(e, "semi_axes");
            el.label = e.at("label").get<int>();
            el.intensity = e.value("intensity", 1.0);
            s.ellipsoids.push_back(el);
        }
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("bad phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

AnalyticWarp analytic_warp_from_json_text(const std::string &text) {
    AnalyticWarp w;
    try {
        const json j = json::parse(text);
        const auto kind = j.value("kind", std::string("sinusoidal"));
        if (kind == "translation") {
            w.kind = WarpKind::translation;
        } else if (kind == "sinusoidal") {
            w.kind = WarpKind::sinusoidal;
        } else {
            throw std::invalid_argument("unknown warp kind '" + kind + "'");
        }
        w.amplitude = j.value("amplitude", 0.0);
        w.wavelength = j.value("wavelength", 24.0);
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("bad warp spec: ") + e.what());
    }
    w.validate();
    return w;
}

PhantomSpec abdominal_phantom(const Dims &dims, std::uint64_t seed) {
    PhantomSpec s;
    s.dims = dims;
    s.seed = seed;
    s.background = 0.0;
    s.noise_sigma = 0.02;
    auto at = [&dims](double fx, double fy, double fz) {
        return std::array<double, 3>{fx * (dims.nx - 1), fy * (dims.ny - 1), fz * (dims.nz - 1)};
    };
    auto size = [&dims](double fx, double fy, double fz) {
        return std::array<double, 3>{fx * (dims.nx - 1), fy * (dims.ny - 1), fz * (dims.nz - 1)};
    };
    // body, liver, spleen, left/right kidney, spine
    s.ellipsoids.push_back({at(0.5, 0.5, 0.5), size(0.42, 0.40, 0.42), 5, 0.3});
    s.ellipsoids.push_back({at(0.34, 0.42, 0.5), size(0.14, 0.16, 0.18), 1, 0.8});
    s.ellipsoids.push_back({at(0.68, 0.40, 0.5), size(0.09, 0.10, 0.12), 2, 0.6});
    s.ellipsoids.push_back({at(0.40, 0.66, 0.46), size(0.06, 0.07, 0.10), 3, 1.0});
    s.ellipsoids.push_back({at(0.62, 0.66, 0.54), size(0.06, 0.07, 0.10), 4, 0.9});
    return s;
}

} // namespace symgrad
