// volume.cpp - Scalar/label volume data model, raw+JSON sidecar I/O, CT windowing.

#include "symgrad/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

namespace symgrad {

namespace {

using json = nlohmann::json;

std::size_t dtype_size(Dtype t) {
    switch (t) {
    case Dtype::f32:
        return 4;
    case Dtype::f64:
        return 8;
    case Dtype::u16:
        return 2;
    }
    return 0;
}

template <class T> T from_little(const unsigned char *p) {
    std::array<unsigned char, sizeof(T)> b{};
    std::memcpy(b.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(b.begin(), b.end());
    }
    return std::bit_cast<T>(b);
}

template <class T> void append_little(std::vector<unsigned char> &out, T value) {
    auto b = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(b.begin(), b.end());
    }
    out.insert(out.end(), b.begin(), b.end());
}

bool has_pair_extension(const std::filesystem::path &p) {
    const auto ext = p.extension().string();
    return ext == ".json" || ext == ".raw";
}

std::filesystem::path with_extension(const std::filesystem::path &path, const char *ext) {
    if (has_pair_extension(path)) {
        auto p = path;
        p.replace_extension(ext);
        return p;
    }
    auto p = path;
    p += ext;
    return p;
}

std::vector<unsigned char> slurp(const std::filesystem::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + p.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_dims(const Dims &d) {
    if (!d.positive()) {
        throw std::invalid_argument("volume dims must be positive, got " + to_string(d));
    }
}

void check_spacing(const Spacing &s) {
    for (double v : s) {
        if (!(std::isfinite(v) && v > 0.0)) {
            throw std::invalid_argument("voxel spacing must be finite and positive");
        }
    }
}

json header_to_json(const VolumeHeader &h) {
    json j;
    j["dims"] = {h.dims.nx, h.dims.ny, h.dims.nz};
    j["channels"] = h.channels;
    j["spacing_mm"] = {h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2]};
    j["dtype"] = to_string(h.dtype);
    j["order"] = h.order;
    j["byte_order"] = h.byte_order;
    if (h.label_names) {
        json names = json::object();
        for (const auto &[id, name] : *h.label_names) {
            names[std::to_string(id)] = name;
        }
        j["label_names"] = names;
    }
    return j;
}

void write_pair(const VolumeHeader &h, const std::vector<unsigned char> &payload, const std::filesystem::path &path) {
    const auto hp = header_path(path);
    const auto rp = payload_path(path);
    {
        std::ofstream out(hp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write '" + hp.string() + "'");
        }
        out << header_to_json(h).dump(2) << '\n';
        if (!out) {
            throw std::runtime_error("failed writing '" + hp.string() + "'");
        }
    }
    std::ofstream out(rp, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write '" + rp.string() + "'");
    }
    out.write(reinterpret_cast<const char *>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) {
        throw std::runtime_error("failed writing '" + rp.string() + "'");
    }
}

} // namespace

std::string to_string(const Dims &d) {
    std::ostringstream os;
    os << '(' << d.nx << ',' << d.ny << ',' << d.nz << ')';
    return os.str();
}

std::string to_string(Dtype t) {
    switch (t) {
    case Dtype::f32:
        return "f32";
    case Dtype::f64:
        return "f64";
    case Dtype::u16:
        return "u16";
    }
    return "?";
}

Dtype dtype_from_string(const std::string &s) {
    if (s == "f32") {
        return Dtype::f32;
    }
    if (s == "f64") {
        return Dtype::f64;
    }
    if (s == "u16") {
        return Dtype::u16;
    }
    throw std::invalid_argument("unknown dtype '" + s + "'");
}

Volume::Volume(Dims d, int ch, Spacing sp, double fill)
    : dims(d), channels(ch), spacing_mm(sp), data(d.voxels() * static_cast<std::size_t>(std::max(ch, 0)), fill) {
    check_dims(d);
    if (ch <= 0) {
        throw std::invalid_argument("volume channel count must be positive");
    }
    check_spacing(sp);
}

void Volume::validate() const {
    check_dims(dims);
    if (channels <= 0) {
        throw std::invalid_argument("volume channel count must be positive");
    }
    check_spacing(spacing_mm);
    if (dtype == Dtype::u16) {
        throw std::invalid_argument("scalar volumes are stored as f32 or f64");
    }
    if (data.size() != dims.voxels() * static_cast<std::size_t>(channels)) {
        throw std::invalid_argument("volume data length does not match dims x channels");
    }
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("volume contains non-finite values");
        }
    }
}

LabelVolume::LabelVolume(Dims d, Spacing sp) : dims(d), spacing_mm(sp), labels(d.voxels(), 0) {
    check_dims(d);
    check_spacing(sp);
}

void LabelVolume::validate() const {
    check_dims(dims);
    check_spacing(spacing_mm);
    if (labels.size() != dims.voxels()) {
        throw std::invalid_argument("label data length does not match dims");
    }
    if (label_names) {
        for (auto l : labels) {
            if (l != 0 && !label_names->contains(l)) {
                throw std::invalid_argument("label " + std::to_string(l) + " missing from label_names");
            }
        }
    }
}

std::filesystem::path header_path(const std::filesystem::path &path) { return with_extension(path, ".json"); }
std::filesystem::path payload_path(const std::filesystem::path &path) { return with_extension(path, ".raw"); }

VolumeHeader read_header(const std::filesystem::path &path) {
    const auto hp = header_path(path);
    std::ifstream in(hp);
    if (!in) {
        throw std::runtime_error("missing volume header '" + hp.string() + "'");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception &e) {
        throw std::runtime_error("corrupt volume header '" + hp.string() + "': " + e.what());
    }
    VolumeHeader h;
    try {
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims.size() != 3) {
            throw std::runtime_error("dims must have 3 entries");
        }
        h.dims = {dims[0], dims[1], dims[2]};
        h.channels = j.at("channels").get<int>();
        const auto sp = j.at("spacing_mm").get<std::vector<double>>();
        if (sp.size() != 3) {
            throw std::runtime_error("spacing_mm must have 3 entries");
        }
        h.spacing_mm = {sp[0], sp[1], sp[2]};
        h.dtype = dtype_from_string(j.at("dtype").get<std::string>());
        h.order = j.value("order", std::string("x-fastest"));
        h.byte_order = j.value("byte_order", std::string("little"));
        if (j.contains("label_names")) {
            std::map<int, std::string> names;
            for (const auto &[k, v] : j.at("label_names").items()) {
                names[std::stoi(k)] = v.get<std::string>();
            }
            h.label_names = std::move(names);
        }
    } catch (const json::exception &e) {
        throw std::runtime_error("corrupt volume header '" + hp.string() + "': " + e.what());
    } catch (const std::invalid_argument &e) {
        throw std::runtime_error("corrupt volume header '" + hp.string() + "': " + e.what());
    }
    if (h.order != "x-fastest") {
        throw std::runtime_error("unsupported axis order '" + h.order + "'");
    }
    if (h.byte_order != "little") {
        throw std::runtime_error("unsupported byte order '" + h.byte_order + "'");
    }
    if (!h.dims.positive() || h.channels <= 0) {
        throw std::runtime_error("corrupt volume header '" + hp.string() + "': non-positive dims or channels");
    }
    if (h.dtype == Dtype::u16 && h.channels != 1) {
        throw std::runtime_error("label volumes must have exactly one channel");
    }
    return h;
}

std::variant<Volume, LabelVolume> read_volume(const std::filesystem::path &path) {
    const VolumeHeader h = read_header(path);
    const auto bytes = slurp(payload_path(path));
    const std::size_t count = h.dims.voxels() * static_cast<std::size_t>(h.channels);
    const std::size_t width = dtype_size(h.dtype);
    if (bytes.size() != count * width) {
        throw std::runtime_error("payload length mismatch in '" + payload_path(path).string() + "': expected " +
                                 std::to_string(count * width) + " bytes, found " + std::to_string(bytes.size()));
    }

    if (h.dtype == Dtype::u16) {
        LabelVolume l(h.dims, h.spacing_mm);
        for (std::size_t i = 0; i < count; ++i) {
            l.labels[i] = from_little<std::uint16_t>(bytes.data() + 2 * i);
        }
        l.label_names = h.label_names;
        l.validate();
        return l;
    }

    Volume v(h.dims, h.channels, h.spacing_mm);
    v.dtype = h.dtype;
    for (std::size_t i = 0; i < count; ++i) {
        if (h.dtype == Dtype::f32) {
            v.data[i] = static_cast<double>(from_little<float>(bytes.data() + 4 * i));
        } else {
            v.data[i] = from_little<double>(bytes.data() + 8 * i);
        }
        if (!std::isfinite(v.data[i])) {
            throw std::runtime_error("non-finite value in payload '" + payload_path(path).string() + "'");
        }
    }
    return v;
}

Volume read_scalar_volume(const std::filesystem::path &path) {
    auto v = read_volume(path);
    if (auto *vol = std::get_if<Volume>(&v)) {
        return std::move(*vol);
    }
    throw std::runtime_error("'" + path.string() + "' holds labels, expected a scalar volume");
}

LabelVolume read_label_volume(const std::filesystem::path &path) {
    auto v = read_volume(path);
    if (auto *lab = std::get_if<LabelVolume>(&v)) {
        return std::move(*lab);
    }
    throw std::runtime_error("'" + path.string() + "' holds a scalar volume, expected labels (dtype u16)");
}

void write_volume(const Volume &v, const std::filesystem::path &path) {
    v.validate();
    VolumeHeader h;
    h.dims = v.dims;
    h.channels = v.channels;
    h.spacing_mm = v.spacing_mm;
    h.dtype = v.dtype;
    std::vector<unsigned char> payload;
    payload.reserve(v.data.size() * dtype_size(v.dtype));
    for (double d : v.data) {
        if (v.dtype == Dtype::f32) {
            append_little(payload, static_cast<float>(d));
        } else {
            append_little(payload, d);
        }
    }
    write_pair(h, payload, path);
}

void write_volume(const LabelVolume &v, const std::filesystem::path &path) {
    v.validate();
    VolumeHeader h;
    h.dims = v.dims;
    h.channels = 1;
    h.spacing_mm = v.spacing_mm;
    h.dtype = Dtype::u16;
    h.label_names = v.label_names;
    std::vector<unsigned char> payload;
    payload.reserve(v.labels.size() * 2);
    for (auto l : v.labels) {
        append_little(payload, l);
    }
    write_pair(h, payload, path);
}

Volume hu_window(const Volume &v, double level, double width) {
    if (!(width > 0.0)) {
        throw std::invalid_argument("window width must be positive");
    }
    if (v.channels != 1) {
        throw std::invalid_argument("hu_window expects a single-channel volume");
    }
    Volume out = v;
    const double lo = level - width / 2.0;
    for (double &d : out.data) {
        d = std::clamp((d - lo) / width, 0.0, 1.0);
    }
    return out;
}

Volume stack_windows(const Volume &v, std::span<const HuWindow> windows) {
    if (windows.empty()) {
        throw std::invalid_argument("stack_windows needs at least one window");
    }
    if (v.channels != 1) {
        throw std::invalid_argument("stack_windows expects a single-channel volume");
    }
    Volume out(v.dims, static_cast<int>(windows.size()), v.spacing_mm);
    out.dtype = v.dtype;
    for (std::size_t k = 0; k < windows.size(); ++k) {
        const Volume w = hu_window(v, windows[k].level, windows[k].width);
        std::copy(w.data.begin(), w.data.end(), out.channel(static_cast<int>(k)).begin());
    }
    return out;
}

LabelVolume largest_component(const LabelVolume &l, int label) {
    const Dims d = l.dims;
    const std::size_t n = d.voxels();
    std::vector<int> component(n, -1);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> stack;

    for (std::size_t seed = 0; seed < n; ++seed) {
        if (l.labels[seed] != label || component[seed] >= 0) {
            continue;
        }
        const int id = static_cast<int>(sizes.size());
        std::size_t size = 0;
        component[seed] = id;
        stack.push_back(seed);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(i % static_cast<std::size_t>(d.nx));
            const int y = static_cast<int>((i / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
            const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)));
            const std::array<std::array<int, 3>, 6> nbrs{{{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}}};
            for (const auto &q : nbrs) {
                if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= d.nx || q[1] >= d.ny || q[2] >= d.nz) {
                    continue;
                }
                const std::size_t j = d.index(q[0], q[1], q[2]);
                if (l.labels[j] == label && component[j] < 0) {
                    component[j] = id;
                    stack.push_back(j);
                }
            }
        }
        sizes.push_back(size);
    }

    LabelVolume out = l;
    if (sizes.size() <= 1) {
        return out;
    }
    // Components are numbered in order of their seed's linear index, so the first maximum wins ties.
    const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < n; ++i) {
        if (component[i] >= 0 && component[i] != keep) {
            out.labels[i] = 0;
        }
    }
    return out;
}

Volume one_hot(const LabelVolume &l, std::span<const int> label_set) {
    if (label_set.empty()) {
        throw std::invalid_argument("one_hot needs a non-empty label set");
    }
    std::set<int> seen;
    for (int id : label_set) {
        if (id == 0) {
            throw std::invalid_argument("one_hot label set must not contain background 0");
        }
        if (!seen.insert(id).second) {
            throw std::invalid_argument("duplicate label id " + std::to_string(id) + " in one_hot label set");
        }
    }
    Volume out(l.dims, static_cast<int>(label_set.size()), l.spacing_mm);
    for (std::size_t k = 0; k < label_set.size(); ++k) {
        auto ch = out.channel(static_cast<int>(k));
        for (std::size_t i = 0; i < l.labels.size(); ++i) {
            ch[i] = l.labels[i] == label_set[k] ? 1.0 : 0.0;
        }
    }
    return out;
}

std::vector<int> present_labels(const LabelVolume &l) {
    std::set<int> ids;
    for (auto v : l.labels) {
        if (v != 0) {
            ids.insert(v);
        }
    }
    return {ids.begin(), ids.end()};
}

} // namespace symgrad
