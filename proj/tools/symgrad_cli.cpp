// symgrad - command-line front end: register, warp, jacobian, metrics, phantom, gradcheck.
//
// Exit codes: 0 success, 1 user or I/O error, 2 numerical failure.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "symgrad/deform.hpp"
#include "symgrad/engine.hpp"
#include "symgrad/metrics.hpp"
#include "symgrad/phantom.hpp"
#include "symgrad/volume.hpp"

namespace fs = std::filesystem;
using namespace symgrad;

namespace {

struct Globals {
    int jobs = 1;
    bool quiet = false;
};

std::string fmt6(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string read_text(const fs::path &p, const char *what) {
    std::ifstream in(p);
    if (!in) {
        throw std::runtime_error(std::string("cannot read ") + what + " '" + p.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path &p, const std::string &text) {
    std::ofstream out(p, std::ios::binary);
    if (!out || !(out << text)) {
        throw std::runtime_error("cannot write '" + p.string() + "'");
    }
}

void ensure_dir(const fs::path &p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) {
        throw std::runtime_error("cannot create output directory '" + p.string() + "'");
    }
}

std::vector<int> union_labels(const LabelVolume &a, const LabelVolume &b) {
    std::set<int> s;
    for (int v : present_labels(a)) {
        s.insert(v);
    }
    for (int v : present_labels(b)) {
        s.insert(v);
    }
    return {s.begin(), s.end()};
}

// ---- register ------------------------------------------------------------------------

struct PairPaths {
    std::string id;
    fs::path fixed;
    fs::path moving;
    std::optional<fs::path> fixed_labels;
    std::optional<fs::path> moving_labels;
    fs::path out_dir;
};

struct PairSummary {
    std::string id;
    std::string metrics_rows;
    std::optional<double> dice_before;
    std::optional<double> dice_after;
    PairMetrics after;
    double final_total = 0.0;
    int iterations = 0;
};

// Registers moving (A) onto fixed (B) and writes every output into the pair's directory.
PairSummary run_pair(const PairPaths &p, const RegistrationConfig &config) {
    const Volume fixed = read_scalar_volume(p.fixed);
    const Volume moving = read_scalar_volume(p.moving);
    if (!(fixed.dims == moving.dims) || fixed.channels != moving.channels) {
        throw std::invalid_argument("fixed and moving volumes differ in shape: " + to_string(fixed.dims) + " vs " +
                                    to_string(moving.dims));
    }
    if (p.fixed_labels.has_value() != p.moving_labels.has_value()) {
        throw std::invalid_argument("--fixed-labels and --moving-labels must be given together");
    }
    std::optional<LabelVolume> fixed_l, moving_l;
    if (p.fixed_labels) {
        fixed_l = read_label_volume(*p.fixed_labels);
        moving_l = read_label_volume(*p.moving_labels);
        if (!(fixed_l->dims == fixed.dims) || !(moving_l->dims == fixed.dims)) {
            throw std::invalid_argument("label volumes must match the image dims");
        }
    }

    std::optional<LabelPair> labels;
    if (fixed_l) {
        labels.emplace(LabelPair{*moving_l, *fixed_l});
    }
    const RegistrationResult r = register_pair(moving, fixed, labels, config);

    ensure_dir(p.out_dir);
    write_volume(to_volume(r.phi_ab, fixed.spacing_mm, Dtype::f32), p.out_dir / "phi_ab");
    write_volume(to_volume(r.phi_ba, fixed.spacing_mm, Dtype::f32), p.out_dir / "phi_ba");
    // The optimiser may have worked on windowed channels; the written warps are of the
    // original intensities.
    Volume mw = warp(moving, r.phi_ab);
    Volume fw = warp(fixed, r.phi_ba);
    mw.dtype = moving.dtype;
    fw.dtype = fixed.dtype;
    write_volume(mw, p.out_dir / "moving_warped");
    write_volume(fw, p.out_dir / "fixed_warped");
    write_text(p.out_dir / "trace.csv", trace_csv(r.trace));

    PairSummary s;
    s.id = p.id;
    s.final_total = r.final_loss.total;
    s.iterations = static_cast<int>(r.trace.size());
    std::string rows;
    if (fixed_l) {
        write_volume(*r.a_labels_warp, p.out_dir / "moving_labels_warped");
        write_volume(*r.b_labels_warp, p.out_dir / "fixed_labels_warped");
        const auto set = union_labels(*fixed_l, *moving_l);
        const PairMetrics before = evaluate_pair(*fixed_l, *moving_l, identity_field(fixed.dims), set, fixed.spacing_mm);
        const PairMetrics after = evaluate_pair(*fixed_l, *r.a_labels_warp, r.phi_ab, set, fixed.spacing_mm);
        rows = metrics_csv_rows("before", before) + metrics_csv_rows("after", after);
        s.after = after;
        if (before.present_count() > 0) {
            s.dice_before = before.mean_dice;
        }
        if (after.present_count() > 0) {
            s.dice_after = after.mean_dice;
        }
    } else {
        // Without labels only the field regularity is reported.
        PairMetrics before, after;
        before.sdlogj = 0.0;
        after.sdlogj = sdlogj(r.phi_ab);
        rows = metrics_csv_rows("before", before) + metrics_csv_rows("after", after);
        s.after = after;
    }
    write_text(p.out_dir / "metrics.csv", metrics_csv_header() + rows);
    s.metrics_rows = rows;
    return s;
}

// Prefixes every row of a per-pair block with the pair id so batch summaries stay flat.
std::string prefix_rows(const std::string &pair, const std::string &rows) {
    std::istringstream in(rows);
    std::string line, out;
    while (std::getline(in, line)) {
        out += pair + "/" + line + "\n";
    }
    return out;
}

std::optional<fs::path> existing(const fs::path &dir, const char *stem) {
    const fs::path p = dir / stem;
    if (fs::exists(header_path(p))) {
        return p;
    }
    return std::nullopt;
}

std::vector<PairPaths> discover_batch(const fs::path &batch, const fs::path &out) {
    if (!fs::is_directory(batch)) {
        throw std::runtime_error("batch directory '" + batch.string() + "' does not exist");
    }
    std::vector<fs::path> dirs;
    for (const auto &e : fs::directory_iterator(batch)) {
        if (e.is_directory()) {
            dirs.push_back(e.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<PairPaths> pairs;
    for (const auto &d : dirs) {
        PairPaths p;
        p.id = d.filename().string();
        const auto f = existing(d, "fixed");
        const auto m = existing(d, "moving");
        if (!f || !m) {
            throw std::invalid_argument("pair directory '" + d.string() + "' needs fixed.json and moving.json");
        }
        p.fixed = *f;
        p.moving = *m;
        p.fixed_labels = existing(d, "fixed_labels");
        p.moving_labels = existing(d, "moving_labels");
        p.out_dir = out / p.id;
        pairs.push_back(p);
    }
    if (pairs.empty()) {
        throw std::invalid_argument("batch directory '" + batch.string() + "' holds no pair subdirectories");
    }
    return pairs;
}

// Runs every pair on a pool of `jobs` workers. Results are collected by index, so output
// does not depend on scheduling.
std::vector<PairSummary> run_batch(const std::vector<PairPaths> &pairs, const RegistrationConfig &config, int jobs) {
    std::vector<std::optional<PairSummary>> results(pairs.size());
    std::vector<std::exception_ptr> errors(pairs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < pairs.size(); i = next++) {
            try {
                results[i] = run_pair(pairs[i], config);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int n = std::max(1, std::min<int>(jobs, static_cast<int>(pairs.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) {
        pool.emplace_back(worker);
    }
    for (auto &t : pool) {
        t.join();
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (errors[i]) {
            try {
                std::rethrow_exception(errors[i]);
            } catch (const NumericalError &e) {
                throw DivergenceError("pair '" + pairs[i].id + "': " + e.what(), {});
            } catch (const std::invalid_argument &e) {
                throw std::invalid_argument("pair '" + pairs[i].id + "': " + e.what());
            } catch (const std::exception &e) {
                throw std::runtime_error("pair '" + pairs[i].id + "': " + e.what());
            }
        }
    }
    std::vector<PairSummary> out;
    for (auto &r : results) {
        out.push_back(std::move(*r));
    }
    return out;
}

void print_summary(const PairSummary &s) {
    std::cout << s.id << ": iterations " << s.iterations << ", final loss " << fmt6(s.final_total);
    if (s.dice_before && s.dice_after) {
        std::cout << ", mean dice " << fmt6(*s.dice_before) << " -> " << fmt6(*s.dice_after);
    }
    std::cout << '\n';
}

// ---- gradcheck -------------------------------------------------------------------------

constexpr double kGradTolerance = 1e-5;
constexpr int kGradMaxAxis = 8;

Dims parse_dims(const std::vector<int> &v) {
    if (v.size() == 1) {
        return {v[0], v[0], v[0]};
    }
    if (v.size() == 3) {
        return {v[0], v[1], v[2]};
    }
    throw std::invalid_argument("--dims takes one or three integers");
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"symgrad: symmetric gradient-field deformable registration"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--jobs,-j", g.jobs, "Worker threads for batch registration")->check(CLI::PositiveNumber);
    app.add_flag("--quiet,-q", g.quiet, "Suppress progress and summary output");

    // register
    auto *reg = app.add_subcommand("register", "Register a moving volume onto a fixed one (or a batch of pairs)");
    std::string r_fixed, r_moving, r_fixed_l, r_moving_l, r_config, r_out, r_batch;
    reg->add_option("--fixed", r_fixed, "Fixed volume (target), header or stem");
    reg->add_option("--moving", r_moving, "Moving volume (source), header or stem");
    reg->add_option("--fixed-labels", r_fixed_l, "Fixed label volume");
    reg->add_option("--moving-labels", r_moving_l, "Moving label volume");
    reg->add_option("--config", r_config, "Registration config JSON (defaults used when omitted)");
    reg->add_option("--out-dir", r_out, "Output directory")->required();
    reg->add_option("--batch-dir", r_batch,
                    "Directory of pair subdirectories, each holding fixed, moving and optional fixed_labels/moving_labels");

    // warp
    auto *wrp = app.add_subcommand("warp", "Resample an image (trilinear) or labels (nearest) through a field");
    std::string w_image, w_labels, w_field, w_out;
    auto *w_img_opt = wrp->add_option("--image", w_image, "Scalar volume to warp");
    auto *w_lab_opt = wrp->add_option("--labels", w_labels, "Label volume to warp");
    w_img_opt->excludes(w_lab_opt);
    wrp->add_option("--field", w_field, "Deformation field (3-channel volume)")->required();
    wrp->add_option("--out", w_out, "Output volume")->required();

    // jacobian
    auto *jac = app.add_subcommand("jacobian", "Jacobian determinant map of a field");
    std::string j_field, j_out;
    bool j_sdlogj = false;
    jac->add_option("--field", j_field, "Deformation field (3-channel volume)")->required();
    jac->add_option("--out", j_out, "Output determinant volume");
    jac->add_flag("--sdlogj", j_sdlogj, "Print the standard deviation of the log determinant");

    // metrics
    auto *met = app.add_subcommand("metrics", "Dice, HD95 and SdLogJ report as CSV");
    std::string m_fixed, m_warped, m_field, m_out, m_pair = "pair";
    std::vector<int> m_labels;
    met->add_option("--fixed-labels", m_fixed, "Fixed label volume")->required();
    met->add_option("--warped-labels", m_warped, "Warped moving label volume")->required();
    met->add_option("--field", m_field, "Deformation field used for SdLogJ")->required();
    met->add_option("--labels", m_labels, "Label ids to score (default: union of present labels)")->delimiter(',');
    met->add_option("--out", m_out, "Output CSV (stdout when omitted)");
    met->add_option("--pair-id", m_pair, "Value of the pair_id column");

    // phantom
    auto *pha = app.add_subcommand("phantom", "Write a synthetic phantom pair with its ground-truth fields");
    std::string p_spec, p_warp, p_out;
    int p_size = 48;
    std::uint64_t p_seed = 1;
    pha->add_option("--spec", p_spec, "Phantom spec JSON (default: built-in abdominal phantom)");
    pha->add_option("--warp", p_warp, "Analytic warp JSON (default: sinusoidal, amplitude 3, wavelength 24)");
    pha->add_option("--size", p_size, "Cube size of the built-in phantom")->check(CLI::Range(8, 512));
    pha->add_option("--seed", p_seed, "Noise seed of the built-in phantom");
    pha->add_option("--out-dir", p_out, "Output directory")->required();

    // gradcheck
    auto *gck = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
    std::vector<int> gc_dims{5, 5, 5};
    std::string gc_config;
    std::uint64_t gc_seed = 0;
    int gc_dirs = 4;
    gck->add_option("--dims", gc_dims, "Problem size: one or three integers in [3, 8]")->delimiter(',')->expected(1, 3);
    gck->add_option("--config", gc_config, "Config JSON (defaults: all five weights active)");
    gck->add_option("--seed", gc_seed, "Random seed");
    gck->add_option("--directions", gc_dirs, "Random directions per term")->check(CLI::Range(1, 64));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*reg) {
            const RegistrationConfig config = r_config.empty() ? RegistrationConfig{} : load_config(r_config);
            config.validate();
            if (!r_batch.empty()) {
                if (!r_fixed.empty() || !r_moving.empty()) {
                    throw std::invalid_argument("--batch-dir cannot be combined with --fixed/--moving");
                }
                const auto pairs = discover_batch(r_batch, r_out);
                ensure_dir(r_out);
                const auto results = run_batch(pairs, config, g.jobs);
                std::string csv = metrics_csv_header();
                std::vector<PairMetrics> after;
                for (const auto &s : results) {
                    csv += prefix_rows(s.id, s.metrics_rows);
                    after.push_back(s.after);
                    if (!g.quiet) {
                        print_summary(s);
                    }
                }
                csv += pooled_csv_row("dataset", pool_pairs(after));
                write_text(fs::path(r_out) / "metrics.csv", csv);
            } else {
                if (r_fixed.empty() || r_moving.empty()) {
                    throw std::invalid_argument("register needs --fixed and --moving (or --batch-dir)");
                }
                PairPaths p{"pair", r_fixed, r_moving, std::nullopt, std::nullopt, r_out};
                if (!r_fixed_l.empty()) {
                    p.fixed_labels = r_fixed_l;
                }
                if (!r_moving_l.empty()) {
                    p.moving_labels = r_moving_l;
                }
                const PairSummary s = run_pair(p, config);
                if (!g.quiet) {
                    print_summary(s);
                }
            }
        } else if (*wrp) {
            if (w_image.empty() == w_labels.empty()) {
                throw std::invalid_argument("warp needs exactly one of --image or --labels");
            }
            const DeformationField phi = deformation_from_volume(read_scalar_volume(w_field));
            if (!w_image.empty()) {
                const Volume img = read_scalar_volume(w_image);
                if (!(img.dims == phi.dims)) {
                    throw std::invalid_argument("image dims " + to_string(img.dims) + " do not match field dims " +
                                                to_string(phi.dims));
                }
                Volume out = warp(img, phi);
                out.dtype = img.dtype;
                write_volume(out, w_out);
            } else {
                const LabelVolume l = read_label_volume(w_labels);
                if (!(l.dims == phi.dims)) {
                    throw std::invalid_argument("label dims " + to_string(l.dims) + " do not match field dims " +
                                                to_string(phi.dims));
                }
                LabelVolume out = warp_labels(l, phi);
                out.label_names = l.label_names;
                write_volume(out, w_out);
            }
        } else if (*jac) {
            const Volume fv = read_scalar_volume(j_field);
            const DeformationField phi = deformation_from_volume(fv);
            Volume det = jacobian_det(phi);
            if (!j_out.empty()) {
                det.spacing_mm = fv.spacing_mm;
                det.dtype = fv.dtype;
                write_volume(det, j_out);
            }
            if (j_sdlogj) {
                std::cout << fmt6(sdlogj_of_determinants(det.data)) << '\n';
            } else if (j_out.empty()) {
                throw std::invalid_argument("jacobian needs --out and/or --sdlogj");
            }
        } else if (*met) {
            const LabelVolume fixed = read_label_volume(m_fixed);
            const LabelVolume warped = read_label_volume(m_warped);
            const DeformationField phi = deformation_from_volume(read_scalar_volume(m_field));
            const std::vector<int> set = m_labels.empty() ? union_labels(fixed, warped) : m_labels;
            for (int id : set) {
                if (id <= 0) {
                    throw std::invalid_argument("--labels must be positive ids");
                }
            }
            const PairMetrics m = evaluate_pair(fixed, warped, phi, set, fixed.spacing_mm);
            const std::string csv = metrics_csv_header() + metrics_csv_rows(m_pair, m);
            if (m_out.empty()) {
                std::cout << csv;
            } else {
                write_text(m_out, csv);
                if (!g.quiet) {
                    std::cout << "mean dice " << fmt6(m.mean_dice) << ", dice30 " << fmt6(m.dice30) << ", sdlogj "
                              << fmt6(m.sdlogj) << '\n';
                }
            }
        } else if (*pha) {
            const PhantomSpec spec = p_spec.empty() ? abdominal_phantom(Dims{p_size, p_size, p_size}, p_seed)
                                                    : phantom_spec_from_json_text(read_text(p_spec, "phantom spec"));
            const AnalyticWarp w = p_warp.empty() ? AnalyticWarp{WarpKind::sinusoidal, 3.0, 24.0}
                                                  : analytic_warp_from_json_text(read_text(p_warp, "warp spec"));
            const PhantomPair pair = make_pair(spec, w);
            const fs::path out(p_out);
            ensure_dir(out);
            Volume fixed = pair.fixed, moving = pair.moving;
            fixed.dtype = moving.dtype = Dtype::f64;
            write_volume(fixed, out / "fixed");
            write_volume(moving, out / "moving");
            write_volume(pair.fixed_labels, out / "fixed_labels");
            write_volume(pair.moving_labels, out / "moving_labels");
            write_volume(to_volume(pair.truth, spec.spacing_mm, Dtype::f64), out / "truth");
            write_volume(to_volume(pair.truth_inverse, spec.spacing_mm, Dtype::f64), out / "truth_inverse");
            if (!g.quiet) {
                std::cout << "initial mean dice "
                          << fmt6(evaluate_pair(pair.fixed_labels, pair.moving_labels, identity_field(spec.dims),
                                                union_labels(pair.fixed_labels, pair.moving_labels), spec.spacing_mm)
                                      .mean_dice)
                          << '\n';
            }
        } else if (*gck) {
            const Dims d = parse_dims(gc_dims);
            for (int a = 0; a < 3; ++a) {
                if (d[a] < 3 || d[a] > kGradMaxAxis) {
                    std::cerr << "warning: gradcheck dims must lie in [3, " << kGradMaxAxis << "] per axis, got " << to_string(d)
                              << '\n';
                    return 1;
                }
            }
            RegistrationConfig config = gc_config.empty() ? RegistrationConfig{} : load_config(gc_config);
            if (gc_config.empty()) {
                config.control_stride = 2;
            }
            const GradCheckReport rep = gradient_check(d, config, gc_seed, gc_dirs);
            if (!g.quiet) {
                for (const auto &t : rep.terms) {
                    std::cout << t.term << " max_rel_error " << fmt6(t.max_rel_error) << '\n';
                }
                if (rep.terms.empty()) {
                    std::cout << "all weights are zero: nothing to check\n";
                }
                std::cout << (rep.max_rel_error < kGradTolerance ? "PASS" : "FAIL") << " max_rel_error "
                          << fmt6(rep.max_rel_error) << '\n';
            }
            return rep.max_rel_error < kGradTolerance ? 0 : 2;
        }
    } catch (const NumericalError &e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
