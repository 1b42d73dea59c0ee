// engine.cpp - Symmetric pairwise registration by direct optimisation of a shared
// pre-activation field.

#include "symgrad/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace symgrad {

namespace {

using json = nlohmann::json;

PreActivationField negated(const PreActivationField &d) {
    PreActivationField out = d;
    for (double &v : out.data) {
        v = -v;
    }
    return out;
}

StepForward step_forward(const Volume &a, const Volume &b, const Volume &a_in, const Volume &b_in, const Volume *a_seg_in,
                         const Volume *b_seg_in, const PreActivationField &delta, const RegistrationConfig &config,
                         const Segmentations *segs, bool with_gradients) {
    StepForward s;
    const Dims dims = a.dims;
    s.u_ab = upsample(delta, config.control_stride, dims);
    s.u_ba = upsample(negated(delta), config.control_stride, dims);
    s.g_ab = activate(s.u_ab);
    s.g_ba = activate(s.u_ba);
    s.phi_ab = integrate(s.g_ab);
    s.phi_ba = integrate(s.g_ba);
    s.a_warp = warp(a_in, s.phi_ab);
    s.b_warp = warp(b_in, s.phi_ba);

    std::optional<SegmentationInputs> seg_inputs;
    if (segs) {
        s.a_seg_warp = warp(*a_seg_in, s.phi_ab);
        s.b_seg_warp = warp(*b_seg_in, s.phi_ba);
        seg_inputs.emplace(SegmentationInputs{segs->a, segs->b, s.a_seg_warp, s.b_seg_warp});
    }
    const LossInputs in{a, b, s.a_warp, s.b_warp, s.g_ab, s.g_ba, s.phi_ab, s.phi_ba, seg_inputs};
    s.loss = loss_total(in, config.weights, with_gradients);
    return s;
}

void accumulate(LossBreakdown &dst, const LossBreakdown &src) {
    dst.sim += src.sim;
    dst.seg += src.seg;
    dst.reg += src.reg;
    dst.jac += src.jac;
    dst.inv += src.inv;
    dst.total += src.total;
}

void check_inputs(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas, const RegistrationConfig &config,
                  const Segmentations *segs) {
    config.validate();
    if (!(a.dims == b.dims) || a.channels != b.channels) {
        throw std::invalid_argument("registration inputs differ in dims or channels: " + to_string(a.dims) + " vs " +
                                    to_string(b.dims));
    }
    if (deltas.empty()) {
        throw std::invalid_argument("at least one parameter field is required");
    }
    const Dims cd = control_dims(a.dims, config.control_stride);
    for (const auto &d : deltas) {
        if (!(d.dims == cd) || d.data.size() != 3 * cd.voxels()) {
            throw std::invalid_argument("parameter field dims " + to_string(d.dims) + " do not match control grid " + to_string(cd));
        }
    }
    if (segs) {
        if (!(segs->a.dims == a.dims) || !(segs->b.dims == a.dims) || segs->a.channels != segs->b.channels) {
            throw std::invalid_argument("segmentations must match the image dims and share one label set");
        }
    }
}

TraceEntry to_trace(int iteration, const LossBreakdown &b) {
    return {iteration, b.sim, b.seg, b.reg, b.jac, b.inv, b.total};
}

std::string full_precision(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

void flatten(std::span<const PreActivationField> fields, std::vector<double> &out) {
    out.clear();
    for (const auto &f : fields) {
        out.insert(out.end(), f.data.begin(), f.data.end());
    }
}

void unflatten(std::span<const double> flat, std::vector<PreActivationField> &fields) {
    std::size_t k = 0;
    for (auto &f : fields) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + f.data.size()),
                  f.data.begin());
        k += f.data.size();
    }
}

} // namespace

void RegistrationConfig::validate() const {
    weights.validate();
    if (steps < 1) {
        throw std::invalid_argument("steps must be >= 1");
    }
    if (inference_steps < 0 || inference_steps > steps) {
        throw std::invalid_argument("inference_steps must lie in [1, steps] (0 selects steps)");
    }
    if (iterations < 0) {
        throw std::invalid_argument("iterations must be >= 0");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be positive");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
        throw std::invalid_argument("invalid Adam settings");
    }
    if (control_stride < 1) {
        throw std::invalid_argument("control_stride must be >= 1");
    }
    if (!(convergence_tol >= 0.0)) {
        throw std::invalid_argument("convergence_tol must be non-negative");
    }
    for (const auto &w : windows) {
        if (!(w.width > 0.0)) {
            throw std::invalid_argument("window width must be positive");
        }
    }
}

RegistrationConfig config_from_json_text(const std::string &text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw std::invalid_argument("config must be a JSON object");
    }
    static const std::set<std::string> known{"alpha",        "beta",        "gamma",         "delta",         "epsilon",
                                             "steps",        "inference_steps", "iterations", "learning_rate", "control_stride",
                                             "seed",         "convergence_tol", "adam_betas", "adam_eps",     "windows"};
    for (const auto &[k, v] : j.items()) {
        if (!known.contains(k)) {
            throw std::invalid_argument("unknown config key '" + k + "'");
        }
    }
    RegistrationConfig c;
    try {
        c.weights.alpha = j.value("alpha", c.weights.alpha);
        c.weights.beta = j.value("beta", c.weights.beta);
        c.weights.gamma = j.value("gamma", c.weights.gamma);
        c.weights.delta = j.value("delta", c.weights.delta);
        c.weights.epsilon = j.value("epsilon", c.weights.epsilon);
        c.steps = j.value("steps", c.steps);
        c.inference_steps = j.value("inference_steps", c.inference_steps);
        c.iterations = j.value("iterations", c.iterations);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.control_stride = j.value("control_stride", c.control_stride);
        c.seed = j.value("seed", c.seed);
        c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        if (j.contains("adam_betas")) {
            const auto b = j.at("adam_betas").get<std::vector<double>>();
            if (b.size() != 2) {
                throw std::invalid_argument("adam_betas needs two values");
            }
            c.adam_beta1 = b[0];
            c.adam_beta2 = b[1];
        }
        if (j.contains("windows")) {
            for (const auto &w : j.at("windows")) {
                const auto lw = w.get<std::vector<double>>();
                if (lw.size() != 2) {
                    throw std::invalid_argument("each window is [level, width]");
                }
                c.windows.push_back({lw[0], lw[1]});
            }
        }
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

RegistrationConfig load_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read config file '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return config_from_json_text(ss.str());
    } catch (const std::invalid_argument &e) {
        throw std::invalid_argument("config '" + path.string() + "': " + e.what());
    }
}

std::string config_to_json_text(const RegistrationConfig &c) {
    json j;
    j["alpha"] = c.weights.alpha;
    j["beta"] = c.weights.beta;
    j["gamma"] = c.weights.gamma;
    j["delta"] = c.weights.delta;
    j["epsilon"] = c.weights.epsilon;
    j["steps"] = c.steps;
    j["inference_steps"] = c.inference_steps;
    j["iterations"] = c.iterations;
    j["learning_rate"] = c.learning_rate;
    j["control_stride"] = c.control_stride;
    j["seed"] = c.seed;
    j["convergence_tol"] = c.convergence_tol;
    j["adam_betas"] = {c.adam_beta1, c.adam_beta2};
    j["adam_eps"] = c.adam_eps;
    if (!c.windows.empty()) {
        j["windows"] = json::array();
        for (const auto &w : c.windows) {
            j["windows"].push_back({w.level, w.width});
        }
    }
    return j.dump(2);
}

StepForward forward_pass(const Volume &a, const Volume &b, const PreActivationField &delta, const RegistrationConfig &config,
                         const Segmentations *segs) {
    check_inputs(a, b, std::span<const PreActivationField>(&delta, 1), config, segs);
    return step_forward(a, b, a, b, segs ? &segs->a : nullptr, segs ? &segs->b : nullptr, delta, config, segs, false);
}

MultiStepForward multistep_forward(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas,
                                   const RegistrationConfig &config, const Segmentations *segs, bool with_gradients) {
    check_inputs(a, b, deltas, config, segs);
    MultiStepForward out;
    out.steps.reserve(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const bool first = i == 0;
        const Volume &a_in = first ? a : out.steps.back().a_warp;
        const Volume &b_in = first ? b : out.steps.back().b_warp;
        const Volume *as_in = segs ? (first ? &segs->a : &out.steps.back().a_seg_warp) : nullptr;
        const Volume *bs_in = segs ? (first ? &segs->b : &out.steps.back().b_seg_warp) : nullptr;
        StepForward s = step_forward(a, b, a_in, b_in, as_in, bs_in, deltas[i], config, segs, with_gradients);
        accumulate(out.total, s.loss);
        out.steps.push_back(std::move(s));
    }
    return out;
}

ObjectiveGradient objective_and_gradient(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas,
                                         const RegistrationConfig &config, const Segmentations *segs) {
    const MultiStepForward fwd = multistep_forward(a, b, deltas, config, segs, true);
    ObjectiveGradient out;
    out.breakdown = fwd.total;
    out.total = fwd.total.total;
    out.gradient.resize(deltas.size());

    const int stride = config.control_stride;
    // Adjoints flowing into the (sequentially warped) inputs of the current step.
    Volume d_a_in, d_b_in, d_as_in, d_bs_in;
    for (std::size_t k = deltas.size(); k-- > 0;) {
        const StepForward &s = fwd.steps[k];
        const LossGradients &g = s.loss.grad;
        const bool last = k + 1 == deltas.size();
        const bool need_image = k > 0;

        Volume d_a_warp = g.a_warp;
        Volume d_b_warp = g.b_warp;
        if (!last) {
            for (std::size_t i = 0; i < d_a_warp.data.size(); ++i) {
                d_a_warp.data[i] += d_a_in.data[i];
                d_b_warp.data[i] += d_b_in.data[i];
            }
        }
        const Volume &a_in = k == 0 ? a : fwd.steps[k - 1].a_warp;
        const Volume &b_in = k == 0 ? b : fwd.steps[k - 1].b_warp;
        WarpAdjoint wa = vjp_warp(a_in, s.phi_ab, d_a_warp, need_image);
        WarpAdjoint wb = vjp_warp(b_in, s.phi_ba, d_b_warp, need_image);

        DeformationField d_phi_ab = g.phi_ab;
        DeformationField d_phi_ba = g.phi_ba;
        d_phi_ab += wa.phi;
        d_phi_ba += wb.phi;

        if (segs) {
            Volume d_as = g.a_seg_warp;
            Volume d_bs = g.b_seg_warp;
            if (!last) {
                for (std::size_t i = 0; i < d_as.data.size(); ++i) {
                    d_as.data[i] += d_as_in.data[i];
                    d_bs.data[i] += d_bs_in.data[i];
                }
            }
            const Volume &as_in = k == 0 ? segs->a : fwd.steps[k - 1].a_seg_warp;
            const Volume &bs_in = k == 0 ? segs->b : fwd.steps[k - 1].b_seg_warp;
            WarpAdjoint sa = vjp_warp(as_in, s.phi_ab, d_as, need_image);
            WarpAdjoint sb = vjp_warp(bs_in, s.phi_ba, d_bs, need_image);
            d_phi_ab += sa.phi;
            d_phi_ba += sb.phi;
            d_as_in = std::move(sa.image);
            d_bs_in = std::move(sb.image);
        }

        GradientField d_g_ab = vjp_integrate(d_phi_ab);
        GradientField d_g_ba = vjp_integrate(d_phi_ba);
        d_g_ab += g.g_ab;
        d_g_ba += g.g_ba;

        const PreActivationField d_u_ab = vjp_activate(s.u_ab, d_g_ab);
        const PreActivationField d_u_ba = vjp_activate(s.u_ba, d_g_ba);
        PreActivationField d_delta = vjp_upsample(d_u_ab, stride, deltas[k].dims);
        const PreActivationField d_neg = vjp_upsample(d_u_ba, stride, deltas[k].dims);
        for (std::size_t i = 0; i < d_delta.data.size(); ++i) {
            d_delta.data[i] -= d_neg.data[i];
        }
        out.gradient[k] = std::move(d_delta);

        d_a_in = std::move(wa.image);
        d_b_in = std::move(wb.image);
    }
    return out;
}

std::vector<PreActivationField> initial_deltas(const Dims &image_dims, const RegistrationConfig &config) {
    config.validate();
    const Dims cd = control_dims(image_dims, config.control_stride);
    return std::vector<PreActivationField>(static_cast<std::size_t>(config.steps), PreActivationField(cd));
}

RegistrationResult assemble_result(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas, int steps_used,
                                   const RegistrationConfig &config, const Segmentations *segs) {
    if (steps_used < 1 || static_cast<std::size_t>(steps_used) > deltas.size()) {
        throw std::invalid_argument("inference cannot use more steps than there are optimised fields");
    }
    const auto used = deltas.first(static_cast<std::size_t>(steps_used));
    const MultiStepForward fwd = multistep_forward(a, b, used, config, segs, false);
    RegistrationResult r;
    r.final_loss = fwd.total;
    r.deltas.assign(deltas.begin(), deltas.end());
    for (std::size_t i = 0; i < fwd.steps.size(); ++i) {
        const StepForward &s = fwd.steps[i];
        r.step_fields.push_back({s.g_ab, s.g_ba, s.phi_ab, s.phi_ba});
        if (i == 0) {
            r.phi_ab = s.phi_ab;
            r.phi_ba = s.phi_ba;
        } else {
            r.phi_ab = compose(r.phi_ab, s.phi_ab);
            r.phi_ba = compose(r.phi_ba, s.phi_ba);
        }
    }
    r.a_warp = fwd.steps.back().a_warp;
    r.b_warp = fwd.steps.back().b_warp;
    return r;
}

RegistrationResult optimize(const Volume &a, const Volume &b, const RegistrationConfig &config, const Segmentations *segs) {
    RegistrationState state;
    state.deltas = initial_deltas(a.dims, config);
    check_inputs(a, b, state.deltas, config, segs);

    std::vector<double> params, grad;
    flatten(state.deltas, params);
    state.adam = Adam(params.size(), config.adam());
    bool converged = false;
    constexpr int kWindow = 10;

    for (; state.iteration < config.iterations; ++state.iteration) {
        const ObjectiveGradient og = objective_and_gradient(a, b, state.deltas, config, segs);
        if (!std::isfinite(og.total)) {
            throw DivergenceError("objective became non-finite at iteration " + std::to_string(state.iteration), state.trace);
        }
        state.trace.push_back(to_trace(state.iteration, og.breakdown));
        if (state.trace.size() > static_cast<std::size_t>(kWindow)) {
            const double now = state.trace.back().total;
            const double before = state.trace[state.trace.size() - 1 - kWindow].total;
            const double scale = std::max(std::abs(before), 1e-300);
            if (std::abs(now - before) / scale < config.convergence_tol) {
                converged = true;
                ++state.iteration;
                break;
            }
        }
        flatten(og.gradient, grad);
        state.adam.step(params, grad);
        unflatten(params, state.deltas);
    }

    RegistrationResult r = assemble_result(a, b, state.deltas, config.effective_inference_steps(), config, segs);
    r.trace = std::move(state.trace);
    r.converged = converged;
    return r;
}

RegistrationResult register_pair(const Volume &a, const Volume &b, const std::optional<LabelPair> &labels,
                                 const RegistrationConfig &config) {
    config.validate();
    const Volume a_in = config.windows.empty() ? a : stack_windows(a, config.windows);
    const Volume b_in = config.windows.empty() ? b : stack_windows(b, config.windows);

    std::optional<Segmentations> segs;
    if (labels) {
        if (!(labels->a.dims == a.dims) || !(labels->b.dims == b.dims)) {
            throw std::invalid_argument("label volumes must match the image dims");
        }
        std::set<int> ids;
        for (int id : present_labels(labels->a)) {
            ids.insert(id);
        }
        for (int id : present_labels(labels->b)) {
            ids.insert(id);
        }
        if (!ids.empty()) {
            const std::vector<int> set(ids.begin(), ids.end());
            segs = Segmentations{one_hot(labels->a, set), one_hot(labels->b, set)};
        }
    }

    RegistrationResult r = optimize(a_in, b_in, config, segs ? &*segs : nullptr);
    if (labels) {
        r.a_labels_warp = warp_labels(labels->a, r.phi_ab);
        r.b_labels_warp = warp_labels(labels->b, r.phi_ba);
    }
    return r;
}

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

GradCheckReport gradient_check(const Dims &dims, const RegistrationConfig &config, std::uint64_t seed, int directions, double step) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    Volume a(dims, 1), b(dims, 1);
    for (double &v : a.data) {
        v = unit(rng);
    }
    for (double &v : b.data) {
        v = unit(rng);
    }
    LabelVolume la(dims), lb(dims);
    for (auto &l : la.labels) {
        l = static_cast<std::uint16_t>(rng() % 3);
    }
    for (auto &l : lb.labels) {
        l = static_cast<std::uint16_t>(rng() % 3);
    }
    const std::vector<int> set{1, 2};
    const Segmentations segs{one_hot(la, set), one_hot(lb, set)};

    std::vector<PreActivationField> deltas = initial_deltas(dims, config);
    for (auto &d : deltas) {
        for (double &v : d.data) {
            v = 0.8 * normal(rng);
        }
    }

    std::vector<std::vector<double>> dirs;
    std::size_t n_params = 0;
    for (const auto &d : deltas) {
        n_params += d.data.size();
    }
    for (int k = 0; k < directions; ++k) {
        std::vector<double> v(n_params);
        double norm = 0.0;
        for (double &x : v) {
            x = normal(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double &x : v) {
            x /= norm;
        }
        dirs.push_back(std::move(v));
    }

    auto shifted = [&](const std::vector<double> &dir, double h) {
        std::vector<PreActivationField> out = deltas;
        std::size_t k = 0;
        for (auto &d : out) {
            for (double &x : d.data) {
                x += h * dir[k++];
            }
        }
        return out;
    };

    auto check = [&](const std::string &name, const LossWeights &w) {
        RegistrationConfig c = config;
        c.weights = w;
        const ObjectiveGradient og = objective_and_gradient(a, b, deltas, c, &segs);
        std::vector<double> flat;
        flatten(og.gradient, flat);
        TermCheck tc{name, 0.0, false};
        for (const auto &dir : dirs) {
            double analytic = 0.0;
            for (std::size_t i = 0; i < flat.size(); ++i) {
                analytic += flat[i] * dir[i];
            }
            const auto plus = shifted(dir, step);
            const auto minus = shifted(dir, -step);
            const double fp = multistep_forward(a, b, plus, c, &segs).total.total;
            const double fm = multistep_forward(a, b, minus, c, &segs).total.total;
            const double numeric = (fp - fm) / (2.0 * step);
            tc.max_rel_error = std::max(tc.max_rel_error, relative_error(analytic, numeric));
            tc.nontrivial = tc.nontrivial || analytic != 0.0 || numeric != 0.0;
        }
        return tc;
    };

    GradCheckReport report;
    const LossWeights &w = config.weights;
    const std::array<std::pair<const char *, double LossWeights::*>, 5> terms{{{"sim", &LossWeights::alpha},
                                                                               {"seg", &LossWeights::beta},
                                                                               {"reg", &LossWeights::gamma},
                                                                               {"jac", &LossWeights::delta},
                                                                               {"inv", &LossWeights::epsilon}}};
    bool any = false;
    for (const auto &[name, member] : terms) {
        if (w.*member == 0.0) {
            continue;
        }
        any = true;
        LossWeights only{0.0, 0.0, 0.0, 0.0, 0.0};
        only.*member = w.*member;
        report.terms.push_back(check(name, only));
    }
    if (any) {
        report.terms.push_back(check("total", w));
    }
    for (const auto &t : report.terms) {
        report.max_rel_error = std::max(report.max_rel_error, t.max_rel_error);
    }
    return report;
}

std::string trace_csv(std::span<const TraceEntry> trace) {
    std::ostringstream os;
    os << "iteration,sim,seg,reg,jac,inv,total\n";
    for (const auto &t : trace) {
        os << t.iteration << ',' << full_precision(t.sim) << ',' << full_precision(t.seg) << ',' << full_precision(t.reg) << ','
           << full_precision(t.jac) << ',' << full_precision(t.inv) << ',' << full_precision(t.total) << '\n';
    }
    return os.str();
}

} // namespace symgrad
