// engine.hpp - Symmetric pairwise registration by direct optimisation of a shared
// pre-activation field.
//
// Both directions come from one parameter field: A->B uses +delta and B->A uses -delta,
// so identical inputs at delta = 0 give the identity in both directions, and swapping the
// inputs together with the sign of delta swaps the outputs. Multi-step registration gives
// every step its own field; step i re-registers the step i-1 warped volume to the target
// and the objective is the sum of the per-step losses.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "symgrad/adam.hpp"
#include "symgrad/deform.hpp"
#include "symgrad/losses.hpp"
#include "symgrad/volume.hpp"

namespace symgrad {

struct RegistrationConfig {
    LossWeights weights;
    int steps = 2;
    // Steps used to build the final result; 0 means `steps`. Cannot exceed `steps`.
    int inference_steps = 0;
    int iterations = 500;
    double learning_rate = 1e-2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int control_stride = 4;
    std::uint64_t seed = 0;
    double convergence_tol = 1e-6;
    // Optional CT windows applied to both inputs before registration (empty = raw values).
    std::vector<HuWindow> windows;

    void validate() const;
    [[nodiscard]] int effective_inference_steps() const { return inference_steps == 0 ? steps : inference_steps; }
    [[nodiscard]] AdamSettings adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }
};

RegistrationConfig config_from_json_text(const std::string &text);
RegistrationConfig load_config(const std::filesystem::path &path);
std::string config_to_json_text(const RegistrationConfig &c);

// One-hot segmentations of A and B over the same label set.
struct Segmentations {
    Volume a;
    Volume b;
};

// Everything one step produces for both directions.
struct StepForward {
    PreActivationField u_ab;
    PreActivationField u_ba;
    GradientField g_ab;
    GradientField g_ba;
    DeformationField phi_ab;
    DeformationField phi_ba;
    Volume a_warp;
    Volume b_warp;
    Volume a_seg_warp;
    Volume b_seg_warp;
    LossBreakdown loss;
};

StepForward forward_pass(const Volume &a, const Volume &b, const PreActivationField &delta, const RegistrationConfig &config,
                         const Segmentations *segs = nullptr);

struct MultiStepForward {
    std::vector<StepForward> steps;
    LossBreakdown total; // per-term sums over steps, no gradients
};

MultiStepForward multistep_forward(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas,
                                   const RegistrationConfig &config, const Segmentations *segs = nullptr,
                                   bool with_gradients = false);

struct ObjectiveGradient {
    double total = 0.0;
    LossBreakdown breakdown; // per-term sums over steps
    std::vector<PreActivationField> gradient; // one per delta
};

ObjectiveGradient objective_and_gradient(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas,
                                         const RegistrationConfig &config, const Segmentations *segs = nullptr);

struct TraceEntry {
    int iteration = 0;
    double sim = 0.0;
    double seg = 0.0;
    double reg = 0.0;
    double jac = 0.0;
    double inv = 0.0;
    double total = 0.0;
};

// Optimiser state: the per-step parameter fields, Adam moments (shaped like the
// concatenated fields) and the loss trace, one entry per completed iteration.
struct RegistrationState {
    std::vector<PreActivationField> deltas;
    Adam adam;
    std::vector<TraceEntry> trace;
    int iteration = 0;
};

struct StepFields {
    GradientField g_ab;
    GradientField g_ba;
    DeformationField phi_ab;
    DeformationField phi_ba;
};

struct RegistrationResult {
    // Step fields composed in application order: phi^1 o phi^2 o ...
    DeformationField phi_ab;
    DeformationField phi_ba;
    // Sequentially warped volumes (each step resamples the previous step's output).
    Volume a_warp;
    Volume b_warp;
    std::vector<StepFields> step_fields;
    std::vector<TraceEntry> trace;
    LossBreakdown final_loss;
    std::vector<PreActivationField> deltas;
    bool converged = false;
    // Set by register_pair when labels are supplied: labels of A / B resampled with the
    // composed fields.
    std::optional<LabelVolume> a_labels_warp;
    std::optional<LabelVolume> b_labels_warp;
};

// Thrown by optimize when the objective turns non-finite; carries the trace so far.
class DivergenceError : public NumericalError {
  public:
    DivergenceError(const std::string &what, std::vector<TraceEntry> trace)
        : NumericalError(what), trace_(std::move(trace)) {}
    [[nodiscard]] const std::vector<TraceEntry> &trace() const { return trace_; }

  private:
    std::vector<TraceEntry> trace_;
};

// Zero-initialised parameter fields for `config.steps` steps.
std::vector<PreActivationField> initial_deltas(const Dims &image_dims, const RegistrationConfig &config);

// Result assembled from the first `steps_used` fields without any optimisation.
RegistrationResult assemble_result(const Volume &a, const Volume &b, std::span<const PreActivationField> deltas,
                                   int steps_used, const RegistrationConfig &config, const Segmentations *segs = nullptr);

RegistrationResult optimize(const Volume &a, const Volume &b, const RegistrationConfig &config,
                            const Segmentations *segs = nullptr);

struct LabelPair {
    const LabelVolume &a;
    const LabelVolume &b;
};

// Windowing (if configured), one-hot encoding of the union of labels, optimisation and
// label resampling.
RegistrationResult register_pair(const Volume &a, const Volume &b, const std::optional<LabelPair> &labels,
                                 const RegistrationConfig &config);

struct TermCheck {
    std::string term;
    double max_rel_error = 0.0;
    bool nontrivial = false; // the checked directional derivatives were not all zero
};

struct GradCheckReport {
    std::vector<TermCheck> terms; // one per active weight, then "total"
    double max_rel_error = 0.0;
};

// Relative error |a - b| / max(|a|, |b|, floor); the floor guards 0/0.
double relative_error(double analytic, double numeric, double floor = 1e-10);

// Compares objective_and_gradient with central differences along random directions on a
// random problem of the given size. Each active term is checked alone, then the total.
GradCheckReport gradient_check(const Dims &dims, const RegistrationConfig &config, std::uint64_t seed,
                               int directions = 4, double step = 1e-6);

// CSV with header iteration,sim,seg,reg,jac,inv,total and full double precision.
std::string trace_csv(std::span<const TraceEntry> trace);

} // namespace symgrad
