#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hmseg/checkpoint.hpp"
#include "hmseg/losses.hpp"
#include "hmseg/netcore.hpp"
#include "hmseg/tasks.hpp"

namespace hmseg {

// Training variants: mdrop = plain joint training on mixed batches without a
// discriminator; gan = plain training plus the adversarial branch; metal =
// bilevel training without the adversarial branch; full = bilevel plus
// adversarial.
enum class Variant { MDrop, Gan, MetaL, Full };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::MDrop: return "mdrop";
        case Variant::Gan: return "gan";
        case Variant::MetaL: return "metal";
        case Variant::Full: return "full";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "mdrop") return Variant::MDrop;
    if (s == "gan") return Variant::Gan;
    if (s == "metal") return Variant::MetaL;
    if (s == "full") return Variant::Full;
    fail(ErrClass::config, "unknown variant '" + s + "'");
}

inline bool variant_has_inner_loop(Variant v) {
    return v == Variant::MetaL || v == Variant::Full;
}
inline bool variant_has_discriminator(Variant v) {
    return v == Variant::Gan || v == Variant::Full;
}

struct TrainConfig {
    Variant variant = Variant::Full;
    double outer_lr = 5e-4;  // beta
    double weight_decay = 1e-4;
    int meta_batch_tasks = 8;
    int per_task_batch = 1;
    int inner_steps = 1;
    int epochs = 10;
    uint64_t seed = 7;
    LossWeights weights;
    double alpha_init = 0.01;
    bool first_order = false;  // drop Hessian-vector corrections (approximation)
    std::string optimizer = "adamw";  // adamw | sgd
    std::string precision = "f64";    // f32 | f64 training arithmetic
    bool augment = false;             // seeded axis flips on training samples
    int log_every = 5;                // train-DSC cadence in steps
    int checkpoint_every = 0;         // steps; 0 = final checkpoint only
    std::filesystem::path resume;     // checkpoint to continue from

    void validate() const {
        require(outer_lr > 0 && weight_decay >= 0 && meta_batch_tasks >= 1 &&
                    per_task_batch >= 1 && inner_steps >= 1 && epochs >= 1 && alpha_init > 0 &&
                    log_every >= 1 && checkpoint_every >= 0,
                ErrClass::config, "train config values must be positive");
        require(optimizer == "adamw" || optimizer == "sgd", ErrClass::config,
                "optimizer must be adamw or sgd");
        require(precision == "f32" || precision == "f64", ErrClass::config,
                "precision must be f32 or f64");
        require(weights.lambda1 >= 0 && weights.lambda2 >= 0, ErrClass::config,
                "loss weights must be nonnegative");
    }
};

// Everything fixed for the lifetime of one model.
struct ModelBundle {
    ModelConfig model;
    ParamLayout gen_layout;
    ParamLayout down_layout;
    bool has_discriminator = true;
    LossWeights weights;

    static ModelBundle make(const ModelConfig& m, Variant v, LossWeights w) {
        ModelBundle b;
        b.model = m;
        b.has_discriminator = variant_has_discriminator(v);
        if (!b.has_discriminator) w.lambda2 = 0.0;
        b.weights = w;
        b.gen_layout = generator_layout(m);
        b.down_layout = downstream_layout(m, b.has_discriminator);
        return b;
    }
};

// Meta-parameters: generator weights, downstream weights, and the learnable
// inner rate stored as log(alpha) so alpha = exp(log_alpha) stays positive.
struct MetaParams {
    std::vector<double> theta_g;
    std::vector<double> phi_d;
    double log_alpha = 0.0;
    bool has_alpha = true;

    double alpha() const { return std::exp(log_alpha); }
};

MetaParams init_meta_params(const ModelBundle& bundle, const TrainConfig& tc);

struct InnerLossValues {
    double loss_e = 0.0;   // lambda1 * seg + lambda2 * adv
    double seg_term = 0.0;
    double adv_term = 0.0;
    double dis_term = 0.0;  // disc_scale * sum bce(d_hat, T_real), logged alongside
};

// L_E on a task batch at (theta_g, phi_d); the quantity the inner step
// differentiates. The discriminator loss is evaluated alongside for logging
// and for the joint meta-objective.
InnerLossValues inner_loss(const ModelBundle& bundle, std::span<const double> theta_g,
                           std::span<const double> phi_d,
                           std::span<const PatientSample> task_batch);

// theta* after `inner_steps` gradient steps of size alpha on L_E, phi_d held
// fixed.
std::vector<double> inner_adapt(const ModelBundle& bundle, std::span<const double> theta_g,
                                std::span<const double> phi_d, double alpha,
                                std::span<const PatientSample> task_batch, int inner_steps);

// Outer objective for one task: L_E on the full-modality batch plus
// disc_scale * [sum over full batch + sum over the task's miss batch] of
// BCE(d_hat, T_real), all evaluated at (theta_star, phi_d). The miss batch
// contributes only its discriminator term (the sum over D^m + D^f).
double outer_loss(const ModelBundle& bundle, std::span<const double> theta_star,
                  std::span<const double> phi_d, std::span<const PatientSample> full_batch,
                  std::span<const PatientSample> miss_batch);

// Value of the total meta-objective sum_i L_full(theta*_i, phi; ...) with the
// inner adaptations applied inside; this is the scalar the finite-difference
// oracle perturbs.
double meta_objective_value(const ModelBundle& bundle, const MetaParams& params,
                            const MetaBatch& batch,
                            const std::vector<std::vector<PatientSample>>& full_batches,
                            const TrainConfig& tc);

struct TaskLog {
    ModalityMask mask;
    double loss_e = 0.0, seg = 0.0, adv = 0.0, dis = 0.0, full = 0.0;
};

// Gradient of sum_i L_full w.r.t. (theta_g, phi_d, log_alpha); second-order
// terms are exact unless tc.first_order is set.
struct MetaGradients {
    std::vector<double> theta_g;
    std::vector<double> phi_d;
    double dlog_alpha = 0.0;
    int batch_tasks = 0;
};

MetaGradients meta_gradient(const ModelBundle& bundle, const MetaParams& params,
                            const MetaBatch& batch,
                            const std::vector<std::vector<PatientSample>>& full_batches,
                            const TrainConfig& tc, std::vector<TaskLog>* logs = nullptr);

// Adaptive-moment optimizer state over [theta_g | phi_d | log_alpha].
struct OptimizerState {
    std::vector<double> m, v;
    int64_t t = 0;
};

// One optimizer step on the averaged meta-gradient. AdamW uses decoupled
// weight decay on theta_g/phi_d (never on log_alpha); "sgd" applies the
// plain-gradient-descent rule.
void apply_update(const ModelBundle& bundle, MetaParams& params, const MetaGradients& grads,
                  OptimizerState& opt, const TrainConfig& tc);

// Convenience: sample-free single meta-update used by tests; full_batches
// must hold one batch per task.
void meta_update(const ModelBundle& bundle, MetaParams& params, const MetaBatch& batch,
                 const std::vector<std::vector<PatientSample>>& full_batches,
                 OptimizerState& opt, const TrainConfig& tc,
                 std::vector<TaskLog>* logs = nullptr);

struct TrainResult {
    MetaParams params;
    ModelBundle bundle;
    int64_t steps = 0;
    std::filesystem::path checkpoint_path;
    std::filesystem::path metrics_path;
};

// Runs `epochs` of meta-updates (or plain joint updates for the mdrop/gan
// variants), writing metrics.csv, train_dsc.csv and checkpoints under
// out_dir.
TrainResult train(const ModelConfig& model, const TrainConfig& tc, const DatasetSplit& split,
                  const std::filesystem::path& out_dir);

// Tab-3-style ablation entry point: forces the variant, then trains.
TrainResult ablate_variant(const ModelConfig& model, const TrainConfig& tc, Variant variant,
                           const DatasetSplit& split, const std::filesystem::path& out_dir);

Checkpoint make_checkpoint(const ModelBundle& bundle, const MetaParams& params, int64_t step);
MetaParams params_from_checkpoint(const ModelBundle& bundle, const Checkpoint& ckpt);

struct GradCheckReport {
    bool passed = false;
    bool skipped = false;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    int64_t params_checked = 0;
    std::string detail;
};

// Builds a <=50-parameter double-precision model and compares the analytic
// meta-gradient of sum_i L_full against central finite differences over
// every component of (theta_g, phi_d, log_alpha). Skipped (not run) when
// first_order is set, since the approximation intentionally drops the
// curvature terms.
GradCheckReport run_gradcheck(uint64_t seed, bool first_order, double tol = 1e-4);

}  // namespace hmseg
