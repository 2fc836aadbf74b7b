#include "hmseg/metaengine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "hmseg/evalsuite.hpp"
#include "hmseg/rng.hpp"
#include "hmseg/synthvol.hpp"

namespace hmseg {

namespace {

template <typename S>
Tensor<S> labels_tensor(const PatientSample& s) {
    Tensor<S> t({kNumRegions, s.dims[0], s.dims[1], s.dims[2]});
    const int64_t n = s.voxels();
    for (int r = 0; r < kNumRegions; ++r)
        for (int64_t i = 0; i < n; ++i)
            t[r * n + i] = S(static_cast<double>(s.labels[static_cast<size_t>(r)][static_cast<size_t>(i)]));
    return t;
}

template <typename S>
Tensor<S> code_tensor(const ModalityMask& mask) {
    Tensor<S> t({mask.m});
    for (int j = 0; j < mask.m; ++j) t[j] = S(mask.test(j) ? 1.0 : 0.0);
    return t;
}

template <typename S>
Tensor<S> ones_code(int m) {
    Tensor<S> t({m});
    t.fill(S(1.0));
    return t;
}

template <typename From, typename To>
std::vector<To> cast_vec(std::span<const From> in) {
    std::vector<To> out(in.size());
    for (size_t i = 0; i < in.size(); ++i) out[i] = To(in[i]);
    return out;
}

std::vector<double> to_double_vec(std::span<const double> in) {
    return std::vector<double>(in.begin(), in.end());
}
std::vector<double> to_double_vec(std::span<const float> in) {
    std::vector<double> out(in.size());
    for (size_t i = 0; i < in.size(); ++i) out[i] = static_cast<double>(in[i]);
    return out;
}

template <typename S>
double dot_value(const std::vector<S>& a, const std::vector<S>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += value_of(a[i]) * value_of(b[i]);
    return acc;
}

// Per-batch generator loss graph. dis_sum is the raw (unscaled) sum of the
// discriminator BCE terms, a zero scalar when the variant has none.
template <typename S>
struct BatchLossIds {
    typename Tape<S>::Id loss_e;
    typename Tape<S>::Id seg_term;
    typename Tape<S>::Id adv_term;
    typename Tape<S>::Id dis_sum;
};

template <typename S>
BatchLossIds<S> build_generator_loss(NetForward<S>& net, const ModelBundle& mb,
                                     std::span<const PatientSample> batch) {
    require(!batch.empty(), ErrClass::precondition, "empty batch");
    Tape<S>& tape = net.tape();
    auto seg_acc = tape.zero_scalar();
    auto adv_acc = tape.zero_scalar();
    auto dis_acc = tape.zero_scalar();
    for (const PatientSample& s : batch) {
        GeneratorOut<S> g = net.forward_generator(s);
        auto pred = net.decode(g);
        auto d = tape.dice_loss(pred, labels_tensor<S>(s), kDiceEps);
        seg_acc = tape.add(seg_acc, d);
        if (mb.has_discriminator) {
            auto dhat = net.discriminate(g.bottleneck.fused);
            adv_acc = tape.add(
                adv_acc, tape.bce_mean(dhat, ones_code<S>(mb.model.modalities), kBceClamp));
            dis_acc =
                tape.add(dis_acc, tape.bce_mean(dhat, code_tensor<S>(s.availability), kBceClamp));
        }
    }
    BatchLossIds<S> out;
    auto seg_mean = tape.scale(seg_acc, 1.0 / static_cast<double>(batch.size()));
    out.seg_term = tape.scale(seg_mean, mb.weights.lambda1);
    out.adv_term = tape.scale(adv_acc, mb.weights.lambda2);
    out.loss_e = tape.add(out.seg_term, out.adv_term);
    out.dis_sum = dis_acc;
    return out;
}

// Discriminator-only sum for extra samples in the outer objective (their
// segmentation term is not part of L^full).
template <typename S>
typename Tape<S>::Id build_disc_sum(NetForward<S>& net, const ModelBundle& mb,
                                    std::span<const PatientSample> batch) {
    Tape<S>& tape = net.tape();
    auto dis_acc = tape.zero_scalar();
    for (const PatientSample& s : batch) {
        GeneratorOut<S> g = net.forward_generator(s);
        auto dhat = net.discriminate(g.bottleneck.fused);
        dis_acc =
            tape.add(dis_acc, tape.bce_mean(dhat, code_tensor<S>(s.availability), kBceClamp));
    }
    return dis_acc;
}

template <typename S>
struct OuterIds {
    typename Tape<S>::Id total;
    typename Tape<S>::Id loss_e;
    typename Tape<S>::Id dis_term;
};

template <typename S>
OuterIds<S> build_outer_loss(NetForward<S>& net, const ModelBundle& mb,
                             std::span<const PatientSample> full_batch,
                             std::span<const PatientSample> miss_batch) {
    for (const PatientSample& s : full_batch)
        require(s.availability.all(), ErrClass::precondition,
                "outer batch contains a non-full sample (" + s.id + ")");
    Tape<S>& tape = net.tape();
    BatchLossIds<S> g = build_generator_loss(net, mb, full_batch);
    auto dis_sum = g.dis_sum;
    if (mb.has_discriminator && !miss_batch.empty())
        dis_sum = tape.add(dis_sum, build_disc_sum(net, mb, miss_batch));
    OuterIds<S> out;
    out.loss_e = g.loss_e;
    out.dis_term = tape.scale(dis_sum, mb.weights.disc_scale);
    out.total = tape.add(out.loss_e, out.dis_term);
    return out;
}

template <typename S>
struct InnerGrad {
    std::vector<S> theta;
    std::vector<S> phi;
};

// d L_E / d theta_g (and phi, needed by the dual sweep), with loss values
// reported when requested.
template <typename S>
InnerGrad<S> inner_gradient(const ModelBundle& mb, std::span<const S> theta,
                            std::span<const S> phi, std::span<const PatientSample> batch,
                            InnerLossValues* values) {
    Tape<S> tape;
    NetForward<S> net(tape, mb.model, mb.gen_layout, mb.down_layout, theta, phi);
    BatchLossIds<S> ids = build_generator_loss(net, mb, batch);
    if (values) {
        values->loss_e = value_of(tape.val(ids.loss_e)[0]);
        values->seg_term = value_of(tape.val(ids.seg_term)[0]);
        values->adv_term = value_of(tape.val(ids.adv_term)[0]);
        values->dis_term = mb.weights.disc_scale * value_of(tape.val(ids.dis_sum)[0]);
    }
    tape.backward(ids.loss_e);
    return {net.generator_grad(), net.downstream_grad()};
}

std::string block_of_index(const ParamLayout& lay, int64_t i) {
    for (const ParamBlock& b : lay.blocks)
        if (i >= b.offset && i < b.offset + b.size) return b.name;
    return "?";
}

void check_finite(const std::vector<double>& g, const ParamLayout& lay, const char* what) {
    for (size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i]))
            fail(ErrClass::numeric, std::string("non-finite ") + what + " gradient in block " +
                                        block_of_index(lay, static_cast<int64_t>(i)));
}

std::string block_norms(const ParamLayout& lay, const std::vector<double>& g) {
    std::ostringstream os;
    for (const ParamBlock& b : lay.blocks) {
        double acc = 0.0;
        for (int64_t i = 0; i < b.size; ++i) {
            double x = g[static_cast<size_t>(b.offset + i)];
            acc += std::isfinite(x) ? x * x : std::numeric_limits<double>::infinity();
        }
        os << ' ' << b.name << "=" << std::sqrt(acc);
    }
    return os.str();
}

struct TaskGradOut {
    std::vector<double> theta;
    std::vector<double> phi;
    double dlog_alpha = 0.0;
    TaskLog log;
};

// One task's contribution to grad sum_i L_full: reverse step through the
// inner adaptation chain with exact curvature terms from dual-number sweeps.
template <typename S>
TaskGradOut bilevel_task_gradient(const ModelBundle& mb, const MetaParams& p,
                                  const MetaBatch::Task& task,
                                  std::span<const PatientSample> full_batch,
                                  const TrainConfig& tc) {
    using DS = DualT<S>;
    const double alpha = p.alpha();

    std::vector<S> theta = cast_vec<double, S>(p.theta_g);
    std::vector<S> phi = cast_vec<double, S>(p.phi_d);

    TaskGradOut out;
    out.log.mask = task.mask;

    // Inner chain: theta_0 = theta, theta_{j+1} = theta_j - alpha * g_j.
    std::vector<std::vector<S>> thetas{theta};
    std::vector<std::vector<S>> inner_grads;
    for (int j = 0; j < tc.inner_steps; ++j) {
        InnerLossValues iv;
        InnerGrad<S> g =
            inner_gradient<S>(mb, thetas.back(), phi, task.samples, j == 0 ? &iv : nullptr);
        if (j == 0) {
            out.log.loss_e = iv.loss_e;
            out.log.seg = iv.seg_term;
            out.log.adv = iv.adv_term;
            out.log.dis = iv.dis_term;
        }
        check_finite(to_double_vec(std::span<const S>(g.theta)), mb.gen_layout, "inner");
        std::vector<S> next = thetas.back();
        for (size_t i = 0; i < next.size(); ++i) next[i] -= S(alpha) * g.theta[i];
        thetas.push_back(std::move(next));
        inner_grads.push_back(std::move(g.theta));
    }

    // Outer loss at the adapted parameters.
    Tape<S> tape;
    NetForward<S> net(tape, mb.model, mb.gen_layout, mb.down_layout, thetas.back(), phi);
    OuterIds<S> ob = build_outer_loss(net, mb, full_batch, task.samples);
    out.log.full = value_of(tape.val(ob.total)[0]);
    tape.backward(ob.total);
    std::vector<S> u = net.generator_grad();
    std::vector<S> v = net.downstream_grad();

    // Reverse through the adaptation chain. The dual sweep of the inner
    // gradient at (theta_j + eps*u, phi) yields exact H_theta,theta * u in
    // the theta tangents and H_phi,theta * u in the phi tangents.
    double dalpha = 0.0;
    for (int j = tc.inner_steps - 1; j >= 0; --j) {
        dalpha -= dot_value(inner_grads[static_cast<size_t>(j)], u);
        if (tc.first_order) continue;
        std::vector<DS> theta_d(theta.size());
        for (size_t i = 0; i < theta.size(); ++i)
            theta_d[i] = DS(thetas[static_cast<size_t>(j)][i], u[i]);
        std::vector<DS> phi_d(phi.size());
        for (size_t i = 0; i < phi.size(); ++i) phi_d[i] = DS(phi[i], S(0));
        InnerGrad<DS> gd = inner_gradient<DS>(mb, theta_d, phi_d, task.samples, nullptr);
        for (size_t i = 0; i < u.size(); ++i) u[i] -= S(alpha * tangent_of(gd.theta[i]));
        for (size_t i = 0; i < v.size(); ++i) v[i] -= S(alpha * tangent_of(gd.phi[i]));
    }

    out.theta = to_double_vec(std::span<const S>(u));
    out.phi = to_double_vec(std::span<const S>(v));
    out.dlog_alpha = p.has_alpha ? dalpha * alpha : 0.0;
    return out;
}

// Plain joint step for the ablation variants without an inner loop:
// objective = L_E + disc_scale * sum bce(d_hat, T_real) on a mixed batch.
template <typename S>
TaskGradOut plain_gradient(const ModelBundle& mb, const MetaParams& p,
                           std::span<const PatientSample> batch) {
    std::vector<S> theta = cast_vec<double, S>(p.theta_g);
    std::vector<S> phi = cast_vec<double, S>(p.phi_d);
    Tape<S> tape;
    NetForward<S> net(tape, mb.model, mb.gen_layout, mb.down_layout, theta, phi);
    BatchLossIds<S> ids = build_generator_loss(net, mb, batch);
    auto dis_term = tape.scale(ids.dis_sum, mb.weights.disc_scale);
    auto total = tape.add(ids.loss_e, dis_term);

    TaskGradOut out;
    out.log.loss_e = value_of(tape.val(ids.loss_e)[0]);
    out.log.seg = value_of(tape.val(ids.seg_term)[0]);
    out.log.adv = value_of(tape.val(ids.adv_term)[0]);
    out.log.dis = value_of(tape.val(dis_term)[0]);
    out.log.full = value_of(tape.val(total)[0]);
    tape.backward(total);
    out.theta = to_double_vec(std::span<const S>(net.generator_grad()));
    out.phi = to_double_vec(std::span<const S>(net.downstream_grad()));
    return out;
}

template <typename S>
MetaGradients meta_gradient_impl(const ModelBundle& bundle, const MetaParams& params,
                                 const MetaBatch& batch,
                                 const std::vector<std::vector<PatientSample>>& full_batches,
                                 const TrainConfig& tc, std::vector<TaskLog>* logs) {
    require(batch.size() > 0, ErrClass::precondition, "empty meta-batch");
    require(full_batches.size() == static_cast<size_t>(batch.size()), ErrClass::precondition,
            "one full batch per task required");
    MetaGradients g;
    g.theta_g.assign(params.theta_g.size(), 0.0);
    g.phi_d.assign(params.phi_d.size(), 0.0);
    g.batch_tasks = batch.size();
    for (int i = 0; i < batch.size(); ++i) {
        TaskGradOut t = bilevel_task_gradient<S>(bundle, params, batch.tasks[static_cast<size_t>(i)],
                                                 full_batches[static_cast<size_t>(i)], tc);
        for (size_t k = 0; k < g.theta_g.size(); ++k) g.theta_g[k] += t.theta[k];
        for (size_t k = 0; k < g.phi_d.size(); ++k) g.phi_d[k] += t.phi[k];
        g.dlog_alpha += t.dlog_alpha;
        if (logs) logs->push_back(t.log);
    }
    if (!std::isfinite(g.dlog_alpha)) fail(ErrClass::numeric, "non-finite meta-gradient for alpha");
    for (double x : g.theta_g)
        if (!std::isfinite(x))
            fail(ErrClass::numeric, "non-finite meta-gradient; per-block norms:" +
                                        block_norms(bundle.gen_layout, g.theta_g) +
                                        block_norms(bundle.down_layout, g.phi_d));
    for (double x : g.phi_d)
        if (!std::isfinite(x))
            fail(ErrClass::numeric, "non-finite meta-gradient; per-block norms:" +
                                        block_norms(bundle.gen_layout, g.theta_g) +
                                        block_norms(bundle.down_layout, g.phi_d));
    return g;
}

}  // namespace

MetaParams init_meta_params(const ModelBundle& bundle, const TrainConfig& tc) {
    MetaParams p;
    p.theta_g = init_params(bundle.gen_layout, tc.seed);
    p.phi_d = init_params(bundle.down_layout, tc.seed + 1);
    p.log_alpha = std::log(tc.alpha_init);
    p.has_alpha = variant_has_inner_loop(tc.variant);
    return p;
}

InnerLossValues inner_loss(const ModelBundle& bundle, std::span<const double> theta_g,
                           std::span<const double> phi_d,
                           std::span<const PatientSample> task_batch) {
    InnerLossValues v;
    inner_gradient<double>(bundle, theta_g, phi_d, task_batch, &v);
    return v;
}

std::vector<double> inner_adapt(const ModelBundle& bundle, std::span<const double> theta_g,
                                std::span<const double> phi_d, double alpha,
                                std::span<const PatientSample> task_batch, int inner_steps) {
    require(inner_steps >= 1, ErrClass::precondition, "inner_steps must be >= 1");
    std::vector<double> theta(theta_g.begin(), theta_g.end());
    for (int j = 0; j < inner_steps; ++j) {
        InnerGrad<double> g = inner_gradient<double>(bundle, theta, phi_d, task_batch, nullptr);
        check_finite(g.theta, bundle.gen_layout, "inner");
        for (size_t i = 0; i < theta.size(); ++i) theta[i] -= alpha * g.theta[i];
    }
    return theta;
}

double outer_loss(const ModelBundle& bundle, std::span<const double> theta_star,
                  std::span<const double> phi_d, std::span<const PatientSample> full_batch,
                  std::span<const PatientSample> miss_batch) {
    Tape<double> tape;
    NetForward<double> net(tape, bundle.model, bundle.gen_layout, bundle.down_layout, theta_star,
                           phi_d);
    OuterIds<double> ob = build_outer_loss(net, bundle, full_batch, miss_batch);
    return tape.val(ob.total)[0];
}

double meta_objective_value(const ModelBundle& bundle, const MetaParams& params,
                            const MetaBatch& batch,
                            const std::vector<std::vector<PatientSample>>& full_batches,
                            const TrainConfig& tc) {
    require(full_batches.size() == static_cast<size_t>(batch.size()), ErrClass::precondition,
            "one full batch per task required");
    double total = 0.0;
    for (int i = 0; i < batch.size(); ++i) {
        const MetaBatch::Task& task = batch.tasks[static_cast<size_t>(i)];
        std::vector<double> theta_star = inner_adapt(bundle, params.theta_g, params.phi_d,
                                                     params.alpha(), task.samples, tc.inner_steps);
        total += outer_loss(bundle, theta_star, params.phi_d,
                            full_batches[static_cast<size_t>(i)], task.samples);
    }
    return total;
}

MetaGradients meta_gradient(const ModelBundle& bundle, const MetaParams& params,
                            const MetaBatch& batch,
                            const std::vector<std::vector<PatientSample>>& full_batches,
                            const TrainConfig& tc, std::vector<TaskLog>* logs) {
    return meta_gradient_impl<double>(bundle, params, batch, full_batches, tc, logs);
}

void apply_update(const ModelBundle& bundle, MetaParams& params, const MetaGradients& grads,
                  OptimizerState& opt, const TrainConfig& tc) {
    (void)bundle;
    const size_t nt = params.theta_g.size(), np = params.phi_d.size();
    const size_t n = nt + np + 1;
    require(grads.theta_g.size() == nt && grads.phi_d.size() == np, ErrClass::precondition,
            "gradient size mismatch");
    if (opt.m.empty()) {
        opt.m.assign(n, 0.0);
        opt.v.assign(n, 0.0);
    }
    const double inv_b = 1.0 / static_cast<double>(std::max(1, grads.batch_tasks));

    auto component = [&](size_t i) -> double* {
        if (i < nt) return &params.theta_g[i];
        if (i < nt + np) return &params.phi_d[i - nt];
        return &params.log_alpha;
    };
    auto grad_at = [&](size_t i) -> double {
        if (i < nt) return grads.theta_g[i] * inv_b;
        if (i < nt + np) return grads.phi_d[i - nt] * inv_b;
        return grads.dlog_alpha * inv_b;
    };

    if (tc.optimizer == "sgd") {
        for (size_t i = 0; i < n; ++i) {
            if (i == n - 1 && !params.has_alpha) continue;
            *component(i) -= tc.outer_lr * grad_at(i);
        }
        return;
    }

    // AdamW with decoupled weight decay on the network weights only.
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    opt.t += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
    for (size_t i = 0; i < n; ++i) {
        if (i == n - 1 && !params.has_alpha) continue;
        const double g = grad_at(i);
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
        const double mhat = opt.m[i] / bc1;
        const double vhat = opt.v[i] / bc2;
        double delta = mhat / (std::sqrt(vhat) + eps);
        if (i < nt + np) delta += tc.weight_decay * *component(i);
        *component(i) -= tc.outer_lr * delta;
    }
}

void meta_update(const ModelBundle& bundle, MetaParams& params, const MetaBatch& batch,
                 const std::vector<std::vector<PatientSample>>& full_batches,
                 OptimizerState& opt, const TrainConfig& tc, std::vector<TaskLog>* logs) {
    MetaGradients g = meta_gradient(bundle, params, batch, full_batches, tc, logs);
    apply_update(bundle, params, g, opt, tc);
}

Checkpoint make_checkpoint(const ModelBundle& bundle, const MetaParams& params, int64_t step) {
    Checkpoint c;
    c.config_summary = bundle.model.summary();
    c.config_hash = bundle.model.hash();
    if (params.has_alpha) c.alpha = params.alpha();
    c.step = step;
    auto add_blocks = [&](const ParamLayout& lay, const std::vector<double>& flat,
                          const std::string& prefix) {
        for (const ParamBlock& b : lay.blocks) {
            Tensor<double> t(b.shape);
            std::copy(flat.begin() + b.offset, flat.begin() + b.offset + b.size, t.data.begin());
            c.arrays.emplace_back(prefix + b.name, std::move(t));
        }
    };
    add_blocks(bundle.gen_layout, params.theta_g, "theta_g/");
    add_blocks(bundle.down_layout, params.phi_d, "phi_d/");
    return c;
}

MetaParams params_from_checkpoint(const ModelBundle& bundle, const Checkpoint& ckpt) {
    require(ckpt.config_hash == bundle.model.hash(), ErrClass::config,
            "checkpoint/config mismatch (checkpoint built for '" + ckpt.config_summary +
                "', expected '" + bundle.model.summary() + "')");
    MetaParams p;
    p.theta_g.assign(static_cast<size_t>(bundle.gen_layout.total), 0.0);
    p.phi_d.assign(static_cast<size_t>(bundle.down_layout.total), 0.0);
    auto read_blocks = [&](const ParamLayout& lay, std::vector<double>& flat,
                           const std::string& prefix) {
        for (const ParamBlock& b : lay.blocks) {
            const Tensor<double>* t = ckpt.find(prefix + b.name);
            require(t != nullptr, ErrClass::format, "checkpoint missing array " + prefix + b.name);
            require(t->shape == b.shape, ErrClass::format,
                    "checkpoint array shape mismatch for " + prefix + b.name);
            std::copy(t->data.begin(), t->data.end(), flat.begin() + b.offset);
        }
    };
    read_blocks(bundle.gen_layout, p.theta_g, "theta_g/");
    read_blocks(bundle.down_layout, p.phi_d, "phi_d/");
    p.has_alpha = ckpt.alpha.has_value();
    if (ckpt.alpha) {
        require(*ckpt.alpha > 0.0, ErrClass::format, "checkpoint alpha must be positive");
        p.log_alpha = std::log(*ckpt.alpha);
    }
    return p;
}

namespace {

void csv_cell(std::string& row, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    row += buf;
}

template <typename S>
TrainResult run_training(const ModelConfig& model, const TrainConfig& tc,
                         const DatasetSplit& split, const std::filesystem::path& out_dir) {
    tc.validate();
    model.validate();
    require(!split.d_full.empty(), ErrClass::precondition, "d_full is empty");
    require(!split.d_miss.empty(), ErrClass::precondition, "d_miss is empty");
    std::filesystem::create_directories(out_dir);

    TrainResult res;
    res.bundle = ModelBundle::make(model, tc.variant, tc.weights);
    const ModelBundle& mb = res.bundle;
    const bool bilevel = variant_has_inner_loop(tc.variant);

    int64_t start_step = 0;
    if (!tc.resume.empty()) {
        Checkpoint ckpt = load_checkpoint(tc.resume);
        res.params = params_from_checkpoint(mb, ckpt);
        start_step = ckpt.step;
    } else {
        res.params = init_meta_params(mb, tc);
    }

    const int64_t n_train =
        static_cast<int64_t>(split.d_miss.size() + split.d_full.size());
    const int64_t steps_per_epoch =
        (n_train + tc.meta_batch_tasks - 1) / tc.meta_batch_tasks;
    const int64_t total_steps = start_step + steps_per_epoch * tc.epochs;

    res.metrics_path = out_dir / "metrics.csv";
    const bool append = start_step > 0 && std::filesystem::exists(res.metrics_path);
    std::ofstream metrics(res.metrics_path, append ? std::ios::app : std::ios::trunc);
    require(metrics.good(), ErrClass::io, "cannot write " + res.metrics_path.string());
    if (!append) metrics << "step,task_mask,L_E,L_seg,L_adv,L_dis,L_full,alpha\n";

    std::ofstream dsc_log(out_dir / "train_dsc.csv", append ? std::ios::app : std::ios::trunc);
    if (!append) dsc_log << "step,dsc_wt,dsc_tc,dsc_et\n";

    // Pooled samples for the plain-variant mixed batches.
    std::vector<const PatientSample*> pool;
    for (const PatientSample& s : split.d_miss) pool.push_back(&s);
    for (const PatientSample& s : split.d_full) pool.push_back(&s);

    OptimizerState opt;
    for (int64_t step = start_step + 1; step <= total_steps; ++step) {
        std::vector<TaskLog> logs;
        MetaGradients grads;
        std::mt19937_64 aug_eng = substream(tc.seed, "metaengine.aug", static_cast<uint64_t>(step));
        if (bilevel) {
            std::mt19937_64 task_eng =
                substream(tc.seed, "metaengine.step", static_cast<uint64_t>(step));
            MetaBatch batch =
                sample_meta_batch(split, tc.meta_batch_tasks, tc.per_task_batch, task_eng());
            std::mt19937_64 full_eng =
                substream(tc.seed, "metaengine.full", static_cast<uint64_t>(step));
            std::uniform_int_distribution<size_t> pick(0, split.d_full.size() - 1);
            std::vector<std::vector<PatientSample>> full_batches;
            for (int i = 0; i < batch.size(); ++i) {
                std::vector<PatientSample> fb;
                for (int q = 0; q < tc.per_task_batch; ++q)
                    fb.push_back(split.d_full[pick(full_eng)]);
                full_batches.push_back(std::move(fb));
            }
            if (tc.augment) {
                for (auto& task : batch.tasks)
                    for (auto& s : task.samples) s = flip_augment(s, aug_eng);
                for (auto& fb : full_batches)
                    for (auto& s : fb) s = flip_augment(s, aug_eng);
            }
            grads = meta_gradient_impl<S>(mb, res.params, batch, full_batches, tc, &logs);
        } else {
            std::mt19937_64 mix_eng =
                substream(tc.seed, "metaengine.mixed", static_cast<uint64_t>(step));
            std::vector<const PatientSample*> drawn;
            std::sample(pool.begin(), pool.end(), std::back_inserter(drawn),
                        static_cast<size_t>(tc.meta_batch_tasks), mix_eng);
            std::vector<PatientSample> batch;
            for (const PatientSample* s : drawn)
                batch.push_back(tc.augment ? flip_augment(*s, aug_eng) : *s);
            TaskGradOut t = plain_gradient<S>(mb, res.params, batch);
            grads.theta_g = std::move(t.theta);
            grads.phi_d = std::move(t.phi);
            grads.batch_tasks = 1;
            logs.push_back(t.log);
        }
        apply_update(mb, res.params, grads, opt, tc);

        for (const TaskLog& l : logs) {
            std::string row = std::to_string(step);
            row += ',';
            row += bilevel ? l.mask.to_string() : "mixed";
            for (double v : {l.loss_e, l.seg, l.adv, l.dis, l.full}) {
                row += ',';
                csv_cell(row, v);
            }
            row += ',';
            if (res.params.has_alpha) csv_cell(row, res.params.alpha());
            metrics << row << '\n';
        }

        if (step % tc.log_every == 0 || step == total_steps) {
            const PatientSample& probe = split.d_full.front();
            Tensor<double> pred = segment(probe, res.params.theta_g, res.params.phi_d, mb.model,
                                          mb.gen_layout, mb.down_layout);
            const int64_t n = probe.voxels();
            std::string row = std::to_string(step);
            for (int r = 0; r < kNumRegions; ++r) {
                std::vector<uint8_t> bin(static_cast<size_t>(n));
                for (int64_t i = 0; i < n; ++i) bin[static_cast<size_t>(i)] = pred[r * n + i] > 0.5 ? 1 : 0;
                row += ',';
                csv_cell(row, dsc(bin, probe.labels[static_cast<size_t>(r)]));
            }
            dsc_log << row << '\n';
        }

        if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof name, "ckpt_step%06lld.hmc",
                          static_cast<long long>(step));
            save_checkpoint(out_dir / name, make_checkpoint(mb, res.params, step));
        }
        res.steps = step;
    }

    res.checkpoint_path = out_dir / "ckpt_final.hmc";
    save_checkpoint(res.checkpoint_path, make_checkpoint(mb, res.params, res.steps));
    require(metrics.good() && dsc_log.good(), ErrClass::io, "metrics log write failure");
    return res;
}

}  // namespace

TrainResult train(const ModelConfig& model, const TrainConfig& tc, const DatasetSplit& split,
                  const std::filesystem::path& out_dir) {
    if (tc.precision == "f32") return run_training<float>(model, tc, split, out_dir);
    return run_training<double>(model, tc, split, out_dir);
}

TrainResult ablate_variant(const ModelConfig& model, const TrainConfig& tc, Variant variant,
                           const DatasetSplit& split, const std::filesystem::path& out_dir) {
    TrainConfig cfg = tc;
    cfg.variant = variant;
    return train(model, cfg, split, out_dir);
}

namespace {

// Hand-built micro-sample for the gradient checks: random volumes, nested
// box labels.
PatientSample micro_sample(uint64_t seed, const ModalityMask& mask, int modalities) {
    PatientSample s;
    s.id = "micro" + std::to_string(seed);
    s.dims = {4, 4, 4};
    const int64_t n = s.voxels();
    std::mt19937_64 eng = substream(seed, "gradcheck.sample");
    std::normal_distribution<double> normal(0.0, 1.0);
    s.availability = ModalityMask::full(modalities);
    s.volumes.resize(static_cast<size_t>(modalities));
    for (int j = 0; j < modalities; ++j) {
        std::vector<float> v(static_cast<size_t>(n));
        for (auto& x : v) x = static_cast<float>(normal(eng));
        s.volumes[static_cast<size_t>(j)] = std::move(v);
    }
    for (int r = 0; r < kNumRegions; ++r) s.labels[static_cast<size_t>(r)].assign(static_cast<size_t>(n), 0);
    int64_t u = 0;
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x, ++u) {
                const bool wt = z >= 1 && z <= 2 && y >= 1 && y <= 2 && x >= 1 && x <= 2;
                const bool tc_in = wt && x <= 1;
                const bool et = tc_in && y <= 1;
                s.labels[kWT][static_cast<size_t>(u)] = wt ? 1 : 0;
                s.labels[kTC][static_cast<size_t>(u)] = tc_in ? 1 : 0;
                s.labels[kET][static_cast<size_t>(u)] = et ? 1 : 0;
            }
    if (!mask.all()) return apply_modality_drop(s, mask);
    return s;
}

}  // namespace

GradCheckReport run_gradcheck(uint64_t seed, bool first_order, double tol) {
    GradCheckReport rep;
    rep.tol = tol;
    if (first_order) {
        rep.skipped = true;
        rep.detail = "first-order approximation mode drops curvature terms";
        return rep;
    }

    ModelConfig tiny;
    tiny.modalities = 2;
    tiny.levels = 1;
    tiny.channels = {1};
    tiny.bottleneck_channels = 1;
    tiny.kernel = 1;
    tiny.convs_per_level = 1;
    tiny.disc_hidden_mult = 2;
    tiny.act = Activation::Silu;
    tiny.norm = false;  // k=1, C=1 instance norm would zero the encoder gradients

    TrainConfig tc;
    tc.variant = Variant::Full;
    tc.seed = seed;
    tc.inner_steps = 1;
    tc.meta_batch_tasks = 2;
    tc.alpha_init = 0.05;

    ModelBundle mb = ModelBundle::make(tiny, tc.variant, tc.weights);
    const int64_t model_params = mb.gen_layout.total + mb.down_layout.total;
    require(model_params <= 50, ErrClass::precondition,
            "gradcheck model must stay at or below 50 parameters, has " +
                std::to_string(model_params));

    MetaParams p = init_meta_params(mb, tc);
    // Nudge every parameter (biases included) off zero so the check runs at
    // a generic point.
    std::mt19937_64 eng = substream(seed, "gradcheck.jitter");
    std::normal_distribution<double> normal(0.0, 0.3);
    for (double& x : p.theta_g) x += normal(eng);
    for (double& x : p.phi_d) x += normal(eng);

    MetaBatch batch;
    std::vector<std::vector<PatientSample>> full_batches;
    const ModalityMask m10 = ModalityMask::from_string("10");
    const ModalityMask m01 = ModalityMask::from_string("01");
    int t = 0;
    for (const ModalityMask& mask : {m10, m01}) {
        MetaBatch::Task task;
        task.mask = mask;
        task.samples.push_back(micro_sample(seed + static_cast<uint64_t>(t) * 17 + 1, mask, 2));
        batch.tasks.push_back(std::move(task));
        full_batches.push_back(
            {micro_sample(seed + static_cast<uint64_t>(t) * 17 + 9, ModalityMask::full(2), 2)});
        ++t;
    }

    MetaGradients analytic = meta_gradient(mb, p, batch, full_batches, tc);

    auto objective = [&](const MetaParams& q) {
        return meta_objective_value(mb, q, batch, full_batches, tc);
    };
    const double h = 1e-5;
    double max_rel = 0.0;
    std::string worst = "-";
    auto check = [&](double analytic_g, double* slot, const std::string& name) {
        const double orig = *slot;
        *slot = orig + h;
        const double fp = objective(p);
        *slot = orig - h;
        const double fm = objective(p);
        *slot = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::fabs(analytic_g - fd) /
                           std::max({std::fabs(analytic_g), std::fabs(fd), 1e-6});
        if (rel > max_rel) {
            max_rel = rel;
            worst = name;
        }
        ++rep.params_checked;
    };
    for (size_t i = 0; i < p.theta_g.size(); ++i)
        check(analytic.theta_g[i], &p.theta_g[i],
              "theta_g/" + block_of_index(mb.gen_layout, static_cast<int64_t>(i)));
    for (size_t i = 0; i < p.phi_d.size(); ++i)
        check(analytic.phi_d[i], &p.phi_d[i],
              "phi_d/" + block_of_index(mb.down_layout, static_cast<int64_t>(i)));
    check(analytic.dlog_alpha, &p.log_alpha, "alpha");

    rep.max_rel_err = max_rel;
    rep.passed = max_rel < tol;
    rep.detail = "worst component in " + worst;
    return rep;
}

}  // namespace hmseg
