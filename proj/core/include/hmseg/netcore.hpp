#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmseg/patient.hpp"
#include "hmseg/tape.hpp"

namespace hmseg {

// Lightweight 3D conv encoder-decoder with channel-attention fusion at every
// pyramid level and an availability discriminator on the fused bottleneck.
// Level l runs at input resolution / 2^l; the bottleneck is an extra conv
// block at the deepest level's resolution, so spatial dims must be divisible
// by 2^(levels-1).
struct ModelConfig {
    int modalities = 4;
    int levels = 3;
    std::vector<int> channels = {3, 6, 9};  // per level, finest first
    int bottleneck_channels = 12;
    int kernel = 3;            // conv kernel, odd
    int convs_per_level = 1;   // 1 or 2
    int disc_hidden_mult = 4;  // discriminator hidden width = mult * bottleneck_channels
    Activation act = Activation::Silu;
    // Parameter-free instance normalization after each conv and on the fused
    // maps entering the decoder/discriminator. Keeps activations comparable
    // across modality-subset sizes (the fused sum scales with the count of
    // available modalities).
    bool norm = true;

    void validate() const;
    int stride_divisor() const { return 1 << (levels - 1); }
    std::string summary() const;
    uint64_t hash() const;
};

struct ParamBlock {
    std::string name;
    std::vector<int> shape;
    int64_t offset = 0;
    int64_t size = 0;
};

struct ParamLayout {
    std::vector<ParamBlock> blocks;
    int64_t total = 0;

    void add(const std::string& name, std::vector<int> shape);
    int index_of(const std::string& name) const;  // -1 when absent
    const ParamBlock& at(const std::string& name) const;
};

// theta_g: shared encoder + per-level fusion MLPs.
ParamLayout generator_layout(const ModelConfig& cfg);
// phi_d: decoder + discriminator. include_discriminator=false builds the
// ablation layouts that never construct a discriminator.
ParamLayout downstream_layout(const ModelConfig& cfg, bool include_discriminator = true);

// He-style seeded init: conv/dense weights ~ N(0, 2/fan_in), biases zero.
std::vector<double> init_params(const ParamLayout& layout, uint64_t seed);

// Count of discriminate() evaluations since the last reset. The inference
// path must leave this untouched.
uint64_t disc_eval_count();
void reset_disc_eval_count();
void bump_disc_eval_count();

// Per-patient pyramid of tape nodes: levels[0..L-1] plus the bottleneck.
template <typename S>
struct PyramidIds {
    std::vector<typename Tape<S>::Id> levels;
    typename Tape<S>::Id bottleneck;
};

template <typename S>
struct FusionIds {
    typename Tape<S>::Id fused;         // (C,D,H,W)
    typename Tape<S>::Id gamma_concat;  // (M*C) zero-imputed channel vector
    typename Tape<S>::Id weights;       // (M) sigmoid attention weights
};

template <typename S>
struct GeneratorOut {
    std::vector<FusionIds<S>> levels;  // one per level
    FusionIds<S> bottleneck;
};

// Binds parameter vectors onto a tape and exposes the network ops. All
// forward passes are read-only with respect to the bound parameters.
template <typename S>
class NetForward {
public:
    using Id = typename Tape<S>::Id;

    NetForward(Tape<S>& tape, const ModelConfig& cfg, const ParamLayout& gen_layout,
               const ParamLayout& down_layout, std::span<const S> theta_g,
               std::span<const S> phi_d)
        : tape_(tape), cfg_(cfg), gen_layout_(gen_layout), down_layout_(down_layout) {
        require(static_cast<int64_t>(theta_g.size()) == gen_layout.total, ErrClass::precondition,
                "theta_g size does not match layout");
        require(static_cast<int64_t>(phi_d.size()) == down_layout.total, ErrClass::precondition,
                "phi_d size does not match layout");
        gen_ids_.reserve(gen_layout.blocks.size());
        for (const ParamBlock& b : gen_layout.blocks)
            gen_ids_.push_back(tape_.leaf(slice_tensor(theta_g, b)));
        down_ids_.reserve(down_layout.blocks.size());
        for (const ParamBlock& b : down_layout.blocks)
            down_ids_.push_back(tape_.leaf(slice_tensor(phi_d, b)));
    }

    Tape<S>& tape() { return tape_; }
    const ModelConfig& config() const { return cfg_; }

    Id volume_leaf(const PatientSample& sample, int modality) const {
        require(sample.availability.test(modality), ErrClass::precondition,
                "volume_leaf on missing modality");
        const std::vector<float>& v = *sample.volumes[static_cast<size_t>(modality)];
        Tensor<S> t({1, sample.dims[0], sample.dims[1], sample.dims[2]});
        for (size_t i = 0; i < v.size(); ++i) t[static_cast<int64_t>(i)] = S(double(v[i]));
        return tape_.leaf(std::move(t));
    }

    // Shared-parameter encoder; identical volumes yield identical pyramids
    // regardless of the modality slot they occupy.
    PyramidIds<S> encode(Id volume) {
        const Tensor<S>& xv = tape_.val(volume);
        require(xv.rank() == 4 && xv.dim(0) == 1, ErrClass::precondition,
                "encode expects a (1,D,H,W) volume");
        const int div = cfg_.stride_divisor();
        for (int k = 1; k <= 3; ++k)
            require(xv.dim(k) % div == 0, ErrClass::precondition,
                    "dimension " + std::to_string(xv.dim(k)) +
                        " not divisible by required stride " + std::to_string(div));
        PyramidIds<S> p;
        Id h = volume;
        for (int l = 0; l < cfg_.levels; ++l) {
            if (l > 0) h = tape_.avg_pool2(h);
            for (int c = 0; c < cfg_.convs_per_level; ++c) {
                h = tape_.conv3d(h, gen("enc.l" + std::to_string(l) + ".c" + std::to_string(c) +
                                        ".w"),
                                 gen("enc.l" + std::to_string(l) + ".c" + std::to_string(c) +
                                     ".b"));
                if (cfg_.norm) h = tape_.channel_norm(h);
                h = tape_.activation(h, cfg_.act);
            }
            p.levels.push_back(h);
        }
        Id b = tape_.conv3d(h, gen("enc.bott.w"), gen("enc.bott.b"));
        if (cfg_.norm) b = tape_.channel_norm(b);
        p.bottleneck = tape_.activation(b, cfg_.act);
        return p;
    }

    // Channel-attention fusion at one level. `per_slot` holds the feature id
    // for each engaged modality slot (canonical order), nullopt elsewhere.
    // level == levels selects the bottleneck fusion block.
    FusionIds<S> fuse(const std::vector<std::optional<Id>>& per_slot, int level) {
        require(static_cast<int>(per_slot.size()) == cfg_.modalities, ErrClass::precondition,
                "fuse expects one slot per modality");
        const int c = level == cfg_.levels ? cfg_.bottleneck_channels
                                           : cfg_.channels[static_cast<size_t>(level)];
        const std::string fb =
            level == cfg_.levels ? "fuse.bott" : "fuse.l" + std::to_string(level);

        std::vector<std::optional<Id>> gaps(per_slot.size());
        std::vector<Id> feats;
        std::vector<int> slots;
        for (int j = 0; j < cfg_.modalities; ++j) {
            if (!per_slot[static_cast<size_t>(j)]) continue;
            Id f = *per_slot[static_cast<size_t>(j)];
            require(tape_.val(f).dim(0) == c, ErrClass::precondition,
                    "fuse: feature channel count mismatch at level " + std::to_string(level));
            gaps[static_cast<size_t>(j)] = tape_.gap(f);
            feats.push_back(f);
            slots.push_back(j);
        }
        require(!feats.empty(), ErrClass::precondition, "fuse: empty mask");

        FusionIds<S> out;
        out.gamma_concat = tape_.zero_imputed_concat(gaps, c);
        Id hidden = tape_.affine(out.gamma_concat, gen(fb + ".w1"), gen(fb + ".b1"));
        hidden = tape_.activation(hidden, cfg_.act);
        Id logits = tape_.affine(hidden, gen(fb + ".w2"), gen(fb + ".b2"));
        out.weights = tape_.sigmoid(logits);
        out.fused = tape_.weighted_sum(feats, slots, out.weights);
        return out;
    }

    // Encode every available modality with the shared encoder, fuse per
    // level including the bottleneck.
    GeneratorOut<S> forward_generator(const PatientSample& sample) {
        require(!sample.availability.none(), ErrClass::precondition,
                "forward_generator: empty mask");
        require(sample.modalities() == cfg_.modalities, ErrClass::precondition,
                "sample modality count does not match model config");
        std::vector<std::optional<PyramidIds<S>>> pyramids(
            static_cast<size_t>(cfg_.modalities));
        for (int j = 0; j < cfg_.modalities; ++j)
            if (sample.availability.test(j)) pyramids[static_cast<size_t>(j)] = encode(volume_leaf(sample, j));

        GeneratorOut<S> out;
        for (int l = 0; l <= cfg_.levels; ++l) {
            std::vector<std::optional<Id>> per_slot(static_cast<size_t>(cfg_.modalities));
            for (int j = 0; j < cfg_.modalities; ++j)
                if (pyramids[static_cast<size_t>(j)])
                    per_slot[static_cast<size_t>(j)] =
                        l == cfg_.levels ? pyramids[static_cast<size_t>(j)]->bottleneck
                                         : pyramids[static_cast<size_t>(j)]->levels[static_cast<size_t>(l)];
            FusionIds<S> f = fuse(per_slot, l);
            if (l == cfg_.levels)
                out.bottleneck = f;
            else
                out.levels.push_back(f);
        }
        return out;
    }

    // Decoder over the fused pyramid; returns (3,D,H,W) sigmoid probability
    // maps at input resolution, one per nested region. Fused maps are
    // standardized on entry so the decoder sees the same scale whether one
    // or all modalities were summed.
    Id decode(const GeneratorOut<S>& g) {
        require(static_cast<int>(g.levels.size()) == cfg_.levels, ErrClass::precondition,
                "decode: pyramid level count mismatch with decoder config");
        auto entry = [&](Id fused) { return cfg_.norm ? tape_.channel_norm(fused) : fused; };
        Id d = entry(g.bottleneck.fused);
        for (int l = cfg_.levels - 1; l >= 0; --l) {
            if (l < cfg_.levels - 1) d = tape_.upsample2(d);
            d = tape_.concat_channels(d, entry(g.levels[static_cast<size_t>(l)].fused));
            d = tape_.conv3d(d, down("dec.m" + std::to_string(l) + ".w"),
                             down("dec.m" + std::to_string(l) + ".b"));
            if (cfg_.norm) d = tape_.channel_norm(d);
            d = tape_.activation(d, cfg_.act);
        }
        Id logits = tape_.conv3d(d, down("dec.out.w"), down("dec.out.b"));
        return tape_.sigmoid(logits);
    }

    // Availability head: GAP of the raw fused bottleneck -> 2-layer MLP -> M
    // per-modality presence probabilities. Never part of the inference path.
    Id discriminate(Id fused_bottleneck) {
        require(down_layout_.index_of("dis.fc0.w") >= 0, ErrClass::precondition,
                "this model variant has no discriminator");
        bump_disc_eval_count();
        Id v = tape_.gap(fused_bottleneck);
        Id h = tape_.affine(v, down("dis.fc0.w"), down("dis.fc0.b"));
        h = tape_.activation(h, cfg_.act);
        Id logits = tape_.affine(h, down("dis.fc1.w"), down("dis.fc1.b"));
        return tape_.sigmoid(logits);
    }

    // Flat gradient vectors aligned with the layouts; call after backward().
    std::vector<S> generator_grad() const { return collect(gen_layout_, gen_ids_); }
    std::vector<S> downstream_grad() const { return collect(down_layout_, down_ids_); }

private:
    Id gen(const std::string& name) const {
        int i = gen_layout_.index_of(name);
        require(i >= 0, ErrClass::precondition, "unknown generator block " + name);
        return gen_ids_[static_cast<size_t>(i)];
    }
    Id down(const std::string& name) const {
        int i = down_layout_.index_of(name);
        require(i >= 0, ErrClass::precondition, "unknown downstream block " + name);
        return down_ids_[static_cast<size_t>(i)];
    }

    static Tensor<S> slice_tensor(std::span<const S> flat, const ParamBlock& b) {
        Tensor<S> t(b.shape);
        std::copy(flat.begin() + b.offset, flat.begin() + b.offset + b.size, t.data.begin());
        return t;
    }

    std::vector<S> collect(const ParamLayout& layout, const std::vector<Id>& ids) const {
        std::vector<S> out(static_cast<size_t>(layout.total), S(0));
        for (size_t i = 0; i < layout.blocks.size(); ++i) {
            const Tensor<S>& g = tape_.grad(ids[i]);
            std::copy(g.data.begin(), g.data.end(), out.begin() + layout.blocks[i].offset);
        }
        return out;
    }

    Tape<S>& tape_;
    const ModelConfig& cfg_;
    const ParamLayout& gen_layout_;
    const ParamLayout& down_layout_;
    std::vector<Id> gen_ids_;
    std::vector<Id> down_ids_;
};

// Convenience single-shot wrappers over a private tape (double precision).

// Feature pyramid of one volume: levels[0..L-1] then the bottleneck.
std::vector<Tensor<double>> encode_modality(const Tensor<double>& volume,
                                            std::span<const double> theta_g,
                                            const ModelConfig& cfg);

struct FusionResult {
    Tensor<double> fused;
    Tensor<double> gamma_concat;
    Tensor<double> weights;
};

// Standalone fusion of per-slot features (engaged slots only), `level` in
// [0, levels] where `levels` selects the bottleneck block.
FusionResult fuse_level(const std::vector<std::optional<Tensor<double>>>& per_slot, int level,
                        std::span<const double> theta_g, const ModelConfig& cfg);

// Inference path: generator + decoder only; the discriminator is never
// evaluated here.
Tensor<double> segment(const PatientSample& sample, std::span<const double> theta_g,
                       std::span<const double> phi_d, const ModelConfig& cfg,
                       const ParamLayout& gen_layout, const ParamLayout& down_layout);

// Standalone discriminator evaluation on a fused bottleneck feature.
Tensor<double> discriminate_features(const Tensor<double>& fused_bottleneck,
                                     std::span<const double> phi_d, const ModelConfig& cfg,
                                     const ParamLayout& down_layout);

}  // namespace hmseg
