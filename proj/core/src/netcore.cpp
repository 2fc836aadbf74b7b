#include "hmseg/netcore.hpp"

#include <atomic>
#include <random>
#include <sstream>

#include "hmseg/rng.hpp"

namespace hmseg {

void ModelConfig::validate() const {
    require(modalities >= 2, ErrClass::config, "modalities must be >= 2");
    require(levels >= 1, ErrClass::config, "levels must be >= 1");
    require(static_cast<int>(channels.size()) == levels, ErrClass::config,
            "channels list must have one entry per level");
    for (int c : channels) require(c >= 1, ErrClass::config, "channel counts must be positive");
    require(bottleneck_channels >= 1, ErrClass::config, "bottleneck_channels must be positive");
    require(kernel >= 1 && kernel % 2 == 1 && kernel <= 5, ErrClass::config,
            "kernel must be odd and <= 5");
    require(convs_per_level == 1 || convs_per_level == 2, ErrClass::config,
            "convs_per_level must be 1 or 2");
    require(disc_hidden_mult >= 1, ErrClass::config, "disc_hidden_mult must be >= 1");
}

std::string ModelConfig::summary() const {
    std::ostringstream os;
    os << "m=" << modalities << ";l=" << levels << ";ch=";
    for (size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << ";cb=" << bottleneck_channels << ";k=" << kernel << ";cpl=" << convs_per_level
       << ";dh=" << disc_hidden_mult << ";act=" << activation_name(act)
       << ";in=" << (norm ? 1 : 0);
    return os.str();
}

uint64_t ModelConfig::hash() const { return fnv1a(summary()); }

void ParamLayout::add(const std::string& name, std::vector<int> shape) {
    ParamBlock b;
    b.name = name;
    b.size = Tensor<double>::count(shape);
    b.shape = std::move(shape);
    b.offset = total;
    total += b.size;
    blocks.push_back(std::move(b));
}

int ParamLayout::index_of(const std::string& name) const {
    for (size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i].name == name) return static_cast<int>(i);
    return -1;
}

const ParamBlock& ParamLayout::at(const std::string& name) const {
    int i = index_of(name);
    require(i >= 0, ErrClass::precondition, "unknown parameter block " + name);
    return blocks[static_cast<size_t>(i)];
}

ParamLayout generator_layout(const ModelConfig& cfg) {
    cfg.validate();
    ParamLayout lay;
    const int k = cfg.kernel;
    for (int l = 0; l < cfg.levels; ++l) {
        const int cl = cfg.channels[static_cast<size_t>(l)];
        for (int c = 0; c < cfg.convs_per_level; ++c) {
            const int cin = c > 0 ? cl : (l == 0 ? 1 : cfg.channels[static_cast<size_t>(l - 1)]);
            const std::string base = "enc.l" + std::to_string(l) + ".c" + std::to_string(c);
            lay.add(base + ".w", {cl, cin, k, k, k});
            lay.add(base + ".b", {cl});
        }
    }
    lay.add("enc.bott.w",
            {cfg.bottleneck_channels, cfg.channels[static_cast<size_t>(cfg.levels - 1)], k, k, k});
    lay.add("enc.bott.b", {cfg.bottleneck_channels});

    auto add_fusion = [&](const std::string& base, int c) {
        const int n = cfg.modalities * c;  // zero-imputed concat width, hidden width
        lay.add(base + ".w1", {n, n});
        lay.add(base + ".b1", {n});
        lay.add(base + ".w2", {cfg.modalities, n});
        lay.add(base + ".b2", {cfg.modalities});
    };
    for (int l = 0; l < cfg.levels; ++l)
        add_fusion("fuse.l" + std::to_string(l), cfg.channels[static_cast<size_t>(l)]);
    add_fusion("fuse.bott", cfg.bottleneck_channels);
    return lay;
}

ParamLayout downstream_layout(const ModelConfig& cfg, bool include_discriminator) {
    cfg.validate();
    ParamLayout lay;
    const int k = cfg.kernel;
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const int cl = cfg.channels[static_cast<size_t>(l)];
        const int cin = (l == cfg.levels - 1 ? cfg.bottleneck_channels
                                             : cfg.channels[static_cast<size_t>(l + 1)]) +
                        cl;
        lay.add("dec.m" + std::to_string(l) + ".w", {cl, cin, k, k, k});
        lay.add("dec.m" + std::to_string(l) + ".b", {cl});
    }
    lay.add("dec.out.w", {kNumRegions, cfg.channels[0], 1, 1, 1});
    lay.add("dec.out.b", {kNumRegions});

    if (include_discriminator) {
        const int hidden = cfg.disc_hidden_mult * cfg.bottleneck_channels;
        lay.add("dis.fc0.w", {hidden, cfg.bottleneck_channels});
        lay.add("dis.fc0.b", {hidden});
        lay.add("dis.fc1.w", {cfg.modalities, hidden});
        lay.add("dis.fc1.b", {cfg.modalities});
    }
    return lay;
}

std::vector<double> init_params(const ParamLayout& layout, uint64_t seed) {
    std::vector<double> out(static_cast<size_t>(layout.total), 0.0);
    std::mt19937_64 eng = substream(seed, "netcore.init");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const ParamBlock& b : layout.blocks) {
        const bool is_bias = b.shape.size() == 1;
        if (is_bias) {
            // Segmentation head starts below the 0.5 threshold; foreground is
            // a small fraction of the volume and the soft-Dice gradient is
            // near-flat when the initial prediction covers everything.
            if (b.name == "dec.out.b")
                for (int64_t i = 0; i < b.size; ++i)
                    out[static_cast<size_t>(b.offset + i)] = -2.0;
            continue;
        }
        int64_t fan_in = 1;
        for (size_t i = 1; i < b.shape.size(); ++i) fan_in *= b.shape[i];
        const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < b.size; ++i)
            out[static_cast<size_t>(b.offset + i)] = std_dev * normal(eng);
    }
    return out;
}

namespace {
std::atomic<uint64_t> g_disc_evals{0};
}

uint64_t disc_eval_count() { return g_disc_evals.load(); }
void reset_disc_eval_count() { g_disc_evals.store(0); }
void bump_disc_eval_count() { g_disc_evals.fetch_add(1); }

std::vector<Tensor<double>> encode_modality(const Tensor<double>& volume,
                                            std::span<const double> theta_g,
                                            const ModelConfig& cfg) {
    ParamLayout gl = generator_layout(cfg);
    ParamLayout dl;  // unused
    Tape<double> tape;
    NetForward<double> net(tape, cfg, gl, dl, theta_g, {});
    PyramidIds<double> p = net.encode(tape.leaf(volume));
    std::vector<Tensor<double>> out;
    for (auto id : p.levels) out.push_back(tape.val(id));
    out.push_back(tape.val(p.bottleneck));
    return out;
}

FusionResult fuse_level(const std::vector<std::optional<Tensor<double>>>& per_slot, int level,
                        std::span<const double> theta_g, const ModelConfig& cfg) {
    ParamLayout gl = generator_layout(cfg);
    ParamLayout dl;
    Tape<double> tape;
    NetForward<double> net(tape, cfg, gl, dl, theta_g, {});
    std::vector<std::optional<Tape<double>::Id>> ids(per_slot.size());
    for (size_t j = 0; j < per_slot.size(); ++j)
        if (per_slot[j]) ids[j] = tape.leaf(*per_slot[j]);
    FusionIds<double> f = net.fuse(ids, level);
    return {tape.val(f.fused), tape.val(f.gamma_concat), tape.val(f.weights)};
}

Tensor<double> segment(const PatientSample& sample, std::span<const double> theta_g,
                       std::span<const double> phi_d, const ModelConfig& cfg,
                       const ParamLayout& gen_layout, const ParamLayout& down_layout) {
    Tape<double> tape;
    NetForward<double> net(tape, cfg, gen_layout, down_layout, theta_g, phi_d);
    GeneratorOut<double> g = net.forward_generator(sample);
    return tape.val(net.decode(g));
}

Tensor<double> discriminate_features(const Tensor<double>& fused_bottleneck,
                                     std::span<const double> phi_d, const ModelConfig& cfg,
                                     const ParamLayout& down_layout) {
    ParamLayout gl;  // unused
    Tape<double> tape;
    NetForward<double> net(tape, cfg, gl, down_layout, {}, phi_d);
    return tape.val(net.discriminate(tape.leaf(fused_bottleneck)));
}

}  // namespace hmseg
