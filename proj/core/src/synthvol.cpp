#include "hmseg/synthvol.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "hmseg/rng.hpp"
#include "hmseg/tasks.hpp"

namespace hmseg {

void PatientSample::validate() const {
    require(availability.m == modalities(), ErrClass::precondition,
            "availability width does not match volume slot count");
    require(!availability.none(), ErrClass::precondition, "availability must have at least 1 bit");
    const int64_t n = voxels();
    require(n > 0, ErrClass::precondition, "sample has empty dims");
    for (int j = 0; j < modalities(); ++j) {
        require(volumes[static_cast<size_t>(j)].has_value() == availability.test(j),
                ErrClass::precondition,
                "volume slot " + std::to_string(j) + " inconsistent with availability");
        if (volumes[static_cast<size_t>(j)])
            require(static_cast<int64_t>(volumes[static_cast<size_t>(j)]->size()) == n,
                    ErrClass::precondition, "volume size mismatch in slot " + std::to_string(j));
    }
    for (int r = 0; r < kNumRegions; ++r)
        require(static_cast<int64_t>(labels[static_cast<size_t>(r)].size()) == n,
                ErrClass::precondition, "label size mismatch");
    for (int64_t u = 0; u < n; ++u) {
        bool wt = labels[kWT][static_cast<size_t>(u)] != 0;
        bool tc = labels[kTC][static_cast<size_t>(u)] != 0;
        bool et = labels[kET][static_cast<size_t>(u)] != 0;
        require((!et || tc) && (!tc || wt), ErrClass::precondition,
                "region nesting violated at voxel " + std::to_string(u));
    }
}

namespace {

struct Ellipsoid {
    double c[3];
    double a[3];

    bool contains(double z, double y, double x) const {
        double dz = (z - c[0]) / a[0];
        double dy = (y - c[1]) / a[1];
        double dx = (x - c[2]) / a[2];
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
};

// Additive intensity recipe per canonical modality
// (FLAIR-like, T1-like, T1c-like, T2-like). Columns: background, then the
// contribution added for membership in WT, TC, ET.
struct ContrastRecipe {
    double bg, wt, tc, et;
};
constexpr ContrastRecipe kRecipes[4] = {
    {0.20, 1.00, 0.10, 0.00},   // FLAIR-like: dominant WT (edema) signal, blind to ET
    {0.50, -0.20, -0.10, 0.10},  // T1-like: weak contrast everywhere
    {0.30, 0.05, 0.20, 1.20},   // T1c-like: dominant ET (enhancement) signal, weak WT rim
    {0.40, 0.70, 0.30, 0.10},   // T2-like: solid WT/TC signal
};

constexpr double kNoiseSigma = 0.06;

double uniform(std::mt19937_64& eng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng);
}

}  // namespace

PatientSample generate_patient(uint64_t seed, std::array<int, 3> dims, int num_modalities) {
    for (int k = 0; k < 3; ++k)
        require(dims[static_cast<size_t>(k)] >= 8, ErrClass::precondition,
                "dims[" + std::to_string(k) + "]=" + std::to_string(dims[static_cast<size_t>(k)]) +
                    " too small to contain the innermost region (need >= 8)");
    require(num_modalities >= 2, ErrClass::precondition, "num_modalities must be >= 2");

    std::mt19937_64 eng = substream(seed, "synthvol.patient");

    const double d0 = dims[0], d1 = dims[1], d2 = dims[2];

    Ellipsoid brain;
    for (int k = 0; k < 3; ++k) {
        brain.c[k] = 0.5 * dims[static_cast<size_t>(k)];
        brain.a[k] = 0.46 * dims[static_cast<size_t>(k)];
    }

    Ellipsoid wt;
    wt.c[0] = d0 * (0.5 + uniform(eng, -0.06, 0.06));
    wt.c[1] = d1 * (0.5 + uniform(eng, -0.06, 0.06));
    wt.c[2] = d2 * (0.5 + uniform(eng, -0.06, 0.06));
    wt.a[0] = std::max(3.0, d0 * uniform(eng, 0.24, 0.34));
    wt.a[1] = std::max(3.0, d1 * uniform(eng, 0.24, 0.34));
    wt.a[2] = std::max(3.0, d2 * uniform(eng, 0.24, 0.34));

    Ellipsoid tc;
    for (int k = 0; k < 3; ++k) tc.a[k] = std::max(2.0, wt.a[k] * uniform(eng, 0.55, 0.70));
    for (int k = 0; k < 3; ++k)
        tc.c[k] = wt.c[k] + uniform(eng, -1.0, 1.0) * 0.25 * std::max(0.0, wt.a[k] - tc.a[k]);

    Ellipsoid et;
    for (int k = 0; k < 3; ++k) et.a[k] = std::max(1.25, tc.a[k] * uniform(eng, 0.50, 0.70));
    for (int k = 0; k < 3; ++k)
        et.c[k] = tc.c[k] + uniform(eng, -1.0, 1.0) * 0.25 * std::max(0.0, tc.a[k] - et.a[k]);

    PatientSample s;
    s.id = "p" + std::to_string(seed);
    s.dims = dims;
    const int64_t n = s.voxels();
    for (int r = 0; r < kNumRegions; ++r) s.labels[static_cast<size_t>(r)].assign(static_cast<size_t>(n), 0);

    std::vector<uint8_t> in_brain(static_cast<size_t>(n), 0);
    int64_t u = 0;
    for (int z = 0; z < dims[0]; ++z)
        for (int y = 0; y < dims[1]; ++y)
            for (int x = 0; x < dims[2]; ++x, ++u) {
                double cz = z + 0.5, cy = y + 0.5, cx = x + 0.5;
                bool in_et = et.contains(cz, cy, cx);
                bool in_tc = in_et || tc.contains(cz, cy, cx);
                bool in_wt = in_tc || wt.contains(cz, cy, cx);
                s.labels[kET][static_cast<size_t>(u)] = in_et ? 1 : 0;
                s.labels[kTC][static_cast<size_t>(u)] = in_tc ? 1 : 0;
                s.labels[kWT][static_cast<size_t>(u)] = in_wt ? 1 : 0;
                in_brain[static_cast<size_t>(u)] = brain.contains(cz, cy, cx) || in_wt ? 1 : 0;
            }

    s.availability = ModalityMask::full(num_modalities);
    s.volumes.resize(static_cast<size_t>(num_modalities));
    std::normal_distribution<double> noise(0.0, kNoiseSigma);
    for (int j = 0; j < num_modalities; ++j) {
        const ContrastRecipe& rc = kRecipes[j % 4];
        std::vector<float> vol(static_cast<size_t>(n), 0.0f);
        double sum = 0.0, sumsq = 0.0;
        int64_t fg = 0;
        for (int64_t i = 0; i < n; ++i) {
            if (!in_brain[static_cast<size_t>(i)]) continue;
            double v = rc.bg;
            if (s.labels[kWT][static_cast<size_t>(i)]) v += rc.wt;
            if (s.labels[kTC][static_cast<size_t>(i)]) v += rc.tc;
            if (s.labels[kET][static_cast<size_t>(i)]) v += rc.et;
            v += noise(eng);
            vol[static_cast<size_t>(i)] = static_cast<float>(v);
            sum += v;
            sumsq += v * v;
            ++fg;
        }
        // z-normalize over brain voxels
        double mean = sum / static_cast<double>(fg);
        double var = sumsq / static_cast<double>(fg) - mean * mean;
        double inv = 1.0 / std::sqrt(std::max(var, 1e-12));
        for (int64_t i = 0; i < n; ++i)
            if (in_brain[static_cast<size_t>(i)])
                vol[static_cast<size_t>(i)] =
                    static_cast<float>((vol[static_cast<size_t>(i)] - mean) * inv);
        s.volumes[static_cast<size_t>(j)] = std::move(vol);
    }
    return s;
}

PatientSample apply_modality_drop(const PatientSample& sample, const ModalityMask& mask) {
    require(mask.m == sample.modalities(), ErrClass::precondition,
            "mask width does not match sample modality count");
    require(!mask.none(), ErrClass::precondition, "all-zero mask");
    for (int j = 0; j < mask.m; ++j)
        require(!mask.test(j) || sample.availability.test(j), ErrClass::precondition,
                "mask requests modality " + std::to_string(j) + " which the sample lacks");

    PatientSample out = sample;
    out.availability = mask;
    for (int j = 0; j < mask.m; ++j)
        if (!mask.test(j)) out.volumes[static_cast<size_t>(j)].reset();
    return out;
}

DatasetSplit partition_dataset(const std::vector<PatientSample>& samples, double full_fraction,
                               uint64_t seed) {
    require(full_fraction > 0.0 && full_fraction <= 1.0, ErrClass::precondition,
            "full_fraction must be in (0,1]");
    require(!samples.empty(), ErrClass::precondition, "no samples to partition");
    for (const PatientSample& s : samples)
        require(s.availability.all(), ErrClass::precondition,
                "partition_dataset requires full-modality inputs (" + s.id + ")");

    const int m = samples.front().modalities();
    const int64_t n = static_cast<int64_t>(samples.size());
    std::vector<int64_t> order(samples.size());
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::mt19937_64 eng = substream(seed, "synthvol.partition");
    std::shuffle(order.begin(), order.end(), eng);

    const int64_t n_full =
        static_cast<int64_t>(std::ceil(full_fraction * static_cast<double>(n)));

    DatasetSplit split;
    split.full_fraction = full_fraction;
    for (int64_t i = 0; i < n_full; ++i)
        split.d_full.push_back(samples[static_cast<size_t>(order[static_cast<size_t>(i)])]);

    const int64_t rem = n - n_full;
    if (rem == 0) return split;


    // Deal a permutation of all proper-subset masks first so each occurs at
    // least once when the remainder is large enough; extra patients draw
    // uniformly.
    std::vector<ModalityMask> all_masks = enumerate_tasks(m);
    std::shuffle(all_masks.begin(), all_masks.end(), eng);
    std::uniform_int_distribution<uint32_t> pick(1u, (1u << m) - 2u);
    for (int64_t i = 0; i < rem; ++i) {
        ModalityMask mask = i < static_cast<int64_t>(all_masks.size())
                                ? all_masks[static_cast<size_t>(i)]
                                : ModalityMask::from_ordinal(m, pick(eng));
        const PatientSample& src =
            samples[static_cast<size_t>(order[static_cast<size_t>(n_full + i)])];
        split.d_miss.push_back(apply_modality_drop(src, mask));
    }
    return split;
}

PatientSample flip_augment(const PatientSample& sample, std::mt19937_64& eng) {
    std::uniform_int_distribution<int> coin(0, 1);
    bool flip[3];
    for (int k = 0; k < 3; ++k) flip[k] = coin(eng) != 0;
    if (!flip[0] && !flip[1] && !flip[2]) return sample;

    const int d = sample.dims[0], h = sample.dims[1], w = sample.dims[2];
    auto src_index = [&](int z, int y, int x) {
        const int sz = flip[0] ? d - 1 - z : z;
        const int sy = flip[1] ? h - 1 - y : y;
        const int sx = flip[2] ? w - 1 - x : x;
        return (static_cast<int64_t>(sz) * h + sy) * w + sx;
    };

    PatientSample out = sample;
    auto remap = [&](auto& dst, const auto& src) {
        int64_t u = 0;
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x, ++u)
                    dst[static_cast<size_t>(u)] = src[static_cast<size_t>(src_index(z, y, x))];
    };
    for (int j = 0; j < sample.modalities(); ++j)
        if (sample.volumes[static_cast<size_t>(j)])
            remap(*out.volumes[static_cast<size_t>(j)], *sample.volumes[static_cast<size_t>(j)]);
    for (int r = 0; r < kNumRegions; ++r)
        remap(out.labels[static_cast<size_t>(r)], sample.labels[static_cast<size_t>(r)]);
    return out;
}

}  // namespace hmseg
