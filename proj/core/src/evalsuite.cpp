#include "hmseg/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "hmseg/rng.hpp"
#include "hmseg/synthvol.hpp"
#include "hmseg/tasks.hpp"

namespace hmseg {

double dsc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
    require(pred.size() == gt.size(), ErrClass::precondition, "dsc shape mismatch");
    int64_t p = 0, g = 0, both = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        p += pred[i] ? 1 : 0;
        g += gt[i] ? 1 : 0;
        both += (pred[i] && gt[i]) ? 1 : 0;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double hd95_sentinel(std::array<int, 3> dims, std::array<double, 3> spacing) {
    double acc = 0.0;
    for (int k = 0; k < 3; ++k) {
        double e = dims[static_cast<size_t>(k)] * spacing[static_cast<size_t>(k)];
        acc += e * e;
    }
    return std::sqrt(acc);
}

namespace {

struct Voxel {
    int z, y, x;
};

std::vector<Voxel> boundary_voxels(const std::vector<uint8_t>& mask, std::array<int, 3> dims) {
    const int d = dims[0], h = dims[1], w = dims[2];
    auto at = [&](int z, int y, int x) -> bool {
        if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) return false;
        return mask[static_cast<size_t>((static_cast<int64_t>(z) * h + y) * w + x)] != 0;
    };
    std::vector<Voxel> out;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!at(z, y, x)) continue;
                if (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
                    !at(z, y, x - 1) || !at(z, y, x + 1))
                    out.push_back({z, y, x});
            }
    return out;
}

void directed_distances(const std::vector<Voxel>& from, const std::vector<Voxel>& to,
                        std::array<double, 3> sp, std::vector<double>& out) {
    for (const Voxel& a : from) {
        double best = std::numeric_limits<double>::max();
        for (const Voxel& b : to) {
            const double dz = (a.z - b.z) * sp[0];
            const double dy = (a.y - b.y) * sp[1];
            const double dx = (a.x - b.x) * sp[2];
            const double d2 = dz * dz + dy * dy + dx * dx;
            if (d2 < best) best = d2;
        }
        out.push_back(std::sqrt(best));
    }
}

}  // namespace

double hd95(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
            std::array<int, 3> dims, std::array<double, 3> spacing) {
    require(pred.size() == gt.size(), ErrClass::precondition, "hd95 shape mismatch");
    require(static_cast<int64_t>(pred.size()) ==
                static_cast<int64_t>(dims[0]) * dims[1] * dims[2],
            ErrClass::precondition, "hd95 dims mismatch");
    std::vector<Voxel> bp = boundary_voxels(pred, dims);
    std::vector<Voxel> bg = boundary_voxels(gt, dims);
    if (bp.empty() || bg.empty()) return hd95_sentinel(dims, spacing);

    std::vector<double> dists;
    dists.reserve(bp.size() + bg.size());
    directed_distances(bp, bg, spacing, dists);
    directed_distances(bg, bp, spacing, dists);
    std::sort(dists.begin(), dists.end());
    // nearest-rank 95th percentile
    const size_t idx = static_cast<size_t>(
        std::ceil(0.95 * static_cast<double>(dists.size())) - 1.0);
    return dists[std::min(idx, dists.size() - 1)];
}

uint64_t test_set_hash(const std::vector<PatientSample>& test_set) {
    uint64_t h = 1469598103934665603ull;
    for (const PatientSample& s : test_set) {
        h = fnv1a(s.id, h);
        h = fnv1a_bytes(s.dims.data(), sizeof s.dims, h);
        h = fnv1a(s.availability.to_string(), h);
        for (int r = 0; r < kNumRegions; ++r)
            h = fnv1a_bytes(s.labels[static_cast<size_t>(r)].data(),
                            s.labels[static_cast<size_t>(r)].size(), h);
    }
    return h;
}

CombinationReport evaluate_combinations(const ModelConfig& cfg, const ParamLayout& gen_layout,
                                        const ParamLayout& down_layout,
                                        std::span<const double> theta_g,
                                        std::span<const double> phi_d,
                                        const std::vector<PatientSample>& test_set,
                                        const EvalOptions& opts, const std::string& checkpoint_id,
                                        uint64_t seed) {
    require(!test_set.empty(), ErrClass::precondition, "empty test set");
    for (const PatientSample& s : test_set) {
        require(s.availability.all(), ErrClass::precondition,
                "test samples must be full-modality (" + s.id + ")");
        require(s.modalities() == cfg.modalities, ErrClass::precondition,
                "test sample modality count does not match model");
    }

    CombinationReport rep;
    rep.with_hd95 = opts.with_hd95;
    rep.checkpoint_id = checkpoint_id;
    rep.test_set_hash = test_set_hash(test_set);
    rep.seed = seed;
    rep.threshold = opts.threshold;

    // all nonempty subsets in ordinal order: proper subsets then the full set
    std::vector<ModalityMask> masks = enumerate_tasks(cfg.modalities);
    masks.push_back(ModalityMask::full(cfg.modalities));

    for (const ModalityMask& mask : masks) {
        CombinationReport::Row row;
        row.mask = mask;
        row.n_patients = static_cast<int>(test_set.size());
        for (const PatientSample& patient : test_set) {
            PatientSample dropped = mask.all() ? patient : apply_modality_drop(patient, mask);
            Tensor<double> pred =
                segment(dropped, theta_g, phi_d, cfg, gen_layout, down_layout);
            const int64_t n = patient.voxels();
            for (int r = 0; r < kNumRegions; ++r) {
                std::vector<uint8_t> bin(static_cast<size_t>(n));
                for (int64_t i = 0; i < n; ++i)
                    bin[static_cast<size_t>(i)] = pred[r * n + i] > opts.threshold ? 1 : 0;
                const std::vector<uint8_t>& gt = patient.labels[static_cast<size_t>(r)];
                row.dsc[static_cast<size_t>(r)] += dsc(bin, gt);
                if (opts.with_hd95) {
                    const bool empty_side =
                        std::find(bin.begin(), bin.end(), 1) == bin.end() ||
                        std::find(gt.begin(), gt.end(), 1) == gt.end();
                    row.hd95[static_cast<size_t>(r)] +=
                        hd95(bin, gt, patient.dims, opts.spacing);
                    if (empty_side) row.hd95_sentinels[static_cast<size_t>(r)] += 1;
                }
            }
        }
        for (int r = 0; r < kNumRegions; ++r) {
            row.dsc[static_cast<size_t>(r)] /= row.n_patients;
            if (opts.with_hd95) row.hd95[static_cast<size_t>(r)] /= row.n_patients;
        }
        rep.rows.push_back(row);
    }

    for (int r = 0; r < kNumRegions; ++r) {
        double acc_d = 0.0, acc_h = 0.0;
        for (const auto& row : rep.rows) {
            acc_d += row.dsc[static_cast<size_t>(r)];
            acc_h += row.hd95[static_cast<size_t>(r)];
        }
        rep.avg_dsc[static_cast<size_t>(r)] = acc_d / static_cast<double>(rep.rows.size());
        rep.avg_hd95[static_cast<size_t>(r)] = acc_h / static_cast<double>(rep.rows.size());
        rep.mean_dsc += rep.avg_dsc[static_cast<size_t>(r)];
    }
    rep.mean_dsc /= kNumRegions;
    return rep;
}

namespace {
std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}
}  // namespace

void write_report_csv(const std::filesystem::path& path, const CombinationReport& report,
                      const std::vector<int>& regions) {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), ErrClass::io, "cannot write " + path.string());
    f << "mask_bits,region,dsc,hd95,n_patients\n";
    std::vector<int> sel = regions.empty() ? std::vector<int>{kWT, kTC, kET} : regions;
    for (const auto& row : report.rows)
        for (int r : sel) {
            require(r >= 0 && r < kNumRegions, ErrClass::precondition, "bad region index");
            f << row.mask.to_string() << ',' << region_name(r) << ','
              << fmt9(row.dsc[static_cast<size_t>(r)]) << ',';
            if (report.with_hd95) f << fmt9(row.hd95[static_cast<size_t>(r)]);
            f << ',' << row.n_patients << '\n';
        }
    require(f.good(), ErrClass::io, "write failed: " + path.string());
}

void write_report_json(const std::filesystem::path& path, const CombinationReport& report) {
    nlohmann::ordered_json j;
    j["checkpoint"] = report.checkpoint_id;
    char hash_buf[32];
    std::snprintf(hash_buf, sizeof hash_buf, "%016llx",
                  static_cast<unsigned long long>(report.test_set_hash));
    j["test_set_hash"] = hash_buf;
    j["seed"] = report.seed;
    j["threshold"] = report.threshold;
    j["with_hd95"] = report.with_hd95;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : report.rows) {
        nlohmann::ordered_json r;
        r["mask"] = row.mask.to_string();
        r["n_patients"] = row.n_patients;
        for (int k = 0; k < kNumRegions; ++k) {
            nlohmann::ordered_json m;
            m["dsc"] = row.dsc[static_cast<size_t>(k)];
            if (report.with_hd95) {
                m["hd95"] = row.hd95[static_cast<size_t>(k)];
                if (row.hd95_sentinels[static_cast<size_t>(k)] > 0)
                    m["hd95_sentinel_patients"] = row.hd95_sentinels[static_cast<size_t>(k)];
            }
            r[region_name(k)] = m;
        }
        rows.push_back(r);
    }
    j["rows"] = rows;
    nlohmann::ordered_json avg;
    for (int k = 0; k < kNumRegions; ++k) {
        nlohmann::ordered_json m;
        m["dsc"] = report.avg_dsc[static_cast<size_t>(k)];
        if (report.with_hd95) m["hd95"] = report.avg_hd95[static_cast<size_t>(k)];
        avg[region_name(k)] = m;
    }
    j["averages"] = avg;
    j["mean_dsc"] = report.mean_dsc;

    std::ofstream f(path, std::ios::trunc);
    require(f.good(), ErrClass::io, "cannot write " + path.string());
    f << j.dump(2) << '\n';
    require(f.good(), ErrClass::io, "write failed: " + path.string());
}

}  // namespace hmseg
