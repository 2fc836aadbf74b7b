#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hmseg/netcore.hpp"
#include "hmseg/patient.hpp"

namespace hmseg {

// Dice similarity 2|P∩G| / (|P|+|G|). Both-empty returns 1.0, one-empty 0.0
// (standard convention for absent regions).
double dsc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

// 95th percentile (nearest-rank) of the pooled symmetric surface-distance
// set between boundary voxels, scaled by per-axis spacing. A voxel is
// boundary if it is foreground with at least one six-connected background
// neighbor (volume borders count as background). Either mask empty returns
// the worst-case volume diagonal sentinel.
double hd95(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
            std::array<int, 3> dims, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

double hd95_sentinel(std::array<int, 3> dims, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

struct EvalOptions {
    double threshold = 0.5;
    bool with_hd95 = true;
    std::array<double, 3> spacing = {1.0, 1.0, 1.0};
};

// Per-subset, per-region metric table across all 2^M-1 nonempty masks.
struct CombinationReport {
    struct Row {
        ModalityMask mask;
        std::array<double, kNumRegions> dsc{};
        std::array<double, kNumRegions> hd95{};          // valid when with_hd95
        std::array<int, kNumRegions> hd95_sentinels{};   // patients hitting the sentinel
        int n_patients = 0;
    };
    std::vector<Row> rows;  // ordered by mask ordinal, full mask last
    std::array<double, kNumRegions> avg_dsc{};
    std::array<double, kNumRegions> avg_hd95{};
    double mean_dsc = 0.0;  // grand mean over rows x regions
    bool with_hd95 = true;

    std::string checkpoint_id;
    uint64_t test_set_hash = 0;
    uint64_t seed = 0;
    double threshold = 0.5;
};

// Drops each nonempty modality subset from every (full-modality) test
// patient, segments, binarizes at the threshold, and aggregates per-region
// DSC (and HD95 when enabled). The discriminator is never evaluated.
CombinationReport evaluate_combinations(const ModelConfig& cfg, const ParamLayout& gen_layout,
                                        const ParamLayout& down_layout,
                                        std::span<const double> theta_g,
                                        std::span<const double> phi_d,
                                        const std::vector<PatientSample>& test_set,
                                        const EvalOptions& opts, const std::string& checkpoint_id,
                                        uint64_t seed);

// CSV columns: mask_bits,region,dsc,hd95,n_patients. `regions` filters the
// emitted rows (indices into WT/TC/ET); empty means all.
void write_report_csv(const std::filesystem::path& path, const CombinationReport& report,
                      const std::vector<int>& regions = {});
void write_report_json(const std::filesystem::path& path, const CombinationReport& report);

uint64_t test_set_hash(const std::vector<PatientSample>& test_set);

}  // namespace hmseg
