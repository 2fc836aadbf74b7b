#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmseg/modality_mask.hpp"

namespace hmseg {

// Nested tumor regions, outermost first. Labels overlap: ET <= TC <= WT.
enum Region : int { kWT = 0, kTC = 1, kET = 2 };
inline const char* region_name(int r) {
    static const char* names[3] = {"WT", "TC", "ET"};
    return names[r];
}
constexpr int kNumRegions = 3;

// One patient: M optional intensity volumes plus three nested binary labels,
// all sharing (D,H,W). volumes[j] is engaged iff availability bit j is set.
struct PatientSample {
    std::string id;
    std::array<int, 3> dims{0, 0, 0};  // D,H,W
    ModalityMask availability;
    std::vector<std::optional<std::vector<float>>> volumes;
    std::array<std::vector<uint8_t>, kNumRegions> labels;  // order WT,TC,ET

    int64_t voxels() const {
        return static_cast<int64_t>(dims[0]) * dims[1] * dims[2];
    }
    int modalities() const { return static_cast<int>(volumes.size()); }

    // Checks the structural invariants; throws ErrClass::precondition.
    void validate() const;
};

struct DatasetSplit {
    std::vector<PatientSample> d_miss;  // partial availability (1..M-1 bits)
    std::vector<PatientSample> d_full;  // all M modalities
    double full_fraction = 0.0;

    int modalities() const {
        if (!d_full.empty()) return d_full.front().modalities();
        if (!d_miss.empty()) return d_miss.front().modalities();
        return 0;
    }
};

}  // namespace hmseg
