#pragma once

#include <cstdint>
#include <vector>

#include "hmseg/patient.hpp"

namespace hmseg {

// One meta-batch: `size` tasks, each a (mask, patients) pair. Patients carry
// exactly the task mask after dropping.
struct MetaBatch {
    struct Task {
        ModalityMask mask;
        std::vector<PatientSample> samples;
    };
    std::vector<Task> tasks;
    int size() const { return static_cast<int>(tasks.size()); }
};

// All 2^M-2 nonempty proper-subset masks in ascending order of the mask
// string read as a binary number (modality 0 most significant).
std::vector<ModalityMask> enumerate_tasks(int modalities);

// Samples `batch_tasks` distinct task masks uniformly without replacement,
// then draws `per_task` patients per task from split.d_miss, preferring
// patients whose stored availability covers the mask. When no patient
// covers it, the task mask is replaced by the intersection with a drawn
// patient's availability (or that availability itself if every intersection
// would be empty), so the effective mask is never empty.
MetaBatch sample_meta_batch(const DatasetSplit& split, int batch_tasks, int per_task,
                            uint64_t rng_seed);

}  // namespace hmseg
