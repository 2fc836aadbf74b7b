#include "hmseg/tasks.hpp"

#include <algorithm>
#include <random>

#include "hmseg/rng.hpp"
#include "hmseg/synthvol.hpp"

namespace hmseg {

std::vector<ModalityMask> enumerate_tasks(int modalities) {
    require(modalities >= 2, ErrClass::precondition, "enumerate_tasks requires M >= 2");
    std::vector<ModalityMask> out;
    const uint32_t k = (1u << modalities) - 2u;
    out.reserve(k);
    for (uint32_t v = 1; v <= k; ++v) out.push_back(ModalityMask::from_ordinal(modalities, v));
    return out;
}

MetaBatch sample_meta_batch(const DatasetSplit& split, int batch_tasks, int per_task,
                            uint64_t rng_seed) {
    require(!split.d_miss.empty(), ErrClass::precondition, "d_miss is empty");
    require(per_task >= 1, ErrClass::precondition, "per_task must be >= 1");
    const int m = split.modalities();
    std::vector<ModalityMask> all_masks = enumerate_tasks(m);
    require(batch_tasks >= 1 && batch_tasks <= static_cast<int>(all_masks.size()),
            ErrClass::precondition,
            "batch_tasks must be in [1, 2^M-2] = [1, " + std::to_string(all_masks.size()) + "]");

    std::mt19937_64 eng = substream(rng_seed, "tasks.meta_batch");

    // Uniform without replacement: partial Fisher-Yates over the mask list.
    for (int i = 0; i < batch_tasks; ++i) {
        std::uniform_int_distribution<size_t> pick(static_cast<size_t>(i), all_masks.size() - 1);
        std::swap(all_masks[static_cast<size_t>(i)], all_masks[pick(eng)]);
    }

    MetaBatch batch;
    for (int i = 0; i < batch_tasks; ++i) {
        const ModalityMask task_mask = all_masks[static_cast<size_t>(i)];

        // Prefer patients whose stored availability covers the task mask;
        // otherwise intersect with one drawn patient (or, when even that is
        // impossible, adopt a drawn patient's availability as the task).
        std::vector<size_t> covering, intersecting;
        for (size_t p = 0; p < split.d_miss.size(); ++p) {
            if (task_mask.subset_of(split.d_miss[p].availability)) covering.push_back(p);
            if (!task_mask.intersect(split.d_miss[p].availability).none())
                intersecting.push_back(p);
        }

        ModalityMask effective = task_mask;
        std::vector<size_t> chosen;
        auto pick_from = [&](const std::vector<size_t>& pool) {
            std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
            return pool[pick(eng)];
        };
        if (!covering.empty()) {
            for (int q = 0; q < per_task; ++q) chosen.push_back(pick_from(covering));
        } else {
            std::uniform_int_distribution<size_t> any(0, split.d_miss.size() - 1);
            const size_t p0 = intersecting.empty() ? any(eng) : pick_from(intersecting);
            effective = intersecting.empty()
                            ? split.d_miss[p0].availability
                            : task_mask.intersect(split.d_miss[p0].availability);
            chosen.push_back(p0);
            std::vector<size_t> compatible;
            for (size_t p = 0; p < split.d_miss.size(); ++p)
                if (effective.subset_of(split.d_miss[p].availability)) compatible.push_back(p);
            for (int q = 1; q < per_task; ++q) chosen.push_back(pick_from(compatible));
        }

        MetaBatch::Task task;
        task.mask = effective;
        for (size_t p : chosen)
            task.samples.push_back(apply_modality_drop(split.d_miss[p], effective));
        batch.tasks.push_back(std::move(task));
    }
    return batch;
}

}  // namespace hmseg
