#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "hmseg/patient.hpp"

namespace hmseg {

// Deterministic synthetic patient: three nested ellipsoids (ET inside TC
// inside WT) inside a brain ellipsoid, jittered per seed. Each modality is a
// distinct additive function of the regions plus seeded Gaussian noise; the
// contrast recipe is fixed so that modality 2 (T1c-like) carries the
// strongest ET contrast and modality 0 (FLAIR-like) the strongest WT
// contrast, and no single modality separates all three regions.
// Intensities are z-normalized over brain voxels per modality.
// Availability of the returned sample is all-ones.
PatientSample generate_patient(uint64_t seed, std::array<int, 3> dims, int num_modalities);

// Copy of `sample` whose availability equals `mask`; dropped volume slots are
// absent, labels unchanged. `mask` must be nonzero and a subset of the
// sample's availability.
PatientSample apply_modality_drop(const PatientSample& sample, const ModalityMask& mask);

// Seeded shuffle, then the first ceil(full_fraction*N) samples form d_full.
// Each remaining sample receives a random nonempty proper-subset mask; when
// the remainder holds at least 2^M-2 patients, every such mask occurs at
// least once. All inputs must be full-modality.
DatasetSplit partition_dataset(const std::vector<PatientSample>& samples, double full_fraction,
                               uint64_t seed);

// Training-time augmentation: flips each spatial axis with probability 1/2
// (volumes and labels together).
PatientSample flip_augment(const PatientSample& sample, std::mt19937_64& eng);

}  // namespace hmseg
