#pragma once

#include <filesystem>

#include "hmseg/patient.hpp"

namespace hmseg {

// .hmv volume format: a UTF-8 text header of key:value lines
//   version:1
//   dims:D H W
//   modalities:M
//   availability:<bitstring, modality 0 leftmost>
//   dtype:f32le
// followed by one blank line, then raw little-endian float32 in C order for
// each present modality in canonical order, then the three label planes as
// raw 0/1 bytes in region order WT,TC,ET. One file per patient; the patient
// id is the file stem.
void write_volume(const std::filesystem::path& path, const PatientSample& sample);
PatientSample read_volume(const std::filesystem::path& path);

}  // namespace hmseg
