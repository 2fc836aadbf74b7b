#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "hmseg/evalsuite.hpp"
#include "hmseg/metaengine.hpp"

namespace hmseg {

// Flat key=value config with [data] / [model] / [train] / [eval] / [run]
// sections. Unknown sections or keys are rejected; a resolved copy with all
// defaults applied is written next to run outputs and reloads to an
// identical config.
struct RunConfig {
    // [data]
    int patients = 40;
    int test_patients = 10;
    std::array<int, 3> dims = {24, 24, 24};
    int modalities = 4;
    double full_fraction = 0.5;

    // [model]
    ModelConfig model;

    // [train]
    TrainConfig train;

    // [eval]
    EvalOptions eval;

    // [run]
    uint64_t seed = 7;
    std::filesystem::path out_dir = "out";

    void validate() const;
    std::string serialize() const;

    static RunConfig parse_file(const std::filesystem::path& path);
    static RunConfig parse_string(const std::string& text);
};

}  // namespace hmseg
