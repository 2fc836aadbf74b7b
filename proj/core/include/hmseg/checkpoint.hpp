#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hmseg/tensor.hpp"

namespace hmseg {

// Single-file parameter archive: a text manifest (format version, model
// config summary and hash, alpha, step count, array directory) followed by a
// blank line and the concatenated little-endian float64 array payloads.
// Arrays are keyed by hierarchical names ("theta_g/enc.l0.c0.w", ...).
struct Checkpoint {
    std::string config_summary;          // parseable ModelConfig::summary()
    uint64_t config_hash = 0;
    std::optional<double> alpha;         // absent for variants without alpha
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<double>>> arrays;

    const Tensor<double>* find(const std::string& name) const {
        for (const auto& [n, t] : arrays)
            if (n == name) return &t;
        return nullptr;
    }
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hmseg
