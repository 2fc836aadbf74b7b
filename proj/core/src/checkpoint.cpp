#include "hmseg/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hmseg/error.hpp"

namespace hmseg {

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), ErrClass::io, "cannot open for writing: " + path.string());

    char buf[64];
    std::ostringstream head;
    head << "hmseg-ckpt:1\n";
    head << "config:" << ckpt.config_summary << '\n';
    std::snprintf(buf, sizeof buf, "%016" PRIx64, ckpt.config_hash);
    head << "config_hash:" << buf << '\n';
    if (ckpt.alpha) {
        std::snprintf(buf, sizeof buf, "%.17g", *ckpt.alpha);
        head << "alpha:" << buf << '\n';
    } else {
        head << "alpha:none\n";
    }
    head << "step:" << ckpt.step << '\n';
    head << "arrays:" << ckpt.arrays.size() << '\n';
    for (const auto& [name, t] : ckpt.arrays) {
        head << name << ' ' << t.rank();
        for (int d : t.shape) head << ' ' << d;
        head << '\n';
    }
    head << '\n';
    f << head.str();
    for (const auto& [name, t] : ckpt.arrays)
        f.write(reinterpret_cast<const char*>(t.ptr()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    require(f.good(), ErrClass::io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrClass::io, "cannot open: " + path.string());

    std::string line;
    require(std::getline(f, line) && line.rfind("hmseg-ckpt:", 0) == 0, ErrClass::format,
            "not a checkpoint file: " + path.string());
    require(line == "hmseg-ckpt:1", ErrClass::format,
            "unsupported checkpoint version '" + line + "'");

    Checkpoint ckpt;
    size_t n_arrays = 0;
    bool have_hash = false, have_alpha = false, have_step = false, have_arrays = false;
    while (!have_arrays && std::getline(f, line) && !line.empty()) {
        auto colon = line.find(':');
        require(colon != std::string::npos, ErrClass::format, "malformed manifest line: " + line);
        std::string key = line.substr(0, colon), val = line.substr(colon + 1);
        if (key == "config") {
            ckpt.config_summary = val;
        } else if (key == "config_hash") {
            ckpt.config_hash = std::stoull(val, nullptr, 16);
            have_hash = true;
        } else if (key == "alpha") {
            if (val != "none") ckpt.alpha = std::stod(val);
            have_alpha = true;
        } else if (key == "step") {
            ckpt.step = std::stoll(val);
            have_step = true;
        } else if (key == "arrays") {
            n_arrays = std::stoull(val);
            have_arrays = true;
        } else {
            fail(ErrClass::format, "unknown manifest key '" + key + "'");
        }
    }
    require(have_hash && have_alpha && have_step && have_arrays && !ckpt.config_summary.empty(),
            ErrClass::format, "incomplete checkpoint manifest in " + path.string());

    int64_t payload_elems = 0;
    std::vector<std::pair<std::string, std::vector<int>>> dir;
    for (size_t i = 0; i < n_arrays; ++i) {
        require(static_cast<bool>(std::getline(f, line)), ErrClass::format,
                "truncated array directory");
        std::istringstream ls(line);
        std::string name;
        int rank = 0;
        ls >> name >> rank;
        require(!ls.fail() && rank >= 1 && rank <= 8, ErrClass::format,
                "bad array directory line: " + line);
        std::vector<int> shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) ls >> shape[static_cast<size_t>(d)];
        require(!ls.fail(), ErrClass::format, "bad array shape in: " + line);
        payload_elems += Tensor<double>::count(shape);
        dir.emplace_back(name, std::move(shape));
    }
    require(std::getline(f, line) && line.empty(), ErrClass::format,
            "missing blank line before payload");

    const std::streampos payload_start = f.tellg();
    f.seekg(0, std::ios::end);
    const int64_t payload_bytes = static_cast<int64_t>(f.tellg() - payload_start);
    require(payload_bytes == payload_elems * static_cast<int64_t>(sizeof(double)),
            ErrClass::format,
            "checkpoint payload size mismatch in " + path.string() + " (expected " +
                std::to_string(payload_elems * sizeof(double)) + " bytes, found " +
                std::to_string(payload_bytes) + ")");
    f.seekg(payload_start);

    for (auto& [name, shape] : dir) {
        Tensor<double> t(shape);
        f.read(reinterpret_cast<char*>(t.ptr()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        ckpt.arrays.emplace_back(name, std::move(t));
    }
    require(f.good(), ErrClass::io, "read failed: " + path.string());
    return ckpt;
}

}  // namespace hmseg
