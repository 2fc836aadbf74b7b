#include "hmseg/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace hmseg {

static_assert(std::endian::native == std::endian::little,
              "hmv payload I/O assumes a little-endian host");

void write_volume(const std::filesystem::path& path, const PatientSample& sample) {
    sample.validate();
    std::ofstream f(path, std::ios::binary);
    require(f.good(), ErrClass::io, "cannot open for writing: " + path.string());

    std::ostringstream header;
    header << "version:1\n";
    header << "dims:" << sample.dims[0] << ' ' << sample.dims[1] << ' ' << sample.dims[2] << '\n';
    header << "modalities:" << sample.modalities() << '\n';
    header << "availability:" << sample.availability.to_string() << '\n';
    header << "dtype:f32le\n\n";
    f << header.str();

    const std::streamsize n = static_cast<std::streamsize>(sample.voxels());
    for (int j = 0; j < sample.modalities(); ++j)
        if (sample.volumes[static_cast<size_t>(j)])
            f.write(reinterpret_cast<const char*>(sample.volumes[static_cast<size_t>(j)]->data()),
                    n * static_cast<std::streamsize>(sizeof(float)));
    for (int r = 0; r < kNumRegions; ++r)
        f.write(reinterpret_cast<const char*>(sample.labels[static_cast<size_t>(r)].data()), n);
    require(f.good(), ErrClass::io, "write failed: " + path.string());
}

PatientSample read_volume(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrClass::io, "cannot open: " + path.string());

    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line == "") break;
        auto colon = line.find(':');
        require(colon != std::string::npos, ErrClass::format,
                "malformed header line '" + line + "' in " + path.string());
        std::string key = line.substr(0, colon);
        require(!kv.count(key), ErrClass::format, "duplicate header key '" + key + "'");
        static const char* known[] = {"version", "dims", "modalities", "availability", "dtype"};
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        require(ok, ErrClass::format, "unknown header key '" + key + "' in " + path.string());
        kv[key] = line.substr(colon + 1);
    }
    for (const char* k : {"version", "dims", "modalities", "availability", "dtype"})
        require(kv.count(k), ErrClass::format,
                std::string("missing header key '") + k + "' in " + path.string());

    require(kv["version"] == "1", ErrClass::format,
            "unsupported format version '" + kv["version"] + "' in " + path.string());
    require(kv["dtype"] == "f32le", ErrClass::format, "unsupported dtype '" + kv["dtype"] + "'");

    PatientSample s;
    s.id = path.stem().string();
    {
        std::istringstream ds(kv["dims"]);
        ds >> s.dims[0] >> s.dims[1] >> s.dims[2];
        require(!ds.fail() && s.dims[0] > 0 && s.dims[1] > 0 && s.dims[2] > 0, ErrClass::format,
                "bad dims header in " + path.string());
    }
    int m = 0;
    {
        std::istringstream ms(kv["modalities"]);
        ms >> m;
        require(!ms.fail() && m >= 1 && m <= 30, ErrClass::format, "bad modalities header");
    }
    s.availability = ModalityMask::from_string(kv["availability"]);
    require(s.availability.m == m, ErrClass::format,
            "availability width does not match modalities in " + path.string());
    require(!s.availability.none(), ErrClass::format, "all-zero availability in " + path.string());

    const int64_t n = s.voxels();
    const std::streampos payload_start = f.tellg();
    f.seekg(0, std::ios::end);
    const int64_t payload_bytes = static_cast<int64_t>(f.tellg() - payload_start);
    const int64_t expected =
        n * static_cast<int64_t>(sizeof(float)) * s.availability.count() + n * kNumRegions;
    require(payload_bytes == expected, ErrClass::format,
            "header/payload size mismatch in " + path.string() + " (expected " +
                std::to_string(expected) + " bytes, found " + std::to_string(payload_bytes) + ")");
    f.seekg(payload_start);

    s.volumes.resize(static_cast<size_t>(m));
    for (int j = 0; j < m; ++j) {
        if (!s.availability.test(j)) continue;
        std::vector<float> vol(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(vol.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
        s.volumes[static_cast<size_t>(j)] = std::move(vol);
    }
    for (int r = 0; r < kNumRegions; ++r) {
        s.labels[static_cast<size_t>(r)].resize(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(s.labels[static_cast<size_t>(r)].data()),
               static_cast<std::streamsize>(n));
    }
    require(f.good(), ErrClass::io, "read failed: " + path.string());
    s.validate();
    return s;
}

}  // namespace hmseg
