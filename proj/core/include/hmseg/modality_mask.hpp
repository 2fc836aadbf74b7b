#pragma once

#include <cstdint>
#include <string>

#include "hmseg/error.hpp"

namespace hmseg {

// Availability vector over M modalities in canonical order
// (FLAIR-like, T1-like, T1c-like, T2-like) = indices 0..M-1.
//
// String form puts modality 0 leftmost: "1100" means modalities 0 and 1
// present. Masks sort by the string read as a binary number, which matches
// the canonical report row order (single-T2 subset first, full set last).
struct ModalityMask {
    int m = 0;
    uint32_t bits = 0;  // bit j == modality j present

    ModalityMask() = default;
    ModalityMask(int modalities, uint32_t b) : m(modalities), bits(b) {
        require(modalities >= 1 && modalities <= 30, ErrClass::precondition,
                "modality count out of range");
        require(b < (1u << modalities), ErrClass::precondition, "mask bits exceed modality count");
    }

    static ModalityMask full(int modalities) {
        return ModalityMask(modalities, (1u << modalities) - 1u);
    }

    static ModalityMask from_string(const std::string& s) {
        require(!s.empty() && s.size() <= 30, ErrClass::format, "bad mask string length");
        uint32_t b = 0;
        for (size_t j = 0; j < s.size(); ++j) {
            if (s[j] == '1')
                b |= 1u << j;
            else
                require(s[j] == '0', ErrClass::format, "mask string must be 0/1 characters");
        }
        return ModalityMask(static_cast<int>(s.size()), b);
    }

    bool test(int j) const { return (bits >> j) & 1u; }
    void set(int j) { bits |= 1u << j; }

    int count() const {
        int n = 0;
        for (int j = 0; j < m; ++j) n += test(j) ? 1 : 0;
        return n;
    }

    bool none() const { return bits == 0; }
    bool all() const { return bits == (1u << m) - 1u; }

    bool subset_of(const ModalityMask& o) const { return m == o.m && (bits & ~o.bits) == 0; }

    ModalityMask intersect(const ModalityMask& o) const { return ModalityMask(m, bits & o.bits); }

    // Value of the string form read as a binary number (modality 0 is the
    // most significant digit). Defines enumeration and report row order.
    uint32_t ordinal() const {
        uint32_t v = 0;
        for (int j = 0; j < m; ++j)
            if (test(j)) v |= 1u << (m - 1 - j);
        return v;
    }

    static ModalityMask from_ordinal(int modalities, uint32_t v) {
        uint32_t b = 0;
        for (int j = 0; j < modalities; ++j)
            if ((v >> (modalities - 1 - j)) & 1u) b |= 1u << j;
        return ModalityMask(modalities, b);
    }

    std::string to_string() const {
        std::string s(static_cast<size_t>(m), '0');
        for (int j = 0; j < m; ++j)
            if (test(j)) s[static_cast<size_t>(j)] = '1';
        return s;
    }

    friend bool operator==(const ModalityMask& a, const ModalityMask& b) {
        return a.m == b.m && a.bits == b.bits;
    }
};

}  // namespace hmseg
