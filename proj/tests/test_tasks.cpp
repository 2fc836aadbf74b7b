#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "hmseg/synthvol.hpp"
#include "hmseg/tasks.hpp"

using namespace hmseg;

TEST_CASE("enumerate_tasks") {
    SUBCASE("M=4 yields exactly 14 masks") {
        auto masks = enumerate_tasks(4);
        CHECK(masks.size() == 14);
        for (const auto& m : masks) {
            CHECK(!m.none());
            CHECK(!m.all());
        }
    }
    SUBCASE("M=2 yields [01, 10] in ascending binary order") {
        auto masks = enumerate_tasks(2);
        REQUIRE(masks.size() == 2);
        CHECK(masks[0].to_string() == "01");
        CHECK(masks[1].to_string() == "10");
    }
    SUBCASE("M=3: exhaustive enumeration check") {
        auto masks = enumerate_tasks(3);
        CHECK(masks.size() == 6);
        std::set<std::string> seen;
        for (const auto& m : masks) {
            CHECK(m.to_string() != "000");
            CHECK(m.to_string() != "111");
            seen.insert(m.to_string());
        }
        CHECK(seen.size() == 6);
        // ascending order of the string read as a binary number
        for (size_t i = 1; i < masks.size(); ++i)
            CHECK(masks[i - 1].ordinal() < masks[i].ordinal());
    }
    SUBCASE("M=1 rejected") { CHECK_THROWS_AS(enumerate_tasks(1), Error); }
}

namespace {

DatasetSplit small_split(int n, uint64_t seed) {
    std::vector<PatientSample> pool;
    for (int i = 0; i < n; ++i) pool.push_back(generate_patient(seed * 1000 + i, {8, 8, 8}, 4));
    return partition_dataset(pool, 0.5, seed);
}

}  // namespace

TEST_CASE("sample_meta_batch basics") {
    DatasetSplit split = small_split(40, 5);

    SUBCASE("defaults: 8 distinct masks, one patient each") {
        MetaBatch b = sample_meta_batch(split, 8, 1, 123);
        CHECK(b.size() == 8);
        std::set<uint32_t> distinct;
        for (const auto& t : b.tasks) {
            distinct.insert(t.mask.bits);
            CHECK(t.samples.size() == 1);
            CHECK(!t.mask.all());
            CHECK(!t.mask.none());
            CHECK(t.samples[0].availability == t.mask);
        }
        CHECK(distinct.size() == 8);
    }
    SUBCASE("batch_tasks=14 exhausts every mask exactly once") {
        MetaBatch b = sample_meta_batch(split, 14, 1, 7);
        std::set<uint32_t> distinct;
        for (const auto& t : b.tasks) distinct.insert(t.mask.bits);
        CHECK(distinct.size() == 14);
    }
    SUBCASE("batch_tasks above 2^M-2 rejected") {
        CHECK_THROWS_AS(sample_meta_batch(split, 15, 1, 7), Error);
    }
    SUBCASE("determinism under a fixed seed") {
        MetaBatch a = sample_meta_batch(split, 8, 2, 99);
        MetaBatch b = sample_meta_batch(split, 8, 2, 99);
        for (int i = 0; i < a.size(); ++i) {
            CHECK(a.tasks[i].mask == b.tasks[i].mask);
            for (size_t q = 0; q < a.tasks[i].samples.size(); ++q)
                CHECK(a.tasks[i].samples[q].id == b.tasks[i].samples[q].id);
        }
    }
}

TEST_CASE("sampler frequency census: all 14 masks within 5 sigma of uniform") {
    DatasetSplit split = small_split(40, 11);
    std::map<uint32_t, int> counts;
    const int trials = 1000, k = 14, per = 8;
    for (int t = 0; t < trials; ++t) {
        MetaBatch b = sample_meta_batch(split, per, 1, 10000 + static_cast<uint64_t>(t));
        for (const auto& task : b.tasks) counts[task.mask.bits]++;
    }
    CHECK(counts.size() == 14);  // every mask observed
    const double p = static_cast<double>(per) / k;
    const double mean = trials * p;
    const double sigma = std::sqrt(trials * p * (1.0 - p));
    for (const auto& [bits, c] : counts) {
        CHECK(std::fabs(c - mean) < 5.0 * sigma);
    }
}

TEST_CASE("sampler falls back to mask intersection when no patient covers the task") {
    // Build a split whose only miss patient has availability 1000, so any
    // task mask must intersect down to a subset of {modality 0}.
    std::vector<PatientSample> pool;
    for (int i = 0; i < 4; ++i) pool.push_back(generate_patient(700 + i, {8, 8, 8}, 4));
    DatasetSplit split;
    split.full_fraction = 0.75;
    split.d_full = {pool[0], pool[1], pool[2]};
    split.d_miss = {apply_modality_drop(pool[3], ModalityMask::from_string("1000"))};

    for (uint64_t seed = 0; seed < 20; ++seed) {
        MetaBatch b = sample_meta_batch(split, 1, 1, seed);
        REQUIRE(b.size() == 1);
        CHECK(!b.tasks[0].mask.none());
        CHECK(b.tasks[0].mask.subset_of(ModalityMask::from_string("1000")));
        CHECK(b.tasks[0].samples[0].availability == b.tasks[0].mask);
    }
}
