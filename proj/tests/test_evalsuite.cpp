#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "hmseg/evalsuite.hpp"
#include "hmseg/metaengine.hpp"
#include "hmseg/synthvol.hpp"

using namespace hmseg;
namespace fs = std::filesystem;

namespace {

std::vector<uint8_t> cube(std::array<int, 3> dims, int z0, int y0, int x0, int side) {
    std::vector<uint8_t> m(static_cast<size_t>(dims[0]) * dims[1] * dims[2], 0);
    for (int z = z0; z < z0 + side; ++z)
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x)
                m[static_cast<size_t>((static_cast<int64_t>(z) * dims[1] + y) * dims[2] + x)] = 1;
    return m;
}

// Independent all-pairs oracle: boundary = 6-neighborhood test, distances
// pooled from both directions, nearest-rank percentile.
double oracle_hd95(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b,
                   std::array<int, 3> dims) {
    auto boundary = [&](const std::vector<uint8_t>& m) {
        std::vector<std::array<int, 3>> out;
        auto at = [&](int z, int y, int x) {
            if (z < 0 || z >= dims[0] || y < 0 || y >= dims[1] || x < 0 || x >= dims[2])
                return false;
            return m[static_cast<size_t>((static_cast<int64_t>(z) * dims[1] + y) * dims[2] + x)] !=
                   0;
        };
        for (int z = 0; z < dims[0]; ++z)
            for (int y = 0; y < dims[1]; ++y)
                for (int x = 0; x < dims[2]; ++x)
                    if (at(z, y, x) && (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) ||
                                        !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1)))
                        out.push_back({z, y, x});
        return out;
    };
    auto ba = boundary(a), bb = boundary(b);
    std::vector<double> d;
    auto push_directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = 1e300;
            for (const auto& q : to) {
                double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(best));
        }
    };
    push_directed(ba, bb);
    push_directed(bb, ba);
    std::sort(d.begin(), d.end());
    size_t idx = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(d.size())) - 1.0);
    return d[std::min(idx, d.size() - 1)];
}

}  // namespace

TEST_CASE("dsc hand cases and conventions") {
    std::array<int, 3> dims = {6, 6, 6};
    auto a = cube(dims, 1, 1, 1, 2);
    SUBCASE("identical nonempty masks -> 1") { CHECK(dsc(a, a) == 1.0); }
    SUBCASE("disjoint nonempty masks -> 0") {
        auto b = cube(dims, 4, 4, 4, 2);
        CHECK(dsc(a, b) == 0.0);
    }
    SUBCASE("|P|=4, |G|=4, overlap 2 -> 0.5 by the count oracle") {
        std::vector<uint8_t> p(216, 0), g(216, 0);
        for (int i = 0; i < 4; ++i) p[static_cast<size_t>(i)] = 1;
        for (int i = 2; i < 6; ++i) g[static_cast<size_t>(i)] = 1;
        // independent count-based oracle
        int np = 0, ng = 0, overlap = 0;
        for (int i = 0; i < 216; ++i) {
            np += p[static_cast<size_t>(i)];
            ng += g[static_cast<size_t>(i)];
            overlap += p[static_cast<size_t>(i)] && g[static_cast<size_t>(i)] ? 1 : 0;
        }
        CHECK(dsc(p, g) == doctest::Approx(2.0 * overlap / (np + ng)));
        CHECK(dsc(p, g) == 0.5);
    }
    SUBCASE("both empty -> 1, one empty -> 0") {
        std::vector<uint8_t> e(216, 0);
        CHECK(dsc(e, e) == 1.0);
        CHECK(dsc(a, e) == 0.0);
    }
    SUBCASE("symmetry") {
        auto b = cube(dims, 2, 2, 2, 3);
        CHECK(dsc(a, b) == dsc(b, a));
    }
}

TEST_CASE("hd95 hand cases") {
    std::array<int, 3> dims = {10, 6, 6};
    SUBCASE("identical masks -> 0") {
        auto a = cube(dims, 2, 2, 2, 2);
        CHECK(hd95(a, a, dims) == 0.0);
    }
    SUBCASE("two unit cubes offset by 3 along the first axis -> 3.0") {
        auto a = cube(dims, 1, 2, 2, 1);
        auto b = cube(dims, 4, 2, 2, 1);
        CHECK(hd95(a, b, dims) == doctest::Approx(3.0).epsilon(1e-9));
    }
    SUBCASE("swap symmetry") {
        auto a = cube(dims, 1, 1, 1, 2);
        auto b = cube(dims, 5, 2, 2, 3);
        CHECK(hd95(a, b, dims) == doctest::Approx(hd95(b, a, dims)).epsilon(1e-12));
    }
    SUBCASE("spacing scales distances") {
        auto a = cube(dims, 1, 2, 2, 1);
        auto b = cube(dims, 4, 2, 2, 1);
        CHECK(hd95(a, b, dims, {2.0, 1.0, 1.0}) == doctest::Approx(6.0).epsilon(1e-9));
    }
    SUBCASE("empty mask returns the volume-diagonal sentinel") {
        std::vector<uint8_t> e(360, 0);
        auto a = cube(dims, 1, 1, 1, 2);
        const double sentinel = std::sqrt(100.0 + 36.0 + 36.0);
        CHECK(hd95(a, e, dims) == doctest::Approx(sentinel));
        CHECK(hd95_sentinel(dims) == doctest::Approx(sentinel));
    }
    SUBCASE("monotone under moving the far surface away") {
        auto gt = cube(dims, 1, 2, 2, 2);
        auto near = cube(dims, 4, 2, 2, 2);
        auto far = cube(dims, 6, 2, 2, 2);
        CHECK(hd95(gt, far, dims) > hd95(gt, near, dims));
    }
}

TEST_CASE("hd95 matches the independent all-pairs oracle on random blobs") {
    std::array<int, 3> dims = {8, 8, 8};
    std::mt19937_64 eng(5);
    std::bernoulli_distribution coin(0.25);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<uint8_t> a(512, 0), b(512, 0);
        for (int i = 0; i < 512; ++i) {
            a[static_cast<size_t>(i)] = coin(eng) ? 1 : 0;
            b[static_cast<size_t>(i)] = coin(eng) ? 1 : 0;
        }
        if (std::find(a.begin(), a.end(), 1) == a.end() ||
            std::find(b.begin(), b.end(), 1) == b.end())
            continue;
        CHECK(hd95(a, b, dims) == doctest::Approx(oracle_hd95(a, b, dims)).epsilon(1e-12));
    }
}

TEST_CASE("evaluate_combinations: shape, averages, determinism, no discriminator") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.channels = {2, 3};
    cfg.bottleneck_channels = 4;
    cfg.validate();
    TrainConfig tc;
    tc.seed = 71;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);

    std::vector<PatientSample> test_set;
    for (int i = 0; i < 3; ++i)
        test_set.push_back(generate_patient(900 + static_cast<uint64_t>(i), {8, 8, 8}, 4));

    EvalOptions opts;
    reset_disc_eval_count();
    CombinationReport rep = evaluate_combinations(mb.model, mb.gen_layout, mb.down_layout,
                                                  p.theta_g, p.phi_d, test_set, opts, "test", 71);
    CHECK(disc_eval_count() == 0);
    REQUIRE(rep.rows.size() == 15);
    CHECK(rep.rows.back().mask.all());
    for (const auto& row : rep.rows) CHECK(row.n_patients == 3);

    // report averages recompute from rows exactly
    for (int r = 0; r < kNumRegions; ++r) {
        double acc = 0.0;
        for (const auto& row : rep.rows) acc += row.dsc[static_cast<size_t>(r)];
        CHECK(rep.avg_dsc[static_cast<size_t>(r)] ==
              doctest::Approx(acc / 15.0).epsilon(1e-12));
    }
    double grand = (rep.avg_dsc[0] + rep.avg_dsc[1] + rep.avg_dsc[2]) / 3.0;
    CHECK(rep.mean_dsc == doctest::Approx(grand).epsilon(1e-12));

    SUBCASE("deterministic CSV bytes and region filter") {
        fs::path dir = fs::temp_directory_path() / "hmseg_eval_report";
        fs::create_directories(dir);
        write_report_csv(dir / "r1.csv", rep);
        write_report_csv(dir / "r2.csv", rep);
        std::ifstream f1(dir / "r1.csv"), f2(dir / "r2.csv");
        std::stringstream s1, s2;
        s1 << f1.rdbuf();
        s2 << f2.rdbuf();
        const std::string b1 = s1.str(), b2 = s2.str();
        CHECK(b1 == b2);
        // 15 rows x 3 regions + header
        CHECK(std::count(b1.begin(), b1.end(), '\n') == 46);

        write_report_csv(dir / "wt.csv", rep, {kWT});
        std::ifstream fw(dir / "wt.csv");
        std::string line;
        std::getline(fw, line);  // header
        int wt_rows = 0;
        while (std::getline(fw, line)) {
            CHECK(line.find(",WT,") != std::string::npos);
            ++wt_rows;
        }
        CHECK(wt_rows == 15);

        write_report_json(dir / "r.json", rep);
        CHECK(fs::file_size(dir / "r.json") > 100);
        fs::remove_all(dir);
    }

    SUBCASE("rejects partial test samples") {
        std::vector<PatientSample> bad = {
            apply_modality_drop(test_set[0], ModalityMask::from_string("1000"))};
        CHECK_THROWS_AS(evaluate_combinations(mb.model, mb.gen_layout, mb.down_layout, p.theta_g,
                                              p.phi_d, bad, opts, "x", 1),
                        Error);
    }
}
