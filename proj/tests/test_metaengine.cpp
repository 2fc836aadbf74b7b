#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hmseg/metaengine.hpp"
#include "hmseg/synthvol.hpp"

using namespace hmseg;
namespace fs = std::filesystem;

namespace {

// Small-but-real setup used across the engine tests.
ModelConfig small_model() {
    ModelConfig cfg;
    cfg.modalities = 4;
    cfg.levels = 2;
    cfg.channels = {2, 3};
    cfg.bottleneck_channels = 4;
    cfg.kernel = 3;
    cfg.validate();
    return cfg;
}

DatasetSplit small_split(int n, uint64_t seed, std::array<int, 3> dims = {8, 8, 8}) {
    std::vector<PatientSample> pool;
    for (int i = 0; i < n; ++i)
        pool.push_back(generate_patient(seed * 4451 + static_cast<uint64_t>(i), dims, 4));
    return partition_dataset(pool, 0.5, seed);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("inner_loss equals a losses-module recomputation of the same forwards") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 3;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);

    DatasetSplit split = small_split(8, 13);
    std::vector<PatientSample> batch = {split.d_miss.front()};

    InnerLossValues iv = inner_loss(mb, p.theta_g, p.phi_d, batch);
    CHECK(iv.loss_e == doctest::Approx(iv.seg_term + iv.adv_term).epsilon(1e-12));

    // independent composition: run the forward wrappers, then the loss module
    Tape<double> tape;
    NetForward<double> net(tape, cfg, mb.gen_layout, mb.down_layout, p.theta_g, p.phi_d);
    auto g = net.forward_generator(batch[0]);
    Tensor<double> pred = tape.val(net.decode(g));
    Tensor<double> dhat = tape.val(net.discriminate(g.bottleneck.fused));

    Tensor<double> gt({kNumRegions, 8, 8, 8});
    const int64_t n = batch[0].voxels();
    for (int r = 0; r < kNumRegions; ++r)
        for (int64_t i = 0; i < n; ++i) gt[r * n + i] = batch[0].labels[r][i];

    GeneratorLoss ref = generator_loss(pred, gt, {dhat}, mb.weights);
    CHECK(iv.loss_e == doctest::Approx(ref.total).epsilon(1e-9));
    CHECK(iv.seg_term == doctest::Approx(ref.seg_term).epsilon(1e-9));
    CHECK(iv.adv_term == doctest::Approx(ref.adv_term).epsilon(1e-9));
    const double dis_ref =
        discriminator_loss({dhat}, {availability_code(batch[0].availability)},
                           mb.weights.disc_scale);
    CHECK(iv.dis_term == doctest::Approx(dis_ref).epsilon(1e-9));

    CHECK_THROWS_AS(inner_loss(mb, p.theta_g, p.phi_d, {}), Error);
}

TEST_CASE("inner_adapt: zero step, determinism, phi untouched") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 5;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);
    DatasetSplit split = small_split(8, 29);
    std::vector<PatientSample> batch = {split.d_miss.front()};

    SUBCASE("alpha = 0 returns theta exactly") {
        auto t = inner_adapt(mb, p.theta_g, p.phi_d, 0.0, batch, 1);
        CHECK(t == p.theta_g);
    }
    SUBCASE("two calls agree bitwise") {
        auto a = inner_adapt(mb, p.theta_g, p.phi_d, 0.01, batch, 2);
        auto b = inner_adapt(mb, p.theta_g, p.phi_d, 0.01, batch, 2);
        CHECK(a == b);
        bool moved = false;
        for (size_t i = 0; i < a.size() && !moved; ++i) moved = a[i] != p.theta_g[i];
        CHECK(moved);
    }
    SUBCASE("phi_d is bit-identical across the call") {
        std::vector<double> phi_before = p.phi_d;
        (void)inner_adapt(mb, p.theta_g, p.phi_d, 0.02, batch, 1);
        CHECK(p.phi_d == phi_before);
    }
    SUBCASE("non-finite parameters abort naming the block") {
        MetaParams bad = p;
        bad.theta_g[0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(inner_adapt(mb, bad.theta_g, bad.phi_d, 0.01, batch, 1), Error);
    }
}

TEST_CASE("inner_adapt matches a finite-difference gradient step on the tiny model") {
    // <=50-parameter configuration, double precision
    ModelConfig tiny;
    tiny.modalities = 2;
    tiny.levels = 1;
    tiny.channels = {1};
    tiny.bottleneck_channels = 1;
    tiny.kernel = 1;
    tiny.disc_hidden_mult = 2;
    tiny.norm = false;
    TrainConfig tc;
    tc.seed = 11;
    ModelBundle mb = ModelBundle::make(tiny, Variant::Full, tc.weights);
    REQUIRE(mb.gen_layout.total + mb.down_layout.total <= 50);

    MetaParams p = init_meta_params(mb, tc);
    std::mt19937_64 eng(2);
    std::normal_distribution<double> nrm(0.0, 0.3);
    for (double& x : p.theta_g) x += nrm(eng);
    for (double& x : p.phi_d) x += nrm(eng);

    PatientSample s = generate_patient(5, {8, 8, 8}, 2);
    std::vector<PatientSample> batch = {apply_modality_drop(s, ModalityMask::from_string("10"))};

    const double alpha = 0.05, h = 1e-6;
    std::vector<double> theta_star = inner_adapt(mb, p.theta_g, p.phi_d, alpha, batch, 1);
    for (size_t i = 0; i < p.theta_g.size(); ++i) {
        std::vector<double> tp = p.theta_g, tm = p.theta_g;
        tp[i] += h;
        tm[i] -= h;
        const double fd =
            (inner_loss(mb, tp, p.phi_d, batch).loss_e - inner_loss(mb, tm, p.phi_d, batch).loss_e) /
            (2.0 * h);
        CHECK(theta_star[i] ==
              doctest::Approx(p.theta_g[i] - alpha * fd).epsilon(1e-6).scale(1.0));
    }
}

TEST_CASE("outer_loss contracts") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 17;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);
    DatasetSplit split = small_split(8, 31);
    std::vector<PatientSample> full_batch = {split.d_full.front()};

    SUBCASE("rejects non-full samples") {
        std::vector<PatientSample> bad = {split.d_miss.front()};
        CHECK_THROWS_WITH_AS(outer_loss(mb, p.theta_g, p.phi_d, bad, {}),
                             doctest::Contains("non-full"), Error);
    }
    SUBCASE("with theta* = theta it equals the inner composition on the full batch") {
        InnerLossValues iv = inner_loss(mb, p.theta_g, p.phi_d, full_batch);
        const double got = outer_loss(mb, p.theta_g, p.phi_d, full_batch, {});
        CHECK(got == doctest::Approx(iv.loss_e + iv.dis_term).epsilon(1e-12));
    }
}

TEST_CASE("meta-gradient matches central finite differences on the tiny model") {
    GradCheckReport rep = run_gradcheck(19, /*first_order=*/false);
    CHECK(!rep.skipped);
    CHECK(rep.params_checked == 48);  // 47 model parameters + alpha
    CHECK(rep.max_rel_err < 1e-4);
    CHECK(rep.passed);
}

TEST_CASE("alpha receives a nonzero gradient on a generic tiny problem") {
    ModelConfig tiny;
    tiny.modalities = 2;
    tiny.levels = 1;
    tiny.channels = {1};
    tiny.bottleneck_channels = 1;
    tiny.kernel = 1;
    tiny.disc_hidden_mult = 2;
    tiny.norm = false;
    TrainConfig tc;
    tc.seed = 23;
    tc.meta_batch_tasks = 2;
    ModelBundle mb = ModelBundle::make(tiny, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);
    std::mt19937_64 eng(4);
    std::normal_distribution<double> nrm(0.0, 0.3);
    for (double& x : p.theta_g) x += nrm(eng);
    for (double& x : p.phi_d) x += nrm(eng);

    PatientSample s = generate_patient(6, {8, 8, 8}, 2);
    MetaBatch batch;
    MetaBatch::Task t0;
    t0.mask = ModalityMask::from_string("10");
    t0.samples = {apply_modality_drop(s, t0.mask)};
    batch.tasks.push_back(t0);
    std::vector<std::vector<PatientSample>> fulls = {{generate_patient(7, {8, 8, 8}, 2)}};

    MetaGradients g = meta_gradient(mb, p, batch, fulls, tc);
    CHECK(std::fabs(g.dlog_alpha) > 1e-12);

    // FD cross-check on log_alpha alone
    const double h = 1e-5;
    MetaParams pp = p, pm = p;
    pp.log_alpha += h;
    pm.log_alpha -= h;
    const double fd = (meta_objective_value(mb, pp, batch, fulls, tc) -
                       meta_objective_value(mb, pm, batch, fulls, tc)) /
                      (2.0 * h);
    CHECK(g.dlog_alpha == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("apply_update: plain descent with a zero gradient leaves params unchanged") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.optimizer = "sgd";
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);
    MetaParams before = p;
    MetaGradients zero;
    zero.theta_g.assign(p.theta_g.size(), 0.0);
    zero.phi_d.assign(p.phi_d.size(), 0.0);
    zero.batch_tasks = 4;
    OptimizerState opt;
    apply_update(mb, p, zero, opt, tc);
    CHECK(p.theta_g == before.theta_g);
    CHECK(p.phi_d == before.phi_d);
    CHECK(p.log_alpha == before.log_alpha);
}

TEST_CASE("train smoke runs, checkpoints, and stays deterministic") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 41;
    tc.epochs = 2;
    tc.meta_batch_tasks = 4;
    tc.outer_lr = 1e-3;
    tc.log_every = 2;

    DatasetSplit split = small_split(8, 57);
    fs::path dir = fs::temp_directory_path() / "hmseg_train_smoke";
    fs::remove_all(dir);

    TrainResult r1 = train(cfg, tc, split, dir / "a");
    CHECK(fs::exists(r1.checkpoint_path));
    CHECK(r1.steps == 4);  // ceil(8/4) * 2 epochs
    Checkpoint ckpt = load_checkpoint(r1.checkpoint_path);
    CHECK(ckpt.step == 4);
    REQUIRE(ckpt.alpha.has_value());
    CHECK(*ckpt.alpha > 0.0);

    TrainResult r2 = train(cfg, tc, split, dir / "b");
    CHECK(slurp(r1.metrics_path) == slurp(r2.metrics_path));

    SUBCASE("resume continues step numbering") {
        TrainConfig tc2 = tc;
        tc2.resume = r1.checkpoint_path;
        tc2.epochs = 1;
        TrainResult r3 = train(cfg, tc2, split, dir / "a");
        CHECK(r3.steps == 6);
        std::string metrics = slurp(r3.metrics_path);
        CHECK(metrics.find("\n5,") != std::string::npos);
        CHECK(metrics.find("\n6,") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("ablation variants wire the expected machinery") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 43;
    tc.epochs = 1;
    tc.meta_batch_tasks = 4;
    DatasetSplit split = small_split(8, 61);
    fs::path dir = fs::temp_directory_path() / "hmseg_ablate_smoke";
    fs::remove_all(dir);

    SUBCASE("mdrop never constructs a discriminator and logs no alpha") {
        ModelBundle mb = ModelBundle::make(cfg, Variant::MDrop, tc.weights);
        CHECK(mb.down_layout.index_of("dis.fc0.w") == -1);
        CHECK(mb.weights.lambda2 == 0.0);

        TrainResult r = ablate_variant(cfg, tc, Variant::MDrop, split, dir / "mdrop");
        std::string metrics = slurp(r.metrics_path);
        // every data row ends with an empty alpha cell
        std::istringstream is(metrics);
        std::string line;
        std::getline(is, line);  // header
        int rows = 0;
        while (std::getline(is, line)) {
            CHECK(line.back() == ',');
            ++rows;
        }
        CHECK(rows > 0);
        Checkpoint ckpt = load_checkpoint(r.checkpoint_path);
        CHECK(!ckpt.alpha.has_value());
        for (const auto& [name, t] : ckpt.arrays) CHECK(name.find("dis.") == std::string::npos);
    }
    SUBCASE("metal logs alpha updates; gan does not") {
        TrainResult rm = ablate_variant(cfg, tc, Variant::MetaL, split, dir / "metal");
        Checkpoint cm = load_checkpoint(rm.checkpoint_path);
        CHECK(cm.alpha.has_value());
        ModelBundle mb_metal = ModelBundle::make(cfg, Variant::MetaL, tc.weights);
        CHECK(mb_metal.down_layout.index_of("dis.fc0.w") == -1);

        TrainResult rg = ablate_variant(cfg, tc, Variant::Gan, split, dir / "gan");
        Checkpoint cg = load_checkpoint(rg.checkpoint_path);
        CHECK(!cg.alpha.has_value());
        bool has_disc = false;
        for (const auto& [name, t] : cg.arrays)
            has_disc = has_disc || name.find("dis.fc0.w") != std::string::npos;
        CHECK(has_disc);
    }
    fs::remove_all(dir);
}

TEST_CASE("checkpoint params round-trip through the archive") {
    ModelConfig cfg = small_model();
    TrainConfig tc;
    tc.seed = 47;
    ModelBundle mb = ModelBundle::make(cfg, Variant::Full, tc.weights);
    MetaParams p = init_meta_params(mb, tc);
    p.log_alpha = std::log(0.037);

    fs::path dir = fs::temp_directory_path() / "hmseg_params_ckpt";
    fs::create_directories(dir);
    save_checkpoint(dir / "p.hmc", make_checkpoint(mb, p, 9));
    MetaParams r = params_from_checkpoint(mb, load_checkpoint(dir / "p.hmc"));
    CHECK(r.theta_g == p.theta_g);
    CHECK(r.phi_d == p.phi_d);
    CHECK(r.alpha() == doctest::Approx(p.alpha()).epsilon(1e-15));

    SUBCASE("config mismatch rejected") {
        ModelConfig other = cfg;
        other.channels = {3, 4};
        ModelBundle mb2 = ModelBundle::make(other, Variant::Full, tc.weights);
        CHECK_THROWS_WITH_AS(params_from_checkpoint(mb2, load_checkpoint(dir / "p.hmc")),
                             doctest::Contains("mismatch"), Error);
    }
    fs::remove_all(dir);
}

TEST_CASE("first-order mode is reported as skipped by gradcheck") {
    GradCheckReport rep = run_gradcheck(3, /*first_order=*/true);
    CHECK(rep.skipped);
    CHECK(!rep.passed);
}
