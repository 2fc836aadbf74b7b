#include "hmseg/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmseg/evalsuite.hpp"
#include "hmseg/metaengine.hpp"
#include "hmseg/run_config.hpp"
#include "hmseg/synthvol.hpp"
#include "hmseg/volume_io.hpp"

namespace hmseg::cli {

namespace fs = std::filesystem;

namespace {

// Guards an output directory against concurrent writers for the lifetime of
// one command.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".hmseg.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        require(fd_ >= 0, ErrClass::io,
                "output directory locked by another run (remove " + path_.string() +
                    " if stale)");
        std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

void write_resolved_config(const RunConfig& rc, const fs::path& out_dir) {
    std::ofstream f(out_dir / "config.resolved");
    require(f.good(), ErrClass::io, "cannot write resolved config");
    f << rc.serialize();
}

struct Dataset {
    DatasetSplit split;                // training cohorts
    std::vector<PatientSample> test;   // held-out full-modality patients
};

uint64_t patient_seed(uint64_t run_seed, int index) {
    return run_seed * 100003ull + static_cast<uint64_t>(index);
}

Dataset generate_dataset(const RunConfig& rc) {
    std::vector<PatientSample> train_pool;
    for (int i = 0; i < rc.patients; ++i)
        train_pool.push_back(generate_patient(patient_seed(rc.seed, i), rc.dims, rc.modalities));
    Dataset ds;
    ds.split = partition_dataset(train_pool, rc.full_fraction, rc.seed);
    for (int i = 0; i < rc.test_patients; ++i)
        ds.test.push_back(
            generate_patient(patient_seed(rc.seed, rc.patients + i), rc.dims, rc.modalities));
    return ds;
}

void write_dataset(const Dataset& ds, const RunConfig& rc, const fs::path& dir) {
    fs::create_directories(dir / "patients");
    nlohmann::ordered_json manifest;
    manifest["format"] = "hmseg-dataset/1";
    manifest["seed"] = rc.seed;
    manifest["dims"] = {rc.dims[0], rc.dims[1], rc.dims[2]};
    manifest["modalities"] = rc.modalities;
    manifest["full_fraction"] = rc.full_fraction;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    auto emit = [&](const PatientSample& s, const char* cohort, const char* role) {
        const std::string file = "patients/" + s.id + ".hmv";
        write_volume(dir / file, s);
        nlohmann::ordered_json row;
        row["id"] = s.id;
        row["file"] = file;
        row["availability"] = s.availability.to_string();
        row["cohort"] = cohort;
        row["role"] = role;
        rows.push_back(row);
    };
    for (const PatientSample& s : ds.split.d_full) emit(s, "full", "train");
    for (const PatientSample& s : ds.split.d_miss) emit(s, "miss", "train");
    for (const PatientSample& s : ds.test) emit(s, "full", "test");
    manifest["patients"] = rows;

    std::ofstream f(dir / "manifest.json");
    require(f.good(), ErrClass::io, "cannot write manifest");
    f << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir, double full_fraction_hint) {
    Dataset ds;
    const fs::path manifest_path = dir / "manifest.json";
    if (fs::exists(manifest_path)) {
        std::ifstream f(manifest_path);
        require(f.good(), ErrClass::io, "cannot open " + manifest_path.string());
        nlohmann::json manifest;
        try {
            f >> manifest;
        } catch (const std::exception& e) {
            fail(ErrClass::format, "bad manifest json: " + std::string(e.what()));
        }
        require(manifest.value("format", "") == "hmseg-dataset/1", ErrClass::format,
                "unknown dataset manifest format");
        ds.split.full_fraction = manifest.value("full_fraction", full_fraction_hint);
        for (const auto& row : manifest.at("patients")) {
            PatientSample s = read_volume(dir / row.at("file").get<std::string>());
            const std::string role = row.at("role"), cohort = row.at("cohort");
            if (role == "test")
                ds.test.push_back(std::move(s));
            else if (cohort == "full")
                ds.split.d_full.push_back(std::move(s));
            else
                ds.split.d_miss.push_back(std::move(s));
        }
        return ds;
    }
    // Bare directory of .hmv files: all become full-modality test patients.
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".hmv") files.push_back(entry.path());
    require(!files.empty(), ErrClass::io, "no manifest.json or .hmv files in " + dir.string());
    std::sort(files.begin(), files.end());
    for (const fs::path& p : files) ds.test.push_back(read_volume(p));
    return ds;
}

int cmd_gen_data(const RunConfig& rc, const fs::path& out_dir) {
    DirLock lock(out_dir);
    write_resolved_config(rc, out_dir);
    Dataset ds = generate_dataset(rc);
    write_dataset(ds, rc, out_dir);
    std::cout << "gen-data: " << ds.split.d_full.size() << " full + " << ds.split.d_miss.size()
              << " partial train patients, " << ds.test.size() << " test patients -> "
              << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const RunConfig& rc, const std::optional<fs::path>& data_dir,
              const fs::path& out_dir) {
    DirLock lock(out_dir);
    write_resolved_config(rc, out_dir);
    Dataset ds =
        data_dir ? load_dataset(*data_dir, rc.full_fraction) : generate_dataset(rc);
    TrainResult res = train(rc.model, rc.train, ds.split, out_dir);
    std::cout << "train: " << variant_name(rc.train.variant) << " finished at step " << res.steps
              << ", checkpoint " << res.checkpoint_path.string() << "\n";
    return 0;
}

ModelConfig parse_model_summary(const std::string& summary);

int cmd_eval(const fs::path& ckpt_path, const fs::path& data_dir, const fs::path& out_dir,
             EvalOptions opts, const std::vector<int>& regions, uint64_t seed) {
    DirLock lock(out_dir);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    ModelConfig cfg = parse_model_summary(ckpt.config_summary);
    bool has_disc = false;
    for (const auto& [name, t] : ckpt.arrays)
        if (name.rfind("phi_d/dis.", 0) == 0) has_disc = true;
    ModelBundle bundle =
        ModelBundle::make(cfg, has_disc ? Variant::Full : Variant::MetaL, LossWeights{});
    MetaParams params = params_from_checkpoint(bundle, ckpt);

    Dataset ds = load_dataset(data_dir, 1.0);
    require(!ds.test.empty(), ErrClass::precondition, "dataset has no test patients");

    CombinationReport rep =
        evaluate_combinations(bundle.model, bundle.gen_layout, bundle.down_layout,
                              params.theta_g, params.phi_d, ds.test, opts,
                              ckpt_path.filename().string(), seed);
    write_report_csv(out_dir / "report.csv", rep, regions);
    write_report_json(out_dir / "report.json", rep);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", rep.mean_dsc);
    std::cout << "eval: " << rep.rows.size() << " combinations x " << ds.test.size()
              << " patients, mean DSC " << buf << " -> " << out_dir.string() << "\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed, bool first_order) {
    GradCheckReport rep = run_gradcheck(seed, first_order);
    if (rep.skipped) {
        std::cout << "gradcheck: SKIPPED (" << rep.detail << ")\n";
        return 0;
    }
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3e", rep.max_rel_err);
    std::cout << "gradcheck: " << (rep.passed ? "PASS" : "FAIL") << " max_rel_err=" << buf
              << " tol=" << rep.tol << " params=" << rep.params_checked << " (" << rep.detail
              << ")\n";
    return rep.passed ? 0 : 1;
}

// Parses the canonical summary emitted by ModelConfig::summary().
ModelConfig parse_model_summary(const std::string& summary) {
    ModelConfig cfg;
    std::istringstream is(summary);
    std::string field;
    bool saw_any = false;
    while (std::getline(is, field, ';')) {
        auto eq = field.find('=');
        require(eq != std::string::npos, ErrClass::format,
                "bad model summary field '" + field + "'");
        const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
        saw_any = true;
        if (key == "m")
            cfg.modalities = std::stoi(val);
        else if (key == "l")
            cfg.levels = std::stoi(val);
        else if (key == "ch") {
            cfg.channels.clear();
            std::istringstream cs(val);
            std::string tok;
            while (std::getline(cs, tok, ',')) cfg.channels.push_back(std::stoi(tok));
        } else if (key == "cb")
            cfg.bottleneck_channels = std::stoi(val);
        else if (key == "k")
            cfg.kernel = std::stoi(val);
        else if (key == "cpl")
            cfg.convs_per_level = std::stoi(val);
        else if (key == "dh")
            cfg.disc_hidden_mult = std::stoi(val);
        else if (key == "act")
            cfg.act = parse_activation(val);
        else if (key == "in")
            cfg.norm = val == "1";
        else
            fail(ErrClass::format, "unknown model summary key '" + key + "'");
    }
    require(saw_any, ErrClass::format, "empty model summary");
    cfg.validate();
    return cfg;
}

std::vector<int> parse_regions(const std::string& arg) {
    std::vector<int> out;
    std::istringstream is(arg);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (tok == "WT")
            out.push_back(kWT);
        else if (tok == "TC")
            out.push_back(kTC);
        else if (tok == "ET")
            out.push_back(kET);
        else
            fail(ErrClass::usage, "unknown region '" + tok + "' (expected WT, TC, ET)");
    }
    require(!out.empty(), ErrClass::usage, "empty --regions list");
    return out;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"hetero-modal volumetric segmentation workbench"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, variant_str, checkpoint_path, regions_str;
    std::string resume_path;
    uint64_t seed = 0;
    bool seed_set = false, first_order = false, no_hd95 = false;
    double threshold = -1.0;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
            seed_set = true;
        });
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic .hmv dataset");
    gen->add_option("--config", config_path, "run config file")->required();
    gen->add_option("--out", out_dir, "output directory (default from config)");
    add_seed(gen);

    CLI::App* tr = app.add_subcommand("train", "run meta-training");
    tr->add_option("--config", config_path, "run config file")->required();
    tr->add_option("--data", data_dir, "dataset directory from gen-data");
    tr->add_option("--out", out_dir, "output directory (default from config)");
    tr->add_option("--resume", resume_path, "checkpoint to continue from");
    add_seed(tr);

    CLI::App* ab = app.add_subcommand("ablate", "train one ablation variant");
    ab->add_option("--config", config_path, "run config file")->required();
    ab->add_option("--variant", variant_str, "mdrop | gan | metal | full")->required();
    ab->add_option("--data", data_dir, "dataset directory from gen-data");
    ab->add_option("--out", out_dir, "output directory (default from config)");
    add_seed(ab);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint over all modality subsets");
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    ev->add_option("--data", data_dir, "dataset directory or directory of .hmv files")
        ->required();
    ev->add_option("--out", out_dir, "output directory (default: eval_out)");
    ev->add_option("--threshold", threshold, "binarization threshold (default 0.5)");
    ev->add_option("--regions", regions_str, "comma-separated region filter, e.g. WT,TC");
    ev->add_flag("--no-hd95", no_hd95, "skip HD95 computation");
    add_seed(ev);

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of meta-gradients");
    gc->add_option("--config", config_path, "run config file (optional)");
    gc->add_flag("--first-order", first_order, "report the first-order mode as skipped");
    add_seed(gc);

    std::vector<char*> argv;
    std::string prog = "hmseg";
    argv.push_back(prog.data());
    std::vector<std::string> args_copy = args;
    for (std::string& a : args_copy) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 1;
    }

    try {
        if (gen->parsed() || tr->parsed() || ab->parsed()) {
            RunConfig rc = RunConfig::parse_file(config_path);
            if (seed_set) {
                rc.seed = seed;
                rc.train.seed = seed;
            }
            if (!resume_path.empty()) rc.train.resume = resume_path;
            fs::path out = out_dir.empty() ? rc.out_dir : fs::path(out_dir);
            std::optional<fs::path> data =
                data_dir.empty() ? std::nullopt : std::optional<fs::path>(data_dir);
            if (gen->parsed()) return cmd_gen_data(rc, out);
            if (ab->parsed()) rc.train.variant = parse_variant(variant_str);
            return cmd_train(rc, data, out);
        }
        if (ev->parsed()) {
            EvalOptions opts;
            if (threshold > 0.0) opts.threshold = threshold;
            opts.with_hd95 = !no_hd95;
            std::vector<int> regions;
            if (!regions_str.empty()) regions = parse_regions(regions_str);
            fs::path out = out_dir.empty() ? fs::path("eval_out") : fs::path(out_dir);
            return cmd_eval(checkpoint_path, data_dir, out, opts, regions,
                            seed_set ? seed : 0);
        }
        if (gc->parsed()) {
            uint64_t s = seed_set ? seed : 7;
            bool fo = first_order;
            if (!config_path.empty()) {
                RunConfig rc = RunConfig::parse_file(config_path);
                if (!seed_set) s = rc.seed;
                fo = fo || rc.train.first_order;
            }
            return cmd_gradcheck(s, fo);
        }
    } catch (const Error& e) {
        std::cerr << e.cli_line() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace hmseg::cli
