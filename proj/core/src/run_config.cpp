#include "hmseg/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace hmseg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct Setter {
    RunConfig* rc;
    std::string section, key, value;

    [[noreturn]] void bad(const std::string& why) const {
        fail(ErrClass::config,
             "key '" + key + "' (section " + section + "): " + why + " (value '" + value + "')");
    }

    int to_int() const {
        try {
            size_t pos = 0;
            int v = std::stoi(value, &pos);
            if (pos != value.size()) bad("not an integer");
            return v;
        } catch (const std::exception&) {
            bad("not an integer");
        }
    }
    double to_double() const {
        try {
            size_t pos = 0;
            double v = std::stod(value, &pos);
            if (pos != value.size()) bad("not a number");
            return v;
        } catch (const std::exception&) {
            bad("not a number");
        }
    }
    uint64_t to_u64() const {
        try {
            size_t pos = 0;
            uint64_t v = std::stoull(value, &pos);
            if (pos != value.size()) bad("not a nonnegative integer");
            return v;
        } catch (const std::exception&) {
            bad("not a nonnegative integer");
        }
    }
    bool to_bool() const {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        bad("not a boolean");
    }
    std::vector<int> to_int_list() const {
        std::istringstream is(value);
        std::vector<int> out;
        int v;
        while (is >> v) out.push_back(v);
        if (!is.eof() || out.empty()) bad("not a space-separated integer list");
        return out;
    }
};

}  // namespace

void RunConfig::validate() const {
    require(patients >= 1, ErrClass::config, "patients must be >= 1");
    require(test_patients >= 0, ErrClass::config, "test_patients must be >= 0");
    for (int d : dims) require(d >= 8, ErrClass::config, "dims entries must be >= 8");
    require(modalities >= 2, ErrClass::config, "modalities must be >= 2");
    require(full_fraction > 0.0 && full_fraction <= 1.0, ErrClass::config,
            "full_fraction must be in (0,1]");
    require(modalities == model.modalities, ErrClass::config,
            "data.modalities must equal model.modalities");
    require(eval.threshold > 0.0 && eval.threshold < 1.0, ErrClass::config,
            "threshold must be in (0,1)");
    model.validate();
    train.validate();
    const int div = model.stride_divisor();
    for (int d : dims)
        require(d % div == 0, ErrClass::config,
                "dims must be divisible by the model stride " + std::to_string(div));
}

std::string RunConfig::serialize() const {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "[data]\n";
    os << "patients = " << patients << '\n';
    os << "test_patients = " << test_patients << '\n';
    os << "dims = " << dims[0] << ' ' << dims[1] << ' ' << dims[2] << '\n';
    os << "modalities = " << modalities << '\n';
    os << "full_fraction = " << num(full_fraction) << '\n';
    os << "\n[model]\n";
    os << "levels = " << model.levels << '\n';
    os << "channels =";
    for (int c : model.channels) os << ' ' << c;
    os << '\n';
    os << "bottleneck_channels = " << model.bottleneck_channels << '\n';
    os << "kernel = " << model.kernel << '\n';
    os << "convs_per_level = " << model.convs_per_level << '\n';
    os << "disc_hidden_mult = " << model.disc_hidden_mult << '\n';
    os << "activation = " << activation_name(model.act) << '\n';
    os << "norm = " << (model.norm ? "true" : "false") << '\n';
    os << "\n[train]\n";
    os << "variant = " << variant_name(train.variant) << '\n';
    os << "outer_lr = " << num(train.outer_lr) << '\n';
    os << "weight_decay = " << num(train.weight_decay) << '\n';
    os << "meta_batch_tasks = " << train.meta_batch_tasks << '\n';
    os << "per_task_batch = " << train.per_task_batch << '\n';
    os << "inner_steps = " << train.inner_steps << '\n';
    os << "epochs = " << train.epochs << '\n';
    os << "lambda1 = " << num(train.weights.lambda1) << '\n';
    os << "lambda2 = " << num(train.weights.lambda2) << '\n';
    os << "disc_scale = " << num(train.weights.disc_scale) << '\n';
    os << "alpha_init = " << num(train.alpha_init) << '\n';
    os << "first_order = " << (train.first_order ? "true" : "false") << '\n';
    os << "optimizer = " << train.optimizer << '\n';
    os << "precision = " << train.precision << '\n';
    os << "augment = " << (train.augment ? "true" : "false") << '\n';
    os << "log_every = " << train.log_every << '\n';
    os << "checkpoint_every = " << train.checkpoint_every << '\n';
    os << "resume = " << train.resume.string() << '\n';
    os << "\n[eval]\n";
    os << "threshold = " << num(eval.threshold) << '\n';
    os << "hd95 = " << (eval.with_hd95 ? "true" : "false") << '\n';
    os << "spacing = " << num(eval.spacing[0]) << ' ' << num(eval.spacing[1]) << ' '
       << num(eval.spacing[2]) << '\n';
    os << "\n[run]\n";
    os << "seed = " << seed << '\n';
    os << "out_dir = " << out_dir.string() << '\n';
    return os.str();
}

RunConfig RunConfig::parse_string(const std::string& text) {
    RunConfig rc;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            require(line.back() == ']', ErrClass::config,
                    "malformed section header at line " + std::to_string(lineno));
            section = line.substr(1, line.size() - 2);
            require(section == "data" || section == "model" || section == "train" ||
                        section == "eval" || section == "run",
                    ErrClass::config, "unknown section '" + section + "'");
            continue;
        }
        auto eq = line.find('=');
        require(eq != std::string::npos, ErrClass::config,
                "expected key = value at line " + std::to_string(lineno));
        Setter s{&rc, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
        require(!section.empty(), ErrClass::config,
                "key '" + s.key + "' appears before any section");

        if (section == "data") {
            if (s.key == "patients")
                rc.patients = s.to_int();
            else if (s.key == "test_patients")
                rc.test_patients = s.to_int();
            else if (s.key == "dims") {
                auto v = s.to_int_list();
                require(v.size() == 3, ErrClass::config, "dims needs 3 integers");
                rc.dims = {v[0], v[1], v[2]};
            } else if (s.key == "modalities")
                rc.modalities = s.to_int();
            else if (s.key == "full_fraction")
                rc.full_fraction = s.to_double();
            else
                fail(ErrClass::config, "unknown key '" + s.key + "' (section data)");
        } else if (section == "model") {
            if (s.key == "levels")
                rc.model.levels = s.to_int();
            else if (s.key == "channels")
                rc.model.channels = s.to_int_list();
            else if (s.key == "bottleneck_channels")
                rc.model.bottleneck_channels = s.to_int();
            else if (s.key == "kernel")
                rc.model.kernel = s.to_int();
            else if (s.key == "convs_per_level")
                rc.model.convs_per_level = s.to_int();
            else if (s.key == "disc_hidden_mult")
                rc.model.disc_hidden_mult = s.to_int();
            else if (s.key == "activation")
                rc.model.act = parse_activation(s.value);
            else if (s.key == "norm")
                rc.model.norm = s.to_bool();
            else
                fail(ErrClass::config, "unknown key '" + s.key + "' (section model)");
        } else if (section == "train") {
            if (s.key == "variant")
                rc.train.variant = parse_variant(s.value);
            else if (s.key == "outer_lr")
                rc.train.outer_lr = s.to_double();
            else if (s.key == "weight_decay")
                rc.train.weight_decay = s.to_double();
            else if (s.key == "meta_batch_tasks")
                rc.train.meta_batch_tasks = s.to_int();
            else if (s.key == "per_task_batch")
                rc.train.per_task_batch = s.to_int();
            else if (s.key == "inner_steps")
                rc.train.inner_steps = s.to_int();
            else if (s.key == "epochs")
                rc.train.epochs = s.to_int();
            else if (s.key == "lambda1")
                rc.train.weights.lambda1 = s.to_double();
            else if (s.key == "lambda2")
                rc.train.weights.lambda2 = s.to_double();
            else if (s.key == "disc_scale")
                rc.train.weights.disc_scale = s.to_double();
            else if (s.key == "alpha_init")
                rc.train.alpha_init = s.to_double();
            else if (s.key == "first_order")
                rc.train.first_order = s.to_bool();
            else if (s.key == "optimizer")
                rc.train.optimizer = s.value;
            else if (s.key == "precision")
                rc.train.precision = s.value;
            else if (s.key == "augment")
                rc.train.augment = s.to_bool();
            else if (s.key == "log_every")
                rc.train.log_every = s.to_int();
            else if (s.key == "checkpoint_every")
                rc.train.checkpoint_every = s.to_int();
            else if (s.key == "resume")
                rc.train.resume = s.value;
            else
                fail(ErrClass::config, "unknown key '" + s.key + "' (section train)");
        } else if (section == "eval") {
            if (s.key == "threshold")
                rc.eval.threshold = s.to_double();
            else if (s.key == "hd95")
                rc.eval.with_hd95 = s.to_bool();
            else if (s.key == "spacing") {
                std::istringstream sp(s.value);
                if (!(sp >> rc.eval.spacing[0] >> rc.eval.spacing[1] >> rc.eval.spacing[2]))
                    s.bad("spacing needs 3 numbers");
            } else
                fail(ErrClass::config, "unknown key '" + s.key + "' (section eval)");
        } else {  // run
            if (s.key == "seed")
                rc.seed = s.to_u64();
            else if (s.key == "out_dir")
                rc.out_dir = s.value;
            else
                fail(ErrClass::config, "unknown key '" + s.key + "' (section run)");
        }
    }
    rc.train.seed = rc.seed;
    rc.validate();
    return rc;
}

RunConfig RunConfig::parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), ErrClass::io, "cannot open config: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str());
}

}  // namespace hmseg
