#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "stmt/cli.hpp"
#include "stmt/rng.hpp"

namespace stmt {

namespace {

enum class Kind { Int, U64, Real, Bool, Shape, Triple };

struct KeySpec {
    std::string key;
    Kind kind;
    std::string def;
};

const char* task_name(Task t) {
    switch (t) {
        case Task::Stage1: return "stage1";
        case Task::Organ: return "organ";
        case Task::Tumor: return "tumor";
    }
    return "?";
}

std::vector<KeySpec> build_schema() {
    std::vector<KeySpec> s{
        {"seed", Kind::U64, "0"},
        {"workers", Kind::Int, "1"},
        {"phantom.volume_shape", Kind::Shape, "64,64,64"},
        {"phantom.spacing", Kind::Triple, "1,1,1"},
        {"phantom.num_organs", Kind::Int, "13"},
        {"phantom.tumor_rate", Kind::Real, "0.5"},
        {"phantom.tumor_annotation_rate", Kind::Real, "0.68"},
        {"phantom.missed_tumor_rate", Kind::Real, "0.3"},
        {"phantom.max_tumors", Kind::Int, "3"},
        {"phantom.tumor_radius_lo", Kind::Real, "0.35"},
        {"phantom.tumor_radius_hi", Kind::Real, "0.6"},
        {"phantom.min_tumor_radius_vox", Kind::Real, "1.5"},
        {"phantom.n_full", Kind::Int, "22"},
        {"phantom.n_partial", Kind::Int, "109"},
        {"phantom.n_unlabeled", Kind::Int, "89"},
        {"phantom.noise_sigma", Kind::Real, "10"},
        {"phantom.position_jitter", Kind::Real, "0.05"},
        {"phantom.size_jitter", Kind::Real, "0.15"},
        {"phantom.organ_scale", Kind::Real, "1"},
        {"phantom.n_test", Kind::Int, "20"},
        {"phantom.test_tumor_rate", Kind::Real, "1"},
        {"pipeline.margin_fraction", Kind::Real, "0.1"},
        {"pipeline.connectivity", Kind::Int, "26"},
        {"pipeline.postprocess", Kind::Bool, "true"},
        {"pipeline.concurrent_stage2", Kind::Bool, "false"},
        {"eval.nsd_tolerance_mm", Kind::Real, "1"},
        {"eval.runtime_tolerance_s", Kind::Real, "15"},
        {"eval.memory_tolerance_mb", Kind::Real, "4096"},
        {"eval.sample_interval_s", Kind::Real, "0.1"},
        {"ablate.seeds", Kind::Int, "5"},
        {"train.organ.lambda1", Kind::Real, "1"},
        {"train.organ.lambda2", Kind::Real, "0.5"},
        {"train.tumor.lambda", Kind::Real, "1"},
        {"train.tumor.ema_decay", Kind::Real, "0.99"},
        {"train.tumor.mt_student_noise", Kind::Real, "0"},
        {"train.tumor.mt_warm_start", Kind::Bool, "true"},
    };
    for (Task t : {Task::Stage1, Task::Organ, Task::Tumor}) {
        const std::string n = std::string("net.") + task_name(t) + ".";
        s.push_back({n + "base_channels", Kind::Int, "16"});
        s.push_back({n + "num_scales", Kind::Int, "5"});
        s.push_back({n + "blocks_per_scale", Kind::Int, "1"});
        s.push_back({n + "max_channels", Kind::Int, "320"});
        const std::string p = std::string("train.") + task_name(t) + ".";
        s.push_back({p + "epochs", Kind::Int, "500"});
        s.push_back({p + "iters_per_epoch", Kind::Int, "250"});
        s.push_back({p + "batch_size", Kind::Int, t == Task::Organ ? "3" : "2"});
        s.push_back({p + "input_shape", Kind::Shape, t == Task::Stage1 ? "128,128,128" : "192,192,192"});
        s.push_back({p + "lr0", Kind::Real, "0.01"});
        s.push_back({p + "momentum", Kind::Real, "0.99"});
        s.push_back({p + "nesterov", Kind::Bool, "true"});
        s.push_back({p + "weight_decay", Kind::Real, "3e-05"});
        s.push_back({p + "grad_clip_norm", Kind::Real, "12"});
        s.push_back({p + "augment_strength", Kind::Real, "1"});
    }
    return s;
}

const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> s = build_schema();
    return s;
}

const KeySpec* find_key(const std::string& key) {
    for (const auto& k : schema()) {
        if (k.key == key) {
            return &k;
        }
    }
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
    const std::string t = trim(s);
    if (t.empty()) {
        return false;
    }
    const char* first = t.data();
    if (t[0] == '+') {
        ++first;
    }
    auto [p, ec] = std::from_chars(first, t.data() + t.size(), out);
    return ec == std::errc() && p == t.data() + t.size();
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(trim(item));
    }
    return out;
}

std::string canonical(const KeySpec& k, const std::string& raw) {
    const std::string v = trim(raw);
    auto bad = [&]() -> std::string {
        throw ConfigError("config key '" + k.key + "': cannot parse value '" + v + "'");
    };
    switch (k.kind) {
        case Kind::Int: {
            long long x = 0;
            if (!parse_number(v, x) || x < INT32_MIN || x > INT32_MAX) {
                return bad();
            }
            return std::to_string(x);
        }
        case Kind::U64: {
            std::uint64_t x = 0;
            if (!parse_number(v, x)) {
                return bad();
            }
            return std::to_string(x);
        }
        case Kind::Real: {
            double x = 0;
            if (!parse_number(v, x) || !std::isfinite(x)) {
                return bad();
            }
            return shortest(x);
        }
        case Kind::Bool: {
            std::string l = v;
            std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
            if (l == "true" || l == "1" || l == "yes" || l == "on") {
                return "true";
            }
            if (l == "false" || l == "0" || l == "no" || l == "off") {
                return "false";
            }
            return bad();
        }
        case Kind::Shape: {
            auto parts = split_list(v);
            if (parts.size() == 1) {
                parts = {parts[0], parts[0], parts[0]};
            }
            if (parts.size() != 3) {
                return bad();
            }
            std::string out;
            for (std::size_t i = 0; i < 3; ++i) {
                int x = 0;
                if (!parse_number(parts[i], x)) {
                    return bad();
                }
                out += (i ? "," : "") + std::to_string(x);
            }
            return out;
        }
        case Kind::Triple: {
            auto parts = split_list(v);
            if (parts.size() == 1) {
                parts = {parts[0], parts[0], parts[0]};
            }
            if (parts.size() != 3) {
                return bad();
            }
            std::string out;
            for (std::size_t i = 0; i < 3; ++i) {
                double x = 0;
                if (!parse_number(parts[i], x) || !std::isfinite(x)) {
                    return bad();
                }
                out += (i ? "," : "") + shortest(x);
            }
            return out;
        }
    }
    return bad();
}

}  // namespace

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RunConfig::RunConfig() {
    for (const auto& k : schema()) {
        values_[k.key] = canonical(k, k.def);
    }
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& origin) {
    const KeySpec* k = find_key(key);
    if (k == nullptr) {
        throw ConfigError("unknown config key '" + key + "' (from " + origin + ")");
    }
    values_[key] = canonical(*k, value);
    provenance_.push_back(origin + ": " + key + " = " + values_[key]);
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown config key '" + key + "'");
    }
    return it->second;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        set(trim(line.substr(0, eq)), line.substr(eq + 1), origin + ":" + std::to_string(lineno));
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    merge_text(ss.str(), path.string());
}

void RunConfig::merge_env(char** envp) {
    if (envp == nullptr) {
        return;
    }
    static const std::string prefix = "STMT__";
    for (char** e = envp; *e != nullptr; ++e) {
        const std::string entry = *e;
        if (entry.rfind(prefix, 0) != 0) {
            continue;
        }
        const auto eq = entry.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        std::string name = entry.substr(prefix.size(), eq - prefix.size());
        std::string key;
        for (std::size_t i = 0; i < name.size(); ++i) {
            if (name[i] == '_' && i + 1 < name.size() && name[i + 1] == '_') {
                key += '.';
                ++i;
            } else {
                key += static_cast<char>(std::tolower(static_cast<unsigned char>(name[i])));
            }
        }
        set(key, entry.substr(eq + 1), "env " + entry.substr(0, eq));
    }
}

namespace {

int as_int(const RunConfig& c, const std::string& k) { return std::stoi(c.get(k)); }
double as_real(const RunConfig& c, const std::string& k) { return std::stod(c.get(k)); }
bool as_bool(const RunConfig& c, const std::string& k) { return c.get(k) == "true"; }
Shape3 as_shape(const RunConfig& c, const std::string& k) {
    const auto p = split_list(c.get(k));
    return {std::stoi(p[0]), std::stoi(p[1]), std::stoi(p[2])};
}

}  // namespace

std::uint64_t RunConfig::seed() const { return std::stoull(get("seed")); }

int RunConfig::workers() const { return as_int(*this, "workers"); }

PhantomConfig RunConfig::phantom() const {
    PhantomConfig p;
    p.volume_shape = as_shape(*this, "phantom.volume_shape");
    const auto sp = split_list(get("phantom.spacing"));
    p.spacing = {std::stod(sp[0]), std::stod(sp[1]), std::stod(sp[2])};
    p.num_organs = as_int(*this, "phantom.num_organs");
    p.tumor_rate = as_real(*this, "phantom.tumor_rate");
    p.tumor_annotation_rate = as_real(*this, "phantom.tumor_annotation_rate");
    p.missed_tumor_rate = as_real(*this, "phantom.missed_tumor_rate");
    p.max_tumors = as_int(*this, "phantom.max_tumors");
    p.tumor_radius_lo = as_real(*this, "phantom.tumor_radius_lo");
    p.tumor_radius_hi = as_real(*this, "phantom.tumor_radius_hi");
    p.min_tumor_radius_vox = as_real(*this, "phantom.min_tumor_radius_vox");
    p.n_full = as_int(*this, "phantom.n_full");
    p.n_partial = as_int(*this, "phantom.n_partial");
    p.n_unlabeled = as_int(*this, "phantom.n_unlabeled");
    p.noise_sigma = as_real(*this, "phantom.noise_sigma");
    p.position_jitter = as_real(*this, "phantom.position_jitter");
    p.size_jitter = as_real(*this, "phantom.size_jitter");
    p.organ_scale = as_real(*this, "phantom.organ_scale");
    p.seed = mix_seed(seed(), 101);
    return p;
}

PhantomConfig RunConfig::test_phantom() const {
    PhantomConfig p = phantom();
    p.n_full = as_int(*this, "phantom.n_test");
    p.n_partial = 0;
    p.n_unlabeled = 0;
    p.tumor_rate = as_real(*this, "phantom.test_tumor_rate");
    p.seed = mix_seed(seed(), 202);
    return p;
}

NetSpec RunConfig::net(Task t) const {
    const std::string n = std::string("net.") + task_name(t) + ".";
    NetSpec s;
    s.in_channels = 1;
    s.num_classes = t == Task::Organ ? as_int(*this, "phantom.num_organs") + 1 : 2;
    s.base_channels = as_int(*this, n + "base_channels");
    s.num_scales = as_int(*this, n + "num_scales");
    s.blocks_per_scale = as_int(*this, n + "blocks_per_scale");
    s.max_channels = as_int(*this, n + "max_channels");
    return s;
}

TrainConfig RunConfig::train(Task t) const {
    const std::string p = std::string("train.") + task_name(t) + ".";
    TrainConfig c;
    c.epochs = as_int(*this, p + "epochs");
    c.iters_per_epoch = as_int(*this, p + "iters_per_epoch");
    c.batch_size = as_int(*this, p + "batch_size");
    c.input_shape = as_shape(*this, p + "input_shape");
    c.lr0 = as_real(*this, p + "lr0");
    c.momentum = as_real(*this, p + "momentum");
    c.nesterov = as_bool(*this, p + "nesterov");
    c.weight_decay = as_real(*this, p + "weight_decay");
    c.grad_clip_norm = as_real(*this, p + "grad_clip_norm");
    c.augment_strength = as_real(*this, p + "augment_strength");
    c.lambda1 = as_real(*this, "train.organ.lambda1");
    c.lambda2 = as_real(*this, "train.organ.lambda2");
    c.lambda_tumor = as_real(*this, "train.tumor.lambda");
    c.ema_decay = as_real(*this, "train.tumor.ema_decay");
    c.mt_student_noise = as_real(*this, "train.tumor.mt_student_noise");
    c.workers = workers();
    c.seed = mix_seed(seed(), 300 + static_cast<std::uint64_t>(t));
    return c;
}

bool RunConfig::mt_warm_start() const { return as_bool(*this, "train.tumor.mt_warm_start"); }

PipelineOptions RunConfig::pipeline() const {
    PipelineOptions o;
    o.margin_fraction = as_real(*this, "pipeline.margin_fraction");
    o.connectivity = connectivity_from_int(as_int(*this, "pipeline.connectivity"));
    o.postprocess = as_bool(*this, "pipeline.postprocess");
    o.concurrent_stage2 = as_bool(*this, "pipeline.concurrent_stage2");
    return o;
}

EvalOptions RunConfig::eval() const {
    EvalOptions e;
    e.nsd_tolerance_mm = as_real(*this, "eval.nsd_tolerance_mm");
    e.runtime_tolerance_s = as_real(*this, "eval.runtime_tolerance_s");
    e.memory_tolerance_mb = as_real(*this, "eval.memory_tolerance_mb");
    e.sample_interval_s = as_real(*this, "eval.sample_interval_s");
    return e;
}

int RunConfig::ablate_seeds() const { return as_int(*this, "ablate.seeds"); }

void RunConfig::validate() const {
    if (workers() < 1) {
        throw ConfigError("workers must be >= 1");
    }
    phantom().validate();
    test_phantom().validate();
    if (as_int(*this, "phantom.n_test") < 1) {
        throw ConfigError("phantom.n_test must be >= 1");
    }
    for (Task t : {Task::Stage1, Task::Organ, Task::Tumor}) {
        try {
            net(t).validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(std::string("net.") + task_name(t) + ": " + e.what());
        }
        train(t).validate(t == Task::Organ);
    }
    try {
        (void)pipeline();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("pipeline.connectivity: ") + e.what());
    }
    if (!(pipeline().margin_fraction >= 0.0)) {
        throw ConfigError("pipeline.margin_fraction must be >= 0");
    }
    const EvalOptions e = eval();
    if (!(e.nsd_tolerance_mm > 0.0) || !(e.sample_interval_s > 0.0) || !(e.runtime_tolerance_s > 0.0) ||
        !(e.memory_tolerance_mb > 0.0)) {
        throw ConfigError("eval tolerances and sample interval must be > 0");
    }
    if (ablate_seeds() < 1) {
        throw ConfigError("ablate.seeds must be >= 1");
    }
}

std::string RunConfig::echo() const {
    std::string out;
    for (const auto& [k, v] : values_) {
        out += k + " = " + v + "\n";
    }
    return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a(echo()); }

RunConfig RunConfig::with_seed(std::uint64_t s) const {
    RunConfig c = *this;
    c.set("seed", std::to_string(s), "derived");
    return c;
}

std::filesystem::path find_profile(const std::string& name_or_path) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(name_or_path)) {
        return name_or_path;
    }
    std::vector<fs::path> roots;
    std::error_code ec;
    const fs::path exe = fs::read_symlink("/proc/self/exe", ec);
    if (!ec) {
        roots.push_back(exe.parent_path() / "profiles");
        roots.push_back(exe.parent_path().parent_path() / "profiles");
        roots.push_back(exe.parent_path().parent_path().parent_path() / "profiles");
    }
#ifdef STMT_SOURCE_DIR
    roots.emplace_back(fs::path(STMT_SOURCE_DIR) / "profiles");
#endif
    for (const auto& r : roots) {
        if (fs::is_regular_file(r / name_or_path)) {
            return r / name_or_path;
        }
    }
    throw ConfigError("profile not found: " + name_or_path);
}

}  // namespace stmt
