#include "stmt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "stmt/rng.hpp"

namespace stmt {

namespace {

using nlohmann::json;

struct Ellipsoid {
    std::array<double, 3> center{};
    std::array<double, 3> semi{};

    [[nodiscard]] bool contains(double z, double y, double x) const {
        const double dz = (z - center[0]) / semi[0];
        const double dy = (y - center[1]) / semi[1];
        const double dx = (x - center[2]) / semi[2];
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
    [[nodiscard]] double min_semi() const { return std::min({semi[0], semi[1], semi[2]}); }
};

// Canonical organ placement as fractions of the volume extent, in class-id order:
// liver, right kidney, spleen, pancreas, aorta, IVC, right adrenal, left adrenal,
// gallbladder, esophagus, stomach, duodenum, left kidney.
struct OrganTemplate {
    std::array<double, 3> center;
    std::array<double, 3> semi;
};

constexpr std::array<OrganTemplate, kNumOrganClasses> kLayout{{
    {{0.40, 0.45, 0.30}, {0.16, 0.18, 0.16}},
    {{0.62, 0.64, 0.28}, {0.12, 0.09, 0.08}},
    {{0.40, 0.60, 0.72}, {0.12, 0.10, 0.09}},
    {{0.62, 0.42, 0.58}, {0.07, 0.07, 0.14}},
    {{0.50, 0.70, 0.52}, {0.30, 0.05, 0.05}},
    {{0.50, 0.68, 0.42}, {0.28, 0.05, 0.04}},
    {{0.42, 0.66, 0.36}, {0.04, 0.04, 0.04}},
    {{0.42, 0.66, 0.64}, {0.04, 0.04, 0.04}},
    {{0.52, 0.36, 0.36}, {0.06, 0.05, 0.05}},
    {{0.18, 0.62, 0.50}, {0.12, 0.04, 0.04}},
    {{0.36, 0.38, 0.62}, {0.10, 0.10, 0.10}},
    {{0.64, 0.45, 0.44}, {0.06, 0.05, 0.05}},
    {{0.62, 0.64, 0.72}, {0.12, 0.09, 0.08}},
}};

std::string case_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%04d", index);
    return buf;
}

Supervision supervision_for_index(const PhantomConfig& cfg, int index) {
    if (index < cfg.n_full) {
        return Supervision::FullOrgan;
    }
    if (index < cfg.n_full + cfg.n_partial) {
        return Supervision::PartialOrgan;
    }
    return Supervision::Unlabeled;
}

// Uniform over the non-empty proper subsets of {1..n}.
ClassSet draw_partial_subset(int n, Rng& rng) {
    const std::uint64_t subsets = (1ULL << n) - 2;
    const std::uint64_t mask = 1 + rng.below(subsets);
    ClassSet out;
    for (int c = 1; c <= n; ++c) {
        if ((mask >> (c - 1)) & 1ULL) {
            out.insert(c);
        }
    }
    return out;
}

}  // namespace

void PhantomConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("phantom config: " + msg); };
    if (num_organs < 1 || num_organs > kNumOrganClasses) {
        fail("num_organs must lie in [1, 13]");
    }
    if (n_full < 0 || n_partial < 0 || n_unlabeled < 0) {
        fail("case counts must be >= 0");
    }
    for (double p : {tumor_rate, tumor_annotation_rate, missed_tumor_rate}) {
        if (!(p >= 0.0 && p <= 1.0)) {
            fail("probabilities must lie in [0, 1]");
        }
    }
    if (n_partial > 0 && num_organs < 2) {
        fail("partial cases need at least 2 organs (A is a non-empty proper subset)");
    }
    if (max_tumors < 1 || tumor_radius_lo <= 0.0 || tumor_radius_hi < tumor_radius_lo) {
        fail("tumor geometry parameters invalid");
    }
    if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) {
        fail("spacing must be positive");
    }
    if (volume_shape.d < 12 || volume_shape.h < 12 || volume_shape.w < 12) {
        fail("volume_shape too small to place organs (each dim must be >= 12)");
    }
    if (noise_sigma < 0.0 || position_jitter < 0.0 || size_jitter < 0.0 || size_jitter >= 1.0 || !(organ_scale > 0.0)) {
        fail("noise/jitter parameters invalid");
    }
}

const char* to_string(Supervision s) {
    switch (s) {
        case Supervision::FullOrgan: return "FULL_ORGAN";
        case Supervision::PartialOrgan: return "PARTIAL_ORGAN";
        case Supervision::Unlabeled: return "UNLABELED";
    }
    return "?";
}

Supervision supervision_from_string(const std::string& s) {
    if (s == "FULL_ORGAN") {
        return Supervision::FullOrgan;
    }
    if (s == "PARTIAL_ORGAN") {
        return Supervision::PartialOrgan;
    }
    if (s == "UNLABELED") {
        return Supervision::Unlabeled;
    }
    throw FormatError("unknown supervision kind '" + s + "'");
}

const CaseRecord& DatasetManifest::find(const std::string& case_id) const {
    for (const auto& c : cases) {
        if (c.case_id == case_id) {
            return c;
        }
    }
    throw MissingArtifact("case not in manifest: " + case_id);
}

constexpr int kMaxLayoutAttempts = 100;

PhantomCase generate_case(const PhantomConfig& cfg, int index) {
    cfg.validate();
    Rng rng(cfg.seed ^ static_cast<std::uint64_t>(index));
    const Shape3 s = cfg.volume_shape;
    const std::array<double, 3> dims{static_cast<double>(s.d), static_cast<double>(s.h), static_cast<double>(s.w)};

    // Overlapping organs can hide a smaller one entirely; such layouts are redrawn.
    Ellipsoid body;
    std::vector<Ellipsoid> organs;
    PhantomCase pc;
    std::vector<std::uint8_t> in_body;
    for (int attempt = 0; attempt < kMaxLayoutAttempts; ++attempt) {
        for (int a = 0; a < 3; ++a) {
            body.center[a] = (0.5 + rng.uniform(-0.02, 0.02)) * dims[a] - 0.5;
            body.semi[a] = (a == 1 ? 0.42 : 0.47) * dims[a] * rng.uniform(0.97, 1.0);
        }
        organs.assign(cfg.num_organs, Ellipsoid{});
        for (int k = 0; k < cfg.num_organs; ++k) {
            const auto& t = kLayout[k];
            const double scale = rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
            for (int a = 0; a < 3; ++a) {
                organs[k].center[a] = (t.center[a] + rng.uniform(-cfg.position_jitter, cfg.position_jitter)) * dims[a] - 0.5;
                organs[k].semi[a] = std::max(1.0, t.semi[a] * dims[a] * scale * cfg.organ_scale * rng.uniform(0.95, 1.05));
            }
        }

        pc.truth = LabelMap(s, cfg.spacing);
        in_body.assign(s.voxels(), 0);
        for (int z = 0; z < s.d; ++z) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    if (!body.contains(z, y, x)) {
                        continue;
                    }
                    const std::size_t i = pc.truth.index(z, y, x);
                    in_body[i] = 1;
                    for (int k = 0; k < cfg.num_organs; ++k) {
                        if (organs[k].contains(z, y, x)) {
                            pc.truth.data[i] = static_cast<std::uint8_t>(k + 1);
                            break;
                        }
                    }
                }
            }
        }
        std::vector<std::size_t> organ_voxels(cfg.num_organs + 1, 0);
        for (auto c : pc.truth.data) {
            ++organ_voxels[c];
        }
        if (std::all_of(organ_voxels.begin() + 1, organ_voxels.end(), [](std::size_t n) { return n > 0; })) {
            break;
        }
        if (attempt + 1 == kMaxLayoutAttempts) {
            throw ConfigError("phantom config: volume_shape too small, some organ never gets any voxels");
        }
    }

    // Tumor spheres, clipped to the host organ's region. tumor_id 0 = none.
    std::vector<std::uint8_t> tumor_id(s.voxels(), 0);
    std::vector<int> tumor_host;
    if (rng.bernoulli(cfg.tumor_rate)) {
        const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_tumors)));
        for (int t = 0; t < count; ++t) {
            const int host = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_organs)));
            const Ellipsoid& e = organs[host - 1];
            const double radius =
                std::max(cfg.min_tumor_radius_vox, rng.uniform(cfg.tumor_radius_lo, cfg.tumor_radius_hi) * e.min_semi());
            // Random point within the inner half of the host ellipsoid.
            const double u = rng.uniform(0.0, 0.5);
            const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double cphi = rng.uniform(-1.0, 1.0);
            const double sphi = std::sqrt(1.0 - cphi * cphi);
            const std::array<double, 3> c{e.center[0] + u * e.semi[0] * cphi, e.center[1] + u * e.semi[1] * sphi * std::cos(theta),
                                          e.center[2] + u * e.semi[2] * sphi * std::sin(theta)};
            const auto id = static_cast<std::uint8_t>(tumor_host.size() + 1);
            std::size_t placed = 0;
            for (int z = 0; z < s.d; ++z) {
                for (int y = 0; y < s.h; ++y) {
                    for (int x = 0; x < s.w; ++x) {
                        const double dz = z - c[0];
                        const double dy = y - c[1];
                        const double dx = x - c[2];
                        const std::size_t i = pc.truth.index(z, y, x);
                        if (dz * dz + dy * dy + dx * dx <= radius * radius && pc.truth.data[i] == host) {
                            tumor_id[i] = id;
                            ++placed;
                        }
                    }
                }
            }
            if (placed > 0) {
                tumor_host.push_back(host);
            } else {
                std::replace(tumor_id.begin(), tumor_id.end(), id, std::uint8_t{0});
            }
        }
    }

    // Image intensities come from the organ label before tumors overwrite it.
    pc.image = Volume(s, cfg.spacing);
    const IntensityModel& im = cfg.intensity;
    for (std::size_t i = 0; i < s.voxels(); ++i) {
        double mean = 0.0;
        double sigma = 0.0;
        if (!in_body[i]) {
            mean = im.air_mean;
            sigma = im.air_sigma;
        } else if (tumor_id[i] != 0) {
            const int host = tumor_host[tumor_id[i] - 1];
            mean = im.organ_mean[host - 1] + im.tumor_offset;
            sigma = im.tumor_sigma;
        } else if (pc.truth.data[i] != 0) {
            mean = im.organ_mean[pc.truth.data[i] - 1];
            sigma = im.organ_sigma[pc.truth.data[i] - 1];
        } else {
            mean = im.body_mean;
            sigma = im.body_sigma;
        }
        const double texture = sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0;
        const double noise = cfg.noise_sigma > 0.0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0;
        pc.image.data[i] = static_cast<float>(mean + texture + noise);
    }
    for (std::size_t i = 0; i < s.voxels(); ++i) {
        if (tumor_id[i] != 0) {
            pc.truth.data[i] = kTumorClass;
        }
    }

    CaseRecord& rec = pc.record;
    rec.case_id = case_name(index);
    rec.supervision = supervision_for_index(cfg, index);
    const ClassSet partial_set = cfg.num_organs >= 2 ? draw_partial_subset(cfg.num_organs, rng) : ClassSet{};
    const bool tumor_flag = rng.bernoulli(cfg.tumor_annotation_rate);
    std::vector<bool> tumor_kept(tumor_host.size(), true);
    for (std::size_t t = 1; t < tumor_host.size(); ++t) {
        tumor_kept[t] = !rng.bernoulli(cfg.missed_tumor_rate);
    }
    rec.image_path = "images/" + rec.case_id + ".svol";
    rec.truth_path = "truth/" + rec.case_id + ".svol";
    switch (rec.supervision) {
        case Supervision::FullOrgan:
            for (int k = 1; k <= cfg.num_organs; ++k) {
                rec.annotated_organ_set.insert(k);
            }
            rec.tumor_annotated = tumor_flag;
            break;
        case Supervision::PartialOrgan:
            rec.annotated_organ_set = partial_set;
            rec.tumor_annotated = tumor_flag;
            break;
        case Supervision::Unlabeled:
            rec.tumor_annotated = false;
            break;
    }
    if (rec.supervision != Supervision::Unlabeled) {
        rec.label_path = "labels/" + rec.case_id + ".svol";
    }

    pc.released = pc.truth;
    for (std::size_t i = 0; i < s.voxels(); ++i) {
        auto& v = pc.released.data[i];
        if (v == kTumorClass) {
            const bool keep = rec.tumor_annotated && tumor_kept[tumor_id[i] - 1];
            if (!keep) {
                v = 0;
            }
        } else if (v != 0 && rec.annotated_organ_set.count(v) == 0) {
            v = 0;
        }
    }
    if (rec.supervision == Supervision::Unlabeled) {
        std::fill(pc.released.data.begin(), pc.released.data.end(), std::uint8_t{0});
    }
    return pc;
}

DatasetManifest generate_phantom(const PhantomConfig& cfg, const std::filesystem::path& root) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    fs::create_directories(root / "truth");
    DatasetManifest m;
    m.root = root;
    m.config = cfg;
    const int total = cfg.n_full + cfg.n_partial + cfg.n_unlabeled;
    for (int i = 0; i < total; ++i) {
        PhantomCase pc = generate_case(cfg, i);
        write_svol(root / pc.record.image_path, pc.image);
        write_svol(root / pc.record.truth_path, pc.truth);
        if (pc.record.label_path) {
            write_svol(root / *pc.record.label_path, pc.released);
        }
        m.cases.push_back(pc.record);
    }
    save_manifest(m, root / "manifest.json");
    return m;
}

namespace {

json intensity_to_json(const IntensityModel& im) {
    return json{{"air_mean", im.air_mean},       {"air_sigma", im.air_sigma},
                {"body_mean", im.body_mean},     {"body_sigma", im.body_sigma},
                {"organ_mean", im.organ_mean},   {"organ_sigma", im.organ_sigma},
                {"tumor_offset", im.tumor_offset}, {"tumor_sigma", im.tumor_sigma}};
}

json config_to_json(const PhantomConfig& c) {
    return json{{"volume_shape", {c.volume_shape.d, c.volume_shape.h, c.volume_shape.w}},
                {"spacing", {c.spacing.z, c.spacing.y, c.spacing.x}},
                {"num_organs", c.num_organs},
                {"tumor_rate", c.tumor_rate},
                {"tumor_annotation_rate", c.tumor_annotation_rate},
                {"missed_tumor_rate", c.missed_tumor_rate},
                {"max_tumors", c.max_tumors},
                {"tumor_radius", {c.tumor_radius_lo, c.tumor_radius_hi}},
                {"min_tumor_radius_vox", c.min_tumor_radius_vox},
                {"counts", {c.n_full, c.n_partial, c.n_unlabeled}},
                {"intensity", intensity_to_json(c.intensity)},
                {"noise_sigma", c.noise_sigma},
                {"position_jitter", c.position_jitter},
                {"size_jitter", c.size_jitter},
                {"organ_scale", c.organ_scale},
                {"seed", c.seed}};
}

// Field access that names the offending field on failure.
template <typename T>
T field(const json& j, const char* name, const std::string& ctx) {
    if (!j.is_object() || !j.contains(name)) {
        throw FormatError("manifest: missing field '" + std::string(name) + "' in " + ctx);
    }
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw FormatError("manifest: field '" + std::string(name) + "' has the wrong type in " + ctx);
    }
}

IntensityModel intensity_from_json(const json& j) {
    const std::string ctx = "config.intensity";
    IntensityModel im;
    im.air_mean = field<double>(j, "air_mean", ctx);
    im.air_sigma = field<double>(j, "air_sigma", ctx);
    im.body_mean = field<double>(j, "body_mean", ctx);
    im.body_sigma = field<double>(j, "body_sigma", ctx);
    im.organ_mean = field<std::array<double, kNumOrganClasses>>(j, "organ_mean", ctx);
    im.organ_sigma = field<std::array<double, kNumOrganClasses>>(j, "organ_sigma", ctx);
    im.tumor_offset = field<double>(j, "tumor_offset", ctx);
    im.tumor_sigma = field<double>(j, "tumor_sigma", ctx);
    return im;
}

PhantomConfig config_from_json(const json& j) {
    const std::string ctx = "config";
    PhantomConfig c;
    const auto shape = field<std::array<int, 3>>(j, "volume_shape", ctx);
    c.volume_shape = {shape[0], shape[1], shape[2]};
    const auto sp = field<std::array<double, 3>>(j, "spacing", ctx);
    c.spacing = {sp[0], sp[1], sp[2]};
    c.num_organs = field<int>(j, "num_organs", ctx);
    c.tumor_rate = field<double>(j, "tumor_rate", ctx);
    c.tumor_annotation_rate = field<double>(j, "tumor_annotation_rate", ctx);
    c.missed_tumor_rate = field<double>(j, "missed_tumor_rate", ctx);
    c.max_tumors = field<int>(j, "max_tumors", ctx);
    const auto tr = field<std::array<double, 2>>(j, "tumor_radius", ctx);
    c.tumor_radius_lo = tr[0];
    c.tumor_radius_hi = tr[1];
    c.min_tumor_radius_vox = field<double>(j, "min_tumor_radius_vox", ctx);
    const auto counts = field<std::array<int, 3>>(j, "counts", ctx);
    c.n_full = counts[0];
    c.n_partial = counts[1];
    c.n_unlabeled = counts[2];
    c.intensity = intensity_from_json(field<json>(j, "intensity", ctx));
    c.noise_sigma = field<double>(j, "noise_sigma", ctx);
    c.position_jitter = field<double>(j, "position_jitter", ctx);
    c.size_jitter = field<double>(j, "size_jitter", ctx);
    c.organ_scale = field<double>(j, "organ_scale", ctx);
    c.seed = field<std::uint64_t>(j, "seed", ctx);
    return c;
}

}  // namespace

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    json cases = json::array();
    for (const auto& c : m.cases) {
        cases.push_back(json{{"case_id", c.case_id},
                             {"image", c.image_path},
                             {"label", c.label_path ? json(*c.label_path) : json(nullptr)},
                             {"truth", c.truth_path},
                             {"supervision", to_string(c.supervision)},
                             {"annotated_organs", std::vector<int>(c.annotated_organ_set.begin(), c.annotated_organ_set.end())},
                             {"tumor_annotated", c.tumor_annotated}});
    }
    const json doc{{"format_version", m.format_version}, {"config", config_to_json(m.config)}, {"cases", cases}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        throw Error("cannot write manifest: " + path.string());
    }
    os << doc.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw MissingArtifact("manifest not found: " + path.string() + " (run the phantom subcommand first)");
    }
    json doc;
    try {
        doc = json::parse(is);
    } catch (const json::parse_error& e) {
        throw FormatError("manifest is not valid JSON: " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    m.format_version = field<int>(doc, "format_version", "manifest");
    if (m.format_version != kManifestVersion) {
        throw FormatError("manifest format_version " + std::to_string(m.format_version) + " unsupported");
    }
    m.config = config_from_json(field<json>(doc, "config", "manifest"));
    const json cases = field<json>(doc, "cases", "manifest");
    if (!cases.is_array()) {
        throw FormatError("manifest: field 'cases' has the wrong type in manifest");
    }
    std::set<std::string> seen;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const json& cj = cases[i];
        const std::string ctx = "cases[" + std::to_string(i) + "]";
        CaseRecord c;
        c.case_id = field<std::string>(cj, "case_id", ctx);
        c.image_path = field<std::string>(cj, "image", ctx);
        if (!cj.contains("label")) {
            throw FormatError("manifest: missing field 'label' in " + ctx);
        }
        if (!cj.at("label").is_null()) {
            c.label_path = field<std::string>(cj, "label", ctx);
        }
        c.truth_path = field<std::string>(cj, "truth", ctx);
        try {
            c.supervision = supervision_from_string(field<std::string>(cj, "supervision", ctx));
        } catch (const FormatError& e) {
            throw FormatError("manifest: field 'supervision' invalid in " + ctx + ": " + e.what());
        }
        for (int k : field<std::vector<int>>(cj, "annotated_organs", ctx)) {
            c.annotated_organ_set.insert(k);
        }
        c.tumor_annotated = field<bool>(cj, "tumor_annotated", ctx);
        if (!seen.insert(c.case_id).second) {
            throw FormatError("manifest: duplicate case_id '" + c.case_id + "' in " + ctx);
        }
        if (c.supervision == Supervision::Unlabeled && c.label_path) {
            throw FormatError("manifest: field 'label' must be null for UNLABELED in " + ctx);
        }
        for (const std::string* rel : {&c.image_path, &c.truth_path}) {
            if (!std::filesystem::exists(m.root / *rel)) {
                throw MissingArtifact("manifest references missing file " + (m.root / *rel).string());
            }
        }
        if (c.label_path && !std::filesystem::exists(m.root / *c.label_path)) {
            throw MissingArtifact("manifest references missing file " + (m.root / *c.label_path).string());
        }
        m.cases.push_back(std::move(c));
    }
    return m;
}

}  // namespace stmt
