#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stmt/phantom.hpp"
#include "stmt/rng.hpp"

using namespace stmt;
namespace fs = std::filesystem;

namespace {

PhantomConfig small() {
    PhantomConfig c;
    c.volume_shape = {20, 20, 20};
    c.num_organs = 4;
    c.n_full = 3;
    c.n_partial = 6;
    c.n_unlabeled = 3;
    c.tumor_rate = 1.0;
    c.max_tumors = 3;
    c.missed_tumor_rate = 0.5;
    c.seed = 17;
    return c;
}

}  // namespace

TEST_CASE("cases are a function of seed and index") {
    const PhantomConfig c = small();
    const PhantomCase a = generate_case(c, 4);
    const PhantomCase b = generate_case(c, 4);
    CHECK(a.image.data == b.image.data);
    CHECK(a.truth.data == b.truth.data);
    CHECK(a.record == b.record);
    PhantomConfig d = c;
    d.seed = 18;
    CHECK(generate_case(d, 4).image.data != a.image.data);
}

TEST_CASE("released labels are the truth restricted to the supervision") {
    const PhantomConfig c = small();
    for (int i = 0; i < c.n_full + c.n_partial + c.n_unlabeled; ++i) {
        const PhantomCase pc = generate_case(c, i);
        const CaseRecord& r = pc.record;
        for (int k = 1; k <= c.num_organs; ++k) {
            CHECK(std::count(pc.truth.data.begin(), pc.truth.data.end(), k) > 0);
        }
        if (r.supervision == Supervision::PartialOrgan) {
            CHECK(!r.annotated_organ_set.empty());
            CHECK(static_cast<int>(r.annotated_organ_set.size()) < c.num_organs);
        }
        if (r.supervision == Supervision::FullOrgan) {
            CHECK(static_cast<int>(r.annotated_organ_set.size()) == c.num_organs);
        }
        CHECK(r.label_path.has_value() == (r.supervision != Supervision::Unlabeled));
        for (std::size_t v = 0; v < pc.truth.size(); ++v) {
            const int t = pc.truth.data[v];
            if (r.supervision == Supervision::Unlabeled) {
                break;
            }
            const int l = pc.released.data[v];
            if (t == kTumorClass) {
                CHECK((l == 0 || (l == kTumorClass && r.tumor_annotated)));
            } else {
                CHECK(l == (r.annotated_organ_set.count(t) ? t : 0));
            }
        }
    }
}

TEST_CASE("case counts follow the configuration") {
    const fs::path root = fs::temp_directory_path() / "stmt_test_phantom";
    fs::remove_all(root);
    const PhantomConfig c = small();
    const DatasetManifest m = generate_phantom(c, root);
    REQUIRE(m.cases.size() == 12);
    int counts[3] = {0, 0, 0};
    for (const auto& r : m.cases) {
        ++counts[static_cast<int>(r.supervision)];
        CHECK(fs::exists(m.resolve(r.image_path)));
        CHECK(fs::exists(m.resolve(r.truth_path)));
    }
    CHECK(counts[0] == 3);
    CHECK(counts[1] == 6);
    CHECK(counts[2] == 3);

    const DatasetManifest back = load_manifest(root / "manifest.json");
    CHECK(back.cases == m.cases);
    CHECK(back.config == m.config);
    CHECK(back.find(m.cases[5].case_id) == m.cases[5]);
    CHECK_THROWS_AS(back.find("nope"), MissingArtifact);
}

TEST_CASE("broken manifests are rejected with format errors") {
    const fs::path root = fs::temp_directory_path() / "stmt_test_manifest_fuzz";
    fs::remove_all(root);
    generate_phantom(small(), root);
    std::ifstream is(root / "manifest.json");
    const std::string text((std::istreambuf_iterator<char>(is)), {});
    Rng rng(5);
    int rejected = 0;
    for (int t = 0; t < 200; ++t) {
        std::string b = text;
        if (t % 3 == 0) {
            b.resize(rng.below(b.size()));
        } else if (t % 3 == 1) {
            b[rng.below(b.size())] = "{}[]\",:0x"[rng.below(9)];
        } else {
            // Drop one key by renaming it.
            const std::size_t q = b.find('"', rng.below(b.size()));
            if (q != std::string::npos && q + 1 < b.size()) {
                b[q + 1] = '~';
            }
        }
        std::ofstream(root / "bad.json", std::ios::trunc) << b;
        try {
            load_manifest(root / "bad.json");
        } catch (const FormatError&) {
            ++rejected;
        } catch (const ConfigError&) {
            ++rejected;
        } catch (const MissingArtifact&) {
            ++rejected;  // a mangled path that no longer names a file
        }
    }
    CHECK(rejected > 100);
    CHECK_THROWS_AS(load_manifest(root / "missing.json"), MissingArtifact);
}

TEST_CASE("invalid phantom configurations") {
    PhantomConfig c = small();
    c.num_organs = 14;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small();
    c.organ_scale = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small();
    c.tumor_rate = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
