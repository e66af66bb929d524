#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "stmt/volcore.hpp"

using namespace stmt;
namespace fs = std::filesystem;

namespace {

Volume ramp(Shape3 s) {
    Volume v(s, {1.0, 2.0, 0.5});
    for (std::size_t i = 0; i < v.size(); ++i) {
        v.data[i] = static_cast<float>(i % 97) - 30.0F;
    }
    return v;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("stmt_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("resampling to the same shape is an exact copy") {
    const Volume v = ramp({5, 6, 7});
    CHECK(resample_image(v, v.shape).data == v.data);
    LabelMap l({5, 6, 7}, {}, 4);
    Rng rng(3);
    l = oracle::random_labels(rng, l.shape, 4);
    CHECK(resample_label(l, l.shape).data == l.data);
}

TEST_CASE("nearest mapping uses voxel centres") {
    for (int n_in : {1, 3, 8, 17}) {
        for (int n_out : {1, 2, 8, 24}) {
            for (int i = 0; i < n_out; ++i) {
                const int expect = std::min(n_in - 1, static_cast<int>(std::floor((i + 0.5) * n_in / n_out)));
                CHECK(nearest_source_index(i, n_in, n_out) == expect);
            }
        }
    }
}

TEST_CASE("trilinear resampling reproduces a linear field away from the clamp") {
    Volume v({8, 8, 8}, {});
    for (int z = 0; z < 8; ++z) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                v.at(z, y, x) = static_cast<float>(2 * z + 3 * y - x);
            }
        }
    }
    const Volume r = resample_image(v, {4, 4, 4});
    // Downsampling by 2: target i samples source 2i + 0.5.
    for (int z = 0; z < 4; ++z) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
                const double sz = 2 * z + 0.5;
                const double sy = 2 * y + 0.5;
                const double sx = 2 * x + 0.5;
                CHECK(r.at(z, y, x) == doctest::Approx(2 * sz + 3 * sy - sx).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("resampled output keeps the physical extent") {
    const Volume v = ramp({6, 6, 6});
    const Volume r = resample_image(v, {12, 3, 6});
    CHECK(r.spacing.z == doctest::Approx(0.5));
    CHECK(r.spacing.y == doctest::Approx(4.0));
    CHECK(r.spacing.x == doctest::Approx(0.5));
}

TEST_CASE("bounding box covers the foreground and stays inside the frame") {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        const Shape3 s = oracle::random_shape(rng, 12);
        LabelMap l = oracle::random_blobs(rng, s, 3, 2);
        const auto b = bbox_of_foreground(l, 0.1 * t / 10.0);
        bool any = false;
        for (int z = 0; z < s.d; ++z) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    if (l.at(z, y, x) != 0) {
                        any = true;
                        REQUIRE(b.has_value());
                        CHECK(b->contains(z, y, x));
                    }
                }
            }
        }
        CHECK(any == b.has_value());
        if (b) {
            CHECK(b->valid());
            for (int a = 0; a < 3; ++a) {
                CHECK(b->lo[a] >= 0);
                CHECK(b->hi[a] <= s[a]);
            }
        }
    }
}

TEST_CASE("crop then restore puts labels back in place") {
    Rng rng(5);
    const Shape3 s{9, 10, 11};
    const LabelMap l = oracle::random_blobs(rng, s, 5, 6);
    const BBox b{{1, 2, 3}, {8, 9, 10}, s};
    const LabelMap restored = restore_to_canvas(crop(l, b), b, s);
    REQUIRE(restored.shape == s);
    for (int z = 0; z < s.d; ++z) {
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                CHECK(restored.at(z, y, x) == (b.contains(z, y, x) ? l.at(z, y, x) : 0));
            }
        }
    }
}

TEST_CASE("scale_bbox maps a full box to a full box") {
    const BBox b = BBox::full({16, 16, 16});
    CHECK(scale_bbox(b, {16, 16, 16}, {40, 33, 7}) == BBox::full({40, 33, 7}));
}

TEST_CASE("foreground statistics and normalization") {
    Volume v({1, 1, 5}, {});
    v.data = {0, 10, 20, 30, 1000};
    LabelMap l({1, 1, 5}, {}, 2);
    l.data = {0, 1, 1, 1, 0};
    const VolumeLabelRef ref{&v, &l};
    const NormStats s = compute_foreground_stats(std::span<const VolumeLabelRef>(&ref, 1));
    CHECK(s.mean == doctest::Approx(20.0));
    CHECK(s.std == doctest::Approx(std::sqrt(200.0 / 3.0)));
    CHECK(s.clip_lo >= 10.0);
    CHECK(s.clip_hi <= 30.0);
    const Volume n = clip_and_normalize(v, s);
    CHECK(n.data[4] == doctest::Approx((s.clip_hi - s.mean) / s.std));
    const std::vector<float> sorted{1, 2, 3, 4};
    CHECK(percentile_sorted(sorted, 50.0) == doctest::Approx(2.5));
    CHECK(percentile_sorted(sorted, 0.0) == 1.0);
    CHECK(percentile_sorted(sorted, 100.0) == 4.0);
}

TEST_CASE("svol round trip is lossless") {
    const fs::path dir = temp_dir("svol");
    const Volume v = ramp({3, 4, 5});
    write_svol(dir / "v.svol", v);
    const Volume r = read_svol_image(dir / "v.svol");
    CHECK(r.shape == v.shape);
    CHECK(r.spacing == v.spacing);
    CHECK(r.data == v.data);
    Rng rng(1);
    LabelMap l = oracle::random_labels(rng, {4, 3, 2}, kNumClasses);
    write_svol(dir / "l.svol", l);
    CHECK(read_svol_label(dir / "l.svol").data == l.data);
}

TEST_CASE("corrupt svol files are rejected") {
    const fs::path dir = temp_dir("svol_fuzz");
    const Volume v = ramp({3, 4, 5});
    write_svol(dir / "v.svol", v);
    std::ifstream is(dir / "v.svol", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(is)), {});
    Rng rng(77);
    int rejected = 0;
    for (int t = 0; t < 200; ++t) {
        std::string b = bytes;
        if (t % 2 == 0) {
            b.resize(rng.below(b.size()));
        } else {
            // Damage the header only; payload bytes are arbitrary floats anyway.
            const std::size_t header = b.find('\n');
            b[rng.below(header + 1)] = static_cast<char>(rng.below(256));
        }
        std::ofstream(dir / "bad.svol", std::ios::binary) << b;
        try {
            const Volume r = read_svol_image(dir / "bad.svol");
            CHECK(r.size() == r.shape.voxels());
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    CHECK(rejected >= 100);
    CHECK_THROWS_AS(read_svol_image(dir / "missing.svol"), Error);
}

TEST_CASE("label files with out-of-range classes are rejected") {
    const fs::path dir = temp_dir("svol_cls");
    LabelMap l({2, 2, 2}, {}, kNumClasses);
    l.data[3] = 200;
    write_svol(dir / "l.svol", l);
    CHECK_THROWS_AS(read_svol_label(dir / "l.svol"), FormatError);
}
