#include <atomic>
#include <chrono>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "oracles.hpp"
#include "stmt/evalx.hpp"

using namespace stmt;

TEST_CASE("dsc identities") {
    Rng rng(300);
    const LabelMap a = oracle::random_blobs(rng, {8, 8, 8}, 3, 5);
    CHECK(dsc(a, a, 1) == 1.0);
    const LabelMap empty({8, 8, 8}, {}, 3);
    CHECK(dsc(empty, empty, 1) == 1.0);
    LabelMap far({20, 4, 4}, {}, 2);
    LabelMap near({20, 4, 4}, {}, 2);
    far.at(0, 0, 0) = 1;
    near.at(19, 3, 3) = 1;
    CHECK(dsc(far, near, 1) == 0.0);
    CHECK(nsd(far, near, 1, 1.0) == 0.0);
    CHECK(nsd(a, a, 1, 1.0) == 1.0);
    CHECK(nsd(empty, a, 1, 1.0) == (a.data == empty.data ? 1.0 : 0.0));
    LabelMap half({1, 1, 4}, {}, 2);
    half.data = {1, 1, 0, 0};
    LabelMap other({1, 1, 4}, {}, 2);
    other.data = {0, 1, 1, 0};
    CHECK(dsc(half, other, 1) == doctest::Approx(0.5));
}

TEST_CASE("exact distance transform matches brute force with anisotropic spacing") {
    Rng rng(301);
    for (int t = 0; t < 30; ++t) {
        const Shape3 s = oracle::random_shape(rng, 9);
        const Spacing3 sp{0.5 + 0.5 * static_cast<double>(rng.below(3)), 1.0, 0.5 + 0.5 * static_cast<double>(rng.below(4))};
        std::vector<std::uint8_t> sites(s.voxels(), 0);
        for (auto& v : sites) {
            v = rng.bernoulli(0.05) ? 1 : 0;
        }
        const auto d = distance_to(sites, s, sp);
        for (int z = 0; z < s.d; ++z) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    double best = std::numeric_limits<double>::infinity();
                    for (int zz = 0; zz < s.d; ++zz) {
                        for (int yy = 0; yy < s.h; ++yy) {
                            for (int xx = 0; xx < s.w; ++xx) {
                                if (sites[(static_cast<std::size_t>(zz) * s.h + yy) * s.w + xx]) {
                                    const double dz = (z - zz) * sp.z;
                                    const double dy = (y - yy) * sp.y;
                                    const double dx = (x - xx) * sp.x;
                                    best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
                                }
                            }
                        }
                    }
                    const double got = d[(static_cast<std::size_t>(z) * s.h + y) * s.w + x];
                    if (std::isinf(best)) {
                        CHECK(std::isinf(got));
                    } else {
                        CHECK(std::abs(got - best) <= 1e-9);
                    }
                }
            }
        }
    }
}

TEST_CASE("nsd matches the all-pairs surface distance oracle") {
    Rng rng(302);
    for (int t = 0; t < 60; ++t) {
        const Shape3 s = oracle::random_shape(rng, 12);
        LabelMap a = oracle::random_blobs(rng, s, 3, 6);
        LabelMap b = oracle::random_blobs(rng, s, 3, 6);
        const Spacing3 sp{1.0, 0.5 * static_cast<double>(1 + rng.below(3)), 1.5};
        a.spacing = b.spacing = sp;
        for (double tol : {0.5, 1.0, 2.0, 3.3}) {
            CHECK(std::abs(nsd(a, b, 1, tol) - oracle::nsd_all_pairs(a, b, 1, tol)) <= 1e-9);
        }
    }
}

TEST_CASE("surface voxels of a solid cube") {
    std::vector<std::uint8_t> m(5 * 5 * 5, 0);
    for (int z = 1; z < 4; ++z) {
        for (int y = 1; y < 4; ++y) {
            for (int x = 1; x < 4; ++x) {
                m[(z * 5 + y) * 5 + x] = 1;
            }
        }
    }
    CHECK(surface_voxels(m, {5, 5, 5}).size() == 26);
}

TEST_CASE("memory-time area of a ramp is exact") {
    MemTimeCurve c;
    for (int i = 0; i <= 10; ++i) {
        c.samples.emplace_back(0.5 * i, 100.0 * 0.5 * i);
    }
    CHECK(auc_mem_time(c) == 100.0 * 5.0 * 5.0 / 2.0);
    MemTimeCurve flat{"x", {{0.0, 3.0}, {2.0, 3.0}}};
    CHECK(auc_mem_time(flat) == 6.0);
    CHECK_THROWS_AS(auc_mem_time(MemTimeCurve{"x", {{0.0, 1.0}}}), InvalidArgument);
}

TEST_CASE("profiling samples memory across the run") {
    std::atomic<int> calls{0};
    const CaseProfile p = profile_case([] { std::this_thread::sleep_for(std::chrono::milliseconds(120)); }, 0.02,
                                       [&] { return 100.0 + calls++; });
    CHECK(p.runtime_s >= 0.1);
    CHECK(p.curve.samples.size() >= 3);
    CHECK(p.curve.samples.front().first == 0.0);
    CHECK(p.curve.samples.back().first == doctest::Approx(p.runtime_s));
    CHECK(p.max_mem_mb() >= 102.0);
    CHECK(current_rss_mb() > 0.0);
}

TEST_CASE("profiling keeps the partial curve when work fails") {
    CaseProfile partial;
    CHECK_THROWS_AS(profile_case([] { throw Error("boom"); }, 0.01, [] { return 1.0; }, &partial), Error);
    CHECK(partial.curve.samples.size() >= 1);
}

TEST_CASE("report flags cases over the runtime and memory tolerances") {
    std::vector<EvalRow> rows(4);
    rows[0].case_id = "slow";
    rows[0].runtime_s = 16.0;
    rows[0].max_mem_mb = 1000.0;
    rows[1].case_id = "big";
    rows[1].runtime_s = 3.0;
    rows[1].max_mem_mb = 5000.0;
    rows[2].case_id = "0001";
    rows[2].runtime_s = 11.76;
    rows[2].max_mem_mb = 3220.0;
    rows[3].case_id = "unprofiled";
    const EvalReport r = build_report(rows);
    CHECK(r.time_flag == std::vector<bool>{true, false, false, false});
    CHECK(r.mem_flag == std::vector<bool>{false, true, false, false});
    const std::string table = format_report_table(r);
    CHECK(table.find("15") != std::string::npos);
    CHECK(table.find("4096") != std::string::npos);
}

TEST_CASE("aggregates use the sample standard deviation") {
    const ClassAggregate a = aggregate({1.0, 2.0, 3.0, 4.0});
    CHECK(a.mean == 2.5);
    CHECK(a.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(a.n == 4);
    CHECK(aggregate({7.0}).sd == 0.0);
}

TEST_CASE("report averages organs and tumor separately") {
    LabelMap truth({4, 4, 4}, {}, kNumClasses);
    truth.at(0, 0, 0) = 1;
    truth.at(3, 3, 3) = 2;
    truth.at(2, 2, 2) = kTumorClass;
    LabelMap pred = truth;
    pred.at(3, 3, 3) = 0;
    const EvalRow row = evaluate_case("a", pred, truth, {1, 2, kTumorClass});
    const EvalReport r = build_report({row});
    REQUIRE(r.organ_dsc);
    CHECK(*r.organ_dsc == doctest::Approx(0.5));
    CHECK(*r.tumor_dsc == 1.0);
    const auto path = std::filesystem::temp_directory_path() / "stmt_test_report.csv";
    write_report_csv(r, path);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "case_id,dsc_1,nsd_1,dsc_2,nsd_2,dsc_14,nsd_14,runtime_s,max_mem_mb,auc_mb_s,time_flag,mem_flag");
}
