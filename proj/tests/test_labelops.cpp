#include "doctest.h"
#include "oracles.hpp"
#include "stmt/labelops.hpp"

using namespace stmt;

namespace {

// A partial label: truth restricted to a random subset A of the organ classes.
PartialLabel random_partial(Rng& rng, Shape3 s, int classes) {
    const LabelMap truth = oracle::random_labels(rng, s, classes, 0.6);
    PartialLabel p{LabelMap(s, {}, classes), {}, false};
    for (int c = 1; c < classes; ++c) {
        if (rng.bernoulli(0.5)) {
            p.annotated_set.insert(c);
        }
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (p.annotated_set.count(truth.data[i])) {
            p.labels.data[i] = truth.data[i];
        }
    }
    return p;
}

}  // namespace

TEST_CASE("pseudo-label correction matches the three-pass oracle") {
    Rng rng(2024);
    for (int t = 0; t < 300; ++t) {
        const Shape3 s = oracle::random_shape(rng, 8);
        const int classes = 2 + static_cast<int>(rng.below(13));
        const LabelMap pseudo = oracle::random_labels(rng, s, classes, 0.7);
        const PartialLabel p = random_partial(rng, s, classes);
        CHECK(correct_pseudo_label(pseudo, p).data == oracle::correct_pseudo(pseudo, p.labels, p.annotated_set).data);
    }
}

TEST_CASE("corrected pseudo-labels trust annotations and keep unannotated classes") {
    Rng rng(9);
    for (int t = 0; t < 100; ++t) {
        const Shape3 s = oracle::random_shape(rng, 6);
        const LabelMap pseudo = oracle::random_labels(rng, s, 6, 0.8);
        const PartialLabel p = random_partial(rng, s, 6);
        const LabelMap out = correct_pseudo_label(pseudo, p);
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (p.labels.data[i] != 0) {
                CHECK(out.data[i] == p.labels.data[i]);
            } else if (p.annotated_set.count(pseudo.data[i])) {
                CHECK(out.data[i] == 0);
            } else {
                CHECK(out.data[i] == pseudo.data[i]);
            }
        }
        // Applying the correction twice changes nothing.
        CHECK(correct_pseudo_label(out, p).data == out.data);
    }
}

TEST_CASE("empty annotated set leaves the pseudo-label unchanged") {
    Rng rng(4);
    const LabelMap pseudo = oracle::random_labels(rng, {4, 4, 4}, 5);
    const PartialLabel p{LabelMap({4, 4, 4}, {}, 5), {}, false};
    CHECK(correct_pseudo_label(pseudo, p).data == pseudo.data);
}

TEST_CASE("shape mismatch is an error") {
    const LabelMap a({2, 2, 2}, {});
    const PartialLabel p{LabelMap({2, 2, 3}, {}), {1}, false};
    CHECK_THROWS_AS(correct_pseudo_label(a, p), InvalidArgument);
}

TEST_CASE("tumor correction is a union for annotated cases only") {
    LabelMap pred({1, 1, 4}, {}, 2);
    pred.data = {1, 0, 1, 0};
    LabelMap ann({1, 1, 4}, {}, 2);
    ann.data = {0, 0, 1, 1};
    CHECK(correct_tumor_pseudo(pred, ann, true).data == std::vector<std::uint8_t>{1, 0, 1, 1});
    CHECK(correct_tumor_pseudo(pred, ann, false).data == pred.data);
}

TEST_CASE("branch masks and merging") {
    LabelMap l({1, 1, 5}, {});
    l.data = {0, 3, kTumorClass, 13, kTumorClass};
    CHECK(binarize_foreground(l).data == std::vector<std::uint8_t>{0, 1, 1, 1, 1});
    CHECK(mask_tumor_out(l).data == std::vector<std::uint8_t>{0, 3, 0, 13, 0});
    CHECK(mask_organs_out(l).data == std::vector<std::uint8_t>{0, 0, 1, 0, 1});
    CHECK(mask_organs_out(l).num_classes == 2);
    LabelMap organs({1, 1, 5}, {});
    organs.data = {0, 3, 4, 13, 0};
    LabelMap tumor({1, 1, 5}, {}, 2);
    tumor.data = {1, 0, 1, 0, 0};
    CHECK(merge_organ_tumor(organs, tumor).data == std::vector<std::uint8_t>{kTumorClass, 3, kTumorClass, 13, 0});
    CHECK(organ_classes_present(l) == ClassSet{3, 13});
}

TEST_CASE("largest component filter matches the flood-fill oracle") {
    Rng rng(31);
    for (int conn : {6, 18, 26}) {
        for (int t = 0; t < 100; ++t) {
            const Shape3 s = oracle::random_shape(rng, 8);
            const int classes = 2 + static_cast<int>(rng.below(6));
            const LabelMap l = t % 2 ? oracle::random_blobs(rng, s, classes, 1 + static_cast<int>(rng.below(10)))
                                     : oracle::random_labels(rng, s, classes, 0.3);
            const LabelMap got = largest_component_filter(l, connectivity_from_int(conn));
            CHECK(got.data == oracle::largest_component(l, conn, 1, 255).data);
        }
    }
}

TEST_CASE("largest component ties go to the component with the smallest index") {
    LabelMap l({1, 1, 5}, {}, 2);
    l.data = {1, 0, 1, 0, 1};
    CHECK(largest_component_filter(l, Connectivity::Face6).data == std::vector<std::uint8_t>{1, 0, 0, 0, 0});
}

TEST_CASE("class range restricts filtering") {
    LabelMap l({1, 1, 8}, {});
    l.data = {2, 0, 2, 2, kTumorClass, 0, kTumorClass, 0};
    const LabelMap got = largest_component_filter(l, Connectivity::Face6, 1, kNumOrganClasses);
    // Both tumor components survive; only the organ class is filtered.
    CHECK(got.data == std::vector<std::uint8_t>{0, 0, 2, 2, kTumorClass, 0, kTumorClass, 0});
}

TEST_CASE("connectivity parsing") {
    CHECK(connectivity_from_int(6) == Connectivity::Face6);
    CHECK(connectivity_from_int(26) == Connectivity::Vertex26);
    CHECK_THROWS(connectivity_from_int(8));
}
