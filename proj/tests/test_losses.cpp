#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "stmt/hybridtrain.hpp"

using namespace stmt;

namespace {

Logits random_logits(Rng& rng, int classes, Shape3 s, double scale = 2.0) {
    Logits y(classes, s);
    for (auto& v : y.data) {
        v = static_cast<float>(scale * rng.normal());
    }
    return y;
}

}  // namespace

TEST_CASE("dice_ce equals the scalar reimplementation") {
    Rng rng(100);
    for (int t = 0; t < 50; ++t) {
        const int classes = 2 + static_cast<int>(rng.below(4));
        const Logits y = random_logits(rng, classes, {4, 4, 4});
        const LabelMap target = oracle::random_labels(rng, y.shape, classes, 0.5);
        const LossValue l = dice_ce_loss(y, target, classes);
        CHECK(std::abs(l.total - oracle::dice_ce(y, target, classes)) <= 1e-6);
        CHECK(l.total == doctest::Approx(l.dice + l.ce));
    }
}

TEST_CASE("dice_ce gradient matches finite differences on the logits") {
    Rng rng(101);
    const int classes = 4;
    Logits y = random_logits(rng, classes, {4, 4, 4}, 1.0);
    const LabelMap target = oracle::random_labels(rng, y.shape, classes, 0.6);
    Logits g;
    dice_ce_loss(y, target, classes, &g);
    for (int t = 0; t < 20; ++t) {
        const std::size_t k = rng.below(y.data.size());
        const float orig = y.data[k];
        y.data[k] = orig + 1e-2F;
        const float up_x = y.data[k];
        const double up = dice_ce_loss(y, target, classes).total;
        y.data[k] = orig - 1e-2F;
        const float down_x = y.data[k];
        const double down = dice_ce_loss(y, target, classes).total;
        y.data[k] = orig;
        const double fd = (up - down) / static_cast<double>(up_x - down_x);
        CHECK(std::abs(fd - g.data[k]) <= 1e-3 * std::max(std::abs(fd), 1e-3));
    }
}

TEST_CASE("gradient accumulates and scales") {
    Rng rng(102);
    const Logits y = random_logits(rng, 3, {3, 3, 3});
    const LabelMap target = oracle::random_labels(rng, y.shape, 3);
    Logits once;
    dice_ce_loss(y, target, 3, &once);
    Logits twice;
    dice_ce_loss(y, target, 3, &twice, 0.5);
    dice_ce_loss(y, target, 3, &twice, 1.5);
    for (std::size_t i = 0; i < once.data.size(); ++i) {
        CHECK(twice.data[i] == doctest::Approx(2.0 * once.data[i]).epsilon(1e-5));
    }
}

TEST_CASE("perfect confident prediction gives near-zero loss") {
    LabelMap target({2, 2, 2}, {}, 3);
    target.data = {0, 1, 2, 1, 0, 2, 2, 1};
    Logits y(3, target.shape);
    for (std::size_t i = 0; i < target.size(); ++i) {
        y.channel(target.data[i])[i] = 30.0F;
    }
    const LossValue l = dice_ce_loss(y, target, 3);
    CHECK(l.total < 1e-5);
}

TEST_CASE("dice_ce input validation") {
    const Logits y(3, {2, 2, 2});
    LabelMap t({2, 2, 2}, {}, 3);
    CHECK_THROWS_AS(dice_ce_loss(y, t, 2), InvalidArgument);
    t.data[0] = 3;
    CHECK_THROWS_AS(dice_ce_loss(y, t, 3), InvalidArgument);
}

TEST_CASE("organ loss is the weighted sum of component means") {
    Rng rng(103);
    TrainConfig cfg;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.5;
    const int classes = 5;
    for (int t = 0; t < 10; ++t) {
        std::vector<Logits> logits;
        std::vector<LabelMap> targets;
        const std::vector<SampleKind> kinds{SampleKind::Labeled, SampleKind::Cpl, SampleKind::Pl, SampleKind::Labeled,
                                            SampleKind::Cpl, SampleKind::Pl};
        for (std::size_t i = 0; i < kinds.size(); ++i) {
            logits.push_back(random_logits(rng, classes, {3, 3, 3}));
            targets.push_back(oracle::random_labels(rng, {3, 3, 3}, classes));
        }
        std::vector<KindedPrediction> batch;
        for (std::size_t i = 0; i < kinds.size(); ++i) {
            batch.push_back({&logits[i], &targets[i], kinds[i]});
        }
        std::vector<Logits> grads;
        const OrganLossTerms o = organ_loss(batch, cfg, &grads);
        double sums[3] = {0, 0, 0};
        for (std::size_t i = 0; i < kinds.size(); ++i) {
            sums[static_cast<int>(kinds[i])] += oracle::dice_ce(logits[i], targets[i], classes) / 2.0;
        }
        CHECK(std::abs(o.labeled - sums[0]) <= 1e-6);
        CHECK(std::abs(o.cpl - sums[1]) <= 1e-6);
        CHECK(std::abs(o.pl - sums[2]) <= 1e-6);
        CHECK(std::abs(o.total - (sums[0] + 1.0 * sums[1] + 0.5 * sums[2])) <= 1e-6);
        // Each sample's gradient is its own dice_ce gradient times its weight.
        Logits single;
        dice_ce_loss(logits[2], targets[2], classes, &single);
        for (std::size_t i = 0; i < single.data.size(); ++i) {
            CHECK(grads[2].data[i] == doctest::Approx(0.25 * single.data[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("organ loss without pseudo-labelled samples is the labelled term") {
    Rng rng(104);
    TrainConfig cfg;
    const Logits y = random_logits(rng, 3, {3, 3, 3});
    const LabelMap t = oracle::random_labels(rng, y.shape, 3);
    const OrganLossTerms o = organ_loss({{&y, &t, SampleKind::Labeled}}, cfg);
    CHECK(o.total == doctest::Approx(oracle::dice_ce(y, t, 3)));
    CHECK_FALSE(o.has_cpl);
    CHECK_FALSE(o.has_pl);
    CHECK_THROWS_AS(organ_loss({{&y, &t, SampleKind::Cpl}}, cfg), InvalidArgument);
}

TEST_CASE("sample weights") {
    TrainConfig cfg;
    cfg.lambda1 = 2.0;
    cfg.lambda2 = 0.5;
    CHECK(organ_sample_weight(SampleKind::Labeled, 2, cfg) == 0.5);
    CHECK(organ_sample_weight(SampleKind::Cpl, 2, cfg) == 1.0);
    CHECK(organ_sample_weight(SampleKind::Pl, 1, cfg) == 0.5);
    CHECK_THROWS(organ_sample_weight(SampleKind::Pl, 0, cfg));
    CHECK_THROWS(organ_sample_weight(SampleKind::TumorAnnotated, 1, cfg));
}

TEST_CASE("tumor loss is annotation term plus lambda times corrected pseudo term") {
    Rng rng(105);
    for (double lambda : {0.0, 1.0, 2.5}) {
        TrainConfig cfg;
        cfg.lambda_tumor = lambda;
        const Logits y = random_logits(rng, 2, {4, 4, 4});
        const LabelMap ann = oracle::random_labels(rng, y.shape, 2, 0.2);
        const LabelMap cpl = oracle::random_labels(rng, y.shape, 2, 0.3);
        Logits g;
        const TumorLossTerms l = tumor_loss(y, ann, cpl, cfg, &g);
        const double a = oracle::dice_ce(y, ann, 2);
        const double b = oracle::dice_ce(y, cpl, 2);
        CHECK(std::abs(l.labeled - a) <= 1e-6);
        CHECK(std::abs(l.cpl - b) <= 1e-6);
        CHECK(std::abs(l.total - (a + lambda * b)) <= 1e-6);
        Logits ga;
        Logits gb;
        dice_ce_loss(y, ann, 2, &ga);
        dice_ce_loss(y, cpl, 2, &gb);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            CHECK(g.data[i] == doctest::Approx(ga.data[i] + lambda * gb.data[i]).epsilon(1e-4));
        }
    }
}
