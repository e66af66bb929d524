#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "stmt/hybridtrain.hpp"
#include "stmt/nets.hpp"

using namespace stmt;
namespace fs = std::filesystem;

namespace {

NetSpec tiny(int classes = 3) {
    NetSpec s;
    s.num_classes = classes;
    s.base_channels = 2;
    s.num_scales = 2;
    s.max_channels = 8;
    return s;
}

Volume noise(Shape3 s, std::uint64_t seed) {
    Rng rng(seed);
    Volume v(s, {});
    for (auto& x : v.data) {
        x = static_cast<float>(rng.normal());
    }
    return v;
}

double loss_of(ResUNet& m, const Volume& v, const LabelMap& t) {
    return dice_ce_loss(m.forward_train(v), t, m.num_classes()).total;
}

}  // namespace

TEST_CASE("forward keeps the input shape and channel count") {
    const ResUNet m = build_model(tiny(4), 1);
    for (Shape3 s : {Shape3{4, 4, 4}, Shape3{5, 7, 6}, Shape3{1, 3, 2}}) {
        const Logits y = m.forward(noise(s, 2));
        CHECK(y.shape == s);
        CHECK(y.channels == 4);
        for (float x : y.data) {
            CHECK(std::isfinite(x));
        }
    }
}

TEST_CASE("initialization is a function of the seed") {
    CHECK(build_model(tiny(), 7).params().values == build_model(tiny(), 7).params().values);
    CHECK(build_model(tiny(), 7).params().values != build_model(tiny(), 8).params().values);
    CHECK(build_model(tiny(), 7).params().size() == param_count(tiny()));
}

TEST_CASE("eval forward equals train forward") {
    ResUNet m = build_model(tiny(), 3);
    const Volume v = noise({4, 4, 4}, 9);
    CHECK(m.forward(v).data == m.forward_train(v).data);
}

TEST_CASE("backward agrees with central finite differences") {
    // The forward runs in single precision and leaky ReLU has kinks, so single
    // entries are noisy; the check asks for agreement on most entries and on
    // the overall direction.
    ResUNet m = build_model(tiny(3), 21);
    const Volume v = noise({8, 8, 8}, 22);
    Rng rng(23);
    const LabelMap t = oracle::random_labels(rng, v.shape, 3);
    m.zero_grad();
    Logits g;
    dice_ce_loss(m.forward_train(v), t, 3, &g);
    m.backward(g);
    const std::vector<float> analytic = m.grads();
    int close = 0;
    int checked = 0;
    double dot = 0.0;
    double na = 0.0;
    double nf = 0.0;
    while (checked < 40) {
        const std::size_t k = rng.below(m.params().size());
        if (std::abs(analytic[k]) < 1e-3) {
            continue;  // conv biases ahead of instance norm have zero gradient
        }
        const float orig = m.params().values[k];
        double best = 0.0;
        double best_err = 1e300;
        for (float h : {1e-3F, 3e-4F}) {
            m.params().values[k] = orig + h;
            const double up = loss_of(m, v, t);
            m.params().values[k] = orig - h;
            const double down = loss_of(m, v, t);
            m.params().values[k] = orig;
            const double fd = (up - down) / (2.0 * static_cast<double>(h));
            if (std::abs(fd - analytic[k]) < best_err) {
                best_err = std::abs(fd - analytic[k]);
                best = fd;
            }
        }
        close += best_err <= 0.05 * std::abs(static_cast<double>(analytic[k]));
        dot += best * analytic[k];
        na += static_cast<double>(analytic[k]) * analytic[k];
        nf += best * best;
        ++checked;
    }
    CHECK(close >= 36);
    CHECK(dot / std::sqrt(na * nf) >= 0.995);
}

TEST_CASE("ema follows the closed form for a constant student") {
    ParamVector teacher;
    teacher.layout = {{"w", 0, 3}};
    teacher.values = {1.0F, -0.5F, 0.25F};
    ParamVector student = teacher;
    student.values = {0.0F, 0.5F, -0.75F};
    for (double a : {0.0, 0.5, 0.99, 1.0}) {
        ParamVector t = teacher;
        for (int n = 1; n <= 100; ++n) {
            ema_update_inplace(t, student, a);
            for (std::size_t i = 0; i < 3; ++i) {
                const double an = std::pow(a, n);
                CHECK(std::abs(t.values[i] - (teacher.values[i] * an + student.values[i] * (1.0 - an))) <= 1e-6);
            }
        }
    }
    CHECK(ema_update(teacher, student, 0.0).values == student.values);
    CHECK(ema_update(teacher, student, 1.0).values == teacher.values);
}

TEST_CASE("ema rejects misaligned layouts and bad decay") {
    ParamVector a;
    a.layout = {{"w", 0, 2}};
    a.values = {1, 2};
    ParamVector b = a;
    b.layout = {{"v", 0, 2}};
    CHECK_THROWS_AS(ema_update(a, b, 0.5), InvalidArgument);
    CHECK_THROWS_AS(ema_update(a, a, 1.5), InvalidArgument);
}

TEST_CASE("checkpoint round trip preserves spec, parameters and lineage") {
    const fs::path dir = fs::temp_directory_path() / "stmt_test_ckpt";
    fs::create_directories(dir);
    ResUNet m = build_model(tiny(5), 44);
    m.set_lineage("unit/test");
    save_checkpoint(m, dir / "m.ckpt");
    const ResUNet r = load_checkpoint(dir / "m.ckpt", tiny(5));
    CHECK(r.spec() == m.spec());
    CHECK(r.params().values == m.params().values);
    CHECK(r.lineage() == "unit/test");
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", tiny(4)), Error);
    CHECK_THROWS_AS(load_checkpoint(dir / "nope.ckpt"), MissingArtifact);
}

TEST_CASE("damaged checkpoints never load silently with different weights") {
    const fs::path dir = fs::temp_directory_path() / "stmt_test_ckpt_fuzz";
    fs::create_directories(dir);
    const ResUNet m = build_model(tiny(), 45);
    save_checkpoint(m, dir / "m.ckpt");
    std::ifstream is(dir / "m.ckpt", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(is)), {});
    Rng rng(46);
    for (int t = 0; t < 200; ++t) {
        std::string b = bytes;
        if (t % 2 == 0) {
            b.resize(rng.below(b.size()));
        } else {
            const std::size_t at = rng.below(b.size());
            b[at] = static_cast<char>(b[at] ^ (1 + rng.below(255)));
        }
        std::ofstream(dir / "bad.ckpt", std::ios::binary | std::ios::trunc) << b;
        try {
            const ResUNet r = load_checkpoint(dir / "bad.ckpt");
            CHECK(r.params().values == m.params().values);
        } catch (const Error&) {
        }
    }
}

TEST_CASE("argmax ties go to the lower class") {
    Logits y(3, {1, 1, 2});
    y.channel(0)[0] = 1.0F;
    y.channel(1)[0] = 1.0F;
    y.channel(2)[1] = 0.5F;
    const LabelMap l = argmax_labels(y, {});
    CHECK(l.data == std::vector<std::uint8_t>{0, 2});
}

TEST_CASE("spec validation") {
    NetSpec s = tiny();
    s.num_classes = 1;
    CHECK_THROWS(s.validate());
    s = tiny();
    s.base_channels = 0;
    CHECK_THROWS(s.validate());
}
