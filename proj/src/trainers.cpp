#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <thread>

#include "stmt/hybridtrain.hpp"

namespace stmt {

void TrainConfig::validate(bool three_kind_batches) const {
    if (epochs < 1 || iters_per_epoch < 1) {
        throw ConfigError("train: epochs and iters_per_epoch must be >= 1");
    }
    if (batch_size < 1) {
        throw ConfigError("train: batch_size must be >= 1");
    }
    if (three_kind_batches && batch_size % 3 != 0) {
        throw ConfigError("train: organ batch_size must be divisible by 3 when all three supervision kinds are used");
    }
    if (!input_shape.positive()) {
        throw ConfigError("train: input_shape must be positive");
    }
    if (!(lr0 >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0) ||
        !(grad_clip_norm >= 0.0)) {
        throw ConfigError("train: lr0, weight_decay, grad_clip_norm must be >= 0 and momentum in [0, 1)");
    }
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(lambda_tumor >= 0.0)) {
        throw ConfigError("train: loss weights must be >= 0");
    }
    if (!(mt_student_noise >= 0.0)) {
        throw ConfigError("train: mt_student_noise must be >= 0");
    }
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) {
        throw ConfigError("train: ema_decay must lie in [0, 1]");
    }
    if (!(augment_strength >= 0.0)) {
        throw ConfigError("train: augment_strength must be >= 0");
    }
    if (workers < 1) {
        throw ConfigError("train: workers must be >= 1");
    }
}

double cosine_lr(double lr0, int epoch, int epochs) {
    if (epochs <= 0) {
        throw InvalidArgument("cosine_lr: epochs must be positive");
    }
    const double t = std::clamp(static_cast<double>(epoch) / epochs, 0.0, 1.0);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

const char* to_string(SampleKind k) {
    switch (k) {
        case SampleKind::Labeled: return "LABELED";
        case SampleKind::Cpl: return "CPL";
        case SampleKind::Pl: return "PL";
        case SampleKind::TumorAnnotated: return "TUMOR_ANNOTATED";
    }
    return "?";
}

Volume prepare_image(const Volume& image, const BBox& roi, Shape3 task_shape, const NormStats& stats) {
    return resample_image(clip_and_normalize(crop(image, roi), stats), task_shape);
}

LabelMap prepare_label(const LabelMap& label, const BBox& roi, Shape3 task_shape) {
    return resample_label(crop(label, roi), task_shape);
}

// ---------------------------------------------------------------------------

BatchComposer::BatchComposer(std::vector<Pool> pools, int batch_size, std::uint64_t seed)
    : pools_(std::move(pools)), per_pool_(0), rng_(seed) {
    if (pools_.empty()) {
        throw InvalidArgument("BatchComposer: no pools");
    }
    for (const auto& p : pools_) {
        if (p.size == 0) {
            throw InvalidArgument("BatchComposer: pool '" + p.name + "' is empty");
        }
    }
    const auto k = static_cast<int>(pools_.size());
    if (batch_size < k || batch_size % k != 0) {
        throw ConfigError("BatchComposer: batch_size " + std::to_string(batch_size) + " is not a multiple of the " +
                          std::to_string(k) + " enabled pools");
    }
    per_pool_ = batch_size / k;
}

std::vector<BatchComposer::Draw> BatchComposer::next() {
    std::vector<Draw> out;
    out.reserve(pools_.size() * static_cast<std::size_t>(per_pool_));
    for (int j = 0; j < per_pool_; ++j) {
        for (std::size_t p = 0; p < pools_.size(); ++p) {
            out.push_back({pools_[p].kind, p, static_cast<std::size_t>(rng_.below(pools_[p].size))});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(std::size_t n, double momentum, bool nesterov, double weight_decay, double clip_norm)
    : velocity_(n, 0.0F), momentum_(momentum), nesterov_(nesterov), weight_decay_(weight_decay), clip_norm_(clip_norm) {}

void SgdOptimizer::step(std::vector<float>& params, const std::vector<float>& grads, double lr) {
    if (params.size() != velocity_.size() || grads.size() != velocity_.size()) {
        throw InvalidArgument("SgdOptimizer: size mismatch");
    }
    double scale = 1.0;
    if (clip_norm_ > 0.0) {
        double sq = 0.0;
        for (float g : grads) {
            sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > clip_norm_) {
            scale = clip_norm_ / (norm + 1e-6);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = scale * grads[i] + weight_decay_ * params[i];
        const double v = momentum_ * velocity_[i] + g;
        velocity_[i] = static_cast<float>(v);
        const double d = nesterov_ ? g + momentum_ * v : v;
        params[i] = static_cast<float>(params[i] - lr * d);
    }
}

// ---------------------------------------------------------------------------

namespace {

struct Prepared {
    Volume image;
    LabelMap target;
    LabelMap annotation;
};

std::uint64_t sample_seed(std::uint64_t seed, int iter, std::size_t slot) {
    return mix_seed(mix_seed(seed, static_cast<std::uint64_t>(iter)), slot);
}

// Augments the drawn samples; each slot has its own generator so the result
// does not depend on how slots are spread over workers.
std::vector<Prepared> prepare_batch(const std::vector<const TrainSample*>& draws, const TrainConfig& cfg, int iter,
                                    bool with_annotation) {
    std::vector<Prepared> out(draws.size());
    auto work = [&](std::size_t i) {
        const TrainSample& s = *draws[i];
        Rng rng(sample_seed(cfg.seed, iter, i));
        std::vector<const LabelMap*> extra;
        if (with_annotation) {
            extra.push_back(s.annotation ? &*s.annotation : &s.target);
        }
        Augmented a = augment(s.image, s.target, rng, cfg.augment_strength, cfg.augment, extra);
        out[i].image = std::move(a.image);
        out[i].target = std::move(a.label);
        if (with_annotation) {
            out[i].annotation = std::move(a.extra[0]);
        }
    };
    const auto n_workers = static_cast<std::size_t>(std::min<int>(cfg.workers, static_cast<int>(draws.size())));
    if (n_workers <= 1) {
        for (std::size_t i = 0; i < draws.size(); ++i) {
            work(i);
        }
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < draws.size(); i += n_workers) {
                    work(i);
                }
            });
        }
    }
    return out;
}

void check_samples(const std::vector<TrainSample>& samples, const TrainConfig& cfg, int num_classes,
                   const char* pool) {
    for (const auto& s : samples) {
        if (s.image.shape != cfg.input_shape || s.target.shape != cfg.input_shape) {
            throw InvalidArgument(std::string("train: sample '") + s.case_id + "' in pool " + pool +
                                  " does not match the task input shape");
        }
        for (std::uint8_t v : s.target.data) {
            if (v >= num_classes) {
                throw InvalidArgument(std::string("train: sample '") + s.case_id + "' has target class " +
                                      std::to_string(v) + " outside the model's " + std::to_string(num_classes) +
                                      " classes");
            }
        }
    }
}

void require_finite(double loss, int iter) {
    if (!std::isfinite(loss)) {
        throw TrainingDiverged("training diverged: non-finite loss at iteration " + std::to_string(iter));
    }
}

// Shared epoch/iteration loop. `step` runs forward/backward for one batch and
// returns its log entry (total + components).
template <typename Step>
TrainOutcome run_loop(ResUNet model, const TrainConfig& cfg, const TrainHooks& hooks, Step&& step,
                      const std::function<void(int, const ResUNet&)>& after_update = {}) {
    model.set_mode(Mode::Train);
    SgdOptimizer opt(model.params().size(), cfg.momentum, cfg.nesterov, cfg.weight_decay, cfg.grad_clip_norm);
    TrainOutcome out{model, model, {}, {}};
    double best = std::numeric_limits<double>::infinity();
    int iter = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cosine_lr(cfg.lr0, e, cfg.epochs);
        double epoch_sum = 0.0;
        for (int k = 0; k < cfg.iters_per_epoch; ++k, ++iter) {
            model.zero_grad();
            IterationLog entry = step(model, iter);
            require_finite(entry.total, iter);
            entry.iter = iter;
            entry.lr = lr;
            opt.step(model.params().values, model.grads(), lr);
            if (after_update) {
                after_update(iter, model);
            }
            if (hooks.on_step) {
                hooks.on_step(iter, model);
            }
            epoch_sum += entry.total;
            out.log.push_back(std::move(entry));
        }
        const double mean = epoch_sum / cfg.iters_per_epoch;
        out.epoch_loss.push_back(mean);
        if (mean < best) {
            best = mean;
            out.best_model = model;
        }
    }
    out.final_model = std::move(model);
    if (hooks.metrics_csv) {
        write_metrics_csv(out.log, *hooks.metrics_csv);
    }
    return out;
}

}  // namespace

TrainOutcome train_supervised(ResUNet model, const std::vector<TrainSample>& samples, const TrainConfig& cfg,
                              const TrainHooks& hooks) {
    cfg.validate();
    if (samples.empty()) {
        throw InvalidArgument("train_supervised: no training samples");
    }
    check_samples(samples, cfg, model.num_classes(), "LABELED");
    BatchComposer composer({{SampleKind::Labeled, "LABELED", samples.size()}}, cfg.batch_size, cfg.seed);
    const double w = 1.0 / cfg.batch_size;
    auto step = [&](ResUNet& m, int iter) {
        std::vector<const TrainSample*> draws;
        for (const auto& d : composer.next()) {
            draws.push_back(&samples[d.sample_index]);
        }
        auto batch = prepare_batch(draws, cfg, iter, false);
        IterationLog entry;
        double dice = 0.0;
        double ce = 0.0;
        for (auto& b : batch) {
            const Logits logits = m.forward_train(b.image);
            Logits g(logits.channels, logits.shape);
            const LossValue lv = dice_ce_loss(logits, b.target, m.num_classes(), &g, w);
            require_finite(lv.total, iter);
            m.backward(g);
            dice += w * lv.dice;
            ce += w * lv.ce;
        }
        entry.total = dice + ce;
        entry.components = {{"dice", dice}, {"ce", ce}};
        return entry;
    };
    return run_loop(std::move(model), cfg, hooks, step);
}

std::vector<LabelMap> generate_pseudo_labels(const SegmentationModel& teacher, const std::vector<Volume>& images) {
    std::vector<LabelMap> out;
    out.reserve(images.size());
    for (const auto& v : images) {
        out.push_back(argmax_labels(teacher.forward(v), v.spacing));
    }
    return out;
}

TrainOutcome train_student_organ(ResUNet model, const std::vector<TrainSample>& labeled,
                                 const std::vector<TrainSample>& cpl, const std::vector<TrainSample>& pl,
                                 const TrainConfig& cfg, const TrainHooks& hooks) {
    if (labeled.empty()) {
        throw InvalidArgument("train_student_organ: pool LABELED is empty");
    }
    std::vector<BatchComposer::Pool> pools{{SampleKind::Labeled, "LABELED", labeled.size()}};
    std::vector<const std::vector<TrainSample>*> sources{&labeled};
    if (!cpl.empty()) {
        pools.push_back({SampleKind::Cpl, "CPL", cpl.size()});
        sources.push_back(&cpl);
    }
    if (!pl.empty()) {
        pools.push_back({SampleKind::Pl, "PL", pl.size()});
        sources.push_back(&pl);
    }
    cfg.validate(pools.size() == 3);
    check_samples(labeled, cfg, model.num_classes(), "LABELED");
    check_samples(cpl, cfg, model.num_classes(), "CPL");
    check_samples(pl, cfg, model.num_classes(), "PL");
    BatchComposer composer(pools, cfg.batch_size, cfg.seed);
    const auto per_kind = static_cast<std::size_t>(cfg.batch_size) / pools.size();

    auto step = [&](ResUNet& m, int iter) {
        const auto draws = composer.next();
        std::vector<const TrainSample*> picked;
        for (const auto& d : draws) {
            picked.push_back(&(*sources[d.pool_index])[d.sample_index]);
        }
        auto batch = prepare_batch(picked, cfg, iter, false);
        OrganLossTerms t;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const SampleKind kind = draws[i].kind;
            const Logits logits = m.forward_train(batch[i].image);
            Logits g(logits.channels, logits.shape);
            const LossValue lv =
                dice_ce_loss(logits, batch[i].target, m.num_classes(), &g, organ_sample_weight(kind, per_kind, cfg));
            require_finite(lv.total, iter);
            m.backward(g);
            const double share = lv.total / static_cast<double>(per_kind);
            switch (kind) {
                case SampleKind::Labeled: t.labeled += share; break;
                case SampleKind::Cpl: t.cpl += share; break;
                case SampleKind::Pl: t.pl += share; break;
                case SampleKind::TumorAnnotated: break;
            }
        }
        IterationLog entry;
        entry.total = t.labeled + cfg.lambda1 * t.cpl + cfg.lambda2 * t.pl;
        entry.components = {{"L_ol", t.labeled}, {"L_cpl", t.cpl}, {"L_pl", t.pl}};
        return entry;
    };
    return run_loop(std::move(model), cfg, hooks, step);
}

MeanTeacherOutcome train_tumor_mean_teacher(ResUNet model, const std::vector<TrainSample>& samples,
                                            const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    if (samples.empty()) {
        throw InvalidArgument("train_tumor_mean_teacher: pool TUMOR_ANNOTATED is empty");
    }
    check_samples(samples, cfg, model.num_classes(), "TUMOR_ANNOTATED");
    for (const auto& s : samples) {
        if (s.annotation && s.annotation->shape != cfg.input_shape) {
            throw InvalidArgument("train_tumor_mean_teacher: annotation shape mismatch for '" + s.case_id + "'");
        }
    }
    BatchComposer composer({{SampleKind::TumorAnnotated, "TUMOR_ANNOTATED", samples.size()}}, cfg.batch_size,
                           cfg.seed);
    ResUNet teacher = model;
    teacher.set_mode(Mode::Eval);
    teacher.set_lineage(model.lineage().empty() ? "ema-teacher" : model.lineage() + "/ema-teacher");
    const double w = 1.0 / cfg.batch_size;

    auto step = [&](ResUNet& m, int iter) {
        std::vector<const TrainSample*> draws;
        for (const auto& d : composer.next()) {
            draws.push_back(&samples[d.sample_index]);
        }
        auto batch = prepare_batch(draws, cfg, iter, true);
        TumorLossTerms t;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const LabelMap pred = argmax_labels(teacher.forward(batch[i].image), batch[i].image.spacing);
            const LabelMap corrected = correct_tumor_pseudo(pred, batch[i].annotation, draws[i]->tumor_annotated);
            Volume student_in = batch[i].image;
            if (cfg.mt_student_noise > 0.0) {
                Rng rng(mix_seed(sample_seed(cfg.seed, iter, i), 0x5747));
                for (float& v : student_in.data) {
                    v += static_cast<float>(cfg.mt_student_noise * rng.normal());
                }
            }
            const Logits logits = m.forward_train(student_in);
            Logits g(logits.channels, logits.shape);
            const TumorLossTerms lt = tumor_loss(logits, batch[i].target, corrected, cfg, &g, w);
            require_finite(lt.total, iter);
            m.backward(g);
            t.labeled += w * lt.labeled;
            t.cpl += w * lt.cpl;
        }
        IterationLog entry;
        entry.total = t.labeled + cfg.lambda_tumor * t.cpl;
        entry.components = {{"L_tl", t.labeled}, {"L_cpl", t.cpl}};
        return entry;
    };
    auto update_teacher = [&](int, const ResUNet& student) {
        ema_update_inplace(teacher.params(), student.params(), cfg.ema_decay);
    };
    // Braced initializers evaluate left to right, so the teacher is moved only after training.
    return MeanTeacherOutcome{run_loop(std::move(model), cfg, hooks, step, update_teacher), std::move(teacher)};
}

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

}  // namespace

void write_metrics_csv(const std::vector<IterationLog>& log, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot write metrics log " + path.string());
    }
    os << "iter,lr,total";
    if (!log.empty()) {
        for (const auto& [name, _] : log.front().components) {
            os << ',' << name;
        }
    }
    os << '\n';
    for (const auto& e : log) {
        os << e.iter << ',' << fmt(e.lr) << ',' << fmt(e.total);
        for (const auto& [_, v] : e.components) {
            os << ',' << fmt(v);
        }
        os << '\n';
    }
    if (!os) {
        throw Error("failed writing metrics log " + path.string());
    }
}

}  // namespace stmt
