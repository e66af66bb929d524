#include <algorithm>
#include <cmath>
#include <vector>

#include "stmt/hybridtrain.hpp"

namespace stmt {

LossValue dice_ce_loss(const Logits& logits, const LabelMap& target, int num_classes, Logits* grad,
                       double grad_scale) {
    if (num_classes < 2) {
        throw InvalidArgument("dice_ce_loss: num_classes must be >= 2");
    }
    if (logits.channels != num_classes || logits.shape != target.shape) {
        throw InvalidArgument("dice_ce_loss: logits/target shapes inconsistent");
    }
    const std::size_t n = logits.voxels();
    const auto c_count = static_cast<std::size_t>(num_classes);
    std::vector<double> prob(c_count * n);
    double ce = 0.0;
    std::vector<double> inter(c_count, 0.0);
    std::vector<double> psum(c_count, 0.0);
    std::vector<double> gsum(c_count, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.data[i];
        for (std::size_t c = 1; c < c_count; ++c) {
            mx = std::max(mx, static_cast<double>(logits.data[c * n + i]));
        }
        double z = 0.0;
        for (std::size_t c = 0; c < c_count; ++c) {
            const double e = std::exp(static_cast<double>(logits.data[c * n + i]) - mx);
            prob[c * n + i] = e;
            z += e;
        }
        const std::size_t t = target.data[i];
        if (t >= c_count) {
            throw InvalidArgument("dice_ce_loss: target class out of range");
        }
        for (std::size_t c = 0; c < c_count; ++c) {
            prob[c * n + i] /= z;
            psum[c] += prob[c * n + i];
        }
        inter[t] += prob[t * n + i];
        gsum[t] += 1.0;
        ce -= (static_cast<double>(logits.data[t * n + i]) - mx) - std::log(z);
    }
    ce /= static_cast<double>(n);
    const double fg = static_cast<double>(num_classes - 1);
    double dice_mean = 0.0;
    std::vector<double> den(c_count, 0.0);
    for (std::size_t c = 1; c < c_count; ++c) {
        den[c] = psum[c] + gsum[c] + kDiceEps;
        dice_mean += 2.0 * inter[c] / den[c];
    }
    dice_mean /= fg;
    LossValue out;
    out.ce = ce;
    out.dice = 1.0 - dice_mean;
    out.total = out.dice + out.ce;

    if (grad != nullptr) {
        if (grad->channels != num_classes || grad->shape != logits.shape) {
            *grad = Logits(num_classes, logits.shape);
        }
        std::vector<double> a(c_count);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t t = target.data[i];
            // a_c = d(dice loss)/d(p_c) at voxel i
            double pa = 0.0;
            for (std::size_t c = 0; c < c_count; ++c) {
                double v = 0.0;
                if (c >= 1) {
                    const double g = (c == t) ? 1.0 : 0.0;
                    v = -(2.0 * g / den[c] - 2.0 * inter[c] / (den[c] * den[c])) / fg;
                }
                a[c] = v;
                pa += prob[c * n + i] * v;
            }
            for (std::size_t c = 0; c < c_count; ++c) {
                const double p = prob[c * n + i];
                const double dce = (p - (c == t ? 1.0 : 0.0)) / static_cast<double>(n);
                const double ddice = p * (a[c] - pa);
                grad->data[c * n + i] += static_cast<float>(grad_scale * (dce + ddice));
            }
        }
    }
    return out;
}

double organ_sample_weight(SampleKind kind, std::size_t n_of_kind, const TrainConfig& cfg) {
    if (n_of_kind == 0) {
        throw InvalidArgument("organ_sample_weight: empty kind");
    }
    const double inv = 1.0 / static_cast<double>(n_of_kind);
    switch (kind) {
        case SampleKind::Labeled: return inv;
        case SampleKind::Cpl: return cfg.lambda1 * inv;
        case SampleKind::Pl: return cfg.lambda2 * inv;
        case SampleKind::TumorAnnotated: break;
    }
    throw InvalidArgument("organ_sample_weight: tumor sample in organ batch");
}

OrganLossTerms organ_loss(const std::vector<KindedPrediction>& batch, const TrainConfig& cfg,
                          std::vector<Logits>* grads) {
    std::size_t n_l = 0;
    std::size_t n_c = 0;
    std::size_t n_p = 0;
    for (const auto& b : batch) {
        switch (b.kind) {
            case SampleKind::Labeled: ++n_l; break;
            case SampleKind::Cpl: ++n_c; break;
            case SampleKind::Pl: ++n_p; break;
            case SampleKind::TumorAnnotated: throw InvalidArgument("organ_loss: tumor sample in organ batch");
        }
    }
    if (n_l == 0) {
        throw InvalidArgument("organ_loss: batch has no LABELED sample");
    }
    if (grads != nullptr) {
        grads->resize(batch.size());
    }
    OrganLossTerms t;
    t.has_cpl = n_c > 0;
    t.has_pl = n_p > 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& b = batch[i];
        const std::size_t n_kind = b.kind == SampleKind::Labeled ? n_l : (b.kind == SampleKind::Cpl ? n_c : n_p);
        const double weight = organ_sample_weight(b.kind, n_kind, cfg);
        double* comp = b.kind == SampleKind::Labeled ? &t.labeled : (b.kind == SampleKind::Cpl ? &t.cpl : &t.pl);
        Logits* g = nullptr;
        if (grads != nullptr) {
            (*grads)[i] = Logits(b.logits->channels, b.logits->shape);
            g = &(*grads)[i];
        }
        const LossValue lv = dice_ce_loss(*b.logits, *b.target, b.logits->channels, g, weight);
        *comp += lv.total;
    }
    t.labeled /= static_cast<double>(n_l);
    if (n_c > 0) {
        t.cpl /= static_cast<double>(n_c);
    }
    if (n_p > 0) {
        t.pl /= static_cast<double>(n_p);
    }
    t.total = t.labeled + cfg.lambda1 * t.cpl + cfg.lambda2 * t.pl;
    return t;
}

TumorLossTerms tumor_loss(const Logits& student_logits, const LabelMap& annotated_target,
                          const LabelMap& corrected_pseudo, const TrainConfig& cfg, Logits* grad,
                          double grad_scale) {
    TumorLossTerms t;
    t.labeled = dice_ce_loss(student_logits, annotated_target, student_logits.channels, grad, grad_scale).total;
    t.cpl = dice_ce_loss(student_logits, corrected_pseudo, student_logits.channels, grad,
                         grad_scale * cfg.lambda_tumor)
                .total;
    t.total = t.labeled + cfg.lambda_tumor * t.cpl;
    return t;
}

}  // namespace stmt
