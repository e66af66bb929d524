#include "stmt/workflow.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace stmt {

std::vector<CaseData> load_cases(const DatasetManifest& m, bool with_truth) {
    std::vector<CaseData> out;
    out.reserve(m.cases.size());
    for (const auto& rec : m.cases) {
        CaseData c;
        c.record = rec;
        c.image = read_svol_image(m.resolve(rec.image_path));
        if (rec.label_path) {
            c.released = read_svol_label(m.resolve(*rec.label_path));
        }
        if (with_truth) {
            c.truth = read_svol_label(m.resolve(rec.truth_path));
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<CaseData> generate_cases(const PhantomConfig& cfg) {
    cfg.validate();
    const int n = cfg.n_full + cfg.n_partial + cfg.n_unlabeled;
    std::vector<CaseData> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        PhantomCase pc = generate_case(cfg, i);
        CaseData c;
        c.record = pc.record;
        c.image = std::move(pc.image);
        if (c.record.supervision != Supervision::Unlabeled) {
            c.released = std::move(pc.released);
        }
        c.truth = std::move(pc.truth);
        out.push_back(std::move(c));
    }
    return out;
}

NormStats training_norm(const std::vector<CaseData>& cases) {
    std::vector<VolumeLabelRef> refs;
    for (const auto& c : cases) {
        if (c.record.supervision == Supervision::FullOrgan && c.released) {
            refs.push_back({&c.image, &*c.released});
        }
    }
    if (refs.empty()) {
        throw InvalidArgument("normalization needs at least one fully labelled case");
    }
    return compute_foreground_stats(refs);
}

std::vector<TrainSample> stage1_samples(const std::vector<CaseData>& cases, const NormStats& norm, Shape3 shape) {
    std::vector<TrainSample> out;
    for (const auto& c : cases) {
        if (c.record.supervision != Supervision::FullOrgan || !c.released) {
            continue;
        }
        const BBox full = BBox::full(c.image.shape);
        TrainSample s;
        s.image = prepare_image(c.image, full, shape, norm);
        s.target = prepare_label(binarize_foreground(*c.released), full, shape);
        s.kind = SampleKind::Labeled;
        s.case_id = c.record.case_id;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<BBox> locate_all(const SegmentationModel& stage1, const std::vector<CaseData>& cases,
                             const NormStats& norm, Shape3 stage1_shape, double margin_fraction) {
    PipelineBundle b;
    b.stage1 = std::shared_ptr<const SegmentationModel>(&stage1, [](const SegmentationModel*) {});
    b.stage1_shape = stage1_shape;
    b.stage1_norm = norm;
    b.options.margin_fraction = margin_fraction;
    std::vector<BBox> out;
    out.reserve(cases.size());
    for (const auto& c : cases) {
        out.push_back(locate_abdomen(b, c.image));
    }
    return out;
}

std::vector<int> organ_class_ids(int num_organs) {
    std::vector<int> ids;
    for (int k = 1; k <= num_organs; ++k) {
        ids.push_back(k);
    }
    return ids;
}

namespace {

LabelMap organ_target(const LabelMap& released, const BBox& roi, Shape3 shape, int num_organs) {
    LabelMap t = prepare_label(mask_tumor_out(released), roi, shape);
    for (auto v : t.data) {
        if (v > num_organs) {
            throw InvalidArgument("organ label " + std::to_string(v) + " exceeds the configured organ count");
        }
    }
    t.num_classes = num_organs + 1;
    return t;
}

}  // namespace

std::vector<TrainSample> organ_samples(const std::vector<CaseData>& cases, const std::vector<BBox>& rois,
                                       const NormStats& norm, Shape3 shape, int num_organs,
                                       const std::vector<Supervision>& which, SampleKind kind) {
    std::vector<TrainSample> out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        if (std::find(which.begin(), which.end(), c.record.supervision) == which.end() || !c.released) {
            continue;
        }
        TrainSample s;
        s.image = prepare_image(c.image, rois[i], shape, norm);
        s.target = organ_target(*c.released, rois[i], shape, num_organs);
        s.kind = kind;
        s.case_id = c.record.case_id;
        out.push_back(std::move(s));
    }
    return out;
}

PseudoSet pseudo_samples(const SegmentationModel& teacher, const std::vector<CaseData>& cases,
                         const std::vector<BBox>& rois, const NormStats& norm, Shape3 shape, int num_organs) {
    PseudoSet out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        const Supervision sup = c.record.supervision;
        if (sup == Supervision::FullOrgan) {
            continue;
        }
        TrainSample s;
        s.image = prepare_image(c.image, rois[i], shape, norm);
        s.case_id = c.record.case_id;
        LabelMap pseudo = generate_pseudo_labels(teacher, {s.image}).front();
        pseudo.num_classes = num_organs + 1;
        if (sup == Supervision::PartialOrgan) {
            PartialLabel partial{organ_target(*c.released, rois[i], shape, num_organs), c.record.annotated_organ_set,
                                 c.record.tumor_annotated};
            s.target = correct_pseudo_label(pseudo, partial);
            s.target.num_classes = num_organs + 1;
            s.kind = SampleKind::Cpl;
            out.raw_cpl_pseudo.push_back(std::move(pseudo));
            out.cpl.push_back(std::move(s));
        } else {
            s.target = std::move(pseudo);
            s.kind = SampleKind::Pl;
            out.pl.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<TrainSample> tumor_samples(const std::vector<CaseData>& cases, const std::vector<BBox>& rois,
                                       const NormStats& norm, Shape3 shape) {
    std::vector<TrainSample> out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        if (!c.record.tumor_annotated || !c.released) {
            continue;
        }
        TrainSample s;
        s.image = prepare_image(c.image, rois[i], shape, norm);
        s.target = prepare_label(mask_organs_out(*c.released), rois[i], shape);
        s.annotation = s.target;
        s.tumor_annotated = true;
        s.kind = SampleKind::TumorAnnotated;
        s.case_id = c.record.case_id;
        out.push_back(std::move(s));
    }
    return out;
}

TestScores evaluate_pipeline(const PipelineBundle& bundle, const std::vector<CaseData>& cases,
                             const std::vector<int>& classes, double nsd_tolerance_mm, int workers) {
    bundle.validate();
    std::vector<EvalRow> rows(cases.size());
    auto work = [&](std::size_t i) {
        const auto& c = cases[i];
        if (!c.truth) {
            throw MissingArtifact("evaluation needs the truth label of " + c.record.case_id);
        }
        const LabelMap pred = run_pipeline(bundle, c.image);
        rows[i] = evaluate_case(c.record.case_id, pred, *c.truth, classes, nsd_tolerance_mm);
    };
    const std::size_t n_workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1,
                                                          std::max<std::size_t>(cases.size(), 1));
    if (n_workers == 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            work(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(n_workers);
        {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < n_workers; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        for (std::size_t i = next++; i < cases.size(); i = next++) {
                            work(i);
                        }
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            }
        }
        for (auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }
    TestScores out;
    out.rows = rows;
    out.report = build_report(std::move(rows), Tolerances{}, nsd_tolerance_mm);
    return out;
}

}  // namespace stmt
