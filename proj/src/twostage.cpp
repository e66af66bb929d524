#include "stmt/twostage.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <thread>

namespace stmt {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// normalize -> resample -> forward -> argmax at the model's input shape.
LabelMap predict_at(const SegmentationModel& m, const Volume& v, Shape3 shape, const NormStats& norm) {
    const Volume x = resample_image(clip_and_normalize(v, norm), shape);
    return argmax_labels(m.forward(x), x.spacing);
}

}  // namespace

void PipelineBundle::validate() const {
    if (!stage1 || !organ) {
        throw ConfigError("pipeline: stage-1 and organ models are required");
    }
    if (stage1->num_classes() != 2) {
        throw ConfigError("pipeline: stage-1 model must be binary");
    }
    if (organ->num_classes() < 2 || organ->num_classes() > kNumOrganClasses + 1) {
        throw ConfigError("pipeline: organ model must have 2..14 classes");
    }
    if (tumor && tumor->num_classes() != 2) {
        throw ConfigError("pipeline: tumor model must be binary");
    }
    if (!stage1_shape.positive() || !organ_shape.positive() || !tumor_shape.positive()) {
        throw ConfigError("pipeline: model input shapes must be positive");
    }
    if (!organ_label_ids.empty()) {
        if (static_cast<int>(organ_label_ids.size()) != organ->num_classes()) {
            throw ConfigError("pipeline: organ_label_ids needs one entry per organ-model channel");
        }
        for (std::size_t k = 1; k < organ_label_ids.size(); ++k) {
            if (organ_label_ids[k] < 1 || organ_label_ids[k] > kNumOrganClasses) {
                throw ConfigError("pipeline: organ_label_ids must map to organ classes 1..13");
            }
        }
    }
    if (!(options.margin_fraction >= 0.0)) {
        throw ConfigError("pipeline: margin_fraction must be >= 0");
    }
}

BBox locate_abdomen(const PipelineBundle& bundle, const Volume& v) {
    const LabelMap mask = predict_at(*bundle.stage1, v, bundle.stage1_shape, bundle.stage1_norm);
    const auto box = bbox_of_foreground(mask, bundle.options.margin_fraction);
    if (!box) {
        return BBox::full(v.shape);
    }
    return scale_bbox(*box, bundle.stage1_shape, v.shape);
}

LabelMap segment_roi(const PipelineBundle& bundle, const Volume& v, const BBox& b) {
    if (!b.valid() || b.frame_shape != v.shape) {
        throw InvalidArgument("segment_roi: box is not valid in the volume's frame");
    }
    const Volume roi = crop(v, b);
    LabelMap organs;
    LabelMap tumors;
    auto run_organ = [&] { organs = predict_at(*bundle.organ, roi, bundle.organ_shape, bundle.organ_norm); };
    auto run_tumor = [&] {
        if (bundle.tumor) {
            tumors = predict_at(*bundle.tumor, roi, bundle.tumor_shape, bundle.tumor_norm);
        }
    };
    if (bundle.options.concurrent_stage2 && bundle.tumor) {
        std::jthread t(run_tumor);
        run_organ();
    } else {
        run_organ();
        run_tumor();
    }
    if (!bundle.organ_label_ids.empty()) {
        for (auto& c : organs.data) {
            c = static_cast<std::uint8_t>(c == 0 ? 0 : bundle.organ_label_ids[c]);
        }
    }
    organs.num_classes = kNumClasses;
    LabelMap out = resample_label(organs, b.extent());
    if (bundle.tumor) {
        out = merge_organ_tumor(out, resample_label(tumors, b.extent()));
    }
    out.spacing = v.spacing;
    out.num_classes = kNumClasses;
    return out;
}

LabelMap run_pipeline(const PipelineBundle& bundle, const Volume& v, StageTimings* timings) {
    const auto t0 = Clock::now();
    const BBox box = locate_abdomen(bundle, v);
    const double t_locate = seconds_since(t0);
    const auto t1 = Clock::now();
    LabelMap roi = segment_roi(bundle, v, box);
    const double t_segment = seconds_since(t1);
    const auto t2 = Clock::now();
    if (bundle.options.postprocess) {
        roi = largest_component_filter(roi, bundle.options.connectivity, 1, kNumOrganClasses);
    }
    LabelMap out = restore_to_canvas(roi, box, v.shape);
    out.spacing = v.spacing;
    out.num_classes = kNumClasses;
    if (timings != nullptr) {
        timings->locate_s = t_locate;
        timings->segment_s = t_segment;
        timings->postprocess_s = seconds_since(t2);
        timings->total_s = seconds_since(t0);
    }
    return out;
}

CodebookModel::CodebookModel(std::vector<float> codes, std::vector<int> channel_of_code, int num_classes)
    : codes_(std::move(codes)), channel_(std::move(channel_of_code)), num_classes_(num_classes) {
    if (codes_.empty() || codes_.size() != channel_.size()) {
        throw InvalidArgument("CodebookModel: one channel per code required");
    }
    for (int c : channel_) {
        if (c < 0 || c >= num_classes_) {
            throw InvalidArgument("CodebookModel: channel out of range");
        }
    }
}

Logits CodebookModel::forward(const Volume& v) const {
    Logits out(num_classes_, v.shape);
    const std::size_t n = v.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        float best_d = std::numeric_limits<float>::infinity();
        for (std::size_t k = 0; k < codes_.size(); ++k) {
            const float d = std::abs(v.data[i] - codes_[k]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        out.data[static_cast<std::size_t>(channel_[best]) * n + i] = 1.0F;
    }
    return out;
}

}  // namespace stmt
