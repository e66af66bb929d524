#pragma once

// Coarse-to-fine whole-volume inference: stage 1 finds the abdomen box on a
// downsampled volume, stage 2 segments organs and tumors inside the box, and
// the result is post-processed and restored to the native grid.

#include <memory>
#include <vector>

#include "stmt/labelops.hpp"
#include "stmt/nets.hpp"
#include "stmt/volcore.hpp"

namespace stmt {

struct PipelineOptions {
    double margin_fraction = kDefaultMarginFraction;
    Connectivity connectivity = Connectivity::Vertex26;
    bool postprocess = true;
    // Run the organ and tumor forwards on two threads instead of one after the other.
    bool concurrent_stage2 = false;

    friend bool operator==(const PipelineOptions&, const PipelineOptions&) = default;
};

struct PipelineBundle {
    std::shared_ptr<const SegmentationModel> stage1;  // binary
    std::shared_ptr<const SegmentationModel> organ;   // background + organ classes
    std::shared_ptr<const SegmentationModel> tumor;   // binary; optional
    Shape3 stage1_shape{128, 128, 128};
    Shape3 organ_shape{192, 192, 192};
    Shape3 tumor_shape{192, 192, 192};
    NormStats stage1_norm;
    NormStats organ_norm;
    NormStats tumor_norm;
    // Output label id of organ channel k (k >= 1); empty means channel k -> label k.
    std::vector<int> organ_label_ids;
    PipelineOptions options;

    void validate() const;
};

struct StageTimings {
    double locate_s = 0.0;
    double segment_s = 0.0;
    double postprocess_s = 0.0;
    double total_s = 0.0;
};

// Stage-1 box in v's frame; the full frame when stage 1 finds nothing.
BBox locate_abdomen(const PipelineBundle& bundle, const Volume& v);

// Labels for the box region at native resolution (shape == b.extent()).
LabelMap segment_roi(const PipelineBundle& bundle, const Volume& v, const BBox& b);

LabelMap run_pipeline(const PipelineBundle& bundle, const Volume& v, StageTimings* timings = nullptr);

// Classifies every voxel by its nearest intensity code; code i votes for
// channel channel_of_code[i]. Used as an exact stand-in for trained networks
// on phantoms whose classes are encoded as distinct noiseless intensities.
class CodebookModel final : public SegmentationModel {
public:
    CodebookModel(std::vector<float> codes, std::vector<int> channel_of_code, int num_classes);

    [[nodiscard]] int num_classes() const override { return num_classes_; }
    [[nodiscard]] Logits forward(const Volume& v) const override;

private:
    std::vector<float> codes_;
    std::vector<int> channel_;
    int num_classes_;
};

// Emits all-zero logits (every voxel background after argmax).
class ConstantModel final : public SegmentationModel {
public:
    explicit ConstantModel(int num_classes) : num_classes_(num_classes) {}
    [[nodiscard]] int num_classes() const override { return num_classes_; }
    [[nodiscard]] Logits forward(const Volume& v) const override { return Logits(num_classes_, v.shape); }

private:
    int num_classes_;
};

}  // namespace stmt
