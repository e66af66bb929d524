#pragma once

// Label algebra: stage-1 binarization, branch masking, pseudo-label correction,
// tumor overlay and largest-connected-component filtering.

#include <set>

#include "stmt/volcore.hpp"

namespace stmt {

using ClassSet = std::set<int>;

// A label map annotating only the organ classes in annotated_set.
struct PartialLabel {
    LabelMap labels;
    ClassSet annotated_set;
    bool tumor_annotated = false;
};

// Organ classes present in a label map (1..13).
ClassSet organ_classes_present(const LabelMap& l);

LabelMap binarize_foreground(const LabelMap& l);
LabelMap mask_tumor_out(const LabelMap& l);
// Organs to 0, tumor to 1; binary output.
LabelMap mask_organs_out(const LabelMap& l);

// Zero every pseudo voxel whose class is in A, then copy the annotated voxels.
LabelMap correct_pseudo_label(const LabelMap& pseudo, const PartialLabel& partial);

// Annotated cases: union of the teacher prediction and the annotation.
LabelMap correct_tumor_pseudo(const LabelMap& teacher_pred, const LabelMap& partial_tumor, bool annotated);

// Overlay tumor voxels (class 14) on top of the organ segmentation.
LabelMap merge_organ_tumor(const LabelMap& organ_seg, const LabelMap& tumor_seg);

enum class Connectivity { Face6 = 6, Edge18 = 18, Vertex26 = 26 };

Connectivity connectivity_from_int(int n);

// Per class: keep the largest component; ties go to the component holding the
// smallest linear index. Only classes in [first_class, last_class] are filtered.
LabelMap largest_component_filter(const LabelMap& l, Connectivity conn = Connectivity::Vertex26,
                                  int first_class = 1, int last_class = 255);

}  // namespace stmt
