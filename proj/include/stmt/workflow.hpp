#pragma once

// Data preparation shared by the subcommands and the ablation driver: loading
// cases, normalization statistics, stage-1 ROIs, per-task training samples,
// pseudo-label targets and test-set evaluation.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stmt/evalx.hpp"
#include "stmt/hybridtrain.hpp"
#include "stmt/phantom.hpp"
#include "stmt/twostage.hpp"

namespace stmt {

struct CaseData {
    CaseRecord record;
    Volume image;
    std::optional<LabelMap> released;  // absent for unlabelled cases
    std::optional<LabelMap> truth;     // only read by evaluation
};

std::vector<CaseData> load_cases(const DatasetManifest& m, bool with_truth);
// In-memory equivalent of generate_phantom.
std::vector<CaseData> generate_cases(const PhantomConfig& cfg);

// Foreground statistics over the fully labelled cases' released labels.
NormStats training_norm(const std::vector<CaseData>& cases);

// Stage-1 samples: whole volume, binarized labels of the fully labelled cases.
std::vector<TrainSample> stage1_samples(const std::vector<CaseData>& cases, const NormStats& norm, Shape3 shape);

// Stage-1 boxes for every case (full frame when stage 1 finds nothing).
std::vector<BBox> locate_all(const SegmentationModel& stage1, const std::vector<CaseData>& cases,
                             const NormStats& norm, Shape3 stage1_shape, double margin_fraction);

// Organ samples (tumor masked out) for the given supervision kinds; `kind` is
// stamped on every sample.
std::vector<TrainSample> organ_samples(const std::vector<CaseData>& cases, const std::vector<BBox>& rois,
                                       const NormStats& norm, Shape3 shape, int num_organs,
                                       const std::vector<Supervision>& which, SampleKind kind);

struct PseudoSet {
    std::vector<TrainSample> cpl;  // partially labelled cases, corrected
    std::vector<TrainSample> pl;   // unlabelled cases, raw
    std::vector<LabelMap> raw_cpl_pseudo;  // teacher output before correction (partial cases)
};

PseudoSet pseudo_samples(const SegmentationModel& teacher, const std::vector<CaseData>& cases,
                         const std::vector<BBox>& rois, const NormStats& norm, Shape3 shape, int num_organs);

// Binary tumor samples for tumor-annotated cases (organs masked out).
std::vector<TrainSample> tumor_samples(const std::vector<CaseData>& cases, const std::vector<BBox>& rois,
                                       const NormStats& norm, Shape3 shape);

struct TestScores {
    std::vector<EvalRow> rows;
    EvalReport report;
};

// Runs the pipeline on every case and scores the listed classes against truth.
TestScores evaluate_pipeline(const PipelineBundle& bundle, const std::vector<CaseData>& cases,
                             const std::vector<int>& classes, double nsd_tolerance_mm, int workers);

std::vector<int> organ_class_ids(int num_organs);

}  // namespace stmt
