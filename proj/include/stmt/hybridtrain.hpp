#pragma once

// Losses, augmentation, balanced batch composition and the three trainers:
// plain supervised training, the organ self-training student, and the tumor
// mean teacher with per-iteration corrected pseudo-labels.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stmt/labelops.hpp"
#include "stmt/nets.hpp"
#include "stmt/rng.hpp"
#include "stmt/volcore.hpp"

namespace stmt {

// ---------------------------------------------------------------------------
// Configuration

struct AugmentConfig {
    double p_rotation = 0.2;
    double max_rotation_deg = 15.0;
    double p_scaling = 0.2;
    double scale_lo = 0.85;
    double scale_hi = 1.15;
    double p_noise = 0.15;
    double noise_variance_hi = 0.1;
    double p_blur = 0.1;
    double blur_sigma_lo = 0.5;
    double blur_sigma_hi = 1.0;
    double p_brightness = 0.15;
    double brightness_lo = 0.75;
    double brightness_hi = 1.25;
    double p_contrast = 0.15;
    double contrast_lo = 0.75;
    double contrast_hi = 1.25;
    double p_low_resolution = 0.1;
    double low_res_zoom_lo = 0.5;
    double low_res_zoom_hi = 1.0;
    double p_gamma = 0.1;
    double gamma_lo = 0.7;
    double gamma_hi = 1.5;
    double p_elastic = 0.1;
    double elastic_alpha = 2.0;  // displacement magnitude, voxels
    double elastic_sigma = 3.0;  // smoothing of the displacement field, voxels

    friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct TrainConfig {
    int epochs = 500;
    int iters_per_epoch = 250;
    int batch_size = 2;
    Shape3 input_shape{192, 192, 192};
    double lr0 = 0.01;
    double momentum = 0.99;
    bool nesterov = true;
    double weight_decay = 3e-5;
    double grad_clip_norm = 12.0;
    double lambda1 = 1.0;        // corrected pseudo-labelled organ term
    double lambda2 = 0.5;        // pseudo-labelled (unlabelled-case) organ term
    double lambda_tumor = 1.0;   // corrected tumor pseudo-label term
    double ema_decay = 0.99;
    // Gaussian noise (normalized units) added to the student's input only;
    // 0 keeps teacher and student inputs identical.
    double mt_student_noise = 0.0;
    double augment_strength = 1.0;
    AugmentConfig augment;
    int workers = 1;
    std::uint64_t seed = 0;

    void validate(bool three_kind_batches = false) const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Cosine annealing from lr0 at epoch 0 to 0 at epoch `epochs`.
double cosine_lr(double lr0, int epoch, int epochs);

// ---------------------------------------------------------------------------
// Samples

enum class SampleKind { Labeled, Cpl, Pl, TumorAnnotated };

const char* to_string(SampleKind k);

struct TrainSample {
    Volume image;       // normalized, at the task input shape
    LabelMap target;    // training target at the same shape
    SampleKind kind = SampleKind::Labeled;
    std::string case_id;
    // Tumor task only: the (possibly incomplete) binary tumor annotation.
    std::optional<LabelMap> annotation;
    bool tumor_annotated = false;
};

// crop -> normalize -> resample (image trilinear, label nearest), as at inference.
Volume prepare_image(const Volume& image, const BBox& roi, Shape3 task_shape, const NormStats& stats);
LabelMap prepare_label(const LabelMap& label, const BBox& roi, Shape3 task_shape);

// ---------------------------------------------------------------------------
// Losses

struct LossValue {
    double total = 0.0;
    double dice = 0.0;
    double ce = 0.0;
};

inline constexpr double kDiceEps = 1e-5;

// Soft dice over foreground classes + voxel-mean cross-entropy. When grad is
// non-null it receives d(loss)/d(logits) scaled by grad_scale.
LossValue dice_ce_loss(const Logits& logits, const LabelMap& target, int num_classes, Logits* grad = nullptr,
                       double grad_scale = 1.0);

struct OrganLossTerms {
    double total = 0.0;
    double labeled = 0.0;  // L_ol
    double cpl = 0.0;      // L_cpl
    double pl = 0.0;       // L_pl
    bool has_cpl = false;
    bool has_pl = false;
};

struct KindedPrediction {
    const Logits* logits;
    const LabelMap* target;
    SampleKind kind;
};

// Weight of one sample's dice_ce inside L_o when its kind holds n_of_kind samples of the batch.
double organ_sample_weight(SampleKind kind, std::size_t n_of_kind, const TrainConfig& cfg);

// L_o = L_ol + lambda1 * L_cpl + lambda2 * L_pl; a component is the mean dice_ce over its samples.
// grads (optional, one per prediction) receive the gradient of L_o.
OrganLossTerms organ_loss(const std::vector<KindedPrediction>& batch, const TrainConfig& cfg,
                          std::vector<Logits>* grads = nullptr);

struct TumorLossTerms {
    double total = 0.0;
    double labeled = 0.0;  // L_tl
    double cpl = 0.0;      // L_cpl
};

// L_t = L_tl + lambda * L_cpl for one sample.
TumorLossTerms tumor_loss(const Logits& student_logits, const LabelMap& annotated_target,
                          const LabelMap& corrected_pseudo, const TrainConfig& cfg, Logits* grad = nullptr,
                          double grad_scale = 1.0);

// ---------------------------------------------------------------------------
// Augmentation

struct Augmented {
    Volume image;
    LabelMap label;
    std::vector<LabelMap> extra;  // additional label maps warped identically (e.g. annotations)
};

Augmented augment(const Volume& image, const LabelMap& label, Rng& rng, double strength,
                  const AugmentConfig& cfg = {}, const std::vector<const LabelMap*>& extra = {});

// Rotation about the z axis through the volume centre; multiples of 90 degrees are exact.
Augmented rotate_z(const Volume& image, const LabelMap& label, double degrees);

// ---------------------------------------------------------------------------
// Batches

// Draws one sample from every enabled pool per batch slot group.
class BatchComposer {
public:
    struct Pool {
        SampleKind kind;
        std::string name;
        std::size_t size;
    };

    BatchComposer(std::vector<Pool> pools, int batch_size, std::uint64_t seed);

    struct Draw {
        SampleKind kind;
        std::size_t pool_index;
        std::size_t sample_index;
    };
    std::vector<Draw> next();

private:
    std::vector<Pool> pools_;
    int per_pool_;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// Training

struct IterationLog {
    int iter = 0;
    double lr = 0.0;
    double total = 0.0;
    std::vector<std::pair<std::string, double>> components;
};

struct TrainOutcome {
    ResUNet final_model;
    ResUNet best_model;
    std::vector<double> epoch_loss;
    std::vector<IterationLog> log;
};

struct TrainHooks {
    // Called after every optimizer step (and EMA update for the mean teacher).
    std::function<void(int iter, const ResUNet& student)> on_step;
    // When set, the per-iteration metrics CSV is written here.
    std::optional<std::filesystem::path> metrics_csv;
};

// One SGD (optionally Nesterov) step with weight decay and global-norm clipping.
class SgdOptimizer {
public:
    SgdOptimizer(std::size_t n, double momentum, bool nesterov, double weight_decay, double clip_norm);
    void step(std::vector<float>& params, const std::vector<float>& grads, double lr);

private:
    std::vector<float> velocity_;
    double momentum_;
    bool nesterov_;
    double weight_decay_;
    double clip_norm_;
};

TrainOutcome train_supervised(ResUNet model, const std::vector<TrainSample>& samples, const TrainConfig& cfg,
                              const TrainHooks& hooks = {});

// Pseudo-labels from a teacher for already prepared images.
std::vector<LabelMap> generate_pseudo_labels(const SegmentationModel& teacher, const std::vector<Volume>& images);

// Optimizes L_o over batches holding one sample of each present kind.
TrainOutcome train_student_organ(ResUNet model, const std::vector<TrainSample>& labeled,
                                 const std::vector<TrainSample>& cpl, const std::vector<TrainSample>& pl,
                                 const TrainConfig& cfg, const TrainHooks& hooks = {});

struct MeanTeacherOutcome {
    TrainOutcome student;
    ResUNet teacher;
};

MeanTeacherOutcome train_tumor_mean_teacher(ResUNet model, const std::vector<TrainSample>& samples,
                                            const TrainConfig& cfg, const TrainHooks& hooks = {});

void write_metrics_csv(const std::vector<IterationLog>& log, const std::filesystem::path& path);

}  // namespace stmt
