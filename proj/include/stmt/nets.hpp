#pragma once

// Residual encoder-decoder segmentation network ("Res-UNet") with hand-written
// forward/backward passes, flat parameter storage, EMA and checkpoints.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stmt/volcore.hpp"

namespace stmt {

// Channel-major activations: data[c * voxels + linear_index(z, y, x)].
struct Tensor {
    int channels = 0;
    Shape3 shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int c, Shape3 s, float fill = 0.0F)
        : channels(c), shape(s), data(static_cast<std::size_t>(c) * s.voxels(), fill) {}

    [[nodiscard]] std::size_t voxels() const { return shape.voxels(); }
    float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
    [[nodiscard]] const float* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }
};

using Logits = Tensor;

// Voxelwise argmax over channels; ties go to the lower class index.
LabelMap argmax_labels(const Logits& logits, const Spacing3& spacing);

struct NetSpec {
    int in_channels = 1;
    int num_classes = 2;
    int base_channels = 16;
    // Number of stride-2 downsamplings (and matching upsamplings).
    int num_scales = 5;
    int blocks_per_scale = 1;
    int max_channels = 320;

    [[nodiscard]] int channels_at(int level) const;
    void validate() const;
    friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

struct ParamEntry {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

// Flat parameter storage with a stable, named layout.
struct ParamVector {
    std::vector<ParamEntry> layout;
    std::vector<float> values;

    [[nodiscard]] std::size_t size() const { return values.size(); }
    [[nodiscard]] bool aligned_with(const ParamVector& other) const { return layout == other.layout; }
};

// out_i = decay * teacher_i + (1 - decay) * student_i
ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double decay);
// In-place variant used inside the training loop.
void ema_update_inplace(ParamVector& teacher, const ParamVector& student, double decay);

enum class Mode { Train, Eval };

// Anything that maps a normalized volume to per-class logits at input resolution.
class SegmentationModel {
public:
    virtual ~SegmentationModel() = default;
    [[nodiscard]] virtual int num_classes() const = 0;
    [[nodiscard]] virtual Logits forward(const Volume& v) const = 0;
};

class ResUNet final : public SegmentationModel {
public:
    ResUNet(const NetSpec& spec, std::uint64_t seed);
    ResUNet(const NetSpec& spec, ParamVector params, std::string lineage);

    [[nodiscard]] int num_classes() const override { return spec_.num_classes; }
    [[nodiscard]] Logits forward(const Volume& v) const override;

    // Training forward: keeps intermediate activations for backward().
    Logits forward_train(const Volume& v);
    // Accumulates d(loss)/d(params) into grads(); requires a preceding forward_train.
    void backward(const Logits& dlogits);

    [[nodiscard]] const NetSpec& spec() const { return spec_; }
    [[nodiscard]] const ParamVector& params() const { return params_; }
    ParamVector& params() { return params_; }
    [[nodiscard]] const std::vector<float>& grads() const { return grads_; }
    std::vector<float>& grads() { return grads_; }
    void zero_grad();

    [[nodiscard]] Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }
    [[nodiscard]] const std::string& lineage() const { return lineage_; }
    void set_lineage(std::string s) { lineage_ = std::move(s); }

    ~ResUNet() override;
    ResUNet(const ResUNet& other);
    ResUNet& operator=(const ResUNet& other);
    ResUNet(ResUNet&&) noexcept;
    ResUNet& operator=(ResUNet&&) noexcept;

    struct Impl;

private:
    NetSpec spec_;
    ParamVector params_;
    std::vector<float> grads_;
    Mode mode_ = Mode::Train;
    std::string lineage_;
    std::unique_ptr<Impl> impl_;
};

// Builds the parameter layout (names, offsets, sizes) for a spec without allocating a model.
std::vector<ParamEntry> param_layout(const NetSpec& spec);
std::size_t param_count(const NetSpec& spec);

ResUNet build_model(const NetSpec& spec, std::uint64_t seed);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ResUNet& m, const std::filesystem::path& path);
ResUNet load_checkpoint(const std::filesystem::path& path);
// Rejects checkpoints whose embedded spec differs from `expected`.
ResUNet load_checkpoint(const std::filesystem::path& path, const NetSpec& expected);

}  // namespace stmt
