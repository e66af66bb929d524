#pragma once

// Synthetic abdomen phantoms that reproduce the supervision regimes of a
// partially labelled multi-organ + tumor dataset: fully labelled, partially
// labelled and unlabelled organs; annotated, unannotated and partially
// annotated tumors. The complete truth is written under truth/ and is only
// read by evaluation code.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stmt/labelops.hpp"
#include "stmt/volcore.hpp"

namespace stmt {

struct IntensityModel {
    double air_mean = -800.0;
    double air_sigma = 10.0;
    double body_mean = 20.0;
    double body_sigma = 6.0;
    // Indexed by organ class id - 1.
    std::array<double, kNumOrganClasses> organ_mean{60, 140, 85, 45, 180, 160, 30, 30, 0, 40, 70, 50, 140};
    std::array<double, kNumOrganClasses> organ_sigma{6, 6, 6, 6, 6, 6, 6, 6, 6, 6, 6, 6, 6};
    // Tumor intensity = host organ mean + tumor_offset.
    double tumor_offset = -40.0;
    double tumor_sigma = 6.0;

    friend bool operator==(const IntensityModel&, const IntensityModel&) = default;
};

struct PhantomConfig {
    Shape3 volume_shape{24, 24, 24};
    Spacing3 spacing{1.0, 1.0, 1.0};
    int num_organs = 4;
    double tumor_rate = 0.5;
    // Probability that a labelled case carries tumor annotations at all.
    double tumor_annotation_rate = 0.68;
    // Within an annotated case, probability that each tumor after the first is left unannotated.
    double missed_tumor_rate = 0.0;
    int max_tumors = 1;
    // Tumor radius as a fraction of the host organ's smallest semi-axis.
    double tumor_radius_lo = 0.35;
    double tumor_radius_hi = 0.6;
    double min_tumor_radius_vox = 1.5;
    int n_full = 1;
    int n_partial = 0;
    int n_unlabeled = 0;
    IntensityModel intensity;
    double noise_sigma = 10.0;
    double position_jitter = 0.05;
    double size_jitter = 0.15;
    // Multiplies every organ's semi-axes (small desk volumes need larger organs).
    double organ_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const PhantomConfig&, const PhantomConfig&) = default;
};

enum class Supervision { FullOrgan, PartialOrgan, Unlabeled };

const char* to_string(Supervision s);
Supervision supervision_from_string(const std::string& s);

struct CaseRecord {
    std::string case_id;
    std::string image_path;
    std::optional<std::string> label_path;
    Supervision supervision = Supervision::FullOrgan;
    ClassSet annotated_organ_set;
    bool tumor_annotated = false;
    std::string truth_path;

    friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<CaseRecord> cases;
    PhantomConfig config;
    int format_version = kManifestVersion;

    [[nodiscard]] std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
    [[nodiscard]] const CaseRecord& find(const std::string& case_id) const;
};

// One generated case held in memory.
struct PhantomCase {
    Volume image;
    LabelMap truth;
    LabelMap released;  // meaningful unless supervision == Unlabeled
    CaseRecord record;
};

// Generates case `index` of the dataset described by cfg (deterministic in seed and index).
PhantomCase generate_case(const PhantomConfig& cfg, int index);

// Writes images/, labels/, truth/ and manifest.json under root.
DatasetManifest generate_phantom(const PhantomConfig& cfg, const std::filesystem::path& root);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
// `path` is the manifest file; root becomes its parent directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace stmt
