#pragma once

// Voxel grids and the geometric / intensity operations used by every stage:
// resampling, cropping, padding back onto the native canvas, bounding boxes
// and foreground-statistics normalization.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "stmt/error.hpp"

namespace stmt {

// Class id layout: 0 background, 1..13 organs, 14 tumor.
inline constexpr int kBackground = 0;
inline constexpr int kNumOrganClasses = 13;
inline constexpr int kTumorClass = 14;
inline constexpr int kNumClasses = 15;

struct Shape3 {
    int d = 0;
    int h = 0;
    int w = 0;

    [[nodiscard]] std::size_t voxels() const {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    [[nodiscard]] bool positive() const { return d >= 1 && h >= 1 && w >= 1; }
    [[nodiscard]] int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    int& operator[](int axis) { return axis == 0 ? d : (axis == 1 ? h : w); }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

// Physical voxel size in mm, (z, y, x) order.
struct Spacing3 {
    double z = 1.0;
    double y = 1.0;
    double x = 1.0;

    [[nodiscard]] double operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
    friend bool operator==(const Spacing3&, const Spacing3&) = default;
};

using Index3 = std::array<int, 3>;

// Dense row-major (z, y, x) grid.
template <typename T>
struct Grid {
    Shape3 shape;
    Spacing3 spacing;
    std::vector<T> data;

    Grid() = default;
    Grid(Shape3 s, Spacing3 sp, T fill = T{}) : shape(s), spacing(sp), data(s.voxels(), fill) {}

    [[nodiscard]] std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * shape.h + static_cast<std::size_t>(y)) * shape.w +
               static_cast<std::size_t>(x);
    }
    T& at(int z, int y, int x) { return data[index(z, y, x)]; }
    [[nodiscard]] const T& at(int z, int y, int x) const { return data[index(z, y, x)]; }
    [[nodiscard]] std::size_t size() const { return data.size(); }
};

struct Volume : Grid<float> {
    using Grid<float>::Grid;
};

struct LabelMap : Grid<std::uint8_t> {
    int num_classes = kNumClasses;

    LabelMap() = default;
    LabelMap(Shape3 s, Spacing3 sp, int classes = kNumClasses, std::uint8_t fill = 0)
        : Grid<std::uint8_t>(s, sp, fill), num_classes(classes) {}
};

// Axis-aligned box, lo inclusive and hi exclusive, indexing into frame_shape.
struct BBox {
    Index3 lo{0, 0, 0};
    Index3 hi{0, 0, 0};
    Shape3 frame_shape;

    [[nodiscard]] Shape3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    [[nodiscard]] bool valid() const;
    [[nodiscard]] bool contains(int z, int y, int x) const {
        return z >= lo[0] && z < hi[0] && y >= lo[1] && y < hi[1] && x >= lo[2] && x < hi[2];
    }
    static BBox full(Shape3 frame) { return {{0, 0, 0}, {frame.d, frame.h, frame.w}, frame}; }
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct NormStats {
    double clip_lo = 0.0;
    double clip_hi = 0.0;
    double mean = 0.0;
    double std = 1.0;

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kStdFloor = 1e-8;
inline constexpr double kDefaultMarginFraction = 0.1;

// Trilinear, voxel-centre aligned, edge clamped. Identity shape returns an exact copy.
Volume resample_image(const Volume& v, Shape3 target_shape);
// Nearest neighbour with the same coordinate mapping as resample_image.
LabelMap resample_label(const LabelMap& l, Shape3 target_shape);

// Source coordinate of target index i when mapping n_in samples onto n_out.
[[nodiscard]] double source_coordinate(int i, int n_in, int n_out);
[[nodiscard]] int nearest_source_index(int i, int n_in, int n_out);

struct VolumeLabelRef {
    const Volume* image;
    const LabelMap* label;
};

// Percentiles (linear interpolation), mean and std of intensities where label > 0,
// pooled across all cases.
NormStats compute_foreground_stats(std::span<const VolumeLabelRef> cases);
[[nodiscard]] double percentile_sorted(std::span<const float> sorted, double pct);

Volume clip_and_normalize(const Volume& v, const NormStats& s);

std::optional<BBox> bbox_of_foreground(const LabelMap& l, double margin_fraction = kDefaultMarginFraction);
BBox scale_bbox(const BBox& b, Shape3 from_shape, Shape3 to_shape);

Volume crop(const Volume& v, const BBox& b);
LabelMap crop(const LabelMap& l, const BBox& b);

// Nearest-resamples l to the box extent and pastes it into a zero canvas.
LabelMap restore_to_canvas(const LabelMap& l, const BBox& b, Shape3 original_shape);

// SVOL1 binary format: ASCII header "SVOL1 <f32|u8> D H W sz sy sx\n" + little-endian payload.
void write_svol(const std::filesystem::path& path, const Volume& v);
void write_svol(const std::filesystem::path& path, const LabelMap& l);
Volume read_svol_image(const std::filesystem::path& path);
LabelMap read_svol_label(const std::filesystem::path& path, int num_classes = kNumClasses);

}  // namespace stmt
