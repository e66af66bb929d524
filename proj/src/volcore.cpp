#include "stmt/volcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace stmt {

namespace {

void require_target(Shape3 target) {
    if (!target.positive()) {
        throw InvalidArgument("resample: target dims must be >= 1, got (" + std::to_string(target.d) + "," +
                              std::to_string(target.h) + "," + std::to_string(target.w) + ")");
    }
}

Spacing3 rescaled_spacing(const Spacing3& sp, Shape3 from, Shape3 to) {
    return {sp.z * from.d / to.d, sp.y * from.h / to.h, sp.x * from.w / to.w};
}

struct AxisTaps {
    std::vector<int> i0;
    std::vector<int> i1;
    std::vector<double> frac;
};

AxisTaps linear_taps(int n_in, int n_out) {
    AxisTaps t;
    t.i0.resize(n_out);
    t.i1.resize(n_out);
    t.frac.resize(n_out);
    for (int i = 0; i < n_out; ++i) {
        const double s = source_coordinate(i, n_in, n_out);
        const int lo = static_cast<int>(std::floor(s));
        t.i0[i] = std::clamp(lo, 0, n_in - 1);
        t.i1[i] = std::clamp(lo + 1, 0, n_in - 1);
        t.frac[i] = s - lo;
    }
    return t;
}

template <typename G>
G crop_grid(const G& g, const BBox& b) {
    if (!b.valid() || b.frame_shape != g.shape) {
        throw InvalidArgument("crop: box does not lie inside the grid frame");
    }
    G out = g;
    out.shape = b.extent();
    out.data.assign(out.shape.voxels(), {});
    for (int z = 0; z < out.shape.d; ++z) {
        for (int y = 0; y < out.shape.h; ++y) {
            const auto* src = &g.data[g.index(z + b.lo[0], y + b.lo[1], b.lo[2])];
            std::copy(src, src + out.shape.w, &out.data[out.index(z, y, 0)]);
        }
    }
    return out;
}

}  // namespace

bool BBox::valid() const {
    for (int a = 0; a < 3; ++a) {
        if (lo[a] < 0 || lo[a] >= hi[a] || hi[a] > frame_shape[a]) {
            return false;
        }
    }
    return true;
}

double source_coordinate(int i, int n_in, int n_out) {
    if (n_in == n_out) {
        return static_cast<double>(i);
    }
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
}

int nearest_source_index(int i, int n_in, int n_out) {
    if (n_in == n_out) {
        return i;
    }
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out);
    return std::clamp(static_cast<int>(std::floor(s)), 0, n_in - 1);
}

Volume resample_image(const Volume& v, Shape3 target) {
    require_target(target);
    if (target == v.shape) {
        return v;
    }
    Volume out(target, rescaled_spacing(v.spacing, v.shape, target));
    const AxisTaps tz = linear_taps(v.shape.d, target.d);
    const AxisTaps ty = linear_taps(v.shape.h, target.h);
    const AxisTaps tx = linear_taps(v.shape.w, target.w);
    for (int z = 0; z < target.d; ++z) {
        const double fz = tz.frac[z];
        for (int y = 0; y < target.h; ++y) {
            const double fy = ty.frac[y];
            const float* r00 = &v.data[v.index(tz.i0[z], ty.i0[y], 0)];
            const float* r01 = &v.data[v.index(tz.i0[z], ty.i1[y], 0)];
            const float* r10 = &v.data[v.index(tz.i1[z], ty.i0[y], 0)];
            const float* r11 = &v.data[v.index(tz.i1[z], ty.i1[y], 0)];
            float* dst = &out.data[out.index(z, y, 0)];
            for (int x = 0; x < target.w; ++x) {
                const int x0 = tx.i0[x];
                const int x1 = tx.i1[x];
                const double fx = tx.frac[x];
                const double c00 = r00[x0] + (r00[x1] - r00[x0]) * fx;
                const double c01 = r01[x0] + (r01[x1] - r01[x0]) * fx;
                const double c10 = r10[x0] + (r10[x1] - r10[x0]) * fx;
                const double c11 = r11[x0] + (r11[x1] - r11[x0]) * fx;
                const double c0 = c00 + (c01 - c00) * fy;
                const double c1 = c10 + (c11 - c10) * fy;
                dst[x] = static_cast<float>(c0 + (c1 - c0) * fz);
            }
        }
    }
    return out;
}

LabelMap resample_label(const LabelMap& l, Shape3 target) {
    require_target(target);
    if (target == l.shape) {
        return l;
    }
    LabelMap out(target, rescaled_spacing(l.spacing, l.shape, target), l.num_classes);
    std::vector<int> ix(target.w);
    for (int x = 0; x < target.w; ++x) {
        ix[x] = nearest_source_index(x, l.shape.w, target.w);
    }
    for (int z = 0; z < target.d; ++z) {
        const int sz = nearest_source_index(z, l.shape.d, target.d);
        for (int y = 0; y < target.h; ++y) {
            const int sy = nearest_source_index(y, l.shape.h, target.h);
            const auto* row = &l.data[l.index(sz, sy, 0)];
            auto* dst = &out.data[out.index(z, y, 0)];
            for (int x = 0; x < target.w; ++x) {
                dst[x] = row[ix[x]];
            }
        }
    }
    return out;
}

double percentile_sorted(std::span<const float> sorted, double pct) {
    if (sorted.empty()) {
        throw InvalidArgument("percentile of empty sample");
    }
    const double rank = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) + (static_cast<double>(sorted[hi]) - sorted[lo]) * frac;
}

NormStats compute_foreground_stats(std::span<const VolumeLabelRef> cases) {
    std::vector<float> pooled;
    for (const auto& c : cases) {
        if (c.image->shape != c.label->shape) {
            throw InvalidArgument("compute_foreground_stats: image/label shape mismatch");
        }
        for (std::size_t i = 0; i < c.image->size(); ++i) {
            if (c.label->data[i] > 0) {
                pooled.push_back(c.image->data[i]);
            }
        }
    }
    if (pooled.empty()) {
        throw InvalidArgument("compute_foreground_stats: empty foreground across all cases");
    }
    std::sort(pooled.begin(), pooled.end());
    NormStats s;
    s.clip_lo = percentile_sorted(pooled, 0.5);
    s.clip_hi = percentile_sorted(pooled, 99.5);
    // Sum in sorted order so the result does not depend on case order.
    long double sum = 0.0L;
    for (float f : pooled) {
        sum += f;
    }
    const long double mean = sum / static_cast<long double>(pooled.size());
    long double ss = 0.0L;
    for (float f : pooled) {
        const long double d = f - mean;
        ss += d * d;
    }
    s.mean = static_cast<double>(mean);
    s.std = std::max(static_cast<double>(std::sqrt(ss / static_cast<long double>(pooled.size()))), kStdFloor);
    return s;
}

Volume clip_and_normalize(const Volume& v, const NormStats& s) {
    if (!(s.std > 0.0) || s.clip_lo > s.clip_hi) {
        throw InvalidArgument("clip_and_normalize: invalid normalization stats");
    }
    Volume out = v;
    for (auto& f : out.data) {
        const double c = std::clamp(static_cast<double>(f), s.clip_lo, s.clip_hi);
        f = static_cast<float>((c - s.mean) / s.std);
    }
    return out;
}

std::optional<BBox> bbox_of_foreground(const LabelMap& l, double margin_fraction) {
    if (margin_fraction < 0.0) {
        throw InvalidArgument("bbox_of_foreground: margin_fraction must be >= 0");
    }
    Index3 lo{l.shape.d, l.shape.h, l.shape.w};
    Index3 hi{-1, -1, -1};
    for (int z = 0; z < l.shape.d; ++z) {
        for (int y = 0; y < l.shape.h; ++y) {
            const auto* row = &l.data[l.index(z, y, 0)];
            for (int x = 0; x < l.shape.w; ++x) {
                if (row[x] > 0) {
                    lo = {std::min(lo[0], z), std::min(lo[1], y), std::min(lo[2], x)};
                    hi = {std::max(hi[0], z), std::max(hi[1], y), std::max(hi[2], x)};
                }
            }
        }
    }
    if (hi[0] < 0) {
        return std::nullopt;
    }
    BBox b;
    b.frame_shape = l.shape;
    for (int a = 0; a < 3; ++a) {
        const int extent = hi[a] + 1 - lo[a];
        const int pad = static_cast<int>(std::ceil(margin_fraction * extent));
        b.lo[a] = std::max(0, lo[a] - pad);
        b.hi[a] = std::min(l.shape[a], hi[a] + 1 + pad);
    }
    return b;
}

BBox scale_bbox(const BBox& b, Shape3 from, Shape3 to) {
    if (!from.positive() || !to.positive()) {
        throw InvalidArgument("scale_bbox: shapes must be >= 1");
    }
    BBox out;
    out.frame_shape = to;
    for (int a = 0; a < 3; ++a) {
        const double r = static_cast<double>(to[a]) / static_cast<double>(from[a]);
        int lo = static_cast<int>(std::floor(b.lo[a] * r));
        int hi = static_cast<int>(std::ceil(b.hi[a] * r));
        lo = std::clamp(lo, 0, to[a] - 1);
        hi = std::clamp(hi, lo + 1, to[a]);
        out.lo[a] = lo;
        out.hi[a] = hi;
    }
    return out;
}

Volume crop(const Volume& v, const BBox& b) { return crop_grid(v, b); }
LabelMap crop(const LabelMap& l, const BBox& b) { return crop_grid(l, b); }

LabelMap restore_to_canvas(const LabelMap& l, const BBox& b, Shape3 original_shape) {
    if (!b.valid() || b.frame_shape != original_shape) {
        throw InvalidArgument("restore_to_canvas: box inconsistent with original shape");
    }
    const Shape3 ext = b.extent();
    const LabelMap fitted = resample_label(l, ext);
    // Spacing of the canvas: the crop had the native spacing, so undo the box resampling ratio.
    Spacing3 sp{fitted.spacing.z, fitted.spacing.y, fitted.spacing.x};
    LabelMap out(original_shape, sp, l.num_classes);
    for (int z = 0; z < ext.d; ++z) {
        for (int y = 0; y < ext.h; ++y) {
            const auto* src = &fitted.data[fitted.index(z, y, 0)];
            std::copy(src, src + ext.w, &out.data[out.index(z + b.lo[0], y + b.lo[1], b.lo[2])]);
        }
    }
    return out;
}

}  // namespace stmt
