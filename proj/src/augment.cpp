#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "stmt/hybridtrain.hpp"

namespace stmt {

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 identity3() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

Mat3 mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) {
                r[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    return r;
}

// cos/sin with multiples of 90 degrees snapped to exact values.
std::pair<double, double> cos_sin_deg(double deg) {
    const double q = deg / 90.0;
    const double r = std::round(q);
    if (std::abs(q - r) < 1e-12) {
        static constexpr std::array<std::pair<double, double>, 4> exact{{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}};
        const auto k = static_cast<std::size_t>(((static_cast<long long>(r) % 4) + 4) % 4);
        return exact[k];
    }
    const double a = deg * std::numbers::pi / 180.0;
    return {std::cos(a), std::sin(a)};
}

// Rotation in the plane of axes (p, q) of the (z, y, x) frame.
Mat3 plane_rotation(int p, int q, double deg) {
    const auto [c, s] = cos_sin_deg(deg);
    Mat3 m = identity3();
    m[p][p] = c;
    m[p][q] = -s;
    m[q][p] = s;
    m[q][q] = c;
    return m;
}

// Displacement field (per axis) sampled at every output voxel, in voxels.
struct Displacement {
    std::array<std::vector<float>, 3> d;
    bool active = false;
};

// Warps image (trilinear) and labels (nearest) through out -> src mapping
// src = centre + M (out - centre) + disp(out). Outside the frame the image
// takes `fill` and labels take background.
void warp(const Volume& image, const std::vector<const LabelMap*>& labels, const Mat3& m, const Displacement& disp,
          float fill, Volume& out_image, std::vector<LabelMap>& out_labels) {
    const Shape3 s = image.shape;
    out_image = Volume(s, image.spacing, fill);
    out_labels.clear();
    for (const LabelMap* l : labels) {
        out_labels.emplace_back(s, l->spacing, l->num_classes, 0);
    }
    const std::array<double, 3> c{(s.d - 1) / 2.0, (s.h - 1) / 2.0, (s.w - 1) / 2.0};
    const std::array<int, 3> n{s.d, s.h, s.w};
    std::size_t idx = 0;
    for (int z = 0; z < s.d; ++z) {
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x, ++idx) {
                const std::array<double, 3> o{z - c[0], y - c[1], x - c[2]};
                std::array<double, 3> p{};
                for (int a = 0; a < 3; ++a) {
                    p[a] = c[a] + m[a][0] * o[0] + m[a][1] * o[1] + m[a][2] * o[2];
                    if (disp.active) {
                        p[a] += disp.d[a][idx];
                    }
                }
                // Labels: nearest with half-voxel tolerance at the borders.
                bool label_inside = true;
                std::array<int, 3> r{};
                for (int a = 0; a < 3; ++a) {
                    r[a] = static_cast<int>(std::floor(p[a] + 0.5));
                    if (r[a] < 0 || r[a] >= n[a]) {
                        label_inside = false;
                    }
                }
                if (label_inside) {
                    for (std::size_t k = 0; k < labels.size(); ++k) {
                        out_labels[k].data[idx] = labels[k]->at(r[0], r[1], r[2]);
                    }
                }
                bool inside = true;
                for (int a = 0; a < 3; ++a) {
                    if (p[a] < -0.5 || p[a] > n[a] - 0.5) {
                        inside = false;
                    }
                }
                if (!inside) {
                    continue;
                }
                std::array<int, 3> i0{};
                std::array<int, 3> i1{};
                std::array<double, 3> f{};
                for (int a = 0; a < 3; ++a) {
                    const double q = std::clamp(p[a], 0.0, static_cast<double>(n[a] - 1));
                    i0[a] = static_cast<int>(std::floor(q));
                    i1[a] = std::min(i0[a] + 1, n[a] - 1);
                    f[a] = q - i0[a];
                }
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz) {
                    const double wz = dz != 0 ? f[0] : 1.0 - f[0];
                    if (wz == 0.0) {
                        continue;
                    }
                    for (int dy = 0; dy < 2; ++dy) {
                        const double wy = dy != 0 ? f[1] : 1.0 - f[1];
                        if (wy == 0.0) {
                            continue;
                        }
                        for (int dx = 0; dx < 2; ++dx) {
                            const double wx = dx != 0 ? f[2] : 1.0 - f[2];
                            if (wx == 0.0) {
                                continue;
                            }
                            acc += wz * wy * wx *
                                   image.at(dz != 0 ? i1[0] : i0[0], dy != 0 ? i1[1] : i0[1], dx != 0 ? i1[2] : i0[2]);
                        }
                    }
                }
                out_image.data[idx] = static_cast<float>(acc);
            }
        }
    }
}

std::vector<double> gaussian_kernel(double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + r)];
    }
    for (double& v : k) {
        v /= sum;
    }
    return k;
}

// Separable Gaussian smoothing with clamped borders.
void smooth(std::vector<float>& data, Shape3 s, double sigma) {
    const std::vector<double> k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const std::array<int, 3> n{s.d, s.h, s.w};
    const std::array<std::size_t, 3> stride{static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    std::vector<float> tmp(data.size());
    for (int axis = 0; axis < 3; ++axis) {
        std::size_t idx = 0;
        for (int z = 0; z < s.d; ++z) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x, ++idx) {
                    const int pos = axis == 0 ? z : (axis == 1 ? y : x);
                    const std::size_t base = idx - static_cast<std::size_t>(pos) * stride[axis];
                    double acc = 0.0;
                    for (int t = -r; t <= r; ++t) {
                        const int q = std::clamp(pos + t, 0, n[axis] - 1);
                        acc += k[static_cast<std::size_t>(t + r)] * data[base + static_cast<std::size_t>(q) * stride[axis]];
                    }
                    tmp[idx] = static_cast<float>(acc);
                }
            }
        }
        data.swap(tmp);
    }
}

double clamp01(double p) { return std::clamp(p, 0.0, 1.0); }

}  // namespace

Augmented rotate_z(const Volume& image, const LabelMap& label, double degrees) {
    if (image.shape != label.shape) {
        throw InvalidArgument("rotate_z: image/label shapes differ");
    }
    Augmented out;
    std::vector<LabelMap> labels;
    const float fill = image.data.empty() ? 0.0F : *std::min_element(image.data.begin(), image.data.end());
    warp(image, {&label}, plane_rotation(1, 2, degrees), Displacement{}, fill, out.image, labels);
    out.label = std::move(labels[0]);
    return out;
}

Augmented augment(const Volume& image, const LabelMap& label, Rng& rng, double strength, const AugmentConfig& cfg,
                  const std::vector<const LabelMap*>& extra) {
    if (image.shape != label.shape) {
        throw InvalidArgument("augment: image/label shapes differ");
    }
    for (const LabelMap* e : extra) {
        if (e->shape != image.shape) {
            throw InvalidArgument("augment: extra label shape differs");
        }
    }
    Augmented out;
    if (strength <= 0.0) {
        out.image = image;
        out.label = label;
        for (const LabelMap* e : extra) {
            out.extra.push_back(*e);
        }
        return out;
    }
    const Shape3 s = image.shape;

    // Spatial part: rotation, scaling and elastic deformation share one warp.
    Mat3 m = identity3();
    bool spatial = false;
    if (rng.bernoulli(clamp01(cfg.p_rotation * strength))) {
        const double lim = cfg.max_rotation_deg * strength;
        m = mul(plane_rotation(1, 2, rng.uniform(-lim, lim)), m);
        m = mul(plane_rotation(0, 2, rng.uniform(-lim, lim)), m);
        m = mul(plane_rotation(0, 1, rng.uniform(-lim, lim)), m);
        spatial = true;
    }
    if (rng.bernoulli(clamp01(cfg.p_scaling * strength))) {
        const double f = 1.0 + (rng.uniform(cfg.scale_lo, cfg.scale_hi) - 1.0) * strength;
        for (auto& row : m) {
            for (double& v : row) {
                v /= f;
            }
        }
        spatial = true;
    }
    Displacement disp;
    if (rng.bernoulli(clamp01(cfg.p_elastic * strength))) {
        disp.active = true;
        for (auto& field : disp.d) {
            field.resize(s.voxels());
            for (float& v : field) {
                v = static_cast<float>(rng.uniform(-1.0, 1.0));
            }
            smooth(field, s, cfg.elastic_sigma);
            double mx = 1e-12;
            for (float v : field) {
                mx = std::max(mx, static_cast<double>(std::abs(v)));
            }
            const double scale = cfg.elastic_alpha * strength / mx;
            for (float& v : field) {
                v = static_cast<float>(v * scale);
            }
        }
        spatial = true;
    }
    std::vector<const LabelMap*> all{&label};
    all.insert(all.end(), extra.begin(), extra.end());
    if (spatial) {
        const float fill = *std::min_element(image.data.begin(), image.data.end());
        std::vector<LabelMap> warped;
        warp(image, all, m, disp, fill, out.image, warped);
        out.label = std::move(warped[0]);
        out.extra.assign(std::make_move_iterator(warped.begin() + 1), std::make_move_iterator(warped.end()));
    } else {
        out.image = image;
        out.label = label;
        for (const LabelMap* e : extra) {
            out.extra.push_back(*e);
        }
    }

    std::vector<float>& d = out.image.data;
    if (rng.bernoulli(clamp01(cfg.p_noise * strength))) {
        const double sigma = std::sqrt(rng.uniform(0.0, cfg.noise_variance_hi * strength));
        for (float& v : d) {
            v = static_cast<float>(v + rng.normal(0.0, sigma));
        }
    }
    if (rng.bernoulli(clamp01(cfg.p_blur * strength))) {
        smooth(d, s, rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi) * strength);
    }
    if (rng.bernoulli(clamp01(cfg.p_brightness * strength))) {
        const double f = 1.0 + (rng.uniform(cfg.brightness_lo, cfg.brightness_hi) - 1.0) * strength;
        for (float& v : d) {
            v = static_cast<float>(v * f);
        }
    }
    if (rng.bernoulli(clamp01(cfg.p_contrast * strength))) {
        const double f = 1.0 + (rng.uniform(cfg.contrast_lo, cfg.contrast_hi) - 1.0) * strength;
        double mean = 0.0;
        for (float v : d) {
            mean += v;
        }
        mean /= static_cast<double>(d.size());
        const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
        const double vlo = *lo;
        const double vhi = *hi;
        for (float& v : d) {
            v = static_cast<float>(std::clamp((v - mean) * f + mean, vlo, vhi));
        }
    }
    if (rng.bernoulli(clamp01(cfg.p_low_resolution * strength))) {
        const double zoom = 1.0 - (1.0 - rng.uniform(cfg.low_res_zoom_lo, cfg.low_res_zoom_hi)) * strength;
        Shape3 low{std::max(1, static_cast<int>(std::lround(s.d * zoom))),
                   std::max(1, static_cast<int>(std::lround(s.h * zoom))),
                   std::max(1, static_cast<int>(std::lround(s.w * zoom)))};
        Volume small(low, out.image.spacing);
        for (int z = 0; z < low.d; ++z) {
            for (int y = 0; y < low.h; ++y) {
                for (int x = 0; x < low.w; ++x) {
                    small.at(z, y, x) = out.image.at(nearest_source_index(z, s.d, low.d),
                                                     nearest_source_index(y, s.h, low.h),
                                                     nearest_source_index(x, s.w, low.w));
                }
            }
        }
        const Spacing3 sp = out.image.spacing;
        out.image = resample_image(small, s);
        out.image.spacing = sp;
    }
    if (rng.bernoulli(clamp01(cfg.p_gamma * strength))) {
        const double g = 1.0 + (rng.uniform(cfg.gamma_lo, cfg.gamma_hi) - 1.0) * strength;
        auto& dd = out.image.data;
        const auto [lo, hi] = std::minmax_element(dd.begin(), dd.end());
        const double vlo = *lo;
        const double range = *hi - vlo;
        if (range > 0.0) {
            for (float& v : dd) {
                v = static_cast<float>(vlo + range * std::pow((v - vlo) / range, g));
            }
        }
    }
    return out;
}

}  // namespace stmt
