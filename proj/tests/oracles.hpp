#pragma once

// Independent brute-force reference implementations. They trade speed for
// obviousness and share no code with the library beyond the data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <vector>

#include "stmt/evalx.hpp"
#include "stmt/labelops.hpp"
#include "stmt/nets.hpp"
#include "stmt/rng.hpp"
#include "stmt/twostage.hpp"
#include "stmt/volcore.hpp"

namespace oracle {

using namespace stmt;

// Three whole-volume passes, literally as described: find A, zero pseudo
// voxels whose class is in A, then write every annotated voxel's label.
inline LabelMap correct_pseudo(const LabelMap& pseudo, const LabelMap& partial, const std::set<int>& a) {
    LabelMap out = pseudo;
    std::vector<bool> zeroed(out.size(), false);
    for (std::size_t i = 0; i < out.size(); ++i) {
        zeroed[i] = a.count(out.data[i]) > 0;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (zeroed[i]) {
            out.data[i] = 0;
        }
    }
    for (int z = 0; z < out.shape.d; ++z) {
        for (int y = 0; y < out.shape.h; ++y) {
            for (int x = 0; x < out.shape.w; ++x) {
                if (partial.at(z, y, x) != 0) {
                    out.at(z, y, x) = partial.at(z, y, x);
                }
            }
        }
    }
    return out;
}

// BFS flood fill per class; components are discovered in raster order, so the
// first discovered among equally sized ones holds the smallest linear index.
inline LabelMap largest_component(const LabelMap& l, int conn, int first_class, int last_class) {
    const Shape3 s = l.shape;
    LabelMap out = l;
    std::vector<int> comp(l.size(), -1);
    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int n = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (n == 0 || (conn == 6 && n > 1) || (conn == 18 && n > 2)) {
                    continue;
                }
                offsets.push_back({dz, dy, dx});
            }
        }
    }
    std::map<int, std::vector<std::size_t>> sizes_by_class;  // class -> component sizes by id order
    std::map<int, std::vector<int>> ids_by_class;
    int next_id = 0;
    for (int z = 0; z < s.d; ++z) {
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                const int c = l.at(z, y, x);
                if (c == 0 || c < first_class || c > last_class || comp[l.index(z, y, x)] >= 0) {
                    continue;
                }
                const int id = next_id++;
                std::size_t size = 0;
                std::deque<std::array<int, 3>> q{{z, y, x}};
                comp[l.index(z, y, x)] = id;
                while (!q.empty()) {
                    const auto p = q.front();
                    q.pop_front();
                    ++size;
                    for (const auto& o : offsets) {
                        const int zz = p[0] + o[0];
                        const int yy = p[1] + o[1];
                        const int xx = p[2] + o[2];
                        if (zz < 0 || yy < 0 || xx < 0 || zz >= s.d || yy >= s.h || xx >= s.w) {
                            continue;
                        }
                        const std::size_t j = l.index(zz, yy, xx);
                        if (l.data[j] == c && comp[j] < 0) {
                            comp[j] = id;
                            q.push_back({zz, yy, xx});
                        }
                    }
                }
                sizes_by_class[c].push_back(size);
                ids_by_class[c].push_back(id);
            }
        }
    }
    std::vector<bool> keep(static_cast<std::size_t>(next_id), false);
    for (const auto& [c, sizes] : sizes_by_class) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < sizes.size(); ++k) {
            if (sizes[k] > sizes[best]) {
                best = k;
            }
        }
        keep[ids_by_class[c][best]] = true;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (comp[i] >= 0 && !keep[comp[i]]) {
            out.data[i] = 0;
        }
    }
    return out;
}

// Scalar soft dice (foreground classes, eps in the denominator) + voxel-mean CE.
inline double dice_ce(const Logits& logits, const LabelMap& target, int classes, double eps = 1e-5) {
    const std::size_t n = logits.voxels();
    std::vector<std::vector<double>> p(classes, std::vector<double>(n));
    double ce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (int c = 0; c < classes; ++c) {
            z += std::exp(static_cast<double>(logits.channel(c)[i]));
        }
        for (int c = 0; c < classes; ++c) {
            p[c][i] = std::exp(static_cast<double>(logits.channel(c)[i])) / z;
        }
        ce += -std::log(p[target.data[i]][i]);
    }
    ce /= static_cast<double>(n);
    double dice = 0.0;
    for (int c = 1; c < classes; ++c) {
        double inter = 0.0;
        double ps = 0.0;
        double gs = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double g = target.data[i] == c ? 1.0 : 0.0;
            inter += p[c][i] * g;
            ps += p[c][i];
            gs += g;
        }
        dice += 2.0 * inter / (ps + gs + eps);
    }
    return (1.0 - dice / (classes - 1)) + ce;
}

// Surface = mask voxels with a 6-neighbour outside the mask or the volume.
inline std::vector<std::array<int, 3>> surface(const LabelMap& l, int c) {
    std::vector<std::array<int, 3>> out;
    const Shape3 s = l.shape;
    auto inside = [&](int z, int y, int x) {
        return z >= 0 && y >= 0 && x >= 0 && z < s.d && y < s.h && x < s.w && l.at(z, y, x) == c;
    };
    for (int z = 0; z < s.d; ++z) {
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                if (!inside(z, y, x)) {
                    continue;
                }
                if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
                    !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
                    out.push_back({z, y, x});
                }
            }
        }
    }
    return out;
}

// NSD from all pairwise surface distances.
inline double nsd_all_pairs(const LabelMap& pred, const LabelMap& gt, int c, double tol) {
    const auto sp = surface(pred, c);
    const auto sg = surface(gt, c);
    if (sp.empty() && sg.empty()) {
        return 1.0;
    }
    if (sp.empty() || sg.empty()) {
        return 0.0;
    }
    const Spacing3 h = pred.spacing;
    auto nearest = [&](const std::array<int, 3>& a, const std::vector<std::array<int, 3>>& set) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : set) {
            const double dz = (a[0] - b[0]) * h.z;
            const double dy = (a[1] - b[1]) * h.y;
            const double dx = (a[2] - b[2]) * h.x;
            best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
        }
        return best;
    };
    std::size_t ok = 0;
    for (const auto& a : sp) {
        ok += nearest(a, sg) <= tol;
    }
    for (const auto& b : sg) {
        ok += nearest(b, sp) <= tol;
    }
    return static_cast<double>(ok) / static_cast<double>(sp.size() + sg.size());
}

inline LabelMap random_labels(Rng& rng, Shape3 s, int classes, double fill = 0.5) {
    LabelMap l(s, {}, classes);
    for (auto& v : l.data) {
        v = rng.bernoulli(fill) ? static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(classes - 1))) : 0;
    }
    return l;
}

inline Shape3 random_shape(Rng& rng, int max_side) {
    return {1 + static_cast<int>(rng.below(max_side)), 1 + static_cast<int>(rng.below(max_side)),
            1 + static_cast<int>(rng.below(max_side))};
}

// Blobby multi-class maps: random boxes painted over each other, which makes
// several components per class and frequent ties.
inline LabelMap random_blobs(Rng& rng, Shape3 s, int classes, int boxes) {
    LabelMap l(s, {}, classes);
    for (int b = 0; b < boxes; ++b) {
        const auto c = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(classes - 1)));
        std::array<int, 3> lo{};
        std::array<int, 3> hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = static_cast<int>(rng.below(static_cast<std::uint64_t>(s[a])));
            hi[a] = lo[a] + 1 + static_cast<int>(rng.below(3));
            hi[a] = std::min(hi[a], s[a]);
        }
        for (int z = lo[0]; z < hi[0]; ++z) {
            for (int y = lo[1]; y < hi[1]; ++y) {
                for (int x = lo[2]; x < hi[2]; ++x) {
                    l.at(z, y, x) = c;
                }
            }
        }
    }
    return l;
}

// A perfect network for one known case: crops the hidden truth to the box the
// pipeline hands to this stage, resamples it (nearest) to the input grid and
// emits it one-hot through a class -> channel map.
class TruthModel final : public SegmentationModel {
public:
    TruthModel(LabelMap truth, BBox box, std::vector<int> channel_of_class, int num_classes)
        : truth_(std::move(truth)), box_(box), channel_(std::move(channel_of_class)), classes_(num_classes) {}
    [[nodiscard]] int num_classes() const override { return classes_; }
    [[nodiscard]] Logits forward(const Volume& v) const override {
        const LabelMap l = resample_label(crop(truth_, box_), v.shape);
        Logits out(classes_, v.shape);
        for (std::size_t i = 0; i < l.size(); ++i) {
            out.channel(channel_[l.data[i]])[i] = 1.0F;
        }
        return out;
    }

private:
    LabelMap truth_;
    BBox box_;
    std::vector<int> channel_;
    int classes_;
};

// Oracle bundle for one case with organs 1..num_organs and tumors.
inline PipelineBundle truth_bundle(const LabelMap& truth, int num_organs, Shape3 s1, Shape3 s2) {
    std::vector<int> fg(kNumClasses, 1);
    fg[0] = 0;
    std::vector<int> organ(kNumClasses, 0);
    std::vector<int> tumor(kNumClasses, 0);
    for (int k = 1; k <= num_organs; ++k) {
        organ[k] = k;
    }
    tumor[kTumorClass] = 1;
    PipelineBundle b;
    b.stage1_shape = s1;
    b.organ_shape = b.tumor_shape = s2;
    b.stage1_norm = b.organ_norm = b.tumor_norm = NormStats{-1e30, 1e30, 0.0, 1.0};
    b.stage1 = std::make_shared<TruthModel>(truth, BBox::full(truth.shape), fg, 2);
    // Stage 2 sees whatever box stage 1 yields; ask the pipeline for it.
    const BBox roi = locate_abdomen(b, Volume(truth.shape, truth.spacing, 0.0F));
    b.organ = std::make_shared<TruthModel>(truth, roi, organ, num_organs + 1);
    b.tumor = std::make_shared<TruthModel>(truth, roi, tumor, 2);
    return b;
}

}  // namespace oracle
