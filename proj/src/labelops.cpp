#include "stmt/labelops.hpp"

#include <array>
#include <cstdlib>
#include <string>
#include <vector>

namespace stmt {

namespace {

void require_same_shape(const LabelMap& a, const LabelMap& b, const char* op) {
    if (a.shape != b.shape) {
        throw InvalidArgument(std::string(op) + ": shape mismatch");
    }
}

std::vector<Index3> neighbour_offsets(Connectivity conn) {
    std::vector<Index3> offs;
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (manhattan == 0) {
                    continue;
                }
                if (conn == Connectivity::Face6 && manhattan > 1) {
                    continue;
                }
                if (conn == Connectivity::Edge18 && manhattan > 2) {
                    continue;
                }
                offs.push_back({dz, dy, dx});
            }
        }
    }
    return offs;
}

}  // namespace

ClassSet organ_classes_present(const LabelMap& l) {
    std::array<bool, 256> seen{};
    for (auto c : l.data) {
        seen[c] = true;
    }
    ClassSet out;
    for (int c = 1; c <= kNumOrganClasses; ++c) {
        if (seen[c]) {
            out.insert(c);
        }
    }
    return out;
}

LabelMap binarize_foreground(const LabelMap& l) {
    LabelMap out = l;
    out.num_classes = 2;
    for (auto& c : out.data) {
        c = c >= 1 ? 1 : 0;
    }
    return out;
}

LabelMap mask_tumor_out(const LabelMap& l) {
    LabelMap out = l;
    for (auto& c : out.data) {
        if (c == kTumorClass) {
            c = 0;
        }
    }
    return out;
}

LabelMap mask_organs_out(const LabelMap& l) {
    LabelMap out = l;
    out.num_classes = 2;
    for (auto& c : out.data) {
        c = c == kTumorClass ? 1 : 0;
    }
    return out;
}

LabelMap correct_pseudo_label(const LabelMap& pseudo, const PartialLabel& partial) {
    require_same_shape(pseudo, partial.labels, "correct_pseudo_label");
    std::array<bool, 256> in_a{};
    for (int c : partial.annotated_set) {
        if (c >= 0 && c < 256) {
            in_a[c] = true;
        }
    }
    LabelMap out = pseudo;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (in_a[out.data[i]]) {
            out.data[i] = 0;
        }
        if (partial.labels.data[i] > 0) {
            out.data[i] = partial.labels.data[i];
        }
    }
    return out;
}

LabelMap correct_tumor_pseudo(const LabelMap& teacher_pred, const LabelMap& partial_tumor, bool annotated) {
    require_same_shape(teacher_pred, partial_tumor, "correct_tumor_pseudo");
    LabelMap out = teacher_pred;
    if (!annotated) {
        return out;
    }
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (partial_tumor.data[i] == 1) {
            out.data[i] = 1;
        }
    }
    return out;
}

LabelMap merge_organ_tumor(const LabelMap& organ_seg, const LabelMap& tumor_seg) {
    require_same_shape(organ_seg, tumor_seg, "merge_organ_tumor");
    LabelMap out = organ_seg;
    out.num_classes = kNumClasses;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (tumor_seg.data[i] == 1) {
            out.data[i] = kTumorClass;
        }
    }
    return out;
}

Connectivity connectivity_from_int(int n) {
    switch (n) {
        case 6: return Connectivity::Face6;
        case 18: return Connectivity::Edge18;
        case 26: return Connectivity::Vertex26;
        default: throw InvalidArgument("connectivity must be 6, 18 or 26, got " + std::to_string(n));
    }
}

LabelMap largest_component_filter(const LabelMap& l, Connectivity conn, int first_class, int last_class) {
    const Shape3 s = l.shape;
    const std::size_t n = l.data.size();
    const auto offs = neighbour_offsets(conn);

    // Components are discovered in raster order, so a component's id order matches
    // the order of its smallest linear index.
    std::vector<int> comp(n, -1);
    std::vector<std::size_t> comp_size;
    std::vector<int> comp_class;
    std::vector<std::size_t> stack;
    for (std::size_t seed = 0; seed < n; ++seed) {
        const int c = l.data[seed];
        if (c == 0 || c < first_class || c > last_class || comp[seed] >= 0) {
            continue;
        }
        const int id = static_cast<int>(comp_size.size());
        comp_size.push_back(0);
        comp_class.push_back(c);
        comp[seed] = id;
        stack.assign(1, seed);
        while (!stack.empty()) {
            const std::size_t v = stack.back();
            stack.pop_back();
            ++comp_size[id];
            const int z = static_cast<int>(v / (static_cast<std::size_t>(s.h) * s.w));
            const int y = static_cast<int>((v / s.w) % s.h);
            const int x = static_cast<int>(v % s.w);
            for (const auto& o : offs) {
                const int nz = z + o[0];
                const int ny = y + o[1];
                const int nx = x + o[2];
                if (nz < 0 || ny < 0 || nx < 0 || nz >= s.d || ny >= s.h || nx >= s.w) {
                    continue;
                }
                const std::size_t u = l.index(nz, ny, nx);
                if (comp[u] < 0 && l.data[u] == c) {
                    comp[u] = id;
                    stack.push_back(u);
                }
            }
        }
    }

    std::array<int, 256> best{};
    best.fill(-1);
    for (int id = 0; id < static_cast<int>(comp_size.size()); ++id) {
        int& b = best[comp_class[id]];
        if (b < 0 || comp_size[id] > comp_size[b]) {
            b = id;
        }
    }
    LabelMap out = l;
    for (std::size_t i = 0; i < n; ++i) {
        if (comp[i] >= 0 && best[comp_class[comp[i]]] != comp[i]) {
            out.data[i] = 0;
        }
    }
    return out;
}

}  // namespace stmt
