#include "stmt/nets.hpp"

// Small products otherwise take Eigen's coefficient-based path, whose
// vectorised reductions peel according to pointer alignment. Heap addresses
// vary between runs, so results would too; the blocked GEMM packs its
// operands and sums in a fixed order.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

#include "stmt/rng.hpp"

namespace stmt {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

constexpr float kLeakySlope = 0.01F;
constexpr double kNormEps = 1e-5;

struct ConvSpec {
    int cin = 0;
    int cout = 0;
    int stride = 1;
    std::size_t w = 0;
    std::size_t b = 0;
};

struct NormSpec {
    int c = 0;
    std::size_t gamma = 0;
    std::size_t beta = 0;
};

// conv3x3x3 -> instance norm -> optional leaky ReLU
struct ConvNormAct {
    ConvSpec conv;
    NormSpec norm;
    bool act = true;
};

struct ResBlock {
    ConvNormAct first;
    ConvNormAct second;  // no activation; applied after the residual sum
};

struct EncoderLevel {
    ConvNormAct entry;  // stem at level 0, stride-2 downsampling otherwise
    std::vector<ResBlock> blocks;
};

struct UpConvSpec {
    int cin = 0;
    int cout = 0;
    std::size_t w = 0;  // (cout * 8) x cin
    std::size_t b = 0;
};

struct DecoderLevel {
    UpConvSpec up;
    ConvNormAct fuse;
    ConvNormAct refine;
};

struct HeadSpec {
    int cin = 0;
    int cout = 0;
    std::size_t w = 0;
    std::size_t b = 0;
};

struct Architecture {
    std::vector<EncoderLevel> encoder;
    std::vector<DecoderLevel> decoder;  // decoder[l] produces level l
    HeadSpec head;
    std::vector<ParamEntry> layout;
    std::size_t total = 0;
};

class LayoutBuilder {
public:
    explicit LayoutBuilder(Architecture& a) : arch_(a) {}

    std::size_t add(const std::string& name, std::size_t n) {
        const std::size_t off = arch_.total;
        arch_.layout.push_back({name, off, n});
        arch_.total += n;
        return off;
    }

    ConvNormAct cna(const std::string& name, int cin, int cout, int stride, bool act) {
        ConvNormAct u;
        u.conv = {cin, cout, stride, 0, 0};
        u.conv.w = add(name + ".conv.weight", static_cast<std::size_t>(cout) * cin * 27);
        u.conv.b = add(name + ".conv.bias", static_cast<std::size_t>(cout));
        u.norm.c = cout;
        u.norm.gamma = add(name + ".norm.weight", static_cast<std::size_t>(cout));
        u.norm.beta = add(name + ".norm.bias", static_cast<std::size_t>(cout));
        u.act = act;
        return u;
    }

private:
    Architecture& arch_;
};

Architecture make_architecture(const NetSpec& spec) {
    spec.validate();
    Architecture a;
    LayoutBuilder lb(a);
    for (int l = 0; l <= spec.num_scales; ++l) {
        EncoderLevel lev;
        const std::string p = "encoder." + std::to_string(l);
        const int c = spec.channels_at(l);
        if (l == 0) {
            lev.entry = lb.cna(p + ".stem", spec.in_channels, c, 1, true);
        } else {
            lev.entry = lb.cna(p + ".down", spec.channels_at(l - 1), c, 2, true);
        }
        for (int k = 0; k < spec.blocks_per_scale; ++k) {
            const std::string bp = p + ".block" + std::to_string(k);
            ResBlock rb;
            rb.first = lb.cna(bp + ".a", c, c, 1, true);
            rb.second = lb.cna(bp + ".b", c, c, 1, false);
            lev.blocks.push_back(rb);
        }
        a.encoder.push_back(lev);
    }
    a.decoder.resize(spec.num_scales);
    for (int l = spec.num_scales - 1; l >= 0; --l) {
        const std::string p = "decoder." + std::to_string(l);
        const int c = spec.channels_at(l);
        const int below = spec.channels_at(l + 1);
        DecoderLevel d;
        d.up.cin = below;
        d.up.cout = c;
        d.up.w = lb.add(p + ".up.weight", static_cast<std::size_t>(c) * 8 * below);
        d.up.b = lb.add(p + ".up.bias", static_cast<std::size_t>(c));
        d.fuse = lb.cna(p + ".fuse", 2 * c, c, 1, true);
        d.refine = lb.cna(p + ".refine", c, c, 1, true);
        a.decoder[l] = d;
    }
    a.head.cin = spec.channels_at(0);
    a.head.cout = spec.num_classes;
    a.head.w = lb.add("head.weight", static_cast<std::size_t>(a.head.cout) * a.head.cin);
    a.head.b = lb.add("head.bias", static_cast<std::size_t>(a.head.cout));
    return a;
}

Shape3 strided_shape(Shape3 s, int stride) {
    return {(s.d - 1) / stride + 1, (s.h - 1) / stride + 1, (s.w - 1) / stride + 1};
}

// Grow-only scratch buffers; shrinking and regrowing would re-zero memory on every call.
float* col_workspace(std::size_t n) {
    thread_local std::vector<float> buf;
    if (buf.size() < n) {
        buf.resize(n);
    }
    return buf.data();
}

float* aux_workspace(std::size_t n) {
    thread_local std::vector<float> buf;
    if (buf.size() < n) {
        buf.resize(n);
    }
    return buf.data();
}

// 3x3x3 patches, zero padding 1. col is (cin*27) x N_out, row-major.
void im2col(const Tensor& x, int stride, Shape3 os, float* col) {
    const Shape3 is = x.shape;
    const std::size_t n_out = os.voxels();
    for (int ci = 0; ci < x.channels; ++ci) {
        const float* src = x.channel(ci);
        for (int kz = 0; kz < 3; ++kz) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    float* dst = col + (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * n_out;
                    for (int oz = 0; oz < os.d; ++oz) {
                        const int iz = oz * stride + kz - 1;
                        if (iz < 0 || iz >= is.d) {
                            std::fill_n(dst, static_cast<std::size_t>(os.h) * os.w, 0.0F);
                            dst += static_cast<std::size_t>(os.h) * os.w;
                            continue;
                        }
                        for (int oy = 0; oy < os.h; ++oy, dst += os.w) {
                            const int iy = oy * stride + ky - 1;
                            if (iy < 0 || iy >= is.h) {
                                std::fill_n(dst, os.w, 0.0F);
                                continue;
                            }
                            const float* row = src + (static_cast<std::size_t>(iz) * is.h + iy) * is.w;
                            if (stride == 1) {
                                const int lo = std::max(0, 1 - kx);
                                const int hi = std::min(os.w, is.w + 1 - kx);
                                for (int ox = 0; ox < lo; ++ox) {
                                    dst[ox] = 0.0F;
                                }
                                std::memcpy(dst + lo, row + lo + kx - 1, sizeof(float) * std::max(0, hi - lo));
                                for (int ox = std::max(lo, hi); ox < os.w; ++ox) {
                                    dst[ox] = 0.0F;
                                }
                            } else {
                                for (int ox = 0; ox < os.w; ++ox) {
                                    const int ix = ox * stride + kx - 1;
                                    dst[ox] = (ix >= 0 && ix < is.w) ? row[ix] : 0.0F;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int stride, Shape3 os, Tensor& dx) {
    const Shape3 is = dx.shape;
    const std::size_t n_out = os.voxels();
    for (int ci = 0; ci < dx.channels; ++ci) {
        float* dst = dx.channel(ci);
        for (int kz = 0; kz < 3; ++kz) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const float* src = col + (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx) * n_out;
                    for (int oz = 0; oz < os.d; ++oz) {
                        const int iz = oz * stride + kz - 1;
                        if (iz < 0 || iz >= is.d) {
                            src += static_cast<std::size_t>(os.h) * os.w;
                            continue;
                        }
                        for (int oy = 0; oy < os.h; ++oy, src += os.w) {
                            const int iy = oy * stride + ky - 1;
                            if (iy < 0 || iy >= is.h) {
                                continue;
                            }
                            float* row = dst + (static_cast<std::size_t>(iz) * is.h + iy) * is.w;
                            if (stride == 1) {
                                const int lo = std::max(0, 1 - kx);
                                const int hi = std::min(os.w, is.w + 1 - kx);
                                for (int ox = lo; ox < hi; ++ox) {
                                    row[ox + kx - 1] += src[ox];
                                }
                            } else {
                                for (int ox = 0; ox < os.w; ++ox) {
                                    const int ix = ox * stride + kx - 1;
                                    if (ix >= 0 && ix < is.w) {
                                        row[ix] += src[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Fixed summation order; Eigen's sum() depends on the pointer's alignment.
float row_sum(const float* v, std::size_t n) {
    float s = 0.0F;
    for (std::size_t i = 0; i < n; ++i) {
        s += v[i];
    }
    return s;
}

// keep_col, when given, receives the im2col matrix for reuse in backward.
Tensor conv3_forward(const ConvSpec& c, const float* p, const Tensor& x, std::vector<float>* keep_col) {
    const Shape3 os = strided_shape(x.shape, c.stride);
    const std::size_t n = os.voxels();
    const std::size_t k = static_cast<std::size_t>(c.cin) * 27;
    float* col = nullptr;
    if (keep_col != nullptr) {
        keep_col->resize(k * n);
        col = keep_col->data();
    } else {
        col = col_workspace(k * n);
    }
    im2col(x, c.stride, os, col);
    Tensor y(c.cout, os);
    MatMap ym(y.data.data(), c.cout, static_cast<Eigen::Index>(n));
    CMatMap wm(p + c.w, c.cout, static_cast<Eigen::Index>(k));
    CMatMap cm(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    ym.noalias() = wm * cm;
    for (int co = 0; co < c.cout; ++co) {
        ym.row(co).array() += p[c.b + co];
    }
    return y;
}

// col is the im2col matrix of x saved by the forward pass.
void conv3_backward(const ConvSpec& c, const float* p, float* g, const std::vector<float>& col, Shape3 in_shape,
                    const Tensor& dy, Tensor* dx) {
    const Shape3 os = dy.shape;
    const std::size_t n = os.voxels();
    const std::size_t k = static_cast<std::size_t>(c.cin) * 27;
    CMatMap dym(dy.data.data(), c.cout, static_cast<Eigen::Index>(n));
    for (int co = 0; co < c.cout; ++co) {
        g[c.b + co] += row_sum(dy.channel(co), n);
    }
    CMatMap cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MatMap gw(g + c.w, c.cout, static_cast<Eigen::Index>(k));
    gw.noalias() += dym * cm.transpose();
    if (dx != nullptr) {
        float* dcol = aux_workspace(k * n);
        CMatMap wm(p + c.w, c.cout, static_cast<Eigen::Index>(k));
        MatMap dcm(dcol, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        dcm.noalias() = wm.transpose() * dym;
        *dx = Tensor(c.cin, in_shape);
        col2im(dcol, c.stride, os, *dx);
    }
}

struct NormCache {
    std::vector<float> xhat;
    std::vector<double> inv_std;
};

// In-place instance norm + affine on y; fills the cache when given.
void instance_norm_forward(const NormSpec& ns, const float* p, Tensor& y, NormCache* cache) {
    const std::size_t n = y.voxels();
    if (cache != nullptr) {
        cache->xhat.resize(y.data.size());
        cache->inv_std.resize(ns.c);
    }
    for (int c = 0; c < ns.c; ++c) {
        float* v = y.channel(c);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += v[i];
        }
        const double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = v[i] - mean;
            ss += d * d;
        }
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + kNormEps);
        const float gamma = p[ns.gamma + c];
        const float beta = p[ns.beta + c];
        float* xh = cache != nullptr ? cache->xhat.data() + static_cast<std::size_t>(c) * n : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
            const auto h = static_cast<float>((v[i] - mean) * inv);
            if (xh != nullptr) {
                xh[i] = h;
            }
            v[i] = gamma * h + beta;
        }
        if (cache != nullptr) {
            cache->inv_std[c] = inv;
        }
    }
}

// dz (gradient w.r.t. norm output) -> gradient w.r.t. norm input, in place.
void instance_norm_backward(const NormSpec& ns, const float* p, float* g, const NormCache& cache, Tensor& dz) {
    const std::size_t n = dz.voxels();
    for (int c = 0; c < ns.c; ++c) {
        float* d = dz.channel(c);
        const float* xh = cache.xhat.data() + static_cast<std::size_t>(c) * n;
        const double gamma = p[ns.gamma + c];
        double sum_d = 0.0;
        double sum_dx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum_d += d[i];
            sum_dx += static_cast<double>(d[i]) * xh[i];
        }
        g[ns.gamma + c] += static_cast<float>(sum_dx);
        g[ns.beta + c] += static_cast<float>(sum_d);
        // dxhat = gamma * d; dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        const double scale = gamma * cache.inv_std[c];
        const double mean_d = sum_d / static_cast<double>(n);
        const double mean_dx = sum_dx / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            d[i] = static_cast<float>(scale * (d[i] - mean_d - xh[i] * mean_dx));
        }
    }
}

void leaky_inplace(Tensor& t) {
    for (auto& v : t.data) {
        v = v > 0.0F ? v : kLeakySlope * v;
    }
}

// d *= lrelu'(pre), using the post-activation output (same sign as pre).
void leaky_backward(const Tensor& out, Tensor& d) {
    for (std::size_t i = 0; i < d.data.size(); ++i) {
        if (!(out.data[i] > 0.0F)) {
            d.data[i] *= kLeakySlope;
        }
    }
}

struct CnaCache {
    Shape3 input_shape;
    std::vector<float> col;
    NormCache norm;
    Tensor output;
};

Tensor cna_forward(const ConvNormAct& u, const float* p, const Tensor& x, CnaCache* cache) {
    Tensor y = conv3_forward(u.conv, p, x, cache != nullptr ? &cache->col : nullptr);
    instance_norm_forward(u.norm, p, y, cache != nullptr ? &cache->norm : nullptr);
    if (u.act) {
        leaky_inplace(y);
    }
    if (cache != nullptr) {
        cache->input_shape = x.shape;
        cache->output = y;
    }
    return y;
}

Tensor cna_backward(const ConvNormAct& u, const float* p, float* g, CnaCache& cache, Tensor d, bool need_dx) {
    if (u.act) {
        leaky_backward(cache.output, d);
    }
    instance_norm_backward(u.norm, p, g, cache.norm, d);
    Tensor dx;
    conv3_backward(u.conv, p, g, cache.col, cache.input_shape, d, need_dx ? &dx : nullptr);
    return dx;
}

Tensor upconv_forward(const UpConvSpec& u, const float* p, const Tensor& x) {
    const Shape3 is = x.shape;
    const Shape3 os{is.d * 2, is.h * 2, is.w * 2};
    const std::size_t n = is.voxels();
    float* buf = col_workspace(static_cast<std::size_t>(u.cout) * 8 * n);
    MatMap ym(buf, static_cast<Eigen::Index>(u.cout) * 8, static_cast<Eigen::Index>(n));
    CMatMap wm(p + u.w, static_cast<Eigen::Index>(u.cout) * 8, u.cin);
    CMatMap xm(x.data.data(), u.cin, static_cast<Eigen::Index>(n));
    ym.noalias() = wm * xm;
    Tensor y(u.cout, os);
    for (int co = 0; co < u.cout; ++co) {
        float* dst = y.channel(co);
        const float bias = p[u.b + co];
        for (int k = 0; k < 8; ++k) {
            const int a = k >> 2;
            const int b = (k >> 1) & 1;
            const int c = k & 1;
            const float* src = buf + (static_cast<std::size_t>(co) * 8 + k) * n;
            for (int z = 0; z < is.d; ++z) {
                for (int yy = 0; yy < is.h; ++yy) {
                    const float* s = src + (static_cast<std::size_t>(z) * is.h + yy) * is.w;
                    float* drow = dst + (static_cast<std::size_t>(2 * z + a) * os.h + (2 * yy + b)) * os.w + c;
                    for (int xx = 0; xx < is.w; ++xx) {
                        drow[2 * xx] = s[xx] + bias;
                    }
                }
            }
        }
    }
    return y;
}

Tensor upconv_backward(const UpConvSpec& u, const float* p, float* g, const Tensor& x, const Tensor& dy) {
    const Shape3 is = x.shape;
    const Shape3 os = dy.shape;
    const std::size_t n = is.voxels();
    float* buf = col_workspace(static_cast<std::size_t>(u.cout) * 8 * n);
    for (int co = 0; co < u.cout; ++co) {
        const float* src = dy.channel(co);
        double bsum = 0.0;
        for (std::size_t i = 0; i < dy.voxels(); ++i) {
            bsum += src[i];
        }
        g[u.b + co] += static_cast<float>(bsum);
        for (int k = 0; k < 8; ++k) {
            const int a = k >> 2;
            const int b = (k >> 1) & 1;
            const int c = k & 1;
            float* dst = buf + (static_cast<std::size_t>(co) * 8 + k) * n;
            for (int z = 0; z < is.d; ++z) {
                for (int yy = 0; yy < is.h; ++yy) {
                    float* drow = dst + (static_cast<std::size_t>(z) * is.h + yy) * is.w;
                    const float* s = src + (static_cast<std::size_t>(2 * z + a) * os.h + (2 * yy + b)) * os.w + c;
                    for (int xx = 0; xx < is.w; ++xx) {
                        drow[xx] = s[2 * xx];
                    }
                }
            }
        }
    }
    CMatMap dym(buf, static_cast<Eigen::Index>(u.cout) * 8, static_cast<Eigen::Index>(n));
    CMatMap xm(x.data.data(), u.cin, static_cast<Eigen::Index>(n));
    MatMap gw(g + u.w, static_cast<Eigen::Index>(u.cout) * 8, u.cin);
    gw.noalias() += dym * xm.transpose();
    Tensor dx(u.cin, is);
    MatMap dxm(dx.data.data(), u.cin, static_cast<Eigen::Index>(n));
    CMatMap wm(p + u.w, static_cast<Eigen::Index>(u.cout) * 8, u.cin);
    dxm.noalias() = wm.transpose() * dym;
    return dx;
}

Tensor head_forward(const HeadSpec& h, const float* p, const Tensor& x) {
    Tensor y(h.cout, x.shape);
    const auto n = static_cast<Eigen::Index>(x.voxels());
    MatMap ym(y.data.data(), h.cout, n);
    ym.noalias() = CMatMap(p + h.w, h.cout, h.cin) * CMatMap(x.data.data(), h.cin, n);
    for (int c = 0; c < h.cout; ++c) {
        ym.row(c).array() += p[h.b + c];
    }
    return y;
}

Tensor head_backward(const HeadSpec& h, const float* p, float* g, const Tensor& x, const Tensor& dy) {
    const auto n = static_cast<Eigen::Index>(x.voxels());
    CMatMap dym(dy.data.data(), h.cout, n);
    for (int c = 0; c < h.cout; ++c) {
        g[h.b + c] += row_sum(dy.channel(c), static_cast<std::size_t>(n));
    }
    MatMap(g + h.w, h.cout, h.cin).noalias() += dym * CMatMap(x.data.data(), h.cin, n).transpose();
    Tensor dx(h.cin, x.shape);
    MatMap(dx.data.data(), h.cin, n).noalias() = CMatMap(p + h.w, h.cout, h.cin).transpose() * dym;
    return dx;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    Tensor out(a.channels + b.channels, a.shape);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
}

struct PadSpec {
    Index3 before{0, 0, 0};
    Shape3 padded;
};

PadSpec pad_for(Shape3 s, int multiple) {
    PadSpec ps;
    for (int a = 0; a < 3; ++a) {
        const int target = (s[a] + multiple - 1) / multiple * multiple;
        ps.before[a] = (target - s[a]) / 2;
        ps.padded[a] = target;
    }
    return ps;
}

Tensor pad_tensor(const Tensor& t, const PadSpec& ps) {
    if (ps.padded == t.shape) {
        return t;
    }
    Tensor out(t.channels, ps.padded);
    for (int c = 0; c < t.channels; ++c) {
        const float* src = t.channel(c);
        float* dst = out.channel(c);
        for (int z = 0; z < t.shape.d; ++z) {
            for (int y = 0; y < t.shape.h; ++y) {
                const float* s = src + (static_cast<std::size_t>(z) * t.shape.h + y) * t.shape.w;
                float* d = dst + (static_cast<std::size_t>(z + ps.before[0]) * ps.padded.h + (y + ps.before[1])) *
                                     ps.padded.w +
                           ps.before[2];
                std::copy(s, s + t.shape.w, d);
            }
        }
    }
    return out;
}

Tensor unpad_tensor(const Tensor& t, const PadSpec& ps, Shape3 original) {
    if (original == t.shape) {
        return t;
    }
    Tensor out(t.channels, original);
    for (int c = 0; c < t.channels; ++c) {
        const float* src = t.channel(c);
        float* dst = out.channel(c);
        for (int z = 0; z < original.d; ++z) {
            for (int y = 0; y < original.h; ++y) {
                const float* s = src + (static_cast<std::size_t>(z + ps.before[0]) * t.shape.h + (y + ps.before[1])) *
                                           t.shape.w +
                                 ps.before[2];
                std::copy(s, s + original.w, dst + (static_cast<std::size_t>(z) * original.h + y) * original.w);
            }
        }
    }
    return out;
}

Tensor volume_to_tensor(const Volume& v) {
    Tensor t(1, v.shape);
    std::copy(v.data.begin(), v.data.end(), t.data.begin());
    return t;
}

void check_finite(const Volume& v) {
    for (float f : v.data) {
        if (!std::isfinite(f)) {
            throw InvalidArgument("forward: input volume contains non-finite values");
        }
    }
}

}  // namespace

// Activation tape for one training forward pass.
struct ResUNet::Impl {
    Architecture arch;

    struct BlockTape {
        CnaCache first;
        CnaCache second;
        Tensor sum_out;  // after the residual sum + activation
    };
    struct EncTape {
        CnaCache entry;
        std::vector<BlockTape> blocks;
    };
    struct DecTape {
        Tensor up_input;
        CnaCache fuse;
        CnaCache refine;
    };

    bool recorded = false;
    Shape3 input_shape;
    PadSpec pad;
    std::vector<EncTape> enc;
    std::vector<DecTape> dec;
    Tensor head_input;

    explicit Impl(const NetSpec& spec) : arch(make_architecture(spec)) {}

    Tensor run(const float* p, const Volume& v, bool record) {
        const int multiple = 1 << static_cast<int>(arch.encoder.size() - 1);
        PadSpec ps = pad_for(v.shape, multiple);
        Tensor x = pad_tensor(volume_to_tensor(v), ps);
        if (record) {
            recorded = true;
            input_shape = v.shape;
            pad = ps;
            enc.resize(arch.encoder.size());
            dec.resize(arch.decoder.size());
        }
        std::vector<Tensor> skips;
        for (std::size_t l = 0; l < arch.encoder.size(); ++l) {
            const auto& lev = arch.encoder[l];
            EncTape* et = record ? &enc[l] : nullptr;
            x = cna_forward(lev.entry, p, x, et != nullptr ? &et->entry : nullptr);
            if (et != nullptr) {
                et->blocks.resize(lev.blocks.size());
            }
            for (std::size_t k = 0; k < lev.blocks.size(); ++k) {
                const auto& rb = lev.blocks[k];
                BlockTape* bt = et != nullptr ? &et->blocks[k] : nullptr;
                Tensor a = cna_forward(rb.first, p, x, bt != nullptr ? &bt->first : nullptr);
                Tensor b = cna_forward(rb.second, p, a, bt != nullptr ? &bt->second : nullptr);
                for (std::size_t i = 0; i < b.data.size(); ++i) {
                    b.data[i] += x.data[i];
                }
                leaky_inplace(b);
                if (bt != nullptr) {
                    bt->sum_out = b;
                }
                x = std::move(b);
            }
            skips.push_back(x);
        }
        for (int l = static_cast<int>(arch.decoder.size()) - 1; l >= 0; --l) {
            const auto& d = arch.decoder[l];
            DecTape* dt = record ? &dec[l] : nullptr;
            if (dt != nullptr) {
                dt->up_input = x;
            }
            Tensor up = upconv_forward(d.up, p, x);
            Tensor cat = concat(up, skips[l]);
            Tensor f = cna_forward(d.fuse, p, cat, dt != nullptr ? &dt->fuse : nullptr);
            x = cna_forward(d.refine, p, f, dt != nullptr ? &dt->refine : nullptr);
        }
        if (record) {
            head_input = x;
        }
        Tensor logits = head_forward(arch.head, p, x);
        return unpad_tensor(logits, ps, v.shape);
    }

    void backprop(const float* p, float* g, const Tensor& dlogits) {
        if (!recorded) {
            throw Error("backward called without a preceding forward_train");
        }
        Tensor dlp = pad_tensor(dlogits, pad);
        Tensor dx = head_backward(arch.head, p, g, head_input, dlp);
        const std::size_t nl = arch.encoder.size();
        std::vector<Tensor> dskip(nl);
        for (std::size_t l = 0; l < arch.decoder.size(); ++l) {
            const auto& d = arch.decoder[l];
            auto& dt = dec[l];
            Tensor df = cna_backward(d.refine, p, g, dt.refine, std::move(dx), true);
            Tensor dcat = cna_backward(d.fuse, p, g, dt.fuse, std::move(df), true);
            const int cu = d.up.cout;
            Tensor dup(cu, dcat.shape);
            std::copy_n(dcat.data.begin(), dup.data.size(), dup.data.begin());
            Tensor ds(dcat.channels - cu, dcat.shape);
            std::copy(dcat.data.begin() + static_cast<std::ptrdiff_t>(dup.data.size()), dcat.data.end(),
                      ds.data.begin());
            dskip[l] = std::move(ds);
            dx = upconv_backward(d.up, p, g, dt.up_input, dup);
        }
        for (int l = static_cast<int>(nl) - 1; l >= 0; --l) {
            const auto& lev = arch.encoder[l];
            auto& et = enc[l];
            if (static_cast<std::size_t>(l) + 1 < nl) {
                for (std::size_t i = 0; i < dx.data.size(); ++i) {
                    dx.data[i] += dskip[l].data[i];
                }
            }
            for (int k = static_cast<int>(lev.blocks.size()) - 1; k >= 0; --k) {
                const auto& rb = lev.blocks[k];
                auto& bt = et.blocks[k];
                leaky_backward(bt.sum_out, dx);
                Tensor da = cna_backward(rb.second, p, g, bt.second, dx, true);
                Tensor dxin = cna_backward(rb.first, p, g, bt.first, std::move(da), true);
                for (std::size_t i = 0; i < dx.data.size(); ++i) {
                    dx.data[i] += dxin.data[i];
                }
            }
            dx = cna_backward(lev.entry, p, g, et.entry, std::move(dx), l > 0);
        }
        recorded = false;
    }
};

int NetSpec::channels_at(int level) const {
    long c = static_cast<long>(base_channels) << level;
    return static_cast<int>(std::min<long>(c, max_channels));
}

void NetSpec::validate() const {
    if (in_channels != 1) {
        throw InvalidArgument("NetSpec: only single-channel input is supported");
    }
    if (num_classes < 2 || base_channels < 1 || num_scales < 1 || blocks_per_scale < 0 || max_channels < 1) {
        throw InvalidArgument("NetSpec: invalid field (num_classes >= 2, base_channels >= 1, num_scales >= 1)");
    }
}

LabelMap argmax_labels(const Logits& logits, const Spacing3& spacing) {
    LabelMap out(logits.shape, spacing, logits.channels);
    const std::size_t n = logits.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        float bv = logits.data[i];
        for (int c = 1; c < logits.channels; ++c) {
            const float v = logits.data[static_cast<std::size_t>(c) * n + i];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out.data[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

std::vector<ParamEntry> param_layout(const NetSpec& spec) { return make_architecture(spec).layout; }

std::size_t param_count(const NetSpec& spec) { return make_architecture(spec).total; }

ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double decay) {
    ParamVector out = teacher;
    ema_update_inplace(out, student, decay);
    return out;
}

void ema_update_inplace(ParamVector& teacher, const ParamVector& student, double decay) {
    if (!teacher.aligned_with(student) || teacher.values.size() != student.values.size()) {
        throw InvalidArgument("ema_update: teacher and student parameter layouts differ");
    }
    if (!(decay >= 0.0 && decay <= 1.0)) {
        throw InvalidArgument("ema_update: decay must lie in [0, 1]");
    }
    const double keep = decay;
    const double take = 1.0 - decay;
    for (std::size_t i = 0; i < teacher.values.size(); ++i) {
        teacher.values[i] =
            static_cast<float>(keep * static_cast<double>(teacher.values[i]) + take * static_cast<double>(student.values[i]));
    }
}

ResUNet::ResUNet(const NetSpec& spec, std::uint64_t seed) : spec_(spec), impl_(std::make_unique<Impl>(spec)) {
    params_.layout = impl_->arch.layout;
    params_.values.assign(impl_->arch.total, 0.0F);
    grads_.assign(impl_->arch.total, 0.0F);
    lineage_ = "init:seed=" + std::to_string(seed);
    Rng rng(seed);
    auto he = [&](std::size_t off, std::size_t count, double fan_in) {
        const double sd = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope) / fan_in);
        for (std::size_t i = 0; i < count; ++i) {
            params_.values[off + i] = static_cast<float>(rng.normal(0.0, sd));
        }
    };
    auto init_cna = [&](const ConvNormAct& u) {
        he(u.conv.w, static_cast<std::size_t>(u.conv.cout) * u.conv.cin * 27, u.conv.cin * 27.0);
        std::fill_n(params_.values.begin() + static_cast<std::ptrdiff_t>(u.norm.gamma), u.norm.c, 1.0F);
    };
    const auto& a = impl_->arch;
    for (const auto& lev : a.encoder) {
        init_cna(lev.entry);
        for (const auto& rb : lev.blocks) {
            init_cna(rb.first);
            init_cna(rb.second);
        }
    }
    for (const auto& d : a.decoder) {
        he(d.up.w, static_cast<std::size_t>(d.up.cout) * 8 * d.up.cin, d.up.cin * 1.0);
        init_cna(d.fuse);
        init_cna(d.refine);
    }
    he(a.head.w, static_cast<std::size_t>(a.head.cout) * a.head.cin, a.head.cin);
}

ResUNet::ResUNet(const NetSpec& spec, ParamVector params, std::string lineage)
    : spec_(spec), params_(std::move(params)), lineage_(std::move(lineage)), impl_(std::make_unique<Impl>(spec)) {
    if (params_.layout != impl_->arch.layout || params_.values.size() != impl_->arch.total) {
        throw InvalidArgument("ResUNet: parameter vector does not match the spec layout");
    }
    grads_.assign(params_.values.size(), 0.0F);
}

ResUNet::~ResUNet() = default;
ResUNet::ResUNet(ResUNet&&) noexcept = default;
ResUNet& ResUNet::operator=(ResUNet&&) noexcept = default;

ResUNet::ResUNet(const ResUNet& other)
    : spec_(other.spec_),
      params_(other.params_),
      grads_(other.grads_),
      mode_(other.mode_),
      lineage_(other.lineage_),
      impl_(std::make_unique<Impl>(other.spec_)) {}

ResUNet& ResUNet::operator=(const ResUNet& other) {
    if (this != &other) {
        ResUNet tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

Logits ResUNet::forward(const Volume& v) const {
    check_finite(v);
    return impl_->run(params_.values.data(), v, false);
}

Logits ResUNet::forward_train(const Volume& v) {
    check_finite(v);
    return impl_->run(params_.values.data(), v, true);
}

void ResUNet::backward(const Logits& dlogits) {
    if (dlogits.channels != spec_.num_classes || dlogits.shape != impl_->input_shape) {
        throw InvalidArgument("backward: gradient shape does not match the last forward_train");
    }
    impl_->backprop(params_.values.data(), grads_.data(), dlogits);
}

void ResUNet::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0F); }

ResUNet build_model(const NetSpec& spec, std::uint64_t seed) { return ResUNet(spec, seed); }

// Checkpoint layout (all little-endian):
//   8 bytes  magic "STMTCKPT"
//   u32      format version
//   i32 x 6  in_channels, num_classes, base_channels, num_scales, blocks_per_scale, max_channels
//   u32      lineage length, then UTF-8 bytes
//   u64      parameter count
//   f32 x n  parameters in layout order
//   u64      FNV-1a hash of the parameter bytes
namespace {

constexpr char kMagic[8] = {'S', 'T', 'M', 'T', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw FormatError("checkpoint truncated while reading " + std::string(what) + ": " + path.string());
    }
    return v;
}

}  // namespace

void save_checkpoint(const ResUNet& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot open checkpoint for writing: " + path.string());
    }
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    const NetSpec& s = m.spec();
    for (int v : {s.in_channels, s.num_classes, s.base_channels, s.num_scales, s.blocks_per_scale, s.max_channels}) {
        put<std::int32_t>(os, v);
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.lineage().size()));
    os.write(m.lineage().data(), static_cast<std::streamsize>(m.lineage().size()));
    const auto& vals = m.params().values;
    put<std::uint64_t>(os, vals.size());
    os.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(float)));
    put<std::uint64_t>(os, fnv1a(vals.data(), vals.size() * sizeof(float)));
    if (!os) {
        throw Error("checkpoint write failed: " + path.string());
    }
}

ResUNet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw MissingArtifact("checkpoint not found: " + path.string());
    }
    char magic[8] = {};
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("not a checkpoint file (bad magic): " + path.string());
    }
    const auto version = get<std::uint32_t>(is, path, "version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + "): " + path.string());
    }
    NetSpec s;
    s.in_channels = get<std::int32_t>(is, path, "spec");
    s.num_classes = get<std::int32_t>(is, path, "spec");
    s.base_channels = get<std::int32_t>(is, path, "spec");
    s.num_scales = get<std::int32_t>(is, path, "spec");
    s.blocks_per_scale = get<std::int32_t>(is, path, "spec");
    s.max_channels = get<std::int32_t>(is, path, "spec");
    try {
        s.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("checkpoint spec invalid: ") + e.what());
    }
    if (s.num_scales > 12 || s.base_channels > 4096 || s.num_classes > 256 || s.blocks_per_scale > 64) {
        throw FormatError("checkpoint spec out of range: " + path.string());
    }
    const auto lineage_len = get<std::uint32_t>(is, path, "lineage length");
    if (lineage_len > (1U << 20)) {
        throw FormatError("checkpoint lineage length implausible: " + path.string());
    }
    std::string lineage(lineage_len, '\0');
    is.read(lineage.data(), lineage_len);
    if (!is) {
        throw FormatError("checkpoint truncated while reading lineage: " + path.string());
    }
    const auto count = get<std::uint64_t>(is, path, "parameter count");
    const auto layout = param_layout(s);
    const std::size_t expected = layout.empty() ? 0 : layout.back().offset + layout.back().size;
    if (count != expected) {
        throw FormatError("checkpoint parameter count " + std::to_string(count) + " does not match spec (" +
                          std::to_string(expected) + "): " + path.string());
    }
    ParamVector pv;
    pv.layout = layout;
    pv.values.resize(count);
    is.read(reinterpret_cast<char*>(pv.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::uint64_t>(is.gcount()) != count * sizeof(float)) {
        throw FormatError("checkpoint truncated while reading parameters: " + path.string());
    }
    const auto hash = get<std::uint64_t>(is, path, "checksum");
    if (hash != fnv1a(pv.values.data(), count * sizeof(float))) {
        throw FormatError("checkpoint checksum mismatch: " + path.string());
    }
    ResUNet m(s, std::move(pv), std::move(lineage));
    m.set_mode(Mode::Eval);
    return m;
}

ResUNet load_checkpoint(const std::filesystem::path& path, const NetSpec& expected) {
    ResUNet m = load_checkpoint(path);
    if (!(m.spec() == expected)) {
        throw FormatError("checkpoint spec does not match the requested network spec: " + path.string());
    }
    return m;
}

}  // namespace stmt
