#include "stmt/evalx.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

namespace stmt {

namespace {

void require_same(const LabelMap& a, const LabelMap& b, const char* what) {
    if (a.shape != b.shape) {
        throw InvalidArgument(std::string(what) + ": shape mismatch");
    }
}

std::vector<std::uint8_t> class_mask(const LabelMap& l, int c) {
    std::vector<std::uint8_t> m(l.data.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = l.data[i] == c ? 1 : 0;
    }
    return m;
}

// 1-D squared distance transform of sampled function f (lower envelope of
// parabolas), with sample pitch h.
void edt_1d(const double* f, double* d, int n, double h, std::vector<int>& v, std::vector<double>& z) {
    const double inf = std::numeric_limits<double>::infinity();
    v.resize(static_cast<std::size_t>(n));
    z.resize(static_cast<std::size_t>(n) + 1);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) {
            continue;
        }
        const double pq = q * h;
        while (k >= 0) {
            const double pv = v[k] * h;
            const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
            if (s <= z[k]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        z[k] = k == 0 ? -inf : ((f[q] + pq * pq) - (f[v[k - 1]] + (v[k - 1] * h) * (v[k - 1] * h))) /
                                    (2.0 * (pq - v[k - 1] * h));
        z[k + 1] = inf;
    }
    if (k < 0) {
        std::fill(d, d + n, inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q * h) {
            ++j;
        }
        const double diff = (q - v[j]) * h;
        d[q] = diff * diff + f[v[j]];
    }
}

}  // namespace

double dsc(const LabelMap& pred, const LabelMap& gt, int class_id) {
    require_same(pred, gt, "dsc");
    std::size_t p = 0;
    std::size_t g = 0;
    std::size_t both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] == class_id;
        const bool b = gt.data[i] == class_id;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::size_t> surface_voxels(const std::vector<std::uint8_t>& mask, Shape3 s) {
    std::vector<std::size_t> out;
    std::size_t i = 0;
    const auto inside = [&](int z, int y, int x) {
        return z >= 0 && y >= 0 && x >= 0 && z < s.d && y < s.h && x < s.w &&
               mask[(static_cast<std::size_t>(z) * s.h + y) * s.w + x] != 0;
    };
    for (int z = 0; z < s.d; ++z) {
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x, ++i) {
                if (mask[i] == 0) {
                    continue;
                }
                if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
                    !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
                    out.push_back(i);
                }
            }
        }
    }
    return out;
}

std::vector<double> distance_to(const std::vector<std::uint8_t>& sites, Shape3 s, const Spacing3& spacing) {
    const double inf = std::numeric_limits<double>::infinity();
    const std::size_t n = s.voxels();
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = sites[i] != 0 ? 0.0 : inf;
    }
    const std::array<int, 3> dims{s.d, s.h, s.w};
    const std::array<std::size_t, 3> stride{static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    const std::array<double, 3> pitch{spacing.z, spacing.y, spacing.x};
    std::vector<double> f;
    std::vector<double> d;
    std::vector<int> v;
    std::vector<double> z;
    for (int axis = 2; axis >= 0; --axis) {
        const int len = dims[axis];
        f.resize(static_cast<std::size_t>(len));
        d.resize(static_cast<std::size_t>(len));
        for (std::size_t start = 0; start < n; ++start) {
            // Visit each line once, from its first element.
            if ((start / stride[axis]) % static_cast<std::size_t>(len) != 0) {
                continue;
            }
            for (int q = 0; q < len; ++q) {
                f[q] = g[start + q * stride[axis]];
            }
            edt_1d(f.data(), d.data(), len, pitch[axis], v, z);
            for (int q = 0; q < len; ++q) {
                g[start + q * stride[axis]] = d[q];
            }
        }
    }
    for (double& x : g) {
        x = std::sqrt(x);
    }
    return g;
}

double nsd(const LabelMap& pred, const LabelMap& gt, int class_id, double tolerance_mm) {
    require_same(pred, gt, "nsd");
    if (pred.spacing != gt.spacing) {
        throw InvalidArgument("nsd: spacing mismatch");
    }
    if (!(tolerance_mm > 0.0)) {
        throw InvalidArgument("nsd: tolerance must be > 0");
    }
    const auto pm = class_mask(pred, class_id);
    const auto gm = class_mask(gt, class_id);
    const auto sp = surface_voxels(pm, pred.shape);
    const auto sg = surface_voxels(gm, gt.shape);
    if (sp.empty() && sg.empty()) {
        return 1.0;
    }
    if (sp.empty() || sg.empty()) {
        return 0.0;
    }
    std::vector<std::uint8_t> sites(pm.size(), 0);
    for (auto i : sg) {
        sites[i] = 1;
    }
    const auto to_g = distance_to(sites, gt.shape, gt.spacing);
    std::fill(sites.begin(), sites.end(), 0);
    for (auto i : sp) {
        sites[i] = 1;
    }
    const auto to_p = distance_to(sites, pred.shape, pred.spacing);
    std::size_t near = 0;
    for (auto i : sp) {
        near += to_g[i] <= tolerance_mm;
    }
    for (auto i : sg) {
        near += to_p[i] <= tolerance_mm;
    }
    return static_cast<double>(near) / static_cast<double>(sp.size() + sg.size());
}

// ---------------------------------------------------------------------------

double auc_mem_time(const MemTimeCurve& c) {
    if (c.samples.size() < 2) {
        throw InvalidArgument("auc_mem_time: curve needs at least 2 samples");
    }
    double a = 0.0;
    for (std::size_t i = 1; i < c.samples.size(); ++i) {
        const auto [t0, m0] = c.samples[i - 1];
        const auto [t1, m1] = c.samples[i];
        a += 0.5 * (m0 + m1) * (t1 - t0);
    }
    return a;
}

double current_rss_mb() {
    std::FILE* f = std::fopen("/proc/self/statm", "r");
    if (f == nullptr) {
        return 0.0;
    }
    long pages_total = 0;
    long pages_rss = 0;
    const int got = std::fscanf(f, "%ld %ld", &pages_total, &pages_rss);
    std::fclose(f);
    if (got != 2) {
        return 0.0;
    }
    return static_cast<double>(pages_rss) * static_cast<double>(sysconf(_SC_PAGESIZE)) / (1024.0 * 1024.0);
}

double CaseProfile::max_mem_mb() const {
    double m = 0.0;
    for (const auto& s : curve.samples) {
        m = std::max(m, s.second);
    }
    return m;
}

CaseProfile profile_case(const std::function<void()>& work, double interval_s,
                         const std::function<double()>& memory_source, CaseProfile* partial) {
    using Clock = std::chrono::steady_clock;
    if (!(interval_s > 0.0)) {
        throw InvalidArgument("profile_case: interval must be > 0");
    }
    std::mutex mu;
    std::condition_variable cv;
    bool done = false;
    CaseProfile prof;
    const auto t0 = Clock::now();
    const auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - t0).count(); };
    prof.curve.samples.emplace_back(0.0, memory_source());
    auto record = [&](double t, double m) {
        std::lock_guard lock(mu);
        if (t > prof.curve.samples.back().first) {
            prof.curve.samples.emplace_back(t, m);
        }
    };
    std::exception_ptr failure;
    {
        std::jthread sampler([&] {
            std::unique_lock lock(mu);
            const auto period = std::chrono::duration<double>(interval_s);
            auto next = t0 + std::chrono::duration_cast<Clock::duration>(period);
            while (!cv.wait_until(lock, next, [&] { return done; })) {
                lock.unlock();
                const double m = memory_source();
                record(elapsed(), m);
                lock.lock();
                next += std::chrono::duration_cast<Clock::duration>(period);
            }
        });
        try {
            work();
        } catch (...) {
            failure = std::current_exception();
        }
        {
            std::lock_guard lock(mu);
            done = true;
        }
        cv.notify_all();
    }
    prof.runtime_s = elapsed();
    const double m_end = memory_source();
    std::lock_guard lock(mu);
    const double t_end = std::max(prof.runtime_s, std::nextafter(prof.curve.samples.back().first, 1e300));
    prof.curve.samples.emplace_back(t_end, m_end);
    if (failure) {
        if (partial != nullptr) {
            *partial = prof;
        }
        std::rethrow_exception(failure);
    }
    return prof;
}

// ---------------------------------------------------------------------------

ClassAggregate aggregate(const std::vector<double>& values) {
    ClassAggregate a;
    a.n = values.size();
    if (values.empty()) {
        return a;
    }
    double s = 0.0;
    for (double v : values) {
        s += v;
    }
    a.mean = s / static_cast<double>(values.size());
    double q = 0.0;
    for (double v : values) {
        q += (v - a.mean) * (v - a.mean);
    }
    a.sd = values.size() > 1 ? std::sqrt(q / static_cast<double>(values.size() - 1)) : 0.0;
    return a;
}

namespace {

std::map<int, ClassAggregate> per_class(const std::vector<EvalRow>& rows, std::map<int, double> EvalRow::*field) {
    std::map<int, std::vector<double>> vals;
    for (const auto& r : rows) {
        for (const auto& [c, v] : r.*field) {
            vals[c].push_back(v);
        }
    }
    std::map<int, ClassAggregate> out;
    for (auto& [c, v] : vals) {
        // Sorting makes the sums independent of row order.
        std::sort(v.begin(), v.end());
        out[c] = aggregate(v);
    }
    return out;
}

std::optional<double> mean_over(const std::map<int, ClassAggregate>& m, int lo, int hi) {
    double s = 0.0;
    int n = 0;
    for (const auto& [c, a] : m) {
        if (c >= lo && c <= hi && a.n > 0) {
            s += a.mean;
            ++n;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return s / n;
}

std::string num(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

std::string fixed(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

}  // namespace

EvalReport build_report(std::vector<EvalRow> rows, const Tolerances& tol, double nsd_tolerance_mm,
                        std::string memory_source) {
    EvalReport r;
    r.tolerances = tol;
    r.nsd_tolerance_mm = nsd_tolerance_mm;
    r.memory_source = std::move(memory_source);
    r.rows = std::move(rows);
    for (const auto& row : r.rows) {
        r.time_flag.push_back(row.runtime_s && *row.runtime_s > tol.runtime_s);
        r.mem_flag.push_back(row.max_mem_mb && *row.max_mem_mb > tol.memory_mb);
    }
    r.dsc_by_class = per_class(r.rows, &EvalRow::dsc);
    r.nsd_by_class = per_class(r.rows, &EvalRow::nsd);
    r.organ_dsc = mean_over(r.dsc_by_class, 1, kNumOrganClasses);
    r.organ_nsd = mean_over(r.nsd_by_class, 1, kNumOrganClasses);
    r.tumor_dsc = mean_over(r.dsc_by_class, kTumorClass, kTumorClass);
    r.tumor_nsd = mean_over(r.nsd_by_class, kTumorClass, kTumorClass);
    return r;
}

EvalRow evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& truth,
                      const std::vector<int>& classes, double nsd_tolerance_mm) {
    EvalRow row;
    row.case_id = case_id;
    for (int c : classes) {
        row.dsc[c] = dsc(pred, truth, c);
        row.nsd[c] = nsd(pred, truth, c, nsd_tolerance_mm);
    }
    return row;
}

void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
    std::set<int> classes;
    for (const auto& row : r.rows) {
        for (const auto& [c, _] : row.dsc) {
            classes.insert(c);
        }
        for (const auto& [c, _] : row.nsd) {
            classes.insert(c);
        }
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot write report " + path.string());
    }
    os << "case_id";
    for (int c : classes) {
        os << ",dsc_" << c << ",nsd_" << c;
    }
    os << ",runtime_s,max_mem_mb,auc_mb_s,time_flag,mem_flag\n";
    const auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        const auto& row = r.rows[i];
        os << row.case_id;
        for (int c : classes) {
            const auto d = row.dsc.find(c);
            const auto n = row.nsd.find(c);
            os << ',' << (d != row.dsc.end() ? num(d->second) : "") << ','
               << (n != row.nsd.end() ? num(n->second) : "");
        }
        os << ',' << opt(row.runtime_s) << ',' << opt(row.max_mem_mb) << ',' << opt(row.auc_mb_s) << ','
           << (r.time_flag[i] ? 1 : 0) << ',' << (r.mem_flag[i] ? 1 : 0) << '\n';
    }
    if (!os) {
        throw Error("failed writing report " + path.string());
    }
}

std::string format_report_table(const EvalReport& r) {
    std::ostringstream os;
    os << "NSD tolerance: " << fixed(r.nsd_tolerance_mm, 2) << " mm; memory source: " << r.memory_source
       << "; limits: " << fixed(r.tolerances.runtime_s, 1) << " s, " << fixed(r.tolerances.memory_mb, 0)
       << " MB; empty-vs-empty scores 1.0\n";
    os << "class   DSC mean+-sd        NSD mean+-sd        n\n";
    for (const auto& [c, a] : r.dsc_by_class) {
        const auto n = r.nsd_by_class.find(c);
        char line[160];
        std::snprintf(line, sizeof line, "%-6d  %6.2f +- %-8.2f   %6.2f +- %-8.2f   %zu\n", c, 100 * a.mean,
                      100 * a.sd, n != r.nsd_by_class.end() ? 100 * n->second.mean : 0.0,
                      n != r.nsd_by_class.end() ? 100 * n->second.sd : 0.0, a.n);
        os << line;
    }
    const auto pct = [](const std::optional<double>& v) { return v ? fixed(100 * *v, 2) : std::string("-"); };
    os << "organ mean DSC " << pct(r.organ_dsc) << "  NSD " << pct(r.organ_nsd) << "\n";
    os << "tumor DSC " << pct(r.tumor_dsc) << "  NSD " << pct(r.tumor_nsd) << "\n";
    bool any_eff = false;
    for (const auto& row : r.rows) {
        any_eff = any_eff || row.runtime_s || row.max_mem_mb;
    }
    if (any_eff) {
        os << "case            Running Time (s)  Max Mem (MB)  Mem-Time AUC (MB*s)  flags\n";
        for (std::size_t i = 0; i < r.rows.size(); ++i) {
            const auto& row = r.rows[i];
            char line[200];
            std::snprintf(line, sizeof line, "%-15s %16s  %12s  %19s  %s%s\n", row.case_id.c_str(),
                          row.runtime_s ? fixed(*row.runtime_s, 2).c_str() : "-",
                          row.max_mem_mb ? fixed(*row.max_mem_mb, 0).c_str() : "-",
                          row.auc_mb_s ? fixed(*row.auc_mb_s, 1).c_str() : "-", r.time_flag[i] ? "TIME " : "",
                          r.mem_flag[i] ? "MEM" : "");
            os << line;
        }
    }
    return os.str();
}

}  // namespace stmt
