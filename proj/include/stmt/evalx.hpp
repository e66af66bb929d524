#pragma once

// Accuracy metrics (DSC, NSD), runtime / memory profiling and report building.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stmt/volcore.hpp"

namespace stmt {

// 2|P∩G| / (|P|+|G|); both empty -> 1.
double dsc(const LabelMap& pred, const LabelMap& gt, int class_id);

inline constexpr double kDefaultNsdToleranceMm = 1.0;

// Boundary voxels: in the mask with at least one 6-neighbour outside it (the
// volume border counts as outside).
std::vector<std::size_t> surface_voxels(const std::vector<std::uint8_t>& mask, Shape3 s);

// Exact Euclidean distance (mm) from every voxel to the nearest set voxel of
// `sites`; +inf everywhere when sites is empty.
std::vector<double> distance_to(const std::vector<std::uint8_t>& sites, Shape3 s, const Spacing3& spacing);

// (|S_P within tol of S_G| + |S_G within tol of S_P|) / (|S_P| + |S_G|); both empty -> 1.
double nsd(const LabelMap& pred, const LabelMap& gt, int class_id, double tolerance_mm = kDefaultNsdToleranceMm);

// ---------------------------------------------------------------------------
// Profiling

struct MemTimeCurve {
    std::string case_id;
    std::vector<std::pair<double, double>> samples;  // (seconds since start, MB)
};

// Trapezoidal area under the curve in MB*s; fewer than 2 samples -> error.
double auc_mem_time(const MemTimeCurve& c);

// Resident set size of this process in MB.
double current_rss_mb();

struct CaseProfile {
    double runtime_s = 0.0;
    MemTimeCurve curve;
    [[nodiscard]] double max_mem_mb() const;
};

// Runs work while a sampler thread records memory every interval_s. The curve
// starts at t=0 and ends at completion. If work throws, the partial profile is
// stored in *partial (when given) and the exception is rethrown.
CaseProfile profile_case(const std::function<void()>& work, double interval_s = 0.1,
                         const std::function<double()>& memory_source = current_rss_mb,
                         CaseProfile* partial = nullptr);

// ---------------------------------------------------------------------------
// Reports

struct Tolerances {
    double runtime_s = 15.0;
    double memory_mb = 4096.0;
};

struct EvalRow {
    std::string case_id;
    std::map<int, double> dsc;  // class id -> value
    std::map<int, double> nsd;
    std::optional<double> runtime_s;
    std::optional<double> max_mem_mb;
    std::optional<double> auc_mb_s;
};

struct ClassAggregate {
    double mean = 0.0;
    double sd = 0.0;
    std::size_t n = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<bool> time_flag;
    std::vector<bool> mem_flag;
    Tolerances tolerances;
    double nsd_tolerance_mm = kDefaultNsdToleranceMm;
    std::string memory_source = "process-rss";
    std::map<int, ClassAggregate> dsc_by_class;
    std::map<int, ClassAggregate> nsd_by_class;
    // Means of the per-class means over organ classes (1..13) and the tumor class.
    std::optional<double> organ_dsc;
    std::optional<double> organ_nsd;
    std::optional<double> tumor_dsc;
    std::optional<double> tumor_nsd;
};

ClassAggregate aggregate(const std::vector<double>& values);

EvalReport build_report(std::vector<EvalRow> rows, const Tolerances& tol = {},
                        double nsd_tolerance_mm = kDefaultNsdToleranceMm, std::string memory_source = "process-rss");

// Per-case metrics against the truth for the given classes.
EvalRow evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& truth,
                      const std::vector<int>& classes, double nsd_tolerance_mm = kDefaultNsdToleranceMm);

// Columns: case_id, then dsc_<c> and nsd_<c> per class (ascending), runtime_s,
// max_mem_mb, auc_mb_s, time_flag, mem_flag.
void write_report_csv(const EvalReport& r, const std::filesystem::path& path);
std::string format_report_table(const EvalReport& r);

}  // namespace stmt
