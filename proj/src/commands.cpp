#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "stmt/cli.hpp"
#include "stmt/evalx.hpp"
#include "stmt/rng.hpp"
#include "stmt/workflow.hpp"

namespace stmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Output directories under the run root, and the subcommand that produces each.
struct Artifact {
    const char* dir;
    const char* producer;
};

constexpr Artifact kPhantom{"phantom", "phantom"};
constexpr Artifact kStage1{"stage1", "train-stage1"};
constexpr Artifact kTeacher{"teacher", "train-teacher"};
constexpr Artifact kPseudo{"pseudo", "pseudo"};
constexpr Artifact kOrganStudent{"organ_student", "train-organ-student"};
constexpr Artifact kTumorMt{"tumor_mt", "train-tumor-mt"};
constexpr Artifact kInfer{"infer", "infer"};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

void log(const CommandContext& ctx, const std::string& msg) {
    if (!ctx.quiet) {
        std::cerr << msg << '\n';
    }
}

fs::path artifact_dir(const CommandContext& ctx, const Artifact& a) { return ctx.run_root / a.dir; }

void require(const fs::path& p, const Artifact& a) {
    if (!fs::exists(p)) {
        throw MissingArtifact("missing " + p.string() + "; run `stmt " + a.producer + "` first");
    }
}

// Creates (or, with force, recreates) an output directory.
fs::path open_output(const CommandContext& ctx, const fs::path& dir) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!ctx.force) {
            throw ConfigError("output directory " + dir.string() + " already exists; pass --force to overwrite");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot write " + p.string());
    }
    os << text;
    if (!os) {
        throw Error("failed writing " + p.string());
    }
}

std::string read_text(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) {
        throw MissingArtifact("cannot read " + p.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_run_record(const CommandContext& ctx, const fs::path& dir, const std::string& command,
                      const std::vector<fs::path>& inputs) {
    json in = json::array();
    for (const auto& p : inputs) {
        in.push_back(p.string());
    }
    const json doc{{"command", command},
                   {"config_hash", hex64(ctx.config.hash())},
                   {"seed", ctx.config.seed()},
                   {"inputs", in},
                   {"config_sources", ctx.config.provenance()}};
    write_text(dir / "run.json", doc.dump(2) + "\n");
    write_text(dir / "config.txt", ctx.config.echo());
}

json norm_to_json(const NormStats& n) {
    return json{{"clip_lo", n.clip_lo}, {"clip_hi", n.clip_hi}, {"mean", n.mean}, {"std", n.std}};
}

NormStats norm_from_json(const json& j) {
    try {
        return NormStats{j.at("clip_lo").get<double>(), j.at("clip_hi").get<double>(), j.at("mean").get<double>(),
                         j.at("std").get<double>()};
    } catch (const json::exception& e) {
        throw FormatError(std::string("norm.json: ") + e.what());
    }
}

NormStats load_norm(const CommandContext& ctx) {
    const fs::path p = artifact_dir(ctx, kStage1) / "norm.json";
    require(p, kStage1);
    try {
        return norm_from_json(json::parse(read_text(p)));
    } catch (const json::parse_error& e) {
        throw FormatError("norm.json: " + std::string(e.what()));
    }
}

DatasetManifest train_manifest(const CommandContext& ctx) {
    const fs::path p = artifact_dir(ctx, kPhantom) / "train" / "manifest.json";
    require(p, kPhantom);
    return load_manifest(p);
}

ResUNet load_model(const fs::path& p, const Artifact& a, const NetSpec& spec) {
    require(p, a);
    return load_checkpoint(p, spec);
}

TrainHooks hooks_for(const fs::path& dir) {
    TrainHooks h;
    h.metrics_csv = dir / "metrics.csv";
    return h;
}

void save_outcome(const TrainOutcome& o, const fs::path& dir) {
    save_checkpoint(o.final_model, dir / "model.ckpt");
    save_checkpoint(o.best_model, dir / "best.ckpt");
    std::string s = "epoch,loss\n";
    for (std::size_t e = 0; e < o.epoch_loss.size(); ++e) {
        s += std::to_string(e) + "," + num(o.epoch_loss[e]) + "\n";
    }
    write_text(dir / "epoch_loss.csv", s);
}

// Stage-1 ROIs for the training cases.
std::vector<BBox> training_rois(const CommandContext& ctx, const std::vector<CaseData>& cases, const NormStats& norm) {
    const RunConfig& c = ctx.config;
    const ResUNet s1 = load_model(artifact_dir(ctx, kStage1) / "model.ckpt", kStage1, c.net(Task::Stage1));
    return locate_all(s1, cases, norm, c.train(Task::Stage1).input_shape, c.pipeline().margin_fraction);
}

std::vector<fs::path> svol_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".svol") {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

json box_to_json(const BBox& b) {
    return json{{"lo", {b.lo[0], b.lo[1], b.lo[2]}}, {"hi", {b.hi[0], b.hi[1], b.hi[2]}}};
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; the first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), std::max<std::size_t>(n, 1));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(w);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < w; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = next++; i < n; i = next++) {
                        fn(i);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

std::shared_ptr<const SegmentationModel> shared(ResUNet m) {
    m.set_mode(Mode::Eval);
    return std::make_shared<const ResUNet>(std::move(m));
}

}  // namespace

fs::path default_run_root() {
    if (const char* env = std::getenv("STMT_RUN_ROOT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "runs";
}

// ---------------------------------------------------------------------------

void cmd_phantom(const CommandContext& ctx) {
    ctx.config.validate();
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kPhantom));
    const auto train = generate_phantom(ctx.config.phantom(), dir / "train");
    const auto test = generate_phantom(ctx.config.test_phantom(), dir / "test");
    write_run_record(ctx, dir, "phantom", {});
    log(ctx, "phantom: " + std::to_string(train.cases.size()) + " training and " + std::to_string(test.cases.size()) +
                 " test cases in " + dir.string());
}

void cmd_train_stage1(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    c.validate();
    const auto manifest = train_manifest(ctx);
    const auto cases = load_cases(manifest, false);
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kStage1));
    const NormStats norm = training_norm(cases);
    write_text(dir / "norm.json", norm_to_json(norm).dump(2) + "\n");
    const TrainConfig tc = c.train(Task::Stage1);
    const auto samples = stage1_samples(cases, norm, tc.input_shape);
    ResUNet model = build_model(c.net(Task::Stage1), mix_seed(c.seed(), 11));
    model.set_lineage("stage1");
    const auto out = train_supervised(std::move(model), samples, tc, hooks_for(dir));
    save_outcome(out, dir);
    write_run_record(ctx, dir, "train-stage1", {manifest.root / "manifest.json"});
    log(ctx, "train-stage1: final loss " + num(out.epoch_loss.back()));
}

void cmd_train_teacher(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    c.validate();
    const auto manifest = train_manifest(ctx);
    const auto cases = load_cases(manifest, false);
    const NormStats norm = load_norm(ctx);
    const auto rois = training_rois(ctx, cases, norm);
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kTeacher));
    const TrainConfig tc = c.train(Task::Organ);
    const auto samples = organ_samples(cases, rois, norm, tc.input_shape, c.phantom().num_organs,
                                       {Supervision::FullOrgan}, SampleKind::Labeled);
    ResUNet model = build_model(c.net(Task::Organ), mix_seed(c.seed(), 12));
    model.set_lineage("organ-teacher");
    const auto out = train_supervised(std::move(model), samples, tc, hooks_for(dir));
    save_outcome(out, dir);
    write_run_record(ctx, dir, "train-teacher",
                     {manifest.root / "manifest.json", artifact_dir(ctx, kStage1) / "model.ckpt"});
    log(ctx, "train-teacher: final loss " + num(out.epoch_loss.back()));
}

void cmd_pseudo(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    c.validate();
    const auto manifest = train_manifest(ctx);
    const auto cases = load_cases(manifest, false);
    const NormStats norm = load_norm(ctx);
    const fs::path teacher_path = artifact_dir(ctx, kTeacher) / "model.ckpt";
    const ResUNet teacher = load_model(teacher_path, kTeacher, c.net(Task::Organ));
    const auto rois = training_rois(ctx, cases, norm);
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kPseudo));
    const Shape3 shape = c.train(Task::Organ).input_shape;
    const int num_organs = c.phantom().num_organs;
    const auto set = pseudo_samples(teacher, cases, rois, norm, shape, num_organs);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "pseudo");
    fs::create_directories(dir / "targets");
    const std::string teacher_id = hex64(fnv1a(read_text(teacher_path)));
    json entries = json::array();
    auto emit = [&](const TrainSample& s, const LabelMap& raw) {
        write_svol(dir / "images" / (s.case_id + ".svol"), s.image);
        write_svol(dir / "pseudo" / (s.case_id + ".svol"), raw);
        write_svol(dir / "targets" / (s.case_id + ".svol"), s.target);
        std::size_t idx = 0;
        while (cases[idx].record.case_id != s.case_id) {
            ++idx;
        }
        entries.push_back(json{{"case_id", s.case_id},
                               {"kind", to_string(s.kind)},
                               {"roi", box_to_json(rois[idx])},
                               {"teacher", teacher_id}});
    };
    for (std::size_t i = 0; i < set.cpl.size(); ++i) {
        emit(set.cpl[i], set.raw_cpl_pseudo[i]);
    }
    for (const auto& s : set.pl) {
        emit(s, s.target);
    }
    write_text(dir / "pseudo.json", json{{"teacher", teacher_id}, {"cases", entries}}.dump(2) + "\n");
    write_run_record(ctx, dir, "pseudo", {manifest.root / "manifest.json", teacher_path});
    log(ctx, "pseudo: " + std::to_string(set.cpl.size()) + " corrected, " + std::to_string(set.pl.size()) +
                 " uncorrected pseudo-labels");
}

void cmd_train_organ_student(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    c.validate();
    const auto manifest = train_manifest(ctx);
    const auto cases = load_cases(manifest, false);
    const NormStats norm = load_norm(ctx);
    const fs::path pdir = artifact_dir(ctx, kPseudo);
    require(pdir / "pseudo.json", kPseudo);
    const TrainConfig tc = c.train(Task::Organ);
    const int num_organs = c.phantom().num_organs;
    std::vector<TrainSample> cpl;
    std::vector<TrainSample> pl;
    const json doc = json::parse(read_text(pdir / "pseudo.json"));
    for (const auto& e : doc.at("cases")) {
        TrainSample s;
        s.case_id = e.at("case_id").get<std::string>();
        s.image = read_svol_image(pdir / "images" / (s.case_id + ".svol"));
        s.target = read_svol_label(pdir / "targets" / (s.case_id + ".svol"), num_organs + 1);
        const std::string kind = e.at("kind").get<std::string>();
        s.kind = kind == "CPL" ? SampleKind::Cpl : SampleKind::Pl;
        (s.kind == SampleKind::Cpl ? cpl : pl).push_back(std::move(s));
    }
    const auto rois = training_rois(ctx, cases, norm);
    const auto labeled = organ_samples(cases, rois, norm, tc.input_shape, num_organs, {Supervision::FullOrgan},
                                       SampleKind::Labeled);
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kOrganStudent));
    ResUNet model = build_model(c.net(Task::Organ), mix_seed(c.seed(), 12));
    model.set_lineage("organ-student");
    const auto out = train_student_organ(std::move(model), labeled, cpl, pl, tc, hooks_for(dir));
    save_outcome(out, dir);
    write_run_record(ctx, dir, "train-organ-student", {manifest.root / "manifest.json", pdir / "pseudo.json"});
    log(ctx, "train-organ-student: final loss " + num(out.epoch_loss.back()));
}

void cmd_train_tumor_mt(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    c.validate();
    const auto manifest = train_manifest(ctx);
    const auto cases = load_cases(manifest, false);
    const NormStats norm = load_norm(ctx);
    const auto rois = training_rois(ctx, cases, norm);
    const TrainConfig tc = c.train(Task::Tumor);
    const auto samples = tumor_samples(cases, rois, norm, tc.input_shape);
    const fs::path dir = open_output(ctx, artifact_dir(ctx, kTumorMt));
    ResUNet model = build_model(c.net(Task::Tumor), mix_seed(c.seed(), 13));
    if (c.mt_warm_start()) {
        // The mean teacher continues from a supervised model trained on the same annotations.
        TrainHooks h;
        h.metrics_csv = dir / "supervised_metrics.csv";
        model = train_supervised(std::move(model), samples, tc, h).final_model;
        save_checkpoint(model, dir / "supervised.ckpt");
    }
    model.set_lineage("tumor-student");
    const auto out = train_tumor_mean_teacher(std::move(model), samples, tc, hooks_for(dir));
    save_outcome(out.student, dir);
    save_checkpoint(out.teacher, dir / "teacher.ckpt");
    write_run_record(ctx, dir, "train-tumor-mt", {manifest.root / "manifest.json"});
    log(ctx, "train-tumor-mt: final loss " + num(out.student.epoch_loss.back()));
}

namespace {

PipelineBundle bundle_from_run(const CommandContext& ctx) {
    const RunConfig& c = ctx.config;
    const NormStats norm = load_norm(ctx);
    PipelineBundle b;
    b.stage1 = shared(load_model(artifact_dir(ctx, kStage1) / "model.ckpt", kStage1, c.net(Task::Stage1)));
    b.organ = shared(load_model(artifact_dir(ctx, kOrganStudent) / "model.ckpt", kOrganStudent, c.net(Task::Organ)));
    b.tumor = shared(load_model(artifact_dir(ctx, kTumorMt) / "teacher.ckpt", kTumorMt, c.net(Task::Tumor)));
    b.stage1_shape = c.train(Task::Stage1).input_shape;
    b.organ_shape = c.train(Task::Organ).input_shape;
    b.tumor_shape = c.train(Task::Tumor).input_shape;
    b.stage1_norm = b.organ_norm = b.tumor_norm = norm;
    b.options = c.pipeline();
    b.validate();
    return b;
}

}  // namespace

void cmd_infer(const CommandContext& ctx, const std::optional<fs::path>& in_dir, const std::optional<fs::path>& out_dir) {
    const RunConfig& c = ctx.config;
    c.validate();
    const fs::path in = in_dir.value_or(artifact_dir(ctx, kPhantom) / "test" / "images");
    require(in, kPhantom);
    const PipelineBundle bundle = bundle_from_run(ctx);
    const fs::path out = open_output(ctx, out_dir.value_or(artifact_dir(ctx, kInfer)));
    const auto files = svol_files(in);
    const EvalOptions eo = c.eval();
    std::vector<std::string> rows(files.size());
    // Profiling measures one case at a time, so cases run sequentially here.
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Volume v = read_svol_image(files[i]);
        LabelMap pred;
        const CaseProfile prof = profile_case([&] { pred = run_pipeline(bundle, v); }, eo.sample_interval_s);
        write_svol(out / files[i].filename(), pred);
        rows[i] = files[i].stem().string() + "," + num(prof.runtime_s) + "," + num(prof.max_mem_mb()) + "," +
                  num(auc_mem_time(prof.curve));
    }
    std::string csv = "case_id,runtime_s,max_mem_mb,auc_mb_s\n";
    for (const auto& r : rows) {
        csv += r + "\n";
    }
    write_text(out / "profile.csv", csv);
    write_run_record(ctx, out, "infer", {in});
    log(ctx, "infer: " + std::to_string(files.size()) + " cases written to " + out.string());
}

void cmd_eval(const CommandContext& ctx, const std::optional<fs::path>& pred_dir,
              const std::optional<fs::path>& truth_dir, const std::optional<fs::path>& out_dir) {
    const RunConfig& c = ctx.config;
    c.validate();
    const fs::path pred = pred_dir.value_or(artifact_dir(ctx, kInfer));
    const fs::path truth = truth_dir.value_or(artifact_dir(ctx, kPhantom) / "test" / "truth");
    require(pred, kInfer);
    require(truth, kPhantom);
    const auto files = svol_files(truth);
    std::vector<int> classes = organ_class_ids(c.phantom().num_organs);
    classes.push_back(kTumorClass);
    const EvalOptions eo = c.eval();

    std::map<std::string, std::array<double, 3>> profile;
    if (fs::exists(pred / "profile.csv")) {
        std::istringstream is(read_text(pred / "profile.csv"));
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            std::stringstream ls(line);
            std::string id;
            std::string f[3];
            std::getline(ls, id, ',');
            for (auto& x : f) {
                std::getline(ls, x, ',');
            }
            profile[id] = {std::stod(f[0]), std::stod(f[1]), std::stod(f[2])};
        }
    }
    std::vector<EvalRow> rows(files.size());
    parallel_for(files.size(), c.workers(), [&](std::size_t i) {
        const fs::path p = pred / files[i].filename();
        if (!fs::exists(p)) {
            throw MissingArtifact("no prediction for " + files[i].filename().string() + " in " + pred.string() +
                                  "; run `stmt infer` first");
        }
        const LabelMap gt = read_svol_label(files[i]);
        const LabelMap pr = read_svol_label(p);
        rows[i] = evaluate_case(files[i].stem().string(), pr, gt, classes, eo.nsd_tolerance_mm);
        if (const auto it = profile.find(rows[i].case_id); it != profile.end()) {
            rows[i].runtime_s = it->second[0];
            rows[i].max_mem_mb = it->second[1];
            rows[i].auc_mb_s = it->second[2];
        }
    });
    const EvalReport report =
        build_report(std::move(rows), Tolerances{eo.runtime_tolerance_s, eo.memory_tolerance_mb}, eo.nsd_tolerance_mm);
    const fs::path out = open_output(ctx, out_dir.value_or(ctx.run_root / "eval"));
    write_report_csv(report, out / "report.csv");
    const std::string table = format_report_table(report);
    write_text(out / "report.txt", table);
    write_run_record(ctx, out, "eval", {pred, truth});
    if (!ctx.quiet) {
        std::cout << table;
    }
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

const std::vector<std::string> kArms{"baseline", "FSO", "ST-partial", "ST-partial+unlabeled", "FST", "MT", "StMt"};

struct SeedResult {
    std::vector<ArmScore> scores;
};

std::vector<ArmScore> run_ablation_seed(const RunConfig& c, const fs::path& dir, int inner_workers) {
    const std::uint64_t seed = c.seed();
    const int num_organs = c.phantom().num_organs;
    const auto train_cases = generate_cases(c.phantom());
    const auto test_cases = generate_cases(c.test_phantom());
    const NormStats norm = training_norm(train_cases);

    const TrainConfig t1 = c.train(Task::Stage1);
    const TrainConfig to = c.train(Task::Organ);
    const TrainConfig tt = c.train(Task::Tumor);
    auto hooks = [&](const std::string& arm) {
        TrainHooks h;
        h.metrics_csv = dir / (arm + "_train.csv");
        return h;
    };

    ResUNet s1 = build_model(c.net(Task::Stage1), mix_seed(seed, 11));
    const auto stage1 =
        train_supervised(std::move(s1), stage1_samples(train_cases, norm, t1.input_shape), t1, hooks("stage1"))
            .final_model;
    const auto rois = locate_all(stage1, train_cases, norm, t1.input_shape, c.pipeline().margin_fraction);

    const auto full = organ_samples(train_cases, rois, norm, to.input_shape, num_organs, {Supervision::FullOrgan},
                                    SampleKind::Labeled);
    const auto full_and_partial = organ_samples(train_cases, rois, norm, to.input_shape, num_organs,
                                                {Supervision::FullOrgan, Supervision::PartialOrgan},
                                                SampleKind::Labeled);
    const auto tumors = tumor_samples(train_cases, rois, norm, tt.input_shape);
    const ResUNet organ_init = build_model(c.net(Task::Organ), mix_seed(seed, 12));
    const ResUNet tumor_init = build_model(c.net(Task::Tumor), mix_seed(seed, 13));

    // Arms drawing from one or two pools use two thirds of the organ batch, so
    // only the arm with unlabeled data gets the third slot.
    TrainConfig to_two = to;
    to_two.batch_size = 2 * std::max(1, to.batch_size / 3);

    std::optional<ResUNet> fso, baseline, st_partial, st_full, fst, mt;
    // Phase 1: everything that depends only on stage 1.
    std::vector<std::function<void()>> phase1{
        [&] { fso = train_supervised(organ_init, full, to_two, hooks("FSO")).final_model; },
        [&] { baseline = train_supervised(organ_init, full_and_partial, to_two, hooks("baseline")).final_model; },
        [&] { fst = train_supervised(tumor_init, tumors, tt, hooks("FST")).final_model; },
    };
    parallel_for(phase1.size(), inner_workers, [&](std::size_t i) { phase1[i](); });
    // Phase 2: students of the FSO teacher, and the mean teacher built on FST.
    const PseudoSet pseudo = pseudo_samples(*fso, train_cases, rois, norm, to.input_shape, num_organs);
    std::vector<std::function<void()>> phase2{
        [&] { st_partial = train_student_organ(organ_init, full, pseudo.cpl, {}, to_two, hooks("ST-partial")).final_model; },
        [&] {
            st_full = train_student_organ(organ_init, full, pseudo.cpl, pseudo.pl, to, hooks("ST-partial+unlabeled"))
                          .final_model;
        },
        [&] {
            const ResUNet& init = c.mt_warm_start() ? *fst : tumor_init;
            mt = train_tumor_mean_teacher(init, tumors, tt, hooks("MT")).teacher;
        },
    };
    parallel_for(phase2.size(), inner_workers, [&](std::size_t i) { phase2[i](); });

    auto bundle = [&](const ResUNet& organ, const ResUNet* tumor) {
        PipelineBundle b;
        b.stage1 = shared(stage1);
        b.organ = shared(organ);
        if (tumor != nullptr) {
            b.tumor = shared(*tumor);
        }
        b.stage1_shape = t1.input_shape;
        b.organ_shape = to.input_shape;
        b.tumor_shape = tt.input_shape;
        b.stage1_norm = b.organ_norm = b.tumor_norm = norm;
        b.options = c.pipeline();
        return b;
    };
    const auto organ_ids = organ_class_ids(num_organs);
    const double tol = c.eval().nsd_tolerance_mm;
    auto score = [&](const std::string& arm, const PipelineBundle& b, bool organs, bool tumor) {
        std::vector<int> classes;
        if (organs) {
            classes = organ_ids;
        }
        if (tumor) {
            classes.push_back(kTumorClass);
        }
        const auto r = evaluate_pipeline(b, test_cases, classes, tol, 1).report;
        ArmScore s;
        s.arm = arm;
        s.seed = seed;
        if (organs) {
            s.organ_dsc = r.organ_dsc;
            s.organ_nsd = r.organ_nsd;
        }
        if (tumor) {
            s.tumor_dsc = r.tumor_dsc;
            s.tumor_nsd = r.tumor_nsd;
        }
        return s;
    };
    std::vector<ArmScore> out;
    out.push_back(score("baseline", bundle(*baseline, nullptr), true, false));
    out.push_back(score("FSO", bundle(*fso, nullptr), true, false));
    out.push_back(score("ST-partial", bundle(*st_partial, nullptr), true, false));
    out.push_back(score("ST-partial+unlabeled", bundle(*st_full, nullptr), true, false));
    out.push_back(score("FST", bundle(*fso, &*fst), false, true));
    out.push_back(score("MT", bundle(*fso, &*mt), false, true));
    out.push_back(score("StMt", bundle(*st_full, &*mt), true, true));
    return out;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::string ablation_table(const std::vector<ArmScore>& rows) {
    std::ostringstream os;
    os << "arm                      organ DSC        organ NSD        tumor DSC        tumor NSD        seeds\n";
    for (const auto& arm : kArms) {
        std::vector<double> v[4];
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (r.arm != arm) {
                continue;
            }
            ++n;
            const std::optional<double>* f[4] = {&r.organ_dsc, &r.organ_nsd, &r.tumor_dsc, &r.tumor_nsd};
            for (int k = 0; k < 4; ++k) {
                if (*f[k]) {
                    v[k].push_back(100.0 * **f[k]);
                }
            }
        }
        char line[256];
        std::string cells;
        for (auto& vals : v) {
            if (vals.empty()) {
                std::snprintf(line, sizeof line, "%-17s", "-");
            } else {
                const ClassAggregate a = aggregate(vals);
                std::snprintf(line, sizeof line, "%6.2f +- %-6.2f  ", a.mean, a.sd);
            }
            cells += line;
        }
        std::snprintf(line, sizeof line, "%-24s %s%zu\n", arm.c_str(), cells.c_str(), n);
        os << line;
    }
    return os.str();
}

}  // namespace

std::vector<ArmScore> cmd_ablate(const CommandContext& ctx, const std::optional<fs::path>& out_dir) {
    const RunConfig& c = ctx.config;
    c.validate();
    const fs::path dir = open_output(ctx, out_dir.value_or(ctx.run_root / "ablate"));
    const int n_seeds = c.ablate_seeds();
    const int workers = c.workers();
    std::vector<std::vector<ArmScore>> per_seed(static_cast<std::size_t>(n_seeds));
    // Seeds run concurrently; leftover workers go to the arms inside a seed.
    const int seed_workers = std::min(workers, n_seeds);
    const int inner = std::max(1, workers / std::max(1, seed_workers));
    parallel_for(static_cast<std::size_t>(n_seeds), seed_workers, [&](std::size_t i) {
        const RunConfig sc = c.with_seed(c.seed() + i);
        const fs::path sdir = dir / ("seed_" + std::to_string(sc.seed()));
        fs::create_directories(sdir);
        per_seed[i] = run_ablation_seed(sc, sdir, inner);
        log(ctx, "ablate: seed " + std::to_string(sc.seed()) + " done");
    });
    std::vector<ArmScore> rows;
    for (auto& s : per_seed) {
        rows.insert(rows.end(), s.begin(), s.end());
    }
    std::string csv = "seed,arm,organ_dsc,organ_nsd,tumor_dsc,tumor_nsd\n";
    for (const auto& r : rows) {
        csv += std::to_string(r.seed) + "," + r.arm + "," + opt_num(r.organ_dsc) + "," + opt_num(r.organ_nsd) + "," +
               opt_num(r.tumor_dsc) + "," + opt_num(r.tumor_nsd) + "\n";
    }
    write_text(dir / "metrics.csv", csv);
    const std::string table = ablation_table(rows);
    write_text(dir / "table.txt", table);
    write_run_record(ctx, dir, "ablate", {});
    if (!ctx.quiet) {
        std::cout << table;
    }
    return rows;
}

}  // namespace stmt

// ---------------------------------------------------------------------------
// Entry point


namespace stmt {

int run_cli(int argc, char** argv, char** envp) {
    CLI::App app{"Two-stage hybrid-supervision segmentation on synthetic abdominal phantoms", "stmt"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string profile;
    std::vector<std::string> config_files;
    std::vector<std::string> overrides;
    std::string run_root;
    std::optional<int> workers;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;
    app.add_option("--profile", profile, "named profile (desk, flare) or path to a profile file");
    app.add_option("--config", config_files, "additional config file(s), applied after the profile");
    app.add_option("--set", overrides, "key=value override, may repeat");
    app.add_option("--run-root", run_root, "output root (default: $STMT_RUN_ROOT or ./runs)");
    app.add_option("--workers", workers, "worker threads");
    app.add_option("--seed", seed, "global seed");
    app.add_flag("--force", force, "overwrite existing outputs");
    app.add_flag("-q,--quiet", quiet, "suppress progress output");

    std::optional<std::string> in_dir, out_dir, pred_dir, truth_dir;
    auto* phantom = app.add_subcommand("phantom", "generate the training and test phantoms");
    auto* stage1 = app.add_subcommand("train-stage1", "train the low-resolution localization network");
    auto* teacher = app.add_subcommand("train-teacher", "train the organ teacher on fully labelled cases");
    auto* pseudo = app.add_subcommand("pseudo", "generate and correct organ pseudo-labels");
    auto* organ = app.add_subcommand("train-organ-student", "train the organ student on labels and pseudo-labels");
    auto* tumor = app.add_subcommand("train-tumor-mt", "train the tumor network with a mean teacher");
    auto* infer = app.add_subcommand("infer", "segment whole volumes with the trained pipeline");
    infer->add_option("--in", in_dir, "directory of .svol images (default: test phantom images)");
    infer->add_option("--out", out_dir, "output directory (default: <run-root>/infer)");
    auto* eval = app.add_subcommand("eval", "score predictions against reference labels");
    eval->add_option("--pred", pred_dir, "prediction directory (default: <run-root>/infer)");
    eval->add_option("--truth", truth_dir, "reference directory (default: test phantom truth)");
    eval->add_option("--out", out_dir, "output directory (default: <run-root>/eval)");
    auto* ablate = app.add_subcommand("ablate", "run the multi-seed ablation over all training arms");
    ablate->add_option("--out", out_dir, "output directory (default: <run-root>/ablate)");
    auto* show = app.add_subcommand("config", "print the fully resolved configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    auto path_opt = [](const std::optional<std::string>& s) -> std::optional<fs::path> {
        if (!s) {
            return std::nullopt;
        }
        return fs::path(*s);
    };

    try {
        CommandContext ctx;
        if (!profile.empty()) {
            ctx.config.merge_file(find_profile(profile));
        }
        for (const auto& f : config_files) {
            ctx.config.merge_file(f);
        }
        ctx.config.merge_env(envp);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            }
            ctx.config.set(kv.substr(0, eq), kv.substr(eq + 1), "--set");
        }
        if (workers) {
            ctx.config.set("workers", std::to_string(*workers), "--workers");
        }
        if (seed) {
            ctx.config.set("seed", std::to_string(*seed), "--seed");
        }
        ctx.config.validate();
        ctx.run_root = run_root.empty() ? default_run_root() : fs::path(run_root);
        ctx.force = force;
        ctx.quiet = quiet;

        if (*phantom) {
            cmd_phantom(ctx);
        } else if (*stage1) {
            cmd_train_stage1(ctx);
        } else if (*teacher) {
            cmd_train_teacher(ctx);
        } else if (*pseudo) {
            cmd_pseudo(ctx);
        } else if (*organ) {
            cmd_train_organ_student(ctx);
        } else if (*tumor) {
            cmd_train_tumor_mt(ctx);
        } else if (*infer) {
            cmd_infer(ctx, path_opt(in_dir), path_opt(out_dir));
        } else if (*eval) {
            cmd_eval(ctx, path_opt(pred_dir), path_opt(truth_dir), path_opt(out_dir));
        } else if (*ablate) {
            cmd_ablate(ctx, path_opt(out_dir));
        } else if (*show) {
            std::cout << ctx.config.echo();
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}

}  // namespace stmt
