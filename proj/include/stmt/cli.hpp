#pragma once

// Layered run configuration and the subcommands of the `stmt` tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stmt/hybridtrain.hpp"
#include "stmt/nets.hpp"
#include "stmt/phantom.hpp"
#include "stmt/twostage.hpp"

namespace stmt {

enum class Task { Stage1, Organ, Tumor };

struct EvalOptions {
    double nsd_tolerance_mm = 1.0;
    double runtime_tolerance_s = 15.0;
    double memory_tolerance_mb = 4096.0;
    double sample_interval_s = 0.1;
};

// Flat key/value configuration. Every key has a typed default; values are
// stored in canonical text form so that equal configurations compare equal.
class RunConfig {
public:
    RunConfig();  // built-in defaults

    // Sets one key; unknown keys and unparsable values raise ConfigError.
    void set(const std::string& key, const std::string& value, const std::string& origin = "override");
    [[nodiscard]] const std::string& get(const std::string& key) const;
    [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

    // `key = value` lines; '#' starts a comment.
    void merge_text(const std::string& text, const std::string& origin);
    void merge_file(const std::filesystem::path& path);
    // STMT__SECTION__KEY=value, e.g. STMT__TRAIN__ORGAN__EPOCHS=3 -> train.organ.epochs.
    void merge_env(char** envp);

    // Typed views (validated).
    [[nodiscard]] std::uint64_t seed() const;
    [[nodiscard]] int workers() const;
    [[nodiscard]] PhantomConfig phantom() const;
    [[nodiscard]] PhantomConfig test_phantom() const;
    [[nodiscard]] NetSpec net(Task t) const;
    [[nodiscard]] TrainConfig train(Task t) const;
    [[nodiscard]] PipelineOptions pipeline() const;
    [[nodiscard]] EvalOptions eval() const;
    [[nodiscard]] int ablate_seeds() const;
    // Start the tumor mean teacher from a supervised (FST) model instead of from scratch.
    [[nodiscard]] bool mt_warm_start() const;

    void validate() const;

    // Fully resolved config, one `key = value` per line in key order.
    [[nodiscard]] std::string echo() const;
    [[nodiscard]] std::uint64_t hash() const;

    [[nodiscard]] const std::vector<std::string>& provenance() const { return provenance_; }

    friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.values_ == b.values_; }

    // Same config with a different global seed.
    [[nodiscard]] RunConfig with_seed(std::uint64_t seed) const;

private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> provenance_;
};

// Locates profiles/<name> next to the executable, in the source tree, or as a path.
std::filesystem::path find_profile(const std::string& name_or_path);

std::uint64_t fnv1a(const std::string& s);

// ---------------------------------------------------------------------------
// Subcommands. Each writes into its own directory under the run root, refuses
// to overwrite an existing run unless force is set, and records run.json plus
// the echoed config.

struct CommandContext {
    RunConfig config;
    std::filesystem::path run_root;
    bool force = false;
    bool quiet = false;
};

std::filesystem::path default_run_root();

void cmd_phantom(const CommandContext& ctx);
void cmd_train_stage1(const CommandContext& ctx);
void cmd_train_teacher(const CommandContext& ctx);
void cmd_pseudo(const CommandContext& ctx);
void cmd_train_organ_student(const CommandContext& ctx);
void cmd_train_tumor_mt(const CommandContext& ctx);
void cmd_infer(const CommandContext& ctx, const std::optional<std::filesystem::path>& in_dir,
               const std::optional<std::filesystem::path>& out_dir);
void cmd_eval(const CommandContext& ctx, const std::optional<std::filesystem::path>& pred_dir,
              const std::optional<std::filesystem::path>& truth_dir,
              const std::optional<std::filesystem::path>& out_dir);

struct ArmScore {
    std::string arm;
    std::uint64_t seed = 0;
    std::optional<double> organ_dsc;
    std::optional<double> organ_nsd;
    std::optional<double> tumor_dsc;
    std::optional<double> tumor_nsd;
};

// Ablation study: baseline, FSO, ST-partial, ST-partial+unlabeled, FST,
// MT and StMt for each seed. Writes metrics.csv and table.txt; returns the rows.
std::vector<ArmScore> cmd_ablate(const CommandContext& ctx,
                                 const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Full entry point used by the executable; returns the process exit code.
int run_cli(int argc, char** argv, char** envp);

}  // namespace stmt
