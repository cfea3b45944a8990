#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace csg {

inline constexpr const char* kToolVersion = "0.1.0";

// One nested struct per stage; every field has a working default so an empty
// config file runs the whole pipeline end to end on a desk-scale budget.
struct DatasetConfig {
    int count = 64;
    int width = 64;
    int height = 64;
    int layer_count = 4;
    double train_frac = 0.8;
    double test_frac = 0.2;
    double pathology_rate = 0.5;
    int speckle_scale = 1;
    bool texture_jitter = true;
};

struct StyleConfig {
    uint64_t stack_seed = 0;            // 0 derives the stack from the root seed
    std::vector<int> layers = {0, 1, 2};  // stack layers used for context selection
};

struct TrainConfig {
    // Long enough that samples track the context's texture, not only the
    // mask's geometry; shorter budgets learn the semantic branch first.
    int steps = 7200;
    int batch_size = 8;
    double lr = 1e-3;
    int net_width = 12;
    int net_levels = 3;
    int schedule_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.032;
    int log_every = 25;
};

struct MaskTrainConfig {
    int steps = 800;
    int batch_size = 8;
    double lr = 1e-3;
    int net_width = 8;
    int net_levels = 3;
    int log_every = 25;
};

struct GenMaskConfig {
    int count = 16;
    double min_ditf_fraction = 0.005;
};

struct GenerateConfig {
    int count = 32;
    double s_semantic = 1.5;
    double s_context = 2.5;
    // "paired" reuses the dataset's training masks with their selected
    // contexts; "generated" draws masks from the genmask stage.
    std::string source = "paired";
};

struct EditConfig {
    std::string program;  // edit command string; empty skips the stage in "all"
    std::string id;       // dataset entry to edit; empty picks the first training entry
    bool render = false;  // also resample an image from the edited mask
};

struct EvaluateConfig {
    int bins = 32;
    int guard_divisor = 4;
    std::string reference = "all";  // real images used as reference: "all" or "test"
    bool write_svg = true;
};

struct SegvalConfig {
    std::vector<uint64_t> seeds = {1, 2, 3};
    int epochs = 8;
    int batch_size = 4;
    double lr = 1e-3;
    int net_width = 8;
    int net_levels = 3;
    int max_real_train = 0;  // 0 keeps every real training image
    bool use_synthetic = true;
};

struct PipelineConfig {
    uint64_t seed = 42;
    DatasetConfig dataset;
    StyleConfig style;
    TrainConfig train;
    MaskTrainConfig maskgen;
    GenMaskConfig genmask;
    GenerateConfig generate;
    EditConfig edit;
    EvaluateConfig evaluate;
    SegvalConfig segval;
};

// Strict parse: unknown keys anywhere are an error, absent keys keep their
// defaults. "" and "{}" both give the default config.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::filesystem::path& path);

// Apply one "section.key=value" override; the value is parsed as JSON when
// possible and treated as a string otherwise. Unknown keys are an error.
void apply_override(PipelineConfig& cfg, const std::string& assignment);

// Canonical serialization (sorted keys, two-space indent); the hash and the
// stored config.json are both derived from this exact string.
std::string config_to_json(const PipelineConfig& cfg);
uint64_t config_hash(const PipelineConfig& cfg);
std::string run_id(const PipelineConfig& cfg);  // "cfg-" + 16 hex digits

// $CSG_RUN_ROOT when set, else "runs" under the current directory.
std::filesystem::path default_run_root();

// Stage names in the order "all" executes them (edit is conditional).
const std::vector<std::string>& pipeline_stages();
std::vector<std::string> execution_plan(const PipelineConfig& cfg, const std::string& subcommand);

struct StageOutcome {
    std::string stage;
    std::vector<std::string> artifacts;  // run-dir-relative paths
    double seconds = 0.0;
};

// Human-readable plan; never touches the filesystem.
std::vector<std::string> dry_run_lines(const PipelineConfig& cfg, const std::string& subcommand,
                                       const std::filesystem::path& run_root);

// Execute the plan inside run_root/run_id(cfg). Takes an exclusive lock on
// the run directory, records every artifact in manifest.json, and refuses to
// extend a run directory whose recorded config hash differs.
std::vector<StageOutcome> run_pipeline(const PipelineConfig& cfg, const std::string& subcommand,
                                       const std::filesystem::path& run_root,
                                       std::ostream* progress = nullptr);

}  // namespace csg
