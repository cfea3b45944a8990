#include "csg/pipeline.hpp"

#include "csg/diffusion.hpp"
#include "csg/editing.hpp"
#include "csg/image.hpp"
#include "csg/maskgen.hpp"
#include "csg/metrics.hpp"
#include "csg/phantom.hpp"
#include "csg/rng.hpp"
#include "csg/segval.hpp"
#include "csg/style.hpp"

#include "json.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <variant>

namespace csg {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string joined(const char* scope, const std::string& key) {
    return *scope ? std::string(scope) + "." + key : key;
}

void check_keys(const json& j, const char* scope, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw Error("config: '" + std::string(*scope ? scope : "document") + "' must be a JSON object");
    for (const auto& item : j.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* name) { return item.key() == name; });
        if (!known) throw Error("config: unknown key '" + joined(scope, item.key()) + "'");
    }
}

void get_int(const json& j, const char* scope, const char* key, int& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned())
        throw Error("config: '" + joined(scope, key) + "' must be an integer");
    out = v.get<int>();
}

void get_u64(const json& j, const char* scope, const char* key, uint64_t& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned())
        throw Error("config: '" + joined(scope, key) + "' must be an integer");
    out = v.get<uint64_t>();
}

void get_double(const json& j, const char* scope, const char* key, double& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number()) throw Error("config: '" + joined(scope, key) + "' must be a number");
    out = v.get<double>();
}

void get_bool(const json& j, const char* scope, const char* key, bool& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_boolean()) throw Error("config: '" + joined(scope, key) + "' must be true or false");
    out = v.get<bool>();
}

void get_string(const json& j, const char* scope, const char* key, std::string& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_string()) throw Error("config: '" + joined(scope, key) + "' must be a string");
    out = v.get<std::string>();
}

template <typename T>
void get_list(const json& j, const char* scope, const char* key, std::vector<T>& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_array()) throw Error("config: '" + joined(scope, key) + "' must be an array");
    std::vector<T> parsed;
    for (const json& item : v) {
        if (!item.is_number_integer() && !item.is_number_unsigned())
            throw Error("config: '" + joined(scope, key) + "' must hold integers");
        parsed.push_back(item.get<T>());
    }
    out = std::move(parsed);
}

void parse_dataset(const json& j, DatasetConfig& c) {
    check_keys(j, "dataset",
               {"count", "width", "height", "layer_count", "train_frac", "test_frac", "pathology_rate",
                "speckle_scale", "texture_jitter"});
    get_int(j, "dataset", "count", c.count);
    get_int(j, "dataset", "width", c.width);
    get_int(j, "dataset", "height", c.height);
    get_int(j, "dataset", "layer_count", c.layer_count);
    get_double(j, "dataset", "train_frac", c.train_frac);
    get_double(j, "dataset", "test_frac", c.test_frac);
    get_double(j, "dataset", "pathology_rate", c.pathology_rate);
    get_int(j, "dataset", "speckle_scale", c.speckle_scale);
    get_bool(j, "dataset", "texture_jitter", c.texture_jitter);
}

void parse_style(const json& j, StyleConfig& c) {
    check_keys(j, "style", {"stack_seed", "layers"});
    get_u64(j, "style", "stack_seed", c.stack_seed);
    get_list(j, "style", "layers", c.layers);
}

void parse_train(const json& j, TrainConfig& c) {
    check_keys(j, "train",
               {"steps", "batch_size", "lr", "net_width", "net_levels", "schedule_steps", "beta_start",
                "beta_end", "log_every"});
    get_int(j, "train", "steps", c.steps);
    get_int(j, "train", "batch_size", c.batch_size);
    get_double(j, "train", "lr", c.lr);
    get_int(j, "train", "net_width", c.net_width);
    get_int(j, "train", "net_levels", c.net_levels);
    get_int(j, "train", "schedule_steps", c.schedule_steps);
    get_double(j, "train", "beta_start", c.beta_start);
    get_double(j, "train", "beta_end", c.beta_end);
    get_int(j, "train", "log_every", c.log_every);
}

void parse_maskgen(const json& j, MaskTrainConfig& c) {
    check_keys(j, "maskgen", {"steps", "batch_size", "lr", "net_width", "net_levels", "log_every"});
    get_int(j, "maskgen", "steps", c.steps);
    get_int(j, "maskgen", "batch_size", c.batch_size);
    get_double(j, "maskgen", "lr", c.lr);
    get_int(j, "maskgen", "net_width", c.net_width);
    get_int(j, "maskgen", "net_levels", c.net_levels);
    get_int(j, "maskgen", "log_every", c.log_every);
}

void parse_genmask(const json& j, GenMaskConfig& c) {
    check_keys(j, "genmask", {"count", "min_ditf_fraction"});
    get_int(j, "genmask", "count", c.count);
    get_double(j, "genmask", "min_ditf_fraction", c.min_ditf_fraction);
}

void parse_generate(const json& j, GenerateConfig& c) {
    check_keys(j, "generate", {"count", "s_semantic", "s_context", "source"});
    get_int(j, "generate", "count", c.count);
    get_double(j, "generate", "s_semantic", c.s_semantic);
    get_double(j, "generate", "s_context", c.s_context);
    get_string(j, "generate", "source", c.source);
}

void parse_edit_cfg(const json& j, EditConfig& c) {
    check_keys(j, "edit", {"program", "id", "render"});
    get_string(j, "edit", "program", c.program);
    get_string(j, "edit", "id", c.id);
    get_bool(j, "edit", "render", c.render);
}

void parse_evaluate(const json& j, EvaluateConfig& c) {
    check_keys(j, "evaluate", {"bins", "guard_divisor", "reference", "write_svg"});
    get_int(j, "evaluate", "bins", c.bins);
    get_int(j, "evaluate", "guard_divisor", c.guard_divisor);
    get_string(j, "evaluate", "reference", c.reference);
    get_bool(j, "evaluate", "write_svg", c.write_svg);
}

void parse_segval(const json& j, SegvalConfig& c) {
    check_keys(j, "segval",
               {"seeds", "epochs", "batch_size", "lr", "net_width", "net_levels", "max_real_train",
                "use_synthetic"});
    get_list(j, "segval", "seeds", c.seeds);
    get_int(j, "segval", "epochs", c.epochs);
    get_int(j, "segval", "batch_size", c.batch_size);
    get_double(j, "segval", "lr", c.lr);
    get_int(j, "segval", "net_width", c.net_width);
    get_int(j, "segval", "net_levels", c.net_levels);
    get_int(j, "segval", "max_real_train", c.max_real_train);
    get_bool(j, "segval", "use_synthetic", c.use_synthetic);
}

void require_positive(int value, const char* name) {
    if (value <= 0) throw Error("config: '" + std::string(name) + "' must be positive");
}

void validate_config(const PipelineConfig& c) {
    require_positive(c.dataset.count, "dataset.count");
    require_positive(c.dataset.width, "dataset.width");
    require_positive(c.dataset.height, "dataset.height");
    require_positive(c.train.steps, "train.steps");
    require_positive(c.train.batch_size, "train.batch_size");
    require_positive(c.train.schedule_steps, "train.schedule_steps");
    require_positive(c.maskgen.steps, "maskgen.steps");
    require_positive(c.genmask.count, "genmask.count");
    require_positive(c.generate.count, "generate.count");
    require_positive(c.evaluate.bins, "evaluate.bins");
    require_positive(c.evaluate.guard_divisor, "evaluate.guard_divisor");
    require_positive(c.segval.epochs, "segval.epochs");
    if (c.generate.source != "paired" && c.generate.source != "generated")
        throw Error("config: 'generate.source' must be \"paired\" or \"generated\"");
    if (c.evaluate.reference != "all" && c.evaluate.reference != "test")
        throw Error("config: 'evaluate.reference' must be \"all\" or \"test\"");
    if (c.segval.seeds.empty()) throw Error("config: 'segval.seeds' must not be empty");
    if (c.style.layers.empty()) throw Error("config: 'style.layers' must not be empty");
}

json config_document(const PipelineConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["dataset"] = {{"count", c.dataset.count},
                    {"width", c.dataset.width},
                    {"height", c.dataset.height},
                    {"layer_count", c.dataset.layer_count},
                    {"train_frac", c.dataset.train_frac},
                    {"test_frac", c.dataset.test_frac},
                    {"pathology_rate", c.dataset.pathology_rate},
                    {"speckle_scale", c.dataset.speckle_scale},
                    {"texture_jitter", c.dataset.texture_jitter}};
    j["style"] = {{"stack_seed", c.style.stack_seed}, {"layers", c.style.layers}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch_size", c.train.batch_size},
                  {"lr", c.train.lr},
                  {"net_width", c.train.net_width},
                  {"net_levels", c.train.net_levels},
                  {"schedule_steps", c.train.schedule_steps},
                  {"beta_start", c.train.beta_start},
                  {"beta_end", c.train.beta_end},
                  {"log_every", c.train.log_every}};
    j["maskgen"] = {{"steps", c.maskgen.steps},
                    {"batch_size", c.maskgen.batch_size},
                    {"lr", c.maskgen.lr},
                    {"net_width", c.maskgen.net_width},
                    {"net_levels", c.maskgen.net_levels},
                    {"log_every", c.maskgen.log_every}};
    j["genmask"] = {{"count", c.genmask.count}, {"min_ditf_fraction", c.genmask.min_ditf_fraction}};
    j["generate"] = {{"count", c.generate.count},
                     {"s_semantic", c.generate.s_semantic},
                     {"s_context", c.generate.s_context},
                     {"source", c.generate.source}};
    j["edit"] = {{"program", c.edit.program}, {"id", c.edit.id}, {"render", c.edit.render}};
    j["evaluate"] = {{"bins", c.evaluate.bins},
                     {"guard_divisor", c.evaluate.guard_divisor},
                     {"reference", c.evaluate.reference},
                     {"write_svg", c.evaluate.write_svg}};
    j["segval"] = {{"seeds", c.segval.seeds},
                   {"epochs", c.segval.epochs},
                   {"batch_size", c.segval.batch_size},
                   {"lr", c.segval.lr},
                   {"net_width", c.segval.net_width},
                   {"net_levels", c.segval.net_levels},
                   {"max_real_train", c.segval.max_real_train},
                   {"use_synthetic", c.segval.use_synthetic}};
    return j;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string iso_utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("short write to " + path.string());
}

// ---- run directory machinery ----

class RunLock {
public:
    explicit RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw Error("run directory is locked by another process: " + path_.string() +
                        " exists; remove it if no other run is active");
        char buf[32];
        const int n = std::snprintf(buf, sizeof buf, "%ld\n", static_cast<long>(::getpid()));
        if (n > 0) {
            const ssize_t written = ::write(fd, buf, static_cast<size_t>(n));
            (void)written;
        }
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

struct StageContext {
    const PipelineConfig& cfg;
    fs::path run_dir;
    uint64_t hash = 0;
    std::vector<std::string> artifacts;

    fs::path abs(const std::string& rel) const { return run_dir / rel; }
    void add(std::string rel) { artifacts.push_back(std::move(rel)); }
};

void require_artifact(const StageContext& ctx, const std::string& rel, const std::string& producer) {
    if (!fs::exists(ctx.abs(rel)))
        throw Error("missing upstream artifact '" + rel + "': run the '" + producer + "' stage first");
}

void check_producer_hash(const StageContext& ctx, const std::string& producer) {
    const fs::path record = ctx.abs("stage_" + producer + ".json");
    if (!fs::exists(record)) return;
    const json j = json::parse(read_text(record), nullptr, false);
    if (j.is_discarded()) throw Error("corrupt stage record: " + record.string());
    const std::string recorded = j.value("config_hash", "");
    if (recorded != hash_hex(ctx.hash))
        throw Error("config hash mismatch: stage '" + producer + "' artifacts carry hash " + recorded +
                    " but the current config hashes to " + hash_hex(ctx.hash));
}

void require_stage(const StageContext& ctx, const std::string& producer, const std::string& rel) {
    require_artifact(ctx, rel, producer);
    check_producer_hash(ctx, producer);
}

void check_model_hash(const StageContext& ctx, const DenoiserModel& model, const std::string& name) {
    if (model.config_hash != ctx.hash)
        throw Error("config hash mismatch: " + name + " was trained under " + hash_hex(model.config_hash) +
                    " but the current config hashes to " + hash_hex(ctx.hash));
}

void write_stage_record(const StageContext& ctx, const std::string& stage) {
    json j;
    j["stage"] = stage;
    j["config_hash"] = hash_hex(ctx.hash);
    j["tool_version"] = kToolVersion;
    j["artifacts"] = ctx.artifacts;
    write_text(ctx.abs("stage_" + stage + ".json"), j.dump(2) + "\n");
}

void append_manifest_entry(const fs::path& run_dir, const PipelineConfig& cfg, const StageOutcome& outcome) {
    const fs::path path = run_dir / "manifest.json";
    json j;
    if (fs::exists(path)) {
        j = json::parse(read_text(path), nullptr, false);
        if (j.is_discarded()) throw Error("corrupt run manifest: " + path.string());
        if (j.value("config_hash", "") != hash_hex(config_hash(cfg)))
            throw Error("run manifest carries a different config hash: " + path.string());
    } else {
        j["run_id"] = run_id(cfg);
        j["config_hash"] = hash_hex(config_hash(cfg));
        j["tool_version"] = kToolVersion;
        j["stages"] = json::array();
    }
    json entry;
    entry["stage"] = outcome.stage;
    entry["seconds"] = outcome.seconds;
    entry["artifacts"] = outcome.artifacts;
    entry["recorded_utc"] = iso_utc_now();
    j["stages"].push_back(std::move(entry));
    write_text(path, j.dump(2) + "\n");
}

void log_event(const fs::path& run_dir, const std::string& stage, const std::string& event, json extra) {
    fs::create_directories(run_dir / "logs");
    std::ofstream out(run_dir / "logs" / (stage + ".jsonl"), std::ios::app);
    if (!out) return;
    extra["stage"] = stage;
    extra["event"] = event;
    extra["utc"] = iso_utc_now();
    out << extra.dump() << "\n";
}

std::string sample_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04d", prefix, i);
    return buf;
}

uint64_t effective_stack_seed(const PipelineConfig& cfg) {
    return cfg.style.stack_seed ? cfg.style.stack_seed : derive_seed(cfg.seed, "style-stack");
}

// ---- stages ----

void run_dataset_stage(StageContext& ctx) {
    const DatasetConfig& d = ctx.cfg.dataset;
    PhantomParams params;
    params.rng_seed = derive_seed(ctx.cfg.seed, "dataset");
    params.width = d.width;
    params.height = d.height;
    params.layer_count = d.layer_count;
    params.speckle_scale = d.speckle_scale;
    params.pathology_rate = static_cast<float>(d.pathology_rate);
    params.texture_jitter = d.texture_jitter;
    const DatasetManifest man = build_dataset(params, d.count, d.train_frac, d.test_frac, ctx.abs("data"));
    ctx.add("data/manifest.jsonl");
    for (const ManifestEntry& e : man.entries) {
        ctx.add("data/" + e.mask_path);
        ctx.add("data/" + e.image_path);
    }
}

void run_pair_stage(StageContext& ctx) {
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    const DatasetManifest man = read_manifest(ctx.abs("data/manifest.jsonl"));
    const ConvStack stack = make_conv_stack(effective_stack_seed(ctx.cfg));
    const PairedManifest paired = build_pairs(man, stack, ctx.abs("data"), ctx.cfg.style.layers);
    write_paired_manifest(paired, ctx.abs("pairs.jsonl"));
    ctx.add("pairs.jsonl");
}

std::vector<std::pair<GrayImage, ConditionPair>> load_training_pairs(const StageContext& ctx,
                                                                     const PairedManifest& paired) {
    std::map<std::string, const PairedEntry*> by_id;
    for (const PairedEntry& e : paired.entries) by_id[e.id] = &e;
    std::vector<std::pair<GrayImage, ConditionPair>> examples;
    for (const PairedEntry& e : paired.entries) {
        if (e.split != "train") continue;
        GrayImage img = read_image_pgm(ctx.abs("data") / e.image_path);
        LabelMask mask = read_mask_pgm(ctx.abs("data") / e.mask_path);
        GrayImage context = read_image_pgm(ctx.abs("data") / by_id.at(e.context_id)->image_path);
        ConditionPair cond;
        cond.semantic = std::move(mask);
        cond.context = std::move(context);
        examples.emplace_back(std::move(img), std::move(cond));
    }
    if (examples.empty()) throw Error("train: pairs.jsonl holds no training entries");
    return examples;
}

void run_train_stage(StageContext& ctx) {
    require_stage(ctx, "pair", "pairs.jsonl");
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    const PairedManifest paired = read_paired_manifest(ctx.abs("pairs.jsonl"));
    const auto examples = load_training_pairs(ctx, paired);

    const TrainConfig& t = ctx.cfg.train;
    const NoiseSchedule sched = NoiseSchedule::linear(t.schedule_steps, t.beta_start, t.beta_end);
    DenoiserModel model(1, paired.width, paired.height, sched, t.net_width, t.net_levels,
                        derive_seed(ctx.cfg.seed, "denoiser-init"));
    model.config_hash = ctx.hash;

    TrainOptions opts;
    opts.steps = t.steps;
    opts.batch_size = t.batch_size;
    opts.lr = t.lr;
    opts.seed = derive_seed(ctx.cfg.seed, "train");
    opts.log_every = t.log_every;
    train_denoiser(model, examples, opts, ctx.abs("train_log.csv"));
    save_checkpoint(model, ctx.abs("denoiser.ckpt"));
    ctx.add("denoiser.ckpt");
    ctx.add("train_log.csv");
}

void run_train_maskgen_stage(StageContext& ctx) {
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    const DatasetManifest man = read_manifest(ctx.abs("data/manifest.jsonl"));
    std::vector<LabelMask> masks;
    for (const ManifestEntry& e : man.entries)
        if (e.split == "train") masks.push_back(read_mask_pgm(ctx.abs("data") / e.mask_path));
    if (masks.empty()) throw Error("train-maskgen: dataset holds no training masks");

    const MaskTrainConfig& m = ctx.cfg.maskgen;
    DenoiserModel model =
        make_mask_model(man.width, man.height, m.net_width, m.net_levels, derive_seed(ctx.cfg.seed, "maskgen-init"));
    model.config_hash = ctx.hash;

    TrainOptions opts;
    opts.steps = m.steps;
    opts.batch_size = m.batch_size;
    opts.lr = m.lr;
    opts.seed = derive_seed(ctx.cfg.seed, "train-maskgen");
    opts.log_every = m.log_every;
    train_mask_model(model, masks, opts, ctx.abs("maskgen_log.csv"));
    save_checkpoint(model, ctx.abs("maskgen.ckpt"));
    ctx.add("maskgen.ckpt");
    ctx.add("maskgen_log.csv");
}

void run_genmask_stage(StageContext& ctx) {
    require_stage(ctx, "train-maskgen", "maskgen.ckpt");
    DenoiserModel model = load_checkpoint(ctx.abs("maskgen.ckpt"));
    check_model_hash(ctx, model, "maskgen.ckpt");

    const GenMaskConfig& g = ctx.cfg.genmask;
    PathologyFilterConfig filter;
    filter.min_ditf_fraction = g.min_ditf_fraction;
    Rng rng(derive_seed(ctx.cfg.seed, "genmask"));
    GenerationReport report;
    const std::vector<LabelMask> masks = generate_masks(model, g.count, filter, rng, &report);

    DatasetManifest out;
    out.width = model.canvas_width();
    out.height = model.canvas_height();
    out.rng_seed = derive_seed(ctx.cfg.seed, "genmask");
    for (size_t c = 0; c < kNumClasses; ++c) out.classes[c] = class_name(static_cast<ClassId>(c));
    fs::create_directories(ctx.abs("gen_masks/masks"));
    for (size_t i = 0; i < masks.size(); ++i) {
        const std::string id = sample_id("m", static_cast<int>(i));
        const std::string rel = "masks/" + id + ".pgm";
        write_mask_pgm(ctx.abs("gen_masks/" + rel), masks[i]);
        out.entries.push_back({id, rel, "", "synthetic", derive_seed(ctx.cfg.seed, "genmask", i)});
        ctx.add("gen_masks/" + rel);
    }
    write_manifest(out, ctx.abs("gen_masks/manifest.jsonl"));
    write_generation_report(ctx.abs("genmask_report.json"), report);
    ctx.add("gen_masks/manifest.jsonl");
    ctx.add("genmask_report.json");
}

void run_generate_stage(StageContext& ctx) {
    require_stage(ctx, "train", "denoiser.ckpt");
    require_stage(ctx, "pair", "pairs.jsonl");
    DenoiserModel model = load_checkpoint(ctx.abs("denoiser.ckpt"));
    check_model_hash(ctx, model, "denoiser.ckpt");

    const PairedManifest paired = read_paired_manifest(ctx.abs("pairs.jsonl"));
    std::map<std::string, const PairedEntry*> by_id;
    std::vector<const PairedEntry*> train_entries;
    for (const PairedEntry& e : paired.entries) {
        by_id[e.id] = &e;
        if (e.split == "train") train_entries.push_back(&e);
    }
    if (train_entries.empty()) throw Error("generate: pairs.jsonl holds no training entries");

    // Mask sources with a fixed context per mask ("paired") or a context
    // drawn per sample from the training images ("generated").
    struct Source {
        fs::path mask;
        fs::path context;  // empty = draw one
    };
    std::vector<Source> sources;
    if (ctx.cfg.generate.source == "paired") {
        for (const PairedEntry* e : train_entries)
            sources.push_back({ctx.abs("data") / e->mask_path,
                               ctx.abs("data") / by_id.at(e->context_id)->image_path});
    } else {
        require_stage(ctx, "genmask", "gen_masks/manifest.jsonl");
        const DatasetManifest gen = read_manifest(ctx.abs("gen_masks/manifest.jsonl"));
        if (gen.entries.empty()) throw Error("generate: gen_masks/manifest.jsonl holds no masks");
        for (const ManifestEntry& e : gen.entries) sources.push_back({ctx.abs("gen_masks") / e.mask_path, {}});
    }

    const GenerateConfig& gcfg = ctx.cfg.generate;
    const GuidanceConfig guide{gcfg.s_semantic, gcfg.s_context};
    DatasetManifest synth;
    synth.width = model.canvas_width();
    synth.height = model.canvas_height();
    synth.rng_seed = derive_seed(ctx.cfg.seed, "generate");
    for (size_t c = 0; c < kNumClasses; ++c) synth.classes[c] = class_name(static_cast<ClassId>(c));
    fs::create_directories(ctx.abs("synth/images"));
    fs::create_directories(ctx.abs("synth/masks"));

    for (int i = 0; i < gcfg.count; ++i) {
        Rng rng(derive_seed(ctx.cfg.seed, "generate", static_cast<uint64_t>(i)));
        const Source& src = sources[static_cast<size_t>(i) % sources.size()];
        LabelMask mask = read_mask_pgm(src.mask);
        fs::path context_path = src.context;
        if (context_path.empty()) {
            const auto pick = static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(train_entries.size()) - 1));
            context_path = ctx.abs("data") / train_entries[pick]->image_path;
        }
        ConditionPair cond;
        cond.semantic = mask;
        cond.context = read_image_pgm(context_path);
        const GrayImage img = sample(model, cond, guide, model.schedule(), rng);

        const std::string id = sample_id("g", i);
        write_image_pgm(ctx.abs("synth/images/" + id + ".pgm"), img);
        write_mask_pgm(ctx.abs("synth/masks/" + id + ".pgm"), mask);
        synth.entries.push_back({id, "masks/" + id + ".pgm", "images/" + id + ".pgm", "train",
                                 derive_seed(ctx.cfg.seed, "generate", static_cast<uint64_t>(i))});
        ctx.add("synth/images/" + id + ".pgm");
        ctx.add("synth/masks/" + id + ".pgm");
    }
    write_manifest(synth, ctx.abs("synth/manifest.jsonl"));
    ctx.add("synth/manifest.jsonl");
}

void run_edit_stage(StageContext& ctx) {
    const EditConfig& e = ctx.cfg.edit;
    if (e.program.empty()) throw Error("edit: 'edit.program' is empty; set it to an edit command string");
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    const DatasetManifest man = read_manifest(ctx.abs("data/manifest.jsonl"));

    const ManifestEntry* entry = nullptr;
    if (e.id.empty()) {
        for (const ManifestEntry& m : man.entries)
            if (m.split == "train") {
                entry = &m;
                break;
            }
        if (!entry) throw Error("edit: dataset holds no training entries");
    } else {
        for (const ManifestEntry& m : man.entries)
            if (m.id == e.id) {
                entry = &m;
                break;
            }
        if (!entry) throw Error("edit: no dataset entry with id '" + e.id + "'");
    }

    const EditProgram program = parse_edit(e.program);
    const LabelMask mask = read_mask_pgm(ctx.abs("data") / entry->mask_path);
    const LabelMask edited = apply_program(mask, program);
    fs::create_directories(ctx.abs("edit"));
    write_text(ctx.abs("edit/program.txt"), print_edit(program) + "\n");
    write_mask_pgm(ctx.abs("edit/" + entry->id + "_edited_mask.pgm"), edited);
    ctx.add("edit/program.txt");
    ctx.add("edit/" + entry->id + "_edited_mask.pgm");

    if (!e.render) return;
    require_stage(ctx, "train", "denoiser.ckpt");
    DenoiserModel model = load_checkpoint(ctx.abs("denoiser.ckpt"));
    check_model_hash(ctx, model, "denoiser.ckpt");

    const GrayImage original = read_image_pgm(ctx.abs("data") / entry->image_path);
    ConditionPair cond;
    cond.semantic = edited;
    cond.context = original;
    Rng rng(derive_seed(ctx.cfg.seed, "edit"));
    const GuidanceConfig guide{ctx.cfg.generate.s_semantic, ctx.cfg.generate.s_context};
    const GrayImage resampled = sample(model, cond, guide, model.schedule(), rng);
    write_image_pgm(ctx.abs("edit/" + entry->id + "_resampled.pgm"), resampled);
    ctx.add("edit/" + entry->id + "_resampled.pgm");

    // Seamless composite of the resampled texture into the original image
    // over the region the first command edited.
    const ClassId cls = std::visit([](const auto& cmd) { return cmd.cls; }, program.commands.front());
    const PixelRegion region = PixelRegion::from_class(edited, cls);
    if (region.count() > 0) {
        const GrayImage composite = blend_texture(resampled, original, region);
        write_image_pgm(ctx.abs("edit/" + entry->id + "_composite.pgm"), composite);
        ctx.add("edit/" + entry->id + "_composite.pgm");
    }
}

void run_evaluate_stage(StageContext& ctx) {
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    require_stage(ctx, "generate", "synth/manifest.jsonl");
    const DatasetManifest man = read_manifest(ctx.abs("data/manifest.jsonl"));
    const DatasetManifest synth = read_manifest(ctx.abs("synth/manifest.jsonl"));
    const ConvStack stack = make_conv_stack(effective_stack_seed(ctx.cfg));

    const EvaluateConfig& ev = ctx.cfg.evaluate;
    std::vector<Embedding> real_set;
    for (const ManifestEntry& e : man.entries) {
        if (ev.reference == "test" && e.split != "test") continue;
        real_set.push_back(embed_image(read_image_pgm(ctx.abs("data") / e.image_path), stack));
    }
    std::vector<Embedding> synth_set;
    for (const ManifestEntry& e : synth.entries)
        synth_set.push_back(embed_image(read_image_pgm(ctx.abs("synth") / e.image_path), stack));

    const QualityReport report = quality_report(real_set, synth_set, ev.bins, ev.guard_divisor);
    write_quality_report_json(report, ctx.abs("report.json"));
    write_quality_report_csv(report, ctx.abs("report.csv"));
    ctx.add("report.json");
    ctx.add("report.csv");
    if (ev.write_svg) {
        write_projection_svg(real_set, synth_set, ctx.abs("projection.svg"));
        ctx.add("projection.svg");
    }
}

void run_segval_stage(StageContext& ctx) {
    require_stage(ctx, "dataset", "data/manifest.jsonl");
    const SegvalConfig& sv = ctx.cfg.segval;

    ExperimentSpec spec;
    spec.real_manifest = ctx.abs("data/manifest.jsonl");
    if (sv.use_synthetic) {
        require_stage(ctx, "generate", "synth/manifest.jsonl");
        spec.synthetic_manifest = ctx.abs("synth/manifest.jsonl");
    }
    spec.seeds = sv.seeds;
    spec.epochs = sv.epochs;
    spec.batch_size = sv.batch_size;
    spec.lr = sv.lr;
    spec.net_width = sv.net_width;
    spec.net_levels = sv.net_levels;
    spec.max_real_train = sv.max_real_train;

    const ComparisonReport report = compare_arms(spec);
    write_comparison_json(report, ctx.abs("comparison.json"));
    write_comparison_csv(report, ctx.abs("comparison.csv"));
    ctx.add("comparison.json");
    ctx.add("comparison.csv");
}

void dispatch_stage(const std::string& stage, StageContext& ctx) {
    if (stage == "dataset") return run_dataset_stage(ctx);
    if (stage == "pair") return run_pair_stage(ctx);
    if (stage == "train") return run_train_stage(ctx);
    if (stage == "train-maskgen") return run_train_maskgen_stage(ctx);
    if (stage == "genmask") return run_genmask_stage(ctx);
    if (stage == "generate") return run_generate_stage(ctx);
    if (stage == "edit") return run_edit_stage(ctx);
    if (stage == "evaluate") return run_evaluate_stage(ctx);
    if (stage == "segval") return run_segval_stage(ctx);
    throw Error("unknown stage '" + stage + "'");
}

const char* stage_outputs(const std::string& stage) {
    if (stage == "dataset") return "data/manifest.jsonl plus the mask and image files";
    if (stage == "pair") return "pairs.jsonl";
    if (stage == "train") return "denoiser.ckpt, train_log.csv";
    if (stage == "train-maskgen") return "maskgen.ckpt, maskgen_log.csv";
    if (stage == "genmask") return "gen_masks/manifest.jsonl, genmask_report.json";
    if (stage == "generate") return "synth/manifest.jsonl plus the sampled images";
    if (stage == "edit") return "edit/ mask and image outputs";
    if (stage == "evaluate") return "report.json, report.csv, projection.svg";
    if (stage == "segval") return "comparison.json, comparison.csv";
    return "";
}

}  // namespace

PipelineConfig parse_config(const std::string& json_text) {
    json j;
    if (json_text.empty()) {
        j = json::object();
    } else {
        j = json::parse(json_text, nullptr, false);
        if (j.is_discarded()) throw Error("config: malformed JSON");
    }
    check_keys(j, "",
               {"seed", "dataset", "style", "train", "maskgen", "genmask", "generate", "edit", "evaluate",
                "segval"});
    PipelineConfig cfg;
    get_u64(j, "", "seed", cfg.seed);
    if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg.dataset);
    if (j.contains("style")) parse_style(j.at("style"), cfg.style);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("maskgen")) parse_maskgen(j.at("maskgen"), cfg.maskgen);
    if (j.contains("genmask")) parse_genmask(j.at("genmask"), cfg.genmask);
    if (j.contains("generate")) parse_generate(j.at("generate"), cfg.generate);
    if (j.contains("edit")) parse_edit_cfg(j.at("edit"), cfg.edit);
    if (j.contains("evaluate")) parse_evaluate(j.at("evaluate"), cfg.evaluate);
    if (j.contains("segval")) parse_segval(j.at("segval"), cfg.segval);
    validate_config(cfg);
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_text(path));
}

void apply_override(PipelineConfig& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw Error("override must look like section.key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    std::string pointer = "/";
    for (const char c : key) pointer += (c == '.') ? '/' : c;

    json j = config_document(cfg);
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // unquoted strings pass through
    try {
        j[json::json_pointer(pointer)] = std::move(parsed);
    } catch (const json::exception&) {
        throw Error("config: cannot apply override to '" + key + "'");
    }
    cfg = parse_config(j.dump());
}

std::string config_to_json(const PipelineConfig& cfg) {
    return config_document(cfg).dump(2);
}

uint64_t config_hash(const PipelineConfig& cfg) {
    const std::string text = config_to_json(cfg);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string run_id(const PipelineConfig& cfg) {
    return "cfg-" + hash_hex(config_hash(cfg));
}

std::filesystem::path default_run_root() {
    if (const char* env = std::getenv("CSG_RUN_ROOT"); env && *env) return env;
    return "runs";
}

const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> order = {"dataset", "pair",     "train", "train-maskgen", "genmask",
                                                   "generate", "edit",    "evaluate", "segval"};
    return order;
}

std::vector<std::string> execution_plan(const PipelineConfig& cfg, const std::string& subcommand) {
    const auto& order = pipeline_stages();
    if (subcommand == "all") {
        std::vector<std::string> plan;
        for (const std::string& stage : order) {
            if (stage == "edit" && cfg.edit.program.empty()) continue;
            plan.push_back(stage);
        }
        return plan;
    }
    if (std::find(order.begin(), order.end(), subcommand) == order.end())
        throw Error("unknown subcommand '" + subcommand + "'");
    return {subcommand};
}

std::vector<std::string> dry_run_lines(const PipelineConfig& cfg, const std::string& subcommand,
                                       const std::filesystem::path& run_root) {
    const std::vector<std::string> plan = execution_plan(cfg, subcommand);
    std::vector<std::string> lines;
    lines.push_back("run id: " + run_id(cfg));
    lines.push_back("run directory: " + (run_root / run_id(cfg)).string());
    for (const std::string& stage : plan)
        lines.push_back("would run " + stage + ": writes " + stage_outputs(stage));
    return lines;
}

std::vector<StageOutcome> run_pipeline(const PipelineConfig& cfg, const std::string& subcommand,
                                       const std::filesystem::path& run_root, std::ostream* progress) {
    const std::vector<std::string> plan = execution_plan(cfg, subcommand);
    const fs::path run_dir = run_root / run_id(cfg);
    fs::create_directories(run_dir);
    RunLock lock(run_dir);

    const std::string canonical = config_to_json(cfg) + "\n";
    const fs::path config_path = run_dir / "config.json";
    if (fs::exists(config_path)) {
        if (read_text(config_path) != canonical)
            throw Error("run directory holds a different config for the same id: " + config_path.string());
    } else {
        write_text(config_path, canonical);
    }

    std::vector<StageOutcome> outcomes;
    for (const std::string& stage : plan) {
        if (progress) *progress << "[" << stage << "] running" << std::endl;
        log_event(run_dir, stage, "start", json::object());
        const auto t0 = std::chrono::steady_clock::now();

        StageContext ctx{cfg, run_dir, config_hash(cfg), {}};
        dispatch_stage(stage, ctx);
        write_stage_record(ctx, stage);

        StageOutcome outcome;
        outcome.stage = stage;
        outcome.artifacts = std::move(ctx.artifacts);
        outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        append_manifest_entry(run_dir, cfg, outcome);
        log_event(run_dir, stage, "done",
                  json{{"seconds", outcome.seconds}, {"artifacts", outcome.artifacts.size()}});
        if (progress)
            *progress << "[" << stage << "] done: " << outcome.artifacts.size() << " artifact(s)" << std::endl;
        outcomes.push_back(std::move(outcome));
    }
    return outcomes;
}

}  // namespace csg
