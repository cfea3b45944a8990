#include "doctest.h"

#include "csg/image.hpp"
#include "csg/pipeline.hpp"

#include "json.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace csg;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 7,
  "dataset": {"count": 8, "width": 24, "height": 24, "texture_jitter": true},
  "train": {"steps": 12, "batch_size": 4, "net_width": 4, "net_levels": 2,
            "schedule_steps": 50, "beta_end": 0.12, "log_every": 5},
  "maskgen": {"steps": 10, "batch_size": 4, "net_width": 4, "net_levels": 2, "log_every": 5},
  "genmask": {"count": 2, "min_ditf_fraction": 0.0},
  "generate": {"count": 4},
  "evaluate": {"guard_divisor": 64},
  "segval": {"epochs": 2, "net_width": 4, "net_levels": 2}
})";

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("csg_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Every file under the run dir except the bookkeeping that records wall time.
std::map<std::string, std::string> artifact_bytes(const fs::path& run_dir) {
    std::map<std::string, std::string> out;
    for (const auto& item : fs::recursive_directory_iterator(run_dir)) {
        if (!item.is_regular_file()) continue;
        const std::string rel = fs::relative(item.path(), run_dir).string();
        if (rel == "manifest.json" || rel.rfind("logs/", 0) == 0) continue;
        out[rel] = slurp(item.path());
    }
    return out;
}

std::string cli_path() {
    if (const char* env = std::getenv("CSG_CLI"); env && *env) return env;
    for (const char* guess : {"../csg", "./csg", "build/csg"})
        if (fs::exists(guess)) return guess;
    return "../csg";  // layout of the build tree
}

int run_cli(const std::string& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    const fs::path dir = fs::temp_directory_path();
    const fs::path out = dir / "csg_cli_out.txt";
    const fs::path err = dir / "csg_cli_err.txt";
    const std::string cmd = "\"" + cli_path() + "\" " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    if (out_text) *out_text = slurp(out);
    if (err_text) *err_text = slurp(err);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("default config round-trips and hashes are stable") {
    const PipelineConfig defaults;
    CHECK(parse_config("").seed == defaults.seed);
    CHECK(parse_config("{}").train.steps == defaults.train.steps);

    const std::string text = config_to_json(defaults);
    const PipelineConfig reparsed = parse_config(text);
    CHECK(config_hash(reparsed) == config_hash(defaults));
    CHECK(config_to_json(reparsed) == text);

    PipelineConfig other;
    other.seed = 43;
    CHECK(config_hash(other) != config_hash(defaults));
    other = defaults;
    other.train.steps = 5;
    CHECK(config_hash(other) != config_hash(defaults));

    const std::string id = run_id(defaults);
    CHECK(id.size() == 4 + 16);
    CHECK(id.substr(0, 4) == "cfg-");
    CHECK(id.find_first_not_of("0123456789abcdef", 4) == std::string::npos);
}

TEST_CASE("unknown and ill-typed config keys are rejected") {
    CHECK_THROWS_WITH_AS(parse_config(R"({"sedd": 1})"), doctest::Contains("unknown key 'sedd'"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"train": {"stepz": 5}})"), doctest::Contains("train.stepz"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"dataset": {"count": "many"}})"),
                         doctest::Contains("dataset.count"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"train": {"steps": 2.5}})"),
                         doctest::Contains("must be an integer"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"dataset": {"texture_jitter": 1}})"),
                         doctest::Contains("true or false"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"segval": {"seeds": 3}})"), doctest::Contains("array"), Error);
    CHECK_THROWS_WITH_AS(parse_config("{"), doctest::Contains("malformed"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"generate": {"source": "psychic"}})"),
                         doctest::Contains("generate.source"), Error);
    CHECK_THROWS_WITH_AS(parse_config(R"({"dataset": {"count": -3}})"), doctest::Contains("positive"), Error);
}

TEST_CASE("overrides rewrite one field and keep the rest") {
    PipelineConfig cfg;
    apply_override(cfg, "train.steps=123");
    CHECK(cfg.train.steps == 123);
    apply_override(cfg, "dataset.texture_jitter=false");
    CHECK(cfg.dataset.texture_jitter == false);
    apply_override(cfg, "segval.seeds=[7,8,9,10]");
    CHECK(cfg.segval.seeds == std::vector<uint64_t>{7, 8, 9, 10});
    apply_override(cfg, "generate.source=generated");
    CHECK(cfg.generate.source == "generated");
    apply_override(cfg, "seed=99");
    CHECK(cfg.seed == 99);
    CHECK(cfg.train.steps == 123);

    CHECK_THROWS_WITH_AS(apply_override(cfg, "train.stepz=5"), doctest::Contains("train.stepz"), Error);
    CHECK_THROWS_WITH_AS(apply_override(cfg, "no_equals_sign"), doctest::Contains("section.key=value"), Error);
    CHECK_THROWS_WITH_AS(apply_override(cfg, "train.steps=fast"), doctest::Contains("integer"), Error);
}

TEST_CASE("run root comes from the environment when set") {
    ::setenv("CSG_RUN_ROOT", "/tmp/csg_env_root", 1);
    CHECK(default_run_root() == fs::path("/tmp/csg_env_root"));
    ::unsetenv("CSG_RUN_ROOT");
    CHECK(default_run_root() == fs::path("runs"));
}

TEST_CASE("execution plan follows the stage order") {
    PipelineConfig cfg;
    const auto plan = execution_plan(cfg, "all");
    const std::vector<std::string> expected = {"dataset", "pair",     "train",    "train-maskgen",
                                               "genmask", "generate", "evaluate", "segval"};
    CHECK(plan == expected);

    cfg.edit.program = "scale tendon x 1.5";
    const auto with_edit = execution_plan(cfg, "all");
    CHECK(with_edit.size() == expected.size() + 1);
    CHECK(with_edit[6] == "edit");

    CHECK(execution_plan(cfg, "train") == std::vector<std::string>{"train"});
    CHECK_THROWS_WITH_AS(execution_plan(cfg, "deploy"), doctest::Contains("unknown subcommand 'deploy'"),
                         Error);
}

TEST_CASE("dry run plans without touching the filesystem") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root = fs::temp_directory_path() / "csg_pipeline_never_created";
    fs::remove_all(root);

    const auto lines = dry_run_lines(cfg, "all", root);
    REQUIRE(lines.size() >= 3);
    CHECK(lines[0] == "run id: " + run_id(cfg));
    CHECK(lines[1].find(root.string()) != std::string::npos);
    bool mentions_train = false;
    for (const auto& line : lines) mentions_train |= line.find("would run train:") != std::string::npos;
    CHECK(mentions_train);
    CHECK(!fs::exists(root));
}

TEST_CASE("the full pipeline writes every artifact it promises") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root = fresh_dir("all");
    const auto outcomes = run_pipeline(cfg, "all", root);

    REQUIRE(outcomes.size() == 8);
    const fs::path run_dir = root / run_id(cfg);
    CHECK(!fs::exists(run_dir / ".lock"));
    CHECK(slurp(run_dir / "config.json") == config_to_json(cfg) + "\n");

    for (const char* rel : {"data/manifest.jsonl", "pairs.jsonl", "denoiser.ckpt", "train_log.csv",
                            "maskgen.ckpt", "gen_masks/manifest.jsonl", "genmask_report.json",
                            "synth/manifest.jsonl", "report.json", "report.csv", "projection.svg",
                            "comparison.json", "comparison.csv", "manifest.json"})
        CHECK_MESSAGE(fs::exists(run_dir / rel), rel);

    // The manifest lists every artifact each stage reported, and they exist.
    const nlohmann::json manifest = nlohmann::json::parse(slurp(run_dir / "manifest.json"));
    CHECK(manifest.at("run_id") == run_id(cfg));
    CHECK(manifest.at("tool_version") == std::string(kToolVersion));
    REQUIRE(manifest.at("stages").size() == 8);
    size_t listed = 0;
    for (const auto& stage : manifest.at("stages")) {
        CHECK(stage.at("seconds").get<double>() >= 0.0);
        for (const auto& artifact : stage.at("artifacts")) {
            CHECK(fs::exists(run_dir / artifact.get<std::string>()));
            ++listed;
        }
    }
    CHECK(listed >= 30);

    // Stage records carry the config hash the artifacts were produced under.
    const nlohmann::json record = nlohmann::json::parse(slurp(run_dir / "stage_train.json"));
    char expected[17];
    std::snprintf(expected, sizeof expected, "%016llx",
                  static_cast<unsigned long long>(config_hash(cfg)));
    CHECK(record.at("config_hash") == std::string(expected));

    // Logs are line-delimited JSON with start and done events per stage.
    const std::string log = slurp(run_dir / "logs" / "train.jsonl");
    std::istringstream lines(log);
    std::string line;
    int events = 0;
    while (std::getline(lines, line)) {
        const auto entry = nlohmann::json::parse(line);
        CHECK(entry.at("stage") == "train");
        ++events;
    }
    CHECK(events >= 2);
}

TEST_CASE("reruns with the same config are bit-identical") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root_a = fresh_dir("rerun_a");
    const fs::path root_b = fresh_dir("rerun_b");
    run_pipeline(cfg, "all", root_a);
    run_pipeline(cfg, "all", root_b);

    const auto bytes_a = artifact_bytes(root_a / run_id(cfg));
    const auto bytes_b = artifact_bytes(root_b / run_id(cfg));
    REQUIRE(bytes_a.size() == bytes_b.size());
    for (const auto& [rel, data] : bytes_a) {
        REQUIRE_MESSAGE(bytes_b.count(rel) == 1, rel);
        CHECK_MESSAGE(bytes_b.at(rel) == data, rel);
    }

    // A rerun into the same directory rewrites the same bytes and appends to
    // the manifest rather than replacing it.
    run_pipeline(cfg, "dataset", root_a);
    const auto after = artifact_bytes(root_a / run_id(cfg));
    for (const auto& [rel, data] : bytes_a)
        if (rel.rfind("data/", 0) == 0) CHECK(after.at(rel) == data);
    const nlohmann::json manifest = nlohmann::json::parse(slurp(root_a / run_id(cfg) / "manifest.json"));
    CHECK(manifest.at("stages").size() == 9);
}

TEST_CASE("missing upstream artifacts are named explicitly") {
    const PipelineConfig cfg = parse_config(kTinyConfig);

    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "pair", fresh_dir("miss_pair")),
                         doctest::Contains("missing upstream artifact 'data/manifest.jsonl'"), Error);
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "generate", fresh_dir("miss_gen")),
                         doctest::Contains("run the 'train' stage first"), Error);
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "genmask", fresh_dir("miss_mask")),
                         doctest::Contains("maskgen.ckpt"), Error);
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "evaluate", fresh_dir("miss_eval")),
                         doctest::Contains("missing upstream artifact"), Error);
}

TEST_CASE("config hash mismatches across stages are fatal") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root = fresh_dir("tamper");
    run_pipeline(cfg, "dataset", root);
    const fs::path run_dir = root / run_id(cfg);

    // A stage record claiming another config poisons every consumer.
    nlohmann::json record = nlohmann::json::parse(slurp(run_dir / "stage_dataset.json"));
    record["config_hash"] = "0123456789abcdef";
    std::ofstream(run_dir / "stage_dataset.json") << record.dump(2) << "\n";
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "pair", root), doctest::Contains("config hash mismatch"), Error);

    // A checkpoint trained under a different config is rejected even when no
    // stage record betrays it.
    PipelineConfig other = parse_config(kTinyConfig);
    other.seed = 8;
    const fs::path other_root = fresh_dir("tamper_other");
    run_pipeline(other, "dataset", other_root);
    run_pipeline(other, "pair", other_root);
    run_pipeline(other, "train", other_root);

    const fs::path victim = fresh_dir("tamper_victim");
    run_pipeline(cfg, "dataset", victim);
    run_pipeline(cfg, "pair", victim);
    const fs::path victim_dir = victim / run_id(cfg);
    fs::copy_file(other_root / run_id(other) / "denoiser.ckpt", victim_dir / "denoiser.ckpt");
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "generate", victim),
                         doctest::Contains("denoiser.ckpt was trained under"), Error);
}

TEST_CASE("a locked run directory refuses a second writer") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root = fresh_dir("lock");
    const fs::path run_dir = root / run_id(cfg);
    fs::create_directories(run_dir);
    std::ofstream(run_dir / ".lock") << "12345\n";

    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "dataset", root), doctest::Contains("locked"), Error);
    fs::remove(run_dir / ".lock");
    CHECK_NOTHROW(run_pipeline(cfg, "dataset", root));
    CHECK(!fs::exists(run_dir / ".lock"));
}

TEST_CASE("a run directory never mixes configs") {
    const PipelineConfig cfg = parse_config(kTinyConfig);
    const fs::path root = fresh_dir("mixed");
    run_pipeline(cfg, "dataset", root);
    const fs::path config_path = root / run_id(cfg) / "config.json";
    std::ofstream(config_path) << "{\"seed\": 1}\n";
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "pair", root), doctest::Contains("different config"), Error);
}

TEST_CASE("the edit stage writes the edited mask and canonical program") {
    PipelineConfig cfg = parse_config(kTinyConfig);
    cfg.edit.program = "scale tendon x 1.5 ; translate tendon dx 2 dy 0";
    const fs::path root = fresh_dir("edit");
    run_pipeline(cfg, "dataset", root);
    const auto outcomes = run_pipeline(cfg, "edit", root);
    REQUIRE(outcomes.size() == 1);
    const fs::path run_dir = root / run_id(cfg);
    CHECK(fs::exists(run_dir / "edit" / "program.txt"));
    CHECK(fs::exists(run_dir / "edit" / "s000000_edited_mask.pgm"));
    const std::string canon = slurp(run_dir / "edit" / "program.txt");
    CHECK(canon.find("scale tendon") != std::string::npos);
    CHECK(canon.find("translate tendon") != std::string::npos);

    // Any config change moves the run to a fresh content-addressed directory.
    cfg.edit.id = "s999999";
    CHECK(run_id(cfg) != run_id(parse_config(kTinyConfig)));
    run_pipeline(cfg, "dataset", root);
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "edit", root), doctest::Contains("s999999"), Error);

    cfg.edit.id.clear();
    cfg.edit.program.clear();
    run_pipeline(cfg, "dataset", root);
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, "edit", root), doctest::Contains("edit.program"), Error);
}

TEST_CASE("the command line tool reports errors as JSON and exits nonzero") {
    const fs::path dir = fresh_dir("cli");
    const fs::path cfg_file = dir / "tiny.json";
    std::ofstream(cfg_file) << kTinyConfig;

    std::string out, err;
    const int code = run_cli("generate --config " + cfg_file.string() + " --run-root " +
                                 (dir / "rr").string(),
                             &out, &err);
    CHECK(code == 1);
    const auto parsed = nlohmann::json::parse(err);
    CHECK(parsed.at("error").get<std::string>().find("denoiser.ckpt") != std::string::npos);
    CHECK(parsed.at("version") == std::string(kToolVersion));

    // Bad config key: same JSON error contract.
    const fs::path bad_file = dir / "bad.json";
    std::ofstream(bad_file) << R"({"trian": {}})";
    const int bad = run_cli("dataset --config " + bad_file.string(), nullptr, &err);
    CHECK(bad == 1);
    CHECK(nlohmann::json::parse(err).at("error").get<std::string>().find("trian") != std::string::npos);

    // Dry run succeeds without creating the run root.
    const fs::path never = dir / "never";
    const int dry = run_cli("all --config " + cfg_file.string() + " --run-root " + never.string() +
                                " --dry-run",
                            &out, &err);
    CHECK(dry == 0);
    CHECK(out.find("would run segval") != std::string::npos);
    CHECK(!fs::exists(never));

    // A real stage over the CLI, with --set overrides applied.
    const int ok = run_cli("dataset --config " + cfg_file.string() + " --run-root " +
                               (dir / "rr2").string() + " --set dataset.count=4 --set seed=11",
                           &out, &err);
    CHECK(ok == 0);
    PipelineConfig cfg = parse_config(kTinyConfig);
    apply_override(cfg, "dataset.count=4");
    apply_override(cfg, "seed=11");
    CHECK(fs::exists(dir / "rr2" / run_id(cfg) / "data" / "manifest.jsonl"));
    CHECK(out.find("complete") != std::string::npos);
}
