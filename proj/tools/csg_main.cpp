#include "csg/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstddef>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

struct CliOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string run_root;
    bool dry_run = false;
};

void add_common_options(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--config", opt.config_path, "JSON config file; omitted fields keep their defaults");
    cmd->add_option("--set", opt.overrides, "override one config field, section.key=value")
        ->allow_extra_args(false);
    cmd->add_option("--run-root", opt.run_root, "directory holding run folders (default $CSG_RUN_ROOT or ./runs)");
    cmd->add_flag("--dry-run", opt.dry_run, "print the execution plan without writing anything");
}

int fail_json(const std::string& message, int code) {
    const nlohmann::json err{{"error", message}, {"tool", "csg"}, {"version", csg::kToolVersion}};
    std::cerr << err.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"guided synthetic ultrasound pipeline: phantoms, diffusion training, mask and image "
                 "generation, editing, and evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", csg::kToolVersion);

    CliOptions opt;
    const std::pair<const char*, const char*> subcommands[] = {
        {"dataset", "render the phantom dataset"},
        {"pair", "select a same-split style context for every image"},
        {"train", "train the conditioned denoiser"},
        {"train-maskgen", "train the label-mask generator"},
        {"genmask", "sample label masks through the pathology filter"},
        {"generate", "sample synthetic images from the trained denoiser"},
        {"edit", "apply a mask edit program to a dataset entry"},
        {"evaluate", "distribution metrics of synthetic vs real images"},
        {"segval", "downstream segmentation-gain experiment"},
        {"all", "run every stage in order"},
    };
    for (const auto& [name, description] : subcommands)
        add_common_options(app.add_subcommand(name, description), opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // help and version paths
        return fail_json(std::string("argument error: ") + e.what(), e.get_exit_code());
    }

    try {
        csg::PipelineConfig cfg =
            opt.config_path.empty() ? csg::PipelineConfig{} : csg::load_config(opt.config_path);
        for (const std::string& assignment : opt.overrides) csg::apply_override(cfg, assignment);

        const std::string sub = app.get_subcommands().front()->get_name();
        const std::filesystem::path root =
            opt.run_root.empty() ? csg::default_run_root() : std::filesystem::path(opt.run_root);

        if (opt.dry_run) {
            for (const std::string& line : csg::dry_run_lines(cfg, sub, root)) std::cout << line << "\n";
            return 0;
        }

        const std::vector<csg::StageOutcome> outcomes = csg::run_pipeline(cfg, sub, root, &std::cout);
        size_t files = 0;
        for (const csg::StageOutcome& outcome : outcomes) files += outcome.artifacts.size();
        std::cout << "run " << csg::run_id(cfg) << " complete: " << outcomes.size() << " stage(s), " << files
                  << " artifact(s) under " << (root / csg::run_id(cfg)).string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        return fail_json(e.what(), 1);
    }
}
