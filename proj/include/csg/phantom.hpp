#pragma once

#include "csg/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace csg {

struct PhantomParams {
    uint64_t rng_seed = 0;
    int width = 64;
    int height = 64;
    // Horizontal tissue bands including the top background and the bone
    // ridge; the bands between them alternate muscle/tendon.
    int layer_count = 4;
    std::array<float, kNumClasses> echogenicity = {
        0.0f, 0.35f, 0.65f, 0.9f, 0.15f, 0.95f, 0.8f, 0.25f};
    int speckle_scale = 1;
    float pathology_rate = 0.5f;
    // Per-sample gain and blur-radius jitter so samples differ in texture,
    // not just geometry. Off by default.
    bool texture_jitter = false;
};

void validate_params(const PhantomParams& params);

LabelMask sample_mask_geometry(const PhantomParams& params, int index);

GrayImage render_speckle(const LabelMask& mask, const PhantomParams& params, int index = 0);

struct ManifestEntry {
    std::string id;
    std::string mask_path;
    std::string image_path;
    std::string split;
    uint64_t seed = 0;

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    int width = 0;
    int height = 0;
    uint64_t rng_seed = 0;
    std::array<std::string, kNumClasses> classes{};
    std::vector<ManifestEntry> entries;
};

DatasetManifest build_dataset(const PhantomParams& params, int n, double train_frac,
                              double test_frac, const std::filesystem::path& out_dir);

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace csg
