#pragma once

#include "csg/image.hpp"
#include "csg/phantom.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace csg {

// Frozen random conv features: 3x3 kernels, bias-free, rectifier, 2x2 average
// pool between layers. Texture descriptors are layer Gram matrices.
struct ConvStackLayer {
    int in_c = 0;
    int out_c = 0;
    std::vector<float> weights;  // out_c * in_c * 9
};

struct ConvStack {
    uint64_t seed = 0;
    std::vector<ConvStackLayer> layers;
};

ConvStack make_conv_stack(uint64_t seed);

using StyleDescriptor = std::vector<float>;

size_t descriptor_length(const ConvStack& stack, const std::vector<int>& layer_ids);

StyleDescriptor extract_descriptor(const GrayImage& img, const ConvStack& stack,
                                   const std::vector<int>& layer_ids = {0, 1, 2});

double descriptor_mse(const StyleDescriptor& a, const StyleDescriptor& b);

// Per-channel spatial statistics of every layer's rectified activations, in
// depth order. The second moments are the Gram diagonal.
struct ActivationStats {
    std::vector<float> mean;
    std::vector<float> second_moment;
};

ActivationStats extract_activation_stats(const GrayImage& img, const ConvStack& stack);

struct ContextIndex {
    std::vector<std::string> ids;
    std::vector<StyleDescriptor> descriptors;

    void add(std::string id, StyleDescriptor descriptor);
    size_t size() const { return ids.size(); }
};

std::string select_context(const std::string& query_id, const ContextIndex& index);

struct PairedEntry {
    std::string id;
    std::string mask_path;
    std::string image_path;
    std::string split;
    uint64_t seed = 0;
    std::string context_id;

    bool operator==(const PairedEntry&) const = default;
};

struct PairedManifest {
    int width = 0;
    int height = 0;
    uint64_t rng_seed = 0;
    std::vector<PairedEntry> entries;
};

PairedManifest build_pairs(const DatasetManifest& manifest, const ConvStack& stack,
                           const std::filesystem::path& base_dir,
                           const std::vector<int>& layer_ids = {0, 1, 2});

void write_paired_manifest(const PairedManifest& manifest, const std::filesystem::path& path);
PairedManifest read_paired_manifest(const std::filesystem::path& path);

void save_descriptors(const std::vector<StyleDescriptor>& descriptors, const std::filesystem::path& path);
std::vector<StyleDescriptor> load_descriptors(const std::filesystem::path& path);

}  // namespace csg
