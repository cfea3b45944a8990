#pragma once

#include "csg/diffusion.hpp"
#include "csg/image.hpp"
#include "csg/rng.hpp"
#include "csg/tensor.hpp"

#include <filesystem>
#include <functional>
#include <set>
#include <vector>

namespace csg {

// Continuous relaxation of a label mask: one score plane per class.
struct SoftMask {
    int width = 0;
    int height = 0;
    Tensor<float> field;  // field.c == kNumClasses

    SoftMask() = default;
    SoftMask(int w, int h) : width(w), height(h), field(kNumClasses, h, w) {}

    void validate() const;  // finite scores, shape consistency
};

SoftMask encode_onehot(const LabelMask& mask);

// Per-pixel argmax; ties go to the lowest class id.
LabelMask quantize_mask(const SoftMask& soft);

// 3x3 majority vote, windows clipped at the borders, ties to lowest id.
LabelMask majority_smooth_3x3(const LabelMask& mask);

struct PathologyFilterConfig {
    double min_ditf_fraction = 0.005;
    std::set<ClassId> require_classes;

    void validate() const;
};

bool passes_filter(const LabelMask& mask, const PathologyFilterConfig& filter);

struct GenerationReport {
    int64_t attempts = 0;
    int64_t accepted = 0;
    double acceptance_rate = 0.0;
    std::vector<double> class_frequency;  // pixel share per class over accepted masks
};

void write_generation_report(const std::filesystem::path& path, const GenerationReport& report);

// Produces one candidate mask per call; generate_masks_with rejection-samples
// around it so the filter logic can be exercised with cheap stand-ins.
using MaskSampler = std::function<LabelMask(Rng&)>;

std::vector<LabelMask> generate_masks_with(const MaskSampler& sampler, int n,
                                           const PathologyFilterConfig& filter, Rng& rng,
                                           GenerationReport* report = nullptr);

std::vector<LabelMask> generate_masks(DenoiserModel& mask_model, int n, const PathologyFilterConfig& filter,
                                      Rng& rng, GenerationReport* report = nullptr);

// Short, hot schedule for label fields; one-hot planes carry far less
// structure than speckle so the chain can mix faster.
NoiseSchedule mask_schedule();

DenoiserModel make_mask_model(int width, int height, int net_width, int net_levels, uint64_t init_seed);

void train_mask_model(DenoiserModel& model, const std::vector<LabelMask>& masks, const TrainOptions& opts,
                      const std::filesystem::path& log_csv = {});

// Pooled per-class pixel shares over a mask set.
std::vector<double> class_frequency(const std::vector<LabelMask>& masks);

double total_variation(const std::vector<double>& p, const std::vector<double>& q);

}  // namespace csg
