#pragma once

#include "csg/convnet.hpp"
#include "csg/image.hpp"
#include "csg/metrics.hpp"
#include "csg/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace csg {

// Per-pixel 8-class scorer: a small encoder-decoder over a grayscale input.
struct SegModel {
    UNet<float> net;

    Tensor<float> scores(const GrayImage& img) const;
    LabelMask predict(const GrayImage& img) const;  // argmax, ties keep the lowest class
};

struct SegTrainOptions {
    int epochs = 8;
    int batch_size = 4;
    double lr = 1e-3;
    uint64_t seed = 0;
    int net_width = 8;
    int net_levels = 3;
    double validation_fraction = 0.2;
};

// The untrained starting point train_segmenter grows from.
SegModel make_seg_model(const SegTrainOptions& opts);

void save_seg_model(const SegModel& model, const std::filesystem::path& path);
SegModel load_seg_model(const std::filesystem::path& path);

struct SegExample {
    std::string id;
    GrayImage image;
    LabelMask mask;
};

using SegDataset = std::vector<SegExample>;

// Load (image, mask) pairs for one split; an empty split name loads every
// entry. Paths resolve relative to the manifest's directory.
SegDataset load_split(const std::filesystem::path& manifest_path, const std::string& split);

// Mean per-pixel softmax cross-entropy over the batch; accumulates parameter
// gradients when grad is non-null. Examples may differ in size; each image
// contributes its pixel-mean equally.
template <typename S>
double seg_loss_grad(const UNet<S>& net, typename UNet<S>::Workspace& ws,
                     const std::vector<const SegExample*>& batch, std::vector<S>* grad) {
    if (batch.empty()) throw Error("seg_loss_grad: empty batch");
    const int classes = net.config().out_channels;
    double total = 0.0;
    for (const SegExample* ex : batch) {
        if (ex->image.width != ex->mask.width || ex->image.height != ex->mask.height)
            throw Error("seg_loss_grad: image and mask shapes differ");
        Tensor<S> x(1, ex->image.height, ex->image.width);
        for (size_t i = 0; i < ex->image.data.size(); ++i) x.v[i] = static_cast<S>(ex->image.data[i]);

        const Tensor<S> out = net.forward_train(x, ws);
        const size_t pixels = out.plane_size();
        const double norm = static_cast<double>(pixels) * static_cast<double>(batch.size());

        Tensor<S> dout(out.c, out.h, out.w);
        double loss = 0.0;
        std::vector<double> prob(static_cast<size_t>(classes));
        for (size_t p = 0; p < pixels; ++p) {
            double peak = -1e300;
            for (int c = 0; c < classes; ++c)
                peak = std::max(peak, static_cast<double>(out.v[static_cast<size_t>(c) * pixels + p]));
            double z = 0.0;
            for (int c = 0; c < classes; ++c) {
                prob[static_cast<size_t>(c)] =
                    std::exp(static_cast<double>(out.v[static_cast<size_t>(c) * pixels + p]) - peak);
                z += prob[static_cast<size_t>(c)];
            }
            const int gt = ex->mask.data[p];
            if (gt < 0 || gt >= classes) throw Error("seg_loss_grad: label out of range");
            loss -= std::log(prob[static_cast<size_t>(gt)] / z);
            if (grad) {
                for (int c = 0; c < classes; ++c) {
                    const double soft = prob[static_cast<size_t>(c)] / z;
                    dout.v[static_cast<size_t>(c) * pixels + p] =
                        static_cast<S>((soft - (c == gt ? 1.0 : 0.0)) / norm);
                }
            }
        }
        total += loss / static_cast<double>(pixels);
        if (grad) net.backward(dout, ws, *grad);
    }
    return total / static_cast<double>(batch.size());
}

// Splits the pool into train/validation, runs mini-batch Adam for the given
// epochs and returns the parameters with the best validation loss seen (the
// initialization competes too). Deterministic per seed.
SegModel train_segmenter(const SegDataset& pool, const SegTrainOptions& opts,
                         std::vector<double>* step_losses = nullptr);

struct EvalResult {
    double mean_dsc_all = 0.0;
    double mean_dsc_ditf = 0.0;
    int images = 0;
    int scored_all = 0;   // (image, class) pairs that entered the overall mean
    int scored_ditf = 0;  // images where the pathology class was present on either side
};

std::vector<ClassId> default_eval_classes();  // every class except Background

// Per-image per-class overlap, skipping classes absent from both rasters.
EvalResult evaluate_predictions(const std::vector<LabelMask>& preds, const SegDataset& test,
                                const std::vector<ClassId>& classes);
EvalResult evaluate_segmenter(const SegModel& model, const SegDataset& test,
                              const std::vector<ClassId>& classes);

struct ExperimentSpec {
    std::filesystem::path real_manifest;
    std::optional<std::filesystem::path> synthetic_manifest;  // absent = null experiment
    std::vector<uint64_t> seeds;                              // >= 3
    int epochs = 8;
    std::vector<ClassId> eval_classes = default_eval_classes();
    int max_real_train = 0;  // cap on real training images; 0 keeps all
    int batch_size = 4;
    double lr = 1e-3;
    int net_width = 8;
    int net_levels = 3;
};

struct ArmSummary {
    std::string name;
    std::vector<double> dsc_all;  // per seed
    std::vector<double> dsc_ditf;
    double mean_all = 0.0, sd_all = 0.0;
    double mean_ditf = 0.0, sd_ditf = 0.0;
};

struct ComparisonReport {
    ArmSummary control;    // real images only
    ArmSummary augmented;  // real plus synthetic
    double delta_all = 0.0;
    double delta_ditf = 0.0;
    bool synthetic_improves = false;
    int test_images = 0;
    int seeds = 0;
};

// Trains both arms for every seed on the shared splits and aggregates.
ComparisonReport compare_arms(const ExperimentSpec& spec);

void write_comparison_json(const ComparisonReport& report, const std::filesystem::path& path);
ComparisonReport read_comparison_json(const std::filesystem::path& path);
void write_comparison_csv(const ComparisonReport& report, const std::filesystem::path& path);

}  // namespace csg
