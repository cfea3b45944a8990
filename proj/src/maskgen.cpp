#include "csg/maskgen.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace csg {

void SoftMask::validate() const {
    if (width < 1 || height < 1) throw Error("soft mask: empty canvas");
    if (field.c != kNumClasses || field.h != height || field.w != width)
        throw Error("soft mask: field shape does not match canvas");
    for (float v : field.v)
        if (!std::isfinite(v)) throw Error("soft mask: non-finite score");
}

SoftMask encode_onehot(const LabelMask& mask) {
    mask.validate();
    SoftMask soft(mask.width, mask.height);
    const size_t plane = soft.field.plane_size();
    for (size_t i = 0; i < mask.data.size(); ++i)
        soft.field.v[static_cast<size_t>(mask.data[i]) * plane + i] = 1.f;
    return soft;
}

LabelMask quantize_mask(const SoftMask& soft) {
    soft.validate();
    LabelMask out(soft.width, soft.height);
    const size_t plane = soft.field.plane_size();
    for (size_t i = 0; i < plane; ++i) {
        int best = 0;
        float best_score = soft.field.v[i];
        for (int k = 1; k < kNumClasses; ++k) {
            const float s = soft.field.v[static_cast<size_t>(k) * plane + i];
            if (s > best_score) {
                best_score = s;
                best = k;
            }
        }
        out.data[i] = static_cast<uint8_t>(best);
    }
    return out;
}

LabelMask majority_smooth_3x3(const LabelMask& mask) {
    mask.validate();
    LabelMask out(mask.width, mask.height);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            int count[kNumClasses] = {};
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= mask.height) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= mask.width) continue;
                    ++count[mask.at(yy, xx)];
                }
            }
            int best = 0;
            for (int k = 1; k < kNumClasses; ++k)
                if (count[k] > count[best]) best = k;
            out.at(y, x) = static_cast<uint8_t>(best);
        }
    }
    return out;
}

void PathologyFilterConfig::validate() const {
    if (!(min_ditf_fraction >= 0.0 && min_ditf_fraction <= 1.0))
        throw Error("pathology filter: min_ditf_fraction must lie in [0,1]");
}

bool passes_filter(const LabelMask& mask, const PathologyFilterConfig& filter) {
    filter.validate();
    const std::vector<int64_t> hist = class_histogram(mask);
    const double area = static_cast<double>(mask.data.size());
    if (static_cast<double>(hist[static_cast<int>(ClassId::Ditf)]) / area < filter.min_ditf_fraction)
        return false;
    for (ClassId cls : filter.require_classes)
        if (hist[static_cast<int>(cls)] == 0) return false;
    return true;
}

std::vector<LabelMask> generate_masks_with(const MaskSampler& sampler, int n,
                                           const PathologyFilterConfig& filter, Rng& rng,
                                           GenerationReport* report) {
    if (n < 1) throw Error("generate_masks: n must be >= 1");
    filter.validate();
    const int64_t cap = 100LL * n;
    std::vector<LabelMask> accepted;
    accepted.reserve(n);
    int64_t attempts = 0;
    while (static_cast<int>(accepted.size()) < n && attempts < cap) {
        ++attempts;
        LabelMask mask = sampler(rng);
        if (passes_filter(mask, filter)) accepted.push_back(std::move(mask));
    }
    if (static_cast<int>(accepted.size()) < n) {
        std::ostringstream msg;
        msg << "generate_masks: attempt cap " << cap << " exceeded with " << accepted.size() << " of " << n
            << " masks accepted (acceptance rate "
            << static_cast<double>(accepted.size()) / static_cast<double>(attempts) << ")";
        throw Error(msg.str());
    }
    if (report) {
        report->attempts = attempts;
        report->accepted = static_cast<int64_t>(accepted.size());
        report->acceptance_rate = static_cast<double>(accepted.size()) / static_cast<double>(attempts);
        report->class_frequency = class_frequency(accepted);
    }
    return accepted;
}

std::vector<LabelMask> generate_masks(DenoiserModel& mask_model, int n, const PathologyFilterConfig& filter,
                                      Rng& rng, GenerationReport* report) {
    if (mask_model.data_channels() != kNumClasses)
        throw Error("generate_masks: model must produce one channel per class");
    const MaskSampler sampler = [&mask_model](Rng& r) {
        const ConditionPair none;
        SoftMask soft(mask_model.canvas_width(), mask_model.canvas_height());
        soft.field = sample_field(mask_model, none, nullptr, mask_model.schedule(), r);
        return majority_smooth_3x3(quantize_mask(soft));
    };
    return generate_masks_with(sampler, n, filter, rng, report);
}

NoiseSchedule mask_schedule() { return NoiseSchedule::linear(100, 1e-4, 0.06); }

DenoiserModel make_mask_model(int width, int height, int net_width, int net_levels, uint64_t init_seed) {
    return DenoiserModel(kNumClasses, width, height, mask_schedule(), net_width, net_levels, init_seed);
}

void train_mask_model(DenoiserModel& model, const std::vector<LabelMask>& masks, const TrainOptions& opts,
                      const std::filesystem::path& log_csv) {
    if (model.data_channels() != kNumClasses) throw Error("train_mask_model: wrong channel count");
    std::vector<std::pair<Tensor<float>, ConditionPair>> dataset;
    dataset.reserve(masks.size());
    for (const LabelMask& m : masks) {
        if (m.width != model.canvas_width() || m.height != model.canvas_height())
            throw Error("train_mask_model: mask shape does not match model canvas");
        dataset.emplace_back(encode_onehot(m).field, ConditionPair{});
    }
    train_denoiser_field(model, dataset, opts, log_csv);
}

std::vector<double> class_frequency(const std::vector<LabelMask>& masks) {
    std::vector<double> freq(kNumClasses, 0.0);
    int64_t total = 0;
    for (const LabelMask& m : masks) {
        const std::vector<int64_t> hist = class_histogram(m);
        for (int k = 0; k < kNumClasses; ++k) freq[k] += static_cast<double>(hist[k]);
        total += static_cast<int64_t>(m.data.size());
    }
    if (total > 0)
        for (double& f : freq) f /= static_cast<double>(total);
    return freq;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw Error("total_variation: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - q[i]);
    return 0.5 * s;
}

void write_generation_report(const std::filesystem::path& path, const GenerationReport& report) {
    nlohmann::json j;
    j["attempts"] = report.attempts;
    j["accepted"] = report.accepted;
    j["acceptance_rate"] = report.acceptance_rate;
    nlohmann::json freq = nlohmann::json::object();
    for (int k = 0; k < static_cast<int>(report.class_frequency.size()); ++k)
        freq[class_name(static_cast<ClassId>(k))] = report.class_frequency[k];
    j["class_frequency"] = freq;
    std::ofstream out(path);
    if (!out) throw Error("generation report: cannot open " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace csg
