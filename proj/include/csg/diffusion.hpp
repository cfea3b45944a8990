#pragma once

#include "csg/convnet.hpp"
#include "csg/image.hpp"
#include "csg/rng.hpp"
#include "csg/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace csg {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;

    // Linear beta ramp. The default end value is chosen so the terminal
    // signal level satisfies alphas_bar[T-1] < 0.05 at T=200.
    static NoiseSchedule linear(int T = 200, double beta_start = 1e-4, double beta_end = 0.032);

    void validate() const;
    double alpha_bar(int t) const;   // t in [1, T]
    double beta(int t) const;
    double alpha_bar_prev(int t) const;  // alpha_bar(t-1), 1.0 at t=1
};

struct ConditionPair {
    std::optional<LabelMask> semantic;
    std::optional<GrayImage> context;
};

// Training-time condition dropout: 5% of examples lose both conditions, a
// further 5% lose only the context.
ConditionPair apply_condition_dropout(const ConditionPair& cond, Rng& rng);

struct GuidanceConfig {
    double s_semantic = 1.5;
    double s_context = 2.5;
};

GrayImage forward_noising(const GrayImage& x0, int t, const GrayImage& eps, const NoiseSchedule& sched);
Tensor<float> forward_noising_field(const Tensor<float>& x0, int t, const Tensor<float>& eps,
                                    const NoiseSchedule& sched);

// Interface the guided sampler works against; the test suite substitutes
// stub models to probe the guidance algebra.
class EpsilonModel {
public:
    virtual ~EpsilonModel() = default;
    virtual int data_channels() const = 0;
    virtual int canvas_width() const = 0;
    virtual int canvas_height() const = 0;
    virtual Tensor<float> epsilon(const Tensor<float>& x_t, int t, const ConditionPair& cond) = 0;
};

// Dual guidance: eps = phi + s_S*(e(x,cS,0) - phi) + s_C*(e(x,cS,cC) - e(x,cS,0))
// with phi = e(x,0,0). Three model evaluations, two when the context is null.
Tensor<float> cfg_epsilon(EpsilonModel& model, const Tensor<float>& x_t, int t, const ConditionPair& cond,
                          const GuidanceConfig& g);

// Channel layout consumed by the denoiser: [x_t | one-hot semantic | context |
// 4 time-embedding planes]. Null conditions become all-zero channels.
constexpr int kConditionChannels = static_cast<int>(kNumClasses) + 1;
constexpr int kTimeChannels = 4;

template <typename S>
Tensor<S> assemble_denoiser_input(const Tensor<S>& x_t, int t, const ConditionPair& cond,
                                  const NoiseSchedule& sched) {
    const int d = x_t.c, h = x_t.h, w = x_t.w;
    Tensor<S> in(d + kConditionChannels + kTimeChannels, h, w);
    std::copy(x_t.v.begin(), x_t.v.end(), in.v.begin());

    const size_t plane = static_cast<size_t>(h) * w;
    S* cond_base = in.v.data() + static_cast<size_t>(d) * plane;
    std::fill(cond_base, cond_base + static_cast<size_t>(kConditionChannels) * plane, S(0));
    if (cond.semantic) {
        const LabelMask& m = *cond.semantic;
        if (m.width != w || m.height != h) throw Error("diffusion: semantic mask shape mismatch");
        for (size_t i = 0; i < plane; ++i) cond_base[static_cast<size_t>(m.data[i]) * plane + i] = S(1);
    }
    if (cond.context) {
        const GrayImage& c = *cond.context;
        if (c.width != w || c.height != h) throw Error("diffusion: context image shape mismatch");
        S* ctx = cond_base + static_cast<size_t>(kNumClasses) * plane;
        for (size_t i = 0; i < plane; ++i) ctx[i] = static_cast<S>(c.data[i]);
    }

    const double abar = sched.alpha_bar(t);
    const double tt = static_cast<double>(t) / static_cast<double>(sched.T);
    const S temb[kTimeChannels] = {static_cast<S>(tt), static_cast<S>(std::sqrt(abar)),
                                   static_cast<S>(std::sqrt(1.0 - abar)),
                                   static_cast<S>(std::cos(M_PI * tt))};
    for (int k = 0; k < kTimeChannels; ++k) {
        S* p = in.v.data() + (static_cast<size_t>(d + kConditionChannels + k)) * plane;
        std::fill(p, p + plane, temb[k]);
    }
    return in;
}

// Batch epsilon-MSE loss (squared L2 per example, averaged over the batch)
// plus its parameter gradient. Shared by the training step and the
// finite-difference probes, which run it in double precision.
template <typename S>
double denoiser_loss_grad(const UNet<S>& net, typename UNet<S>::Workspace& ws,
                          const std::vector<Tensor<S>>& inputs, const std::vector<Tensor<S>>& targets,
                          std::vector<S>* grad) {
    if (inputs.empty() || inputs.size() != targets.size()) throw Error("diffusion: bad loss batch");
    if (grad) {
        grad->assign(net.param_count(), S(0));
    }
    double loss = 0.0;
    const double inv_batch = 1.0 / static_cast<double>(inputs.size());
    for (size_t b = 0; b < inputs.size(); ++b) {
        const Tensor<S> out = net.forward_train(inputs[b], ws);
        if (out.c != targets[b].c || out.h != targets[b].h || out.w != targets[b].w)
            throw Error("diffusion: target shape mismatch");
        Tensor<S> dout(out.c, out.h, out.w);
        double ex_loss = 0.0;
        for (size_t i = 0; i < out.v.size(); ++i) {
            const double d = static_cast<double>(out.v[i]) - static_cast<double>(targets[b].v[i]);
            ex_loss += d * d;
            dout.v[i] = static_cast<S>(2.0 * d * inv_batch);
        }
        loss += ex_loss * inv_batch;
        if (grad) net.backward(dout, ws, *grad);
    }
    return loss;
}

class DenoiserModel final : public EpsilonModel {
public:
    DenoiserModel() = default;
    DenoiserModel(int data_channels, int width, int height, NoiseSchedule sched, int net_width, int net_levels,
                  uint64_t init_seed);

    int data_channels() const override { return channels_; }
    int canvas_width() const override { return width_; }
    int canvas_height() const override { return height_; }
    Tensor<float> epsilon(const Tensor<float>& x_t, int t, const ConditionPair& cond) override;

    const NoiseSchedule& schedule() const { return sched_; }
    UNet<float>& net() { return net_; }
    const UNet<float>& net() const { return net_; }
    uint64_t config_hash = 0;

private:
    friend void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path);
    friend DenoiserModel load_checkpoint(const std::filesystem::path& path);

    int channels_ = 1;
    int width_ = 64;
    int height_ = 64;
    NoiseSchedule sched_;
    UNet<float> net_;
};

// One optimizer step on a batch of (clean raster, conditions). Returns the
// loss before the step. Condition dropout is applied per example.
double train_step_field(DenoiserModel& model, Adam<float>& opt,
                        const std::vector<std::pair<Tensor<float>, ConditionPair>>& batch,
                        const NoiseSchedule& sched, Rng& rng);
double train_step(DenoiserModel& model, Adam<float>& opt,
                  const std::vector<std::pair<GrayImage, ConditionPair>>& batch, const NoiseSchedule& sched,
                  Rng& rng);

struct TrainOptions {
    int steps = 2000;
    int batch_size = 8;
    double lr = 1e-3;
    uint64_t seed = 0;
    int log_every = 25;
};

// Uniform-random minibatch training loop; writes a "step,loss" CSV when a
// log path is given.
void train_denoiser_field(DenoiserModel& model, const std::vector<std::pair<Tensor<float>, ConditionPair>>& dataset,
                          const TrainOptions& opts, const std::filesystem::path& log_csv = {});
void train_denoiser(DenoiserModel& model, const std::vector<std::pair<GrayImage, ConditionPair>>& dataset,
                    const TrainOptions& opts, const std::filesystem::path& log_csv = {});

// Ancestral sampler. With guidance, every step uses cfg_epsilon (semantic
// condition required); without, the model is evaluated once per step on the
// conditions as given (the unconditional path passes empty conditions).
Tensor<float> sample_field(EpsilonModel& model, const ConditionPair& cond, const GuidanceConfig* g,
                           const NoiseSchedule& sched, Rng& rng);
GrayImage sample(DenoiserModel& model, const ConditionPair& cond, const GuidanceConfig& g,
                 const NoiseSchedule& sched, Rng& rng);
GrayImage sample_unconditional(DenoiserModel& model, const NoiseSchedule& sched, Rng& rng);

void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path);
DenoiserModel load_checkpoint(const std::filesystem::path& path);

}  // namespace csg
