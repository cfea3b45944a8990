#include "csg/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace csg {

namespace {

bool all_finite(const Tensor<float>& t) {
    for (float v : t.v)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor<float> gaussian_tensor(int c, int h, int w, Rng& rng) {
    Tensor<float> t(c, h, w);
    for (auto& v : t.v) v = static_cast<float>(rng.normal());
    return t;
}

Tensor<float> image_to_field(const GrayImage& img) {
    Tensor<float> t(1, img.height, img.width);
    std::copy(img.data.begin(), img.data.end(), t.v.begin());
    return t;
}

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
double read_f64(std::istream& in) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw Error("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw Error("schedule: betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas_bar.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        s.betas[i] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.betas[i];
        s.alphas_bar[i] = prod;
    }
    if (s.alphas_bar.front() <= 0.99)
        throw Error("schedule: first-step signal level too low (alpha_bar_1 <= 0.99)");
    if (s.alphas_bar.back() >= 0.05)
        throw Error("schedule: terminal signal level too high (alpha_bar_T >= 0.05)");
    return s;
}

void NoiseSchedule::validate() const {
    if (T < 1) throw Error("schedule: T must be >= 1");
    if (static_cast<int>(betas.size()) != T || static_cast<int>(alphas_bar.size()) != T)
        throw Error("schedule: array lengths must equal T");
    double prev = 1.0;
    for (int i = 0; i < T; ++i) {
        if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw Error("schedule: betas must lie in (0,1)");
        if (!(alphas_bar[i] > 0.0 && alphas_bar[i] < prev))
            throw Error("schedule: alphas_bar must be positive and strictly decreasing");
        prev = alphas_bar[i];
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range [1, T]");
    return alphas_bar[t - 1];
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range [1, T]");
    return betas[t - 1];
}

double NoiseSchedule::alpha_bar_prev(int t) const {
    if (t < 1 || t > T) throw Error("schedule: t out of range [1, T]");
    return t == 1 ? 1.0 : alphas_bar[t - 2];
}

ConditionPair apply_condition_dropout(const ConditionPair& cond, Rng& rng) {
    const double u = rng.uniform();
    ConditionPair out = cond;
    if (u < 0.05) {
        out.semantic.reset();
        out.context.reset();
    } else if (u < 0.10) {
        out.context.reset();
    }
    return out;
}

GrayImage forward_noising(const GrayImage& x0, int t, const GrayImage& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw Error("forward_noising: shape mismatch");
    const double abar = sched.alpha_bar(t);
    const float a = static_cast<float>(std::sqrt(abar));
    const float b = static_cast<float>(std::sqrt(1.0 - abar));
    GrayImage out(x0.width, x0.height);
    for (size_t i = 0; i < x0.data.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

Tensor<float> forward_noising_field(const Tensor<float>& x0, int t, const Tensor<float>& eps,
                                    const NoiseSchedule& sched) {
    if (x0.c != eps.c || x0.h != eps.h || x0.w != eps.w) throw Error("forward_noising: shape mismatch");
    const double abar = sched.alpha_bar(t);
    const float a = static_cast<float>(std::sqrt(abar));
    const float b = static_cast<float>(std::sqrt(1.0 - abar));
    Tensor<float> out(x0.c, x0.h, x0.w);
    for (size_t i = 0; i < x0.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

Tensor<float> cfg_epsilon(EpsilonModel& model, const Tensor<float>& x_t, int t, const ConditionPair& cond,
                          const GuidanceConfig& g) {
    if (!cond.semantic) throw Error("guidance: semantic condition is required");
    const ConditionPair none;
    ConditionPair sem_only;
    sem_only.semantic = cond.semantic;

    const Tensor<float> e_uncond = model.epsilon(x_t, t, none);
    const Tensor<float> e_sem = model.epsilon(x_t, t, sem_only);
    Tensor<float> out(e_uncond.c, e_uncond.h, e_uncond.w);
    if (cond.context) {
        const Tensor<float> e_full = model.epsilon(x_t, t, cond);
        for (size_t i = 0; i < out.v.size(); ++i) {
            const double phi = e_uncond.v[i];
            out.v[i] = static_cast<float>(phi + g.s_semantic * (e_sem.v[i] - phi) +
                                          g.s_context * (e_full.v[i] - e_sem.v[i]));
        }
    } else {
        for (size_t i = 0; i < out.v.size(); ++i) {
            const double phi = e_uncond.v[i];
            out.v[i] = static_cast<float>(phi + g.s_semantic * (e_sem.v[i] - phi));
        }
    }
    return out;
}

DenoiserModel::DenoiserModel(int data_channels, int width, int height, NoiseSchedule sched, int net_width,
                             int net_levels, uint64_t init_seed)
    : channels_(data_channels), width_(width), height_(height), sched_(std::move(sched)) {
    sched_.validate();
    if (channels_ < 1) throw Error("denoiser: data channels must be >= 1");
    NetConfig cfg;
    cfg.in_channels = channels_ + kConditionChannels + kTimeChannels;
    cfg.out_channels = channels_;
    cfg.width = net_width;
    cfg.levels = net_levels;
    net_ = UNet<float>(cfg, init_seed);
    Tensor<float> probe(cfg.in_channels, height_, width_);
    net_.check_input(probe);
}

Tensor<float> DenoiserModel::epsilon(const Tensor<float>& x_t, int t, const ConditionPair& cond) {
    if (x_t.c != channels_ || x_t.h != height_ || x_t.w != width_)
        throw Error("denoiser: input shape mismatch");
    const Tensor<float> in = assemble_denoiser_input<float>(x_t, t, cond, sched_);
    return net_.forward(in);
}

double train_step_field(DenoiserModel& model, Adam<float>& opt,
                        const std::vector<std::pair<Tensor<float>, ConditionPair>>& batch,
                        const NoiseSchedule& sched, Rng& rng) {
    if (batch.empty()) throw Error("train_step: empty batch");
    std::vector<Tensor<float>> inputs, targets;
    inputs.reserve(batch.size());
    targets.reserve(batch.size());
    for (const auto& [x0, cond] : batch) {
        const int t = static_cast<int>(rng.uniform_int(1, sched.T));
        const ConditionPair dropped = apply_condition_dropout(cond, rng);
        Tensor<float> eps = gaussian_tensor(x0.c, x0.h, x0.w, rng);
        Tensor<float> x_t = forward_noising_field(x0, t, eps, sched);
        inputs.push_back(assemble_denoiser_input<float>(x_t, t, dropped, sched));
        targets.push_back(std::move(eps));
    }
    static thread_local UNet<float>::Workspace ws;
    std::vector<float> grad;
    const double loss = denoiser_loss_grad<float>(model.net(), ws, inputs, targets, &grad);
    if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train_step: non-finite loss (" << loss << ") at lr " << opt.lr();
        throw Error(msg.str());
    }
    opt.step(model.net().params(), grad);
    return loss;
}

double train_step(DenoiserModel& model, Adam<float>& opt,
                  const std::vector<std::pair<GrayImage, ConditionPair>>& batch, const NoiseSchedule& sched,
                  Rng& rng) {
    std::vector<std::pair<Tensor<float>, ConditionPair>> fields;
    fields.reserve(batch.size());
    for (const auto& [img, cond] : batch) fields.emplace_back(image_to_field(img), cond);
    return train_step_field(model, opt, fields, sched, rng);
}

namespace {

template <typename Example>
void train_loop(DenoiserModel& model, const std::vector<Example>& dataset, const TrainOptions& opts,
                const std::filesystem::path& log_csv,
                double (*step_fn)(DenoiserModel&, Adam<float>&, const std::vector<Example>&,
                                  const NoiseSchedule&, Rng&)) {
    if (dataset.empty()) throw Error("train: empty dataset");
    if (opts.steps < 1 || opts.batch_size < 1) throw Error("train: steps and batch size must be >= 1");
    Adam<float> opt(model.net().param_count(), opts.lr);
    Rng rng(derive_seed(opts.seed, "denoiser-train"));
    std::ofstream log;
    if (!log_csv.empty()) {
        log.open(log_csv);
        if (!log) throw Error("train: cannot open log file " + log_csv.string());
        log << "step,loss\n";
    }
    for (int step = 1; step <= opts.steps; ++step) {
        std::vector<Example> batch;
        batch.reserve(opts.batch_size);
        for (int b = 0; b < opts.batch_size; ++b)
            batch.push_back(dataset[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(dataset.size()) - 1))]);
        const double loss = step_fn(model, opt, batch, model.schedule(), rng);
        if (log && (step % std::max(1, opts.log_every) == 0 || step == 1 || step == opts.steps))
            log << step << ',' << loss << '\n';
    }
}

}  // namespace

void train_denoiser_field(DenoiserModel& model,
                          const std::vector<std::pair<Tensor<float>, ConditionPair>>& dataset,
                          const TrainOptions& opts, const std::filesystem::path& log_csv) {
    train_loop(model, dataset, opts, log_csv, &train_step_field);
}

void train_denoiser(DenoiserModel& model, const std::vector<std::pair<GrayImage, ConditionPair>>& dataset,
                    const TrainOptions& opts, const std::filesystem::path& log_csv) {
    train_loop(model, dataset, opts, log_csv, &train_step);
}

Tensor<float> sample_field(EpsilonModel& model, const ConditionPair& cond, const GuidanceConfig* g,
                           const NoiseSchedule& sched, Rng& rng) {
    const int d = model.data_channels(), h = model.canvas_height(), w = model.canvas_width();
    Tensor<float> x = gaussian_tensor(d, h, w, rng);
    for (int t = sched.T; t >= 1; --t) {
        const Tensor<float> eps = g ? cfg_epsilon(model, x, t, cond, *g) : model.epsilon(x, t, cond);
        const double abar = sched.alpha_bar(t);
        const double abar_prev = sched.alpha_bar_prev(t);
        const double beta = sched.beta(t);
        const double alpha = 1.0 - beta;
        const double coef = beta / std::sqrt(1.0 - abar);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double sigma = t > 1 ? std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta) : 0.0;
        for (size_t i = 0; i < x.v.size(); ++i) {
            double mu = inv_sqrt_alpha * (x.v[i] - coef * eps.v[i]);
            if (t > 1) mu += sigma * rng.normal();
            x.v[i] = static_cast<float>(mu);
        }
        if (!all_finite(x)) {
            std::ostringstream msg;
            msg << "sample: non-finite state at t=" << t;
            throw Error(msg.str());
        }
    }
    for (auto& v : x.v) v = std::clamp(v, 0.0f, 1.0f);
    return x;
}

GrayImage sample(DenoiserModel& model, const ConditionPair& cond, const GuidanceConfig& g,
                 const NoiseSchedule& sched, Rng& rng) {
    if (model.data_channels() != 1) throw Error("sample: image sampler needs a single-channel model");
    const Tensor<float> x = sample_field(model, cond, &g, sched, rng);
    GrayImage out(model.canvas_width(), model.canvas_height());
    std::copy(x.v.begin(), x.v.end(), out.data.begin());
    return out;
}

GrayImage sample_unconditional(DenoiserModel& model, const NoiseSchedule& sched, Rng& rng) {
    if (model.data_channels() != 1) throw Error("sample: image sampler needs a single-channel model");
    const ConditionPair none;
    const Tensor<float> x = sample_field(model, none, nullptr, sched, rng);
    GrayImage out(model.canvas_width(), model.canvas_height());
    std::copy(x.v.begin(), x.v.end(), out.data.begin());
    return out;
}

void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
    out.write("CSGM", 4);
    write_u32(out, 1);  // format version
    write_u64(out, model.config_hash);
    write_u32(out, static_cast<uint32_t>(model.channels_));
    write_u32(out, static_cast<uint32_t>(model.width_));
    write_u32(out, static_cast<uint32_t>(model.height_));
    const NetConfig& cfg = model.net_.config();
    write_u32(out, static_cast<uint32_t>(cfg.width));
    write_u32(out, static_cast<uint32_t>(cfg.levels));
    write_u32(out, static_cast<uint32_t>(model.sched_.T));
    for (double b : model.sched_.betas) write_f64(out, b);
    write_u64(out, model.net_.param_count());
    model.net_.save_params(out);
    if (!out) throw Error("checkpoint: write failed for " + path.string());
}

DenoiserModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "CSGM", 4) != 0) throw Error("checkpoint: bad magic in " + path.string());
    const uint32_t version = read_u32(in);
    if (version != 1) throw Error("checkpoint: unsupported format version");
    const uint64_t hash = read_u64(in);
    const int d = static_cast<int>(read_u32(in));
    const int w = static_cast<int>(read_u32(in));
    const int h = static_cast<int>(read_u32(in));
    const int net_width = static_cast<int>(read_u32(in));
    const int net_levels = static_cast<int>(read_u32(in));
    const int T = static_cast<int>(read_u32(in));
    if (!in || d < 1 || w < 1 || h < 1 || T < 1) throw Error("checkpoint: corrupt header");
    NoiseSchedule sched;
    sched.T = T;
    sched.betas.resize(T);
    sched.alphas_bar.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        sched.betas[i] = read_f64(in);
        prod *= 1.0 - sched.betas[i];
        sched.alphas_bar[i] = prod;
    }
    DenoiserModel model(d, w, h, sched, net_width, net_levels, 0);
    model.config_hash = hash;
    const uint64_t n = read_u64(in);
    if (n != model.net_.param_count()) throw Error("checkpoint: parameter count mismatch");
    model.net_.load_params(in);
    return model;
}

}  // namespace csg
