#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "csg/image.hpp"
#include "csg/rng.hpp"
#include "csg/tensor.hpp"

namespace csg {

struct NetConfig {
    int in_channels = 1;
    int out_channels = 1;
    int width = 12;   // channels at full resolution; level l runs width*(l+1)
    int levels = 3;   // number of resolutions; spatial dims must divide 2^(levels-1)
};

// Small encoder-decoder convolutional network with additive skip
// connections and a linear head. All parameters live in one flat vector so
// the optimizer, the checkpoint writer and finite-difference probes can
// treat the model as a plain parameter array.
template <typename S>
class UNet {
public:
    struct Layer {
        int in_c = 0, out_c = 0;
        size_t w_off = 0, b_off = 0;
    };

    // Keeps every intermediate needed by backward().
    struct Workspace {
        Tensor<S> x;
        std::vector<Tensor<S>> act;      // post-relu per level (down path)
        std::vector<Tensor<S>> pooled;   // conv input per level l>=1
        std::vector<Tensor<S>> upin;     // upsample output per up conv
        std::vector<Tensor<S>> fused;    // post-skip relu per up conv
    };

    UNet() = default;

    UNet(const NetConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        if (cfg.levels < 1) throw Error("net levels must be >= 1");
        if (cfg.width < 1) throw Error("net width must be >= 1");
        size_t off = 0;
        auto add_layer = [&](int in_c, int out_c) {
            Layer l;
            l.in_c = in_c;
            l.out_c = out_c;
            l.w_off = off;
            off += static_cast<size_t>(in_c) * out_c * 9;
            l.b_off = off;
            off += static_cast<size_t>(out_c);
            return l;
        };
        down_.push_back(add_layer(cfg.in_channels, level_width(0)));
        for (int l = 1; l < cfg.levels; ++l) down_.push_back(add_layer(level_width(l - 1), level_width(l)));
        for (int l = cfg.levels - 2; l >= 0; --l) up_.push_back(add_layer(level_width(l + 1), level_width(l)));
        head_ = add_layer(level_width(0), cfg.out_channels);

        params_.assign(off, S(0));
        Rng rng(init_seed);
        auto init_layer = [&](const Layer& l) {
            const double std = std::sqrt(2.0 / (9.0 * l.in_c));
            const size_t nw = static_cast<size_t>(l.in_c) * l.out_c * 9;
            for (size_t i = 0; i < nw; ++i) params_[l.w_off + i] = static_cast<S>(rng.normal() * std);
        };
        for (const auto& l : down_) init_layer(l);
        for (const auto& l : up_) init_layer(l);
        init_layer(head_);
    }

    const NetConfig& config() const { return cfg_; }
    int level_width(int l) const { return cfg_.width * (l + 1); }
    size_t param_count() const { return params_.size(); }
    std::vector<S>& params() { return params_; }
    const std::vector<S>& params() const { return params_; }

    void check_input(const Tensor<S>& x) const {
        if (x.c != cfg_.in_channels) throw Error("net input channel mismatch");
        const int div = 1 << (cfg_.levels - 1);
        if (x.h % div != 0 || x.w % div != 0 || x.h < div || x.w < div)
            throw Error("net input dims must be divisible by " + std::to_string(div));
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        Workspace ws;
        return forward_train(x, ws);
    }

    Tensor<S> forward_train(const Tensor<S>& x, Workspace& ws) const {
        check_input(x);
        const int L = cfg_.levels;
        ws.x = x;
        ws.act.assign(L, {});
        ws.pooled.assign(L, {});
        ws.upin.assign(up_.size(), {});
        ws.fused.assign(up_.size(), {});

        for (int l = 0; l < L; ++l) {
            const Tensor<S>* in = &ws.x;
            if (l > 0) {
                ws.pooled[l] = Tensor<S>(ws.act[l - 1].c, ws.act[l - 1].h / 2, ws.act[l - 1].w / 2);
                avgpool2_forward(ws.act[l - 1], ws.pooled[l]);
                in = &ws.pooled[l];
            }
            ws.act[l] = Tensor<S>(down_[l].out_c, in->h, in->w);
            conv3x3_forward(*in, wp(down_[l]), bp(down_[l]), ws.act[l]);
            relu_inplace(ws.act[l]);
        }

        const Tensor<S>* cur = &ws.act[L - 1];
        for (size_t u = 0; u < up_.size(); ++u) {
            const int l = L - 2 - static_cast<int>(u);  // target level
            ws.upin[u] = Tensor<S>(cur->c, cur->h * 2, cur->w * 2);
            upsample2_forward(*cur, ws.upin[u]);
            ws.fused[u] = Tensor<S>(up_[u].out_c, ws.upin[u].h, ws.upin[u].w);
            conv3x3_forward(ws.upin[u], wp(up_[u]), bp(up_[u]), ws.fused[u]);
            add_inplace(ws.fused[u], ws.act[l]);
            relu_inplace(ws.fused[u]);
            cur = &ws.fused[u];
        }

        Tensor<S> out(cfg_.out_channels, cur->h, cur->w);
        conv3x3_forward(*cur, wp(head_), bp(head_), out);
        return out;
    }

    // Accumulates parameter gradients into grad (sized like params()).
    // Returns nothing; input gradients are not propagated past the first layer.
    void backward(const Tensor<S>& dout, const Workspace& ws, std::vector<S>& grad) const {
        if (grad.size() != params_.size()) throw Error("gradient buffer size mismatch");
        const int L = cfg_.levels;
        const Tensor<S>* head_in = up_.empty() ? &ws.act[L - 1] : &ws.fused.back();

        conv3x3_accum_wgrad(dout, *head_in, grad.data() + head_.w_off, grad.data() + head_.b_off);
        Tensor<S> dcur(head_in->c, head_in->h, head_in->w);
        conv3x3_backward_data(dout, wp(head_), head_in->c, dcur);

        std::vector<Tensor<S>> dact(L);
        for (int l = 0; l < L; ++l) dact[l] = Tensor<S>(ws.act[l].c, ws.act[l].h, ws.act[l].w);

        // Up path in reverse: dcur currently sits at fused[last] (level 0).
        for (int u = static_cast<int>(up_.size()) - 1; u >= 0; --u) {
            const int l = L - 2 - u;
            relu_backward_inplace(dcur, ws.fused[u]);
            add_inplace(dact[l], dcur);  // skip branch
            conv3x3_accum_wgrad(dcur, ws.upin[u], grad.data() + up_[u].w_off, grad.data() + up_[u].b_off);
            Tensor<S> dup(ws.upin[u].c, ws.upin[u].h, ws.upin[u].w);
            conv3x3_backward_data(dcur, wp(up_[u]), ws.upin[u].c, dup);
            dcur = Tensor<S>(dup.c, dup.h / 2, dup.w / 2);
            upsample2_backward(dup, dcur);
        }
        add_inplace(dact[L - 1], dcur);

        for (int l = L - 1; l >= 0; --l) {
            relu_backward_inplace(dact[l], ws.act[l]);
            const Tensor<S>* in = l > 0 ? &ws.pooled[l] : &ws.x;
            conv3x3_accum_wgrad(dact[l], *in, grad.data() + down_[l].w_off, grad.data() + down_[l].b_off);
            if (l > 0) {
                Tensor<S> din(in->c, in->h, in->w);
                conv3x3_backward_data(dact[l], wp(down_[l]), in->c, din);
                Tensor<S> dprev(din.c, din.h * 2, din.w * 2);
                avgpool2_backward(din, dprev);
                add_inplace(dact[l - 1], dprev);
            }
        }
    }

    void save_params(std::ostream& out) const {
        for (S p : params_) {
            const float f = static_cast<float>(p);
            out.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    }

    void load_params(std::istream& in) {
        for (auto& p : params_) {
            float f;
            in.read(reinterpret_cast<char*>(&f), sizeof(float));
            p = static_cast<S>(f);
        }
        if (!in) throw Error("truncated parameter stream");
    }

private:
    const S* wp(const Layer& l) const { return params_.data() + l.w_off; }
    const S* bp(const Layer& l) const { return params_.data() + l.b_off; }

    NetConfig cfg_;
    std::vector<Layer> down_, up_;
    Layer head_;
    std::vector<S> params_;
};

// Adam with double-precision moments.
template <typename S>
class Adam {
public:
    Adam(size_t n, double lr) : lr_(lr), m_(n, 0.0), v_(n, 0.0) {}

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    void step(std::vector<S>& params, const std::vector<S>& grad) {
        if (params.size() != m_.size() || grad.size() != m_.size()) throw Error("adam size mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            const double mh = m_[i] / bc1;
            const double vh = v_[i] / bc2;
            params[i] -= static_cast<S>(lr_ * mh / (std::sqrt(vh) + eps_));
        }
    }

private:
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::vector<double> m_, v_;
};

}  // namespace csg
