#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace csg {

// Planar CHW tensor. Planes are row-major and contiguous, which keeps the
// convolution inner loops on contiguous memory.
template <typename S>
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<S> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, S(0)) {}

    size_t plane_size() const { return static_cast<size_t>(h) * w; }
    size_t size() const { return v.size(); }
    S* plane(int ci) { return v.data() + plane_size() * ci; }
    const S* plane(int ci) const { return v.data() + plane_size() * ci; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    void fill(S x) { std::fill(v.begin(), v.end(), x); }

    template <typename T2>
    Tensor<T2> cast() const {
        Tensor<T2> out(c, h, w);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T2>(v[i]);
        return out;
    }
};

// 3x3 convolution, zero "same" padding. Weight layout [oc][ic][ky][kx].
// Implemented as 9*in_c shifted axpy passes per output channel so the inner
// loop stays contiguous and vectorizes.
template <typename S>
void conv3x3_forward(const Tensor<S>& in, const S* w, const S* bias, Tensor<S>& out) {
    assert(out.h == in.h && out.w == in.w);
    const int H = in.h, W = in.w;
    for (int oc = 0; oc < out.c; ++oc) {
        S* op = out.plane(oc);
        const S bv = bias ? bias[oc] : S(0);
        std::fill(op, op + out.plane_size(), bv);
        for (int ic = 0; ic < in.c; ++ic) {
            const S* ip = in.plane(ic);
            const S* wk = w + (static_cast<size_t>(oc) * in.c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const int y0 = std::max(0, -dy), y1 = H - std::max(0, dy);
                for (int kx = 0; kx < 3; ++kx) {
                    const int dx = kx - 1;
                    const int x0 = std::max(0, -dx), x1 = W - std::max(0, dx);
                    const S wv = wk[ky * 3 + kx];
                    const int n = x1 - x0;
                    for (int y = y0; y < y1; ++y) {
                        const S* __restrict src = ip + static_cast<size_t>(y + dy) * W + (x0 + dx);
                        S* __restrict dst = op + static_cast<size_t>(y) * W + x0;
                        for (int x = 0; x < n; ++x) dst[x] += wv * src[x];
                    }
                }
            }
        }
    }
}

// Gradient wrt the convolution input. din must be pre-sized; it is overwritten.
template <typename S>
void conv3x3_backward_data(const Tensor<S>& dout, const S* w, int in_c, Tensor<S>& din) {
    const int H = dout.h, W = dout.w;
    assert(din.c == in_c && din.h == H && din.w == W);
    din.fill(S(0));
    for (int ic = 0; ic < in_c; ++ic) {
        S* dp = din.plane(ic);
        for (int oc = 0; oc < dout.c; ++oc) {
            const S* gp = dout.plane(oc);
            const S* wk = w + (static_cast<size_t>(oc) * in_c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const int y0 = std::max(0, -dy), y1 = H - std::max(0, dy);
                for (int kx = 0; kx < 3; ++kx) {
                    const int dx = kx - 1;
                    const int x0 = std::max(0, -dx), x1 = W - std::max(0, dx);
                    const S wv = wk[ky * 3 + kx];
                    const int n = x1 - x0;
                    for (int y = y0; y < y1; ++y) {
                        const S* __restrict src = gp + static_cast<size_t>(y) * W + x0;
                        S* __restrict dst = dp + static_cast<size_t>(y + dy) * W + (x0 + dx);
                        for (int x = 0; x < n; ++x) dst[x] += wv * src[x];
                    }
                }
            }
        }
    }
}

// Accumulates weight/bias gradients for the 3x3 convolution.
template <typename S>
void conv3x3_accum_wgrad(const Tensor<S>& dout, const Tensor<S>& in, S* dw, S* dbias) {
    const int H = in.h, W = in.w;
    for (int oc = 0; oc < dout.c; ++oc) {
        const S* gp = dout.plane(oc);
        if (dbias) {
            S s(0);
            const size_t np = dout.plane_size();
#pragma omp simd reduction(+ : s)
            for (size_t i = 0; i < np; ++i) s += gp[i];
            dbias[oc] += s;
        }
        for (int ic = 0; ic < in.c; ++ic) {
            const S* ip = in.plane(ic);
            S* wk = dw + (static_cast<size_t>(oc) * in.c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const int y0 = std::max(0, -dy), y1 = H - std::max(0, dy);
                const S* __restrict g = gp + static_cast<size_t>(y0) * W;
                const S* __restrict src = ip + static_cast<size_t>(y0 + dy) * W;
                const long n = static_cast<long>(y1 - y0) * W;
                // One fused dot-product pass over the whole slab; the shifted
                // taps pick up bogus row-wrap terms at each row seam, removed
                // below.
                S r0(0), r1(0), r2(0);
                r1 += g[0] * src[0];
                r2 += g[0] * src[1];
                r0 += g[n - 1] * src[n - 2];
                r1 += g[n - 1] * src[n - 1];
#pragma omp simd reduction(+ : r0, r1, r2)
                for (long i = 1; i < n - 1; ++i) {
                    const S gv = g[i];
                    r0 += gv * src[i - 1];
                    r1 += gv * src[i];
                    r2 += gv * src[i + 1];
                }
                for (long b = W; b < n; b += W) {
                    r0 -= g[b] * src[b - 1];
                    r2 -= g[b - 1] * src[b];
                }
                wk[ky * 3 + 0] += r0;
                wk[ky * 3 + 1] += r1;
                wk[ky * 3 + 2] += r2;
            }
        }
    }
}

// 2x2 average pooling, stride 2. Requires even spatial dims.
template <typename S>
void avgpool2_forward(const Tensor<S>& in, Tensor<S>& out) {
    assert(in.h % 2 == 0 && in.w % 2 == 0);
    assert(out.c == in.c && out.h == in.h / 2 && out.w == in.w / 2);
    for (int ci = 0; ci < in.c; ++ci) {
        const S* ip = in.plane(ci);
        S* op = out.plane(ci);
        for (int y = 0; y < out.h; ++y) {
            const S* r0 = ip + static_cast<size_t>(2 * y) * in.w;
            const S* r1 = r0 + in.w;
            S* dst = op + static_cast<size_t>(y) * out.w;
            for (int x = 0; x < out.w; ++x) {
                dst[x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * S(0.25);
            }
        }
    }
}

template <typename S>
void avgpool2_backward(const Tensor<S>& dout, Tensor<S>& din) {
    assert(din.c == dout.c && din.h == dout.h * 2 && din.w == dout.w * 2);
    for (int ci = 0; ci < dout.c; ++ci) {
        const S* gp = dout.plane(ci);
        S* dp = din.plane(ci);
        for (int y = 0; y < dout.h; ++y) {
            S* r0 = dp + static_cast<size_t>(2 * y) * din.w;
            S* r1 = r0 + din.w;
            const S* g = gp + static_cast<size_t>(y) * dout.w;
            for (int x = 0; x < dout.w; ++x) {
                const S v = g[x] * S(0.25);
                r0[2 * x] = v;
                r0[2 * x + 1] = v;
                r1[2 * x] = v;
                r1[2 * x + 1] = v;
            }
        }
    }
}

// 2x nearest-neighbor upsampling.
template <typename S>
void upsample2_forward(const Tensor<S>& in, Tensor<S>& out) {
    assert(out.c == in.c && out.h == in.h * 2 && out.w == in.w * 2);
    for (int ci = 0; ci < in.c; ++ci) {
        const S* ip = in.plane(ci);
        S* op = out.plane(ci);
        for (int y = 0; y < in.h; ++y) {
            S* r0 = op + static_cast<size_t>(2 * y) * out.w;
            S* r1 = r0 + out.w;
            const S* src = ip + static_cast<size_t>(y) * in.w;
            for (int x = 0; x < in.w; ++x) {
                r0[2 * x] = src[x];
                r0[2 * x + 1] = src[x];
                r1[2 * x] = src[x];
                r1[2 * x + 1] = src[x];
            }
        }
    }
}

template <typename S>
void upsample2_backward(const Tensor<S>& dout, Tensor<S>& din) {
    assert(dout.c == din.c && dout.h == din.h * 2 && dout.w == din.w * 2);
    for (int ci = 0; ci < din.c; ++ci) {
        const S* gp = dout.plane(ci);
        S* dp = din.plane(ci);
        for (int y = 0; y < din.h; ++y) {
            const S* r0 = gp + static_cast<size_t>(2 * y) * dout.w;
            const S* r1 = r0 + dout.w;
            S* dst = dp + static_cast<size_t>(y) * din.w;
            for (int x = 0; x < din.w; ++x) {
                dst[x] = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
}

template <typename S>
void relu_inplace(Tensor<S>& t) {
    for (auto& x : t.v) x = x > S(0) ? x : S(0);
}

// dz = dpost where post > 0, else 0; uses the post-activation as the mask.
template <typename S>
void relu_backward_inplace(Tensor<S>& grad, const Tensor<S>& post) {
    for (size_t i = 0; i < grad.v.size(); ++i) {
        if (!(post.v[i] > S(0))) grad.v[i] = S(0);
    }
}

template <typename S>
void add_inplace(Tensor<S>& a, const Tensor<S>& b) {
    assert(a.same_shape(b));
    for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

}  // namespace csg
