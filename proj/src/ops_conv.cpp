#include <algorithm>
#include <cmath>

#include "sml/ops.hpp"

namespace sml {

namespace {

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

// Valid output range along one axis for kernel tap k:
// 0 <= o*stride - pad + k*dil <= in-1.
inline void tap_range(int k, int dil, int stride, int pad, int in, int out, int& lo, int& hi) {
    lo = std::max(0, ceil_div(pad - k * dil, stride));
    hi = std::min(out - 1, floor_div(in - 1 + pad - k * dil, stride));
}

struct ConvGeom {
    int N, Cin, H, W;
    int Cout, Cg, Kh, Kw;
    int Ho, Wo;
    int G, Cog;
};

ConvGeom validate(const Dims4& in, const ConvParams& p) {
    const Dims4& wd = p.weight.dims();
    ConvGeom g{};
    g.N = in.n;
    g.Cin = in.c;
    g.H = in.h;
    g.W = in.w;
    g.Cout = wd.n;
    g.Cg = wd.c;
    g.Kh = wd.h;
    g.Kw = wd.w;
    g.G = p.groups;

    if (p.groups < 1) throw ConfigError("conv2d: groups must be >= 1");
    if (p.stride_h < 1 || p.stride_w < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (p.dil_h < 1 || p.dil_w < 1) throw ConfigError("conv2d: dilation must be >= 1");
    if (p.pad_h < 0 || p.pad_w < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (g.Cin % g.G != 0 || g.Cout % g.G != 0)
        throw ConfigError("conv2d: groups must divide both channel counts");
    if (g.Cg != g.Cin / g.G)
        throw ConfigError("conv2d: weight " + wd.str() + " does not match input channels " +
                          std::to_string(g.Cin) + " with groups " + std::to_string(g.G));
    if (p.bias.defined() && p.bias.dims() != Dims4{1, g.Cout, 1, 1})
        throw ConfigError("conv2d: bias must be (1," + std::to_string(g.Cout) + ",1,1)");

    const int eh = (g.Kh - 1) * p.dil_h + 1;
    const int ew = (g.Kw - 1) * p.dil_w + 1;
    g.Ho = (g.H + 2 * p.pad_h - eh) / p.stride_h + 1;
    g.Wo = (g.W + 2 * p.pad_w - ew) / p.stride_w + 1;
    if (g.H + 2 * p.pad_h < eh || g.W + 2 * p.pad_w < ew || g.Ho < 1 || g.Wo < 1)
        throw ConfigError("conv2d: non-positive output dims for input " + in.str());
    g.Cog = g.Cout / g.G;
    return g;
}

// Output channels are processed in blocks of four so each loaded input value
// feeds four multiply-accumulate streams. The reduction order per output
// element stays (ci, kh, kw), independent of the blocking.
void conv_forward_kernel(const float* xp, const float* wp, const float* bp, float* op,
                         const ConvGeom& g, const ConvParams& p) {
    const size_t in_plane = size_t(g.H) * g.W;
    const size_t out_plane = size_t(g.Ho) * g.Wo;
    const size_t w_per_out = size_t(g.Cg) * g.Kh * g.Kw;
    for (int n = 0; n < g.N; ++n) {
        for (int gr = 0; gr < g.G; ++gr) {
            for (int col = 0; col < g.Cog; col += 4) {
                const int nb = std::min(4, g.Cog - col);
                float* oc[4];
                const float* wco[4];
                for (int b = 0; b < nb; ++b) {
                    const int co = gr * g.Cog + col + b;
                    oc[b] = op + (size_t(n) * g.Cout + co) * out_plane;
                    std::fill(oc[b], oc[b] + out_plane, bp ? bp[co] : 0.0f);
                    wco[b] = wp + size_t(co) * w_per_out;
                }
                for (int ci = 0; ci < g.Cg; ++ci) {
                    const float* xc = xp + (size_t(n) * g.Cin + size_t(gr) * g.Cg + ci) * in_plane;
                    for (int kh = 0; kh < g.Kh; ++kh) {
                        for (int kw = 0; kw < g.Kw; ++kw) {
                            const size_t wi = (size_t(ci) * g.Kh + kh) * g.Kw + kw;
                            int oh_lo, oh_hi, ow_lo, ow_hi;
                            tap_range(kh, p.dil_h, p.stride_h, p.pad_h, g.H, g.Ho, oh_lo, oh_hi);
                            tap_range(kw, p.dil_w, p.stride_w, p.pad_w, g.W, g.Wo, ow_lo, ow_hi);
                            if (oh_lo > oh_hi || ow_lo > ow_hi) continue;
                            const int cnt = ow_hi - ow_lo + 1;
                            const float w0 = wco[0][wi];
                            const float w1 = nb > 1 ? wco[1][wi] : 0.0f;
                            const float w2 = nb > 2 ? wco[2][wi] : 0.0f;
                            const float w3 = nb > 3 ? wco[3][wi] : 0.0f;
                            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                const int ih = oh * p.stride_h - p.pad_h + kh * p.dil_h;
                                const int iw0 = ow_lo * p.stride_w - p.pad_w + kw * p.dil_w;
                                const float* src = xc + size_t(ih) * g.W + iw0;
                                const size_t at = size_t(oh) * g.Wo + ow_lo;
                                if (p.stride_w == 1) {
                                    if (nb == 4) {
                                        float* d0 = oc[0] + at;
                                        float* d1 = oc[1] + at;
                                        float* d2 = oc[2] + at;
                                        float* d3 = oc[3] + at;
                                        for (int i = 0; i < cnt; ++i) {
                                            const float s = src[i];
                                            d0[i] += w0 * s;
                                            d1[i] += w1 * s;
                                            d2[i] += w2 * s;
                                            d3[i] += w3 * s;
                                        }
                                    } else {
                                        for (int b = 0; b < nb; ++b) {
                                            const float w = wco[b][wi];
                                            float* dst = oc[b] + at;
                                            for (int i = 0; i < cnt; ++i) dst[i] += w * src[i];
                                        }
                                    }
                                } else {
                                    for (int b = 0; b < nb; ++b) {
                                        const float w = wco[b][wi];
                                        float* dst = oc[b] + at;
                                        for (int i = 0; i < cnt; ++i)
                                            dst[i] += w * src[size_t(i) * p.stride_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Blocked over input channels: one loaded upstream-gradient value feeds four
// scatter streams. Per dx element the accumulation order stays (co, kh, kw).
void conv_backward_input(const float* gyp, const float* wp, float* gxp, const ConvGeom& g,
                         const ConvParams& p) {
    const size_t in_plane = size_t(g.H) * g.W;
    const size_t out_plane = size_t(g.Ho) * g.Wo;
    const size_t w_per_out = size_t(g.Cg) * g.Kh * g.Kw;
    for (int n = 0; n < g.N; ++n) {
        for (int gr = 0; gr < g.G; ++gr) {
            for (int col = 0; col < g.Cog; ++col) {
                const int co = gr * g.Cog + col;
                const float* gyc = gyp + (size_t(n) * g.Cout + co) * out_plane;
                const float* wco = wp + size_t(co) * w_per_out;
                for (int ci0 = 0; ci0 < g.Cg; ci0 += 4) {
                    const int nb = std::min(4, g.Cg - ci0);
                    float* gxc[4];
                    for (int b = 0; b < nb; ++b)
                        gxc[b] = gxp +
                                 (size_t(n) * g.Cin + size_t(gr) * g.Cg + ci0 + b) * in_plane;
                    for (int kh = 0; kh < g.Kh; ++kh) {
                        for (int kw = 0; kw < g.Kw; ++kw) {
                            int oh_lo, oh_hi, ow_lo, ow_hi;
                            tap_range(kh, p.dil_h, p.stride_h, p.pad_h, g.H, g.Ho, oh_lo, oh_hi);
                            tap_range(kw, p.dil_w, p.stride_w, p.pad_w, g.W, g.Wo, ow_lo, ow_hi);
                            if (oh_lo > oh_hi || ow_lo > ow_hi) continue;
                            const int cnt = ow_hi - ow_lo + 1;
                            float w[4];
                            for (int b = 0; b < nb; ++b)
                                w[b] = wco[(size_t(ci0 + b) * g.Kh + kh) * g.Kw + kw];
                            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                const int ih = oh * p.stride_h - p.pad_h + kh * p.dil_h;
                                const int iw0 = ow_lo * p.stride_w - p.pad_w + kw * p.dil_w;
                                const float* src = gyc + size_t(oh) * g.Wo + ow_lo;
                                const size_t at = size_t(ih) * g.W + iw0;
                                if (p.stride_w == 1 && nb == 4) {
                                    float* d0 = gxc[0] + at;
                                    float* d1 = gxc[1] + at;
                                    float* d2 = gxc[2] + at;
                                    float* d3 = gxc[3] + at;
                                    for (int i = 0; i < cnt; ++i) {
                                        const float s = src[i];
                                        d0[i] += w[0] * s;
                                        d1[i] += w[1] * s;
                                        d2[i] += w[2] * s;
                                        d3[i] += w[3] * s;
                                    }
                                } else if (p.stride_w == 1) {
                                    for (int b = 0; b < nb; ++b) {
                                        float* dst = gxc[b] + at;
                                        for (int i = 0; i < cnt; ++i) dst[i] += w[b] * src[i];
                                    }
                                } else {
                                    for (int b = 0; b < nb; ++b) {
                                        float* dst = gxc[b] + at;
                                        for (int i = 0; i < cnt; ++i)
                                            dst[size_t(i) * p.stride_w] += w[b] * src[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Four output channels share each loaded input value; the four reductions run
// as independent chains in a fixed order, reproducible run to run.
void conv_backward_weight(const float* gyp, const float* xp, float* gwp, const ConvGeom& g,
                          const ConvParams& p) {
    const size_t in_plane = size_t(g.H) * g.W;
    const size_t out_plane = size_t(g.Ho) * g.Wo;
    const size_t w_per_out = size_t(g.Cg) * g.Kh * g.Kw;
    for (int n = 0; n < g.N; ++n) {
        for (int gr = 0; gr < g.G; ++gr) {
            for (int col = 0; col < g.Cog; col += 4) {
                const int nb = std::min(4, g.Cog - col);
                const float* gyc[4];
                float* gwc[4];
                for (int b = 0; b < nb; ++b) {
                    const int co = gr * g.Cog + col + b;
                    gyc[b] = gyp + (size_t(n) * g.Cout + co) * out_plane;
                    gwc[b] = gwp + size_t(co) * w_per_out;
                }
                for (int ci = 0; ci < g.Cg; ++ci) {
                    const float* xc = xp + (size_t(n) * g.Cin + size_t(gr) * g.Cg + ci) * in_plane;
                    for (int kh = 0; kh < g.Kh; ++kh) {
                        for (int kw = 0; kw < g.Kw; ++kw) {
                            int oh_lo, oh_hi, ow_lo, ow_hi;
                            tap_range(kh, p.dil_h, p.stride_h, p.pad_h, g.H, g.Ho, oh_lo, oh_hi);
                            tap_range(kw, p.dil_w, p.stride_w, p.pad_w, g.W, g.Wo, ow_lo, ow_hi);
                            if (oh_lo > oh_hi || ow_lo > ow_hi) continue;
                            const int cnt = ow_hi - ow_lo + 1;
                            float acc[4] = {0.0f, 0.0f, 0.0f, 0.0f};
                            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                const int ih = oh * p.stride_h - p.pad_h + kh * p.dil_h;
                                const int iw0 = ow_lo * p.stride_w - p.pad_w + kw * p.dil_w;
                                const float* src = xc + size_t(ih) * g.W + iw0;
                                const size_t at = size_t(oh) * g.Wo + ow_lo;
                                if (p.stride_w == 1 && nb == 4) {
                                    const float* g0 = gyc[0] + at;
                                    const float* g1 = gyc[1] + at;
                                    const float* g2 = gyc[2] + at;
                                    const float* g3 = gyc[3] + at;
                                    float a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                    for (int i = 0; i < cnt; ++i) {
                                        const float s = src[i];
                                        a0 += g0[i] * s;
                                        a1 += g1[i] * s;
                                        a2 += g2[i] * s;
                                        a3 += g3[i] * s;
                                    }
                                    acc[0] += a0;
                                    acc[1] += a1;
                                    acc[2] += a2;
                                    acc[3] += a3;
                                } else if (p.stride_w == 1) {
                                    for (int b = 0; b < nb; ++b) {
                                        const float* gy = gyc[b] + at;
                                        float a = 0;
                                        for (int i = 0; i < cnt; ++i) a += gy[i] * src[i];
                                        acc[b] += a;
                                    }
                                } else {
                                    for (int b = 0; b < nb; ++b) {
                                        const float* gy = gyc[b] + at;
                                        float a = 0;
                                        for (int i = 0; i < cnt; ++i)
                                            a += gy[i] * src[size_t(i) * p.stride_w];
                                        acc[b] += a;
                                    }
                                }
                            }
                            const size_t wi = (size_t(ci) * g.Kh + kh) * g.Kw + kw;
                            for (int b = 0; b < nb; ++b) gwc[b][wi] += acc[b];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Dims4 conv2d_out_dims(const Dims4& in, const ConvParams& p) {
    ConvGeom g = validate(in, p);
    return Dims4{g.N, g.Cout, g.Ho, g.Wo};
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
    const ConvGeom g = validate(x.dims(), p);
    Tensor out = Tensor::zeros({g.N, g.Cout, g.Ho, g.Wo});
    conv_forward_kernel(x.ptr(), p.weight.ptr(), p.bias.defined() ? p.bias.ptr() : nullptr,
                        out.ptr(), g, p);

    if (track_grad({&x, &p.weight, &p.bias})) {
        out.set_requires_grad(true);
        Tensor xc = x, w = p.weight, b = p.bias, o = out;
        ConvParams pc = p;
        active_tape()->record([xc, w, b, o, pc, g]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            if (xc.requires_grad()) conv_backward_input(gy, w.ptr(), xc.grad().data(), g, pc);
            if (w.requires_grad()) conv_backward_weight(gy, xc.ptr(), w.grad().data(), g, pc);
            if (b.defined() && b.requires_grad()) {
                float* gb = b.grad().data();
                const size_t out_plane = size_t(g.Ho) * g.Wo;
                for (int n = 0; n < g.N; ++n)
                    for (int co = 0; co < g.Cout; ++co) {
                        const float* gyc = gy + (size_t(n) * g.Cout + co) * out_plane;
                        float acc = 0.0f;
                        for (size_t i = 0; i < out_plane; ++i) acc += gyc[i];
                        gb[co] += acc;
                    }
            }
        });
    }
    return out;
}

}  // namespace sml
