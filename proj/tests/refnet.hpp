// SPDX-License-Identifier: Apache-2.0
//
// Independent double-precision re-implementation of the network forward pass,
// used as the finite-difference oracle for whole-network gradient checks.
//
// The production kernels store activations in f32; differencing a loss at
// step 1e-3 through a deep stack amplifies that storage rounding past the
// 1e-3 relative tolerance, so the differenced side runs here in f64 instead.
// This file is written against the layer definitions, not the production
// loops (per-pixel convolution instead of shifted windows, etc.), and the
// tests assert agreement between the two forwards before trusting either —
// a wiring mistake on either side shows up as a loud disagreement.

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "codiff/unet.hpp"

namespace refnet {

// NCHW activation grid.
struct Grid {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;
    Grid() = default;
    Grid(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}
    double& at(int ni, int ci, int y, int x) {
        return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
    double at(int ni, int ci, int y, int x) const {
        return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
};

// [N,L,D] token batch.
struct Tok {
    int n = 0, l = 0, d = 0;
    std::vector<double> v;
    Tok() = default;
    Tok(int n_, int l_, int d_)
        : n(n_), l(l_), d(d_), v(static_cast<size_t>(n_) * l_ * d_, 0.0) {}
    double& at(int ni, int li, int di) {
        return v[(static_cast<size_t>(ni) * l + li) * d + di];
    }
    double at(int ni, int li, int di) const {
        return v[(static_cast<size_t>(ni) * l + li) * d + di];
    }
};

inline Grid from_tensor(const codiff::Tensor& t) {
    if (t.rank() != 4) throw std::invalid_argument("refnet: rank-4 tensor expected");
    Grid g(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    for (size_t i = 0; i < g.v.size(); i++) g.v[i] = t.at(i);
    return g;
}

inline Tok tok_from_tensor(const codiff::Tensor& t) {
    if (t.rank() != 3) throw std::invalid_argument("refnet: rank-3 tensor expected");
    Tok o(t.dim(0), t.dim(1), t.dim(2));
    for (size_t i = 0; i < o.v.size(); i++) o.v[i] = t.at(i);
    return o;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Grid silu(Grid g) {
    for (double& x : g.v) x = x * sigmoid(x);
    return g;
}

// Textbook convolution: kernel K in {1,3}, padding K/2, stride in {1,2}.
inline Grid conv2d(const Grid& x, const codiff::Tensor& w, const codiff::Tensor& b,
                   int stride = 1) {
    int Co = w.dim(0), Ci = w.dim(1), K = w.dim(2), pad = K / 2;
    if (Ci != x.c) throw std::invalid_argument("refnet conv: channel mismatch");
    int Ho = (x.h + 2 * pad - K) / stride + 1;
    int Wo = (x.w + 2 * pad - K) / stride + 1;
    Grid o(x.n, Co, Ho, Wo);
    for (int n = 0; n < x.n; n++)
        for (int co = 0; co < Co; co++)
            for (int yo = 0; yo < Ho; yo++)
                for (int xo = 0; xo < Wo; xo++) {
                    double acc = b.defined() ? b.at(static_cast<size_t>(co)) : 0.0;
                    for (int ci = 0; ci < Ci; ci++)
                        for (int ky = 0; ky < K; ky++)
                            for (int kx = 0; kx < K; kx++) {
                                int yi = yo * stride + ky - pad;
                                int xi = xo * stride + kx - pad;
                                if (yi < 0 || yi >= x.h || xi < 0 || xi >= x.w) continue;
                                acc += static_cast<double>(w.at(
                                           ((static_cast<size_t>(co) * Ci + ci) * K + ky) * K +
                                           kx)) *
                                       x.at(n, ci, yi, xi);
                            }
                    o.at(n, co, yo, xo) = acc;
                }
    return o;
}

// Channel layer norm per position; var < 1e-12 normalizes to zero. The
// optional modulation is (1 + s) * xhat + b with s, b of size [N,C].
inline Grid layer_norm_mod(const Grid& x, const std::vector<double>* s = nullptr,
                           const std::vector<double>* b = nullptr) {
    Grid o(x.n, x.c, x.h, x.w);
    for (int n = 0; n < x.n; n++)
        for (int y = 0; y < x.h; y++)
            for (int xx = 0; xx < x.w; xx++) {
                double m = 0.0;
                for (int c = 0; c < x.c; c++) m += x.at(n, c, y, xx);
                m /= x.c;
                double var = 0.0;
                for (int c = 0; c < x.c; c++) {
                    double d = x.at(n, c, y, xx) - m;
                    var += d * d;
                }
                var /= x.c;
                double rstd = var < 1e-12 ? 0.0 : 1.0 / std::sqrt(var);
                for (int c = 0; c < x.c; c++) {
                    double xhat = (x.at(n, c, y, xx) - m) * rstd;
                    if (s)
                        xhat = (1.0 + (*s)[static_cast<size_t>(n) * x.c + c]) * xhat +
                               (*b)[static_cast<size_t>(n) * x.c + c];
                    o.at(n, c, y, xx) = xhat;
                }
            }
    return o;
}

// rows [N,K] @ w [K,D] + b [D]
inline std::vector<double> linear_rows(const std::vector<double>& x, int N, int K,
                                       const codiff::Tensor& w, const codiff::Tensor* b) {
    int D = w.dim(1);
    if (w.dim(0) != K) throw std::invalid_argument("refnet linear: shape mismatch");
    std::vector<double> o(static_cast<size_t>(N) * D, 0.0);
    for (int n = 0; n < N; n++)
        for (int d = 0; d < D; d++) {
            double acc = b ? b->at(static_cast<size_t>(d)) : 0.0;
            for (int k = 0; k < K; k++)
                acc += x[static_cast<size_t>(n) * K + k] *
                       static_cast<double>(w.at(static_cast<size_t>(k) * D + d));
            o[static_cast<size_t>(n) * D + d] = acc;
        }
    return o;
}

inline Tok linear_tok(const Tok& x, const codiff::Tensor& w, const codiff::Tensor* b) {
    Tok o(x.n, x.l, w.dim(1));
    o.v = linear_rows(x.v, x.n * x.l, x.d, w, b);
    return o;
}

inline Grid cross_attention(const Grid& h, const Tok& ctx, const codiff::Tensor& wq,
                            const codiff::Tensor& wk, const codiff::Tensor& wv,
                            const codiff::Tensor& wo, const codiff::Tensor& bo) {
    int P = h.h * h.w, C = h.c;
    Grid normed = layer_norm_mod(h);
    Tok tok(h.n, P, C);
    for (int n = 0; n < h.n; n++)
        for (int c = 0; c < C; c++)
            for (int y = 0; y < h.h; y++)
                for (int x = 0; x < h.w; x++)
                    tok.at(n, y * h.w + x, c) = normed.at(n, c, y, x);
    Tok q = linear_tok(tok, wq, nullptr);
    Tok k = linear_tok(ctx, wk, nullptr);
    Tok v = linear_tok(ctx, wv, nullptr);
    double scl = 1.0 / std::sqrt(static_cast<double>(C));
    Tok mixed(h.n, P, C);
    std::vector<double> att(static_cast<size_t>(ctx.l));
    for (int n = 0; n < h.n; n++)
        for (int p = 0; p < P; p++) {
            double mx = -1e300;
            for (int l = 0; l < ctx.l; l++) {
                double dot = 0.0;
                for (int c = 0; c < C; c++) dot += q.at(n, p, c) * k.at(n, l, c);
                att[static_cast<size_t>(l)] = dot * scl;
                mx = std::max(mx, att[static_cast<size_t>(l)]);
            }
            double denom = 0.0;
            for (int l = 0; l < ctx.l; l++) {
                att[static_cast<size_t>(l)] = std::exp(att[static_cast<size_t>(l)] - mx);
                denom += att[static_cast<size_t>(l)];
            }
            for (int c = 0; c < C; c++) {
                double acc = 0.0;
                for (int l = 0; l < ctx.l; l++) acc += att[static_cast<size_t>(l)] * v.at(n, l, c);
                mixed.at(n, p, c) = acc / denom;
            }
        }
    Tok out_tok = linear_tok(mixed, wo, &bo);
    Grid o = h;
    for (int n = 0; n < h.n; n++)
        for (int c = 0; c < C; c++)
            for (int y = 0; y < h.h; y++)
                for (int x = 0; x < h.w; x++)
                    o.at(n, c, y, x) += out_tok.at(n, y * h.w + x, c);
    return o;
}

inline Grid upsample2x(const Grid& x) {
    Grid o(x.n, x.c, 2 * x.h, 2 * x.w);
    for (int n = 0; n < x.n; n++)
        for (int c = 0; c < x.c; c++)
            for (int y = 0; y < 2 * x.h; y++)
                for (int xx = 0; xx < 2 * x.w; xx++)
                    o.at(n, c, y, xx) = x.at(n, c, y / 2, xx / 2);
    return o;
}

inline Grid concat_ch(const Grid& a, const Grid& b) {
    Grid o(a.n, a.c + b.c, a.h, a.w);
    for (int n = 0; n < a.n; n++) {
        for (int c = 0; c < a.c; c++)
            for (int y = 0; y < a.h; y++)
                for (int x = 0; x < a.w; x++) o.at(n, c, y, x) = a.at(n, c, y, x);
        for (int c = 0; c < b.c; c++)
            for (int y = 0; y < a.h; y++)
                for (int x = 0; x < a.w; x++) o.at(n, a.c + c, y, x) = b.at(n, c, y, x);
    }
    return o;
}

// Full UNet forward, reading weights from the production parameter set.
class UNetRef {
public:
    explicit UNetRef(const codiff::nn::UNet& net) : net_(net) {}

    std::vector<double> forward(const codiff::Tensor& x, const std::vector<int>& t,
                                const codiff::Tensor& ctx_t) const {
        int N = x.dim(0);
        Tok ctx = tok_from_tensor(ctx_t);
        std::vector<double> temb = time_embed(t, N);

        Grid h0 = conv2d(from_tensor(x), p("conv_in.w"), p("conv_in.b"));
        h0 = res_block("d0", h0, temb);
        Grid h1 = conv2d(h0, p("down0.w"), p("down0.b"), 2);
        h1 = res_block("d1", h1, temb);
        h1 = attn("d1", h1, ctx);
        Grid h2 = conv2d(h1, p("down1.w"), p("down1.b"), 2);
        h2 = res_block("d2", h2, temb);
        h2 = attn("d2", h2, ctx);

        Grid m = res_block("mid1", h2, temb);
        m = attn("mid", m, ctx);
        m = res_block("mid2", m, temb);

        Grid u2 = res_block("u2", concat_ch(m, h2), temb);
        u2 = attn("u2", u2, ctx);
        Grid uu1 = conv2d(upsample2x(u2), p("upc1.w"), p("upc1.b"));
        Grid u1 = res_block("u1", concat_ch(uu1, h1), temb);
        u1 = attn("u1", u1, ctx);
        Grid uu0 = conv2d(upsample2x(u1), p("upc0.w"), p("upc0.b"));
        Grid u0 = res_block("u0", concat_ch(uu0, h0), temb);

        Grid out = conv2d(silu(layer_norm_mod(u0)), p("conv_out.w"), p("conv_out.b"));
        return out.v;
    }

private:
    const codiff::nn::UNet& net_;

    const codiff::Tensor& p(const std::string& name) const { return net_.params.get(name); }

    std::vector<double> time_embed(const std::vector<int>& t, int N) const {
        int E = net_.cfg.sin_dim, half = E / 2;
        std::vector<double> sins(static_cast<size_t>(N) * E, 0.0);
        for (int n = 0; n < N; n++) {
            int tv = t[t.size() == 1 ? 0 : static_cast<size_t>(n)];
            for (int i = 0; i < half; i++) {
                double freq = std::exp(-std::log(10000.0) * i / half);
                // match the production path, which stores the features in f32
                sins[static_cast<size_t>(n) * E + i] =
                    static_cast<float>(std::sin(tv * freq));
                sins[static_cast<size_t>(n) * E + half + i] =
                    static_cast<float>(std::cos(tv * freq));
            }
        }
        std::vector<double> h = linear_rows(sins, N, E, p("time.fc1.w"), &p("time.fc1.b"));
        for (double& x : h) x = x * sigmoid(x);
        return linear_rows(h, N, net_.cfg.td(), p("time.fc2.w"), &p("time.fc2.b"));
    }

    Grid res_block(const std::string& name, const Grid& h, const std::vector<double>& temb) const {
        int N = h.n, Td = net_.cfg.td();
        auto mod = [&](const std::string& ad, int ch, std::vector<double>& s,
                       std::vector<double>& b) {
            s = linear_rows(temb, N, Td, p(ad + ".sw"), &p(ad + ".sb"));
            b = linear_rows(temb, N, Td, p(ad + ".bw"), &p(ad + ".bb"));
            if (static_cast<int>(s.size()) != N * ch)
                throw std::logic_error("refnet: modulation width mismatch");
        };
        std::vector<double> s1, b1, s2, b2;
        mod(name + ".ad1", h.c, s1, b1);
        Grid c1 = conv2d(silu(layer_norm_mod(h, &s1, &b1)), p(name + ".conv1.w"),
                         p(name + ".conv1.b"));
        mod(name + ".ad2", c1.c, s2, b2);
        Grid c2 = conv2d(silu(layer_norm_mod(c1, &s2, &b2)), p(name + ".conv2.w"),
                         p(name + ".conv2.b"));
        Grid sk = net_.params.has(name + ".skip.w")
                      ? conv2d(h, p(name + ".skip.w"), p(name + ".skip.b"))
                      : h;
        for (size_t i = 0; i < c2.v.size(); i++) c2.v[i] += sk.v[i];
        return c2;
    }

    Grid attn(const std::string& name, const Grid& h, const Tok& ctx) const {
        return cross_attention(h, ctx, p(name + ".attn.wq"), p(name + ".attn.wk"),
                               p(name + ".attn.wv"), p(name + ".attn.wo"),
                               p(name + ".attn.bo"));
    }
};

// Mean squared error against an f32 target, all in f64.
inline double mse_vs(const std::vector<double>& pred, const codiff::Tensor& target) {
    if (pred.size() != target.numel())
        throw std::invalid_argument("refnet mse: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); i++) {
        double d = pred[i] - static_cast<double>(target.at(i));
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

}  // namespace refnet
