// SPDX-License-Identifier: Apache-2.0
//
// Conditional UNet, depth 3 (R, R/2, R/4). Residual blocks are modulated by
// the timestep embedding through per-block AdaLN projections:
//   h_out = (1 + s(t)) * LayerNorm(h_in) + b(t)
// and condition tokens enter through cross-attention at the two coarsest
// resolutions plus the middle block.
//
// Initialization keeps the net close to an identity-free zero map: AdaLN
// projections, attention output projections and the final conv start at
// zero, so forward(x) == 0 exactly at construction.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "ops.hpp"
#include "params.hpp"

namespace codiff::nn {

struct AdalnParams {
    Tensor sw, sb, bw, bb;  // s = temb @ sw + sb, b = temb @ bw + bb
};

struct AttnParams {
    Tensor wq, wk, wv, wo, bo;
};

// h_out = (1 + s(t)) * LayerNorm(h) + b(t); h [N,C,H,W], temb [N,Td].
inline Tensor adaln(const Tensor& h, const Tensor& temb, const AdalnParams& p) {
    Tensor s = linear(temb, p.sw, p.sb);
    Tensor b = linear(temb, p.bw, p.bb);
    return layer_norm_mod(h, s, b);
}

// Residual cross-attention: queries from pixels, keys/values from condition
// tokens; empty context is a contract violation.
inline Tensor cross_attention(const Tensor& h, const Tensor& ctx, const AttnParams& p) {
    if (h.rank() != 4) throw std::invalid_argument("cross_attention: h must be [N,C,H,W]");
    if (ctx.rank() != 3 || ctx.dim(0) != h.dim(0))
        throw std::invalid_argument("cross_attention: ctx must be [N,L,E] with matching batch");
    if (ctx.dim(1) < 1) throw std::invalid_argument("cross_attention: empty context");
    int C = h.dim(1), H = h.dim(2), W = h.dim(3);
    Tensor tok = nchw_to_tokens(layer_norm(h));
    Tensor q = linear(tok, p.wq);
    Tensor k = linear(ctx, p.wk);
    Tensor v = linear(ctx, p.wv);
    Tensor att = softmax_last(scale(bmm_nt(q, k), 1.0f / std::sqrt(static_cast<float>(C))));
    Tensor o = linear(bmm_nn(att, v), p.wo, p.bo);
    return add(h, tokens_to_nchw(o, H, W));
}

struct UNetConfig {
    int in_channels = 3;
    int out_channels = 3;
    int resolution = 32;  // divisible by 4
    int width = 32;       // base channel count
    int ctx_dim = 32;     // condition token width
    int sin_dim = 32;     // sinusoidal time features
    int time_dim = 0;     // 0 -> 2 * width

    int td() const { return time_dim > 0 ? time_dim : 2 * width; }
    void validate() const {
        if (resolution < 4 || resolution % 4 != 0)
            throw std::invalid_argument("unet: resolution must be a positive multiple of 4");
        if (width < 2) throw std::invalid_argument("unet: width must be >= 2");
        if (in_channels < 1 || out_channels < 1 || ctx_dim < 1 || sin_dim < 2 ||
            sin_dim % 2 != 0)
            throw std::invalid_argument("unet: bad channel configuration");
    }
};

class UNet {
public:
    UNetConfig cfg;
    ParamSet params;

    UNet(const UNetConfig& c, RngStream& rng) : cfg(c) {
        cfg.validate();
        int W = cfg.width, Td = cfg.td();
        int c0 = W, c1 = 2 * W, c2 = 2 * W;

        params.add("time.fc1.w", xavier_normal(rng, {cfg.sin_dim, Td},
                                               static_cast<size_t>(cfg.sin_dim),
                                               static_cast<size_t>(Td)));
        params.add("time.fc1.b", Tensor::zeros({Td}));
        params.add("time.fc2.w", xavier_normal(rng, {Td, Td}, static_cast<size_t>(Td),
                                               static_cast<size_t>(Td)));
        params.add("time.fc2.b", Tensor::zeros({Td}));

        add_conv(rng, "conv_in", cfg.in_channels, c0, 3);
        add_res(rng, "d0", c0, c0);
        add_conv(rng, "down0", c0, c1, 3);
        add_res(rng, "d1", c1, c1);
        add_attn(rng, "d1", c1);
        add_conv(rng, "down1", c1, c2, 3);
        add_res(rng, "d2", c2, c2);
        add_attn(rng, "d2", c2);
        add_res(rng, "mid1", c2, c2);
        add_attn(rng, "mid", c2);
        add_res(rng, "mid2", c2, c2);
        add_res(rng, "u2", 2 * c2, c2);
        add_attn(rng, "u2", c2);
        add_conv(rng, "upc1", c2, c1, 3);
        add_res(rng, "u1", 2 * c1, c1);
        add_attn(rng, "u1", c1);
        add_conv(rng, "upc0", c1, c0, 3);
        add_res(rng, "u0", 2 * c0, c0);

        // zero-init output head: the net is the exact zero map at start
        params.add("conv_out.w", Tensor::zeros({cfg.out_channels, c0, 3, 3}));
        params.add("conv_out.b", Tensor::zeros({cfg.out_channels}));
    }

    // x: [N,Cin,R,R]; t: one timestep per sample (or a single shared one);
    // ctx: [N,L,ctx_dim] condition tokens.
    Tensor forward(const Tensor& x, const std::vector<int>& t, const Tensor& ctx) const {
        int R = cfg.resolution;
        if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != R || x.dim(3) != R)
            throw std::invalid_argument("unet: input must be [N," +
                                        std::to_string(cfg.in_channels) + "," +
                                        std::to_string(R) + "," + std::to_string(R) + "], got " +
                                        shape_str(x.shape));
        int N = x.dim(0);
        if (t.size() != static_cast<size_t>(N) && t.size() != 1)
            throw std::invalid_argument("unet: need 1 or N timesteps");
        for (int tv : t)
            if (tv < 0) throw std::invalid_argument("unet: negative timestep");
        if (!ctx.defined() || ctx.rank() != 3 || ctx.dim(0) != N || ctx.dim(2) != cfg.ctx_dim)
            throw std::invalid_argument("unet: ctx must be [N,L," + std::to_string(cfg.ctx_dim) +
                                        "]");

        Tensor temb = time_embed(t, N);
        Tensor h0 = conv2d(x, params.get("conv_in.w"), params.get("conv_in.b"));
        h0 = res_block("d0", h0, temb);
        Tensor h1 = conv2d(h0, params.get("down0.w"), params.get("down0.b"), 2);
        h1 = res_block("d1", h1, temb);
        h1 = attn_block("d1", h1, ctx);
        Tensor h2 = conv2d(h1, params.get("down1.w"), params.get("down1.b"), 2);
        h2 = res_block("d2", h2, temb);
        h2 = attn_block("d2", h2, ctx);

        Tensor m = res_block("mid1", h2, temb);
        m = attn_block("mid", m, ctx);
        m = res_block("mid2", m, temb);

        Tensor u2 = res_block("u2", concat_ch(m, h2), temb);
        u2 = attn_block("u2", u2, ctx);
        Tensor uu1 = conv2d(upsample2x(u2), params.get("upc1.w"), params.get("upc1.b"));
        Tensor u1 = res_block("u1", concat_ch(uu1, h1), temb);
        u1 = attn_block("u1", u1, ctx);
        Tensor uu0 = conv2d(upsample2x(u1), params.get("upc0.w"), params.get("upc0.b"));
        Tensor u0 = res_block("u0", concat_ch(uu0, h0), temb);

        return conv2d(silu(layer_norm(u0)), params.get("conv_out.w"), params.get("conv_out.b"));
    }

    size_t param_count() const { return params.count(); }

private:
    void add_conv(RngStream& rng, const std::string& name, int cin, int cout, int k) {
        params.add(name + ".w",
                   he_normal(rng, {cout, cin, k, k}, static_cast<size_t>(cin) * k * k));
        params.add(name + ".b", Tensor::zeros({cout}));
    }

    void add_adaln(const std::string& name, int ch) {
        int Td = cfg.td();
        params.add(name + ".sw", Tensor::zeros({Td, ch}));
        params.add(name + ".sb", Tensor::zeros({ch}));
        params.add(name + ".bw", Tensor::zeros({Td, ch}));
        params.add(name + ".bb", Tensor::zeros({ch}));
    }

    void add_res(RngStream& rng, const std::string& name, int cin, int cout) {
        add_adaln(name + ".ad1", cin);
        add_conv(rng, name + ".conv1", cin, cout, 3);
        add_adaln(name + ".ad2", cout);
        add_conv(rng, name + ".conv2", cout, cout, 3);
        if (cin != cout) add_conv(rng, name + ".skip", cin, cout, 1);
    }

    void add_attn(RngStream& rng, const std::string& name, int ch) {
        size_t c = static_cast<size_t>(ch), e = static_cast<size_t>(cfg.ctx_dim);
        params.add(name + ".attn.wq", xavier_normal(rng, {ch, ch}, c, c));
        params.add(name + ".attn.wk", xavier_normal(rng, {cfg.ctx_dim, ch}, e, c));
        params.add(name + ".attn.wv", xavier_normal(rng, {cfg.ctx_dim, ch}, e, c));
        params.add(name + ".attn.wo", Tensor::zeros({ch, ch}));  // attention starts silent
        params.add(name + ".attn.bo", Tensor::zeros({ch}));
    }

    Tensor time_embed(const std::vector<int>& t, int N) const {
        int E = cfg.sin_dim, half = E / 2;
        Tensor sins = Tensor::zeros({N, E});
        for (int n = 0; n < N; n++) {
            int tv = t[t.size() == 1 ? 0 : static_cast<size_t>(n)];
            for (int i = 0; i < half; i++) {
                double freq = std::exp(-std::log(10000.0) * i / half);
                sins.at(static_cast<size_t>(n) * E + i) =
                    static_cast<float>(std::sin(tv * freq));
                sins.at(static_cast<size_t>(n) * E + half + i) =
                    static_cast<float>(std::cos(tv * freq));
            }
        }
        Tensor h = linear(sins, params.get("time.fc1.w"), params.get("time.fc1.b"));
        return linear(silu(h), params.get("time.fc2.w"), params.get("time.fc2.b"));
    }

    Tensor res_block(const std::string& name, const Tensor& h, const Tensor& temb) const {
        AdalnParams ad1{params.get(name + ".ad1.sw"), params.get(name + ".ad1.sb"),
                        params.get(name + ".ad1.bw"), params.get(name + ".ad1.bb")};
        AdalnParams ad2{params.get(name + ".ad2.sw"), params.get(name + ".ad2.sb"),
                        params.get(name + ".ad2.bw"), params.get(name + ".ad2.bb")};
        Tensor a1 = adaln(h, temb, ad1);
        Tensor c1 = conv2d(silu(a1), params.get(name + ".conv1.w"), params.get(name + ".conv1.b"));
        Tensor a2 = adaln(c1, temb, ad2);
        Tensor c2 = conv2d(silu(a2), params.get(name + ".conv2.w"), params.get(name + ".conv2.b"));
        Tensor sk = params.has(name + ".skip.w")
                        ? conv2d(h, params.get(name + ".skip.w"), params.get(name + ".skip.b"))
                        : h;
        return add(c2, sk);
    }

    Tensor attn_block(const std::string& name, const Tensor& h, const Tensor& ctx) const {
        AttnParams at{params.get(name + ".attn.wq"), params.get(name + ".attn.wk"),
                      params.get(name + ".attn.wv"), params.get(name + ".attn.wo"),
                      params.get(name + ".attn.bo")};
        return cross_attention(h, ctx, at);
    }
};

}  // namespace codiff::nn
