// SPDX-License-Identifier: Apache-2.0
//
// Influence machinery for multi-collaborator fusion. Each collaborator gets
// a small companion network that looks at the same (x_t, t, condition)
// inputs and emits one scalar per pixel; a per-pixel softmax across
// collaborators turns those scores into mixing weights that sum to one at
// every pixel, and the fused prediction is the weight-blended sum of the
// collaborators' outputs.
//
// The inference-side types here work on single images ([H,W] maps); the
// batched training path in collab.hpp goes through the softmax_ch /
// fuse_influence autodiff ops and is tested against these scalar forms.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "encoders.hpp"
#include "tensor.hpp"
#include "unet.hpp"
#include "unimodal.hpp"

namespace codiff::collab {

// Companion scorer: a deliberately small UNet (single output channel) that
// rates, per pixel, how much its collaborator should steer the current
// denoising step. Carries the same modality tag as its collaborator.
class DynamicDiffuser {
public:
    nn::UNet unet;
    nn::TrainMeta meta;

    DynamicDiffuser(nn::Modality tag, const nn::UNetConfig& cfg, RngStream& rng)
        : unet(checked(cfg), rng), tag_(tag) {}

    nn::Modality tag() const { return tag_; }

    nn::ParamSet& params() { return unet.params; }
    const nn::ParamSet& params() const { return unet.params; }

private:
    static nn::UNetConfig checked(nn::UNetConfig cfg) {
        if (cfg.out_channels != 1)
            throw std::invalid_argument("diffuser: influence output must be single-channel");
        return cfg;
    }
    nn::Modality tag_;
};

// Per-pixel score map(s) for a batch: [N,1,H,W]. The condition embedding
// must carry the diffuser's own modality.
inline Tensor raw_influence(const DynamicDiffuser& d, const Tensor& xt,
                            const std::vector<int>& t, const nn::ConditionEmbedding& c) {
    if (c.tag != d.tag())
        throw std::invalid_argument(std::string("diffuser: ") + nn::to_string(d.tag()) +
                                    " scorer fed a " + nn::to_string(c.tag) + " embedding");
    return d.unet.forward(xt, t, c.tokens);
}

inline Tensor raw_influence(const DynamicDiffuser& d, const Tensor& xt, int t,
                            const nn::ConditionEmbedding& c) {
    return raw_influence(d, xt, std::vector<int>{t}, c);
}

// M score maps and their per-pixel softmax at one timestep, single image.
struct InfluenceStack {
    int t = 0;
    std::vector<Tensor> raw;         // M x [H,W]
    std::vector<Tensor> normalized;  // M x [H,W], sums to 1 per pixel

    int modalities() const { return static_cast<int>(normalized.size()); }

    // Partition of unity at every pixel, and weights inside [0,1].
    void check_partition(double tol = 1e-6) const {
        if (normalized.empty()) throw std::invalid_argument("influence: empty stack");
        size_t P = normalized[0].numel();
        for (const Tensor& m : normalized)
            if (m.numel() != P)
                throw std::invalid_argument("influence: map shapes disagree");
        for (size_t p = 0; p < P; p++) {
            double sum = 0.0;
            for (const Tensor& m : normalized) {
                float v = m.at(p);
                if (!(v >= 0.0f && v <= 1.0f))
                    throw std::invalid_argument("influence: weight " + std::to_string(v) +
                                                " outside [0,1]");
                sum += v;
            }
            if (std::abs(sum - 1.0) > tol)
                throw std::invalid_argument("influence: pixel weights sum to " +
                                            std::to_string(sum) + ", not 1");
        }
    }
};

// Per-pixel softmax across M same-shape score maps. M = 1 collapses to an
// all-ones map (the single collaborator keeps full control).
inline InfluenceStack normalize_influences(const std::vector<Tensor>& raw, int t) {
    if (raw.empty()) throw std::invalid_argument("influence: need at least one map");
    const Shape& s = raw[0].shape;
    if (raw[0].rank() != 2) throw std::invalid_argument("influence: maps must be [H,W]");
    for (const Tensor& m : raw)
        if (m.shape != s) throw std::invalid_argument("influence: map shapes disagree");

    InfluenceStack st;
    st.t = t;
    st.raw = raw;
    size_t P = raw[0].numel();
    size_t M = raw.size();
    for (size_t m = 0; m < M; m++) st.normalized.push_back(Tensor::zeros(s));
    for (size_t p = 0; p < P; p++) {
        double mx = raw[0].at(p);
        for (size_t m = 1; m < M; m++) mx = std::max(mx, static_cast<double>(raw[m].at(p)));
        double sum = 0.0;
        for (size_t m = 0; m < M; m++) sum += std::exp(static_cast<double>(raw[m].at(p)) - mx);
        for (size_t m = 0; m < M; m++)
            st.normalized[m].at(p) =
                static_cast<float>(std::exp(static_cast<double>(raw[m].at(p)) - mx) / sum);
    }
    return st;
}

// Blend M predictions ([C,H,W] each) with the stack's weights, broadcast
// across channels. The stack must satisfy the partition of unity — feeding
// unnormalized maps here is a usage error, not a silent renormalize.
inline Tensor combine_eps(const InfluenceStack& st, const std::vector<Tensor>& eps) {
    st.check_partition();
    size_t M = st.normalized.size();
    if (eps.size() != M)
        throw std::invalid_argument("influence: " + std::to_string(M) + " weight maps vs " +
                                    std::to_string(eps.size()) + " predictions");
    if (eps[0].rank() != 3 || eps[0].dim(1) != st.normalized[0].dim(0) ||
        eps[0].dim(2) != st.normalized[0].dim(1))
        throw std::invalid_argument("influence: predictions must be [C,H,W] on the map grid");
    for (const Tensor& e : eps)
        if (e.shape != eps[0].shape)
            throw std::invalid_argument("influence: prediction shapes disagree");

    int C = eps[0].dim(0);
    size_t P = st.normalized[0].numel();
    Tensor out = Tensor::zeros(eps[0].shape);
    for (int ch = 0; ch < C; ch++)
        for (size_t p = 0; p < P; p++) {
            double acc = 0.0;
            for (size_t m = 0; m < M; m++)
                acc += static_cast<double>(st.normalized[m].at(p)) *
                       static_cast<double>(eps[m].at(static_cast<size_t>(ch) * P + p));
            out.at(static_cast<size_t>(ch) * P + p) = static_cast<float>(acc);
        }
    return out;
}

// Collapse each weight map to its spatial mean, then renormalize across
// collaborators — kills spatial structure, keeps the per-step (temporal)
// trajectory. The result is constant per map and still sums to 1.
inline InfluenceStack spatial_mean_stack(const InfluenceStack& st) {
    st.check_partition();
    size_t M = st.normalized.size();
    size_t P = st.normalized[0].numel();
    std::vector<double> means(M, 0.0);
    for (size_t m = 0; m < M; m++) {
        for (size_t p = 0; p < P; p++) means[m] += st.normalized[m].at(p);
        means[m] /= static_cast<double>(P);
    }
    double total = 0.0;
    for (double v : means) total += v;
    InfluenceStack out;
    out.t = st.t;
    out.raw = st.raw;
    for (size_t m = 0; m < M; m++)
        out.normalized.push_back(
            Tensor::full(st.normalized[m].shape, static_cast<float>(means[m] / total)));
    return out;
}

}  // namespace codiff::collab
