// SPDX-License-Identifier: Apache-2.0
//
// Condition encoders: both modalities are turned into a short sequence of
// d-dimensional tokens that the UNet consumes through cross-attention.
//
//   MaskEncoder  — class map -> majority-vote 8x8 grid -> one-hot -> learned
//                  linear projection + learned positional vectors (64 tokens).
//   AttrEncoder  — (age, beard) -> 2 tokens, token_i = a_i * w_i + b_i.
//
// The token width is shared with the UNet's ctx_dim; the modality tag rides
// along with the tokens so a model can refuse embeddings from the wrong
// encoder instead of silently consuming them.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ops.hpp"
#include "params.hpp"
#include "toyface.hpp"

namespace codiff::nn {

enum class Modality : uint8_t { mask = 0, attribute = 1 };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::mask: return "mask";
        case Modality::attribute: return "attribute";
    }
    throw std::invalid_argument("modality: unknown tag");
}

inline Modality modality_from_string(const std::string& s) {
    if (s == "mask") return Modality::mask;
    if (s == "attribute") return Modality::attribute;
    throw std::invalid_argument("modality: unknown name '" + s + "'");
}

// A batch of encoded conditions: tokens [N, L, d] plus the tag of the
// encoder that produced them.
struct ConditionEmbedding {
    Modality tag = Modality::mask;
    Tensor tokens;

    int batch() const { return tokens.defined() ? tokens.dim(0) : 0; }
    int length() const { return tokens.defined() ? tokens.dim(1) : 0; }
    int width() const { return tokens.defined() ? tokens.dim(2) : 0; }

    void validate() const {
        if (!tokens.defined() || tokens.rank() != 3)
            throw std::invalid_argument("condition: tokens must be [N,L,d]");
        if (tokens.dim(0) < 1 || tokens.dim(1) < 1 || tokens.dim(2) < 1)
            throw std::invalid_argument("condition: empty token matrix");
        for (size_t i = 0; i < tokens.numel(); i++)
            if (!std::isfinite(tokens.at(i)))
                throw std::invalid_argument("condition: non-finite token value");
    }
};

// Majority class per block. The mask must be square with side divisible by
// `grid`; ties go to the lowest class id so the result is order-independent.
inline std::vector<uint8_t> majority_downsample(const toy::MaskCondition& m, int grid) {
    if (grid < 1) throw std::invalid_argument("encode_mask: grid must be positive");
    if (m.h != m.w || m.h < grid || m.h % grid != 0)
        throw std::invalid_argument("encode_mask: " + std::to_string(m.h) + "x" +
                                    std::to_string(m.w) + " mask does not tile a " +
                                    std::to_string(grid) + "x" + std::to_string(grid) + " grid");
    int block = m.h / grid;
    std::vector<uint8_t> out(static_cast<size_t>(grid) * grid);
    for (int gy = 0; gy < grid; gy++) {
        for (int gx = 0; gx < grid; gx++) {
            int counts[toy::kNumClasses] = {0};
            for (int by = 0; by < block; by++) {
                for (int bx = 0; bx < block; bx++) {
                    uint8_t c = m.at(gy * block + by, gx * block + bx);
                    if (c >= toy::kNumClasses)
                        throw std::invalid_argument("encode_mask: unknown class id " +
                                                    std::to_string(int(c)));
                    counts[c]++;
                }
            }
            int best = 0;
            for (int c = 1; c < toy::kNumClasses; c++)
                if (counts[c] > counts[best]) best = c;
            out[static_cast<size_t>(gy) * grid + gx] = static_cast<uint8_t>(best);
        }
    }
    return out;
}

// Spatial condition encoder. Parameters:
//   proj.w [K, d]     one-hot class -> token content
//   pos    [L, d]     learned positional vectors, added after projection
class MaskEncoder {
public:
    static constexpr int kGrid = 8;
    static constexpr int kTokens = kGrid * kGrid;

    ParamSet params;

    MaskEncoder(RngStream& rng, int dim) : dim_(dim) {
        if (dim < 1) throw std::invalid_argument("encode_mask: token width must be positive");
        params.add("proj.w", xavier_normal(rng, {toy::kNumClasses, dim}, toy::kNumClasses, dim));
        Tensor pos = Tensor::zeros({kTokens, dim});
        rng.fill_normal(pos, 0.02f);
        params.add("pos", pos);
    }

    int dim() const { return dim_; }

    // One-hot token matrix [N, 64, K] for a batch of masks; constant (the
    // downsample is not differentiable, only the projection after it is).
    Tensor onehot_tokens(const std::vector<toy::MaskCondition>& ms) const {
        if (ms.empty()) throw std::invalid_argument("encode_mask: empty batch");
        int n = static_cast<int>(ms.size());
        Tensor oh = Tensor::zeros({n, kTokens, toy::kNumClasses});
        for (int i = 0; i < n; i++) {
            std::vector<uint8_t> coarse = majority_downsample(ms[static_cast<size_t>(i)], kGrid);
            for (int l = 0; l < kTokens; l++)
                oh.at((static_cast<size_t>(i) * kTokens + static_cast<size_t>(l)) *
                          toy::kNumClasses +
                      coarse[static_cast<size_t>(l)]) = 1.0f;
        }
        return oh;
    }

    ConditionEmbedding encode(const std::vector<toy::MaskCondition>& ms) const {
        Tensor tok = add_rows(linear(onehot_tokens(ms), params.get("proj.w")), params.get("pos"));
        return {Modality::mask, tok};
    }

private:
    int dim_;
};

// Attribute encoder: token_i = a_i * w_i + b_i with learned rows w_i, b_i.
// Attributes are clamped to [0,1]; non-finite input is refused outright.
class AttrEncoder {
public:
    static constexpr int kTokens = 2;

    ParamSet params;

    AttrEncoder(RngStream& rng, int dim) : dim_(dim) {
        if (dim < 1) throw std::invalid_argument("encode_attr: token width must be positive");
        params.add("w", xavier_normal(rng, {kTokens, dim}, 1, dim));
        params.add("b", Tensor::zeros({kTokens, dim}));
    }

    int dim() const { return dim_; }

    ConditionEmbedding encode(const std::vector<toy::AttributeCondition>& as) const {
        if (as.empty()) throw std::invalid_argument("encode_attr: empty batch");
        int n = static_cast<int>(as.size());
        Tensor coeff = Tensor::zeros({n, kTokens});
        for (int i = 0; i < n; i++) {
            const toy::AttributeCondition& a = as[static_cast<size_t>(i)];
            if (!std::isfinite(a.age) || !std::isfinite(a.beard))
                throw std::invalid_argument("encode_attr: non-finite attribute");
            coeff.at(static_cast<size_t>(i) * kTokens + 0) = std::clamp(a.age, 0.0f, 1.0f);
            coeff.at(static_cast<size_t>(i) * kTokens + 1) = std::clamp(a.beard, 0.0f, 1.0f);
        }
        Tensor tok = affine_tokens(coeff, params.get("w"), params.get("b"));
        return {Modality::attribute, tok};
    }

private:
    int dim_;
};

}  // namespace codiff::nn
