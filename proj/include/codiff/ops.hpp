// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops on Tensor. Forward computes into a fresh buffer; when
// the tape is on and some input participates in a gradient, a Node with a
// backprop closure is attached. Backprop closures accumulate (+=) into
// parent grad buffers, so one buffer can collect from several consumers.
//
// Convolutions and matmuls accumulate in f32 (short dots, fixed order);
// global reductions (sum / mean / mse) accumulate in double so that losses
// are stable enough for tight finite-difference checks.

#pragma once

#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace codiff::nn {

inline bool wants_grad(const Tensor& t) { return t.grad != nullptr; }

inline bool track(std::initializer_list<const Tensor*> parents) {
    if (!grad_mode()) return false;
    for (const Tensor* p : parents)
        if (p->requires_grad || p->node) return true;
    return false;
}

inline Tensor make_result(const Shape& s, bool tracked) {
    Tensor out = Tensor::zeros(s);
    if (tracked) out.enable_grad();
    return out;
}

inline void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(const Tensor&)> backprop) {
    out.node = std::make_shared<Node>();
    out.node->parents = std::move(parents);
    out.node->backprop = std::move(backprop);
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    bool t = track({&a, &b});
    Tensor out = make_result(a.shape, t);
    const float *pa = a.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] + pb[i];
    if (a.numel() == 1 && (a.scalar_hi || b.scalar_hi))
        out.scalar_hi = std::make_shared<double>(a.item_hi() + b.item_hi());
    if (t) attach(out, {a, b}, [](const Tensor& o) {
        const float* g = o.grad->data();
        auto& ps = o.node->parents;
        for (int k = 0; k < 2; k++)
            if (wants_grad(ps[static_cast<size_t>(k)])) {
                float* pg = ps[static_cast<size_t>(k)].grad->data();
                for (size_t i = 0; i < o.numel(); i++) pg[i] += g[i];
            }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    bool t = track({&a, &b});
    Tensor out = make_result(a.shape, t);
    const float *pa = a.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] - pb[i];
    if (t) attach(out, {a, b}, [](const Tensor& o) {
        const float* g = o.grad->data();
        auto& ps = o.node->parents;
        if (wants_grad(ps[0])) {
            float* pg = ps[0].grad->data();
            for (size_t i = 0; i < o.numel(); i++) pg[i] += g[i];
        }
        if (wants_grad(ps[1])) {
            float* pg = ps[1].grad->data();
            for (size_t i = 0; i < o.numel(); i++) pg[i] -= g[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    bool t = track({&a, &b});
    Tensor out = make_result(a.shape, t);
    const float *pa = a.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * pb[i];
    if (t) attach(out, {a, b}, [](const Tensor& o) {
        const float* g = o.grad->data();
        auto& ps = o.node->parents;
        const float* xa = ps[0].ptr();
        const float* xb = ps[1].ptr();
        if (wants_grad(ps[0])) {
            float* pg = ps[0].grad->data();
            for (size_t i = 0; i < o.numel(); i++) pg[i] += g[i] * xb[i];
        }
        if (wants_grad(ps[1])) {
            float* pg = ps[1].grad->data();
            for (size_t i = 0; i < o.numel(); i++) pg[i] += g[i] * xa[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    bool t = track({&a});
    Tensor out = make_result(a.shape, t);
    const float* pa = a.ptr();
    float* po = out.ptr();
    for (size_t i = 0; i < out.numel(); i++) po[i] = pa[i] * c;
    if (a.scalar_hi && a.numel() == 1)
        out.scalar_hi = std::make_shared<double>(*a.scalar_hi * static_cast<double>(c));
    if (t) attach(out, {a}, [c](const Tensor& o) {
        auto& p = o.node->parents[0];
        if (!wants_grad(p)) return;
        const float* g = o.grad->data();
        float* pg = p.grad->data();
        for (size_t i = 0; i < o.numel(); i++) pg[i] += g[i] * c;
    });
    return out;
}

inline Tensor silu(const Tensor& a) {
    bool t = track({&a});
    Tensor out = make_result(a.shape, t);
    const float* pa = a.ptr();
    float* po = out.ptr();
    for (size_t i = 0; i < out.numel(); i++) {
        float s = 1.0f / (1.0f + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    if (t) attach(out, {a}, [](const Tensor& o) {
        auto& p = o.node->parents[0];
        if (!wants_grad(p)) return;
        const float* g = o.grad->data();
        const float* x = p.ptr();
        float* pg = p.grad->data();
        for (size_t i = 0; i < o.numel(); i++) {
            float s = 1.0f / (1.0f + std::exp(-x[i]));
            pg[i] += g[i] * s * (1.0f + x[i] * (1.0f - s));
        }
    });
    return out;
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
    bool t = track({&a});
    Tensor out = make_result({1}, t);
    double acc = 0.0;
    const float* pa = a.ptr();
    for (size_t i = 0; i < a.numel(); i++) acc += pa[i];
    out.at(0) = static_cast<float>(acc);
    out.scalar_hi = std::make_shared<double>(acc);
    if (t) attach(out, {a}, [](const Tensor& o) {
        auto& p = o.node->parents[0];
        if (!wants_grad(p)) return;
        float g = (*o.grad)[0];
        float* pg = p.grad->data();
        for (size_t i = 0; i < p.numel(); i++) pg[i] += g;
    });
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// Mean squared error over all elements.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
    if (!same_shape(pred, target))
        throw std::invalid_argument("mse: shape mismatch " + shape_str(pred.shape) + " vs " +
                                    shape_str(target.shape));
    if (pred.numel() == 0) throw std::invalid_argument("mse: empty tensors");
    bool t = track({&pred, &target});
    Tensor out = make_result({1}, t);
    const float *pp = pred.ptr(), *pt = target.ptr();
    double acc = 0.0;
    for (size_t i = 0; i < pred.numel(); i++) {
        double d = static_cast<double>(pp[i]) - static_cast<double>(pt[i]);
        acc += d * d;
    }
    acc /= static_cast<double>(pred.numel());
    out.at(0) = static_cast<float>(acc);
    out.scalar_hi = std::make_shared<double>(acc);
    if (t) attach(out, {pred, target}, [](const Tensor& o) {
        auto& ps = o.node->parents;
        float g = (*o.grad)[0];
        const float* xp = ps[0].ptr();
        const float* xt = ps[1].ptr();
        float c = 2.0f * g / static_cast<float>(ps[0].numel());
        if (wants_grad(ps[0])) {
            float* pg = ps[0].grad->data();
            for (size_t i = 0; i < ps[0].numel(); i++) pg[i] += c * (xp[i] - xt[i]);
        }
        if (wants_grad(ps[1])) {
            float* pg = ps[1].grad->data();
            for (size_t i = 0; i < ps[1].numel(); i++) pg[i] -= c * (xp[i] - xt[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------- linear/matmul

// x: [..., K] treated as [M, K]; w: [K, D]; optional bias b: [D]. Returns [..., D].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    if (x.rank() < 1 || w.rank() != 2)
        throw std::invalid_argument("linear: x rank >= 1 and w rank 2 required");
    int K = w.dim(0), D = w.dim(1);
    if (x.shape.back() != K)
        throw std::invalid_argument("linear: inner dim mismatch, x " + shape_str(x.shape) +
                                    " vs w " + shape_str(w.shape));
    bool has_b = b.defined();
    if (has_b && b.shape != Shape{D})
        throw std::invalid_argument("linear: bias must be [" + std::to_string(D) + "]");
    size_t M = x.numel() / static_cast<size_t>(K);
    Shape out_shape = x.shape;
    out_shape.back() = D;

    bool t = has_b ? track({&x, &w, &b}) : track({&x, &w});
    Tensor out = make_result(out_shape, t);
    const float* px = x.ptr();
    const float* pw = w.ptr();
    float* po = out.ptr();
    std::vector<double> acc(static_cast<size_t>(D));
    for (size_t m = 0; m < M; m++) {
        if (has_b) {
            const float* pb = b.ptr();
            for (int d = 0; d < D; d++) acc[static_cast<size_t>(d)] = pb[d];
        } else {
            std::fill(acc.begin(), acc.end(), 0.0);
        }
        const float* xrow = px + m * static_cast<size_t>(K);
        for (int k = 0; k < K; k++) {
            double xv = xrow[k];
            if (xv == 0.0) continue;
            const float* wrow = pw + static_cast<size_t>(k) * D;
            for (int d = 0; d < D; d++) acc[static_cast<size_t>(d)] += xv * wrow[d];
        }
        float* orow = po + m * static_cast<size_t>(D);
        for (int d = 0; d < D; d++) orow[d] = static_cast<float>(acc[static_cast<size_t>(d)]);
    }
    if (t) {
        std::vector<Tensor> parents = {x, w};
        if (has_b) parents.push_back(b);
        attach(out, std::move(parents), [K, D, M](const Tensor& o) {
            auto& ps = o.node->parents;
            const float* g = o.grad->data();
            const float* px2 = ps[0].ptr();
            const float* pw2 = ps[1].ptr();
            if (wants_grad(ps[0])) {
                float* gx = ps[0].grad->data();
                for (size_t m = 0; m < M; m++) {
                    const float* grow = g + m * static_cast<size_t>(D);
                    float* gxrow = gx + m * static_cast<size_t>(K);
                    for (int k = 0; k < K; k++) {
                        const float* wrow = pw2 + static_cast<size_t>(k) * D;
                        double acc = 0.0;
                        for (int d = 0; d < D; d++)
                            acc += static_cast<double>(grow[d]) * wrow[d];
                        gxrow[k] += static_cast<float>(acc);
                    }
                }
            }
            if (wants_grad(ps[1])) {
                float* gw = ps[1].grad->data();
                std::vector<double> wacc(static_cast<size_t>(K) * D, 0.0);
                for (size_t m = 0; m < M; m++) {
                    const float* grow = g + m * static_cast<size_t>(D);
                    const float* xrow = px2 + m * static_cast<size_t>(K);
                    for (int k = 0; k < K; k++) {
                        double xv = xrow[k];
                        if (xv == 0.0) continue;
                        double* arow = wacc.data() + static_cast<size_t>(k) * D;
                        for (int d = 0; d < D; d++) arow[d] += xv * grow[d];
                    }
                }
                for (size_t i = 0; i < wacc.size(); i++) gw[i] += static_cast<float>(wacc[i]);
            }
            if (ps.size() > 2 && wants_grad(ps[2])) {
                float* gb = ps[2].grad->data();
                std::vector<double> bacc(static_cast<size_t>(D), 0.0);
                for (size_t m = 0; m < M; m++) {
                    const float* grow = g + m * static_cast<size_t>(D);
                    for (int d = 0; d < D; d++) bacc[static_cast<size_t>(d)] += grow[d];
                }
                for (int d = 0; d < D; d++) gb[d] += static_cast<float>(bacc[static_cast<size_t>(d)]);
            }
        });
    }
    return out;
}

// scores[n,p,l] = <a[n,p,:], b[n,l,:]>
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw std::invalid_argument("bmm_nt: need [N,P,D] x [N,L,D], got " + shape_str(a.shape) +
                                    " and " + shape_str(b.shape));
    int N = a.dim(0), P = a.dim(1), D = a.dim(2), L = b.dim(1);
    bool t = track({&a, &b});
    Tensor out = make_result({N, P, L}, t);
    const float *pa = a.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++)
        for (int p = 0; p < P; p++) {
            const float* arow = pa + (static_cast<size_t>(n) * P + p) * D;
            float* orow = po + (static_cast<size_t>(n) * P + p) * L;
            for (int l = 0; l < L; l++) {
                const float* brow = pb + (static_cast<size_t>(n) * L + l) * D;
                double acc = 0.0;
                for (int d = 0; d < D; d++)
                    acc += static_cast<double>(arow[d]) * static_cast<double>(brow[d]);
                orow[l] = static_cast<float>(acc);
            }
        }
    if (t) attach(out, {a, b}, [N, P, D, L](const Tensor& o) {
        auto& ps = o.node->parents;
        const float* g = o.grad->data();
        const float* pa2 = ps[0].ptr();
        const float* pb2 = ps[1].ptr();
        if (wants_grad(ps[0])) {
            float* ga = ps[0].grad->data();
            std::vector<double> arowacc(static_cast<size_t>(D));
            for (int n = 0; n < N; n++)
                for (int p = 0; p < P; p++) {
                    const float* grow = g + (static_cast<size_t>(n) * P + p) * L;
                    float* garow = ga + (static_cast<size_t>(n) * P + p) * D;
                    std::fill(arowacc.begin(), arowacc.end(), 0.0);
                    for (int l = 0; l < L; l++) {
                        double gv = grow[l];
                        if (gv == 0.0) continue;
                        const float* brow = pb2 + (static_cast<size_t>(n) * L + l) * D;
                        for (int d = 0; d < D; d++) arowacc[d] += gv * brow[d];
                    }
                    for (int d = 0; d < D; d++) garow[d] += static_cast<float>(arowacc[d]);
                }
        }
        if (wants_grad(ps[1])) {
            float* gb = ps[1].grad->data();
            std::vector<double> bacc(static_cast<size_t>(L) * D);
            for (int n = 0; n < N; n++) {
                std::fill(bacc.begin(), bacc.end(), 0.0);
                for (int p = 0; p < P; p++) {
                    const float* grow = g + (static_cast<size_t>(n) * P + p) * L;
                    const float* arow = pa2 + (static_cast<size_t>(n) * P + p) * D;
                    for (int l = 0; l < L; l++) {
                        double gv = grow[l];
                        if (gv == 0.0) continue;
                        double* brow = bacc.data() + static_cast<size_t>(l) * D;
                        for (int d = 0; d < D; d++) brow[d] += gv * arow[d];
                    }
                }
                float* gbn = gb + static_cast<size_t>(n) * L * D;
                for (size_t i = 0; i < bacc.size(); i++) gbn[i] += static_cast<float>(bacc[i]);
            }
        }
    });
    return out;
}

// y[n,p,:] = sum_l s[n,p,l] * v[n,l,:]
inline Tensor bmm_nn(const Tensor& s, const Tensor& v) {
    if (s.rank() != 3 || v.rank() != 3 || s.dim(0) != v.dim(0) || s.dim(2) != v.dim(1))
        throw std::invalid_argument("bmm_nn: need [N,P,L] x [N,L,D], got " + shape_str(s.shape) +
                                    " and " + shape_str(v.shape));
    int N = s.dim(0), P = s.dim(1), L = s.dim(2), D = v.dim(2);
    bool t = track({&s, &v});
    Tensor out = make_result({N, P, D}, t);
    const float *pss = s.ptr(), *pv = v.ptr();
    float* po = out.ptr();
    std::vector<double> oacc(static_cast<size_t>(D));
    for (int n = 0; n < N; n++)
        for (int p = 0; p < P; p++) {
            const float* srow = pss + (static_cast<size_t>(n) * P + p) * L;
            float* orow = po + (static_cast<size_t>(n) * P + p) * D;
            std::fill(oacc.begin(), oacc.end(), 0.0);
            for (int l = 0; l < L; l++) {
                double sv = srow[l];
                if (sv == 0.0) continue;
                const float* vrow = pv + (static_cast<size_t>(n) * L + l) * D;
                for (int d = 0; d < D; d++) oacc[d] += sv * vrow[d];
            }
            for (int d = 0; d < D; d++) orow[d] = static_cast<float>(oacc[d]);
        }
    if (t) attach(out, {s, v}, [N, P, L, D](const Tensor& o) {
        auto& ps = o.node->parents;
        const float* g = o.grad->data();
        const float* s2 = ps[0].ptr();
        const float* v2 = ps[1].ptr();
        if (wants_grad(ps[0])) {
            float* gs = ps[0].grad->data();
            for (int n = 0; n < N; n++)
                for (int p = 0; p < P; p++) {
                    const float* grow = g + (static_cast<size_t>(n) * P + p) * D;
                    float* gsrow = gs + (static_cast<size_t>(n) * P + p) * L;
                    for (int l = 0; l < L; l++) {
                        const float* vrow = v2 + (static_cast<size_t>(n) * L + l) * D;
                        double acc = 0.0;
                        for (int d = 0; d < D; d++)
                            acc += static_cast<double>(grow[d]) * static_cast<double>(vrow[d]);
                        gsrow[l] += static_cast<float>(acc);
                    }
                }
        }
        if (wants_grad(ps[1])) {
            float* gv = ps[1].grad->data();
            std::vector<double> vacc(static_cast<size_t>(L) * D);
            for (int n = 0; n < N; n++) {
                std::fill(vacc.begin(), vacc.end(), 0.0);
                for (int p = 0; p < P; p++) {
                    const float* grow = g + (static_cast<size_t>(n) * P + p) * D;
                    const float* srow = s2 + (static_cast<size_t>(n) * P + p) * L;
                    for (int l = 0; l < L; l++) {
                        double sv = srow[l];
                        if (sv == 0.0) continue;
                        double* vrow = vacc.data() + static_cast<size_t>(l) * D;
                        for (int d = 0; d < D; d++) vrow[d] += sv * grow[d];
                    }
                }
                float* gvn = gv + static_cast<size_t>(n) * L * D;
                for (size_t i = 0; i < vacc.size(); i++) gvn[i] += static_cast<float>(vacc[i]);
            }
        }
    });
    return out;
}

// Softmax over the last axis.
inline Tensor softmax_last(const Tensor& x) {
    if (x.rank() < 1) throw std::invalid_argument("softmax_last: rank >= 1 required");
    int L = x.shape.back();
    if (L < 1) throw std::invalid_argument("softmax_last: empty last axis");
    size_t M = x.numel() / static_cast<size_t>(L);
    bool t = track({&x});
    Tensor out = make_result(x.shape, t);
    const float* px = x.ptr();
    float* po = out.ptr();
    for (size_t m = 0; m < M; m++) {
        const float* xr = px + m * static_cast<size_t>(L);
        float* orow = po + m * static_cast<size_t>(L);
        float mx = xr[0];
        for (int l = 1; l < L; l++) mx = std::max(mx, xr[l]);
        double denom = 0.0;
        for (int l = 0; l < L; l++) {
            double e = std::exp(static_cast<double>(xr[l]) - mx);
            orow[l] = static_cast<float>(e);
            denom += e;
        }
        for (int l = 0; l < L; l++)
            orow[l] = static_cast<float>(orow[l] / denom);
    }
    if (t) attach(out, {x}, [L, M](const Tensor& o) {
        auto& p = o.node->parents[0];
        if (!wants_grad(p)) return;
        const float* g = o.grad->data();
        const float* y = o.ptr();
        float* pg = p.grad->data();
        for (size_t m = 0; m < M; m++) {
            const float* grow = g + m * static_cast<size_t>(L);
            const float* yrow = y + m * static_cast<size_t>(L);
            float* prow = pg + m * static_cast<size_t>(L);
            double dot = 0.0;
            for (int l = 0; l < L; l++)
                dot += static_cast<double>(grow[l]) * static_cast<double>(yrow[l]);
            for (int l = 0; l < L; l++)
                prow[l] += static_cast<float>(yrow[l] * (static_cast<double>(grow[l]) - dot));
        }
    });
    return out;
}

// ---------------------------------------------------------------- conv / spatial

// x: [N,Ci,H,W]; w: [Co,Ci,K,K] with K in {1,3}; b: [Co] optional;
// stride in {1,2}; padding K/2 (same-size output for stride 1).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1) {
    if (x.rank() != 4 || w.rank() != 4)
        throw std::invalid_argument("conv2d: x and w must be rank 4");
    int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(0), K = w.dim(2);
    if (w.dim(1) != Ci || w.dim(3) != K)
        throw std::invalid_argument("conv2d: weight " + shape_str(w.shape) + " does not match x " +
                                    shape_str(x.shape));
    if (K != 1 && K != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    int pad = K / 2;
    int Ho = (H + 2 * pad - K) / stride + 1;
    int Wo = (W + 2 * pad - K) / stride + 1;
    bool has_b = b.defined();
    if (has_b && b.shape != Shape{Co})
        throw std::invalid_argument("conv2d: bias must be [" + std::to_string(Co) + "]");

    bool t = has_b ? track({&x, &w, &b}) : track({&x, &w});
    Tensor out = make_result({N, Co, Ho, Wo}, t);
    const float* px = x.ptr();
    const float* pw = w.ptr();
    float* po = out.ptr();
    std::vector<double> plane(static_cast<size_t>(Ho) * Wo);
    for (int n = 0; n < N; n++)
        for (int co = 0; co < Co; co++) {
            double bv = has_b ? static_cast<double>(b.at(static_cast<size_t>(co))) : 0.0;
            std::fill(plane.begin(), plane.end(), bv);
            for (int ci = 0; ci < Ci; ci++)
                for (int ky = 0; ky < K; ky++)
                    for (int kx = 0; kx < K; kx++) {
                        double coef =
                            pw[((static_cast<size_t>(co) * Ci + ci) * K + ky) * K + kx];
                        if (coef == 0.0) continue;
                        int dy = ky - pad, dx = kx - pad;
                        int yo_lo = std::max(0, (-dy + stride - 1) / stride);
                        int yo_hi = std::min(Ho - 1, (H - 1 - dy) / stride);
                        int xo_lo = std::max(0, (-dx + stride - 1) / stride);
                        int xo_hi = std::min(Wo - 1, (W - 1 - dx) / stride);
                        const float* xpl = px + (static_cast<size_t>(n) * Ci + ci) * H * W;
                        for (int yo = yo_lo; yo <= yo_hi; yo++) {
                            const float* xrow = xpl + (yo * stride + dy) * W + dx;
                            double* orow = plane.data() + static_cast<size_t>(yo) * Wo;
                            for (int xo = xo_lo; xo <= xo_hi; xo++)
                                orow[xo] += coef * xrow[xo * stride];
                        }
                    }
            float* opl = po + (static_cast<size_t>(n) * Co + co) * Ho * Wo;
            for (size_t i = 0; i < plane.size(); i++) opl[i] = static_cast<float>(plane[i]);
        }
    if (t) {
        std::vector<Tensor> parents = {x, w};
        if (has_b) parents.push_back(b);
        attach(out, std::move(parents),
               [N, Ci, H, W, Co, K, pad, stride, Ho, Wo](const Tensor& o) {
            auto& ps = o.node->parents;
            const float* g = o.grad->data();
            const float* px2 = ps[0].ptr();
            const float* pw2 = ps[1].ptr();
            bool gx_on = wants_grad(ps[0]);
            bool gw_on = wants_grad(ps[1]);
            float* gx = gx_on ? ps[0].grad->data() : nullptr;
            float* gw = gw_on ? ps[1].grad->data() : nullptr;
            std::vector<double> xacc(gx_on ? static_cast<size_t>(Ci) * H * W : 0);
            std::vector<double> wacc(gw_on ? static_cast<size_t>(Co) * Ci * K * K : 0);
            for (int n = 0; n < N; n++) {
                if (gx_on) std::fill(xacc.begin(), xacc.end(), 0.0);
                for (int co = 0; co < Co; co++) {
                    const float* gpl = g + (static_cast<size_t>(n) * Co + co) * Ho * Wo;
                    for (int ci = 0; ci < Ci; ci++)
                        for (int ky = 0; ky < K; ky++)
                            for (int kx = 0; kx < K; kx++) {
                                size_t widx =
                                    ((static_cast<size_t>(co) * Ci + ci) * K + ky) * K + kx;
                                int dy = ky - pad, dx = kx - pad;
                                int yo_lo = std::max(0, (-dy + stride - 1) / stride);
                                int yo_hi = std::min(Ho - 1, (H - 1 - dy) / stride);
                                int xo_lo = std::max(0, (-dx + stride - 1) / stride);
                                int xo_hi = std::min(Wo - 1, (W - 1 - dx) / stride);
                                if (gx_on) {
                                    double coef = pw2[widx];
                                    if (coef != 0.0) {
                                        double* xpl =
                                            xacc.data() + static_cast<size_t>(ci) * H * W;
                                        for (int yo = yo_lo; yo <= yo_hi; yo++) {
                                            double* xrow = xpl + (yo * stride + dy) * W + dx;
                                            const float* grow = gpl + yo * Wo;
                                            for (int xo = xo_lo; xo <= xo_hi; xo++)
                                                xrow[xo * stride] += coef * grow[xo];
                                        }
                                    }
                                }
                                if (gw_on) {
                                    const float* xpl =
                                        px2 + (static_cast<size_t>(n) * Ci + ci) * H * W;
                                    double acc = 0.0;
                                    for (int yo = yo_lo; yo <= yo_hi; yo++) {
                                        const float* xrow = xpl + (yo * stride + dy) * W + dx;
                                        const float* grow = gpl + yo * Wo;
                                        for (int xo = xo_lo; xo <= xo_hi; xo++)
                                            acc += static_cast<double>(xrow[xo * stride]) *
                                                   static_cast<double>(grow[xo]);
                                    }
                                    wacc[widx] += acc;
                                }
                            }
                }
                if (gx_on) {
                    float* gxn = gx + static_cast<size_t>(n) * Ci * H * W;
                    for (size_t i = 0; i < xacc.size(); i++)
                        gxn[i] += static_cast<float>(xacc[i]);
                }
            }
            if (gw_on)
                for (size_t i = 0; i < wacc.size(); i++) gw[i] += static_cast<float>(wacc[i]);
            if (ps.size() > 2 && wants_grad(ps[2])) {
                float* gb = ps[2].grad->data();
                std::vector<double> bacc(static_cast<size_t>(Co));
                for (int n = 0; n < N; n++)
                    for (int co = 0; co < Co; co++) {
                        const float* gpl = g + (static_cast<size_t>(n) * Co + co) * Ho * Wo;
                        double acc = 0.0;
                        for (int i = 0; i < Ho * Wo; i++) acc += gpl[i];
                        bacc[co] += acc;
                    }
                for (int co = 0; co < Co; co++) gb[co] += static_cast<float>(bacc[co]);
            }
        });
    }
    return out;
}

// Nearest-neighbour 2x upsample.
inline Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("upsample2x: rank 4 required");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    bool t = track({&x});
    Tensor out = make_result({N, C, 2 * H, 2 * W}, t);
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int nc = 0; nc < N * C; nc++) {
        const float* ipl = px + static_cast<size_t>(nc) * H * W;
        float* opl = po + static_cast<size_t>(nc) * 4 * H * W;
        for (int y = 0; y < H; y++)
            for (int x2 = 0; x2 < W; x2++) {
                float v = ipl[y * W + x2];
                float* o0 = opl + (2 * y) * 2 * W + 2 * x2;
                o0[0] = v;
                o0[1] = v;
                o0[2 * W] = v;
                o0[2 * W + 1] = v;
            }
    }
    if (t) attach(out, {x}, [N, C, H, W](const Tensor& o) {
        auto& p = o.node->parents[0];
        if (!wants_grad(p)) return;
        const float* g = o.grad->data();
        float* pg = p.grad->data();
        for (int nc = 0; nc < N * C; nc++) {
            const float* gpl = g + static_cast<size_t>(nc) * 4 * H * W;
            float* ppl = pg + static_cast<size_t>(nc) * H * W;
            for (int y = 0; y < H; y++)
                for (int x2 = 0; x2 < W; x2++) {
                    const float* g0 = gpl + (2 * y) * 2 * W + 2 * x2;
                    ppl[y * W + x2] += g0[0] + g0[1] + g0[2 * W] + g0[2 * W + 1];
                }
        }
    });
    return out;
}

// Concatenate along the channel axis.
inline Tensor concat_ch(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_ch: incompatible shapes " + shape_str(a.shape) +
                                    " and " + shape_str(b.shape));
    int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    bool t = track({&a, &b});
    Tensor out = make_result({N, Ca + Cb, H, W}, t);
    size_t plane = static_cast<size_t>(H) * W;
    const float *pa = a.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++) {
        std::copy(pa + static_cast<size_t>(n) * Ca * plane,
                  pa + static_cast<size_t>(n + 1) * Ca * plane,
                  po + static_cast<size_t>(n) * (Ca + Cb) * plane);
        std::copy(pb + static_cast<size_t>(n) * Cb * plane,
                  pb + static_cast<size_t>(n + 1) * Cb * plane,
                  po + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    if (t) attach(out, {a, b}, [N, Ca, Cb, plane](const Tensor& o) {
        auto& ps = o.node->parents;
        const float* g = o.grad->data();
        if (wants_grad(ps[0])) {
            float* ga = ps[0].grad->data();
            for (int n = 0; n < N; n++) {
                const float* src = g + static_cast<size_t>(n) * (Ca + Cb) * plane;
                float* dst = ga + static_cast<size_t>(n) * Ca * plane;
                for (size_t i = 0; i < static_cast<size_t>(Ca) * plane; i++) dst[i] += src[i];
            }
        }
        if (wants_grad(ps[1])) {
            float* gb = ps[1].grad->data();
            for (int n = 0; n < N; n++) {
                const float* src = g + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane;
                float* dst = gb + static_cast<size_t>(n) * Cb * plane;
                for (size_t i = 0; i < static_cast<size_t>(Cb) * plane; i++) dst[i] += src[i];
            }
        }
    });
    return out;
}

// [N,C,H,W] -> [N,H*W,C] token layout (and back).
inline Tensor nchw_to_tokens(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("nchw_to_tokens: rank 4 required");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int P = H * W;
    bool t = track({&x});
    Tensor out = make_result({N, P, C}, t);
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++) {
            const float* ipl = px + (static_cast<size_t>(n) * C + c) * P;
            float* obase = po + static_cast<size_t>(n) * P * C + c;
            for (int p = 0; p < P; p++) obase[static_cast<size_t>(p) * C] = ipl[p];
        }
    if (t) attach(out, {x}, [N, C, P](const Tensor& o) {
        auto& p0 = o.node->parents[0];
        if (!wants_grad(p0)) return;
        const float* g = o.grad->data();
        float* pg = p0.grad->data();
        for (int n = 0; n < N; n++)
            for (int c = 0; c < C; c++) {
                float* ppl = pg + (static_cast<size_t>(n) * C + c) * P;
                const float* gbase = g + static_cast<size_t>(n) * P * C + c;
                for (int p = 0; p < P; p++) ppl[p] += gbase[static_cast<size_t>(p) * C];
            }
    });
    return out;
}

inline Tensor tokens_to_nchw(const Tensor& x, int H, int W) {
    if (x.rank() != 3) throw std::invalid_argument("tokens_to_nchw: rank 3 required");
    int N = x.dim(0), P = x.dim(1), C = x.dim(2);
    if (P != H * W) throw std::invalid_argument("tokens_to_nchw: token count != H*W");
    bool t = track({&x});
    Tensor out = make_result({N, C, H, W}, t);
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++) {
            float* opl = po + (static_cast<size_t>(n) * C + c) * P;
            const float* ibase = px + static_cast<size_t>(n) * P * C + c;
            for (int p = 0; p < P; p++) opl[p] = ibase[static_cast<size_t>(p) * C];
        }
    if (t) attach(out, {x}, [N, C, P](const Tensor& o) {
        auto& p0 = o.node->parents[0];
        if (!wants_grad(p0)) return;
        const float* g = o.grad->data();
        float* pg = p0.grad->data();
        for (int n = 0; n < N; n++)
            for (int c = 0; c < C; c++) {
                const float* gpl = g + (static_cast<size_t>(n) * C + c) * P;
                float* pbase = pg + static_cast<size_t>(n) * P * C + c;
                for (int p = 0; p < P; p++) pbase[static_cast<size_t>(p) * C] += gpl[p];
            }
    });
    return out;
}

// x: [N,L,D] plus a per-row table p: [L,D] shared across the batch.
inline Tensor add_rows(const Tensor& x, const Tensor& p) {
    if (x.rank() != 3 || p.rank() != 2 || x.dim(1) != p.dim(0) || x.dim(2) != p.dim(1))
        throw std::invalid_argument("add_rows: need [N,L,D] + [L,D], got " + shape_str(x.shape) +
                                    " and " + shape_str(p.shape));
    int N = x.dim(0);
    size_t LD = p.numel();
    bool t = track({&x, &p});
    Tensor out = make_result(x.shape, t);
    const float *px = x.ptr(), *pp = p.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++) {
        const float* xr = px + static_cast<size_t>(n) * LD;
        float* orow = po + static_cast<size_t>(n) * LD;
        for (size_t i = 0; i < LD; i++) orow[i] = xr[i] + pp[i];
    }
    if (t) attach(out, {x, p}, [N, LD](const Tensor& o) {
        auto& ps = o.node->parents;
        const float* g = o.grad->data();
        if (wants_grad(ps[0])) {
            float* gx = ps[0].grad->data();
            for (size_t i = 0; i < static_cast<size_t>(N) * LD; i++) gx[i] += g[i];
        }
        if (wants_grad(ps[1])) {
            float* gp = ps[1].grad->data();
            for (int n = 0; n < N; n++) {
                const float* grow = g + static_cast<size_t>(n) * LD;
                for (size_t i = 0; i < LD; i++) gp[i] += grow[i];
            }
        }
    });
    return out;
}

// Per-row affine tokens: out[n,k,:] = coeff[n,k] * w[k,:] + b[k,:].
// coeff is a constant input (conditioning values), w/b are parameters.
inline Tensor affine_tokens(const Tensor& coeff, const Tensor& w, const Tensor& b) {
    if (coeff.rank() != 2 || w.rank() != 2 || b.rank() != 2 || w.shape != b.shape ||
        coeff.dim(1) != w.dim(0))
        throw std::invalid_argument("affine_tokens: need coeff [N,K], w/b [K,D]");
    int N = coeff.dim(0), K = w.dim(0), D = w.dim(1);
    bool t = track({&w, &b});
    Tensor out = make_result({N, K, D}, t);
    const float *pc = coeff.ptr(), *pw = w.ptr(), *pb = b.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++)
        for (int k = 0; k < K; k++) {
            float cv = pc[static_cast<size_t>(n) * K + k];
            const float* wr = pw + static_cast<size_t>(k) * D;
            const float* br = pb + static_cast<size_t>(k) * D;
            float* orow = po + (static_cast<size_t>(n) * K + k) * D;
            for (int d = 0; d < D; d++) orow[d] = cv * wr[d] + br[d];
        }
    if (t) attach(out, {w, b, coeff}, [N, K, D](const Tensor& o) {
        auto& ps = o.node->parents;
        const float* g = o.grad->data();
        const float* pc2 = ps[2].ptr();
        if (wants_grad(ps[0])) {
            float* gw = ps[0].grad->data();
            for (int n = 0; n < N; n++)
                for (int k = 0; k < K; k++) {
                    float cv = pc2[static_cast<size_t>(n) * K + k];
                    if (cv == 0.0f) continue;
                    const float* grow = g + (static_cast<size_t>(n) * K + k) * D;
                    float* gwr = gw + static_cast<size_t>(k) * D;
                    for (int d = 0; d < D; d++) gwr[d] += cv * grow[d];
                }
        }
        if (wants_grad(ps[1])) {
            float* gb = ps[1].grad->data();
            for (int n = 0; n < N; n++)
                for (int k = 0; k < K; k++) {
                    const float* grow = g + (static_cast<size_t>(n) * K + k) * D;
                    float* gbr = gb + static_cast<size_t>(k) * D;
                    for (int d = 0; d < D; d++) gbr[d] += grow[d];
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------- layer norm

// Normalizes across channels at every (n,h,w) position; no learned affine of
// its own. Positions with variance < 1e-12 normalize to 0 by convention (and
// contribute zero input gradient: the output is constant there).
// With s/b given ([N,C], broadcast over space) the result is modulated as
// (1 + s) * xhat + b.
inline Tensor layer_norm_mod(const Tensor& x, const Tensor& s = Tensor(),
                             const Tensor& b = Tensor()) {
    if (x.rank() != 4) throw std::invalid_argument("layer_norm: rank 4 required");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C < 1) throw std::invalid_argument("layer_norm: needs at least one channel");
    bool has_mod = s.defined();
    if (has_mod) {
        require_shape(s, {N, C}, "layer_norm scale");
        require_shape(b, {N, C}, "layer_norm shift");
    }
    constexpr float kVarFloor = 1e-12f;
    bool t = has_mod ? track({&x, &s, &b}) : track({&x});
    Tensor out = make_result(x.shape, t);
    // Per-position statistics stashed for the backward pass.
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(N) * H * W * 2);
    int P = H * W;
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++)
        for (int p = 0; p < P; p++) {
            const float* xat = px + static_cast<size_t>(n) * C * P + p;
            double m = 0.0;
            for (int c = 0; c < C; c++) m += xat[static_cast<size_t>(c) * P];
            m /= C;
            double var = 0.0;
            for (int c = 0; c < C; c++) {
                double d = xat[static_cast<size_t>(c) * P] - m;
                var += d * d;
            }
            var /= C;
            float rstd = var < kVarFloor ? 0.0f : static_cast<float>(1.0 / std::sqrt(var));
            (*stats)[(static_cast<size_t>(n) * P + p) * 2] = static_cast<float>(m);
            (*stats)[(static_cast<size_t>(n) * P + p) * 2 + 1] = rstd;
            float* oat = po + static_cast<size_t>(n) * C * P + p;
            for (int c = 0; c < C; c++) {
                float xhat =
                    (xat[static_cast<size_t>(c) * P] - static_cast<float>(m)) * rstd;
                float v = xhat;
                if (has_mod) {
                    float sv = s.at(static_cast<size_t>(n) * C + c);
                    float bv = b.at(static_cast<size_t>(n) * C + c);
                    v = (1.0f + sv) * xhat + bv;
                }
                oat[static_cast<size_t>(c) * P] = v;
            }
        }
    if (t) {
        std::vector<Tensor> parents = {x};
        if (has_mod) {
            parents.push_back(s);
            parents.push_back(b);
        }
        attach(out, std::move(parents), [N, C, P, stats, has_mod](const Tensor& o) {
            auto& ps = o.node->parents;
            const float* g = o.grad->data();
            const float* px2 = ps[0].ptr();
            const float* sv = has_mod ? ps[1].ptr() : nullptr;
            bool gx_on = wants_grad(ps[0]);
            bool gs_on = has_mod && wants_grad(ps[1]);
            bool gb_on = has_mod && wants_grad(ps[2]);
            float* gx = gx_on ? ps[0].grad->data() : nullptr;
            float* gs = gs_on ? ps[1].grad->data() : nullptr;
            float* gb = gb_on ? ps[2].grad->data() : nullptr;
            std::vector<float> xhat(static_cast<size_t>(C));
            std::vector<double> gmod(static_cast<size_t>(C));
            std::vector<double> sacc(gs_on ? static_cast<size_t>(N) * C : 0);
            std::vector<double> bacc(gb_on ? static_cast<size_t>(N) * C : 0);
            for (int n = 0; n < N; n++)
                for (int p = 0; p < P; p++) {
                    float m = (*stats)[(static_cast<size_t>(n) * P + p) * 2];
                    float rstd = (*stats)[(static_cast<size_t>(n) * P + p) * 2 + 1];
                    const float* xat = px2 + static_cast<size_t>(n) * C * P + p;
                    const float* gat = g + static_cast<size_t>(n) * C * P + p;
                    for (int c = 0; c < C; c++) {
                        xhat[static_cast<size_t>(c)] =
                            (xat[static_cast<size_t>(c) * P] - m) * rstd;
                        double gv = gat[static_cast<size_t>(c) * P];
                        double scale1 =
                            has_mod ? 1.0 + sv[static_cast<size_t>(n) * C + c] : 1.0;
                        gmod[static_cast<size_t>(c)] = gv * scale1;
                        if (gs_on)
                            sacc[static_cast<size_t>(n) * C + c] +=
                                gv * xhat[static_cast<size_t>(c)];
                        if (gb_on) bacc[static_cast<size_t>(n) * C + c] += gv;
                    }
                    if (gx_on && rstd != 0.0f) {
                        double mean_g = 0.0, mean_gx = 0.0;
                        for (int c = 0; c < C; c++) {
                            mean_g += gmod[static_cast<size_t>(c)];
                            mean_gx +=
                                gmod[static_cast<size_t>(c)] * xhat[static_cast<size_t>(c)];
                        }
                        mean_g /= C;
                        mean_gx /= C;
                        float* gxat = gx + static_cast<size_t>(n) * C * P + p;
                        for (int c = 0; c < C; c++)
                            gxat[static_cast<size_t>(c) * P] += static_cast<float>(
                                rstd * (gmod[static_cast<size_t>(c)] - mean_g -
                                        xhat[static_cast<size_t>(c)] * mean_gx));
                    }
                }
            if (gs_on)
                for (size_t i = 0; i < sacc.size(); i++) gs[i] += static_cast<float>(sacc[i]);
            if (gb_on)
                for (size_t i = 0; i < bacc.size(); i++) gb[i] += static_cast<float>(bacc[i]);
        });
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x) { return layer_norm_mod(x); }

// Softmax across the channel axis, independently at every pixel: for each
// (n, y, x), out[n,:,y,x] = softmax(x[n,:,y,x]). Stable (max-shifted) and
// accumulated in double.
inline Tensor softmax_ch(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("softmax_ch: need [N,C,H,W]");
    int N = x.dim(0), C = x.dim(1);
    size_t P = static_cast<size_t>(x.dim(2)) * x.dim(3);
    bool t = track({&x});
    Tensor out = make_result(x.shape, t);
    const float* px = x.ptr();
    float* po = out.ptr();
    for (int n = 0; n < N; n++) {
        const float* xat = px + static_cast<size_t>(n) * C * P;
        float* oat = po + static_cast<size_t>(n) * C * P;
        for (size_t p = 0; p < P; p++) {
            double mx = xat[p];
            for (int c = 1; c < C; c++)
                mx = std::max(mx, static_cast<double>(xat[static_cast<size_t>(c) * P + p]));
            double sum = 0.0;
            for (int c = 0; c < C; c++)
                sum += std::exp(static_cast<double>(xat[static_cast<size_t>(c) * P + p]) - mx);
            for (int c = 0; c < C; c++)
                oat[static_cast<size_t>(c) * P + p] = static_cast<float>(
                    std::exp(static_cast<double>(xat[static_cast<size_t>(c) * P + p]) - mx) /
                    sum);
        }
    }
    if (t) attach(out, {x}, [N, C, P](const Tensor& o) {
        auto& ps = o.node->parents;
        if (!wants_grad(ps[0])) return;
        const float* g = o.grad->data();
        const float* y = o.ptr();
        float* gx = ps[0].grad->data();
        for (int n = 0; n < N; n++) {
            size_t base = static_cast<size_t>(n) * C * P;
            for (size_t p = 0; p < P; p++) {
                double dot = 0.0;
                for (int c = 0; c < C; c++) {
                    size_t i = base + static_cast<size_t>(c) * P + p;
                    dot += static_cast<double>(g[i]) * y[i];
                }
                for (int c = 0; c < C; c++) {
                    size_t i = base + static_cast<size_t>(c) * P + p;
                    gx[i] += static_cast<float>(y[i] * (static_cast<double>(g[i]) - dot));
                }
            }
        }
    });
    return out;
}

// Influence-weighted mixture of per-source predictions:
//   out[n,ch,y,x] = sum_m w[n,m,y,x] * eps[m][n,ch,y,x]
// The weights are the differentiable input; the predictions enter as
// constants (they come from frozen networks) and must be untracked.
inline Tensor fuse_influence(const Tensor& w, const std::vector<Tensor>& eps) {
    if (w.rank() != 4) throw std::invalid_argument("fuse_influence: weights must be [N,M,H,W]");
    int N = w.dim(0), M = w.dim(1), H = w.dim(2), W = w.dim(3);
    if (eps.size() != static_cast<size_t>(M))
        throw std::invalid_argument("fuse_influence: " + std::to_string(M) + " weight maps vs " +
                                    std::to_string(eps.size()) + " predictions");
    for (const Tensor& e : eps) {
        if (e.rank() != 4 || e.dim(0) != N || e.dim(2) != H || e.dim(3) != W ||
            e.dim(1) != eps[0].dim(1))
            throw std::invalid_argument("fuse_influence: predictions must share [N,C," +
                                        std::to_string(H) + "," + std::to_string(W) + "]");
        if (e.node)
            throw std::invalid_argument(
                "fuse_influence: predictions must be constants (detach them)");
    }
    int C = eps[0].dim(1);
    size_t P = static_cast<size_t>(H) * W;
    bool t = track({&w});
    Tensor out = make_result({N, C, H, W}, t);
    float* po = out.ptr();
    const float* pw = w.ptr();
    for (int n = 0; n < N; n++)
        for (int ch = 0; ch < C; ch++)
            for (size_t p = 0; p < P; p++) {
                double acc = 0.0;
                for (int m = 0; m < M; m++)
                    acc += static_cast<double>(
                               pw[(static_cast<size_t>(n) * M + m) * P + p]) *
                           eps[static_cast<size_t>(m)].at(
                               (static_cast<size_t>(n) * C + ch) * P + p);
                po[(static_cast<size_t>(n) * C + ch) * P + p] = static_cast<float>(acc);
            }
    if (t) {
        std::vector<Tensor> preds = eps;  // shared storage, kept alive by the closure
        attach(out, {w}, [N, M, C, P, preds](const Tensor& o) {
            auto& ps = o.node->parents;
            if (!wants_grad(ps[0])) return;
            const float* g = o.grad->data();
            float* gw = ps[0].grad->data();
            for (int n = 0; n < N; n++)
                for (int m = 0; m < M; m++)
                    for (size_t p = 0; p < P; p++) {
                        double acc = 0.0;
                        for (int ch = 0; ch < C; ch++)
                            acc += static_cast<double>(
                                       g[(static_cast<size_t>(n) * C + ch) * P + p]) *
                                   preds[static_cast<size_t>(m)].at(
                                       (static_cast<size_t>(n) * C + ch) * P + p);
                        gw[(static_cast<size_t>(n) * M + m) * P + p] +=
                            static_cast<float>(acc);
                    }
        });
    }
    return out;
}

}  // namespace codiff::nn
