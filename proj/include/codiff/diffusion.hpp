// SPDX-License-Identifier: Apache-2.0
//
// Diffusion core: the noise schedule, the forward corruption map, single
// reverse steps (stochastic and deterministic), and the denoiser training
// loss. Everything here is a pure function of its arguments; schedule
// scalars are kept in f64 so chained products stay consistent to 1e-12,
// and the per-element arithmetic runs in f64 before the single cast back
// to f32 storage.

#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace codiff {

enum class SigmaMode {
    beta,        // sigma_t^2 = beta_t
    beta_tilde,  // sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
};

inline const char* to_string(SigmaMode m) {
    return m == SigmaMode::beta ? "beta" : "beta_tilde";
}

// Variance schedule over timesteps 1..T. Index 0 is the clean-data anchor:
// alpha_bar(0) == 1 by definition, and beta/alpha/sigma are defined for
// t >= 1 only.
class Schedule {
public:
    Schedule(int T, std::vector<double> betas, SigmaMode mode) : T_(T), betas_(std::move(betas)) {
        if (T_ < 1 || betas_.size() != static_cast<size_t>(T_))
            throw std::invalid_argument("schedule: need one beta per step");
        alpha_bars_.resize(static_cast<size_t>(T_));
        sigmas_.resize(static_cast<size_t>(T_));
        double running = 1.0;
        for (int t = 1; t <= T_; t++) {
            double b = betas_[static_cast<size_t>(t - 1)];
            if (!(b > 0.0 && b < 1.0))
                throw std::invalid_argument("schedule: beta out of (0,1) at t=" +
                                            std::to_string(t));
            if (t > 1 && b < betas_[static_cast<size_t>(t - 2)])
                throw std::invalid_argument("schedule: beta must be non-decreasing");
            double abar_prev = running;
            running *= 1.0 - b;
            alpha_bars_[static_cast<size_t>(t - 1)] = running;
            sigmas_[static_cast<size_t>(t - 1)] =
                mode == SigmaMode::beta ? std::sqrt(b)
                                        : std::sqrt((1.0 - abar_prev) / (1.0 - running) * b);
        }
    }

    int T() const { return T_; }
    double beta(int t) const { return betas_[checked(t) - 1]; }
    double alpha(int t) const { return 1.0 - beta(t); }
    double sigma(int t) const { return sigmas_[checked(t) - 1]; }
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        return alpha_bars_[checked(t) - 1];
    }

private:
    size_t checked(int t) const {
        if (t < 1 || t > T_)
            throw std::invalid_argument("schedule: t=" + std::to_string(t) +
                                        " outside 1.." + std::to_string(T_));
        return static_cast<size_t>(t);
    }

    int T_;
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
    std::vector<double> sigmas_;
};

inline Schedule make_linear_schedule(int T, double beta_start, double beta_end,
                                     SigmaMode mode = SigmaMode::beta) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<size_t>(T));
    for (int t = 0; t < T; t++)
        betas[static_cast<size_t>(t)] =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
    return Schedule(T, std::move(betas), mode);
}

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Produces a constant (untracked)
// tensor: the corruption is applied to data, never differentiated through.
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const Schedule& s) {
    detail::require_same_shape(x0, eps, "q_sample");
    double a = std::sqrt(s.alpha_bar(t));
    double b = std::sqrt(1.0 - s.alpha_bar(t));
    Tensor out = Tensor::zeros(x0.shape);
    for (size_t i = 0; i < out.numel(); i++)
        out.at(i) = static_cast<float>(a * x0.at(i) + b * eps.at(i));
    return out;
}

// Batched corruption with one timestep per sample: x0, eps are [N,...] and
// t.size() == N. Row n gets the same transform the scalar overload applies
// at t[n], so the two agree bit-for-bit sample by sample.
inline Tensor q_sample(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                       const Schedule& s) {
    detail::require_same_shape(x0, eps, "q_sample");
    if (x0.rank() < 1 || x0.dim(0) != static_cast<int>(t.size()))
        throw std::invalid_argument("q_sample: need one timestep per sample, got " +
                                    std::to_string(t.size()) + " for " + shape_str(x0.shape));
    size_t stride = x0.numel() / static_cast<size_t>(x0.dim(0));
    Tensor out = Tensor::zeros(x0.shape);
    for (size_t n = 0; n < t.size(); n++) {
        double a = std::sqrt(s.alpha_bar(t[n]));
        double b = std::sqrt(1.0 - s.alpha_bar(t[n]));
        for (size_t i = n * stride; i < (n + 1) * stride; i++)
            out.at(i) = static_cast<float>(a * x0.at(i) + b * eps.at(i));
    }
    return out;
}

// One stochastic reverse step:
//   x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * z
// The t = 1 step must be noiseless; passing a non-zero z there is a contract
// violation, not a silent clamp.
inline Tensor ddpm_step(const Tensor& xt, const Tensor& eps_pred, int t, const Tensor& z,
                        const Schedule& s) {
    detail::require_same_shape(xt, eps_pred, "ddpm_step");
    detail::require_same_shape(xt, z, "ddpm_step");
    double rsqrt_a = 1.0 / std::sqrt(s.alpha(t));
    double coef = (1.0 - s.alpha(t)) / std::sqrt(1.0 - s.alpha_bar(t));
    double sig = s.sigma(t);
    if (t == 1)
        for (size_t i = 0; i < z.numel(); i++)
            if (z.at(i) != 0.0f)
                throw std::invalid_argument("ddpm_step: the final step (t=1) takes z = 0");
    Tensor out = Tensor::zeros(xt.shape);
    for (size_t i = 0; i < out.numel(); i++)
        out.at(i) = static_cast<float>(
            rsqrt_a * (xt.at(i) - coef * eps_pred.at(i)) + sig * z.at(i));
    return out;
}

// One deterministic (DDIM, eta = 0) reverse step t -> t_prev:
//   x0_hat = (x_t - sqrt(1-abar_t) eps_pred) / sqrt(abar_t)
//   out    = sqrt(abar_{t_prev}) x0_hat + sqrt(1-abar_{t_prev}) eps_pred
inline Tensor ddim_step(const Tensor& xt, const Tensor& eps_pred, int t, int t_prev,
                        const Schedule& s) {
    detail::require_same_shape(xt, eps_pred, "ddim_step");
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    double abar = s.alpha_bar(t);
    double abar_prev = s.alpha_bar(t_prev);
    double c_eps = std::sqrt(1.0 - abar);
    double rs = 1.0 / std::sqrt(abar);
    double a_prev = std::sqrt(abar_prev);
    double e_prev = std::sqrt(1.0 - abar_prev);
    Tensor out = Tensor::zeros(xt.shape);
    for (size_t i = 0; i < out.numel(); i++) {
        double x0_hat = (xt.at(i) - c_eps * eps_pred.at(i)) * rs;
        out.at(i) = static_cast<float>(a_prev * x0_hat + e_prev * eps_pred.at(i));
    }
    return out;
}

// Uniformly spaced DDIM visit order T -> 0, n steps when T divides evenly
// (fewer when rounding collapses neighbours). First entry is always T, last
// is always 0, strictly decreasing.
inline std::vector<int> ddim_grid(int T, int n) {
    if (T < 1 || n < 1) throw std::invalid_argument("ddim_grid: T and n must be >= 1");
    if (n > T) n = T;
    std::vector<int> ts;
    ts.push_back(T);
    for (int k = 1; k <= n; k++) {
        int t = static_cast<int>(std::lround(static_cast<double>(T) * (n - k) / n));
        if (t < ts.back()) ts.push_back(t);
    }
    if (ts.back() != 0) ts.push_back(0);
    return ts;
}

// Denoiser training objective: corrupt x0 to x_t with a known eps, then score
// the model's recovery of that eps. Works with any model exposing
// predict_eps(x_t, t, cond).
template <class Model, class Cond>
inline Tensor loss_dm(const Model& model, const Tensor& x0, const Cond& cond, int t,
                      const Tensor& eps, const Schedule& s) {
    Tensor xt = q_sample(x0, t, eps, s);
    return nn::mse(model.predict_eps(xt, t, cond), eps);
}

// Prediction source for the reverse chains below: anything that maps
// (x_t, t) to an eps estimate — a model closure, an analytic posterior,
// or a fused committee.
using EpsPredictor = std::function<Tensor(const Tensor&, int)>;

// Full stochastic reverse chain from pure noise. Draw order is fixed —
// one x_T tensor, then one z tensor per step down to t=2 — so two runs
// from equal streams are bit-comparable.
inline Tensor sample_chain_ddpm(const EpsPredictor& eps_at, const Shape& shape,
                                const Schedule& s, RngStream& rng) {
    NoGradGuard ng;
    Tensor x = rng.normal_tensor(shape);
    for (int t = s.T(); t >= 1; t--) {
        Tensor eps = eps_at(x, t);
        Tensor z = t > 1 ? rng.normal_tensor(shape) : Tensor::zeros(shape);
        x = ddpm_step(x, eps, t, z, s);
    }
    return x;
}

// Deterministic reverse chain over the uniform visit grid; the stream is
// consumed only for the initial x_T.
inline Tensor sample_chain_ddim(const EpsPredictor& eps_at, const Shape& shape,
                                const Schedule& s, int nsteps, RngStream& rng) {
    NoGradGuard ng;
    Tensor x = rng.normal_tensor(shape);
    std::vector<int> grid = ddim_grid(s.T(), nsteps);
    for (size_t i = 1; i < grid.size(); i++)
        x = ddim_step(x, eps_at(x, grid[i - 1]), grid[i - 1], grid[i], s);
    return x;
}

}  // namespace codiff
