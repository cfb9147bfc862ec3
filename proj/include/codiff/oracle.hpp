// SPDX-License-Identifier: Apache-2.0
//
// Training-free verification harness: on Gaussian data the optimal eps
// prediction has a closed form, so the full sampling machinery can be
// checked quantitatively against known statistics — no learned weights,
// no tuning, no excuses.

#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

#include "diffusion.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace codiff {

// Per-pixel independent Gaussian data: x0[c,y,x] ~ N(mean[c,y,x], var[c,y,x]).
struct GaussianWorld {
    Tensor mean;  // [C,H,W]
    Tensor var;   // [C,H,W], strictly positive

    GaussianWorld(Tensor mean_, Tensor var_) : mean(std::move(mean_)), var(std::move(var_)) {
        if (mean.rank() != 3 || var.shape != mean.shape)
            throw std::invalid_argument("gaussian world: mean/var must be matching [C,H,W]");
        for (size_t i = 0; i < var.numel(); i++)
            if (!(var.at(i) > 0.0f) || !std::isfinite(var.at(i)))
                throw std::invalid_argument("gaussian world: variance must be positive");
    }

    // 1x1x1 "image" — the workhorse for distribution tests
    static GaussianWorld scalar(float mu, float sigma0) {
        return GaussianWorld(Tensor::full({1, 1, 1}, mu),
                             Tensor::full({1, 1, 1}, sigma0 * sigma0));
    }

    Shape sample_shape(int n) const {
        return {n, mean.dim(0), mean.dim(1), mean.dim(2)};
    }

    // x0 draws in the world's own law
    Tensor draw_x0(int n, RngStream& rng) const {
        Tensor out = Tensor::zeros(sample_shape(n));
        size_t P = mean.numel();
        for (int i = 0; i < n; i++)
            for (size_t j = 0; j < P; j++)
                out.at(static_cast<size_t>(i) * P + j) = static_cast<float>(
                    mean.at(j) + std::sqrt(static_cast<double>(var.at(j))) * rng.normal());
        return out;
    }
};

// Posterior-mean eps prediction for Gaussian data:
//   E[eps | x_t] = sqrt(1-abar_t) (x_t - sqrt(abar_t) mu) / (abar_t var + 1-abar_t)
// This is the ideal collaborator every trained model chases.
inline Tensor analytic_eps(const GaussianWorld& w, const Tensor& xt, int t, const Schedule& s) {
    size_t P = w.mean.numel();
    if (xt.rank() != 4 || xt.numel() % P != 0 || xt.dim(1) != w.mean.dim(0) ||
        xt.dim(2) != w.mean.dim(1) || xt.dim(3) != w.mean.dim(2))
        throw std::invalid_argument("analytic_eps: x_t must be [N," +
                                    shape_str(w.mean.shape) + "]");
    double abar = s.alpha_bar(t);
    double root_abar = std::sqrt(abar);
    double root_rem = std::sqrt(1.0 - abar);
    Tensor out = Tensor::zeros(xt.shape);
    int N = xt.dim(0);
    for (int n = 0; n < N; n++)
        for (size_t j = 0; j < P; j++) {
            size_t i = static_cast<size_t>(n) * P + j;
            double denom = abar * static_cast<double>(w.var.at(j)) + (1.0 - abar);
            out.at(i) = static_cast<float>(
                root_rem * (xt.at(i) - root_abar * w.mean.at(j)) / denom);
        }
    return out;
}

// Summary statistics of a sampling run against the world's closed form.
struct SamplerReport {
    std::string sampler;
    int n = 0;
    int T = 0;
    int steps = 0;  // visits actually taken
    double want_mean = 0.0, want_var = 0.0;
    double mean = 0.0, var = 0.0;

    double mean_err() const { return std::abs(mean - want_mean); }
    double var_err() const { return std::abs(var - want_var); }
    bool passes(double mean_tol, double var_tol) const {
        return mean_err() < mean_tol && var_err() < var_tol;
    }

    std::string text() const {
        std::ostringstream os;
        os << "sampler=" << sampler << "\n"
           << "n=" << n << "\n"
           << "T=" << T << "\n"
           << "steps=" << steps << "\n"
           << "want_mean=" << want_mean << "\n"
           << "want_var=" << want_var << "\n"
           << "mean=" << mean << "\n"
           << "var=" << var << "\n"
           << "mean_err=" << mean_err() << "\n"
           << "var_err=" << var_err() << "\n";
        return os.str();
    }
};

// Runs the full reverse chain with the analytic predictor as the sole
// collaborator and scores the samples against (mu, sigma0^2). The wants are
// world averages, which is only meaningful for homogeneous (scalar) worlds —
// exactly the ones distribution tests use.
inline SamplerReport verify_sampler(const GaussianWorld& w, const Schedule& s,
                                    const std::string& sampler, int n_samples, RngStream& rng,
                                    int ddim_steps = 50) {
    if (n_samples < 1) throw std::invalid_argument("verify_sampler: n_samples must be >= 1");
    EpsPredictor pred = [&](const Tensor& xt, int t) { return analytic_eps(w, xt, t, s); };

    SamplerReport rep;
    rep.sampler = sampler;
    rep.n = n_samples;
    rep.T = s.T();
    Tensor x;
    if (sampler == "ddpm") {
        rep.steps = s.T();
        x = sample_chain_ddpm(pred, w.sample_shape(n_samples), s, rng);
    } else if (sampler == "ddim") {
        std::vector<int> grid = ddim_grid(s.T(), ddim_steps);
        rep.steps = static_cast<int>(grid.size()) - 1;
        x = sample_chain_ddim(pred, w.sample_shape(n_samples), s, ddim_steps, rng);
    } else {
        throw std::invalid_argument("verify_sampler: sampler must be ddpm or ddim");
    }

    double acc = 0.0, acc2 = 0.0;
    for (size_t i = 0; i < x.numel(); i++) {
        acc += x.at(i);
        acc2 += static_cast<double>(x.at(i)) * x.at(i);
    }
    rep.mean = acc / static_cast<double>(x.numel());
    rep.var = acc2 / static_cast<double>(x.numel()) - rep.mean * rep.mean;
    for (size_t j = 0; j < w.mean.numel(); j++) {
        rep.want_mean += w.mean.at(j);
        rep.want_var += w.var.at(j);
    }
    rep.want_mean /= static_cast<double>(w.mean.numel());
    rep.want_var /= static_cast<double>(w.mean.numel());
    return rep;
}

}  // namespace codiff
