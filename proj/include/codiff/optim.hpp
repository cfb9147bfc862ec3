// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction, keyed by parameter name. One state object per
// ParamSet; step() updates every trainable parameter in place.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "params.hpp"

namespace codiff::nn {

struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments;

    explicit Adam(double lr_ = 1e-4) : lr(lr_) {}

    void step(ParamSet& params) {
        step_count++;
        float bc1 = static_cast<float>(1.0 / (1.0 - std::pow(beta1, double(step_count))));
        float bc2 = static_cast<float>(1.0 / (1.0 - std::pow(beta2, double(step_count))));
        float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
        float flr = static_cast<float>(lr), feps = static_cast<float>(eps);
        for (auto& [name, p] : params.items) {
            if (!p.requires_grad) continue;
            if (!p.grad) throw std::logic_error("opt: parameter '" + name + "' has no gradient");
            auto& [m, v] = moments[name];
            if (m.empty()) {
                m.assign(p.numel(), 0.0f);
                v.assign(p.numel(), 0.0f);
            }
            const float* g = p.grad->data();
            float* w = p.ptr();
            for (size_t i = 0; i < p.numel(); i++) {
                if (!std::isfinite(g[i]))
                    throw std::runtime_error("opt: non-finite gradient in parameter '" + name +
                                             "' at index " + std::to_string(i));
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                float mhat = m[i] * bc1;
                float vhat = v[i] * bc2;
                w[i] -= flr * mhat / (std::sqrt(vhat) + feps);
            }
        }
    }
};

}  // namespace codiff::nn
