// SPDX-License-Identifier: Apache-2.0
//
// Named parameter collection. The tensors stored here are the single source
// of truth: model forwards fetch from the set by name, the optimizer updates
// them in place, and freezing toggles requires_grad on these exact objects.

#pragma once

#include <map>
#include <string>

#include "ntar.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace codiff::nn {

struct ParamSet {
    std::map<std::string, Tensor> items;  // sorted: iteration and serialization order

    Tensor& add(const std::string& name, Tensor t) {
        if (items.count(name))
            throw std::invalid_argument("params: duplicate parameter '" + name + "'");
        t.enable_grad();
        return items.emplace(name, std::move(t)).first->second;
    }

    Tensor& get(const std::string& name) {
        auto it = items.find(name);
        if (it == items.end()) throw std::logic_error("params: no parameter '" + name + "'");
        return it->second;
    }

    const Tensor& get(const std::string& name) const {
        auto it = items.find(name);
        if (it == items.end()) throw std::logic_error("params: no parameter '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return items.count(name) != 0; }
    size_t size() const { return items.size(); }

    size_t count() const {
        size_t n = 0;
        for (const auto& [k, v] : items) n += v.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [k, v] : items) v.zero_grad();
    }

    void set_trainable(bool on) {
        for (auto& [k, v] : items) {
            if (on)
                v.enable_grad();
            else
                v.requires_grad = false;
        }
    }

    bool trainable() const {
        for (const auto& [k, v] : items)
            if (v.requires_grad) return true;
        return false;
    }

    // Values only (names + shapes + payloads), in sorted-name order; grad
    // state does not enter the fingerprint.
    uint64_t value_hash() const {
        std::vector<uint8_t> buf;
        for (const auto& [k, v] : items) {
            buf.insert(buf.end(), k.begin(), k.end());
            buf.push_back(0);
            for (int d : v.shape)
                for (int i = 0; i < 4; i++) buf.push_back(uint8_t(uint32_t(d) >> (8 * i)));
            for (size_t i = 0; i < v.numel(); i++) {
                uint32_t u;
                float f = v.at(i);
                std::memcpy(&u, &f, 4);
                for (int j = 0; j < 4; j++) buf.push_back(uint8_t(u >> (8 * j)));
            }
        }
        return io::fnv1a64(buf.data(), buf.size());
    }

    void save_to(io::NamedTensorArchive& a, const std::string& prefix = "") const {
        for (const auto& [k, v] : items) a.add_tensor(prefix + k, v);
    }

    // Shapes must match what the architecture constructed.
    void load_from(const io::NamedTensorArchive& a, const std::string& prefix = "") {
        for (auto& [k, v] : items) {
            Tensor stored = a.tensor(prefix + k);
            if (stored.shape != v.shape)
                throw std::runtime_error("params: checkpoint shape mismatch for '" + k +
                                         "': expected " + shape_str(v.shape) + ", got " +
                                         shape_str(stored.shape));
            std::copy(stored.ptr(), stored.ptr() + stored.numel(), v.ptr());
        }
    }
};

// ----- initializers --------------------------------------------------------

inline Tensor he_normal(RngStream& rng, const Shape& s, size_t fan_in) {
    if (fan_in == 0) throw std::invalid_argument("init: fan_in must be positive");
    float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    return rng.normal_tensor(s, std);
}

inline Tensor xavier_normal(RngStream& rng, const Shape& s, size_t fan_in, size_t fan_out) {
    float std = std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
    return rng.normal_tensor(s, std);
}

}  // namespace codiff::nn
