// SPDX-License-Identifier: Apache-2.0
//
// key=value experiment configuration. '#' starts a comment, blank lines are
// ignored, unknown keys are rejected, every value is range-checked at load.
// The canonical form (sorted keys, LF endings) is what gets hashed; that
// hash is stamped into every artifact a run produces.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntar.hpp"

namespace codiff::eval {

enum class Sampler { ddpm, ddim50 };
enum class SigmaMode { beta, beta_tilde };
enum class NoTemporalVariant { freeze, time_avg };

inline std::string to_string(Sampler s) { return s == Sampler::ddpm ? "ddpm" : "ddim50"; }
inline std::string to_string(SigmaMode m) { return m == SigmaMode::beta ? "beta" : "beta_tilde"; }
inline std::string to_string(NoTemporalVariant v) {
    return v == NoTemporalVariant::freeze ? "freeze" : "time_avg";
}

struct ExperimentConfig {
    // data / diffusion
    int resolution = 32;        // 16 or 32
    int timesteps = 1000;       // 1 .. 10000
    double beta_start = 1e-4;   // (0, beta_end)
    double beta_end = 0.02;     // (beta_start, 1)
    SigmaMode sigma_mode = SigmaMode::beta;
    Sampler sampler = Sampler::ddim50;
    uint64_t seed = 7;
    int scenes = 2000;          // dataset size, 8 .. 100000

    // model widths
    int eps_width = 32;         // 4 .. 256
    int dd_width = 8;           // 2 .. 64

    // training, per phase
    int unimodal_steps = 20000;  // 1 .. 1000000
    double unimodal_lr = 1e-4;
    int unimodal_batch = 8;     // 1 .. 256
    int diffuser_steps = 10000;
    double diffuser_lr = 1e-4;
    int diffuser_batch = 8;

    // editing
    double edit_alpha = 0.7;      // [0, 1]
    int edit_embed_steps = 400;   // 0 .. 100000
    double edit_embed_lr = 1e-3;
    int edit_finetune_steps = 500;
    double edit_finetune_lr = 1e-5;

    // evaluation
    int eval_samples = 200;           // per main table row, 2 .. 10000
    int eval_samples_ablation = 64;   // per ablation row, 2 .. 10000
    NoTemporalVariant no_temporal_variant = NoTemporalVariant::freeze;

    // ------------------------------------------------------------------

    static ExperimentConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_text(ss.str());
    }

    static ExperimentConfig parse_text(const std::string& text) {
        ExperimentConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            lineno++;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                            " is not key=value: '" + s + "'");
            std::string key = strip(s.substr(0, eq));
            std::string val = strip(s.substr(eq + 1));
            cfg.set(key, val);
        }
        cfg.validate();
        return cfg;
    }

    void set(const std::string& key, const std::string& val) {
        if (key == "resolution") resolution = to_int(key, val);
        else if (key == "timesteps") timesteps = to_int(key, val);
        else if (key == "beta_start") beta_start = to_double(key, val);
        else if (key == "beta_end") beta_end = to_double(key, val);
        else if (key == "sigma_mode") sigma_mode = parse_sigma(val);
        else if (key == "sampler") sampler = parse_sampler(val);
        else if (key == "seed") seed = to_u64(key, val);
        else if (key == "scenes") scenes = to_int(key, val);
        else if (key == "eps_width") eps_width = to_int(key, val);
        else if (key == "dd_width") dd_width = to_int(key, val);
        else if (key == "unimodal_steps") unimodal_steps = to_int(key, val);
        else if (key == "unimodal_lr") unimodal_lr = to_double(key, val);
        else if (key == "unimodal_batch") unimodal_batch = to_int(key, val);
        else if (key == "diffuser_steps") diffuser_steps = to_int(key, val);
        else if (key == "diffuser_lr") diffuser_lr = to_double(key, val);
        else if (key == "diffuser_batch") diffuser_batch = to_int(key, val);
        else if (key == "edit_alpha") edit_alpha = to_double(key, val);
        else if (key == "edit_embed_steps") edit_embed_steps = to_int(key, val);
        else if (key == "edit_embed_lr") edit_embed_lr = to_double(key, val);
        else if (key == "edit_finetune_steps") edit_finetune_steps = to_int(key, val);
        else if (key == "edit_finetune_lr") edit_finetune_lr = to_double(key, val);
        else if (key == "eval_samples") eval_samples = to_int(key, val);
        else if (key == "eval_samples_ablation") eval_samples_ablation = to_int(key, val);
        else if (key == "no_temporal_variant") no_temporal_variant = parse_variant(val);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
        if (resolution != 16 && resolution != 32) fail("resolution must be 16 or 32");
        if (timesteps < 1 || timesteps > 10000) fail("timesteps out of range [1,10000]");
        if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1))
            fail("need 0 < beta_start < beta_end < 1");
        if (scenes < 8 || scenes > 100000) fail("scenes out of range [8,100000]");
        if (eps_width < 4 || eps_width > 256) fail("eps_width out of range [4,256]");
        if (dd_width < 2 || dd_width > 64) fail("dd_width out of range [2,64]");
        if (unimodal_steps < 1 || unimodal_steps > 1000000) fail("unimodal_steps out of range");
        if (diffuser_steps < 1 || diffuser_steps > 1000000) fail("diffuser_steps out of range");
        if (unimodal_batch < 1 || unimodal_batch > 256) fail("unimodal_batch out of range");
        if (diffuser_batch < 1 || diffuser_batch > 256) fail("diffuser_batch out of range");
        for (double lr : {unimodal_lr, diffuser_lr, edit_embed_lr, edit_finetune_lr})
            if (!(lr > 0 && lr < 1)) fail("learning rates must lie in (0,1)");
        if (!(edit_alpha >= 0 && edit_alpha <= 1)) fail("edit_alpha must lie in [0,1]");
        if (edit_embed_steps < 0 || edit_embed_steps > 100000) fail("edit_embed_steps out of range");
        if (edit_finetune_steps < 0 || edit_finetune_steps > 100000)
            fail("edit_finetune_steps out of range");
        if (eval_samples < 2 || eval_samples > 10000) fail("eval_samples out of range [2,10000]");
        if (eval_samples_ablation < 2 || eval_samples_ablation > 10000)
            fail("eval_samples_ablation out of range [2,10000]");
        if (timesteps < 50 && sampler == Sampler::ddim50)
            fail("ddim50 needs timesteps >= 50");
    }

    // Sorted keys, "k=v\n", LF only. This exact text is what gets hashed.
    std::string canonical() const {
        std::map<std::string, std::string> kv;
        kv["resolution"] = std::to_string(resolution);
        kv["timesteps"] = std::to_string(timesteps);
        kv["beta_start"] = fmt_double(beta_start);
        kv["beta_end"] = fmt_double(beta_end);
        kv["sigma_mode"] = to_string(sigma_mode);
        kv["sampler"] = to_string(sampler);
        kv["seed"] = std::to_string(seed);
        kv["scenes"] = std::to_string(scenes);
        kv["eps_width"] = std::to_string(eps_width);
        kv["dd_width"] = std::to_string(dd_width);
        kv["unimodal_steps"] = std::to_string(unimodal_steps);
        kv["unimodal_lr"] = fmt_double(unimodal_lr);
        kv["unimodal_batch"] = std::to_string(unimodal_batch);
        kv["diffuser_steps"] = std::to_string(diffuser_steps);
        kv["diffuser_lr"] = fmt_double(diffuser_lr);
        kv["diffuser_batch"] = std::to_string(diffuser_batch);
        kv["edit_alpha"] = fmt_double(edit_alpha);
        kv["edit_embed_steps"] = std::to_string(edit_embed_steps);
        kv["edit_embed_lr"] = fmt_double(edit_embed_lr);
        kv["edit_finetune_steps"] = std::to_string(edit_finetune_steps);
        kv["edit_finetune_lr"] = fmt_double(edit_finetune_lr);
        kv["eval_samples"] = std::to_string(eval_samples);
        kv["eval_samples_ablation"] = std::to_string(eval_samples_ablation);
        kv["no_temporal_variant"] = to_string(no_temporal_variant);
        std::string out;
        for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
        return out;
    }

    std::string hash_hex() const { return io::hex64(io::fnv1a64(canonical())); }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("config: cannot open '" + path + "' for writing");
        f << canonical();
    }

private:
    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }
    static int to_int(const std::string& k, const std::string& v) {
        try {
            size_t pos;
            int x = std::stoi(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return x;
        } catch (...) {
            throw std::invalid_argument("config: key '" + k + "' needs an integer, got '" + v + "'");
        }
    }
    static uint64_t to_u64(const std::string& k, const std::string& v) {
        try {
            size_t pos;
            unsigned long long x = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return static_cast<uint64_t>(x);
        } catch (...) {
            throw std::invalid_argument("config: key '" + k + "' needs an unsigned integer, got '" +
                                        v + "'");
        }
    }
    static double to_double(const std::string& k, const std::string& v) {
        try {
            size_t pos;
            double x = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return x;
        } catch (...) {
            throw std::invalid_argument("config: key '" + k + "' needs a number, got '" + v + "'");
        }
    }
    static Sampler parse_sampler(const std::string& v) {
        if (v == "ddpm") return Sampler::ddpm;
        if (v == "ddim50") return Sampler::ddim50;
        throw std::invalid_argument("config: sampler must be ddpm or ddim50, got '" + v + "'");
    }
    static SigmaMode parse_sigma(const std::string& v) {
        if (v == "beta") return SigmaMode::beta;
        if (v == "beta_tilde") return SigmaMode::beta_tilde;
        throw std::invalid_argument("config: sigma_mode must be beta or beta_tilde, got '" + v +
                                    "'");
    }
    static NoTemporalVariant parse_variant(const std::string& v) {
        if (v == "freeze") return NoTemporalVariant::freeze;
        if (v == "time_avg") return NoTemporalVariant::time_avg;
        throw std::invalid_argument("config: no_temporal_variant must be freeze or time_avg");
    }
    static std::string fmt_double(double d) {
        std::ostringstream os;
        os.precision(17);
        os << d;
        return os.str();
    }
};

}  // namespace codiff::eval
