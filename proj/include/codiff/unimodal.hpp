// SPDX-License-Identifier: Apache-2.0
//
// Single-modality conditional denoisers and their trainer. An EpsModel owns
// one UNet plus the encoder for its modality; training regresses the noise
// added by the forward corruption, one uniformly drawn timestep per sample.
//
// Checkpoints are single .nta archives ("unet.*" and "enc.*" parameter
// blocks) whose metadata records modality, geometry, training length and the
// hashes of the dataset and experiment configuration that produced them.
// Everything downstream (fusion training, sampling, editing) loads models
// through this file and never touches raw parameter names.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "dataset.hpp"
#include "diffusion.hpp"
#include "encoders.hpp"
#include "image_io.hpp"
#include "ntar.hpp"
#include "optim.hpp"
#include "unet.hpp"

namespace codiff::nn {

// [H,W,3] image in [0,1]  ->  [3,H,W] signal in [-1,1] (the model's domain).
inline Tensor image_to_x0(const Tensor& hwc) {
    Tensor chw = io::hwc_to_chw(hwc);
    Tensor out = Tensor::zeros(chw.shape);
    for (size_t i = 0; i < out.numel(); i++) out.at(i) = 2.0f * chw.at(i) - 1.0f;
    return out;
}

// Inverse of image_to_x0, clamped back into displayable range.
inline Tensor x0_to_image(const Tensor& chw) {
    Tensor scaled = Tensor::zeros(chw.shape);
    for (size_t i = 0; i < scaled.numel(); i++)
        scaled.at(i) = std::clamp(0.5f * (chw.at(i) + 1.0f), 0.0f, 1.0f);
    return io::chw_to_hwc(scaled);
}

struct TrainMeta {
    int steps = 0;
    int resolution = 0;
    int timesteps = 0;
    std::string dataset_hash;
    std::string config_hash;
};

// One conditional denoiser: UNet + the encoder matching its modality. The
// tag is fixed at construction; predict_eps refuses embeddings carrying a
// different tag so collaborators can never be cross-wired silently.
class EpsModel {
public:
    UNet unet;
    TrainMeta meta;

    EpsModel(Modality tag, const UNetConfig& cfg, RngStream& rng) : unet(cfg, rng), tag_(tag) {
        // Construction draw order (UNet first, then encoder) is part of the
        // determinism contract: same seed, same parameters.
        if (tag == Modality::mask)
            mask_enc_ = std::make_unique<MaskEncoder>(rng, cfg.ctx_dim);
        else
            attr_enc_ = std::make_unique<AttrEncoder>(rng, cfg.ctx_dim);
    }

    Modality tag() const { return tag_; }

    ParamSet& encoder_params() { return mask_enc_ ? mask_enc_->params : attr_enc_->params; }
    const ParamSet& encoder_params() const {
        return mask_enc_ ? mask_enc_->params : attr_enc_->params;
    }

    ConditionEmbedding encode(const std::vector<toy::MaskCondition>& ms) const {
        if (tag_ != Modality::mask)
            throw std::invalid_argument("eps-model: attribute model cannot encode masks");
        return mask_enc_->encode(ms);
    }

    ConditionEmbedding encode(const std::vector<toy::AttributeCondition>& as) const {
        if (tag_ != Modality::attribute)
            throw std::invalid_argument("eps-model: mask model cannot encode attributes");
        return attr_enc_->encode(as);
    }

    Tensor predict_eps(const Tensor& xt, const std::vector<int>& t,
                       const ConditionEmbedding& c) const {
        if (c.tag != tag_)
            throw std::invalid_argument(std::string("eps-model: ") + to_string(tag_) +
                                        " model fed a " + to_string(c.tag) + " embedding");
        return unet.forward(xt, t, c.tokens);
    }

    Tensor predict_eps(const Tensor& xt, int t, const ConditionEmbedding& c) const {
        return predict_eps(xt, std::vector<int>{t}, c);
    }

    void zero_grad() {
        unet.params.zero_grad();
        encoder_params().zero_grad();
    }

    void set_trainable(bool on) {
        unet.params.set_trainable(on);
        encoder_params().set_trainable(on);
    }

    // Hash over every parameter value (UNet and encoder); two models agree
    // here iff their learned state is bit-identical.
    uint64_t value_hash() const {
        uint64_t h[2] = {unet.params.value_hash(), encoder_params().value_hash()};
        return io::fnv1a64(reinterpret_cast<const uint8_t*>(h), sizeof(h));
    }

private:
    Modality tag_;
    std::unique_ptr<MaskEncoder> mask_enc_;
    std::unique_ptr<AttrEncoder> attr_enc_;
};

inline void save_model(const EpsModel& m, const std::string& path) {
    io::NamedTensorArchive a;
    m.unet.params.save_to(a, "unet.");
    m.encoder_params().save_to(a, "enc.");
    a.set_meta("kind", "eps-checkpoint");
    a.set_meta("format", "1");
    a.set_meta("modality", to_string(m.tag()));
    a.set_meta("resolution", std::to_string(m.unet.cfg.resolution));
    a.set_meta("width", std::to_string(m.unet.cfg.width));
    a.set_meta("ctx_dim", std::to_string(m.unet.cfg.ctx_dim));
    a.set_meta("sin_dim", std::to_string(m.unet.cfg.sin_dim));
    a.set_meta("timesteps", std::to_string(m.meta.timesteps));
    a.set_meta("steps", std::to_string(m.meta.steps));
    a.set_meta("dataset_hash", m.meta.dataset_hash);
    a.set_meta("config_hash", m.meta.config_hash);
    a.save(path);
}

namespace detail {
inline int meta_int(const io::NamedTensorArchive& a, const std::string& key) {
    std::string v = a.meta(key);
    try {
        size_t used = 0;
        int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing junk");
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("checkpoint: metadata '" + key + "' is not an integer: '" + v +
                                 "'");
    }
}
}  // namespace detail

inline EpsModel load_model(const std::string& path) {
    io::NamedTensorArchive a = io::NamedTensorArchive::load(path);
    if (a.meta("kind") != "eps-checkpoint")
        throw std::runtime_error("checkpoint: '" + path + "' is not an eps-checkpoint (kind='" +
                                 a.meta("kind") + "')");
    Modality tag = modality_from_string(a.meta("modality"));
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.out_channels = 3;
    cfg.resolution = detail::meta_int(a, "resolution");
    cfg.width = detail::meta_int(a, "width");
    cfg.ctx_dim = detail::meta_int(a, "ctx_dim");
    cfg.sin_dim = detail::meta_int(a, "sin_dim");
    RngStream scratch(0);  // overwritten wholesale by load_from below
    EpsModel m(tag, cfg, scratch);
    m.unet.params.load_from(a, "unet.");
    m.encoder_params().load_from(a, "enc.");
    m.meta.steps = detail::meta_int(a, "steps");
    m.meta.timesteps = detail::meta_int(a, "timesteps");
    m.meta.resolution = cfg.resolution;
    m.meta.dataset_hash = a.meta("dataset_hash");
    m.meta.config_hash = a.meta("config_hash");
    return m;
}

// Trainer knobs, deliberately smaller than the full experiment config.
// lr = 0 is legal here (a no-op optimizer step), unlike in the experiment
// file format — useful for exercising the loop without moving parameters.
struct UnimodalTrainConfig {
    int steps = 1000;
    int batch = 8;
    double lr = 1e-4;
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int width = 32;    // UNet channel width
    int ctx_dim = 32;  // condition token width
    std::string config_hash;

    static UnimodalTrainConfig from(const eval::ExperimentConfig& c) {
        UnimodalTrainConfig t;
        t.steps = c.unimodal_steps;
        t.batch = c.unimodal_batch;
        t.lr = c.unimodal_lr;
        t.timesteps = c.timesteps;
        t.beta_start = c.beta_start;
        t.beta_end = c.beta_end;
        t.width = c.eps_width;
        t.config_hash = c.hash_hex();
        return t;
    }

    void validate() const {
        if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
        if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
        if (!(lr >= 0.0) || !std::isfinite(lr))
            throw std::invalid_argument("train: lr must be finite and >= 0");
        if (timesteps < 1) throw std::invalid_argument("train: timesteps must be >= 1");
        if (!(beta_start > 0.0) || !(beta_end > beta_start) || !(beta_end < 1.0))
            throw std::invalid_argument("train: need 0 < beta_start < beta_end < 1");
        if (width < 4 || width % 4 != 0)
            throw std::invalid_argument("train: width must be a positive multiple of 4");
        if (ctx_dim < 1) throw std::invalid_argument("train: ctx_dim must be >= 1");
    }
};

struct UnimodalResult {
    EpsModel model;
    std::vector<float> curve;     // per-step training loss
    std::vector<float> smoothed;  // EMA(0.98) of the same
    std::string checkpoint_path;
};

namespace detail {

// Assemble a training batch in one fixed rng draw order: sample indices,
// then timesteps, then noise. Changing this order changes every seeded run.
struct Batch {
    std::vector<int> ids, ts;
    Tensor x0, eps;
};

inline Batch draw_batch(const toy::FaceDataset& ds, const std::vector<int>& pool, int B,
                        int timesteps, RngStream& rng) {
    Batch b;
    b.ids.resize(static_cast<size_t>(B));
    b.ts.resize(static_cast<size_t>(B));
    for (int i = 0; i < B; i++) b.ids[static_cast<size_t>(i)] = pool[rng.uniform_int(static_cast<int>(pool.size()))];
    for (int i = 0; i < B; i++) b.ts[static_cast<size_t>(i)] = 1 + rng.uniform_int(timesteps);
    const int R = ds.resolution;
    const size_t stride = static_cast<size_t>(3) * R * R;
    b.x0 = Tensor::zeros({B, 3, R, R});
    for (int i = 0; i < B; i++) {
        Tensor one = image_to_x0(ds.image(b.ids[static_cast<size_t>(i)]));
        for (size_t j = 0; j < stride; j++) b.x0.at(stride * static_cast<size_t>(i) + j) = one.at(j);
    }
    b.eps = rng.normal_tensor(b.x0.shape);
    return b;
}

inline ConditionEmbedding encode_batch(const EpsModel& m, const toy::FaceDataset& ds,
                                       const std::vector<int>& ids) {
    if (m.tag() == Modality::mask) {
        std::vector<toy::MaskCondition> ms;
        ms.reserve(ids.size());
        for (int i : ids) ms.push_back(ds.mask(i));
        return m.encode(ms);
    }
    std::vector<toy::AttributeCondition> as;
    as.reserve(ids.size());
    for (int i : ids) as.push_back(ds.attr(i));
    return m.encode(as);
}

}  // namespace detail

// Noise-regression training for one modality. Model initialization and all
// batch randomness come from `rng`, so (dataset, config, seed) fully
// determine the returned parameters. Writes a checkpoint and a loss curve
// when paths are given; a NaN loss aborts instead of training onward.
inline UnimodalResult train_unimodal(Modality tag, const toy::FaceDataset& ds,
                                     const UnimodalTrainConfig& cfg, RngStream& rng,
                                     const std::string& checkpoint_path = "",
                                     const std::string& curve_path = "") {
    cfg.validate();
    if (ds.count < 1) throw std::invalid_argument("train: empty dataset");
    std::vector<int> pool = ds.train_indices();
    if (pool.empty()) throw std::invalid_argument("train: dataset has no training entries");

    Schedule sched = make_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
    UNetConfig uc;
    uc.in_channels = 3;
    uc.out_channels = 3;
    uc.resolution = ds.resolution;
    uc.width = cfg.width;
    uc.ctx_dim = cfg.ctx_dim;
    uc.validate();

    UnimodalResult out{EpsModel(tag, uc, rng), {}, {}, checkpoint_path};
    EpsModel& model = out.model;
    Adam opt_unet(cfg.lr), opt_enc(cfg.lr);
    double ema = 0.0;

    for (int step = 1; step <= cfg.steps; step++) {
        detail::Batch b = detail::draw_batch(ds, pool, cfg.batch, cfg.timesteps, rng);
        Tensor xt = q_sample(b.x0, b.ts, b.eps, sched);
        ConditionEmbedding cond = detail::encode_batch(model, ds, b.ids);

        model.zero_grad();
        Tensor pred = model.unet.forward(xt, b.ts, cond.tokens);
        Tensor loss = mse(pred, b.eps);
        float lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
        backward(loss);
        try {
            opt_unet.step(model.unet.params);
            opt_enc.step(model.encoder_params());
        } catch (const std::runtime_error& e) {
            // Non-finite gradients are divergence too, even when the zero
            // head keeps the loss itself finite (NaN data at init).
            throw std::runtime_error("train: diverged at step " + std::to_string(step) + " (" +
                                     e.what() + ")");
        }

        ema = (step == 1) ? lv : 0.98 * ema + 0.02 * lv;
        out.curve.push_back(lv);
        out.smoothed.push_back(static_cast<float>(ema));
    }

    model.meta.steps = cfg.steps;
    model.meta.resolution = ds.resolution;
    model.meta.timesteps = cfg.timesteps;
    model.meta.dataset_hash = ds.fingerprint();
    model.meta.config_hash = cfg.config_hash;

    if (!checkpoint_path.empty()) save_model(model, checkpoint_path);
    if (!curve_path.empty()) {
        std::ofstream f(curve_path);
        if (!f) throw std::runtime_error("train: cannot write curve to '" + curve_path + "'");
        f << "step,loss,smoothed\n";
        for (size_t i = 0; i < out.curve.size(); i++)
            f << (i + 1) << "," << out.curve[i] << "," << out.smoothed[i] << "\n";
    }
    return out;
}

// Mean squared ε-regression error over the given dataset rows, with noise
// and timesteps drawn from `rng` (pass a fixed stream to compare models on
// identical corruptions). Runs without gradient tracking.
inline double eval_loss(const EpsModel& m, const toy::FaceDataset& ds, const std::vector<int>& idx,
                        const Schedule& sched, RngStream rng, int chunk = 8) {
    if (idx.empty()) throw std::invalid_argument("eval_loss: empty index set");
    if (chunk < 1) throw std::invalid_argument("eval_loss: chunk must be >= 1");
    NoGradGuard guard;
    double sse = 0.0;
    size_t n = 0;
    for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(chunk)) {
        std::vector<int> ids(idx.begin() + static_cast<long>(at),
                             idx.begin() + static_cast<long>(std::min(at + chunk, idx.size())));
        int B = static_cast<int>(ids.size());
        std::vector<int> ts(static_cast<size_t>(B));
        for (int i = 0; i < B; i++) ts[static_cast<size_t>(i)] = 1 + rng.uniform_int(sched.T());
        const int R = ds.resolution;
        const size_t stride = static_cast<size_t>(3) * R * R;
        Tensor x0 = Tensor::zeros({B, 3, R, R});
        for (int i = 0; i < B; i++) {
            Tensor one = image_to_x0(ds.image(ids[static_cast<size_t>(i)]));
            for (size_t j = 0; j < stride; j++) x0.at(stride * static_cast<size_t>(i) + j) = one.at(j);
        }
        Tensor eps = rng.normal_tensor(x0.shape);
        Tensor xt = q_sample(x0, ts, eps, sched);
        Tensor pred = m.predict_eps(xt, ts, detail::encode_batch(m, ds, ids));
        for (size_t j = 0; j < pred.numel(); j++) {
            double d = static_cast<double>(pred.at(j)) - static_cast<double>(eps.at(j));
            sse += d * d;
        }
        n += pred.numel();
    }
    return sse / static_cast<double>(n);
}

// Bind a model to one fixed condition so the generic samplers can drive it.
// The embedding's batch must match the sample batch at call time.
inline EpsPredictor conditional_predictor(const EpsModel& m, const ConditionEmbedding& c) {
    return [&m, c](const Tensor& xt, int t) { return m.predict_eps(xt, t, c); };
}

}  // namespace codiff::nn
