// SPDX-License-Identifier: Apache-2.0
//
// Multi-collaborator fusion: an ensemble of single-modality denoisers whose
// predictions are blended per pixel, per step, by the influence scorers in
// influence.hpp. Covers scorer training (collaborators frozen, only the
// scorers learn), fused sampling in four modes (full, spatially averaged
// weights, time-frozen weights, plain 1/M averaging), and influence-trace
// export for inspection.
//
// Sampling reuses the generic reverse chains from diffusion.hpp, so a
// one-member ensemble is bit-identical to sampling that member alone with
// the same stream — the reduction property the tests pin.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "dataset.hpp"
#include "diffusion.hpp"
#include "image_io.hpp"
#include "influence.hpp"
#include "unimodal.hpp"

namespace codiff::collab {

enum class FuseMode { full, no_spatial, no_temporal, uniform };

inline const char* to_string(FuseMode m) {
    switch (m) {
        case FuseMode::full: return "full";
        case FuseMode::no_spatial: return "no_spatial";
        case FuseMode::no_temporal: return "no_temporal";
        case FuseMode::uniform: return "uniform";
    }
    throw std::invalid_argument("fuse mode: unknown value");
}

inline FuseMode fuse_mode_from_string(const std::string& s) {
    if (s == "full") return FuseMode::full;
    if (s == "no_spatial") return FuseMode::no_spatial;
    if (s == "no_temporal") return FuseMode::no_temporal;
    if (s == "uniform") return FuseMode::uniform;
    throw std::invalid_argument("fuse mode: unknown name '" + s + "'");
}

// One denoiser plus its influence scorer, same modality.
struct Collaborator {
    nn::EpsModel model;
    DynamicDiffuser diffuser;
};

// All collaborators sampling against one schedule and one image geometry.
class CollabEnsemble {
public:
    Schedule schedule;
    std::vector<Collaborator> members;

    CollabEnsemble(Schedule s, std::vector<Collaborator> ms)
        : schedule(std::move(s)), members(std::move(ms)) {
        validate();
    }

    int modalities() const { return static_cast<int>(members.size()); }
    int resolution() const { return members.front().model.unet.cfg.resolution; }

    void validate() const {
        if (members.empty()) throw std::invalid_argument("ensemble: need at least one member");
        int res = members.front().model.unet.cfg.resolution;
        for (size_t i = 0; i < members.size(); i++) {
            const Collaborator& c = members[i];
            if (c.model.tag() != c.diffuser.tag())
                throw std::invalid_argument("ensemble: member " + std::to_string(i) +
                                            " pairs a " + nn::to_string(c.model.tag()) +
                                            " model with a " + nn::to_string(c.diffuser.tag()) +
                                            " scorer");
            if (c.model.unet.cfg.resolution != res || c.diffuser.unet.cfg.resolution != res)
                throw std::invalid_argument("ensemble: members disagree on image size");
            size_t big = c.model.unet.params.count() + c.model.encoder_params().count();
            size_t small = c.diffuser.params().count();
            if (10 * small >= big)
                throw std::invalid_argument(
                    "ensemble: scorer of member " + std::to_string(i) + " has " +
                    std::to_string(small) + " parameters, not under a tenth of its "
                    "collaborator's " + std::to_string(big));
            for (size_t j = 0; j < i; j++)
                if (members[j].model.tag() == c.model.tag())
                    throw std::invalid_argument("ensemble: duplicate modality " +
                                                std::string(nn::to_string(c.model.tag())));
        }
    }
};

// Pair each trained model with a freshly initialized scorer (drawn from
// `rng` in member order — part of the determinism contract).
inline CollabEnsemble make_ensemble(std::vector<nn::EpsModel> models, const Schedule& sched,
                                    int dd_width, RngStream& rng) {
    if (models.empty()) throw std::invalid_argument("ensemble: need at least one model");
    std::vector<Collaborator> members;
    for (nn::EpsModel& m : models) {
        nn::UNetConfig cfg;
        cfg.in_channels = 3;
        cfg.out_channels = 1;
        cfg.resolution = m.unet.cfg.resolution;
        cfg.width = dd_width;
        cfg.ctx_dim = m.unet.cfg.ctx_dim;
        cfg.validate();
        DynamicDiffuser d(m.tag(), cfg, rng);
        members.push_back(Collaborator{std::move(m), std::move(d)});
    }
    return CollabEnsemble(sched, std::move(members));
}

inline void save_diffuser(const DynamicDiffuser& d, const std::string& path) {
    io::NamedTensorArchive a;
    d.unet.params.save_to(a, "dd.");
    a.set_meta("kind", "dd-checkpoint");
    a.set_meta("format", "1");
    a.set_meta("modality", nn::to_string(d.tag()));
    a.set_meta("resolution", std::to_string(d.unet.cfg.resolution));
    a.set_meta("width", std::to_string(d.unet.cfg.width));
    a.set_meta("ctx_dim", std::to_string(d.unet.cfg.ctx_dim));
    a.set_meta("sin_dim", std::to_string(d.unet.cfg.sin_dim));
    a.set_meta("timesteps", std::to_string(d.meta.timesteps));
    a.set_meta("steps", std::to_string(d.meta.steps));
    a.set_meta("dataset_hash", d.meta.dataset_hash);
    a.set_meta("config_hash", d.meta.config_hash);
    a.save(path);
}

inline DynamicDiffuser load_diffuser(const std::string& path) {
    io::NamedTensorArchive a = io::NamedTensorArchive::load(path);
    if (a.meta("kind") != "dd-checkpoint")
        throw std::runtime_error("checkpoint: '" + path + "' is not a dd-checkpoint (kind='" +
                                 a.meta("kind") + "')");
    nn::Modality tag = nn::modality_from_string(a.meta("modality"));
    nn::UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.out_channels = 1;
    cfg.resolution = nn::detail::meta_int(a, "resolution");
    cfg.width = nn::detail::meta_int(a, "width");
    cfg.ctx_dim = nn::detail::meta_int(a, "ctx_dim");
    cfg.sin_dim = nn::detail::meta_int(a, "sin_dim");
    RngStream scratch(0);  // overwritten wholesale below
    DynamicDiffuser d(tag, cfg, scratch);
    d.unet.params.load_from(a, "dd.");
    d.meta.steps = nn::detail::meta_int(a, "steps");
    d.meta.timesteps = nn::detail::meta_int(a, "timesteps");
    d.meta.resolution = cfg.resolution;
    d.meta.dataset_hash = a.meta("dataset_hash");
    d.meta.config_hash = a.meta("config_hash");
    return d;
}

// Per-sample conditions for every modality the ensemble might hold. The
// vectors run over the batch; a modality absent from the ensemble may stay
// empty.
struct BatchConditions {
    std::vector<toy::MaskCondition> masks;
    std::vector<toy::AttributeCondition> attrs;

    int batch() const {
        size_t n = std::max(masks.size(), attrs.size());
        if (n == 0) throw std::invalid_argument("conditions: empty");
        if (!masks.empty() && !attrs.empty() && masks.size() != attrs.size())
            throw std::invalid_argument("conditions: " + std::to_string(masks.size()) +
                                        " masks vs " + std::to_string(attrs.size()) +
                                        " attribute rows");
        return static_cast<int>(n);
    }

    static BatchConditions from_dataset(const toy::FaceDataset& ds, const std::vector<int>& ids) {
        BatchConditions bc;
        for (int i : ids) {
            bc.masks.push_back(ds.mask(i));
            bc.attrs.push_back(ds.attr(i));
        }
        return bc;
    }
};

namespace detail {

inline nn::ConditionEmbedding encode_for(const nn::EpsModel& m, const BatchConditions& bc) {
    if (m.tag() == nn::Modality::mask) {
        if (bc.masks.empty())
            throw std::invalid_argument("conditions: no masks for the mask collaborator");
        return m.encode(bc.masks);
    }
    if (bc.attrs.empty())
        throw std::invalid_argument("conditions: no attributes for the attribute collaborator");
    return m.encode(bc.attrs);
}

// [N,C,H,W] row n -> [C,H,W] / [H,W] views (copies; inference-scale data).
inline Tensor slice_row(const Tensor& x, int n) {
    int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::zeros({C, H, W});
    size_t stride = out.numel();
    for (size_t i = 0; i < stride; i++) out.at(i) = x.at(static_cast<size_t>(n) * stride + i);
    return out;
}

inline Tensor slice_map(const Tensor& x, int n) {
    int H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::zeros({H, W});
    size_t stride = out.numel();
    for (size_t i = 0; i < stride; i++) out.at(i) = x.at(static_cast<size_t>(n) * stride + i);
    return out;
}

inline InfluenceStack uniform_stack(int M, int H, int W, int t) {
    InfluenceStack st;
    st.t = t;
    for (int m = 0; m < M; m++)
        st.normalized.push_back(Tensor::full({H, W}, 1.0f / static_cast<float>(M)));
    st.raw = st.normalized;
    return st;
}

// Everything one fused reverse step needs; lives for the duration of one
// chain. Holds the per-member networks and embeddings (conditions are fixed
// along the chain) and the frozen stacks for the time-invariant mode. The
// member lists let the editing path substitute fine-tuned denoisers while
// keeping the original scorers.
struct FusionState {
    std::vector<const nn::EpsModel*> models;
    std::vector<const DynamicDiffuser*> scorers;
    std::vector<nn::ConditionEmbedding> embs;
    FuseMode mode;
    std::vector<std::vector<InfluenceStack>> frozen;  // [N] stacks when frozen_ready
    bool frozen_ready = false;

    // Trace hooks: when set, row `trace_row`'s stack and the decoded input
    // state are recorded at every predictor call.
    std::vector<int>* trace_t = nullptr;
    std::vector<InfluenceStack>* trace_stacks = nullptr;
    std::vector<Tensor>* trace_xt = nullptr;
    int trace_row = 0;

    FusionState(const CollabEnsemble& e, const BatchConditions& bc, FuseMode m) : mode(m) {
        NoGradGuard ng;
        int n = bc.batch();
        for (const Collaborator& c : e.members) {
            nn::ConditionEmbedding emb = encode_for(c.model, bc);
            if (emb.batch() != n)
                throw std::invalid_argument("conditions: embedding batch mismatch");
            models.push_back(&c.model);
            scorers.push_back(&c.diffuser);
            embs.push_back(std::move(emb));
        }
    }

    FusionState(std::vector<const nn::EpsModel*> ms, std::vector<const DynamicDiffuser*> ss,
                std::vector<nn::ConditionEmbedding> es, FuseMode m)
        : models(std::move(ms)), scorers(std::move(ss)), embs(std::move(es)), mode(m) {
        if (models.size() != scorers.size() || models.size() != embs.size() || models.empty())
            throw std::invalid_argument("fusion: member lists must be equal and non-empty");
    }

    int modalities() const { return static_cast<int>(models.size()); }

    // Stack for row n of the current state (full softmax; mode transforms
    // are applied by the caller).
    InfluenceStack stack_at(const std::vector<Tensor>& raw_batched, int n, int t) const {
        std::vector<Tensor> rows;
        for (const Tensor& r : raw_batched) rows.push_back(slice_map(r, n));
        return normalize_influences(rows, t);
    }

    Tensor fused(const Tensor& x, int t) {
        const int M = modalities();
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);

        std::vector<Tensor> eps;  // per member, [N,3,H,W]
        for (int m = 0; m < M; m++)
            eps.push_back(models[static_cast<size_t>(m)]->predict_eps(
                x, std::vector<int>{t}, embs[static_cast<size_t>(m)]));

        std::vector<Tensor> raw;  // per member, [N,1,H,W]; skipped when unused
        bool need_raw = mode == FuseMode::full || mode == FuseMode::no_spatial ||
                        (mode == FuseMode::no_temporal && !frozen_ready);
        if (need_raw)
            for (int m = 0; m < M; m++)
                raw.push_back(raw_influence(*scorers[static_cast<size_t>(m)], x,
                                            std::vector<int>{t},
                                            embs[static_cast<size_t>(m)]));

        if (mode == FuseMode::no_temporal && !frozen_ready) {
            // First predictor call of the chain sees x at the terminal
            // timestep; that stack is reused for every later step.
            frozen.assign(static_cast<size_t>(N), {});
            for (int n = 0; n < N; n++)
                frozen[static_cast<size_t>(n)] = {stack_at(raw, n, t)};
            frozen_ready = true;
        }

        Tensor out = Tensor::zeros(x.shape);
        size_t row_elems = static_cast<size_t>(3) * H * W;
        for (int n = 0; n < N; n++) {
            InfluenceStack st;
            switch (mode) {
                case FuseMode::uniform: st = uniform_stack(M, H, W, t); break;
                case FuseMode::full: st = stack_at(raw, n, t); break;
                case FuseMode::no_spatial: st = spatial_mean_stack(stack_at(raw, n, t)); break;
                case FuseMode::no_temporal: st = frozen[static_cast<size_t>(n)][0]; break;
            }
            std::vector<Tensor> eps_rows;
            for (const Tensor& e : eps) eps_rows.push_back(slice_row(e, n));
            Tensor fused_row = combine_eps(st, eps_rows);
            for (size_t i = 0; i < row_elems; i++)
                out.at(static_cast<size_t>(n) * row_elems + i) = fused_row.at(i);
            if (trace_stacks && n == trace_row) {
                trace_t->push_back(t);
                trace_stacks->push_back(st);
                trace_xt->push_back(nn::x0_to_image(slice_row(x, n)));
            }
        }
        return out;
    }
};

}  // namespace detail

struct CollabSampleResult {
    Tensor x;       // [N,3,R,R] final chain state
    Tensor images;  // [N,R,R,3], decoded and clamped to [0,1]
};

// Fused reverse sampling. Draw order matches the single-model chains in
// diffusion.hpp exactly, so a one-member ensemble reproduces uni-modal
// sampling bit for bit from an equal stream. The time-invariant mode
// freezes the weight stack computed at the terminal step by default; the
// time_avg variant instead averages the stacks of a reference trajectory
// (run from a copy of the stream, so the main chain's draws are unchanged).
inline CollabSampleResult collaborative_sample(
    const CollabEnsemble& ens, const BatchConditions& bc, RngStream& rng, eval::Sampler sampler,
    FuseMode mode = FuseMode::full, int ddim_steps = 50,
    eval::NoTemporalVariant variant = eval::NoTemporalVariant::freeze) {
    NoGradGuard ng;
    const int N = bc.batch(), R = ens.resolution();
    Shape shape = {N, 3, R, R};

    detail::FusionState fs(ens, bc, mode);

    if (mode == FuseMode::no_temporal && variant == eval::NoTemporalVariant::time_avg) {
        // Reference pass in full mode, recording every stack; the averaged
        // (per-pixel, renormalized) stacks become the frozen weights.
        detail::FusionState ref(ens, bc, FuseMode::full);
        std::vector<std::vector<InfluenceStack>> per_row(static_cast<size_t>(N));
        RngStream ref_rng = rng;  // value copy: same draws as the main pass
        EpsPredictor ref_pred = [&](const Tensor& x, int t) {
            Tensor out = ref.fused(x, t);
            std::vector<Tensor> raw;
            for (int m = 0; m < ens.modalities(); m++)
                raw.push_back(raw_influence(ens.members[static_cast<size_t>(m)].diffuser, x,
                                            std::vector<int>{t},
                                            ref.embs[static_cast<size_t>(m)]));
            for (int n = 0; n < N; n++)
                per_row[static_cast<size_t>(n)].push_back(ref.stack_at(raw, n, t));
            return out;
        };
        if (sampler == eval::Sampler::ddpm)
            sample_chain_ddpm(ref_pred, shape, ens.schedule, ref_rng);
        else
            sample_chain_ddim(ref_pred, shape, ens.schedule, ddim_steps, ref_rng);

        fs.frozen.assign(static_cast<size_t>(N), {});
        const int M = ens.modalities();
        for (int n = 0; n < N; n++) {
            const auto& stacks = per_row[static_cast<size_t>(n)];
            InfluenceStack avg;
            avg.t = ens.schedule.T();
            for (int m = 0; m < M; m++) avg.normalized.push_back(Tensor::zeros({R, R}));
            for (const InfluenceStack& st : stacks)
                for (int m = 0; m < M; m++)
                    for (size_t p = 0; p < st.normalized[static_cast<size_t>(m)].numel(); p++)
                        avg.normalized[static_cast<size_t>(m)].at(p) +=
                            st.normalized[static_cast<size_t>(m)].at(p);
            for (size_t p = 0; p < avg.normalized[0].numel(); p++) {
                double sum = 0.0;
                for (int m = 0; m < M; m++) sum += avg.normalized[static_cast<size_t>(m)].at(p);
                for (int m = 0; m < M; m++)
                    avg.normalized[static_cast<size_t>(m)].at(p) = static_cast<float>(
                        avg.normalized[static_cast<size_t>(m)].at(p) / sum);
            }
            avg.raw = avg.normalized;
            fs.frozen[static_cast<size_t>(n)] = {avg};
        }
        fs.frozen_ready = true;
    }

    EpsPredictor pred = [&fs](const Tensor& x, int t) { return fs.fused(x, t); };
    Tensor x = sampler == eval::Sampler::ddpm
                   ? sample_chain_ddpm(pred, shape, ens.schedule, rng)
                   : sample_chain_ddim(pred, shape, ens.schedule, ddim_steps, rng);

    CollabSampleResult out;
    out.x = x;
    out.images = Tensor::zeros({N, R, R, 3});
    size_t stride = static_cast<size_t>(R) * R * 3;
    for (int n = 0; n < N; n++) {
        Tensor img = nn::x0_to_image(detail::slice_row(x, n));
        for (size_t i = 0; i < stride; i++)
            out.images.at(static_cast<size_t>(n) * stride + i) = img.at(i);
    }
    return out;
}

// Trainer knobs for the influence scorers; schedule and geometry come from
// the ensemble itself. lr = 0 is a legal no-op like in the unimodal trainer.
struct DiffuserTrainConfig {
    int steps = 1000;
    int batch = 8;
    double lr = 1e-4;
    std::string config_hash;

    static DiffuserTrainConfig from(const eval::ExperimentConfig& c) {
        DiffuserTrainConfig t;
        t.steps = c.diffuser_steps;
        t.batch = c.diffuser_batch;
        t.lr = c.diffuser_lr;
        t.config_hash = c.hash_hex();
        return t;
    }

    void validate() const {
        if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
        if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
        if (!(lr >= 0.0) || !std::isfinite(lr))
            throw std::invalid_argument("train: lr must be finite and >= 0");
    }
};

struct DiffuserTrainResult {
    std::vector<float> curve;
    std::vector<float> smoothed;
    std::vector<std::string> checkpoint_paths;
};

// Joint training of all influence scorers against the fusion objective:
// corrupt a sample, let every frozen collaborator predict the noise, blend
// with the softmaxed scorer outputs, and regress the blend onto the true
// noise. Only scorer parameters move; the collaborators are hash-checked
// before and after, and any change aborts the run.
inline DiffuserTrainResult train_dynamic_diffusers(
    CollabEnsemble& ens, const toy::FaceDataset& ds, const DiffuserTrainConfig& cfg,
    RngStream& rng, const std::string& out_dir = "",
    const std::function<void(int, float)>& on_step = {}) {
    cfg.validate();
    if (ds.count < 1) throw std::invalid_argument("train: empty dataset");
    if (ds.resolution != ens.resolution())
        throw std::invalid_argument("train: dataset is " + std::to_string(ds.resolution) +
                                    "px, ensemble expects " +
                                    std::to_string(ens.resolution()));
    std::vector<int> pool = ds.train_indices();
    if (pool.empty()) throw std::invalid_argument("train: dataset has no training entries");

    const int M = ens.modalities();
    std::vector<uint64_t> theta_before;
    for (Collaborator& c : ens.members) {
        theta_before.push_back(c.model.value_hash());
        c.model.set_trainable(false);
        c.diffuser.params().set_trainable(true);
    }

    std::vector<nn::Adam> opts(static_cast<size_t>(M), nn::Adam(cfg.lr));
    DiffuserTrainResult out;
    double ema = 0.0;
    std::string ds_hash = ds.fingerprint();

    for (int step = 1; step <= cfg.steps; step++) {
        nn::detail::Batch b =
            nn::detail::draw_batch(ds, pool, cfg.batch, ens.schedule.T(), rng);
        Tensor xt = q_sample(b.x0, b.ts, b.eps, ens.schedule);

        std::vector<nn::ConditionEmbedding> embs;
        std::vector<Tensor> eps_preds;
        {
            NoGradGuard ng;  // frozen collaborators: constants on the tape
            for (Collaborator& c : ens.members) {
                embs.push_back(nn::detail::encode_batch(c.model, ds, b.ids));
                eps_preds.push_back(c.model.predict_eps(xt, b.ts, embs.back()));
            }
        }

        for (Collaborator& c : ens.members) c.diffuser.params().zero_grad();
        Tensor inf_raw;
        for (int m = 0; m < M; m++) {
            Tensor r = raw_influence(ens.members[static_cast<size_t>(m)].diffuser, xt, b.ts,
                                     embs[static_cast<size_t>(m)]);
            inf_raw = m == 0 ? r : nn::concat_ch(inf_raw, r);
        }
        Tensor weights = nn::softmax_ch(inf_raw);
        Tensor fused = nn::fuse_influence(weights, eps_preds);
        Tensor loss = nn::mse(fused, b.eps);
        float lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
        backward(loss);
        try {
            for (int m = 0; m < M; m++)
                opts[static_cast<size_t>(m)].step(
                    ens.members[static_cast<size_t>(m)].diffuser.params());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train: diverged at step " + std::to_string(step) + " (" +
                                     e.what() + ")");
        }

        ema = (step == 1) ? lv : 0.98 * ema + 0.02 * lv;
        out.curve.push_back(lv);
        out.smoothed.push_back(static_cast<float>(ema));
        if (on_step) on_step(step, lv);
    }

    for (size_t i = 0; i < ens.members.size(); i++)
        if (ens.members[i].model.value_hash() != theta_before[i])
            throw std::logic_error("train: collaborator '" +
                                   std::string(nn::to_string(ens.members[i].model.tag())) +
                                   "' changed during scorer training");

    for (Collaborator& c : ens.members) {
        c.diffuser.meta.steps = cfg.steps;
        c.diffuser.meta.resolution = ds.resolution;
        c.diffuser.meta.timesteps = ens.schedule.T();
        c.diffuser.meta.dataset_hash = ds_hash;
        c.diffuser.meta.config_hash = cfg.config_hash;
    }

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        for (Collaborator& c : ens.members) {
            std::string path =
                out_dir + "/diffuser_" + nn::to_string(c.diffuser.tag()) + ".nta";
            save_diffuser(c.diffuser, path);
            out.checkpoint_paths.push_back(path);
        }
        std::ofstream f(out_dir + "/diffuser_curve.csv");
        if (!f) throw std::runtime_error("train: cannot write curve in '" + out_dir + "'");
        f << "step,loss,smoothed\n";
        for (size_t i = 0; i < out.curve.size(); i++)
            f << (i + 1) << "," << out.curve[i] << "," << out.smoothed[i] << "\n";
    }
    return out;
}

// One full sampling trajectory with the weight stack and decoded state
// retained at every predictor call (row 0 of the batch).
struct InfluenceTrace {
    std::vector<int> timesteps;          // visit order (descending)
    std::vector<InfluenceStack> stacks;  // one per retained step
    std::vector<Tensor> xt_images;       // [H,W,3] decode of the step input
    std::vector<std::string> modalities;
    Tensor final_image;                  // [H,W,3]

    // Mean weight of one branch at the first and last retained step — the
    // temporal trend readout (reported, not gated).
    std::pair<double, double> branch_means(int m) const {
        auto mean_of = [m](const InfluenceStack& st) {
            const Tensor& t = st.normalized[static_cast<size_t>(m)];
            double s = 0.0;
            for (size_t i = 0; i < t.numel(); i++) s += t.at(i);
            return s / static_cast<double>(t.numel());
        };
        return {mean_of(stacks.front()), mean_of(stacks.back())};
    }
};

// Sample once (batch of one) and archive the influence trajectory: the
// stack tensor, the per-step state decodes, and grayscale/color renderings
// for quick inspection. Every stored stack is partition-checked first.
inline InfluenceTrace export_influence_trace(const CollabEnsemble& ens,
                                             const BatchConditions& bc, RngStream& rng,
                                             eval::Sampler sampler, const std::string& out_dir,
                                             FuseMode mode = FuseMode::full,
                                             int ddim_steps = 50) {
    NoGradGuard ng;
    if (bc.batch() != 1)
        throw std::invalid_argument("trace: expects exactly one condition per modality");
    const int R = ens.resolution(), M = ens.modalities();
    Shape shape = {1, 3, R, R};

    InfluenceTrace tr;
    for (const Collaborator& c : ens.members) tr.modalities.push_back(nn::to_string(c.model.tag()));

    detail::FusionState fs(ens, bc, mode);
    fs.trace_t = &tr.timesteps;
    fs.trace_stacks = &tr.stacks;
    fs.trace_xt = &tr.xt_images;
    EpsPredictor pred = [&fs](const Tensor& x, int t) { return fs.fused(x, t); };
    Tensor x = sampler == eval::Sampler::ddpm
                   ? sample_chain_ddpm(pred, shape, ens.schedule, rng)
                   : sample_chain_ddim(pred, shape, ens.schedule, ddim_steps, rng);
    tr.final_image = nn::x0_to_image(detail::slice_row(x, 0));

    const size_t S = tr.stacks.size();
    for (const InfluenceStack& st : tr.stacks) st.check_partition();

    std::filesystem::create_directories(out_dir);
    io::NamedTensorArchive a;
    {
        Tensor maps = Tensor::zeros({M, static_cast<int>(S), R, R});
        size_t P = static_cast<size_t>(R) * R;
        for (size_t s = 0; s < S; s++)
            for (int m = 0; m < M; m++)
                for (size_t p = 0; p < P; p++)
                    maps.at((static_cast<size_t>(m) * S + s) * P + p) =
                        tr.stacks[s].normalized[static_cast<size_t>(m)].at(p);
        a.add_tensor("influence", maps);

        Tensor ts = Tensor::zeros({static_cast<int>(S)});
        for (size_t s = 0; s < S; s++) ts.at(s) = static_cast<float>(tr.timesteps[s]);
        a.add_tensor("timesteps", ts);

        Tensor xts = Tensor::zeros({static_cast<int>(S), R, R, 3});
        size_t stride = static_cast<size_t>(R) * R * 3;
        for (size_t s = 0; s < S; s++)
            for (size_t i = 0; i < stride; i++) xts.at(s * stride + i) = tr.xt_images[s].at(i);
        a.add_tensor("xt", xts);
        a.add_tensor("final", tr.final_image);
    }
    a.set_meta("kind", "influence-trace");
    a.set_meta("sampler", eval::to_string(sampler));
    a.set_meta("mode", to_string(mode));
    a.set_meta("steps", std::to_string(S));
    for (int m = 0; m < M; m++) {
        auto [first, last] = tr.branch_means(m);
        a.set_meta("mean_first." + tr.modalities[static_cast<size_t>(m)], std::to_string(first));
        a.set_meta("mean_last." + tr.modalities[static_cast<size_t>(m)], std::to_string(last));
    }
    a.save(out_dir + "/trace.nta");

    // A handful of evenly spaced steps as viewable images.
    size_t picks = std::min<size_t>(S, 8);
    for (size_t k = 0; k < picks; k++) {
        size_t s = picks == 1 ? 0 : k * (S - 1) / (picks - 1);
        std::string tt = std::to_string(tr.timesteps[s]);
        for (int m = 0; m < M; m++)
            io::write_pgm(out_dir + "/inf_" + tr.modalities[static_cast<size_t>(m)] + "_t" + tt +
                              ".pgm",
                          tr.stacks[s].normalized[static_cast<size_t>(m)]);
        io::write_ppm(out_dir + "/xt_t" + tt + ".ppm", tr.xt_images[s]);
    }
    io::write_ppm(out_dir + "/final.ppm", tr.final_image);
    return tr;
}

}  // namespace codiff::collab
