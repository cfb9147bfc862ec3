#pragma once

// Editing real images with the fused sampler. Starting from a source image
// and an edited set of conditions, each collaborator is adapted in two
// stages: first the condition embedding is optimized so the frozen denoiser
// reconstructs the source (capturing identity), then a copy of the denoiser
// is lightly fine-tuned against that embedding. Blending the optimized
// embedding with the embedding of the edited conditions trades identity
// against edit strength, and the fused chain is re-run with the adapted
// copies under the original influence scorers. The originals — denoisers
// and scorers alike — come out of a session byte-identical.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "collab.hpp"

namespace codiff::edit {

// ---------------------------------------------------------------------------
// Knobs

struct EditConfig {
    float alpha = 0.7f;         // blend weight toward the edited conditions
    int embed_steps = 400;      // condition-embedding optimization steps
    double embed_lr = 1e-3;
    int finetune_steps = 500;   // denoiser fine-tune steps (on a copy)
    double finetune_lr = 1e-5;

    static EditConfig from(const eval::ExperimentConfig& c) {
        EditConfig e;
        e.alpha = static_cast<float>(c.edit_alpha);
        e.embed_steps = c.edit_embed_steps;
        e.embed_lr = c.edit_embed_lr;
        e.finetune_steps = c.edit_finetune_steps;
        e.finetune_lr = c.edit_finetune_lr;
        return e;
    }

    void validate() const {
        if (!(alpha >= 0.0f && alpha <= 1.0f))
            throw std::invalid_argument("edit: alpha must lie in [0,1]");
        if (embed_steps < 0 || finetune_steps < 0)
            throw std::invalid_argument("edit: step counts cannot be negative");
        for (double lr : {embed_lr, finetune_lr})
            if (!(std::isfinite(lr) && lr >= 0))
                throw std::invalid_argument("edit: learning rates must be finite and >= 0");
    }
};

namespace detail {

// Value copy of every parameter, name by name. Shapes are fixed by the
// config, so a mismatch can only mean the two sets were built differently.
inline void copy_values(const nn::ParamSet& src, nn::ParamSet& dst) {
    for (const auto& [name, t] : src.items) {
        Tensor& d = dst.get(name);
        if (d.numel() != t.numel())
            throw std::logic_error("edit: parameter '" + name + "' changed shape between models");
        for (size_t i = 0; i < t.numel(); i++) d.at(i) = t.at(i);
    }
}

// [C,H,W] -> [1,C,H,W] view onto the same storage.
inline Tensor batchify(const Tensor& chw) {
    Tensor b = chw.detached();
    Shape s = {1};
    for (int i = 0; i < chw.rank(); i++) s.push_back(chw.dim(i));
    b.shape = s;
    return b;
}

inline uint64_t tensor_hash(const Tensor& t) {
    return io::fnv1a64(reinterpret_cast<const uint8_t*>(t.ptr()), t.numel() * sizeof(float));
}

inline void require_single_x0(const Tensor& x0) {
    if (x0.rank() != 4 || x0.dim(0) != 1 || x0.dim(1) != 3)
        throw std::invalid_argument("edit: expected a single [1,3,H,W] input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage one: condition-embedding optimization

// Gradient-descends a copy of `target`'s token matrix so that the frozen
// denoiser reconstructs `x0` from noised versions of it; the denoiser's own
// parameters receive no updates (they are flagged untrainable for good and
// hash-checked). With steps == 0 the result is simply a value copy of the
// target embedding. Draws per step: one timestep, then one noise tensor.
inline nn::ConditionEmbedding optimize_condition(nn::EpsModel& m, const Tensor& x0,
                                                 const nn::ConditionEmbedding& target,
                                                 const Schedule& sched, int steps, double lr,
                                                 RngStream& rng) {
    if (steps < 0) throw std::invalid_argument("edit: step count cannot be negative");
    if (!(std::isfinite(lr) && lr >= 0))
        throw std::invalid_argument("edit: learning rate must be finite and >= 0");
    detail::require_single_x0(x0);
    if (target.batch() != 1)
        throw std::invalid_argument("edit: expected a single condition embedding");
    target.validate();
    if (target.tag != m.tag())
        throw std::invalid_argument(std::string("edit: ") + nn::to_string(m.tag()) +
                                    " model paired with a " + nn::to_string(target.tag) +
                                    " embedding");

    uint64_t theta = m.value_hash();
    m.set_trainable(false);  // the denoiser is a frozen artifact from here on

    nn::ParamSet ps;
    ps.add("tokens", target.tokens.clone());
    nn::ConditionEmbedding c{target.tag, ps.get("tokens")};

    nn::Adam opt(lr);
    for (int step = 1; step <= steps; step++) {
        int t = 1 + rng.uniform_int(sched.T());
        Tensor eps = rng.normal_tensor(x0.shape);
        Tensor xt = q_sample(x0, t, eps, sched);

        ps.zero_grad();
        Tensor loss = mse(m.predict_eps(xt, t, c), eps);
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("edit: embedding optimization diverged at step " +
                                     std::to_string(step));
        loss.backward();
        try {
            opt.step(ps);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("edit: embedding optimization diverged at step " +
                                     std::to_string(step) + " (" + e.what() + ")");
        }
    }

    if (m.value_hash() != theta)
        throw std::logic_error("edit: denoiser changed during condition optimization");
    return nn::ConditionEmbedding{target.tag, ps.get("tokens").detached()};
}

// ---------------------------------------------------------------------------
// Stage two: denoiser fine-tune on a copy

// Fresh model with the same architecture and `src`'s exact parameter values.
inline nn::EpsModel clone_model(const nn::EpsModel& src) {
    RngStream scratch(0);  // every drawn value is overwritten below
    nn::EpsModel dst(src.tag(), src.unet.cfg, scratch);
    detail::copy_values(src.unet.params, dst.unet.params);
    detail::copy_values(src.encoder_params(), dst.encoder_params());
    dst.meta = src.meta;
    return dst;
}

// Returns a fine-tuned copy of `src`; the original is read-only and comes
// back hash-identical. Only the UNet weights of the copy move — the
// embedding is a fixed input here, so the encoder has nothing to learn.
// With steps == 0 the copy is value-identical to the source. Per-step rng
// draws match optimize_condition: one timestep, then one noise tensor.
inline nn::EpsModel finetune_model(const nn::EpsModel& src, const Tensor& x0,
                                   const nn::ConditionEmbedding& c_opt, const Schedule& sched,
                                   int steps, double lr, RngStream& rng) {
    if (steps < 0) throw std::invalid_argument("edit: step count cannot be negative");
    if (!(std::isfinite(lr) && lr >= 0))
        throw std::invalid_argument("edit: learning rate must be finite and >= 0");
    detail::require_single_x0(x0);
    if (c_opt.batch() != 1)
        throw std::invalid_argument("edit: expected a single condition embedding");
    if (c_opt.tag != src.tag())
        throw std::invalid_argument(std::string("edit: ") + nn::to_string(src.tag()) +
                                    " model paired with a " + nn::to_string(c_opt.tag) +
                                    " embedding");

    uint64_t before = src.value_hash();
    nn::EpsModel tuned = clone_model(src);
    tuned.unet.params.set_trainable(true);
    tuned.encoder_params().set_trainable(false);
    nn::ConditionEmbedding c{c_opt.tag, c_opt.tokens.detached()};

    nn::Adam opt(lr);
    for (int step = 1; step <= steps; step++) {
        int t = 1 + rng.uniform_int(sched.T());
        Tensor eps = rng.normal_tensor(x0.shape);
        Tensor xt = q_sample(x0, t, eps, sched);

        tuned.zero_grad();
        Tensor loss = mse(tuned.predict_eps(xt, t, c), eps);
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("edit: fine-tune diverged at step " + std::to_string(step));
        loss.backward();
        try {
            opt.step(tuned.unet.params);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("edit: fine-tune diverged at step " + std::to_string(step) +
                                     " (" + e.what() + ")");
        }
    }

    if (src.value_hash() != before)
        throw std::logic_error("edit: source denoiser changed during fine-tune");
    return tuned;
}

// ---------------------------------------------------------------------------
// Embedding blend

// alpha * target + (1 - alpha) * opt, token by token, accumulated in double.
// alpha = 1 keeps the edited conditions outright, alpha = 0 keeps the pure
// identity embedding; both endpoints reproduce their input exactly.
inline nn::ConditionEmbedding interpolate_condition(const nn::ConditionEmbedding& target,
                                                    const nn::ConditionEmbedding& opt,
                                                    double alpha) {
    if (target.tag != opt.tag)
        throw std::invalid_argument("edit: cannot blend embeddings of different modalities");
    if (target.tokens.shape != opt.tokens.shape)
        throw std::invalid_argument("edit: embeddings disagree on token shape");
    if (!(std::isfinite(alpha) && alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("edit: alpha must lie in [0,1]");
    target.validate();
    opt.validate();

    Tensor out = Tensor::zeros(target.tokens.shape);
    for (size_t i = 0; i < out.numel(); i++)
        out.at(i) = static_cast<float>(alpha * static_cast<double>(target.tokens.at(i)) +
                                       (1.0 - alpha) * static_cast<double>(opt.tokens.at(i)));
    return nn::ConditionEmbedding{target.tag, out};
}

// ---------------------------------------------------------------------------
// Sessions

// Everything prepared for one collaborator: the embedding of the edited
// conditions, the optimized identity embedding, their blend, and the
// fine-tuned denoiser copy that samples in the original's place.
struct PreparedModality {
    nn::ConditionEmbedding target;
    nn::ConditionEmbedding opt;
    nn::ConditionEmbedding blended;
    nn::EpsModel tuned;
};

struct EditSession {
    Tensor x_input;  // [1,3,R,R] signal encoding of the source image
    EditConfig cfg;
    uint64_t seed = 0;  // recorded by run_edit_session for the manifest
    std::vector<PreparedModality> prepared;
    std::vector<uint64_t> source_hashes;  // collaborators at preparation time
    std::vector<uint64_t> scorer_hashes;  // influence scorers, frozen throughout
};

// Runs both adaptation stages for every collaborator, in member order, from
// one rng stream (embedding first, then fine-tune, per member). The
// ensemble itself is read-only in effect: flags may toggle, but parameter
// values are hash-checked unchanged.
inline EditSession prepare_session(collab::CollabEnsemble& ens, const Tensor& input_image,
                                   const collab::BatchConditions& targets, const EditConfig& cfg,
                                   RngStream& rng) {
    cfg.validate();
    if (targets.batch() != 1)
        throw std::invalid_argument("edit: sessions edit one image at a time");
    const int R = ens.resolution();
    if (input_image.rank() != 3 || input_image.dim(0) != R || input_image.dim(1) != R ||
        input_image.dim(2) != 3)
        throw std::invalid_argument("edit: input image must be [" + std::to_string(R) + "," +
                                    std::to_string(R) + ",3]");

    EditSession s;
    s.cfg = cfg;
    s.x_input = detail::batchify(nn::image_to_x0(input_image)).clone();
    for (const collab::Collaborator& c : ens.members) {
        s.source_hashes.push_back(c.model.value_hash());
        s.scorer_hashes.push_back(c.diffuser.params().value_hash());
    }

    for (collab::Collaborator& c : ens.members) {
        PreparedModality pm;
        {
            NoGradGuard ng;
            pm.target = collab::detail::encode_for(c.model, targets);
        }
        pm.opt = optimize_condition(c.model, s.x_input, pm.target, ens.schedule, cfg.embed_steps,
                                    cfg.embed_lr, rng);
        pm.tuned = finetune_model(c.model, s.x_input, pm.opt, ens.schedule, cfg.finetune_steps,
                                  cfg.finetune_lr, rng);
        pm.blended = interpolate_condition(pm.target, pm.opt, static_cast<double>(cfg.alpha));
        s.prepared.push_back(std::move(pm));
    }

    for (size_t i = 0; i < ens.members.size(); i++) {
        std::string who = nn::to_string(ens.members[i].model.tag());
        if (ens.members[i].model.value_hash() != s.source_hashes[i])
            throw std::logic_error("edit: collaborator '" + who +
                                   "' changed during session preparation");
        if (ens.members[i].diffuser.params().value_hash() != s.scorer_hashes[i])
            throw std::logic_error("edit: influence scorer '" + who +
                                   "' changed during session preparation");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Fused editing pass

struct EditResult {
    Tensor x;      // [1,3,R,R] final chain state
    Tensor image;  // [R,R,3] decoded, clamped to [0,1]
};

// Re-runs the fused reverse chain with the session's fine-tuned denoisers
// and blended embeddings under the ensemble's original influence scorers.
// The scorers are verified untouched on the way in and on the way out.
inline EditResult collaborative_edit(const collab::CollabEnsemble& ens, const EditSession& s,
                                     RngStream& rng, eval::Sampler sampler, int ddim_steps = 50) {
    const size_t M = ens.members.size();
    if (s.prepared.size() != M || s.scorer_hashes.size() != M)
        throw std::invalid_argument("edit: session was prepared for a different ensemble");
    for (size_t i = 0; i < M; i++) {
        std::string who = nn::to_string(ens.members[i].model.tag());
        if (s.prepared[i].tuned.tag() != ens.members[i].model.tag())
            throw std::invalid_argument("edit: session modalities do not match the ensemble");
        if (ens.members[i].diffuser.params().value_hash() != s.scorer_hashes[i])
            throw std::logic_error("edit: influence scorer '" + who +
                                   "' drifted since session preparation");
    }

    NoGradGuard ng;
    const int R = ens.resolution();
    std::vector<const nn::EpsModel*> models;
    std::vector<const DynamicDiffuser*> scorers;
    std::vector<nn::ConditionEmbedding> embs;
    for (size_t i = 0; i < M; i++) {
        models.push_back(&s.prepared[i].tuned);
        scorers.push_back(&ens.members[i].diffuser);
        embs.push_back(s.prepared[i].blended);
    }
    collab::detail::FusionState fs(std::move(models), std::move(scorers), std::move(embs),
                                   collab::FuseMode::full);
    EpsPredictor pred = [&fs](const Tensor& x, int t) { return fs.fused(x, t); };
    Shape shape = {1, 3, R, R};
    Tensor x = sampler == eval::Sampler::ddpm
                   ? sample_chain_ddpm(pred, shape, ens.schedule, rng)
                   : sample_chain_ddim(pred, shape, ens.schedule, ddim_steps, rng);

    for (size_t i = 0; i < M; i++)
        if (ens.members[i].diffuser.params().value_hash() != s.scorer_hashes[i])
            throw std::logic_error("edit: influence scorer '" +
                                   std::string(nn::to_string(ens.members[i].model.tag())) +
                                   "' changed during editing");

    EditResult out;
    out.x = x;
    out.image = nn::x0_to_image(collab::detail::slice_row(x, 0));
    return out;
}

// ---------------------------------------------------------------------------
// Session records

// Plain-text record of what one edit run did: knobs, seed, and the hashes
// that pin down exactly which parameters took part.
inline void write_session_manifest(const EditSession& s, const collab::CollabEnsemble& ens,
                                   const std::string& path) {
    if (s.prepared.size() != ens.members.size())
        throw std::invalid_argument("edit: session was prepared for a different ensemble");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("edit: cannot write manifest '" + path + "'");
    f << "kind=edit-session\n";
    f << "alpha=" << s.cfg.alpha << "\n";
    f << "embed_steps=" << s.cfg.embed_steps << "\n";
    f << "embed_lr=" << s.cfg.embed_lr << "\n";
    f << "finetune_steps=" << s.cfg.finetune_steps << "\n";
    f << "finetune_lr=" << s.cfg.finetune_lr << "\n";
    f << "seed=" << s.seed << "\n";
    f << "input_hash=" << io::hex64(detail::tensor_hash(s.x_input)) << "\n";
    for (size_t i = 0; i < s.prepared.size(); i++) {
        std::string who = nn::to_string(ens.members[i].model.tag());
        f << "source." << who << "=" << io::hex64(s.source_hashes[i]) << "\n";
        f << "tuned." << who << "=" << io::hex64(s.prepared[i].tuned.value_hash()) << "\n";
        f << "scorer." << who << "=" << io::hex64(s.scorer_hashes[i]) << "\n";
    }
    if (!f) throw std::runtime_error("edit: failed writing manifest '" + path + "'");
}

struct EditRunResult {
    EditSession session;
    EditResult result;
    std::vector<std::string> files;
};

// One complete edit from a fixed seed: prepare, sample, and (when out_dir
// is given) write the source image, the edited image, and the manifest.
inline EditRunResult run_edit_session(collab::CollabEnsemble& ens, const Tensor& input_image,
                                      const collab::BatchConditions& targets,
                                      const EditConfig& cfg, uint64_t seed, eval::Sampler sampler,
                                      int ddim_steps = 50, const std::string& out_dir = "") {
    RngStream rng(seed);
    EditRunResult run;
    run.session = prepare_session(ens, input_image, targets, cfg, rng);
    run.session.seed = seed;
    run.result = collaborative_edit(ens, run.session, rng, sampler, ddim_steps);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        io::write_ppm(out_dir + "/input.ppm", input_image);
        io::write_ppm(out_dir + "/edited.ppm", run.result.image);
        write_session_manifest(run.session, ens, out_dir + "/session.txt");
        run.files = {out_dir + "/input.ppm", out_dir + "/edited.ppm", out_dir + "/session.txt"};
    }
    return run;
}

}  // namespace codiff::edit
