#pragma once

#include <chrono>
#include <iostream>
#include <memory>
#include <optional>

#include "receler/adv_prompt.hpp"
#include "receler/backbone.hpp"
#include "receler/core/image.hpp"
#include "receler/eraser.hpp"
#include "receler/losses.hpp"
#include "receler/masks.hpp"

namespace receler {

// Alternating schedule: each round runs `eraser_steps_per_round` eraser
// updates, then `adversary_steps_per_round` soft-prompt updates against the
// frozen eraser. adversary_steps_per_round = 0 disables the adversary; with
// lambda_reg = 0 as well, training reduces to the plain negative-guidance
// objective.
struct TrainSchedule {
    int rounds = 60;
    int eraser_steps_per_round = 5;
    int adversary_steps_per_round = 20;
    double lambda_reg = 1.0;
    double tau = 0.5;
    int adv_tokens = 4;  // soft-prompt rows k
    int batch = 4;
    int sample_ddim_steps = 10;  // chain resolution when drawing x_t
    double sample_cfg = 3.0;     // guidance while drawing x_t
    double t_band_lo = 0.2;      // x_t timestep band, fractions of T
    double t_band_hi = 0.8;
    AdamConfig eraser_opt{.lr = 1e-3};
    AdamConfig adv_opt{.lr = 5e-2};
    uint64_t seed = 0;
    int grid_every = 0;  // rounds between sample grids; 0 = off

    void validate() const {
        if (rounds < 1) throw std::invalid_argument("TrainSchedule: rounds must be >= 1");
        if (eraser_steps_per_round < 1)
            throw std::invalid_argument("TrainSchedule: eraser_steps_per_round must be >= 1");
        if (adversary_steps_per_round < 0)
            throw std::invalid_argument("TrainSchedule: adversary_steps_per_round must be >= 0");
        if (adversary_steps_per_round > 0 && adv_tokens < 1)
            throw std::invalid_argument("TrainSchedule: adv_tokens must be >= 1 when the adversary is on");
        if (batch < 1) throw std::invalid_argument("TrainSchedule: batch must be >= 1");
        if (!(0.0 <= t_band_lo && t_band_lo < t_band_hi && t_band_hi <= 1.0))
            throw std::invalid_argument("TrainSchedule: bad timestep band");
        if (lambda_reg < 0.0) throw std::invalid_argument("TrainSchedule: lambda_reg must be non-negative");
        if (sample_ddim_steps < 1) throw std::invalid_argument("TrainSchedule: sample_ddim_steps must be >= 1");
    }

    Json to_json() const {
        return Json{{"rounds", rounds},
                    {"eraser_steps_per_round", eraser_steps_per_round},
                    {"adversary_steps_per_round", adversary_steps_per_round},
                    {"lambda_reg", lambda_reg},
                    {"tau", tau},
                    {"adv_tokens", adv_tokens},
                    {"batch", batch},
                    {"sample_ddim_steps", sample_ddim_steps},
                    {"sample_cfg", sample_cfg},
                    {"t_band_lo", t_band_lo},
                    {"t_band_hi", t_band_hi},
                    {"eraser_lr", eraser_opt.lr},
                    {"adv_lr", adv_opt.lr},
                    {"seed", seed}};
    }
};

struct RecelerResult {
    std::shared_ptr<EraserSet> erasers;
    std::optional<AdvPrompt> adv;
};

namespace detail {

// Draw a common timestep in the configured band.
inline int draw_band_t(Rng& rng, int T, double lo, double hi) {
    const int t_lo = std::max(1, static_cast<int>(std::lround(lo * T)));
    const int t_hi = std::min(T, static_cast<int>(std::lround(hi * T)));
    return static_cast<int>(rng.uniform_int(t_lo, std::max(t_lo, t_hi)));
}

// Batch of partially denoised latents at timestep t, produced by the current
// erased model conditioned on the concept.
inline Tensor draw_xt(const DiffusionBackbone& model, const EraserStack* erasers,
                      const std::vector<int>& prompt, const Tensor* adv_suffix, int batch, int t,
                      int ddim_steps, double cfg, uint64_t seed) {
    GuidanceConfig gc;
    gc.cfg_scale = cfg;
    gc.ddim_steps = ddim_steps;
    std::vector<uint64_t> seeds;
    for (int b = 0; b < batch; ++b) seeds.push_back(derive_seed(seed, "xt", static_cast<uint64_t>(b)));
    return model.sample_batch_uniform(gc, prompt, adv_suffix, erasers, seeds, t);
}

// Frozen-model erase target and per-sample concept masks at (x_t, t).
struct FrozenTargets {
    Tensor eps_e;  // negatively guided target
    Tensor eps_m;  // conditional prediction of the frozen model (malicious target)
    std::vector<ConceptMask> masks;
};

inline FrozenTargets frozen_targets(const DiffusionBackbone& model, const Tensor& x_t, int t,
                                    const std::vector<int>& prompt, double eta, double tau) {
    Graph g(false);
    auto uncond = model.predict_noise(g, x_t, t, std::nullopt);
    auto cond = model.predict_noise(g, x_t, t, prompt);
    FrozenTargets ft;
    ft.eps_m = cond.eps.value();
    ft.eps_e = negatively_guided_target(uncond.eps.value(), cond.eps.value(), eta);
    std::vector<int> positions;
    for (size_t i = 0; i < prompt.size(); ++i) positions.push_back(static_cast<int>(i + 1));
    ft.masks = extract_concept_masks_batch(cond.attention, positions, tau, model.mid_layers());
    return ft;
}

}  // namespace detail

// Eraser learning with concept-localized regularization and alternating
// adversarial soft-prompt optimization.
inline RecelerResult train_receler(const DiffusionBackbone& model, const std::vector<std::string>& concept_tokens,
                                   const TrainSchedule& sched, const GuidanceConfig& guidance,
                                   std::ostream* log = nullptr, const std::filesystem::path* viz_dir = nullptr) {
    sched.validate();
    guidance.validate(model.schedule().num_steps());
    if (concept_tokens.empty()) throw std::invalid_argument("train_receler: concept must be non-empty");
    const std::vector<int> prompt = model.vocab().encode(concept_tokens);
    const int T = model.schedule().num_steps();

    RecelerResult res;
    res.erasers = std::make_shared<EraserSet>(concept_tokens, model.attn_layers(), model.manifest_hash(),
                                              derive_seed(sched.seed, "eraser-params"));
    Adam eraser_opt(sched.eraser_opt);
    Adam adv_opt(sched.adv_opt);
    ParamStore adv_store;
    Parameter* adv_param = nullptr;  // created at the first adversary phase

    const bool use_adv = sched.adversary_steps_per_round > 0;
    int global_step = 0;

    auto emit = [&](Json rec) {
        if (log) *log << rec.dump() << "\n" << std::flush;
    };

    for (int round = 0; round < sched.rounds; ++round) {
        // ---- eraser phase: adversary frozen ----
        res.erasers->train_mode = true;
        for (int step = 0; step < sched.eraser_steps_per_round; ++step, ++global_step) {
            const auto t0 = std::chrono::steady_clock::now();
            Rng rng(derive_seed(sched.seed, "erase-step", static_cast<uint64_t>(global_step)));
            const int t = detail::draw_band_t(rng, T, sched.t_band_lo, sched.t_band_hi);
            const Tensor x_t =
                detail::draw_xt(model, res.erasers.get(), prompt, nullptr, sched.batch, t,
                                sched.sample_ddim_steps, sched.sample_cfg,
                                derive_seed(sched.seed, "erase-xt", static_cast<uint64_t>(global_step)));
            const auto targets = detail::frozen_targets(model, x_t, t, prompt, guidance.eta, sched.tau);

            Graph g;
            ContextBatch ctx = model.make_context(g, sched.batch, prompt);
            NoisePrediction pred = model.forward(g, g.constant(x_t), {t}, ctx, res.erasers.get());
            Var l_erase = erase_loss(pred.eps, targets.eps_e);
            Var l_reg;
            Var total = l_erase;
            if (sched.lambda_reg > 0.0) {
                l_reg = reg_loss(pred.eraser_outputs, targets.masks);
                total = add(total, scale(l_reg, sched.lambda_reg));
            }
            if (adv_param) {
                // keep erased content erased under the current adversarial prompt
                ContextBatch ctx_adv = model.make_context(g, sched.batch, prompt, g.constant(adv_param->value));
                NoisePrediction pred_adv = model.forward(g, g.constant(x_t), {t}, ctx_adv, res.erasers.get());
                Var branch = erase_loss(pred_adv.eps, targets.eps_e);
                if (sched.lambda_reg > 0.0)
                    branch = add(branch, scale(reg_loss(pred_adv.eraser_outputs, targets.masks), sched.lambda_reg));
                total = scale(add(total, branch), 0.5);
            }
            if (!total.value().all_finite())
                throw std::runtime_error("train_receler: eraser loss diverged at step " +
                                         std::to_string(global_step));
            res.erasers->params().zero_grads();
            g.backward(total);
            eraser_opt.step(res.erasers->params().list());

            emit(Json{{"phase", "erase"},
                      {"round", round},
                      {"step", global_step},
                      {"t", t},
                      {"loss_erase", l_erase.value()[0]},
                      {"loss_reg", l_reg.defined() ? l_reg.value()[0] : 0.0},
                      {"total", total.value()[0]},
                      {"ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                                 .count()}});
        }
        res.erasers->train_mode = false;

        // ---- adversary phase: eraser frozen, soft prompt learns ----
        if (use_adv) {
            if (!adv_param) {
                Rng rng(derive_seed(sched.seed, "adv-init"));
                adv_param = &adv_store.add(
                    "e_adv", Tensor::randn({sched.adv_tokens, model.layout().embed_dim}, rng, 0.02));
            }
            Rng rng(derive_seed(sched.seed, "adv-round", static_cast<uint64_t>(round)));
            const int t = detail::draw_band_t(rng, T, sched.t_band_lo, sched.t_band_hi);
            const Tensor x_t =
                detail::draw_xt(model, res.erasers.get(), prompt, nullptr, sched.batch, t,
                                sched.sample_ddim_steps, sched.sample_cfg,
                                derive_seed(sched.seed, "adv-xt", static_cast<uint64_t>(round)));
            Tensor eps_m;
            {
                Graph g(false);
                eps_m = model.predict_noise(g, x_t, t, prompt).eps.value();
            }
            for (int j = 0; j < sched.adversary_steps_per_round; ++j) {
                const auto t0 = std::chrono::steady_clock::now();
                Graph g;
                Var adv = param_var(g, *adv_param, true);
                ContextBatch ctx = model.make_context(g, sched.batch, prompt, adv);
                NoisePrediction pred = model.forward(g, g.constant(x_t), {t}, ctx, res.erasers.get());
                Var loss = adv_loss(pred.eps, eps_m);
                if (!loss.value().all_finite())
                    throw std::runtime_error("train_receler: adversary loss diverged in round " +
                                             std::to_string(round));
                adv_store.zero_grads();
                g.backward(loss);
                adv_opt.step(adv_store.list());
                emit(Json{{"phase", "adv"},
                          {"round", round},
                          {"adv_step", j},
                          {"t", t},
                          {"loss_adv", loss.value()[0]},
                          {"ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                                     .count()}});
            }
        }

        if (viz_dir && sched.grid_every > 0 &&
            (round % sched.grid_every == sched.grid_every - 1 || round + 1 == sched.rounds)) {
            GuidanceConfig gc = guidance;
            std::vector<uint64_t> seeds;
            for (int i = 0; i < 6; ++i) seeds.push_back(derive_seed(sched.seed, "grid", static_cast<uint64_t>(i)));
            Tensor grid = model.sample_batch_uniform(gc, prompt, nullptr, res.erasers.get(), seeds);
            write_png(*viz_dir / ("round_" + std::to_string(round) + ".png"), make_grid(grid, 6));
        }
    }

    if (adv_param) {
        AdvPrompt p;
        p.concept_tokens = concept_tokens;
        p.e_adv = adv_param->value;
        res.adv = std::move(p);
    }
    return res;
}

}  // namespace receler
