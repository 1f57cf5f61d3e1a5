#pragma once

#include <chrono>
#include <cmath>
#include <iostream>

#include "receler/backbone.hpp"
#include "receler/dataset.hpp"

namespace receler {

struct BackboneTrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 2e-3;
    int warmup = 100;
    double final_lr_fraction = 0.1;  // cosine decay floor
    double p_uncond = 0.1;           // condition dropout for classifier-free guidance
    uint64_t seed = 0;
    int log_every = 100;
};

// Denoising-score training of the toy backbone on a labeled corpus.
// Deterministic per (seed, config); aborts on non-finite loss.
inline void train_backbone(DiffusionBackbone& model, const Corpus& corpus, const BackboneTrainConfig& cfg,
                           std::ostream* log = nullptr) {
    if (corpus.image_size != model.layout().image_size)
        throw std::invalid_argument("train_backbone: corpus resolution does not match the model");
    if (!(corpus.vocab == model.vocab()))
        throw std::invalid_argument("train_backbone: corpus vocabulary does not match the model");

    std::vector<int> train_idx;
    for (int i = 0; i < corpus.num_images(); ++i)
        if (corpus.split[static_cast<size_t>(i)] == 0) train_idx.push_back(i);
    if (train_idx.empty()) throw std::invalid_argument("train_backbone: empty training split");

    const int T = model.schedule().num_steps();
    const int S = model.layout().image_size;
    const int64_t numel = static_cast<int64_t>(S) * S * 3;
    Adam opt(AdamConfig{.lr = cfg.lr});

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, "backbone-step", static_cast<uint64_t>(step)));

        Tensor x_t(Shape{cfg.batch, S, S, 3});
        Tensor noise(Shape{cfg.batch, S, S, 3});
        std::vector<int> ts(static_cast<size_t>(cfg.batch));
        std::vector<std::vector<int>> prompts(static_cast<size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) {
            const int i = train_idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(train_idx.size()) - 1))];
            const int t = static_cast<int>(rng.uniform_int(1, T));
            ts[static_cast<size_t>(b)] = t;
            const double sa = std::sqrt(model.schedule().alpha_bar(t));
            const double ss = std::sqrt(1.0 - model.schedule().alpha_bar(t));
            const double* x0 = corpus.images.data() + static_cast<int64_t>(i) * numel;
            double* px = x_t.data() + b * numel;
            double* pn = noise.data() + b * numel;
            for (int64_t e = 0; e < numel; ++e) {
                pn[e] = rng.normal();
                px[e] = sa * x0[e] + ss * pn[e];
            }
            if (rng.uniform() >= cfg.p_uncond) prompts[static_cast<size_t>(b)] = corpus.prompts[static_cast<size_t>(i)];
        }

        // warmup then cosine decay
        double lr = cfg.lr;
        if (step < cfg.warmup) {
            lr = cfg.lr * (step + 1) / cfg.warmup;
        } else {
            const double u = static_cast<double>(step - cfg.warmup) / std::max(1, cfg.steps - cfg.warmup);
            lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(u * M_PI)));
        }
        opt.set_lr(lr);

        const auto t0 = std::chrono::steady_clock::now();
        Graph g;
        ContextBatch ctx = model.make_context_batched(g, prompts, /*train_embedder=*/true);
        NoisePrediction pred = model.forward(g, g.constant(x_t), ts, ctx, nullptr, /*train_params=*/true);
        Var loss = mse_const(pred.eps, noise);
        if (!loss.value().all_finite())
            throw std::runtime_error("train_backbone: loss diverged (non-finite) at step " + std::to_string(step));
        model.params().zero_grads();
        g.backward(loss);
        opt.step(model.params().list());
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

        if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            Json rec{{"step", step}, {"loss", loss.value()[0]}, {"lr", lr}, {"ms", ms}};
            *log << rec.dump() << "\n" << std::flush;
        }
    }
}

}  // namespace receler
