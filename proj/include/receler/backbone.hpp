#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "receler/core/manifest.hpp"
#include "receler/core/npy.hpp"
#include "receler/core/ops.hpp"
#include "receler/core/params.hpp"
#include "receler/schedule.hpp"
#include "receler/vocab.hpp"

namespace receler {

#ifndef RECELER_VERSION
#define RECELER_VERSION "0.0.0-dev"
#endif

struct GuidanceConfig {
    double eta = 1.0;        // negative-guidance strength when building erase targets
    double cfg_scale = 7.5;  // classifier-free guidance at sampling time
    int ddim_steps = 50;

    void validate(int num_train_steps) const {
        if (eta < 0.0) throw std::invalid_argument("GuidanceConfig: eta must be non-negative");
        if (cfg_scale < 0.0) throw std::invalid_argument("GuidanceConfig: cfg_scale must be non-negative");
        if (ddim_steps < 1) throw std::invalid_argument("GuidanceConfig: ddim_steps must be positive");
        if (ddim_steps > num_train_steps)
            throw std::invalid_argument("GuidanceConfig: ddim_steps exceeds the training schedule length");
    }

    Json to_json() const {
        return Json{{"eta", eta}, {"cfg_scale", cfg_scale}, {"ddim_steps", ddim_steps}};
    }
    static GuidanceConfig from_json(const Json& j) {
        GuidanceConfig g;
        g.eta = j.value("eta", g.eta);
        g.cfg_scale = j.value("cfg_scale", g.cfg_scale);
        g.ddim_steps = j.value("ddim_steps", g.ddim_steps);
        return g;
    }
};

// One cross-attention site inside the U-Net.
struct AttnLayerInfo {
    int index;     // stable 1-based id in forward order
    int size;      // spatial resolution (square)
    int channels;  // feature width at this site
};

// Anything that can contribute residual corrections after cross-attention
// layers. Implemented by EraserSet and CompositeEraser.
class EraserStack {
public:
    virtual ~EraserStack() = default;
    // Residual output o for layer `index` given the layer output h (B, HW, C).
    virtual Var output(Graph& g, int index, const Var& h) const = 0;
    virtual void check_compatible(const std::vector<AttnLayerInfo>& layers) const = 0;
};

struct NoisePrediction {
    Var eps;                          // (B, H, W, C)
    std::map<int, Tensor> attention;  // layer index -> (B, HW, n_ctx), head-averaged
    std::map<int, Var> eraser_outputs;
};

// Embedded conditioning rows shared by a forward pass. Row 0 is always the
// learned null-context vector; an empty prompt therefore still attends to
// exactly one row.
struct ContextBatch {
    Var rows;                // (B, n, embed_dim)
    std::vector<int> valid;  // real rows per item
    std::vector<int> concept_positions;  // context rows holding the prompt's tokens (uniform prompts only)
};

struct UNetLayout {
    int image_size = 32;
    int image_channels = 3;
    int base_channels = 16;
    std::vector<int> channel_mult = {1, 2, 3};
    int embed_dim = 32;
    int heads = 4;
    int time_dim = 64;
    int norm_groups = 8;

    void validate() const {
        if (channel_mult.size() != 3)
            throw std::invalid_argument("UNetLayout: exactly three resolution levels are supported");
        if (image_size % 4 != 0) throw std::invalid_argument("UNetLayout: image_size must be divisible by 4");
        for (int m : channel_mult) {
            const int c = base_channels * m;
            if (c % norm_groups || c % heads)
                throw std::invalid_argument("UNetLayout: channel widths must divide by norm_groups and heads");
        }
        if (time_dim % 2) throw std::invalid_argument("UNetLayout: time_dim must be even");
    }

    int channels(int level) const { return base_channels * channel_mult[static_cast<size_t>(level)]; }

    Json to_json() const {
        return Json{{"image_size", image_size},     {"image_channels", image_channels},
                    {"base_channels", base_channels}, {"channel_mult", channel_mult},
                    {"embed_dim", embed_dim},         {"heads", heads},
                    {"time_dim", time_dim},           {"norm_groups", norm_groups}};
    }
    static UNetLayout from_json(const Json& j) {
        UNetLayout l;
        l.image_size = j.at("image_size").get<int>();
        l.image_channels = j.at("image_channels").get<int>();
        l.base_channels = j.at("base_channels").get<int>();
        l.channel_mult = j.at("channel_mult").get<std::vector<int>>();
        l.embed_dim = j.at("embed_dim").get<int>();
        l.heads = j.at("heads").get<int>();
        l.time_dim = j.at("time_dim").get<int>();
        l.norm_groups = j.at("norm_groups").get<int>();
        l.validate();
        return l;
    }
};

// Conditional pixel-space denoiser: a small three-level U-Net with
// cross-attention into learned token embeddings at every resolution, plus
// the noise schedule and DDIM sampling. Immutable during inference; training
// code mutates parameters through the ParamStore.
class DiffusionBackbone {
public:
    DiffusionBackbone(UNetLayout layout, NoiseSchedule schedule, Vocabulary vocab, uint64_t init_seed)
        : layout_(std::move(layout)), schedule_(std::move(schedule)), vocab_(std::move(vocab)), seed_(init_seed) {
        layout_.validate();
        build(init_seed);
    }

    DiffusionBackbone(const DiffusionBackbone&) = delete;
    DiffusionBackbone& operator=(const DiffusionBackbone&) = delete;
    DiffusionBackbone(DiffusionBackbone&&) = default;
    DiffusionBackbone& operator=(DiffusionBackbone&&) = default;

    const UNetLayout& layout() const { return layout_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Vocabulary& vocab() const { return vocab_; }
    const std::vector<AttnLayerInfo>& attn_layers() const { return attn_layers_; }
    // mid-layer indices: cross-attention sites at resolution image_size/4
    const std::vector<int>& mid_layers() const { return mid_layers_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    uint64_t init_seed() const { return seed_; }

    size_t unet_param_count() const { return params_.total_count() - embedder_->value.size(); }
    size_t embedder_param_count() const { return embedder_->value.size(); }

    // ---- prompt embedding -------------------------------------------------

    // Token embeddings only; the null-context row is internal and prepended
    // by the forward pass.
    Tensor embed_prompt(const std::vector<int>& token_ids) const {
        Tensor out(Shape{static_cast<int>(token_ids.size()), layout_.embed_dim});
        for (size_t i = 0; i < token_ids.size(); ++i) {
            const int id = token_ids[i];
            if (id < 0 || id >= vocab_.size()) throw UnknownTokenError("<id " + std::to_string(id) + ">");
            const double* row = embedder_->value.data() + static_cast<int64_t>(id + 1) * layout_.embed_dim;
            std::copy(row, row + layout_.embed_dim, out.data() + static_cast<int64_t>(i) * layout_.embed_dim);
        }
        return out;
    }
    Tensor embed_prompt(const std::vector<std::string>& tokens) const {
        return embed_prompt(vocab_.encode(tokens));
    }

    // Uniform-prompt context for a whole batch; `adv_suffix` appends learned
    // soft-prompt rows ((k, embed_dim), may require grad).
    ContextBatch make_context(Graph& g, int batch, const std::vector<int>& prompt_ids,
                              const std::optional<Var>& adv_suffix = {}, bool train_embedder = false) const {
        std::vector<int> rows_idx;
        rows_idx.push_back(0);  // null context row
        for (int id : prompt_ids) {
            if (id < 0 || id >= vocab_.size()) throw UnknownTokenError("<id " + std::to_string(id) + ">");
            rows_idx.push_back(id + 1);
        }
        Var table = param_var(g, *embedder_, train_embedder);
        Var base = gather_rows(table, rows_idx, Shape{static_cast<int>(rows_idx.size())});
        Var ctx2d = adv_suffix ? concat_rows({base, *adv_suffix}) : base;
        ContextBatch cb;
        cb.rows = broadcast_to_batch(ctx2d, batch);
        cb.valid.assign(static_cast<size_t>(batch), ctx2d.value().dim(0));
        for (size_t i = 0; i < prompt_ids.size(); ++i) cb.concept_positions.push_back(static_cast<int>(i + 1));
        return cb;
    }

    // Per-item prompts (training); shorter prompts are padded and masked.
    ContextBatch make_context_batched(Graph& g, const std::vector<std::vector<int>>& prompts,
                                      bool train_embedder) const {
        const int batch = static_cast<int>(prompts.size());
        int n = 1;
        for (const auto& p : prompts) n = std::max(n, static_cast<int>(p.size()) + 1);
        std::vector<int> rows_idx;
        rows_idx.reserve(static_cast<size_t>(batch) * n);
        ContextBatch cb;
        for (const auto& p : prompts) {
            rows_idx.push_back(0);
            for (int id : p) {
                if (id < 0 || id >= vocab_.size()) throw UnknownTokenError("<id " + std::to_string(id) + ">");
                rows_idx.push_back(id + 1);
            }
            for (size_t j = p.size() + 1; j < static_cast<size_t>(n); ++j) rows_idx.push_back(0);
            cb.valid.push_back(static_cast<int>(p.size()) + 1);
        }
        Var table = param_var(g, *embedder_, train_embedder);
        cb.rows = gather_rows(table, rows_idx, Shape{batch, n});
        return cb;
    }

    // ---- forward ----------------------------------------------------------

    // Instrumented denoiser pass. Captures per-layer attention maps and, when
    // erasers are attached, their residual outputs. `timesteps` holds either
    // one shared value or one per batch item.
    NoisePrediction forward(Graph& g, const Var& x_t, const std::vector<int>& timesteps, const ContextBatch& ctx,
                            const EraserStack* erasers = nullptr, bool train_params = false) const {
        const Shape& xs = x_t.value().shape();
        if (xs.size() != 4 || xs[1] != layout_.image_size || xs[2] != layout_.image_size ||
            xs[3] != layout_.image_channels)
            throw std::invalid_argument("forward: latent shape " + shape_str(xs) + " does not match the layout");
        const int B = xs[0];
        if (timesteps.size() != 1 && timesteps.size() != static_cast<size_t>(B))
            throw std::invalid_argument("forward: need one timestep, or one per batch item");
        for (int t : timesteps)
            if (t < 1 || t > schedule_.num_steps()) throw std::out_of_range("forward: timestep out of range");
        if (erasers) erasers->check_compatible(attn_layers_);

        NoisePrediction out;
        // timestep embedding -> shared MLP, pre-activated for block projections
        Tensor sins(Shape{B, layout_.time_dim});
        for (int b = 0; b < B; ++b) {
            const Tensor e = sinusoid_embedding(timesteps.size() == 1 ? timesteps[0] : timesteps[static_cast<size_t>(b)]);
            std::copy(e.data(), e.data() + e.size(), sins.data() + static_cast<int64_t>(b) * layout_.time_dim);
        }
        Var temb = g.constant(std::move(sins));  // (B, time_dim)
        temb = linear(temb, P(g, time_w1, train_params), PP(g, time_b1, train_params));
        temb = silu(temb);
        temb = linear(temb, P(g, time_w2, train_params), PP(g, time_b2, train_params));
        Var tact = silu(temb);

        Var h = conv2d3(x_t, P(g, stem_w, train_params), P(g, stem_b, train_params));
        int attn_cursor = 0;

        std::vector<Var> skips;
        for (int level = 0; level < 3; ++level) {
            h = resblock(g, enc_res_[static_cast<size_t>(level)], h, tact, train_params);
            h = attn_block(g, attn_[static_cast<size_t>(attn_cursor++)], h, ctx, erasers, out, train_params);
            if (level < 2) {
                skips.push_back(h);
                h = conv2d3(h, P(g, down_w_[static_cast<size_t>(level)], train_params),
                            P(g, down_b_[static_cast<size_t>(level)], train_params), /*stride=*/2);
            }
        }
        h = resblock(g, mid_res_a_, h, tact, train_params);
        h = attn_block(g, attn_[static_cast<size_t>(attn_cursor++)], h, ctx, erasers, out, train_params);
        h = resblock(g, mid_res_b_, h, tact, train_params);

        for (int level = 1; level >= 0; --level) {
            h = upsample2x(h);
            h = conv2d3(h, P(g, up_w_[static_cast<size_t>(level)], train_params),
                        P(g, up_b_[static_cast<size_t>(level)], train_params));
            h = concat_lastdim(h, skips[static_cast<size_t>(level)]);
            h = resblock(g, dec_res_[static_cast<size_t>(level)], h, tact, train_params);
            h = attn_block(g, attn_[static_cast<size_t>(attn_cursor++)], h, ctx, erasers, out, train_params);
        }

        h = group_norm(h, P(g, out_norm_g, train_params), P(g, out_norm_b, train_params), layout_.norm_groups);
        h = silu(h);
        out.eps = conv2d3(h, P(g, out_w, train_params), P(g, out_b, train_params));
        return out;
    }

    // Spec-level convenience: plain tensors in, epsilon plus captures out.
    NoisePrediction predict_noise(Graph& g, const Tensor& x_t, int t,
                                  const std::optional<std::vector<int>>& prompt_ids,
                                  const EraserStack* erasers = nullptr) const {
        Var x = g.constant(x_t);
        ContextBatch ctx = make_context(g, x_t.dim(0), prompt_ids.value_or(std::vector<int>{}));
        return forward(g, x, {t}, ctx, erasers);
    }

    // ---- DDIM sampling ------------------------------------------------------

    static std::vector<int> ddim_grid(int num_train_steps, int ddim_steps, int stop_at_t) {
        std::vector<int> ts;
        for (int i = 0; i <= ddim_steps; ++i) {
            const double v = num_train_steps +
                             (static_cast<double>(stop_at_t) - num_train_steps) * i / ddim_steps;
            const int t = static_cast<int>(std::lround(v));
            if (ts.empty() || t < ts.back()) ts.push_back(t);
        }
        return ts;  // strictly decreasing, from T to stop_at_t
    }

    // Deterministic DDIM chain with classifier-free guidance. Each item draws
    // its own initial noise from seeds[i], so results are independent of how
    // samples are grouped into batches. Returns x at `stop_at_t`
    // (default 0 = decoded image, clipped to [-1,1]).
    Tensor sample_batch(const GuidanceConfig& gc, const std::vector<std::vector<int>>& prompts,
                        const EraserStack* erasers, const std::vector<uint64_t>& seeds,
                        int stop_at_t = 0) const {
        gc.validate(schedule_.num_steps());
        if (prompts.size() != seeds.size())
            throw std::invalid_argument("sample_batch: prompts and seeds must align");
        if (stop_at_t < 0 || stop_at_t > schedule_.num_steps())
            throw std::out_of_range("sample_batch: stop_at_t out of range");
        const int B = static_cast<int>(prompts.size());
        const int S = layout_.image_size, C = layout_.image_channels;

        Tensor x(Shape{B, S, S, C});
        for (int b = 0; b < B; ++b) {
            Rng rng(derive_seed(seeds[static_cast<size_t>(b)], "ddim-init"));
            double* px = x.data() + static_cast<int64_t>(b) * S * S * C;
            for (int64_t i = 0; i < static_cast<int64_t>(S) * S * C; ++i) px[i] = rng.normal();
        }
        bool all_uncond = true;
        for (const auto& p : prompts)
            if (!p.empty()) all_uncond = false;

        const auto ts = ddim_grid(schedule_.num_steps(), gc.ddim_steps, stop_at_t);
        for (size_t i = 0; i + 1 < ts.size(); ++i) {
            const int t = ts[i], s = ts[i + 1];
            Graph g(false);
            Var xv = g.constant(x);
            ContextBatch uncond = make_context_batched(g, std::vector<std::vector<int>>(prompts.size(), std::vector<int>{}), false);
            Tensor eps = forward(g, xv, {t}, uncond, erasers).eps.value();
            if (!all_uncond && gc.cfg_scale != 0.0) {
                ContextBatch cond = make_context_batched(g, prompts, false);
                const Tensor eps_c = forward(g, xv, {t}, cond, erasers).eps.value();
                for (size_t e = 0; e < eps.size(); ++e) eps[e] += gc.cfg_scale * (eps_c[e] - eps[e]);
            }
            ddim_step_inplace(x, eps, t, s);
        }
        return x;
    }

    Tensor ddim_sample(const GuidanceConfig& gc, const std::optional<std::vector<int>>& prompt,
                       const EraserStack* erasers, uint64_t seed, int stop_at_t = 0) const {
        Tensor b = sample_batch(gc, {prompt.value_or(std::vector<int>{})}, erasers, {seed}, stop_at_t);
        return b.reshaped({layout_.image_size, layout_.image_size, layout_.image_channels});
    }

    // Same chain with one shared conditioning for every item, optionally
    // extended by learned soft-prompt rows (k, embed_dim).
    Tensor sample_batch_uniform(const GuidanceConfig& gc, const std::vector<int>& prompt,
                                const Tensor* adv_suffix, const EraserStack* erasers,
                                const std::vector<uint64_t>& seeds, int stop_at_t = 0) const {
        if (!adv_suffix || adv_suffix->empty())
            return sample_batch(gc, std::vector<std::vector<int>>(seeds.size(), prompt), erasers, seeds, stop_at_t);
        gc.validate(schedule_.num_steps());
        if (stop_at_t < 0 || stop_at_t > schedule_.num_steps())
            throw std::out_of_range("sample_batch_uniform: stop_at_t out of range");
        const int B = static_cast<int>(seeds.size());
        const int S = layout_.image_size, C = layout_.image_channels;
        Tensor x(Shape{B, S, S, C});
        for (int b = 0; b < B; ++b) {
            Rng rng(derive_seed(seeds[static_cast<size_t>(b)], "ddim-init"));
            double* px = x.data() + static_cast<int64_t>(b) * S * S * C;
            for (int64_t i = 0; i < static_cast<int64_t>(S) * S * C; ++i) px[i] = rng.normal();
        }
        const auto ts = ddim_grid(schedule_.num_steps(), gc.ddim_steps, stop_at_t);
        for (size_t i = 0; i + 1 < ts.size(); ++i) {
            const int t = ts[i], s = ts[i + 1];
            Graph g(false);
            Var xv = g.constant(x);
            ContextBatch uncond = make_context(g, B, {});
            Tensor eps = forward(g, xv, {t}, uncond, erasers).eps.value();
            if (gc.cfg_scale != 0.0) {
                ContextBatch cond = make_context(g, B, prompt, g.constant(*adv_suffix));
                const Tensor eps_c = forward(g, xv, {t}, cond, erasers).eps.value();
                for (size_t e = 0; e < eps.size(); ++e) eps[e] += gc.cfg_scale * (eps_c[e] - eps[e]);
            }
            ddim_step_inplace(x, eps, t, s);
        }
        return x;
    }

    // ---- checkpointing ------------------------------------------------------

    Json manifest() const {
        Json params = Json::array();
        for (const auto& p : params_.list())
            params.push_back(Json{{"name", p->name}, {"shape", p->value.shape()}});
        return Json{{"kind", "backbone"},
                    {"format", 1},
                    {"version", RECELER_VERSION},
                    {"layout", layout_.to_json()},
                    {"schedule", schedule_.to_json()},
                    {"vocab", vocab_.to_json()},
                    {"seed", seed_},
                    {"params", params},
                    {"param_hash", hex64(params_.value_hash())}};
    }
    std::string manifest_hash() const { return json_hash(manifest()); }

    void save_checkpoint(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir / "params");
        save_json(dir / "manifest.json", manifest());
        for (const auto& p : params_.list()) npy::save(dir / "params" / (p->name + ".npy"), p->value);
    }

    static DiffusionBackbone load_checkpoint(const std::filesystem::path& dir) {
        Json m = load_manifest(dir, "backbone");
        DiffusionBackbone model(UNetLayout::from_json(m.at("layout")), NoiseSchedule::from_json(m.at("schedule")),
                                Vocabulary::from_json(m.at("vocab")), m.at("seed").get<uint64_t>());
        for (const auto& pj : m.at("params")) {
            const std::string name = pj.at("name").get<std::string>();
            Tensor v = npy::load(dir / "params" / (name + ".npy"));
            Parameter& p = model.params_.at(name);
            if (v.shape() != p.value.shape())
                throw std::runtime_error("checkpoint param " + name + " has shape " + shape_str(v.shape()) +
                                         ", model expects " + shape_str(p.value.shape()));
            p.value = std::move(v);
        }
        const std::string expect = m.at("param_hash").get<std::string>();
        if (hex64(model.params_.value_hash()) != expect)
            throw std::runtime_error("checkpoint parameter hash mismatch under " + dir.string());
        return model;
    }

private:
    struct ResBlockP {
        Parameter *n1g = nullptr, *n1b = nullptr, *c1w = nullptr, *c1b = nullptr, *tw = nullptr, *tb = nullptr,
                  *n2g = nullptr, *n2b = nullptr, *c2w = nullptr, *c2b = nullptr;
        Parameter* skw = nullptr;  // 1x1 projection when channel width changes
        int c_in = 0, c_out = 0;
    };
    struct AttnP {
        Parameter *lng = nullptr, *lnb = nullptr, *qw = nullptr, *kw = nullptr, *vw = nullptr, *ow = nullptr,
                  *ob = nullptr;
        int index = 0, size = 0, channels = 0;
    };

    Var P(Graph& g, Parameter* p, bool train) const { return param_var(g, *p, train); }
    // pointer form for optional bias arguments
    struct BiasHolder {
        Var v;
        operator const Var*() const { return &v; }
    };
    BiasHolder PP(Graph& g, Parameter* p, bool train) const { return BiasHolder{param_var(g, *p, train)}; }

    Tensor sinusoid_embedding(int t) const {
        const int half = layout_.time_dim / 2;
        Tensor e(Shape{layout_.time_dim});
        for (int i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            e[static_cast<size_t>(i)] = std::sin(t * f);
            e[static_cast<size_t>(half + i)] = std::cos(t * f);
        }
        return e;
    }

    Var resblock(Graph& g, const ResBlockP& rb, const Var& x, const Var& tact, bool train) const {
        Var h = group_norm(x, P(g, rb.n1g, train), P(g, rb.n1b, train), layout_.norm_groups);
        h = conv2d3(silu(h), P(g, rb.c1w, train), P(g, rb.c1b, train));
        h = add_channel_bias(h, linear(tact, P(g, rb.tw, train), PP(g, rb.tb, train)));
        h = group_norm(h, P(g, rb.n2g, train), P(g, rb.n2b, train), layout_.norm_groups);
        h = conv2d3(silu(h), P(g, rb.c2w, train), P(g, rb.c2b, train));
        Var sk = rb.skw ? linear(x, P(g, rb.skw, train)) : x;
        return add(h, sk);
    }

    Var attn_block(Graph& g, const AttnP& ap, const Var& x, const ContextBatch& ctx, const EraserStack* erasers,
                   NoisePrediction& out, bool train) const {
        const Shape& xs = x.value().shape();
        const int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
        const int heads = layout_.heads, dh = C / heads;
        const int n = ctx.rows.value().dim(1);

        Var seq = reshape(x, {B, H * W, C});
        Var qin = layer_norm(seq, P(g, ap.lng, train), P(g, ap.lnb, train));
        Var q = linear(qin, P(g, ap.qw, train));
        Var k = linear(ctx.rows, P(g, ap.kw, train));
        Var v = linear(ctx.rows, P(g, ap.vw, train));
        Var qh = permute_0213(reshape(q, {B, H * W, heads, dh}));  // (B, heads, HW, dh)
        Var kh = permute_0213(reshape(k, {B, n, heads, dh}));      // (B, heads, n, dh)
        Var vh = permute_0213(reshape(v, {B, n, heads, dh}));
        Var scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var attn = softmax_lastdim(scores, ctx.valid);  // (B, heads, HW, n)

        // head-averaged map, captured as plain data
        {
            Tensor amap(Shape{B, H * W, n});
            const double* pa = attn.value().data();
            double* pm = amap.data();
            const int64_t hw = static_cast<int64_t>(H) * W;
            for (int b = 0; b < B; ++b)
                for (int64_t p = 0; p < hw; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int hd = 0; hd < heads; ++hd)
                            acc += pa[((static_cast<int64_t>(b) * heads + hd) * hw + p) * n + j];
                        pm[(static_cast<int64_t>(b) * hw + p) * n + j] = acc / heads;
                    }
            out.attention[ap.index] = std::move(amap);
        }

        Var av = bmm(attn, vh);                                    // (B, heads, HW, dh)
        Var merged = reshape(permute_0213(av), {B, H * W, C});
        Var proj = linear(merged, P(g, ap.ow, train), PP(g, ap.ob, train));
        Var hout = add(seq, proj);  // cross-attention layer output

        if (erasers) {
            Var o = erasers->output(g, ap.index, hout);
            if (o.defined()) {
                out.eraser_outputs[ap.index] = o;
                hout = add(hout, o);
            }
        }
        return reshape(hout, {B, H, W, C});
    }

    void ddim_step_inplace(Tensor& x, const Tensor& eps, int t, int s) const {
        const double at = schedule_.alpha_bar(t), as = schedule_.alpha_bar(s);
        const double sa_t = std::sqrt(at), ss_t = std::sqrt(1.0 - at);
        const double sa_s = std::sqrt(as), ss_s = std::sqrt(1.0 - as);
        double* px = x.data();
        const double* pe = eps.data();
        const int64_t n = static_cast<int64_t>(x.size());
#pragma omp parallel for if (n > 16384)
        for (int64_t i = 0; i < n; ++i) {
            double x0 = (px[i] - ss_t * pe[i]) / sa_t;
            x0 = std::clamp(x0, -1.0, 1.0);
            px[i] = sa_s * x0 + ss_s * pe[i];
        }
    }

    // ---- construction -------------------------------------------------------

    Parameter* conv_w(const std::string& name, int o, int c, Rng& rng) {
        const double std = std::sqrt(2.0 / (9.0 * c));
        return &params_.add(name, Tensor::randn({o, 3, 3, c}, rng, std));
    }
    Parameter* lin_w(const std::string& name, int o, int c, Rng& rng) {
        return &params_.add(name, Tensor::randn({o, c}, rng, 1.0 / std::sqrt(static_cast<double>(c))));
    }
    Parameter* vec(const std::string& name, int c, double fill) {
        return &params_.add(name, Tensor(Shape{c}, fill));
    }

    ResBlockP make_res(const std::string& prefix, int c_in, int c_out, Rng& rng) {
        ResBlockP rb;
        rb.c_in = c_in;
        rb.c_out = c_out;
        rb.n1g = vec(prefix + ".n1.g", c_in, 1.0);
        rb.n1b = vec(prefix + ".n1.b", c_in, 0.0);
        rb.c1w = conv_w(prefix + ".c1.w", c_out, c_in, rng);
        rb.c1b = vec(prefix + ".c1.b", c_out, 0.0);
        rb.tw = lin_w(prefix + ".t.w", c_out, layout_.time_dim, rng);
        rb.tb = vec(prefix + ".t.b", c_out, 0.0);
        rb.n2g = vec(prefix + ".n2.g", c_out, 1.0);
        rb.n2b = vec(prefix + ".n2.b", c_out, 0.0);
        rb.c2w = conv_w(prefix + ".c2.w", c_out, c_out, rng);
        rb.c2b = vec(prefix + ".c2.b", c_out, 0.0);
        if (c_in != c_out) rb.skw = lin_w(prefix + ".skip.w", c_out, c_in, rng);
        return rb;
    }

    AttnP make_attn(const std::string& prefix, int index, int size, int channels, Rng& rng) {
        AttnP ap;
        ap.index = index;
        ap.size = size;
        ap.channels = channels;
        ap.lng = vec(prefix + ".ln.g", channels, 1.0);
        ap.lnb = vec(prefix + ".ln.b", channels, 0.0);
        ap.qw = lin_w(prefix + ".q.w", channels, channels, rng);
        ap.kw = lin_w(prefix + ".k.w", channels, layout_.embed_dim, rng);
        ap.vw = lin_w(prefix + ".v.w", channels, layout_.embed_dim, rng);
        ap.ow = lin_w(prefix + ".o.w", channels, channels, rng);
        ap.ob = vec(prefix + ".o.b", channels, 0.0);
        attn_layers_.push_back({index, size, channels});
        if (size * 4 == layout_.image_size) mid_layers_.push_back(index);
        return ap;
    }

    void build(uint64_t init_seed) {
        Rng rng(derive_seed(init_seed, "backbone-init"));
        const int c0 = layout_.channels(0), c1 = layout_.channels(1), c2 = layout_.channels(2);
        const int s0 = layout_.image_size, s1 = s0 / 2, s2 = s0 / 4;

        embedder_ = &params_.add(
            "embedder.table", Tensor::randn({vocab_.size() + 1, layout_.embed_dim}, rng, 0.25));

        time_w1 = lin_w("time.w1", layout_.time_dim, layout_.time_dim, rng);
        time_b1 = vec("time.b1", layout_.time_dim, 0.0);
        time_w2 = lin_w("time.w2", layout_.time_dim, layout_.time_dim, rng);
        time_b2 = vec("time.b2", layout_.time_dim, 0.0);

        stem_w = conv_w("stem.w", c0, layout_.image_channels, rng);
        stem_b = vec("stem.b", c0, 0.0);

        int idx = 1;
        enc_res_.push_back(make_res("enc0.res", c0, c0, rng));
        attn_.push_back(make_attn("enc0.attn", idx++, s0, c0, rng));
        down_w_.push_back(conv_w("down0.w", c1, c0, rng));
        down_b_.push_back(vec("down0.b", c1, 0.0));
        enc_res_.push_back(make_res("enc1.res", c1, c1, rng));
        attn_.push_back(make_attn("enc1.attn", idx++, s1, c1, rng));
        down_w_.push_back(conv_w("down1.w", c2, c1, rng));
        down_b_.push_back(vec("down1.b", c2, 0.0));
        enc_res_.push_back(make_res("enc2.res", c2, c2, rng));
        attn_.push_back(make_attn("enc2.attn", idx++, s2, c2, rng));

        mid_res_a_ = make_res("mid.res_a", c2, c2, rng);
        attn_.push_back(make_attn("mid.attn", idx++, s2, c2, rng));
        mid_res_b_ = make_res("mid.res_b", c2, c2, rng);

        // decoder, bottom-up storage indexed by level
        up_w_.resize(2);
        up_b_.resize(2);
        dec_res_.resize(2);
        up_w_[1] = conv_w("up1.w", c1, c2, rng);
        up_b_[1] = vec("up1.b", c1, 0.0);
        dec_res_[1] = make_res("dec1.res", c1 * 2, c1, rng);
        attn_.push_back(make_attn("dec1.attn", idx++, s1, c1, rng));
        up_w_[0] = conv_w("up0.w", c0, c1, rng);
        up_b_[0] = vec("up0.b", c0, 0.0);
        dec_res_[0] = make_res("dec0.res", c0 * 2, c0, rng);
        attn_.push_back(make_attn("dec0.attn", idx++, s0, c0, rng));

        out_norm_g = vec("out.norm.g", c0, 1.0);
        out_norm_b = vec("out.norm.b", c0, 0.0);
        // small but nonzero, so a fresh model is not the constant-zero predictor
        out_w = &params_.add("out.w",
                             Tensor::randn({layout_.image_channels, 3, 3, c0}, rng, 0.05 * std::sqrt(2.0 / (9.0 * c0))));
        out_b = vec("out.b", layout_.image_channels, 0.0);
    }

    UNetLayout layout_;
    NoiseSchedule schedule_;
    Vocabulary vocab_;
    uint64_t seed_;
    ParamStore params_;

    Parameter* embedder_ = nullptr;
    Parameter *time_w1 = nullptr, *time_b1 = nullptr, *time_w2 = nullptr, *time_b2 = nullptr;
    Parameter *stem_w = nullptr, *stem_b = nullptr;
    std::vector<ResBlockP> enc_res_;
    std::vector<Parameter*> down_w_, down_b_;
    ResBlockP mid_res_a_, mid_res_b_;
    std::vector<Parameter*> up_w_, up_b_;
    std::vector<ResBlockP> dec_res_;
    std::vector<AttnP> attn_;
    Parameter *out_norm_g = nullptr, *out_norm_b = nullptr, *out_w = nullptr, *out_b = nullptr;
    std::vector<AttnLayerInfo> attn_layers_;
    std::vector<int> mid_layers_;
};

}  // namespace receler
