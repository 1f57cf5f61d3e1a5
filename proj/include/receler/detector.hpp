#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "receler/core/manifest.hpp"
#include "receler/core/npy.hpp"
#include "receler/core/ops.hpp"
#include "receler/core/params.hpp"
#include "receler/dataset.hpp"

namespace receler {

// Closed-set classifier that stands in for an external concept detector.
// Labels are the corpus concepts plus a trailing "<none>" class for images
// where no concept is present (blank, noise, washed-out shapes).
class DetectorOracle {
public:
    DetectorOracle(std::vector<std::string> class_names, int image_size, uint64_t seed, int base_channels = 16)
        : classes_(std::move(class_names)), image_size_(image_size), seed_(seed), base_(base_channels) {
        if (classes_.size() < 2) throw std::invalid_argument("DetectorOracle: need at least two classes");
        if (image_size_ % 8) throw std::invalid_argument("DetectorOracle: image size must divide by 8");
        Rng rng(derive_seed(seed, "detector-init"));
        const int c1 = base_, c2 = base_ * 2;
        auto conv = [&](const std::string& n, int o, int c) {
            return &params_.add(n, Tensor::randn({o, 3, 3, c}, rng, std::sqrt(2.0 / (9.0 * c))));
        };
        conv1_w = conv("conv1.w", c1, 3);
        conv1_b = &params_.add("conv1.b", Tensor(Shape{c1}, 0.0));
        n1g = &params_.add("n1.g", Tensor(Shape{c1}, 1.0));
        n1b = &params_.add("n1.b", Tensor(Shape{c1}, 0.0));
        conv2_w = conv("conv2.w", c2, c1);
        conv2_b = &params_.add("conv2.b", Tensor(Shape{c2}, 0.0));
        n2g = &params_.add("n2.g", Tensor(Shape{c2}, 1.0));
        n2b = &params_.add("n2.b", Tensor(Shape{c2}, 0.0));
        conv3_w = conv("conv3.w", c2, c2);
        conv3_b = &params_.add("conv3.b", Tensor(Shape{c2}, 0.0));
        const int flat = (image_size_ / 8) * (image_size_ / 8) * c2;
        fc_w = &params_.add("fc.w", Tensor::randn({static_cast<int>(classes_.size()), flat}, rng,
                                                  1.0 / std::sqrt(static_cast<double>(flat))));
        fc_b = &params_.add("fc.b", Tensor(Shape{static_cast<int>(classes_.size())}, 0.0));
    }

    DetectorOracle(const DetectorOracle&) = delete;
    DetectorOracle& operator=(const DetectorOracle&) = delete;
    DetectorOracle(DetectorOracle&&) = default;

    const std::vector<std::string>& class_names() const { return classes_; }
    int num_classes() const { return static_cast<int>(classes_.size()); }
    int none_index() const { return num_classes() - 1; }
    int image_size() const { return image_size_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const std::vector<double>& heldout_accuracy() const { return held_acc_; }
    void set_heldout_accuracy(std::vector<double> a) { held_acc_ = std::move(a); }

    // Per-class gate; all real concepts must clear `threshold`.
    void require_gated(double threshold) const {
        if (held_acc_.empty()) throw std::runtime_error("detector has no recorded held-out accuracies");
        for (int k = 0; k + 1 < num_classes(); ++k)
            if (held_acc_[static_cast<size_t>(k)] < threshold)
                throw std::runtime_error("detector gate failure: class '" + classes_[static_cast<size_t>(k)] +
                                         "' held-out accuracy " + std::to_string(held_acc_[static_cast<size_t>(k)]) +
                                         " below " + std::to_string(threshold));
    }

    Var logits(Graph& g, const Var& x, bool train = false) const {
        auto P = [&](Parameter* p) { return param_var(g, *p, train); };
        Var h = conv2d3(x, P(conv1_w), P(conv1_b), 2);
        Var g1 = P(n1g), b1 = P(n1b);
        h = silu(group_norm(h, g1, b1, 4));
        h = conv2d3(h, P(conv2_w), P(conv2_b), 2);
        Var g2 = P(n2g), b2 = P(n2b);
        h = silu(group_norm(h, g2, b2, 4));
        h = silu(conv2d3(h, P(conv3_w), P(conv3_b), 2));
        const Shape& hs = h.value().shape();
        h = reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
        Var bw = P(fc_b);
        return linear(h, P(fc_w), &bw);
    }

    std::vector<int> classify(const Tensor& images) const {
        if (images.ndim() != 4) throw std::invalid_argument("classify: want (N,H,W,3)");
        const int n = images.dim(0);
        const int64_t numel = static_cast<int64_t>(images.dim(1)) * images.dim(2) * images.dim(3);
        std::vector<int> out(static_cast<size_t>(n));
        const int chunk = 128;
        for (int start = 0; start < n; start += chunk) {
            const int m = std::min(chunk, n - start);
            Tensor batch(Shape{m, images.dim(1), images.dim(2), images.dim(3)});
            std::copy(images.data() + start * numel, images.data() + (start + m) * numel, batch.data());
            Graph g(false);
            const Tensor lg = logits(g, g.constant(batch)).value();
            const int K = num_classes();
            for (int i = 0; i < m; ++i) {
                int best = 0;
                for (int k = 1; k < K; ++k)
                    if (lg[static_cast<size_t>(i) * K + k] > lg[static_cast<size_t>(i) * K + best]) best = k;
                out[static_cast<size_t>(start + i)] = best;
            }
        }
        return out;
    }

    Json manifest() const {
        return Json{{"kind", "detector"},   {"format", 1},
                    {"version", RECELER_VERSION}, {"classes", classes_},
                    {"image_size", image_size_},  {"base_channels", base_},
                    {"seed", seed_},              {"heldout_accuracy", held_acc_},
                    {"param_hash", hex64(params_.value_hash())}};
    }
    std::string manifest_hash() const { return json_hash(manifest()); }

    void save_checkpoint(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir / "params");
        save_json(dir / "manifest.json", manifest());
        for (const auto& p : params_.list()) npy::save(dir / "params" / (p->name + ".npy"), p->value);
    }

    static DetectorOracle load_checkpoint(const std::filesystem::path& dir) {
        Json m = load_manifest(dir, "detector");
        DetectorOracle d(m.at("classes").get<std::vector<std::string>>(), m.at("image_size").get<int>(),
                         m.at("seed").get<uint64_t>(), m.at("base_channels").get<int>());
        for (auto& p : d.params_.list()) {
            Tensor v = npy::load(dir / "params" / (p->name + ".npy"));
            if (v.shape() != p->value.shape())
                throw std::runtime_error("detector param " + p->name + " shape mismatch");
            p->value = std::move(v);
        }
        d.held_acc_ = m.at("heldout_accuracy").get<std::vector<double>>();
        if (hex64(d.params_.value_hash()) != m.at("param_hash").get<std::string>())
            throw std::runtime_error("detector parameter hash mismatch under " + dir.string());
        return d;
    }

private:
    std::vector<std::string> classes_;
    int image_size_;
    uint64_t seed_;
    int base_;
    ParamStore params_;
    Parameter *conv1_w = nullptr, *conv1_b = nullptr, *n1g = nullptr, *n1b = nullptr;
    Parameter *conv2_w = nullptr, *conv2_b = nullptr, *n2g = nullptr, *n2b = nullptr;
    Parameter *conv3_w = nullptr, *conv3_b = nullptr, *fc_w = nullptr, *fc_b = nullptr;
    std::vector<double> held_acc_;
};

struct DetectorTrainConfig {
    int steps = 900;
    int batch = 64;
    double lr = 1.5e-3;
    double noise_aug = 0.08;   // max stddev of additive pixel noise
    int shift_aug = 2;         // max |shift| in pixels
    double none_fraction = 0.2;  // share of each batch drawn as background examples
    double gate_threshold = 0.95;
    uint64_t seed = 0;
    int log_every = 200;
};

namespace detail {

// Background examples: blank, pure noise, or a washed-out copy of a real
// image faint enough that no concept reads as present.
inline void fill_none_example(double* dst, int64_t numel, const Corpus& corpus, Rng& rng) {
    const int pick = static_cast<int>(rng.uniform_int(0, 2));
    if (pick == 0) {
        for (int64_t i = 0; i < numel; ++i) dst[i] = -1.0;
    } else if (pick == 1) {
        const double sigma = rng.uniform(0.02, 0.25);
        for (int64_t i = 0; i < numel; ++i) dst[i] = std::clamp(-1.0 + rng.normal(0.0, sigma), -1.0, 1.0);
    } else {
        const int src = static_cast<int>(rng.uniform_int(0, corpus.num_images() - 1));
        const double alpha = rng.uniform(0.0, 0.18);
        const double* s = corpus.images.data() + static_cast<int64_t>(src) * numel;
        for (int64_t i = 0; i < numel; ++i) dst[i] = -1.0 + alpha * (s[i] + 1.0);
    }
}

inline void shift_noise_augment(double* img, int size, int channels, int max_shift, double max_noise, Rng& rng) {
    const int dx = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    const int dy = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    if (dx || dy) {
        std::vector<double> tmp(static_cast<size_t>(size) * size * channels, -1.0);
        for (int y = 0; y < size; ++y) {
            const int sy = y - dy;
            if (sy < 0 || sy >= size) continue;
            for (int x = 0; x < size; ++x) {
                const int sx = x - dx;
                if (sx < 0 || sx >= size) continue;
                for (int c = 0; c < channels; ++c)
                    tmp[(static_cast<size_t>(y) * size + x) * channels + c] =
                        img[(static_cast<size_t>(sy) * size + sx) * channels + c];
            }
        }
        std::copy(tmp.begin(), tmp.end(), img);
    }
    const double sigma = rng.uniform(0.0, max_noise);
    if (sigma > 0.0)
        for (int64_t i = 0; i < static_cast<int64_t>(size) * size * channels; ++i)
            img[i] = std::clamp(img[i] + rng.normal(0.0, sigma), -1.0, 1.0);
}

}  // namespace detail

inline DetectorOracle train_detector(const Corpus& corpus, const DetectorTrainConfig& cfg,
                                     std::ostream* log = nullptr) {
    std::vector<std::string> classes;
    for (const auto& s : corpus.specs) classes.push_back(s.canonical);
    classes.push_back("<none>");
    DetectorOracle det(classes, corpus.image_size, derive_seed(cfg.seed, "detector"));

    std::vector<int> train_idx;
    for (int i = 0; i < corpus.num_images(); ++i)
        if (corpus.split[static_cast<size_t>(i)] == 0) train_idx.push_back(i);
    if (train_idx.empty()) throw std::invalid_argument("train_detector: corpus has no training split");

    Adam opt(AdamConfig{.lr = cfg.lr});
    const int64_t numel = static_cast<int64_t>(corpus.image_size) * corpus.image_size * 3;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, "detector-step", static_cast<uint64_t>(step)));
        Tensor batch(Shape{cfg.batch, corpus.image_size, corpus.image_size, 3});
        std::vector<int> labels(static_cast<size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) {
            double* dst = batch.data() + b * numel;
            if (rng.uniform() < cfg.none_fraction) {
                detail::fill_none_example(dst, numel, corpus, rng);
                labels[static_cast<size_t>(b)] = det.none_index();
            } else {
                const int i = train_idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(train_idx.size()) - 1))];
                const double* src = corpus.images.data() + static_cast<int64_t>(i) * numel;
                std::copy(src, src + numel, dst);
                detail::shift_noise_augment(dst, corpus.image_size, 3, cfg.shift_aug, cfg.noise_aug, rng);
                labels[static_cast<size_t>(b)] = corpus.labels[static_cast<size_t>(i)];
            }
        }
        Graph g;
        Var loss = cross_entropy(det.logits(g, g.constant(batch), true), labels);
        if (!loss.value().all_finite()) throw std::runtime_error("train_detector: loss diverged (non-finite)");
        det.params().zero_grads();
        g.backward(loss);
        opt.step(det.params().list());
        if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
            *log << "detector step " << step << " loss " << loss.value()[0] << "\n";
    }

    // held-out gate: clean per-concept accuracy plus synthetic backgrounds
    std::vector<double> acc(classes.size(), 0.0);
    std::vector<int> count(classes.size(), 0);
    std::vector<int> held_idx;
    for (int i = 0; i < corpus.num_images(); ++i)
        if (corpus.split[static_cast<size_t>(i)] == 1) held_idx.push_back(i);
    {
        Tensor imgs(Shape{static_cast<int>(held_idx.size()), corpus.image_size, corpus.image_size, 3});
        for (size_t i = 0; i < held_idx.size(); ++i)
            std::copy(corpus.images.data() + static_cast<int64_t>(held_idx[i]) * numel,
                      corpus.images.data() + static_cast<int64_t>(held_idx[i] + 1) * numel,
                      imgs.data() + static_cast<int64_t>(i) * numel);
        const auto pred = det.classify(imgs);
        for (size_t i = 0; i < held_idx.size(); ++i) {
            const int lab = corpus.labels[static_cast<size_t>(held_idx[i])];
            count[static_cast<size_t>(lab)]++;
            if (pred[i] == lab) acc[static_cast<size_t>(lab)] += 1.0;
        }
    }
    {
        const int n_none = 200;
        Rng rng(derive_seed(cfg.seed, "detector-heldout-none"));
        Tensor imgs(Shape{n_none, corpus.image_size, corpus.image_size, 3});
        for (int i = 0; i < n_none; ++i)
            detail::fill_none_example(imgs.data() + i * numel, numel, corpus, rng);
        const auto pred = det.classify(imgs);
        count[static_cast<size_t>(det.none_index())] = n_none;
        for (int i = 0; i < n_none; ++i)
            if (pred[static_cast<size_t>(i)] == det.none_index())
                acc[static_cast<size_t>(det.none_index())] += 1.0;
    }
    for (size_t k = 0; k < classes.size(); ++k)
        acc[k] = count[k] ? acc[k] / count[k] : 0.0;
    det.set_heldout_accuracy(acc);
    if (log) {
        *log << "detector held-out accuracy:";
        for (size_t k = 0; k < classes.size(); ++k) *log << " " << classes[k] << "=" << acc[k];
        *log << "\n";
    }
    return det;
}

}  // namespace receler
