#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "receler/backbone.hpp"

namespace receler {

// Bottleneck MLP hung after a cross-attention layer. The up-projection is
// zero at construction, so a fresh adapter is an exact no-op.
struct EraserAdapter {
    int layer_index = 0;
    int d = 0;  // feature width of the host layer
    int r = 0;  // bottleneck width
    Parameter* down_w = nullptr;
    Parameter* down_b = nullptr;
    Parameter* up_w = nullptr;
    Parameter* up_b = nullptr;
};

// Residual correction o for a layer output h (..., d); also returns h + o.
inline std::pair<Var, Var> eraser_apply(Graph& g, const EraserAdapter& a, const Var& h, bool train = false) {
    if (h.value().dim(-1) != a.d)
        throw std::invalid_argument("eraser_apply: layer " + std::to_string(a.layer_index) + " expects width " +
                                    std::to_string(a.d) + ", got " + shape_str(h.shape()));
    Var bd = param_var(g, *a.down_b, train);
    Var mid = linear(h, param_var(g, *a.down_w, train), &bd);
    Var bu = param_var(g, *a.up_b, train);
    Var o = linear(gelu(mid), param_var(g, *a.up_w, train), &bu);
    return {o, add(h, o)};
}

// All adapters for one erased concept, one per cross-attention layer.
class EraserSet : public EraserStack {
public:
    EraserSet(std::vector<std::string> concept_tokens, const std::vector<AttnLayerInfo>& layers,
              std::string backbone_hash, uint64_t seed, int bottleneck_divisor = 8)
        : concept_(std::move(concept_tokens)),
          backbone_hash_(std::move(backbone_hash)),
          seed_(seed),
          divisor_(bottleneck_divisor) {
        if (concept_.empty()) throw std::invalid_argument("EraserSet: concept must be non-empty");
        if (layers.empty()) throw std::invalid_argument("EraserSet: backbone exposes no cross-attention layers");
        Rng rng(derive_seed(seed, "eraser-init"));
        for (const auto& li : layers) {
            EraserAdapter a;
            a.layer_index = li.index;
            a.d = li.channels;
            a.r = std::max(1, li.channels / divisor_);
            if (a.r >= a.d) throw std::invalid_argument("EraserSet: bottleneck must be narrower than the layer");
            const std::string p = "l" + std::to_string(li.index);
            a.down_w = &params_.add(p + ".down.w",
                                    Tensor::randn({a.r, a.d}, rng, 1.0 / std::sqrt(static_cast<double>(a.d))));
            a.down_b = &params_.add(p + ".down.b", Tensor(Shape{a.r}, 0.0));
            a.up_w = &params_.add(p + ".up.w", Tensor(Shape{a.d, a.r}, 0.0));
            a.up_b = &params_.add(p + ".up.b", Tensor(Shape{a.d}, 0.0));
            adapters_.emplace(li.index, a);
        }
    }

    EraserSet(const EraserSet&) = delete;
    EraserSet& operator=(const EraserSet&) = delete;

    const std::vector<std::string>& concept_tokens() const { return concept_; }
    const std::string& backbone_hash() const { return backbone_hash_; }
    const std::map<int, EraserAdapter>& adapters() const { return adapters_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    size_t param_count() const { return params_.total_count(); }
    void set_train_config_hash(std::string h) { train_config_hash_ = std::move(h); }

    bool train_mode = false;  // route gradients into adapter parameters

    Var output(Graph& g, int index, const Var& h) const override {
        auto it = adapters_.find(index);
        if (it == adapters_.end())
            throw std::invalid_argument("EraserSet: no adapter for layer " + std::to_string(index));
        return eraser_apply(g, it->second, h, train_mode).first;
    }

    void check_compatible(const std::vector<AttnLayerInfo>& layers) const override {
        if (layers.size() != adapters_.size())
            throw std::invalid_argument("EraserSet: adapter count does not match the backbone layout");
        for (const auto& li : layers) {
            auto it = adapters_.find(li.index);
            if (it == adapters_.end() || it->second.d != li.channels)
                throw std::invalid_argument("EraserSet: layout mismatch at layer " + std::to_string(li.index));
        }
    }

    Json manifest() const {
        Json layers = Json::array();
        for (const auto& [idx, a] : adapters_)
            layers.push_back(Json{{"index", idx}, {"d", a.d}, {"r", a.r}});
        return Json{{"kind", "eraser"},
                    {"format", 1},
                    {"version", RECELER_VERSION},
                    {"composite", false},
                    {"concept", concept_},
                    {"layers", layers},
                    {"bottleneck_divisor", divisor_},
                    {"backbone_hash", backbone_hash_},
                    {"train_config_hash", train_config_hash_},
                    {"seed", seed_},
                    {"param_hash", hex64(params_.value_hash())}};
    }

    void save_checkpoint(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir / "params");
        save_json(dir / "manifest.json", manifest());
        for (const auto& p : params_.list()) npy::save(dir / "params" / (p->name + ".npy"), p->value);
    }

    static std::shared_ptr<EraserSet> load_checkpoint(const std::filesystem::path& dir) {
        Json m = load_manifest(dir, "eraser");
        if (m.value("composite", false))
            throw std::runtime_error(dir.string() + " is a composite eraser; load it via load_eraser_artifact");
        std::vector<AttnLayerInfo> layers;
        for (const auto& lj : m.at("layers"))
            layers.push_back({lj.at("index").get<int>(), 0, lj.at("d").get<int>()});
        auto set = std::make_shared<EraserSet>(m.at("concept").get<std::vector<std::string>>(), layers,
                                               m.at("backbone_hash").get<std::string>(),
                                               m.at("seed").get<uint64_t>(), m.at("bottleneck_divisor").get<int>());
        set->train_config_hash_ = m.value("train_config_hash", "");
        for (auto& p : set->params_.list()) {
            Tensor v = npy::load(dir / "params" / (p->name + ".npy"));
            if (v.shape() != p->value.shape())
                throw std::runtime_error("eraser param " + p->name + " shape mismatch in " + dir.string());
            p->value = std::move(v);
        }
        if (hex64(set->params_.value_hash()) != m.at("param_hash").get<std::string>())
            throw std::runtime_error("eraser parameter hash mismatch under " + dir.string());
        return set;
    }

private:
    std::vector<std::string> concept_;
    std::string backbone_hash_;
    std::string train_config_hash_;
    uint64_t seed_;
    int divisor_;
    ParamStore params_;
    std::map<int, EraserAdapter> adapters_;
};

// Inference-time combination of independently trained erasers: the per-layer
// output is the element-wise mean of member outputs. No retraining involved.
class CompositeEraser : public EraserStack {
public:
    explicit CompositeEraser(std::vector<std::shared_ptr<EraserSet>> members) : members_(std::move(members)) {
        if (members_.empty()) throw std::invalid_argument("CompositeEraser: empty member list");
        const auto& ref = members_.front()->adapters();
        for (const auto& m : members_) {
            if (m->adapters().size() != ref.size())
                throw std::invalid_argument("CompositeEraser: members built for different layouts");
            for (const auto& [idx, a] : m->adapters()) {
                auto it = ref.find(idx);
                if (it == ref.end() || it->second.d != a.d)
                    throw std::invalid_argument("CompositeEraser: members built for different layouts");
            }
        }
    }

    const std::vector<std::shared_ptr<EraserSet>>& members() const { return members_; }

    Var output(Graph& g, int index, const Var& h) const override {
        Var acc;
        for (const auto& m : members_) {
            Var o = m->output(g, index, h);
            acc = acc.defined() ? add(acc, o) : o;
        }
        return scale(acc, 1.0 / static_cast<double>(members_.size()));
    }

    void check_compatible(const std::vector<AttnLayerInfo>& layers) const override {
        for (const auto& m : members_) m->check_compatible(layers);
    }

    void save_checkpoint(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        Json concepts = Json::array();
        Json member_dirs = Json::array();
        for (size_t i = 0; i < members_.size(); ++i) {
            const std::string sub = "member" + std::to_string(i);
            members_[i]->save_checkpoint(dir / sub);
            member_dirs.push_back(sub);
            concepts.push_back(members_[i]->concept_tokens());
        }
        save_json(dir / "manifest.json", Json{{"kind", "eraser"},
                                              {"format", 1},
                                              {"version", RECELER_VERSION},
                                              {"composite", true},
                                              {"concepts", concepts},
                                              {"members", member_dirs},
                                              {"backbone_hash", members_.front()->backbone_hash()}});
    }

private:
    std::vector<std::shared_ptr<EraserSet>> members_;
};

inline std::shared_ptr<CompositeEraser> compose(std::vector<std::shared_ptr<EraserSet>> members) {
    return std::make_shared<CompositeEraser>(std::move(members));
}

// Eraser params relative to the denoiser they plug into.
inline double param_fraction(const EraserSet& erasers, const DiffusionBackbone& backbone) {
    erasers.check_compatible(backbone.attn_layers());
    return static_cast<double>(erasers.param_count()) / static_cast<double>(backbone.unet_param_count());
}

// Uniform loader for plain and composite eraser checkpoints.
struct EraserArtifact {
    std::shared_ptr<EraserStack> stack;
    std::vector<std::shared_ptr<EraserSet>> sets;             // members (size 1 when not composite)
    std::vector<std::vector<std::string>> concepts;
    std::string backbone_hash;
};

inline EraserArtifact load_eraser_artifact(const std::filesystem::path& dir) {
    Json m = load_manifest(dir, "eraser");
    EraserArtifact art;
    if (m.value("composite", false)) {
        for (const auto& sub : m.at("members")) {
            auto set = EraserSet::load_checkpoint(dir / sub.get<std::string>());
            art.concepts.push_back(set->concept_tokens());
            art.sets.push_back(std::move(set));
        }
        art.stack = std::make_shared<CompositeEraser>(art.sets);
        art.backbone_hash = m.at("backbone_hash").get<std::string>();
    } else {
        auto set = EraserSet::load_checkpoint(dir);
        art.concepts.push_back(set->concept_tokens());
        art.backbone_hash = set->backbone_hash();
        art.sets.push_back(set);
        art.stack = art.sets.front();
    }
    return art;
}

}  // namespace receler
