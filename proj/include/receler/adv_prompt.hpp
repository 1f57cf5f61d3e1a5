#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "receler/core/manifest.hpp"
#include "receler/core/npy.hpp"
#include "receler/core/tensor.hpp"

namespace receler {

// Learned soft-prompt rows appended after a concept's token embeddings:
// the conditioned context becomes [null; e_c; e_adv].
struct AdvPrompt {
    std::vector<std::string> concept_tokens;
    Tensor e_adv;  // (k, embed_dim); k == 0 means "no suffix"

    int k() const { return e_adv.empty() ? 0 : e_adv.dim(0); }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        save_json(dir / "manifest.json", Json{{"kind", "adv_prompt"},
                                              {"format", 1},
                                              {"version", RECELER_VERSION},
                                              {"concept", concept_tokens},
                                              {"k", k()},
                                              {"embed_dim", e_adv.empty() ? 0 : e_adv.dim(1)}});
        if (!e_adv.empty()) npy::save(dir / "e_adv.npy", e_adv);
    }

    static AdvPrompt load(const std::filesystem::path& dir) {
        Json m = load_manifest(dir, "adv_prompt");
        AdvPrompt p;
        p.concept_tokens = m.at("concept").get<std::vector<std::string>>();
        if (m.at("k").get<int>() > 0) {
            p.e_adv = npy::load(dir / "e_adv.npy");
            if (p.e_adv.dim(0) != m.at("k").get<int>())
                throw std::runtime_error("adv prompt rows disagree with manifest under " + dir.string());
        }
        return p;
    }
};

}  // namespace receler
