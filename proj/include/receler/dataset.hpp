#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "receler/core/image.hpp"
#include "receler/core/manifest.hpp"
#include "receler/core/npy.hpp"
#include "receler/core/rng.hpp"
#include "receler/core/tensor.hpp"
#include "receler/vocab.hpp"

namespace receler {

enum class ShapeKind { Square, Circle, Triangle };

inline std::string shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Square: return "square";
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Triangle: return "triangle";
    }
    throw std::logic_error("bad shape kind");
}
inline ShapeKind shape_kind_from(const std::string& s) {
    if (s == "square") return ShapeKind::Square;
    if (s == "circle") return ShapeKind::Circle;
    if (s == "triangle") return ShapeKind::Triangle;
    throw std::invalid_argument("unknown shape kind: " + s);
}

struct ConceptSpec {
    std::string canonical;
    std::vector<std::string> aliases;
    ShapeKind shape = ShapeKind::Square;
    std::array<double, 3> color{1.0, 0.0, 0.0};
    double min_half = 7.0;   // size jitter range, px
    double max_half = 11.0;
    double center_jitter = 4.0;
    double color_jitter = 0.04;

    void validate() const {
        if (canonical.empty()) throw std::invalid_argument("ConceptSpec: canonical token required");
        for (const auto& a : aliases)
            if (a == canonical) throw std::invalid_argument("ConceptSpec: alias repeats the canonical token");
        if (min_half <= 0 || max_half < min_half)
            throw std::invalid_argument("ConceptSpec: degenerate size range for " + canonical);
    }

    Json to_json() const {
        return Json{{"canonical", canonical}, {"aliases", aliases},       {"shape", shape_kind_name(shape)},
                    {"color", color},         {"min_half", min_half},     {"max_half", max_half},
                    {"center_jitter", center_jitter}, {"color_jitter", color_jitter}};
    }
    static ConceptSpec from_json(const Json& j) {
        ConceptSpec s;
        s.canonical = j.at("canonical").get<std::string>();
        s.aliases = j.at("aliases").get<std::vector<std::string>>();
        s.shape = shape_kind_from(j.at("shape").get<std::string>());
        s.color = j.at("color").get<std::array<double, 3>>();
        s.min_half = j.value("min_half", s.min_half);
        s.max_half = j.value("max_half", s.max_half);
        s.center_jitter = j.value("center_jitter", s.center_jitter);
        s.color_jitter = j.value("color_jitter", s.color_jitter);
        s.validate();
        return s;
    }
};

// Three shapes x two colors, each with two paraphrase alias tokens.
inline std::vector<ConceptSpec> default_concepts() {
    const std::array<double, 3> red{0.88, 0.10, 0.10};
    const std::array<double, 3> blue{0.12, 0.30, 0.92};
    auto make = [](std::string canon, std::vector<std::string> alias, ShapeKind k, std::array<double, 3> c) {
        ConceptSpec s;
        s.canonical = std::move(canon);
        s.aliases = std::move(alias);
        s.shape = k;
        s.color = c;
        return s;
    };
    return {
        make("red_square", {"crimson_box", "scarlet_tile"}, ShapeKind::Square, red),
        make("blue_square", {"azure_box", "cobalt_tile"}, ShapeKind::Square, blue),
        make("red_circle", {"crimson_disc", "scarlet_dot"}, ShapeKind::Circle, red),
        make("blue_circle", {"azure_disc", "cobalt_dot"}, ShapeKind::Circle, blue),
        make("red_triangle", {"crimson_wedge", "scarlet_cone"}, ShapeKind::Triangle, red),
        make("blue_triangle", {"azure_wedge", "cobalt_cone"}, ShapeKind::Triangle, blue),
    };
}

struct GeometryRecord {
    double cx, cy, half;
    int shape_kind;
    double r, g, b;
};

// Anti-aliased render of one shape instance onto a black canvas, quantized
// to bytes so corpora are bit-stable on disk.
inline std::vector<uint8_t> render_shape(int size, const GeometryRecord& geo) {
    const int ss = 4;  // supersampling factor
    std::vector<uint8_t> out(static_cast<size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int hit = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss;
                    const double py = y + (sy + 0.5) / ss;
                    const double dx = px - geo.cx, dy = py - geo.cy;
                    bool inside = false;
                    switch (static_cast<ShapeKind>(geo.shape_kind)) {
                        case ShapeKind::Square:
                            inside = std::fabs(dx) <= geo.half && std::fabs(dy) <= geo.half;
                            break;
                        case ShapeKind::Circle:
                            inside = dx * dx + dy * dy <= geo.half * geo.half;
                            break;
                        case ShapeKind::Triangle: {
                            // apex up: (cx, cy-h), base corners (cx +- h, cy + h)
                            if (dy < -geo.half || dy > geo.half) break;
                            const double width = (dy + geo.half) * 0.5;  // half-width at this row
                            inside = std::fabs(dx) <= width;
                            break;
                        }
                    }
                    hit += inside ? 1 : 0;
                }
            const double cov = static_cast<double>(hit) / (ss * ss);
            uint8_t* p = out.data() + (static_cast<size_t>(y) * size + x) * 3;
            p[0] = to_byte(geo.r * cov);
            p[1] = to_byte(geo.g * cov);
            p[2] = to_byte(geo.b * cov);
        }
    return out;
}

struct Corpus {
    std::vector<ConceptSpec> specs;
    Vocabulary vocab;             // canonical tokens first, then aliases, in spec order
    int image_size = 32;
    uint64_t seed = 0;
    Tensor images;                // (N, H, W, 3) in [-1, 1], byte-quantized values
    std::vector<int> labels;      // concept index per image
    std::vector<std::vector<int>> prompts;  // token ids, single token per image
    std::vector<GeometryRecord> geometry;
    std::vector<uint8_t> split;   // 0 = train, 1 = heldout

    int num_images() const { return images.empty() ? 0 : images.dim(0); }
    int num_concepts() const { return static_cast<int>(specs.size()); }

    int concept_index(const std::string& canonical) const {
        for (size_t i = 0; i < specs.size(); ++i)
            if (specs[i].canonical == canonical) return static_cast<int>(i);
        throw std::invalid_argument("no concept with canonical token '" + canonical + "'");
    }

    std::vector<int> canonical_prompt(int concept_idx) const {
        return {vocab.id(specs.at(static_cast<size_t>(concept_idx)).canonical)};
    }

    Tensor image(int i) const {
        Tensor t(Shape{image_size, image_size, 3});
        std::copy(images.data() + static_cast<int64_t>(i) * t.size(),
                  images.data() + static_cast<int64_t>(i + 1) * t.size(), t.data());
        return t;
    }

    void save(const std::filesystem::path& dir) const;
    static Corpus load(const std::filesystem::path& dir);
};

// Alias-token prompts for one concept, canonical token excluded.
inline std::vector<std::vector<int>> paraphrase_prompts(const std::vector<ConceptSpec>& specs,
                                                        const Vocabulary& vocab, int concept_idx) {
    if (concept_idx < 0 || concept_idx >= static_cast<int>(specs.size()))
        throw std::invalid_argument("paraphrase_prompts: unknown concept index " + std::to_string(concept_idx));
    const ConceptSpec& s = specs[static_cast<size_t>(concept_idx)];
    if (s.aliases.size() < 2)
        throw std::invalid_argument("paraphrase_prompts: concept '" + s.canonical + "' has fewer than 2 aliases");
    std::vector<std::vector<int>> out;
    for (const auto& a : s.aliases) out.push_back({vocab.id(a)});
    return out;
}

inline Vocabulary build_vocabulary(const std::vector<ConceptSpec>& specs) {
    Vocabulary v;
    std::set<std::string> seen;
    for (const auto& s : specs) {
        s.validate();
        if (!seen.insert(s.canonical).second)
            throw std::invalid_argument("duplicate token across concepts: " + s.canonical);
        v.add(s.canonical);
    }
    for (const auto& s : specs)
        for (const auto& a : s.aliases) {
            if (!seen.insert(a).second) throw std::invalid_argument("duplicate token across concepts: " + a);
            v.add(a);
        }
    return v;
}

// Deterministic labeled corpus: balanced classes, canonical/alias prompts in
// a fixed proportion, per-concept heldout tail for detector gating.
inline Corpus generate_corpus(const std::vector<ConceptSpec>& specs, int n_per_concept, uint64_t seed,
                              int image_size = 32, double heldout_fraction = 0.1,
                              double canonical_fraction = 0.5) {
    if (specs.size() < 4)
        throw std::invalid_argument("generate_corpus: need at least 4 concepts so locality is measurable");
    if (n_per_concept < 200) throw std::invalid_argument("generate_corpus: n_per_concept must be >= 200");

    Corpus c;
    c.specs = specs;
    c.vocab = build_vocabulary(specs);
    c.image_size = image_size;
    c.seed = seed;
    const int total = n_per_concept * static_cast<int>(specs.size());
    c.images = Tensor(Shape{total, image_size, image_size, 3});
    c.labels.resize(static_cast<size_t>(total));
    c.prompts.resize(static_cast<size_t>(total));
    c.geometry.resize(static_cast<size_t>(total));
    c.split.resize(static_cast<size_t>(total));

    const int heldout = static_cast<int>(std::lround(heldout_fraction * n_per_concept));
    int idx = 0;
    for (size_t k = 0; k < specs.size(); ++k) {
        const ConceptSpec& s = specs[k];
        Rng rng(derive_seed(seed, "corpus-" + s.canonical));
        for (int i = 0; i < n_per_concept; ++i, ++idx) {
            GeometryRecord geo;
            geo.half = rng.uniform(s.min_half, s.max_half);
            const double mid = image_size / 2.0;
            geo.cx = mid + rng.uniform(-s.center_jitter, s.center_jitter);
            geo.cy = mid + rng.uniform(-s.center_jitter, s.center_jitter);
            geo.shape_kind = static_cast<int>(s.shape);
            geo.r = std::clamp(s.color[0] + rng.uniform(-s.color_jitter, s.color_jitter), 0.0, 1.0);
            geo.g = std::clamp(s.color[1] + rng.uniform(-s.color_jitter, s.color_jitter), 0.0, 1.0);
            geo.b = std::clamp(s.color[2] + rng.uniform(-s.color_jitter, s.color_jitter), 0.0, 1.0);

            const auto bytes = render_shape(image_size, geo);
            double* dst = c.images.data() + static_cast<int64_t>(idx) * bytes.size();
            for (size_t e = 0; e < bytes.size(); ++e) dst[e] = bytes[e] / 127.5 - 1.0;

            c.labels[static_cast<size_t>(idx)] = static_cast<int>(k);
            c.geometry[static_cast<size_t>(idx)] = geo;
            const bool canonical = rng.uniform() < canonical_fraction || s.aliases.empty();
            const std::string& tok =
                canonical ? s.canonical
                          : s.aliases[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(s.aliases.size()) - 1))];
            c.prompts[static_cast<size_t>(idx)] = {c.vocab.id(tok)};
            c.split[static_cast<size_t>(idx)] = (i >= n_per_concept - heldout) ? 1 : 0;
        }
    }
    return c;
}

inline void Corpus::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    Json specs_j = Json::array();
    for (const auto& s : specs) specs_j.push_back(s.to_json());
    save_json(dir / "manifest.json",
              Json{{"kind", "corpus"},
                   {"format", 1},
                   {"version", RECELER_VERSION},
                   {"specs", specs_j},
                   {"vocab", vocab.to_json()},
                   {"image_size", image_size},
                   {"seed", seed},
                   {"num_images", num_images()}});
    // images as bytes: identical values to the in-memory tensor by construction
    std::vector<uint8_t> bytes(images.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte((images[i] + 1.0) * 0.5);
    npy::save_u8(dir / "images.npy", images.shape(), bytes);
    std::vector<int64_t> lab(labels.begin(), labels.end());
    npy::save_i64(dir / "labels.npy", {num_images()}, lab);
    std::vector<int64_t> pr(static_cast<size_t>(num_images()));
    for (int i = 0; i < num_images(); ++i) pr[static_cast<size_t>(i)] = prompts[static_cast<size_t>(i)].at(0);
    npy::save_i64(dir / "prompts.npy", {num_images()}, pr);
    Tensor geo(Shape{num_images(), 7});
    for (int i = 0; i < num_images(); ++i) {
        const auto& g = geometry[static_cast<size_t>(i)];
        double* row = geo.data() + static_cast<int64_t>(i) * 7;
        row[0] = g.cx; row[1] = g.cy; row[2] = g.half; row[3] = g.shape_kind;
        row[4] = g.r; row[5] = g.g; row[6] = g.b;
    }
    npy::save(dir / "geometry.npy", geo);
    npy::save_u8(dir / "split.npy", {num_images()}, split);
}

inline Corpus Corpus::load(const std::filesystem::path& dir) {
    Json m = load_manifest(dir, "corpus");
    Corpus c;
    for (const auto& sj : m.at("specs")) c.specs.push_back(ConceptSpec::from_json(sj));
    c.vocab = Vocabulary::from_json(m.at("vocab"));
    c.image_size = m.at("image_size").get<int>();
    c.seed = m.at("seed").get<uint64_t>();

    auto [ishape, bytes] = npy::load_u8(dir / "images.npy");
    c.images = Tensor(ishape);
    for (size_t i = 0; i < bytes.size(); ++i) c.images[i] = bytes[i] / 127.5 - 1.0;
    auto [lshape, lab] = npy::load_i64(dir / "labels.npy");
    c.labels.assign(lab.begin(), lab.end());
    auto [pshape, pr] = npy::load_i64(dir / "prompts.npy");
    for (int64_t p : pr) c.prompts.push_back({static_cast<int>(p)});
    Tensor geo = npy::load(dir / "geometry.npy");
    for (int i = 0; i < geo.dim(0); ++i) {
        const double* row = geo.data() + static_cast<int64_t>(i) * 7;
        c.geometry.push_back({row[0], row[1], row[2], static_cast<int>(row[3]), row[4], row[5], row[6]});
    }
    auto [sshape, sp] = npy::load_u8(dir / "split.npy");
    c.split = std::move(sp);
    const int n = m.at("num_images").get<int>();
    if (c.num_images() != n || static_cast<int>(c.labels.size()) != n)
        throw std::runtime_error("corpus arrays under " + dir.string() + " disagree with the manifest");
    return c;
}

}  // namespace receler
