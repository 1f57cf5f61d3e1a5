#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "receler/dataset.hpp"
#include "receler/eraser.hpp"

using namespace receler;

namespace {

std::vector<AttnLayerInfo> toy_layers() {
    return {{1, 16, 8}, {2, 8, 16}, {3, 4, 24}, {4, 4, 24}, {5, 8, 16}, {6, 16, 8}};
}

}  // namespace

TEST_CASE("fresh adapters are exact no-ops") {
    EraserSet set({"red_square"}, toy_layers(), "hash", 42);
    Graph g;
    Rng rng(1);
    for (const auto& [idx, a] : set.adapters()) {
        Tensor h = Tensor::randn({2, a.d == 8 ? 256 : 64, a.d}, rng);
        auto [o, sum] = eraser_apply(g, a, g.constant(h));
        REQUIRE(o.value().max_abs() == 0.0);
        REQUIRE(std::memcmp(sum.value().data(), h.data(), h.size() * sizeof(double)) == 0);
        REQUIRE(o.value().shape() == h.shape());
    }
}

TEST_CASE("adapter maps zero input to zero when biases are disabled") {
    EraserSet set({"red_square"}, toy_layers(), "hash", 7);
    Rng rng(3);
    for (auto& p : set.params().list()) {
        if (p->name.ends_with(".b")) continue;
        p->value = Tensor::randn(p->value.shape(), rng);  // random weights incl. up-projection
    }
    Graph g;
    const auto& a = set.adapters().at(3);
    Tensor zero(Shape{1, 16, a.d}, 0.0);
    auto [o, sum] = eraser_apply(g, a, g.constant(zero));
    REQUIRE(o.value().max_abs() == 0.0);
}

TEST_CASE("apply is deterministic across calls") {
    EraserSet set({"x"}, toy_layers(), "hash", 9);
    Rng rng(5);
    for (auto& p : set.params().list()) p->value = Tensor::randn(p->value.shape(), rng, 0.3);
    Graph g;
    Tensor h = Tensor::randn({1, 64, 24}, rng);
    auto [o1, s1] = eraser_apply(g, set.adapters().at(4), g.constant(h));
    auto [o2, s2] = eraser_apply(g, set.adapters().at(4), g.constant(h));
    REQUIRE(std::memcmp(o1.value().data(), o2.value().data(), o1.size() * sizeof(double)) == 0);
}

TEST_CASE("composition semantics: singleton, duplicate mean, half with a fresh member") {
    auto layers = toy_layers();
    auto e = std::make_shared<EraserSet>(std::vector<std::string>{"a"}, layers, "h", 11);
    Rng rng(6);
    for (auto& p : e->params().list()) p->value = Tensor::randn(p->value.shape(), rng, 0.2);
    auto zero = std::make_shared<EraserSet>(std::vector<std::string>{"b"}, layers, "h", 12);

    Graph g;
    Tensor h = Tensor::randn({2, 64, 24}, rng);
    Var hv = g.constant(h);
    Tensor o_single = e->output(g, 3, hv).value();

    auto c1 = compose({e});
    Tensor o_c1 = c1->output(g, 3, hv).value();
    REQUIRE(std::memcmp(o_c1.data(), o_single.data(), o_single.size() * sizeof(double)) == 0);

    auto c2 = compose({e, e});
    Tensor o_c2 = c2->output(g, 3, hv).value();
    for (size_t i = 0; i < o_c2.size(); ++i) REQUIRE(o_c2[i] == Catch::Approx(o_single[i]).margin(1e-12));

    auto c3 = compose({zero, e});
    Tensor o_c3 = c3->output(g, 3, hv).value();
    for (size_t i = 0; i < o_c3.size(); ++i)
        REQUIRE(o_c3[i] == Catch::Approx(0.5 * o_single[i]).margin(1e-6 * std::max(1.0, std::fabs(o_single[i]))));

    REQUIRE_THROWS_AS(compose({}), std::invalid_argument);
    std::vector<AttnLayerInfo> other = toy_layers();
    other[0].channels = 4;
    auto mismatched = std::make_shared<EraserSet>(std::vector<std::string>{"c"}, other, "h", 13);
    REQUIRE_THROWS_AS(compose({e, mismatched}), std::invalid_argument);
}

TEST_CASE("param fraction of the default toy pair stays under one percent and grows with r") {
    UNetLayout layout;  // default production layout
    Corpus dummy;       // vocabulary only
    Vocabulary vocab = build_vocabulary(default_concepts());
    DiffusionBackbone model(layout, NoiseSchedule::linear(1000), vocab, 17);

    EraserSet e8({"red_square"}, model.attn_layers(), model.manifest_hash(), 1, 8);
    const double f8 = param_fraction(e8, model);
    REQUIRE(f8 > 0.0);
    REQUIRE(f8 <= 0.01);

    EraserSet e4({"red_square"}, model.attn_layers(), model.manifest_hash(), 1, 4);  // doubled bottleneck
    REQUIRE(param_fraction(e4, model) > f8);
}

TEST_CASE("empty concept is rejected") {
    REQUIRE_THROWS_AS(EraserSet({}, toy_layers(), "h", 1), std::invalid_argument);
}

TEST_CASE("eraser and composite checkpoints round trip bit-exactly") {
    auto dir = std::filesystem::temp_directory_path() / "receler_eraser_ckpt";
    std::filesystem::remove_all(dir);

    auto e = std::make_shared<EraserSet>(std::vector<std::string>{"red_square"}, toy_layers(), "bbhash", 21);
    Rng rng(8);
    for (auto& p : e->params().list()) p->value = Tensor::randn(p->value.shape(), rng, 0.1);
    e->save_checkpoint(dir / "plain");
    auto e2 = EraserSet::load_checkpoint(dir / "plain");
    REQUIRE(e2->params().value_hash() == e->params().value_hash());
    REQUIRE(e2->concept_tokens() == e->concept_tokens());
    REQUIRE(e2->backbone_hash() == "bbhash");

    auto f = std::make_shared<EraserSet>(std::vector<std::string>{"blue_circle"}, toy_layers(), "bbhash", 22);
    CompositeEraser comp({e, f});
    comp.save_checkpoint(dir / "comp");
    EraserArtifact art = load_eraser_artifact(dir / "comp");
    REQUIRE(art.sets.size() == 2);
    REQUIRE(art.concepts[0] == std::vector<std::string>{"red_square"});
    REQUIRE(art.concepts[1] == std::vector<std::string>{"blue_circle"});
    REQUIRE(art.sets[0]->params().value_hash() == e->params().value_hash());

    EraserArtifact plain = load_eraser_artifact(dir / "plain");
    REQUIRE(plain.sets.size() == 1);
    REQUIRE(plain.backbone_hash == "bbhash");
    std::filesystem::remove_all(dir);
}
