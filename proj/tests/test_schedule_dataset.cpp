#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "receler/dataset.hpp"
#include "receler/schedule.hpp"

using namespace receler;

TEST_CASE("noise schedule invariants") {
    auto s = NoiseSchedule::linear(100);
    REQUIRE(s.alpha_bar(0) == 1.0);
    for (int t = 1; t <= 100; ++t) {
        REQUIRE(s.beta(t) > 0.0);
        REQUIRE(s.beta(t) < 1.0);
        REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    REQUIRE_THROWS_AS(NoiseSchedule({0.5, 1.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(NoiseSchedule({0.0}), std::invalid_argument);
}

TEST_CASE("q_sample endpoint limits and hand value") {
    auto s = NoiseSchedule::linear(10);
    Rng rng(1);
    Tensor x0 = Tensor::randn({2, 2}, rng);
    Tensor noise = Tensor::randn({2, 2}, rng);

    // abar at t=0 is exactly 1: x_t == x0
    Tensor at0 = s.q_sample(x0, 0, noise);
    for (size_t i = 0; i < x0.size(); ++i) REQUIRE(at0[i] == x0[i]);

    // abar -> 0 limit via a synthetic near-degenerate schedule
    {
        std::vector<double> betas(100, 0.999);
        NoiseSchedule hard(betas);
        Tensor end = hard.q_sample(x0, 100, noise);
        for (size_t i = 0; i < x0.size(); ++i) REQUIRE(end[i] == Catch::Approx(noise[i]).margin(1e-9));
    }

    // scalar toy: x0=1, noise=0, abar=0.25 -> 0.5
    {
        NoiseSchedule half(std::vector<double>{0.75});  // abar(1) = 0.25
        Tensor one(Shape{1}, 1.0);
        Tensor zero(Shape{1}, 0.0);
        REQUIRE(half.q_sample(one, 1, zero)[0] == Catch::Approx(0.5));
    }

    Tensor bad(Shape{3}, 0.0);
    REQUIRE_THROWS_AS(s.q_sample(x0, 1, bad), std::invalid_argument);
    REQUIRE_THROWS_AS(s.q_sample(x0, 11, noise), std::out_of_range);
}

TEST_CASE("corpus generation is deterministic, balanced and self-consistent") {
    auto specs = default_concepts();
    Corpus a = generate_corpus(specs, 200, 7);
    Corpus b = generate_corpus(specs, 200, 7);
    REQUIRE(a.num_images() == 1200);
    REQUIRE(std::memcmp(a.images.data(), b.images.data(), a.images.size() * sizeof(double)) == 0);
    REQUIRE(a.prompts == b.prompts);

    // balance
    std::vector<int> counts(specs.size(), 0);
    for (int lab : a.labels) counts[static_cast<size_t>(lab)]++;
    for (int c : counts) REQUIRE(c == 200);

    // a different seed changes pixels
    Corpus c = generate_corpus(specs, 200, 8);
    REQUIRE(std::memcmp(a.images.data(), c.images.data(), a.images.size() * sizeof(double)) != 0);

    // geometry-record self check: interior pixels carry the recorded color
    for (int i : {0, 250, 777}) {
        const auto& geo = a.geometry[static_cast<size_t>(i)];
        const Tensor img = a.image(i);
        const int cx = static_cast<int>(geo.cx), cy = static_cast<int>(geo.cy);
        const double* p = img.data() + (static_cast<int64_t>(cy) * a.image_size + cx) * 3;
        REQUIRE((p[0] + 1.0) * 0.5 == Catch::Approx(geo.r).margin(0.02));
        REQUIRE((p[1] + 1.0) * 0.5 == Catch::Approx(geo.g).margin(0.02));
        REQUIRE((p[2] + 1.0) * 0.5 == Catch::Approx(geo.b).margin(0.02));
        // far corner is background
        const double* q = img.data();
        REQUIRE(q[0] == Catch::Approx(-1.0).margin(0.02));
    }

    // prompts ground both canonical and alias tokens per concept
    for (size_t k = 0; k < specs.size(); ++k) {
        std::set<int> seen;
        for (int i = 0; i < a.num_images(); ++i)
            if (a.labels[static_cast<size_t>(i)] == static_cast<int>(k))
                seen.insert(a.prompts[static_cast<size_t>(i)][0]);
        REQUIRE(seen.size() == 3);  // canonical + 2 aliases all appear
        REQUIRE(seen.count(a.vocab.id(specs[k].canonical)) == 1);
    }

    REQUIRE_THROWS_AS(generate_corpus(specs, 100, 7), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_corpus({specs[0], specs[1]}, 200, 7), std::invalid_argument);
}

TEST_CASE("corpus save/load round trip") {
    auto dir = std::filesystem::temp_directory_path() / "receler_corpus_test";
    std::filesystem::remove_all(dir);
    Corpus a = generate_corpus(default_concepts(), 200, 3);
    a.save(dir);
    Corpus b = Corpus::load(dir);
    REQUIRE(b.num_images() == a.num_images());
    REQUIRE(std::memcmp(a.images.data(), b.images.data(), a.images.size() * sizeof(double)) == 0);
    REQUIRE(a.labels == b.labels);
    REQUIRE(a.prompts == b.prompts);
    REQUIRE(a.split == b.split);
    REQUIRE(a.vocab == b.vocab);
    std::filesystem::remove_all(dir);
}

TEST_CASE("paraphrase prompts exclude the canonical token") {
    auto specs = default_concepts();
    Vocabulary v = build_vocabulary(specs);
    for (int k = 0; k < static_cast<int>(specs.size()); ++k) {
        auto ps = paraphrase_prompts(specs, v, k);
        REQUIRE(ps.size() == 2);
        const int canon = v.id(specs[static_cast<size_t>(k)].canonical);
        for (const auto& p : ps)
            for (int id : p) REQUIRE(id != canon);
        // deterministic order: alias order in the spec
        REQUIRE(ps[0][0] == v.id(specs[static_cast<size_t>(k)].aliases[0]));
    }
    REQUIRE_THROWS_AS(paraphrase_prompts(specs, v, 99), std::invalid_argument);
    auto no_alias = specs;
    no_alias[0].aliases.clear();
    Vocabulary v2 = build_vocabulary(no_alias);
    REQUIRE_THROWS_AS(paraphrase_prompts(no_alias, v2, 0), std::invalid_argument);
}

TEST_CASE("duplicate tokens across concepts are rejected") {
    auto specs = default_concepts();
    specs[1].aliases[0] = specs[0].canonical;
    REQUIRE_THROWS_AS(build_vocabulary(specs), std::invalid_argument);
}
