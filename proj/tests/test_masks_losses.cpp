#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "oracles.hpp"
#include "receler/backbone.hpp"
#include "receler/losses.hpp"
#include "receler/masks.hpp"

using namespace receler;

namespace {

// central finite difference of a scalar function of one tensor input
template <typename F>
void fd_check(Tensor x, F&& f, const Tensor& analytic, double h = 1e-6, double tol = 1e-4) {
    for (size_t e = 0; e < x.size(); ++e) {
        Tensor hi = x, lo = x;
        hi[e] += h;
        lo[e] -= h;
        const double fd = (f(hi) - f(lo)) / (2.0 * h);
        const double a = analytic[e];
        const double denom = std::max({std::fabs(fd), std::fabs(a), 1e-8});
        INFO("element " << e << " fd=" << fd << " analytic=" << a);
        REQUIRE(std::fabs(fd - a) / denom < tol);
    }
}

ConceptMask mask_from_values(std::vector<double> vals, int side) {
    ConceptMask m;
    m.m = Tensor(Shape{side, side}, std::move(vals));
    return m;
}

}  // namespace

TEST_CASE("negatively guided target arithmetic") {
    Rng rng(1);
    Tensor u = Tensor::randn({2, 3, 3, 2}, rng);
    Tensor c = Tensor::randn({2, 3, 3, 2}, rng);

    // eta = 0 -> unconditional
    Tensor e0 = negatively_guided_target(u, c, 0.0);
    REQUIRE(std::memcmp(e0.data(), u.data(), u.size() * sizeof(double)) == 0);

    // cond == uncond -> unconditional for any eta
    Tensor same = negatively_guided_target(u, u, 3.7);
    REQUIRE(std::memcmp(same.data(), u.data(), u.size() * sizeof(double)) == 0);

    // scalar toy: u=0.2, c=0.5, eta=1 -> -0.1
    Tensor su(Shape{1}, 0.2), sc(Shape{1}, 0.5);
    REQUIRE(negatively_guided_target(su, sc, 1.0)[0] == Catch::Approx(-0.1));

    // exact match with the brute-force reference
    for (double eta : {0.3, 1.0, 2.5}) {
        Tensor got = negatively_guided_target(u, c, eta);
        auto want = oracle::negatively_guided(u.raw(), c.raw(), eta);
        for (size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == want[i]);
    }

    Tensor bad(Shape{3}, 0.0);
    REQUIRE_THROWS_AS(negatively_guided_target(u, bad, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(negatively_guided_target(u, c, -0.1), std::invalid_argument);
}

TEST_CASE("erase loss value, oracle agreement and finite-difference gradient") {
    Rng rng(2);
    Tensor target = Tensor::randn({2, 4, 4, 3}, rng);

    {
        Graph g(false);
        Var same = g.constant(target);
        REQUIRE(erase_loss(same, target).value()[0] == 0.0);
        Tensor ones = target;
        for (size_t i = 0; i < ones.size(); ++i) ones[i] += 1.0;
        REQUIRE(erase_loss(g.constant(ones), target).value()[0] == Catch::Approx(1.0));
    }

    Tensor pred = Tensor::randn({2, 4, 4, 3}, rng);
    {
        Graph g(false);
        const double got = erase_loss(g.constant(pred), target).value()[0];
        REQUIRE(got == oracle::mse(pred.raw(), target.raw()));
    }
    {
        Graph g;
        Var pv = g.leaf(pred, true);
        Var l = erase_loss(pv, target);
        g.backward(l);
        fd_check(pred, [&](const Tensor& x) {
            Graph g2(false);
            return erase_loss(g2.constant(x), target).value()[0];
        }, pv.grad());
    }
    Graph g(false);
    Tensor bad(Shape{5}, 0.0);
    REQUIRE_THROWS_AS(erase_loss(g.constant(bad), target), std::invalid_argument);
}

TEST_CASE("regularization loss convention, oracle agreement and gradient") {
    // all-ones mask -> zero regardless of outputs
    {
        Graph g(false);
        Rng rng(3);
        std::map<int, Var> outs;
        outs[1] = g.constant(Tensor::randn({1, 4, 3}, rng));
        auto m = mask_from_values({1, 1, 1, 1}, 2);
        REQUIRE(reg_loss(outs, {m}).value()[0] == 0.0);
    }
    // single layer, o uniformly 2, mask zero -> 4 under the mean-square convention
    {
        Graph g(false);
        std::map<int, Var> outs;
        outs[1] = g.constant(Tensor(Shape{1, 4, 3}, 2.0));
        auto m = mask_from_values({0, 0, 0, 0}, 2);
        REQUIRE(reg_loss(outs, {m}).value()[0] == Catch::Approx(4.0));
    }
    // fresh-eraser invariant: zero outputs give zero loss
    {
        Graph g(false);
        std::map<int, Var> outs;
        outs[1] = g.constant(Tensor(Shape{1, 4, 3}, 0.0));
        outs[2] = g.constant(Tensor(Shape{1, 16, 2}, 0.0));
        auto m = mask_from_values({0, 1, 1, 0}, 2);
        REQUIRE(reg_loss(outs, {m}).value()[0] == 0.0);
    }
    // random two-layer instance against the brute-force reference (exact);
    // masks at layer resolution so no interpolation enters the comparison
    {
        Rng rng(4);
        Tensor o1 = Tensor::randn({1, 4, 3}, rng);
        Tensor o2 = Tensor::randn({1, 4, 5}, rng);
        std::vector<double> mvals = {0.0, 1.0, 1.0, 0.0};
        Graph g(false);
        std::map<int, Var> outs;
        outs[1] = g.constant(o1);
        outs[2] = g.constant(o2);
        auto m = mask_from_values(mvals, 2);
        const double got = reg_loss(outs, {m}).value()[0];
        const double want = oracle::masked_reg({o1.raw()}, {mvals}, 3) * 0.5 +
                            oracle::masked_reg({o2.raw()}, {mvals}, 5) * 0.5;
        REQUIRE(got == Catch::Approx(want).epsilon(1e-15));
    }
    // finite differences through a two-layer bundle with a non-trivial mask
    {
        Rng rng(5);
        Tensor o1 = Tensor::randn({2, 4, 3}, rng);
        auto m0 = mask_from_values({0, 1, 0, 0}, 2);
        auto m1 = mask_from_values({1, 0, 0, 1}, 2);
        std::vector<ConceptMask> masks;
        masks.push_back(std::move(m0));
        masks.push_back(std::move(m1));
        Graph g;
        Var ov = g.leaf(o1, true);
        std::map<int, Var> outs;
        outs[3] = ov;
        Var l = reg_loss(outs, masks);
        g.backward(l);
        fd_check(o1, [&](const Tensor& x) {
            Graph g2(false);
            std::map<int, Var> o;
            o[3] = g2.constant(x);
            return reg_loss(o, masks).value()[0];
        }, ov.grad());
    }
    {
        std::map<int, Var> empty;
        auto m = mask_from_values({0, 0, 0, 0}, 2);
        REQUIRE_THROWS_AS(reg_loss(empty, {m}), std::invalid_argument);
    }
}

TEST_CASE("adversarial loss and its gradient through the network into the soft prompt") {
    UNetLayout l;
    l.image_size = 8;
    l.base_channels = 4;
    l.channel_mult = {1, 2, 3};
    l.embed_dim = 6;
    l.heads = 2;
    l.time_dim = 8;
    l.norm_groups = 2;
    DiffusionBackbone model(l, NoiseSchedule::linear(20), Vocabulary({"tok"}), 5);

    Rng rng(6);
    Tensor x_t = Tensor::randn({1, 8, 8, 3}, rng);
    Tensor eps_m = Tensor::randn({1, 8, 8, 3}, rng);
    Tensor e_adv = Tensor::randn({2, 6}, rng, 0.1);
    const std::vector<int> prompt = {0};

    auto loss_of = [&](const Tensor& adv) {
        Graph g(false);
        ContextBatch ctx = model.make_context(g, 1, prompt, g.constant(adv));
        auto pred = model.forward(g, g.constant(x_t), {10}, ctx);
        return adv_loss(pred.eps, eps_m).value()[0];
    };

    Graph g;
    Var advv = g.leaf(e_adv, true);
    ContextBatch ctx = model.make_context(g, 1, prompt, advv);
    auto pred = model.forward(g, g.constant(x_t), {10}, ctx);
    Var l_adv = adv_loss(pred.eps, eps_m);
    g.backward(l_adv);
    REQUIRE(!advv.grad().empty());
    fd_check(e_adv, loss_of, advv.grad(), 1e-6, 1e-4);

    // zero when the prediction equals the malicious target
    Graph g2(false);
    REQUIRE(adv_loss(g2.constant(eps_m), eps_m).value()[0] == 0.0);
}

TEST_CASE("concept mask extraction: hand example, order invariance, oracle agreement") {
    // two 2x2 layer maps with the concept column [[0.8,0.1],[0.2,0.6]] and
    // [[0.6,0.3],[0.0,0.8]] at tau 0.5 -> [[1,0],[0,1]]
    auto build = [](std::vector<double> conc, int n_ctx, int pos) {
        Tensor m(Shape{4, n_ctx});
        for (int p = 0; p < 4; ++p) m[static_cast<size_t>(p) * n_ctx + pos] = conc[static_cast<size_t>(p)];
        return m;
    };
    std::map<int, Tensor> maps;
    maps[3] = build({0.8, 0.1, 0.2, 0.6}, 2, 1);
    maps[4] = build({0.6, 0.3, 0.0, 0.8}, 2, 1);

    for (bool norm : {false, true}) {
        ConceptMask cm = extract_concept_mask(maps, {1}, 0.5, {3, 4}, norm);
        REQUIRE(cm.m.raw() == std::vector<double>{1, 0, 0, 1});
        ConceptMask cm_rev = extract_concept_mask(maps, {1}, 0.5, {4, 3}, norm);
        REQUIRE(cm_rev.m.raw() == cm.m.raw());
    }

    // all attention above tau -> all ones
    std::map<int, Tensor> hot;
    hot[1] = build({0.9, 0.8, 0.95, 0.99}, 2, 1);
    REQUIRE(extract_concept_mask(hot, {1}, 0.5, {1}, false).m.raw() == std::vector<double>{1, 1, 1, 1});

    // random instances match the naive reference exactly
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int n_ctx = 3;
        std::map<int, Tensor> am;
        std::map<int, std::vector<double>> raw;
        std::vector<int> layer_set = {2, 5, 9};
        for (int layer : layer_set) {
            Tensor t(Shape{4, n_ctx});
            for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
            raw[layer] = t.raw();
            am[layer] = std::move(t);
        }
        const double tau = rng.uniform();
        const std::vector<int> positions = {0, 2};
        const bool norm = trial % 2 == 0;
        ConceptMask got = extract_concept_mask(am, positions, tau, layer_set, norm);
        auto want = oracle::concept_mask(raw, positions, tau, layer_set, 4, n_ctx, norm);
        REQUIRE(got.m.raw() == want);
    }

    REQUIRE_THROWS_AS(extract_concept_mask(maps, {}, 0.5, {3, 4}), std::invalid_argument);
    REQUIRE_THROWS_AS(extract_concept_mask(maps, {1}, 0.5, {3, 4, 99}), std::invalid_argument);
    REQUIRE_THROWS_AS(extract_concept_mask(maps, {5}, 0.5, {3, 4}), std::out_of_range);
}

TEST_CASE("bicubic upscale basics") {
    // constant stays constant and clamps hold
    Tensor flat(Shape{2, 2}, 1.0);
    Tensor up = ConceptMask::bicubic_upscale(flat, 8);
    for (size_t i = 0; i < up.size(); ++i) REQUIRE(up[i] == Catch::Approx(1.0).margin(1e-12));

    ConceptMask cm;
    cm.m = Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    const Tensor& u8v = cm.upscaled(8);
    REQUIRE(u8v.shape() == Shape{8, 8});
    for (size_t i = 0; i < u8v.size(); ++i) {
        REQUIRE(u8v[i] >= 0.0);
        REQUIRE(u8v[i] <= 1.0);
    }
    // identity at the native resolution
    const Tensor& same = cm.upscaled(2);
    REQUIRE(std::memcmp(same.data(), cm.m.data(), cm.m.size() * sizeof(double)) == 0);
    REQUIRE_THROWS_AS(cm.upscaled(1), std::invalid_argument);
}
