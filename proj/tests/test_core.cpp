#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "receler/core/npy.hpp"
#include "receler/core/ops.hpp"
#include "receler/core/params.hpp"
#include "receler/core/rng.hpp"

using namespace receler;

namespace {

using BuildFn = std::function<Var(Graph&, const std::vector<Var>&)>;

// Central-difference check of d(scalar)/d(every input element).
void check_gradients(std::vector<Tensor> inputs, const BuildFn& f, double h = 1e-5, double tol = 1e-6) {
    Graph g;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.leaf(t, true));
    Var loss = f(g, vars);
    REQUIRE(loss.size() == 1);
    g.backward(loss);

    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        Tensor analytic = vars[vi].grad().empty() ? Tensor::zeros(inputs[vi].shape()) : vars[vi].grad();
        for (size_t e = 0; e < inputs[vi].size(); ++e) {
            auto eval = [&](double delta) {
                Graph g2(false);
                std::vector<Var> vs;
                for (size_t j = 0; j < inputs.size(); ++j) {
                    Tensor t = inputs[j];
                    if (j == vi) t[e] += delta;
                    vs.push_back(g2.leaf(std::move(t), false));
                }
                return f(g2, vs).value()[0];
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double a = analytic[e];
            const double denom = std::max({std::fabs(fd), std::fabs(a), 1e-4});
            INFO("input " << vi << " elem " << e << " fd=" << fd << " analytic=" << a);
            REQUIRE(std::fabs(fd - a) / denom < tol * std::max(1.0, denom) / denom + tol);
        }
    }
}

Tensor rand_t(Shape s, Rng& rng, double scale = 1.0) { return Tensor::randn(std::move(s), rng, scale); }

}  // namespace

TEST_CASE("rng streams are deterministic and derived seeds independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    REQUIRE(derive_seed(1, "x") != derive_seed(1, "y"));
    REQUIRE(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
    Rng n(7);
    double mean = 0.0, var = 0.0;
    const int N = 20000;
    std::vector<double> xs(N);
    for (auto& x : xs) x = n.normal();
    for (double x : xs) mean += x;
    mean /= N;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= N;
    REQUIRE(std::fabs(mean) < 0.05);
    REQUIRE(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("tensor basics") {
    Tensor t(Shape{2, 3}, 1.5);
    REQUIRE(t.size() == 6);
    REQUIRE(t.sum() == Catch::Approx(9.0));
    Tensor r = t.reshaped({3, 2});
    REQUIRE(r.dim(0) == 3);
    REQUIRE_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
    Rng rng(3);
    Tensor a = Tensor::randn({4, 4}, rng);
    Tensor b = a;
    b *= 2.0;
    REQUIRE(b[0] == Catch::Approx(2.0 * a[0]));
}

TEST_CASE("npy round trip") {
    Rng rng(11);
    Tensor t = Tensor::randn({3, 5, 2}, rng);
    auto path = std::filesystem::temp_directory_path() / "receler_npy_test.npy";
    npy::save(path, t);
    Tensor u = npy::load(path);
    REQUIRE(u.shape() == t.shape());
    for (size_t i = 0; i < t.size(); ++i) REQUIRE(u[i] == t[i]);

    std::vector<int64_t> ids = {4, 5, 6, 7};
    auto ipath = std::filesystem::temp_directory_path() / "receler_npy_ids.npy";
    npy::save_i64(ipath, {4}, ids);
    auto [ishape, ivals] = npy::load_i64(ipath);
    REQUIRE(ishape == Shape{4});
    REQUIRE(ivals == ids);
}

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    Tensor target = rand_t({2, 3}, rng);
    check_gradients({rand_t({2, 3}, rng), rand_t({2, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mse_const(add(v[0], v[1]), target); });
    check_gradients({rand_t({2, 3}, rng), rand_t({2, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mse_const(sub(v[0], v[1]), target); });
    check_gradients({rand_t({2, 3}, rng), rand_t({2, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mse_const(mul(v[0], v[1]), target); });
    check_gradients({rand_t({2, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mse_const(scale(v[0], -1.7), target); });
    check_gradients({rand_t({4, 5}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(silu(v[0])); });
    check_gradients({rand_t({4, 5}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(gelu(v[0])); });
}

TEST_CASE("linear gradients and shapes") {
    Rng rng(2);
    Tensor target = rand_t({2, 3, 4}, rng);
    check_gradients({rand_t({2, 3, 5}, rng), rand_t({4, 5}, rng), rand_t({4}, rng)},
                    [&](Graph&, const std::vector<Var>& v) {
                        return mse_const(linear(v[0], v[1], &v[2]), target);
                    });
    // no-bias path
    check_gradients({rand_t({3, 5}, rng), rand_t({2, 5}, rng)}, [&](Graph&, const std::vector<Var>& v) {
        return mean_sq(linear(v[0], v[1]));
    });
}

TEST_CASE("conv2d3 matches a direct convolution and its gradients check out") {
    Rng rng(5);
    const int B = 2, H = 6, W = 6, C = 3, O = 4;
    Tensor x = rand_t({B, H, W, C}, rng);
    Tensor w = rand_t({O, 3, 3, C}, rng);
    Tensor b = rand_t({O}, rng);

    for (int stride : {1, 2}) {
        Graph g(false);
        Var y = conv2d3(g.leaf(x), g.leaf(w), g.leaf(b), stride);
        const int OH = (H - 1) / stride + 1;
        REQUIRE(y.shape() == Shape{B, OH, OH, O});
        // direct reference
        for (int bi = 0; bi < B; ++bi)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OH; ++ox)
                    for (int o = 0; o < O; ++o) {
                        double acc = b[o];
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx)
                                for (int c = 0; c < C; ++c) {
                                    const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                                    if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                    acc += x[((static_cast<size_t>(bi) * H + iy) * W + ix) * C + c] *
                                           w[((static_cast<size_t>(o) * 3 + ky) * 3 + kx) * C + c];
                                }
                        const double got = y.value()[((static_cast<size_t>(bi) * OH + oy) * OH + ox) * O + o];
                        REQUIRE(got == Catch::Approx(acc).margin(1e-12));
                    }
        check_gradients({x, w, b}, [stride](Graph&, const std::vector<Var>& v) {
            return mean_sq(conv2d3(v[0], v[1], v[2], stride));
        });
    }
}

TEST_CASE("normalization gradients") {
    Rng rng(6);
    check_gradients({rand_t({2, 3, 3, 4}, rng), rand_t({4}, rng), rand_t({4}, rng)},
                    [&](Graph&, const std::vector<Var>& v) {
                        return mean_sq(group_norm(v[0], v[1], v[2], 2));
                    },
                    1e-5, 1e-5);
    check_gradients({rand_t({3, 5}, rng), rand_t({5}, rng), rand_t({5}, rng)},
                    [&](Graph&, const std::vector<Var>& v) {
                        return mean_sq(layer_norm(v[0], v[1], v[2]));
                    },
                    1e-5, 1e-5);
}

TEST_CASE("softmax rows sum to one and gradients check out") {
    Rng rng(7);
    Tensor x = rand_t({2, 2, 3, 5}, rng);
    Graph g(false);
    Var y = softmax_lastdim(g.leaf(x));
    for (int r = 0; r < 2 * 2 * 3; ++r) {
        double s = 0.0;
        for (int i = 0; i < 5; ++i) s += y.value()[static_cast<size_t>(r) * 5 + i];
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
    std::vector<int> valid = {3, 5};
    Var ym = softmax_lastdim(g.leaf(x), valid);
    for (int i = 3; i < 5; ++i) REQUIRE(ym.value()[static_cast<size_t>(i)] == 0.0);  // first row padded

    check_gradients({x}, [&](Graph&, const std::vector<Var>& v) { return mean_sq(softmax_lastdim(v[0])); });
    check_gradients({x}, [&](Graph&, const std::vector<Var>& v) {
        return mean_sq(softmax_lastdim(v[0], std::vector<int>{3, 4}));
    });
}

TEST_CASE("bmm, permute, reshape, concat, broadcast, gather gradients") {
    Rng rng(8);
    check_gradients({rand_t({2, 3, 2, 4}, rng), rand_t({2, 3, 4, 2}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(bmm(v[0], v[1])); });
    check_gradients({rand_t({2, 3, 2, 2}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(permute_0213(v[0])); });
    check_gradients({rand_t({2, 6}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(reshape(v[0], {3, 4})); });
    check_gradients({rand_t({2, 3, 2}, rng), rand_t({2, 3, 4}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(concat_lastdim(v[0], v[1])); });
    check_gradients({rand_t({2, 3}, rng), rand_t({4, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(concat_rows({v[0], v[1]})); });
    check_gradients({rand_t({3, 2}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(broadcast_to_batch(v[0], 4)); });
    check_gradients({rand_t({5, 3}, rng)}, [&](Graph&, const std::vector<Var>& v) {
        return mean_sq(gather_rows(v[0], {4, 0, 0, 2}, Shape{2, 2}));
    });
}

TEST_CASE("upsample, channel bias, row mask gradients") {
    Rng rng(9);
    check_gradients({rand_t({2, 3, 3, 2}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(upsample2x(v[0])); });
    check_gradients({rand_t({2, 3, 3, 4}, rng), rand_t({2, 4}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(add_channel_bias(v[0], v[1])); });
    Tensor wmask = rand_t({2, 5}, rng);
    check_gradients({rand_t({2, 5, 3}, rng)},
                    [&](Graph&, const std::vector<Var>& v) { return mean_sq(mul_rows(v[0], wmask)); });
}

TEST_CASE("cross entropy gradient and value") {
    Rng rng(10);
    Tensor logits = rand_t({4, 3}, rng);
    std::vector<int> labels = {0, 2, 1, 2};
    Graph g(false);
    Var l = cross_entropy(g.leaf(logits), labels);
    // reference
    double ref = 0.0;
    for (int b = 0; b < 4; ++b) {
        double z = 0.0, m = -1e30;
        for (int k = 0; k < 3; ++k) m = std::max(m, logits[static_cast<size_t>(b) * 3 + k]);
        for (int k = 0; k < 3; ++k) z += std::exp(logits[static_cast<size_t>(b) * 3 + k] - m);
        ref -= logits[static_cast<size_t>(b) * 3 + labels[static_cast<size_t>(b)]] - m - std::log(z);
    }
    REQUIRE(l.value()[0] == Catch::Approx(ref / 4.0));
    check_gradients({logits},
                    [&](Graph&, const std::vector<Var>& v) { return cross_entropy(v[0], labels); });
}

TEST_CASE("graph prunes constant subtrees and guards misuse") {
    Graph g;
    Var c1 = g.constant(Tensor(Shape{2, 2}, 1.0));
    Var c2 = g.constant(Tensor(Shape{2, 2}, 2.0));
    Var s = add(c1, c2);
    REQUIRE(!s.requires_grad());
    REQUIRE(g.tape_size() == 0);
    REQUIRE_THROWS_AS(g.backward(s), std::logic_error);

    Var p = g.leaf(Tensor(Shape{2, 2}, 3.0), true);
    Var out = mean_sq(add(p, c1));
    g.backward(out);
    REQUIRE(p.grad()[0] == Catch::Approx(2.0 * 4.0 / 4.0));
}

TEST_CASE("param_var accumulates into Parameter and Adam updates") {
    ParamStore ps;
    Parameter& w = ps.add("w", Tensor(Shape{2}, 1.0));
    {
        Graph g;
        Var wv = param_var(g, w);
        Var loss = mean_sq(wv);
        g.backward(loss);
    }
    REQUIRE(w.grad[0] == Catch::Approx(1.0));  // d mean(w^2) / dw = 2w/2 = w
    const uint64_t h0 = ps.value_hash();
    Adam opt(AdamConfig{.lr = 0.1});
    opt.step(ps.list());
    REQUIRE(ps.value_hash() != h0);
    REQUIRE(w.value[0] < 1.0);
    ps.zero_grads();
    REQUIRE(w.grad[0] == 0.0);
}
