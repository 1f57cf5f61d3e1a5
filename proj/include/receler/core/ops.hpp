#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "receler/core/graph.hpp"

// Differentiable ops. Forward evaluates eagerly; each op installs a closure
// that routes gradients to its parents. Conventions:
//   - image tensors are NHWC: (B, H, W, C)
//   - token/feature matrices put the feature axis last
//   - reductions inside a single output element run sequentially, so results
//     are identical for any thread count

namespace receler {

namespace detail {

inline void accum_scaled(Node* p, const Tensor& g, double s) {
    if (!p->requires_grad) return;
    p->ensure_grad_alloc();
    double* dst = p->grad.data();
    const double* src = g.data();
    const int64_t n = static_cast<int64_t>(g.size());
#pragma omp parallel for if (n > 16384)
    for (int64_t i = 0; i < n; ++i) dst[i] += s * src[i];
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.value().shape() != b.value().shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    Tensor y = a.value();
    y += b.value();
    Graph* g = a.graph();
    return g->make_node(std::move(y), {a, b}, [](Node* n) {
        Node* pa = n->parents[0].get();
        Node* pb = n->parents[1].get();
        n->backward_fn = [n, pa, pb] {
            detail::accum_scaled(pa, n->grad, 1.0);
            detail::accum_scaled(pb, n->grad, 1.0);
        };
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor y = a.value();
    y -= b.value();
    Graph* g = a.graph();
    return g->make_node(std::move(y), {a, b}, [](Node* n) {
        Node* pa = n->parents[0].get();
        Node* pb = n->parents[1].get();
        n->backward_fn = [n, pa, pb] {
            detail::accum_scaled(pa, n->grad, 1.0);
            detail::accum_scaled(pb, n->grad, -1.0);
        };
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor y(a.value().shape());
    const int64_t n = static_cast<int64_t>(y.size());
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* py = y.data();
#pragma omp parallel for if (n > 16384)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    Graph* g = a.graph();
    return g->make_node(std::move(y), {a, b}, [](Node* n) {
        Node* na = n->parents[0].get();
        Node* nb = n->parents[1].get();
        n->backward_fn = [n, na, nb] {
            const int64_t m = static_cast<int64_t>(n->grad.size());
            if (na->requires_grad) {
                na->ensure_grad_alloc();
                const double* gg = n->grad.data();
                const double* vb = nb->value.data();
                double* d = na->grad.data();
#pragma omp parallel for if (m > 16384)
                for (int64_t i = 0; i < m; ++i) d[i] += gg[i] * vb[i];
            }
            if (nb->requires_grad) {
                nb->ensure_grad_alloc();
                const double* gg = n->grad.data();
                const double* va = na->value.data();
                double* d = nb->grad.data();
#pragma omp parallel for if (m > 16384)
                for (int64_t i = 0; i < m; ++i) d[i] += gg[i] * va[i];
            }
        };
    });
}

inline Var scale(const Var& a, double s) {
    Tensor y = a.value();
    y *= s;
    return a.graph()->make_node(std::move(y), {a}, [s](Node* n) {
        Node* pa = n->parents[0].get();
        n->backward_fn = [n, pa, s] { detail::accum_scaled(pa, n->grad, s); };
    });
}

// y = x + c, c a plain tensor (no gradient through c)
inline Var add_const(const Var& x, const Tensor& c) {
    if (x.value().shape() != c.shape())
        throw std::invalid_argument("add_const: shape mismatch");
    Tensor y = x.value();
    y += c;
    return x.graph()->make_node(std::move(y), {x}, [](Node* n) {
        Node* px = n->parents[0].get();
        n->backward_fn = [n, px] { detail::accum_scaled(px, n->grad, 1.0); };
    });
}

inline Var reshape(const Var& x, Shape s) {
    Tensor y = x.value().reshaped(std::move(s));
    return x.graph()->make_node(std::move(y), {x}, [](Node* n) {
        Node* px = n->parents[0].get();
        n->backward_fn = [n, px] {
            if (!px->requires_grad) return;
            px->ensure_grad_alloc();
            double* d = px->grad.data();
            const double* gg = n->grad.data();
            const int64_t m = static_cast<int64_t>(n->grad.size());
            for (int64_t i = 0; i < m; ++i) d[i] += gg[i];
        };
    });
}

// x: (..., K)  w: (N, K)  bias: (N) optional  ->  (..., N)
inline Var linear(const Var& x, const Var& w, const Var* bias = nullptr) {
    const Shape& xs = x.value().shape();
    if (xs.empty() || w.value().ndim() != 2)
        throw std::invalid_argument("linear: bad ranks");
    const int k = xs.back();
    const int n_out = w.value().dim(0);
    if (w.value().dim(1) != k)
        throw std::invalid_argument("linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                    shape_str(xs));
    const int64_t m = static_cast<int64_t>(x.value().size()) / k;
    Shape ys(xs.begin(), xs.end() - 1);
    ys.push_back(n_out);
    Tensor y(ys);
    gemm_nt(x.value().data(), w.value().data(), y.data(), static_cast<int>(m), k, n_out);
    if (bias) {
        const double* b = bias->value().data();
        double* py = y.data();
#pragma omp parallel for if (m > 1024)
        for (int64_t r = 0; r < m; ++r)
            for (int j = 0; j < n_out; ++j) py[r * n_out + j] += b[j];
    }
    std::vector<Var> parents = {x, w};
    if (bias) parents.push_back(*bias);
    return x.graph()->make_node(std::move(y), std::move(parents), [m, k, n_out](Node* n) {
        Node* px = n->parents[0].get();
        Node* pw = n->parents[1].get();
        Node* pb = n->parents.size() > 2 ? n->parents[2].get() : nullptr;
        n->backward_fn = [n, px, pw, pb, m, k, n_out] {
            const double* gg = n->grad.data();
            if (px->requires_grad) {
                px->ensure_grad_alloc();
                gemm(gg, pw->value.data(), px->grad.data(), static_cast<int>(m), n_out, k, /*accumulate=*/true);
            }
            if (pw->requires_grad) {
                pw->ensure_grad_alloc();
                gemm_tn(gg, px->value.data(), pw->grad.data(), n_out, static_cast<int>(m), k, /*accumulate=*/true);
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad_alloc();
                double* db = pb->grad.data();
                for (int64_t r = 0; r < m; ++r)
                    for (int j = 0; j < n_out; ++j) db[j] += gg[r * n_out + j];
            }
        };
    });
}

namespace detail {

// NHWC im2col for 3x3 kernels, zero padding 1.
inline void im2col3(const double* x, double* col, int b_count, int h, int w, int c, int stride, int oh, int ow) {
    const int patch = 9 * c;
#pragma omp parallel for collapse(2) if (b_count * oh > 8)
    for (int b = 0; b < b_count; ++b)
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double* dst = col + ((static_cast<int64_t>(b) * oh + oy) * ow + ox) * patch;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = oy * stride + ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = ox * stride + kx - 1;
                        double* d = dst + (ky * 3 + kx) * c;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            std::fill(d, d + c, 0.0);
                        } else {
                            const double* s = x + ((static_cast<int64_t>(b) * h + iy) * w + ix) * c;
                            std::copy(s, s + c, d);
                        }
                    }
                }
            }
        }
}

// Gather-form col2im: each input element sums its contributions, so the
// loop parallelizes without write conflicts.
inline void col2im3_accum(const double* dcol, double* dx, int b_count, int h, int w, int c, int stride, int oh,
                          int ow) {
    const int patch = 9 * c;
#pragma omp parallel for collapse(2) if (b_count * h > 8)
    for (int b = 0; b < b_count; ++b)
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                double* d = dx + ((static_cast<int64_t>(b) * h + iy) * w + ix) * c;
                for (int ky = 0; ky < 3; ++ky) {
                    const int num = iy - ky + 1;
                    if (num < 0 || num % stride) continue;
                    const int oy = num / stride;
                    if (oy >= oh) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int numx = ix - kx + 1;
                        if (numx < 0 || numx % stride) continue;
                        const int ox = numx / stride;
                        if (ox >= ow) continue;
                        const double* s = dcol + ((static_cast<int64_t>(b) * oh + oy) * ow + ox) * patch +
                                          (ky * 3 + kx) * c;
                        for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
                    }
                }
            }
        }
}

}  // namespace detail

// 3x3 convolution, padding 1, stride 1 or 2. x: (B,H,W,C) w: (O,3,3,C) bias: (O).
// The im2col buffer is recomputed in the backward pass rather than stored.
inline Var conv2d3(const Var& x, const Var& w, const Var& bias, int stride = 1) {
    const Shape& xs = x.value().shape();
    const Shape& ws = w.value().shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != 3 || ws[2] != 3)
        throw std::invalid_argument("conv2d3: expected x (B,H,W,C), w (O,3,3,C)");
    if (ws[3] != xs[3])
        throw std::invalid_argument("conv2d3: channel mismatch " + shape_str(xs) + " vs " + shape_str(ws));
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d3: stride must be 1 or 2");
    const int B = xs[0], H = xs[1], W = xs[2], C = xs[3], O = ws[0];
    const int OH = (H + 2 - 3) / stride + 1;
    const int OW = (W + 2 - 3) / stride + 1;
    const int64_t rows = static_cast<int64_t>(B) * OH * OW;
    const int patch = 9 * C;

    Tensor col(Shape{static_cast<int>(rows), patch});
    detail::im2col3(x.value().data(), col.data(), B, H, W, C, stride, OH, OW);
    Tensor y(Shape{B, OH, OW, O});
    gemm_nt(col.data(), w.value().data(), y.data(), static_cast<int>(rows), patch, O);
    {
        const double* b = bias.value().data();
        double* py = y.data();
#pragma omp parallel for if (rows > 1024)
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < O; ++j) py[r * O + j] += b[j];
    }
    return x.graph()->make_node(std::move(y), {x, w, bias}, [=](Node* n) {
        Node* px = n->parents[0].get();
        Node* pw = n->parents[1].get();
        Node* pb = n->parents[2].get();
        n->backward_fn = [n, px, pw, pb, B, H, W, C, O, OH, OW, stride, rows, patch] {
            const double* gg = n->grad.data();
            if (pw->requires_grad || px->requires_grad) {
                if (pw->requires_grad) {
                    Tensor col(Shape{static_cast<int>(rows), patch});
                    detail::im2col3(px->value.data(), col.data(), B, H, W, C, stride, OH, OW);
                    pw->ensure_grad_alloc();
                    gemm_tn(gg, col.data(), pw->grad.data(), O, static_cast<int>(rows), patch, true);
                }
                if (px->requires_grad) {
                    Tensor dcol(Shape{static_cast<int>(rows), patch});
                    gemm(gg, pw->value.data(), dcol.data(), static_cast<int>(rows), O, patch);
                    px->ensure_grad_alloc();
                    detail::col2im3_accum(dcol.data(), px->grad.data(), B, H, W, C, stride, OH, OW);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad_alloc();
                double* db = pb->grad.data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < O; ++j) db[j] += gg[r * O + j];
            }
        };
    });
}

inline Var upsample2x(const Var& x) {
    const Shape& xs = x.value().shape();
    if (xs.size() != 4) throw std::invalid_argument("upsample2x: expected (B,H,W,C)");
    const int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
    Tensor y(Shape{B, 2 * H, 2 * W, C});
    const double* px = x.value().data();
    double* py = y.data();
#pragma omp parallel for collapse(2) if (B * H > 8)
    for (int b = 0; b < B; ++b)
        for (int iy = 0; iy < H; ++iy)
            for (int ix = 0; ix < W; ++ix) {
                const double* s = px + ((static_cast<int64_t>(b) * H + iy) * W + ix) * C;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        double* d = py + ((static_cast<int64_t>(b) * 2 * H + 2 * iy + dy) * 2 * W + 2 * ix + dx) * C;
                        std::copy(s, s + C, d);
                    }
            }
    return x.graph()->make_node(std::move(y), {x}, [=](Node* n) {
        Node* px2 = n->parents[0].get();
        n->backward_fn = [n, px2, B, H, W, C] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = n->grad.data();
            double* d = px2->grad.data();
#pragma omp parallel for collapse(2) if (B * H > 8)
            for (int b = 0; b < B; ++b)
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix) {
                        double* dd = d + ((static_cast<int64_t>(b) * H + iy) * W + ix) * C;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const double* s =
                                    gg + ((static_cast<int64_t>(b) * 2 * H + 2 * iy + dy) * 2 * W + 2 * ix + dx) * C;
                                for (int c = 0; c < C; ++c) dd[c] += s[c];
                            }
                    }
        };
    });
}

inline Var silu(const Var& x) {
    Tensor y(x.value().shape());
    const int64_t n = static_cast<int64_t>(y.size());
    const double* px = x.value().data();
    double* py = y.data();
#pragma omp parallel for if (n > 16384)
    for (int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-px[i]));
        py[i] = px[i] * s;
    }
    return x.graph()->make_node(std::move(y), {x}, [](Node* n) {
        Node* px2 = n->parents[0].get();
        n->backward_fn = [n, px2] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = n->grad.data();
            const double* xv = px2->value.data();
            double* d = px2->grad.data();
            const int64_t m = static_cast<int64_t>(n->grad.size());
#pragma omp parallel for if (m > 16384)
            for (int64_t i = 0; i < m; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                d[i] += gg[i] * s * (1.0 + xv[i] * (1.0 - s));
            }
        };
    });
}

inline Var gelu(const Var& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor y(x.value().shape());
    const int64_t n = static_cast<int64_t>(y.size());
    const double* px = x.value().data();
    double* py = y.data();
#pragma omp parallel for if (n > 16384)
    for (int64_t i = 0; i < n; ++i) {
        const double u = kC * (px[i] + kA * px[i] * px[i] * px[i]);
        py[i] = 0.5 * px[i] * (1.0 + std::tanh(u));
    }
    return x.graph()->make_node(std::move(y), {x}, [](Node* n) {
        Node* px2 = n->parents[0].get();
        n->backward_fn = [n, px2] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = n->grad.data();
            const double* xv = px2->value.data();
            double* d = px2->grad.data();
            const int64_t m = static_cast<int64_t>(n->grad.size());
#pragma omp parallel for if (m > 16384)
            for (int64_t i = 0; i < m; ++i) {
                const double xx = xv[i];
                const double u = kC * (xx + kA * xx * xx * xx);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * xx * xx);
                d[i] += gg[i] * (0.5 * (1.0 + t) + 0.5 * xx * (1.0 - t * t) * du);
            }
        };
    });
}

// Normalization over groups of channels per sample. x: (B,H,W,C) or (B,M,C).
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5) {
    const Shape& xs = x.value().shape();
    const int C = xs.back();
    if (C % groups) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int B = xs.front();
    const int64_t spatial = static_cast<int64_t>(x.value().size()) / (static_cast<int64_t>(B) * C);
    const int cpg = C / groups;
    const int64_t gsize = spatial * cpg;

    Tensor y(xs);
    Tensor stats(Shape{B, groups, 2});  // mean, inv_std per (sample, group)
    const double* px = x.value().data();
    const double* pg = gamma.value().data();
    const double* pb = beta.value().data();
    double* py = y.data();
    double* ps = stats.data();
#pragma omp parallel for collapse(2) if (B * groups > 2)
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
            double sum = 0.0, sq = 0.0;
            for (int64_t s = 0; s < spatial; ++s) {
                const double* row = px + (static_cast<int64_t>(b) * spatial + s) * C + g * cpg;
                for (int c = 0; c < cpg; ++c) {
                    sum += row[c];
                    sq += row[c] * row[c];
                }
            }
            const double mean = sum / static_cast<double>(gsize);
            const double var = sq / static_cast<double>(gsize) - mean * mean;
            const double inv = 1.0 / std::sqrt(var + eps);
            ps[(static_cast<int64_t>(b) * groups + g) * 2] = mean;
            ps[(static_cast<int64_t>(b) * groups + g) * 2 + 1] = inv;
            for (int64_t s = 0; s < spatial; ++s) {
                const double* row = px + (static_cast<int64_t>(b) * spatial + s) * C + g * cpg;
                double* out = py + (static_cast<int64_t>(b) * spatial + s) * C + g * cpg;
                for (int c = 0; c < cpg; ++c)
                    out[c] = pg[g * cpg + c] * (row[c] - mean) * inv + pb[g * cpg + c];
            }
        }
    return x.graph()->make_node(std::move(y), {x, gamma, beta}, [=, st = std::move(stats)](Node* n) {
        Node* px2 = n->parents[0].get();
        Node* pgm = n->parents[1].get();
        Node* pbt = n->parents[2].get();
        n->backward_fn = [n, px2, pgm, pbt, st, B, groups, spatial, cpg, gsize] {
            const double* gg = n->grad.data();
            const double* xv = px2->value.data();
            const double* gm = pgm->value.data();
            const double* sp = st.data();
            const int C = groups * cpg;
            if (pgm->requires_grad) pgm->ensure_grad_alloc();
            if (pbt->requires_grad) pbt->ensure_grad_alloc();
            if (px2->requires_grad) px2->ensure_grad_alloc();
            // gamma/beta reductions run over the whole batch sequentially per channel
            if (pgm->requires_grad || pbt->requires_grad) {
                double* dgm = pgm->requires_grad ? pgm->grad.data() : nullptr;
                double* dbt = pbt->requires_grad ? pbt->grad.data() : nullptr;
#pragma omp parallel for if (C > 8)
                for (int ch = 0; ch < C; ++ch) {
                    const int g = ch / cpg;
                    double a = 0.0, bsum = 0.0;
                    for (int b = 0; b < B; ++b) {
                        const double mean = sp[(static_cast<int64_t>(b) * groups + g) * 2];
                        const double inv = sp[(static_cast<int64_t>(b) * groups + g) * 2 + 1];
                        for (int64_t s = 0; s < spatial; ++s) {
                            const int64_t off = (static_cast<int64_t>(b) * spatial + s) * C + ch;
                            a += gg[off] * (xv[off] - mean) * inv;
                            bsum += gg[off];
                        }
                    }
                    if (dgm) dgm[ch] += a;
                    if (dbt) dbt[ch] += bsum;
                }
            }
            if (px2->requires_grad) {
                double* dx = px2->grad.data();
#pragma omp parallel for collapse(2) if (B * groups > 2)
                for (int b = 0; b < B; ++b)
                    for (int g = 0; g < groups; ++g) {
                        const double mean = sp[(static_cast<int64_t>(b) * groups + g) * 2];
                        const double inv = sp[(static_cast<int64_t>(b) * groups + g) * 2 + 1];
                        double sum_dg = 0.0, sum_dgx = 0.0;
                        for (int64_t s = 0; s < spatial; ++s) {
                            const int64_t off = (static_cast<int64_t>(b) * spatial + s) * C + g * cpg;
                            for (int c = 0; c < cpg; ++c) {
                                const double dg = gg[off + c] * gm[g * cpg + c];
                                sum_dg += dg;
                                sum_dgx += dg * (xv[off + c] - mean) * inv;
                            }
                        }
                        const double inv_n = 1.0 / static_cast<double>(gsize);
                        for (int64_t s = 0; s < spatial; ++s) {
                            const int64_t off = (static_cast<int64_t>(b) * spatial + s) * C + g * cpg;
                            for (int c = 0; c < cpg; ++c) {
                                const double dg = gg[off + c] * gm[g * cpg + c];
                                const double xh = (xv[off + c] - mean) * inv;
                                dx[off + c] += inv * (dg - inv_n * sum_dg - xh * inv_n * sum_dgx);
                            }
                        }
                    }
            }
        };
    });
}

// LayerNorm over the last axis.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Shape& xs = x.value().shape();
    const int C = xs.back();
    const int64_t rows = static_cast<int64_t>(x.value().size()) / C;
    Tensor y(xs);
    Tensor stats(Shape{static_cast<int>(rows), 2});
    const double* px = x.value().data();
    const double* pg = gamma.value().data();
    const double* pb = beta.value().data();
    double* py = y.data();
    double* ps = stats.data();
#pragma omp parallel for if (rows > 64)
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * C;
        double sum = 0.0, sq = 0.0;
        for (int c = 0; c < C; ++c) {
            sum += row[c];
            sq += row[c] * row[c];
        }
        const double mean = sum / C;
        const double inv = 1.0 / std::sqrt(sq / C - mean * mean + eps);
        ps[r * 2] = mean;
        ps[r * 2 + 1] = inv;
        for (int c = 0; c < C; ++c) py[r * C + c] = pg[c] * (row[c] - mean) * inv + pb[c];
    }
    return x.graph()->make_node(std::move(y), {x, gamma, beta}, [C, rows, st = std::move(stats)](Node* n) {
        Node* px2 = n->parents[0].get();
        Node* pgm = n->parents[1].get();
        Node* pbt = n->parents[2].get();
        n->backward_fn = [n, px2, pgm, pbt, st, C, rows] {
            const double* gg = n->grad.data();
            const double* xv = px2->value.data();
            const double* gm = pgm->value.data();
            const double* sp = st.data();
            if (pgm->requires_grad || pbt->requires_grad) {
                if (pgm->requires_grad) pgm->ensure_grad_alloc();
                if (pbt->requires_grad) pbt->ensure_grad_alloc();
                double* dgm = pgm->requires_grad ? pgm->grad.data() : nullptr;
                double* dbt = pbt->requires_grad ? pbt->grad.data() : nullptr;
                for (int64_t r = 0; r < rows; ++r) {
                    const double mean = sp[r * 2], inv = sp[r * 2 + 1];
                    for (int c = 0; c < C; ++c) {
                        if (dgm) dgm[c] += gg[r * C + c] * (xv[r * C + c] - mean) * inv;
                        if (dbt) dbt[c] += gg[r * C + c];
                    }
                }
            }
            if (px2->requires_grad) {
                px2->ensure_grad_alloc();
                double* dx = px2->grad.data();
#pragma omp parallel for if (rows > 64)
                for (int64_t r = 0; r < rows; ++r) {
                    const double mean = sp[r * 2], inv = sp[r * 2 + 1];
                    double sum_dg = 0.0, sum_dgx = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double dg = gg[r * C + c] * gm[c];
                        sum_dg += dg;
                        sum_dgx += dg * (xv[r * C + c] - mean) * inv;
                    }
                    for (int c = 0; c < C; ++c) {
                        const double dg = gg[r * C + c] * gm[c];
                        const double xh = (xv[r * C + c] - mean) * inv;
                        dx[r * C + c] += inv * (dg - sum_dg / C - xh * sum_dgx / C);
                    }
                }
            }
        };
    });
}

// Softmax over the last axis. When `valid` is non-empty it gives, per
// outermost index, how many trailing-axis entries are real; the rest get
// probability 0. Rows must be grouped contiguously by the outermost index.
inline Var softmax_lastdim(const Var& x, const std::vector<int>& valid = {}) {
    const Shape& xs = x.value().shape();
    const int n = xs.back();
    const int64_t rows = static_cast<int64_t>(x.value().size()) / n;
    const int B = xs.front();
    const int64_t rows_per_b = rows / B;
    if (!valid.empty() && static_cast<int>(valid.size()) != B)
        throw std::invalid_argument("softmax_lastdim: valid length must equal the leading dimension");
    Tensor y(xs);
    const double* px = x.value().data();
    double* py = y.data();
#pragma omp parallel for if (rows > 64)
    for (int64_t r = 0; r < rows; ++r) {
        const int vlen = valid.empty() ? n : valid[static_cast<size_t>(r / rows_per_b)];
        const double* row = px + r * n;
        double* out = py + r * n;
        double m = row[0];
        for (int i = 1; i < vlen; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (int i = 0; i < vlen; ++i) {
            out[i] = std::exp(row[i] - m);
            z += out[i];
        }
        const double invz = 1.0 / z;
        for (int i = 0; i < vlen; ++i) out[i] *= invz;
        for (int i = vlen; i < n; ++i) out[i] = 0.0;
    }
    return x.graph()->make_node(std::move(y), {x}, [n, rows, rows_per_b, valid](Node* nd) {
        Node* px2 = nd->parents[0].get();
        nd->backward_fn = [nd, px2, n, rows, rows_per_b, valid] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = nd->grad.data();
            const double* yv = nd->value.data();
            double* dx = px2->grad.data();
#pragma omp parallel for if (rows > 64)
            for (int64_t r = 0; r < rows; ++r) {
                const int vlen = valid.empty() ? n : valid[static_cast<size_t>(r / rows_per_b)];
                double dot = 0.0;
                for (int i = 0; i < vlen; ++i) dot += gg[r * n + i] * yv[r * n + i];
                for (int i = 0; i < vlen; ++i) dx[r * n + i] += yv[r * n + i] * (gg[r * n + i] - dot);
            }
        };
    });
}

// Batched matmul over matching leading dims: (L..., M, K) x (L..., K, N).
inline Var bmm(const Var& a, const Var& b) {
    const Shape& as = a.value().shape();
    const Shape& bs = b.value().shape();
    if (as.size() < 2 || as.size() != bs.size())
        throw std::invalid_argument("bmm: rank mismatch");
    for (size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) throw std::invalid_argument("bmm: leading dims differ");
    const int M = as[as.size() - 2], K = as.back(), N = bs.back();
    if (bs[bs.size() - 2] != K) throw std::invalid_argument("bmm: inner dims differ");
    int64_t batches = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];
    Shape out(as.begin(), as.end() - 2);
    out.push_back(M);
    out.push_back(N);
    Tensor y(out);
#pragma omp parallel for if (batches > 2)
    for (int64_t i = 0; i < batches; ++i)
        gemm(a.value().data() + i * M * K, b.value().data() + i * K * N, y.data() + i * M * N, M, K, N);
    return a.graph()->make_node(std::move(y), {a, b}, [M, K, N, batches](Node* n) {
        Node* pa = n->parents[0].get();
        Node* pb = n->parents[1].get();
        n->backward_fn = [n, pa, pb, M, K, N, batches] {
            const double* gg = n->grad.data();
            if (pa->requires_grad) {
                pa->ensure_grad_alloc();
#pragma omp parallel for if (batches > 2)
                for (int64_t i = 0; i < batches; ++i)
                    gemm_nt(gg + i * M * N, pb->value.data() + i * K * N, pa->grad.data() + i * M * K, M, N, K,
                            true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad_alloc();
#pragma omp parallel for if (batches > 2)
                for (int64_t i = 0; i < batches; ++i)
                    gemm_tn(pa->value.data() + i * M * K, gg + i * M * N, pb->grad.data() + i * K * N, K, M, N,
                            true);
            }
        };
    });
}

// Batched matmul with the second argument transposed: (L...,M,K) x (L...,N,K) -> (L...,M,N).
inline Var bmm_nt(const Var& a, const Var& b) {
    const Shape& as = a.value().shape();
    const Shape& bs = b.value().shape();
    if (as.size() < 2 || as.size() != bs.size())
        throw std::invalid_argument("bmm_nt: rank mismatch");
    for (size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) throw std::invalid_argument("bmm_nt: leading dims differ");
    const int M = as[as.size() - 2], K = as.back(), N = bs[bs.size() - 2];
    if (bs.back() != K) throw std::invalid_argument("bmm_nt: inner dims differ");
    int64_t batches = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];
    Shape out(as.begin(), as.end() - 2);
    out.push_back(M);
    out.push_back(N);
    Tensor y(out);
#pragma omp parallel for if (batches > 2)
    for (int64_t i = 0; i < batches; ++i)
        gemm_nt(a.value().data() + i * M * K, b.value().data() + i * N * K, y.data() + i * M * N, M, K, N);
    return a.graph()->make_node(std::move(y), {a, b}, [M, K, N, batches](Node* n) {
        Node* pa = n->parents[0].get();
        Node* pb = n->parents[1].get();
        n->backward_fn = [n, pa, pb, M, K, N, batches] {
            const double* gg = n->grad.data();
            if (pa->requires_grad) {
                pa->ensure_grad_alloc();
#pragma omp parallel for if (batches > 2)
                for (int64_t i = 0; i < batches; ++i)
                    gemm(gg + i * M * N, pb->value.data() + i * N * K, pa->grad.data() + i * M * K, M, N, K, true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad_alloc();
#pragma omp parallel for if (batches > 2)
                for (int64_t i = 0; i < batches; ++i)
                    gemm_tn(gg + i * M * N, pa->value.data() + i * M * K, pb->grad.data() + i * N * K, N, M, K,
                            true);
            }
        };
    });
}

// (A,B,C,D) -> (A,C,B,D)
inline Var permute_0213(const Var& x) {
    const Shape& xs = x.value().shape();
    if (xs.size() != 4) throw std::invalid_argument("permute_0213: expected rank 4");
    const int A = xs[0], Bd = xs[1], Cd = xs[2], D = xs[3];
    Tensor y(Shape{A, Cd, Bd, D});
    const double* px = x.value().data();
    double* py = y.data();
#pragma omp parallel for collapse(2) if (A * Bd > 8)
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < Bd; ++b)
            for (int c = 0; c < Cd; ++c) {
                const double* s = px + (((static_cast<int64_t>(a) * Bd + b) * Cd) + c) * D;
                double* d = py + (((static_cast<int64_t>(a) * Cd + c) * Bd) + b) * D;
                std::copy(s, s + D, d);
            }
    return x.graph()->make_node(std::move(y), {x}, [A, Bd, Cd, D](Node* n) {
        Node* px2 = n->parents[0].get();
        n->backward_fn = [n, px2, A, Bd, Cd, D] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = n->grad.data();
            double* dx = px2->grad.data();
#pragma omp parallel for collapse(2) if (A * Bd > 8)
            for (int a = 0; a < A; ++a)
                for (int b = 0; b < Bd; ++b)
                    for (int c = 0; c < Cd; ++c) {
                        const double* s = gg + (((static_cast<int64_t>(a) * Cd + c) * Bd) + b) * D;
                        double* d = dx + (((static_cast<int64_t>(a) * Bd + b) * Cd) + c) * D;
                        for (int i = 0; i < D; ++i) d[i] += s[i];
                    }
        };
    });
}

// Concatenate along the last axis; leading dims must match.
inline Var concat_lastdim(const Var& a, const Var& b) {
    const Shape& as = a.value().shape();
    const Shape& bs = b.value().shape();
    if (as.size() != bs.size()) throw std::invalid_argument("concat_lastdim: rank mismatch");
    for (size_t i = 0; i + 1 < as.size(); ++i)
        if (as[i] != bs[i]) throw std::invalid_argument("concat_lastdim: leading dims differ");
    const int ca = as.back(), cb = bs.back();
    const int64_t rows = static_cast<int64_t>(a.value().size()) / ca;
    Shape ys = as;
    ys.back() = ca + cb;
    Tensor y(ys);
    const double* pa = a.value().data();
    const double* pb = b.value().data();
    double* py = y.data();
#pragma omp parallel for if (rows > 256)
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(pa + r * ca, pa + (r + 1) * ca, py + r * (ca + cb));
        std::copy(pb + r * cb, pb + (r + 1) * cb, py + r * (ca + cb) + ca);
    }
    return a.graph()->make_node(std::move(y), {a, b}, [ca, cb, rows](Node* n) {
        Node* na = n->parents[0].get();
        Node* nb = n->parents[1].get();
        n->backward_fn = [n, na, nb, ca, cb, rows] {
            const double* gg = n->grad.data();
            if (na->requires_grad) {
                na->ensure_grad_alloc();
                double* d = na->grad.data();
#pragma omp parallel for if (rows > 256)
                for (int64_t r = 0; r < rows; ++r)
                    for (int c = 0; c < ca; ++c) d[r * ca + c] += gg[r * (ca + cb) + c];
            }
            if (nb->requires_grad) {
                nb->ensure_grad_alloc();
                double* d = nb->grad.data();
#pragma omp parallel for if (rows > 256)
                for (int64_t r = 0; r < rows; ++r)
                    for (int c = 0; c < cb; ++c) d[r * cb + c] += gg[r * (ca + cb) + ca + c];
            }
        };
    });
}

// Concatenate 2-D blocks along axis 0.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int d = parts[0].value().dim(-1);
    int total = 0;
    for (const auto& p : parts) {
        if (p.value().ndim() != 2 || p.value().dim(1) != d)
            throw std::invalid_argument("concat_rows: all parts must be (n_i, d)");
        total += p.value().dim(0);
    }
    Tensor y(Shape{total, d});
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.value().size(), y.data() + static_cast<int64_t>(row) * d);
        row += p.value().dim(0);
    }
    return parts[0].graph()->make_node(std::move(y), parts, [d](Node* n) {
        n->backward_fn = [n, d] {
            const double* gg = n->grad.data();
            int64_t row = 0;
            for (auto& pp : n->parents) {
                Node* p = pp.get();
                const int64_t nr = p->value.dim(0);
                if (p->requires_grad) {
                    p->ensure_grad_alloc();
                    double* dst = p->grad.data();
                    for (int64_t i = 0; i < nr * d; ++i) dst[i] += gg[row * d + i];
                }
                row += nr;
            }
        };
    });
}

// Tile x to a leading batch axis: (rest...) -> (B, rest...).
inline Var broadcast_to_batch(const Var& x, int batch) {
    const Shape& xs = x.value().shape();
    Shape ys;
    ys.push_back(batch);
    ys.insert(ys.end(), xs.begin(), xs.end());
    const int64_t n = static_cast<int64_t>(x.value().size());
    Tensor y(ys);
    for (int b = 0; b < batch; ++b)
        std::copy(x.value().data(), x.value().data() + n, y.data() + b * n);
    return x.graph()->make_node(std::move(y), {x}, [batch, n](Node* nd) {
        Node* px = nd->parents[0].get();
        nd->backward_fn = [nd, px, batch, n] {
            if (!px->requires_grad) return;
            px->ensure_grad_alloc();
            const double* gg = nd->grad.data();
            double* d = px->grad.data();
            for (int b = 0; b < batch; ++b)
                for (int64_t i = 0; i < n; ++i) d[i] += gg[b * n + i];
        };
    });
}

// Select rows of a (V, D) table. indices shape defines leading output dims.
inline Var gather_rows(const Var& table, const std::vector<int>& indices, Shape lead) {
    const int V = table.value().dim(0);
    const int D = table.value().dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= V) throw std::out_of_range("gather_rows: row index out of range");
    Shape ys = lead;
    ys.push_back(D);
    if (shape_numel(lead) != indices.size()) throw std::invalid_argument("gather_rows: lead shape mismatch");
    Tensor y(ys);
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy(table.value().data() + static_cast<int64_t>(indices[i]) * D,
                  table.value().data() + static_cast<int64_t>(indices[i] + 1) * D,
                  y.data() + static_cast<int64_t>(i) * D);
    return table.graph()->make_node(std::move(y), {table}, [indices, D](Node* n) {
        Node* pt = n->parents[0].get();
        n->backward_fn = [n, pt, indices, D] {
            if (!pt->requires_grad) return;
            pt->ensure_grad_alloc();
            const double* gg = n->grad.data();
            double* d = pt->grad.data();
            for (size_t i = 0; i < indices.size(); ++i)
                for (int c = 0; c < D; ++c) d[static_cast<int64_t>(indices[i]) * D + c] += gg[i * D + c];
        };
    });
}

// x: (B,H,W,C) plus a per-sample channel bias t: (B,C).
inline Var add_channel_bias(const Var& x, const Var& t) {
    const Shape& xs = x.value().shape();
    const int B = xs[0], C = xs.back();
    if (t.value().ndim() != 2 || t.value().dim(0) != B || t.value().dim(1) != C)
        throw std::invalid_argument("add_channel_bias: bias must be (B,C)");
    const int64_t spatial = static_cast<int64_t>(x.value().size()) / (static_cast<int64_t>(B) * C);
    Tensor y = x.value();
    double* py = y.data();
    const double* pt = t.value().data();
#pragma omp parallel for if (B * spatial > 1024)
    for (int64_t r = 0; r < static_cast<int64_t>(B) * spatial; ++r) {
        const int64_t b = r / spatial;
        for (int c = 0; c < C; ++c) py[r * C + c] += pt[b * C + c];
    }
    return x.graph()->make_node(std::move(y), {x, t}, [B, C, spatial](Node* n) {
        Node* px = n->parents[0].get();
        Node* ptb = n->parents[1].get();
        n->backward_fn = [n, px, ptb, B, C, spatial] {
            const double* gg = n->grad.data();
            detail::accum_scaled(px, n->grad, 1.0);
            if (ptb->requires_grad) {
                ptb->ensure_grad_alloc();
                double* d = ptb->grad.data();
#pragma omp parallel for if (B > 2)
                for (int b = 0; b < B; ++b)
                    for (int64_t s = 0; s < spatial; ++s)
                        for (int c = 0; c < C; ++c) d[static_cast<int64_t>(b) * C + c] += gg[(b * spatial + s) * C + c];
            }
        };
    });
}

// Row weights, broadcast across the feature axis: x (B,M,D) * w (B,M).
inline Var mul_rows(const Var& x, const Tensor& w) {
    const Shape& xs = x.value().shape();
    if (xs.size() != 3 || w.ndim() != 2 || w.dim(0) != xs[0] || w.dim(1) != xs[1])
        throw std::invalid_argument("mul_rows: want x (B,M,D), w (B,M)");
    const int64_t rows = static_cast<int64_t>(xs[0]) * xs[1];
    const int D = xs[2];
    Tensor y(xs);
    const double* px = x.value().data();
    const double* pw = w.data();
    double* py = y.data();
#pragma omp parallel for if (rows > 256)
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < D; ++c) py[r * D + c] = px[r * D + c] * pw[r];
    return x.graph()->make_node(std::move(y), {x}, [rows, D, w](Node* n) {
        Node* px2 = n->parents[0].get();
        n->backward_fn = [n, px2, rows, D, w] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double* gg = n->grad.data();
            const double* pw = w.data();
            double* d = px2->grad.data();
#pragma omp parallel for if (rows > 256)
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < D; ++c) d[r * D + c] += gg[r * D + c] * pw[r];
        };
    });
}

// Mean squared difference against a constant target.
inline Var mse_const(const Var& x, const Tensor& target) {
    if (x.value().shape() != target.shape())
        throw std::invalid_argument("mse_const: shape mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(target.shape()));
    const int64_t n = static_cast<int64_t>(x.value().size());
    const double* px = x.value().data();
    const double* pt = target.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = px[i] - pt[i];
        acc += d * d;
    }
    Tensor y = Tensor::scalar(acc / static_cast<double>(n));
    return x.graph()->make_node(std::move(y), {x}, [n, target](Node* nd) {
        Node* px2 = nd->parents[0].get();
        nd->backward_fn = [nd, px2, n, target] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double g = nd->grad[0] * 2.0 / static_cast<double>(n);
            const double* xv = px2->value.data();
            const double* pt = target.data();
            double* d = px2->grad.data();
#pragma omp parallel for if (n > 16384)
            for (int64_t i = 0; i < n; ++i) d[i] += g * (xv[i] - pt[i]);
        };
    });
}

// Mean of squares.
inline Var mean_sq(const Var& x) {
    const int64_t n = static_cast<int64_t>(x.value().size());
    const double* px = x.value().data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += px[i] * px[i];
    Tensor y = Tensor::scalar(acc / static_cast<double>(n));
    return x.graph()->make_node(std::move(y), {x}, [n](Node* nd) {
        Node* px2 = nd->parents[0].get();
        nd->backward_fn = [nd, px2, n] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double g = nd->grad[0] * 2.0 / static_cast<double>(n);
            const double* xv = px2->value.data();
            double* d = px2->grad.data();
#pragma omp parallel for if (n > 16384)
            for (int64_t i = 0; i < n; ++i) d[i] += g * xv[i];
        };
    });
}

// Softmax cross-entropy with integer labels, averaged over the batch.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Shape& xs = logits.value().shape();
    if (xs.size() != 2 || static_cast<int>(labels.size()) != xs[0])
        throw std::invalid_argument("cross_entropy: want logits (B,K) and B labels");
    const int B = xs[0], K = xs[1];
    const double* px = logits.value().data();
    double loss = 0.0;
    Tensor probs(Shape{B, K});
    double* pp = probs.data();
    for (int b = 0; b < B; ++b) {
        if (labels[b] < 0 || labels[b] >= K) throw std::out_of_range("cross_entropy: label out of range");
        const double* row = px + static_cast<int64_t>(b) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            pp[b * K + k] = std::exp(row[k] - m);
            z += pp[b * K + k];
        }
        for (int k = 0; k < K; ++k) pp[b * K + k] /= z;
        loss -= std::log(std::max(pp[b * K + labels[b]], 1e-300));
    }
    Tensor y = Tensor::scalar(loss / B);
    return logits.graph()->make_node(std::move(y), {logits}, [B, K, labels, pr = std::move(probs)](Node* nd) {
        Node* px2 = nd->parents[0].get();
        nd->backward_fn = [nd, px2, B, K, labels, pr] {
            if (!px2->requires_grad) return;
            px2->ensure_grad_alloc();
            const double g = nd->grad[0] / B;
            double* d = px2->grad.data();
            const double* pp = pr.data();
            for (int b = 0; b < B; ++b)
                for (int k = 0; k < K; ++k)
                    d[b * K + k] += g * (pp[b * K + k] - (k == labels[b] ? 1.0 : 0.0));
        };
    });
}

}  // namespace receler
