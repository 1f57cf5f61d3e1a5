#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "receler/core/tensor.hpp"

namespace receler {

// Binary spatial mask of where a concept's tokens attend, taken at the
// mid (image/4) resolution, with cached bicubic upscalings per layer size.
struct ConceptMask {
    Tensor m;  // (S, S), entries 0 or 1
    double tau = 0.0;
    std::vector<int> source_layers;

    int size() const { return m.dim(0); }

    const Tensor& upscaled(int target) const {
        auto it = cache_.find(target);
        if (it != cache_.end()) return it->second;
        Tensor up = bicubic_upscale(m, target);
        for (size_t i = 0; i < up.size(); ++i) up[i] = std::clamp(up[i], 0.0, 1.0);
        return cache_.emplace(target, std::move(up)).first->second;
    }

    static Tensor bicubic_upscale(const Tensor& src, int target) {
        const int n = src.dim(0);
        if (src.ndim() != 2 || src.dim(1) != n) throw std::invalid_argument("bicubic_upscale: want square (S,S)");
        if (target == n) return src;
        if (target < n) throw std::invalid_argument("bicubic_upscale: target below source resolution");
        Tensor out(Shape{target, target});
        const double f = static_cast<double>(n) / target;
        auto kern = [](double x) {
            // Catmull-Rom (a = -0.5)
            x = std::fabs(x);
            if (x < 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
            if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
            return 0.0;
        };
        for (int oy = 0; oy < target; ++oy) {
            const double sy = (oy + 0.5) * f - 0.5;
            const int y0 = static_cast<int>(std::floor(sy));
            for (int ox = 0; ox < target; ++ox) {
                const double sx = (ox + 0.5) * f - 0.5;
                const int x0 = static_cast<int>(std::floor(sx));
                double acc = 0.0;
                for (int dy = -1; dy <= 2; ++dy) {
                    const int yy = std::clamp(y0 + dy, 0, n - 1);
                    const double wy = kern(sy - (y0 + dy));
                    for (int dx = -1; dx <= 2; ++dx) {
                        const int xx = std::clamp(x0 + dx, 0, n - 1);
                        acc += wy * kern(sx - (x0 + dx)) * src[static_cast<size_t>(yy) * n + xx];
                    }
                }
                out[static_cast<size_t>(oy) * target + ox] = acc;
            }
        }
        return out;
    }

private:
    mutable std::map<int, Tensor> cache_;
};

// Mean-threshold mask from mid-layer attention maps of one sample.
// `attention` holds (HW, n_ctx) maps per layer; the concept's attention is
// the sum over `concept_positions` columns, optionally normalized by each
// layer map's own maximum so the threshold is scale-free.
inline ConceptMask extract_concept_mask(const std::map<int, Tensor>& attention,
                                        const std::vector<int>& concept_positions, double tau,
                                        const std::vector<int>& mid_layers, bool max_normalize = true) {
    if (concept_positions.empty()) throw std::invalid_argument("extract_concept_mask: empty concept token set");
    if (mid_layers.empty()) throw std::invalid_argument("extract_concept_mask: empty mid-layer set");

    Tensor mean;
    int hw = -1;
    for (int layer : mid_layers) {
        auto it = attention.find(layer);
        if (it == attention.end())
            throw std::invalid_argument("extract_concept_mask: missing attention map for mid-layer " +
                                        std::to_string(layer));
        const Tensor& amap = it->second;  // (HW, n)
        if (amap.ndim() != 2) throw std::invalid_argument("extract_concept_mask: maps must be (HW, n)");
        if (hw < 0) {
            hw = amap.dim(0);
            mean = Tensor(Shape{hw});
        } else if (amap.dim(0) != hw) {
            throw std::invalid_argument("extract_concept_mask: mid-layer maps disagree on resolution");
        }
        const int n = amap.dim(1);
        std::vector<double> conc(static_cast<size_t>(hw), 0.0);
        for (int p = 0; p < hw; ++p)
            for (int pos : concept_positions) {
                if (pos < 0 || pos >= n)
                    throw std::out_of_range("extract_concept_mask: concept position out of range");
                conc[static_cast<size_t>(p)] += amap[static_cast<size_t>(p) * n + pos];
            }
        if (max_normalize) {
            double mx = 0.0;
            for (double v : conc) mx = std::max(mx, v);
            if (mx > 0.0)
                for (double& v : conc) v /= mx;
        }
        for (int p = 0; p < hw; ++p) mean[static_cast<size_t>(p)] += conc[static_cast<size_t>(p)];
    }
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(hw))));
    if (side * side != hw) throw std::invalid_argument("extract_concept_mask: non-square attention map");

    ConceptMask cm;
    cm.tau = tau;
    cm.source_layers = mid_layers;
    cm.m = Tensor(Shape{side, side});
    const double inv = 1.0 / static_cast<double>(mid_layers.size());
    for (int p = 0; p < hw; ++p)
        cm.m[static_cast<size_t>(p)] = (mean[static_cast<size_t>(p)] * inv >= tau) ? 1.0 : 0.0;
    return cm;
}

// Batch wrapper over per-layer (B, HW, n) captures.
inline std::vector<ConceptMask> extract_concept_masks_batch(const std::map<int, Tensor>& attention_batched,
                                                            const std::vector<int>& concept_positions, double tau,
                                                            const std::vector<int>& mid_layers,
                                                            bool max_normalize = true) {
    int batch = -1;
    for (int layer : mid_layers) {
        auto it = attention_batched.find(layer);
        if (it == attention_batched.end())
            throw std::invalid_argument("extract_concept_masks_batch: missing mid-layer " + std::to_string(layer));
        if (batch < 0)
            batch = it->second.dim(0);
        else if (it->second.dim(0) != batch)
            throw std::invalid_argument("extract_concept_masks_batch: inconsistent batch");
    }
    std::vector<ConceptMask> out;
    for (int b = 0; b < batch; ++b) {
        std::map<int, Tensor> per;
        for (int layer : mid_layers) {
            const Tensor& t = attention_batched.at(layer);
            const int hw = t.dim(1), n = t.dim(2);
            Tensor slice(Shape{hw, n});
            std::copy(t.data() + static_cast<int64_t>(b) * hw * n, t.data() + static_cast<int64_t>(b + 1) * hw * n,
                      slice.data());
            per.emplace(layer, std::move(slice));
        }
        out.push_back(extract_concept_mask(per, concept_positions, tau, mid_layers, max_normalize));
    }
    return out;
}

}  // namespace receler
