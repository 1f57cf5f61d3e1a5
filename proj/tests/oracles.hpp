#pragma once

// Independent brute-force references used by unit and acceptance tests.
// These are written against the documented conventions only and never call
// into the library paths they check.

#include <cmath>
#include <map>
#include <vector>

#include "receler/core/tensor.hpp"

namespace oracle {

// eps_E = u - eta * (c - u), element by element
inline std::vector<double> negatively_guided(const std::vector<double>& u, const std::vector<double>& c,
                                             double eta) {
    std::vector<double> out(u.size());
    for (size_t i = 0; i < u.size(); ++i) out[i] = u[i] - eta * (c[i] - u[i]);
    return out;
}

// per-element mean square of (a - b)
inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

// mean over layers of per-element mean square of o * (1 - mask_weight),
// where mask_weight (per layer) is already at the layer resolution and is
// broadcast across the trailing feature axis.
inline double masked_reg(const std::vector<std::vector<double>>& layer_outputs,
                         const std::vector<std::vector<double>>& layer_masks, int feature_dim) {
    double total = 0.0;
    for (size_t l = 0; l < layer_outputs.size(); ++l) {
        const auto& o = layer_outputs[l];
        const auto& m = layer_masks[l];
        double acc = 0.0;
        for (size_t i = 0; i < o.size(); ++i) {
            const double w = 1.0 - m[i / static_cast<size_t>(feature_dim)];
            acc += (o[i] * w) * (o[i] * w);
        }
        total += acc / static_cast<double>(o.size());
    }
    return total / static_cast<double>(layer_outputs.size());
}

// naive mean-then-threshold concept mask; maps are (HW x n) row-major
inline std::vector<double> concept_mask(const std::map<int, std::vector<double>>& maps,
                                        const std::vector<int>& positions, double tau,
                                        const std::vector<int>& layer_set, int hw, int n, bool max_normalize) {
    std::vector<double> mean(static_cast<size_t>(hw), 0.0);
    for (int layer : layer_set) {
        const auto& amap = maps.at(layer);
        std::vector<double> conc(static_cast<size_t>(hw), 0.0);
        for (int p = 0; p < hw; ++p)
            for (int pos : positions) conc[static_cast<size_t>(p)] += amap[static_cast<size_t>(p) * n + pos];
        if (max_normalize) {
            double mx = 0.0;
            for (double v : conc) mx = std::max(mx, v);
            if (mx > 0.0)
                for (double& v : conc) v /= mx;
        }
        for (int p = 0; p < hw; ++p) mean[static_cast<size_t>(p)] += conc[static_cast<size_t>(p)];
    }
    std::vector<double> out(static_cast<size_t>(hw));
    for (int p = 0; p < hw; ++p)
        out[static_cast<size_t>(p)] =
            (mean[static_cast<size_t>(p)] / static_cast<double>(layer_set.size()) >= tau) ? 1.0 : 0.0;
    return out;
}

// harmonic mean of (100-E, 100-R, L); 0 when any component is 0
inline double harmonic_h(double e, double r, double l) {
    const double a = 100.0 - e, b = 100.0 - r, c = l;
    if (a == 0.0 || b == 0.0 || c == 0.0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

}  // namespace oracle
