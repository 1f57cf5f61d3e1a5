#pragma once

#include <map>
#include <vector>

#include "receler/backbone.hpp"
#include "receler/core/ops.hpp"
#include "receler/masks.hpp"

namespace receler {

// Target that steers the prediction away from the conditioned concept:
//   eps_E = eps_uncond - eta * (eps_cond - eps_uncond)
// computed under the frozen pre-trained model, no erasers attached.
inline Tensor negatively_guided_target(const Tensor& eps_uncond, const Tensor& eps_cond, double eta) {
    if (!eps_uncond.same_shape(eps_cond))
        throw std::invalid_argument("negatively_guided_target: shape mismatch " + shape_str(eps_uncond.shape()) +
                                    " vs " + shape_str(eps_cond.shape()));
    if (eta < 0.0) throw std::invalid_argument("negatively_guided_target: eta must be non-negative");
    Tensor out(eps_uncond.shape());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = eps_uncond[i] - eta * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// Per-element mean-square distance between the erased model's prediction and
// the negatively guided target. The mean convention keeps magnitudes
// resolution-independent.
inline Var erase_loss(const Var& pred, const Tensor& target) { return mse_const(pred, target); }

// Same convention for the adversarial objective against the malicious target.
inline Var adv_loss(const Var& pred_adv, const Tensor& malicious_target) {
    return mse_const(pred_adv, malicious_target);
}

// Mean over layers of the per-element mean square of eraser outputs outside
// the concept mask. Masks are per sample, upscaled (bicubically) to each
// layer's resolution and broadcast over the feature axis.
inline Var reg_loss(const std::map<int, Var>& eraser_outputs, const std::vector<ConceptMask>& masks) {
    if (eraser_outputs.empty()) throw std::invalid_argument("reg_loss: no eraser outputs");
    if (masks.empty()) throw std::invalid_argument("reg_loss: no masks");
    Var acc;
    for (const auto& [layer, o] : eraser_outputs) {
        const Shape& os = o.value().shape();  // (B, HW, d)
        if (os.size() != 3) throw std::invalid_argument("reg_loss: eraser outputs must be (B, HW, d)");
        const int B = os[0], hw = os[1];
        if (static_cast<size_t>(B) != masks.size())
            throw std::invalid_argument("reg_loss: mask count does not match the batch");
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(hw))));
        if (side * side != hw)
            throw std::invalid_argument("reg_loss: non-square layer output at layer " + std::to_string(layer));
        Tensor weight(Shape{B, hw});
        for (int b = 0; b < B; ++b) {
            const Tensor& up = masks[static_cast<size_t>(b)].upscaled(side);
            for (int p = 0; p < hw; ++p)
                weight[static_cast<size_t>(b) * hw + p] = 1.0 - up[static_cast<size_t>(p)];
        }
        Var term = mean_sq(mul_rows(o, weight));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(eraser_outputs.size()));
}

}  // namespace receler
