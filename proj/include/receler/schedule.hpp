#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "receler/core/manifest.hpp"
#include "receler/core/tensor.hpp"

namespace receler {

// Variance schedule for the forward (noising) process. Timesteps run
// 1..num_steps; index 0 is the clean image, with cumulative alpha product 1.
class NoiseSchedule {
public:
    static NoiseSchedule linear(int num_steps, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (num_steps < 1) throw std::invalid_argument("NoiseSchedule: num_steps must be positive");
        std::vector<double> betas(static_cast<size_t>(num_steps));
        for (int i = 0; i < num_steps; ++i)
            betas[static_cast<size_t>(i)] =
                num_steps == 1 ? beta_start
                               : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (num_steps - 1);
        return NoiseSchedule(std::move(betas), beta_start, beta_end);
    }

    explicit NoiseSchedule(std::vector<double> betas, double beta_start = 0, double beta_end = 0)
        : betas_(std::move(betas)), beta_start_(beta_start), beta_end_(beta_end) {
        abar_.resize(betas_.size() + 1);
        abar_[0] = 1.0;
        for (size_t i = 0; i < betas_.size(); ++i) {
            if (betas_[i] <= 0.0 || betas_[i] >= 1.0)
                throw std::invalid_argument("NoiseSchedule: betas must lie strictly in (0,1)");
            abar_[i + 1] = abar_[i] * (1.0 - betas_[i]);
            if (abar_[i + 1] >= abar_[i])
                throw std::logic_error("NoiseSchedule: cumulative alpha products must strictly decrease");
        }
    }

    int num_steps() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_.at(static_cast<size_t>(t - 1)); }
    // cumulative alpha product at timestep t in [0, num_steps]
    double alpha_bar(int t) const { return abar_.at(static_cast<size_t>(t)); }

    // q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
    Tensor q_sample(const Tensor& x0, int t, const Tensor& noise) const {
        if (t < 0 || t > num_steps()) throw std::out_of_range("q_sample: timestep out of range");
        if (!x0.same_shape(noise))
            throw std::invalid_argument("q_sample: noise shape " + shape_str(noise.shape()) +
                                        " does not match x0 " + shape_str(x0.shape()));
        const double a = std::sqrt(alpha_bar(t));
        const double s = std::sqrt(1.0 - alpha_bar(t));
        Tensor out(x0.shape());
        for (size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + s * noise[i];
        return out;
    }

    Json to_json() const {
        return Json{{"num_steps", num_steps()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
    }
    static NoiseSchedule from_json(const Json& j) {
        return linear(j.at("num_steps").get<int>(), j.at("beta_start").get<double>(),
                      j.at("beta_end").get<double>());
    }

private:
    std::vector<double> betas_;
    std::vector<double> abar_;
    double beta_start_, beta_end_;
};

}  // namespace receler
