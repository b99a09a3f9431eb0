#pragma once

#include <vector>

#include "diffseg/tensor.hpp"

namespace diffseg {

// Noise schedule: per-step variances and their running products.
struct Schedule {
    int train_steps = 0;
    std::vector<float> betas;          // length train_steps, values in (0,1)
    std::vector<float> alphas_cumprod; // running product of (1 - beta), nonincreasing

    float alpha_bar(int t) const;
    void validate() const;
};

// Linear beta ramp from beta_start to beta_end over train_steps entries.
Schedule make_noise_schedule(int train_steps, float beta_start, float beta_end);

// Image-shaped latent annotated with the schedule step it sits at.
struct LatentImage {
    Tensor data;      // [C,H,W] or [N,C,H,W]
    int timestep = 0; // in [0, train_steps]

    LatentImage() = default;
    LatentImage(Tensor d, int t) : data(std::move(d)), timestep(t) {}
};

// Forward q-sample: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.
LatentImage add_noise(const LatentImage& x0, const Tensor& eps, int t, const Schedule& sched);

// Deterministic inversion step t -> t_next (t_next >= t):
// xhat0 = (x_t - sqrt(1-abar_t)*eps)/sqrt(abar_t);
// x_next = sqrt(abar_next)*xhat0 + sqrt(1-abar_next)*eps.
LatentImage ddim_invert_step(const LatentImage& x_t, const Tensor& eps_hat, int t, int t_next,
                             const Schedule& sched);

// Deterministic denoise step t -> t_prev (t_prev <= t); exact inverse of the
// inversion step when fed the same eps_hat.
LatentImage ddim_denoise_step(const LatentImage& x_t, const Tensor& eps_hat, int t, int t_prev,
                              const Schedule& sched);

} // namespace diffseg
