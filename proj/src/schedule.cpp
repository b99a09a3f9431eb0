#include "diffseg/schedule.hpp"

#include <cmath>

namespace diffseg {

float Schedule::alpha_bar(int t) const {
    if (t < 0 || t >= train_steps)
        throw ParameterError("timestep " + std::to_string(t) + " outside schedule [0, " +
                             std::to_string(train_steps) + ")");
    return alphas_cumprod[static_cast<size_t>(t)];
}

void Schedule::validate() const {
    if (train_steps < 2) throw ParameterError("schedule needs at least 2 steps");
    if (betas.size() != static_cast<size_t>(train_steps) || alphas_cumprod.size() != static_cast<size_t>(train_steps))
        throw ParameterError("schedule arrays must have train_steps entries");
    double prod = 1.0;
    for (int t = 0; t < train_steps; ++t) {
        const float b = betas[static_cast<size_t>(t)];
        if (!(b > 0.0f && b < 1.0f)) throw ParameterError("beta out of (0,1)");
        prod *= 1.0 - b;
        const float ab = alphas_cumprod[static_cast<size_t>(t)];
        if (!(ab > 0.0f && ab <= 1.0f)) throw ParameterError("alpha_bar out of (0,1]");
        if (std::abs(ab - prod) > 1e-6) throw ParameterError("alpha_bar inconsistent with betas");
        if (t > 0 && ab > alphas_cumprod[static_cast<size_t>(t - 1)])
            throw ParameterError("alpha_bar must be nonincreasing");
    }
}

Schedule make_noise_schedule(int train_steps, float beta_start, float beta_end) {
    if (train_steps < 2) throw ParameterError("train_steps must be >= 2");
    if (!(beta_start > 0.0f) || !(beta_start <= beta_end) || !(beta_end < 1.0f))
        throw ParameterError("need 0 < beta_start <= beta_end < 1");
    Schedule s;
    s.train_steps = train_steps;
    s.betas.resize(static_cast<size_t>(train_steps));
    s.alphas_cumprod.resize(static_cast<size_t>(train_steps));
    double prod = 1.0;
    for (int t = 0; t < train_steps; ++t) {
        const double b = static_cast<double>(beta_start) +
                         (static_cast<double>(beta_end) - beta_start) * t / static_cast<double>(train_steps - 1);
        s.betas[static_cast<size_t>(t)] = static_cast<float>(b);
        prod *= 1.0 - b;
        s.alphas_cumprod[static_cast<size_t>(t)] = static_cast<float>(prod);
    }
    return s;
}

namespace {

void check_step_shapes(const Tensor& x, const Tensor& eps) {
    if (!x.same_shape(eps))
        throw ShapeError("latent " + x.shape_str() + " vs noise " + eps.shape_str());
}

Tensor affine_combine(const Tensor& a, float ca, const Tensor& b, float cb) {
    Tensor out(a.dims());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = ca * pa[i] + cb * pb[i];
    return out;
}

} // namespace

LatentImage add_noise(const LatentImage& x0, const Tensor& eps, int t, const Schedule& sched) {
    check_step_shapes(x0.data, eps);
    const float ab = sched.alpha_bar(t);
    return {affine_combine(x0.data, std::sqrt(ab), eps, std::sqrt(1.0f - ab)), t};
}

LatentImage ddim_invert_step(const LatentImage& x_t, const Tensor& eps_hat, int t, int t_next,
                             const Schedule& sched) {
    if (t_next < t) throw ParameterError("inversion requires t_next >= t");
    check_step_shapes(x_t.data, eps_hat);
    const float ab_t = sched.alpha_bar(t);
    const float ab_n = sched.alpha_bar(t_next);
    if (t_next == t) return {x_t.data, t};
    // x0 estimate, then re-noise at the target level with the same eps.
    const float inv_sqrt_ab = 1.0f / std::sqrt(ab_t);
    const float c_x = std::sqrt(ab_n) * inv_sqrt_ab;
    const float c_e = std::sqrt(1.0f - ab_n) - std::sqrt(ab_n) * std::sqrt(1.0f - ab_t) * inv_sqrt_ab;
    return {affine_combine(x_t.data, c_x, eps_hat, c_e), t_next};
}

LatentImage ddim_denoise_step(const LatentImage& x_t, const Tensor& eps_hat, int t, int t_prev,
                              const Schedule& sched) {
    if (t_prev > t) throw ParameterError("denoising requires t_prev <= t");
    check_step_shapes(x_t.data, eps_hat);
    const float ab_t = sched.alpha_bar(t);
    const float ab_p = sched.alpha_bar(t_prev);
    if (t_prev == t) return {x_t.data, t};
    const float inv_sqrt_ab = 1.0f / std::sqrt(ab_t);
    const float c_x = std::sqrt(ab_p) * inv_sqrt_ab;
    const float c_e = std::sqrt(1.0f - ab_p) - std::sqrt(ab_p) * std::sqrt(1.0f - ab_t) * inv_sqrt_ab;
    return {affine_combine(x_t.data, c_x, eps_hat, c_e), t_prev};
}

} // namespace diffseg
