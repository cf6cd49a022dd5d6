#include "petdiff/diffusion.hpp"

#include <cmath>
#include <string>

#include "petdiff/errors.hpp"

namespace petdiff {

size_t NoiseSchedule::check(int t) const {
    if (t < 1 || t > T) {
        throw IndexError("schedule: step " + std::to_string(t) + " outside {1.." +
                         std::to_string(T) + "}");
    }
    return static_cast<size_t>(t - 1);
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));
    double running = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = (T == 1) ? 0.0 : static_cast<double>(i) / (T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        running *= s.alpha[i];
        s.alpha_bar[i] = running;
        s.sigma[i] = std::sqrt(s.beta[i]);
    }
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape()) {
        throw DimError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                       shape_str(eps.shape()));
    }
    const double abar = sched.alpha_bar_at(t);
    return add(scale(x0, static_cast<float>(std::sqrt(abar))),
               scale(eps, static_cast<float>(std::sqrt(1.0 - abar))));
}

Tensor noise_loss(const Tensor& eps_true, const Tensor& eps_pred) {
    if (eps_true.shape() != eps_pred.shape()) {
        throw DimError("noise_loss: " + shape_str(eps_true.shape()) + " vs " +
                       shape_str(eps_pred.shape()));
    }
    Tensor d = sub(eps_pred, eps_true);
    return mean_all(mul(d, d));
}

Tensor posterior_step(const Tensor& x_t, const Tensor& eps_pred, int t, const Tensor& z,
                      const NoiseSchedule& sched) {
    if (x_t.shape() != eps_pred.shape() || x_t.shape() != z.shape()) {
        throw DimError("posterior_step: shape mismatch among x_t/eps_pred/z");
    }
    const double beta = sched.beta_at(t);
    const double alpha = sched.alpha_at(t);
    const double abar = sched.alpha_bar_at(t);
    const float eps_coef = static_cast<float>(beta / std::sqrt(1.0 - abar));
    const float inv_sqrt_alpha = static_cast<float>(1.0 / std::sqrt(alpha));
    Tensor mean = scale(sub(x_t, scale(eps_pred, eps_coef)), inv_sqrt_alpha);
    return add(mean, scale(z, static_cast<float>(sched.sigma_at(t))));
}

}  // namespace petdiff
