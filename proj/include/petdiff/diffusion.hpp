#pragma once

#include <vector>

#include "petdiff/tensor.hpp"

namespace petdiff {

// Per-step constants of the forward/reverse chains. Arrays are stored
// 0-based; every interface speaks 1-based step indices t in {1..T}.
// sigma_t^2 = beta_t (untrained-variance choice).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha
    std::vector<double> sigma;      // sqrt(beta)

    double beta_at(int t) const { return beta[check(t)]; }
    double alpha_at(int t) const { return alpha[check(t)]; }
    double alpha_bar_at(int t) const { return alpha_bar[check(t)]; }
    double sigma_at(int t) const { return sigma[check(t)]; }

  private:
    size_t check(int t) const;  // IndexError outside {1..T}
};

// Linear beta ramp from beta_start (t=1) to beta_end (t=T).
// Requires T >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

// Closed-form forward draw: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Mean over elements of (eps_pred - eps_true)^2.
Tensor noise_loss(const Tensor& eps_true, const Tensor& eps_pred);

// One reverse ancestral step:
//   (x_t - beta_t/sqrt(1-abar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * z.
// The caller passes z = 0 at t = 1.
Tensor posterior_step(const Tensor& x_t, const Tensor& eps_pred, int t, const Tensor& z,
                      const NoiseSchedule& sched);

}  // namespace petdiff
