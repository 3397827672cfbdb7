#pragma once

// DDPM machinery over transform vectors: cosine variance schedule, closed-form
// forward corruption, posterior mean, reverse step and the sampling loop.

#include <Eigen/Core>
#include <functional>
#include <iosfwd>
#include <utility>
#include <vector>

#include "pcrd/geom3d.hpp"

namespace pcrd {

// Diffusion state: 7 reals (quaternion + translation) or 6 under the Euler
// ablation. Never renormalized mid-chain.
using StateVec = Eigen::VectorXd;

// Arrays are indexed by timestep. betas/alphas/posterior_vars use 1..T and
// hold a zero at index 0; alpha_bars uses 0..T with alpha_bars[0] == 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> posterior_vars;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

NoiseSchedule cosine_schedule(int steps);

// sqrt(abar_t) * g0 + sqrt(1 - abar_t) * eps
StateVec forward_sample(const NoiseSchedule& sched, const StateVec& g0, int t, const StateVec& eps);
// One Markov transition q(g_t | g_{t-1}).
StateVec forward_step(const NoiseSchedule& sched, const StateVec& g_prev, int t, const StateVec& eps);

// Mean of q(g_{t-1} | g_t, g0) with g0 replaced by the network's estimate.
StateVec posterior_mean(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat, int t);

// Coefficients of the strided posterior q(g_next | g_now, g0):
// mean = c_g0 * g0 + c_gt * g_now, variance = var.
struct StepCoefficients {
  double c_g0 = 0.0;
  double c_gt = 0.0;
  double var = 0.0;
};
StepCoefficients step_coefficients(const NoiseSchedule& sched, int t_now, int t_next);

// Reverse step t_now -> t_next. `z` is ignored when t_next == 0.
StateVec ddpm_step(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat, int t_now,
                   int t_next, const StateVec& z);
// Same step written through the implied noise estimate; kept as a cross-check.
StateVec ddpm_step_eps_form(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat,
                            int t_now, int t_next, const StateVec& z);

// Evenly spaced descending (t_now, t_next) pairs from T down to 0.
std::vector<std::pair<int, int>> timestep_pairs(int total_steps, int sampling_steps);

using Denoiser = std::function<StateVec(const StateVec& g_t, int t)>;

// Starts from g_T ~ N(0, I), walks timestep_pairs and returns the last
// clean-state prediction of the denoiser.
StateVec sample_loop(const Denoiser& denoiser, const NoiseSchedule& sched, int sampling_steps,
                     Eigen::Index dim, Rng& rng);

StateVec standard_normal(Eigen::Index dim, Rng& rng);

// CSV: t,beta,alpha_bar,posterior_var
void write_schedule_csv(std::ostream& out, const NoiseSchedule& sched);

}  // namespace pcrd
