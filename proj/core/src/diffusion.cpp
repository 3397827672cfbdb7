#include "pcrd/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <string>

#include "pcrd/error.hpp"

namespace pcrd {

namespace {

void check_step(const NoiseSchedule& sched, int t, int lo) {
  if (t < lo || t > sched.steps) {
    throw Error(ErrorCode::StepOutOfRange,
                "timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                    std::to_string(sched.steps) + "]");
  }
}

void check_dims(const StateVec& a, const StateVec& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "state vectors differ in length");
}

}  // namespace

NoiseSchedule cosine_schedule(int steps) {
  if (steps < 1) throw Error(ErrorCode::BadStepCount, "schedule needs T >= 1");
  const auto f = [&](int t) {
    const double x = (static_cast<double>(t) / steps + kCosineOffset) / (1.0 + kCosineOffset);
    const double c = std::cos(x * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule s;
  s.steps = steps;
  s.betas.assign(steps + 1, 0.0);
  s.alphas.assign(steps + 1, 0.0);
  s.alpha_bars.assign(steps + 1, 1.0);
  s.posterior_vars.assign(steps + 1, 0.0);
  const double f0 = f(0);
  for (int t = 1; t <= steps; ++t) {
    const double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
    s.betas[t] = std::min(beta, kMaxBeta);
    s.alphas[t] = 1.0 - s.betas[t];
    // Recomputed as a running product so clipping keeps abar consistent with the betas.
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
    s.posterior_vars[t] = (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]) * s.betas[t];
  }
  return s;
}

StateVec forward_sample(const NoiseSchedule& sched, const StateVec& g0, int t, const StateVec& eps) {
  check_step(sched, t, 1);
  check_dims(g0, eps);
  const double ab = sched.alpha_bars[t];
  return std::sqrt(ab) * g0 + std::sqrt(1.0 - ab) * eps;
}

StateVec forward_step(const NoiseSchedule& sched, const StateVec& g_prev, int t, const StateVec& eps) {
  check_step(sched, t, 1);
  check_dims(g_prev, eps);
  return std::sqrt(sched.alphas[t]) * g_prev + std::sqrt(sched.betas[t]) * eps;
}

StepCoefficients step_coefficients(const NoiseSchedule& sched, int t_now, int t_next) {
  check_step(sched, t_now, 1);
  check_step(sched, t_next, 0);
  if (t_next >= t_now) {
    throw Error(ErrorCode::BadStepOrder,
                "t_next " + std::to_string(t_next) + " must be below t_now " + std::to_string(t_now));
  }
  const double ab_now = sched.alpha_bars[t_now];
  const double ab_next = sched.alpha_bars[t_next];
  const double alpha = ab_now / ab_next;  // product of alphas over the stride
  const double beta = 1.0 - alpha;
  StepCoefficients c;
  c.c_g0 = std::sqrt(ab_next) * beta / (1.0 - ab_now);
  c.c_gt = std::sqrt(alpha) * (1.0 - ab_next) / (1.0 - ab_now);
  c.var = std::max(0.0, (1.0 - ab_next) / (1.0 - ab_now) * beta);
  return c;
}

StateVec posterior_mean(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat, int t) {
  check_dims(g_t, g0_hat);
  const StepCoefficients c = step_coefficients(sched, t, t - 1);
  return c.c_g0 * g0_hat + c.c_gt * g_t;
}

StateVec ddpm_step(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat, int t_now,
                   int t_next, const StateVec& z) {
  check_dims(g_t, g0_hat);
  const StepCoefficients c = step_coefficients(sched, t_now, t_next);
  StateVec out = c.c_g0 * g0_hat + c.c_gt * g_t;
  if (t_next > 0) {
    check_dims(g_t, z);
    out += std::sqrt(c.var) * z;
  }
  return out;
}

StateVec ddpm_step_eps_form(const NoiseSchedule& sched, const StateVec& g_t, const StateVec& g0_hat,
                            int t_now, int t_next, const StateVec& z) {
  check_dims(g_t, g0_hat);
  const StepCoefficients c = step_coefficients(sched, t_now, t_next);
  const double ab_now = sched.alpha_bars[t_now];
  const double alpha = ab_now / sched.alpha_bars[t_next];
  const StateVec eps_hat = (g_t - std::sqrt(ab_now) * g0_hat) / std::sqrt(1.0 - ab_now);
  StateVec out = (g_t - (1.0 - alpha) / std::sqrt(1.0 - ab_now) * eps_hat) / std::sqrt(alpha);
  if (t_next > 0) {
    check_dims(g_t, z);
    out += std::sqrt(c.var) * z;
  }
  return out;
}

std::vector<std::pair<int, int>> timestep_pairs(int total_steps, int sampling_steps) {
  if (sampling_steps < 1 || sampling_steps > total_steps) {
    throw Error(ErrorCode::BadStepCount, "sampling steps must lie in [1, T]");
  }
  // t_k = T - round(k * T / steps); spacing >= 1 keeps the sequence strictly decreasing.
  const auto time_at = [&](long k) {
    const long num = 2L * k * total_steps + sampling_steps;
    return total_steps - static_cast<int>(num / (2L * sampling_steps));
  };
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<size_t>(sampling_steps));
  for (int k = 0; k < sampling_steps; ++k) pairs.emplace_back(time_at(k), time_at(k + 1));
  pairs.back().second = 0;
  return pairs;
}

StateVec standard_normal(Eigen::Index dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  StateVec v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

StateVec sample_loop(const Denoiser& denoiser, const NoiseSchedule& sched, int sampling_steps,
                     Eigen::Index dim, Rng& rng) {
  const auto pairs = timestep_pairs(sched.steps, sampling_steps);
  StateVec g = standard_normal(dim, rng);
  StateVec pred;
  for (const auto& [t_now, t_next] : pairs) {
    pred = denoiser(g, t_now);
    if (pred.size() != dim) throw Error(ErrorCode::ShapeMismatch, "denoiser changed the state dimension");
    const StateVec z = t_next > 0 ? standard_normal(dim, rng) : StateVec::Zero(dim);
    g = ddpm_step(sched, g, pred, t_now, t_next, z);
  }
  return pred;
}

void write_schedule_csv(std::ostream& out, const NoiseSchedule& sched) {
  out << "t,beta,alpha_bar,posterior_var\n" << std::setprecision(17);
  for (int t = 1; t <= sched.steps; ++t) {
    out << t << ',' << sched.betas[t] << ',' << sched.alpha_bars[t] << ',' << sched.posterior_vars[t] << '\n';
  }
}

}  // namespace pcrd
