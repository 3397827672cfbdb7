#pragma once

// Registration metrics, the ICP baseline and sampling-time evaluation.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcrd/datasyn.hpp"
#include "pcrd/diffusion.hpp"
#include "pcrd/geom3d.hpp"
#include "pcrd/nnkit.hpp"
#include "pcrd/regnet.hpp"

namespace pcrd::eval {

// Geodesic angle between two rotations in degrees, in [0, 180].
double mie_rotation(const Mat3& r_gt, const Mat3& r_est);
double mie_translation(const Vec3& t_gt, const Vec3& t_est);

// Z-Y-X angles without the gimbal-lock check, for error reporting.
Vec3 euler_angles_deg(const Mat3& rotation);

struct MetricsRecord {
  std::string pair_id;
  std::string regime;
  int steps = 0;
  double mie_r = 0.0;  // degrees
  double mie_t = 0.0;
  double mae_r = 0.0;  // degrees
  double mae_t = 0.0;
  double rmse_r = 0.0;  // degrees
  double rmse_t = 0.0;
  double wall_time_s = 0.0;
};

// Per-pair record. MAE/RMSE over the three wrapped Euler-angle differences
// and the three translation components.
MetricsRecord pair_metrics(const RigidTransform& gt, const RigidTransform& est);

// Means over pairs; RMSE is the root of the mean squared per-axis error.
// Throws EmptySet.
MetricsRecord aggregate(std::span<const MetricsRecord> records);
MetricsRecord mae_rmse(std::span<const RigidTransform> gt, std::span<const RigidTransform> est);

struct IcpOptions {
  int max_iters = 10;
  double tol = 1e-6;
};

struct IcpResult {
  RigidTransform transform;  // best by symmetric Chamfer, identity included
  int iterations = 0;
  bool converged = false;
  // Per iteration: mean squared distance of moved P to its matched Q points
  // (the quantity each update minimizes) and the symmetric Chamfer distance.
  std::vector<double> objective;
  std::vector<double> chamfer;
};

// Point-to-point ICP aligning P onto Q with exact nearest neighbours.
IcpResult icp(const Cloud& source, const Cloud& target, const IcpOptions& opts = {});

struct EvalOptions {
  int steps = 1;
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Produces a denoiser bound to one pair. Called once per pair.
using DenoiserFactory = std::function<Denoiser(const RegPair&)>;

// Runs sample_loop per pair and scores the prediction. Pair k draws its noise
// from derive_seed(seed, k), so results do not depend on `jobs`.
std::vector<MetricsRecord> evaluate(const DenoiserFactory& factory, regnet::Representation repr,
                                    const NoiseSchedule& sched, std::span<const RegPair> pairs,
                                    const EvalOptions& opts);
std::vector<MetricsRecord> evaluate(const regnet::Model& model, const nn::ParamStore& store,
                                    const NoiseSchedule& sched, std::span<const RegPair> pairs,
                                    const EvalOptions& opts);

// Scores a deterministic estimator such as ICP.
std::vector<MetricsRecord> evaluate_estimator(const std::function<RigidTransform(const RegPair&)>& estimate,
                                              std::span<const RegPair> pairs, int steps_label, int jobs = 1);

// One registration: encode both clouds once, sample, convert to a transform.
RigidTransform register_clouds(const regnet::Model& model, const nn::ParamStore& store, const NoiseSchedule& sched,
                               const Cloud& source, const Cloud& target, int steps, Rng& rng);

// Results table with a trailing "aggregate" row.
void write_results_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records);

}  // namespace pcrd::eval
