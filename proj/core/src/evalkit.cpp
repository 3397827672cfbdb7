#include "pcrd/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <thread>

#include <Eigen/LU>

#include "pcrd/error.hpp"

namespace pcrd::eval {

namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

void check_rotation(const Mat3& r, const char* what) {
  const double orth = (r.transpose() * r - Mat3::Identity()).norm();
  if (!(orth <= 1e-6) || r.determinant() <= 0.0) {
    throw Error(ErrorCode::NotARotation, std::string(what) + " is not a rotation matrix");
  }
}

double wrap_deg(double a) {
  a = std::fmod(a + 180.0, 360.0);
  if (a < 0.0) a += 360.0;
  return a - 180.0;
}

// Runs `body(k)` for k in [0, n) on up to `jobs` threads.
template <typename Body>
void parallel_for(size_t n, int jobs, Body&& body) {
  const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (size_t k = 0; k < n; ++k) body(k);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::jthread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      (void)w;
      for (size_t k = next++; k < n && !failed; k = next++) {
        try {
          body(k);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double symmetric_chamfer(const Cloud& a, const KdTree& a_index, const Cloud& b, const KdTree& b_index) {
  double ab = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) ab += b_index.nearest(a.row(i).transpose()).squared_distance;
  double ba = 0.0;
  for (Eigen::Index j = 0; j < b.rows(); ++j) ba += a_index.nearest(b.row(j).transpose()).squared_distance;
  return ab / static_cast<double>(a.rows()) + ba / static_cast<double>(b.rows());
}

}  // namespace

double mie_rotation(const Mat3& r_gt, const Mat3& r_est) {
  check_rotation(r_gt, "ground-truth rotation");
  check_rotation(r_est, "estimated rotation");
  const double c = std::clamp(((r_gt.transpose() * r_est).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * kRadToDeg;
}

double mie_translation(const Vec3& t_gt, const Vec3& t_est) { return (t_gt - t_est).norm(); }

Vec3 euler_angles_deg(const Mat3& r) {
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  double yaw, roll;
  if (std::abs(r(2, 0)) < 1.0 - 1e-12) {
    yaw = std::atan2(r(1, 0), r(0, 0));
    roll = std::atan2(r(2, 1), r(2, 2));
  } else {
    // Gimbal lock: only yaw - roll (or yaw + roll) is defined; put it all in yaw.
    yaw = std::atan2(-r(0, 1), r(1, 1));
    roll = 0.0;
  }
  return Vec3(yaw, pitch, roll) * kRadToDeg;
}

MetricsRecord pair_metrics(const RigidTransform& gt, const RigidTransform& est) {
  const Mat3 r_gt = gt.rotation_matrix();
  const Mat3 r_est = est.rotation_matrix();
  MetricsRecord m;
  m.mie_r = mie_rotation(r_gt, r_est);
  m.mie_t = mie_translation(gt.translation, est.translation);
  const Vec3 da = euler_angles_deg(r_est) - euler_angles_deg(r_gt);
  const Vec3 dr(wrap_deg(da[0]), wrap_deg(da[1]), wrap_deg(da[2]));
  const Vec3 dt = est.translation - gt.translation;
  m.mae_r = dr.cwiseAbs().mean();
  m.rmse_r = std::sqrt(dr.squaredNorm() / 3.0);
  m.mae_t = dt.cwiseAbs().mean();
  m.rmse_t = std::sqrt(dt.squaredNorm() / 3.0);
  return m;
}

MetricsRecord aggregate(std::span<const MetricsRecord> records) {
  if (records.empty()) throw Error(ErrorCode::EmptySet, "no records to aggregate");
  MetricsRecord a;
  a.pair_id = "aggregate";
  a.regime = records.front().regime;
  a.steps = records.front().steps;
  for (const auto& r : records) {
    if (r.regime != a.regime) a.regime = "mixed";
    a.mie_r += r.mie_r;
    a.mie_t += r.mie_t;
    a.mae_r += r.mae_r;
    a.mae_t += r.mae_t;
    a.rmse_r += r.rmse_r * r.rmse_r;
    a.rmse_t += r.rmse_t * r.rmse_t;
    a.wall_time_s += r.wall_time_s;
  }
  const auto n = static_cast<double>(records.size());
  a.mie_r /= n;
  a.mie_t /= n;
  a.mae_r /= n;
  a.mae_t /= n;
  a.rmse_r = std::sqrt(a.rmse_r / n);
  a.rmse_t = std::sqrt(a.rmse_t / n);
  a.wall_time_s /= n;
  return a;
}

MetricsRecord mae_rmse(std::span<const RigidTransform> gt, std::span<const RigidTransform> est) {
  if (gt.size() != est.size()) throw Error(ErrorCode::ShapeMismatch, "ground truth and estimates differ in count");
  std::vector<MetricsRecord> records;
  records.reserve(gt.size());
  for (size_t k = 0; k < gt.size(); ++k) records.push_back(pair_metrics(gt[k], est[k]));
  return aggregate(records);
}

IcpResult icp(const Cloud& source, const Cloud& target, const IcpOptions& opts) {
  if (source.rows() < 3 || target.rows() < 3) {
    throw Error(ErrorCode::DegenerateGeometry, "icp needs at least 3 points per cloud");
  }
  if (opts.max_iters < 1) throw Error(ErrorCode::BadCount, "icp max_iters must be >= 1");
  const KdTree target_index(target);
  IcpResult res;
  res.transform = RigidTransform::identity();
  RigidTransform current = RigidTransform::identity();
  double best = symmetric_chamfer(source, KdTree(source), target, target_index);
  Cloud matched(source.rows(), 3);
  for (int it = 0; it < opts.max_iters; ++it) {
    const Cloud moved = apply(current, source);
    for (Eigen::Index i = 0; i < moved.rows(); ++i) {
      matched.row(i) = target.row(target_index.nearest(moved.row(i).transpose()).index);
    }
    const RigidTransform next = kabsch(source, matched);
    const Cloud moved_next = apply(next, source);

    double objective = 0.0;
    for (Eigen::Index i = 0; i < moved_next.rows(); ++i) {
      objective += target_index.nearest(moved_next.row(i).transpose()).squared_distance;
    }
    res.objective.push_back(objective / static_cast<double>(source.rows()));
    const double chamfer = symmetric_chamfer(moved_next, KdTree(moved_next), target, target_index);
    res.chamfer.push_back(chamfer);
    res.iterations = it + 1;
    if (chamfer < best) {
      best = chamfer;
      res.transform = next;
    }

    const double change =
        rotation_angle(current.rotation_matrix(), next.rotation_matrix()) + (next.translation - current.translation).norm();
    current = next;
    if (change < opts.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

std::vector<MetricsRecord> evaluate(const DenoiserFactory& factory, regnet::Representation repr,
                                    const NoiseSchedule& sched, std::span<const RegPair> pairs,
                                    const EvalOptions& opts) {
  if (opts.steps < 1) throw Error(ErrorCode::BadStepCount, "sampling steps must be >= 1");
  std::vector<MetricsRecord> out(pairs.size());
  parallel_for(pairs.size(), opts.jobs, [&](size_t k) {
    const RegPair& pair = pairs[k];
    Rng rng(derive_seed(opts.seed, k));
    const auto start = std::chrono::steady_clock::now();
    const Denoiser denoiser = factory(pair);
    const StateVec g0 = sample_loop(denoiser, sched, opts.steps, regnet::state_dim(repr), rng);
    const RigidTransform est = regnet::state_to_transform(g0, repr);
    const double elapsed = seconds_since(start);
    MetricsRecord m = pair_metrics(pair.g_gt, est);
    m.pair_id = pair.meta.id;
    m.regime = to_string(pair.meta.regime);
    m.steps = opts.steps;
    m.wall_time_s = elapsed;
    out[k] = std::move(m);
  });
  return out;
}

std::vector<MetricsRecord> evaluate(const regnet::Model& model, const nn::ParamStore& store,
                                    const NoiseSchedule& sched, std::span<const RegPair> pairs,
                                    const EvalOptions& opts) {
  const DenoiserFactory factory = [&](const RegPair& pair) -> Denoiser {
    std::shared_ptr<const regnet::Conditioning> cond = model.encode(store, pair.source, pair.target);
    return [&model, &store, cond](const StateVec& g_t, int t) { return model.decode(store, *cond, g_t, t); };
  };
  return evaluate(factory, model.config().repr, sched, pairs, opts);
}

std::vector<MetricsRecord> evaluate_estimator(const std::function<RigidTransform(const RegPair&)>& estimate,
                                              std::span<const RegPair> pairs, int steps_label, int jobs) {
  std::vector<MetricsRecord> out(pairs.size());
  parallel_for(pairs.size(), jobs, [&](size_t k) {
    const auto start = std::chrono::steady_clock::now();
    const RigidTransform est = estimate(pairs[k]);
    const double elapsed = seconds_since(start);
    MetricsRecord m = pair_metrics(pairs[k].g_gt, est);
    m.pair_id = pairs[k].meta.id;
    m.regime = to_string(pairs[k].meta.regime);
    m.steps = steps_label;
    m.wall_time_s = elapsed;
    out[k] = std::move(m);
  });
  return out;
}

RigidTransform register_clouds(const regnet::Model& model, const nn::ParamStore& store, const NoiseSchedule& sched,
                               const Cloud& source, const Cloud& target, int steps, Rng& rng) {
  const auto cond = model.encode(store, source, target);
  const Denoiser denoiser = [&](const StateVec& g_t, int t) { return model.decode(store, *cond, g_t, t); };
  const StateVec g0 = sample_loop(denoiser, sched, steps, model.state_dim(), rng);
  return regnet::state_to_transform(g0, model.config().repr);
}

void write_results_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << "# mie_r_deg = degrees(arccos(clamp((trace(R_gt^T R_est) - 1) / 2, -1, 1))); "
         "mae/rmse over Z-Y-X Euler angle differences wrapped to [-180, 180] and translation components\n";
  out << "pair_id,regime,steps,mie_r_deg,mie_t,mae_r_deg,mae_t,rmse_r_deg,rmse_t,time_s\n";
  out << std::setprecision(10);
  const auto row = [&](const MetricsRecord& r) {
    out << r.pair_id << ',' << r.regime << ',' << r.steps << ',' << r.mie_r << ',' << r.mie_t << ',' << r.mae_r << ','
        << r.mae_t << ',' << r.rmse_r << ',' << r.rmse_t << ',' << r.wall_time_s << '\n';
  };
  for (const auto& r : records) row(r);
  if (!records.empty()) row(aggregate(records));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace pcrd::eval
