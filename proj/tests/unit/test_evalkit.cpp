#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Geometry>

#include "pcrd/error.hpp"
#include "pcrd/evalkit.hpp"
#include "test_support.hpp"

namespace pcrd::eval {
namespace {

constexpr double kPi = std::numbers::pi;

Mat3 axis_rotation(const Vec3& axis, double deg) {
  return Eigen::AngleAxisd(deg * kPi / 180.0, axis.normalized()).toRotationMatrix();
}

RigidTransform rotation_only(const Mat3& r) { return RigidTransform::from_matrix(r, Vec3::Zero()); }

std::vector<std::string> csv_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

// Everything but the trailing time_s column.
std::string strip_time(const std::string& row) { return row.substr(0, row.rfind(',')); }

TEST(Mie, RotationExamples) {
  const Mat3 eye = Mat3::Identity();
  EXPECT_EQ(mie_rotation(eye, eye), 0.0);
  EXPECT_NEAR(mie_rotation(eye, axis_rotation(Vec3::UnitZ(), 90)), 90.0, 1e-12);
  EXPECT_NEAR(mie_rotation(eye, axis_rotation(Vec3::UnitX(), 180)), 180.0, 1e-12);
  Mat3 mirror = eye;
  mirror(0, 0) = -1;
  EXPECT_THROW(mie_rotation(eye, mirror), Error);
}

TEST(Mie, MetricProperties) {
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const Mat3 a = random_transform(rng, 170, 0).rotation_matrix();
    const Mat3 b = random_transform(rng, 170, 0).rotation_matrix();
    const Mat3 c = random_transform(rng, 170, 0).rotation_matrix();
    EXPECT_NEAR(mie_rotation(a, b), mie_rotation(b, a), 1e-9);
    EXPECT_LE(mie_rotation(a, c), mie_rotation(a, b) + mie_rotation(b, c) + 1e-6);
    EXPECT_NEAR(mie_rotation(a, a), 0.0, 1e-5);
  }
}

TEST(Mie, Translation) {
  EXPECT_EQ(mie_translation(Vec3::Zero(), Vec3::Zero()), 0.0);
  EXPECT_EQ(mie_translation(Vec3::Zero(), Vec3(3, 4, 0)), 5.0);
  EXPECT_EQ(mie_translation(Vec3(1, 2, 3), Vec3(-1, 0, 2)), mie_translation(Vec3(-1, 0, 2), Vec3(1, 2, 3)));
}

TEST(MaeRmse, HandComputedSingleAxis) {
  const RigidTransform gt = RigidTransform::identity();
  const RigidTransform est = rotation_only(axis_rotation(Vec3::UnitZ(), 10));
  const MetricsRecord m = mae_rmse(std::vector{gt}, std::vector{est});
  EXPECT_NEAR(m.mae_r, 10.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.rmse_r, 10.0 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(m.mie_r, 10.0, 1e-12);
  EXPECT_EQ(m.mae_t, 0.0);

  const MetricsRecord zero = mae_rmse(std::vector{gt}, std::vector{gt});
  EXPECT_EQ(zero.mae_r, 0.0);
  EXPECT_EQ(zero.rmse_r, 0.0);
  EXPECT_EQ(zero.mie_r, 0.0);
  EXPECT_EQ(zero.mie_t, 0.0);
  EXPECT_THROW(mae_rmse(std::vector<RigidTransform>{}, std::vector<RigidTransform>{}), Error);
}

TEST(MaeRmse, WrapsAndBoundsAndOrderInvariance) {
  // Yaw 179 vs -179 is a 2 degree error, not 358.
  const RigidTransform a = rotation_only(axis_rotation(Vec3::UnitZ(), 179));
  const RigidTransform b = rotation_only(axis_rotation(Vec3::UnitZ(), -179));
  EXPECT_NEAR(pair_metrics(a, b).mae_r, 2.0 / 3.0, 1e-9);

  Rng rng(2);
  std::vector<RigidTransform> gt, est;
  for (int k = 0; k < 50; ++k) {
    gt.push_back(random_transform(rng, 45, 1));
    est.push_back(random_transform(rng, 45, 1));
  }
  const MetricsRecord m = mae_rmse(gt, est);
  EXPECT_GE(m.rmse_r, m.mae_r);
  EXPECT_GE(m.rmse_t, m.mae_t);
  std::reverse(gt.begin(), gt.end());
  std::reverse(est.begin(), est.end());
  const MetricsRecord r = mae_rmse(gt, est);
  EXPECT_NEAR(r.mae_r, m.mae_r, 1e-12);
  EXPECT_NEAR(r.rmse_r, m.rmse_r, 1e-12);
  EXPECT_NEAR(r.mie_t, m.mie_t, 1e-12);
}

TEST(Icp, IdentityOnIdenticalClouds) {
  const auto pairs = testing::small_pairs(1, 64, 3);
  const IcpResult r = icp(pairs[0].source, pairs[0].source);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(rotation_angle(r.transform.rotation_matrix(), Mat3::Identity()), 1e-9);
  EXPECT_LT(r.transform.translation.norm(), 1e-12);
}

TEST(Icp, ConvergesFromSmallPerturbations) {
  const auto pairs = testing::small_pairs(10, 128, 4);
  Rng rng(5);
  for (const RegPair& p : pairs) {
    const RigidTransform g = random_transform(rng, 10.0, 0.1);
    const IcpResult r = icp(p.source, apply(g, p.source), {50, 1e-9});
    EXPECT_LT(rotation_angle(r.transform.rotation_matrix(), g.rotation_matrix()), 1e-3) << p.meta.id;
    for (size_t k = 1; k < r.objective.size(); ++k) EXPECT_LE(r.objective[k], r.objective[k - 1] + 1e-15);
  }
}

TEST(Icp, Errors) {
  Cloud two(2, 3);
  two.setRandom();
  EXPECT_THROW(icp(two, two), Error);
}

TEST(Evaluate, OracleGivesZeroErrorsAndJobsDoNotMatter) {
  const auto pairs = testing::small_pairs(6, 32, 6);
  const NoiseSchedule sched = cosine_schedule(100);
  const DenoiserFactory oracle = [](const RegPair& p) -> Denoiser {
    const StateVec g0 = regnet::transform_to_state(p.g_gt, regnet::Representation::Quat7);
    return [g0](const StateVec&, int) { return g0; };
  };
  for (int steps : {1, 2, 4, 8}) {
    const auto records = evaluate(oracle, regnet::Representation::Quat7, sched, pairs, {steps, 7, 1});
    const MetricsRecord agg = aggregate(records);
    EXPECT_LT(agg.mie_r, 1e-6);
    EXPECT_LT(agg.mie_t, 1e-6);
    EXPECT_LT(agg.mae_r, 1e-6);
    EXPECT_LT(agg.rmse_t, 1e-6);
    EXPECT_EQ(agg.steps, steps);
  }
  EXPECT_THROW(evaluate(oracle, regnet::Representation::Quat7, sched, pairs, {0, 7, 1}), Error);
}

TEST(Evaluate, ModelResultsDeterministicAcrossJobs) {
  const auto pairs = testing::small_pairs(6, 32, 8);
  auto model = regnet::make_model(testing::tiny_cf_config());
  nn::ParamStore store;
  Rng init(9);
  model->init(store, init);
  const NoiseSchedule sched = cosine_schedule(model->config().diffusion_steps);
  model->counters().reset();
  const auto serial = evaluate(*model, store, sched, pairs, {4, 11, 1});
  EXPECT_EQ(model->counters().cloud_encodings, 12);
  EXPECT_EQ(model->counters().decoder_passes, 24);
  EXPECT_EQ(model->counters().source_reapplied, 0);
  const auto parallel = evaluate(*model, store, sched, pairs, {4, 11, 3});
  ASSERT_EQ(serial.size(), parallel.size());
  for (size_t k = 0; k < serial.size(); ++k) {
    EXPECT_EQ(serial[k].pair_id, parallel[k].pair_id);
    EXPECT_EQ(serial[k].mie_r, parallel[k].mie_r);
    EXPECT_EQ(serial[k].mie_t, parallel[k].mie_t);
  }

  Rng a(12), b(12);
  const RigidTransform ga = register_clouds(*model, store, sched, pairs[0].source, pairs[0].target, 2, a);
  const RigidTransform gb = register_clouds(*model, store, sched, pairs[0].source, pairs[0].target, 2, b);
  EXPECT_EQ(transform_to_vec7(ga), transform_to_vec7(gb));
}

TEST(Evaluate, ResultsCsvLayout) {
  testing::TempDir dir("csv");
  const auto pairs = testing::small_pairs(3, 32, 10);
  const auto records =
      evaluate_estimator([](const RegPair& p) { return icp(p.source, p.target).transform; }, pairs, 1, 2);
  write_results_csv(dir.path() / "r.csv", records);
  const auto lines = csv_lines(dir.path() / "r.csv");
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0].front(), '#');
  EXPECT_EQ(lines[1], "pair_id,regime,steps,mie_r_deg,mie_t,mae_r_deg,mae_t,rmse_r_deg,rmse_t,time_s");
  EXPECT_EQ(lines[2].substr(0, 3), "p0,");
  EXPECT_EQ(lines[5].substr(0, 10), "aggregate,");

  write_results_csv(dir.path() / "again.csv", records);
  const auto again = csv_lines(dir.path() / "again.csv");
  for (size_t k = 0; k < lines.size(); ++k) EXPECT_EQ(strip_time(lines[k]), strip_time(again[k]));
}

}  // namespace
}  // namespace pcrd::eval
