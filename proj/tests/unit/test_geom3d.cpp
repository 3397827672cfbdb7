#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/LU>

#include "pcrd/error.hpp"
#include "pcrd/geom3d.hpp"
#include "test_support.hpp"

namespace pcrd {
namespace {

constexpr double kPi = std::numbers::pi;

Quaternion random_unit_quaternion(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return quat_normalize({n(rng), n(rng), n(rng), n(rng)});
}

RigidTransform random_rigid(Rng& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  return {random_unit_quaternion(rng), Vec3(u(rng), u(rng), u(rng))};
}

Cloud random_cloud(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Cloud c(n, 3);
  for (int i = 0; i < n; ++i) c.row(i) << u(rng), u(rng), u(rng);
  return c;
}

void expect_quat_near(const Quaternion& a, const Quaternion& b, double tol) {
  EXPECT_NEAR(a.w, b.w, tol);
  EXPECT_NEAR(a.x, b.x, tol);
  EXPECT_NEAR(a.y, b.y, tol);
  EXPECT_NEAR(a.z, b.z, tol);
}

void expect_transform_near(const RigidTransform& a, const RigidTransform& b, double tol) {
  EXPECT_LE((a.matrix() - b.matrix()).cwiseAbs().maxCoeff(), tol);
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no pcrd::Error thrown";
  return ErrorCode::IoFailure;
}

TEST(Quaternion, NormalizeCanonicalizes) {
  expect_quat_near(quat_normalize({1, 0, 0, 0}), {1, 0, 0, 0}, 0.0);
  const double h = std::sqrt(0.5);
  expect_quat_near(quat_normalize({-h, 0, 0, -h}), {h, 0, 0, h}, 1e-15);
  expect_quat_near(quat_normalize({2, 0, 0, 0}), {1, 0, 0, 0}, 0.0);
  EXPECT_EQ(code_of([] { quat_normalize({0, 0, 0, 1e-9}); }), ErrorCode::DegenerateQuaternion);
}

TEST(Quaternion, ToMatrixClosedForm) {
  EXPECT_TRUE(quat_to_matrix({1, 0, 0, 0}).isApprox(Mat3::Identity()));
  const double h = std::sqrt(0.5);
  Mat3 rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((quat_to_matrix({h, 0, 0, h}) - rz).cwiseAbs().maxCoeff(), 1e-12);
  Mat3 rx;
  rx << 1, 0, 0, 0, -1, 0, 0, 0, -1;
  expect_quat_near(matrix_to_quat(rx), {0, 1, 0, 0}, 1e-12);
  expect_quat_near(matrix_to_quat(Mat3::Identity()), {1, 0, 0, 0}, 0.0);
}

TEST(Quaternion, MatrixRoundTrip) {
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const Quaternion q = random_unit_quaternion(rng);
    const Mat3 r = quat_to_matrix(q);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
    EXPECT_LT((r.transpose() * r - Mat3::Identity()).norm(), 1e-9);
    expect_quat_near(matrix_to_quat(r), q, 1e-9);
    // q and -q are the same rotation.
    EXPECT_LT((quat_to_matrix(-q) - r).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Quaternion, RejectsNonRotation) {
  Mat3 mirror = Mat3::Identity();
  mirror(2, 2) = -1.0;
  EXPECT_EQ(code_of([&] { matrix_to_quat(mirror); }), ErrorCode::NotARotation);
  EXPECT_EQ(code_of([] { matrix_to_quat(Mat3::Identity() * 1.1); }), ErrorCode::NotARotation);
}

TEST(Transform, ApplyBasics) {
  Cloud origin(1, 3);
  origin << 0, 0, 0;
  const RigidTransform shift{{1, 0, 0, 0}, Vec3(1, 0, 0)};
  EXPECT_TRUE(apply(shift, origin).row(0).isApprox(Eigen::RowVector3d(1, 0, 0)));
  Rng rng(2);
  const Cloud p = random_cloud(20, rng);
  EXPECT_EQ(apply(RigidTransform::identity(), p), p);
  EXPECT_EQ(code_of([] { apply(RigidTransform::identity(), Cloud(0, 3)); }), ErrorCode::EmptyCloud);
}

TEST(Transform, GroupLaws) {
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const RigidTransform a = random_rigid(rng), b = random_rigid(rng), c = random_rigid(rng);
    const Cloud p = random_cloud(10, rng);
    EXPECT_LT((apply(a, apply(b, p)) - apply(compose(a, b), p)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((compose(a, b).matrix() - a.matrix() * b.matrix()).cwiseAbs().maxCoeff(), 1e-9);
    expect_transform_near(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9);
    expect_transform_near(compose(a, inverse(a)), RigidTransform::identity(), 1e-9);
    expect_transform_near(compose(RigidTransform::identity(), a), a, 1e-12);
    EXPECT_LT((apply(inverse(a), apply(a, p)) - p).cwiseAbs().maxCoeff(), 1e-9);
    // Isometry.
    const Cloud q = apply(a, p);
    for (int i = 1; i < p.rows(); ++i) {
      EXPECT_NEAR((q.row(i) - q.row(0)).norm(), (p.row(i) - p.row(0)).norm(), 1e-9);
    }
  }
  expect_transform_near(inverse(RigidTransform::identity()), RigidTransform::identity(), 0.0);
}

TEST(Transform, TwoQuarterTurnsMakeHalfTurn) {
  const double h = std::sqrt(0.5);
  const RigidTransform quarter{{h, 0, 0, h}, Vec3::Zero()};
  const Mat3 r = compose(quarter, quarter).rotation_matrix();
  Mat3 half;
  half << -1, 0, 0, 0, -1, 0, 0, 0, 1;
  EXPECT_LT((r - half).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Transform, MatrixInvariants) {
  Rng rng(4);
  const Mat4 m = random_rigid(rng).matrix();
  const Mat3 r = m.topLeftCorner(3, 3);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
  EXPECT_EQ(m.row(3), Eigen::RowVector4d(0, 0, 0, 1));
}

TEST(Vec7, Conversions) {
  TransformVec7 v;
  v << 1, 0, 0, 0, 0, 0, 0;
  expect_transform_near(vec7_to_transform(v), RigidTransform::identity(), 0.0);
  v << 2, 0, 0, 0, 1, 2, 3;
  const RigidTransform g = vec7_to_transform(v);
  expect_quat_near(g.rotation, {1, 0, 0, 0}, 0.0);
  EXPECT_EQ(g.translation, Vec3(1, 2, 3));
  v << 1e-9, 0, 0, 0, 0, 0, 0;
  EXPECT_EQ(code_of([&] { vec7_to_transform(v); }), ErrorCode::DegenerateQuaternion);

  Rng rng(5);
  for (int k = 0; k < 1000; ++k) {
    const RigidTransform t = random_rigid(rng);
    const TransformVec7 c = transform_to_vec7(t);
    EXPECT_GE(c[0], 0.0);
    EXPECT_LT((transform_to_vec7(vec7_to_transform(c)) - c).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Euler, AnalyticAndRoundTrip) {
  EXPECT_EQ(euler_to_vec6(RigidTransform::identity()), TransformVec6::Zero());
  const double h = std::sqrt(0.5);
  const TransformVec6 v = euler_to_vec6({{h, 0, 0, h}, Vec3(1, 2, 3)});
  TransformVec6 expected;
  expected << kPi / 2, 0, 0, 1, 2, 3;
  EXPECT_LT((v - expected).cwiseAbs().maxCoeff(), 1e-12);

  Rng rng(6);
  std::uniform_real_distribution<double> yaw(-kPi + 1e-3, kPi - 1e-3), pitch(-1.5, 1.5);
  for (int k = 0; k < 1000; ++k) {
    TransformVec6 e;
    e << yaw(rng), pitch(rng), yaw(rng), 0.1, -0.2, 0.3;
    EXPECT_LT((euler_to_vec6(vec6_to_transform(e)) - e).cwiseAbs().maxCoeff(), 1e-9);
  }
  EXPECT_EQ(code_of([] { matrix_to_euler(euler_to_matrix({0.3, kPi / 2, 0.1})); }), ErrorCode::GimbalLock);
}

TEST(RandomTransform, RangesAndDeterminism) {
  Rng zero(7);
  expect_transform_near(random_transform(zero, 0.0, 0.0), RigidTransform::identity(), 0.0);
  Rng a(8), b(8);
  EXPECT_EQ(transform_to_vec7(random_transform(a, 45, 1)), transform_to_vec7(random_transform(b, 45, 1)));
  Rng rng(9);
  for (int k = 0; k < 10000; ++k) {
    const RigidTransform g = random_transform(rng, 45.0, 1.0);
    const EulerZYX e = matrix_to_euler(g.rotation_matrix());
    for (double angle : {e.yaw, e.pitch, e.roll}) {
      EXPECT_GE(angle, -1e-12);
      EXPECT_LE(angle, kPi / 4 + 1e-12);
    }
    EXPECT_TRUE((g.translation.array() >= 0.0).all() && (g.translation.array() <= 1.0).all());
  }
  EXPECT_EQ(code_of([&] { random_transform(rng, 180.0, 1.0); }), ErrorCode::BadRange);
  EXPECT_EQ(code_of([&] { random_transform(rng, 10.0, -1.0); }), ErrorCode::BadRange);
}

TEST(Kabsch, RecoversExactTransform) {
  Rng rng(10);
  for (int k = 0; k < 200; ++k) {
    const RigidTransform g = random_rigid(rng);
    const Cloud src = random_cloud(30, rng);
    const RigidTransform est = kabsch(src, apply(g, src));
    EXPECT_LT(rotation_angle(est.rotation_matrix(), g.rotation_matrix()), 1e-6);
    EXPECT_LT((est.translation - g.translation).norm(), 1e-9);
  }
  const Cloud src = random_cloud(10, rng);
  expect_transform_near(kabsch(src, src), RigidTransform::identity(), 1e-12);
}

TEST(Kabsch, ReflectionTrapKeepsProperRotation) {
  Cloud src(4, 3);
  src << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0;
  Cloud src3d(4, 3);
  src3d << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  // Mirror through the x = 0 plane: the best orthogonal fit is a reflection.
  for (const Cloud& s : {src, src3d}) {
    Cloud dst = s;
    dst.col(0) *= -1.0;
    const KabschSolution sol = kabsch_solve(s, dst);
    EXPECT_NEAR(sol.rotation.determinant(), 1.0, 1e-9);
    EXPECT_NEAR(kabsch(s, dst).rotation_matrix().determinant(), 1.0, 1e-9);
  }
}

TEST(Kabsch, WeightScaleInvariance) {
  Rng rng(11);
  const Cloud src = random_cloud(25, rng);
  std::normal_distribution<double> n(0.0, 0.05);
  Cloud dst = apply(random_rigid(rng), src);
  for (Eigen::Index i = 0; i < dst.size(); ++i) dst.data()[i] += n(rng);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> w(25), w_scaled(25);
  for (int i = 0; i < 25; ++i) {
    w[i] = u(rng);
    w_scaled[i] = 37.5 * w[i];
  }
  expect_transform_near(kabsch(src, dst, std::span<const double>(w)), kabsch(src, dst, std::span<const double>(w_scaled)),
                        1e-9);
}

TEST(Kabsch, Errors) {
  Cloud line(4, 3);
  line << 0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0;
  EXPECT_EQ(code_of([&] { kabsch(line, line); }), ErrorCode::DegenerateGeometry);
  Rng rng(12);
  const Cloud src = random_cloud(5, rng);
  const std::vector<double> zeros(5, 0.0);
  EXPECT_EQ(code_of([&] { kabsch(src, src, std::span<const double>(zeros)); }), ErrorCode::WeightUnderflow);
  EXPECT_EQ(code_of([&] { kabsch(src, random_cloud(6, rng)); }), ErrorCode::ShapeMismatch);
}

TEST(KdTree, MatchesBruteForce) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Cloud pts = random_cloud(1 + trial * 37, rng);
    const KdTree tree(pts);
    const Cloud queries = random_cloud(200, rng) * 1.5;
    for (Eigen::Index i = 0; i < queries.rows(); ++i) {
      const Vec3 q = queries.row(i).transpose();
      const auto a = tree.nearest(q);
      const auto b = brute_force_nearest(pts, q);
      EXPECT_EQ(a.index, b.index);
      EXPECT_EQ(a.squared_distance, b.squared_distance);
    }
  }
}

TEST(KdTree, TiesResolveToLowerIndex) {
  Cloud pts(4, 3);
  pts << 1, 0, 0, -1, 0, 0, 1, 0, 0, 0, 1, 0;
  const KdTree tree(pts);
  EXPECT_EQ(tree.nearest(Vec3(1, 0, 0)).index, 0);
  EXPECT_EQ(tree.nearest(Vec3::Zero()).index, 0);
}

TEST(TransformFile, RoundTrip) {
  testing::TempDir dir("geom");
  Rng rng(14);
  std::vector<RigidTransform> gs;
  for (int k = 0; k < 10; ++k) gs.push_back(random_rigid(rng));
  save_transforms(dir.path() / "g.txt", gs);
  const auto back = load_transforms(dir.path() / "g.txt");
  ASSERT_EQ(back.size(), gs.size());
  for (size_t k = 0; k < gs.size(); ++k) {
    EXPECT_EQ(transform_to_vec7(back[k]), transform_to_vec7(gs[k]));
  }
  EXPECT_TRUE(is_io_error(code_of([&] { load_transforms(dir.path() / "missing.txt"); })));
}

}  // namespace
}  // namespace pcrd
