#pragma once

// Rigid-body math: quaternions, SE(3) composition and application,
// transform <-> vector conversions and weighted SVD alignment.

#include <Eigen/Core>
#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace pcrd {

using Rng = std::mt19937_64;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// One point per row. Row-major so a cloud feeds straight into the dense layers.
using Cloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Raw diffusion state: (qw, qx, qy, qz, tx, ty, tz). The quaternion part is
// allowed to drift off the unit sphere while noisy.
using TransformVec7 = Eigen::Matrix<double, 7, 1>;
// Euler ablation state: (yaw, pitch, roll, tx, ty, tz), intrinsic Z-Y-X, radians.
using TransformVec6 = Eigen::Matrix<double, 6, 1>;

struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double norm() const;
  Quaternion operator-() const { return {-w, -x, -y, -z}; }
  friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

Quaternion operator*(const Quaternion& a, const Quaternion& b);

struct RigidTransform {
  Quaternion rotation;  // unit, w >= 0
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Mat3& rotation, const Vec3& translation);

  Mat3 rotation_matrix() const;
  Mat4 matrix() const;
};

// Scales to unit norm and flips sign so that w >= 0.
Quaternion quat_normalize(const Quaternion& q);
Mat3 quat_to_matrix(const Quaternion& q);
Quaternion matrix_to_quat(const Mat3& rotation);

Vec3 apply(const RigidTransform& g, const Vec3& p);
Cloud apply(const RigidTransform& g, const Cloud& points);
// compose(a, b) acts as "b first, then a", matching the matrix product A*B.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& g);

RigidTransform vec7_to_transform(const TransformVec7& v);
TransformVec7 transform_to_vec7(const RigidTransform& g);

// Intrinsic Z-Y-X angles: R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerZYX {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};

Mat3 euler_to_matrix(const EulerZYX& e);
// Throws GimbalLock when pitch is within 1e-6 of +-pi/2.
EulerZYX matrix_to_euler(const Mat3& rotation);
TransformVec6 euler_to_vec6(const RigidTransform& g);
RigidTransform vec6_to_transform(const TransformVec6& v);

// Geodesic angle between two rotations, radians in [0, pi].
double rotation_angle(const Mat3& a, const Mat3& b);

// Each Euler angle uniform in [0, rot_max_deg] degrees, each translation
// component uniform in [0, trans_max].
RigidTransform random_transform(Rng& rng, double rot_max_deg, double trans_max);

// Everything a differentiable caller needs to backpropagate through the fit.
struct KabschSolution {
  RigidTransform transform;
  Mat3 rotation;             // dst ~ rotation * src + translation
  Mat3 u;                    // cross covariance H = U diag(s) V^T
  Mat3 v;
  Vec3 singular_values;
  double reflection_sign = 1.0;  // det(V U^T); -1 means the last axis was flipped
  Vec3 src_centroid;
  Vec3 dst_centroid;
  double weight_sum = 0.0;
};

// Weighted least-squares rigid fit of src onto dst. Weights default to 1.
KabschSolution kabsch_solve(const Cloud& src, const Cloud& dst,
                            std::optional<std::span<const double>> weights = std::nullopt);
RigidTransform kabsch(const Cloud& src, const Cloud& dst,
                      std::optional<std::span<const double>> weights = std::nullopt);

// Text format: one `qw qx qy qz tx ty tz` record per line.
void save_transforms(const std::filesystem::path& path, std::span<const RigidTransform> transforms);
std::vector<RigidTransform> load_transforms(const std::filesystem::path& path);

// Exact nearest-neighbour index over a fixed cloud. Ties resolve to the lower
// point index, which makes results identical to a linear scan.
class KdTree {
 public:
  explicit KdTree(const Cloud& points);

  struct Hit {
    Eigen::Index index = -1;
    double squared_distance = 0.0;
  };

  Hit nearest(const Vec3& query) const;
  Eigen::Index size() const { return points_.rows(); }

 private:
  struct Node {
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };

  int build(int begin, int end, int depth);
  void search(int node, const Vec3& query, Hit& best) const;

  Cloud points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

// Linear scan, the reference the kd-tree is checked against.
KdTree::Hit brute_force_nearest(const Cloud& points, const Vec3& query);

}  // namespace pcrd
