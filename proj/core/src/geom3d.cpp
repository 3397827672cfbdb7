#include "pcrd/geom3d.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "pcrd/error.hpp"

namespace pcrd {

namespace {

constexpr double kMinQuatNorm = 1e-8;

void require_nonempty(const Cloud& points, const char* what) {
  if (points.rows() == 0) throw Error(ErrorCode::EmptyCloud, std::string(what) + " has no points");
}

}  // namespace

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion operator*(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion quat_normalize(const Quaternion& q) {
  const double n = q.norm();
  if (!(n > kMinQuatNorm)) throw Error(ErrorCode::DegenerateQuaternion, "quaternion norm below 1e-8");
  Quaternion out{q.w / n, q.x / n, q.y / n, q.z / n};
  if (out.w < 0.0) out = -out;
  return out;
}

Mat3 quat_to_matrix(const Quaternion& q_in) {
  const Quaternion q = quat_normalize(q_in);
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Quaternion matrix_to_quat(const Mat3& r) {
  if (!r.allFinite()) throw Error(ErrorCode::NotARotation, "matrix has non-finite entries");
  const double ortho_err = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho_err > 1e-6 || r.determinant() <= 0.0) {
    std::ostringstream msg;
    msg << "orthogonality error " << ortho_err << ", det " << r.determinant();
    throw Error(ErrorCode::NotARotation, msg.str());
  }
  // Shepperd: pick the largest diagonal term of the 4x4 symmetric form.
  const double trace = r.trace();
  Quaternion q;
  if (trace >= r(0, 0) && trace >= r(1, 1) && trace >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + trace);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return quat_normalize(q);
}

RigidTransform RigidTransform::from_matrix(const Mat3& rotation, const Vec3& translation) {
  return {matrix_to_quat(rotation), translation};
}

Mat3 RigidTransform::rotation_matrix() const { return quat_to_matrix(rotation); }

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation_matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Vec3 apply(const RigidTransform& g, const Vec3& p) { return g.rotation_matrix() * p + g.translation; }

Cloud apply(const RigidTransform& g, const Cloud& points) {
  require_nonempty(points, "cloud");
  const Mat3 r = g.rotation_matrix();
  Cloud out = points * r.transpose();
  out.rowwise() += g.translation.transpose();
  return out;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = quat_normalize(a.rotation * b.rotation);
  out.translation = a.rotation_matrix() * b.translation + a.translation;
  return out;
}

RigidTransform inverse(const RigidTransform& g) {
  RigidTransform out;
  out.rotation = quat_normalize({g.rotation.w, -g.rotation.x, -g.rotation.y, -g.rotation.z});
  out.translation = -(out.rotation_matrix() * g.translation);
  return out;
}

RigidTransform vec7_to_transform(const TransformVec7& v) {
  if (!v.allFinite()) throw Error(ErrorCode::DegenerateQuaternion, "non-finite transform vector");
  RigidTransform g;
  g.rotation = quat_normalize({v[0], v[1], v[2], v[3]});
  g.translation = v.tail<3>();
  return g;
}

TransformVec7 transform_to_vec7(const RigidTransform& g) {
  const Quaternion q = quat_normalize(g.rotation);
  TransformVec7 v;
  v << q.w, q.x, q.y, q.z, g.translation;
  return v;
}

Mat3 euler_to_matrix(const EulerZYX& e) {
  const double cz = std::cos(e.yaw), sz = std::sin(e.yaw);
  const double cy = std::cos(e.pitch), sy = std::sin(e.pitch);
  const double cx = std::cos(e.roll), sx = std::sin(e.roll);
  Mat3 r;
  r << cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
      sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
      -sy, cy * sx, cy * cx;
  return r;
}

EulerZYX matrix_to_euler(const Mat3& r) {
  const double s = std::clamp(-r(2, 0), -1.0, 1.0);
  const double pitch = std::asin(s);
  if (std::abs(std::abs(pitch) - std::numbers::pi / 2) < 1e-6) {
    throw Error(ErrorCode::GimbalLock, "pitch at +-90 degrees");
  }
  return {std::atan2(r(1, 0), r(0, 0)), pitch, std::atan2(r(2, 1), r(2, 2))};
}

TransformVec6 euler_to_vec6(const RigidTransform& g) {
  const EulerZYX e = matrix_to_euler(g.rotation_matrix());
  TransformVec6 v;
  v << e.yaw, e.pitch, e.roll, g.translation;
  return v;
}

RigidTransform vec6_to_transform(const TransformVec6& v) {
  if (!v.allFinite()) throw Error(ErrorCode::BadRange, "non-finite euler vector");
  return RigidTransform::from_matrix(euler_to_matrix({v[0], v[1], v[2]}), v.tail<3>());
}

double rotation_angle(const Mat3& a, const Mat3& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

RigidTransform random_transform(Rng& rng, double rot_max_deg, double trans_max) {
  if (!(rot_max_deg >= 0.0 && rot_max_deg < 180.0) || !(trans_max >= 0.0)) {
    throw Error(ErrorCode::BadRange, "rotation range must be in [0,180) and translation range >= 0");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double to_rad = std::numbers::pi / 180.0;
  EulerZYX e;
  e.yaw = unit(rng) * rot_max_deg * to_rad;
  e.pitch = unit(rng) * rot_max_deg * to_rad;
  e.roll = unit(rng) * rot_max_deg * to_rad;
  Vec3 t;
  for (int i = 0; i < 3; ++i) t[i] = unit(rng) * trans_max;
  return RigidTransform::from_matrix(euler_to_matrix(e), t);
}

KabschSolution kabsch_solve(const Cloud& src, const Cloud& dst,
                            std::optional<std::span<const double>> weights) {
  const Eigen::Index n = src.rows();
  if (n != dst.rows() || (weights && static_cast<Eigen::Index>(weights->size()) != n)) {
    throw Error(ErrorCode::ShapeMismatch, "kabsch inputs differ in length");
  }
  if (n < 3) throw Error(ErrorCode::DegenerateGeometry, "kabsch needs at least 3 points");

  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  if (weights) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double wi = (*weights)[static_cast<size_t>(i)];
      if (!(wi >= 0.0)) throw Error(ErrorCode::WeightUnderflow, "negative or non-finite weight");
      w[i] = wi;
    }
  }
  const double wsum = w.sum();
  if (!(wsum > 1e-300)) throw Error(ErrorCode::WeightUnderflow, "weights sum to zero");
  const Eigen::VectorXd wn = w / wsum;

  KabschSolution sol;
  sol.weight_sum = wsum;
  sol.src_centroid = (src.transpose() * wn);
  sol.dst_centroid = (dst.transpose() * wn);
  const Cloud sc = src.rowwise() - sol.src_centroid.transpose();
  const Cloud dc = dst.rowwise() - sol.dst_centroid.transpose();
  const Mat3 h = sc.transpose() * wn.asDiagonal() * dc;

  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  sol.u = svd.matrixU();
  sol.v = svd.matrixV();
  sol.singular_values = svd.singularValues();
  const double scale = std::max(sc.cwiseAbs().maxCoeff(), dc.cwiseAbs().maxCoeff());
  if (!(scale > 1e-12) || sol.singular_values[1] <= 1e-10 * sol.singular_values[0] ||
      sol.singular_values[0] <= 1e-24) {
    throw Error(ErrorCode::DegenerateGeometry, "points are coincident or collinear");
  }
  sol.reflection_sign = (sol.v * sol.u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 d = Vec3(1.0, 1.0, sol.reflection_sign).asDiagonal();
  sol.rotation = sol.v * d * sol.u.transpose();
  const Vec3 t = sol.dst_centroid - sol.rotation * sol.src_centroid;
  sol.transform = RigidTransform::from_matrix(sol.rotation, t);
  return sol;
}

RigidTransform kabsch(const Cloud& src, const Cloud& dst, std::optional<std::span<const double>> weights) {
  return kabsch_solve(src, dst, weights).transform;
}

void save_transforms(const std::filesystem::path& path, std::span<const RigidTransform> transforms) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  for (const auto& g : transforms) {
    const TransformVec7 v = transform_to_vec7(g);
    for (int i = 0; i < 7; ++i) out << (i ? " " : "") << v[i];
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<RigidTransform> load_transforms(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<RigidTransform> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') {
      continue;
    }
    std::istringstream ss(line);
    TransformVec7 v;
    for (int i = 0; i < 7; ++i) {
      if (!(ss >> v[i])) {
        throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": expected 7 numbers");
      }
    }
    std::string rest;
    if (ss >> rest) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": trailing data");
    }
    out.push_back(vec7_to_transform(v));
  }
  return out;
}

KdTree::KdTree(const Cloud& points) : points_(points) {
  if (points_.rows() == 0) throw Error(ErrorCode::EmptyCloud, "kd-tree over an empty cloud");
  order_.resize(static_cast<size_t>(points_.rows()));
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  nodes_.reserve(2 * order_.size() / 4 + 1);
  build(0, static_cast<int>(order_.size()), 0);
}

int KdTree::build(int begin, int end, int depth) {
  constexpr int kLeafSize = 8;
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{});
  if (end - begin <= kLeafSize) {
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }
  // Split on the axis with the widest spread.
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_.row(order_[i]).transpose());
    hi = hi.cwiseMax(points_.row(order_[i]).transpose());
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  (void)depth;
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_(a, axis) < points_(b, axis); });
  const double split = points_(order_[mid], axis);
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

namespace {
bool better(double d, Eigen::Index idx, const KdTree::Hit& best) {
  return best.index < 0 || d < best.squared_distance || (d == best.squared_distance && idx < best.index);
}
}  // namespace

void KdTree::search(int node_id, const Vec3& query, Hit& best) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const int idx = order_[i];
      const double d = (points_.row(idx).transpose() - query).squaredNorm();
      if (better(d, idx, best)) best = {idx, d};
    }
    return;
  }
  const double diff = query[node.axis] - node.split;
  const int near = diff < 0.0 ? node.left : node.right;
  const int far = diff < 0.0 ? node.right : node.left;
  search(near, query, best);
  // Equality still descends so that a tie with a lower index is found.
  if (diff * diff <= best.squared_distance) search(far, query, best);
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  Hit best;
  search(0, query, best);
  return best;
}

KdTree::Hit brute_force_nearest(const Cloud& points, const Vec3& query) {
  if (points.rows() == 0) throw Error(ErrorCode::EmptyCloud, "nearest neighbour in an empty cloud");
  KdTree::Hit best;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double d = (points.row(i).transpose() - query).squaredNorm();
    if (better(d, i, best)) best = {i, d};
  }
  return best;
}

}  // namespace pcrd
