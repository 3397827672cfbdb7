#include "pcrd/regnet.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "pcrd/error.hpp"

namespace pcrd::regnet {

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& why) {
  throw Error(ErrorCode::ConfigError, key + ": " + why);
}

Tensor to_tensor(const RowMatrix& m) { return Tensor::from_matrix(m); }

Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

// Row-wise and column-wise log-sum-exp with max subtraction.
Eigen::VectorXd row_lse(const RowMatrix& m) {
  Eigen::VectorXd out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    out[i] = mx + std::log((m.row(i).array() - mx).exp().sum());
  }
  return out;
}

Eigen::VectorXd col_lse(const RowMatrix& m) {
  Eigen::VectorXd out(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double mx = m.col(j).maxCoeff();
    out[j] = mx + std::log((m.col(j).array() - mx).exp().sum());
  }
  return out;
}

// Log-domain Sinkhorn keeping every intermediate for the backward pass.
// logs[0] = sim / temp; logs[2k+1] after row step k; logs[2k+2] after column step k.
std::vector<RowMatrix> sinkhorn_logs(const RowMatrix& sim, int iters, double temp) {
  if (!(temp > 0.0)) throw Error(ErrorCode::BadRange, "sinkhorn temperature must be positive");
  if (iters < 1) throw Error(ErrorCode::BadRange, "sinkhorn needs at least one iteration");
  if (!sim.allFinite()) throw Error(ErrorCode::NumericalOverflow, "non-finite similarity");
  std::vector<RowMatrix> logs;
  logs.reserve(static_cast<size_t>(2 * iters + 1));
  logs.push_back(sim / temp);
  for (int k = 0; k < iters; ++k) {
    RowMatrix r = logs.back();
    r.colwise() -= row_lse(r);
    logs.push_back(std::move(r));
    RowMatrix c = logs.back();
    c.rowwise() -= col_lse(c).transpose();
    logs.push_back(std::move(c));
  }
  if (!logs.back().allFinite()) throw Error(ErrorCode::NumericalOverflow, "sinkhorn produced non-finite values");
  return logs;
}

RowMatrix sinkhorn_backward(const std::vector<RowMatrix>& logs, double temp, const RowMatrix& d_assign) {
  // d(loss)/d(log A) = d_assign * A
  RowMatrix g = d_assign.cwiseProduct(logs.back().array().exp().matrix());
  for (size_t k = logs.size() - 1; k >= 1; --k) {
    // logs[k] = logs[k-1] - lse(logs[k-1]) along rows (k odd) or columns (k even).
    const RowMatrix soft = logs[k].array().exp().matrix();
    if (k % 2 == 1) {
      const Eigen::VectorXd s = g.rowwise().sum();
      g -= soft.cwiseProduct(s.replicate(1, g.cols()));
    } else {
      const Eigen::RowVectorXd s = g.colwise().sum();
      g -= soft.cwiseProduct(s.replicate(g.rows(), 1));
    }
  }
  return g / temp;
}

// Negative squared feature distance, scaled by 1/sqrt(D).
RowMatrix feature_similarity(const RowMatrix& a, const RowMatrix& b) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.cols()));
  // Direct differences: the expanded |a|^2 + |b|^2 - 2ab form cancels badly
  // for nearly matching features.
  RowMatrix sim(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    sim.row(i) = -(b.rowwise() - a.row(i)).rowwise().squaredNorm().transpose() * scale;
  }
  return sim;
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::CorrespondenceFree ? "cf" : "cb"; }
std::string to_string(Representation r) { return r == Representation::Quat7 ? "quat7" : "euler6"; }
std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::FtPlusP_ConcatQ: return "ft+p_cat_q";
    case Fusion::FtPlusQ_ConcatP: return "ft+q_cat_p";
    case Fusion::ConcatAll: return "cat_all";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "cf") return Variant::CorrespondenceFree;
  if (s == "cb") return Variant::CorrespondenceBased;
  config_error("variant", "expected cf or cb, got '" + s + "'");
}

Representation parse_representation(const std::string& s) {
  if (s == "quat7") return Representation::Quat7;
  if (s == "euler6") return Representation::Euler6;
  config_error("repr", "expected quat7 or euler6, got '" + s + "'");
}

Fusion parse_fusion(const std::string& s) {
  if (s == "ft+p_cat_q") return Fusion::FtPlusP_ConcatQ;
  if (s == "ft+q_cat_p") return Fusion::FtPlusQ_ConcatP;
  if (s == "cat_all") return Fusion::ConcatAll;
  config_error("fusion", "expected ft+p_cat_q, ft+q_cat_p or cat_all, got '" + s + "'");
}

Eigen::Index state_dim(Representation r) { return r == Representation::Quat7 ? 7 : 6; }

void ModelConfig::validate() const {
  if (diffusion_steps < 1) config_error("model.diffusion_steps", "must be >= 1");
  const auto positive = [](const std::vector<Eigen::Index>& w, const std::string& key) {
    if (w.empty()) config_error(key, "must not be empty");
    for (auto v : w) {
      if (v <= 0) config_error(key, "widths must be positive");
    }
  };
  if (variant == Variant::CorrespondenceFree) {
    positive(cf.encoder_widths, "model.cf.encoder_widths");
    positive(cf.transform_widths, "model.cf.transform_widths");
    positive(cf.decoder_hidden, "model.cf.decoder_hidden");
    if (cf.transform_widths.size() != 2) config_error("model.cf.transform_widths", "expects [hidden, out]");
    if (cf.transform_widths[0] != cf.time_embedding_dim) {
      config_error("model.cf.time_embedding_dim", "must equal the transform encoder hidden width");
    }
    if (cf.transform_widths[1] != cf.encoder_widths.back()) {
      config_error("model.cf.transform_widths", "output width must equal the final encoder width");
    }
  } else {
    positive(cb.feature_widths, "model.cb.feature_widths");
    if (cb.feature_widths.size() < 2) config_error("model.cb.feature_widths", "needs at least two layers");
    if (repr != Representation::Quat7) config_error("model.repr", "the correspondence-based variant emits quat7");
    if (cb.sinkhorn_iters < 1) config_error("model.cb.sinkhorn_iters", "must be >= 1");
    if (!(cb.temperature_start > 0.0 && cb.temperature_end > 0.0 && cb.temperature_end <= cb.temperature_start)) {
      config_error("model.cb.temperature_start", "temperatures must be positive and non-increasing");
    }
    if (cb.knn < 2) config_error("model.cb.knn", "must be >= 2");
    if (cb.transform_hidden != cb.time_embedding_dim) {
      config_error("model.cb.time_embedding_dim", "must equal transform_hidden");
    }
  }
  if (cf.time_embedding_dim % 2 != 0 || cb.time_embedding_dim % 2 != 0) {
    config_error("model.time_embedding_dim", "must be even");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)},
                     {"repr", to_string(c.repr)},
                     {"fusion", to_string(c.fusion)},
                     {"diffusion", c.diffusion},
                     {"diffusion_steps", c.diffusion_steps},
                     {"cf",
                      {{"encoder_widths", c.cf.encoder_widths},
                       {"transform_widths", c.cf.transform_widths},
                       {"time_embedding_dim", c.cf.time_embedding_dim},
                       {"decoder_hidden", c.cf.decoder_hidden}}},
                     {"cb",
                      {{"feature_widths", c.cb.feature_widths},
                       {"sinkhorn_iters", c.cb.sinkhorn_iters},
                       {"temperature_start", c.cb.temperature_start},
                       {"temperature_end", c.cb.temperature_end},
                       {"knn", c.cb.knn},
                       {"transform_hidden", c.cb.transform_hidden},
                       {"time_embedding_dim", c.cb.time_embedding_dim}}}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& path) {
  if (!j.is_object()) config_error(path, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) config_error(path.empty() ? key : path + "." + key, "unknown key");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    config_error(path + "." + key, e.what());
  }
}

}  // namespace

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown(j, {"variant", "repr", "fusion", "diffusion", "diffusion_steps", "cf", "cb"}, "model");
  std::string s;
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("repr")) c.repr = parse_representation(j.at("repr").get<std::string>());
  if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  read(j, "diffusion", c.diffusion, "model");
  read(j, "diffusion_steps", c.diffusion_steps, "model");
  if (j.contains("cf")) {
    const auto& cf = j.at("cf");
    reject_unknown(cf, {"encoder_widths", "transform_widths", "time_embedding_dim", "decoder_hidden"}, "model.cf");
    read(cf, "encoder_widths", c.cf.encoder_widths, "model.cf");
    read(cf, "transform_widths", c.cf.transform_widths, "model.cf");
    read(cf, "time_embedding_dim", c.cf.time_embedding_dim, "model.cf");
    read(cf, "decoder_hidden", c.cf.decoder_hidden, "model.cf");
  }
  if (j.contains("cb")) {
    const auto& cb = j.at("cb");
    reject_unknown(cb,
                   {"feature_widths", "sinkhorn_iters", "temperature_start", "temperature_end", "knn",
                    "transform_hidden", "time_embedding_dim"},
                   "model.cb");
    read(cb, "feature_widths", c.cb.feature_widths, "model.cb");
    read(cb, "sinkhorn_iters", c.cb.sinkhorn_iters, "model.cb");
    read(cb, "temperature_start", c.cb.temperature_start, "model.cb");
    read(cb, "temperature_end", c.cb.temperature_end, "model.cb");
    read(cb, "knn", c.cb.knn, "model.cb");
    read(cb, "transform_hidden", c.cb.transform_hidden, "model.cb");
    read(cb, "time_embedding_dim", c.cb.time_embedding_dim, "model.cb");
  }
  c.validate();
}

Eigen::VectorXd timestep_embedding(int t, Eigen::Index dim) {
  const Eigen::Index half = dim / 2;
  Eigen::VectorXd e(dim);
  for (Eigen::Index k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(t * freq);
    e[k + half] = std::cos(t * freq);
  }
  return e;
}

Eigen::Index fused_width(Eigen::Index width, Fusion mode) { return mode == Fusion::ConcatAll ? 3 * width : 2 * width; }

RowMatrix fuse(const RowMatrix& ft, const RowMatrix& fp, const RowMatrix& fq, Fusion mode) {
  if (ft.rows() != fp.rows() || fp.rows() != fq.rows() || ft.cols() != fp.cols() || fp.cols() != fq.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "fuse expects equal feature shapes");
  }
  const Eigen::Index w = ft.cols();
  RowMatrix z(ft.rows(), fused_width(w, mode));
  switch (mode) {
    case Fusion::FtPlusP_ConcatQ:
      z << ft + fp, fq;
      break;
    case Fusion::FtPlusQ_ConcatP:
      z << ft + fq, fp;
      break;
    case Fusion::ConcatAll:
      z << ft, fp, fq;
      break;
  }
  return z;
}

RowMatrix sinkhorn(const RowMatrix& sim, int iters, double temp) {
  return sinkhorn_logs(sim, iters, temp).back().array().exp().matrix();
}

Eigen::Index descriptor_width(int knn) { return knn - 1 + 7; }

RowMatrix local_descriptors(const Cloud& points, int knn) {
  const Eigen::Index n = points.rows();
  if (n < knn) {
    throw Error(ErrorCode::TooFewPoints,
                "cloud has " + std::to_string(n) + " points, neighbourhood needs " + std::to_string(knn));
  }
  const Vec3 global_centroid = points.colwise().mean().transpose();
  RowMatrix out(n, descriptor_width(knn));
  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 p = points.row(i).transpose();
    for (Eigen::Index j = 0; j < n; ++j) dist[static_cast<size_t>(j)] = {(points.row(j).transpose() - p).squaredNorm(), j};
    std::partial_sort(dist.begin(), dist.begin() + knn, dist.end());
    // The neighbourhood includes the point itself (distance 0, sorted first).
    Vec3 centroid = Vec3::Zero();
    for (int k = 0; k < knn; ++k) centroid += points.row(dist[static_cast<size_t>(k)].second).transpose();
    centroid /= knn;
    Mat3 cov = Mat3::Zero();
    for (int k = 0; k < knn; ++k) {
      const Vec3 d = points.row(dist[static_cast<size_t>(k)].second).transpose() - centroid;
      cov += d * d.transpose();
    }
    cov /= knn;
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 normal = eig.eigenvectors().col(0);
    Eigen::Index c = 0;
    for (int k = 1; k < knn; ++k) out(i, c++) = std::sqrt(dist[static_cast<size_t>(k)].first);
    for (int k = 0; k < 3; ++k) out(i, c++) = std::sqrt(std::max(0.0, eig.eigenvalues()[k]));
    out(i, c++) = (p - centroid).norm();
    out(i, c++) = std::abs(normal.dot(p - centroid));
    out(i, c++) = (p - global_centroid).norm();
    out(i, c++) = std::abs(normal.dot(p - global_centroid));
  }
  return out;
}

Pose state_to_pose(const StateVec& s, Representation repr) {
  Pose pose;
  if (repr == Representation::Quat7) {
    if (s.size() != 7) throw Error(ErrorCode::ShapeMismatch, "quat7 state must have 7 entries");
    pose.rotation = quat_to_matrix({s[0], s[1], s[2], s[3]});
    pose.translation = s.tail<3>();
  } else {
    if (s.size() != 6) throw Error(ErrorCode::ShapeMismatch, "euler6 state must have 6 entries");
    pose.rotation = euler_to_matrix({s[0], s[1], s[2]});
    pose.translation = s.tail<3>();
  }
  return pose;
}

StateVec state_to_pose_backward(const StateVec& s, Representation repr, const Mat3& dr, const Vec3& dt) {
  StateVec g = StateVec::Zero(s.size());
  if (repr == Representation::Quat7) {
    const Eigen::Vector4d v(s[0], s[1], s[2], s[3]);
    const double n = v.norm();
    if (!(n > 1e-8)) throw Error(ErrorCode::DegenerateQuaternion, "quaternion norm below 1e-8");
    const Eigen::Vector4d q = v / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    // Partial derivatives of each rotation entry with respect to (w, x, y, z).
    Eigen::Vector4d dq = Eigen::Vector4d::Zero();
    const auto add = [&](int r, int c, double gw, double gx, double gy, double gz) {
      dq += dr(r, c) * Eigen::Vector4d(gw, gx, gy, gz);
    };
    add(0, 0, 0, 0, -4 * y, -4 * z);
    add(0, 1, -2 * z, 2 * y, 2 * x, -2 * w);
    add(0, 2, 2 * y, 2 * z, 2 * w, 2 * x);
    add(1, 0, 2 * z, 2 * y, 2 * x, 2 * w);
    add(1, 1, 0, -4 * x, 0, -4 * z);
    add(1, 2, -2 * x, -2 * w, 2 * z, 2 * y);
    add(2, 0, -2 * y, 2 * z, -2 * w, 2 * x);
    add(2, 1, 2 * x, 2 * w, 2 * z, 2 * y);
    add(2, 2, 0, -4 * x, -4 * y, 0);
    const Eigen::Vector4d dv = (dq - q * q.dot(dq)) / n;
    g.head<4>() = dv;
    g.tail<3>() = dt;
  } else {
    const double a = s[0], b = s[1], c = s[2];
    Mat3 rz, ry, rx, drz, dry, drx;
    rz << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    ry << std::cos(b), 0, std::sin(b), 0, 1, 0, -std::sin(b), 0, std::cos(b);
    rx << 1, 0, 0, 0, std::cos(c), -std::sin(c), 0, std::sin(c), std::cos(c);
    drz << -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a), 0, 0, 0, 0;
    dry << -std::sin(b), 0, std::cos(b), 0, 0, 0, -std::cos(b), 0, -std::sin(b);
    drx << 0, 0, 0, 0, -std::sin(c), -std::cos(c), 0, std::cos(c), -std::sin(c);
    g[0] = dr.cwiseProduct(drz * ry * rx).sum();
    g[1] = dr.cwiseProduct(rz * dry * rx).sum();
    g[2] = dr.cwiseProduct(rz * ry * drx).sum();
    g.tail<3>() = dt;
  }
  return g;
}

RigidTransform state_to_transform(const StateVec& s, Representation repr) {
  if (repr == Representation::Quat7) {
    if (s.size() != 7) throw Error(ErrorCode::ShapeMismatch, "quat7 state must have 7 entries");
    return vec7_to_transform(TransformVec7(s));
  }
  if (s.size() != 6) throw Error(ErrorCode::ShapeMismatch, "euler6 state must have 6 entries");
  return vec6_to_transform(TransformVec6(s));
}

StateVec transform_to_state(const RigidTransform& g, Representation repr) {
  if (repr == Representation::Quat7) return transform_to_vec7(g);
  return euler_to_vec6(g);
}

KabschGrads kabsch_backward(const KabschSolution& sol, const Cloud& src, const Cloud& dst,
                            const Eigen::VectorXd& weights, const Mat3& d_rotation, const Vec3& d_translation) {
  const Eigen::Index n = src.rows();
  const Mat3& r = sol.rotation;
  const Vec3& ps = sol.src_centroid;
  const Vec3& pd = sol.dst_centroid;

  // t = pd - R ps
  Mat3 g_r = d_rotation - d_translation * ps.transpose();
  Vec3 g_pd = d_translation;
  Vec3 g_ps = -r.transpose() * d_translation;

  // R is the SO(3) polar factor of M = H^T with signed singular values s'.
  const Vec3 sp(sol.singular_values[0], sol.singular_values[1], sol.reflection_sign * sol.singular_values[2]);
  const Mat3& u = sol.u;
  const Mat3 gh = u.transpose() * r.transpose() * g_r * u;
  Mat3 k = Mat3::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double denom = sp[i] + sp[j];
      if (std::abs(denom) > 1e-14) k(i, j) = (gh(i, j) - gh(j, i)) / denom;
    }
  }
  const Mat3 g_m = r * u * k * u.transpose();
  const Mat3 g_h = g_m.transpose();

  // H = sum wn_i p_i y_i^T - ps pd^T
  const Eigen::VectorXd wn = weights / sol.weight_sum;
  KabschGrads out{Cloud(n, 3), Eigen::VectorXd(n)};
  g_pd += -g_h.transpose() * ps;
  g_ps += -g_h * pd;
  Eigen::VectorXd g_wn(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 p = src.row(i).transpose();
    const Vec3 y = dst.row(i).transpose();
    out.d_dst.row(i) = (wn[i] * (g_h.transpose() * p + g_pd)).transpose();
    g_wn[i] = p.dot(g_h * y) + y.dot(g_pd) + p.dot(g_ps);
  }
  const double mean_term = wn.dot(g_wn);
  out.d_weights = (g_wn.array() - mean_term).matrix() / sol.weight_sum;
  return out;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::unique_ptr<Model> make_model(const ModelConfig& cfg) {
  if (cfg.variant == Variant::CorrespondenceFree) return std::make_unique<CfModel>(cfg);
  return std::make_unique<CbModel>(cfg);
}

TransformEncoder::TransformEncoder(Eigen::Index in_dim, Eigen::Index hidden, Eigen::Index out, Eigen::Index embed_dim)
    : in_(in_dim), hidden_(hidden), out_(out), embed_(embed_dim) {}

void TransformEncoder::init(ParamStore& store, Rng& rng) const {
  store.add("tenc.0.weight", nn::xavier_uniform(in_, hidden_, rng));
  store.add("tenc.0.bias", Tensor({hidden_}));
  store.add("tenc.1.weight", nn::xavier_uniform(hidden_, out_, rng));
  store.add("tenc.1.bias", Tensor({out_}));
}

RowMatrix TransformEncoder::forward(const ParamStore& store, const RowMatrix& g_t, std::span<const int> t,
                                    Tape* tape) const {
  if (g_t.cols() != in_ || static_cast<size_t>(g_t.rows()) != t.size()) {
    throw Error(ErrorCode::ShapeMismatch, "transform encoder input shape");
  }
  Tensor x = to_tensor(g_t);
  Tensor h = nn::dense(x, store.get("tenc.0.weight").value, store.get("tenc.0.bias").value);
  auto hm = h.matrix();
  for (Eigen::Index b = 0; b < g_t.rows(); ++b) {
    hm.row(b) += timestep_embedding(t[static_cast<size_t>(b)], embed_).transpose();
  }
  Tensor a = nn::relu(h);
  Tensor y = nn::dense(a, store.get("tenc.1.weight").value, store.get("tenc.1.bias").value);
  if (tape) {
    tape->input = std::move(x);
    tape->hidden_pre = std::move(h);
    tape->hidden = std::move(a);
  }
  return y.matrix();
}

void TransformEncoder::backward(ParamStore& store, const Tape& tape, const RowMatrix& d_out) const {
  auto& w1 = store.get("tenc.1.weight");
  auto& b1 = store.get("tenc.1.bias");
  nn::DenseGrads g1 = nn::dense_backward(tape.hidden, w1.value, to_tensor(d_out));
  w1.grad.matrix() += g1.dw.matrix();
  b1.grad.matrix() += g1.db.matrix();
  Tensor dh = nn::relu_backward(tape.hidden_pre, g1.dx);
  auto& w0 = store.get("tenc.0.weight");
  auto& b0 = store.get("tenc.0.bias");
  nn::DenseGrads g0 = nn::dense_backward(tape.input, w0.value, dh);
  w0.grad.matrix() += g0.dw.matrix();
  b0.grad.matrix() += g0.db.matrix();
}

// ---------------------------------------------------------------------------
// Correspondence-free variant

namespace {

struct CfTape final : BatchTape {
  std::vector<Eigen::Index> offsets;  // segment starts; P clouds then Q clouds
  nn::Mlp::Tape encoder;
  std::vector<Eigen::Index> argmax;   // [segments * W], absolute row index
  Eigen::Index rows = 0;
  TransformEncoder::Tape tenc;
  nn::Mlp::Tape decoder;
  Eigen::Index batch = 0;
};

struct CfConditioning final : Conditioning {
  RowMatrix fp;  // [1, W]
  RowMatrix fq;
};

}  // namespace

CfModel::CfModel(ModelConfig cfg) : Model(std::move(cfg)) {
  if (cfg_.variant != Variant::CorrespondenceFree) throw Error(ErrorCode::ConfigError, "CfModel needs variant cf");
  std::vector<Eigen::Index> enc{3};
  enc.insert(enc.end(), cfg_.cf.encoder_widths.begin(), cfg_.cf.encoder_widths.end());
  // PointNet keeps the activation before pooling.
  encoder_ = nn::Mlp("encoder", enc, true);
  const Eigen::Index w = enc.back();
  tenc_ = TransformEncoder(state_dim(), cfg_.cf.transform_widths[0], cfg_.cf.transform_widths[1],
                           cfg_.cf.time_embedding_dim);
  std::vector<Eigen::Index> dec{fused_width(w, cfg_.fusion)};
  dec.insert(dec.end(), cfg_.cf.decoder_hidden.begin(), cfg_.cf.decoder_hidden.end());
  dec.push_back(state_dim());
  decoder_ = nn::Mlp("decoder", dec, false);
}

void CfModel::init(ParamStore& store, Rng& rng) const {
  encoder_.init(store, rng);
  if (cfg_.diffusion) tenc_.init(store, rng);
  decoder_.init(store, rng);
}

RowMatrix CfModel::decode_rows(const ParamStore& store, const RowMatrix& fp, const RowMatrix& fq,
                               const RowMatrix& g_t, std::span<const int> t) const {
  const RowMatrix ft = cfg_.diffusion ? tenc_.forward(store, g_t, t, nullptr)
                                      : RowMatrix::Zero(fp.rows(), fp.cols());
  counters_.decoder_passes += fp.rows();
  return decoder_.forward(store, to_tensor(fuse(ft, fp, fq, cfg_.fusion))).matrix();
}

RowMatrix CfModel::forward_batch(const ParamStore& store, std::span<const Sample> batch,
                                 std::unique_ptr<BatchTape>* tape_out) const {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b == 0) throw Error(ErrorCode::EmptySet, "empty batch");
  auto tape = std::make_unique<CfTape>();
  tape->batch = b;
  // Stack every cloud so the shared MLP runs as one matrix product.
  std::vector<const Cloud*> clouds;
  for (const auto& s : batch) clouds.push_back(s.source);
  for (const auto& s : batch) clouds.push_back(s.target);
  Eigen::Index total = 0;
  for (const Cloud* c : clouds) {
    if (c == nullptr || c->rows() == 0) throw Error(ErrorCode::EmptyCloud, "sample cloud is empty");
    tape->offsets.push_back(total);
    total += c->rows();
  }
  tape->offsets.push_back(total);
  tape->rows = total;
  Tensor x({total, 3});
  {
    auto xm = x.matrix();
    for (size_t k = 0; k < clouds.size(); ++k) xm.middleRows(tape->offsets[k], clouds[k]->rows()) = *clouds[k];
  }
  counters_.cloud_encodings += static_cast<long>(clouds.size());
  const Tensor feat = encoder_.forward(store, x, &tape->encoder);
  const Eigen::Index w = feat.cols();
  const auto fm = feat.matrix();
  const auto segments = static_cast<Eigen::Index>(clouds.size());
  RowMatrix pooled(segments, w);
  tape->argmax.assign(static_cast<size_t>(segments * w), 0);
  for (Eigen::Index s = 0; s < segments; ++s) {
    const Eigen::Index lo = tape->offsets[static_cast<size_t>(s)];
    const Eigen::Index hi = tape->offsets[static_cast<size_t>(s) + 1];
    for (Eigen::Index j = 0; j < w; ++j) {
      Eigen::Index best = lo;
      for (Eigen::Index i = lo + 1; i < hi; ++i) {
        if (fm(i, j) > fm(best, j)) best = i;
      }
      pooled(s, j) = fm(best, j);
      tape->argmax[static_cast<size_t>(s * w + j)] = best;
    }
  }
  const RowMatrix fp = pooled.topRows(b);
  const RowMatrix fq = pooled.bottomRows(b);

  RowMatrix g(b, state_dim());
  std::vector<int> ts;
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& s = batch[static_cast<size_t>(k)];
    if (s.g_t.size() != state_dim()) throw Error(ErrorCode::ShapeMismatch, "noisy state has wrong dimension");
    g.row(k) = s.g_t.transpose();
    ts.push_back(s.t);
  }
  const RowMatrix ft = cfg_.diffusion ? tenc_.forward(store, g, ts, &tape->tenc) : RowMatrix::Zero(b, w);
  counters_.decoder_passes += b;
  RowMatrix pred = decoder_.forward(store, to_tensor(fuse(ft, fp, fq, cfg_.fusion)), &tape->decoder).matrix();
  if (tape_out) *tape_out = std::move(tape);
  return pred;
}

void CfModel::backward_batch(ParamStore& store, const BatchTape& base, const RowMatrix& d_pred) const {
  const auto& tape = dynamic_cast<const CfTape&>(base);
  const Eigen::Index b = tape.batch;
  const Eigen::Index w = feature_width();
  const RowMatrix dz = decoder_.backward(store, tape.decoder, to_tensor(d_pred)).matrix();
  RowMatrix dft(b, w), dfp(b, w), dfq(b, w);
  switch (cfg_.fusion) {
    case Fusion::FtPlusP_ConcatQ:
      dft = dz.leftCols(w);
      dfp = dz.leftCols(w);
      dfq = dz.rightCols(w);
      break;
    case Fusion::FtPlusQ_ConcatP:
      dft = dz.leftCols(w);
      dfq = dz.leftCols(w);
      dfp = dz.rightCols(w);
      break;
    case Fusion::ConcatAll:
      dft = dz.leftCols(w);
      dfp = dz.middleCols(w, w);
      dfq = dz.rightCols(w);
      break;
  }
  if (cfg_.diffusion) tenc_.backward(store, tape.tenc, dft);
  Tensor dfeat({tape.rows, w});
  auto dm = dfeat.matrix();
  for (Eigen::Index s = 0; s < 2 * b; ++s) {
    const auto& src = s < b ? dfp : dfq;
    const Eigen::Index row = s < b ? s : s - b;
    for (Eigen::Index j = 0; j < w; ++j) dm(tape.argmax[static_cast<size_t>(s * w + j)], j) += src(row, j);
  }
  encoder_.backward(store, tape.encoder, dfeat);
}

Eigen::VectorXd CfModel::encode_pointcloud_global(const ParamStore& store, const Cloud& points) const {
  if (points.rows() == 0) throw Error(ErrorCode::EmptyCloud, "cannot encode an empty cloud");
  counters_.cloud_encodings += 1;
  const Tensor feat = encoder_.forward(store, Tensor::from_matrix(points));
  const nn::MaxPool pool = nn::maxpool_points(feat);
  return Eigen::Map<const Eigen::VectorXd>(pool.values.data().data(), pool.values.size());
}

Eigen::VectorXd CfModel::encode_transform(const ParamStore& store, const StateVec& g_t, int t) const {
  if (t < 0 || t > cfg_.diffusion_steps) {
    throw Error(ErrorCode::StepOutOfRange, "timestep " + std::to_string(t) + " outside [0, T]");
  }
  if (!cfg_.diffusion) return Eigen::VectorXd::Zero(feature_width());
  const int ts[1] = {t};
  return tenc_.forward(store, g_t.transpose(), ts, nullptr).row(0).transpose();
}

std::unique_ptr<Conditioning> CfModel::encode(const ParamStore& store, const Cloud& source, const Cloud& target) const {
  auto c = std::make_unique<CfConditioning>();
  c->fp = encode_pointcloud_global(store, source).transpose();
  c->fq = encode_pointcloud_global(store, target).transpose();
  return c;
}

StateVec CfModel::decode(const ParamStore& store, const Conditioning& base, const StateVec& g_t, int t) const {
  const auto& c = dynamic_cast<const CfConditioning&>(base);
  if (t < 0 || t > cfg_.diffusion_steps) {
    throw Error(ErrorCode::StepOutOfRange, "timestep " + std::to_string(t) + " outside [0, T]");
  }
  if (g_t.size() != state_dim()) throw Error(ErrorCode::ShapeMismatch, "noisy state has wrong dimension");
  const int ts[1] = {t};
  return decode_rows(store, c.fp, c.fq, g_t.transpose(), ts).row(0).transpose();
}

// ---------------------------------------------------------------------------
// Correspondence-based variant

namespace {

struct CbPairTape {
  RowMatrix fp;
  RowMatrix fq;  // after adding F_t
  std::vector<RowMatrix> logs;
  RowMatrix assign;
  Eigen::VectorXd weights;
  Cloud soft_targets;
  KabschSolution sol;
  Quaternion q;  // emitted (canonical) quaternion
};

struct CbTape final : BatchTape {
  std::vector<Eigen::Index> offsets;
  nn::Mlp::Tape features;
  Tensor injected;  // trunk output with the state added to template rows
  nn::Mlp::Tape head;
  TransformEncoder::Tape tenc;
  std::vector<CbPairTape> pairs;
  std::vector<const Cloud*> sources;
  std::vector<const Cloud*> targets;
  Eigen::Index rows = 0;
  double temperature = 1.0;
};

struct CbConditioning final : Conditioning {
  Cloud source;
  Cloud target;
  RowMatrix fp;
  RowMatrix trunk_q;  // template trunk output before the state is injected
};

CbPairTape cb_match(const RowMatrix& fp, const RowMatrix& fq, const Cloud& source, const Cloud& target, int iters,
                    double temp) {
  CbPairTape pt;
  pt.fp = fp;
  pt.fq = fq;
  pt.logs = sinkhorn_logs(feature_similarity(fp, fq), iters, temp);
  pt.assign = pt.logs.back().array().exp().matrix();
  pt.weights = pt.assign.rowwise().sum();
  pt.soft_targets = (pt.assign * target).array().colwise() / pt.weights.array();
  pt.sol = kabsch_solve(source, pt.soft_targets, std::span<const double>(pt.weights.data(), pt.weights.size()));
  pt.q = pt.sol.transform.rotation;
  return pt;
}

StateVec cb_state(const CbPairTape& pt) {
  StateVec s(7);
  s << pt.q.w, pt.q.x, pt.q.y, pt.q.z, pt.sol.transform.translation;
  return s;
}

}  // namespace

CbModel::CbModel(ModelConfig cfg) : Model(std::move(cfg)), temperature_(cfg_.cb.temperature_end) {
  if (cfg_.variant != Variant::CorrespondenceBased) throw Error(ErrorCode::ConfigError, "CbModel needs variant cb");
  std::vector<Eigen::Index> widths{descriptor_width(cfg_.cb.knn)};
  widths.insert(widths.end(), cfg_.cb.feature_widths.begin(), cfg_.cb.feature_widths.end());
  const Eigen::Index head_out = widths.back();
  widths.pop_back();
  features_ = nn::Mlp("pointfeat", widths, false);
  head_ = nn::Mlp("pointhead", {widths.back(), head_out}, false);
  tenc_ = TransformEncoder(7, cfg_.cb.transform_hidden, widths.back(), cfg_.cb.time_embedding_dim);
}

void CbModel::init(ParamStore& store, Rng& rng) const {
  features_.init(store, rng);
  head_.init(store, rng);
  if (cfg_.diffusion) tenc_.init(store, rng);
}

void CbModel::set_progress(double progress) {
  const double p = std::clamp(progress, 0.0, 1.0);
  temperature_ = cfg_.cb.temperature_start * std::pow(cfg_.cb.temperature_end / cfg_.cb.temperature_start, p);
}

RowMatrix CbModel::cb_pointwise_features(const ParamStore& store, const Cloud& points) const {
  counters_.cloud_encodings += 1;
  const Tensor trunk = features_.forward(store, Tensor::from_matrix(local_descriptors(points, cfg_.cb.knn)));
  return head_.forward(store, nn::relu(trunk)).matrix();
}

RowMatrix CbModel::forward_batch(const ParamStore& store, std::span<const Sample> batch,
                                 std::unique_ptr<BatchTape>* tape_out) const {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b == 0) throw Error(ErrorCode::EmptySet, "empty batch");
  auto tape = std::make_unique<CbTape>();
  tape->temperature = temperature_;
  std::vector<RowMatrix> desc;
  Eigen::Index total = 0;
  for (const auto& s : batch) {
    for (const Cloud* c : {s.source, s.target}) {
      if (c == nullptr) throw Error(ErrorCode::EmptyCloud, "sample cloud is missing");
      desc.push_back(local_descriptors(*c, cfg_.cb.knn));
      tape->offsets.push_back(total);
      total += c->rows();
    }
    tape->sources.push_back(s.source);
    tape->targets.push_back(s.target);
  }
  tape->offsets.push_back(total);
  tape->rows = total;
  Tensor x({total, descriptor_width(cfg_.cb.knn)});
  for (size_t k = 0; k < desc.size(); ++k) x.matrix().middleRows(tape->offsets[k], desc[k].rows()) = desc[k];
  counters_.cloud_encodings += static_cast<long>(desc.size());
  Tensor trunk = features_.forward(store, x, &tape->features);
  const Eigen::Index d = trunk.cols();

  RowMatrix g(b, 7);
  std::vector<int> ts;
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& s = batch[static_cast<size_t>(k)];
    if (s.g_t.size() != 7) throw Error(ErrorCode::ShapeMismatch, "noisy state has wrong dimension");
    g.row(k) = s.g_t.transpose();
    ts.push_back(s.t);
  }
  const RowMatrix ft = cfg_.diffusion ? tenc_.forward(store, g, ts, &tape->tenc) : RowMatrix::Zero(b, d);

  // The state enters the template rows ahead of a nonlinearity: a constant
  // shift of the final features would cancel in the Sinkhorn normalization.
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto iq = static_cast<size_t>(2 * k + 1);
    trunk.matrix().middleRows(tape->offsets[iq], tape->offsets[iq + 1] - tape->offsets[iq]).rowwise() += ft.row(k);
  }
  tape->injected = trunk;
  const RowMatrix feat = head_.forward(store, nn::relu(trunk), &tape->head).matrix();

  RowMatrix pred(b, 7);
  counters_.decoder_passes += b;
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto& s = batch[static_cast<size_t>(k)];
    const auto ip = static_cast<size_t>(2 * k);
    const RowMatrix fp = feat.middleRows(tape->offsets[ip], s.source->rows());
    const RowMatrix fq = feat.middleRows(tape->offsets[ip + 1], s.target->rows());
    tape->pairs.push_back(cb_match(fp, fq, *s.source, *s.target, cfg_.cb.sinkhorn_iters, temperature_));
    pred.row(k) = cb_state(tape->pairs.back()).transpose();
  }
  if (tape_out) *tape_out = std::move(tape);
  return pred;
}

void CbModel::backward_batch(ParamStore& store, const BatchTape& base, const RowMatrix& d_pred) const {
  const auto& tape = dynamic_cast<const CbTape&>(base);
  const auto b = static_cast<Eigen::Index>(tape.pairs.size());
  const Eigen::Index d = head_.out_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor dfeat({tape.rows, d});
  auto dm = dfeat.matrix();
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto ik = static_cast<size_t>(k);
    const CbPairTape& pt = tape.pairs[ik];
    const Cloud& src = *tape.sources[ik];
    const Cloud& tgt = *tape.targets[ik];

    // Quaternion gradient -> body-frame rotation gradient -> ambient dR.
    const Quaternion& q = pt.q;
    const Eigen::Vector4d gq = d_pred.row(k).head<4>().transpose();
    Vec3 g_omega;
    for (int axis = 0; axis < 3; ++axis) {
      Quaternion e{0, 0, 0, 0};
      (axis == 0 ? e.x : axis == 1 ? e.y : e.z) = 1.0;
      const Quaternion dq = q * e;
      g_omega[axis] = 0.5 * gq.dot(Eigen::Vector4d(dq.w, dq.x, dq.y, dq.z));
    }
    const Mat3 d_rot = pt.sol.rotation * skew(g_omega) * 0.5;
    const Vec3 d_trans = d_pred.row(k).tail<3>().transpose();
    const KabschGrads kg = kabsch_backward(pt.sol, src, pt.soft_targets, pt.weights, d_rot, d_trans);

    // y_i = sum_j A_ij q_j / w_i with w_i = sum_j A_ij
    const Eigen::VectorXd inv_w = pt.weights.cwiseInverse();
    const Eigen::VectorXd dw_total =
        kg.d_weights - kg.d_dst.cwiseProduct(pt.soft_targets).rowwise().sum().cwiseProduct(inv_w);
    RowMatrix d_assign = inv_w.asDiagonal() * (kg.d_dst * tgt.transpose());
    d_assign.colwise() += dw_total;
    const RowMatrix dsim = sinkhorn_backward(pt.logs, tape.temperature, d_assign);

    const RowMatrix dfp =
        scale * (2.0 * dsim * pt.fq - 2.0 * dsim.rowwise().sum().asDiagonal() * pt.fp);
    const RowMatrix dfq =
        scale * (2.0 * dsim.transpose() * pt.fp - 2.0 * dsim.colwise().sum().transpose().asDiagonal() * pt.fq);
    dm.middleRows(tape.offsets[2 * ik], dfp.rows()) += dfp;
    dm.middleRows(tape.offsets[2 * ik + 1], dfq.rows()) += dfq;
  }
  const Tensor d_trunk = nn::relu_backward(tape.injected, head_.backward(store, tape.head, dfeat));
  if (cfg_.diffusion) {
    RowMatrix dft(b, d_trunk.cols());
    for (Eigen::Index k = 0; k < b; ++k) {
      const auto iq = static_cast<size_t>(2 * k + 1);
      dft.row(k) =
          d_trunk.matrix().middleRows(tape.offsets[iq], tape.offsets[iq + 1] - tape.offsets[iq]).colwise().sum();
    }
    tenc_.backward(store, tape.tenc, dft);
  }
  features_.backward(store, tape.features, d_trunk);
}

std::unique_ptr<Conditioning> CbModel::encode(const ParamStore& store, const Cloud& source, const Cloud& target) const {
  auto c = std::make_unique<CbConditioning>();
  c->source = source;
  c->target = target;
  c->fp = cb_pointwise_features(store, source);
  c->trunk_q = features_.forward(store, Tensor::from_matrix(local_descriptors(target, cfg_.cb.knn))).matrix();
  counters_.cloud_encodings += 1;
  return c;
}

StateVec CbModel::decode(const ParamStore& store, const Conditioning& base, const StateVec& g_t, int t) const {
  const auto& c = dynamic_cast<const CbConditioning&>(base);
  if (t < 0 || t > cfg_.diffusion_steps) {
    throw Error(ErrorCode::StepOutOfRange, "timestep " + std::to_string(t) + " outside [0, T]");
  }
  if (g_t.size() != 7) throw Error(ErrorCode::ShapeMismatch, "noisy state has wrong dimension");
  RowMatrix trunk = c.trunk_q;
  if (cfg_.diffusion) {
    const int ts[1] = {t};
    trunk.rowwise() += tenc_.forward(store, g_t.transpose(), ts, nullptr).row(0);
  }
  const RowMatrix fq = head_.forward(store, nn::relu(Tensor::from_matrix(trunk))).matrix();
  counters_.decoder_passes += 1;
  return cb_state(cb_match(c.fp, fq, c.source, c.target, cfg_.cb.sinkhorn_iters, temperature_));
}

}  // namespace pcrd::regnet
