#pragma once

// The denoiser f(G_t, t | P, Q). Two variants share the transform encoder:
//  - correspondence-free: global PointNet features, fusion, MLP regression;
//  - correspondence-based: rigid-invariant point features, Sinkhorn soft
//    matching and a weighted Kabsch fit.
// Each variant exposes batched training forward/backward and a split
// encode/decode path for sampling, where clouds are encoded once per pair.

#include <atomic>
#include <memory>
#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <vector>

#include "pcrd/diffusion.hpp"
#include "pcrd/geom3d.hpp"
#include "pcrd/nnkit.hpp"

namespace pcrd::regnet {

using nn::ParamStore;
using nn::RowMatrix;
using nn::Tensor;

enum class Variant { CorrespondenceFree, CorrespondenceBased };
enum class Representation { Quat7, Euler6 };
enum class Fusion { FtPlusP_ConcatQ, FtPlusQ_ConcatP, ConcatAll };

std::string to_string(Variant v);
std::string to_string(Representation r);
std::string to_string(Fusion f);
Variant parse_variant(const std::string& s);
Representation parse_representation(const std::string& s);
Fusion parse_fusion(const std::string& s);

Eigen::Index state_dim(Representation r);

struct CFModelConfig {
  std::vector<Eigen::Index> encoder_widths{64, 64, 64, 128, 1024};
  // Hidden and output width of the transform encoder; the hidden width must
  // equal the timestep-embedding width, the output the encoder's last width.
  std::vector<Eigen::Index> transform_widths{128, 1024};
  Eigen::Index time_embedding_dim = 128;
  // Hidden decoder layers; input width follows from fusion, output from repr.
  std::vector<Eigen::Index> decoder_hidden{1024, 512, 256};
};

struct CBModelConfig {
  std::vector<Eigen::Index> feature_widths{64, 64, 128, 256};
  int sinkhorn_iters = 5;
  double temperature_start = 1.0;
  double temperature_end = 0.1;
  int knn = 16;
  Eigen::Index transform_hidden = 128;
  Eigen::Index time_embedding_dim = 128;
};

struct ModelConfig {
  Variant variant = Variant::CorrespondenceFree;
  Representation repr = Representation::Quat7;
  Fusion fusion = Fusion::FtPlusP_ConcatQ;
  // false: transform encoder bypassed and F_t = 0 (diffusion-free ablation).
  bool diffusion = true;
  int diffusion_steps = 1000;
  CFModelConfig cf;
  CBModelConfig cb;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Rejects unknown keys.
void from_json(const nlohmann::json& j, ModelConfig& c);

// Sinusoidal timestep embedding: [sin(t w_k), cos(t w_k)], w_k = 10000^(-k/(dim/2)).
Eigen::VectorXd timestep_embedding(int t, Eigen::Index dim);

// Fusion of the three feature rows (each [B, W]).
RowMatrix fuse(const RowMatrix& ft, const RowMatrix& fp, const RowMatrix& fq, Fusion mode);
Eigen::Index fused_width(Eigen::Index width, Fusion mode);

// exp(sim / temp) followed by `iters` alternating row then column
// normalizations, computed in the log domain.
RowMatrix sinkhorn(const RowMatrix& sim, int iters, double temp);

// Rigid-motion-invariant local descriptors per point: sorted distances to the
// k nearest neighbours, local covariance eigenvalues, offsets of the point from
// the local and global centroids and their components along the local normal.
RowMatrix local_descriptors(const Cloud& points, int knn);
Eigen::Index descriptor_width(int knn);

// Differentiable map from a raw network state to a rotation and translation.
// Quat7 normalizes the quaternion part; Euler6 reads Z-Y-X angles.
struct Pose {
  Mat3 rotation;
  Vec3 translation;
};
Pose state_to_pose(const StateVec& state, Representation repr);
// d(loss)/d(state) given d(loss)/d(rotation) and d(loss)/d(translation).
StateVec state_to_pose_backward(const StateVec& state, Representation repr, const Mat3& d_rotation,
                                const Vec3& d_translation);
RigidTransform state_to_transform(const StateVec& state, Representation repr);
StateVec transform_to_state(const RigidTransform& g, Representation repr);

// Backward of the weighted Kabsch fit: given d(loss)/d(rotation) and
// d(loss)/d(translation), returns gradients for dst and the weights.
struct KabschGrads {
  Cloud d_dst;
  Eigen::VectorXd d_weights;
};
KabschGrads kabsch_backward(const KabschSolution& sol, const Cloud& src, const Cloud& dst,
                            const Eigen::VectorXd& weights, const Mat3& d_rotation, const Vec3& d_translation);

// Instrumentation for the single-pass contract.
struct CallCounters {
  std::atomic<long> cloud_encodings{0};   // one per cloud pushed through an encoder
  std::atomic<long> decoder_passes{0};    // one per prediction
  std::atomic<long> source_reapplied{0};  // predicted transform fed back as input; must stay 0
  void reset() {
    cloud_encodings = 0;
    decoder_passes = 0;
    source_reapplied = 0;
  }
};

struct Sample {
  const Cloud* source = nullptr;
  const Cloud* target = nullptr;
  StateVec g_t;
  int t = 0;
};

// Opaque per-pair cache from encode().
struct Conditioning {
  virtual ~Conditioning() = default;
};

// Opaque training tape from forward_batch().
struct BatchTape {
  virtual ~BatchTape() = default;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);
  virtual ~Model() = default;

  const ModelConfig& config() const { return cfg_; }
  Eigen::Index state_dim() const { return pcrd::regnet::state_dim(cfg_.repr); }

  virtual void init(ParamStore& store, Rng& rng) const = 0;

  // Batched training pass: predictions [B, state_dim].
  virtual RowMatrix forward_batch(const ParamStore& store, std::span<const Sample> batch,
                                  std::unique_ptr<BatchTape>* tape) const = 0;
  // Accumulates parameter gradients given d(loss)/d(predictions).
  virtual void backward_batch(ParamStore& store, const BatchTape& tape, const RowMatrix& d_pred) const = 0;

  virtual std::unique_ptr<Conditioning> encode(const ParamStore& store, const Cloud& source,
                                               const Cloud& target) const = 0;
  virtual StateVec decode(const ParamStore& store, const Conditioning& cond, const StateVec& g_t,
                          int t) const = 0;

  // Training progress in [0, 1]; only the correspondence-based variant uses it
  // (annealed Sinkhorn temperature).
  virtual void set_progress(double progress) { (void)progress; }

  CallCounters& counters() const { return counters_; }

 protected:
  ModelConfig cfg_;
  mutable CallCounters counters_;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg);

// Transform encoder shared by both variants: dense(dim -> hidden), add the
// timestep embedding, relu, dense(hidden -> out).
class TransformEncoder {
 public:
  TransformEncoder() = default;
  TransformEncoder(Eigen::Index in_dim, Eigen::Index hidden, Eigen::Index out, Eigen::Index embed_dim);

  void init(ParamStore& store, Rng& rng) const;

  struct Tape {
    Tensor input;
    Tensor hidden_pre;  // after dense + embedding, before relu
    Tensor hidden;
  };
  // g_t rows [B, in_dim], one timestep per row.
  RowMatrix forward(const ParamStore& store, const RowMatrix& g_t, std::span<const int> t, Tape* tape) const;
  void backward(ParamStore& store, const Tape& tape, const RowMatrix& d_out) const;

  Eigen::Index out_width() const { return out_; }

 private:
  Eigen::Index in_ = 7, hidden_ = 128, out_ = 1024, embed_ = 128;
};

class CfModel final : public Model {
 public:
  explicit CfModel(ModelConfig cfg);

  void init(ParamStore& store, Rng& rng) const override;
  RowMatrix forward_batch(const ParamStore& store, std::span<const Sample> batch,
                          std::unique_ptr<BatchTape>* tape) const override;
  void backward_batch(ParamStore& store, const BatchTape& tape, const RowMatrix& d_pred) const override;
  std::unique_ptr<Conditioning> encode(const ParamStore& store, const Cloud& source,
                                       const Cloud& target) const override;
  StateVec decode(const ParamStore& store, const Conditioning& cond, const StateVec& g_t, int t) const override;

  // Global feature of one cloud: shared per-point MLP then max over points.
  Eigen::VectorXd encode_pointcloud_global(const ParamStore& store, const Cloud& points) const;
  // F_t for a single state.
  Eigen::VectorXd encode_transform(const ParamStore& store, const StateVec& g_t, int t) const;

  Eigen::Index feature_width() const { return encoder_.out_width(); }

 private:
  RowMatrix decode_rows(const ParamStore& store, const RowMatrix& fp, const RowMatrix& fq,
                        const RowMatrix& g_t, std::span<const int> t) const;

  nn::Mlp encoder_;
  TransformEncoder tenc_;
  nn::Mlp decoder_;
};

class CbModel final : public Model {
 public:
  explicit CbModel(ModelConfig cfg);

  void init(ParamStore& store, Rng& rng) const override;
  RowMatrix forward_batch(const ParamStore& store, std::span<const Sample> batch,
                          std::unique_ptr<BatchTape>* tape) const override;
  void backward_batch(ParamStore& store, const BatchTape& tape, const RowMatrix& d_pred) const override;
  std::unique_ptr<Conditioning> encode(const ParamStore& store, const Cloud& source,
                                       const Cloud& target) const override;
  StateVec decode(const ParamStore& store, const Conditioning& cond, const StateVec& g_t, int t) const override;
  void set_progress(double progress) override;

  // Per-point features [N, D] of one cloud.
  RowMatrix cb_pointwise_features(const ParamStore& store, const Cloud& points) const;

  double temperature() const { return temperature_; }
  void set_temperature(double temp) { temperature_ = temp; }

 private:
  nn::Mlp features_;  // per-point trunk
  nn::Mlp head_;      // shared last layer, applied after the state injection
  TransformEncoder tenc_;
  double temperature_;
};

}  // namespace pcrd::regnet
