#pragma once

// Minimal differentiable compute core. Layers are explicit forward/backward
// pairs; there is no dynamic graph.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <new>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcrd/geom3d.hpp"

namespace pcrd::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Heap storage aligned to 64 bytes. Eigen's vectorized reductions peel
// leading elements based on the buffer address, so unaligned storage would
// make results depend on where the allocator happened to place a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

// Dense row-major array. Rank-1 tensors view as a single row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Eigen::Index> shape, double fill = 0.0);
  static Tensor from_matrix(const RowMatrix& m);
  static Tensor from_vector(const Eigen::VectorXd& v);

  const std::vector<Eigen::Index>& shape() const { return shape_; }
  Eigen::Index rank() const { return static_cast<Eigen::Index>(shape_.size()); }
  Eigen::Index size() const { return static_cast<Eigen::Index>(data_.size()); }
  Eigen::Index rows() const;
  Eigen::Index cols() const;

  Buffer& data() { return data_; }
  const Buffer& data() const { return data_; }
  double& operator[](Eigen::Index i) { return data_[static_cast<size_t>(i)]; }
  double operator[](Eigen::Index i) const { return data_[static_cast<size_t>(i)]; }

  MatrixMap matrix() { return {data_.data(), rows(), cols()}; }
  ConstMatrixMap matrix() const { return {data_.data(), rows(), cols()}; }

  void fill(double v);
  bool all_finite() const;

 private:
  std::vector<Eigen::Index> shape_;
  Buffer data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

// y = x W + b for x[B,I], W[I,O], b[O].
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

struct DenseGrads {
  Tensor dx;
  Tensor dw;
  Tensor db;
};
DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy);

Tensor relu(const Tensor& x);
// Gradient through relu given the relu *input* x.
Tensor relu_backward(const Tensor& x, const Tensor& dy);

// Per-feature max over the point dimension of x[N,D].
struct MaxPool {
  Tensor values;                    // [D]
  std::vector<Eigen::Index> argmax; // first index on ties
  Eigen::Index points = 0;
};
MaxPool maxpool_points(const Tensor& x);
Tensor maxpool_backward(const MaxPool& pool, const Tensor& dy);

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
};

class ParamStore {
 public:
  // Registers a parameter; names must be unique.
  Param& add(const std::string& name, Tensor init);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Eigen::Index total_size() const;

  void zero_grad();
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  std::int64_t& step_counter() { return step_; }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, size_t> index_;
  std::int64_t step_ = 0;
};

// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
Tensor xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter.
void adam_step(ParamStore& store, const AdamConfig& cfg);

// Shared-weight MLP: dense layers with ReLU between them, and optionally after
// the last layer as well.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, std::vector<Eigen::Index> widths, bool relu_on_output);

  void init(ParamStore& store, Rng& rng) const;

  struct Tape {
    std::vector<Tensor> inputs;       // input of each dense layer
    std::vector<Tensor> pre_acts;     // output of each dense layer, before relu
  };

  Tensor forward(const ParamStore& store, const Tensor& x, Tape* tape = nullptr) const;
  // Accumulates parameter gradients into the store; returns d(loss)/d(input).
  Tensor backward(ParamStore& store, const Tape& tape, const Tensor& dy) const;

  const std::vector<Eigen::Index>& widths() const { return widths_; }
  Eigen::Index in_width() const { return widths_.front(); }
  Eigen::Index out_width() const { return widths_.back(); }
  std::string weight_name(size_t layer) const;
  std::string bias_name(size_t layer) const;

 private:
  std::string prefix_;
  std::vector<Eigen::Index> widths_;
  bool relu_on_output_ = false;
};

// Loss closure for gradient checking. When `with_grad` is true it must also
// leave d(loss)/d(param) in the store's gradient tensors.
using LossClosure = std::function<double(ParamStore& store, bool with_grad)>;

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error denominator is max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  // Check every element up to this many; above it a seeded random subsample.
  Eigen::Index max_checked = 10000;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Eigen::Index checked = 0;
};

GradCheckReport grad_check(const LossClosure& loss, ParamStore& store, const GradCheckOptions& opts = {});

// Binary checkpoint: "PCRD", u32 version, u32 count, then per tensor
// u16 name length, name bytes, u8 rank, rank x u32 dims, float32 values.
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);
// Copies checkpoint values into existing parameters; names and shapes must match.
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace pcrd::nn
