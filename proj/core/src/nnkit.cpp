#include "pcrd/nnkit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pcrd/error.hpp"

namespace pcrd::nn {

namespace {

std::string shape_str(const std::vector<Eigen::Index>& s) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
  out << ']';
  return out.str();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace

Tensor::Tensor(std::vector<Eigen::Index> shape, double fill) : shape_(std::move(shape)) {
  Eigen::Index n = 1;
  for (auto d : shape_) {
    if (d <= 0) throw Error(ErrorCode::ShapeMismatch, "tensor dims must be positive: " + shape_str(shape_));
    n *= d;
  }
  data_.assign(static_cast<size_t>(n), fill);
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Tensor Tensor::from_vector(const Eigen::VectorXd& v) {
  Tensor t({v.size()});
  std::copy(v.data(), v.data() + v.size(), t.data_.begin());
  return t;
}

Eigen::Index Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  throw Error(ErrorCode::ShapeMismatch, "matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

Eigen::Index Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  throw Error(ErrorCode::ShapeMismatch, "matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "dense expects x[B,I], W[I,O], b[O]");
  require(x.cols() == w.rows() && w.cols() == b.size(),
          "dense shapes " + shape_str(x.shape()) + " " + shape_str(w.shape()) + " " + shape_str(b.shape()));
  Tensor y({x.rows(), w.cols()});
  auto ym = y.matrix();
  ym.noalias() = x.matrix() * w.matrix();
  ym.rowwise() += b.matrix().row(0);
  return y;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  require(dy.rank() == 2 && dy.rows() == x.rows() && dy.cols() == w.cols(), "dense_backward dy shape");
  DenseGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({w.cols()})};
  g.dx.matrix().noalias() = dy.matrix() * w.matrix().transpose();
  g.dw.matrix().noalias() = x.matrix().transpose() * dy.matrix();
  g.db.matrix() = dy.matrix().colwise().sum();
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  require(same_shape(x, dy), "relu_backward shape");
  Tensor dx = dy;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  }
  return dx;
}

MaxPool maxpool_points(const Tensor& x) {
  if (x.rank() != 2 || x.shape()[0] < 1) throw Error(ErrorCode::EmptyCloud, "maxpool over no points");
  const Eigen::Index n = x.rows(), d = x.cols();
  MaxPool pool{Tensor({d}), std::vector<Eigen::Index>(static_cast<size_t>(d), 0), n};
  const auto m = x.matrix();
  for (Eigen::Index j = 0; j < d; ++j) pool.values[j] = m(0, j);
  for (Eigen::Index i = 1; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      if (m(i, j) > pool.values[j]) {
        pool.values[j] = m(i, j);
        pool.argmax[static_cast<size_t>(j)] = i;
      }
    }
  }
  return pool;
}

Tensor maxpool_backward(const MaxPool& pool, const Tensor& dy) {
  const auto d = static_cast<Eigen::Index>(pool.argmax.size());
  require(dy.size() == d, "maxpool_backward dy shape");
  Tensor dx({pool.points, d});
  auto m = dx.matrix();
  for (Eigen::Index j = 0; j < d; ++j) m(pool.argmax[static_cast<size_t>(j)], j) = dy[j];
  return dx;
}

Param& ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw Error(ErrorCode::ConfigError, "duplicate parameter " + name);
  index_[name] = params_.size();
  Param p{name, std::move(init), {}, {}, {}};
  p.grad = Tensor(p.value.shape());
  p.m = Tensor(p.value.shape());
  p.v = Tensor(p.value.shape());
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::MissingGradient, "unknown parameter " + name);
  return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::MissingGradient, "unknown parameter " + name);
  return params_[it->second];
}

Eigen::Index ParamStore::total_size() const {
  Eigen::Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

Tensor xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({fan_in, fan_out});
  for (auto& v : w.data()) v = dist(rng);
  return w;
}

void adam_step(ParamStore& store, const AdamConfig& cfg) {
  for (const auto& p : store.params()) {
    if (!same_shape(p.grad, p.value)) throw Error(ErrorCode::MissingGradient, "no gradient for " + p.name);
  }
  const auto t = static_cast<double>(++store.step_counter());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : store.params()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = p.m[i] / c1;
      const double v_hat = p.v[i] / c2;
      p.value[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

Mlp::Mlp(std::string prefix, std::vector<Eigen::Index> widths, bool relu_on_output)
    : prefix_(std::move(prefix)), widths_(std::move(widths)), relu_on_output_(relu_on_output) {
  if (widths_.size() < 2) throw Error(ErrorCode::ConfigError, "mlp " + prefix_ + " needs at least two widths");
}

std::string Mlp::weight_name(size_t layer) const { return prefix_ + "." + std::to_string(layer) + ".weight"; }
std::string Mlp::bias_name(size_t layer) const { return prefix_ + "." + std::to_string(layer) + ".bias"; }

void Mlp::init(ParamStore& store, Rng& rng) const {
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    store.add(weight_name(l), xavier_uniform(widths_[l], widths_[l + 1], rng));
    store.add(bias_name(l), Tensor({widths_[l + 1]}));
  }
}

Tensor Mlp::forward(const ParamStore& store, const Tensor& x, Tape* tape) const {
  const size_t layers = widths_.size() - 1;
  if (tape) {
    tape->inputs.clear();
    tape->pre_acts.clear();
  }
  Tensor h = x;
  for (size_t l = 0; l < layers; ++l) {
    Tensor z = dense(h, store.get(weight_name(l)).value, store.get(bias_name(l)).value);
    const bool act = l + 1 < layers || relu_on_output_;
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->pre_acts.push_back(z);
    }
    h = act ? relu(z) : std::move(z);
  }
  return h;
}

Tensor Mlp::backward(ParamStore& store, const Tape& tape, const Tensor& dy) const {
  const size_t layers = widths_.size() - 1;
  if (tape.inputs.size() != layers) throw Error(ErrorCode::MissingGradient, "mlp tape is empty");
  Tensor grad = dy;
  for (size_t l = layers; l-- > 0;) {
    const bool act = l + 1 < layers || relu_on_output_;
    if (act) grad = relu_backward(tape.pre_acts[l], grad);
    Param& w = store.get(weight_name(l));
    Param& b = store.get(bias_name(l));
    DenseGrads g = dense_backward(tape.inputs[l], w.value, grad);
    w.grad.matrix() += g.dw.matrix();
    b.grad.matrix() += g.db.matrix();
    grad = std::move(g.dx);
  }
  return grad;
}

GradCheckReport grad_check(const LossClosure& loss, ParamStore& store, const GradCheckOptions& opts) {
  store.zero_grad();
  const double base = loss(store, true);
  std::vector<Tensor> analytic;
  analytic.reserve(store.params().size());
  for (const auto& p : store.params()) analytic.push_back(p.grad);

  const double again = loss(store, false);
  if (again != base) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "loss changed between identical evaluations: " << base << " vs " << again;
    throw Error(ErrorCode::NonDeterministicLoss, msg.str());
  }

  // (param index, element index) pairs to check.
  std::vector<std::pair<size_t, Eigen::Index>> sites;
  const Eigen::Index total = store.total_size();
  if (total <= opts.max_checked) {
    for (size_t k = 0; k < store.params().size(); ++k) {
      for (Eigen::Index i = 0; i < store.params()[k].value.size(); ++i) sites.emplace_back(k, i);
    }
  } else {
    Rng rng(opts.seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, total - 1);
    for (Eigen::Index s = 0; s < opts.max_checked; ++s) {
      Eigen::Index flat = pick(rng);
      size_t k = 0;
      while (flat >= store.params()[k].value.size()) flat -= store.params()[k++].value.size();
      sites.emplace_back(k, flat);
    }
  }

  GradCheckReport report;
  for (const auto& [k, i] : sites) {
    double& w = store.params()[k].value[i];
    const double saved = w;
    w = saved + opts.step;
    const double up = loss(store, false);
    w = saved - opts.step;
    const double down = loss(store, false);
    w = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = analytic[k][i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
    ++report.checked;
    if (rel > report.max_relative_error || report.worst_index < 0) {
      report.max_relative_error = rel;
      report.worst_param = store.params()[k].name;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  // Leave the analytic gradients in place for the caller.
  for (size_t k = 0; k < store.params().size(); ++k) store.params()[k].grad = analytic[k];
  return report;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(ErrorCode::ParseError, "truncated checkpoint " + path.string());
  }
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write("PCRD", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    if (p.name.size() > 0xFFFF) throw Error(ErrorCode::IoFailure, "parameter name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) put<float>(out, static_cast<float>(v));
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PCRD", 4) != 0) {
    throw Error(ErrorCode::ParseError, path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::CheckpointVersionMismatch,
                path.string() + " has version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto count = get<std::uint32_t>(in, path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get<std::uint16_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error(ErrorCode::ParseError, "truncated checkpoint " + path.string());
    const auto rank = get<std::uint8_t>(in, path);
    std::vector<Eigen::Index> shape;
    for (int d = 0; d < rank; ++d) shape.push_back(get<std::uint32_t>(in, path));
    Tensor t(shape);
    for (auto& v : t.data()) v = get<float>(in, path);
    out.push_back({std::move(name), std::move(t)});
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::ParseError, "trailing bytes in checkpoint " + path.string());
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  const auto tensors = read_checkpoint(path);
  if (tensors.size() != store.params().size()) {
    throw Error(ErrorCode::ParseError, "checkpoint has " + std::to_string(tensors.size()) +
                                           " tensors, model expects " + std::to_string(store.params().size()));
  }
  for (const auto& nt : tensors) {
    if (!store.contains(nt.name)) throw Error(ErrorCode::ParseError, "checkpoint tensor " + nt.name + " unknown");
    Param& p = store.get(nt.name);
    if (!same_shape(p.value, nt.value)) {
      throw Error(ErrorCode::ParseError, "checkpoint tensor " + nt.name + " has shape " +
                                             shape_str(nt.value.shape()) + ", model expects " +
                                             shape_str(p.value.shape()));
    }
    p.value = nt.value;
  }
}

}  // namespace pcrd::nn
