#include "pcrd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "pcrd/error.hpp"

namespace pcrd::train {

using regnet::Representation;

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& why) {
  throw Error(ErrorCode::ConfigError, key + ": " + why);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) config_error("train.epochs", "must be >= 0");
  if (batch_size < 1) config_error("train.batch_size", "must be >= 1");
  if (!(lr > 0.0)) config_error("train.lr", "must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) config_error("train.lr_decay", "must lie in (0, 1]");
  if (patience < 1) config_error("train.patience", "must be >= 1");
  if (!(min_lr >= 0.0)) config_error("train.min_lr", "must be >= 0");
  if (!(w_diff >= 0.0) || !(w_cf1 >= 0.0) || !(w_cf2 >= 0.0)) config_error("train.w_diff", "loss weights must be >= 0");
  if (w_diff + w_cf1 + w_cf2 <= 0.0) config_error("train.w_diff", "loss weights must not all be zero");
  if (max_steps < 0) config_error("train.max_steps", "must be >= 0");
  if (eval_every < 0) config_error("train.eval_every", "must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) config_error("train.val_fraction", "must lie in [0, 1)");
  if (checkpoint_every < 0) config_error("train.checkpoint_every", "must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},       {"batch_size", c.batch_size},   {"lr", c.lr},
                     {"lr_decay", c.lr_decay},   {"patience", c.patience},       {"min_lr", c.min_lr},
                     {"w_diff", c.w_diff},       {"w_cf1", c.w_cf1},             {"w_cf2", c.w_cf2},
                     {"seed", c.seed},           {"max_steps", c.max_steps},     {"eval_every", c.eval_every},
                     {"val_fraction", c.val_fraction}, {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"epochs", "batch_size", "lr",        "lr_decay",   "patience",
                                           "min_lr", "w_diff",     "w_cf1",     "w_cf2",      "seed",
                                           "max_steps", "eval_every", "val_fraction", "checkpoint_every"};
  if (!j.is_object()) config_error("train", "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) config_error("train." + key, "unknown key");
  }
  const auto read = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception& e) {
      config_error(std::string("train.") + key, e.what());
    }
  };
  read("epochs", c.epochs);
  read("batch_size", c.batch_size);
  read("lr", c.lr);
  read("lr_decay", c.lr_decay);
  read("patience", c.patience);
  read("min_lr", c.min_lr);
  read("w_diff", c.w_diff);
  read("w_cf1", c.w_cf1);
  read("w_cf2", c.w_cf2);
  read("seed", c.seed);
  read("max_steps", c.max_steps);
  read("eval_every", c.eval_every);
  read("val_fraction", c.val_fraction);
  read("checkpoint_every", c.checkpoint_every);
  c.validate();
}

double loss_diff(const StateVec& pred, const StateVec& target, StateVec* grad) {
  if (pred.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "loss_diff dimension mismatch");
  const StateVec d = pred - target;
  if (grad) *grad = d;
  return 0.5 * d.squaredNorm();
}

double loss_chamfer(const Cloud& moved, const Cloud& target, Cloud* grad) {
  if (moved.rows() == 0 || target.rows() == 0) throw Error(ErrorCode::EmptyCloud, "chamfer over an empty cloud");
  const KdTree target_index(target);
  const KdTree moved_index(moved);
  const auto n = static_cast<double>(moved.rows());
  const auto m = static_cast<double>(target.rows());
  if (grad) *grad = Cloud::Zero(moved.rows(), 3);
  double forward = 0.0;
  for (Eigen::Index i = 0; i < moved.rows(); ++i) {
    const auto hit = target_index.nearest(moved.row(i).transpose());
    forward += hit.squared_distance;
    if (grad) grad->row(i) += (2.0 / n) * (moved.row(i) - target.row(hit.index));
  }
  double backward = 0.0;
  for (Eigen::Index j = 0; j < target.rows(); ++j) {
    const auto hit = moved_index.nearest(target.row(j).transpose());
    backward += hit.squared_distance;
    if (grad) grad->row(hit.index) += (2.0 / m) * (moved.row(hit.index) - target.row(j));
  }
  return forward / n + backward / m;
}

double loss_chamfer_brute_force(const Cloud& moved, const Cloud& target) {
  if (moved.rows() == 0 || target.rows() == 0) throw Error(ErrorCode::EmptyCloud, "chamfer over an empty cloud");
  double forward = 0.0;
  for (Eigen::Index i = 0; i < moved.rows(); ++i) forward += brute_force_nearest(target, moved.row(i).transpose()).squared_distance;
  double backward = 0.0;
  for (Eigen::Index j = 0; j < target.rows(); ++j) backward += brute_force_nearest(moved, target.row(j).transpose()).squared_distance;
  return forward / static_cast<double>(moved.rows()) + backward / static_cast<double>(target.rows());
}

double loss_transform(const Mat3& r_pred, const Vec3& t_pred, const Mat3& r_gt, const Vec3& t_gt, Mat3* d_r,
                      Vec3* d_t) {
  const Mat3 a = r_pred.transpose() * r_gt - Mat3::Identity();
  const Vec3 c = t_gt - t_pred;
  const Vec3 b = r_pred.transpose() * c;
  const double value = std::sqrt(a.squaredNorm() + b.squaredNorm());
  if (d_r || d_t) {
    Mat3 da = Mat3::Zero();
    Vec3 db = Vec3::Zero();
    if (value > 0.0) {
      da = a / value;
      db = b / value;
    }
    if (d_r) *d_r = r_gt * da.transpose() + c * db.transpose();
    if (d_t) *d_t = -(r_pred * db);
  }
  return value;
}

double loss_transform(const RigidTransform& pred, const RigidTransform& gt) {
  const Mat4 e = inverse(pred).matrix() * gt.matrix() - Mat4::Identity();
  return e.norm();
}

LossBreakdown pair_loss(const StateVec& pred, const RegPair& pair, Representation repr, const TrainConfig& cfg,
                        StateVec* grad) {
  LossBreakdown out;
  const StateVec target = regnet::transform_to_state(pair.g_gt, repr);
  StateVec g_diff;
  out.diff = loss_diff(pred, target, grad ? &g_diff : nullptr);

  const regnet::Pose pose = regnet::state_to_pose(pred, repr);
  Cloud moved = pair.source * pose.rotation.transpose();
  moved.rowwise() += pose.translation.transpose();
  Cloud d_moved;
  out.cf1 = loss_chamfer(moved, pair.target, grad ? &d_moved : nullptr);

  Mat3 d_r2;
  Vec3 d_t2;
  out.cf2 = loss_transform(pose.rotation, pose.translation, pair.g_gt.rotation_matrix(), pair.g_gt.translation,
                           grad ? &d_r2 : nullptr, grad ? &d_t2 : nullptr);
  out.total = cfg.w_diff * out.diff + cfg.w_cf1 * out.cf1 + cfg.w_cf2 * out.cf2;

  if (grad) {
    const Mat3 d_r1 = d_moved.transpose() * pair.source;
    const Vec3 d_t1 = d_moved.colwise().sum().transpose();
    *grad = cfg.w_diff * g_diff + regnet::state_to_pose_backward(pred, repr, cfg.w_cf1 * d_r1 + cfg.w_cf2 * d_r2,
                                                                 cfg.w_cf1 * d_t1 + cfg.w_cf2 * d_t2);
  }
  return out;
}

std::vector<Corruption> corrupt_batch(std::span<const RegPair* const> batch, const NoiseSchedule& sched,
                                      Representation repr, bool diffusion, Rng& rng) {
  std::uniform_int_distribution<int> step(1, sched.steps);
  std::vector<Corruption> out;
  out.reserve(batch.size());
  for (const RegPair* pair : batch) {
    Corruption c;
    c.t = step(rng);
    const StateVec g0 = regnet::transform_to_state(pair->g_gt, repr);
    c.eps = standard_normal(g0.size(), rng);
    c.g_t = diffusion ? forward_sample(sched, g0, c.t, c.eps) : StateVec::Zero(g0.size());
    out.push_back(std::move(c));
  }
  return out;
}

LossBreakdown batch_loss(const regnet::Model& model, nn::ParamStore& store, std::span<const RegPair* const> batch,
                         std::span<const Corruption> corruption, const TrainConfig& cfg, bool with_grad) {
  if (batch.empty()) throw Error(ErrorCode::EmptySet, "empty batch");
  if (batch.size() != corruption.size()) throw Error(ErrorCode::ShapeMismatch, "batch and corruption differ in size");
  std::vector<regnet::Sample> samples;
  samples.reserve(batch.size());
  for (size_t k = 0; k < batch.size(); ++k) {
    samples.push_back({&batch[k]->source, &batch[k]->target, corruption[k].g_t, corruption[k].t});
  }
  std::unique_ptr<regnet::BatchTape> tape;
  const nn::RowMatrix pred = model.forward_batch(store, samples, with_grad ? &tape : nullptr);
  const auto b = static_cast<double>(batch.size());
  nn::RowMatrix d_pred(pred.rows(), pred.cols());
  LossBreakdown mean;
  for (size_t k = 0; k < batch.size(); ++k) {
    StateVec g;
    const auto row = static_cast<Eigen::Index>(k);
    const LossBreakdown l =
        pair_loss(pred.row(row).transpose(), *batch[k], model.config().repr, cfg, with_grad ? &g : nullptr);
    mean.total += l.total / b;
    mean.diff += l.diff / b;
    mean.cf1 += l.cf1 / b;
    mean.cf2 += l.cf2 / b;
    if (with_grad) d_pred.row(row) = g.transpose() / b;
  }
  if (!std::isfinite(mean.total)) {
    std::ostringstream msg;
    msg << "loss is not finite (diff " << mean.diff << ", cf1 " << mean.cf1 << ", cf2 " << mean.cf2 << ")";
    throw Error(ErrorCode::NonFiniteLoss, msg.str());
  }
  if (with_grad) model.backward_batch(store, *tape, d_pred);
  return mean;
}

LossBreakdown train_step(const regnet::Model& model, nn::ParamStore& store, std::span<const RegPair* const> batch,
                         const NoiseSchedule& sched, const TrainConfig& cfg, double lr, Rng& rng) {
  const auto corruption = corrupt_batch(batch, sched, model.config().repr, model.config().diffusion, rng);
  store.zero_grad();
  const LossBreakdown l = batch_loss(model, store, batch, corruption, cfg, true);
  nn::adam_step(store, {lr, 0.9, 0.999, 1e-8});
  return l;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".json");
  return p;
}

void write_sidecar(const std::filesystem::path& checkpoint, const regnet::ModelConfig& model, const TrainConfig& train) {
  std::ofstream out(sidecar_path(checkpoint));
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + sidecar_path(checkpoint).string());
  out << nlohmann::json{{"model", model}, {"train", train}}.dump(2) << '\n';
}

regnet::ModelConfig read_sidecar(const std::filesystem::path& checkpoint) {
  const auto path = sidecar_path(checkpoint);
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open model config " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    return j.at("model").get<regnet::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

namespace {

struct LoopState {
  std::int64_t step = 0;
  int next_epoch = 0;
  double lr = 0.0;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_rounds = 0;
};

constexpr char kStateMagic[4] = {'P', 'C', 'R', 'S'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error(ErrorCode::ParseError, "truncated training state");
  return v;
}

// Full-precision resume state: loop counters, RNG, parameters and Adam moments.
void save_state(const std::filesystem::path& path, const LoopState& s, const Rng& rng, const nn::ParamStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(kStateMagic, 4);
  put(out, s.step);
  put(out, s.next_epoch);
  put(out, s.lr);
  put(out, s.best_val);
  put(out, s.bad_rounds);
  put(out, store.step());
  std::ostringstream rs;
  rs << rng;
  const std::string rng_text = rs.str();
  put(out, static_cast<std::uint64_t>(rng_text.size()));
  out.write(rng_text.data(), static_cast<std::streamsize>(rng_text.size()));
  put(out, static_cast<std::uint64_t>(store.params().size()));
  for (const auto& p : store.params()) {
    put(out, static_cast<std::uint64_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(out, static_cast<std::uint64_t>(p.value.size()));
    for (const auto* t : {&p.value, &p.m, &p.v}) {
      out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

LoopState load_state(const std::filesystem::path& path, Rng& rng, nn::ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kStateMagic, 4) != 0) {
    throw Error(ErrorCode::ParseError, path.string() + " is not a training state file");
  }
  LoopState s;
  s.step = take<std::int64_t>(in);
  s.next_epoch = take<int>(in);
  s.lr = take<double>(in);
  s.best_val = take<double>(in);
  s.bad_rounds = take<int>(in);
  store.set_step(take<std::int64_t>(in));
  std::string rng_text(take<std::uint64_t>(in), '\0');
  in.read(rng_text.data(), static_cast<std::streamsize>(rng_text.size()));
  std::istringstream rs(rng_text);
  rs >> rng;
  const auto count = take<std::uint64_t>(in);
  if (count != store.params().size()) throw Error(ErrorCode::ParseError, "training state does not match the model");
  for (auto& p : store.params()) {
    std::string name(take<std::uint64_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto size = take<std::uint64_t>(in);
    if (name != p.name || static_cast<Eigen::Index>(size) != p.value.size()) {
      throw Error(ErrorCode::ParseError, "training state parameter mismatch at " + name);
    }
    for (auto* t : {&p.value, &p.m, &p.v}) {
      if (!in.read(reinterpret_cast<char*>(t->data().data()), static_cast<std::streamsize>(size * sizeof(double)))) {
        throw Error(ErrorCode::ParseError, "truncated training state");
      }
    }
  }
  return s;
}

void save_model(const std::filesystem::path& path, const nn::ParamStore& store, const regnet::Model& model,
                const TrainConfig& cfg) {
  nn::save_checkpoint(path, store);
  write_sidecar(path, model.config(), cfg);
}

}  // namespace

TrainResult train_loop(regnet::Model& model, nn::ParamStore& store, std::span<const RegPair> pairs,
                       const TrainConfig& cfg, const TrainOutputs& outputs,
                       const std::optional<std::filesystem::path>& resume) {
  cfg.validate();
  if (pairs.empty()) throw Error(ErrorCode::EmptySet, "training set is empty");
  const NoiseSchedule sched = cosine_schedule(model.config().diffusion_steps);

  const auto n_val = static_cast<size_t>(std::floor(cfg.val_fraction * static_cast<double>(pairs.size())));
  const size_t n_train = pairs.size() - n_val;
  if (n_train == 0) throw Error(ErrorCode::EmptySet, "validation split leaves no training pairs");
  std::vector<const RegPair*> train_set, val_set;
  for (size_t i = 0; i < pairs.size(); ++i) (i < n_train ? train_set : val_set).push_back(&pairs[i]);

  const bool write = !outputs.dir.empty();
  if (write) {
    std::error_code ec;
    std::filesystem::create_directories(outputs.dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + outputs.dir.string() + ": " + ec.message());
  }

  Rng rng(cfg.seed);
  LoopState state;
  state.lr = cfg.lr;
  if (resume) state = load_state(*resume, rng, store);

  std::ofstream log;
  if (write) {
    const auto log_path = outputs.dir / "loss.csv";
    log.open(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw Error(ErrorCode::IoFailure, "cannot write " + log_path.string());
    if (!resume) log << "step,epoch,loss_total,loss_diff,loss_cf1,loss_cf2,lr\n";
    log << std::setprecision(17);
  }

  const auto validate_now = [&](double fallback) {
    double val = fallback;
    if (!val_set.empty()) {
      // Fixed corruption so successive rounds are comparable.
      Rng val_rng(derive_seed(cfg.seed, 0x76616cULL));
      val = 0.0;
      for (size_t start = 0; start < val_set.size(); start += static_cast<size_t>(cfg.batch_size)) {
        const size_t len = std::min(val_set.size() - start, static_cast<size_t>(cfg.batch_size));
        std::span<const RegPair* const> batch(val_set.data() + start, len);
        const auto corr = corrupt_batch(batch, sched, model.config().repr, model.config().diffusion, val_rng);
        val += batch_loss(model, store, batch, corr, cfg, false).total * static_cast<double>(len);
      }
      val /= static_cast<double>(val_set.size());
    }
    if (val < state.best_val) {
      state.best_val = val;
      state.bad_rounds = 0;
      if (write) save_model(outputs.dir / "best.pcrd", store, model, cfg);
    } else if (++state.bad_rounds >= cfg.patience) {
      state.lr = std::max(state.lr * cfg.lr_decay, cfg.min_lr);
      state.bad_rounds = 0;
    }
  };

  TrainResult result;
  std::vector<size_t> order(train_set.size());
  bool stop = cfg.max_steps > 0 && state.step >= cfg.max_steps;
  for (int epoch = state.next_epoch; epoch < cfg.epochs && !stop; ++epoch) {
    model.set_progress(cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    size_t epoch_batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const RegPair*> batch;
      for (size_t k = start; k < std::min(order.size(), start + static_cast<size_t>(cfg.batch_size)); ++k) {
        batch.push_back(train_set[order[k]]);
      }
      const LossBreakdown l = train_step(model, store, batch, sched, cfg, state.lr, rng);
      ++state.step;
      result.history.push_back(l);
      epoch_loss += l.total;
      ++epoch_batches;
      if (write) {
        log << state.step << ',' << epoch << ',' << l.total << ',' << l.diff << ',' << l.cf1 << ',' << l.cf2 << ','
            << state.lr << '\n';
      }
      if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) validate_now(l.total);
      if (cfg.max_steps > 0 && state.step >= cfg.max_steps) {
        stop = true;
        break;
      }
    }
    if (cfg.eval_every == 0) validate_now(epoch_loss / static_cast<double>(std::max<size_t>(epoch_batches, 1)));
    state.next_epoch = epoch + 1;
    ++result.epochs_run;
    if (write && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << epoch + 1 << ".pcrd";
      save_model(outputs.dir / name.str(), store, model, cfg);
    }
  }
  model.set_progress(1.0);
  if (write) {
    save_model(outputs.dir / "last.pcrd", store, model, cfg);
    if (!std::filesystem::exists(outputs.dir / "best.pcrd")) save_model(outputs.dir / "best.pcrd", store, model, cfg);
    save_state(outputs.dir / "train_state.bin", state, rng, store);
    if (!log) throw Error(ErrorCode::IoFailure, "failed writing loss log");
  }
  result.steps = state.step;
  result.best_val = state.best_val;
  result.final_lr = state.lr;
  return result;
}

}  // namespace pcrd::train
