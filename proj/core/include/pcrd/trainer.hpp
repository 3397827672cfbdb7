#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <vector>

#include "pcrd/datasyn.hpp"
#include "pcrd/diffusion.hpp"
#include "pcrd/nnkit.hpp"
#include "pcrd/regnet.hpp"

namespace pcrd::train {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;  // 8 is the usual choice for the correspondence-based variant
  double lr = 1e-4;
  double lr_decay = 0.5;
  int patience = 10;  // validation rounds without improvement before decaying
  double min_lr = 1e-6;
  double w_diff = 1.0;
  double w_cf1 = 1.0;
  double w_cf2 = 1.0;
  std::uint64_t seed = 0;
  // Stop after this many optimizer steps (0: run every epoch).
  std::int64_t max_steps = 0;
  // Validation every this many optimizer steps (0: once per epoch).
  std::int64_t eval_every = 0;
  // Fraction of the training pairs held out for validation.
  double val_fraction = 0.1;
  // Periodic checkpoint every this many epochs (0: only last/best).
  int checkpoint_every = 10;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// 1/2 ||pred - target||^2
double loss_diff(const StateVec& pred, const StateVec& target, StateVec* grad = nullptr);

// Symmetric mean squared nearest-neighbour distance. With `grad`, fills
// d(loss)/d(moved) row by row.
double loss_chamfer(const Cloud& moved, const Cloud& target, Cloud* grad = nullptr);
double loss_chamfer_brute_force(const Cloud& moved, const Cloud& target);

// ||inverse(pred) * gt - I_4||_F
double loss_transform(const RigidTransform& pred, const RigidTransform& gt);
double loss_transform(const Mat3& r_pred, const Vec3& t_pred, const Mat3& r_gt, const Vec3& t_gt,
                      Mat3* d_r = nullptr, Vec3* d_t = nullptr);

struct LossBreakdown {
  double total = 0.0;
  double diff = 0.0;
  double cf1 = 0.0;
  double cf2 = 0.0;
};

// Loss of one prediction against a pair. With `grad`, fills d(total)/d(pred).
LossBreakdown pair_loss(const StateVec& pred, const RegPair& pair, regnet::Representation repr,
                        const TrainConfig& cfg, StateVec* grad = nullptr);

// Corrupted inputs for one batch, drawn from `rng` in a fixed order:
// for each pair t ~ U{1..T} then eps ~ N(0, I).
struct Corruption {
  int t = 0;
  StateVec eps;
  StateVec g_t;
};
std::vector<Corruption> corrupt_batch(std::span<const RegPair* const> batch, const NoiseSchedule& sched,
                                      regnet::Representation repr, bool diffusion, Rng& rng);

// Forward + backward over the batch with given corruption; gradients are
// averaged over the batch and accumulated into the store (not zeroed here).
LossBreakdown batch_loss(const regnet::Model& model, nn::ParamStore& store, std::span<const RegPair* const> batch,
                         std::span<const Corruption> corruption, const TrainConfig& cfg, bool with_grad);

// One optimizer step: corrupt, single network pass, combined loss, backprop, Adam.
LossBreakdown train_step(const regnet::Model& model, nn::ParamStore& store, std::span<const RegPair* const> batch,
                         const NoiseSchedule& sched, const TrainConfig& cfg, double lr, Rng& rng);

struct TrainResult {
  std::int64_t steps = 0;
  int epochs_run = 0;
  double best_val = 0.0;
  double final_lr = 0.0;
  std::vector<LossBreakdown> history;  // one per optimizer step
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: nothing written
};

// Trains `store` in place. With outputs.dir set, writes loss.csv, last/best
// checkpoints (+ .json sidecars), periodic checkpoints and a resumable
// train_state.bin. `resume` continues from such a state file.
TrainResult train_loop(regnet::Model& model, nn::ParamStore& store, std::span<const RegPair> pairs,
                       const TrainConfig& cfg, const TrainOutputs& outputs = {},
                       const std::optional<std::filesystem::path>& resume = std::nullopt);

// Sidecar written next to every checkpoint: model + training config.
void write_sidecar(const std::filesystem::path& checkpoint, const regnet::ModelConfig& model, const TrainConfig& train);
regnet::ModelConfig read_sidecar(const std::filesystem::path& checkpoint);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace pcrd::train
