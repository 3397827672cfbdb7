// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "pcrd/datasyn.hpp"
#include "pcrd/diffusion.hpp"
#include "pcrd/evalkit.hpp"
#include "pcrd/geom3d.hpp"
#include "pcrd/nnkit.hpp"
#include "pcrd/regnet.hpp"
#include "pcrd/trainer.hpp"

namespace fs = std::filesystem;
using namespace pcrd;

namespace {

constexpr double kRadPerDeg = std::numbers::pi / 180.0;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::printf("%s criterion %d: %s (%s)\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str());
  std::fflush(stdout);
}

template <typename... Args>
std::string fmt(const char* pattern, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// CSV text with the trailing time_s column removed from every row.
std::string without_time_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string out;
  for (std::string line; std::getline(in, line);) {
    out += line.front() == '#' ? line : line.substr(0, line.rfind(','));
    out += '\n';
  }
  return out;
}

class ScratchDir {
 public:
  ScratchDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("pcrd_accept_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// --- 1 ---------------------------------------------------------------------

Verdict geometry_oracle() {
  const auto start = Clock::now();
  Rng rng(101);
  double worst_r = 0.0, worst_t = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const RigidTransform g = random_transform(rng, 179.0, 1.0);
    Cloud p(64, 3);
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) << normal(rng), normal(rng), normal(rng);
    const RigidTransform est = kabsch(p, apply(g, p));
    worst_r = std::max(worst_r, rotation_angle(est.rotation_matrix(), g.rotation_matrix()));
    worst_t = std::max(worst_t, (est.translation - g.translation).norm());
  }
  const double secs = seconds_since(start);
  return {worst_r < 1e-6 && worst_t < 1e-9 && secs < 5.0,
          fmt("max rotation error %.3g rad, max translation error %.3g, %.2f s", worst_r, worst_t, secs)};
}

// --- 2 ---------------------------------------------------------------------

Verdict gradient_check() {
  const auto start = Clock::now();
  const regnet::ModelConfig cfg;
  auto model = regnet::make_model(cfg);
  nn::ParamStore store;
  Rng rng(7);
  model->init(store, rng);
  PairSpec spec;
  spec.id = "grad";
  spec.points = 16;
  spec.seed = 8;
  const std::vector<RegPair> pairs{synthesize_pair(spec)};
  const std::vector<const RegPair*> batch{&pairs[0]};
  const NoiseSchedule sched = cosine_schedule(cfg.diffusion_steps);
  const auto corruption = train::corrupt_batch(batch, sched, cfg.repr, cfg.diffusion, rng);
  const train::TrainConfig tcfg;
  const nn::LossClosure loss = [&](nn::ParamStore& s, bool with_grad) {
    if (with_grad) s.zero_grad();
    return train::batch_loss(*model, s, batch, corruption, tcfg, with_grad).total;
  };
  const nn::LossClosure corrupted = [&](nn::ParamStore& s, bool with_grad) {
    const double value = loss(s, with_grad);
    if (with_grad) {
      for (nn::Param& p : s.params()) {
        for (double& g : p.grad.data()) g *= 1.1;
      }
    }
    return value;
  };
  nn::GradCheckOptions opts;
  opts.max_checked = 4000;
  opts.seed = 9;
  const auto good = nn::grad_check(loss, store, opts);
  const auto bad = nn::grad_check(corrupted, store, opts);
  const double secs = seconds_since(start);
  return {good.max_relative_error < 1e-4 && bad.max_relative_error > 1e-2 && secs < 60.0,
          fmt("max relative error %.3g over %ld parameters, corrupted control %.3g, %.1f s",
              good.max_relative_error, static_cast<long>(good.checked), bad.max_relative_error, secs)};
}

// --- 3 ---------------------------------------------------------------------

Verdict forward_marginal() {
  const int big_t = 1000;
  const NoiseSchedule sched = cosine_schedule(big_t);
  StateVec g0(7);
  g0 << 0.8, 0.2, -0.4, 0.4, 0.3, -0.5, 0.9;
  g0.head<4>().normalize();
  const int samples = 10000;
  Rng rng(31);
  double worst_se = 0.0, worst_var = 0.0;
  for (int t : {1, big_t / 2, big_t}) {
    const double var = 1.0 - sched.alpha_bars[t];
    Eigen::MatrixXd draws(7, samples);
    for (int k = 0; k < samples; ++k) draws.col(k) = forward_sample(sched, g0, t, standard_normal(7, rng));
    const Eigen::VectorXd mean = draws.rowwise().mean();
    const Eigen::VectorXd emp_var = (draws.colwise() - mean).array().square().rowwise().sum() / (samples - 1);
    const double se = std::sqrt(var / samples);
    for (int d = 0; d < 7; ++d) {
      worst_se = std::max(worst_se, std::abs(mean[d] - std::sqrt(sched.alpha_bars[t]) * g0[d]) / se);
      worst_var = std::max(worst_var, std::abs(emp_var[d] / var - 1.0));
    }
  }
  return {worst_se <= 3.0 && worst_var <= 0.05,
          fmt("T=%d, worst mean deviation %.2f SE, worst variance deviation %.2f%%", big_t, worst_se,
              100.0 * worst_var)};
}

// --- 4 ---------------------------------------------------------------------

Verdict reverse_algebra() {
  const NoiseSchedule sched = cosine_schedule(1000);
  Rng rng(41);
  std::uniform_int_distribution<int> pick(1, 1000);
  double worst_forms = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const int t_now = pick(rng);
    const int t_next = std::uniform_int_distribution<int>(0, t_now - 1)(rng);
    const StateVec g_t = standard_normal(7, rng), g0 = standard_normal(7, rng), z = standard_normal(7, rng);
    const StateVec a = ddpm_step(sched, g_t, g0, t_now, t_next, z);
    const StateVec b = ddpm_step_eps_form(sched, g_t, g0, t_now, t_next, z);
    worst_forms = std::max(worst_forms, (a - b).cwiseAbs().maxCoeff());
  }
  StateVec g0(7);
  g0 << 0.5, 0.5, 0.5, 0.5, 0.1, 0.2, -0.3;
  const Denoiser oracle = [&](const StateVec&, int) { return g0; };
  double worst_oracle = 0.0;
  for (int steps : {1, 4, 1000}) {
    Rng sampler_rng(42);
    worst_oracle = std::max(worst_oracle, (sample_loop(oracle, sched, steps, 7, sampler_rng) - g0).cwiseAbs().maxCoeff());
  }
  return {worst_forms < 1e-9 && worst_oracle < 1e-9,
          fmt("posterior vs eps form %.3g, oracle sampler error %.3g", worst_forms, worst_oracle)};
}

// --- 5 ---------------------------------------------------------------------

Verdict schedule_sanity() {
  const NoiseSchedule s = cosine_schedule(1000);
  bool ok = s.alpha_bars[0] == 1.0 && s.posterior_vars[1] == 0.0;
  for (int t = 1; t <= 1000; ++t) {
    ok = ok && s.alpha_bars[t] < s.alpha_bars[t - 1] && s.betas[t] > 0.0 && s.betas[t] <= 0.999;
  }
  return {ok, fmt("alpha_bar[T]=%.3g, beta[T]=%.4f", s.alpha_bars[1000], s.betas[1000])};
}

// --- 6 to 9: desk-scale training --------------------------------------------

struct DeskBench {
  std::vector<RegPair> train_set;
  std::vector<RegPair> test_set;
};

DeskBench make_desk_bench() {
  GenerateOptions g;
  g.pairs = 600;
  g.points = 128;
  g.rot_max_deg = 45.0;
  g.trans_max = 1.0;
  g.seed = 1;
  g.test_fraction = 100.0 / 600.0;
  g.kinds = std::vector<ShapeKind>{ShapeKind::Composite};
  DeskBench bench;
  for (const PairSpec& s : plan_dataset(g)) (s.split == "train" ? bench.train_set : bench.test_set).push_back(synthesize_pair(s));
  return bench;
}

regnet::ModelConfig desk_model(bool diffusion, regnet::Representation repr) {
  regnet::ModelConfig mc;
  mc.cf.encoder_widths = {64, 64, 64, 128, 256};
  mc.cf.transform_widths = {128, 256};
  mc.cf.decoder_hidden = {256, 128, 64};
  mc.diffusion = diffusion;
  mc.repr = repr;
  return mc;
}

train::TrainConfig desk_training() {
  train::TrainConfig tc;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.max_steps = 1500;
  tc.epochs = 1000;
  tc.val_fraction = 0.1;
  tc.seed = 5;
  return tc;
}

struct DeskRun {
  double train_seconds = 0.0;
  std::int64_t steps = 0;
  eval::MetricsRecord untrained;
  eval::MetricsRecord one_step;
  eval::MetricsRecord eight_steps;
};

DeskRun run_desk(const DeskBench& bench, bool diffusion, regnet::Representation repr) {
  const regnet::ModelConfig mc = desk_model(diffusion, repr);
  auto model = regnet::make_model(mc);
  nn::ParamStore store;
  Rng init(9);
  model->init(store, init);
  const NoiseSchedule sched = cosine_schedule(mc.diffusion_steps);
  DeskRun run;
  run.untrained = eval::aggregate(eval::evaluate(*model, store, sched, bench.test_set, {1, 3, 1}));
  const auto start = Clock::now();
  run.steps = train::train_loop(*model, store, bench.train_set, desk_training()).steps;
  run.train_seconds = seconds_since(start);
  run.one_step = eval::aggregate(eval::evaluate(*model, store, sched, bench.test_set, {1, 3, 1}));
  run.eight_steps = eval::aggregate(eval::evaluate(*model, store, sched, bench.test_set, {8, 3, 1}));
  return run;
}

// --- 10 --------------------------------------------------------------------

Verdict icp_baseline() {
  GenerateOptions g;
  g.pairs = 50;
  g.points = 128;
  g.rot_max_deg = 10.0;
  g.trans_max = 0.1;
  g.seed = 11;
  g.test_fraction = 0.0;
  double worst_angle = 0.0;
  int objective_rises = 0, chamfer_rises = 0;
  for (const PairSpec& s : plan_dataset(g)) {
    const RegPair p = synthesize_pair(s);
    const eval::IcpResult r = eval::icp(p.source, p.target, {50, 1e-10});
    worst_angle = std::max(worst_angle, rotation_angle(r.transform.rotation_matrix(), p.g_gt.rotation_matrix()));
    for (size_t k = 1; k < r.objective.size(); ++k) {
      if (r.objective[k] > r.objective[k - 1]) ++objective_rises;
      if (r.chamfer[k] > r.chamfer[k - 1]) ++chamfer_rises;
    }
  }
  return {worst_angle < 1e-3 && objective_rises == 0 && chamfer_rises == 0,
          fmt("50 pairs, worst geodesic error %.3g rad, Chamfer increases: one-sided %d, symmetric %d", worst_angle,
              objective_rises, chamfer_rises)};
}

// --- 11 --------------------------------------------------------------------

Verdict determinism_and_formats() {
  ScratchDir scratch;
  const auto pairs = [] {
    GenerateOptions g;
    g.pairs = 12;
    g.points = 32;
    g.seed = 21;
    g.test_fraction = 0.25;
    std::vector<RegPair> out;
    for (const PairSpec& s : plan_dataset(g)) out.push_back(synthesize_pair(s));
    return out;
  }();
  regnet::ModelConfig mc;
  mc.cf.encoder_widths = {16, 32};
  mc.cf.transform_widths = {16, 32};
  mc.cf.time_embedding_dim = 16;
  mc.cf.decoder_hidden = {32, 16};
  train::TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 22;

  std::vector<std::string> results;
  for (const char* run_name : {"a", "b"}) {
    const fs::path dir = scratch.path() / run_name;
    auto model = regnet::make_model(mc);
    nn::ParamStore store;
    Rng init(23);
    model->init(store, init);
    train::train_loop(*model, store, pairs, tc, {dir});
    const NoiseSchedule sched = cosine_schedule(mc.diffusion_steps);
    eval::write_results_csv(dir / "results.csv", eval::evaluate(*model, store, sched, pairs, {4, 24, 1}));
  }
  int mismatched = 0, compared = 0;
  for (const auto& entry : fs::directory_iterator(scratch.path() / "a")) {
    const fs::path other = scratch.path() / "b" / entry.path().filename();
    ++compared;
    const bool is_results = entry.path().filename() == "results.csv";
    const std::string lhs = slurp(entry.path()), rhs = slurp(other);
    if (is_results ? without_time_column(lhs) != without_time_column(rhs) : lhs != rhs) ++mismatched;
  }

  // Checkpoint round trip: load into a fresh store, save again, compare bytes.
  auto model = regnet::make_model(mc);
  nn::ParamStore reloaded;
  Rng init(99);
  model->init(reloaded, init);
  nn::load_checkpoint(scratch.path() / "a" / "last.pcrd", reloaded);
  nn::save_checkpoint(scratch.path() / "again.pcrd", reloaded);
  const bool checkpoint_ok = slurp(scratch.path() / "a" / "last.pcrd") == slurp(scratch.path() / "again.pcrd");

  Rng rng(25);
  Cloud cloud = sample_shape(ShapeKind::GaussianBlob, 500, rng);
  cloud(0, 0) = 5e-324;
  cloud(1, 2) = -1.2345678901234567e300;
  save_xyz(cloud, scratch.path() / "cloud.xyz");
  const bool xyz_ok = load_xyz(scratch.path() / "cloud.xyz") == cloud;

  return {compared > 0 && mismatched == 0 && checkpoint_ok && xyz_ok,
          fmt("%d of %d run artifacts identical (time_s excluded), checkpoint round trip %s, xyz round trip %s",
              compared - mismatched, compared, checkpoint_ok ? "bit-identical" : "differs",
              xyz_ok ? "lossless" : "lossy")};
}

// --- 12 --------------------------------------------------------------------

Verdict loss_zeros() {
  PairSpec spec;
  spec.points = 128;
  spec.seed = 51;
  const RegPair pair = synthesize_pair(spec);
  const RigidTransform nudge =
      RigidTransform::from_matrix(Eigen::AngleAxisd(kRadPerDeg, Vec3(1, 2, 3).normalized()).toRotationMatrix(),
                                  Vec3(0.01, 0.0, 0.0));
  const RigidTransform off = compose(nudge, pair.g_gt);
  const StateVec exact = regnet::transform_to_state(pair.g_gt, regnet::Representation::Quat7);
  const StateVec perturbed = regnet::transform_to_state(off, regnet::Representation::Quat7);

  const double diff0 = train::loss_diff(exact, exact);
  const double diff1 = train::loss_diff(perturbed, exact);
  const double cf1_0 = train::loss_chamfer(apply(pair.g_gt, pair.source), pair.target);
  const double cf1_1 = train::loss_chamfer(apply(off, pair.source), pair.target);
  const double cf2_0 = train::loss_transform(pair.g_gt, pair.g_gt);
  const double cf2_1 = train::loss_transform(off, pair.g_gt);
  const bool zeros = diff0 == 0.0 && cf1_0 < 1e-24 && cf2_0 < 1e-12;
  return {zeros && diff1 > 0.0 && cf1_1 > 0.0 && cf2_1 > 0.0,
          fmt("exact: %.2g %.2g %.2g; perturbed: %.3g %.3g %.3g", diff0, cf1_0, cf2_0, diff1, cf1_1, cf2_1)};
}

}  // namespace

int main() {
  report(1, "kabsch recovers 1000 random transforms", geometry_oracle);
  report(2, "gradient check on the default correspondence-free model", gradient_check);
  report(3, "forward-process marginal", forward_marginal);
  report(4, "reverse-step algebra and oracle sampler", reverse_algebra);
  report(5, "noise schedule sanity", schedule_sanity);

  const DeskBench bench = make_desk_bench();
  std::printf("desk benchmark: %zu training pairs, %zu held-out pairs; training three models\n",
              bench.train_set.size(), bench.test_set.size());
  std::fflush(stdout);
  const DeskRun quat = run_desk(bench, true, regnet::Representation::Quat7);
  const DeskRun plain = run_desk(bench, false, regnet::Representation::Quat7);
  const DeskRun euler = run_desk(bench, true, regnet::Representation::Euler6);

  report(6, "desk-scale end-to-end training", [&] {
    const bool ok = quat.one_step.mie_r < 10.0 && quat.one_step.mie_t < 0.10 &&
                    quat.untrained.mie_r >= 5.0 * quat.one_step.mie_r && quat.steps <= 3000 &&
                    quat.train_seconds <= 600.0;
    return Verdict{ok, fmt("MIE(R) %.3f deg, MIE(t) %.4f, untrained MIE(R) %.2f deg, %lld steps in %.0f s",
                           quat.one_step.mie_r, quat.one_step.mie_t, quat.untrained.mie_r,
                           static_cast<long long>(quat.steps), quat.train_seconds)};
  });
  report(7, "step-count stability", [&] {
    const double gap = std::abs(quat.one_step.mae_r - quat.eight_steps.mae_r) / quat.one_step.mae_r;
    return Verdict{gap <= 0.20, fmt("MAE(R) %.4f deg at 1 step, %.4f deg at 8 steps, gap %.1f%%",
                                    quat.one_step.mae_r, quat.eight_steps.mae_r, 100.0 * gap)};
  });
  report(8, "removing diffusion hurts", [&] {
    return Verdict{plain.one_step.mie_r > quat.one_step.mie_r,
                   fmt("MIE(R) without diffusion %.3f deg vs with diffusion %.3f deg", plain.one_step.mie_r,
                       quat.one_step.mie_r)};
  });
  report(9, "euler6 no better than quat7", [&] {
    return Verdict{euler.one_step.mie_r >= quat.one_step.mie_r,
                   fmt("MIE(R) euler6 %.3f deg vs quat7 %.3f deg", euler.one_step.mie_r, quat.one_step.mie_r)};
  });
  report(10, "ICP baseline", icp_baseline);
  report(11, "determinism and file formats", determinism_and_formats);
  report(12, "loss zeros", loss_zeros);

  std::printf("%d of 12 criteria passed\n", 12 - failures);
  return failures == 0 ? 0 : 1;
}
