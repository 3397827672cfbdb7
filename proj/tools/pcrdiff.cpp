// pcrdiff: dataset generation, training, registration, evaluation and
// diagnostics for diffusion-based point cloud registration.
//
// Exit codes: 0 success, 1 validation or numeric failure, 2 I/O or parse failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pcrd/datasyn.hpp"
#include "pcrd/diffusion.hpp"
#include "pcrd/error.hpp"
#include "pcrd/evalkit.hpp"
#include "pcrd/nnkit.hpp"
#include "pcrd/regnet.hpp"
#include "pcrd/trainer.hpp"

namespace fs = std::filesystem;
using namespace pcrd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitIo = 2;

// Seed from the flag, else PCRDIFF_SEED, else 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("PCRDIFF_SEED")) {
    try {
      size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::ConfigError, std::string("PCRDIFF_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.json" : data;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw Error(ErrorCode::IoFailure, what + " not found: " + p.string());
}

// Structured run configuration for `train`. Flags given on the command line
// override the file.
struct RunConfig {
  regnet::ModelConfig model;
  train::TrainConfig train;
  std::optional<fs::path> data;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
};

RunConfig load_run_config(const fs::path& path) {
  require_file(path, "config");
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "config: expected an object");
  static const std::set<std::string> known{"model", "train", "schedule", "data", "out", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error(ErrorCode::ConfigError, key + ": unknown key");
  }
  RunConfig rc;
  try {
    if (j.contains("model")) rc.model = j.at("model").get<regnet::ModelConfig>();
    if (j.contains("train")) rc.train = j.at("train").get<train::TrainConfig>();
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      if (!s.is_object()) throw Error(ErrorCode::ConfigError, "schedule: expected an object");
      for (const auto& [key, _] : s.items()) {
        if (key != "steps") throw Error(ErrorCode::ConfigError, "schedule." + key + ": unknown key");
      }
      if (s.contains("steps")) rc.model.diffusion_steps = s.at("steps").get<int>();
    }
    if (j.contains("data")) rc.data = j.at("data").get<std::string>();
    if (j.contains("out")) rc.out = j.at("out").get<std::string>();
    if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("config: ") + e.what());
  }
  rc.model.validate();
  return rc;
}

struct LoadedModel {
  std::unique_ptr<regnet::Model> model;
  nn::ParamStore store;
};

LoadedModel load_model(const fs::path& checkpoint) {
  require_file(checkpoint, "checkpoint");
  LoadedModel lm;
  lm.model = regnet::make_model(train::read_sidecar(checkpoint));
  Rng init_rng(0);
  lm.model->init(lm.store, init_rng);
  nn::load_checkpoint(checkpoint, lm.store);
  return lm;
}

// --- generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string regime = "clean";
  int pairs = 100;
  int points = 128;
  double rot_max = 45.0;
  double trans_max = 1.0;
  double test_fraction = 0.2;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
};

int run_generate(const GenerateArgs& a) {
  GenerateOptions opts;
  opts.regime = parse_regime(a.regime);
  opts.pairs = a.pairs;
  opts.points = a.points;
  opts.rot_max_deg = a.rot_max;
  opts.trans_max = a.trans_max;
  opts.test_fraction = a.test_fraction;
  opts.seed = resolve_seed(a.seed);
  const auto specs = plan_dataset(opts);
  write_dataset(a.out, specs, a.jobs);
  std::cout << "wrote " << specs.size() << " pairs (" << a.regime << ") to " << a.out << '\n';
  return kExitOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config;
  std::optional<std::string> data;
  std::optional<std::string> variant;
  std::optional<std::string> repr;
  std::optional<std::string> fusion;
  bool no_diffusion = false;
  std::optional<std::string> out;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::int64_t> max_steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> resume;
};

int run_train(const TrainArgs& a) {
  RunConfig rc = a.config ? load_run_config(*a.config) : RunConfig{};
  if (a.variant) rc.model.variant = regnet::parse_variant(*a.variant);
  if (a.repr) rc.model.repr = regnet::parse_representation(*a.repr);
  if (a.fusion) rc.model.fusion = regnet::parse_fusion(*a.fusion);
  if (a.no_diffusion) rc.model.diffusion = false;
  if (a.data) rc.data = *a.data;
  if (a.out) rc.out = *a.out;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.max_steps) rc.train.max_steps = *a.max_steps;
  rc.train.seed = a.seed ? *a.seed : rc.seed ? *rc.seed : resolve_seed(std::nullopt);
  rc.model.validate();
  rc.train.validate();

  // Validate every path before any work.
  if (!rc.data) throw Error(ErrorCode::ConfigError, "data: no dataset given (--data or config \"data\")");
  if (!rc.out) throw Error(ErrorCode::ConfigError, "out: no output directory given (--out or config \"out\")");
  const fs::path manifest = manifest_path(*rc.data);
  require_file(manifest, "dataset manifest");
  if (a.resume) require_file(*a.resume, "training state");
  std::error_code ec;
  fs::create_directories(*rc.out, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + rc.out->string() + ": " + ec.message());

  const auto pairs = load_dataset(manifest, "train");
  if (pairs.empty()) throw Error(ErrorCode::EmptySet, "dataset has no training pairs");

  auto model = regnet::make_model(rc.model);
  nn::ParamStore store;
  Rng init_rng(derive_seed(rc.train.seed, 0x696e6974ULL));
  model->init(store, init_rng);
  std::cout << "variant " << to_string(rc.model.variant) << ", repr " << to_string(rc.model.repr) << ", fusion "
            << to_string(rc.model.fusion) << ", diffusion " << (rc.model.diffusion ? "on" : "off") << ", "
            << store.total_size() << " parameters, " << pairs.size() << " training pairs\n";

  std::optional<fs::path> resume;
  if (a.resume) resume = *a.resume;
  const auto result = train::train_loop(*model, store, pairs, rc.train, {*rc.out}, resume);
  std::cout << "trained " << result.steps << " steps over " << result.epochs_run << " epochs; best validation loss "
            << result.best_val << ", final lr " << result.final_lr << '\n'
            << "checkpoints in " << rc.out->string() << '\n';
  return kExitOk;
}

// --- register ---------------------------------------------------------------

struct RegisterArgs {
  std::string model;
  std::string src;
  std::string tpl;
  int steps = 1;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

int run_register(const RegisterArgs& a) {
  require_file(a.src, "source cloud");
  require_file(a.tpl, "template cloud");
  auto lm = load_model(a.model);
  const Cloud source = load_xyz(a.src);
  const Cloud target = load_xyz(a.tpl);
  const NoiseSchedule sched = cosine_schedule(lm.model->config().diffusion_steps);
  Rng rng(resolve_seed(a.seed));
  const RigidTransform g = eval::register_clouds(*lm.model, lm.store, sched, source, target, a.steps, rng);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + a.out + ": " + ec.message());
  const RigidTransform gs[1] = {g};
  save_transforms(fs::path(a.out) / "transform.txt", gs);
  save_xyz(apply(g, source), fs::path(a.out) / "aligned.xyz");
  std::cout.precision(17);
  std::cout << g.rotation.w << ' ' << g.rotation.x << ' ' << g.rotation.y << ' ' << g.rotation.z << ' '
            << g.translation.x() << ' ' << g.translation.y() << ' ' << g.translation.z() << '\n';
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> model;
  std::string data;
  std::vector<int> steps{1};
  std::string out = "results.csv";
  std::string split = "test";
  std::string estimator = "model";
  int icp_iters = 10;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

int run_eval(const EvalArgs& a) {
  const fs::path manifest = manifest_path(a.data);
  require_file(manifest, "dataset manifest");
  if (a.estimator == "model" && !a.model) throw Error(ErrorCode::ConfigError, "model: --model is required");
  if (a.estimator != "model" && a.estimator != "icp" && a.estimator != "oracle") {
    throw Error(ErrorCode::ConfigError, "estimator: expected model, icp or oracle");
  }
  for (int s : a.steps) {
    if (s < 1) throw Error(ErrorCode::BadStepCount, "steps must be >= 1");
  }
  std::optional<LoadedModel> lm;
  if (a.estimator == "model") lm = load_model(*a.model);
  const auto pairs = load_dataset(manifest, a.split);
  if (pairs.empty()) throw Error(ErrorCode::EmptySet, "no pairs in split " + a.split);
  const std::uint64_t seed = resolve_seed(a.seed);

  for (int steps : a.steps) {
    std::vector<eval::MetricsRecord> records;
    const eval::EvalOptions opts{steps, seed, a.jobs};
    if (a.estimator == "model") {
      if (steps > lm->model->config().diffusion_steps) throw Error(ErrorCode::BadStepCount, "steps exceed T");
      const NoiseSchedule sched = cosine_schedule(lm->model->config().diffusion_steps);
      records = eval::evaluate(*lm->model, lm->store, sched, pairs, opts);
    } else if (a.estimator == "oracle") {
      const NoiseSchedule sched = cosine_schedule(1000);
      const auto repr = regnet::Representation::Quat7;
      const eval::DenoiserFactory oracle = [repr](const RegPair& p) -> Denoiser {
        const StateVec g0 = regnet::transform_to_state(p.g_gt, repr);
        return [g0](const StateVec&, int) { return g0; };
      };
      records = eval::evaluate(oracle, repr, sched, pairs, opts);
    } else {
      const eval::IcpOptions icp_opts{a.icp_iters, 1e-6};
      records = eval::evaluate_estimator(
          [&](const RegPair& p) { return eval::icp(p.source, p.target, icp_opts).transform; }, pairs, steps, a.jobs);
    }
    fs::path out = a.out;
    if (a.steps.size() > 1) {
      out = out.parent_path() / (out.stem().string() + "_steps" + std::to_string(steps) + out.extension().string());
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    eval::write_results_csv(out, records);
    const auto agg = eval::aggregate(records);
    std::cout << "steps " << steps << ": MIE(R) " << agg.mie_r << " deg, MIE(t) " << agg.mie_t << ", MAE(R) "
              << agg.mae_r << " deg, RMSE(R) " << agg.rmse_r << " deg -> " << out.string() << '\n';
  }
  return kExitOk;
}

// --- schedule-dump ----------------------------------------------------------

int run_schedule_dump(int steps, const std::optional<std::string>& out) {
  const NoiseSchedule sched = cosine_schedule(steps);
  if (out) {
    std::ofstream f(*out);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot write " + *out);
    write_schedule_csv(f, sched);
    if (!f) throw Error(ErrorCode::IoFailure, "write failed for " + *out);
  } else {
    write_schedule_csv(std::cout, sched);
  }
  return kExitOk;
}

// --- grad-check -------------------------------------------------------------

struct GradCheckArgs {
  std::optional<std::string> config;
  std::string variant = "cf";
  int points = 16;
  std::optional<double> threshold;
  long max_checked = 4000;
  std::optional<std::uint64_t> seed;
};

int run_grad_check(const GradCheckArgs& a) {
  regnet::ModelConfig cfg = a.config ? load_run_config(*a.config).model : regnet::ModelConfig{};
  if (!a.config) cfg.variant = regnet::parse_variant(a.variant);
  const bool cb = cfg.variant == regnet::Variant::CorrespondenceBased;
  const std::uint64_t seed = resolve_seed(a.seed);

  auto model = regnet::make_model(cfg);
  nn::ParamStore store;
  Rng rng(seed);
  model->init(store, rng);
  PairSpec spec;
  spec.id = "grad_check";
  spec.points = a.points;
  spec.seed = derive_seed(seed, 1);
  if (cb) {
    // Jittered so the untrained matcher does not already fit exactly.
    spec.regime = Regime::Noise;
    spec.noise_sigma = 0.05;
    spec.noise_clip = 0.25;
  }
  const std::vector<RegPair> pairs{synthesize_pair(spec)};
  const std::vector<const RegPair*> batch{&pairs[0]};
  const NoiseSchedule sched = cosine_schedule(cfg.diffusion_steps);
  const auto corruption = train::corrupt_batch(batch, sched, cfg.repr, cfg.diffusion, rng);
  const train::TrainConfig tcfg;
  const nn::LossClosure loss = [&](nn::ParamStore& s, bool with_grad) {
    if (with_grad) s.zero_grad();
    return train::batch_loss(*model, s, batch, corruption, tcfg, with_grad).total;
  };
  nn::GradCheckOptions opts;
  opts.max_checked = a.max_checked;
  opts.seed = seed;
  if (cb) {
    opts.step = 1e-4;
    opts.floor = 1e-4;
  }
  const double threshold = a.threshold.value_or(cb ? 1e-3 : 1e-4);
  const auto report = nn::grad_check(loss, store, opts);
  std::cout << "checked " << report.checked << " of " << store.total_size() << " parameters; max relative error "
            << report.max_relative_error << " at " << report.worst_param << '[' << report.worst_index
            << "] (analytic " << report.worst_analytic << ", numeric " << report.worst_numeric << "); threshold "
            << threshold << '\n';
  if (!(report.max_relative_error <= threshold)) {
    std::cerr << "grad-check FAILED\n";
    return kExitFailure;
  }
  std::cout << "grad-check passed\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based point cloud registration"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Synthesize a registration benchmark");
  generate->add_option("--regime", gen.regime, "clean | unseen-cat | noise | partial")
      ->check(CLI::IsMember({"clean", "unseen-cat", "noise", "partial"}));
  generate->add_option("--pairs", gen.pairs, "Number of pairs");
  generate->add_option("--points", gen.points, "Points per cloud");
  generate->add_option("--rot-max", gen.rot_max, "Maximum rotation per Euler angle (degrees)");
  generate->add_option("--trans-max", gen.trans_max, "Maximum translation per axis");
  generate->add_option("--test-fraction", gen.test_fraction, "Fraction of pairs in the test split");
  generate->add_option("--seed", gen.seed, "Seed (default: PCRDIFF_SEED or 0)");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--jobs", gen.jobs, "Worker threads")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a denoiser");
  train_cmd->add_option("--config", tr.config, "JSON run config");
  train_cmd->add_option("--data", tr.data, "Dataset manifest or directory");
  train_cmd->add_option("--variant", tr.variant, "cf | cb")->check(CLI::IsMember({"cf", "cb"}));
  train_cmd->add_option("--repr", tr.repr, "quat7 | euler6")->check(CLI::IsMember({"quat7", "euler6"}));
  train_cmd->add_option("--fusion", tr.fusion, "ft+p_cat_q | ft+q_cat_p | cat_all")
      ->check(CLI::IsMember({"ft+p_cat_q", "ft+q_cat_p", "cat_all"}));
  train_cmd->add_flag("--no-diffusion", tr.no_diffusion, "Bypass the transform encoder (F_t = 0)");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  train_cmd->add_option("--lr", tr.lr, "Initial learning rate");
  train_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  train_cmd->add_option("--seed", tr.seed, "Seed (default: config, PCRDIFF_SEED or 0)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a train_state.bin");

  RegisterArgs reg;
  auto* register_cmd = app.add_subcommand("register", "Register one source cloud onto a template");
  register_cmd->add_option("--model", reg.model, "Checkpoint (.pcrd with .json sidecar)")->required();
  register_cmd->add_option("--src", reg.src, "Source cloud (.xyz)")->required();
  register_cmd->add_option("--tpl", reg.tpl, "Template cloud (.xyz)")->required();
  register_cmd->add_option("--steps", reg.steps, "Sampling steps")->check(CLI::PositiveNumber);
  register_cmd->add_option("--seed", reg.seed, "Seed (default: PCRDIFF_SEED or 0)");
  register_cmd->add_option("--out", reg.out, "Directory for transform.txt and aligned.xyz");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate on a dataset split and write a results table");
  eval_cmd->add_option("--model", ev.model, "Checkpoint (.pcrd with .json sidecar)");
  eval_cmd->add_option("--data", ev.data, "Dataset manifest or directory")->required();
  eval_cmd->add_option("--steps", ev.steps, "Sampling steps; several values produce one table each");
  eval_cmd->add_option("--out", ev.out, "Results CSV");
  eval_cmd->add_option("--split", ev.split, "Dataset split")->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--estimator", ev.estimator, "model | icp | oracle");
  eval_cmd->add_option("--icp-iters", ev.icp_iters, "ICP iterations")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev.seed, "Seed (default: PCRDIFF_SEED or 0)");
  eval_cmd->add_option("--jobs", ev.jobs, "Worker threads")->check(CLI::PositiveNumber);

  int sched_steps = 1000;
  std::optional<std::string> sched_out;
  auto* sched_cmd = app.add_subcommand("schedule-dump", "Write the cosine noise schedule as CSV");
  sched_cmd->add_option("--steps", sched_steps, "Diffusion steps T");
  sched_cmd->add_option("--out", sched_out, "Output CSV (default: stdout)");

  GradCheckArgs gc;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of the training gradients");
  grad_cmd->add_option("--config", gc.config, "JSON run config supplying the model section");
  grad_cmd->add_option("--variant", gc.variant, "cf | cb")->check(CLI::IsMember({"cf", "cb"}));
  grad_cmd->add_option("--points", gc.points, "Points per cloud");
  grad_cmd->add_option("--threshold", gc.threshold, "Maximum relative error (default 1e-4 cf, 1e-3 cb)");
  grad_cmd->add_option("--max-checked", gc.max_checked, "Parameters checked (random subsample above this)");
  grad_cmd->add_option("--seed", gc.seed, "Seed (default: PCRDIFF_SEED or 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitFailure;
  }

  try {
    if (*generate) return run_generate(gen);
    if (*train_cmd) return run_train(tr);
    if (*register_cmd) return run_register(reg);
    if (*eval_cmd) return run_eval(ev);
    if (*sched_cmd) return run_schedule_dump(sched_steps, sched_out);
    if (*grad_cmd) return run_grad_check(gc);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_io_error(e.code()) ? kExitIo : kExitFailure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
