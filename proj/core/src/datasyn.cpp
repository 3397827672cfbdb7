#include "pcrd/datasyn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "pcrd/error.hpp"

namespace pcrd {

namespace {

Vec3 unit_vector(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(normal(rng), normal(rng), normal(rng));
  } while (v.norm() < 1e-12);
  return v.normalized();
}

void normalize_unit_sphere(Cloud& points) {
  const Eigen::RowVector3d centroid = points.colwise().mean();
  points.rowwise() -= centroid;
  const double r = points.rowwise().norm().maxCoeff();
  if (r > 0.0) points /= r;
}

Cloud sphere_points(int n, Rng& rng) {
  Cloud c(n, 3);
  for (int i = 0; i < n; ++i) c.row(i) = unit_vector(rng).transpose();
  return c;
}

}  // namespace

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::CubeSurface: return "cube_surface";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::GaussianBlob: return "gaussian_blob";
    case ShapeKind::Composite: return "composite";
  }
  return "?";
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::Clean: return "clean";
    case Regime::UnseenCategory: return "unseen-cat";
    case Regime::Noise: return "noise";
    case Regime::Partial: return "partial";
  }
  return "?";
}

ShapeKind parse_shape_kind(const std::string& s) {
  for (auto k : {ShapeKind::Sphere, ShapeKind::CubeSurface, ShapeKind::Torus, ShapeKind::GaussianBlob,
                 ShapeKind::Composite}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::ConfigError, "unknown shape kind '" + s + "'");
}

Regime parse_regime(const std::string& s) {
  for (auto r : {Regime::Clean, Regime::UnseenCategory, Regime::Noise, Regime::Partial}) {
    if (to_string(r) == s) return r;
  }
  throw Error(ErrorCode::ConfigError, "unknown regime '" + s + "'");
}

Cloud sample_shape(ShapeKind kind, int n, Rng& rng) {
  if (n < 8) throw Error(ErrorCode::BadCount, "shapes need at least 8 points, got " + std::to_string(n));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Cloud c(n, 3);
  switch (kind) {
    case ShapeKind::Sphere:
      c = sphere_points(n, rng);
      break;
    case ShapeKind::CubeSurface:
      for (int i = 0; i < n; ++i) {
        const int face = std::min(5, static_cast<int>(unit(rng) * 6.0));
        Vec3 p(2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0);
        p[face / 2] = face % 2 == 0 ? -1.0 : 1.0;
        c.row(i) = p.transpose();
      }
      break;
    case ShapeKind::Torus: {
      const double major = 1.0, minor = 0.35;
      for (int i = 0; i < n; ++i) {
        const double u = 2.0 * std::numbers::pi * unit(rng);
        const double v = 2.0 * std::numbers::pi * unit(rng);
        c.row(i) << (major + minor * std::cos(v)) * std::cos(u), (major + minor * std::cos(v)) * std::sin(u),
            minor * std::sin(v);
      }
      break;
    }
    case ShapeKind::GaussianBlob: {
      // Anisotropic blob with a random orientation.
      const Vec3 scale = Vec3(1.0, 0.6, 0.3).cwiseProduct(
          Vec3(0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng)));
      const Mat3 r = random_transform(rng, 179.0, 0.0).rotation_matrix();
      for (int i = 0; i < n; ++i) {
        const Vec3 z(normal(rng), normal(rng), normal(rng));
        c.row(i) = (r * z.cwiseProduct(scale)).transpose();
      }
      break;
    }
    case ShapeKind::Composite: {
      // Ellipsoid body, box arm and a spherical head: no rotational symmetry.
      const Vec3 body = Vec3(1.0, 0.5, 0.3).cwiseProduct(
          Vec3(0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng)));
      const double arm_scale = 0.8 + 0.4 * unit(rng);
      const int n_body = n / 2;
      const int n_arm = n / 3;
      int i = 0;
      for (; i < n_body; ++i) c.row(i) = unit_vector(rng).cwiseProduct(body).transpose();
      for (; i < n_body + n_arm; ++i) {
        const Vec3 p(2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0);
        c.row(i) = (p.cwiseProduct(Vec3(0.15, 0.6, 0.1)) * arm_scale + Vec3(0.6, 0.6, 0.0)).transpose();
      }
      for (; i < n; ++i) c.row(i) = (unit_vector(rng) * 0.25 + Vec3(-0.8, 0.1, 0.4)).transpose();
      break;
    }
  }
  normalize_unit_sphere(c);
  return c;
}

RegPair make_pair(const Cloud& base, double rot_max_deg, double trans_max, Rng& rng) {
  RegPair pair;
  pair.g_gt = random_transform(rng, rot_max_deg, trans_max);
  pair.source = base;
  pair.target = apply(pair.g_gt, base);
  pair.meta.points = static_cast<int>(base.rows());
  pair.meta.rot_max_deg = rot_max_deg;
  pair.meta.trans_max = trans_max;
  return pair;
}

Cloud add_gaussian_noise(const Cloud& points, double sigma, double clip, Rng& rng) {
  if (!(sigma > 0.0) || !(clip > 0.0)) throw Error(ErrorCode::BadRange, "noise sigma and clip must be positive");
  std::normal_distribution<double> normal(0.0, sigma);
  Cloud out = points;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (int a = 0; a < 3; ++a) out(i, a) += std::clamp(normal(rng), -clip, clip);
  }
  return out;
}

Cloud partial_crop(const Cloud& points, double keep, Rng& rng, Vec3* direction) {
  if (!(keep > 0.0 && keep <= 1.0)) throw Error(ErrorCode::BadFraction, "keep fraction must lie in (0, 1]");
  if (points.rows() == 0) throw Error(ErrorCode::EmptyCloud, "cannot crop an empty cloud");
  const Vec3 d = unit_vector(rng);
  if (direction) *direction = d;
  const auto n = points.rows();
  const auto kept = static_cast<Eigen::Index>(std::ceil(keep * static_cast<double>(n) - 1e-9));
  const Eigen::VectorXd proj = points * d;
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return proj[a] > proj[b]; });
  order.resize(static_cast<size_t>(kept));
  std::sort(order.begin(), order.end());
  Cloud out(kept, 3);
  for (Eigen::Index i = 0; i < kept; ++i) out.row(i) = points.row(order[static_cast<size_t>(i)]);
  return out;
}

Cloud partial_crop(const Cloud& points, double keep, Rng& rng) { return partial_crop(points, keep, rng, nullptr); }

Cloud load_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<Vec3> pts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Vec3 p;
    std::string extra;
    if (!(ss >> p.x() >> p.y() >> p.z()) || (ss >> extra) || !p.allFinite()) {
      throw Error(ErrorCode::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": expected three finite numbers");
    }
    pts.push_back(p);
  }
  if (pts.empty()) throw Error(ErrorCode::EmptyCloud, path.string() + " contains no points");
  Cloud c(static_cast<Eigen::Index>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return c;
}

void save_xyz(const Cloud& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    out << points(i, 0) << ' ' << points(i, 1) << ' ' << points(i, 2) << '\n';
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over the pair (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RegPair synthesize_pair(const PairSpec& spec) {
  Rng rng(spec.seed);
  const Cloud base = sample_shape(spec.kind, spec.points, rng);
  RegPair pair = make_pair(base, spec.rot_max_deg, spec.trans_max, rng);
  if (spec.regime == Regime::Noise) {
    pair.source = add_gaussian_noise(pair.source, spec.noise_sigma, spec.noise_clip, rng);
    pair.target = add_gaussian_noise(pair.target, spec.noise_sigma, spec.noise_clip, rng);
  } else if (spec.regime == Regime::Partial) {
    pair.source = partial_crop(pair.source, spec.keep, rng);
    pair.target = partial_crop(pair.target, spec.keep, rng);
  }
  pair.meta = spec;
  return pair;
}

std::vector<ShapeKind> train_kinds(const GenerateOptions& opts) {
  if (opts.regime == Regime::UnseenCategory) return {ShapeKind::Composite, ShapeKind::CubeSurface, ShapeKind::Torus};
  if (opts.kinds) return *opts.kinds;
  return {ShapeKind::Composite, ShapeKind::GaussianBlob};
}

std::vector<ShapeKind> test_kinds(const GenerateOptions& opts) {
  if (opts.regime == Regime::UnseenCategory) return {ShapeKind::GaussianBlob, ShapeKind::Sphere};
  return train_kinds(opts);
}

std::vector<PairSpec> plan_dataset(const GenerateOptions& opts) {
  if (opts.pairs < 0) throw Error(ErrorCode::BadCount, "pair count must be non-negative");
  if (opts.points < 8) throw Error(ErrorCode::BadCount, "pairs need at least 8 points");
  if (!(opts.rot_max_deg >= 0.0 && opts.rot_max_deg < 180.0) || !(opts.trans_max >= 0.0)) {
    throw Error(ErrorCode::BadRange, "rotation range must be in [0,180) and translation range >= 0");
  }
  if (!(opts.test_fraction >= 0.0 && opts.test_fraction <= 1.0)) {
    throw Error(ErrorCode::BadFraction, "test fraction must lie in [0, 1]");
  }
  if (opts.regime == Regime::Partial && !(opts.keep > 0.0 && opts.keep <= 1.0)) {
    throw Error(ErrorCode::BadFraction, "keep fraction must lie in (0, 1]");
  }
  if (opts.kinds && opts.kinds->empty()) throw Error(ErrorCode::ConfigError, "kinds list is empty");
  const auto train = train_kinds(opts);
  const auto test = test_kinds(opts);
  const int n_test = static_cast<int>(std::lround(opts.test_fraction * opts.pairs));
  const int n_train = opts.pairs - n_test;
  std::vector<PairSpec> specs;
  specs.reserve(static_cast<size_t>(opts.pairs));
  for (int i = 0; i < opts.pairs; ++i) {
    PairSpec s;
    std::ostringstream id;
    id << "pair_" << std::setw(5) << std::setfill('0') << i;
    s.id = id.str();
    s.split = i < n_train ? "train" : "test";
    const auto& kinds = i < n_train ? train : test;
    const int local = i < n_train ? i : i - n_train;
    s.kind = kinds[static_cast<size_t>(local) % kinds.size()];
    s.regime = opts.regime;
    s.seed = derive_seed(opts.seed, static_cast<std::uint64_t>(i));
    s.points = opts.points;
    s.rot_max_deg = opts.rot_max_deg;
    s.trans_max = opts.trans_max;
    s.noise_sigma = opts.noise_sigma;
    s.noise_clip = opts.noise_clip;
    s.keep = opts.keep;
    specs.push_back(std::move(s));
  }
  return specs;
}

namespace {

nlohmann::json spec_json(const PairSpec& s) {
  return {{"id", s.id},
          {"kind", to_string(s.kind)},
          {"regime", to_string(s.regime)},
          {"split", s.split},
          {"seed", s.seed},
          {"points", s.points},
          {"rot_max_deg", s.rot_max_deg},
          {"trans_max", s.trans_max},
          {"noise_sigma", s.noise_sigma},
          {"noise_clip", s.noise_clip},
          {"keep", s.keep},
          {"source", s.id + "_src.xyz"},
          {"template", s.id + "_tpl.xyz"},
          {"transform", s.id + "_gt.txt"}};
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<PairSpec>& specs, int jobs) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  const auto write_pair = [&](const PairSpec& spec) {
    const RegPair pair = synthesize_pair(spec);
    save_xyz(pair.source, dir / (spec.id + "_src.xyz"));
    save_xyz(pair.target, dir / (spec.id + "_tpl.xyz"));
    const RigidTransform g[1] = {pair.g_gt};
    save_transforms(dir / (spec.id + "_gt.txt"), g);
  };
  // Every pair is a pure function of its spec, so workers only split the files.
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (size_t k = next++; k < specs.size(); k = next++) {
      try {
        write_pair(specs[k]);
      } catch (...) {
        const std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < std::min<int>(jobs, static_cast<int>(specs.size())); ++w) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);

  nlohmann::json manifest{{"format", "pcrd-manifest"}, {"version", 1}, {"pairs", nlohmann::json::array()}};
  for (const auto& spec : specs) manifest["pairs"].push_back(spec_json(spec));
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for manifest in " + dir.string());
}

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }
  const auto dir = manifest.parent_path();
  std::vector<DatasetEntry> out;
  try {
    for (const auto& p : j.at("pairs")) {
      DatasetEntry e;
      e.spec.id = p.at("id").get<std::string>();
      e.spec.kind = parse_shape_kind(p.at("kind").get<std::string>());
      e.spec.regime = parse_regime(p.at("regime").get<std::string>());
      e.spec.split = p.at("split").get<std::string>();
      e.spec.seed = p.at("seed").get<std::uint64_t>();
      e.spec.points = p.at("points").get<int>();
      e.spec.rot_max_deg = p.at("rot_max_deg").get<double>();
      e.spec.trans_max = p.at("trans_max").get<double>();
      e.spec.noise_sigma = p.at("noise_sigma").get<double>();
      e.spec.noise_clip = p.at("noise_clip").get<double>();
      e.spec.keep = p.at("keep").get<double>();
      e.source = dir / p.at("source").get<std::string>();
      e.target = dir / p.at("template").get<std::string>();
      e.transform = dir / p.at("transform").get<std::string>();
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }
  return out;
}

std::vector<RegPair> load_dataset(const std::filesystem::path& manifest, const std::optional<std::string>& split) {
  std::vector<RegPair> pairs;
  for (const auto& e : read_manifest(manifest)) {
    if (split && e.spec.split != *split) continue;
    RegPair p;
    p.source = load_xyz(e.source);
    p.target = load_xyz(e.target);
    const auto g = load_transforms(e.transform);
    if (g.size() != 1) throw Error(ErrorCode::ParseError, e.transform.string() + ": expected one transform");
    p.g_gt = g.front();
    p.meta = e.spec;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace pcrd
