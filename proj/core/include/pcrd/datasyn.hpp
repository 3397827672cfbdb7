#pragma once

// Synthetic registration pairs: parametric shape families standing in for CAD
// models, the four benchmark regimes, XYZ cloud files and dataset manifests.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcrd/geom3d.hpp"

namespace pcrd {

enum class ShapeKind { Sphere, CubeSurface, Torus, GaussianBlob, Composite };
enum class Regime { Clean, UnseenCategory, Noise, Partial };

std::string to_string(ShapeKind k);
std::string to_string(Regime r);
ShapeKind parse_shape_kind(const std::string& s);
Regime parse_regime(const std::string& s);

// Everything needed to regenerate one pair bit-for-bit.
struct PairSpec {
  std::string id;
  ShapeKind kind = ShapeKind::Composite;
  Regime regime = Regime::Clean;
  std::string split = "train";  // "train" or "test"
  std::uint64_t seed = 0;
  int points = 128;
  double rot_max_deg = 45.0;
  double trans_max = 1.0;
  double noise_sigma = 0.01;
  double noise_clip = 0.05;
  double keep = 0.7;
};

struct RegPair {
  Cloud source;    // P
  Cloud target;    // Q = g_gt * P before any per-cloud noise or cropping
  RigidTransform g_gt;
  PairSpec meta;
};

// n points normalized into the unit sphere: centroid at the origin, max radius 1.
Cloud sample_shape(ShapeKind kind, int n, Rng& rng);

// Q = apply(g_gt, P) with g_gt = random_transform(rot_max_deg, trans_max).
RegPair make_pair(const Cloud& base, double rot_max_deg, double trans_max, Rng& rng);

// i.i.d. N(0, sigma^2) per axis, clipped to [-clip, clip].
Cloud add_gaussian_noise(const Cloud& points, double sigma, double clip, Rng& rng);

// Keeps the ceil(keep * n) points with the largest projection onto a random
// unit direction, preserving their original order.
Cloud partial_crop(const Cloud& points, double keep, Rng& rng);
// Same, with the direction drawn and returned for inspection.
Cloud partial_crop(const Cloud& points, double keep, Rng& rng, Vec3* direction);

// Whitespace separated `x y z` per line, `#` comments, 17 significant digits.
Cloud load_xyz(const std::filesystem::path& path);
void save_xyz(const Cloud& points, const std::filesystem::path& path);

// Builds the pair described by `spec` from its seed alone.
RegPair synthesize_pair(const PairSpec& spec);

struct GenerateOptions {
  Regime regime = Regime::Clean;
  int pairs = 100;
  int points = 128;
  double rot_max_deg = 45.0;
  double trans_max = 1.0;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::optional<std::vector<ShapeKind>> kinds;  // overrides the regime defaults (not for unseen-cat)
  double noise_sigma = 0.01;
  double noise_clip = 0.05;
  double keep = 0.7;
};

// Shape kinds used per split. Unseen-category keeps them disjoint.
std::vector<ShapeKind> train_kinds(const GenerateOptions& opts);
std::vector<ShapeKind> test_kinds(const GenerateOptions& opts);

std::vector<PairSpec> plan_dataset(const GenerateOptions& opts);

// Writes manifest.json plus per-pair source/template clouds and ground truth.
// Output does not depend on `jobs`.
void write_dataset(const std::filesystem::path& dir, const std::vector<PairSpec>& specs, int jobs = 1);

struct DatasetEntry {
  PairSpec spec;
  std::filesystem::path source;
  std::filesystem::path target;
  std::filesystem::path transform;
};
std::vector<DatasetEntry> read_manifest(const std::filesystem::path& manifest);

// Loads pairs from files named in the manifest; `split` filters when set.
std::vector<RegPair> load_dataset(const std::filesystem::path& manifest,
                                  const std::optional<std::string>& split = std::nullopt);

// Stable per-pair seed derived from a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace pcrd
