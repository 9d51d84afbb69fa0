#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcpr/types.hpp"

namespace pcpr {

/// Positive/negative neighbor lists, aligned with the input sample order.
/// positives[a] holds indices b with ||l_a - l_b|| < pos_train (b != a);
/// negatives[a] holds indices c with ||l_a - l_c|| > neg_train. Samples in
/// the band between the radii appear in neither list.
struct PairIndex {
  std::vector<std::vector<int>> positives;
  std::vector<std::vector<int>> negatives;
};

/// Centers a raw cloud at its bounding-box midpoint and scales all axes by
/// one scalar so that max |coordinate| == 1. Shape is preserved.
/// Throws DegenerateCloud for fewer than 8 points or if all points coincide.
PointCloud normalize_cloud(const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 3>>& raw);

/// Mines positives and negatives by planar distance thresholds. All samples
/// must share one coordinate frame. Brute force below 20k samples, grid
/// buckets above; both produce identical sets.
PairIndex mine_pairs(const std::vector<Sample>& samples, const ThresholdSpec& spec);

namespace detail {
/// The two mining strategies behind mine_pairs, exposed so tests can assert
/// they produce identical sets on the same input.
PairIndex mine_pairs_brute(const std::vector<Sample>& samples, const ThresholdSpec& spec);
PairIndex mine_pairs_grid(const std::vector<Sample>& samples, const ThresholdSpec& spec);
}  // namespace detail

/// Random yaw rotation plus independent x/y mirror flips (probability 1/2
/// each), deterministic in the seed. Rigid: pairwise distances are
/// preserved; coordinates are snapped back into [-1,1] only when they exceed
/// the box by floating-point dust.
PointCloud augment(const PointCloud& cloud, std::uint64_t seed);

/// Generates one synthetic environment. Places sit on a jittered grid, each
/// with a fixed landmark constellation; every traversal re-observes the
/// constellations under a random heading, per-point noise and a small
/// location offset. Deterministic in spec.seed; coordinates are stored at
/// float32 precision so datasets round-trip through disk bit-exactly.
DomainDataset generate_domain(const SyntheticDomainSpec& spec, const std::string& name,
                              const ThresholdSpec& thresholds, int domain_id = 0);

/// Cloud file: magic "PCPR", u32 version=1, u32 point count, N x 3 float32,
/// all little-endian.
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud load_cloud(const std::filesystem::path& path);

/// Writes manifest.json, index.csv and clouds/ under dir.
void save_dataset(const DomainDataset& dataset, const std::filesystem::path& dir);

/// Loads a dataset from a manifest path (or a directory containing
/// manifest.json). domain_id is stamped onto every sample. Emits a warning
/// line per query without an in-radius database entry when warnings is given.
DomainDataset load_dataset(const std::filesystem::path& manifest_or_dir, int domain_id = 0,
                           std::vector<std::string>* warnings = nullptr);

/// Resolves the index CSV referenced by a dataset manifest. Datasets are
/// identified by their index path in replay-store manifests.
std::filesystem::path dataset_index_path(const std::filesystem::path& manifest_or_dir);

}  // namespace pcpr
