#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "pcpr/errors.hpp"

namespace pcpr {

using Scalar = double;
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

/// One point cloud, row per point, coordinates normalized into [-1, 1].
using PointCloud = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;

/// Planar position in meters (easting, northing).
using GeoLocation = Eigen::Matrix<Scalar, 2, 1>;

/// Training/eval atom: a cloud tagged with where and in which domain it was
/// taken. sample_id is unique within one dataset; across domains identity is
/// the (domain_id, sample_id) pair.
struct Sample {
  PointCloud cloud;
  GeoLocation location{0.0, 0.0};
  int domain_id = 0;
  std::int64_t sample_id = 0;
};

/// Distance radii (meters) that define positives and negatives.
/// Pairs closer than pos_train are positives, farther than neg_train are
/// negatives; the band in between carries no label. pos_test is the
/// retrieval success radius.
struct ThresholdSpec {
  Scalar pos_train = 10.0;
  Scalar neg_train = 50.0;
  Scalar pos_test = 25.0;

  void validate() const {
    if (!(pos_train > 0.0 && pos_train < neg_train))
      throw InvalidSpec("thresholds: need 0 < pos_train < neg_train");
    if (!(pos_test > 0.0)) throw InvalidSpec("thresholds: pos_test must be > 0");
  }
};

/// One training environment: train split plus a held-out retrieval test set
/// (database traversal + query traversals). Immutable after construction.
struct DomainDataset {
  std::string name;
  std::vector<Sample> train;
  std::vector<Sample> test_database;
  std::vector<Sample> test_queries;
  ThresholdSpec thresholds;
};

/// Generator parameters for one synthetic environment. Domain shift between
/// environments comes from differing landmark statistics, not from real
/// sensor changes.
struct SyntheticDomainSpec {
  std::uint64_t seed = 0;
  int num_places = 16;
  Scalar area_side = 1600.0;     // meters
  int landmarks_per_place = 12;
  Scalar landmark_scale = 1.0;   // relative blob extent
  Scalar noise_sigma = 0.01;     // per-point jitter in normalized coords
  int revisit_count = 3;         // test traversals (1 database + rest queries)
  int points_per_cloud = 256;

  void validate() const {
    if (num_places < 4) throw InvalidSpec("synthetic spec: num_places must be >= 4");
    if (revisit_count < 2) throw InvalidSpec("synthetic spec: revisit_count must be >= 2");
    if (!(area_side > 0.0)) throw InvalidSpec("synthetic spec: area_side must be > 0");
    if (landmarks_per_place < 1)
      throw InvalidSpec("synthetic spec: landmarks_per_place must be >= 1");
    if (!(landmark_scale > 0.0))
      throw InvalidSpec("synthetic spec: landmark_scale must be > 0");
    if (noise_sigma < 0.0) throw InvalidSpec("synthetic spec: noise_sigma must be >= 0");
    if (points_per_cloud < 8)
      throw InvalidSpec("synthetic spec: points_per_cloud must be >= 8");
  }
};

inline bool operator==(const ThresholdSpec& a, const ThresholdSpec& b) {
  return a.pos_train == b.pos_train && a.neg_train == b.neg_train &&
         a.pos_test == b.pos_test;
}

inline bool operator==(const Sample& a, const Sample& b) {
  return a.sample_id == b.sample_id && a.domain_id == b.domain_id &&
         a.location == b.location && a.cloud.rows() == b.cloud.rows() &&
         a.cloud == b.cloud;
}

inline bool operator==(const DomainDataset& a, const DomainDataset& b) {
  return a.name == b.name && a.thresholds == b.thresholds && a.train == b.train &&
         a.test_database == b.test_database && a.test_queries == b.test_queries;
}

}  // namespace pcpr
