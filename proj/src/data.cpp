#include "pcpr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "pcpr/binio.hpp"
#include "pcpr/rng.hpp"

namespace pcpr {

using json = nlohmann::json;

PointCloud normalize_cloud(const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 3>>& raw) {
  if (raw.rows() < 8) {
    throw DegenerateCloud("normalize_cloud: need at least 8 points, got " +
                          std::to_string(raw.rows()));
  }
  const Vec3 lo = raw.colwise().minCoeff();
  const Vec3 hi = raw.colwise().maxCoeff();
  const Vec3 mid = 0.5 * (lo + hi);
  PointCloud out = raw.rowwise() - mid.transpose();
  const Scalar scale = out.cwiseAbs().maxCoeff();
  if (scale <= 0.0) throw DegenerateCloud("normalize_cloud: all points coincide");
  out /= scale;
  return out;
}

namespace {

Scalar planar_dist(const GeoLocation& a, const GeoLocation& b) { return (a - b).norm(); }

}  // namespace

namespace detail {

PairIndex mine_pairs_brute(const std::vector<Sample>& samples, const ThresholdSpec& spec) {
  const int n = static_cast<int>(samples.size());
  PairIndex idx;
  idx.positives.resize(n);
  idx.negatives.resize(n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      const Scalar d = planar_dist(samples[a].location, samples[b].location);
      if (d < spec.pos_train) {
        idx.positives[a].push_back(b);
      } else if (d > spec.neg_train) {
        idx.negatives[a].push_back(b);
      }
    }
  }
  return idx;
}

// Grid buckets with cell size neg_train: everything within neg_train of a
// sample lives in the 3x3 cell neighborhood, so negatives are the complement
// of that candidate set.
PairIndex mine_pairs_grid(const std::vector<Sample>& samples, const ThresholdSpec& spec) {
  const int n = static_cast<int>(samples.size());
  const Scalar cell = spec.neg_train;
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> buckets;
  auto key = [cell](const GeoLocation& l) {
    return std::make_pair(static_cast<std::int64_t>(std::floor(l.x() / cell)),
                          static_cast<std::int64_t>(std::floor(l.y() / cell)));
  };
  for (int i = 0; i < n; ++i) buckets[key(samples[i].location)].push_back(i);

  PairIndex idx;
  idx.positives.resize(n);
  idx.negatives.resize(n);
  std::vector<char> near(n, 0);
  for (int a = 0; a < n; ++a) {
    const auto [kx, ky] = key(samples[a].location);
    std::vector<int> touched;
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        auto it = buckets.find({kx + dx, ky + dy});
        if (it == buckets.end()) continue;
        for (int b : it->second) {
          if (b == a) continue;
          const Scalar d = planar_dist(samples[a].location, samples[b].location);
          if (d < spec.pos_train) idx.positives[a].push_back(b);
          if (d <= spec.neg_train) {
            near[b] = 1;
            touched.push_back(b);
          }
        }
      }
    }
    for (int b = 0; b < n; ++b) {
      if (b != a && !near[b]) idx.negatives[a].push_back(b);
    }
    for (int b : touched) near[b] = 0;
    std::sort(idx.positives[a].begin(), idx.positives[a].end());
  }
  return idx;
}

}  // namespace detail

namespace {
constexpr int kGridIndexThreshold = 20000;
}  // namespace

PairIndex mine_pairs(const std::vector<Sample>& samples, const ThresholdSpec& spec) {
  spec.validate();
  if (static_cast<int>(samples.size()) < kGridIndexThreshold) {
    return detail::mine_pairs_brute(samples, spec);
  }
  return detail::mine_pairs_grid(samples, spec);
}

namespace {

PointCloud rotate_yaw(const PointCloud& cloud, Scalar angle) {
  const Scalar c = std::cos(angle), s = std::sin(angle);
  PointCloud out(cloud.rows(), 3);
  out.col(0) = c * cloud.col(0) - s * cloud.col(1);
  out.col(1) = s * cloud.col(0) + c * cloud.col(1);
  out.col(2) = cloud.col(2);
  return out;
}

// Snap coordinates that exceed the unit box by floating-point dust only;
// genuinely rotated-out points stay put so the transform remains rigid.
void snap_to_box(PointCloud& cloud) {
  constexpr Scalar kDust = 1e-12;
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    Scalar& v = cloud.data()[i];
    if (v > 1.0 && v <= 1.0 + kDust) v = 1.0;
    if (v < -1.0 && v >= -1.0 - kDust) v = -1.0;
  }
}

}  // namespace

PointCloud augment(const PointCloud& cloud, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  const Scalar angle = uniform_real(rng, 0.0, 2.0 * M_PI);
  const bool flip_x = coin_flip(rng);
  const bool flip_y = coin_flip(rng);
  PointCloud out = rotate_yaw(cloud, angle);
  if (flip_x) out.col(0) = -out.col(0);
  if (flip_y) out.col(1) = -out.col(1);
  snap_to_box(out);
  return out;
}

namespace {

PointCloud quantize_f32(const PointCloud& cloud) {
  PointCloud out = cloud;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out.data()[i] = static_cast<Scalar>(static_cast<float>(out.data()[i]));
  }
  return out;
}

// Canonical point set for one place, sampled once from its landmark
// constellation, normalized and shrunk so any yaw keeps it inside the box.
PointCloud make_template(const SyntheticDomainSpec& spec, int place) {
  Rng rng = make_rng(derive_seed(spec.seed, "template", static_cast<std::uint64_t>(place)));
  const int k = spec.landmarks_per_place;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> centers(k, 3);
  Eigen::VectorXd extents(k);
  for (int i = 0; i < k; ++i) {
    centers(i, 0) = uniform_real(rng, -10.0, 10.0);
    centers(i, 1) = uniform_real(rng, -10.0, 10.0);
    centers(i, 2) = uniform_real(rng, 0.0, 6.0);
    extents(i) = spec.landmark_scale * uniform_real(rng, 0.4, 1.2);
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> raw(spec.points_per_cloud, 3);
  for (int i = 0; i < spec.points_per_cloud; ++i) {
    const int lm = static_cast<int>(uniform_int(rng, 0, k - 1));
    for (int c = 0; c < 3; ++c) raw(i, c) = centers(lm, c) + extents(lm) * normal(rng);
  }
  PointCloud tpl = normalize_cloud(raw);
  tpl *= Scalar(1.0) / std::sqrt(Scalar(2.0));  // yaw-rotation head room
  return tpl;
}

struct TraversalDraw {
  Scalar heading;
  GeoLocation offset;
};

// Split codes keep the rng streams of the three splits disjoint.
enum SplitCode : std::uint64_t { kTrain = 0, kDb = 1, kQuery = 2 };

TraversalDraw draw_traversal(const SyntheticDomainSpec& spec, SplitCode split, int traversal,
                             int place, Scalar loc_jitter) {
  Rng rng = make_rng(derive_seed(spec.seed, "traversal",
                                 (static_cast<std::uint64_t>(split) << 32) |
                                     static_cast<std::uint64_t>(traversal),
                                 static_cast<std::uint64_t>(place)));
  TraversalDraw d;
  d.heading = uniform_real(rng, 0.0, 2.0 * M_PI);
  const Scalar r = loc_jitter * std::sqrt(uniform_real(rng, 0.0, 1.0));
  const Scalar phi = uniform_real(rng, 0.0, 2.0 * M_PI);
  d.offset = GeoLocation(r * std::cos(phi), r * std::sin(phi));
  return d;
}

PointCloud observe(const SyntheticDomainSpec& spec, const PointCloud& tpl, SplitCode split,
                   int traversal, int place) {
  PointCloud cloud = rotate_yaw(tpl, draw_traversal(spec, split, traversal, place, 0.0).heading);
  if (spec.noise_sigma > 0.0) {
    Rng rng = make_rng(derive_seed(spec.seed, "noise",
                                   (static_cast<std::uint64_t>(split) << 32) |
                                       static_cast<std::uint64_t>(traversal),
                                   static_cast<std::uint64_t>(place)));
    for (Eigen::Index i = 0; i < cloud.size(); ++i) {
      cloud.data()[i] += normal(rng, spec.noise_sigma);
    }
    cloud = cloud.cwiseMax(-1.0).cwiseMin(1.0);
  }
  return quantize_f32(cloud);
}

}  // namespace

DomainDataset generate_domain(const SyntheticDomainSpec& spec, const std::string& name,
                              const ThresholdSpec& thresholds, int domain_id) {
  spec.validate();
  thresholds.validate();

  const int gridn = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.num_places))));
  const Scalar cell = spec.area_side / gridn;
  const Scalar loc_jitter = 0.25 * std::min(thresholds.pos_train, thresholds.pos_test);
  // Places must stay mutual non-positives even at worst-case jitter.
  if (0.8 * cell - 2.0 * loc_jitter <= thresholds.pos_train) {
    throw InvalidSpec("synthetic spec: num_places too dense for area_side given pos_train");
  }

  std::vector<GeoLocation> places(spec.num_places);
  {
    Rng rng = make_rng(derive_seed(spec.seed, "layout"));
    for (int p = 0; p < spec.num_places; ++p) {
      const int gx = p % gridn, gy = p / gridn;
      places[p] = GeoLocation((gx + 0.5) * cell + uniform_real(rng, -0.1 * cell, 0.1 * cell),
                              (gy + 0.5) * cell + uniform_real(rng, -0.1 * cell, 0.1 * cell));
    }
  }

  std::vector<PointCloud> templates(spec.num_places);
  for (int p = 0; p < spec.num_places; ++p) templates[p] = make_template(spec, p);

  DomainDataset ds;
  ds.name = name;
  ds.thresholds = thresholds;
  std::int64_t next_id = 0;
  auto emit = [&](std::vector<Sample>& split, SplitCode code, int traversal, int place) {
    Sample s;
    s.cloud = observe(spec, templates[place], code, traversal, place);
    const TraversalDraw d = draw_traversal(spec, code, traversal, place, loc_jitter);
    s.location = places[place] + d.offset;
    s.domain_id = domain_id;
    s.sample_id = next_id++;
    split.push_back(std::move(s));
  };

  for (int t = 0; t < spec.revisit_count; ++t) {
    for (int p = 0; p < spec.num_places; ++p) emit(ds.train, kTrain, t, p);
  }
  for (int p = 0; p < spec.num_places; ++p) emit(ds.test_database, kDb, 0, p);
  for (int t = 0; t < spec.revisit_count - 1; ++t) {
    for (int p = 0; p < spec.num_places; ++p) emit(ds.test_queries, kQuery, t, p);
  }

  // Brute-force check of the coverage invariant: every query must have an
  // in-radius database entry.
  for (const Sample& q : ds.test_queries) {
    bool covered = false;
    for (const Sample& db : ds.test_database) {
      if (planar_dist(q.location, db.location) < thresholds.pos_test) {
        covered = true;
        break;
      }
    }
    if (!covered) {
      throw InvalidSpec("generate_domain: query " + std::to_string(q.sample_id) +
                        " has no database entry within pos_test");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kCloudMagic[] = "PCPR";
constexpr std::uint32_t kCloudVersion = 1;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string cloud_file_name(std::int64_t sample_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld.pcpr", static_cast<long long>(sample_id));
  return std::string("clouds/") + buf;
}

}  // namespace

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  auto os = binio::open_output(path);
  binio::write_bytes(os, kCloudMagic, 4);
  binio::write_u32(os, kCloudVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(cloud.rows()));
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    for (int c = 0; c < 3; ++c) binio::write_f32(os, static_cast<float>(cloud(i, c)));
  }
  if (!os) throw FormatError(path.string() + ": write failed");
}

PointCloud load_cloud(const std::filesystem::path& path) {
  auto is = binio::open_input(path);
  binio::Reader r(is, path.string());
  r.expect_magic(kCloudMagic, 4);
  const std::uint32_t version = r.read_u32();
  if (version != kCloudVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t n = r.read_u32();
  if (n < 8) throw DegenerateCloud(path.string() + ": cloud has fewer than 8 points");
  PointCloud cloud(n, 3);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) cloud(i, c) = static_cast<Scalar>(r.read_f32());
  }
  return cloud;
}

void save_dataset(const DomainDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "clouds");

  json manifest;
  manifest["name"] = dataset.name;
  manifest["thresholds"] = {{"pos_train", dataset.thresholds.pos_train},
                            {"neg_train", dataset.thresholds.neg_train},
                            {"pos_test", dataset.thresholds.pos_test}};
  manifest["index"] = "index.csv";
  {
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    os << manifest.dump(2) << "\n";
    if (!os) throw FormatError((dir / "manifest.json").string() + ": write failed");
  }

  std::ofstream idx(dir / "index.csv", std::ios::trunc);
  idx << "sample_id,split,file,easting,northing\n";
  auto emit_split = [&](const std::vector<Sample>& split, const char* tag) {
    for (const Sample& s : split) {
      const std::string file = cloud_file_name(s.sample_id);
      save_cloud(s.cloud, dir / file);
      idx << s.sample_id << ',' << tag << ',' << file << ',' << format_double(s.location.x())
          << ',' << format_double(s.location.y()) << "\n";
    }
  };
  emit_split(dataset.train, "train");
  emit_split(dataset.test_database, "db");
  emit_split(dataset.test_queries, "query");
  if (!idx) throw FormatError((dir / "index.csv").string() + ": write failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::filesystem::path dataset_index_path(const std::filesystem::path& manifest_or_dir) {
  std::filesystem::path manifest_path = manifest_or_dir;
  if (std::filesystem::is_directory(manifest_path)) manifest_path /= "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw FormatError(manifest_path.string() + ": cannot open for reading");
  json manifest;
  try {
    is >> manifest;
    return manifest_path.parent_path() / manifest.at("index").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
}

DomainDataset load_dataset(const std::filesystem::path& manifest_or_dir, int domain_id,
                           std::vector<std::string>* warnings) {
  std::filesystem::path manifest_path = manifest_or_dir;
  if (std::filesystem::is_directory(manifest_path)) manifest_path /= "manifest.json";
  const std::filesystem::path dir = manifest_path.parent_path();

  json manifest;
  {
    std::ifstream is(manifest_path);
    if (!is) throw FormatError(manifest_path.string() + ": cannot open for reading");
    try {
      is >> manifest;
    } catch (const json::exception& e) {
      throw FormatError(manifest_path.string() + ": " + e.what());
    }
  }

  DomainDataset ds;
  try {
    ds.name = manifest.at("name").get<std::string>();
    const json& th = manifest.at("thresholds");
    ds.thresholds.pos_train = th.at("pos_train").get<double>();
    ds.thresholds.neg_train = th.at("neg_train").get<double>();
    ds.thresholds.pos_test = th.at("pos_test").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  ds.thresholds.validate();

  const std::filesystem::path index_path = dir / manifest.at("index").get<std::string>();
  std::ifstream idx(index_path);
  if (!idx) throw FormatError(index_path.string() + ": cannot open for reading");

  std::string line;
  if (!std::getline(idx, line)) throw FormatError(index_path.string() + ": missing header");
  if (split_csv_line(line) !=
      std::vector<std::string>{"sample_id", "split", "file", "easting", "northing"}) {
    throw FormatError(index_path.string() + ": unexpected header: " + line);
  }

  std::unordered_set<std::int64_t> seen_ids;
  int line_no = 1;
  while (std::getline(idx, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 5) {
      throw FormatError(index_path.string() + ": line " + std::to_string(line_no) +
                        ": expected 5 fields");
    }
    Sample s;
    try {
      s.sample_id = std::stoll(fields[0]);
      s.location = GeoLocation(std::stod(fields[3]), std::stod(fields[4]));
    } catch (const std::exception&) {
      throw FormatError(index_path.string() + ": line " + std::to_string(line_no) +
                        ": bad numeric field");
    }
    if (!seen_ids.insert(s.sample_id).second) {
      throw FormatError(index_path.string() + ": duplicate sample_id " +
                        std::to_string(s.sample_id));
    }
    s.domain_id = domain_id;
    const std::filesystem::path cloud_path = dir / fields[2];
    if (!std::filesystem::exists(cloud_path)) {
      throw MissingIndexEntry(index_path.string() + ": line " + std::to_string(line_no) +
                              " references absent cloud file " + cloud_path.string());
    }
    s.cloud = load_cloud(cloud_path);
    if (fields[1] == "train") {
      ds.train.push_back(std::move(s));
    } else if (fields[1] == "db") {
      ds.test_database.push_back(std::move(s));
    } else if (fields[1] == "query") {
      ds.test_queries.push_back(std::move(s));
    } else {
      throw FormatError(index_path.string() + ": line " + std::to_string(line_no) +
                        ": unknown split '" + fields[1] + "'");
    }
  }

  if (warnings) {
    for (const Sample& q : ds.test_queries) {
      bool covered = false;
      for (const Sample& db : ds.test_database) {
        if (planar_dist(q.location, db.location) < ds.thresholds.pos_test) {
          covered = true;
          break;
        }
      }
      if (!covered) {
        warnings->push_back(ds.name + ": query " + std::to_string(q.sample_id) +
                            " has no database entry within pos_test");
      }
    }
  }
  return ds;
}

}  // namespace pcpr
