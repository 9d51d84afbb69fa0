#include "pcpr/selfcheck.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

#include "pcpr/data.hpp"
#include "pcpr/encoder.hpp"
#include "pcpr/eval.hpp"
#include "pcpr/losses.hpp"
#include "pcpr/memory.hpp"
#include "pcpr/rng.hpp"
#include "pcpr/types.hpp"

namespace pcpr {
namespace {

constexpr double kFdStep = 1e-5;
constexpr int kBatchRows = 7;
constexpr int kBatchDim = 5;
constexpr int kMaxAttempts = 200;

const std::vector<TripletIdx> kTriples{{0, 1, 2}, {3, 4, 5}, {6, 0, 4}, {2, 5, 1}};
const std::vector<DistillPair> kPairs{{0, 1}, {2, 3}, {4, 5}, {6, 2}, {1, 5}};

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

Eigen::MatrixXd random_batch(Rng& g, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = uniform_real(g, -1.0, 1.0);
  }
  return m;
}

Eigen::MatrixXd random_orthogonal(Rng& g, int dim) {
  Eigen::MatrixXd gauss(dim, dim);
  for (Eigen::Index r = 0; r < dim; ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) gauss(r, c) = normal(g);
  }
  return Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ();
}

/// Central differences of a scalar function of a descriptor batch against an
/// analytic gradient of the same shape.
template <typename Fn>
double fd_batch_max_err(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& analytic, Fn&& fn) {
  Eigen::MatrixXd x = x0;
  double worst = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + kFdStep;
      const double up = fn(x);
      x(r, c) = keep - kFdStep;
      const double dn = fn(x);
      x(r, c) = keep;
      worst = std::max(worst, rel_err(analytic(r, c), (up - dn) / (2.0 * kFdStep)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Gradient checks. Each instance generator rejects draws that land too close
// to a non-smooth point for the finite-difference step.

bool triplet_instance_ok(const Eigen::MatrixXd& v, const TripletSpec& spec) {
  bool any_active = false;
  for (const TripletIdx& t : kTriples) {
    const double dp = (v.row(t.anchor) - v.row(t.positive)).norm();
    const double dn = (v.row(t.anchor) - v.row(t.negative)).norm();
    if (dp < 0.3 || dn < 0.3) return false;
    const double raw = dp - dn + spec.margin;
    if (std::abs(raw) < 1e-3) return false;
    if (raw > 0.0) any_active = true;
  }
  return any_active;
}

FdReport fd_sweep(std::uint64_t seed, int instances, const char* label,
                  const std::function<double(Rng&, double&)>& run_instance) {
  FdReport report;
  report.instances = instances;
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < instances; ++i) {
    double err = 0.0;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      Rng g = make_rng(derive_seed(seed, label, static_cast<std::uint64_t>(i),
                                   static_cast<std::uint64_t>(attempt)));
      double out = 0.0;
      if (run_instance(g, out) >= 0.0) {
        err = out;
        break;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

FdReport fd_check_triplet(std::uint64_t seed, int instances) {
  const TripletSpec spec;
  return fd_sweep(seed, instances, "fd-triplet", [&](Rng& g, double& out) -> double {
    const Eigen::MatrixXd v = random_batch(g, kBatchRows, kBatchDim);
    if (!triplet_instance_ok(v, spec)) return -1.0;
    const LossResult res = triplet_loss(v, kTriples, spec);
    out = fd_batch_max_err(v, res.grad, [&](const Eigen::MatrixXd& x) {
      return triplet_loss(x, kTriples, spec).value;
    });
    return 0.0;
  });
}

namespace {

bool sa_instance_ok(const Eigen::MatrixXd& student, const Eigen::MatrixXd& teacher,
                    const DistillSpec& spec) {
  bool any_active = false;
  for (const TripletIdx& t : kTriples) {
    for (const Eigen::MatrixXd* side : {&student, &teacher}) {
      const double n1 = (side->row(t.positive) - side->row(t.anchor)).norm();
      const double n2 = (side->row(t.negative) - side->row(t.anchor)).norm();
      if (n1 < 0.3 || n2 < 0.3) return false;
    }
    const double phi_t = angle_cosine(teacher.row(t.positive).transpose(),
                                      teacher.row(t.anchor).transpose(),
                                      teacher.row(t.negative).transpose());
    const double phi_s = angle_cosine(student.row(t.positive).transpose(),
                                      student.row(t.anchor).transpose(),
                                      student.row(t.negative).transpose());
    const double r = phi_t - phi_s;
    if (std::abs(std::abs(r) - 1.0) < 1e-2) return false;     // huber kink
    const double hinged = huber(r) - spec.kappa;
    if (std::abs(hinged) < 1e-3) return false;                // hinge boundary
    if (hinged > 0.0) any_active = true;
  }
  return any_active;
}

}  // namespace

FdReport fd_check_sa(std::uint64_t seed, int instances, bool flip_sign) {
  const DistillSpec spec;
  return fd_sweep(seed, instances, "fd-sa", [&](Rng& g, double& out) -> double {
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    if (!sa_instance_ok(student, teacher, spec)) return -1.0;
    const LossResult res = sa_loss(student, teacher, kTriples, spec);
    const Eigen::MatrixXd analytic = flip_sign ? Eigen::MatrixXd(-res.grad) : res.grad;
    out = fd_batch_max_err(student, analytic, [&](const Eigen::MatrixXd& x) {
      return sa_loss(x, teacher, kTriples, spec).value;
    });
    return 0.0;
  });
}

namespace {

bool euclid_instance_ok(const Eigen::MatrixXd& student, const Eigen::MatrixXd& teacher) {
  for (const DistillPair& p : kPairs) {
    const double ds = (student.row(p.i) - student.row(p.j)).norm();
    const double dt = (teacher.row(p.i) - teacher.row(p.j)).norm();
    if (ds < 0.3) return false;
    const double r = dt - ds;
    if (std::abs(r) < 1e-3) return false;                 // keep the signal strong
    if (std::abs(std::abs(r) - 1.0) < 1e-2) return false;  // huber kink
  }
  return true;
}

}  // namespace

FdReport fd_check_euclid(std::uint64_t seed, int instances) {
  const DistillSpec spec;
  return fd_sweep(seed, instances, "fd-euclid", [&](Rng& g, double& out) -> double {
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    if (!euclid_instance_ok(student, teacher)) return -1.0;
    const LossResult res = euclid_distill(student, teacher, kPairs, spec);
    out = fd_batch_max_err(student, res.grad, [&](const Eigen::MatrixXd& x) {
      return euclid_distill(x, teacher, kPairs, spec).value;
    });
    return 0.0;
  });
}

FdReport fd_check_point(std::uint64_t seed, int instances) {
  return fd_sweep(seed, instances, "fd-point", [&](Rng& g, double& out) -> double {
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    const LossResult res = point_distill(student, teacher);
    out = fd_batch_max_err(student, res.grad, [&](const Eigen::MatrixXd& x) {
      return point_distill(x, teacher).value;
    });
    return 0.0;
  });
}

namespace {

/// Re-runs the per-point network by hand to look at pre-activation values and
/// pooling gaps (the cached forward state only stores rectified values).
bool encoder_instance_ok(const EncoderParams& p, const std::vector<PointCloud>& clouds) {
  for (const PointCloud& cloud : clouds) {
    Eigen::MatrixXd act = cloud;
    for (std::size_t l = 0; l < p.config.hidden_dims.size(); ++l) {
      const Eigen::MatrixXd z =
          (act * p.weights[l].transpose()).rowwise() + p.biases[l].transpose();
      if (z.array().abs().minCoeff() < 1e-3) return false;  // rectifier kink
      act = z.cwiseMax(0.0);
    }
    for (Eigen::Index ch = 0; ch < act.cols(); ++ch) {
      double top = -std::numeric_limits<double>::infinity();
      double second = top;
      for (Eigen::Index r = 0; r < act.rows(); ++r) {
        const double v = act(r, ch);
        if (v > top) {
          second = top;
          top = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (top - second < 1e-3) return false;  // pooling tie
    }
  }
  return true;
}

}  // namespace

FdReport fd_check_encoder(std::uint64_t seed, int instances) {
  EncoderConfig config;
  config.in_dim = 3;
  config.hidden_dims = {6, 5};
  config.descriptor_dim = 4;
  return fd_sweep(seed, instances, "fd-encoder", [&](Rng& g, double& out) -> double {
    config.seed = derive_seed(seed, "fd-encoder-init", g());
    EncoderParams params = init_params(config);
    Eigen::VectorXd flat = params.flatten();
    for (Eigen::Index k = 0; k < flat.size(); ++k) flat[k] += uniform_real(g, -0.05, 0.05);
    params = EncoderParams::unflatten(config, flat);

    std::vector<PointCloud> clouds;
    for (int c = 0; c < 3; ++c) {
      PointCloud cloud(12, 3);
      for (Eigen::Index r = 0; r < cloud.rows(); ++r) {
        for (Eigen::Index col = 0; col < 3; ++col) cloud(r, col) = uniform_real(g, -1.0, 1.0);
      }
      clouds.push_back(std::move(cloud));
    }
    if (!encoder_instance_ok(params, clouds)) return -1.0;

    const Eigen::MatrixXd target =
        random_batch(g, static_cast<int>(clouds.size()), config.descriptor_dim);
    ForwardTrace trace;
    const DescriptorBatch desc = forward_traced(params, clouds, trace);
    const Eigen::MatrixXd upstream = desc.descriptors - target;
    const Eigen::VectorXd analytic = backward(params, clouds, trace, upstream).flatten();

    const auto loss_at = [&](const Eigen::VectorXd& theta) {
      const EncoderParams p = EncoderParams::unflatten(config, theta);
      return 0.5 * (forward(p, clouds).descriptors - target).squaredNorm();
    };
    double worst = 0.0;
    Eigen::VectorXd theta = flat;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      const double keep = theta[k];
      theta[k] = keep + kFdStep;
      const double up = loss_at(theta);
      theta[k] = keep - kFdStep;
      const double dn = loss_at(theta);
      theta[k] = keep;
      worst = std::max(worst, rel_err(analytic[k], (up - dn) / (2.0 * kFdStep)));
    }
    out = worst;
    return 0.0;
  });
}

// ---------------------------------------------------------------------------
// Invariance and sensitivity probes.

double sa_invariance_max_dev(std::uint64_t seed, int batches) {
  const DistillSpec spec;
  double worst = 0.0;
  for (int b = 0; b < batches; ++b) {
    Rng g = make_rng(derive_seed(seed, "sa-invariance", static_cast<std::uint64_t>(b)));
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    const double base = sa_loss(student, teacher, kTriples, spec).value;

    const Eigen::MatrixXd rot = random_orthogonal(g, kBatchDim);
    Eigen::RowVectorXd shift(kBatchDim);
    for (Eigen::Index c = 0; c < shift.size(); ++c) shift[c] = uniform_real(g, -5.0, 5.0);
    const double scale = std::exp(uniform_real(g, -1.0, 1.0));

    const Eigen::MatrixXd moved =
        ((scale * (student * rot.transpose())).rowwise() + shift).eval();
    const double transformed = sa_loss(moved, teacher, kTriples, spec).value;
    worst = std::max(worst, std::abs(transformed - base));
  }
  return worst;
}

double euclid_scale_min_change(std::uint64_t seed, int batches) {
  const DistillSpec spec;
  double least = std::numeric_limits<double>::infinity();
  for (int b = 0; b < batches; ++b) {
    Rng g = make_rng(derive_seed(seed, "euclid-scale", static_cast<std::uint64_t>(b)));
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    const double base = euclid_distill(student, teacher, kPairs, spec).value;
    const double up =
        euclid_distill((1.5 * student).eval(), teacher, kPairs, spec).value;
    const double down =
        euclid_distill((0.5 * student).eval(), teacher, kPairs, spec).value;
    least = std::min(least, std::max(std::abs(up - base), std::abs(down - base)));
  }
  return least;
}

double point_translation_min_change(std::uint64_t seed, int batches) {
  double least = std::numeric_limits<double>::infinity();
  for (int b = 0; b < batches; ++b) {
    Rng g = make_rng(derive_seed(seed, "point-shift", static_cast<std::uint64_t>(b)));
    const Eigen::MatrixXd student = random_batch(g, kBatchRows, kBatchDim);
    const Eigen::MatrixXd teacher = random_batch(g, kBatchRows, kBatchDim);
    Eigen::RowVectorXd t(kBatchDim);
    for (Eigen::Index c = 0; c < t.size(); ++c) t[c] = normal(g);
    t /= t.norm();
    const double base = point_distill(student, teacher).value;
    const double plus = point_distill((student.rowwise() + t).eval(), teacher).value;
    const double minus = point_distill((student.rowwise() - t).eval(), teacher).value;
    least = std::min(least, std::max(std::abs(plus - base), std::abs(minus - base)));
  }
  return least;
}

// ---------------------------------------------------------------------------
// Relaxation schedule facts.

CheckResult relaxation_schedule_check() {
  CheckResult res{"relaxation-schedule", true, ""};
  std::ostringstream detail;
  for (int total : {1, 4, 60, 997}) {
    const ScheduleSpec sched{total};
    const double tau = static_cast<double>(total);
    const double half = relaxation_omega(tau / 2.0, sched);
    const double at_zero = relaxation_omega(0.0, sched);
    const double at_tau = relaxation_omega(tau, sched);
    if (std::abs(half - 0.5) > 1e-12) {
      res.pass = false;
      detail << "half-way value off at tau=" << total << "; ";
    }
    if (std::abs(at_zero - 0.9933071490757153) > 1e-6 ||
        std::abs(at_tau - 0.006692850924284856) > 1e-6) {
      res.pass = false;
      detail << "endpoint value off at tau=" << total << "; ";
    }
    double prev = at_zero;
    for (int i = 1; i <= 100; ++i) {
      const double gamma = tau * i / 100.0;
      const double w = relaxation_omega(gamma, sched);
      if (!(w < prev)) {
        res.pass = false;
        detail << "not strictly decreasing at tau=" << total << "; ";
        break;
      }
      prev = w;
    }
    for (int i = 0; i <= 100; ++i) {
      const double gamma = tau * i / 100.0;
      if (std::abs(relaxation_omega(gamma, sched) + relaxation_omega(tau - gamma, sched) -
                   1.0) > 1e-12) {
        res.pass = false;
        detail << "symmetry broken at tau=" << total << "; ";
        break;
      }
    }
  }
  res.detail = res.pass ? "half-way, endpoints, monotonicity and symmetry hold" : detail.str();
  return res;
}

// ---------------------------------------------------------------------------
// Retrieval-metric oracles: independent re-implementations compared exactly.

namespace {

double oracle_mean_recall_1(const RecallMatrix& m) {
  double sum = 0.0;
  for (double v : m.rows.back()) sum += v;
  return sum / static_cast<double>(m.rows.back().size());
}

std::optional<double> oracle_forgetting(const RecallMatrix& m) {
  const int domains = static_cast<int>(m.rows.back().size());
  double sum = 0.0;
  int counted = 0;
  for (int j = 0; j < domains; ++j) {
    std::vector<double> evals;
    for (const std::vector<double>& row : m.rows) {
      if (static_cast<int>(row.size()) > j) evals.push_back(row[j]);
    }
    if (evals.size() < 2) continue;
    const double peak = *std::max_element(evals.begin(), evals.end());
    sum += peak - evals.back();
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return sum / static_cast<double>(counted);
}

struct OracleRecall {
  std::map<int, double> by_n;
  int excluded = 0;
};

/// Full-sort reference retriever; ties go to the lower database index via
/// the (distance, index) pair ordering.
OracleRecall oracle_recall(const Eigen::MatrixXd& qd, const Eigen::MatrixXd& dd,
                           const std::vector<GeoLocation>& ql,
                           const std::vector<GeoLocation>& dl, double pos_test,
                           const std::vector<int>& ns) {
  OracleRecall out;
  std::map<int, int> hits;
  for (int n : ns) hits[n] = 0;
  int evaluated = 0;
  for (Eigen::Index q = 0; q < qd.rows(); ++q) {
    bool reachable = false;
    for (const GeoLocation& l : dl) {
      if ((l - ql[q]).norm() < pos_test) {
        reachable = true;
        break;
      }
    }
    if (!reachable) {
      ++out.excluded;
      continue;
    }
    ++evaluated;
    std::vector<std::pair<double, int>> order;
    for (Eigen::Index j = 0; j < dd.rows(); ++j) {
      order.emplace_back((qd.row(q) - dd.row(j)).squaredNorm(), static_cast<int>(j));
    }
    std::sort(order.begin(), order.end());
    int first_hit = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if ((dl[order[r].second] - ql[q]).norm() < pos_test) {
        first_hit = static_cast<int>(r) + 1;
        break;
      }
    }
    for (int n : ns) {
      if (first_hit >= 1 && first_hit <= n) ++hits[n];
    }
  }
  for (int n : ns) {
    out.by_n[n] = evaluated == 0 ? 0.0 : 100.0 * hits[n] / evaluated;
  }
  return out;
}

}  // namespace

CheckResult metric_oracle_check(std::uint64_t seed) {
  CheckResult res{"metric-oracles", true, ""};
  std::ostringstream detail;
  const std::vector<std::string> names{"d0", "d1", "d2"};
  const double levels[] = {0.0, 50.0, 100.0};

  // Every lower-triangular 3-step table over {0, 50, 100}.
  int tables = 0;
  for (double a : levels) {
    for (double b : levels) {
      for (double c : levels) {
        for (double d : levels) {
          for (double e : levels) {
            for (double f : levels) {
              RecallMatrix m{names, {{a}, {b, c}, {d, e, f}}};
              ++tables;
              if (mean_recall_at_1(m) != oracle_mean_recall_1(m)) {
                res.pass = false;
                detail << "mean recall mismatch on exhaustive table; ";
              }
              if (forgetting(m) != *oracle_forgetting(m)) {
                res.pass = false;
                detail << "forgetting mismatch on exhaustive table; ";
              }
            }
          }
        }
      }
    }
  }
  // Single-step tables: forgetting undefined on both sides.
  for (double a : levels) {
    RecallMatrix m{{"d0"}, {{a}}};
    if (oracle_forgetting(m).has_value()) {
      res.pass = false;
      detail << "oracle defined forgetting for one step; ";
    }
    try {
      forgetting(m);
      res.pass = false;
      detail << "forgetting defined for a single step; ";
    } catch (const UndefinedForSingleStep&) {
    }
  }

  // Fixed hand-computed table.
  {
    const RecallMatrix gold{names, {{90.0}, {80.0, 85.0}, {70.0, 75.0, 88.0}}};
    if (std::abs(mean_recall_at_1(gold) - 77.66666666666667) > 1e-9 ||
        std::abs(forgetting(gold) - 15.0) > 1e-12) {
      res.pass = false;
      detail << "hand-computed table mismatch; ";
    }
  }

  // Random small retrieval problems against the full-sort reference.
  // Descriptors on a 0.5 grid and locations on a 10 m grid keep every
  // distance exact, so ties are real and comparisons can demand equality.
  const std::vector<int> ns{1, 2, 3, 5};
  for (int k = 0; k < 200; ++k) {
    Rng g = make_rng(derive_seed(seed, "metric-oracle", static_cast<std::uint64_t>(k)));
    const int nq = static_cast<int>(uniform_int(g, 1, 20));
    const int ndb = static_cast<int>(uniform_int(g, 1, 30));
    const int dim = static_cast<int>(uniform_int(g, 2, 5));
    Eigen::MatrixXd qd(nq, dim), dd(ndb, dim);
    for (Eigen::Index r = 0; r < qd.rows(); ++r) {
      for (Eigen::Index c = 0; c < dim; ++c) qd(r, c) = 0.5 * uniform_int(g, -2, 2);
    }
    for (Eigen::Index r = 0; r < dd.rows(); ++r) {
      for (Eigen::Index c = 0; c < dim; ++c) dd(r, c) = 0.5 * uniform_int(g, -2, 2);
    }
    std::vector<GeoLocation> ql(nq), dl(ndb);
    for (GeoLocation& l : ql) l = GeoLocation(10.0 * uniform_int(g, 0, 5), 10.0 * uniform_int(g, 0, 5));
    for (GeoLocation& l : dl) l = GeoLocation(10.0 * uniform_int(g, 0, 5), 10.0 * uniform_int(g, 0, 5));
    const double pos_test = 20.0;

    const OracleRecall want = oracle_recall(qd, dd, ql, dl, pos_test, ns);
    int excluded = 0;
    const std::map<int, double> got = recall_curve(qd, dd, ql, dl, pos_test, ns, &excluded);
    if (got != want.by_n || excluded != want.excluded) {
      res.pass = false;
      detail << "retrieval mismatch on random problem " << k << "; ";
    }
    int excluded1 = 0;
    const double got1 = recall_at_n(qd, dd, ql, dl, pos_test, 1, &excluded1);
    if (got1 != want.by_n.at(1) || excluded1 != want.excluded) {
      res.pass = false;
      detail << "recall@1 mismatch on random problem " << k << "; ";
    }
  }

  if (res.pass) {
    std::ostringstream ok;
    ok << tables << " exhaustive tables, hand-computed table and 200 random retrieval "
       << "problems agree exactly";
    res.detail = ok.str();
  } else {
    res.detail = detail.str();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Replay-store invariants.

CheckResult memory_invariant_check(std::uint64_t seed) {
  CheckResult res{"memory-invariants", true, ""};
  std::ostringstream detail;

  std::vector<DomainDataset> domains;
  const ThresholdSpec thresholds;
  for (int d = 0; d < 6; ++d) {
    SyntheticDomainSpec spec;
    spec.seed = derive_seed(seed, "memory-domain", static_cast<std::uint64_t>(d));
    spec.num_places = 8;
    spec.landmarks_per_place = 4;
    spec.revisit_count = 2;
    spec.points_per_cloud = 8;
    domains.push_back(generate_domain(spec, "m" + std::to_string(d), thresholds, d));
  }

  const int capacity = 16;
  MemoryBank bank(capacity, derive_seed(seed, "memory-bank"));
  for (int t = 0; t < 6; ++t) {
    bank.update(domains[t]);

    if (2 * bank.size() > capacity) {
      res.pass = false;
      detail << "capacity exceeded after update " << t + 1 << "; ";
    }
    // Exact quota split: pairs divided over the domains seen so far, with the
    // earliest domains absorbing the remainder.
    const int pairs = capacity / 2;
    const int present = t + 1;
    const std::map<int, int> counts = bank.per_domain_counts();
    int total = 0;
    for (int d = 0; d < present; ++d) {
      const int want = pairs / present + (d < pairs % present ? 1 : 0);
      const auto it = counts.find(d);
      const int have = it == counts.end() ? 0 : it->second;
      total += have;
      if (have != want) {
        res.pass = false;
        detail << "domain " << d << " holds " << have << " pairs, expected " << want
               << " after update " << t + 1 << "; ";
      }
    }
    if (total != bank.size()) {
      res.pass = false;
      detail << "per-domain counts disagree with size after update " << t + 1 << "; ";
    }
    int lo = std::numeric_limits<int>::max(), hi = 0;
    for (const auto& [d, n] : counts) {
      (void)d;
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    if (!counts.empty() && hi - lo > 1) {
      res.pass = false;
      detail << "per-domain imbalance " << hi - lo << " after update " << t + 1 << "; ";
    }

    // Brute pair validity against the source datasets.
    std::set<std::pair<int, std::int64_t>> used;
    for (const MemoryEntry& e : bank.entries()) {
      if (e.domain_id < 0 || e.domain_id > t) {
        res.pass = false;
        detail << "entry from unseen domain " << e.domain_id << "; ";
        continue;
      }
      const DomainDataset& src = domains[e.domain_id];
      const auto find = [&](const Sample& s) -> const Sample* {
        for (const Sample& cand : src.train) {
          if (cand.sample_id == s.sample_id) return &cand;
        }
        return nullptr;
      };
      const Sample* a = find(e.anchor);
      const Sample* p = find(e.positive);
      if (a == nullptr || p == nullptr) {
        res.pass = false;
        detail << "entry cloud missing from its source train split; ";
        continue;
      }
      if (a->cloud != e.anchor.cloud || p->cloud != e.positive.cloud) {
        res.pass = false;
        detail << "stored cloud differs from the source sample; ";
      }
      if (e.anchor.sample_id == e.positive.sample_id) {
        res.pass = false;
        detail << "pair stores the same cloud twice; ";
      }
      if (!((a->location - p->location).norm() < thresholds.pos_train)) {
        res.pass = false;
        detail << "pair is not a positive pair; ";
      }
      if (!used.insert({e.domain_id, e.anchor.sample_id}).second ||
          !used.insert({e.domain_id, e.positive.sample_id}).second) {
        res.pass = false;
        detail << "cloud stored twice across pairs after update " << t + 1 << "; ";
      }
    }
  }

  res.detail = res.pass
                   ? "capacity, quota split, pair validity and uniqueness hold over 6 updates"
                   : detail.str();
  return res;
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options) {
  std::vector<CheckResult> out;

  const auto sci = [](double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << v;
    return os.str();
  };
  const auto add_fd = [&](const char* name, const FdReport& r) {
    std::ostringstream os;
    os << r.instances << " instances, max rel err " << sci(r.max_rel_err) << ", "
       << std::fixed << std::setprecision(2) << r.seconds << "s";
    out.push_back({name, r.max_rel_err < 1e-6, os.str()});
  };

  add_fd("triplet-gradient-fd", fd_check_triplet(options.seed, options.fd_instances));
  add_fd("sa-gradient-fd",
         fd_check_sa(options.seed, options.fd_instances, options.flip_sa_gradient_sign));
  add_fd("euclid-gradient-fd", fd_check_euclid(options.seed, options.fd_instances));
  add_fd("point-gradient-fd", fd_check_point(options.seed, options.fd_instances));
  add_fd("encoder-gradient-fd", fd_check_encoder(options.seed, options.fd_instances));

  {
    const double dev = sa_invariance_max_dev(options.seed, options.invariance_batches);
    out.push_back({"sa-invariance", dev < 1e-9,
                   "max |value change| " + sci(dev) + " under rotation+translation+scale over " +
                       std::to_string(options.invariance_batches) + " batches"});
  }
  {
    const double ch = euclid_scale_min_change(options.seed, options.invariance_batches);
    out.push_back({"euclid-scale-sensitivity", ch > 1e-6,
                   "min |value change| " + sci(ch) + " under scaling by 1.5/0.5"});
  }
  {
    const double ch = point_translation_min_change(options.seed, options.invariance_batches);
    out.push_back({"point-translation-sensitivity", ch > 1e-6,
                   "min |value change| " + sci(ch) + " under unit translation"});
  }

  out.push_back(relaxation_schedule_check());
  out.push_back(metric_oracle_check(options.seed));
  out.push_back(memory_invariant_check(options.seed));
  return out;
}

}  // namespace pcpr
