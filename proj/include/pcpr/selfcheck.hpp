#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pcpr {

/// Outcome of one named internal consistency check.
struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Summary of one finite-difference gradient sweep.
struct FdReport {
  int instances = 0;
  double max_rel_err = 0.0;
  double seconds = 0.0;
};

/// Central-difference validation of the analytic gradients, over `instances`
/// randomly generated problem instances per objective. Instances are
/// re-sampled away from the non-smooth points (hinge boundaries, huber
/// kinks, zero-length differences, rectifier and pooling ties) so the
/// comparison is well posed. The reported error is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
FdReport fd_check_triplet(std::uint64_t seed, int instances);
/// flip_sign negates the analytic gradient before comparison — a deliberate
/// fault injection used to prove the harness can fail.
FdReport fd_check_sa(std::uint64_t seed, int instances, bool flip_sign = false);
FdReport fd_check_euclid(std::uint64_t seed, int instances);
FdReport fd_check_point(std::uint64_t seed, int instances);
FdReport fd_check_encoder(std::uint64_t seed, int instances);

/// Max |value change| of the angular distillation objective when the student
/// batch undergoes a random orthogonal map, translation and positive
/// scaling, over `batches` random batches. Should be ~1e-15.
double sa_invariance_max_dev(std::uint64_t seed, int batches);

/// Min over batches of the larger value change under student scaling by 1.5
/// or by 0.5. Pairwise-distance distillation is scale sensitive, so this is
/// far from zero.
double euclid_scale_min_change(std::uint64_t seed, int batches);

/// Min over batches of the larger value change when the student batch is
/// translated by +t or -t with ||t|| = 1. For the per-embedding objective
/// the two changes sum to 2 exactly, so this is bounded below by 1.
double point_translation_min_change(std::uint64_t seed, int batches);

/// Frozen relaxation-schedule facts: exact half-way value, endpoint values,
/// strict monotone decline and omega(g) + omega(tau - g) == 1.
CheckResult relaxation_schedule_check();

/// Compares the retrieval metrics against independent re-implementations:
/// every lower-triangular 3-step recall table over {0, 50, 100}, a fixed
/// hand-computed table, and 200 random small retrieval problems solved by a
/// full-sort reference retriever. All comparisons are exact.
CheckResult metric_oracle_check(std::uint64_t seed);

/// Runs a six-domain replay-store sequence at cloud capacity 16 and
/// brute-checks, after every update: capacity, per-domain balance within
/// one pair of the exact quota split, pair validity against the source
/// datasets, and cloud uniqueness.
CheckResult memory_invariant_check(std::uint64_t seed);

struct SelfcheckOptions {
  bool flip_sa_gradient_sign = false;
  std::uint64_t seed = 1729;
  int fd_instances = 50;
  int invariance_batches = 100;
};

/// Runs every named check and returns their results in a fixed order.
std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options = {});

}  // namespace pcpr
