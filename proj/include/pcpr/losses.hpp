#pragma once

#include <Eigen/Core>
#include <vector>

#include "pcpr/types.hpp"

namespace pcpr {

/// Margin of the triplet ranking objective.
struct TripletSpec {
  Scalar margin = 0.2;

  void validate() const {
    if (margin < 0.0) throw InvalidSpec("triplet spec: margin must be >= 0");
  }
};

enum class DistillKind { None, Angular, Euclidean, Point };

/// Distillation objective selector plus its two knobs: the angular hinge
/// margin kappa and the initial distillation weight fed to the relaxation
/// schedule. Neither has a canonical value; both are config-exposed.
struct DistillSpec {
  DistillKind kind = DistillKind::Angular;
  Scalar kappa = 0.01;
  Scalar lambda_init = 1.0;

  void validate() const {
    if (kappa < 0.0) throw InvalidSpec("distill spec: kappa must be >= 0");
    if (lambda_init < 0.0) throw InvalidSpec("distill spec: lambda_init must be >= 0");
  }
};

/// Scalar objective value with its gradient w.r.t. the student descriptor
/// batch (same shape). skipped counts tuples dropped for degenerate angles.
struct LossResult {
  Scalar value = 0.0;
  Eigen::MatrixXd grad;
  int skipped = 0;
};

/// Epoch horizon of the relaxation schedule.
struct ScheduleSpec {
  int total_epochs = 60;

  void validate() const {
    if (total_epochs < 1) throw InvalidSpec("schedule spec: total_epochs must be >= 1");
  }
};

/// One training triple of row indices into a descriptor batch.
struct TripletIdx {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

/// One index pair for pairwise-distance distillation.
struct DistillPair {
  int i = 0;
  int j = 0;
};

/// Hinged ranking loss over a batch of descriptor triples:
/// mean over triples of max{ ||v_a - v_p|| - ||v_a - v_n|| + margin, 0 }.
/// The hinge subgradient at the exact boundary is zero, and a zero-length
/// difference vector contributes a zero gradient for that distance term.
LossResult triplet_loss(const Eigen::Ref<const Eigen::MatrixXd>& descriptors,
                        const std::vector<TripletIdx>& triples, const TripletSpec& spec);

/// Single-triple convenience overload; grad rows are (anchor, positive,
/// negative).
LossResult triplet_loss(const Eigen::Ref<const Eigen::VectorXd>& v_a,
                        const Eigen::Ref<const Eigen::VectorXd>& v_p,
                        const Eigen::Ref<const Eigen::VectorXd>& v_n, const TripletSpec& spec);

/// Cosine of the vertex angle at v_j formed by (v_i, v_j, v_k):
/// <(v_i - v_j)/||.||, (v_k - v_j)/||.||>. Throws DegenerateAngle when either
/// difference norm is below 1e-12.
Scalar angle_cosine(const Eigen::Ref<const Eigen::VectorXd>& v_i,
                    const Eigen::Ref<const Eigen::VectorXd>& v_j,
                    const Eigen::Ref<const Eigen::VectorXd>& v_k);

/// 0.5 x^2 for |x| <= 1, |x| - 0.5 otherwise.
Scalar huber(Scalar x);
/// Derivative of huber: x inside the quadratic zone, sign(x) outside.
Scalar huber_grad(Scalar x);

/// Structure-aware angular distillation: mean over tuples of
/// max{ huber(phi_teacher - phi_student) - kappa, 0 }, where phi is the
/// vertex-angle cosine at the anchor of each (anchor, positive, negative)
/// triple. Teacher is a constant; gradient flows to student rows only.
/// Tuples degenerate on either side are skipped and counted. The value is
/// unchanged by any common rotation, translation, and positive scaling of
/// the student descriptors.
LossResult sa_loss(const Eigen::Ref<const Eigen::MatrixXd>& student,
                   const Eigen::Ref<const Eigen::MatrixXd>& teacher,
                   const std::vector<TripletIdx>& tuples, const DistillSpec& spec);

/// Pairwise-distance distillation baseline: mean over pairs of
/// huber(||v_i^T - v_j^T|| - ||v_i^S - v_j^S||). Invariant to rigid student
/// motions but not to scaling.
LossResult euclid_distill(const Eigen::Ref<const Eigen::MatrixXd>& student,
                          const Eigen::Ref<const Eigen::MatrixXd>& teacher,
                          const std::vector<DistillPair>& pairs, const DistillSpec& spec);

/// Per-embedding distillation baseline: mean over rows of ||v^S - v^T||^2.
/// Sensitive to any motion of the student embedding space.
LossResult point_distill(const Eigen::Ref<const Eigen::MatrixXd>& student,
                         const Eigen::Ref<const Eigen::MatrixXd>& teacher);

/// Sigmoid decay 1 / (1 + e^{10 (gamma/tau - 0.5)}); 0.5 exactly at the
/// half-way epoch, strictly decreasing, omega(g) + omega(tau - g) == 1.
Scalar relaxation_omega(Scalar gamma, const ScheduleSpec& schedule);

/// lambda^gamma = lambda_init * relaxation_omega(gamma).
Scalar relaxation_weight(Scalar gamma, const ScheduleSpec& schedule, const DistillSpec& spec);

/// total = triplet + lambda_gamma * distill, gradients combined the same
/// way. lambda_gamma == 0 returns the triplet result object unchanged, so
/// the distillation-free path is bit-identical to pure triplet training.
LossResult combined_loss(const LossResult& triplet, const LossResult& distill,
                         Scalar lambda_gamma);

}  // namespace pcpr
