#include "pcpr/losses.hpp"

#include <cmath>
#include <string>

namespace pcpr {

namespace {

constexpr Scalar kDegenerateNorm = 1e-12;

void check_rows(const Eigen::Ref<const Eigen::MatrixXd>& descs, int row, const char* what) {
  if (row < 0 || row >= descs.rows()) {
    throw InvalidSpec(std::string(what) + " index " + std::to_string(row) +
                      " outside descriptor batch of " + std::to_string(descs.rows()));
  }
}

}  // namespace

LossResult triplet_loss(const Eigen::Ref<const Eigen::MatrixXd>& descriptors,
                        const std::vector<TripletIdx>& triples, const TripletSpec& spec) {
  spec.validate();
  if (triples.empty()) throw EmptyTupleSet("triplet_loss: no triples in batch");

  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(descriptors.rows(), descriptors.cols());
  const Scalar inv_count = 1.0 / static_cast<Scalar>(triples.size());
  for (const TripletIdx& t : triples) {
    check_rows(descriptors, t.anchor, "anchor");
    check_rows(descriptors, t.positive, "positive");
    check_rows(descriptors, t.negative, "negative");
    const Eigen::VectorXd dp = descriptors.row(t.anchor) - descriptors.row(t.positive);
    const Eigen::VectorXd dn = descriptors.row(t.anchor) - descriptors.row(t.negative);
    const Scalar d_pos = dp.norm();
    const Scalar d_neg = dn.norm();
    const Scalar raw = d_pos - d_neg + spec.margin;
    if (raw <= 0.0) continue;  // clamped (or exactly at the hinge): zero subgradient
    out.value += raw * inv_count;
    // d||x||/dx = x/||x||, defined as 0 for a zero-length difference.
    if (d_pos > 0.0) {
      const Eigen::VectorXd u = dp / d_pos * inv_count;
      out.grad.row(t.anchor) += u.transpose();
      out.grad.row(t.positive) -= u.transpose();
    }
    if (d_neg > 0.0) {
      const Eigen::VectorXd u = dn / d_neg * inv_count;
      out.grad.row(t.anchor) -= u.transpose();
      out.grad.row(t.negative) += u.transpose();
    }
  }
  return out;
}

LossResult triplet_loss(const Eigen::Ref<const Eigen::VectorXd>& v_a,
                        const Eigen::Ref<const Eigen::VectorXd>& v_p,
                        const Eigen::Ref<const Eigen::VectorXd>& v_n, const TripletSpec& spec) {
  Eigen::MatrixXd batch(3, v_a.size());
  batch.row(0) = v_a.transpose();
  batch.row(1) = v_p.transpose();
  batch.row(2) = v_n.transpose();
  return triplet_loss(batch, {TripletIdx{0, 1, 2}}, spec);
}

namespace {

struct AngleEval {
  Scalar phi;
  // d(phi)/d(v_i), d(phi)/d(v_j), d(phi)/d(v_k)
  Eigen::VectorXd gi, gj, gk;
};

/// phi and its gradients; throws DegenerateAngle below the norm floor.
AngleEval angle_eval(const Eigen::Ref<const Eigen::VectorXd>& v_i,
                     const Eigen::Ref<const Eigen::VectorXd>& v_j,
                     const Eigen::Ref<const Eigen::VectorXd>& v_k) {
  const Eigen::VectorXd e1 = v_i - v_j;
  const Eigen::VectorXd e2 = v_k - v_j;
  const Scalar n1 = e1.norm(), n2 = e2.norm();
  if (n1 < kDegenerateNorm || n2 < kDegenerateNorm) {
    throw DegenerateAngle("angle_cosine: coincident descriptors leave the vertex angle undefined");
  }
  AngleEval ev;
  const Eigen::VectorXd u = e1 / n1;
  const Eigen::VectorXd w = e2 / n2;
  ev.phi = u.dot(w);
  ev.gi = (w - ev.phi * u) / n1;
  ev.gk = (u - ev.phi * w) / n2;
  ev.gj = -(ev.gi + ev.gk);
  return ev;
}

}  // namespace

Scalar angle_cosine(const Eigen::Ref<const Eigen::VectorXd>& v_i,
                    const Eigen::Ref<const Eigen::VectorXd>& v_j,
                    const Eigen::Ref<const Eigen::VectorXd>& v_k) {
  return angle_eval(v_i, v_j, v_k).phi;
}

Scalar huber(Scalar x) {
  const Scalar a = std::abs(x);
  return a <= 1.0 ? 0.5 * x * x : a - 0.5;
}

Scalar huber_grad(Scalar x) {
  if (std::abs(x) <= 1.0) return x;
  return x > 0.0 ? 1.0 : -1.0;
}

LossResult sa_loss(const Eigen::Ref<const Eigen::MatrixXd>& student,
                   const Eigen::Ref<const Eigen::MatrixXd>& teacher,
                   const std::vector<TripletIdx>& tuples, const DistillSpec& spec) {
  spec.validate();
  if (tuples.empty()) throw EmptyTupleSet("sa_loss: no tuples in batch");
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw InvalidSpec("sa_loss: student and teacher batch shapes differ");
  }

  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(student.rows(), student.cols());
  Scalar sum = 0.0;
  int used = 0;
  // Accumulate per-tuple hinge grads unscaled; divide by the usable-tuple
  // count at the end (the count is only known after the skip pass).
  for (const TripletIdx& t : tuples) {
    check_rows(student, t.anchor, "anchor");
    check_rows(student, t.positive, "positive");
    check_rows(student, t.negative, "negative");
    AngleEval s, te;
    try {
      // The anchor is the vertex of the angle.
      te = angle_eval(teacher.row(t.positive), teacher.row(t.anchor), teacher.row(t.negative));
      s = angle_eval(student.row(t.positive), student.row(t.anchor), student.row(t.negative));
    } catch (const DegenerateAngle&) {
      ++out.skipped;
      continue;
    }
    ++used;
    const Scalar r = te.phi - s.phi;
    const Scalar hinged = huber(r) - spec.kappa;
    if (hinged <= 0.0) continue;
    sum += hinged;
    const Scalar dr = -huber_grad(r);  // d(huber(r))/d(phi_student)
    out.grad.row(t.positive) += dr * s.gi.transpose();
    out.grad.row(t.anchor) += dr * s.gj.transpose();
    out.grad.row(t.negative) += dr * s.gk.transpose();
  }
  if (used == 0) {
    throw EmptyTupleSet("sa_loss: every tuple was skipped as degenerate");
  }
  out.value = sum / used;
  out.grad /= static_cast<Scalar>(used);
  return out;
}

LossResult euclid_distill(const Eigen::Ref<const Eigen::MatrixXd>& student,
                          const Eigen::Ref<const Eigen::MatrixXd>& teacher,
                          const std::vector<DistillPair>& pairs, const DistillSpec& spec) {
  spec.validate();
  if (pairs.empty()) throw EmptyTupleSet("euclid_distill: no pairs in batch");
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw InvalidSpec("euclid_distill: student and teacher batch shapes differ");
  }

  LossResult out;
  out.grad = Eigen::MatrixXd::Zero(student.rows(), student.cols());
  const Scalar inv_count = 1.0 / static_cast<Scalar>(pairs.size());
  for (const DistillPair& p : pairs) {
    check_rows(student, p.i, "pair i");
    check_rows(student, p.j, "pair j");
    const Eigen::VectorXd ds = student.row(p.i) - student.row(p.j);
    const Scalar d_student = ds.norm();
    const Scalar d_teacher = (teacher.row(p.i) - teacher.row(p.j)).norm();
    const Scalar r = d_teacher - d_student;
    out.value += huber(r) * inv_count;
    if (d_student > 0.0) {
      const Eigen::VectorXd g = (-huber_grad(r) * inv_count / d_student) * ds;
      out.grad.row(p.i) += g.transpose();
      out.grad.row(p.j) -= g.transpose();
    }
  }
  return out;
}

LossResult point_distill(const Eigen::Ref<const Eigen::MatrixXd>& student,
                         const Eigen::Ref<const Eigen::MatrixXd>& teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw InvalidSpec("point_distill: student and teacher batch shapes differ");
  }
  if (student.rows() == 0) throw EmptyTupleSet("point_distill: empty batch");
  LossResult out;
  const Eigen::MatrixXd diff = student - teacher;
  const Scalar inv_count = 1.0 / static_cast<Scalar>(student.rows());
  out.value = diff.squaredNorm() * inv_count;
  out.grad = 2.0 * inv_count * diff;
  return out;
}

Scalar relaxation_omega(Scalar gamma, const ScheduleSpec& schedule) {
  schedule.validate();
  const Scalar tau = static_cast<Scalar>(schedule.total_epochs);
  return 1.0 / (1.0 + std::exp(10.0 * (gamma / tau - 0.5)));
}

Scalar relaxation_weight(Scalar gamma, const ScheduleSpec& schedule, const DistillSpec& spec) {
  spec.validate();
  return spec.lambda_init * relaxation_omega(gamma, schedule);
}

LossResult combined_loss(const LossResult& triplet, const LossResult& distill,
                         Scalar lambda_gamma) {
  if (lambda_gamma == 0.0) return triplet;
  if (triplet.grad.rows() != distill.grad.rows() ||
      triplet.grad.cols() != distill.grad.cols()) {
    throw InvalidSpec("combined_loss: gradient shapes differ");
  }
  LossResult out;
  out.value = triplet.value + lambda_gamma * distill.value;
  out.grad = triplet.grad + lambda_gamma * distill.grad;
  out.skipped = triplet.skipped + distill.skipped;
  return out;
}

}  // namespace pcpr
