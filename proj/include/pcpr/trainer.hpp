#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcpr/data.hpp"
#include "pcpr/encoder.hpp"
#include "pcpr/eval.hpp"
#include "pcpr/losses.hpp"
#include "pcpr/memory.hpp"
#include "pcpr/types.hpp"

namespace pcpr {

/// Training regimes. FT fine-tunes with no replay and no distillation;
/// Joint trains once on everything (upper-bound reference); InCloudAngular
/// is the full method; the Abl* variants each remove or swap one piece.
enum class Method {
  FT,
  Joint,
  InCloudAngular,
  AblEuclid,
  AblPoint,
  AblNoMemory,
  AblNoRelax,
};

std::string method_name(Method m);
Method method_from_name(const std::string& name);

/// Which distillation objective the method trains with.
DistillKind method_distill_kind(Method m);
/// Whether the method keeps a replay memory between steps.
bool method_uses_memory(Method m);
/// Whether the distillation weight decays over epochs (vs staying at
/// lambda_init).
bool method_uses_relaxation(Method m);

struct TrainConfig {
  EncoderConfig encoder;
  int epochs = 60;  // per incremental step
  Scalar lr_initial = 1e-3;
  Scalar lr_after_half = 1e-4;
  Scalar weight_decay = 1e-3;
  int batch_anchors = 16;
  Method method = Method::InCloudAngular;
  TripletSpec triplet;
  DistillSpec distill;  // kind is derived from method; kappa/lambda_init used
  int memory_K = 32;    // clouds; 0 disables replay entirely
  bool reset_optimizer_per_step = true;
  std::uint64_t seed = 0;

  void validate() const;
  /// 0 when the method disables memory, else memory_K.
  int effective_memory_clouds() const;
  /// 0 for methods that never distill, else distill.lambda_init.
  Scalar effective_lambda_init() const;
};

/// Piecewise-constant schedule: lr_initial for the first half of a step's
/// epochs, lr_after_half from the midpoint on (0-based epoch index).
Scalar lr_for_epoch(int epoch, const TrainConfig& config);

/// ADAM moments over the flattened parameter vector.
struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t t = 0;

  static AdamState zeros(Eigen::Index n) {
    return AdamState{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0};
  }
};

/// One ADAM update with decoupled weight decay (params scaled by
/// 1 - lr*wd before the moment update; beta1=0.9, beta2=0.999, eps=1e-8,
/// bias-corrected). Throws NonFiniteGradient on non-finite gradients.
void adam_step(EncoderParams& params, const EncoderParams& grads, AdamState& opt, Scalar lr,
               const TrainConfig& config);

/// Index of the masked candidate closest to the anchor in descriptor space
/// (ties to the lowest index), or -1 when the mask admits nobody.
int mine_hard_negative(const Eigen::Ref<const Eigen::RowVectorXd>& anchor_desc,
                       const Eigen::Ref<const Eigen::MatrixXd>& batch_descs,
                       const std::vector<char>& valid_mask);

/// Mutable training state across one protocol run.
struct StepState {
  EncoderParams student;
  std::optional<TeacherSnapshot> teacher;  // absent during step 1
  std::optional<MemoryBank> memory;        // absent when replay is disabled
  AdamState opt;
  /// Negative radius per domain_id seen so far; replay anchors from domains
  /// outside the current step mask same-domain companions with it.
  std::map<int, Scalar> domain_neg_train;
};

/// Fresh state: initialized student, empty memory bank when the method and
/// memory_K enable replay, no teacher.
StepState make_initial_state(const TrainConfig& config);

struct EpochRecord {
  int step = 0;
  int epoch = 0;
  Scalar triplet = 0.0;   // mean over the epoch's contributing batches
  Scalar distill = 0.0;
  Scalar lambda = 0.0;
  Scalar lr = 0.0;
  int batches = 0;
  int dropped_anchors = 0;  // anchors with no valid in-batch negative
  int skipped_tuples = 0;   // degenerate-angle distillation skips
};

struct RunLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_seconds;
  std::optional<std::string> abort;  // set when training died mid-step

  void save_jsonl(const std::filesystem::path& path) const;
};

/// Trains one incremental step over the union of `step_domains` and the
/// replay memory. Steps >= 2 first freeze the current student as the
/// teacher. Each epoch minimizes triplet + lambda_gamma * distill with
/// in-batch hard-negative mining; afterwards every finished domain is folded
/// into the memory bank (when replay is enabled).
void train_step(StepState& state, const std::vector<const DomainDataset*>& step_domains,
                int step_index, const TrainConfig& config, RunLog& log);

enum class Protocol { TwoStep, FourStep };

std::string protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

struct ProtocolOptions {
  /// When set, per-step checkpoint dirs step_<k>/ are written here.
  std::filesystem::path checkpoint_dir;
  /// Dataset index path per domain_id, recorded into memory manifests.
  std::map<int, std::filesystem::path> source_by_domain;
  /// Config echo copied into each checkpoint dir (JSON text; may be empty).
  std::string config_echo;
  /// Resume: number of steps already completed under checkpoint_dir, and
  /// the recall rows those steps produced.
  int resume_completed_steps = 0;
  RecallMatrix resume_matrix;
  /// When set, the run log is flushed here before a training error
  /// propagates, so failed runs still leave their trace on disk.
  std::filesystem::path abort_log_path;
};

struct ProtocolResult {
  EncoderParams params;
  RecallMatrix matrix;
  RunLog log;
};

/// Sequential protocol driver: FourStep trains the domains one per step (any
/// count >= 2); TwoStep trains domain 1 alone and then all remaining domains
/// merged into one second step. After every step all seen domains are
/// evaluated into the recall matrix. Deterministic given config.seed.
ProtocolResult run_protocol(const std::vector<DomainDataset>& domains,
                            const TrainConfig& config, Protocol protocol,
                            const ProtocolOptions& opts = {});

/// Offline upper bound: one training phase over the concatenation of all
/// train splits; no teacher, no memory, no distillation. The recall matrix
/// has a single row covering every domain.
ProtocolResult joint_train(const std::vector<DomainDataset>& domains,
                           const TrainConfig& config, const ProtocolOptions& opts = {});

}  // namespace pcpr
