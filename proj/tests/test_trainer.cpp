#include <doctest.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pcpr/data.hpp"
#include "pcpr/rng.hpp"
#include "pcpr/trainer.hpp"

using namespace pcpr;

namespace {

DomainDataset tiny_domain(std::uint64_t seed, const std::string& name, int domain_id) {
  SyntheticDomainSpec spec;
  spec.seed = seed;
  spec.num_places = 6;
  spec.area_side = 600.0;
  spec.landmarks_per_place = 3;
  spec.landmark_scale = 1.0;
  spec.noise_sigma = 0.02;
  spec.revisit_count = 2;
  spec.points_per_cloud = 12;
  return generate_domain(spec, name, ThresholdSpec{}, domain_id);
}

TrainConfig tiny_config(Method method, int epochs = 4) {
  TrainConfig cfg;
  cfg.encoder.hidden_dims = {4};
  cfg.encoder.descriptor_dim = 3;
  cfg.encoder.seed = 9;
  cfg.epochs = epochs;
  cfg.batch_anchors = 4;
  cfg.method = method;
  cfg.memory_K = 8;
  cfg.seed = 5;
  return cfg;
}

std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("pcpr-trainer-" + tag + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("method names, distillation kinds and feature flags") {
  for (Method m : {Method::FT, Method::Joint, Method::InCloudAngular, Method::AblEuclid,
                   Method::AblPoint, Method::AblNoMemory, Method::AblNoRelax}) {
    CHECK(method_from_name(method_name(m)) == m);
  }
  CHECK(method_name(Method::InCloudAngular) == "incloud");
  CHECK_THROWS_AS((void)method_from_name("sgd"), InvalidSpec);

  CHECK(method_distill_kind(Method::FT) == DistillKind::None);
  CHECK(method_distill_kind(Method::Joint) == DistillKind::None);
  CHECK(method_distill_kind(Method::InCloudAngular) == DistillKind::Angular);
  CHECK(method_distill_kind(Method::AblEuclid) == DistillKind::Euclidean);
  CHECK(method_distill_kind(Method::AblPoint) == DistillKind::Point);
  CHECK(method_distill_kind(Method::AblNoMemory) == DistillKind::Angular);
  CHECK(method_distill_kind(Method::AblNoRelax) == DistillKind::Angular);

  CHECK_FALSE(method_uses_memory(Method::FT));
  CHECK_FALSE(method_uses_memory(Method::Joint));
  CHECK_FALSE(method_uses_memory(Method::AblNoMemory));
  CHECK(method_uses_memory(Method::InCloudAngular));
  CHECK(method_uses_relaxation(Method::InCloudAngular));
  CHECK_FALSE(method_uses_relaxation(Method::AblNoRelax));
}

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_config(Method::FT);
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("batch_anchors") {
    cfg.batch_anchors = 1;
    CHECK_THROWS_AS(cfg.validate(), InvalidSpec);
  }
  SUBCASE("odd memory") {
    cfg.memory_K = 7;
    CHECK_THROWS_AS(cfg.validate(), InvalidSpec);
  }
  SUBCASE("epochs") {
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidSpec);
  }
  SUBCASE("learning rates") {
    cfg.lr_after_half = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidSpec);
  }
}

TEST_CASE("learning rate halves the epoch range, 0-based") {
  TrainConfig cfg = tiny_config(Method::FT);
  cfg.epochs = 60;
  CHECK(lr_for_epoch(0, cfg) == cfg.lr_initial);
  CHECK(lr_for_epoch(29, cfg) == cfg.lr_initial);
  CHECK(lr_for_epoch(30, cfg) == cfg.lr_after_half);
  CHECK(lr_for_epoch(59, cfg) == cfg.lr_after_half);
  cfg.epochs = 1;  // a single epoch stays on the initial rate
  CHECK(lr_for_epoch(0, cfg) == cfg.lr_initial);
  cfg.epochs = 3;
  CHECK(lr_for_epoch(1, cfg) == cfg.lr_initial);  // 1 < 1.5
  CHECK(lr_for_epoch(2, cfg) == cfg.lr_after_half);
}

TEST_CASE("adam first step moves each coordinate by about -lr") {
  TrainConfig cfg = tiny_config(Method::FT);
  cfg.weight_decay = 0.0;
  EncoderParams p = init_params(cfg.encoder);
  const Eigen::VectorXd before = p.flatten();
  EncoderParams g = EncoderParams::zeros_like(p);
  for (auto& w : g.weights) w.setConstant(0.5);
  for (auto& b : g.biases) b.setConstant(-0.25);
  AdamState opt = AdamState::zeros(p.param_count());

  adam_step(p, g, opt, 1e-3, cfg);
  const Eigen::VectorXd delta = p.flatten() - before;
  const Eigen::VectorXd gf = g.flatten();
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    // Bias-corrected first step: lr * g/(|g| + eps) = lr * sign(g), near enough.
    CHECK(delta(i) == doctest::Approx(-1e-3 * (gf(i) > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }
  CHECK(opt.t == 1);
}

TEST_CASE("adam edge behavior: decay without gradient, strict finiteness") {
  TrainConfig cfg = tiny_config(Method::FT);
  cfg.weight_decay = 1e-2;
  EncoderParams p = init_params(cfg.encoder);
  const Eigen::VectorXd before = p.flatten();
  const EncoderParams zero_g = EncoderParams::zeros_like(p);
  AdamState opt = AdamState::zeros(p.param_count());

  adam_step(p, zero_g, opt, 1e-3, cfg);
  CHECK(p.flatten() == before * (1.0 - 1e-3 * 1e-2));  // pure decoupled decay

  cfg.weight_decay = 0.0;
  EncoderParams q = EncoderParams::unflatten(p.config, before);
  AdamState opt2 = AdamState::zeros(q.param_count());
  adam_step(q, zero_g, opt2, 1e-3, cfg);
  CHECK(q.flatten() == before);  // no decay, no gradient: a no-op

  EncoderParams bad_g = EncoderParams::zeros_like(p);
  bad_g.weights[0](0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_step(p, bad_g, opt, 1e-3, cfg), NonFiniteGradient);

  AdamState mismatched = AdamState::zeros(3);
  CHECK_THROWS_AS(adam_step(p, zero_g, mismatched, 1e-3, cfg), InvalidSpec);
}

TEST_CASE("hard negative mining picks the nearest unmasked row") {
  Eigen::MatrixXd batch(4, 2);
  batch << 0, 0, 1, 0, 0.5, 0, 0.5, 0;
  Eigen::RowVectorXd anchor(2);
  anchor << 0, 0;

  CHECK(mine_hard_negative(anchor, batch, {0, 1, 1, 1}) == 2);  // 0.5 beats 1.0
  CHECK(mine_hard_negative(anchor, batch, {0, 1, 0, 1}) == 3);
  CHECK(mine_hard_negative(anchor, batch, {1, 1, 1, 1}) == 0);  // distance 0 to itself
  CHECK(mine_hard_negative(anchor, batch, {0, 0, 1, 1}) == 2);  // tie -> lowest index
  CHECK(mine_hard_negative(anchor, batch, {0, 0, 0, 0}) == -1);
  CHECK_THROWS_AS((void)mine_hard_negative(anchor, batch, {0, 0}), InvalidSpec);
}

TEST_CASE("initial state wiring follows the method") {
  TrainConfig cfg = tiny_config(Method::InCloudAngular);
  StepState st = make_initial_state(cfg);
  CHECK(st.student.same_values(init_params(cfg.encoder)));
  CHECK_FALSE(st.teacher.has_value());
  REQUIRE(st.memory.has_value());
  CHECK(st.memory->capacity_clouds() == 8);
  CHECK(st.opt.m.size() == st.student.param_count());

  CHECK_FALSE(make_initial_state(tiny_config(Method::FT)).memory.has_value());
  CHECK_FALSE(make_initial_state(tiny_config(Method::AblNoMemory)).memory.has_value());
  TrainConfig zero_k = tiny_config(Method::InCloudAngular);
  zero_k.memory_K = 0;
  CHECK_FALSE(make_initial_state(zero_k).memory.has_value());
}

TEST_CASE("incremental steps snapshot the teacher and fold memory") {
  const DomainDataset d0 = tiny_domain(31, "first", 0);
  const DomainDataset d1 = tiny_domain(32, "second", 1);
  TrainConfig cfg = tiny_config(Method::InCloudAngular);

  StepState st = make_initial_state(cfg);
  RunLog log;
  train_step(st, {&d0}, 1, cfg, log);
  CHECK_FALSE(st.teacher.has_value());  // step 1 has nothing to distill from
  REQUIRE(st.memory.has_value());
  CHECK(st.memory->per_domain_counts() == std::map<int, int>{{0, 4}});
  const EncoderParams after1 = st.student;

  train_step(st, {&d1}, 2, cfg, log);
  REQUIRE(st.teacher.has_value());
  CHECK(st.teacher->params().same_values(after1));  // frozen end-of-step-1 weights
  CHECK(st.memory->per_domain_counts() == std::map<int, int>{{0, 2}, {1, 2}});
  CHECK_FALSE(st.student.same_values(after1));

  // Step-1 epochs never distill; step-2 lambda follows the relaxation curve.
  REQUIRE(log.epochs.size() == 8);
  for (int e = 0; e < 4; ++e) {
    CHECK(log.epochs[e].lambda == 0.0);
    CHECK(log.epochs[e].distill == 0.0);
  }
  CHECK(log.epochs[4].lambda == doctest::Approx(0.9933071490757153).epsilon(1e-12));
  for (int e = 5; e < 8; ++e) CHECK(log.epochs[e].lambda < log.epochs[e - 1].lambda);
}

TEST_CASE("constant-lambda ablation pins the distillation weight") {
  const DomainDataset d0 = tiny_domain(33, "first", 0);
  const DomainDataset d1 = tiny_domain(34, "second", 1);
  TrainConfig cfg = tiny_config(Method::AblNoRelax);
  cfg.distill.lambda_init = 0.75;

  const ProtocolResult res = run_protocol({d0, d1}, cfg, Protocol::FourStep);
  for (const EpochRecord& r : res.log.epochs) {
    CHECK(r.lambda == (r.step == 1 ? 0.0 : 0.75));
  }
}

TEST_CASE("fine-tuning equals the method with distillation and memory disabled") {
  const DomainDataset d0 = tiny_domain(35, "first", 0);
  const DomainDataset d1 = tiny_domain(36, "second", 1);

  const ProtocolResult ft = run_protocol({d0, d1}, tiny_config(Method::FT), Protocol::FourStep);
  TrainConfig degenerate = tiny_config(Method::InCloudAngular);
  degenerate.distill.lambda_init = 0.0;
  degenerate.memory_K = 0;
  const ProtocolResult eq = run_protocol({d0, d1}, degenerate, Protocol::FourStep);

  CHECK(ft.params.same_values(eq.params));  // bit-identical trajectories
  REQUIRE(ft.matrix.rows.size() == eq.matrix.rows.size());
  for (std::size_t i = 0; i < ft.matrix.rows.size(); ++i) {
    CHECK(ft.matrix.rows[i] == eq.matrix.rows[i]);
  }
  for (const EpochRecord& r : ft.log.epochs) {
    CHECK(r.lambda == 0.0);
    CHECK(r.distill == 0.0);
  }
}

TEST_CASE("joint training on one domain is exactly one training step") {
  const DomainDataset d0 = tiny_domain(37, "only", 0);
  TrainConfig cfg = tiny_config(Method::Joint);

  const ProtocolResult joint = joint_train({d0}, cfg);
  REQUIRE(joint.matrix.rows.size() == 1);
  REQUIRE(joint.matrix.rows[0].size() == 1);

  StepState st = make_initial_state(cfg);
  RunLog log;
  train_step(st, {&d0}, 1, cfg, log);
  CHECK(joint.params.same_values(st.student));
  for (const EpochRecord& r : joint.log.epochs) CHECK(r.distill == 0.0);
}

TEST_CASE("protocol plans: one domain per step vs merged second step") {
  std::vector<DomainDataset> doms;
  for (int i = 0; i < 4; ++i) {
    doms.push_back(tiny_domain(40 + static_cast<std::uint64_t>(i),
                               "dom" + std::to_string(i), i));
  }
  TrainConfig cfg = tiny_config(Method::InCloudAngular, 2);

  const ProtocolResult four = run_protocol(doms, cfg, Protocol::FourStep);
  REQUIRE(four.matrix.rows.size() == 4);
  int evals = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(four.matrix.rows[i].size() == i + 1);  // lower triangle
    evals += static_cast<int>(four.matrix.rows[i].size());
  }
  CHECK(evals == 10);

  const ProtocolResult two = run_protocol(doms, cfg, Protocol::TwoStep);
  REQUIRE(two.matrix.rows.size() == 2);
  CHECK(two.matrix.rows[0].size() == 1);
  CHECK(two.matrix.rows[1].size() == 4);

  CHECK_THROWS_AS((void)run_protocol({doms[0]}, cfg, Protocol::FourStep),
                  InsufficientDomains);

  std::vector<DomainDataset> clashing{doms[0], doms[1]};
  for (Sample& s : clashing[1].train) s.domain_id = 0;
  CHECK_THROWS_AS((void)run_protocol(clashing, cfg, Protocol::FourStep), InvalidSpec);
}

TEST_CASE("protocol runs are deterministic in the seed") {
  const DomainDataset d0 = tiny_domain(51, "first", 0);
  const DomainDataset d1 = tiny_domain(52, "second", 1);
  const TrainConfig cfg = tiny_config(Method::InCloudAngular);
  const ProtocolResult a = run_protocol({d0, d1}, cfg, Protocol::FourStep);
  const ProtocolResult b = run_protocol({d0, d1}, cfg, Protocol::FourStep);
  CHECK(a.params.same_values(b.params));
  CHECK(a.matrix.rows == b.matrix.rows);
}

TEST_CASE("checkpointed runs resume bit-exactly") {
  const auto dir = temp_dir("resume");
  const DomainDataset d0 = tiny_domain(53, "first", 0);
  const DomainDataset d1 = tiny_domain(54, "second", 1);
  save_dataset(d0, dir / "first");
  save_dataset(d1, dir / "second");

  TrainConfig cfg = tiny_config(Method::InCloudAngular, 3);
  cfg.reset_optimizer_per_step = false;  // exercises the optimizer round trip
  ProtocolOptions opts;
  opts.checkpoint_dir = dir / "ckpt";
  opts.source_by_domain = {{0, dir / "first" / "index.csv"},
                           {1, dir / "second" / "index.csv"}};
  const ProtocolResult full = run_protocol({d0, d1}, cfg, Protocol::FourStep, opts);

  ProtocolOptions resume = opts;
  resume.resume_completed_steps = 1;
  resume.resume_matrix.rows = {full.matrix.rows[0]};
  const ProtocolResult back = run_protocol({d0, d1}, cfg, Protocol::FourStep, resume);

  CHECK(back.params.same_values(full.params));
  REQUIRE(back.matrix.rows.size() == full.matrix.rows.size());
  for (std::size_t i = 0; i < full.matrix.rows.size(); ++i) {
    CHECK(back.matrix.rows[i] == full.matrix.rows[i]);
  }

  SUBCASE("resume validation") {
    ProtocolOptions bad = resume;
    bad.resume_matrix.rows.clear();
    CHECK_THROWS_AS((void)run_protocol({d0, d1}, cfg, Protocol::FourStep, bad), InvalidSpec);
    bad = resume;
    bad.checkpoint_dir.clear();
    CHECK_THROWS_AS((void)run_protocol({d0, d1}, cfg, Protocol::FourStep, bad), InvalidSpec);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("training failures flush the run log with an abort record") {
  const auto dir = temp_dir("abort");
  const DomainDataset d0 = tiny_domain(55, "healthy", 0);
  DomainDataset isolated;  // nobody has a positive: unusable for training
  isolated.name = "isolated";
  isolated.thresholds = ThresholdSpec{};
  for (int i = 0; i < 4; ++i) {
    Sample s;
    s.cloud = PointCloud::Zero(8, 3);
    s.location = GeoLocation(400.0 * i, 0.0);
    s.domain_id = 1;
    s.sample_id = i;
    isolated.train.push_back(s);
    isolated.test_database.push_back(s);
    isolated.test_queries.push_back(s);
  }

  TrainConfig cfg = tiny_config(Method::FT);
  ProtocolOptions opts;
  opts.abort_log_path = dir / "runlog.jsonl";
  CHECK_THROWS_AS((void)run_protocol({d0, isolated}, cfg, Protocol::FourStep, opts),
                  NoUsableAnchors);
  REQUIRE(std::filesystem::exists(opts.abort_log_path));
  std::ifstream is(opts.abort_log_path);
  std::string line, last;
  while (std::getline(is, line)) {
    if (!line.empty()) last = line;
  }
  CHECK(last.find("abort") != std::string::npos);
  CHECK(last.find("step 2") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("run logs serialize one record per epoch") {
  const DomainDataset d0 = tiny_domain(56, "first", 0);
  const DomainDataset d1 = tiny_domain(57, "second", 1);
  const TrainConfig cfg = tiny_config(Method::InCloudAngular, 2);
  const ProtocolResult res = run_protocol({d0, d1}, cfg, Protocol::FourStep);

  const auto path = std::filesystem::temp_directory_path() /
                    ("pcpr-runlog-" + std::to_string(::getpid()) + ".jsonl");
  res.log.save_jsonl(path);
  std::ifstream is(path);
  int lines = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) ++lines;
  }
  // header + 2 steps x 2 epochs + 2 step timings
  CHECK(lines == 1 + 4 + 2);
  std::filesystem::remove(path);
}
