#include "pcpr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pcpr/binio.hpp"
#include "pcpr/rng.hpp"

namespace pcpr {

using json = nlohmann::json;

std::string method_name(Method m) {
  switch (m) {
    case Method::FT: return "ft";
    case Method::Joint: return "joint";
    case Method::InCloudAngular: return "incloud";
    case Method::AblEuclid: return "abl-euclid";
    case Method::AblPoint: return "abl-point";
    case Method::AblNoMemory: return "abl-no-memory";
    case Method::AblNoRelax: return "abl-no-relax";
  }
  throw InvalidSpec("method_name: unknown method");
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::FT, Method::Joint, Method::InCloudAngular, Method::AblEuclid,
                   Method::AblPoint, Method::AblNoMemory, Method::AblNoRelax}) {
    if (method_name(m) == name) return m;
  }
  throw InvalidSpec("unknown method '" + name + "'");
}

DistillKind method_distill_kind(Method m) {
  switch (m) {
    case Method::FT:
    case Method::Joint: return DistillKind::None;
    case Method::AblEuclid: return DistillKind::Euclidean;
    case Method::AblPoint: return DistillKind::Point;
    case Method::InCloudAngular:
    case Method::AblNoMemory:
    case Method::AblNoRelax: return DistillKind::Angular;
  }
  throw InvalidSpec("method_distill_kind: unknown method");
}

bool method_uses_memory(Method m) {
  return m != Method::FT && m != Method::Joint && m != Method::AblNoMemory;
}

bool method_uses_relaxation(Method m) { return m != Method::AblNoRelax; }

void TrainConfig::validate() const {
  encoder.validate();
  if (epochs < 1) throw InvalidSpec("train config: epochs must be >= 1");
  if (!(lr_initial > 0.0) || !(lr_after_half > 0.0)) {
    throw InvalidSpec("train config: learning rates must be > 0");
  }
  if (weight_decay < 0.0) throw InvalidSpec("train config: weight_decay must be >= 0");
  if (batch_anchors < 2) throw InvalidSpec("train config: batch_anchors must be >= 2");
  if (memory_K < 0 || memory_K % 2 != 0) {
    throw InvalidSpec("train config: memory_K must be an even number >= 0");
  }
  triplet.validate();
  distill.validate();
}

int TrainConfig::effective_memory_clouds() const {
  return method_uses_memory(method) ? memory_K : 0;
}

Scalar TrainConfig::effective_lambda_init() const {
  return method_distill_kind(method) == DistillKind::None ? 0.0 : distill.lambda_init;
}

Scalar lr_for_epoch(int epoch, const TrainConfig& config) {
  return epoch < config.epochs / 2.0 ? config.lr_initial : config.lr_after_half;
}

void adam_step(EncoderParams& params, const EncoderParams& grads, AdamState& opt, Scalar lr,
               const TrainConfig& config) {
  constexpr Scalar kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  Eigen::VectorXd theta = params.flatten();
  const Eigen::VectorXd g = grads.flatten();
  if (g.size() != theta.size()) {
    throw NonFiniteGradient("adam_step: gradient length does not match parameters");
  }
  if (!g.allFinite()) throw NonFiniteGradient("adam_step: non-finite gradient");
  if (opt.m.size() != theta.size()) {
    throw InvalidSpec("adam_step: moment vectors do not match parameter length");
  }
  theta *= 1.0 - lr * config.weight_decay;  // decoupled decay, before the moments
  opt.t += 1;
  opt.m = kBeta1 * opt.m + (1.0 - kBeta1) * g;
  opt.v = kBeta2 * opt.v + (1.0 - kBeta2) * g.cwiseProduct(g);
  const Scalar c1 = 1.0 - std::pow(kBeta1, static_cast<Scalar>(opt.t));
  const Scalar c2 = 1.0 - std::pow(kBeta2, static_cast<Scalar>(opt.t));
  theta -= (lr / c1) * opt.m.cwiseQuotient(((opt.v / c2).cwiseSqrt().array() + kEps).matrix());
  params = EncoderParams::unflatten(params.config, theta);
}

int mine_hard_negative(const Eigen::Ref<const Eigen::RowVectorXd>& anchor_desc,
                       const Eigen::Ref<const Eigen::MatrixXd>& batch_descs,
                       const std::vector<char>& valid_mask) {
  if (valid_mask.size() != static_cast<std::size_t>(batch_descs.rows())) {
    throw InvalidSpec("mine_hard_negative: mask length does not match batch");
  }
  int best = -1;
  Scalar best_d = 0.0;
  for (Eigen::Index r = 0; r < batch_descs.rows(); ++r) {
    if (!valid_mask[r]) continue;
    const Scalar d = (batch_descs.row(r) - anchor_desc).squaredNorm();
    if (best < 0 || d < best_d) {
      best = static_cast<int>(r);
      best_d = d;
    }
  }
  return best;
}

StepState make_initial_state(const TrainConfig& config) {
  config.validate();
  StepState state;
  state.student = init_params(config.encoder);
  const int k = config.effective_memory_clouds();
  if (k > 0) state.memory.emplace(k, derive_seed(config.seed, "memory"));
  state.opt = AdamState::zeros(state.student.param_count());
  return state;
}

void RunLog::save_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << json{{"seed", seed}}.dump() << "\n";
  for (const EpochRecord& r : epochs) {
    os << json{{"step", r.step},
               {"epoch", r.epoch},
               {"triplet", r.triplet},
               {"distill", r.distill},
               {"lambda", r.lambda},
               {"lr", r.lr},
               {"batches", r.batches},
               {"dropped_anchors", r.dropped_anchors},
               {"skipped_tuples", r.skipped_tuples}}
              .dump()
       << "\n";
  }
  for (std::size_t i = 0; i < step_seconds.size(); ++i) {
    os << json{{"step", i + 1}, {"seconds", step_seconds[i]}}.dump() << "\n";
  }
  if (abort) os << json{{"abort", *abort}}.dump() << "\n";
  if (!os) throw FormatError(path.string() + ": write failed");
}

namespace {

/// One usable training anchor: a current-domain sample with its mined
/// positive candidates, or a replay pair with its fixed partner.
struct PoolItem {
  const Sample* anchor = nullptr;
  const Sample* fixed_positive = nullptr;        // replay entries only
  const std::vector<Sample>* source = nullptr;   // current-domain lookup base
  const std::vector<int>* positive_ids = nullptr;
  Scalar neg_train = 0.0;  // negative radius of the anchor's own domain
};

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const auto j = uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1);
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace

void train_step(StepState& state, const std::vector<const DomainDataset*>& step_domains,
                int step_index, const TrainConfig& config, RunLog& log) {
  config.validate();
  if (step_index < 1) throw InvalidSpec("train_step: step_index must be >= 1");
  if (step_domains.empty()) throw InvalidSpec("train_step: no domains for this step");
  const auto t0 = std::chrono::steady_clock::now();

  if (step_index >= 2) {
    state.teacher.emplace(state.student);
  } else {
    state.teacher.reset();
  }
  if (step_index == 1 || config.reset_optimizer_per_step ||
      state.opt.m.size() != state.student.param_count()) {
    state.opt = AdamState::zeros(state.student.param_count());
  }

  DistillSpec dspec = config.distill;
  dspec.kind = method_distill_kind(config.method);
  dspec.lambda_init = config.effective_lambda_init();
  const ScheduleSpec schedule{config.epochs};

  // Anchor pool: the union of the step's usable current samples and the
  // replay entries. Pair indices are mined per domain; cross-domain
  // relationships are decided by the negative mask below, never by raw
  // coordinates (each domain has its own frame).
  std::vector<PairIndex> mined(step_domains.size());
  std::vector<PoolItem> pool;
  std::map<int, Scalar> neg_train_by_domain;
  for (std::size_t d = 0; d < step_domains.size(); ++d) {
    const DomainDataset& ds = *step_domains[d];
    if (ds.train.empty()) throw NoUsableAnchors("train_step: domain '" + ds.name + "' is empty");
    mined[d] = mine_pairs(ds.train, ds.thresholds);
    neg_train_by_domain[ds.train.front().domain_id] = ds.thresholds.neg_train;
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      if (mined[d].positives[i].empty()) continue;
      pool.push_back(PoolItem{&ds.train[i], nullptr, &ds.train, &mined[d].positives[i],
                              ds.thresholds.neg_train});
    }
  }
  for (const auto& [dom, nt] : neg_train_by_domain) state.domain_neg_train[dom] = nt;
  if (state.memory) {
    for (const MemoryEntry& e : state.memory->entries()) {
      // Replay anchors keep their source domain's radius for masking
      // same-domain replay companions.
      const auto it = state.domain_neg_train.find(e.domain_id);
      if (it == state.domain_neg_train.end()) {
        throw InvalidSpec("train_step: replay entry from unregistered domain " +
                          std::to_string(e.domain_id));
      }
      pool.push_back(PoolItem{&e.anchor, &e.positive, nullptr, nullptr, it->second});
    }
  }
  if (pool.empty()) {
    throw NoUsableAnchors("train_step: no anchor has a positive pair");
  }

  const int batches_per_epoch =
      static_cast<int>((pool.size() + config.batch_anchors - 1) / config.batch_anchors);

  int current_epoch = 0;
  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      current_epoch = epoch;
      const Scalar lr = lr_for_epoch(epoch, config);
      const bool distilling = step_index >= 2 && dspec.kind != DistillKind::None;
      const Scalar lambda =
          !distilling ? 0.0
          : method_uses_relaxation(config.method)
              ? relaxation_weight(static_cast<Scalar>(epoch), schedule, dspec)
              : dspec.lambda_init;

      std::vector<int> order(pool.size());
      std::iota(order.begin(), order.end(), 0);
      Rng order_rng = make_rng(derive_seed(config.seed, "epoch-order",
                                           static_cast<std::uint64_t>(step_index),
                                           static_cast<std::uint64_t>(epoch)));
      shuffle_indices(order, order_rng);

      EpochRecord rec;
      rec.step = step_index;
      rec.epoch = epoch;
      rec.lambda = lambda;
      rec.lr = lr;
      Scalar triplet_sum = 0.0, distill_sum = 0.0;

      for (int b = 0; b < batches_per_epoch; ++b) {
        const int begin = b * config.batch_anchors;
        const int end = std::min<int>(static_cast<int>(pool.size()),
                                      begin + config.batch_anchors);
        const int n_items = end - begin;

        Rng batch_rng = make_rng(derive_seed(config.seed, "batch",
                                             static_cast<std::uint64_t>(step_index),
                                             static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(b)));
        const std::uint64_t aug_root = derive_seed(config.seed, "augment",
                                                   static_cast<std::uint64_t>(step_index),
                                                   static_cast<std::uint64_t>(epoch),
                                                   static_cast<std::uint64_t>(b));

        // Two rows per item: anchor then its positive.
        std::vector<const Sample*> rows;
        std::vector<Scalar> anchor_neg_radius(n_items);
        rows.reserve(2 * n_items);
        for (int ii = 0; ii < n_items; ++ii) {
          const PoolItem& item = pool[order[begin + ii]];
          const Sample* pos = item.fixed_positive;
          if (!pos) {
            const auto pick = uniform_int(
                batch_rng, 0, static_cast<std::int64_t>(item.positive_ids->size()) - 1);
            pos = &(*item.source)[(*item.positive_ids)[pick]];
          }
          rows.push_back(item.anchor);
          rows.push_back(pos);
          anchor_neg_radius[ii] = item.neg_train;
        }
        std::vector<PointCloud> clouds;
        clouds.reserve(rows.size());
        for (std::size_t s = 0; s < rows.size(); ++s) {
          clouds.push_back(augment(rows[s]->cloud, derive_seed(aug_root, "slot", s)));
        }

        ForwardTrace trace;
        const DescriptorBatch batch = forward_traced(state.student, clouds, trace);

        // Hard negatives: geometric negatives inside the batch, cross-domain
        // rows always eligible, nearest descriptor wins.
        std::vector<TripletIdx> triples;
        for (int ii = 0; ii < n_items; ++ii) {
          const int a = 2 * ii;
          std::vector<char> mask(rows.size(), 0);
          for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r]->domain_id != rows[a]->domain_id) {
              mask[r] = 1;
            } else if ((rows[r]->location - rows[a]->location).norm() >
                       anchor_neg_radius[ii]) {
              mask[r] = 1;
            }
          }
          const int neg = mine_hard_negative(batch.descriptors.row(a), batch.descriptors, mask);
          if (neg < 0) {
            ++rec.dropped_anchors;
            continue;
          }
          triples.push_back(TripletIdx{a, a + 1, neg});
        }
        if (triples.empty()) continue;

        const LossResult trip = triplet_loss(batch.descriptors, triples, config.triplet);
        LossResult total = trip;
        if (lambda > 0.0) {
          const DescriptorBatch teacher_batch = forward(state.teacher->params(), clouds);
          LossResult dist;
          switch (dspec.kind) {
            case DistillKind::Angular:
              dist = sa_loss(batch.descriptors, teacher_batch.descriptors, triples, dspec);
              break;
            case DistillKind::Euclidean: {
              std::vector<DistillPair> pairs;
              pairs.reserve(2 * triples.size());
              for (const TripletIdx& t : triples) {
                pairs.push_back(DistillPair{t.anchor, t.positive});
                pairs.push_back(DistillPair{t.anchor, t.negative});
              }
              dist = euclid_distill(batch.descriptors, teacher_batch.descriptors, pairs, dspec);
              break;
            }
            case DistillKind::Point:
              dist = point_distill(batch.descriptors, teacher_batch.descriptors);
              break;
            case DistillKind::None: break;  // unreachable: lambda is 0
          }
          rec.skipped_tuples += dist.skipped;
          distill_sum += dist.value;
          total = combined_loss(trip, dist, lambda);
        }

        const EncoderParams grads = backward(state.student, clouds, trace, total.grad);
        adam_step(state.student, grads, state.opt, lr, config);
        triplet_sum += trip.value;
        ++rec.batches;
      }

      rec.triplet = rec.batches > 0 ? triplet_sum / rec.batches : 0.0;
      rec.distill = rec.batches > 0 ? distill_sum / rec.batches : 0.0;
      log.epochs.push_back(rec);
    }
  } catch (const Error& e) {
    log.abort = "step " + std::to_string(step_index) + " epoch " +
                std::to_string(current_epoch) + ": " + e.what();
    log.step_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    throw;
  }

  if (state.memory) {
    for (const DomainDataset* d : step_domains) state.memory->update(*d);
  }
  log.step_seconds.push_back(
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::string protocol_name(Protocol p) {
  return p == Protocol::TwoStep ? "two-step" : "four-step";
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "two-step") return Protocol::TwoStep;
  if (name == "four-step") return Protocol::FourStep;
  throw InvalidSpec("unknown protocol '" + name + "'");
}

namespace {

constexpr char kOptimMagic[] = "PCPRO";
constexpr std::uint32_t kOptimVersion = 1;

void save_optimizer(const AdamState& opt, const std::filesystem::path& path) {
  auto os = binio::open_output(path);
  binio::write_bytes(os, kOptimMagic, 5);
  binio::write_u32(os, kOptimVersion);
  binio::write_u64(os, static_cast<std::uint64_t>(opt.t));
  binio::write_u64(os, static_cast<std::uint64_t>(opt.m.size()));
  for (Eigen::Index i = 0; i < opt.m.size(); ++i) binio::write_f64(os, opt.m(i));
  for (Eigen::Index i = 0; i < opt.v.size(); ++i) binio::write_f64(os, opt.v(i));
  if (!os) throw FormatError(path.string() + ": write failed");
}

AdamState load_optimizer(const std::filesystem::path& path) {
  auto is = binio::open_input(path);
  binio::Reader r(is, path.string());
  r.expect_magic(kOptimMagic, 5);
  if (r.read_u32() != kOptimVersion) {
    throw FormatError(path.string() + ": unsupported version");
  }
  AdamState opt;
  opt.t = static_cast<std::int64_t>(r.read_u64());
  const std::uint64_t n = r.read_u64();
  opt.m.resize(static_cast<Eigen::Index>(n));
  opt.v.resize(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) opt.m(static_cast<Eigen::Index>(i)) = r.read_f64();
  for (std::uint64_t i = 0; i < n; ++i) opt.v(static_cast<Eigen::Index>(i)) = r.read_f64();
  return opt;
}

std::filesystem::path step_dir(const std::filesystem::path& root, int step) {
  return root / ("step_" + std::to_string(step));
}

void write_checkpoint(const StepState& state, int step, const ProtocolOptions& opts,
                      const RunLog& log) {
  const std::filesystem::path dir = step_dir(opts.checkpoint_dir, step);
  std::filesystem::create_directories(dir);
  save_params(state.student, dir / "encoder.pcprw");
  if (state.memory) save_memory(*state.memory, opts.source_by_domain, dir / "memory.json");
  save_optimizer(state.opt, dir / "optim.bin");
  log.save_jsonl(dir / "runlog.jsonl");
  if (!opts.config_echo.empty()) {
    std::ofstream os(dir / "config.json", std::ios::trunc);
    os << opts.config_echo;
    if (!os) throw FormatError((dir / "config.json").string() + ": write failed");
  }
}

ProtocolResult run_plan(const std::vector<DomainDataset>& domains, const TrainConfig& config,
                        const std::vector<std::vector<int>>& plan,
                        const ProtocolOptions& opts) {
  config.validate();
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].train.empty()) {
      throw InvalidSpec("protocol: domain '" + domains[i].name + "' has no train split");
    }
    for (std::size_t j = i + 1; j < domains.size(); ++j) {
      if (domains[i].train.front().domain_id == domains[j].train.front().domain_id) {
        throw InvalidSpec("protocol: domains '" + domains[i].name + "' and '" +
                          domains[j].name + "' share a domain_id");
      }
    }
  }

  StepState state = make_initial_state(config);
  for (const DomainDataset& d : domains) {
    state.domain_neg_train[d.train.front().domain_id] = d.thresholds.neg_train;
  }

  ProtocolResult res;
  res.log.seed = config.seed;
  for (const DomainDataset& d : domains) res.matrix.domain_names.push_back(d.name);

  const int total_steps = static_cast<int>(plan.size());
  int done = opts.resume_completed_steps;
  if (done < 0 || done > total_steps) {
    throw InvalidSpec("protocol resume: completed step count out of range");
  }
  if (done > 0) {
    if (opts.checkpoint_dir.empty()) {
      throw InvalidSpec("protocol resume: no checkpoint directory given");
    }
    const std::filesystem::path dir = step_dir(opts.checkpoint_dir, done);
    state.student = load_params(dir / "encoder.pcprw", &config.encoder);
    if (config.effective_memory_clouds() > 0) {
      int folded = 0;
      for (int s = 0; s < done; ++s) folded += static_cast<int>(plan[s].size());
      state.memory = load_memory(dir / "memory.json", config.effective_memory_clouds(),
                                 derive_seed(config.seed, "memory"), folded);
    }
    if (!config.reset_optimizer_per_step) {
      state.opt = load_optimizer(dir / "optim.bin");
    }
    if (static_cast<int>(opts.resume_matrix.rows.size()) != done) {
      throw InvalidSpec("protocol resume: recall rows do not match the completed step count");
    }
    res.matrix.rows = opts.resume_matrix.rows;
  }

  for (int step = done + 1; step <= total_steps; ++step) {
    std::vector<const DomainDataset*> sd;
    for (int i : plan[step - 1]) sd.push_back(&domains[i]);
    try {
      train_step(state, sd, step, config, res.log);
    } catch (const Error& e) {
      if (!res.log.abort) {  // pre-epoch failures: train_step never tagged them
        res.log.abort = "step " + std::to_string(step) + ": " + e.what();
      }
      if (!opts.abort_log_path.empty()) res.log.save_jsonl(opts.abort_log_path);
      throw;
    }

    int seen = 0;
    for (int s = 0; s < step; ++s) seen += static_cast<int>(plan[s].size());
    std::vector<double> row;
    row.reserve(seen);
    for (int i = 0; i < seen; ++i) {
      row.push_back(evaluate_domain(state.student, domains[i], 1));
    }
    res.matrix.rows.push_back(std::move(row));

    if (!opts.checkpoint_dir.empty()) write_checkpoint(state, step, opts, res.log);
  }

  res.params = state.student;
  return res;
}

}  // namespace

ProtocolResult run_protocol(const std::vector<DomainDataset>& domains,
                            const TrainConfig& config, Protocol protocol,
                            const ProtocolOptions& opts) {
  if (domains.size() < 2) {
    throw InsufficientDomains("protocol: need at least 2 domains, got " +
                              std::to_string(domains.size()));
  }
  std::vector<std::vector<int>> plan;
  if (protocol == Protocol::FourStep) {
    for (std::size_t i = 0; i < domains.size(); ++i) plan.push_back({static_cast<int>(i)});
  } else {
    plan.push_back({0});
    std::vector<int> rest;
    for (std::size_t i = 1; i < domains.size(); ++i) rest.push_back(static_cast<int>(i));
    plan.push_back(std::move(rest));
  }
  return run_plan(domains, config, plan, opts);
}

ProtocolResult joint_train(const std::vector<DomainDataset>& domains, const TrainConfig& config,
                           const ProtocolOptions& opts) {
  if (domains.empty()) throw InsufficientDomains("joint_train: need at least 1 domain");
  std::vector<int> all;
  for (std::size_t i = 0; i < domains.size(); ++i) all.push_back(static_cast<int>(i));
  return run_plan(domains, config, {all}, opts);
}

}  // namespace pcpr
