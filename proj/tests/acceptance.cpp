// Release acceptance: nine criteria, one [PASS]/[FAIL] line each on stdout.
// Exit code is the number of failed criteria. Progress notes go to stderr.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pcpr/data.hpp"
#include "pcpr/experiment.hpp"
#include "pcpr/selfcheck.hpp"
#include "pcpr/trainer.hpp"

using namespace pcpr;
namespace fs = std::filesystem;

namespace {

// Tolerances, pinned.
constexpr double kGradRelTol = 1e-6;       // analytic vs central differences
constexpr double kGradBudgetSec = 30.0;    // criterion 1 runtime budget
constexpr double kInvarianceTol = 1e-9;    // angular objective under similarity maps
constexpr double kSensitivityMin = 1e-6;   // euclid/point must move at least this
constexpr double kForgettingBudgetSec = 900.0;  // criterion 6 runtime budget
constexpr std::uint64_t kCheckSeed = 20260814;
constexpr int kFdInstances = 50;
constexpr int kInvarianceBatches = 100;
const std::vector<std::uint64_t> kRunSeeds = {1, 2, 3, 4, 5};

int g_failures = 0;

void emit(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// Protocol runs shared by criteria 6, 7 and 9. Each (variant, seed) trains
// once; reports and the matrix CSV bytes are kept, bulky artifacts dropped.

struct RunOutcome {
  double mean_recall_1 = 0.0;
  double forgetting = 0.0;
  std::string matrix_csv;
};

struct Variant {
  std::string label;
  Method method;
  double lambda_init;  // negative = keep default
};

const std::vector<Variant> kVariants = {
    {"ft", Method::FT, -1.0},
    {"angular", Method::InCloudAngular, -1.0},
    {"euclid", Method::AblEuclid, -1.0},
    {"point", Method::AblPoint, -1.0},
    {"sa-only", Method::AblNoMemory, -1.0},
    {"memory-only", Method::AblNoRelax, 0.0},
};

RunOutcome run_variant(const fs::path& root, const Variant& v, std::uint64_t seed,
                       const std::string& dir_suffix = "") {
  ExperimentConfig c = default_experiment(seed);
  c.method = v.method;
  c.train.method = v.method;
  if (v.lambda_init >= 0.0) c.train.distill.lambda_init = v.lambda_init;

  const fs::path out = root / (v.label + "-s" + std::to_string(seed) + dir_suffix);
  std::cerr << "  " << v.label << " seed " << seed << dir_suffix << "..." << std::flush;
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentResult res = run_experiment(c, out);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  RunOutcome o;
  o.mean_recall_1 = res.report.mean_recall_1;
  o.forgetting = res.report.forgetting.value_or(0.0);
  o.matrix_csv = slurp(out / "recall_matrix.csv");
  std::cerr << " mR@1 " << fmt(o.mean_recall_1) << " F " << fmt(o.forgetting) << " ("
            << fmt(dt, 1) << "s)\n";
  fs::remove_all(out / "data");
  fs::remove_all(out / "checkpoints");
  return o;
}

}  // namespace

int main() {
  const fs::path root =
      fs::temp_directory_path() / ("pcpr-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  // --- 1: gradient fidelity -------------------------------------------------
  {
    const auto t0 = std::chrono::steady_clock::now();
    const FdReport reports[] = {
        fd_check_triplet(kCheckSeed, kFdInstances), fd_check_sa(kCheckSeed, kFdInstances),
        fd_check_euclid(kCheckSeed, kFdInstances), fd_check_point(kCheckSeed, kFdInstances),
        fd_check_encoder(kCheckSeed, kFdInstances)};
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double worst = 0.0;
    for (const FdReport& r : reports) worst = std::max(worst, r.max_rel_err);
    const bool pass = worst < kGradRelTol && secs < kGradBudgetSec;
    std::ostringstream os;
    os << "analytic vs finite-difference gradients over " << kFdInstances
       << " instances x 5 objectives: max rel err " << std::scientific << worst
       << " (tol 1e-6), " << fmt(secs, 1) << "s (budget 30s)";
    emit(1, pass, os.str());
  }

  // --- 2: distillation-loss invariances --------------------------------------
  {
    const double sa_dev = sa_invariance_max_dev(kCheckSeed, kInvarianceBatches);
    const double eu_change = euclid_scale_min_change(kCheckSeed, kInvarianceBatches);
    const double pt_change = point_translation_min_change(kCheckSeed, kInvarianceBatches);
    const bool pass = sa_dev < kInvarianceTol && eu_change > kSensitivityMin &&
                      pt_change > kSensitivityMin;
    std::ostringstream os;
    os << "angular loss invariant under rotation+translation+scale (max dev " << std::scientific
       << sa_dev << " < 1e-9); euclid moves under scaling (min " << eu_change
       << " > 1e-6); point moves under translation (min " << pt_change << " > 1e-6)";
    emit(2, pass, os.str());
  }

  // --- 3: relaxation schedule -------------------------------------------------
  {
    const CheckResult r = relaxation_schedule_check();
    emit(3, r.pass, "relaxation schedule: " + r.detail);
  }

  // --- 4: metric oracles -------------------------------------------------------
  {
    const CheckResult r = metric_oracle_check(kCheckSeed);
    emit(4, r.pass, "retrieval metrics vs brute-force oracles: " + r.detail);
  }

  // --- 5: memory invariants ----------------------------------------------------
  {
    const CheckResult r = memory_invariant_check(kCheckSeed);
    emit(5, r.pass, "replay store invariants: " + r.detail);
  }

  // --- protocol runs for 6/7/9 -------------------------------------------------
  std::map<std::string, std::vector<RunOutcome>> runs;
  std::cerr << "criterion 6 runs (ft, angular):\n";
  const auto t6 = std::chrono::steady_clock::now();
  for (const Variant& v : kVariants) {
    if (v.label != "ft" && v.label != "angular") continue;
    for (std::uint64_t seed : kRunSeeds) runs[v.label].push_back(run_variant(root, v, seed));
  }
  const double secs6 =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t6).count();

  const auto medians = [&](const std::string& label) {
    std::vector<double> mr, fg;
    for (const RunOutcome& o : runs.at(label)) {
      mr.push_back(o.mean_recall_1);
      fg.push_back(o.forgetting);
    }
    return std::pair<double, double>(median(mr), median(fg));
  };

  // --- 6: catastrophic-forgetting reproduction ---------------------------------
  {
    const auto [ft_mr, ft_f] = medians("ft");
    const auto [in_mr, in_f] = medians("angular");
    double ft_f_min = 1e9;
    for (const RunOutcome& o : runs["ft"]) ft_f_min = std::min(ft_f_min, o.forgetting);
    const bool pass = ft_f > 0.0 && in_f < ft_f && in_mr > ft_mr &&
                      secs6 < kForgettingBudgetSec;
    std::ostringstream os;
    os << "four-step default protocol, 5 seeds: median F(ft) " << fmt(ft_f)
       << " > 0 (per-seed min " << fmt(ft_f_min) << "), median F(angular) " << fmt(in_f)
       << " < F(ft), median mR@1 angular " << fmt(in_mr) << " > ft " << fmt(ft_mr) << "; "
       << fmt(secs6, 0) << "s (budget 900s)";
    emit(6, pass, os.str());
  }

  // --- 7: ablation ordering ------------------------------------------------------
  {
    std::cerr << "criterion 7 runs (euclid, point, sa-only, memory-only):\n";
    for (const Variant& v : kVariants) {
      if (runs.count(v.label)) continue;
      for (std::uint64_t seed : kRunSeeds) runs[v.label].push_back(run_variant(root, v, seed));
    }
    const double ft = medians("ft").first;
    const double ang = medians("angular").first;
    const double euc = medians("euclid").first;
    const double pnt = medians("point").first;
    const double sa = medians("sa-only").first;
    const double mem = medians("memory-only").first;

    const bool hard = ang > pnt;  // asserted strictly
    std::vector<std::string> soft;
    if (!(ang >= euc)) soft.push_back("angular " + fmt(ang) + " < euclid " + fmt(euc));
    if (!(euc >= pnt)) soft.push_back("euclid " + fmt(euc) + " < point " + fmt(pnt));
    if (!(mem >= ft)) soft.push_back("ft+memory " + fmt(mem) + " < ft " + fmt(ft));
    if (!(sa >= ft)) soft.push_back("ft+sa " + fmt(sa) + " < ft " + fmt(ft));

    std::ostringstream os;
    os << "median mR@1 angular " << fmt(ang) << " / euclid " << fmt(euc) << " / point "
       << fmt(pnt) << " / ft " << fmt(ft) << " / ft+memory " << fmt(mem) << " / ft+sa "
       << fmt(sa) << "; hard assert angular > point "
       << (hard ? "holds" : "VIOLATED");
    if (soft.empty()) {
      os << "; all soft orderings hold";
    } else {
      os << "; soft failures (reported, not asserted): ";
      for (std::size_t i = 0; i < soft.size(); ++i) os << (i ? "; " : "") << soft[i];
    }
    emit(7, hard, os.str());
  }

  // --- 8: degenerate equivalences -------------------------------------------------
  {
    SyntheticDomainSpec spec;
    spec.num_places = 6;
    spec.area_side = 600.0;
    spec.landmarks_per_place = 3;
    spec.noise_sigma = 0.02;
    spec.revisit_count = 2;
    spec.points_per_cloud = 12;
    spec.seed = 301;
    const DomainDataset d0 = generate_domain(spec, "one", ThresholdSpec{}, 0);
    spec.seed = 302;
    const DomainDataset d1 = generate_domain(spec, "two", ThresholdSpec{}, 1);

    TrainConfig cfg;
    cfg.encoder.hidden_dims = {8};
    cfg.encoder.descriptor_dim = 4;
    cfg.encoder.seed = 11;
    cfg.epochs = 4;
    cfg.batch_anchors = 4;
    cfg.seed = 7;

    cfg.method = Method::FT;
    cfg.memory_K = 0;
    const ProtocolResult ft = run_protocol({d0, d1}, cfg, Protocol::FourStep);
    cfg.method = Method::InCloudAngular;
    cfg.distill.lambda_init = 0.0;
    const ProtocolResult degen = run_protocol({d0, d1}, cfg, Protocol::FourStep);
    bool identical = ft.params.same_values(degen.params) &&
                     ft.matrix.rows == degen.matrix.rows;

    cfg.method = Method::Joint;
    cfg.memory_K = 32;
    const ProtocolResult joint = joint_train({d0}, cfg);
    StepState st = make_initial_state(cfg);
    RunLog log;
    train_step(st, {&d0}, 1, cfg, log);
    const bool joint_eq = joint.params.same_values(st.student);

    emit(8, identical && joint_eq,
         std::string("ft vs distillation-with-zero-weight-and-no-memory: ") +
             (identical ? "bit-identical parameters and matrices" : "DIVERGED") +
             "; joint on one domain vs single step: " +
             (joint_eq ? "bit-identical parameters" : "DIVERGED"));
  }

  // --- 9: byte determinism ----------------------------------------------------
  {
    std::cerr << "criterion 9 rerun (angular seed 1):\n";
    const Variant angular = kVariants[1];
    const RunOutcome again = run_variant(root, angular, kRunSeeds[0], "-again");
    const bool pass = !runs["angular"][0].matrix_csv.empty() &&
                      runs["angular"][0].matrix_csv == again.matrix_csv;
    emit(9, pass,
         pass ? "two four-step runs from one root seed: recall matrix CSVs byte-identical"
              : "recall matrix CSVs differ between identical runs");
  }

  fs::remove_all(root);
  return g_failures;
}
