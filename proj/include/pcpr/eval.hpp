#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcpr/encoder.hpp"
#include "pcpr/types.hpp"

namespace pcpr {

/// Step-by-domain Recall@1 table. rows[i][j] is domain j's recall after
/// step i; row i holds the domains seen so far, so the table is lower
/// triangular when one domain is added per step.
struct RecallMatrix {
  std::vector<std::string> domain_names;
  std::vector<std::vector<double>> rows;

  int steps() const { return static_cast<int>(rows.size()); }
  int domains() const { return rows.empty() ? 0 : static_cast<int>(rows.back().size()); }
};

/// Retrieval summary after a full protocol run.
struct EvalReport {
  double mean_recall_1 = 0.0;                  // percent, over the final row
  std::optional<double> forgetting;            // percent points; absent when steps < 2
  std::map<int, double> recall_curve;          // N -> mean final Recall@N (percent)
  std::optional<double> zero_shot;             // percent, holdout domain
  std::vector<std::string> domain_names;
  std::vector<double> final_recall_per_domain;  // percent, final row copy
  std::vector<std::string> warnings;
};

/// Recall@N (percent): a query succeeds when any of its N nearest database
/// descriptors (L2, ties to the lowest database index) lies within
/// pos_test meters of the query location. Queries with no in-radius
/// database entry are excluded from the denominator and counted via
/// `excluded`. Throws EmptyDatabase when the database is empty.
double recall_at_n(const Eigen::Ref<const Eigen::MatrixXd>& query_descs,
                   const Eigen::Ref<const Eigen::MatrixXd>& db_descs,
                   const std::vector<GeoLocation>& query_locs,
                   const std::vector<GeoLocation>& db_locs, double pos_test, int n,
                   int* excluded = nullptr);

/// Recall@N for several N at once (one retrieval pass; same semantics).
std::map<int, double> recall_curve(const Eigen::Ref<const Eigen::MatrixXd>& query_descs,
                                   const Eigen::Ref<const Eigen::MatrixXd>& db_descs,
                                   const std::vector<GeoLocation>& query_locs,
                                   const std::vector<GeoLocation>& db_locs, double pos_test,
                                   const std::vector<int>& ns, int* excluded = nullptr);

/// Mean of the final row: the average Recall@1 across all seen domains.
double mean_recall_at_1(const RecallMatrix& matrix);

/// Mean over every domain evaluated at least twice of
/// (peak recall across its evaluations − final recall). Throws
/// UndefinedForSingleStep when no domain has two evaluations.
double forgetting(const RecallMatrix& matrix);

/// Encodes a domain's test split with `params` and returns Recall@N.
double evaluate_domain(const EncoderParams& params, const DomainDataset& domain, int n = 1,
                       int* excluded = nullptr);

/// Recall@N for several N on one domain's test split.
std::map<int, double> evaluate_domain_curve(const EncoderParams& params,
                                            const DomainDataset& domain,
                                            const std::vector<int>& ns,
                                            int* excluded = nullptr);

/// Per-N mean of evaluate_domain_curve over several domains, accumulated in
/// the given order (so repeated calls are bit-identical).
std::map<int, double> mean_recall_curve(const EncoderParams& params,
                                        const std::vector<const DomainDataset*>& domains,
                                        const std::vector<int>& ns);

/// Recall@N on a domain never used in training. When `trained_names` is
/// given and contains the holdout's name, a ProtocolViolation warning is
/// appended to `warnings` (the number is still computed).
double zero_shot(const EncoderParams& params, const DomainDataset& holdout, int n = 1,
                 const std::vector<std::string>* trained_names = nullptr,
                 std::vector<std::string>* warnings = nullptr);

/// CSV: header `step,<domain names>`; one row per step, empty cells where a
/// domain was not yet evaluated. Doubles at full round-trip precision.
void save_matrix_csv(const RecallMatrix& matrix, const std::filesystem::path& path);
RecallMatrix load_matrix_csv(const std::filesystem::path& path);

/// Report JSON round trip.
void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

}  // namespace pcpr
