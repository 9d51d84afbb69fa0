#include "pcpr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pcpr {

using json = nlohmann::json;

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Indices of the n database rows nearest to one query descriptor,
/// distance ascending, ties broken toward the lower database index.
std::vector<int> nearest_n(const Eigen::Ref<const Eigen::MatrixXd>& db_descs,
                           const Eigen::Ref<const Eigen::RowVectorXd>& query, int n) {
  const int db = static_cast<int>(db_descs.rows());
  std::vector<std::pair<double, int>> ranked(db);
  for (int i = 0; i < db; ++i) {
    ranked[i] = {(db_descs.row(i) - query).squaredNorm(), i};
  }
  const int keep = std::min(n, db);
  std::partial_sort(ranked.begin(), ranked.begin() + keep, ranked.end());
  std::vector<int> out(keep);
  for (int i = 0; i < keep; ++i) out[i] = ranked[i].second;
  return out;
}

}  // namespace

std::map<int, double> recall_curve(const Eigen::Ref<const Eigen::MatrixXd>& query_descs,
                                   const Eigen::Ref<const Eigen::MatrixXd>& db_descs,
                                   const std::vector<GeoLocation>& query_locs,
                                   const std::vector<GeoLocation>& db_locs, double pos_test,
                                   const std::vector<int>& ns, int* excluded) {
  if (db_descs.rows() == 0) throw EmptyDatabase("recall: empty database");
  if (query_descs.rows() != static_cast<Eigen::Index>(query_locs.size()) ||
      db_descs.rows() != static_cast<Eigen::Index>(db_locs.size())) {
    throw InvalidSpec("recall: descriptor and location counts differ");
  }
  if (ns.empty()) throw InvalidSpec("recall: need at least one N");
  for (int n : ns) {
    if (n < 1) throw InvalidSpec("recall: N must be >= 1");
  }

  const int max_n = *std::max_element(ns.begin(), ns.end());
  std::map<int, int> successes;
  for (int n : ns) successes[n] = 0;
  int evaluated = 0, skipped = 0;

  for (Eigen::Index q = 0; q < query_descs.rows(); ++q) {
    bool has_match = false;
    for (const GeoLocation& l : db_locs) {
      if ((l - query_locs[q]).norm() < pos_test) {
        has_match = true;
        break;
      }
    }
    if (!has_match) {
      ++skipped;
      continue;
    }
    ++evaluated;
    const std::vector<int> hits = nearest_n(db_descs, query_descs.row(q), max_n);
    int first_hit_rank = -1;  // 1-based rank of the first in-radius retrieval
    for (std::size_t r = 0; r < hits.size(); ++r) {
      if ((db_locs[hits[r]] - query_locs[q]).norm() < pos_test) {
        first_hit_rank = static_cast<int>(r) + 1;
        break;
      }
    }
    if (first_hit_rank > 0) {
      for (int n : ns) {
        if (first_hit_rank <= n) ++successes[n];
      }
    }
  }
  if (excluded) *excluded = skipped;

  std::map<int, double> out;
  for (int n : ns) {
    out[n] = evaluated == 0 ? 0.0 : 100.0 * successes[n] / evaluated;
  }
  return out;
}

double recall_at_n(const Eigen::Ref<const Eigen::MatrixXd>& query_descs,
                   const Eigen::Ref<const Eigen::MatrixXd>& db_descs,
                   const std::vector<GeoLocation>& query_locs,
                   const std::vector<GeoLocation>& db_locs, double pos_test, int n,
                   int* excluded) {
  return recall_curve(query_descs, db_descs, query_locs, db_locs, pos_test, {n}, excluded)
      .at(n);
}

double mean_recall_at_1(const RecallMatrix& matrix) {
  if (matrix.rows.empty() || matrix.rows.back().empty()) {
    throw InvalidSpec("mean_recall_at_1: empty matrix");
  }
  const std::vector<double>& last = matrix.rows.back();
  double sum = 0.0;
  for (double v : last) sum += v;
  return sum / static_cast<double>(last.size());
}

double forgetting(const RecallMatrix& matrix) {
  if (matrix.rows.empty()) throw InvalidSpec("forgetting: empty matrix");
  const std::vector<double>& last = matrix.rows.back();
  double sum = 0.0;
  int counted = 0;
  for (std::size_t j = 0; j < last.size(); ++j) {
    double peak = last[j];
    int evals = 0;
    for (const std::vector<double>& row : matrix.rows) {
      if (j < row.size()) {
        peak = std::max(peak, row[j]);
        ++evals;
      }
    }
    if (evals >= 2) {
      sum += peak - last[j];
      ++counted;
    }
  }
  if (counted == 0) {
    throw UndefinedForSingleStep(
        "forgetting: no domain was evaluated more than once (single-step run)");
  }
  return sum / counted;
}

namespace {

std::vector<GeoLocation> locations_of(const std::vector<Sample>& samples) {
  std::vector<GeoLocation> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.location);
  return out;
}

std::vector<PointCloud> clouds_of(const std::vector<Sample>& samples) {
  std::vector<PointCloud> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.cloud);
  return out;
}

}  // namespace

double evaluate_domain(const EncoderParams& params, const DomainDataset& domain, int n,
                       int* excluded) {
  const DescriptorBatch qd = forward(params, clouds_of(domain.test_queries));
  const DescriptorBatch dd = forward(params, clouds_of(domain.test_database));
  return recall_at_n(qd.descriptors, dd.descriptors, locations_of(domain.test_queries),
                     locations_of(domain.test_database), domain.thresholds.pos_test, n,
                     excluded);
}

std::map<int, double> evaluate_domain_curve(const EncoderParams& params,
                                            const DomainDataset& domain,
                                            const std::vector<int>& ns, int* excluded) {
  const DescriptorBatch qd = forward(params, clouds_of(domain.test_queries));
  const DescriptorBatch dd = forward(params, clouds_of(domain.test_database));
  return recall_curve(qd.descriptors, dd.descriptors, locations_of(domain.test_queries),
                      locations_of(domain.test_database), domain.thresholds.pos_test, ns,
                      excluded);
}

std::map<int, double> mean_recall_curve(const EncoderParams& params,
                                        const std::vector<const DomainDataset*>& domains,
                                        const std::vector<int>& ns) {
  if (domains.empty()) throw InvalidSpec("mean_recall_curve: no domains");
  std::map<int, double> mean;
  for (int n : ns) mean[n] = 0.0;
  for (const DomainDataset* d : domains) {
    const std::map<int, double> curve = evaluate_domain_curve(params, *d, ns);
    for (const auto& [n, v] : curve) mean[n] += v;
  }
  for (auto& [n, v] : mean) v /= static_cast<double>(domains.size());
  return mean;
}

double zero_shot(const EncoderParams& params, const DomainDataset& holdout, int n,
                 const std::vector<std::string>* trained_names,
                 std::vector<std::string>* warnings) {
  if (trained_names && warnings) {
    for (const std::string& name : *trained_names) {
      if (name == holdout.name) {
        warnings->push_back("ProtocolViolation: holdout domain '" + holdout.name +
                            "' was used in training");
      }
    }
  }
  return evaluate_domain(params, holdout, n);
}

void save_matrix_csv(const RecallMatrix& matrix, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << "step";
  for (const std::string& name : matrix.domain_names) os << ',' << name;
  os << "\n";
  const std::size_t width = matrix.domain_names.size();
  for (std::size_t i = 0; i < matrix.rows.size(); ++i) {
    os << (i + 1);
    for (std::size_t j = 0; j < width; ++j) {
      os << ',';
      if (j < matrix.rows[i].size()) os << format_double(matrix.rows[i][j]);
    }
    os << "\n";
  }
  if (!os) throw FormatError(path.string() + ": write failed");
}

RecallMatrix load_matrix_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(path.string() + ": cannot open for reading");
  RecallMatrix m;
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": missing header");
  {
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first) {
        if (cell != "step") throw FormatError(path.string() + ": bad header");
        first = false;
      } else {
        m.domain_names.push_back(cell);
      }
    }
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t at = line.find(',');
    if (at == std::string::npos) throw FormatError(path.string() + ": malformed row");
    std::size_t col = 0;
    while (at != std::string::npos && col < m.domain_names.size()) {
      const std::size_t next = line.find(',', at + 1);
      const std::string cell = line.substr(at + 1, next == std::string::npos
                                                       ? std::string::npos
                                                       : next - at - 1);
      if (cell.empty()) break;  // undefined cells only trail defined ones
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": bad numeric cell '" + cell + "'");
      }
      at = next;
      ++col;
    }
    m.rows.push_back(std::move(row));
  }
  return m;
}

void save_report(const EvalReport& report, const std::filesystem::path& path) {
  json j;
  j["mean_recall_at_1"] = report.mean_recall_1;
  j["forgetting"] = report.forgetting ? json(*report.forgetting) : json(nullptr);
  json curve = json::object();
  for (const auto& [n, v] : report.recall_curve) curve[std::to_string(n)] = v;
  j["recall_at_n"] = curve;
  j["zero_shot"] = report.zero_shot ? json(*report.zero_shot) : json(nullptr);
  j["domains"] = report.domain_names;
  j["final_recall_per_domain"] = report.final_recall_per_domain;
  j["warnings"] = report.warnings;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError(path.string() + ": write failed");
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(path.string() + ": cannot open for reading");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  EvalReport r;
  try {
    r.mean_recall_1 = j.at("mean_recall_at_1").get<double>();
    if (!j.at("forgetting").is_null()) r.forgetting = j.at("forgetting").get<double>();
    for (const auto& [k, v] : j.at("recall_at_n").items()) {
      r.recall_curve[std::stoi(k)] = v.get<double>();
    }
    if (!j.at("zero_shot").is_null()) r.zero_shot = j.at("zero_shot").get<double>();
    r.domain_names = j.at("domains").get<std::vector<std::string>>();
    r.final_recall_per_domain = j.at("final_recall_per_domain").get<std::vector<double>>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return r;
}

}  // namespace pcpr
