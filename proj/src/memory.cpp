#include "pcpr/memory.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "pcpr/rng.hpp"

namespace pcpr {

using json = nlohmann::json;

MemoryBank::MemoryBank(int capacity_clouds, std::uint64_t rng_seed)
    : capacity_clouds_(capacity_clouds), rng_seed_(rng_seed) {
  if (capacity_clouds < 2 || capacity_clouds % 2 != 0) {
    throw InvalidSpec("memory bank: capacity_clouds must be a positive even number");
  }
}

MemoryBank::MemoryBank(int capacity_clouds, std::uint64_t rng_seed,
                       std::vector<MemoryEntry> entries, int updates_done)
    : MemoryBank(capacity_clouds, rng_seed) {
  entries_ = std::move(entries);
  updates_done_ = updates_done;
  for (const MemoryEntry& e : entries_) {
    if (std::find(domain_order_.begin(), domain_order_.end(), e.domain_id) ==
        domain_order_.end()) {
      domain_order_.push_back(e.domain_id);
    }
  }
  std::sort(domain_order_.begin(), domain_order_.end());  // domains finish in id order
  if (2 * size() > capacity_clouds_) {
    throw InvalidSpec("memory bank: restored entries exceed capacity");
  }
}

void MemoryBank::update(const DomainDataset& finished_domain) {
  if (finished_domain.train.empty()) {
    throw NoPositivePairs("memory update: domain '" + finished_domain.name +
                          "' has an empty train split");
  }
  const int new_domain = finished_domain.train.front().domain_id;

  const PairIndex pairs = mine_pairs(finished_domain.train, finished_domain.thresholds);
  std::vector<int> eligible;  // anchors that have at least one positive
  for (std::size_t i = 0; i < finished_domain.train.size(); ++i) {
    if (!pairs.positives[i].empty()) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty()) {
    throw NoPositivePairs("memory update: domain '" + finished_domain.name +
                          "' has no sample with a positive");
  }

  Rng rng = make_rng(derive_seed(rng_seed_, "memory-update",
                                 static_cast<std::uint64_t>(updates_done_)));
  ++updates_done_;
  if (std::find(domain_order_.begin(), domain_order_.end(), new_domain) == domain_order_.end()) {
    domain_order_.push_back(new_domain);
  }

  // Per-domain quotas: R pairs split as evenly as possible, earliest-seen
  // domains taking the remainder.
  const int r = pair_capacity();
  const int t = static_cast<int>(domain_order_.size());
  std::map<int, int> quota;
  for (int d = 0; d < t; ++d) quota[domain_order_[d]] = r / t + (d < r % t ? 1 : 0);

  // Shrink existing domains by uniform eviction down to quota.
  for (int d : domain_order_) {
    if (d == new_domain) continue;
    std::vector<int> held;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].domain_id == d) held.push_back(static_cast<int>(i));
    }
    int excess = static_cast<int>(held.size()) - quota[d];
    std::vector<int> evict;
    while (excess > 0) {
      const auto pick = uniform_int(rng, 0, static_cast<std::int64_t>(held.size()) - 1);
      evict.push_back(held[pick]);
      held.erase(held.begin() + pick);
      --excess;
    }
    std::sort(evict.rbegin(), evict.rend());
    for (int i : evict) entries_.erase(entries_.begin() + i);
  }

  // Fill the new domain's quota with unique-cloud pairs.
  std::unordered_set<std::int64_t> used;  // sample_ids already stored
  std::vector<int> pool = eligible;
  int want = quota[new_domain];
  while (want > 0 && !pool.empty()) {
    const auto slot = uniform_int(rng, 0, static_cast<std::int64_t>(pool.size()) - 1);
    const int a = pool[slot];
    std::vector<int> partners;
    for (int p : pairs.positives[a]) {
      if (!used.count(finished_domain.train[p].sample_id)) partners.push_back(p);
    }
    if (partners.empty()) {
      // Anchor can no longer form a fresh pair; retire it from the pool.
      pool.erase(pool.begin() + slot);
      continue;
    }
    const int p = partners[uniform_int(rng, 0, static_cast<std::int64_t>(partners.size()) - 1)];
    MemoryEntry e;
    e.anchor = finished_domain.train[a];
    e.positive = finished_domain.train[p];
    e.domain_id = new_domain;
    entries_.push_back(std::move(e));
    used.insert(finished_domain.train[a].sample_id);
    used.insert(finished_domain.train[p].sample_id);
    pool.erase(pool.begin() + slot);
    // The partner must not anchor another pair either (cloud uniqueness).
    const auto it = std::find(pool.begin(), pool.end(), p);
    if (it != pool.end()) pool.erase(it);
    --want;
  }
}

std::vector<MemoryEntry> MemoryBank::draw(int count, std::uint64_t seed) const {
  if (count < 0 || count > size()) {
    throw InsufficientEntries("memory draw: requested " + std::to_string(count) + " of " +
                              std::to_string(size()) + " entries");
  }
  std::vector<int> idx(entries_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng = make_rng(seed);
  // Partial Fisher-Yates: only the first `count` slots are needed.
  for (int i = 0; i < count; ++i) {
    const auto j = uniform_int(rng, i, static_cast<std::int64_t>(idx.size()) - 1);
    std::swap(idx[i], idx[j]);
  }
  std::vector<MemoryEntry> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(entries_[idx[i]]);
  return out;
}

std::map<int, int> MemoryBank::per_domain_counts() const {
  std::map<int, int> counts;
  for (const MemoryEntry& e : entries_) ++counts[e.domain_id];
  return counts;
}

void save_memory(const MemoryBank& bank,
                 const std::map<int, std::filesystem::path>& source_by_domain,
                 const std::filesystem::path& path) {
  json rows = json::array();
  for (const MemoryEntry& e : bank.entries()) {
    const auto src = source_by_domain.find(e.domain_id);
    if (src == source_by_domain.end()) {
      throw InvalidSpec("save_memory: no source path for domain " +
                        std::to_string(e.domain_id));
    }
    rows.push_back(json{{"domain", e.domain_id},
                        {"anchor", e.anchor.sample_id},
                        {"positive", e.positive.sample_id},
                        {"source", src->second.string()}});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << rows.dump(2) << "\n";
  if (!os) throw FormatError(path.string() + ": write failed");
}

MemoryBank load_memory(const std::filesystem::path& path, int capacity_clouds,
                       std::uint64_t rng_seed, int updates_done) {
  std::ifstream is(path);
  if (!is) throw FormatError(path.string() + ": cannot open for reading");
  json rows;
  try {
    is >> rows;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!rows.is_array()) throw FormatError(path.string() + ": expected a JSON array");

  // Cache each source dataset; entries index into its train split by id.
  std::map<std::string, DomainDataset> sources;
  std::vector<MemoryEntry> entries;
  for (const json& row : rows) {
    MemoryEntry e;
    std::string source;
    std::int64_t anchor_id, positive_id;
    try {
      e.domain_id = row.at("domain").get<int>();
      anchor_id = row.at("anchor").get<std::int64_t>();
      positive_id = row.at("positive").get<std::int64_t>();
      source = row.at("source").get<std::string>();
    } catch (const json::exception& ex) {
      throw FormatError(path.string() + ": " + ex.what());
    }
    auto it = sources.find(source);
    if (it == sources.end()) {
      // Sources are index paths; the dataset manifest lives beside the index.
      std::filesystem::path root(source);
      if (!std::filesystem::is_directory(root) && root.extension() != ".json") {
        root = root.parent_path();
      }
      it = sources.emplace(source, load_dataset(root, e.domain_id)).first;
    }
    auto find_sample = [&](std::int64_t id) -> const Sample& {
      for (const Sample& s : it->second.train) {
        if (s.sample_id == id) return s;
      }
      throw MissingIndexEntry(path.string() + ": sample " + std::to_string(id) +
                              " not in train split of " + source);
    };
    e.anchor = find_sample(anchor_id);
    e.positive = find_sample(positive_id);
    e.anchor.domain_id = e.domain_id;
    e.positive.domain_id = e.domain_id;
    entries.push_back(std::move(e));
  }
  return MemoryBank(capacity_clouds, rng_seed, std::move(entries), updates_done);
}

}  // namespace pcpr
