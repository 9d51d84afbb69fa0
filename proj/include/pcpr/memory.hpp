#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "pcpr/data.hpp"
#include "pcpr/types.hpp"

namespace pcpr {

/// One replay exemplar: a stored positive pair from a finished domain. The
/// pair guarantees its anchor can always form a positive inside any batch
/// that contains the entry.
struct MemoryEntry {
  Sample anchor;
  Sample positive;
  int domain_id = 0;
};

/// Capacity-bounded replay store over past-domain positive pairs. Capacity
/// counts clouds, so at most capacity_clouds/2 pairs are held; after every
/// update the per-domain pair counts are balanced to within one, earliest
/// domains taking the remainder. All clouds in the bank are unique samples.
class MemoryBank {
 public:
  MemoryBank(int capacity_clouds, std::uint64_t rng_seed);

  /// Restores a bank mid-sequence (checkpoint resume): `updates_done` is the
  /// number of update() calls already applied, so later updates replay the
  /// same random stream they would have seen in an uninterrupted run.
  MemoryBank(int capacity_clouds, std::uint64_t rng_seed, std::vector<MemoryEntry> entries,
             int updates_done);

  /// Folds a finished domain in: rebalances existing domains down to their
  /// new quota by uniform eviction, then fills the new domain's quota with
  /// uniformly drawn positive pairs (anchor uniform over samples that have
  /// positives, partner uniform over that anchor's positives), never storing
  /// the same cloud twice. Deterministic given rng_seed and call order.
  void update(const DomainDataset& finished_domain);

  /// Uniform sample of `count` entries without replacement; deterministic in
  /// the seed. count == size() returns all entries in shuffled order.
  std::vector<MemoryEntry> draw(int count, std::uint64_t seed) const;

  const std::vector<MemoryEntry>& entries() const { return entries_; }
  int size() const { return static_cast<int>(entries_.size()); }
  int capacity_clouds() const { return capacity_clouds_; }
  int pair_capacity() const { return capacity_clouds_ / 2; }
  int updates_done() const { return updates_done_; }

  /// Pair count per domain_id, for invariant checks and reporting.
  std::map<int, int> per_domain_counts() const;

 private:
  int capacity_clouds_;
  std::uint64_t rng_seed_;
  std::vector<MemoryEntry> entries_;
  std::vector<int> domain_order_;  // domain_ids in first-seen order
  int updates_done_ = 0;
};

/// Replay-store manifest: JSON array of
/// {domain, anchor, positive, source} rows (sample ids plus the index path
/// of the source dataset), enough to rebuild the entries on resume.
void save_memory(const MemoryBank& bank,
                 const std::map<int, std::filesystem::path>& source_by_domain,
                 const std::filesystem::path& path);

/// Rebuilds entries from a manifest; clouds are re-read from each source
/// dataset's train split. capacity/seed/updates_done come from the caller
/// (they live in the training config and step index, not in the manifest).
MemoryBank load_memory(const std::filesystem::path& path, int capacity_clouds,
                       std::uint64_t rng_seed, int updates_done);

}  // namespace pcpr
