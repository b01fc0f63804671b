#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "fcl/data.hpp"
#include "fcl/encoder.hpp"

namespace fcl {

/// Fixed-capacity FIFO of features; a push into a full bank evicts the oldest entry.
class MemoryBank {
 public:
  explicit MemoryBank(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(FeatureVector feat);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool full() const { return entries_.size() == capacity_; }
  const std::deque<FeatureVector>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<FeatureVector> entries_;
};

MemoryBank bank_push(MemoryBank bank, FeatureVector feat);

using FeaturePool = std::vector<FeatureVector>;

/// Q = Q_local ∪ remote banks, local entries first, then remotes in the given order.
FeaturePool aggregate_banks(const MemoryBank& local, std::span<const MemoryBank> remote);

/// K distinct indices into a pool of `pool_size`, uniform without replacement.
std::vector<std::size_t> sample_indices(std::size_t pool_size, std::size_t k, Rng& rng);

/// Q': K entries of Q drawn uniformly without replacement. Throws if |Q| < K.
FeaturePool sample_negatives(std::span<const FeatureVector> pool, std::size_t k, Rng& rng);

struct LossConfig {
  double temperature = 0.1;  ///< tau
  int bank_size = 64;        ///< K

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

/// A loss value and its gradient with respect to the query vector.
struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// -1/|P| * sum_{k+ in P} log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_{n in Q'} e^{q.n/tau}) ).
/// Positives and negatives are treated as constants.
LossResult local_contrastive_loss(std::span<const double> q, std::span<const FeatureVector> positives,
                                  std::span<const FeatureVector> negatives, const LossConfig& cfg);

/// Lambda(q): entries of the sampled pool that share q's partition.
FeaturePool remote_positives(int partition, std::span<const FeatureVector> sampled);

/// Local term plus the remote term over Lambda(q); the remote term is dropped when Lambda(q) is empty.
LossResult gsm_loss(std::span<const double> q, std::span<const FeatureVector> positives,
                    std::span<const FeatureVector> remote, std::span<const FeatureVector> negatives,
                    const LossConfig& cfg);

/// 2 - 2 cos(z, z'). Gradient flows to z only; z' is a stop-gradient target.
LossResult byol_loss(std::span<const double> z, std::span<const double> target);

// --- feature-exchange wire format ---
//
// header:  client_id (u32) | count (u32) | d_feat (u32)
// entry:   volume_id (u32) | partition (u32) | d_feat x float32
// All little-endian.

inline constexpr std::size_t kBankHeaderBytes = 12;
inline constexpr std::size_t kFeatureTagBytes = 8;

std::size_t bank_wire_bytes(std::size_t count, std::size_t d_feat);

std::vector<std::uint8_t> encode_bank(int client_id, const MemoryBank& bank, std::size_t d_feat);

/// Decodes a bank; embeddings are renormalized after the float32 round trip.
MemoryBank decode_bank(std::span<const std::uint8_t> bytes, std::size_t capacity);

}  // namespace fcl
