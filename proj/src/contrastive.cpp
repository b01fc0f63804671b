#include "fcl/contrastive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fcl {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset + 4 > bytes.size()) throw std::runtime_error("decode_bank: truncated message");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  offset += 4;
  return v;
}

void require_unit(std::span<const double> v, const char* what) {
  if (std::abs(l2_norm(v) - 1.0) > 1e-6) throw DegenerateVectorError(std::string(what) + " is not unit-norm");
}

}  // namespace

void MemoryBank::push(FeatureVector feat) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(feat));
}

MemoryBank bank_push(MemoryBank bank, FeatureVector feat) {
  bank.push(std::move(feat));
  return bank;
}

FeaturePool aggregate_banks(const MemoryBank& local, std::span<const MemoryBank> remote) {
  std::size_t total = local.size();
  for (const auto& b : remote) total += b.size();
  FeaturePool pool;
  pool.reserve(total);
  pool.insert(pool.end(), local.entries().begin(), local.entries().end());
  for (const auto& b : remote) pool.insert(pool.end(), b.entries().begin(), b.entries().end());
  return pool;
}

std::vector<std::size_t> sample_indices(std::size_t pool_size, std::size_t k, Rng& rng) {
  if (k > pool_size) {
    throw std::invalid_argument("sample_negatives: cannot draw " + std::to_string(k) + " from a pool of " +
                                std::to_string(pool_size));
  }
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

FeaturePool sample_negatives(std::span<const FeatureVector> pool, std::size_t k, Rng& rng) {
  FeaturePool out;
  out.reserve(k);
  for (std::size_t i : sample_indices(pool.size(), k, rng)) out.push_back(pool[i]);
  return out;
}

void LossConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("loss config: temperature must be > 0");
  }
  if (bank_size < 1) throw std::invalid_argument("loss config: bank_size must be >= 1");
}

LossResult local_contrastive_loss(std::span<const double> q, std::span<const FeatureVector> positives,
                                  std::span<const FeatureVector> negatives, const LossConfig& cfg) {
  if (positives.empty()) throw std::invalid_argument("contrastive loss: positive set is empty");
  const double inv_tau = 1.0 / cfg.temperature;
  const std::size_t d = q.size();

  // Shared negative logits; shift by their max for a stable log-sum-exp.
  std::vector<double> neg_logits(negatives.size());
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < negatives.size(); ++n) {
    neg_logits[n] = dot(q, negatives[n].embedding) * inv_tau;
    shift = std::max(shift, neg_logits[n]);
  }
  for (const auto& k : positives) shift = std::max(shift, dot(q, k.embedding) * inv_tau);

  double neg_sum = 0.0;
  for (double s : neg_logits) neg_sum += std::exp(s - shift);

  LossResult result;
  result.grad.assign(d, 0.0);
  std::vector<double> neg_weight(negatives.size(), 0.0);
  for (const auto& k : positives) {
    const double pos_logit = dot(q, k.embedding) * inv_tau;
    const double pos_exp = std::exp(pos_logit - shift);
    const double denom = pos_exp + neg_sum;
    result.loss += -(pos_logit - shift) + std::log(denom);
    // dL_k/dq = (1/tau) [ (p+ - 1) k+ + sum_n p_n n ]
    const double coeff = (pos_exp / denom - 1.0) * inv_tau;
    for (std::size_t i = 0; i < d; ++i) result.grad[i] += coeff * k.embedding[i];
    for (std::size_t n = 0; n < negatives.size(); ++n) neg_weight[n] += std::exp(neg_logits[n] - shift) / denom;
  }
  for (std::size_t n = 0; n < negatives.size(); ++n) {
    const double w = neg_weight[n] * inv_tau;
    for (std::size_t i = 0; i < d; ++i) result.grad[i] += w * negatives[n].embedding[i];
  }
  const double scale = 1.0 / static_cast<double>(positives.size());
  result.loss *= scale;
  for (double& g : result.grad) g *= scale;
  if (!std::isfinite(result.loss)) throw NonFiniteError("contrastive loss is non-finite");
  return result;
}

FeaturePool remote_positives(int partition, std::span<const FeatureVector> sampled) {
  FeaturePool out;
  for (const auto& f : sampled) {
    if (f.partition == partition) out.push_back(f);
  }
  return out;
}

LossResult gsm_loss(std::span<const double> q, std::span<const FeatureVector> positives,
                    std::span<const FeatureVector> remote, std::span<const FeatureVector> negatives,
                    const LossConfig& cfg) {
  LossResult result = local_contrastive_loss(q, positives, negatives, cfg);
  if (!remote.empty()) {
    const LossResult r = local_contrastive_loss(q, remote, negatives, cfg);
    result.loss += r.loss;
    for (std::size_t i = 0; i < result.grad.size(); ++i) result.grad[i] += r.grad[i];
  }
  return result;
}

LossResult byol_loss(std::span<const double> z, std::span<const double> target) {
  if (z.size() != target.size()) throw ShapeError("byol_loss: dimension mismatch");
  const double nz = l2_norm(z);
  const double nt = l2_norm(target);
  if (!(nz > kNormEpsilon) || !(nt > kNormEpsilon)) {
    throw DegenerateVectorError("byol_loss: zero-norm input");
  }
  const double cosine = dot(z, target) / (nz * nt);
  LossResult result;
  result.loss = 2.0 - 2.0 * cosine;
  // d/dz [-2 cos] = -2 ( t/(|z||t|) - cos z/|z|^2 )
  result.grad.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    result.grad[i] = -2.0 * (target[i] / (nz * nt) - cosine * z[i] / (nz * nz));
  }
  return result;
}

std::size_t bank_wire_bytes(std::size_t count, std::size_t d_feat) {
  return kBankHeaderBytes + count * (kFeatureTagBytes + d_feat * kWireBytesPerValue);
}

std::vector<std::uint8_t> encode_bank(int client_id, const MemoryBank& bank, std::size_t d_feat) {
  std::vector<std::uint8_t> out;
  out.reserve(bank_wire_bytes(bank.size(), d_feat));
  put_u32(out, static_cast<std::uint32_t>(client_id));
  put_u32(out, static_cast<std::uint32_t>(bank.size()));
  put_u32(out, static_cast<std::uint32_t>(d_feat));
  for (const auto& f : bank.entries()) {
    if (f.embedding.size() != d_feat) throw ShapeError("encode_bank: feature dimension mismatch");
    put_u32(out, static_cast<std::uint32_t>(f.volume_id));
    put_u32(out, static_cast<std::uint32_t>(f.partition));
    for (double v : f.embedding) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

MemoryBank decode_bank(std::span<const std::uint8_t> bytes, std::size_t capacity) {
  std::size_t offset = 0;
  const auto client_id = static_cast<int>(get_u32(bytes, offset));
  const std::uint32_t count = get_u32(bytes, offset);
  const std::uint32_t d_feat = get_u32(bytes, offset);
  MemoryBank bank(std::max<std::size_t>(capacity, count));
  for (std::uint32_t e = 0; e < count; ++e) {
    FeatureVector f;
    f.client_id = client_id;
    f.volume_id = static_cast<int>(get_u32(bytes, offset));
    f.partition = static_cast<int>(get_u32(bytes, offset));
    f.embedding.resize(d_feat);
    for (auto& v : f.embedding) v = static_cast<double>(std::bit_cast<float>(get_u32(bytes, offset)));
    const double n = l2_norm(f.embedding);
    if (!(n > kNormEpsilon)) throw DegenerateVectorError("decode_bank: zero embedding");
    for (auto& v : f.embedding) v /= n;
    require_unit(f.embedding, "decoded embedding");
    bank.push(std::move(f));
  }
  if (offset != bytes.size()) throw std::runtime_error("decode_bank: trailing bytes");
  return bank;
}

}  // namespace fcl
