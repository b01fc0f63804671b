#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fcl/protocol.hpp"

namespace fcl {

namespace {

struct LabeledFeatures {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
};

void embed_volume(const ParamVector& encoder, const Volume& vol, int partitions, LabeledFeatures& out) {
  std::vector<Tensor> slices;
  for (int z = 0; z < vol.depth; ++z) slices.push_back(vol.slice(z));
  const Tensor emb = embed_batch(encoder, stack_images(slices));
  for (int z = 0; z < vol.depth; ++z) {
    const auto row = emb.row(static_cast<std::size_t>(z));
    out.x.emplace_back(row.begin(), row.end());
    out.y.push_back(partition_of(z, vol.depth, partitions));
  }
}

}  // namespace

// Volumes are split in half by a seeded shuffle; the classifier is fit by
// full-batch gradient descent on standardized features.
double linear_probe(const ParamVector& encoder, const Cohort& cohort, int partitions, std::uint64_t seed,
                    const ProbeConfig& cfg) {
  std::vector<const Volume*> volumes;
  for (const auto& client : cohort) {
    for (const auto& vol : client) volumes.push_back(&vol);
  }
  if (volumes.size() < 2) throw std::invalid_argument("linear_probe: need at least 2 volumes");
  Rng rng = make_rng(seed, {0x9807E});
  std::shuffle(volumes.begin(), volumes.end(), rng);
  const std::size_t n_train = volumes.size() / 2;

  LabeledFeatures train, test;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    embed_volume(encoder, *volumes[i], partitions, i < n_train ? train : test);
  }
  if (cfg.shuffle_labels) std::shuffle(train.y.begin(), train.y.end(), rng);

  const std::size_t d = train.x.front().size();
  const auto k = static_cast<std::size_t>(partitions);

  std::vector<double> mean(d, 0.0), stdev(d, 0.0);
  for (const auto& row : train.x) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(train.x.size());
  for (const auto& row : train.x) {
    for (std::size_t j = 0; j < d; ++j) stdev[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  for (double& s : stdev) s = std::sqrt(s / static_cast<double>(train.x.size())) + 1e-8;
  auto standardize = [&](LabeledFeatures& f) {
    for (auto& row : f.x) {
      for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean[j]) / stdev[j];
    }
  };
  standardize(train);
  standardize(test);

  // weights[c * (d + 1) + j], last column is the bias.
  std::vector<double> w(k * (d + 1), 0.0);
  std::vector<double> grad(w.size());
  std::vector<double> logits(k);
  auto scores = [&](const std::vector<double>& x) {
    for (std::size_t c = 0; c < k; ++c) {
      const double* wc = w.data() + c * (d + 1);
      double s = wc[d];
      for (std::size_t j = 0; j < d; ++j) s += wc[j] * x[j];
      logits[c] = s;
    }
  };

  const double inv_n = 1.0 / static_cast<double>(train.x.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < train.x.size(); ++i) {
      scores(train.x[i]);
      const double top = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - top));
      for (std::size_t c = 0; c < k; ++c) {
        const double err = logits[c] / z - (static_cast<int>(c) == train.y[i] ? 1.0 : 0.0);
        double* gc = grad.data() + c * (d + 1);
        for (std::size_t j = 0; j < d; ++j) gc[j] += err * train.x[i][j] * inv_n;
        gc[d] += err * inv_n;
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.learning_rate * (grad[i] + cfg.l2 * w[i]);
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.x.size(); ++i) {
    scores(test.x[i]);
    const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best == test.y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.x.size());
}

}  // namespace fcl
