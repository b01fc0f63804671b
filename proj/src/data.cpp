#include "fcl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>

namespace fcl {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

double gaussian_blob(double y, double x, double cy, double cx, double radius) {
  const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
  return std::exp(-d2 / (2.0 * radius * radius));
}

// Bilinear sample with edge clamping.
double sample_bilinear(const Tensor& img, double y, double x) {
  const int h = static_cast<int>(img.dim(0));
  const int w = static_cast<int>(img.dim(1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
  const double bottom = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
  return top * (1 - fy) + bottom * fy;
}

}  // namespace

Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto s : stream) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

void DataConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("data config: " + msg); };
  if (n_clients < 1) fail("n_clients must be >= 1");
  if (volumes_per_client < 2) fail("volumes_per_client must be >= 2");
  if (depth < 2 || height < 2 || width < 2) fail("depth, height and width must be >= 2");
  if (partitions < 2) fail("partitions must be >= 2");
  if (partitions > depth) fail("partitions must not exceed depth");
}

void AugmentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("augment config: " + msg); };
  if (!(min_crop_scale > 0.0 && min_crop_scale <= max_crop_scale && max_crop_scale <= 1.0)) {
    fail("crop scales must satisfy 0 < min_crop_scale <= max_crop_scale <= 1");
  }
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) fail("flip_probability must be in [0,1]");
  if (!(noise_sigma >= 0.0 && std::isfinite(noise_sigma))) fail("noise_sigma must be >= 0");
}

Tensor Volume::slice(int z) const {
  if (z < 0 || z >= depth) throw std::out_of_range("slice index " + std::to_string(z));
  const auto plane = static_cast<std::size_t>(height) * width;
  const auto begin = voxels.begin() + static_cast<std::ptrdiff_t>(plane * z);
  return Tensor({static_cast<std::size_t>(height), static_cast<std::size_t>(width)},
                std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(plane)));
}

int partition_of(int slice_index, int depth, int partitions) {
  return static_cast<int>(static_cast<long long>(slice_index) * partitions / depth);
}

// Each partition s owns a motif blob whose radius shrinks with s. Subjects
// translate it by up to half the image in both axes, so position says little
// about the partition and size carries the cue. Each slice also gets a randomly
// placed distractor blob plus background noise.
Cohort generate_cohort(const DataConfig& cfg) {
  cfg.validate();
  const int S = cfg.partitions;
  const double H = cfg.height;
  const double W = cfg.width;
  Cohort cohort(static_cast<std::size_t>(cfg.n_clients));
  for (int c = 0; c < cfg.n_clients; ++c) {
    for (int v = 0; v < cfg.volumes_per_client; ++v) {
      Rng rng = make_rng(cfg.seed, {0xC0407ULL, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(v)});
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::normal_distribution<double> noise(0.0, 0.04);

      const double shift_x = (unit(rng) - 0.5) * 0.5 * W;
      const double shift_y = (unit(rng) - 0.5) * 0.5 * H;
      const double radius_scale = 0.85 + 0.3 * unit(rng);
      const double contrast = 0.55 + 0.35 * unit(rng);
      const double background = 0.05 + 0.1 * unit(rng);

      Volume vol;
      vol.depth = cfg.depth;
      vol.height = cfg.height;
      vol.width = cfg.width;
      vol.client_id = c;
      vol.subject_id = c * cfg.volumes_per_client + v;
      vol.voxels.resize(static_cast<std::size_t>(cfg.depth) * cfg.height * cfg.width);

      for (int z = 0; z < cfg.depth; ++z) {
        const int s = partition_of(z, cfg.depth, S);
        const int first = (s * cfg.depth + S - 1) / S;
        const int last = ((s + 1) * cfg.depth + S - 1) / S - 1;
        const double within = last > first ? static_cast<double>(z - first) / (last - first) : 0.5;
        const double frac = S > 1 ? static_cast<double>(s) / (S - 1) : 0.5;

        const double cy = H * (0.5 + 0.1 * (frac - 0.5)) + shift_y + 0.04 * H * (within - 0.5);
        const double cx = 0.5 * W + shift_x;
        const double radius = H * (0.06 + 0.2 * (1.0 - frac)) * radius_scale;

        const double dy = H * (0.15 + 0.7 * unit(rng));
        const double dx = W * (0.15 + 0.7 * unit(rng));
        const double d_radius = H * (0.06 + 0.08 * unit(rng));
        const double d_contrast = 0.3 + 0.4 * unit(rng);

        for (int y = 0; y < cfg.height; ++y) {
          for (int x = 0; x < cfg.width; ++x) {
            double value = background + contrast * gaussian_blob(y, x, cy, cx, radius) +
                           d_contrast * gaussian_blob(y, x, dy, dx, d_radius) + noise(rng);
            const auto idx = (static_cast<std::size_t>(z) * cfg.height + y) * cfg.width + x;
            vol.voxels[idx] = std::clamp(value, 0.0, 1.0);
          }
        }
      }
      cohort[static_cast<std::size_t>(c)].push_back(std::move(vol));
    }
  }
  return cohort;
}

SliceSample sample_slice(const std::vector<Volume>& volumes, int volume_index, int s, int partitions,
                         Rng& rng) {
  const Volume& vol = volumes.at(static_cast<std::size_t>(volume_index));
  if (s < 0 || s >= partitions) throw std::out_of_range("partition " + std::to_string(s));
  const int first = (s * vol.depth + partitions - 1) / partitions;
  const int last = ((s + 1) * vol.depth + partitions - 1) / partitions - 1;
  if (last < first) throw std::invalid_argument("partition " + std::to_string(s) + " holds no slices");
  std::uniform_int_distribution<int> pick(first, last);
  const int z = pick(rng);
  return SliceSample{vol.slice(z), vol.client_id, vol.subject_id, z, partition_of(z, vol.depth, partitions)};
}

std::pair<SliceSample, SliceSample> sample_partition_pair(const std::vector<Volume>& volumes, int s,
                                                          int partitions, Rng& rng) {
  const int n = static_cast<int>(volumes.size());
  if (n < 2) throw std::invalid_argument("sample_partition_pair: need at least 2 volumes, got " + std::to_string(n));
  std::uniform_int_distribution<int> first(0, n - 1);
  std::uniform_int_distribution<int> other(0, n - 2);
  const int i = first(rng);
  int j = other(rng);
  if (j >= i) ++j;
  SliceSample a = sample_slice(volumes, i, s, partitions, rng);
  SliceSample b = sample_slice(volumes, j, s, partitions, rng);
  return {std::move(a), std::move(b)};
}

Tensor augment_view(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (image.rank() != 2) throw ShapeError("augment: expected a 2D image, got " + shape_to_string(image.shape()));
  const int h = static_cast<int>(image.dim(0));
  const int w = static_cast<int>(image.dim(1));
  const double min_side = std::sqrt(cfg.min_crop_scale);
  if (std::floor(min_side * h) < kMinCropSide || std::floor(min_side * w) < kMinCropSide) {
    throw std::invalid_argument("augment: image " + shape_to_string(image.shape()) +
                                " is smaller than the minimum crop");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double scale = cfg.min_crop_scale + (cfg.max_crop_scale - cfg.min_crop_scale) * unit(rng);
  const double side = std::sqrt(scale);
  const double crop_h = std::max<double>(kMinCropSide, std::floor(side * h));
  const double crop_w = std::max<double>(kMinCropSide, std::floor(side * w));
  const double y0 = std::floor(unit(rng) * (h - crop_h + 1));
  const double x0 = std::floor(unit(rng) * (w - crop_w + 1));
  const bool flip = unit(rng) < cfg.flip_probability;

  Tensor out(image.shape());
  const double sy = h > 1 ? (crop_h - 1) / (h - 1) : 0.0;
  const double sx = w > 1 ? (crop_w - 1) / (w - 1) : 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int src_x = flip ? w - 1 - x : x;
      out.at(y, x) = sample_bilinear(image, y0 + y * sy, x0 + src_x * sx);
    }
  }
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (double& v : out.values()) v += noise(rng);
  }
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::pair<Tensor, Tensor> augment(const Tensor& image, Rng& rng, const AugmentConfig& cfg) {
  Tensor a = augment_view(image, cfg, rng);
  Tensor b = augment_view(image, cfg, rng);
  return {std::move(a), std::move(b)};
}

double pixel_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pixel_correlation: size mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void write_cohort(std::ostream& out, const DataConfig& cfg, const Cohort& cohort) {
  out.write("FCLV", 4);
  for (int v : {cfg.n_clients, cfg.volumes_per_client, cfg.depth, cfg.height, cfg.width, cfg.partitions}) {
    write_u32(out, static_cast<std::uint32_t>(v));
  }
  write_u64(out, cfg.seed);
  for (const auto& client : cohort) {
    for (const auto& vol : client) {
      for (double v : vol.voxels) write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

}  // namespace fcl
