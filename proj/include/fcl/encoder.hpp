#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fcl/data.hpp"
#include "fcl/numerics.hpp"

namespace fcl {

class LayoutMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LayerShape {
  std::string name;
  Shape shape;
  bool operator==(const LayerShape&) const = default;
};

using Layout = std::vector<LayerShape>;

std::size_t layout_size(const Layout& layout);

/// Flat model parameters plus the map from the flat array to named layers.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(Layout layout, std::vector<double> values);
  /// All-zero parameters for `layout`.
  explicit ParamVector(Layout layout);

  const Layout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  bool compatible(const ParamVector& other) const { return layout_ == other.layout_; }

  /// Copy of layer `index` as a tensor with its declared shape.
  Tensor layer(std::size_t index) const;

  bool operator==(const ParamVector&) const = default;

 private:
  Layout layout_;
  std::vector<double> values_;
};

/// Throws LayoutMismatchError unless `a` and `b` share a layout.
void require_compatible(const ParamVector& a, const ParamVector& b, const char* what);

struct ModelDims {
  int input = 256;            ///< flattened slice, H * W
  int hidden = 64;
  int feat = 32;              ///< d_feat
  int predictor_hidden = 32;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

Layout encoder_layout(const ModelDims& dims);
Layout predictor_layout(const ModelDims& dims);

/// He-initialized weights, zero biases.
ParamVector init_encoder(const ModelDims& dims, Rng& rng);
ParamVector init_predictor(const ModelDims& dims, Rng& rng);

/// Online network: encoder f_theta followed by predictor q_theta.
struct OnlineNetwork {
  ParamVector encoder;
  ParamVector predictor;
  bool operator==(const OnlineNetwork&) const = default;
};

/// Target network: an encoder with the online encoder's layout.
struct TargetNetwork {
  ParamVector encoder;
  bool operator==(const TargetNetwork&) const = default;
};

/// Unit-norm embedding tagged with where its image came from.
struct FeatureVector {
  std::vector<double> embedding;
  int client_id = 0;
  int volume_id = 0;
  int partition = 0;
  bool operator==(const FeatureVector&) const = default;
};

/// Records a two-layer MLP (affine, relu, affine[, l2_normalize]) on a tape.
struct MlpTrace {
  Var output;
  std::vector<Var> params;  ///< one per layout entry, in layout order
};

MlpTrace trace_mlp(GradTape& tape, const ParamVector& params, Var input, bool normalize_output);

/// Gathers the tape gradients of a traced MLP into a flat ParamVector.
ParamVector gather_gradient(const GradTape& tape, const MlpTrace& trace, const ParamVector& like);

/// Embeds each row of `images` ([batch, input]); rows of the result have unit norm.
Tensor embed_batch(const ParamVector& encoder, const Tensor& images);

/// Flattens a batch of equally shaped 2D images into a [batch, H*W] matrix.
Tensor stack_images(std::span<const Tensor> images);

/// Embeds one slice and tags the embedding with the slice's metadata.
FeatureVector forward_embed(const ParamVector& encoder, const SliceSample& sample);

/// m * target + (1 - m) * online, elementwise.
ParamVector ema_update(const ParamVector& target, const ParamVector& online, double m);

/// In-place form of ema_update used inside training loops.
void ema_update_inplace(ParamVector& target, const ParamVector& online, double m);

/// Mean absolute difference over all parameters.
double param_l1_distance(const ParamVector& a, const ParamVector& b);

/// Values cross the wire as float32.
inline constexpr std::size_t kWireBytesPerValue = 4;

std::size_t wire_bytes(const ParamVector& params);

/// Layout header followed by little-endian float32 values.
void write_params(std::ostream& out, const ParamVector& params);
ParamVector read_params(std::istream& in);

}  // namespace fcl
