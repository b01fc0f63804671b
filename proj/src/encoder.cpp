#include "fcl/encoder.hpp"

#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace fcl {

namespace {

constexpr char kParamMagic[4] = {'F', 'C', 'L', 'P'};

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Layout mlp_layout(const std::string& prefix, int in, int hidden, int out) {
  auto u = [](int v) { return static_cast<std::size_t>(v); };
  return {
      {prefix + ".fc1.weight", {u(in), u(hidden)}},
      {prefix + ".fc1.bias", {u(hidden)}},
      {prefix + ".fc2.weight", {u(hidden), u(out)}},
      {prefix + ".fc2.bias", {u(out)}},
  };
}

ParamVector init_he(Layout layout, Rng& rng) {
  ParamVector params(std::move(layout));
  std::size_t offset = 0;
  for (const auto& layer : params.layout()) {
    const std::size_t n = shape_size(layer.shape);
    if (layer.shape.size() == 2) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(layer.shape[0])));
      for (std::size_t i = 0; i < n; ++i) params.values()[offset + i] = dist(rng);
    }
    offset += n;
  }
  return params;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("read_params: truncated input");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& layer : layout) n += shape_size(layer.shape);
  return n;
}

ParamVector::ParamVector(Layout layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (layout_size(layout_) != values_.size()) {
    throw LayoutMismatchError("ParamVector: layout describes " + std::to_string(layout_size(layout_)) +
                              " values, got " + std::to_string(values_.size()));
  }
}

ParamVector::ParamVector(Layout layout) : layout_(std::move(layout)), values_(layout_size(layout_), 0.0) {}

Tensor ParamVector::layer(std::size_t index) const {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < index; ++i) offset += shape_size(layout_.at(i).shape);
  const auto& shape = layout_.at(index).shape;
  const auto begin = values_.begin() + static_cast<std::ptrdiff_t>(offset);
  return Tensor(shape, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(shape_size(shape))));
}

void require_compatible(const ParamVector& a, const ParamVector& b, const char* what) {
  if (!a.compatible(b)) throw LayoutMismatchError(std::string(what) + ": parameter layouts differ");
}

void ModelDims::validate() const {
  if (input < 1 || hidden < 1 || feat < 1 || predictor_hidden < 1) {
    throw std::invalid_argument("model dims must all be >= 1");
  }
}

Layout encoder_layout(const ModelDims& dims) { return mlp_layout("enc", dims.input, dims.hidden, dims.feat); }

Layout predictor_layout(const ModelDims& dims) {
  return mlp_layout("pred", dims.feat, dims.predictor_hidden, dims.feat);
}

ParamVector init_encoder(const ModelDims& dims, Rng& rng) { return init_he(encoder_layout(dims), rng); }

ParamVector init_predictor(const ModelDims& dims, Rng& rng) { return init_he(predictor_layout(dims), rng); }

MlpTrace trace_mlp(GradTape& tape, const ParamVector& params, Var input, bool normalize_output) {
  if (params.layout().size() != 4) throw LayoutMismatchError("trace_mlp: expected a 4-entry MLP layout");
  MlpTrace trace;
  for (std::size_t i = 0; i < 4; ++i) trace.params.push_back(tape.parameter(params.layer(i)));
  Var h = tape.relu(tape.affine(input, trace.params[0], trace.params[1]));
  Var out = tape.affine(h, trace.params[2], trace.params[3]);
  trace.output = normalize_output ? tape.l2_normalize(out) : out;
  return trace;
}

ParamVector gather_gradient(const GradTape& tape, const MlpTrace& trace, const ParamVector& like) {
  std::vector<double> flat;
  flat.reserve(like.size());
  for (Var p : trace.params) {
    const auto g = tape.grad(p).data();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return ParamVector(like.layout(), std::move(flat));
}

Tensor embed_batch(const ParamVector& encoder, const Tensor& images) {
  const Tensor h = relu(affine(images, encoder.layer(0), encoder.layer(1)));
  return l2_normalize(affine(h, encoder.layer(2), encoder.layer(3)));
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const std::size_t n = images.front().size();
  Tensor out({images.size(), n});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != images.front().shape()) {
      throw ShapeError("stack_images: image " + std::to_string(i) + " has shape " +
                       shape_to_string(images[i].shape()));
    }
    std::copy(images[i].data().begin(), images[i].data().end(), out.row(i).begin());
  }
  return out;
}

FeatureVector forward_embed(const ParamVector& encoder, const SliceSample& sample) {
  const Tensor flat = Tensor::vector(sample.image.values());
  const Tensor z = embed_batch(encoder, flat);
  return FeatureVector{z.values(), sample.client_id, sample.volume_id, sample.partition};
}

ParamVector ema_update(const ParamVector& target, const ParamVector& online, double m) {
  ParamVector out = target;
  ema_update_inplace(out, online, m);
  return out;
}

void ema_update_inplace(ParamVector& target, const ParamVector& online, double m) {
  require_compatible(target, online, "ema_update");
  if (!(m > 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: momentum must lie in (0, 1]");
  auto t = target.values();
  const auto o = online.values();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = m * t[i] + (1.0 - m) * o[i];
}

double param_l1_distance(const ParamVector& a, const ParamVector& b) {
  require_compatible(a, b, "param_l1_distance");
  if (a.size() == 0) return 0.0;
  double sum = 0.0;
  const auto x = a.values();
  const auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) sum += std::abs(x[i] - y[i]);
  return sum / static_cast<double>(a.size());
}

std::size_t wire_bytes(const ParamVector& params) { return params.size() * kWireBytesPerValue; }

void write_params(std::ostream& out, const ParamVector& params) {
  out.write(kParamMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(params.layout().size()));
  for (const auto& layer : params.layout()) {
    put_u32(out, static_cast<std::uint32_t>(layer.name.size()));
    out.write(layer.name.data(), static_cast<std::streamsize>(layer.name.size()));
    put_u32(out, static_cast<std::uint32_t>(layer.shape.size()));
    for (auto d : layer.shape) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (double v : params.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

ParamVector read_params(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kParamMagic)) {
    throw std::runtime_error("read_params: bad magic");
  }
  Layout layout(get_u32(in));
  for (auto& layer : layout) {
    layer.name.resize(get_u32(in));
    if (!in.read(layer.name.data(), static_cast<std::streamsize>(layer.name.size()))) {
      throw std::runtime_error("read_params: truncated layer name");
    }
    layer.shape.resize(get_u32(in));
    for (auto& d : layer.shape) d = get_u32(in);
  }
  std::vector<double> values(layout_size(layout));
  for (double& v : values) v = static_cast<double>(std::bit_cast<float>(get_u32(in)));
  return ParamVector(std::move(layout), std::move(values));
}

}  // namespace fcl
