#include "fcl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace fcl {

namespace {

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// View of a rank-1 or rank-2 tensor as [rows, cols].
struct MatrixView {
  std::size_t rows;
  std::size_t cols;
};

MatrixView as_matrix(const Tensor& t, const char* what) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(std::string(what) + ": expected rank 1 or 2, got " + shape_to_string(t.shape()));
}

void check_affine_shapes(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto in = as_matrix(input, "affine input");
  if (weight.rank() != 2 || bias.rank() != 1 || weight.dim(0) != in.cols ||
      bias.dim(0) != weight.dim(1)) {
    throw ShapeError("affine: input " + shape_to_string(input.shape()) + ", weight " +
                     shape_to_string(weight.shape()) + ", bias " + shape_to_string(bias.shape()) +
                     " do not conform");
  }
}

Tensor affine_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  check_affine_shapes(input, weight, bias);
  const auto in = as_matrix(input, "affine input");
  const std::size_t out_cols = weight.dim(1);
  Shape out_shape = input.rank() == 1 ? Shape{out_cols} : Shape{in.rows, out_cols};
  Tensor out(std::move(out_shape));
  const auto x = input.data();
  const auto w = weight.data();
  const auto b = bias.data();
  auto y = out.data();
  for (std::size_t r = 0; r < in.rows; ++r) {
    double* yr = y.data() + r * out_cols;
    std::copy(b.begin(), b.end(), yr);
    for (std::size_t k = 0; k < in.cols; ++k) {
      const double xv = x[r * in.cols + k];
      if (xv == 0.0) continue;
      const double* wk = w.data() + k * out_cols;
      for (std::size_t c = 0; c < out_cols; ++c) yr[c] += xv * wk[c];
    }
  }
  require_finite(out.data(), "affine output");
  return out;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.shape());
  std::transform(input.data().begin(), input.data().end(), out.data().begin(),
                 [](double v) { return v > 0.0 ? v : 0.0; });
  return out;
}

// Returns the normalized tensor and fills `norms` with one norm per row.
Tensor normalize_forward(const Tensor& input, std::vector<double>& norms) {
  const auto m = as_matrix(input, "l2_normalize input");
  Tensor out(input.shape());
  norms.assign(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto src = input.data().subspan(r * m.cols, m.cols);
    const double n = l2_norm(src);
    if (!(n > kNormEpsilon)) {
      throw DegenerateVectorError("l2_normalize: norm " + std::to_string(n) +
                                  " is below the degeneracy threshold");
    }
    norms[r] = n;
    auto dst = out.data().subspan(r * m.cols, m.cols);
    for (std::size_t c = 0; c < m.cols; ++c) dst[c] = src[c] / n;
  }
  return out;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " does not hold " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::span<const double> Tensor::row(std::size_t r) const {
  return data().subspan(r * shape_.at(1), shape_[1]);
}

std::span<double> Tensor::row(std::size_t r) { return data().subspan(r * shape_.at(1), shape_[1]); }

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " contains a non-finite value");
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// --- tape ---------------------------------------------------------------

Var GradTape::push(Tensor value, std::function<void(GradTape&, std::size_t)> backward) {
  Tensor grad(value.shape());
  nodes_.push_back(Node{std::move(value), std::move(grad), std::move(backward)});
  return Var{nodes_.size() - 1};
}

Var GradTape::constant(Tensor value) { return push(std::move(value), nullptr); }

Var GradTape::parameter(Tensor value) { return push(std::move(value), nullptr); }

const Tensor& GradTape::value(Var v) const { return nodes_.at(v.id).value; }

const Tensor& GradTape::grad(Var v) const { return nodes_.at(v.id).grad; }

Var GradTape::affine(Var input, Var weight, Var bias) {
  Tensor out = affine_forward(value(input), value(weight), value(bias));
  return push(std::move(out), [input, weight, bias](GradTape& tape, std::size_t self) {
    const Tensor& x = tape.value(input);
    const Tensor& w = tape.value(weight);
    const auto m = as_matrix(x, "affine input");
    const std::size_t out_cols = w.dim(1);
    const auto gy = tape.nodes_[self].grad.data();
    auto gx = tape.grad_mut(input.id).data();
    auto gw = tape.grad_mut(weight.id).data();
    auto gb = tape.grad_mut(bias.id).data();
    const auto xv = x.data();
    const auto wv = w.data();
    for (std::size_t r = 0; r < m.rows; ++r) {
      const double* gyr = gy.data() + r * out_cols;
      for (std::size_t c = 0; c < out_cols; ++c) gb[c] += gyr[c];
      for (std::size_t k = 0; k < m.cols; ++k) {
        const double* wk = wv.data() + k * out_cols;
        double* gwk = gw.data() + k * out_cols;
        const double xk = xv[r * m.cols + k];
        double acc = 0.0;
        for (std::size_t c = 0; c < out_cols; ++c) {
          acc += gyr[c] * wk[c];
          gwk[c] += xk * gyr[c];
        }
        gx[r * m.cols + k] += acc;
      }
    }
  });
}

Var GradTape::relu(Var input) {
  Tensor out = relu_forward(value(input));
  return push(std::move(out), [input](GradTape& tape, std::size_t self) {
    const auto x = tape.value(input).data();
    const auto gy = tape.nodes_[self].grad.data();
    auto gx = tape.grad_mut(input.id).data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) gx[i] += gy[i];
    }
  });
}

Var GradTape::l2_normalize(Var input) {
  std::vector<double> norms;
  Tensor out = normalize_forward(value(input), norms);
  return push(std::move(out), [input, norms = std::move(norms)](GradTape& tape, std::size_t self) {
    const Tensor& y = tape.nodes_[self].value;
    const auto m = as_matrix(y, "l2_normalize output");
    const auto gy = tape.nodes_[self].grad.data();
    auto gx = tape.grad_mut(input.id).data();
    // dx = (g - y (y.g)) / |x|
    for (std::size_t r = 0; r < m.rows; ++r) {
      const auto yr = y.data().subspan(r * m.cols, m.cols);
      const auto gr = gy.subspan(r * m.cols, m.cols);
      const double proj = dot(yr, gr);
      for (std::size_t c = 0; c < m.cols; ++c) {
        gx[r * m.cols + c] += (gr[c] - yr[c] * proj) / norms[r];
      }
    }
  });
}

void GradTape::backward(Var out, const Tensor& seed) {
  Node& root = nodes_.at(out.id);
  if (seed.shape() != root.value.shape()) {
    throw ShapeError("backward: seed shape " + shape_to_string(seed.shape()) +
                     " does not match output " + shape_to_string(root.value.shape()));
  }
  for (auto& node : nodes_) std::fill(node.grad.data().begin(), node.grad.data().end(), 0.0);
  std::copy(seed.data().begin(), seed.data().end(), root.grad.data().begin());
  for (std::size_t i = out.id + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
  for (std::size_t i = 0; i <= out.id; ++i) require_finite(nodes_[i].grad.data(), "gradient");
}

Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  return affine_forward(input, weight, bias);
}

Tensor relu(const Tensor& input) { return relu_forward(input); }

Tensor l2_normalize(const Tensor& input) {
  std::vector<double> norms;
  return normalize_forward(input, norms);
}

// --- gradient check -----------------------------------------------------

double grad_check(const Objective& f, const Tensor& point, const GradCheckOptions& options) {
  if (!(options.step >= 1e-7 && options.step <= 1e-3)) {
    throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-3]");
  }
  Tensor analytic(point.shape());
  const double f0 = f(point, &analytic);
  if (!std::isfinite(f0)) throw NonFiniteError("grad_check: objective is non-finite at the point");
  require_finite(analytic.data(), "grad_check analytic gradient");

  Tensor probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (options.skip && options.skip(point, i)) continue;
    const double x = point[i];
    probe[i] = x + options.step;
    const double up = f(probe, nullptr);
    probe[i] = x - options.step;
    const double down = f(probe, nullptr);
    probe[i] = x;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NonFiniteError("grad_check: objective is non-finite near coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace fcl
