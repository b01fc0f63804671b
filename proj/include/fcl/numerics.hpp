#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcl {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateVectorError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Norm threshold below which a vector cannot be normalized.
inline constexpr double kNormEpsilon = 1e-12;

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::vector<double> data);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Row `r` of a rank-2 tensor.
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws NonFiniteError naming `what` if any value is NaN or infinite.
void require_finite(std::span<const double> values, const char* what);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape over the handful of ops the encoders and losses need.
///
/// Every op appends a node holding its output and a backward closure. backward()
/// walks the nodes in reverse insertion order, so adjoints are always complete
/// before a node propagates them to its inputs. A tape belongs to one forward
/// pass and is not shared across threads.
class GradTape {
 public:
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is retained after backward().
  Var parameter(Tensor value);

  /// input·weight + bias. Input is [in] or [batch, in]; weight [in, out]; bias [out].
  Var affine(Var input, Var weight, Var bias);
  /// Elementwise max(0, x); the subgradient at 0 is 0.
  Var relu(Var input);
  /// Normalizes a vector, or each row of a matrix, to unit l2 norm.
  Var l2_normalize(Var input);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out) with `seed` (same shape as out) and accumulates adjoints.
  void backward(Var out, const Tensor& seed);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(GradTape&, std::size_t)> backward;
  };

  Var push(Tensor value, std::function<void(GradTape&, std::size_t)> backward);
  Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

/// Tape-free forward ops, for inference paths.
Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor relu(const Tensor& input);
Tensor l2_normalize(const Tensor& input);

/// Objective evaluated at a point. When `grad` is non-null it is filled with
/// the analytic gradient (same shape as the point).
using Objective = std::function<double(const Tensor& point, Tensor* grad)>;

/// Coordinates for which the finite-difference check is skipped (e.g. kinks).
using SkipCoordinate = std::function<bool(const Tensor& point, std::size_t index)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double scale_floor = 1e-4;
  SkipCoordinate skip;
};

/// Max relative error between the analytic gradient of `f` at `point` and
/// its central finite difference.
double grad_check(const Objective& f, const Tensor& point, const GradCheckOptions& options = {});

}  // namespace fcl
