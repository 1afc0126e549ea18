#pragma once

// Reverse-mode automatic differentiation over flat parameter vectors.
//
// A Tape records matrix-valued primitive ops in append order; backward()
// sweeps them once in reverse and scatters adjoints of parameter leaves
// into a Gradient laid out exactly like the ParamVector the tape reads.
// Second-order quantities (Hessian-vector products, dominant eigenvalue)
// are built from central differences of first-order gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedtail/errors.hpp"

namespace fedtail::ad {

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// Named contiguous sub-range of a flat parameter array, viewed as a
// rows x cols matrix.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t length() const { return rows * cols; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Ordered list of segments covering [0, size()) without gaps or overlap.
class Layout {
 public:
  Layout() = default;

  // Appends a segment directly after the last one.
  Layout& add(std::string name, std::size_t rows, std::size_t cols);

  std::size_t size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& find(std::string_view name) const;
  bool contains(std::string_view name) const;

  // Half-open [begin, end) ranges of every segment whose name starts with
  // `prefix`, merged where adjacent.
  std::vector<std::pair<std::size_t, std::size_t>> ranges_with_prefix(std::string_view prefix) const;

  friend bool operator==(const Layout& a, const Layout& b) { return a.segments_ == b.segments_; }

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

namespace detail {

// Storage shared by ParamVector and Gradient: values plus the layout that
// names their sub-ranges.
class FlatArray {
 public:
  FlatArray() = default;
  explicit FlatArray(LayoutPtr layout);
  FlatArray(LayoutPtr layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  const LayoutPtr& layout() const { return layout_; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::vector<double>& raw() { return values_; }
  const std::vector<double>& raw() const { return values_; }

  std::span<const double> segment(std::string_view name) const;
  std::span<double> segment(std::string_view name);

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool all_finite() const;

 protected:
  LayoutPtr layout_;
  std::vector<double> values_;
};

}  // namespace detail

class ParamVector : public detail::FlatArray {
 public:
  using FlatArray::FlatArray;
  friend bool operator==(const ParamVector& a, const ParamVector& b) { return a.values_ == b.values_; }
};

class Gradient : public detail::FlatArray {
 public:
  using FlatArray::FlatArray;

  static Gradient zeros_like(const detail::FlatArray& like) { return Gradient(like.layout()); }

  double norm() const;
  friend bool operator==(const Gradient& a, const Gradient& b) { return a.values_ == b.values_; }
};

// ---- vector operations -----------------------------------------------------
// Left-to-right summation, no reassociation: results are bit-reproducible.

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// alpha * a + b
std::vector<double> axpy(double alpha, std::span<const double> a, std::span<const double> b);
std::vector<double> scale(double alpha, std::span<const double> a);

double dot(const Gradient& a, const Gradient& b);
Gradient axpy(double alpha, const Gradient& a, const Gradient& b);
Gradient scale(double alpha, const Gradient& a);
// b += alpha * a, in place.
void axpy_inplace(double alpha, std::span<const double> a, std::span<double> b);
// params + alpha * direction
ParamVector shifted(const ParamVector& params, double alpha, const Gradient& direction);

// ---- tape ------------------------------------------------------------------

class Tape;

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  std::size_t rows() const;
  std::size_t cols() const;
  const Matrix& value() const;
  // Value of a 1x1 node.
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class Op : std::uint8_t {
  Param,
  Constant,
  MatMul,
  AddRow,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Exp,
  Log,
  Square,
  Sum,
  Mean,
  MeanRows,
  Dot,
  LogSoftmax,
  Softmax,
  Pick,
  Reverse,
};

class Tape {
 public:
  explicit Tape(const ParamVector& params);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamVector& params() const { return *params_; }

  Var param(std::string_view segment_name);
  Var constant(Matrix value);
  Var scalar(double value);

  Var matmul(Var a, Var b);
  // a (N x M) plus a 1 x M row broadcast to every row.
  Var add_row(Var a, Var row);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // Elementwise.
  Var mul(Var a, Var b);
  Var scale(Var a, double alpha);
  Var add_scalar(Var a, double alpha);
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  // Column means: N x M -> 1 x M.
  Var mean_rows(Var a);
  Var dot(Var a, Var b);
  // Row-wise, max-subtracted.
  Var log_softmax(Var a);
  Var softmax(Var a);
  // out(n, 0) = a(n, index[n]).
  Var pick(Var a, std::vector<int> index);
  // Identity forward; backward multiplies the adjoint by -lambda.
  Var reverse_gradient(Var a, double lambda);

  std::size_t node_count() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Reverse sweep from a scalar output. Every node is visited once in
  // reverse append order.
  Gradient backward(Var output) const;

 private:
  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    double alpha = 0.0;
    std::size_t offset = 0;
    std::vector<int> index{};
    Matrix value{};
  };

  Var push(Node node);
  const Node& node(Var v) const;

  const ParamVector* params_;
  std::vector<Node> nodes_;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator*(double alpha, Var a);
Var operator-(Var a);

// ---- evaluation ------------------------------------------------------------

// Closure that records a scalar objective on a tape bound to some parameters.
using Builder = std::function<Var(Tape&)>;

struct ValueGrad {
  double value = 0.0;
  Gradient grad;
};

double evaluate(const Builder& builder, const ParamVector& params);
Gradient gradient(const Builder& builder, const ParamVector& params);
ValueGrad value_and_gradient(const Builder& builder, const ParamVector& params);

double default_hvp_step(const ParamVector& params);

// H v by central differences of gradients along v / ||v||, rescaled by ||v||.
// `step` defaults to default_hvp_step(params).
Gradient hvp(const Builder& builder, const ParamVector& params, const Gradient& v,
             std::optional<double> step = std::nullopt);

struct EigenEstimate {
  double value = 0.0;
  // Unit vector at the final iterate (empty when the Hessian action vanished).
  std::vector<double> vector;
  int iterations = 0;
};

// Power iteration on H via repeated hvp. Returns the Rayleigh quotient of the
// final unit iterate: the eigenvalue of largest magnitude. `start` warm-starts
// the iteration; otherwise the start vector is drawn from `seed`.
EigenEstimate power_iteration(const Builder& builder, const ParamVector& params, int iters,
                              std::uint64_t seed, std::span<const double> start = {});

double top_eigenvalue(const Builder& builder, const ParamVector& params, int iters = 10,
                      std::uint64_t seed = 0);

}  // namespace fedtail::ad
