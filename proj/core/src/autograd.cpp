#include "fedtail/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedtail/random.hpp"

namespace fedtail::ad {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw DimMismatch("matrix data size does not match shape");
}

// ---- layout ----------------------------------------------------------------

Layout& Layout::add(std::string name, std::size_t rows, std::size_t cols) {
  if (contains(name)) throw LayoutMismatch("duplicate segment name: " + name);
  segments_.push_back(Segment{std::move(name), size_, rows, cols});
  size_ += rows * cols;
  return *this;
}

const Segment& Layout::find(std::string_view name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw LayoutMismatch("no segment named " + std::string(name));
}

bool Layout::contains(std::string_view name) const {
  return std::any_of(segments_.begin(), segments_.end(),
                     [&](const Segment& s) { return s.name == name; });
}

std::vector<std::pair<std::size_t, std::size_t>> Layout::ranges_with_prefix(
    std::string_view prefix) const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : segments_) {
    if (!std::string_view(s.name).starts_with(prefix)) continue;
    const std::size_t begin = s.offset;
    const std::size_t end = s.offset + s.length();
    if (!out.empty() && out.back().second == begin)
      out.back().second = end;
    else
      out.emplace_back(begin, end);
  }
  return out;
}

// ---- flat arrays -----------------------------------------------------------

namespace detail {

FlatArray::FlatArray(LayoutPtr layout) : layout_(std::move(layout)) {
  values_.assign(layout_ ? layout_->size() : 0, 0.0);
}

FlatArray::FlatArray(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (layout_ && values_.size() != layout_->size())
    throw LengthMismatch("value count " + std::to_string(values_.size()) +
                         " does not match layout size " + std::to_string(layout_->size()));
}

std::span<const double> FlatArray::segment(std::string_view name) const {
  const auto& s = layout_->find(name);
  return std::span<const double>(values_).subspan(s.offset, s.length());
}

std::span<double> FlatArray::segment(std::string_view name) {
  const auto& s = layout_->find(name);
  return std::span<double>(values_).subspan(s.offset, s.length());
}

bool FlatArray::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

double Gradient::norm() const { return norm2(values()); }

// ---- vector ops ------------------------------------------------------------

namespace {

void require_same_length(std::size_t a, std::size_t b) {
  if (a != b)
    throw LengthMismatch("length mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> axpy(double alpha, std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + b[i];
  return out;
}

std::vector<double> scale(double alpha, std::span<const double> a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i];
  return out;
}

void axpy_inplace(double alpha, std::span<const double> a, std::span<double> b) {
  require_same_length(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) b[i] += alpha * a[i];
}

double dot(const Gradient& a, const Gradient& b) { return dot(a.values(), b.values()); }

Gradient axpy(double alpha, const Gradient& a, const Gradient& b) {
  return Gradient(a.layout(), axpy(alpha, a.values(), b.values()));
}

Gradient scale(double alpha, const Gradient& a) { return Gradient(a.layout(), scale(alpha, a.values())); }

ParamVector shifted(const ParamVector& params, double alpha, const Gradient& direction) {
  return ParamVector(params.layout(), axpy(alpha, direction.values(), params.values()));
}

// ---- Var -------------------------------------------------------------------

std::size_t Var::rows() const { return value().rows; }
std::size_t Var::cols() const { return value().cols; }
const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw DimMismatch("scalar() on a non-scalar node");
  return v.data[0];
}

Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }
Var operator*(double alpha, Var a) { return a.tape()->scale(a, alpha); }
Var operator-(Var a) { return a.tape()->scale(a, -1.0); }

// ---- tape: forward ---------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw DimMismatch(std::string(what) + ": shape " + std::to_string(a.rows) + "x" +
                      std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                      std::to_string(b.cols));
}

}  // namespace

Tape::Tape(const ParamVector& params) : params_(&params) { nodes_.reserve(64); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape() != this) throw DimMismatch("variable belongs to a different tape");
  return nodes_[static_cast<std::size_t>(v.id())];
}

Var Tape::param(std::string_view segment_name) {
  const auto& seg = params_->layout()->find(segment_name);
  auto src = params_->values().subspan(seg.offset, seg.length());
  Node n{Op::Param};
  n.offset = seg.offset;
  n.value = Matrix(seg.rows, seg.cols, std::vector<double>(src.begin(), src.end()));
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  Node n{Op::Constant};
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar(double value) { return constant(Matrix(1, 1, value)); }

Var Tape::matmul(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  if (x.cols != y.rows) throw DimMismatch("matmul inner dimension mismatch");
  Matrix out(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double xik = x.data[i * x.cols + k];
      const double* yr = y.data.data() + k * y.cols;
      for (std::size_t j = 0; j < y.cols; ++j) o[j] += xik * yr[j];
    }
  }
  Node n{Op::MatMul, a.id(), b.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& x = node(a).value;
  const Matrix& r = node(row).value;
  if (r.rows != 1 || r.cols != x.cols) throw DimMismatch("add_row expects a 1 x cols row");
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out.data[i * out.cols + j] += r.data[j];
  Node n{Op::AddRow, a.id(), row.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  require_same_shape(x, y, "add");
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += y.data[i];
  Node n{Op::Add, a.id(), b.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  require_same_shape(x, y, "sub");
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= y.data[i];
  Node n{Op::Sub, a.id(), b.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  require_same_shape(x, y, "mul");
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= y.data[i];
  Node n{Op::Mul, a.id(), b.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::scale(Var a, double alpha) {
  Matrix out = node(a).value;
  for (double& v : out.data) v *= alpha;
  Node n{Op::Scale, a.id()};
  n.alpha = alpha;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double alpha) {
  Matrix out = node(a).value;
  for (double& v : out.data) v += alpha;
  Node n{Op::AddScalar, a.id()};
  n.alpha = alpha;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  Matrix out = node(a).value;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  Node n{Op::Relu, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::exp(Var a) {
  Matrix out = node(a).value;
  for (double& v : out.data) v = std::exp(v);
  Node n{Op::Exp, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::log(Var a) {
  Matrix out = node(a).value;
  for (double& v : out.data) v = std::log(v);
  Node n{Op::Log, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::square(Var a) {
  Matrix out = node(a).value;
  for (double& v : out.data) v = v * v;
  Node n{Op::Square, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  double acc = 0.0;
  for (double v : node(a).value.data) acc += v;
  Node n{Op::Sum, a.id()};
  n.value = Matrix(1, 1, acc);
  return push(std::move(n));
}

Var Tape::mean(Var a) {
  const Matrix& x = node(a).value;
  if (x.size() == 0) throw DimMismatch("mean of an empty matrix");
  double acc = 0.0;
  for (double v : x.data) acc += v;
  Node n{Op::Mean, a.id()};
  n.value = Matrix(1, 1, acc / static_cast<double>(x.size()));
  return push(std::move(n));
}

Var Tape::mean_rows(Var a) {
  const Matrix& x = node(a).value;
  if (x.rows == 0) throw DimMismatch("mean_rows of an empty matrix");
  Matrix out(1, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out.data[j] += x.data[i * x.cols + j];
  const double inv = 1.0 / static_cast<double>(x.rows);
  for (double& v : out.data) v *= inv;
  Node n{Op::MeanRows, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::dot(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  require_same_shape(x, y, "dot");
  Node n{Op::Dot, a.id(), b.id()};
  n.value = Matrix(1, 1, ad::dot(x.data, y.data));
  return push(std::move(n));
}

Var Tape::log_softmax(Var a) {
  Matrix out = node(a).value;
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    const double m = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - m);
    const double lz = m + std::log(z);
    for (double& v : r) v -= lz;
  }
  Node n{Op::LogSoftmax, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::softmax(Var a) {
  Matrix out = node(a).value;
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    const double m = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& v : r) {
      v = std::exp(v - m);
      z += v;
    }
    for (double& v : r) v /= z;
  }
  Node n{Op::Softmax, a.id()};
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::pick(Var a, std::vector<int> index) {
  const Matrix& x = node(a).value;
  if (index.size() != x.rows) throw DimMismatch("pick index count must equal row count");
  Matrix out(x.rows, 1);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const int c = index[i];
    if (c < 0 || static_cast<std::size_t>(c) >= x.cols) throw DimMismatch("pick index out of range");
    out.data[i] = x.data[i * x.cols + static_cast<std::size_t>(c)];
  }
  Node n{Op::Pick, a.id()};
  n.index = std::move(index);
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::reverse_gradient(Var a, double lambda) {
  Node n{Op::Reverse, a.id()};
  n.alpha = lambda;
  n.value = node(a).value;
  return push(std::move(n));
}

// ---- tape: backward --------------------------------------------------------

Gradient Tape::backward(Var output) const {
  const Node& out = node(output);
  if (out.value.size() != 1) throw DimMismatch("backward needs a scalar output");

  Gradient grad(params_->layout());
  std::vector<Matrix> adj(nodes_.size());
  auto adjoint = [&](int id) -> Matrix& {
    auto& m = adj[static_cast<std::size_t>(id)];
    if (m.data.empty()) {
      const auto& v = nodes_[static_cast<std::size_t>(id)].value;
      m = Matrix(v.rows, v.cols);
    }
    return m;
  };
  adjoint(output.id()).data[0] = 1.0;

  for (int id = output.id(); id >= 0; --id) {
    Matrix& g = adj[static_cast<std::size_t>(id)];
    if (g.data.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Matrix& y = n.value;

    switch (n.op) {
      case Op::Param: {
        auto dst = grad.values().subspan(n.offset, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data[i];
        break;
      }
      case Op::Constant:
        break;
      case Op::MatMul: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.a)].value;
        const Matrix& b = nodes_[static_cast<std::size_t>(n.b)].value;
        Matrix& ga = adjoint(n.a);
        // ga += g * b^T
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t k = 0; k < a.cols; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < b.cols; ++j) acc += g.data[i * g.cols + j] * b.data[k * b.cols + j];
            ga.data[i * a.cols + k] += acc;
          }
        Matrix& gb = adjoint(n.b);
        // gb += a^T * g
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.data[i * a.cols + k];
            double* row = gb.data.data() + k * gb.cols;
            const double* grow = g.data.data() + i * g.cols;
            for (std::size_t j = 0; j < b.cols; ++j) row[j] += aik * grow[j];
          }
        break;
      }
      case Op::AddRow: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Matrix& gr = adjoint(n.b);
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j) gr.data[j] += g.data[i * g.cols + j];
        break;
      }
      case Op::Add: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Matrix& gb = adjoint(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
        break;
      }
      case Op::Sub: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Matrix& gb = adjoint(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
        break;
      }
      case Op::Mul: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.a)].value;
        const Matrix& b = nodes_[static_cast<std::size_t>(n.b)].value;
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * b.data[i];
        Matrix& gb = adjoint(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * a.data[i];
        break;
      }
      case Op::Scale: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += n.alpha * g.data[i];
        break;
      }
      case Op::AddScalar: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        break;
      }
      case Op::Relu: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (y.data[i] > 0.0) ga.data[i] += g.data[i];
        break;
      }
      case Op::Exp: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
        break;
      }
      case Op::Log: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.a)].value;
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] / a.data[i];
        break;
      }
      case Op::Square: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.a)].value;
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += 2.0 * a.data[i] * g.data[i];
        break;
      }
      case Op::Sum: {
        Matrix& ga = adjoint(n.a);
        for (double& v : ga.data) v += g.data[0];
        break;
      }
      case Op::Mean: {
        Matrix& ga = adjoint(n.a);
        const double s = g.data[0] / static_cast<double>(ga.size());
        for (double& v : ga.data) v += s;
        break;
      }
      case Op::MeanRows: {
        Matrix& ga = adjoint(n.a);
        const double inv = 1.0 / static_cast<double>(ga.rows);
        for (std::size_t i = 0; i < ga.rows; ++i)
          for (std::size_t j = 0; j < ga.cols; ++j) ga.data[i * ga.cols + j] += g.data[j] * inv;
        break;
      }
      case Op::Dot: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.a)].value;
        const Matrix& b = nodes_[static_cast<std::size_t>(n.b)].value;
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[0] * b.data[i];
        Matrix& gb = adjoint(n.b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[0] * a.data[i];
        break;
      }
      case Op::LogSoftmax: {
        // d/dx_j = g_j - softmax_j * sum_k g_k
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < y.rows; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < y.cols; ++j) gs += g.data[i * y.cols + j];
          for (std::size_t j = 0; j < y.cols; ++j)
            ga.data[i * y.cols + j] += g.data[i * y.cols + j] - std::exp(y.data[i * y.cols + j]) * gs;
        }
        break;
      }
      case Op::Softmax: {
        // d/dx_j = y_j * (g_j - sum_k g_k y_k)
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < y.rows; ++i) {
          double gy = 0.0;
          for (std::size_t j = 0; j < y.cols; ++j) gy += g.data[i * y.cols + j] * y.data[i * y.cols + j];
          for (std::size_t j = 0; j < y.cols; ++j)
            ga.data[i * y.cols + j] += y.data[i * y.cols + j] * (g.data[i * y.cols + j] - gy);
        }
        break;
      }
      case Op::Pick: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < n.index.size(); ++i)
          ga.data[i * ga.cols + static_cast<std::size_t>(n.index[i])] += g.data[i];
        break;
      }
      case Op::Reverse: {
        Matrix& ga = adjoint(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += -n.alpha * g.data[i];
        break;
      }
    }
  }
  return grad;
}

// ---- evaluation ------------------------------------------------------------

double evaluate(const Builder& builder, const ParamVector& params) {
  Tape tape(params);
  const double v = builder(tape).scalar();
  if (!std::isfinite(v)) throw NonFiniteLoss("loss evaluated to a non-finite value");
  return v;
}

ValueGrad value_and_gradient(const Builder& builder, const ParamVector& params) {
  Tape tape(params);
  const Var out = builder(tape);
  const double v = out.scalar();
  if (!std::isfinite(v)) throw NonFiniteLoss("loss evaluated to a non-finite value");
  Gradient g = tape.backward(out);
  if (!g.all_finite()) throw NonFiniteGradient("gradient contains non-finite entries");
  return {v, std::move(g)};
}

Gradient gradient(const Builder& builder, const ParamVector& params) {
  return value_and_gradient(builder, params).grad;
}

double default_hvp_step(const ParamVector& params) { return 1e-4 * (1.0 + norm2(params.values())); }

Gradient hvp(const Builder& builder, const ParamVector& params, const Gradient& v,
             std::optional<double> step) {
  const double vnorm = v.norm();
  if (!std::isfinite(vnorm)) throw NonFiniteGradient("hvp direction is non-finite");
  if (!(vnorm > 0.0)) throw ZeroDirection("hvp direction has zero norm");
  const double r = step.value_or(default_hvp_step(params));
  if (!(r > 0.0)) throw ZeroDirection("hvp step must be positive");

  const double a = r / vnorm;
  const Gradient plus = gradient(builder, shifted(params, a, v));
  const Gradient minus = gradient(builder, shifted(params, -a, v));
  Gradient out(params.layout());
  const double s = vnorm / (2.0 * r);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (plus[i] - minus[i]) * s;
  return out;
}

EigenEstimate power_iteration(const Builder& builder, const ParamVector& params, int iters,
                              std::uint64_t seed, std::span<const double> start) {
  if (iters < 1) throw ConfigError("power iteration needs at least one iteration");
  Gradient v(params.layout());
  if (start.size() == v.size() && norm2(start) > 0.0) {
    std::copy(start.begin(), start.end(), v.raw().begin());
  } else {
    CounterRng rng(seed, 0x5eed);
    for (double& x : v.raw()) x = rng.normal();
  }
  {
    const double n = v.norm();
    for (double& x : v.raw()) x /= n;
  }

  const double r = default_hvp_step(params);
  EigenEstimate est;
  for (int k = 0; k < iters; ++k) {
    Gradient hv = hvp(builder, params, v, r);
    const double hn = hv.norm();
    if (!std::isfinite(hn)) throw NonFiniteGradient("Hessian-vector product is non-finite");
    if (hn < 1e-12) {
      // Hessian action vanished: flat direction.
      if (k == 0) return EigenEstimate{0.0, {}, 1};
      break;
    }
    const double rayleigh = dot(v, hv);
    est.iterations = k + 1;
    const double prev = est.value;
    est.value = rayleigh;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = hv[i] / hn;
    if (k > 0 && std::abs(rayleigh - prev) <= 1e-13 * std::abs(rayleigh)) break;
  }
  est.vector = v.raw();
  return est;
}

double top_eigenvalue(const Builder& builder, const ParamVector& params, int iters, std::uint64_t seed) {
  return power_iteration(builder, params, iters, seed).value;
}

}  // namespace fedtail::ad
