#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bevalign/random.hpp"

namespace bevalign {

// Thrown when a computation leaves the valid numeric domain (log of a
// non-positive value, non-finite loss). The CLI maps this to its own
// exit code, distinct from verification failures.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
};

// Value-semantic handle to a shared node. All tensors are dense 2-D
// row-major matrices; vectors are 1xN. Values written by an op are never
// mutated afterwards while a tape referencing them is alive; parameters
// may be updated in place between tapes (optimizer, checkpoint load).
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return filled(rows, cols, 0.0, requires_grad);
  }

  static Tensor filled(std::size_t rows, std::size_t cols, double v, bool requires_grad = false) {
    auto node = std::make_shared<TensorNode>();
    node->rows = rows;
    node->cols = cols;
    node->values.assign(rows * cols, v);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                            bool requires_grad = false) {
    if (values.size() != rows * cols) {
      throw std::invalid_argument("Tensor::from_values: size mismatch");
    }
    auto node = std::make_shared<TensorNode>();
    node->rows = rows;
    node->cols = cols;
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values(1, 1, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->values.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  double at(std::size_t flat) const { return node_->values[flat]; }
  double value(std::size_t r, std::size_t c) const { return node_->values[r * node_->cols + c]; }
  double item() const {
    if (size() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return node_->values[0];
  }

  const std::vector<double>& values() const { return node_->values; }

  // In-place update hook for optimizers / checkpoint loads. Only valid
  // between tapes.
  std::vector<double>& mutable_values() { return node_->values; }

  bool grad_allocated() const { return !node_->grad.empty(); }

  const std::vector<double>& grad() {
    ensure_grad();
    return node_->grad;
  }

  double grad_at(std::size_t flat) const {
    return node_->grad.empty() ? 0.0 : node_->grad[flat];
  }

  void accumulate_grad(std::size_t flat, double v) {
    ensure_grad();
    node_->grad[flat] += v;
  }

  void clear_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode> node() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
  }

  std::shared_ptr<TensorNode> node_;
};

// Reverse-mode tape. Ops append named backward closures; backward() seeds
// a scalar loss with 1 and replays in reverse. A tape is single-use.
class Tape {
public:
  void record(std::string name, std::function<void()> backward) {
    entries_.push_back({std::move(name), std::move(backward)});
  }

  void backward(Tensor loss) {
    if (loss.size() != 1) throw std::logic_error("Tape::backward: loss must be scalar");
    if (!std::isfinite(loss.item())) throw NumericError("backward: loss is not finite");
    loss.accumulate_grad(0, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name_at(std::size_t i) const { return entries_[i].name; }
  void clear() { entries_.clear(); }

private:
  struct Entry {
    std::string name;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

namespace detail {

inline bool any_requires_grad(const Tensor& a) { return a.requires_grad(); }
inline bool any_requires_grad(const Tensor& a, const Tensor& b) {
  return a.requires_grad() || b.requires_grad();
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

inline Tensor make_like(std::size_t rows, std::size_t cols, bool requires_grad) {
  return Tensor::zeros(rows, cols, requires_grad);
}

}  // namespace detail

inline Tensor add(Tape& tape, Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = detail::make_like(a.rows(), a.cols(), detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i) + b.at(i);
  if (out.requires_grad()) {
    tape.record("add", [a, b, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double g = out.grad_at(i);
        if (a.requires_grad()) a.accumulate_grad(i, g);
        if (b.requires_grad()) b.accumulate_grad(i, g);
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = detail::make_like(a.rows(), a.cols(), detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i) - b.at(i);
  if (out.requires_grad()) {
    tape.record("sub", [a, b, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double g = out.grad_at(i);
        if (a.requires_grad()) a.accumulate_grad(i, g);
        if (b.requires_grad()) b.accumulate_grad(i, -g);
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = detail::make_like(a.rows(), a.cols(), detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i) * b.at(i);
  if (out.requires_grad()) {
    tape.record("mul", [a, b, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double g = out.grad_at(i);
        if (a.requires_grad()) a.accumulate_grad(i, g * b.at(i));
        if (b.requires_grad()) b.accumulate_grad(i, g * a.at(i));
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, Tensor a, double s) {
  Tensor out = detail::make_like(a.rows(), a.cols(), a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i) * s;
  if (out.requires_grad()) {
    tape.record("scale", [a, out, s]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) a.accumulate_grad(i, out.grad_at(i) * s);
    });
  }
  return out;
}

inline Tensor add_scalar(Tape& tape, Tensor a, double s) {
  Tensor out = detail::make_like(a.rows(), a.cols(), a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i) + s;
  if (out.requires_grad()) {
    tape.record("add_scalar", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) a.accumulate_grad(i, out.grad_at(i));
    });
  }
  return out;
}

inline Tensor matmul(Tape& tape, Tensor a, Tensor b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = detail::make_like(m, n, detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i * k + p);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += av * b.at(p * n + j);
    }
  }
  if (out.requires_grad()) {
    tape.record("matmul", [a, b, out, m, k, n]() mutable {
      if (!out.grad_allocated()) return;
      if (a.requires_grad()) {
        // dA = dOut B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += out.grad_at(i * n + j) * b.at(p * n + j);
            a.accumulate_grad(i * k + p, acc);
          }
        }
      }
      if (b.requires_grad()) {
        // dB = A^T dOut
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += a.at(i * k + p) * out.grad_at(i * n + j);
            b.accumulate_grad(p * n + j, acc);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, Tensor a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(n, m, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = a.at(i * n + j);
  if (out.requires_grad()) {
    tape.record("transpose", [a, out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a.accumulate_grad(i * n + j, out.grad_at(j * m + i));
    });
  }
  return out;
}

// row vector b (1 x n) added to every row of a (m x n)
inline Tensor add_rowwise(Tape& tape, Tensor a, Tensor b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("add_rowwise: expected 1 x cols bias");
  }
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(m, n, detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = a.at(i * n + j) + b.at(j);
  if (out.requires_grad()) {
    tape.record("add_rowwise", [a, b, out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = out.grad_at(i * n + j);
          if (a.requires_grad()) a.accumulate_grad(i * n + j, g);
          if (b.requires_grad()) b.accumulate_grad(j, g);
        }
      }
    });
  }
  return out;
}

// row vector b (1 x n) multiplied into every row of a (m x n)
inline Tensor mul_rowwise(Tape& tape, Tensor a, Tensor b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("mul_rowwise: expected 1 x cols scale");
  }
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(m, n, detail::any_requires_grad(a, b));
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = a.at(i * n + j) * b.at(j);
  if (out.requires_grad()) {
    tape.record("mul_rowwise", [a, b, out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = out.grad_at(i * n + j);
          if (a.requires_grad()) a.accumulate_grad(i * n + j, g * b.at(j));
          if (b.requires_grad()) b.accumulate_grad(j, g * a.at(i * n + j));
        }
      }
    });
  }
  return out;
}

inline Tensor exp(Tape& tape, Tensor a) {
  Tensor out = detail::make_like(a.rows(), a.cols(), a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(a.at(i));
  if (out.requires_grad()) {
    tape.record("exp", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i)
        a.accumulate_grad(i, out.grad_at(i) * out.at(i));
    });
  }
  return out;
}

inline Tensor log(Tape& tape, Tensor a) {
  Tensor out = detail::make_like(a.rows(), a.cols(), a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    if (a.at(i) <= 0.0) throw NumericError("log: non-positive input");
    ov[i] = std::log(a.at(i));
  }
  if (out.requires_grad()) {
    tape.record("log", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i)
        a.accumulate_grad(i, out.grad_at(i) / a.at(i));
    });
  }
  return out;
}

// exact gaussian gelu: 0.5 x (1 + erf(x / sqrt 2))
inline Tensor gelu(Tape& tape, Tensor a) {
  Tensor out = detail::make_like(a.rows(), a.cols(), a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double x = a.at(i);
    ov[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
  }
  if (out.requires_grad()) {
    tape.record("gelu", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      constexpr double inv_sqrt2 = 0.7071067811865476;
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.at(i);
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        a.accumulate_grad(i, out.grad_at(i) * (cdf + x * pdf));
      }
    });
  }
  return out;
}

inline Tensor softmax_lastaxis(Tape& tape, Tensor a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(m, n, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i * n);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i * n + j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ov[i * n + j] = std::exp(a.at(i * n + j) - mx);
      z += ov[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] /= z;
  }
  if (out.requires_grad()) {
    tape.record("softmax", [a, out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += out.grad_at(i * n + j) * out.at(i * n + j);
        for (std::size_t j = 0; j < n; ++j) {
          a.accumulate_grad(i * n + j, out.at(i * n + j) * (out.grad_at(i * n + j) - dot));
        }
      }
    });
  }
  return out;
}

inline Tensor log_softmax_lastaxis(Tape& tape, Tensor a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(m, n, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i * n);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i * n + j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a.at(i * n + j) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = a.at(i * n + j) - lz;
  }
  if (out.requires_grad()) {
    tape.record("log_softmax", [a, out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += out.grad_at(i * n + j);
        for (std::size_t j = 0; j < n; ++j) {
          const double p = std::exp(out.at(i * n + j));
          a.accumulate_grad(i * n + j, out.grad_at(i * n + j) - p * gsum);
        }
      }
    });
  }
  return out;
}

// per-row normalization, biased variance, no learned affine
inline Tensor layer_norm(Tape& tape, Tensor a, double eps = 1e-5) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw std::invalid_argument("layer_norm: empty rows");
  Tensor out = detail::make_like(m, n, a.requires_grad());
  auto& ov = out.mutable_values();
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += a.at(i * n + j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a.at(i * n + j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = (a.at(i * n + j) - mean) * inv_std[i];
  }
  if (out.requires_grad()) {
    tape.record("layer_norm", [a, out, inv_std, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        double gmean = 0.0, gymean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          gmean += out.grad_at(i * n + j);
          gymean += out.grad_at(i * n + j) * out.at(i * n + j);
        }
        gmean /= static_cast<double>(n);
        gymean /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double g = out.grad_at(i * n + j);
          const double y = out.at(i * n + j);
          a.accumulate_grad(i * n + j, inv_std[i] * (g - gmean - y * gymean));
        }
      }
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, Tensor a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
  Tensor out = Tensor::from_values(1, 1, {s}, a.requires_grad());
  if (out.requires_grad()) {
    tape.record("sum", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      const double g = out.grad_at(0);
      for (std::size_t i = 0; i < a.size(); ++i) a.accumulate_grad(i, g);
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, Tensor a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::from_values(1, 1, {s * inv}, a.requires_grad());
  if (out.requires_grad()) {
    tape.record("mean", [a, out, inv]() mutable {
      if (!out.grad_allocated()) return;
      const double g = out.grad_at(0) * inv;
      for (std::size_t i = 0; i < a.size(); ++i) a.accumulate_grad(i, g);
    });
  }
  return out;
}

// select rows by index; an index may repeat, backward scatter-adds
inline Tensor gather_rows(Tape& tape, Tensor a, std::vector<std::size_t> idx) {
  const std::size_t n = a.cols();
  for (auto r : idx) {
    if (r >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
  }
  Tensor out = detail::make_like(idx.size(), n, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = a.at(idx[i] * n + j);
  if (out.requires_grad()) {
    tape.record("gather_rows", [a, out, idx = std::move(idx), n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          a.accumulate_grad(idx[i] * n + j, out.grad_at(i * n + j));
    });
  }
  return out;
}

inline Tensor concat_rows(Tape& tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != n) throw std::invalid_argument("concat_rows: column mismatch");
    m += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor out = detail::make_like(m, n, rg);
  auto& ov = out.mutable_values();
  std::size_t row = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i) ov[row * n + i] = p.at(i);
    row += p.rows();
  }
  if (out.requires_grad()) {
    tape.record("concat_rows", [parts = std::move(parts), out, n]() mutable {
      if (!out.grad_allocated()) return;
      std::size_t row = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          for (std::size_t i = 0; i < p.size(); ++i)
            p.accumulate_grad(i, out.grad_at(row * n + i));
        }
        row += p.rows();
      }
    });
  }
  return out;
}

// column range [c0, c1)
inline Tensor slice_cols(Tape& tape, Tensor a, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) throw std::invalid_argument("slice_cols: bad range");
  const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
  Tensor out = detail::make_like(m, w, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = a.at(i * n + c0 + j);
  if (out.requires_grad()) {
    tape.record("slice_cols", [a, out, c0, m, n, w]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          a.accumulate_grad(i * n + c0 + j, out.grad_at(i * w + j));
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor out = detail::make_like(m, n, rg);
  auto& ov = out.mutable_values();
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ov[i * n + col + j] = p.value(i, j);
    col += w;
  }
  if (out.requires_grad()) {
    tape.record("concat_cols", [parts = std::move(parts), out, m, n]() mutable {
      if (!out.grad_allocated()) return;
      std::size_t col = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              p.accumulate_grad(i * w + j, out.grad_at(i * n + col + j));
        }
        col += w;
      }
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, Tensor a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor out = detail::make_like(rows, cols, a.requires_grad());
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.at(i);
  if (out.requires_grad()) {
    tape.record("reshape", [a, out]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < out.size(); ++i) a.accumulate_grad(i, out.grad_at(i));
    });
  }
  return out;
}

// y_i = x_i / sqrt(|x_i|^2 + eps) per row
inline Tensor l2_normalize_rows(Tape& tape, Tensor a, double eps = 1e-12) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = detail::make_like(m, n, a.requires_grad());
  auto& ov = out.mutable_values();
  std::vector<double> inv_norm(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += a.at(i * n + j) * a.at(i * n + j);
    inv_norm[i] = 1.0 / std::sqrt(ss + eps);
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = a.at(i * n + j) * inv_norm[i];
  }
  if (out.requires_grad()) {
    tape.record("l2_normalize", [a, out, inv_norm, m, n]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += out.grad_at(i * n + j) * out.at(i * n + j);
        for (std::size_t j = 0; j < n; ++j) {
          const double g = out.grad_at(i * n + j);
          a.accumulate_grad(i * n + j, inv_norm[i] * (g - dot * out.at(i * n + j)));
        }
      }
    });
  }
  return out;
}

// ---- finite difference oracle ----

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool ok = true;
};

// Compares analytic gradients against central differences. `build` must
// construct the scalar loss from current parameter values each call; it
// sees parameter mutations because tensors share nodes.
inline GradCheckReport gradcheck(const std::function<Tensor(Tape&)>& build,
                                 std::vector<Tensor> params, double h = 1e-4,
                                 double tol = 1e-4) {
  for (auto& p : params) p.clear_grad();
  Tape tape;
  Tensor loss = build(tape);
  tape.backward(loss);

  GradCheckReport report;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p.mutable_values()[i];
      p.mutable_values()[i] = keep + h;
      Tape t_plus;
      const double f_plus = build(t_plus).item();
      p.mutable_values()[i] = keep - h;
      Tape t_minus;
      const double f_minus = build(t_minus).item();
      p.mutable_values()[i] = keep;

      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double analytic = p.grad_at(i);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      const double rel = std::abs(numeric - analytic) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
    }
  }
  report.ok = report.max_rel_error < tol;
  return report;
}

}  // namespace bevalign
