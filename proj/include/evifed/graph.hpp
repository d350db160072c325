#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "evifed/errors.hpp"
#include "evifed/rng.hpp"
#include "evifed/special_functions.hpp"
#include "evifed/tensor.hpp"

namespace evifed {

inline constexpr double kEvidenceCeiling = 10.0;

/// Reverse-mode tape. Operations record a node when any input carries a
/// gradient path; backward() replays the recording order exactly once in
/// reverse, so gradients are bit-deterministic. A graph is confined to one
/// worker at a time.
class Graph {
  struct Node;
  // Accumulation targets for each input: scratch adjoint of an upstream node,
  // a leaf's grad buffer, or nullptr when the input carries no gradient.
  using GradSinks = std::vector<double*>;
  using GradFn = std::function<void(const Node&, const double*, const GradSinks&)>;

  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    GradFn grad;
  };

 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  /// Drops all recorded nodes. Tensors tracked by earlier recordings become
  /// stale and are rejected as op inputs.
  void clear() {
    nodes_.clear();
    ++generation_;
  }

  /// When recording is off, ops compute values only (evaluation mode).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  // ---------------------------------------------------------------- matmul

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
      throw shape_error("matmul: inner dimensions disagree: " + a.shape_str() +
                        " vs " + b.shape_str());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out(m, n);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = bv + p * n;
        double* orow = ov + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
    record(out, {a, b}, [m, k, n](const Node& nd, const double* g, const GradSinks& gi) {
      const double* av = nd.inputs[0].values().data();
      const double* bv = nd.inputs[1].values().data();
      if (gi[0]) {  // dA += g . B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            gi[0][i * k + p] += acc;
          }
      }
      if (gi[1]) {  // dB += A^T . g
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += aip * g[i * n + j];
          }
      }
    });
    return out;
  }

  Tensor transpose(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out(c, r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    record(out, {a}, [r, c](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
    });
    return out;
  }

  // ----------------------------------------------------------- elementwise

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = elementwise2(a, b, [](double x, double y) { return x + y; });
    record(out, {a, b}, [](const Node& nd, const double* g, const GradSinks& gi) {
      const std::size_t n = nd.output.size();
      if (gi[0]) for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
      if (gi[1]) for (std::size_t i = 0; i < n; ++i) gi[1][i] += g[i];
    });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = elementwise2(a, b, [](double x, double y) { return x - y; });
    record(out, {a, b}, [](const Node& nd, const double* g, const GradSinks& gi) {
      const std::size_t n = nd.output.size();
      if (gi[0]) for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
      if (gi[1]) for (std::size_t i = 0; i < n; ++i) gi[1][i] -= g[i];
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = elementwise2(a, b, [](double x, double y) { return x * y; });
    record(out, {a, b}, [](const Node& nd, const double* g, const GradSinks& gi) {
      const std::size_t n = nd.output.size();
      const double* av = nd.inputs[0].values().data();
      const double* bv = nd.inputs[1].values().data();
      if (gi[0]) for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] * bv[i];
      if (gi[1]) for (std::size_t i = 0; i < n; ++i) gi[1][i] += g[i] * av[i];
    });
    return out;
  }

  /// Matrix plus a 1-row bias broadcast over rows; the only broadcast rule.
  Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) {
      throw shape_error("add_row_bias: " + a.shape_str() + " vs bias " +
                        bias.shape_str());
    }
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out(r, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) + bias.at(0, j);
    record(out, {a, bias}, [r, c](const Node&, const double* g, const GradSinks& gi) {
      if (gi[0]) for (std::size_t i = 0; i < r * c; ++i) gi[0][i] += g[i];
      if (gi[1])
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gi[1][j] += g[i * c + j];
    });
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor out = elementwise1(a, [c](double x) { return c * x; });
    record(out, {a}, [c](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += c * g[i];
    });
    return out;
  }

  Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = elementwise1(a, [c](double x) { return x + c; });
    record(out, {a}, [](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
    });
    return out;
  }

  /// Elementwise product with a constant array (e.g. a fixed mask).
  Tensor mul_const(const Tensor& a, std::vector<double> c) {
    if (c.size() != a.size()) {
      throw shape_error("mul_const: tensor " + a.shape_str() + " vs " +
                        std::to_string(c.size()) + " constants");
    }
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * c[i];
    record(out, {a}, [c = std::move(c)](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < c.size(); ++i) gi[0][i] += g[i] * c[i];
    });
    return out;
  }

  Tensor add_const(const Tensor& a, std::vector<double> c) {
    if (c.size() != a.size()) {
      throw shape_error("add_const: tensor " + a.shape_str() + " vs " +
                        std::to_string(c.size()) + " constants");
    }
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + c[i];
    record(out, {a}, [n = a.size()](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
    });
    return out;
  }

  /// y = s * a where s is a tracked 1x1 scalar.
  Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
      throw shape_error("scale_by: scale must be 1x1, got " + s.shape_str());
    }
    const double sv = s.values()[0];
    Tensor out = elementwise1(a, [sv](double x) { return sv * x; });
    record(out, {a, s}, [](const Node& nd, const double* g, const GradSinks& gi) {
      const std::size_t n = nd.output.size();
      const double sv = nd.inputs[1].values()[0];
      const double* av = nd.inputs[0].values().data();
      if (gi[0]) for (std::size_t i = 0; i < n; ++i) gi[0][i] += sv * g[i];
      if (gi[1]) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * av[i];
        gi[1][0] += acc;
      }
    });
    return out;
  }

  /// y = a - s (s a 1x1 tensor broadcast over all entries).
  Tensor sub_broadcast(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
      throw shape_error("sub_broadcast: subtrahend must be 1x1, got " + s.shape_str());
    }
    const double sv = s.values()[0];
    Tensor out = elementwise1(a, [sv](double x) { return x - sv; });
    record(out, {a, s}, [](const Node& nd, const double* g, const GradSinks& gi) {
      const std::size_t n = nd.output.size();
      if (gi[0]) for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
      if (gi[1]) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i];
        gi[1][0] -= acc;
      }
    });
    return out;
  }

  // ------------------------------------------------------------ reductions

  Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    record(out, {a}, [n = a.size()](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
    });
    return out;
  }

  Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw value_error("mean: empty tensor");
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = Tensor::scalar(acc * inv);
    record(out, {a}, [n = a.size(), inv](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0] * inv;
    });
    return out;
  }

  /// Column means over rows: (r x c) -> (1 x c). Sequence pooling.
  Tensor mean_rows(const Tensor& a) {
    if (a.rows() == 0) throw value_error("mean_rows: empty tensor");
    const std::size_t r = a.rows(), c = a.cols();
    const double inv = 1.0 / static_cast<double>(r);
    Tensor out(1, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(0, j) += a.at(i, j) * inv;
    record(out, {a}, [r, c, inv](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j] * inv;
    });
    return out;
  }

  /// Flattened dot with a constant weight vector -> 1x1.
  Tensor weighted_sum(const Tensor& a, std::vector<double> w) {
    if (w.size() != a.size()) {
      throw shape_error("weighted_sum: tensor " + a.shape_str() + " vs " +
                        std::to_string(w.size()) + " weights");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += a.values()[i] * w[i];
    Tensor out = Tensor::scalar(acc);
    record(out, {a}, [w = std::move(w)](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < w.size(); ++i) gi[0][i] += g[0] * w[i];
    });
    return out;
  }

  // --------------------------------------------------------- restructuring

  /// Rows of a on top of rows of b. An empty operand passes the other
  /// through untouched (the d = 0 prefix case).
  Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    if (a.cols() != b.cols()) {
      throw shape_error("concat_rows: " + a.shape_str() + " vs " + b.shape_str());
    }
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    Tensor out(ra + rb, c);
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + ra * c);
    record(out, {a, b}, [ra, rb, c](const Node&, const double* g, const GradSinks& gi) {
      if (gi[0]) for (std::size_t i = 0; i < ra * c; ++i) gi[0][i] += g[i];
      if (gi[1]) for (std::size_t i = 0; i < rb * c; ++i) gi[1][i] += g[ra * c + i];
    });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw value_error("concat_cols: no parts");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
      if (p.rows() != r) {
        throw shape_error("concat_cols: row mismatch: " + parts[0].shape_str() +
                          " vs " + p.shape_str());
      }
      total += p.cols();
    }
    Tensor out(r, total);
    std::size_t off = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
      widths.push_back(p.cols());
      off += p.cols();
    }
    record(out, parts, [r, total, widths](const Node&, const double* g, const GradSinks& gi) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (gi[k]) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
              gi[k][i * widths[k] + j] += g[i * total + off + j];
        }
        off += widths[k];
      }
    });
    return out;
  }

  /// Columns [c0, c1) of a.
  Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    if (c0 >= c1 || c1 > a.cols()) {
      throw shape_error("slice_cols: [" + std::to_string(c0) + "," +
                        std::to_string(c1) + ") of " + a.shape_str());
    }
    const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
    Tensor out(r, w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a.at(i, c0 + j);
    record(out, {a}, [r, c, c0, w](const Node&, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) gi[0][i * c + c0 + j] += g[i * w + j];
    });
    return out;
  }

  // ------------------------------------------------------------ activations

  /// Row-wise softmax with max subtraction.
  Tensor softmax_rows(const Tensor& x) {
    if (x.size() == 0 || x.cols() == 0) {
      throw value_error("softmax_rows: empty tensor");
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      double mx = x.at(i, 0);
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double e = std::exp(x.at(i, j) - mx);
        out.at(i, j) = e;
        denom += e;
      }
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= denom;
    }
    record(out, {x}, [r, c](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const double* y = nd.output.values().data();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gi[0][i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
    });
    return out;
  }

  /// Softmax over one row excluding entry `skip`, which is forced to zero.
  Tensor masked_softmax_row(const Tensor& x, std::size_t skip) {
    if (x.rows() != 1 || x.cols() < 2) {
      throw shape_error("masked_softmax_row: need a 1xN row with N >= 2, got " +
                        x.shape_str());
    }
    if (skip >= x.cols()) {
      throw value_error("masked_softmax_row: skip index " + std::to_string(skip) +
                        " out of range for " + x.shape_str());
    }
    const std::size_t c = x.cols();
    Tensor out(1, c);
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < c; ++j)
      if (j != skip) mx = std::max(mx, x.at(0, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == skip) continue;
      const double e = std::exp(x.at(0, j) - mx);
      out.at(0, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < c; ++j)
      if (j != skip) out.at(0, j) /= denom;
    record(out, {x}, [c, skip](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const double* y = nd.output.values().data();
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        if (j != skip) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j)
        if (j != skip) gi[0][j] += y[j] * (g[j] - dot);
    });
    return out;
  }

  /// Elementwise exp with the input clamped to `ceiling` first, bounding the
  /// evidence any logit can contribute.
  Tensor exp_activation(const Tensor& x, double ceiling = kEvidenceCeiling) {
    Tensor out = elementwise1(
        x, [ceiling](double v) { return std::exp(std::min(v, ceiling)); });
    record(out, {x}, [ceiling](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      const double* xv = nd.inputs[0].values().data();
      const double* y = nd.output.values().data();
      for (std::size_t i = 0; i < n; ++i)
        if (xv[i] < ceiling) gi[0][i] += g[i] * y[i];
    });
    return out;
  }

  Tensor tanh_activation(const Tensor& x) {
    Tensor out = elementwise1(x, [](double v) { return std::tanh(v); });
    record(out, {x}, [](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      const double* y = nd.output.values().data();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] * (1.0 - y[i] * y[i]);
    });
    return out;
  }

  Tensor log_activation(const Tensor& x) {
    for (double v : x.values()) {
      if (!(v > 0.0)) {
        throw std::domain_error("log: argument must be positive, got " +
                                std::to_string(v));
      }
    }
    Tensor out = elementwise1(x, [](double v) { return std::log(v); });
    record(out, {x}, [](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      const double* xv = nd.inputs[0].values().data();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] / xv[i];
    });
    return out;
  }

  Tensor digamma(const Tensor& x) {
    Tensor out = elementwise1(x, [](double v) { return evifed::digamma(v); });
    record(out, {x}, [](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      const double* xv = nd.inputs[0].values().data();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] * trigamma(xv[i]);
    });
    return out;
  }

  Tensor lgamma(const Tensor& x) {
    Tensor out = elementwise1(x, [](double v) { return lgamma_pos(v); });
    record(out, {x}, [](const Node& nd, const double* g, const GradSinks& gi) {
      if (!gi[0]) return;
      const std::size_t n = nd.output.size();
      const double* xv = nd.inputs[0].values().data();
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] * evifed::digamma(xv[i]);
    });
    return out;
  }

  /// Row-wise layer normalization without affine parameters.
  Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5) {
    if (x.cols() == 0 || x.rows() == 0) throw value_error("layer_norm_rows: empty tensor");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(r, c);
    std::vector<double> inv_sigma(r);
    for (std::size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < c; ++j) mu += x.at(i, j);
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = x.at(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      inv_sigma[i] = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j)
        out.at(i, j) = (x.at(i, j) - mu) * inv_sigma[i];
    }
    record(out, {x},
           [r, c, inv_sigma = std::move(inv_sigma)](const Node& nd, const double* g,
                                                    const GradSinks& gi) {
      if (!gi[0]) return;
      const double* y = nd.output.values().data();
      const double invc = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double gsum = 0.0, gy = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          gsum += g[i * c + j];
          gy += g[i * c + j] * y[i * c + j];
        }
        const double mg = gsum * invc, mgy = gy * invc;
        for (std::size_t j = 0; j < c; ++j)
          gi[0][i * c + j] += inv_sigma[i] * (g[i * c + j] - mg - y[i * c + j] * mgy);
      }
    });
    return out;
  }

  /// Inverted dropout; the mask is sampled here and baked into the node.
  Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
      throw value_error("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    std::vector<double> mask(x.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return mul_const(x, std::move(mask));
  }

  // ---------------------------------------------------------------- engine

  /// Accumulates dLoss/dLeaf into every requires_grad leaf reachable from
  /// `loss`. Repeated calls without zero_grad() accumulate.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw value_error("backward: loss must be a defined 1x1 scalar" +
                        std::string(loss.defined() ? ", got " + loss.shape_str() : ""));
    }
    if (!loss.tracked() || loss.owner() != this || loss.generation() != generation_ ||
        loss.node_id() < 0 || loss.node_id() >= static_cast<int>(nodes_.size())) {
      throw value_error("backward: loss was not produced through this graph");
    }
    std::vector<std::vector<double>> adjoint(nodes_.size());
    adjoint[loss.node_id()].assign(1, 1.0);
    GradSinks sinks;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& adj = adjoint[i];
      if (adj.empty()) continue;  // not an ancestor of the loss
      Node& nd = nodes_[i];
      sinks.clear();
      for (const Tensor& in : nd.inputs) {
        if (in.tracked() && in.owner() == this && in.generation() == generation_) {
          auto& slot = adjoint[in.node_id()];
          if (slot.empty()) slot.assign(in.size(), 0.0);
          sinks.push_back(slot.data());
        } else if (in.requires_grad()) {
          // const_cast-free: Tensor grad() allocates through the shared Data.
          sinks.push_back(const_cast<Tensor&>(in).grad().data());
        } else {
          sinks.push_back(nullptr);
        }
      }
      nd.grad(nd, adj.data(), sinks);
      adj.clear();
      adj.shrink_to_fit();
    }
  }

 private:
  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw shape_error(std::string(op) + ": shape mismatch: " + a.shape_str() +
                        " vs " + b.shape_str());
    }
  }

  template <typename F>
  static Tensor elementwise1(const Tensor& a, F f) {
    Tensor out(a.rows(), a.cols());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
    return out;
  }

  template <typename F>
  static Tensor elementwise2(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.rows(), a.cols());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i], bv[i]);
    return out;
  }

  bool needs_grad(const Tensor& t) const {
    if (t.requires_grad()) return true;
    if (!t.tracked()) return false;
    if (t.owner() != this || t.generation() != generation_) {
      throw value_error("graph op: input tensor is tracked by a different or "
                        "cleared graph; clone() it first");
    }
    return true;
  }

  void record(Tensor& out, std::vector<Tensor> inputs, GradFn fn) {
    if (!recording_) return;
    bool track = false;
    for (const Tensor& in : inputs) track = needs_grad(in) || track;
    if (!track) return;
    out.mark_tracked(this, static_cast<int>(nodes_.size()), generation_);
    nodes_.push_back(Node{std::move(inputs), out, std::move(fn)});
  }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
  bool recording_ = true;
};

}  // namespace evifed
