#pragma once

// Flat parameter vectors and a small dense MLP classifier with hand-written
// forward/backward for softmax cross-entropy, plus heavy-ball SGD.
//
// Parameter order inside a ParamVector: for each layer k, the weight matrix
// (output_dim x input_dim, row-major) followed by its bias (if any).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maskfl/errors.hpp"
#include "maskfl/rng.hpp"

namespace maskfl {

using ClassIndex = int;

enum class Activation { relu, identity };

struct DenseLayer {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  bool has_bias = true;

  bool operator==(const DenseLayer&) const = default;
};

/// Contiguous slice of a ParamVector holding one weight matrix or bias.
struct TensorSlice {
  std::size_t offset = 0;
  std::size_t size = 0;
};

class LayerLayout {
 public:
  LayerLayout(std::vector<DenseLayer> layers, std::vector<Activation> hidden_activations)
      : layers_(std::move(layers)), activations_(std::move(hidden_activations)) {
    if (layers_.empty()) throw ShapeError("LayerLayout: at least one layer required");
    if (activations_.size() != layers_.size() - 1)
      throw ShapeError("LayerLayout: need one activation per hidden layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& l = layers_[k];
      if (l.input_dim == 0 || l.output_dim == 0)
        throw ShapeError("LayerLayout: zero-sized layer " + std::to_string(k));
      if (k + 1 < layers_.size() && l.output_dim != layers_[k + 1].input_dim)
        throw ShapeError("LayerLayout: layer " + std::to_string(k) + " output_dim " +
                         std::to_string(l.output_dim) + " != layer " + std::to_string(k + 1) +
                         " input_dim " + std::to_string(layers_[k + 1].input_dim));
      weight_offsets_.push_back(total_);
      total_ += l.input_dim * l.output_dim;
      bias_offsets_.push_back(total_);
      if (l.has_bias) total_ += l.output_dim;
    }
  }

  /// input -> hidden[0] -> ... -> num_classes, ReLU on every hidden layer.
  static LayerLayout mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                         std::size_t num_classes) {
    std::vector<DenseLayer> layers;
    std::size_t in = input_dim;
    for (std::size_t h : hidden) {
      layers.push_back({in, h, true});
      in = h;
    }
    layers.push_back({in, num_classes, true});
    return LayerLayout(std::move(layers), std::vector<Activation>(hidden.size(), Activation::relu));
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  Activation activation(std::size_t hidden_index) const { return activations_.at(hidden_index); }
  std::size_t total_params() const { return total_; }
  std::size_t input_dim() const { return layers_.front().input_dim; }
  std::size_t num_classes() const { return layers_.back().output_dim; }
  std::size_t weight_offset(std::size_t k) const { return weight_offsets_.at(k); }
  std::size_t bias_offset(std::size_t k) const { return bias_offsets_.at(k); }

  /// Weight and bias tensors in storage order.
  std::vector<TensorSlice> tensors() const {
    std::vector<TensorSlice> out;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& l = layers_[k];
      out.push_back({weight_offsets_[k], l.input_dim * l.output_dim});
      if (l.has_bias) out.push_back({bias_offsets_[k], l.output_dim});
    }
    return out;
  }

  bool operator==(const LayerLayout& o) const {
    return layers_ == o.layers_ && activations_ == o.activations_;
  }

 private:
  std::vector<DenseLayer> layers_;
  std::vector<Activation> activations_;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
  std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const LayerLayout>;

inline LayoutPtr make_layout(LayerLayout layout) {
  return std::make_shared<const LayerLayout>(std::move(layout));
}

/// Flat 64-bit parameter storage tied to a layout. Carries models,
/// gradients, control variates and masks alike.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(LayoutPtr layout, double fill = 0.0)
      : layout_(std::move(layout)), values_(checked(layout_).total_params(), fill) {}

  ParamVector(LayoutPtr layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != checked(layout_).total_params())
      throw ShapeError("ParamVector: " + std::to_string(values_.size()) +
                       " values for a layout of " + std::to_string(layout_->total_params()));
  }

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const LayerLayout& layout() const { return checked(layout_); }
  const LayoutPtr& layout_ptr() const { return layout_; }

  bool same_shape(const ParamVector& o) const {
    return layout_ && o.layout_ && (layout_ == o.layout_ || *layout_ == *o.layout_);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Bitwise value equality (layouts compared structurally).
  bool operator==(const ParamVector& o) const { return same_shape(o) && values_ == o.values_; }

 private:
  static const LayerLayout& checked(const LayoutPtr& p) {
    if (!p) throw ShapeError("ParamVector: missing layout");
    return *p;
  }

  LayoutPtr layout_;
  std::vector<double> values_;
};

inline void require_same_shape(const ParamVector& a, const ParamVector& b, const char* where) {
  if (!a.same_shape(b)) throw ShapeError(std::string(where) + ": parameter shape mismatch");
}

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match rows*cols");
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// Inputs plus integer class labels, one row per sample.
struct Batch {
  Matrix inputs;
  std::vector<ClassIndex> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  bool operator==(const Batch&) const = default;
};

struct SgdHyper {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct OptimState {
  ParamVector velocity;
  SgdHyper hyper;

  OptimState(const ParamVector& model, SgdHyper h)
      : velocity(model.layout_ptr(), 0.0), hyper(h) {
    if (!(hyper.lr >= 0.0)) throw std::invalid_argument("OptimState: lr must be >= 0");
    if (!(hyper.momentum >= 0.0 && hyper.momentum < 1.0))
      throw std::invalid_argument("OptimState: momentum must be in [0, 1)");
    if (!(hyper.weight_decay >= 0.0))
      throw std::invalid_argument("OptimState: weight_decay must be >= 0");
  }
};

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

struct EvalResult {
  double accuracy = 0.0;
  /// -1 for classes with no samples in the evaluated set.
  std::vector<double> per_class_accuracy;
};

inline constexpr double kAbsentClass = -1.0;

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline ParamVector init_model(const LayoutPtr& layout, std::uint64_t seed) {
  ParamVector p(layout, 0.0);
  Rng rng(seed);
  const auto& layers = layout->layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layers[k].input_dim));
    const std::size_t off = layout->weight_offset(k);
    const std::size_t n = layers[k].input_dim * layers[k].output_dim;
    for (std::size_t i = 0; i < n; ++i) p[off + i] = rng.uniform(-bound, bound);
  }
  return p;
}

namespace detail {

inline void check_input(const ParamVector& model, const Matrix& inputs) {
  if (inputs.cols != model.layout().input_dim())
    throw ShapeError("input dimension " + std::to_string(inputs.cols) +
                     " does not match model input " + std::to_string(model.layout().input_dim()));
}

inline void check_labels(const ParamVector& model, const Batch& batch) {
  check_input(model, batch.inputs);
  if (batch.inputs.rows != batch.labels.size())
    throw ShapeError("batch has " + std::to_string(batch.inputs.rows) + " rows but " +
                     std::to_string(batch.labels.size()) + " labels");
  const auto classes = static_cast<ClassIndex>(model.layout().num_classes());
  for (ClassIndex y : batch.labels)
    if (y < 0 || y >= classes) throw ShapeError("label " + std::to_string(y) + " out of range");
}

// out = in * W^T + b
inline void dense_forward(const ParamVector& model, std::size_t k, const Matrix& in, Matrix& out) {
  const auto& layout = model.layout();
  const auto& l = layout.layers()[k];
  out = Matrix(in.rows, l.output_dim);
  const double* w = model.values().data() + layout.weight_offset(k);
  const double* b = l.has_bias ? model.values().data() + layout.bias_offset(k) : nullptr;
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* x = in.data.data() + r * in.cols;
    double* z = out.data.data() + r * out.cols;
    for (std::size_t o = 0; o < l.output_dim; ++o) {
      const double* wr = w + o * l.input_dim;
      double acc = 0.0;
      for (std::size_t i = 0; i < l.input_dim; ++i) acc += wr[i] * x[i];
      z[o] = b ? acc + b[o] : acc;
    }
  }
}

inline void apply_activation(Activation a, Matrix& m) {
  if (a == Activation::relu)
    for (double& v : m.data) v = v > 0.0 ? v : 0.0;
}

}  // namespace detail

inline Matrix forward(const ParamVector& model, const Matrix& inputs) {
  detail::check_input(model, inputs);
  const auto& layout = model.layout();
  const std::size_t n_layers = layout.layers().size();
  if (inputs.rows == 0) return Matrix(0, layout.num_classes());
  Matrix cur = inputs;
  Matrix next;
  for (std::size_t k = 0; k < n_layers; ++k) {
    detail::dense_forward(model, k, cur, next);
    if (k + 1 < n_layers) detail::apply_activation(layout.activation(k), next);
    std::swap(cur, next);
  }
  return cur;
}

inline Matrix forward(const ParamVector& model, const Batch& batch) {
  return forward(model, batch.inputs);
}

/// Mean softmax cross-entropy over the batch and its gradient.
inline LossAndGrad loss_and_grad(const ParamVector& model, const Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  detail::check_labels(model, batch);
  const auto& layout = model.layout();
  const auto& layers = layout.layers();
  const std::size_t n_layers = layers.size();
  const std::size_t n = batch.size();

  // pre[k] = pre-activation of layer k; post[k] = input to layer k.
  std::vector<Matrix> pre(n_layers), post(n_layers);
  post[0] = batch.inputs;
  for (std::size_t k = 0; k < n_layers; ++k) {
    detail::dense_forward(model, k, post[k], pre[k]);
    if (k + 1 < n_layers) {
      post[k + 1] = pre[k];
      detail::apply_activation(layout.activation(k), post[k + 1]);
    }
  }

  const Matrix& logits = pre.back();
  const std::size_t classes = logits.cols;
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix delta(n, classes);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto z = logits.row(r);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double log_sum = zmax + std::log(sum);
    const auto y = static_cast<std::size_t>(batch.labels[r]);
    loss += log_sum - z[y];
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(z[c] - log_sum);
      delta(r, c) = (p - (c == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  loss *= inv_n;

  ParamVector grad(model.layout_ptr(), 0.0);
  for (std::size_t k = n_layers; k-- > 0;) {
    const auto& l = layers[k];
    const Matrix& in = post[k];
    double* gw = grad.values().data() + layout.weight_offset(k);
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.data.data() + r * l.output_dim;
      const double* x = in.data.data() + r * l.input_dim;
      for (std::size_t o = 0; o < l.output_dim; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        double* g = gw + o * l.input_dim;
        for (std::size_t i = 0; i < l.input_dim; ++i) g[i] += dv * x[i];
      }
    }
    if (l.has_bias) {
      double* gb = grad.values().data() + layout.bias_offset(k);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < l.output_dim; ++o) gb[o] += delta(r, o);
    }
    if (k == 0) break;
    // Propagate through W and the previous layer's activation.
    const double* w = model.values().data() + layout.weight_offset(k);
    Matrix prev(n, l.input_dim);
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = delta.data.data() + r * l.output_dim;
      double* pd = prev.data.data() + r * l.input_dim;
      for (std::size_t o = 0; o < l.output_dim; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        const double* wr = w + o * l.input_dim;
        for (std::size_t i = 0; i < l.input_dim; ++i) pd[i] += dv * wr[i];
      }
    }
    if (layout.activation(k - 1) == Activation::relu) {
      const Matrix& z = pre[k - 1];
      for (std::size_t i = 0; i < prev.data.size(); ++i)
        if (!(z.data[i] > 0.0)) prev.data[i] = 0.0;
    }
    delta = std::move(prev);
  }
  return {loss, std::move(grad)};
}

/// v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
inline ParamVector sgd_step(ParamVector model, const ParamVector& grad, OptimState& state) {
  require_same_shape(model, grad, "sgd_step");
  require_same_shape(model, state.velocity, "sgd_step");
  const auto& h = state.hyper;
  auto w = model.values();
  auto g = grad.values();
  auto v = state.velocity.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = h.momentum * v[i] + (g[i] + h.weight_decay * w[i]);
    w[i] -= h.lr * v[i];
  }
  return model;
}

/// Index of the largest logit; ties go to the lowest class.
inline std::vector<ClassIndex> predict(const ParamVector& model, const Matrix& inputs) {
  const Matrix logits = forward(model, inputs);
  std::vector<ClassIndex> out(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto z = logits.row(r);
    out[r] = static_cast<ClassIndex>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

inline EvalResult evaluate(const ParamVector& model, const Batch& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  detail::check_labels(model, data);
  const std::size_t classes = model.layout().num_classes();
  const auto pred = predict(model, data.inputs);
  std::vector<std::size_t> hit(classes, 0), total(classes, 0);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) {
    const auto y = static_cast<std::size_t>(data.labels[r]);
    ++total[y];
    if (pred[r] == data.labels[r]) {
      ++hit[y];
      ++correct;
    }
  }
  EvalResult res;
  res.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  res.per_class_accuracy.resize(classes, kAbsentClass);
  for (std::size_t c = 0; c < classes; ++c)
    if (total[c] > 0)
      res.per_class_accuracy[c] = static_cast<double>(hit[c]) / static_cast<double>(total[c]);
  return res;
}

}  // namespace maskfl
