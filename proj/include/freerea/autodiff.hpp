// Copyright 2026 The freerea Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// A small dense-tensor graph with reverse-mode differentiation, restricted to
// the operators needed to score cell networks at initialization: 1x1/3x3
// convolution, 3x3 average/max pooling, ReLU, affine batch normalization,
// n-ary sum, global average pooling and a linear classifier.
//
// Layout is NCHW (flat [N, F] after global pooling). Everything is double
// precision.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freerea/errors.hpp"
#include "freerea/random.hpp"

namespace freerea {

using Shape = std::vector<std::size_t>;

/// Dense array of values with a gradient buffer of identical length.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        values_(element_count(shape_), fill),
        grad_(values_.size(), 0.0) {}

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

  static std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

enum class LayerKind : std::uint8_t {
  input,
  conv,
  batch_norm,
  relu,
  avg_pool,
  max_pool,
  sum,
  global_avg_pool,
  linear,
};

enum class ForwardMode : std::uint8_t { standard, bn_suppressed };

/// Per-sample feature shape. Flat features (after global pooling) use
/// height = width = 1 with `flat` set.
struct FeatureShape {
  int channels = 0;
  int height = 1;
  int width = 1;
  bool flat = false;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

struct LayerNode {
  LayerKind kind = LayerKind::input;
  std::vector<int> inputs;
  /// Indices into Network::parameters(). conv: {weight}; batch_norm:
  /// {scale, shift}; linear: {weight, bias}.
  std::vector<int> params;
  int kernel = 0;
  int stride = 1;
  FeatureShape in_shape;
  FeatureShape out_shape;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int pooled_extent(int extent, int kernel, int stride) {
  const int pad = (kernel - 1) / 2;
  return (extent + 2 * pad - kernel) / stride + 1;
}

// col[(c*K + ky)*K + kx][oy*Wo + ox] = in[c][oy*s + ky - p][ox*s + kx - p]
inline void im2col(const double* in, int channels, int height, int width, int kernel, int stride,
                   int out_h, int out_w, double* col) {
  const int pad = (kernel - 1) / 2;
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    const double* src = in + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        double* dst = col + static_cast<std::size_t>((c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          double* row = dst + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, 0.0);
            continue;
          }
          const double* src_row = src + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - pad;
            row[ox] = (ix >= 0 && ix < width) ? src_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int channels, int height, int width, int kernel,
                       int stride, int out_h, int out_w, double* in_grad) {
  const int pad = (kernel - 1) / 2;
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    double* dst = in_grad + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const double* src = col + static_cast<std::size_t>((c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= height) continue;
          const double* row = src + static_cast<std::size_t>(oy) * out_w;
          double* dst_row = dst + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < width) dst_row[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Computational graph in topological order. Node 0 is the input.
///
/// A Network with its activation caches is not thread-safe; distinct
/// instances may be used concurrently.
class Network {
 public:
  explicit Network(FeatureShape input_shape) : input_shape_(input_shape) {
    LayerNode in;
    in.kind = LayerKind::input;
    in.in_shape = in.out_shape = input_shape;
    nodes_.push_back(in);
    output_ = 0;
  }

  int input() const { return 0; }
  const FeatureShape& input_shape() const { return input_shape_; }

  int add_conv(int from, int out_channels, int kernel, int stride) {
    const FeatureShape in = spatial_input(from, "conv");
    if (kernel != 1 && kernel != 3) throw ShapeMismatch("conv kernel must be 1 or 3");
    LayerNode node = make_node(LayerKind::conv, {from}, in);
    node.kernel = kernel;
    node.stride = stride;
    node.out_shape = {out_channels, detail::pooled_extent(in.height, kernel, stride),
                      detail::pooled_extent(in.width, kernel, stride), false};
    node.params.push_back(add_param({static_cast<std::size_t>(out_channels),
                                     static_cast<std::size_t>(in.channels),
                                     static_cast<std::size_t>(kernel),
                                     static_cast<std::size_t>(kernel)}));
    return push(std::move(node));
  }

  int add_batch_norm(int from) {
    const FeatureShape in = spatial_input(from, "batch_norm");
    LayerNode node = make_node(LayerKind::batch_norm, {from}, in);
    node.out_shape = in;
    const auto c = static_cast<std::size_t>(in.channels);
    node.params.push_back(add_param({c}));
    node.params.push_back(add_param({c}));
    return push(std::move(node));
  }

  int add_relu(int from) {
    LayerNode node = make_node(LayerKind::relu, {from}, shape_of(from));
    node.out_shape = node.in_shape;
    relu_units_ += node.out_shape.size();
    return push(std::move(node));
  }

  int add_avg_pool(int from, int stride) { return add_pool(LayerKind::avg_pool, from, stride); }
  int add_max_pool(int from, int stride) { return add_pool(LayerKind::max_pool, from, stride); }

  /// Elementwise sum. With no inputs the node emits zeros of `shape`.
  int add_sum(const std::vector<int>& from, FeatureShape shape) {
    for (int id : from) {
      if (!(shape_of(id) == shape)) {
        throw ShapeMismatch("sum input node " + std::to_string(id) + " has incompatible shape");
      }
    }
    LayerNode node = make_node(LayerKind::sum, from, shape);
    node.out_shape = shape;
    return push(std::move(node));
  }

  int add_global_avg_pool(int from) {
    const FeatureShape in = spatial_input(from, "global_avg_pool");
    LayerNode node = make_node(LayerKind::global_avg_pool, {from}, in);
    node.out_shape = {in.channels, 1, 1, true};
    return push(std::move(node));
  }

  int add_linear(int from, int out_features) {
    const FeatureShape in = shape_of(from);
    if (!in.flat) {
      throw ShapeMismatch("linear node input " + std::to_string(from) + " is not flat");
    }
    LayerNode node = make_node(LayerKind::linear, {from}, in);
    node.out_shape = {out_features, 1, 1, true};
    node.params.push_back(add_param({static_cast<std::size_t>(out_features),
                                     static_cast<std::size_t>(in.channels)}));
    node.params.push_back(add_param({static_cast<std::size_t>(out_features)}));
    return push(std::move(node));
  }

  void set_output(int id) {
    check_id(id);
    output_ = id;
  }
  int output() const { return output_; }

  const std::vector<LayerNode>& nodes() const { return nodes_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  /// Total ReLU units per sample (N_A for the linear-regions kernel).
  std::size_t relu_units() const { return relu_units_; }

  /// Kaiming fan-in normal for conv and linear weights; unit scale and zero
  /// shift for batch norm; zero linear bias.
  void initialize(Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& node : nodes_) {
      switch (node.kind) {
        case LayerKind::conv: {
          const double fan_in = node.in_shape.channels * node.kernel * node.kernel;
          const double std_dev = std::sqrt(2.0 / fan_in);
          for (double& w : params_[node.params[0]].values()) w = std_dev * normal(rng);
          break;
        }
        case LayerKind::batch_norm:
          std::ranges::fill(params_[node.params[0]].values(), 1.0);
          std::ranges::fill(params_[node.params[1]].values(), 0.0);
          break;
        case LayerKind::linear: {
          const double std_dev = std::sqrt(2.0 / node.in_shape.channels);
          for (double& w : params_[node.params[0]].values()) w = std_dev * normal(rng);
          std::ranges::fill(params_[node.params[1]].values(), 0.0);
          break;
        }
        default:
          break;
      }
    }
    invalidate();
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.size();
    return total;
  }

  /// Evaluates the graph on a batch shaped [N, C, H, W]. With
  /// `retain_activations` false, intermediate tensors are released as soon
  /// as their consumers ran; backward() is then unavailable but ReLU masks
  /// are still collected.
  Tensor forward(const Tensor& input, ForwardMode mode = ForwardMode::standard,
                 bool retain_activations = true) {
    const Shape& s = input.shape();
    if (s.size() != 4 || s[1] != static_cast<std::size_t>(input_shape_.channels) ||
        s[2] != static_cast<std::size_t>(input_shape_.height) ||
        s[3] != static_cast<std::size_t>(input_shape_.width) || s[0] == 0) {
      throw ShapeMismatch("node 0: input tensor does not match the declared input shape");
    }
    batch_ = s[0];
    mode_ = mode;
    acts_.assign(nodes_.size(), {});
    argmax_.assign(nodes_.size(), {});
    masks_.assign(batch_, std::vector<std::uint64_t>((relu_units_ + 63) / 64, 0));
    acts_[0].assign(input.values().begin(), input.values().end());

    std::vector<int> remaining(nodes_.size(), 0);
    for (const auto& node : nodes_)
      for (int in : node.inputs) ++remaining[in];

    std::size_t mask_offset = 0;
    for (std::size_t k = 1; k < nodes_.size(); ++k) {
      run_node(k);
      if (nodes_[k].kind == LayerKind::relu) {
        pack_mask(k, mask_offset);
        mask_offset += nodes_[k].out_shape.size();
      }
      if (!retain_activations) {
        for (int in : nodes_[k].inputs) {
          if (--remaining[in] == 0 && in != output_) std::vector<double>().swap(acts_[in]);
        }
      }
    }
    cache_live_ = retain_activations;
    return output_tensor();
  }

  /// Recomputes nodes [first, end) from the cached activations of earlier
  /// nodes, e.g. after perturbing a parameter owned by node `first`.
  Tensor forward_from(int first) {
    if (!cache_live_) throw NoForwardCache("forward_from needs a retained forward pass");
    check_id(first);
    std::size_t mask_offset = 0;
    for (int k = 1; k < first; ++k)
      if (nodes_[k].kind == LayerKind::relu) mask_offset += nodes_[k].out_shape.size();
    for (auto k = static_cast<std::size_t>(std::max(first, 1)); k < nodes_.size(); ++k) {
      run_node(k);
      if (nodes_[k].kind == LayerKind::relu) {
        pack_mask(k, mask_offset);
        mask_offset += nodes_[k].out_shape.size();
      }
    }
    return output_tensor();
  }

  /// Accumulates d(output . output_grad)/d(param) into every parameter's
  /// grad buffer. Callers zero grads between passes.
  void backward(const Tensor& output_grad) {
    if (!cache_live_) throw NoForwardCache("backward called without a retained forward pass");
    if (output_grad.size() != acts_[output_].size()) {
      throw ShapeMismatch("node " + std::to_string(output_) + ": output gradient size mismatch");
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[output_].assign(output_grad.values().begin(), output_grad.values().end());
    for (int k = output_; k >= 1; --k) {
      if (grads[k].empty()) continue;
      backprop_node(static_cast<std::size_t>(k), grads);
      std::vector<double>().swap(grads[k]);
    }
  }

  /// Cached activation of `node` from the last forward pass (flattened).
  std::span<const double> activation(int node) const { return acts_.at(node); }
  std::size_t batch_size() const { return batch_; }

  /// Post-ReLU sign masks of the last forward pass, one packed bit vector
  /// per sample, ReLU nodes concatenated in topological order.
  const std::vector<std::vector<std::uint64_t>>& relu_masks() const { return masks_; }

  /// Argmax indices of max-pool node `node` from the last forward pass.
  std::span<const std::int32_t> max_pool_choices(int node) const { return argmax_.at(node); }

  void invalidate() {
    cache_live_ = false;
    acts_.clear();
  }

 private:
  LayerNode make_node(LayerKind kind, std::vector<int> inputs, FeatureShape in_shape) {
    LayerNode node;
    node.kind = kind;
    node.inputs = std::move(inputs);
    node.in_shape = in_shape;
    return node;
  }

  int push(LayerNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_param(Shape shape) {
    params_.emplace_back(std::move(shape));
    return static_cast<int>(params_.size()) - 1;
  }

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw ShapeMismatch("node " + std::to_string(id) + " does not exist");
    }
  }

  const FeatureShape& shape_of(int id) const {
    check_id(id);
    return nodes_[id].out_shape;
  }

  FeatureShape spatial_input(int id, const char* what) const {
    const FeatureShape& s = shape_of(id);
    if (s.flat) {
      throw ShapeMismatch(std::string(what) + " input node " + std::to_string(id) +
                          " is flat, expected a feature map");
    }
    return s;
  }

  int add_pool(LayerKind kind, int from, int stride) {
    const FeatureShape in = spatial_input(from, "pool");
    LayerNode node = make_node(kind, {from}, in);
    node.kernel = 3;
    node.stride = stride;
    node.out_shape = {in.channels, detail::pooled_extent(in.height, 3, stride),
                      detail::pooled_extent(in.width, 3, stride), false};
    return push(std::move(node));
  }

  Tensor output_tensor() const {
    const FeatureShape& o = nodes_[output_].out_shape;
    Shape shape = o.flat ? Shape{batch_, static_cast<std::size_t>(o.channels)}
                         : Shape{batch_, static_cast<std::size_t>(o.channels),
                                 static_cast<std::size_t>(o.height),
                                 static_cast<std::size_t>(o.width)};
    Tensor out(std::move(shape));
    std::copy(acts_[output_].begin(), acts_[output_].end(), out.values().begin());
    return out;
  }

  void pack_mask(std::size_t k, std::size_t offset) {
    const std::size_t per = nodes_[k].out_shape.size();
    const double* a = acts_[k].data();
    for (std::size_t n = 0; n < batch_; ++n) {
      auto& bits = masks_[n];
      const double* row = a + n * per;
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t b = offset + i;
        const std::uint64_t flag = std::uint64_t{1} << (b & 63);
        if (row[i] > 0.0) bits[b >> 6] |= flag;
        else bits[b >> 6] &= ~flag;
      }
    }
  }

  void run_node(std::size_t k) {
    const LayerNode& node = nodes_[k];
    const std::size_t out_per = node.out_shape.size();
    std::vector<double>& out = acts_[k];
    out.assign(batch_ * out_per, 0.0);
    switch (node.kind) {
      case LayerKind::input:
        break;
      case LayerKind::conv:
        conv_forward(node, acts_[node.inputs[0]], out);
        break;
      case LayerKind::batch_norm: {
        const auto& in = acts_[node.inputs[0]];
        if (mode_ == ForwardMode::bn_suppressed) {
          out = in;
          break;
        }
        const auto scale = params_[node.params[0]].values();
        const auto shift = params_[node.params[1]].values();
        const std::size_t plane = static_cast<std::size_t>(node.out_shape.height) *
                                  node.out_shape.width;
        for (std::size_t n = 0; n < batch_; ++n)
          for (int c = 0; c < node.out_shape.channels; ++c) {
            const std::size_t base = (n * node.out_shape.channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i)
              out[base + i] = scale[c] * in[base + i] + shift[c];
          }
        break;
      }
      case LayerKind::relu: {
        const auto& in = acts_[node.inputs[0]];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
        break;
      }
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        pool_forward(k, acts_[node.inputs[0]], out);
        break;
      case LayerKind::sum:
        for (int in : node.inputs) {
          const auto& src = acts_[in];
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += src[i];
        }
        break;
      case LayerKind::global_avg_pool: {
        const auto& in = acts_[node.inputs[0]];
        const std::size_t plane = static_cast<std::size_t>(node.in_shape.height) *
                                  node.in_shape.width;
        for (std::size_t nc = 0; nc < out.size(); ++nc) {
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += in[nc * plane + i];
          out[nc] = acc / static_cast<double>(plane);
        }
        break;
      }
      case LayerKind::linear: {
        const auto& in = acts_[node.inputs[0]];
        const int fin = node.in_shape.channels;
        const int fout = node.out_shape.channels;
        const auto w = params_[node.params[0]].values();
        const auto b = params_[node.params[1]].values();
        Eigen::Map<const detail::RowMatrix> W(w.data(), fout, fin);
        Eigen::Map<const detail::RowMatrix> X(in.data(), static_cast<Eigen::Index>(batch_), fin);
        Eigen::Map<detail::RowMatrix> Y(out.data(), static_cast<Eigen::Index>(batch_), fout);
        Y.noalias() = X * W.transpose();
        for (std::size_t n = 0; n < batch_; ++n)
          for (int o = 0; o < fout; ++o) Y(static_cast<Eigen::Index>(n), o) += b[o];
        break;
      }
    }
  }

  void conv_forward(const LayerNode& node, const std::vector<double>& in,
                    std::vector<double>& out) const {
    const FeatureShape& is = node.in_shape;
    const FeatureShape& os = node.out_shape;
    const int taps = is.channels * node.kernel * node.kernel;
    const Eigen::Index plane = static_cast<Eigen::Index>(os.height) * os.width;
    Eigen::Map<const detail::RowMatrix> W(params_[node.params[0]].values().data(), os.channels,
                                          taps);
    detail::RowMatrix col(taps, plane);
    for (std::size_t n = 0; n < batch_; ++n) {
      const double* src = in.data() + n * is.size();
      Eigen::Map<detail::RowMatrix> Y(out.data() + n * os.size(), os.channels, plane);
      if (node.kernel == 1 && node.stride == 1) {
        Y.noalias() = W * Eigen::Map<const detail::RowMatrix>(src, is.channels, plane);
        continue;
      }
      detail::im2col(src, is.channels, is.height, is.width, node.kernel, node.stride, os.height,
                     os.width, col.data());
      Y.noalias() = W * col;
    }
  }

  void pool_forward(std::size_t k, const std::vector<double>& in, std::vector<double>& out) {
    const LayerNode& node = nodes_[k];
    const FeatureShape& is = node.in_shape;
    const FeatureShape& os = node.out_shape;
    const bool is_max = node.kind == LayerKind::max_pool;
    if (is_max) argmax_[k].assign(out.size(), -1);
    const std::size_t planes = batch_ * is.channels;
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = in.data() + p * is.height * is.width;
      for (int oy = 0; oy < os.height; ++oy) {
        for (int ox = 0; ox < os.width; ++ox) {
          const std::size_t o = (p * os.height + oy) * os.width + ox;
          double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
          int best = -1;
          int count = 0;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * node.stride + ky - 1;
            if (iy < 0 || iy >= is.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * node.stride + kx - 1;
              if (ix < 0 || ix >= is.width) continue;
              const double v = src[iy * is.width + ix];
              if (is_max) {
                if (v > acc) {
                  acc = v;
                  best = iy * is.width + ix;
                }
              } else {
                acc += v;
                ++count;
              }
            }
          }
          if (is_max) {
            out[o] = acc;
            argmax_[k][o] = best;
          } else {
            out[o] = acc / count;  // padding excluded from the average
          }
        }
      }
    }
  }

  void backprop_node(std::size_t k, std::vector<std::vector<double>>& grads) {
    const LayerNode& node = nodes_[k];
    const std::vector<double>& g = grads[k];
    auto input_grad = [&](int id) -> std::vector<double>& {
      auto& buf = grads[id];
      if (buf.empty()) buf.assign(batch_ * nodes_[id].out_shape.size(), 0.0);
      return buf;
    };

    switch (node.kind) {
      case LayerKind::input:
        break;
      case LayerKind::conv:
        conv_backward(node, g, input_grad(node.inputs[0]));
        break;
      case LayerKind::batch_norm: {
        auto& gin = input_grad(node.inputs[0]);
        if (mode_ == ForwardMode::bn_suppressed) {
          for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
          break;
        }
        auto& scale = params_[node.params[0]];
        auto& shift = params_[node.params[1]];
        const auto& in = acts_[node.inputs[0]];
        const std::size_t plane = static_cast<std::size_t>(node.out_shape.height) *
                                  node.out_shape.width;
        for (std::size_t n = 0; n < batch_; ++n)
          for (int c = 0; c < node.out_shape.channels; ++c) {
            const std::size_t base = (n * node.out_shape.channels + c) * plane;
            double dscale = 0.0;
            double dshift = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              gin[base + i] += scale[c] * g[base + i];
              dscale += g[base + i] * in[base + i];
              dshift += g[base + i];
            }
            scale.grad()[c] += dscale;
            shift.grad()[c] += dshift;
          }
        break;
      }
      case LayerKind::relu: {
        auto& gin = input_grad(node.inputs[0]);
        const auto& out = acts_[k];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (out[i] > 0.0) gin[i] += g[i];
        break;
      }
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        pool_backward(k, g, input_grad(node.inputs[0]));
        break;
      case LayerKind::sum:
        for (int in : node.inputs) {
          auto& gin = input_grad(in);
          for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
        }
        break;
      case LayerKind::global_avg_pool: {
        auto& gin = input_grad(node.inputs[0]);
        const std::size_t plane = static_cast<std::size_t>(node.in_shape.height) *
                                  node.in_shape.width;
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t nc = 0; nc < g.size(); ++nc)
          for (std::size_t i = 0; i < plane; ++i) gin[nc * plane + i] += g[nc] * inv;
        break;
      }
      case LayerKind::linear: {
        auto& gin = input_grad(node.inputs[0]);
        const int fin = node.in_shape.channels;
        const int fout = node.out_shape.channels;
        auto& weight = params_[node.params[0]];
        auto& bias = params_[node.params[1]];
        const auto n = static_cast<Eigen::Index>(batch_);
        Eigen::Map<const detail::RowMatrix> W(weight.values().data(), fout, fin);
        Eigen::Map<detail::RowMatrix> dW(weight.grad().data(), fout, fin);
        Eigen::Map<const detail::RowMatrix> X(acts_[node.inputs[0]].data(), n, fin);
        Eigen::Map<const detail::RowMatrix> G(g.data(), n, fout);
        Eigen::Map<detail::RowMatrix> dX(gin.data(), n, fin);
        dW.noalias() += G.transpose() * X;
        dX.noalias() += G * W;
        for (Eigen::Index r = 0; r < n; ++r)
          for (int o = 0; o < fout; ++o) bias.grad()[o] += G(r, o);
        break;
      }
    }
  }

  void conv_backward(const LayerNode& node, const std::vector<double>& g,
                     std::vector<double>& gin) {
    const FeatureShape& is = node.in_shape;
    const FeatureShape& os = node.out_shape;
    const int taps = is.channels * node.kernel * node.kernel;
    const Eigen::Index plane = static_cast<Eigen::Index>(os.height) * os.width;
    auto& weight = params_[node.params[0]];
    Eigen::Map<const detail::RowMatrix> W(weight.values().data(), os.channels, taps);
    Eigen::Map<detail::RowMatrix> dW(weight.grad().data(), os.channels, taps);
    const auto& in = acts_[node.inputs[0]];
    const bool direct = node.kernel == 1 && node.stride == 1;
    detail::RowMatrix col(taps, plane);
    detail::RowMatrix dcol(taps, plane);
    for (std::size_t n = 0; n < batch_; ++n) {
      Eigen::Map<const detail::RowMatrix> G(g.data() + n * os.size(), os.channels, plane);
      const double* src = in.data() + n * is.size();
      double* gsrc = gin.data() + n * is.size();
      if (direct) {
        Eigen::Map<const detail::RowMatrix> X(src, is.channels, plane);
        Eigen::Map<detail::RowMatrix> dX(gsrc, is.channels, plane);
        dW.noalias() += G * X.transpose();
        dX.noalias() += W.transpose() * G;
        continue;
      }
      detail::im2col(src, is.channels, is.height, is.width, node.kernel, node.stride, os.height,
                     os.width, col.data());
      dW.noalias() += G * col.transpose();
      dcol.noalias() = W.transpose() * G;
      detail::col2im_add(dcol.data(), is.channels, is.height, is.width, node.kernel, node.stride,
                         os.height, os.width, gsrc);
    }
  }

  void pool_backward(std::size_t k, const std::vector<double>& g, std::vector<double>& gin) {
    const LayerNode& node = nodes_[k];
    const FeatureShape& is = node.in_shape;
    const FeatureShape& os = node.out_shape;
    const std::size_t planes = batch_ * is.channels;
    const std::size_t in_plane = static_cast<std::size_t>(is.height) * is.width;
    for (std::size_t p = 0; p < planes; ++p) {
      double* dst = gin.data() + p * in_plane;
      for (int oy = 0; oy < os.height; ++oy) {
        for (int ox = 0; ox < os.width; ++ox) {
          const std::size_t o = (p * os.height + oy) * os.width + ox;
          if (node.kind == LayerKind::max_pool) {
            dst[argmax_[k][o]] += g[o];
            continue;
          }
          int y0 = std::max(oy * node.stride - 1, 0);
          int y1 = std::min(oy * node.stride + 1, is.height - 1);
          int x0 = std::max(ox * node.stride - 1, 0);
          int x1 = std::min(ox * node.stride + 1, is.width - 1);
          const double share = g[o] / ((y1 - y0 + 1) * (x1 - x0 + 1));
          for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix) dst[iy * is.width + ix] += share;
        }
      }
    }
  }

  FeatureShape input_shape_;
  std::vector<LayerNode> nodes_;
  std::vector<Tensor> params_;
  int output_ = 0;
  std::size_t relu_units_ = 0;

  // Forward caches.
  std::size_t batch_ = 0;
  ForwardMode mode_ = ForwardMode::standard;
  bool cache_live_ = false;
  std::vector<std::vector<double>> acts_;
  std::vector<std::vector<std::int32_t>> argmax_;
  std::vector<std::vector<std::uint64_t>> masks_;
};

}  // namespace freerea
