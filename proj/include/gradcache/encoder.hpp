#pragma once

// MLP encoders f (anchors) and g (targets).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradcache/autodiff.hpp"
#include "gradcache/errors.hpp"
#include "gradcache/memtrace.hpp"

namespace gradcache {

enum class Activation { identity, tanh, relu };

constexpr std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
  }
  return "unknown";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct Layer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]
  Activation activation = Activation::identity;
};

/// Parameters of one encoder. Zero layers is the identity map on
/// `identity_dim`-dimensional inputs.
struct EncoderParams {
  std::vector<Layer> layers;
  std::size_t identity_dim = 0;

  static EncoderParams identity(std::size_t dim) {
    EncoderParams p;
    p.identity_dim = dim;
    return p;
  }

  bool is_identity() const { return layers.empty(); }
  std::size_t in_dim() const {
    return layers.empty() ? identity_dim : layers.front().weight.rows();
  }
  std::size_t out_dim() const {
    return layers.empty() ? identity_dim : layers.back().weight.cols();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  void validate() const {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.weight.rank() != 2 || l.bias.size() != l.weight.cols()) {
        throw ShapeError("layer " + std::to_string(k) + ": weight " +
                         shape_string(l.weight.shape()) + " bias " +
                         shape_string(l.bias.shape()));
      }
      if (k > 0 && layers[k - 1].weight.cols() != l.weight.rows()) {
        throw ShapeError("layer " + std::to_string(k) + " input dim " +
                         std::to_string(l.weight.rows()) +
                         " does not chain with previous output dim " +
                         std::to_string(layers[k - 1].weight.cols()));
      }
    }
  }

  /// Weights and biases in layer order: W0, b0, W1, b1, ...
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(layers.size() * 2);
    for (const auto& l : layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  /// Same architecture, tensors replaced in `tensors()` order.
  EncoderParams with_tensors(std::span<const Tensor> ts) const {
    if (ts.size() != layers.size() * 2) {
      throw ShapeError("with_tensors: expected " + std::to_string(layers.size() * 2) +
                       " tensors, got " + std::to_string(ts.size()));
    }
    EncoderParams p = *this;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (ts[2 * k].shape() != layers[k].weight.shape() ||
          ts[2 * k + 1].shape() != layers[k].bias.shape()) {
        throw ShapeError("with_tensors: shape mismatch at layer " + std::to_string(k));
      }
      p.layers[k].weight = ts[2 * k];
      p.layers[k].bias = ts[2 * k + 1];
    }
    return p;
  }

  /// Flat copy of every parameter value in `tensors()` order.
  std::vector<double> flat() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& t : tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
/// `hidden` applies to every layer but the last, which uses `output`.
inline EncoderParams init_params(std::uint64_t seed, std::span<const std::size_t> dims,
                                 Activation hidden = Activation::tanh,
                                 Activation output = Activation::identity) {
  if (dims.empty()) throw ConfigError("init_params: dims must be non-empty");
  if (dims.size() == 1) return EncoderParams::identity(dims[0]);
  mem::CategoryScope category(mem::Category::parameters);
  std::mt19937_64 rng(seed);
  EncoderParams p;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const std::size_t in = dims[k], out = dims[k + 1];
    if (in == 0 || out == 0) throw ConfigError("init_params: zero dimension");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out);
    for (auto& x : w) x = dist(rng);
    Layer layer;
    layer.weight = Tensor::matrix(in, out, std::move(w));
    layer.bias = Tensor::matrix(1, out, std::vector<double>(out, 0.0));
    layer.activation = (k + 2 == dims.size()) ? output : hidden;
    p.layers.push_back(std::move(layer));
  }
  return p;
}

inline EncoderParams init_params(std::uint64_t seed, std::initializer_list<std::size_t> dims,
                                 Activation hidden = Activation::tanh,
                                 Activation output = Activation::identity) {
  return init_params(seed, std::span<const std::size_t>(dims.begin(), dims.size()),
                     hidden, output);
}

namespace detail {
inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::tanh:
      return ops::tanh(x);
    case Activation::relu:
      return ops::relu(x);
    case Activation::identity:
      break;
  }
  return x;
}
}  // namespace detail

/// Embed each row of `inputs`. Records onto a tape when the parameters or
/// inputs are attached to one and recording is enabled.
inline Tensor encode(const EncoderParams& params, const Tensor& inputs) {
  if (inputs.rank() != 2 || inputs.cols() != params.in_dim()) {
    throw ShapeError("encode: inputs " + shape_string(inputs.shape()) +
                     " do not match encoder input dim " +
                     std::to_string(params.in_dim()));
  }
  Tensor x = inputs;
  for (const auto& layer : params.layers) {
    x = ops::add(ops::matmul(x, layer.weight), layer.bias);
    x = detail::activate(x, layer.activation);
  }
  return x;
}

/// encode() with an explicit recording choice; `taped == false` runs inside
/// a NoGraphScope.
inline Tensor encode(const EncoderParams& params, const Tensor& inputs, bool taped) {
  if (taped) return encode(params, inputs);
  return no_graph_scope([&] { return encode(params, inputs); });
}

/// Copy of `params` whose tensors are leaves on `tape`.
inline EncoderParams attach(Tape& tape, const EncoderParams& params) {
  EncoderParams p = params;
  for (auto& l : p.layers) {
    l.weight = tape.variable(l.weight);
    l.bias = tape.variable(l.bias);
  }
  return p;
}

/// Gradients of attached parameters after `tape.backward`, same layout.
inline EncoderParams gradients(const Tape& tape, const EncoderParams& attached) {
  EncoderParams g = attached;
  for (auto& l : g.layers) {
    l.weight = tape.grad(l.weight).detach();
    l.bias = tape.grad(l.bias).detach();
  }
  return g;
}

/// All-zero parameters with the layout of `like`, tagged as parameters.
inline EncoderParams zeros_like(const EncoderParams& like) {
  mem::CategoryScope category(mem::Category::parameters);
  EncoderParams z = like;
  for (auto& l : z.layers) {
    l.weight = Tensor::zeros(l.weight.shape());
    l.bias = Tensor::zeros(l.bias.shape());
  }
  return z;
}

/// Elementwise a + b for equal layouts, tagged as parameters.
inline EncoderParams add_params(const EncoderParams& a, const EncoderParams& b) {
  if (a.layers.size() != b.layers.size()) throw ShapeError("add_params: layer count");
  mem::CategoryScope category(mem::Category::parameters);
  NoGraphScope no_graph;
  EncoderParams out = a;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    out.layers[k].weight = ops::add(a.layers[k].weight.detach(), b.layers[k].weight.detach());
    out.layers[k].bias = ops::add(a.layers[k].bias.detach(), b.layers[k].bias.detach());
  }
  return out;
}

/// Anchor encoder f and target encoder g. When `tied`, g is f.
struct DualEncoder {
  EncoderParams anchor;
  EncoderParams target;
  bool tied = false;

  const EncoderParams& target_encoder() const { return tied ? anchor : target; }
  std::size_t embedding_dim() const { return anchor.out_dim(); }

  void validate() const {
    anchor.validate();
    target_encoder().validate();
    if (anchor.out_dim() != target_encoder().out_dim()) {
      throw ShapeError("anchor and target encoders disagree on embedding dim: " +
                       std::to_string(anchor.out_dim()) + " vs " +
                       std::to_string(target_encoder().out_dim()));
    }
  }

  /// Trainable tensors: f's, then g's unless tied.
  std::vector<Tensor> tensors() const {
    auto out = anchor.tensors();
    if (!tied) {
      auto t = target.tensors();
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }

  DualEncoder with_tensors(std::span<const Tensor> ts) const {
    const std::size_t na = anchor.layers.size() * 2;
    DualEncoder d = *this;
    d.anchor = anchor.with_tensors(ts.subspan(0, na));
    if (!tied) d.target = target.with_tensors(ts.subspan(na));
    return d;
  }

  std::vector<double> flat() const {
    auto out = anchor.flat();
    if (!tied) {
      auto t = target.flat();
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }
};

/// Gradients for a DualEncoder. For tied encoders `target` is unused and the
/// contributions of both sides are summed into `anchor`.
struct DualGrads {
  EncoderParams anchor;
  EncoderParams target;
  bool tied = false;

  static DualGrads zeros(const DualEncoder& model) {
    DualGrads g;
    g.tied = model.tied;
    g.anchor = zeros_like(model.anchor);
    if (!model.tied) g.target = zeros_like(model.target);
    return g;
  }

  EncoderParams& target_slot() { return tied ? anchor : target; }

  std::vector<Tensor> tensors() const {
    auto out = anchor.tensors();
    if (!tied) {
      auto t = target.tensors();
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }

  std::vector<double> flat() const {
    auto out = anchor.flat();
    if (!tied) {
      auto t = target.flat();
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }
};

}  // namespace gradcache
