#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lilora/adapters.hpp"
#include "lilora/diff.hpp"
#include "lilora/errors.hpp"
#include "lilora/io.hpp"
#include "lilora/linalg.hpp"
#include "lilora/optim.hpp"
#include "lilora/taskgen.hpp"

namespace lilora {

/// y = W x + b with W (out x in) and b (out x 1).
struct Linear {
  Matrix W;
  Matrix b;
};

struct Architecture {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t output_dim = 24;

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim);
    return w;
  }
};

/// Feed-forward ReLU classifier standing in for a pretrained model.
/// Once frozen, its weights are read-only.
class Backbone {
 public:
  Backbone() = default;

  /// He-normal weights, zero biases.
  static Backbone init(const Architecture& arch, Rng& rng) {
    Backbone bb;
    const auto w = arch.widths();
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      if (w[i] == 0 || w[i + 1] == 0) throw ShapeError("layer widths must be positive");
      Linear l;
      l.W = gaussian_matrix(rng, w[i + 1], w[i], std::sqrt(2.0 / static_cast<double>(w[i])));
      l.b = Matrix(w[i + 1], 1);
      bb.layers_.push_back(std::move(l));
    }
    return bb;
  }

  static Backbone from_layers(std::vector<Linear> layers, bool frozen) {
    if (layers.empty()) throw ShapeError("backbone needs at least one layer");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].b.rows() != layers[i].W.rows() || layers[i].b.cols() != 1)
        throw ShapeError("layer " + std::to_string(i) + " bias does not match weight");
      if (i > 0 && layers[i].W.cols() != layers[i - 1].W.rows())
        throw ShapeError("layer " + std::to_string(i) + " input width mismatch");
    }
    Backbone bb;
    bb.layers_ = std::move(layers);
    bb.frozen_ = frozen;
    return bb;
  }

  std::size_t num_layers() const noexcept { return layers_.size(); }
  const Linear& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t input_dim() const { return layers_.front().W.cols(); }
  std::size_t output_dim() const { return layers_.back().W.rows(); }
  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  /// Mutable access for pretraining only.
  Linear& mutable_layer(std::size_t i) {
    if (frozen_) throw StateError("backbone is frozen");
    return layers_.at(i);
  }

  /// Logits (n x out) for inputs (n x in).
  Matrix forward(const Matrix& x) const {
    std::vector<const Matrix*> ws;
    for (const Linear& l : layers_) ws.push_back(&l.W);
    return run(x, ws);
  }

  /// Forward with the given per-layer weights in place of W0.
  Matrix run(const Matrix& x, const std::vector<const Matrix*>& weights) const {
    if (x.cols() != input_dim())
      throw ShapeError("input width " + std::to_string(x.cols()) + " does not match backbone " +
                       std::to_string(input_dim()));
    Matrix h = transpose(x);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = matmul(*weights[i], h);
      add_bias_relu(h, layers_[i].b, i + 1 < layers_.size());
    }
    return transpose(h);
  }

  io::NamedTensors to_tensors() const {
    io::NamedTensors t;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      t.emplace_back("layer" + std::to_string(i) + ".W", layers_[i].W);
      t.emplace_back("layer" + std::to_string(i) + ".b", layers_[i].b);
    }
    return t;
  }

  static Backbone from_tensors(const io::NamedTensors& t) {
    std::vector<Linear> layers;
    for (std::size_t i = 0;; ++i) {
      const Matrix* W = io::try_find_tensor(t, "layer" + std::to_string(i) + ".W");
      if (!W) break;
      layers.push_back({*W, io::find_tensor(t, "layer" + std::to_string(i) + ".b")});
    }
    return from_layers(std::move(layers), true);
  }

  static void add_bias_relu(Matrix& h, const Matrix& b, bool relu) {
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < h.cols(); ++c) {
        const double v = h(r, c) + b[r];
        h(r, c) = (relu && !(v > 0.0)) ? 0.0 : v;
      }
  }

 private:
  std::vector<Linear> layers_;
  bool frozen_ = false;
};

inline std::size_t argmax_row(const Matrix& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

inline std::vector<std::size_t> predict(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax_row(logits, r);
  return out;
}

/// Fraction of rows whose argmax equals the label.
inline double accuracy(const Matrix& logits, const std::vector<std::size_t>& labels) {
  if (logits.rows() != labels.size()) throw ShapeError("accuracy: logits/labels count mismatch");
  std::size_t hit = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) hit += argmax_row(logits, r) == labels[r];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// --- adapted model ---------------------------------------------------------

/// A frozen backbone plus an adapter bank evaluated under one task.
struct AdaptedModel {
  const Backbone* backbone = nullptr;
  const AdapterBank* adapters = nullptr;
  std::optional<std::size_t> active_task;

  void check() const {
    if (!backbone || !adapters) throw StateError("adapted model is missing its backbone or adapters");
    if (!active_task) throw StateError("adapted model has no active task");
    for (std::size_t i = 0; i < adapters->num_layers(); ++i) {
      const std::size_t l = adapters->injected_layers()[i];
      const LayerDims d = adapters->dims(i);
      const Matrix& W = backbone->layer(l).W;
      if (d.d != W.rows() || d.k != W.cols())
        throw ShapeError("adapter " + std::to_string(i) + " shape does not match layer " + std::to_string(l));
    }
  }

  /// Per-layer merged weights W0 + dW (W0 alone where no adapter is injected).
  std::vector<Matrix> merged_weights() const {
    check();
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < backbone->num_layers(); ++l) {
      const Matrix& W0 = backbone->layer(l).W;
      const auto a = adapters->adapter_for(l);
      out.push_back(a ? merge_weights(W0, adapters->delta(*a, *active_task)) : W0);
    }
    return out;
  }
};

/// Logits through merged weights, (W0 + dW) x + b per layer.
inline Matrix forward_adapted(const AdaptedModel& model, const Matrix& x) {
  const auto merged = model.merged_weights();
  std::vector<const Matrix*> ws;
  for (const Matrix& w : merged) ws.push_back(&w);
  return model.backbone->run(x, ws);
}

/// Logits through the unmerged two-path form, W0 x + dW x + b per layer.
inline Matrix forward_two_path(const AdaptedModel& model, const Matrix& x) {
  model.check();
  const Backbone& bb = *model.backbone;
  if (x.cols() != bb.input_dim()) throw ShapeError("input width does not match backbone");
  Matrix h = transpose(x);
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    Matrix next = matmul(bb.layer(l).W, h);
    if (const auto a = model.adapters->adapter_for(l)) next = add(next, matmul(model.adapters->delta(*a, *model.active_task), h));
    Backbone::add_bias_relu(next, bb.layer(l).b, l + 1 < bb.num_layers());
    h = std::move(next);
  }
  return transpose(h);
}

/// Record a forward pass on `tape`. `weights[l]` is the node for layer l's
/// effective weight; inputs are taken as a constant (n x in) batch.
inline diff::NodeId record_forward(diff::Tape& tape, const Backbone& bb, const std::vector<diff::NodeId>& weights,
                                   const Matrix& x) {
  diff::NodeId h = tape.constant(transpose(x), "input");
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    h = tape.matmul(weights[l], h);
    h = tape.bias_add(h, tape.constant(bb.layer(l).b, "b" + std::to_string(l)));
    if (l + 1 < bb.num_layers()) h = tape.relu(h);
  }
  return h;
}

// --- pretraining -----------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  AdamConfig adam;
};

struct PretrainResult {
  Backbone backbone;
  double base_accuracy = 0.0;  // fraction on the base test split
};

/// Train every backbone weight on the base data, then freeze.
inline PretrainResult pretrain_backbone(const Dataset& train, const Dataset& test, const Architecture& arch,
                                        const PretrainConfig& cfg, Rng& rng) {
  if (train.size() == 0) throw DataError("pretraining set is empty");
  Backbone bb = Backbone::init(arch, rng);
  Adam opt(cfg.adam);
  long step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : minibatches(permutation(rng, train.size()), cfg.batch_size)) {
      const Dataset batch = train.subset(idx);
      diff::Tape tape;
      std::vector<diff::NodeId> ws, bs;
      std::vector<Matrix*> params;
      for (std::size_t l = 0; l < bb.num_layers(); ++l) {
        ws.push_back(tape.parameter(bb.layer(l).W, "W" + std::to_string(l)));
        bs.push_back(tape.parameter(bb.layer(l).b, "b" + std::to_string(l)));
      }
      diff::NodeId h = tape.constant(transpose(batch.X), "input");
      for (std::size_t l = 0; l < bb.num_layers(); ++l) {
        h = tape.bias_add(tape.matmul(ws[l], h), bs[l]);
        if (l + 1 < bb.num_layers()) h = tape.relu(h);
      }
      const diff::NodeId loss = tape.softmax_cross_entropy(h, batch.labels);
      if (!std::isfinite(tape.value(loss)[0])) throw TrainingError("pretraining loss is not finite", step);
      tape.backward(loss);
      std::vector<const Matrix*> grads;
      for (std::size_t l = 0; l < bb.num_layers(); ++l) {
        params.push_back(&bb.mutable_layer(l).W);
        grads.push_back(&tape.grad(ws[l]));
        params.push_back(&bb.mutable_layer(l).b);
        grads.push_back(&tape.grad(bs[l]));
      }
      opt.step(params, grads);
      ++step;
    }
  }
  bb.freeze();
  PretrainResult res;
  res.base_accuracy = accuracy(bb.forward(test.X), test.labels);
  res.backbone = std::move(bb);
  return res;
}

}  // namespace lilora
