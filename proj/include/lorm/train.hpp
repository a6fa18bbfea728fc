#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lorm/fcil.hpp"
#include "lorm/linalg.hpp"
#include "lorm/peft.hpp"
#include "lorm/rng.hpp"

namespace lorm {

// ---------------------------------------------------------------------------
// Data

/// Class-conditional Gaussian blobs. Features are dim x examples, one column each.
struct SyntheticDataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  Matrix means;  // dim x classes
};

/// Class means are seeded random points on the unit sphere; each example is
/// mean + N(0, blob_std^2 I). Examples are laid out class by class, train before test.
inline SyntheticDataset make_synthetic_dataset(std::size_t classes, std::size_t dim, std::size_t per_class_train,
                                               std::size_t per_class_test, double blob_std, std::uint64_t seed) {
  if (classes < 2) throw DomainError("make_synthetic_dataset: need at least two classes");
  if (dim == 0) throw DomainError("make_synthetic_dataset: dim must be positive");
  if (!(blob_std >= 0.0)) throw DomainError("make_synthetic_dataset: negative blob_std");
  Rng rng(seed);
  SyntheticDataset ds;
  ds.classes = classes;
  ds.means = Matrix(dim, classes);
  for (std::size_t c = 0; c < classes; ++c) {
    double norm = 0.0;
    std::vector<double> v(dim);
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim; ++i) ds.means(i, c) = v[i] / norm;
  }
  const std::size_t per_class = per_class_train + per_class_test;
  ds.features = Matrix(dim, classes * per_class);
  ds.labels.resize(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t e = 0; e < per_class; ++e) {
      const std::size_t col = c * per_class + e;
      for (std::size_t i = 0; i < dim; ++i)
        ds.features(i, col) = ds.means(i, c) + (blob_std > 0.0 ? rng.normal(0.0, blob_std) : 0.0);
      ds.labels[col] = static_cast<int>(c);
      (e < per_class_train ? ds.train : ds.test).push_back(col);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model

struct Head {
  Matrix weight;  // classes x features
  Matrix bias;    // classes x 1
  int first_class = 0;

  std::size_t num_classes() const noexcept { return weight.rows(); }
};

/// One classifier head per task; stacked in task order they form the unified classifier.
struct HeadBank {
  std::vector<Head> heads;

  std::size_t size() const noexcept { return heads.size(); }
  std::size_t total_classes() const {
    std::size_t n = 0;
    for (const auto& h : heads) n += h.num_classes();
    return n;
  }
  Matrix stacked_weight() const {
    std::vector<Matrix> ws;
    for (const auto& h : heads) ws.push_back(h.weight);
    return vstack(ws);
  }
  Matrix stacked_bias() const {
    std::vector<Matrix> bs;
    for (const auto& h : heads) bs.push_back(h.bias);
    return vstack(bs);
  }
};

/// Frozen linear layers with residual adapters, ReLU after every layer, then heads.
struct MLPModel {
  std::vector<LinearLayer> layers;
  HeadBank heads;

  std::size_t feature_dim() const { return layers.back().out_dim(); }
};

struct Activations {
  std::vector<Matrix> inputs;  // inputs[l] feeds layer l; inputs.back() feeds the heads
  std::vector<Matrix> pre;     // pre-activations of each layer
};

inline Matrix relu(Matrix m) {
  for (auto& v : m.data()) v = v > 0.0 ? v : 0.0;
  return m;
}

inline Activations forward_backbone(const MLPModel& model, const Matrix& x) {
  Activations act;
  act.inputs.reserve(model.layers.size() + 1);
  act.inputs.push_back(x);
  for (const auto& layer : model.layers) {
    act.pre.push_back(layer_forward(layer, act.inputs.back()));
    act.inputs.push_back(relu(act.pre.back()));
  }
  return act;
}

inline Matrix head_logits(const Head& head, const Matrix& features) {
  return detail::add_bias(matmul(head.weight, features), head.bias);
}

/// Logits over every class of every head, rows ordered by class id.
inline Matrix model_logits(const MLPModel& model, const Matrix& x) {
  if (model.heads.size() == 0) throw DomainError("model_logits: model has no heads");
  Matrix feats = forward_backbone(model, x).inputs.back();
  std::vector<Matrix> parts;
  for (const auto& h : model.heads.heads) parts.push_back(head_logits(h, feats));
  return vstack(parts);
}

/// FNV-1a over every frozen weight and bias, for the frozen-weight contract.
inline std::uint64_t frozen_hash(const MLPModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Matrix& m) {
    auto d = m.data();
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)), h);
  };
  for (const auto& l : model.layers) {
    mix(l.w0);
    mix(l.bias);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Loss

struct AceResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits, same shape as logits
};

/// Cross-entropy restricted to the current task's classes [first_class, first_class + count).
/// Rows of other tasks get exactly zero gradient. Loss is averaged over columns.
inline AceResult ace_masked_loss(const Matrix& logits, std::span<const int> labels, int first_class,
                                 std::size_t count) {
  if (labels.size() != logits.cols()) {
    throw ShapeError("ace_masked_loss: " + std::to_string(labels.size()) + " labels for logits " + logits.shape());
  }
  const auto lo = static_cast<std::size_t>(first_class);
  if (count == 0 || lo + count > logits.rows()) {
    throw ShapeError("ace_masked_loss: class range outside logits " + logits.shape());
  }
  AceResult out{0.0, Matrix::zeros(logits.rows(), logits.cols())};
  const double inv_n = 1.0 / static_cast<double>(logits.cols());
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    const int y = labels[j];
    if (y < first_class || static_cast<std::size_t>(y) >= lo + count) {
      throw DomainError("ace_masked_loss: label " + std::to_string(y) + " is not a current-task class");
    }
    double mx = logits(lo, j);
    for (std::size_t c = lo + 1; c < lo + count; ++c) mx = std::max(mx, logits(c, j));
    double z = 0.0;
    for (std::size_t c = lo; c < lo + count; ++c) z += std::exp(logits(c, j) - mx);
    const double log_z = mx + std::log(z);
    out.loss += (log_z - logits(static_cast<std::size_t>(y), j)) * inv_n;
    for (std::size_t c = lo; c < lo + count; ++c) {
      const double p = std::exp(logits(c, j) - log_z);
      out.grad(c, j) = (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

/// Which residual parameters receive updates. The current task head always trains.
enum class Trainable { LoraA, LoraB, LoraBoth, VeraLambdaD, VeraLambdaB, VeraBoth, Ia3, Dense };

inline const char* to_string(Trainable t) {
  switch (t) {
    case Trainable::LoraA: return "lora-A";
    case Trainable::LoraB: return "lora-B";
    case Trainable::LoraBoth: return "lora-AB";
    case Trainable::VeraLambdaD: return "vera-lambda_d";
    case Trainable::VeraLambdaB: return "vera-lambda_b";
    case Trainable::VeraBoth: return "vera-lambda_bd";
    case Trainable::Ia3: return "ia3";
    case Trainable::Dense: return "full-layer";
  }
  return "?";
}

/// Gradient of each trainable residual parameter; untouched parameters stay empty.
struct LayerGrad {
  Matrix lora_a, lora_b, vera_lambda_d, vera_lambda_b, ia3_ell, dense;
};

struct ModelGrad {
  double loss = 0.0;
  std::vector<LayerGrad> layers;
  Matrix head_weight;
  Matrix head_bias;
};

namespace detail {

inline bool trains_lora_a(Trainable t) { return t == Trainable::LoraA || t == Trainable::LoraBoth; }
inline bool trains_lora_b(Trainable t) { return t == Trainable::LoraB || t == Trainable::LoraBoth; }
inline bool trains_vera_d(Trainable t) { return t == Trainable::VeraLambdaD || t == Trainable::VeraBoth; }
inline bool trains_vera_b(Trainable t) { return t == Trainable::VeraLambdaB || t == Trainable::VeraBoth; }

/// Fills the gradient of the layer's residual given m = dL/dW_eff (d x k).
inline LayerGrad residual_grad(const LinearLayer& layer, const Matrix& m, Trainable t) {
  LayerGrad g;
  if (const auto* lora = std::get_if<LoRAModule>(&layer.residual)) {
    if (trains_lora_b(t)) g.lora_b = matmul_nt(m, lora->a);
    if (trains_lora_a(t)) g.lora_a = matmul_tn(lora->b, m);
  } else if (const auto* vera = std::get_if<VeRAModule>(&layer.residual)) {
    if (trains_vera_b(t)) {
      Matrix base = matmul(vera->b_frozen, vera_a_scaled(*vera));
      g.vera_lambda_b = Matrix(m.rows(), 1);
      for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j) * base(i, j);
        g.vera_lambda_b[i] = s;
      }
    }
    if (trains_vera_d(t)) {
      Matrix bt_m_at = matmul_nt(matmul_tn(vera_b_scaled(*vera), m), vera->a_frozen);
      g.vera_lambda_d = Matrix(bt_m_at.rows(), 1);
      for (std::size_t j = 0; j < bt_m_at.rows(); ++j) g.vera_lambda_d[j] = bt_m_at(j, j);
    }
  } else if (std::holds_alternative<IA3Module>(layer.residual)) {
    if (t == Trainable::Ia3) {
      g.ia3_ell = Matrix(m.rows(), 1);
      for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j) * layer.w0(i, j);
        g.ia3_ell[i] = s;
      }
    }
  } else if (std::holds_alternative<DenseResidual>(layer.residual)) {
    if (t == Trainable::Dense) g.dense = m;
  }
  return g;
}

inline void require_trainable_matches(const LinearLayer& layer, Trainable t) {
  const bool ok = std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, LoRAModule>) {
          return t == Trainable::LoraA || t == Trainable::LoraB || t == Trainable::LoraBoth;
        } else if constexpr (std::is_same_v<T, VeRAModule>) {
          return t == Trainable::VeraLambdaD || t == Trainable::VeraLambdaB || t == Trainable::VeraBoth;
        } else if constexpr (std::is_same_v<T, IA3Module>) {
          return t == Trainable::Ia3;
        } else if constexpr (std::is_same_v<T, DenseResidual>) {
          return t == Trainable::Dense;
        } else {
          return false;
        }
      },
      layer.residual);
  if (!ok) throw DomainError(std::string("trainable class ") + to_string(t) + " does not match the layer residual");
}

}  // namespace detail

/// Loss and analytic gradients for one batch. Only head `head_index` enters the loss.
inline ModelGrad compute_gradients(const MLPModel& model, const Matrix& x, std::span<const int> labels,
                                   std::size_t head_index, Trainable trainable) {
  if (head_index >= model.heads.size()) throw DomainError("compute_gradients: no head " + std::to_string(head_index));
  const Head& head = model.heads.heads[head_index];
  const Activations act = forward_backbone(model, x);
  const Matrix& feats = act.inputs.back();

  std::vector<int> local(labels.begin(), labels.end());
  for (auto& y : local) y -= head.first_class;
  AceResult ace = ace_masked_loss(head_logits(head, feats), local, 0, head.num_classes());

  ModelGrad g;
  g.loss = ace.loss;
  g.head_weight = matmul_nt(ace.grad, feats);
  g.head_bias = Matrix(head.num_classes(), 1);
  for (std::size_t c = 0; c < ace.grad.rows(); ++c) {
    double s = 0.0;
    for (double v : ace.grad.row(c)) s += v;
    g.head_bias[c] = s;
  }

  g.layers.resize(model.layers.size());
  Matrix upstream = matmul_tn(head.weight, ace.grad);  // dL/d(layer output after ReLU)
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const LinearLayer& layer = model.layers[l];
    Matrix dpre = upstream;
    const Matrix& pre = act.pre[l];
    for (std::size_t i = 0; i < dpre.size(); ++i)
      if (!(pre[i] > 0.0)) dpre[i] = 0.0;
    g.layers[l] = detail::residual_grad(layer, matmul_nt(dpre, act.inputs[l]), trainable);
    if (l > 0) upstream = matmul_tn(layer.w0 + residual_matrix(layer), dpre);
  }
  return g;
}

/// `lr` steps the residual trainables, `head_lr` the open head.
inline void apply_gradients(MLPModel& model, const ModelGrad& g, std::size_t head_index, double lr, double head_lr) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerGrad& lg = g.layers[l];
    std::visit(
        [&](auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, LoRAModule>) {
            if (!lg.lora_a.empty()) axpy(-lr, lg.lora_a, m.a);
            if (!lg.lora_b.empty()) axpy(-lr, lg.lora_b, m.b);
          } else if constexpr (std::is_same_v<T, VeRAModule>) {
            if (!lg.vera_lambda_d.empty()) axpy(-lr, lg.vera_lambda_d, m.lambda_d);
            if (!lg.vera_lambda_b.empty()) axpy(-lr, lg.vera_lambda_b, m.lambda_b);
          } else if constexpr (std::is_same_v<T, IA3Module>) {
            if (!lg.ia3_ell.empty()) axpy(-lr, lg.ia3_ell, m.ell);
          } else if constexpr (std::is_same_v<T, DenseResidual>) {
            if (!lg.dense.empty()) axpy(-lr, lg.dense, m.delta);
          }
        },
        model.layers[l].residual);
  }
  Head& head = model.heads.heads[head_index];
  axpy(-head_lr, g.head_weight, head.weight);
  axpy(-head_lr, g.head_bias, head.bias);
}

inline void apply_gradients(MLPModel& model, const ModelGrad& g, std::size_t head_index, double lr) {
  apply_gradients(model, g, head_index, lr, lr);
}

// ---------------------------------------------------------------------------
// Local training

struct SGDConfig {
  double learning_rate = 0.1;
  std::size_t epochs_per_round = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<double> residual_learning_rate;  // unset: learning_rate

  double residual_lr() const { return residual_learning_rate.value_or(learning_rate); }
};

struct LocalResult {
  MLPModel model;
  std::vector<double> epoch_losses;  // mean batch loss per epoch

  double final_loss() const { return epoch_losses.empty() ? 0.0 : epoch_losses.back(); }
};

/// Plain minibatch SGD on the ACE loss of head `head_index`. Frozen weights are never written.
inline LocalResult local_train(MLPModel model, const Matrix& features, std::span<const int> labels,
                               std::span<const std::size_t> examples, std::size_t head_index, Trainable trainable,
                               const SGDConfig& cfg) {
  if (examples.empty()) throw DomainError("local_train: empty partition");
  if (!(cfg.learning_rate >= 0.0) || !(cfg.residual_lr() >= 0.0)) throw DomainError("local_train: negative learning rate");
  if (cfg.epochs_per_round == 0 || cfg.batch_size == 0) throw DomainError("local_train: epochs and batch size must be >= 1");
  for (const auto& layer : model.layers) detail::require_trainable_matches(layer, trainable);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(examples.begin(), examples.end());
  LocalResult out;
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_round; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> y;
      y.reserve(idx.size());
      for (std::size_t i : idx) y.push_back(labels[i]);
      ModelGrad g = compute_gradients(model, gather_columns(features, idx), y, head_index, trainable);
      apply_gradients(model, g, head_index, cfg.residual_lr(), cfg.learning_rate);
      loss_sum += g.loss;
      ++batches;
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
  }
  out.model = std::move(model);
  return out;
}

/// Fraction of examples whose argmax over head `head_index` is the true label.
inline double head_accuracy(const MLPModel& model, const Matrix& features, std::span<const int> labels,
                            std::span<const std::size_t> examples, std::size_t head_index) {
  const Head& head = model.heads.heads.at(head_index);
  Matrix logits = head_logits(head, forward_backbone(model, gather_columns(features, examples)).inputs.back());
  std::size_t correct = 0;
  for (std::size_t j = 0; j < examples.size(); ++j)
    if (static_cast<int>(argmax_column(logits, j)) + head.first_class == labels[examples[j]]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Gram statistics

struct GramPolicy {
  double gamma_backbone = 0.0;
  double gamma_classifier = 0.5;
};

/// Per-layer input Grams of one client plus the Gram of the classifier input.
struct ClientGrams {
  std::vector<GramStat> layers;
  GramStat classifier;
};

/// One forward pass over the partition (in chunks of `chunk` columns), accumulating every
/// adapted layer's input second moment; gamma decay is applied before returning.
inline ClientGrams collect_gram(const MLPModel& model, const Matrix& features, std::span<const std::size_t> examples,
                                const GramPolicy& policy, std::size_t chunk = 256) {
  if (examples.empty()) throw DomainError("collect_gram: empty partition");
  ClientGrams out;
  for (const auto& layer : model.layers) out.layers.push_back(GramStat::zero(layer.in_dim()));
  out.classifier = GramStat::zero(model.feature_dim());
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const std::size_t end = std::min(examples.size(), start + chunk);
    Activations act = forward_backbone(model, gather_columns(features, examples.subspan(start, end - start)));
    for (std::size_t l = 0; l < model.layers.size(); ++l) out.layers[l] = gram_accumulate(out.layers[l], act.inputs[l]);
    out.classifier = gram_accumulate(out.classifier, act.inputs.back());
  }
  for (auto& g : out.layers) g = decay_off_diagonal(g, policy.gamma_backbone);
  out.classifier = decay_off_diagonal(out.classifier, policy.gamma_classifier);
  return out;
}

// ---------------------------------------------------------------------------
// Frozen backbone

struct BackboneConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t pretext_classes = 20;
  std::size_t pretext_per_class = 100;
  double pretext_blob_std = 0.3;
  std::size_t steps = 200;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
};

/// He-initialized random MLP trained for a fixed number of SGD steps on a disjoint
/// synthetic pretext task, then frozen. Residuals are left empty and heads cleared.
inline MLPModel make_pretrained_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  if (cfg.hidden.empty()) throw DomainError("backbone needs at least one hidden layer");
  Rng init(derive_seed(seed, "backbone-init"));
  MLPModel model;
  std::size_t k = cfg.input_dim;
  for (std::size_t d : cfg.hidden) {
    LinearLayer layer;
    layer.w0 = Matrix::gaussian(d, k, std::sqrt(2.0 / static_cast<double>(k)), init);
    layer.bias = Matrix::gaussian(d, 1, 0.01, init);
    layer.residual = DenseResidual{Matrix::zeros(d, k)};
    model.layers.push_back(std::move(layer));
    k = d;
  }
  model.heads.heads.push_back({Matrix::zeros(cfg.pretext_classes, k), Matrix::zeros(cfg.pretext_classes, 1), 0});

  if (cfg.steps > 0) {
    auto pretext = make_synthetic_dataset(cfg.pretext_classes, cfg.input_dim, cfg.pretext_per_class, 0,
                                          cfg.pretext_blob_std, derive_seed(seed, "backbone-pretext"));
    Rng order_rng(derive_seed(seed, "backbone-sgd"));
    std::vector<std::size_t> order = pretext.train;
    std::size_t pos = order.size();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      if (pos + cfg.batch_size > order.size()) {
        order_rng.shuffle(order);
        pos = 0;
      }
      std::span<const std::size_t> idx(order.data() + pos, std::min(cfg.batch_size, order.size()));
      pos += cfg.batch_size;
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(pretext.labels[i]);
      ModelGrad g = compute_gradients(model, gather_columns(pretext.features, idx), y, 0, Trainable::Dense);
      apply_gradients(model, g, 0, cfg.learning_rate);
    }
  }
  for (auto& layer : model.layers) {
    layer.w0 = layer.w0 + std::get<DenseResidual>(layer.residual).delta;
    layer.residual = std::monostate{};
  }
  model.heads.heads.clear();
  return model;
}

}  // namespace lorm
