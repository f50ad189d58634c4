#include "btt/toytrainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "btt/error.hpp"
#include "btt/stats.hpp"

namespace btt::toy {

std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "relu";
}

std::string_view to_string(Generator g) noexcept {
  return g == Generator::gaussian_blobs ? "gaussian_blobs" : "two_spirals";
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  fail(ErrorCode::invalid_input, "unknown activation '" + std::string(s) + "'");
}

Generator parse_generator(std::string_view s) {
  if (s == "gaussian_blobs") return Generator::gaussian_blobs;
  if (s == "two_spirals") return Generator::two_spirals;
  fail(ErrorCode::invalid_input, "unknown dataset generator '" + std::string(s) + "'");
}

void MlpSpec::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::invalid_input, "mlp spec: " + what); };
  if (depth < 1 || depth > 8) bad("depth must be in 1..8");
  if (width < 4 || width > 256) bad("width must be in 4..256");
  if (!(init_scale > 0)) bad("init_scale must be positive");
  if (!(learning_rate >= 0)) bad("learning_rate must be nonnegative");
  if (!(momentum >= 0 && momentum < 1)) bad("momentum must be in [0,1)");
  if (batch_size < 1) bad("batch_size must be positive");
  if (max_epoch < 1) bad("max_epoch must be positive");
  if (!std::isfinite(bias_init)) bad("bias_init must be finite");
}

// ---------------------------------------------------------------------------
// Data

namespace {

void standardize(Eigen::MatrixXd& x) {
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    auto col = x.col(c);
    const double mean = col.mean();
    col.array() -= mean;
    const double sd = std::sqrt(col.squaredNorm() / static_cast<double>(col.size()));
    if (sd > 0) col /= sd;
  }
}

Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out;
  out.n_classes = d.n_classes;
  out.features.resize(static_cast<Eigen::Index>(idx.size()), d.features.cols());
  out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = d.features.row(static_cast<Eigen::Index>(idx[i]));
    out.labels[i] = d.labels[idx[i]];
  }
  return out;
}

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.n_samples < 1 || spec.n_features < 1 || spec.n_classes < 1) {
    fail(ErrorCode::invalid_input, "dataset: sizes must be positive");
  }
  if (spec.n_classes > spec.n_samples) fail(ErrorCode::invalid_input, "dataset: n_classes > n_samples");
  if (spec.generator == Generator::two_spirals && spec.n_features < 2) {
    fail(ErrorCode::invalid_input, "dataset: two_spirals needs at least 2 features");
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(spec.n_samples);
  const auto f = static_cast<Eigen::Index>(spec.n_features);

  Dataset d;
  d.n_classes = spec.n_classes;
  d.features.resize(n, f);
  d.labels.resize(static_cast<std::size_t>(n));

  if (spec.generator == Generator::gaussian_blobs) {
    Eigen::MatrixXd centers(spec.n_classes, f);
    for (Eigen::Index c = 0; c < centers.rows(); ++c)
      for (Eigen::Index j = 0; j < f; ++j) centers(c, j) = normal(rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % spec.n_classes);
      d.labels[static_cast<std::size_t>(i)] = label;
      for (Eigen::Index j = 0; j < f; ++j) d.features(i, j) = centers(label, j) + spec.cluster_std * normal(rng);
    }
  } else {
    const double pi = std::acos(-1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % spec.n_classes);
      d.labels[static_cast<std::size_t>(i)] = label;
      const double t = unit(rng);
      const double r = 0.2 + 0.8 * t;
      const double angle = 3.0 * pi * t + 2.0 * pi * label / spec.n_classes;
      d.features(i, 0) = r * std::cos(angle) + 0.1 * spec.cluster_std * normal(rng);
      d.features(i, 1) = r * std::sin(angle) + 0.1 * spec.cluster_std * normal(rng);
      for (Eigen::Index j = 2; j < f; ++j) d.features(i, j) = normal(rng);
    }
  }

  // Shuffle row order so labels are not periodic, then standardize.
  const auto perm = permutation(static_cast<std::size_t>(n), rng);
  d = subset(d, perm);
  standardize(d.features);
  return d;
}

HoldoutSplit split_holdout(const Dataset& data, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto perm = permutation(data.labels.size(), rng);
  const std::size_t n_train = std::max<std::size_t>(1, data.labels.size() * 4 / 5);
  HoldoutSplit s;
  s.train = subset(data, std::span(perm).first(n_train));
  s.val = subset(data, std::span(perm).subspan(n_train));
  return s;
}

// ---------------------------------------------------------------------------
// Model

namespace {

Eigen::MatrixXd activate(Activation a, const Eigen::MatrixXd& z) {
  switch (a) {
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    case Activation::tanh: return z.array().tanh().matrix();
  }
  return z;
}

// Derivative expressed through the pre-activation z and output h = act(z).
Eigen::MatrixXd activation_grad(Activation a, const Eigen::MatrixXd& z, const Eigen::MatrixXd& h) {
  switch (a) {
    case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::sigmoid: return (h.array() * (1.0 - h.array())).matrix();
    case Activation::tanh: return (1.0 - h.array().square()).matrix();
  }
  return Eigen::MatrixXd::Ones(z.rows(), z.cols());
}

}  // namespace

Mlp::Mlp(const MlpSpec& spec, int n_inputs, int n_classes, std::mt19937_64& rng) : activation_(spec.activation) {
  spec.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  int fan_in = n_inputs;
  for (int l = 0; l <= spec.depth; ++l) {
    const bool output = l == spec.depth;
    const int fan_out = output ? n_classes : spec.width;
    DenseLayer layer;
    const double sd = spec.init_scale / std::sqrt(static_cast<double>(fan_in));
    layer.weight.resize(fan_out, fan_in);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = sd * normal(rng);
    layer.bias = Eigen::VectorXd::Constant(fan_out, output ? 0.0 : spec.bias_init);
    layer.weight_velocity = Eigen::MatrixXd::Zero(fan_out, fan_in);
    layer.bias_velocity = Eigen::VectorXd::Zero(fan_out);
    layers_.push_back(std::move(layer));
    fan_in = fan_out;
  }
}

std::string Mlp::layer_name(std::size_t index) const {
  return index + 1 == layers_.size() ? "output" : "hidden_" + std::to_string(index);
}

Eigen::MatrixXd Mlp::logits(const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>* pre,
                            std::vector<Eigen::MatrixXd>* post) const {
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = h * layers_[l].weight.transpose();
    z.rowwise() += layers_[l].bias.transpose();
    if (l + 1 == layers_.size()) return z;
    if (pre) pre->push_back(z);
    h = activate(activation_, z);
    if (post) post->push_back(h);
  }
  return h;
}

namespace {

// Row-wise softmax probabilities and the mean cross-entropy.
double softmax_xent(const Eigen::MatrixXd& z, std::span<const int> labels, Eigen::MatrixXd* probs) {
  const Eigen::Index b = z.rows();
  Eigen::MatrixXd p(z.rows(), z.cols());
  double total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double m = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - m).exp().matrix();
    const double s = e.sum();
    p.row(i) = e / s;
    total += std::log(s) + m - z(i, labels[static_cast<std::size_t>(i)]);
  }
  if (probs) *probs = std::move(p);
  return total / static_cast<double>(b);
}

}  // namespace

double Mlp::loss(const Eigen::MatrixXd& x, std::span<const int> labels) const {
  return softmax_xent(logits(x, nullptr, nullptr), labels, nullptr);
}

Gradients Mlp::backprop(const Eigen::MatrixXd& x, std::span<const int> labels) const {
  std::vector<Eigen::MatrixXd> pre, post;
  const Eigen::MatrixXd z = logits(x, &pre, &post);
  Eigen::MatrixXd delta;
  Gradients g;
  g.loss = softmax_xent(z, labels, &delta);
  const auto b = static_cast<double>(x.rows());
  for (Eigen::Index i = 0; i < delta.rows(); ++i) delta(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  delta /= b;

  const std::size_t n = layers_.size();
  g.weight.resize(n);
  g.bias.resize(n);
  for (std::size_t l = n; l-- > 0;) {
    const Eigen::MatrixXd& input = l == 0 ? x : post[l - 1];
    g.weight[l] = delta.transpose() * input;
    g.bias[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      delta = (delta * layers_[l].weight).cwiseProduct(activation_grad(activation_, pre[l - 1], post[l - 1]));
    }
  }
  g.hidden_activations = std::move(post);
  return g;
}

void Mlp::apply(const Gradients& g, double learning_rate, double momentum) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& layer = layers_[l];
    layer.weight_velocity = momentum * layer.weight_velocity - learning_rate * g.weight[l];
    layer.bias_velocity = momentum * layer.bias_velocity - learning_rate * g.bias[l];
    layer.weight += layer.weight_velocity;
    layer.bias += layer.bias_velocity;
  }
}

double Mlp::accuracy(const Eigen::MatrixXd& x, std::span<const int> labels) const {
  if (labels.empty()) return 0.0;
  const Eigen::MatrixXd z = logits(x, nullptr, nullptr);
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < z.cols(); ++c) {
      if (z(i, c) > z(i, best)) best = c;  // NaN rows predict class 0
    }
    if (static_cast<int>(best) == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<Eigen::MatrixXd> Mlp::hidden_preactivations(const Eigen::MatrixXd& x) const {
  std::vector<Eigen::MatrixXd> pre;
  logits(x, &pre, nullptr);
  return pre;
}

// ---------------------------------------------------------------------------
// Trial

ToyTrial::ToyTrial(std::string trial_id, const MlpSpec& spec, const DatasetSpec& data, std::uint64_t training_seed)
    : trial_id_(std::move(trial_id)),
      spec_(spec),
      split_(split_holdout(generate_dataset(data), data.seed ^ 0x9e3779b97f4a7c15ULL)),
      rng_(training_seed),
      model_(spec, static_cast<int>(split_.train.features.cols()), split_.train.n_classes, rng_) {}

std::int64_t ToyTrial::epoch_cost_ms() const {
  // About 2 GFLOP/s: forward + backward is ~6 flops per weight per sample.
  double weights = 0;
  for (const auto& l : model_.layers()) weights += static_cast<double>(l.weight.size());
  const double flops = 6.0 * weights * static_cast<double>(split_.train.labels.size() + split_.val.labels.size());
  return 1 + static_cast<std::int64_t>(std::llround(flops / 2e6));
}

EpochResult ToyTrial::train_epoch() {
  const auto& train = split_.train;
  const std::size_t n = train.labels.size();
  const auto order = permutation(n, rng_);
  const auto bs = static_cast<std::size_t>(spec_.batch_size);

  double loss_sum = 0;
  Gradients last;
  Eigen::MatrixXd xb;
  std::vector<int> yb;
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    xb.resize(static_cast<Eigen::Index>(end - start), train.features.cols());
    yb.resize(end - start);
    for (std::size_t i = start; i < end; ++i) {
      xb.row(static_cast<Eigen::Index>(i - start)) = train.features.row(static_cast<Eigen::Index>(order[i]));
      yb[i - start] = train.labels[order[i]];
    }
    Gradients g = model_.backprop(xb, yb);
    loss_sum += g.loss * static_cast<double>(end - start);
    model_.apply(g, spec_.learning_rate, spec_.momentum);
    last = std::move(g);
  }

  EpochResult out;
  out.record.trial_id = trial_id_;
  out.record.epoch = epoch_;
  out.record.train_loss = loss_sum / static_cast<double>(n);
  out.record.val_metric = model_.accuracy(split_.val.features, split_.val.labels);
  out.record.metric_mode = MetricMode::maximize;

  const auto& layers = model_.layers();
  auto push = [&](std::size_t l, VarKind kind, const double* data, Eigen::Index size) {
    LayerRecord r;
    r.trial_id = trial_id_;
    r.epoch = epoch_;
    r.layer_index = static_cast<int>(l);
    r.layer_name = model_.layer_name(l);
    r.var = kind;
    r.stats = compute_stat_vector(std::span<const double>(data, static_cast<std::size_t>(size)));
    out.layers.push_back(std::move(r));
  };
  for (std::size_t l = 0; l < layers.size(); ++l) push(l, VarKind::grad, last.weight[l].data(), last.weight[l].size());
  for (std::size_t l = 0; l < layers.size(); ++l) push(l, VarKind::weight, layers[l].weight.data(), layers[l].weight.size());
  for (std::size_t l = 0; l < last.hidden_activations.size(); ++l) {
    push(l, VarKind::act, last.hidden_activations[l].data(), last.hidden_activations[l].size());
  }
  ++epoch_;
  return out;
}

// ---------------------------------------------------------------------------
// Recipes

DatasetSpec default_dataset() { return DatasetSpec{}; }

MlpSpec healthy_spec() {
  MlpSpec s;
  s.depth = 2;
  s.width = 32;
  s.activation = Activation::relu;
  s.init_scale = 1.0;
  s.learning_rate = 0.005;
  s.momentum = 0.9;
  s.batch_size = 32;
  s.max_epoch = 20;
  return s;
}

MlpSpec healthy_band(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MlpSpec s = healthy_spec();
  s.depth = std::uniform_int_distribution<int>(1, 3)(rng);
  s.width = std::array{16, 32, 64}[std::uniform_int_distribution<int>(0, 2)(rng)];
  s.activation = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? Activation::relu : Activation::tanh;
  s.learning_rate = std::uniform_real_distribution<double>(0.002, 0.008)(rng);
  s.batch_size = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? 32 : 64;
  return s;
}

std::vector<PathologyRecipe> pathology_recipes() {
  std::vector<PathologyRecipe> out;
  const DatasetSpec data = default_dataset();

  MlpSpec vanishing = healthy_spec();
  vanishing.activation = Activation::sigmoid;
  vanishing.depth = 8;
  vanishing.init_scale = 0.3;
  vanishing.learning_rate = 0.05;
  out.push_back({"vanishing", vanishing, data, {Indicator::ERG}});

  // Signal grows by ~2.8x per layer; a small step keeps the net from dying
  // so the oversized gradients stay visible.
  MlpSpec exploding = healthy_spec();
  exploding.depth = 8;
  exploding.init_scale = 4.0;
  exploding.learning_rate = 1e-3;
  exploding.momentum = 0.0;
  out.push_back({"exploding", exploding, data, {Indicator::AGV, Indicator::EAG}});

  MlpSpec dead = healthy_spec();
  dead.bias_init = -4.0;
  out.push_back({"dead_relu", dead, data, {Indicator::LAR}});

  MlpSpec still = healthy_spec();
  still.learning_rate = 1e-9;
  out.push_back({"no_learning", still, data, {Indicator::PLC}});

  MlpSpec converged = healthy_spec();
  converged.depth = 1;
  converged.width = 4;
  converged.learning_rate = 0.2;
  converged.batch_size = 256;
  converged.max_epoch = 30;
  DatasetSpec easy = data;
  easy.n_samples = 4000;
  easy.cluster_std = 3.0;
  out.push_back({"converged_early", converged, easy, {Indicator::NMG}});
  return out;
}

TrialTrace run_to_trace(const std::string& trial_id, const MlpSpec& spec, const DatasetSpec& data,
                        std::uint64_t training_seed, int epochs) {
  ToyTrial trial(trial_id, spec, data, training_seed);
  TrialTrace t;
  t.meta.trial_id = trial_id;
  t.meta.max_epoch = spec.max_epoch;
  t.meta.config = {{"depth", std::int64_t{spec.depth}},
                   {"width", std::int64_t{spec.width}},
                   {"activation", std::string(to_string(spec.activation))},
                   {"init_scale", spec.init_scale},
                   {"learning_rate", spec.learning_rate},
                   {"momentum", spec.momentum},
                   {"batch_size", std::int64_t{spec.batch_size}},
                   {"max_epoch", std::int64_t{spec.max_epoch}},
                   {"bias_init", spec.bias_init}};
  const int n = epochs < 0 ? spec.max_epoch : std::min(epochs, spec.max_epoch);
  std::int64_t wall = 0;
  for (int e = 0; e < n; ++e) {
    wall += trial.epoch_cost_ms();
    auto r = trial.train_epoch();
    r.record.wall_ms = wall;
    t.epochs.push_back(r.record);
    for (auto& l : r.layers) t.layers.push_back(std::move(l));
  }
  canonicalize(t);
  return t;
}

// ---------------------------------------------------------------------------
// Runner

MlpSpec mlp_spec_from_config(const HpConfig& config, MlpSpec base) {
  auto as_int = [](const std::string& key, const HpValue& v) -> int {
    if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<int>(*i);
    if (const auto* d = std::get_if<double>(&v); d && *d == std::floor(*d)) return static_cast<int>(*d);
    if (const auto* s = std::get_if<std::string>(&v)) {
      try {
        std::size_t used = 0;
        const int x = std::stoi(*s, &used);
        if (used == s->size()) return x;
      } catch (const std::exception&) {
      }
    }
    fail(ErrorCode::invalid_input, "hyperparameter '" + key + "' must be an integer");
  };
  auto as_real = [](const std::string& key, const HpValue& v) -> double {
    if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    if (const auto* d = std::get_if<double>(&v)) return *d;
    if (const auto* s = std::get_if<std::string>(&v)) {
      try {
        std::size_t used = 0;
        const double x = std::stod(*s, &used);
        if (used == s->size()) return x;
      } catch (const std::exception&) {
      }
    }
    fail(ErrorCode::invalid_input, "hyperparameter '" + key + "' must be a number");
  };

  MlpSpec s = base;
  for (const auto& [key, v] : config) {
    if (key == "depth") s.depth = as_int(key, v);
    else if (key == "width") s.width = as_int(key, v);
    else if (key == "batch_size") s.batch_size = as_int(key, v);
    else if (key == "max_epoch") s.max_epoch = as_int(key, v);
    else if (key == "init_scale") s.init_scale = as_real(key, v);
    else if (key == "learning_rate") s.learning_rate = as_real(key, v);
    else if (key == "momentum") s.momentum = as_real(key, v);
    else if (key == "bias_init") s.bias_init = as_real(key, v);
    else if (key == "activation") {
      const auto* name = std::get_if<std::string>(&v);
      if (!name) fail(ErrorCode::invalid_input, "hyperparameter 'activation' must be categorical");
      s.activation = parse_activation(*name);
    } else {
      fail(ErrorCode::invalid_input, "toy_mlp: unknown hyperparameter '" + key + "'");
    }
  }
  s.validate();
  return s;
}

namespace {

class ToySession : public TrialSession {
 public:
  ToySession(const std::string& id, const MlpSpec& spec, const DatasetSpec& data, std::uint64_t seed)
      : trial_(id, spec, data, seed) {}

  int max_epoch() const override { return trial_.spec().max_epoch; }
  MetricMode metric_mode() const override { return MetricMode::maximize; }
  std::int64_t next_epoch_cost_ms() const override { return trial_.epoch_cost_ms(); }
  EpochResult run_epoch() override { return trial_.train_epoch(); }

 private:
  ToyTrial trial_;
};

}  // namespace

std::unique_ptr<TrialSession> ToyMlpRunner::start(const std::string& trial_id, const HpConfig& config,
                                                  std::uint64_t seed) {
  return std::make_unique<ToySession>(trial_id, mlp_spec_from_config(config), data_, seed);
}

}  // namespace btt::toy
