#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "btt/indicators.hpp"
#include "btt/runner.hpp"
#include "btt/trace.hpp"

namespace btt::toy {

enum class Activation { relu, sigmoid, tanh };
enum class Generator { gaussian_blobs, two_spirals };

std::string_view to_string(Activation a) noexcept;
std::string_view to_string(Generator g) noexcept;
Activation parse_activation(std::string_view s);
Generator parse_generator(std::string_view s);

struct MlpSpec {
  int depth = 2;  // hidden layers
  int width = 32;
  Activation activation = Activation::relu;
  double init_scale = 1.0;  // weight std = init_scale / sqrt(fan_in)
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  int max_epoch = 20;
  double bias_init = 0.0;  // initial value of every hidden-layer bias

  void validate() const;
  int trainable_layers() const { return depth + 1; }
};

struct DatasetSpec {
  int n_samples = 800;
  int n_features = 10;
  int n_classes = 4;
  Generator generator = Generator::gaussian_blobs;
  double cluster_std = 1.0;  // within-class spread (blobs) or radial noise (spirals)
  std::uint64_t seed = 0;
};

struct Dataset {
  Eigen::MatrixXd features;  // one sample per row, columns standardized
  std::vector<int> labels;
  int n_classes = 0;
};

Dataset generate_dataset(const DatasetSpec& spec);

struct HoldoutSplit {
  Dataset train;
  Dataset val;
};

/// Fixed 80/20 split by a seeded permutation.
HoldoutSplit split_holdout(const Dataset& data, std::uint64_t seed);

struct DenseLayer {
  Eigen::MatrixXd weight;  // (out, in)
  Eigen::VectorXd bias;
  Eigen::MatrixXd weight_velocity;
  Eigen::VectorXd bias_velocity;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;
  std::vector<Eigen::MatrixXd> hidden_activations;  // post-activation, one per hidden layer
  double loss = 0.0;
};

/// Multilayer perceptron with softmax cross-entropy loss and momentum SGD.
class Mlp {
 public:
  Mlp(const MlpSpec& spec, int n_inputs, int n_classes, std::mt19937_64& rng);

  double loss(const Eigen::MatrixXd& x, std::span<const int> labels) const;
  Gradients backprop(const Eigen::MatrixXd& x, std::span<const int> labels) const;
  void apply(const Gradients& g, double learning_rate, double momentum);
  double accuracy(const Eigen::MatrixXd& x, std::span<const int> labels) const;

  /// Hidden pre-activations, used to detect ReLU kinks in gradient checks.
  std::vector<Eigen::MatrixXd> hidden_preactivations(const Eigen::MatrixXd& x) const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::string layer_name(std::size_t index) const;

 private:
  Eigen::MatrixXd logits(const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>* pre,
                         std::vector<Eigen::MatrixXd>* post) const;

  Activation activation_;
  std::vector<DenseLayer> layers_;
};

/// One trial of the toy trainer: dataset, split, model and RNG owned together.
class ToyTrial {
 public:
  ToyTrial(std::string trial_id, const MlpSpec& spec, const DatasetSpec& data, std::uint64_t training_seed);

  /// Runs one pass over shuffled minibatches. Gradient and activation
  /// statistics describe the epoch's last minibatch. wall_ms is left 0.
  EpochResult train_epoch();

  int epochs_done() const { return epoch_; }
  const MlpSpec& spec() const { return spec_; }
  Mlp& model() { return model_; }
  const HoldoutSplit& split() const { return split_; }
  std::int64_t epoch_cost_ms() const;

 private:
  std::string trial_id_;
  MlpSpec spec_;
  HoldoutSplit split_;
  std::mt19937_64 rng_;
  Mlp model_;
  int epoch_ = 0;
};

struct PathologyRecipe {
  std::string name;
  MlpSpec spec;
  DatasetSpec data;
  std::vector<Indicator> expected;  // any one of these counts as a hit
};

/// Specs that reliably produce one training problem each.
std::vector<PathologyRecipe> pathology_recipes();

/// A healthy configuration for benign-corpus runs.
MlpSpec healthy_spec();
/// Draws a healthy configuration from a small band around healthy_spec().
MlpSpec healthy_band(std::uint64_t seed);
DatasetSpec default_dataset();

/// Runs a spec to completion (or `epochs` epochs) and returns its trace, with
/// wall_ms taken from the cost model.
TrialTrace run_to_trace(const std::string& trial_id, const MlpSpec& spec, const DatasetSpec& data,
                        std::uint64_t training_seed, int epochs = -1);

/// Maps HpConfig keys onto MlpSpec fields, starting from `base`.
MlpSpec mlp_spec_from_config(const HpConfig& config, MlpSpec base = {});

/// The "toy_mlp" trial runner.
class ToyMlpRunner : public TrialRunner {
 public:
  explicit ToyMlpRunner(DatasetSpec data = default_dataset()) : data_(data) {}
  std::string name() const override { return "toy_mlp"; }
  std::unique_ptr<TrialSession> start(const std::string& trial_id, const HpConfig& config,
                                      std::uint64_t seed) override;

 private:
  DatasetSpec data_;
};

}  // namespace btt::toy
