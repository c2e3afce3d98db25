#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <vector>

#include "involution/autodiff.hpp"
#include "involution/rednet.hpp"
#include "involution/tensor.hpp"

namespace involution::harness {

struct DatasetConfig {
  std::size_t samples = 256;
  std::size_t classes = 4;
  std::size_t size = 32;  // H = W
  /// Distance between the two blobs of a pattern, in pixels.
  double separation = 8.0;
  double blob_sigma = 2.0;
  /// Pattern centre is offset uniformly in [-jitter, jitter] per axis.
  double jitter = 4.0;
  double noise = 0.1;
};

/// Class k is a pair of Gaussian blobs whose axis is rotated by
/// pi * k / classes, placed around the image centre with random jitter,
/// random per-sample colour and additive Gaussian noise. Images are
/// (N, 3, size, size); labels are balanced and interleaved.
class SyntheticDataset {
 public:
  SyntheticDataset(const DatasetConfig& config, std::uint64_t seed);

  const DatasetConfig& config() const noexcept { return config_; }
  std::size_t size() const noexcept { return labels_.size(); }
  const Tensor& images() const noexcept { return images_; }
  const std::vector<std::size_t>& labels() const noexcept { return labels_; }

  /// Rows `indices` of the image tensor, in that order.
  Tensor gather(const std::vector<std::size_t>& indices) const;
  std::vector<std::size_t> gather_labels(const std::vector<std::size_t>& indices) const;

 private:
  DatasetConfig config_;
  Tensor images_;
  std::vector<std::size_t> labels_;
};

/// Anything the training loop can fit.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var forward(Tape& tape, Var images) = 0;
  /// Logits without recording, batch norm in eval mode. The previous mode
  /// is restored.
  virtual Tensor predict(const Tensor& images) = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  virtual void set_mode(BnMode mode) = 0;
};

class NetworkClassifier final : public Classifier {
 public:
  NetworkClassifier(ArchSpec arch, std::uint64_t seed);

  Var forward(Tape& tape, Var images) override { return net_.forward(tape, images); }
  Tensor predict(const Tensor& images) override;
  std::vector<Parameter*> parameters() override { return net_.parameters(); }
  void set_mode(BnMode mode) override { net_.set_mode(mode); }

  Network& network() noexcept { return net_; }

 private:
  Network net_;
};

/// Softmax regression on flattened raw pixels.
class LinearClassifier final : public Classifier {
 public:
  LinearClassifier(std::size_t features, std::size_t classes, std::uint64_t seed);

  Var forward(Tape& tape, Var images) override;
  Tensor predict(const Tensor& images) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  void set_mode(BnMode) override {}

 private:
  Parameter weight_;  // (classes, features)
  Parameter bias_;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// v = momentum * v + (g + wd * w); w -= lr * v. The velocity starts as the
/// first step's gradient.
class Sgd {
 public:
  Sgd(std::vector<Parameter*> params, SgdConfig config);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> velocity_;
  SgdConfig config_;
  bool started_ = false;
};

/// lr0 * (1 + cos(pi * t / total)) / 2.
double cosine_lr(double lr0, std::size_t t, std::size_t total);

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double label_smoothing = 0.0;

  /// lr >= 0 (zero freezes the weights), momentum in [0, 1).
  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // at the epoch's first step
  double loss = 0.0;      // mean over the epoch's batches
  double train_acc = 0.0;
  double test_acc = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch SGD with a per-iteration half-cosine schedule. The batch
/// partition is drawn once from the seed; only the batch order is
/// reshuffled every epoch. Train accuracy counts the epoch's taped
/// forwards; test accuracy uses eval mode after the epoch. Throws
/// TrainingDiverged on a non-finite loss.
std::vector<EpochMetrics> train(Classifier& model, const SyntheticDataset& train_set, const SyntheticDataset& test_set,
                                const TrainConfig& config);

double accuracy(Classifier& model, const SyntheticDataset& data);

/// RedNet-toy against softmax regression on raw pixels, same data, same
/// loop, same hyperparameters.
struct ToyExperiment {
  DatasetConfig data;
  std::size_t test_samples = 256;
  TrainConfig train;
  MiddleOpConfig middle;
  bool baseline = true;
};

struct ToyOutcome {
  std::vector<EpochMetrics> rednet;
  std::vector<EpochMetrics> linear;  // empty without the baseline
  std::optional<Network> network;    // trained RedNet-toy

  double final_train_acc() const { return rednet.back().train_acc; }
  double final_test_acc() const { return rednet.back().test_acc; }
  double baseline_test_acc() const { return linear.empty() ? 0.0 : linear.back().test_acc; }
};

/// Every random stream (train set, test set, both initializations, batch
/// order) is derived from train.seed.
ToyOutcome run_toy_experiment(const ToyExperiment& experiment);

/// epoch,lr,loss,train_acc,test_acc
void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& metrics);

}  // namespace involution::harness
