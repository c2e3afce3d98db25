#include "involution/harness/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <ostream>
#include <span>
#include <utility>

#include "involution/nnops.hpp"
#include "involution/prng.hpp"

namespace involution::harness {

namespace {

// Fisher-Yates on our own generator; std::shuffle's output is
// implementation-defined.
void shuffle(std::vector<std::size_t>& v, Prng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t n = logits.dim(1);
  const std::span<const double> p = logits.data().subspan(row * n, n);
  std::size_t best = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

std::size_t count_correct(const Tensor& logits, const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(logits, i) == labels[i];
  return correct;
}

}  // namespace

SyntheticDataset::SyntheticDataset(const DatasetConfig& config, std::uint64_t seed) : config_(config) {
  if (config.samples == 0 || config.classes < 2 || config.size == 0) {
    throw std::invalid_argument("SyntheticDataset: need samples > 0, classes >= 2, size > 0");
  }
  const std::size_t N = config.samples, S = config.size;
  images_ = Tensor::zeros({N, 3, S, S});
  labels_.resize(N);
  Prng rng(seed);
  const double centre = (static_cast<double>(S) - 1.0) / 2.0;
  const double inv_two_var = 1.0 / (2.0 * config.blob_sigma * config.blob_sigma);
  std::span<double> px = images_.data();
  std::size_t at = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t k = n % config.classes;
    labels_[n] = k;
    const double angle = std::numbers::pi * static_cast<double>(k) / static_cast<double>(config.classes);
    const double dy = 0.5 * config.separation * std::sin(angle), dx = 0.5 * config.separation * std::cos(angle);
    const double cy = centre + rng.uniform(-config.jitter, config.jitter);
    const double cx = centre + rng.uniform(-config.jitter, config.jitter);
    double colour[3];
    for (double& c : colour) c = rng.uniform(0.5, 1.5);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) {
          const double y = static_cast<double>(i), x = static_cast<double>(j);
          const double a = (y - cy - dy) * (y - cy - dy) + (x - cx - dx) * (x - cx - dx);
          const double b = (y - cy + dy) * (y - cy + dy) + (x - cx + dx) * (x - cx + dx);
          px[at++] = colour[c] * (std::exp(-a * inv_two_var) + std::exp(-b * inv_two_var)) + config.noise * rng.normal();
        }
  }
}

Tensor SyntheticDataset::gather(const std::vector<std::size_t>& indices) const {
  const std::size_t stride = images_.numel() / size();
  Shape shape = images_.shape();
  shape[0] = indices.size();
  Tensor out = Tensor::zeros(shape);
  std::span<double> dst = out.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::span<const double> src = images_.data().subspan(indices[k] * stride, stride);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return out;
}

std::vector<std::size_t> SyntheticDataset::gather_labels(const std::vector<std::size_t>& indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(labels_.at(idx));
  return out;
}

NetworkClassifier::NetworkClassifier(ArchSpec arch, std::uint64_t seed) : net_(std::move(arch), seed) {}

Tensor NetworkClassifier::predict(const Tensor& images) {
  const BnMode previous = net_.mode();
  net_.set_mode(BnMode::kEval);
  Tensor logits = net_.infer(images);
  net_.set_mode(previous);
  return logits;
}

LinearClassifier::LinearClassifier(std::size_t features, std::size_t classes, std::uint64_t seed) {
  Prng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  weight_ = Parameter("linear.weight", random_uniform({classes, features}, rng, -bound, bound));
  bias_ = Parameter("linear.bias", random_uniform({classes}, rng, -bound, bound));
}

Var LinearClassifier::forward(Tape& tape, Var images) {
  const std::size_t B = images.shape()[0];
  const Var flat = ad::reshape(images, {B, images.value().numel() / B});
  return nn::linear(flat, tape.param(weight_), tape.param(bias_));
}

Tensor LinearClassifier::predict(const Tensor& images) {
  const std::size_t B = images.dim(0);
  return ops::linear(reshape(images, {B, images.numel() / B}), weight_.value, &bias_.value);
}

Sgd::Sgd(std::vector<Parameter*> params, SgdConfig config) : params_(std::move(params)), config_(config) {
  for (Parameter* p : params_) velocity_.push_back(Tensor::zeros(p->value.shape()));
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.numel() != p.numel()) continue;  // untouched by backward
    const std::span<double> w = p.value.data();
    const std::span<const double> g = std::as_const(p.grad).data();
    const std::span<double> v = velocity_[i].data();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double d = g[j] + config_.weight_decay * w[j];
      v[j] = started_ ? config_.momentum * v[j] + d : d;
      w[j] -= lr * v[j];
    }
  }
  started_ = true;
}

void Sgd::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

double cosine_lr(double lr0, std::size_t t, std::size_t total) {
  if (total == 0) return lr0;
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total))) / 2.0;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("TrainConfig: lr must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("TrainConfig: epochs and batch_size must be > 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw std::invalid_argument("TrainConfig: label_smoothing must be in [0, 1)");
  }
}

double accuracy(Classifier& model, const SyntheticDataset& data) {
  constexpr std::size_t kChunk = 64;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    correct += count_correct(model.predict(data.gather(idx)), data.gather_labels(idx));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<EpochMetrics> train(Classifier& model, const SyntheticDataset& train_set, const SyntheticDataset& test_set,
                                const TrainConfig& config) {
  config.validate();
  Prng rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }

  Sgd sgd(model.parameters(), {config.momentum, config.weight_decay});
  const std::size_t total_steps = config.epochs * batches.size();
  std::vector<std::size_t> batch_order(batches.size());
  std::iota(batch_order.begin(), batch_order.end(), std::size_t{0});

  std::vector<EpochMetrics> metrics;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(batch_order, rng);
    model.set_mode(BnMode::kTrain);
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(config.lr, step, total_steps);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t bi : batch_order) {
      const std::vector<std::size_t>& idx = batches[bi];
      const std::vector<std::size_t> labels = train_set.gather_labels(idx);
      Tape tape;
      const Var logits = model.forward(tape, tape.constant(train_set.gather(idx)));
      const Var loss = nn::cross_entropy(logits, labels, config.label_smoothing);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      loss_sum += value;
      correct += count_correct(logits.value(), labels);
      sgd.zero_grad();
      tape.backward(loss);
      sgd.step(cosine_lr(config.lr, step, total_steps));
      ++step;
    }
    m.loss = loss_sum / static_cast<double>(batches.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    m.test_acc = accuracy(model, test_set);
    metrics.push_back(m);
  }
  return metrics;
}

ToyOutcome run_toy_experiment(const ToyExperiment& e) {
  Prng streams(e.train.seed);
  const std::uint64_t train_seed = streams.next_u64();
  const std::uint64_t test_seed = streams.next_u64();
  const std::uint64_t init_seed = streams.next_u64();
  const std::uint64_t order_seed = streams.next_u64();

  const SyntheticDataset train_set(e.data, train_seed);
  DatasetConfig test_config = e.data;
  test_config.samples = e.test_samples;
  const SyntheticDataset test_set(test_config, test_seed);
  TrainConfig tc = e.train;
  tc.seed = order_seed;

  ToyOutcome out;
  NetworkClassifier net(build_rednet_toy(e.middle, e.data.classes), init_seed);
  out.rednet = train(net, train_set, test_set, tc);
  if (e.baseline) {
    LinearClassifier linear(3 * e.data.size * e.data.size, e.data.classes, init_seed);
    out.linear = train(linear, train_set, test_set, tc);
  }
  out.network.emplace(std::move(net.network()));
  return out;
}

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& metrics) {
  os << "epoch,lr,loss,train_acc,test_acc\n";
  char line[160];
  for (const EpochMetrics& m : metrics) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.lr, m.loss, m.train_acc, m.test_acc);
    os << line;
  }
}

}  // namespace involution::harness
