#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "involution/autodiff.hpp"
#include "involution/nnops.hpp"
#include "involution/tensor.hpp"

namespace involution {

enum class MiddleOp { kInvolution, kConv3x3, kDepthwise3x3, kAttention };
enum class StemVariant { kConv7, kInvolution };

std::string_view to_string(MiddleOp op);
std::string_view to_string(StemVariant stem);
MiddleOp parse_middle_op(std::string_view text);
StemVariant parse_stem(std::string_view text);

/// The spatial operator at the bottleneck position of every block.
struct MiddleOpConfig {
  MiddleOp op = MiddleOp::kInvolution;
  std::size_t kernel = 7;
  /// Channels sharing one kernel; G = max(1, C / group_channels).
  /// 0 means a single group over all channels.
  std::size_t group_channels = 16;
  std::size_t reduction = 4;
  KernelForm form = KernelForm::kBottleneck;
  bool softmax = false;
  AttentionMode attention_mode = AttentionMode::kContent;

  std::size_t groups_for(std::size_t channels) const;
};

struct StemSpec {
  StemVariant variant = StemVariant::kInvolution;
  std::size_t in_channels = 3;
  std::size_t out_channels = 64;
  /// Width of the first two layers of the involution stem.
  std::size_t inner_channels = 32;
  /// Involution between the two stem convolutions (kInvolution only).
  InvolutionConfig involution;
};

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t mid_channels = 64;
  std::size_t stride = 1;
};

/// One bottleneck: 1x1 reduce, middle op (carries the stride), 1x1 expand,
/// each followed by BN; relu after the first two and after the residual sum.
struct BlockSpec {
  std::string name;  // conv{stage}_{index}, both 1-based
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  MiddleOpConfig middle;
  /// Strided 1x1 projection plus BN on the shortcut instead of identity.
  bool projection = false;
};

struct ArchSpec {
  std::string name;
  StemSpec stem;
  std::vector<StageSpec> stages;
  MiddleOpConfig middle;
  std::size_t expansion = 4;
  std::size_t num_classes = 1000;

  /// Every block in execution order.
  std::vector<BlockSpec> blocks() const;
  void validate() const;
};

struct RedNetOptions {
  std::size_t depth = 50;
  StemVariant stem = StemVariant::kInvolution;
  MiddleOpConfig middle;
  std::size_t num_classes = 1000;
};

/// Depths 26, 38, 50, 101 and 152; anything else throws
/// std::invalid_argument. MiddleOp::kConv3x3 gives the ResNet baseline.
ArchSpec build_rednet(const RedNetOptions& options);
ArchSpec build_resnet(std::size_t depth, std::size_t num_classes = 1000);

/// One block per stage, mid widths 16, 32, 64, 128, stem width 16.
ArchSpec build_rednet_toy(const MiddleOpConfig& middle = {}, std::size_t num_classes = 4,
                          StemVariant stem = StemVariant::kInvolution);

/// key = value text, one [section] for the network, the stem and each stage.
std::string describe(const ArchSpec& arch);

// ---------------------------------------------------------------------------
// Cost model

/// kStrict counts only multiply-accumulates of convolutions, involution
/// generation and aggregation, attention and the classifier. kFramework adds
/// the per-element work that layer-hook profilers report: bias adds, two
/// per element for BN, one per element for relu and for every pooling input.
enum class MacConvention { kFramework, kStrict };

std::string_view to_string(MacConvention convention);
MacConvention parse_mac_convention(std::string_view text);

struct CostRow {
  std::string layer;  // op kind: conv2d, batch_norm, involution, ...
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::size_t input_hw = 224;
  MacConvention convention = MacConvention::kFramework;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
};

/// Per-layer parameter and MAC counts at a square input of side input_hw,
/// which must be a positive multiple of 32.
CostReport cost_report(const ArchSpec& arch, std::size_t input_hw = 224,
                       MacConvention convention = MacConvention::kFramework);
CostReport count_params(const ArchSpec& arch);
CostReport count_macs(const ArchSpec& arch, std::size_t input_hw = 224,
                      MacConvention convention = MacConvention::kFramework);

/// layer,name,params,macs with a closing TOTAL row.
void write_cost_csv(std::ostream& os, const CostReport& report);

/// Closed-form parameter count of one involution layer.
std::uint64_t involution_params(const InvolutionConfig& config);

/// MACs of a single layer on a square input of side hw_in, counted by the
/// same rules as cost_report. Output side is hw_in / stride.
std::uint64_t conv_macs(const ConvConfig& config, std::size_t hw_in,
                        MacConvention convention = MacConvention::kFramework);
std::uint64_t involution_macs(const InvolutionConfig& config, std::size_t hw_in,
                              MacConvention convention = MacConvention::kFramework);
std::uint64_t attention_macs(const AttentionConfig& config, std::size_t hw_in,
                             MacConvention convention = MacConvention::kFramework);
std::uint64_t attention_params(const AttentionConfig& config);

// ---------------------------------------------------------------------------
// Instantiated network

class LayerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConvBn {
  ConvSpec conv;
  BatchNormState bn;
};

using MiddleLayer = std::variant<ConvSpec, InvolutionSpec, AttentionSpec>;

struct Block {
  BlockSpec spec;
  ConvBn reduce;
  MiddleLayer middle;
  BatchNormState middle_bn;
  ConvBn expand;
  std::optional<ConvBn> shortcut;
};

struct Stem {
  ConvBn first;
  std::optional<InvolutionSpec> involution;
  std::optional<BatchNormState> involution_bn;
  std::optional<ConvBn> last;
};

class Network {
 public:
  Network(ArchSpec arch, std::uint64_t seed);

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const ArchSpec& arch() const noexcept { return arch_; }
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
  void zero_grad();

  /// Train mode normalizes with batch statistics and moves the running
  /// estimates during taped forwards; eval mode uses the estimates.
  void set_mode(BnMode mode);
  BnMode mode() const noexcept { return mode_; }

  /// Input (B, 3, H, W) with H, W positive multiples of 32.
  Var forward(Tape& tape, Var x);
  /// Same arithmetic without a tape; never touches the running estimates.
  Tensor infer(const Tensor& x) const;

  /// Generated kernels (B, G, K*K, H', W') of an involution layer for input
  /// x. `layer` is a block name such as "conv3_4" or "stem".
  Tensor extract_kernels(const Tensor& x, std::string_view layer) const;
  InvolutionSpec& involution_layer(std::string_view layer);
  std::vector<std::string> involution_layers() const;

  Parameter& classifier_weight() noexcept { return fc_weight_; }
  Parameter& classifier_bias() noexcept { return fc_bias_; }

  /// Parameters and running estimates as named tensor text dumps.
  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  template <class Policy>
  typename Policy::Value run(Policy& policy, typename Policy::Value x);
  void check_input(const Shape& shape) const;
  std::vector<BatchNormState*> batch_norms();

  ArchSpec arch_;
  Stem stem_;
  std::vector<Block> blocks_;
  Parameter fc_weight_;
  Parameter fc_bias_;
  BnMode mode_ = BnMode::kTrain;
};

}  // namespace involution
