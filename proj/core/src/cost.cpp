#include <ostream>

#include "involution/rednet.hpp"

namespace involution {

namespace {

using u64 = std::uint64_t;

class CostWalker {
 public:
  explicit CostWalker(MacConvention convention) : framework_(convention == MacConvention::kFramework) {}

  // Square feature maps throughout; `hw` is the output side.
  void conv(const std::string& name, u64 cin, u64 cout, u64 k, u64 hw, u64 groups = 1) {
    const u64 params = k * k * cin * cout / groups;
    add("conv2d", name, params, params * hw * hw);
  }

  void batch_norm(const std::string& name, u64 c, u64 hw) { add("batch_norm", name, 2 * c, framework_ ? 2 * c * hw * hw : 0); }
  void relu(const std::string& name, u64 c, u64 hw) { add("relu", name, 0, framework_ ? c * hw * hw : 0); }
  void pool(const char* layer, const std::string& name, u64 c, u64 hw_in) {
    add(layer, name, 0, framework_ ? c * hw_in * hw_in : 0);
  }

  void involution(const std::string& name, const InvolutionConfig& cfg, u64 hw_in) {
    add("involution", name, involution_params(cfg), involution_macs(cfg, hw_in, convention()));
  }

  void attention(const std::string& name, const AttentionConfig& cfg, u64 hw_in) {
    add("attention", name, attention_params(cfg), attention_macs(cfg, hw_in, convention()));
  }

  void linear(const std::string& name, u64 in, u64 out) {
    add("linear", name, in * out + out, in * out + (framework_ ? out : 0));
  }

  CostReport finish(std::size_t input_hw, MacConvention convention) {
    report_.input_hw = input_hw;
    report_.convention = convention;
    return std::move(report_);
  }

 private:
  void add(const char* layer, const std::string& name, u64 params, u64 macs) {
    report_.rows.push_back({layer, name, params, macs});
    report_.total_params += params;
    report_.total_macs += macs;
  }

  MacConvention convention() const { return framework_ ? MacConvention::kFramework : MacConvention::kStrict; }

  bool framework_;
  CostReport report_;
};

void middle_cost(CostWalker& w, const BlockSpec& b, u64 hw_in) {
  const std::string name = b.name + ".middle";
  const u64 hw = hw_in / b.stride;
  const MiddleOpConfig& m = b.middle;
  switch (m.op) {
    case MiddleOp::kConv3x3:
      w.conv(name, b.mid_channels, b.mid_channels, 3, hw);
      break;
    case MiddleOp::kDepthwise3x3:
      w.conv(name, b.mid_channels, b.mid_channels, 3, hw, b.mid_channels);
      break;
    case MiddleOp::kInvolution: {
      InvolutionConfig cfg;
      cfg.channels = b.mid_channels;
      cfg.kernel = m.kernel;
      cfg.stride = b.stride;
      cfg.groups = m.groups_for(b.mid_channels);
      cfg.reduction = m.reduction;
      cfg.form = m.form;
      cfg.softmax_kernel = m.softmax;
      w.involution(name, cfg, hw_in);
      break;
    }
    case MiddleOp::kAttention: {
      AttentionConfig cfg;
      cfg.channels = b.mid_channels;
      cfg.window = m.kernel;
      cfg.heads = m.groups_for(b.mid_channels);
      cfg.stride = b.stride;
      cfg.mode = m.attention_mode;
      cfg.softmax = m.softmax;
      w.attention(name, cfg, hw_in);
      break;
    }
  }
}

}  // namespace

std::uint64_t conv_macs(const ConvConfig& cfg, std::size_t hw_in, MacConvention convention) {
  const u64 hw = hw_in / cfg.stride;
  const u64 per_pixel = cfg.kernel * cfg.kernel * cfg.in_channels * cfg.out_channels / cfg.groups;
  const u64 bias = cfg.bias && convention == MacConvention::kFramework ? cfg.out_channels : 0;
  return (per_pixel + bias) * hw * hw;
}

std::uint64_t involution_macs(const InvolutionConfig& cfg, std::size_t hw_in, MacConvention convention) {
  const bool framework = convention == MacConvention::kFramework;
  const u64 C = cfg.channels, KK = cfg.taps(), G = cfg.groups, hw = hw_in / cfg.stride, L = hw * hw;
  u64 macs = 0;
  if (framework && cfg.stride > 1) macs += C * hw_in * hw_in;  // average pool
  u64 span_in = C;
  if (cfg.form == KernelForm::kBottleneck) {
    const u64 cr = cfg.reduced_channels();
    macs += C * cr * L;
    if (framework) macs += 3 * cr * L;  // BN (2) and relu (1) per element
    span_in = cr;
  }
  macs += span_in * KK * G * L;
  if (framework) macs += KK * G * L;  // span bias
  if (framework && cfg.softmax_kernel) macs += KK * G * L;
  macs += KK * C * L;  // aggregation
  return macs;
}

std::uint64_t attention_params(const AttentionConfig& cfg) {
  const u64 C = cfg.channels;
  if (cfg.mode == AttentionMode::kContent) return 3 * C * C;
  return 2 * C * C + cfg.window * cfg.window * (C / cfg.heads);
}

std::uint64_t attention_macs(const AttentionConfig& cfg, std::size_t hw_in, MacConvention convention) {
  const bool framework = convention == MacConvention::kFramework;
  const u64 C = cfg.channels, KK = cfg.window * cfg.window, hw = hw_in / cfg.stride, L = hw * hw;
  const u64 L_in = static_cast<u64>(hw_in) * hw_in;
  u64 macs = C * C * L + C * C * L_in;  // query on the pooled grid, value on the input
  if (cfg.mode == AttentionMode::kContent) macs += C * C * L_in;
  macs += 2 * KK * C * L;  // affinities and aggregation
  if (framework && cfg.stride > 1) macs += C * L_in;
  if (framework && cfg.softmax) macs += KK * cfg.heads * L;
  return macs;
}

std::uint64_t involution_params(const InvolutionConfig& cfg) {
  const u64 C = cfg.channels, KK = cfg.taps(), G = cfg.groups;
  if (cfg.form == KernelForm::kSingleLinear) return C * KK * G + KK * G;
  const u64 cr = cfg.reduced_channels();
  return C * cr + cr * KK * G + KK * G + 2 * cr;
}

CostReport cost_report(const ArchSpec& arch, std::size_t input_hw, MacConvention convention) {
  arch.validate();
  if (input_hw == 0 || input_hw % 32) {
    throw std::invalid_argument("input resolution " + std::to_string(input_hw) + " is not a positive multiple of 32");
  }
  CostWalker w(convention);
  const StemSpec& stem = arch.stem;
  u64 hw = input_hw / 2;
  if (stem.variant == StemVariant::kConv7) {
    w.conv("stem.conv", stem.in_channels, stem.out_channels, 7, hw);
    w.batch_norm("stem.bn", stem.out_channels, hw);
    w.relu("stem.relu", stem.out_channels, hw);
  } else {
    const u64 inner = stem.inner_channels;
    w.conv("stem.conv1", stem.in_channels, inner, 3, hw);
    w.batch_norm("stem.bn1", inner, hw);
    w.relu("stem.relu1", inner, hw);
    w.involution("stem.involution", stem.involution, hw);
    w.batch_norm("stem.bn2", inner, hw);
    w.relu("stem.relu2", inner, hw);
    w.conv("stem.conv3", inner, stem.out_channels, 3, hw);
    w.batch_norm("stem.bn3", stem.out_channels, hw);
    w.relu("stem.relu3", stem.out_channels, hw);
  }
  w.pool("max_pool2d", "stem.pool", stem.out_channels, hw);
  hw /= 2;

  u64 channels = stem.out_channels;
  for (const BlockSpec& b : arch.blocks()) {
    const u64 ho = hw / b.stride;
    w.conv(b.name + ".reduce", b.in_channels, b.mid_channels, 1, hw);
    w.batch_norm(b.name + ".reduce_bn", b.mid_channels, hw);
    w.relu(b.name + ".reduce_relu", b.mid_channels, hw);
    middle_cost(w, b, hw);
    w.batch_norm(b.name + ".middle_bn", b.mid_channels, ho);
    w.relu(b.name + ".middle_relu", b.mid_channels, ho);
    w.conv(b.name + ".expand", b.mid_channels, b.out_channels, 1, ho);
    w.batch_norm(b.name + ".expand_bn", b.out_channels, ho);
    if (b.projection) {
      w.conv(b.name + ".shortcut", b.in_channels, b.out_channels, 1, ho);
      w.batch_norm(b.name + ".shortcut_bn", b.out_channels, ho);
    }
    w.relu(b.name + ".out_relu", b.out_channels, ho);
    hw = ho;
    channels = b.out_channels;
  }
  w.pool("global_avg_pool", "head.pool", channels, hw);
  w.linear("head.fc", channels, arch.num_classes);
  return w.finish(input_hw, convention);
}

CostReport count_params(const ArchSpec& arch) { return cost_report(arch); }

CostReport count_macs(const ArchSpec& arch, std::size_t input_hw, MacConvention convention) {
  return cost_report(arch, input_hw, convention);
}

void write_cost_csv(std::ostream& os, const CostReport& report) {
  os << "layer,name,params,macs\n";
  for (const CostRow& r : report.rows) os << r.layer << ',' << r.name << ',' << r.params << ',' << r.macs << '\n';
  os << "TOTAL,total," << report.total_params << ',' << report.total_macs << '\n';
}

}  // namespace involution
