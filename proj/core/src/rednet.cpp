#include <algorithm>
#include <map>
#include <sstream>

#include "involution/rednet.hpp"

namespace involution {

namespace {

const std::map<std::size_t, std::vector<std::size_t>>& depth_table() {
  static const std::map<std::size_t, std::vector<std::size_t>> table{
      {26, {1, 2, 4, 1}}, {38, {2, 3, 5, 2}}, {50, {3, 4, 6, 3}}, {101, {3, 4, 23, 3}}, {152, {3, 8, 36, 3}}};
  return table;
}

std::vector<StageSpec> stages_from(const std::vector<std::size_t>& counts, std::size_t base_width) {
  std::vector<StageSpec> stages;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    stages.push_back({counts[i], base_width << i, i == 0 ? std::size_t{1} : std::size_t{2}});
  }
  return stages;
}

StemSpec make_stem(StemVariant variant, std::size_t out_channels, std::size_t inner, const MiddleOpConfig& middle) {
  StemSpec stem;
  stem.variant = variant;
  stem.out_channels = out_channels;
  stem.inner_channels = inner;
  stem.involution.channels = inner;
  stem.involution.kernel = 3;
  // The stem involution follows the trunk's grouping and generation settings
  // when the trunk is involution, and the defaults otherwise.
  const MiddleOpConfig& src = middle.op == MiddleOp::kInvolution ? middle : MiddleOpConfig{};
  stem.involution.groups = src.groups_for(inner);
  stem.involution.reduction = std::min(src.reduction, inner);
  stem.involution.form = src.form;
  stem.involution.softmax_kernel = src.softmax;
  return stem;
}

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view text, const std::pair<std::string_view, Enum> (&names)[N], const char* what) {
  for (const auto& [name, value] : names) {
    if (text == name) return value;
  }
  std::string allowed;
  for (const auto& [name, value] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw std::invalid_argument("unknown " + std::string(what) + " '" + std::string(text) + "' (expected " + allowed + ")");
}

constexpr std::pair<std::string_view, MiddleOp> kMiddleNames[] = {{"involution", MiddleOp::kInvolution},
                                                                  {"conv", MiddleOp::kConv3x3},
                                                                  {"depthwise", MiddleOp::kDepthwise3x3},
                                                                  {"attention", MiddleOp::kAttention}};
constexpr std::pair<std::string_view, StemVariant> kStemNames[] = {{"conv7", StemVariant::kConv7},
                                                                   {"inv", StemVariant::kInvolution}};
constexpr std::pair<std::string_view, MacConvention> kConventionNames[] = {{"framework", MacConvention::kFramework},
                                                                           {"strict", MacConvention::kStrict}};

}  // namespace

std::string_view to_string(MiddleOp op) {
  for (const auto& [name, value] : kMiddleNames)
    if (value == op) return name;
  return "?";
}

std::string_view to_string(StemVariant stem) { return stem == StemVariant::kConv7 ? "conv7" : "inv"; }

std::string_view to_string(MacConvention convention) {
  return convention == MacConvention::kFramework ? "framework" : "strict";
}

MiddleOp parse_middle_op(std::string_view text) { return parse_enum(text, kMiddleNames, "middle op"); }
StemVariant parse_stem(std::string_view text) { return parse_enum(text, kStemNames, "stem"); }
MacConvention parse_mac_convention(std::string_view text) {
  return parse_enum(text, kConventionNames, "MAC convention");
}

std::size_t MiddleOpConfig::groups_for(std::size_t channels) const {
  if (group_channels == 0) return 1;
  return std::max<std::size_t>(1, channels / group_channels);
}

std::vector<BlockSpec> ArchSpec::blocks() const {
  std::vector<BlockSpec> out;
  std::size_t in = stem.out_channels;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& st = stages[s];
    for (std::size_t b = 0; b < st.blocks; ++b) {
      BlockSpec blk;
      blk.name = "conv" + std::to_string(s + 1) + "_" + std::to_string(b + 1);
      blk.in_channels = in;
      blk.mid_channels = st.mid_channels;
      blk.out_channels = st.mid_channels * expansion;
      blk.stride = b == 0 ? st.stride : 1;
      blk.middle = middle;
      blk.projection = blk.stride != 1 || in != blk.out_channels;
      out.push_back(blk);
      in = blk.out_channels;
    }
  }
  return out;
}

void ArchSpec::validate() const {
  if (stages.empty()) throw std::invalid_argument("arch: at least one stage required");
  for (const StageSpec& st : stages) {
    if (st.blocks == 0) throw std::invalid_argument("arch: every stage needs at least one block");
    if (st.stride != 1 && st.stride != 2) throw std::invalid_argument("arch: stage stride must be 1 or 2");
  }
  if (num_classes == 0) throw std::invalid_argument("arch: num_classes must be positive");
  if (middle.op == MiddleOp::kConv3x3 || middle.op == MiddleOp::kDepthwise3x3) return;
  if (middle.kernel % 2 == 0) throw std::invalid_argument("arch: middle kernel size must be odd");
  for (const BlockSpec& b : blocks()) {
    if (b.mid_channels % middle.groups_for(b.mid_channels)) {
      throw std::invalid_argument("arch: " + b.name + " width not divisible by its group count");
    }
    if (middle.op == MiddleOp::kInvolution && middle.form == KernelForm::kBottleneck &&
        b.mid_channels % middle.reduction) {
      throw std::invalid_argument("arch: " + b.name + " width not divisible by the reduction ratio");
    }
  }
}

ArchSpec build_rednet(const RedNetOptions& options) {
  const auto it = depth_table().find(options.depth);
  if (it == depth_table().end()) {
    throw std::invalid_argument("unsupported depth " + std::to_string(options.depth) +
                                " (expected 26, 38, 50, 101 or 152)");
  }
  ArchSpec arch;
  const bool resnet = options.middle.op == MiddleOp::kConv3x3;
  arch.name = (resnet ? "resnet" : "rednet") + std::to_string(options.depth);
  arch.stem = make_stem(options.stem, 64, 32, options.middle);
  arch.stages = stages_from(it->second, 64);
  arch.middle = options.middle;
  arch.num_classes = options.num_classes;
  arch.validate();
  return arch;
}

ArchSpec build_resnet(std::size_t depth, std::size_t num_classes) {
  RedNetOptions options;
  options.depth = depth;
  options.stem = StemVariant::kConv7;
  options.middle.op = MiddleOp::kConv3x3;
  options.num_classes = num_classes;
  return build_rednet(options);
}

ArchSpec build_rednet_toy(const MiddleOpConfig& middle, std::size_t num_classes, StemVariant stem) {
  ArchSpec arch;
  arch.name = "rednet-toy";
  arch.stem = make_stem(stem, 16, 8, middle);
  arch.stages = stages_from({1, 1, 1, 1}, 16);
  arch.middle = middle;
  arch.num_classes = num_classes;
  arch.validate();
  return arch;
}

std::string describe(const ArchSpec& arch) {
  std::ostringstream os;
  const MiddleOpConfig& m = arch.middle;
  os << "[network]\n"
     << "name = " << arch.name << "\n"
     << "num_classes = " << arch.num_classes << "\n"
     << "expansion = " << arch.expansion << "\n"
     << "middle_op = " << to_string(m.op) << "\n";
  if (m.op != MiddleOp::kConv3x3 && m.op != MiddleOp::kDepthwise3x3) {
    os << "kernel = " << m.kernel << "\n"
       << "group_channels = " << (m.group_channels == 0 ? std::string("C") : std::to_string(m.group_channels)) << "\n";
  }
  if (m.op == MiddleOp::kInvolution) {
    os << "kernel_form = " << (m.form == KernelForm::kBottleneck ? "bottleneck" : "single") << "\n"
       << "reduction = " << m.reduction << "\n";
  }
  if (m.op == MiddleOp::kAttention) {
    os << "attention_mode = " << (m.attention_mode == AttentionMode::kContent ? "content" : "position") << "\n";
  }
  if (m.op == MiddleOp::kInvolution || m.op == MiddleOp::kAttention) {
    os << "softmax = " << (m.softmax ? "true" : "false") << "\n";
  }
  os << "\n[stem]\n"
     << "variant = " << to_string(arch.stem.variant) << "\n"
     << "in_channels = " << arch.stem.in_channels << "\n"
     << "out_channels = " << arch.stem.out_channels << "\n";
  if (arch.stem.variant == StemVariant::kInvolution) {
    const InvolutionConfig& ic = arch.stem.involution;
    os << "inner_channels = " << arch.stem.inner_channels << "\n"
       << "involution = K" << ic.kernel << " G" << ic.groups << " r" << ic.reduction << "\n";
  }
  for (std::size_t s = 0; s < arch.stages.size(); ++s) {
    const StageSpec& st = arch.stages[s];
    os << "\n[stage" << s + 1 << "]\n"
       << "blocks = " << st.blocks << "\n"
       << "mid_channels = " << st.mid_channels << "\n"
       << "out_channels = " << st.mid_channels * arch.expansion << "\n"
       << "stride = " << st.stride << "\n";
    if (m.op == MiddleOp::kInvolution || m.op == MiddleOp::kAttention) {
      os << "groups = " << m.groups_for(st.mid_channels) << "\n";
    }
  }
  return os.str();
}

}  // namespace involution
