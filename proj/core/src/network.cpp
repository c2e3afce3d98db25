#include <cmath>
#include <istream>
#include <map>
#include <ostream>

#include "involution/prng.hpp"
#include "involution/rednet.hpp"
#include "involution/tensor_io.hpp"

namespace involution {

namespace {

ConvBn make_conv_bn(const std::string& name, const ConvConfig& cfg, Prng& rng) {
  return ConvBn{make_conv(name, cfg, rng), BatchNormState(name + "_bn", cfg.out_channels)};
}

ConvConfig conv_config(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                       std::size_t groups = 1) {
  ConvConfig cfg;
  cfg.in_channels = in;
  cfg.out_channels = out;
  cfg.kernel = kernel;
  cfg.stride = stride;
  cfg.groups = groups;
  return cfg;
}

MiddleLayer make_middle(const BlockSpec& b, Prng& rng) {
  const std::string name = b.name + ".middle";
  const MiddleOpConfig& m = b.middle;
  switch (m.op) {
    case MiddleOp::kConv3x3:
      return make_conv(name, conv_config(b.mid_channels, b.mid_channels, 3, b.stride), rng);
    case MiddleOp::kDepthwise3x3:
      return make_conv(name, conv_config(b.mid_channels, b.mid_channels, 3, b.stride, b.mid_channels), rng);
    case MiddleOp::kInvolution: {
      InvolutionConfig cfg;
      cfg.channels = b.mid_channels;
      cfg.kernel = m.kernel;
      cfg.stride = b.stride;
      cfg.groups = m.groups_for(b.mid_channels);
      cfg.reduction = m.reduction;
      cfg.form = m.form;
      cfg.softmax_kernel = m.softmax;
      return make_involution(name, cfg, rng);
    }
    case MiddleOp::kAttention: {
      AttentionConfig cfg;
      cfg.channels = b.mid_channels;
      cfg.window = m.kernel;
      cfg.heads = m.groups_for(b.mid_channels);
      cfg.stride = b.stride;
      cfg.mode = m.attention_mode;
      cfg.softmax = m.softmax;
      return make_attention(name, cfg, rng);
    }
  }
  throw std::logic_error("unhandled middle op");
}

struct TapePolicy {
  using Value = Var;
  Tape& tape;

  Var conv(ConvSpec& spec, Var x) { return nn::conv2d(x, spec); }
  Var bn(BatchNormState& state, Var x) { return nn::batch_norm(x, state); }
  Var relu(Var x) { return nn::relu(x); }
  Var max_pool(Var x) { return nn::max_pool2d(x, 3, 2, 1); }
  Var involution(const std::string&, InvolutionSpec& spec, Var x) { return nn::involution(x, spec); }
  Var attention(AttentionSpec& spec, Var x) { return nn::local_self_attention(x, spec); }
  Var add(Var a, Var b) { return ad::add(a, b); }
  Var head(Parameter& w, Parameter& b, Var x) {
    return nn::linear(nn::global_avg_pool(x), tape.param(w), tape.param(b));
  }
  bool stop() const { return false; }
};

// Tape-free evaluation. With a capture target set it stops at that
// involution layer and keeps its generated kernels.
struct PurePolicy {
  using Value = Tensor;
  std::string_view target;
  std::optional<Tensor> captured;

  Tensor conv(const ConvSpec& spec, const Tensor& x) { return ops::conv2d(x, spec); }
  Tensor bn(const BatchNormState& state, const Tensor& x) { return ops::batch_norm_apply(x, state); }
  Tensor relu(const Tensor& x) { return ops::relu(x); }
  Tensor max_pool(const Tensor& x) { return ops::max_pool2d(x, 3, 2, 1).out; }
  Tensor involution(const std::string& name, const InvolutionSpec& spec, const Tensor& x) {
    if (!target.empty() && name == target) {
      captured = ops::kernel_generate(x, spec);
      return x;
    }
    return ops::involution(x, spec);
  }
  Tensor attention(const AttentionSpec& spec, const Tensor& x) { return ops::local_self_attention(x, spec); }
  Tensor add(const Tensor& a, const Tensor& b) { return involution::add(a, b); }
  Tensor head(const Parameter& w, const Parameter& b, const Tensor& x) {
    return ops::linear(ops::global_avg_pool(x), w.value, &b.value);
  }
  bool stop() const { return captured.has_value(); }
};

}  // namespace

Network::Network(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  Prng rng(seed);
  const StemSpec& s = arch_.stem;
  if (s.variant == StemVariant::kConv7) {
    stem_.first = make_conv_bn("stem.conv", conv_config(s.in_channels, s.out_channels, 7, 2), rng);
  } else {
    stem_.first = make_conv_bn("stem.conv1", conv_config(s.in_channels, s.inner_channels, 3, 2), rng);
    stem_.involution = make_involution("stem.involution", s.involution, rng);
    stem_.involution_bn.emplace("stem.involution_bn", s.inner_channels);
    stem_.last = make_conv_bn("stem.conv3", conv_config(s.inner_channels, s.out_channels, 3), rng);
  }
  std::size_t channels = s.out_channels;
  for (const BlockSpec& b : arch_.blocks()) {
    Block blk{b,
              make_conv_bn(b.name + ".reduce", conv_config(b.in_channels, b.mid_channels, 1), rng),
              make_middle(b, rng),
              BatchNormState(b.name + ".middle_bn", b.mid_channels),
              make_conv_bn(b.name + ".expand", conv_config(b.mid_channels, b.out_channels, 1), rng),
              std::nullopt};
    if (b.projection) {
      blk.shortcut = make_conv_bn(b.name + ".shortcut", conv_config(b.in_channels, b.out_channels, 1, b.stride), rng);
    }
    blocks_.push_back(std::move(blk));
    channels = b.out_channels;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  fc_weight_ = Parameter("head.fc.weight", random_uniform({arch_.num_classes, channels}, rng, -bound, bound));
  fc_bias_ = Parameter("head.fc.bias", Tensor::zeros({arch_.num_classes}));
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  auto append = [&out](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  auto append_conv_bn = [&](ConvBn& cb) {
    append(parameters_of(cb.conv));
    append(parameters_of(cb.bn));
  };
  append_conv_bn(stem_.first);
  if (stem_.involution) {
    append(parameters_of(*stem_.involution));
    append(parameters_of(*stem_.involution_bn));
    append_conv_bn(*stem_.last);
  }
  for (Block& b : blocks_) {
    append_conv_bn(b.reduce);
    std::visit([&](auto& layer) { append(parameters_of(layer)); }, b.middle);
    append(parameters_of(b.middle_bn));
    append_conv_bn(b.expand);
    if (b.shortcut) append_conv_bn(*b.shortcut);
  }
  out.push_back(&fc_weight_);
  out.push_back(&fc_bias_);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : const_cast<Network*>(this)->parameters()) n += p->numel();
  return n;
}

void Network::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::vector<BatchNormState*> Network::batch_norms() {
  std::vector<BatchNormState*> out{&stem_.first.bn};
  if (stem_.involution) {
    out.push_back(&*stem_.involution->bn);
    out.push_back(&*stem_.involution_bn);
    out.push_back(&stem_.last->bn);
  }
  for (Block& b : blocks_) {
    out.push_back(&b.reduce.bn);
    if (auto* inv = std::get_if<InvolutionSpec>(&b.middle); inv && inv->bn) out.push_back(&*inv->bn);
    out.push_back(&b.middle_bn);
    out.push_back(&b.expand.bn);
    if (b.shortcut) out.push_back(&b.shortcut->bn);
  }
  std::erase(out, nullptr);
  return out;
}

void Network::set_mode(BnMode mode) {
  mode_ = mode;
  for (BatchNormState* bn : batch_norms()) bn->mode = mode;
}

void Network::check_input(const Shape& shape) const {
  if (shape.size() != 4 || shape[1] != arch_.stem.in_channels || shape[2] < 32 || shape[3] < 32 || shape[2] % 32 ||
      shape[3] % 32) {
    throw ShapeError("network input must be (B, " + std::to_string(arch_.stem.in_channels) +
                     ", H, W) with H, W multiples of 32; got " + shape_to_string(shape));
  }
}

template <class Policy>
typename Policy::Value Network::run(Policy& p, typename Policy::Value x) {
  x = p.relu(p.bn(stem_.first.bn, p.conv(stem_.first.conv, x)));
  if (stem_.involution) {
    x = p.involution("stem", *stem_.involution, x);
    if (p.stop()) return x;
    x = p.relu(p.bn(*stem_.involution_bn, x));
    x = p.relu(p.bn(stem_.last->bn, p.conv(stem_.last->conv, x)));
  }
  x = p.max_pool(x);
  for (Block& b : blocks_) {
    auto h = p.relu(p.bn(b.reduce.bn, p.conv(b.reduce.conv, x)));
    if (auto* conv = std::get_if<ConvSpec>(&b.middle)) {
      h = p.conv(*conv, h);
    } else if (auto* inv = std::get_if<InvolutionSpec>(&b.middle)) {
      h = p.involution(b.spec.name, *inv, h);
      if (p.stop()) return h;
    } else {
      h = p.attention(std::get<AttentionSpec>(b.middle), h);
    }
    h = p.relu(p.bn(b.middle_bn, h));
    h = p.bn(b.expand.bn, p.conv(b.expand.conv, h));
    auto shortcut = b.shortcut ? p.bn(b.shortcut->bn, p.conv(b.shortcut->conv, x)) : x;
    x = p.relu(p.add(h, shortcut));
  }
  return p.head(fc_weight_, fc_bias_, x);
}

Var Network::forward(Tape& tape, Var x) {
  check_input(x.shape());
  TapePolicy policy{tape};
  return run(policy, x);
}

// The pure policy never writes through the network, so the const_casts
// below only satisfy the shared traversal's signature.
Tensor Network::infer(const Tensor& x) const {
  check_input(x.shape());
  PurePolicy policy;
  return const_cast<Network*>(this)->run(policy, x);
}

Tensor Network::extract_kernels(const Tensor& x, std::string_view layer) const {
  const_cast<Network*>(this)->involution_layer(layer);
  check_input(x.shape());
  PurePolicy policy{layer, std::nullopt};
  const_cast<Network*>(this)->run(policy, x);
  return std::move(*policy.captured);
}

InvolutionSpec& Network::involution_layer(std::string_view layer) {
  if (layer == "stem") {
    if (stem_.involution) return *stem_.involution;
    throw LayerError("layer 'stem' has no involution (conv7 stem)");
  }
  for (Block& b : blocks_) {
    if (b.spec.name != layer) continue;
    if (auto* inv = std::get_if<InvolutionSpec>(&b.middle)) return *inv;
    throw LayerError("layer '" + std::string(layer) + "' is not an involution layer (middle op is " +
                     std::string(to_string(b.spec.middle.op)) + ")");
  }
  throw LayerError("no layer named '" + std::string(layer) + "'");
}

std::vector<std::string> Network::involution_layers() const {
  std::vector<std::string> out;
  if (stem_.involution) out.emplace_back("stem");
  for (const Block& b : blocks_) {
    if (std::holds_alternative<InvolutionSpec>(b.middle)) out.push_back(b.spec.name);
  }
  return out;
}

void Network::save(std::ostream& os) const {
  auto* self = const_cast<Network*>(this);
  const auto params = self->parameters();
  const auto bns = self->batch_norms();
  os << "involution-weights 1\n" << params.size() + 2 * bns.size() << "\n";
  for (const Parameter* p : params) {
    os << p->name << "\n";
    write_text(os, p->value);
  }
  for (const BatchNormState* bn : bns) {
    const std::string base = bn->gamma.name.substr(0, bn->gamma.name.rfind('.'));
    os << base << ".running_mean\n";
    write_text(os, bn->running_mean);
    os << base << ".running_var\n";
    write_text(os, bn->running_var);
  }
}

void Network::load(std::istream& is) {
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(is >> magic >> version >> count) || magic != "involution-weights" || version != 1) {
    throw std::runtime_error("weights: not an involution weights file");
  }
  std::map<std::string, Tensor*, std::less<>> slots;
  for (Parameter* p : parameters()) slots[p->name] = &p->value;
  for (BatchNormState* bn : batch_norms()) {
    const std::string base = bn->gamma.name.substr(0, bn->gamma.name.rfind('.'));
    slots[base + ".running_mean"] = &bn->running_mean;
    slots[base + ".running_var"] = &bn->running_var;
  }
  if (count != slots.size()) {
    throw std::runtime_error("weights: file holds " + std::to_string(count) + " tensors, network has " +
                             std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    is >> name;
    const auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("weights: unexpected tensor '" + name + "'");
    Tensor t = read_text(is);
    if (!t.same_shape(*it->second)) {
      throw std::runtime_error("weights: '" + name + "' has shape " + shape_to_string(t.shape()) + ", expected " +
                               shape_to_string(it->second->shape()));
    }
    *it->second = std::move(t);
  }
}

}  // namespace involution
