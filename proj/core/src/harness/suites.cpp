#include "involution/harness/suites.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "involution/nnops.hpp"
#include "involution/prng.hpp"
#include "involution/reference.hpp"

namespace involution::harness {

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

// Magnitudes in [0.1, 1] with random sign: at least 1e4 eps from the relu
// kink at the default eps.
Tensor away_from_zero(const Shape& shape, Prng& rng) {
  Tensor t = random_uniform(shape, rng, 0.1, 1.0);
  for (double& v : t.data()) v = rng.uniform() < 0.5 ? -v : v;
  return t;
}

// Distinct values spaced 0.05 apart in random order, so no max-pool window
// holds a near tie.
Tensor spaced_values(const Shape& shape, Prng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  Tensor t = Tensor::zeros(shape);
  for (std::size_t i = 0; i < n; ++i) t[i] = 0.05 * static_cast<double>(order[i]) - 0.025 * static_cast<double>(n);
  return t;
}

struct GradCase {
  std::string label;
  std::string op;
  std::vector<Tensor> inputs;
  Attrs attrs;
};

std::vector<GradCase> gradcheck_cases(Prng& rng) {
  auto R = [&rng](Shape s) { return random_uniform(std::move(s), rng); };
  std::vector<GradCase> cases;
  cases.push_back({"add", "add", {R({3, 4}), R({3, 4})}, {}});
  cases.push_back({"sub", "sub", {R({3, 4}), R({3, 4})}, {}});
  cases.push_back({"mul", "mul", {R({3, 4}), R({3, 4})}, {}});
  cases.push_back({"matmul", "matmul", {R({3, 4}), R({4, 2})}, {}});
  cases.push_back({"relu", "relu", {away_from_zero({4, 5}, rng)}, {}});
  cases.push_back({"sum", "sum", {R({2, 3, 2})}, {}});
  cases.push_back({"unfold", "unfold", {R({1, 2, 5, 5})}, {{"kernel", 3}}});
  cases.push_back({"unfold[s=2,d=2]", "unfold", {R({1, 2, 6, 6})}, {{"kernel", 3}, {"stride", 2}, {"dilation", 2}}});
  cases.push_back({"avg_pool2d", "avg_pool2d", {R({2, 2, 4, 4})}, {{"stride", 2}}});
  cases.push_back({"max_pool2d", "max_pool2d", {spaced_values({1, 2, 6, 6}, rng)}, {}});
  cases.push_back({"conv2d", "conv2d", {R({2, 3, 5, 5}), R({2, 3, 3, 3}), R({2})}, {}});
  cases.push_back({"conv2d[g=2,s=2]", "conv2d", {R({1, 4, 6, 6}), R({6, 2, 3, 3}), R({6})},
                   {{"groups", 2}, {"stride", 2}}});
  cases.push_back({"conv2d[k=5,d=2]", "conv2d", {R({1, 2, 7, 7}), R({2, 2, 5, 5}), R({2})}, {{"dilation", 2}}});
  cases.push_back({"depthwise_conv2d", "depthwise_conv2d", {R({2, 3, 5, 5}), R({3, 1, 3, 3})}, {}});
  cases.push_back({"linear_1x1", "linear_1x1", {R({2, 3, 3, 3}), R({4, 3}), R({4})}, {}});
  cases.push_back({"linear", "linear", {R({3, 5}), R({4, 5}), R({4})}, {}});
  cases.push_back({"batch_norm[train]", "batch_norm", {R({2, 3, 3, 3}), R({3}), R({3})}, {}});
  cases.push_back({"batch_norm[eval]", "batch_norm", {R({2, 3, 3, 3}), R({3}), R({3})}, {{"eval", 1}}});
  cases.push_back({"softmax", "softmax", {R({2, 4, 3})}, {{"axis", 1}}});
  cases.push_back({"global_avg_pool", "global_avg_pool", {R({2, 3, 3, 3})}, {}});
  cases.push_back({"involution_mac", "involution_mac", {R({1, 4, 5, 5}), R({1, 2, 9, 5, 5})}, {{"kernel", 3}}});
  cases.push_back({"involution_mac[s=2]", "involution_mac", {R({1, 4, 6, 6}), R({1, 2, 9, 3, 3})},
                   {{"kernel", 3}, {"stride", 2}}});
  // B=1, C=8, H=W=5, K=3, G=2, r=2.
  const Attrs inv{{"kernel", 3}, {"groups", 2}};
  auto inv_inputs = [&](Shape x) {
    return std::vector<Tensor>{R(std::move(x)), R({4, 8}), R({4}), R({4}), R({18, 4}), R({18})};
  };
  cases.push_back({"kernel_generate", "kernel_generate", inv_inputs({1, 8, 5, 5}), inv});
  cases.push_back({"involution", "involution", inv_inputs({1, 8, 5, 5}), inv});
  cases.push_back({"involution[s=2]", "involution", inv_inputs({2, 8, 6, 6}), {{"kernel", 3}, {"groups", 2}, {"stride", 2}}});
  cases.push_back({"involution[softmax]", "involution", inv_inputs({1, 8, 5, 5}), {{"kernel", 3}, {"groups", 2}, {"softmax", 1}}});
  cases.push_back({"local_self_attention", "local_self_attention", {R({1, 4, 5, 5}), R({4, 4}), R({4, 4}), R({4, 4})},
                   {{"window", 3}, {"heads", 2}}});
  cases.push_back({"local_self_attention[s=2,softmax]", "local_self_attention",
                   {R({1, 4, 6, 6}), R({4, 4}), R({4, 4}), R({4, 4})},
                   {{"window", 3}, {"heads", 2}, {"stride", 2}, {"softmax", 1}}});
  cases.push_back({"positional_self_attention", "positional_self_attention",
                   {R({1, 4, 5, 5}), R({4, 4}), R({4, 4}), R({9, 2})}, {{"window", 3}, {"heads", 2}}});
  cases.push_back({"cross_entropy", "cross_entropy", {R({3, 4})}, {{"label_smoothing", 0.1}}});
  return cases;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options) {
  Prng rng(seed);
  std::vector<GradCheckReport> reports;
  for (GradCase& c : gradcheck_cases(rng)) {
    GradCheckReport r = grad_check(nn::registry(), c.op, c.inputs, c.attrs, options);
    r.op = c.label;
    reports.push_back(std::move(r));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Oracle suite

namespace {

class Check {
 public:
  Check(std::string name, double tolerance, bool lower_bound = false) : lower_bound_(lower_bound) {
    c_.name = std::move(name);
    c_.tolerance = tolerance;
    c_.metric = lower_bound ? "min_abs_diff" : "max_abs_err";
    c_.value = lower_bound ? INFINITY : 0.0;
  }

  void record(double v) {
    ++c_.cases;
    if (lower_bound_) {
      c_.value = std::min(c_.value, v);
      if (!(v > c_.tolerance)) ++c_.failures;
    } else {
      c_.value = std::max(c_.value, v);
      if (!(v <= c_.tolerance)) ++c_.failures;
    }
  }

  OracleCheck done() const { return c_; }

 private:
  bool lower_bound_;
  OracleCheck c_;
};

std::size_t pick(Prng& rng, std::initializer_list<std::size_t> values) {
  return *(values.begin() + rng.below(values.size()));
}

std::vector<std::size_t> divisors(std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t d = 1; d <= n; ++d)
    if (n % d == 0) out.push_back(d);
  return out;
}

std::size_t pick_divisor(Prng& rng, std::size_t n) {
  const auto d = divisors(n);
  return d[rng.below(d.size())];
}

// Random small geometry: B <= 2, C <= 8, H, W <= 9 and divisible by the
// stride, K in {1, 3, 5}, stride in {1, 2}.
struct Geometry {
  std::size_t B, C, H, W, K, s;
};

Geometry random_geometry(Prng& rng) {
  Geometry g;
  g.B = 1 + rng.below(2);
  g.C = 1 + rng.below(8);
  g.K = pick(rng, {1, 3, 5});
  g.s = 1 + rng.below(2);
  const std::size_t max_side = 9 / g.s;
  g.H = g.s * (1 + rng.below(max_side));
  g.W = g.s * (1 + rng.below(max_side));
  return g;
}

void randomize(Parameter& p, Prng& rng) { p.value = random_uniform(p.value.shape(), rng); }

void randomize(BatchNormState& bn, Prng& rng) {
  randomize(bn.gamma, rng);
  randomize(bn.beta, rng);
  bn.running_mean = random_uniform(bn.running_mean.shape(), rng);
  bn.running_var = random_uniform(bn.running_var.shape(), rng, 0.5, 2.0);
}

InvolutionSpec random_involution(const Geometry& g, Prng& rng, bool allow_variants = true) {
  InvolutionConfig cfg;
  cfg.channels = g.C;
  cfg.kernel = g.K;
  cfg.stride = g.s;
  cfg.groups = pick_divisor(rng, g.C);
  cfg.reduction = pick_divisor(rng, g.C);
  if (allow_variants) {
    cfg.form = rng.below(4) == 0 ? KernelForm::kSingleLinear : KernelForm::kBottleneck;
    cfg.softmax_kernel = rng.below(4) == 0;
  }
  InvolutionSpec spec = make_involution("oracle", cfg, rng);
  if (spec.reduce) randomize(*spec.reduce, rng);
  if (spec.bn) randomize(*spec.bn, rng);
  randomize(spec.span, rng);
  randomize(spec.span_bias, rng);
  return spec;
}

AttentionSpec random_attention(const Geometry& g, Prng& rng, AttentionMode mode, bool softmax) {
  AttentionConfig cfg;
  cfg.channels = g.C;
  cfg.window = g.K;
  cfg.heads = pick_divisor(rng, g.C);
  cfg.stride = g.s;
  cfg.mode = mode;
  cfg.softmax = softmax;
  return make_attention("oracle", cfg, rng);
}

Tensor center_delta_kernel(std::size_t B, std::size_t G, std::size_t K, std::size_t H, std::size_t W) {
  Tensor k = Tensor::zeros({B, G, K * K, H, W});
  const std::size_t center = (K * K) / 2;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t l = 0; l < H * W; ++l) k[((b * G + g) * K * K + center) * H * W + l] = 1.0;
  return k;
}

// x shifted by (di, dj) >= 0 with zero fill.
Tensor shift(const Tensor& x, std::size_t di, std::size_t dj) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = di; i < H; ++i)
        for (std::size_t j = dj; j < W; ++j) out.at({b, c, i, j}) = x.at({b, c, i - di, j - dj});
  return out;
}

void naive_equivalence(std::vector<OracleCheck>& out, Prng& rng, const OracleOptions& opt) {
  Check conv("oracle.conv2d", opt.tolerance), dw("oracle.depthwise_conv2d", opt.tolerance),
      inv("oracle.involution", opt.tolerance), att("oracle.attention_content", opt.tolerance),
      pos("oracle.attention_position", opt.tolerance);
  for (std::size_t n = 0; n < opt.random_configs; ++n) {
    const Geometry g = random_geometry(rng);
    const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);

    ConvConfig cc;
    cc.in_channels = g.C;
    cc.groups = pick_divisor(rng, g.C);
    cc.out_channels = cc.groups * (1 + rng.below(3));
    cc.kernel = g.K;
    cc.stride = g.s;
    cc.dilation = 1 + rng.below(2);
    cc.bias = rng.below(2) == 1;
    ConvSpec cs = make_conv("oracle", cc, rng);
    if (cs.bias) randomize(*cs.bias, rng);
    conv.record(max_abs_diff(ops::conv2d(x, cs),
                             reference::conv2d(x, cs.filters.value, cs.bias ? &cs.bias->value : nullptr, cc.window(),
                                               cc.groups)));

    ConvConfig dc{g.C, g.C, g.K, g.s, 1 + rng.below(2), g.C, false};
    ConvSpec ds = make_conv("oracle", dc, rng);
    dw.record(max_abs_diff(ops::depthwise_conv2d(x, ds), reference::depthwise_conv2d(x, ds.filters.value, dc.window())));

    InvolutionSpec is = random_involution(g, rng);
    // Batch statistics on even cases, running estimates on odd ones.
    if (is.bn) is.bn->mode = n % 2 ? BnMode::kEval : BnMode::kTrain;
    inv.record(max_abs_diff(ops::involution(x, is), reference::involution(x, is)));

    AttentionSpec as = random_attention(g, rng, AttentionMode::kContent, n % 3 == 0);
    att.record(max_abs_diff(ops::local_self_attention(x, as), reference::local_self_attention(x, as)));
    AttentionSpec ps = random_attention(g, rng, AttentionMode::kPosition, n % 3 == 1);
    pos.record(max_abs_diff(ops::local_self_attention(x, ps), reference::local_self_attention(x, ps)));
  }
  for (const Check* c : {&conv, &dw, &inv, &att, &pos}) out.push_back(c->done());
}

void attention_unification(std::vector<OracleCheck>& out, Prng& rng, const OracleOptions& opt) {
  // Tape path of the attention layer against the MAC engine fed with the
  // affinity tensor; exact up to 1e-15.
  Check c("unification.attention_as_involution", 1e-15);
  for (std::size_t n = 0; n < opt.property_cases; ++n) {
    const Geometry g = random_geometry(rng);
    const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);
    AttentionSpec spec = random_attention(g, rng, AttentionMode::kContent, false);
    Tape tape;
    const Tensor y = nn::local_self_attention(tape.constant(x), spec).value();
    const Tensor affinity = ops::attention_affinity(x, spec);
    const Tensor values = ops::attention_values(x, spec);
    c.record(max_abs_diff(y, ops::involution_mac(values, affinity, spec.config.unfold_window())));
  }
  out.push_back(c.done());
}

void structural_properties(std::vector<OracleCheck>& out, Prng& rng, const OracleOptions& opt) {
  Check delta("property.delta_kernel_identity", 0.0);
  Check perm("property.channel_permutation_equivariance", 0.0);
  Check trans("property.translation_equivariance", opt.tolerance);
  Check spec_("property.spatial_specificity", 1e-9, true);
  Check local("property.generation_locality", 0.0);
  for (std::size_t n = 0; n < opt.property_cases; ++n) {
    Geometry g = random_geometry(rng);
    g.s = 1;

    {  // Center one-hot kernels reproduce the input.
      const std::size_t G = pick_divisor(rng, g.C), d = 1 + rng.below(2);
      const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);
      const Tensor k = center_delta_kernel(g.B, G, g.K, g.H, g.W);
      delta.record(max_abs_diff(ops::involution_mac(x, k, same_window(g.K, 1, d)), x));
    }

    {  // Permuting channels inside one group permutes the output alike.
      const std::size_t G = pick_divisor(rng, g.C), Cg = g.C / G, grp = rng.below(G);
      const Window w = same_window(g.K);
      const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);
      const Tensor k = random_uniform({g.B, G, g.K * g.K, g.H, g.W}, rng);
      std::vector<std::size_t> order(g.C);
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t i = Cg; i > 1; --i) std::swap(order[grp * Cg + i - 1], order[grp * Cg + rng.below(i)]);
      auto permute_channels = [&](const Tensor& t) {
        Tensor p = Tensor::zeros(t.shape());
        const std::size_t L = t.dim(2) * t.dim(3);
        for (std::size_t b = 0; b < t.dim(0); ++b)
          for (std::size_t c = 0; c < g.C; ++c)
            for (std::size_t l = 0; l < L; ++l) p[(b * g.C + c) * L + l] = t[(b * g.C + order[c]) * L + l];
        return p;
      };
      perm.record(max_abs_diff(ops::involution_mac(permute_channels(x), k, w), permute_channels(ops::involution_mac(x, k, w))));
    }

    {  // Shifting the input shifts the output on the interior; generation
       // uses frozen BN statistics, which do not depend on the shift.
      Geometry tg = g;
      const std::size_t r = tg.K / 2;
      const std::size_t di = rng.below(3), dj = rng.below(3);
      tg.H = std::max(tg.H, 2 * r + 1 + di);
      tg.W = std::max(tg.W, 2 * r + 1 + dj);
      InvolutionSpec is = random_involution(tg, rng, false);
      if (is.bn) is.bn->mode = BnMode::kEval;
      const Tensor x = random_uniform({tg.B, tg.C, tg.H, tg.W}, rng);
      const Tensor y = ops::involution(x, is);
      const Tensor ys = ops::involution(shift(x, di, dj), is);
      double err = 0.0;
      for (std::size_t b = 0; b < tg.B; ++b)
        for (std::size_t c = 0; c < tg.C; ++c)
          for (std::size_t i = r + di; i + r < tg.H; ++i)
            for (std::size_t j = r + dj; j + r < tg.W; ++j)
              err = std::max(err, std::abs(ys.at({b, c, i, j}) - y.at({b, c, i - di, j - dj})));
      trans.record(err);
    }

    {  // Kernels at distinct positions of a generic input differ: the
       // spread of every tap over the positions, maximized.
      Geometry sg = g;
      sg.H = std::max<std::size_t>(sg.H, 4);
      sg.W = std::max<std::size_t>(sg.W, 4);
      InvolutionSpec is = random_involution(sg, rng, false);
      // Initial BN affine with batch statistics keeps about half of the
      // hidden units active; a random shift can silence all of them.
      if (is.bn) is.bn = BatchNormState("oracle.bn", is.config.reduced_channels());
      const Tensor x = random_uniform({sg.B, sg.C, sg.H, sg.W}, rng);
      const Tensor k = ops::kernel_generate(x, is);
      const std::size_t L = sg.H * sg.W;
      double spread = 0.0;
      for (std::size_t row = 0; row < k.dim(1) * k.dim(2); ++row) {
        const auto first = k.data().begin() + static_cast<std::ptrdiff_t>(row * L);
        const auto [lo, hi] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(L));
        spread = std::max(spread, *hi - *lo);
      }
      spec_.record(spread);
    }

    {  // Changing one pixel changes only that position's kernel (frozen BN).
      InvolutionSpec is = random_involution(g, rng);
      if (is.bn) is.bn->mode = BnMode::kEval;
      const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);
      Tensor x2 = x;
      const std::size_t pi = rng.below(g.H), pj = rng.below(g.W);
      for (std::size_t c = 0; c < g.C; ++c) x2.at({0, c, pi, pj}) += 1.0;
      const Tensor k1 = ops::kernel_generate(x, is), k2 = ops::kernel_generate(x2, is);
      double leak = 0.0;
      for (std::size_t b = 0; b < g.B; ++b)
        for (std::size_t grp = 0; grp < k1.dim(1); ++grp)
          for (std::size_t t = 0; t < k1.dim(2); ++t)
            for (std::size_t i = 0; i < g.H; ++i)
              for (std::size_t j = 0; j < g.W; ++j) {
                if (b == 0 && i == pi && j == pj) continue;
                leak = std::max(leak, std::abs(k1.at({b, grp, t, i, j}) - k2.at({b, grp, t, i, j})));
              }
      local.record(leak);
    }
  }
  for (const Check* c : {&delta, &perm, &trans, &spec_, &local}) out.push_back(c->done());
}

void hand_examples(std::vector<OracleCheck>& out, Prng& rng, const OracleOptions& opt) {
  {  // 3x3 ramp: the center column of a padded 3x3 unfold is 0..8.
    Check c("example.unfold_center_column", 0.0);
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i);
    const Tensor cols = ops::unfold(x, same_window(3));
    double err = 0.0;
    for (std::size_t r = 0; r < 9; ++r) err = std::max(err, std::abs(cols.at({0, r, 4}) - static_cast<double>(r)));
    c.record(err);
    out.push_back(c.done());
  }
  {  // Constant 1/K^2 kernels act as a zero-padded box filter.
    Check c("example.box_filter", opt.tolerance);
    for (std::size_t n = 0; n < opt.random_configs; ++n) {
      Geometry g = random_geometry(rng);
      g.s = 1;
      const std::size_t G = pick_divisor(rng, g.C);
      const Tensor x = random_uniform({g.B, g.C, g.H, g.W}, rng);
      const double w = 1.0 / static_cast<double>(g.K * g.K);
      const Tensor k = Tensor::full({g.B, G, g.K * g.K, g.H, g.W}, w);
      const Tensor box = Tensor::full({g.C, 1, g.K, g.K}, w);
      c.record(max_abs_diff(ops::involution_mac(x, k, same_window(g.K)), reference::depthwise_conv2d(x, box, same_window(g.K))));
    }
    out.push_back(c.done());
  }
}

}  // namespace

std::vector<OracleCheck> run_oracle_suite(std::uint64_t seed, const OracleOptions& options) {
  Prng rng(seed);
  std::vector<OracleCheck> out;
  naive_equivalence(out, rng, options);
  attention_unification(out, rng, options);
  structural_properties(out, rng, options);
  hand_examples(out, rng, options);
  return out;
}

void write_oracle_csv(std::ostream& os, const std::vector<OracleCheck>& checks) {
  os << "check,cases,failures,metric,value,tolerance,pass\n";
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::scientific << std::setprecision(6);
  for (const OracleCheck& c : checks) {
    os << c.name << ',' << c.cases << ',' << c.failures << ',' << c.metric << ',' << c.value << ',' << c.tolerance
       << ',' << (c.pass() ? "true" : "false") << '\n';
  }
  os.flags(flags);
  os.precision(prec);
}

}  // namespace involution::harness
