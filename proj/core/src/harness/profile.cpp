#include "involution/harness/profile.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace involution::harness {

namespace {

ArchSpec rednet(std::size_t depth, StemVariant stem, MiddleOpConfig middle = {}) {
  RedNetOptions o;
  o.depth = depth;
  o.stem = stem;
  o.middle = middle;
  return build_rednet(o);
}

}  // namespace

std::vector<ProfileTarget> depth_targets() {
  const std::size_t depths[] = {26, 38, 50, 101, 152};
  const double red_params[] = {9.2, 12.4, 15.5, 25.6, 34.0};
  const double red_macs[] = {1.7, 2.2, 2.7, 4.7, 6.8};
  const double res_params[] = {13.7, 19.6, 25.6, 44.6, 60.2};
  const double res_macs[] = {2.4, 3.2, 4.1, 7.9, 11.6};
  std::vector<ProfileTarget> out;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::string d = std::to_string(depths[i]);
    out.push_back({"RedNet-" + d, rednet(depths[i], StemVariant::kInvolution), red_params[i], red_macs[i]});
    out.push_back({"ResNet-" + d, build_resnet(depths[i]), res_params[i], res_macs[i]});
  }
  return out;
}

std::vector<ProfileTarget> ablation_targets() {
  std::vector<ProfileTarget> out;
  const std::size_t kernels[] = {3, 5, 7, 9};
  const double k_params[] = {14.7, 15.1, 15.5, 16.2};
  const double k_macs[] = {2.4, 2.5, 2.6, 2.7};
  for (std::size_t i = 0; i < 4; ++i) {
    MiddleOpConfig m;
    m.kernel = kernels[i];
    out.push_back({"RedNet-50 conv7 K=" + std::to_string(kernels[i]), rednet(50, StemVariant::kConv7, m), k_params[i],
                   k_macs[i]});
  }
  const std::size_t group_channels[] = {1, 4, 16, 0};
  const double g_params[] = {30.2, 18.5, 15.5, 14.6};
  const double g_macs[] = {5.0, 3.0, 2.6, 2.4};
  for (std::size_t i = 0; i < 4; ++i) {
    MiddleOpConfig m;
    m.group_channels = group_channels[i];
    const std::string gc = group_channels[i] ? std::to_string(group_channels[i]) : "C";
    out.push_back({"RedNet-50 conv7 group_channels=" + gc, rednet(50, StemVariant::kConv7, m), g_params[i], g_macs[i]});
  }
  MiddleOpConfig single;
  single.form = KernelForm::kSingleLinear;
  out.push_back({"RedNet-50 conv7 form=W", rednet(50, StemVariant::kConv7, single), 18.1, 3.0});
  const std::size_t reductions[] = {1, 4, 16};
  const double r_params[] = {19.4, 15.5, 14.6};
  const double r_macs[] = {3.2, 2.6, 2.4};
  for (std::size_t i = 0; i < 3; ++i) {
    MiddleOpConfig m;
    m.reduction = reductions[i];
    out.push_back({"RedNet-50 conv7 form=W1(W0) r=" + std::to_string(reductions[i]), rednet(50, StemVariant::kConv7, m),
                   r_params[i], r_macs[i]});
  }
  return out;
}

std::vector<ProfileTarget> all_targets() {
  std::vector<ProfileTarget> out = depth_targets();
  for (ProfileTarget& t : ablation_targets()) out.push_back(std::move(t));
  return out;
}

std::optional<ProfileTarget> find_target(const ArchSpec& arch) {
  const std::string key = describe(arch);
  for (ProfileTarget& t : all_targets()) {
    if (describe(t.arch) == key) return t;
  }
  return std::nullopt;
}

ProfileCheck check_target(const ProfileTarget& target, const Tolerance& tolerance, MacConvention convention) {
  const CostReport report = cost_report(target.arch, 224, convention);
  ProfileCheck c;
  c.label = target.label;
  c.params = report.total_params;
  c.macs = report.total_macs;
  c.params_target_m = target.params_m;
  c.macs_target_g = target.macs_g;
  c.params_err_pct = (static_cast<double>(c.params) / 1e6 - target.params_m) / target.params_m * 100.0;
  c.macs_err_pct = (static_cast<double>(c.macs) / 1e9 - target.macs_g) / target.macs_g * 100.0;
  c.params_ok = std::abs(c.params_err_pct) <= tolerance.params_pct;
  c.macs_ok = std::abs(c.macs_err_pct) <= tolerance.macs_pct;
  return c;
}

void write_profile_checks_csv(std::ostream& os, const std::vector<ProfileCheck>& checks) {
  os << "label,params,macs,params_target_m,macs_target_g,params_err_pct,macs_err_pct,pass\n";
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::fixed << std::setprecision(3);
  for (const ProfileCheck& c : checks) {
    os << '"' << c.label << "\"," << c.params << ',' << c.macs << ',' << c.params_target_m << ',' << c.macs_target_g
       << ',' << c.params_err_pct << ',' << c.macs_err_pct << ',' << (c.pass() ? "true" : "false") << '\n';
  }
  os.flags(flags);
  os.precision(prec);
}

}  // namespace involution::harness
