#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "involution/rednet.hpp"

namespace involution::harness {

/// A published (params, MACs) pair for one architecture, in millions and
/// billions.
struct ProfileTarget {
  std::string label;
  ArchSpec arch;
  double params_m = 0.0;
  double macs_g = 0.0;
};

/// Architecture rows with published totals: the depth family of RedNet and
/// ResNet, then the conv7-stem ablations over kernel size, group channels
/// and generation function form.
std::vector<ProfileTarget> depth_targets();
std::vector<ProfileTarget> ablation_targets();
std::vector<ProfileTarget> all_targets();

/// The published row describing the same architecture, if any.
std::optional<ProfileTarget> find_target(const ArchSpec& arch);

struct Tolerance {
  double params_pct = 2.0;
  double macs_pct = 3.0;
};

struct ProfileCheck {
  std::string label;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  double params_target_m = 0.0;
  double macs_target_g = 0.0;
  double params_err_pct = 0.0;  // signed, relative to the target
  double macs_err_pct = 0.0;
  bool params_ok = false;
  bool macs_ok = false;

  bool pass() const { return params_ok && macs_ok; }
};

ProfileCheck check_target(const ProfileTarget& target, const Tolerance& tolerance,
                          MacConvention convention = MacConvention::kFramework);

/// label,params,macs,params_target_m,macs_target_g,params_err_pct,macs_err_pct,pass
void write_profile_checks_csv(std::ostream& os, const std::vector<ProfileCheck>& checks);

}  // namespace involution::harness
