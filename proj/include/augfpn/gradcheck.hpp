#ifndef AUGFPN_GRADCHECK_HPP
#define AUGFPN_GRADCHECK_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace augfpn {

/// |a - b| / max(|a|, |b|, 1e-8)
double fd_relative_error(double a, double b);

struct GradCheckCase {
  std::string name;
  double worst_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  bool all_pass = true;

  const GradCheckCase* first_failure() const {
    for (const auto& c : cases) {
      if (!c.pass) return &c;
    }
    return nullptr;
  }
};

/// Central finite-difference checks (h = 1e-5, 64-bit) over every
/// differentiable kernel, the fusion modules, the heads and the fully
/// composed training loss on a tiny scene. Per-op tolerance 1e-4,
/// end-to-end tolerance 1e-3.
GradCheckReport gradcheck_all(std::uint64_t seed);

}  // namespace augfpn

#endif  // AUGFPN_GRADCHECK_HPP
