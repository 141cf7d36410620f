#ifndef AUGFPN_PARITY_HPP
#define AUGFPN_PARITY_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace augfpn {

struct ParityCheck {
  std::string name;
  bool pass = false;
  std::string detail;  // on mismatch: first divergent element and both values
};

struct ParityReport {
  std::vector<ParityCheck> checks;
  bool all_pass = true;
};

/// 64-bit parity battery:
///  - residual branch zeroed  -> pyramid bitwise equal to the straight-line
///    plain-FPN reference (and intentionally divergent once the branch is on)
///  - heuristic RoI selection -> bit-for-bit the baseline RoI path
///  - inference outputs byte-identical across arbitrary auxiliary-head states,
///    with kernel-invocation counts equal to the baseline head's
ParityReport parity_check(std::uint64_t seed);

}  // namespace augfpn

#endif  // AUGFPN_PARITY_HPP
