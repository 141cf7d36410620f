#ifndef AUGFPN_CONFIG_HPP
#define AUGFPN_CONFIG_HPP

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "augfpn/pyramid.hpp"
#include "augfpn/roi.hpp"
#include "augfpn/supervision.hpp"

namespace augfpn {

/// Flat, schema-validated run configuration. Serialized as `key = value`
/// lines with '#' comments (see README for the full key list).
struct RunConfig {
  std::uint64_t seed = 42;
  int image_h = 64;
  int image_w = 64;
  std::array<std::int64_t, 4> channels = {32, 64, 128, 256};  // C2..C5
  std::vector<double> alphas = {0.1, 0.2, 0.3};
  double lambda = 0.25;
  double beta = 1.0;
  CsMode cs_mode = CsMode::all_level;
  bool rfa_enabled = true;
  PoolingKind rfa_pooling = PoolingKind::ratio_invariant_avg;
  FusionKind rfa_fusion = FusionKind::asf;
  AsfNorm asf_norm = AsfNorm::softmax;  // sigmoid variant is experimental
  std::vector<std::pair<int, int>> psp_sizes = {{1, 1}, {2, 2}, {3, 3}};
  RoiFusionMode srs_mode = RoiFusionMode::asf;
  int acf_reduction = 4;
  double learning_rate = 2e-4;
  double momentum = 0.9;
  double clip_grad_norm = 10.0;  // 0 disables clipping
  int steps = 2000;
  int precision = 32;  // 32 or 64
  int classes = 2;     // foreground classes; background is class 0
  int scenes = 200;
  int objects_per_scene = 1;
  int negatives_per_positive = 3;
  std::int64_t head_hidden = 256;  // 1024 at paper scale; 256 keeps toy runs fast

  void validate() const;
  RfaConfig rfa_config() const;
  RoiFusionConfig srs_config() const;
};

/// Parses `key = value` lines; unknown keys and out-of-range values throw
/// ConfigError. Missing keys keep their defaults.
RunConfig parse_config(std::istream& in);
RunConfig parse_config_string(const std::string& text);
RunConfig load_config_file(const std::string& path);

/// Round-trippable serialization of every field.
std::string serialize_config(const RunConfig& cfg);

std::string to_string(CsMode mode);
std::string to_string(RoiFusionMode mode);
std::string to_string(PoolingKind kind);
std::string to_string(FusionKind kind);
std::string to_string(AsfNorm norm);

}  // namespace augfpn

#endif  // AUGFPN_CONFIG_HPP
