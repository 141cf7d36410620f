#ifndef AUGFPN_TRAIN_HPP
#define AUGFPN_TRAIN_HPP

#include <string>
#include <vector>

#include "augfpn/model.hpp"
#include "augfpn/scene.hpp"

namespace augfpn {

struct TrainResult {
  std::vector<LossBreakdown> losses;  // one row per step
  RatioMatrix ratios;
  std::string loss_csv_path;
  std::string ratio_csv_path;
  std::string checkpoint_dir;
};

/// Deterministic SGD-with-momentum loop over the synthetic scene stream.
/// Writes loss.csv, ratios.csv and an AFT1 checkpoint (with the config) into
/// `out_dir`. Throws UsageError naming the step if the loss goes non-finite.
/// Dispatches on cfg.precision.
TrainResult train_toy(const RunConfig& cfg, const std::string& out_dir);

/// Recomputes the 4x4 weight-ratio matrix from a trained checkpoint and an
/// RoI file whose batch_index column selects scenes.
void emit_stats(const std::string& checkpoint_dir, const std::string& roi_file,
                const std::string& out_csv);

/// Writes one scene's C2..C5 tensors, its proposal list, the freshly
/// initialized parameter directory and the resulting P2..P5 maps — every file
/// format another component might consume.
void export_artifacts(const RunConfig& cfg, const std::string& out_dir);

/// RFC-4180 rows: step,l_cls_m,l_loc_m,l_cls_p,l_loc_p,total
std::string format_loss_csv(const std::vector<LossBreakdown>& losses);
/// RFC-4180 rows: assigned,count,P2,P3,P4,P5 (absent rows keep empty cells)
std::string format_ratio_csv(const RatioMatrix& m);

}  // namespace augfpn

#endif  // AUGFPN_TRAIN_HPP
