#include "augfpn/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace augfpn {

namespace fs = std::filesystem;

namespace {

template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(const ParamList<T>& params, double lr, double momentum)
      : params_(params), lr_(static_cast<T>(lr)), momentum_(static_cast<T>(momentum)) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i].assign(params[i].second->data.size(), T(0));
    }
  }

  // Global-norm gradient clip, then v <- momentum*v + g;  p <- p - lr*v.
  void step(double clip_norm) {
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, p] : params_) {
        for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
      }
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) {
        const T f = static_cast<T>(clip_norm / norm);
        for (const auto& [name, p] : params_) {
          for (auto& g : p->grad) g *= f;
        }
      }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i].second;
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = momentum_ * v[j] + p.grad[j];
        p.data[j] -= lr_ * v[j];
      }
    }
  }

 private:
  ParamList<T> params_;
  T lr_, momentum_;
  std::vector<std::vector<T>> velocity_;
};

template <typename T>
RatioMatrix aggregate_ratio_stats(const Model<T>& model, const RunConfig& cfg,
                                  const std::vector<SyntheticScene<T>>& scenes) {
  const RfaConfig rfa = cfg.rfa_config();
  const RoiFusionConfig srs = cfg.srs_config();
  std::array<std::array<double, 4>, 4> sums{};
  RatioMatrix m;
  for (const auto& scene : scenes) {
    auto pyr = build_pyramid<T>(nullptr, scene.hierarchy, model.pyramid, rfa, cfg.rfa_enabled);
    for (const auto& roi : scene.proposals) {
      const int row = assign_level(roi) - 2;
      const auto frac = asf_weight_fractions(pyr, roi, srs, model.srs.asf);
      for (std::size_t k = 0; k < 4; ++k) sums[static_cast<std::size_t>(row)][k] += frac[k];
      ++m.counts[static_cast<std::size_t>(row)];
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    if (m.counts[r] == 0) continue;
    std::array<double, 4> row{};
    for (std::size_t k = 0; k < 4; ++k) row[k] = sums[r][k] / static_cast<double>(m.counts[r]);
    m.rows[r] = row;
  }
  return m;
}

template <typename T>
TrainResult train_toy_impl(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto model = make_model<T>(cfg);
  auto params = collect_params(model);
  SgdMomentum<T> sgd(params, cfg.learning_rate, cfg.momentum);
  auto scenes = make_scenes<T>(cfg);

  const RfaConfig rfa = cfg.rfa_config();
  const RoiFusionConfig srs = cfg.srs_config();

  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto& scene = scenes[static_cast<std::size_t>(step) % scenes.size()];
    Tape<T> tape;
    auto pyr = build_pyramid(&tape, scene.hierarchy, model.pyramid, rfa, cfg.rfa_enabled);
    auto loss = consistent_supervision_loss(&tape, pyr, scene.proposals, cfg.cs_mode, cfg.lambda,
                                            cfg.beta, model.aux_head, model.final_head, srs,
                                            model.srs);
    if (!std::isfinite(loss.breakdown.total)) {
      throw UsageError("train_toy: loss diverged at step " + std::to_string(step));
    }
    backward(tape, loss.total);
    sgd.step(cfg.clip_grad_norm);
    zero_all_grads(model);
    result.losses.push_back(loss.breakdown);
  }

  result.ratios = aggregate_ratio_stats(model, cfg, scenes);

  result.loss_csv_path = (fs::path(out_dir) / "loss.csv").string();
  result.ratio_csv_path = (fs::path(out_dir) / "ratios.csv").string();
  result.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();
  std::ofstream(result.loss_csv_path, std::ios::binary) << format_loss_csv(result.losses);
  std::ofstream(result.ratio_csv_path, std::ios::binary) << format_ratio_csv(result.ratios);
  save_param_dir(params, result.checkpoint_dir);
  std::ofstream(fs::path(result.checkpoint_dir) / "config.txt") << serialize_config(cfg);
  return result;
}

template <typename T>
void emit_stats_impl(const RunConfig& cfg, const std::string& checkpoint_dir,
                     const std::string& roi_file, const std::string& out_csv) {
  auto model = make_model<T>(cfg);
  load_param_dir(collect_params(model), checkpoint_dir);
  auto rois = load_roi_file(roi_file);
  auto scenes = make_scenes<T>(cfg);

  // Group the RoIs by the scene their batch_index points at.
  std::map<int, std::vector<RoIBox>> by_scene;
  for (auto roi : rois) {
    if (roi.batch_index < 0 || roi.batch_index >= static_cast<int>(scenes.size())) {
      throw UsageError("stats: roi batch_index " + std::to_string(roi.batch_index) +
                       " has no matching scene (have " + std::to_string(scenes.size()) + ")");
    }
    const int scene_idx = roi.batch_index;
    roi.batch_index = 0;  // scene tensors are single-image batches
    by_scene[scene_idx].push_back(roi);
  }

  const RfaConfig rfa = cfg.rfa_config();
  const RoiFusionConfig srs = cfg.srs_config();
  std::array<std::array<double, 4>, 4> sums{};
  RatioMatrix m;
  for (const auto& [scene_idx, scene_rois] : by_scene) {
    auto pyr = build_pyramid<T>(nullptr, scenes[static_cast<std::size_t>(scene_idx)].hierarchy,
                                model.pyramid, rfa, cfg.rfa_enabled);
    for (const auto& roi : scene_rois) {
      const int row = assign_level(roi) - 2;
      const auto frac = asf_weight_fractions(pyr, roi, srs, model.srs.asf);
      for (std::size_t k = 0; k < 4; ++k) sums[static_cast<std::size_t>(row)][k] += frac[k];
      ++m.counts[static_cast<std::size_t>(row)];
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    if (m.counts[r] == 0) continue;
    std::array<double, 4> row{};
    for (std::size_t k = 0; k < 4; ++k) row[k] = sums[r][k] / static_cast<double>(m.counts[r]);
    m.rows[r] = row;
  }
  std::ofstream(out_csv, std::ios::binary) << format_ratio_csv(m);
}

template <typename T>
void export_artifacts_impl(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto scene = make_scene<T>(cfg, 0);
  validate_scene(scene);
  for (int l = 0; l < 4; ++l) {
    save_tensor(*scene.hierarchy.c[static_cast<std::size_t>(l)],
                (fs::path(out_dir) / ("c" + std::to_string(l + 2) + ".aft")).string());
  }
  save_roi_file(scene.proposals, (fs::path(out_dir) / "rois.txt").string());

  auto model = make_model<T>(cfg);
  save_param_dir(collect_params(model), (fs::path(out_dir) / "params").string());
  auto pyr = build_pyramid<T>(nullptr, scene.hierarchy, model.pyramid, cfg.rfa_config(),
                              cfg.rfa_enabled);
  for (int l = 0; l < 4; ++l) {
    save_tensor(*pyr.p[static_cast<std::size_t>(l)],
                (fs::path(out_dir) / ("p" + std::to_string(l + 2) + ".aft")).string());
  }
  std::ofstream(fs::path(out_dir) / "config.txt") << serialize_config(cfg);
}

}  // namespace

TrainResult train_toy(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  return cfg.precision == 64 ? train_toy_impl<double>(cfg, out_dir)
                             : train_toy_impl<float>(cfg, out_dir);
}

void emit_stats(const std::string& checkpoint_dir, const std::string& roi_file,
                const std::string& out_csv) {
  const fs::path config_path = fs::path(checkpoint_dir) / "config.txt";
  if (!fs::exists(config_path)) {
    throw UsageError("stats: no checkpoint at " + checkpoint_dir + " (missing config.txt)");
  }
  const RunConfig cfg = load_config_file(config_path.string());
  if (cfg.precision == 64) {
    emit_stats_impl<double>(cfg, checkpoint_dir, roi_file, out_csv);
  } else {
    emit_stats_impl<float>(cfg, checkpoint_dir, roi_file, out_csv);
  }
}

void export_artifacts(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.precision == 64) {
    export_artifacts_impl<double>(cfg, out_dir);
  } else {
    export_artifacts_impl<float>(cfg, out_dir);
  }
}

std::string format_loss_csv(const std::vector<LossBreakdown>& losses) {
  std::ostringstream os;
  os << "step,l_cls_m,l_loc_m,l_cls_p,l_loc_p,total\r\n";
  char buf[192];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto& l = losses[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\r\n", i, l.l_cls_m,
                  l.l_loc_m, l.l_cls_p, l.l_loc_p, l.total);
    os << buf;
  }
  return os.str();
}

std::string format_ratio_csv(const RatioMatrix& m) {
  std::ostringstream os;
  os << "assigned,count,P2,P3,P4,P5\r\n";
  char buf[192];
  for (std::size_t r = 0; r < 4; ++r) {
    if (m.rows[r]) {
      const auto& row = *m.rows[r];
      std::snprintf(buf, sizeof(buf), "P%zu,%d,%.9g,%.9g,%.9g,%.9g\r\n", r + 2, m.counts[r],
                    row[0], row[1], row[2], row[3]);
    } else {
      std::snprintf(buf, sizeof(buf), "P%zu,0,,,,\r\n", r + 2);
    }
    os << buf;
  }
  return os.str();
}

}  // namespace augfpn
