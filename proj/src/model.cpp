#include "augfpn/model.hpp"

namespace augfpn {

template <typename T>
Model<T> make_model(const RunConfig& cfg) {
  cfg.validate();
  std::uint64_t s = cfg.seed ^ 0x517cc1b727220a95ULL;
  Xoshiro256 rng(splitmix64(s));
  Model<T> m;
  m.pyramid = make_pyramid_params<T>(cfg.channels, cfg.rfa_config(), rng);
  m.srs = make_srs_params<T>(cfg.srs_config(), rng);
  const std::int64_t in_features =
      static_cast<std::int64_t>(kPyramidChannels) * 7 * 7;
  m.aux_head = make_head_params<T>(in_features, cfg.head_hidden, cfg.classes + 1, rng);
  m.final_head = make_head_params<T>(in_features, cfg.head_hidden, cfg.classes + 1, rng);
  return m;
}

namespace {

template <typename T>
void push_conv(ParamList<T>& out, const std::string& name, const Conv2dParams<T>& conv) {
  out.emplace_back(name + ".w", conv.w);
  out.emplace_back(name + ".b", conv.b);
}

template <typename T>
void push_asf(ParamList<T>& out, const std::string& name, const AsfParams<T>& asf) {
  push_conv(out, name + ".reduce", asf.reduce);
  push_conv(out, name + ".logits", asf.logits);
}

template <typename T>
void push_head(ParamList<T>& out, const std::string& name, const HeadParams<T>& head) {
  out.emplace_back(name + ".fc1.w", head.fc1_w);
  out.emplace_back(name + ".fc1.b", head.fc1_b);
  out.emplace_back(name + ".fc2.w", head.fc2_w);
  out.emplace_back(name + ".fc2.b", head.fc2_b);
  out.emplace_back(name + ".cls.w", head.cls_w);
  out.emplace_back(name + ".cls.b", head.cls_b);
  out.emplace_back(name + ".reg.w", head.reg_w);
  out.emplace_back(name + ".reg.b", head.reg_b);
}

}  // namespace

template <typename T>
ParamList<T> collect_params(const Model<T>& model) {
  ParamList<T> out;
  for (int l = 0; l < 4; ++l) {
    push_conv(out, "pyramid.lateral" + std::to_string(l + 2),
              model.pyramid.lateral[static_cast<std::size_t>(l)]);
  }
  for (int l = 0; l < 4; ++l) {
    push_conv(out, "pyramid.output" + std::to_string(l + 2),
              model.pyramid.output[static_cast<std::size_t>(l)]);
  }
  for (std::size_t k = 0; k < model.pyramid.rfa_reduce.size(); ++k) {
    push_conv(out, "rfa.reduce" + std::to_string(k), model.pyramid.rfa_reduce[k]);
  }
  push_asf(out, "rfa.asf", model.pyramid.rfa_asf);
  push_asf(out, "srs.asf", model.srs.asf);
  out.emplace_back("srs.acf.fc1.w", model.srs.acf.fc1_w);
  out.emplace_back("srs.acf.fc1.b", model.srs.acf.fc1_b);
  out.emplace_back("srs.acf.fc2.w", model.srs.acf.fc2_w);
  out.emplace_back("srs.acf.fc2.b", model.srs.acf.fc2_b);
  push_head(out, "head.aux", model.aux_head);
  push_head(out, "head.final", model.final_head);
  return out;
}

template <typename T>
void zero_all_grads(const Model<T>& model) {
  for (auto& [name, tensor] : collect_params(model)) tensor->zero_grad();
}

template Model<float> make_model<float>(const RunConfig&);
template Model<double> make_model<double>(const RunConfig&);
template ParamList<float> collect_params<float>(const Model<float>&);
template ParamList<double> collect_params<double>(const Model<double>&);
template void zero_all_grads<float>(const Model<float>&);
template void zero_all_grads<double>(const Model<double>&);

}  // namespace augfpn
