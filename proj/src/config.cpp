#include "augfpn/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace augfpn {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer value for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean value for " + key + ": '" + v + "'");
}

void range_check(const std::string& key, double v, double lo, double hi) {
  if (!(v >= lo && v <= hi)) {
    throw ConfigError("config: " + key + " = " + std::to_string(v) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

void RunConfig::validate() const {
  range_check("image_h", image_h, 32, 2048);
  range_check("image_w", image_w, 32, 2048);
  if (image_h % 32 != 0 || image_w % 32 != 0) {
    throw ConfigError("config: image dims must be divisible by 32 (the coarsest stride)");
  }
  for (auto c : channels) range_check("channels", static_cast<double>(c), 1, 2048);
  range_check("lambda", lambda, 0.0, 10.0);
  range_check("beta", beta, 0.0, 10.0);
  range_check("learning_rate", learning_rate, 1e-8, 1.0);
  range_check("momentum", momentum, 0.0, 0.999);
  range_check("clip_grad_norm", clip_grad_norm, 0.0, 1e6);
  range_check("steps", steps, 1, 1000000);
  if (precision != 32 && precision != 64) throw ConfigError("config: precision must be 32 or 64");
  range_check("classes", classes, 1, 64);
  range_check("scenes", scenes, 1, 100000);
  range_check("objects_per_scene", objects_per_scene, 1, 8);
  range_check("negatives_per_positive", negatives_per_positive, 0, 16);
  range_check("head_hidden", static_cast<double>(head_hidden), 1, 4096);
  range_check("acf_reduction", acf_reduction, 1, 64);
  rfa_config().validate();
  srs_config().validate();
}

RfaConfig RunConfig::rfa_config() const {
  RfaConfig cfg;
  cfg.alphas = alphas;
  cfg.pooling_kind = rfa_pooling;
  cfg.fusion_kind = rfa_fusion;
  cfg.psp_sizes = psp_sizes;
  cfg.asf_norm = asf_norm;
  return cfg;
}

RoiFusionConfig RunConfig::srs_config() const {
  RoiFusionConfig cfg;
  cfg.mode = srs_mode;
  cfg.acf_reduction = acf_reduction;
  return cfg;
}

std::string to_string(CsMode mode) {
  switch (mode) {
    case CsMode::none: return "none";
    case CsMode::single_level: return "single_level";
    case CsMode::all_level: return "all_level";
  }
  return "?";
}

std::string to_string(RoiFusionMode mode) {
  switch (mode) {
    case RoiFusionMode::heuristic_single_level: return "heuristic";
    case RoiFusionMode::sum: return "sum";
    case RoiFusionMode::max: return "max";
    case RoiFusionMode::acf: return "acf";
    case RoiFusionMode::asf: return "asf";
  }
  return "?";
}

std::string to_string(PoolingKind kind) {
  switch (kind) {
    case PoolingKind::ratio_invariant_avg: return "ratio_invariant_avg";
    case PoolingKind::global_avg: return "global_avg";
    case PoolingKind::global_max: return "global_max";
    case PoolingKind::fixed_psp: return "fixed_psp";
  }
  return "?";
}

std::string to_string(FusionKind kind) {
  return kind == FusionKind::asf ? "asf" : "sum";
}

std::string to_string(AsfNorm norm) {
  return norm == AsfNorm::softmax ? "softmax" : "sigmoid";
}

namespace {

CsMode parse_cs_mode(const std::string& v) {
  if (v == "none") return CsMode::none;
  if (v == "single_level") return CsMode::single_level;
  if (v == "all_level") return CsMode::all_level;
  throw ConfigError("config: unknown cs_mode '" + v + "'");
}

RoiFusionMode parse_srs_mode(const std::string& v) {
  if (v == "heuristic") return RoiFusionMode::heuristic_single_level;
  if (v == "sum") return RoiFusionMode::sum;
  if (v == "max") return RoiFusionMode::max;
  if (v == "acf") return RoiFusionMode::acf;
  if (v == "asf") return RoiFusionMode::asf;
  throw ConfigError("config: unknown srs_mode '" + v + "'");
}

PoolingKind parse_pooling(const std::string& v) {
  if (v == "ratio_invariant_avg") return PoolingKind::ratio_invariant_avg;
  if (v == "global_avg") return PoolingKind::global_avg;
  if (v == "global_max") return PoolingKind::global_max;
  if (v == "fixed_psp") return PoolingKind::fixed_psp;
  throw ConfigError("config: unknown rfa_pooling '" + v + "'");
}

}  // namespace

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "image_h") {
      cfg.image_h = static_cast<int>(parse_int(key, value));
    } else if (key == "image_w") {
      cfg.image_w = static_cast<int>(parse_int(key, value));
    } else if (key == "channels_c2") {
      cfg.channels[0] = parse_int(key, value);
    } else if (key == "channels_c3") {
      cfg.channels[1] = parse_int(key, value);
    } else if (key == "channels_c4") {
      cfg.channels[2] = parse_int(key, value);
    } else if (key == "channels_c5") {
      cfg.channels[3] = parse_int(key, value);
    } else if (key == "alphas") {
      cfg.alphas.clear();
      for (const auto& a : split_commas(value)) cfg.alphas.push_back(parse_double(key, a));
    } else if (key == "lambda") {
      cfg.lambda = parse_double(key, value);
    } else if (key == "beta") {
      cfg.beta = parse_double(key, value);
    } else if (key == "cs_mode") {
      cfg.cs_mode = parse_cs_mode(value);
    } else if (key == "rfa") {
      cfg.rfa_enabled = parse_bool(key, value);
    } else if (key == "rfa_pooling") {
      cfg.rfa_pooling = parse_pooling(value);
    } else if (key == "rfa_fusion") {
      if (value != "asf" && value != "sum") throw ConfigError("config: unknown rfa_fusion '" + value + "'");
      cfg.rfa_fusion = value == "asf" ? FusionKind::asf : FusionKind::sum;
    } else if (key == "asf_norm") {
      if (value != "softmax" && value != "sigmoid") throw ConfigError("config: unknown asf_norm '" + value + "'");
      cfg.asf_norm = value == "softmax" ? AsfNorm::softmax : AsfNorm::sigmoid;
    } else if (key == "psp_sizes") {
      cfg.psp_sizes.clear();
      for (const auto& s : split_commas(value)) {
        const int n = static_cast<int>(parse_int(key, s));
        cfg.psp_sizes.emplace_back(n, n);
      }
    } else if (key == "srs_mode") {
      cfg.srs_mode = parse_srs_mode(value);
    } else if (key == "acf_reduction") {
      cfg.acf_reduction = static_cast<int>(parse_int(key, value));
    } else if (key == "learning_rate") {
      cfg.learning_rate = parse_double(key, value);
    } else if (key == "momentum") {
      cfg.momentum = parse_double(key, value);
    } else if (key == "clip_grad_norm") {
      cfg.clip_grad_norm = parse_double(key, value);
    } else if (key == "steps") {
      cfg.steps = static_cast<int>(parse_int(key, value));
    } else if (key == "precision") {
      cfg.precision = static_cast<int>(parse_int(key, value));
    } else if (key == "classes") {
      cfg.classes = static_cast<int>(parse_int(key, value));
    } else if (key == "scenes") {
      cfg.scenes = static_cast<int>(parse_int(key, value));
    } else if (key == "objects_per_scene") {
      cfg.objects_per_scene = static_cast<int>(parse_int(key, value));
    } else if (key == "negatives_per_positive") {
      cfg.negatives_per_positive = static_cast<int>(parse_int(key, value));
    } else if (key == "head_hidden") {
      cfg.head_hidden = parse_int(key, value);
    } else {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config_string(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  return parse_config(in);
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "seed = " << cfg.seed << "\n";
  os << "image_h = " << cfg.image_h << "\n";
  os << "image_w = " << cfg.image_w << "\n";
  os << "channels_c2 = " << cfg.channels[0] << "\n";
  os << "channels_c3 = " << cfg.channels[1] << "\n";
  os << "channels_c4 = " << cfg.channels[2] << "\n";
  os << "channels_c5 = " << cfg.channels[3] << "\n";
  os << "alphas = ";
  for (std::size_t i = 0; i < cfg.alphas.size(); ++i) os << (i ? "," : "") << num(cfg.alphas[i]);
  os << "\n";
  os << "lambda = " << num(cfg.lambda) << "\n";
  os << "beta = " << num(cfg.beta) << "\n";
  os << "cs_mode = " << to_string(cfg.cs_mode) << "\n";
  os << "rfa = " << (cfg.rfa_enabled ? "on" : "off") << "\n";
  os << "rfa_pooling = " << to_string(cfg.rfa_pooling) << "\n";
  os << "rfa_fusion = " << to_string(cfg.rfa_fusion) << "\n";
  os << "asf_norm = " << to_string(cfg.asf_norm) << "\n";
  os << "psp_sizes = ";
  for (std::size_t i = 0; i < cfg.psp_sizes.size(); ++i) {
    os << (i ? "," : "") << cfg.psp_sizes[i].first;
  }
  os << "\n";
  os << "srs_mode = " << to_string(cfg.srs_mode) << "\n";
  os << "acf_reduction = " << cfg.acf_reduction << "\n";
  os << "learning_rate = " << num(cfg.learning_rate) << "\n";
  os << "momentum = " << num(cfg.momentum) << "\n";
  os << "clip_grad_norm = " << num(cfg.clip_grad_norm) << "\n";
  os << "steps = " << cfg.steps << "\n";
  os << "precision = " << cfg.precision << "\n";
  os << "classes = " << cfg.classes << "\n";
  os << "scenes = " << cfg.scenes << "\n";
  os << "objects_per_scene = " << cfg.objects_per_scene << "\n";
  os << "negatives_per_positive = " << cfg.negatives_per_positive << "\n";
  os << "head_hidden = " << cfg.head_hidden << "\n";
  return os.str();
}

}  // namespace augfpn
