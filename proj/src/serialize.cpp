#include "augfpn/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace augfpn {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'T', '1'};

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename S>
void write_scalar_le(std::ostream& out, S v) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  if constexpr (sizeof(S) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64_le(out, bits);
  }
}

template <typename S>
S read_scalar_le(std::istream& in) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  if constexpr (sizeof(S) == 4) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    S v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    const std::uint64_t bits = read_u64_le(in);
    S v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace

template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write tensor file: " + path);
  out.write(kMagic, 4);
  const std::uint8_t dtype = dtype_code<T>();
  out.put(static_cast<char>(dtype));
  out.put(static_cast<char>(t.dims.size()));
  for (std::int64_t d : t.dims) write_u64_le(out, static_cast<std::uint64_t>(d));
  for (T v : t.data) write_scalar_le(out, v);
  if (!out) throw UsageError("short write on tensor file: " + path);
}

template <typename T>
TensorPtr<T> load_tensor(const std::string& path, bool requires_grad) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open tensor file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw UsageError("not an AFT1 tensor file: " + path);
  }
  const int dtype = in.get();
  const int ndim = in.get();
  if (dtype != 0 && dtype != 1) throw UsageError("unknown dtype in " + path);
  if (ndim < 1 || ndim > 8) throw UsageError("bad rank in " + path);
  std::vector<std::int64_t> dims(static_cast<std::size_t>(ndim));
  for (auto& d : dims) {
    d = static_cast<std::int64_t>(read_u64_le(in));
    if (d <= 0) throw UsageError("bad dimension in " + path);
  }
  const std::int64_t n = shape_numel(dims);
  if (n > (std::int64_t(1) << 32)) throw UsageError("tensor too large in " + path);
  std::vector<T> data(static_cast<std::size_t>(n));
  if (dtype == 0) {
    for (auto& v : data) v = static_cast<T>(read_scalar_le<float>(in));
  } else {
    for (auto& v : data) v = static_cast<T>(read_scalar_le<double>(in));
  }
  if (!in) throw UsageError("truncated tensor file: " + path);
  return make_tensor<T>(std::move(dims), std::move(data), requires_grad);
}

template <typename T>
void save_param_dir(const ParamList<T>& params, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw UsageError("cannot write manifest in " + dir);
  int index = 0;
  for (const auto& [name, tensor] : params) {
    char file[32];
    std::snprintf(file, sizeof(file), "p%04d.aft", index++);
    save_tensor(*tensor, (fs::path(dir) / file).string());
    manifest << name << " = " << file << "\n";
  }
}

template <typename T>
void load_param_dir(const ParamList<T>& params, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw UsageError("missing manifest.txt in " + dir);
  std::map<std::string, std::string> files;
  std::string line;
  while (std::getline(manifest, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    files[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const auto& [name, tensor] : params) {
    const auto it = files.find(name);
    if (it == files.end()) throw UsageError("parameter missing from manifest: " + name);
    auto loaded = load_tensor<T>((fs::path(dir) / it->second).string());
    if (loaded->dims != tensor->dims) {
      throw UsageError("parameter " + name + " has shape " + shape_string(loaded->dims) +
                       ", expected " + shape_string(tensor->dims));
    }
    tensor->data = std::move(loaded->data);
  }
}

template void save_tensor<float>(const Tensor<float>&, const std::string&);
template void save_tensor<double>(const Tensor<double>&, const std::string&);
template TensorPtr<float> load_tensor<float>(const std::string&, bool);
template TensorPtr<double> load_tensor<double>(const std::string&, bool);
template void save_param_dir<float>(const ParamList<float>&, const std::string&);
template void save_param_dir<double>(const ParamList<double>&, const std::string&);
template void load_param_dir<float>(const ParamList<float>&, const std::string&);
template void load_param_dir<double>(const ParamList<double>&, const std::string&);

}  // namespace augfpn
