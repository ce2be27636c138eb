#include "textmamba/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace textmamba::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

void TensorStore::add(const std::string& name, const NdArray<double>& t) {
  if (contains(name)) throw std::invalid_argument("TensorStore: duplicate tensor '" + name + "'");
  tensors_.push_back({name, DType::f64, t});
}

void TensorStore::add(const std::string& name, const NdArray<float>& t) {
  if (contains(name)) throw std::invalid_argument("TensorStore: duplicate tensor '" + name + "'");
  tensors_.push_back({name, DType::f32, cast<double>(t)});
}

bool TensorStore::contains(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return true;
  return false;
}

const StoredTensor& TensorStore::get(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw InputError(name, "tensor not present");
}

namespace {

template <typename U>
void append_le(std::string& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(bytes, sizeof(U));
}

template <typename U>
U read_le(const char* p) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw WriteError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw WriteError("write to " + path.string() + " failed");
}

std::string read_file(const fs::path& path, const std::string& field) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError(field, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

void write_store(const fs::path& dir, const TensorStore& store) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw WriteError("cannot create directory " + dir.string() +
                     (ec ? ": " + ec.message() : std::string{}));
  }
  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["seed"] = store.seed;
  manifest["tensors"] = json::array();
  for (const auto& t : store.tensors()) {
    const std::string file = t.name + ".bin";
    std::string bytes;
    bytes.reserve(t.values.size() * dtype_size(t.dtype));
    for (double v : t.values.vec()) {
      if (t.dtype == DType::f32) {
        append_le(bytes, static_cast<float>(v));
      } else {
        append_le(bytes, v);
      }
    }
    write_file(dir / file, bytes);
    json entry;
    entry["name"] = t.name;
    entry["shape"] = t.values.shape();
    entry["dtype"] = dtype_name(t.dtype);
    entry["file"] = file;
    entry["byte_order"] = "little";
    entry["layout"] = "row-major";
    manifest["tensors"].push_back(entry);
  }
  write_file(dir / kManifestFile, manifest.dump(2) + "\n");
}

TensorStore read_store(const fs::path& dir) {
  const std::string text = read_file(dir / kManifestFile, "manifest");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError("manifest", std::string("not valid JSON: ") + e.what());
  }
  if (!manifest.is_object()) throw InputError("manifest", "top level must be an object");
  if (!manifest.contains("version") || manifest["version"] != kManifestVersion) {
    throw InputError("version", "expected " + std::to_string(kManifestVersion));
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw InputError("tensors", "missing or not an array");
  }
  TensorStore store;
  if (manifest.contains("seed")) {
    if (!manifest["seed"].is_number_unsigned()) throw InputError("seed", "must be an unsigned integer");
    store.seed = manifest["seed"].get<std::uint64_t>();
  }
  std::set<std::string> seen;
  for (const auto& e : manifest["tensors"]) {
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string()) {
      throw InputError("tensors", "entry without a string name");
    }
    const std::string name = e["name"].get<std::string>();
    if (!seen.insert(name).second) throw InputError(name, "duplicate tensor name");
    auto field = [&](const char* key) -> const json& {
      if (!e.contains(key)) throw InputError(name + "." + key, "missing");
      return e[key];
    };
    const json& js = field("shape");
    if (!js.is_array()) throw InputError(name + ".shape", "must be an array");
    Shape shape;
    for (const auto& d : js) {
      if (!d.is_number_unsigned()) throw InputError(name + ".shape", "extents must be unsigned");
      shape.push_back(d.get<std::size_t>());
    }
    const std::string dt = field("dtype").get<std::string>();
    if (dt != "f32" && dt != "f64") throw InputError(name + ".dtype", "'" + dt + "' unsupported");
    const DType dtype = dt == "f32" ? DType::f32 : DType::f64;
    if (field("byte_order") != "little") throw InputError(name + ".byte_order", "must be little");
    if (field("layout") != "row-major") throw InputError(name + ".layout", "must be row-major");
    const std::string file = field("file").get<std::string>();
    const std::string bytes = read_file(dir / file, name + ".file");
    const std::size_t numel = shape_numel(shape);
    if (bytes.size() != numel * dtype_size(dtype)) {
      throw InputError(name, file + " holds " + std::to_string(bytes.size()) + " bytes, shape " +
                                 shape_str(shape) + " " + dt + " needs " +
                                 std::to_string(numel * dtype_size(dtype)));
    }
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      values[i] = dtype == DType::f32
                      ? static_cast<double>(read_le<float>(bytes.data() + 4 * i))
                      : read_le<double>(bytes.data() + 8 * i);
    }
    NdArray<double> arr(shape, std::move(values));
    if (dtype == DType::f32) {
      store.add(name, cast<float>(arr));
    } else {
      store.add(name, arr);
    }
  }
  return store;
}

// ---- run config ---------------------------------------------------------------

namespace {

std::size_t get_size(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError(key, "must be a non-negative integer");
  return v.get<std::size_t>();
}

bool get_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key, "must be true or false");
  return v.get<bool>();
}

double get_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key, "must be a number");
  return v.get<double>();
}

std::string get_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key, "must be a string");
  return v.get<std::string>();
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config", "must be a flat JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "height") c.height = get_size(v, key);
    else if (key == "width") c.width = get_size(v, key);
    else if (key == "channels") c.channels = get_size(v, key);
    else if (key == "num_blocks") c.num_blocks = get_size(v, key);
    else if (key == "heads") c.heads = get_size(v, key);
    else if (key == "points") c.points = get_size(v, key);
    else if (key == "state_dim") c.state_dim = get_size(v, key);
    else if (key == "k") c.k = get_size(v, key);
    else if (key == "renormalize") c.renormalize = get_bool(v, key);
    else if (key == "num_proposals") c.num_proposals = get_size(v, key);
    else if (key == "num_points") c.num_points = get_size(v, key);
    else if (key == "decoder_layers") c.decoder_layers = get_size(v, key);
    else if (key == "lambda_cls") c.lambda_cls = get_double(v, key);
    else if (key == "lambda_seg") c.lambda_seg = get_double(v, key);
    else if (key == "lambda_reg") c.lambda_reg = get_double(v, key);
    else if (key == "dtype") c.dtype = get_string(v, key);
    else if (key == "seed") c.seed = get_size(v, key);
    else if (key == "enable_ss2d") c.enable_ss2d = get_bool(v, key);
    else if (key == "enable_dsffn") c.enable_dsffn = get_bool(v, key);
    else if (key == "enable_epem") c.enable_epem = get_bool(v, key);
    else if (key == "enable_topk") c.enable_topk = get_bool(v, key);
    else if (key == "share_scan_params") c.share_scan_params = get_bool(v, key);
    else if (key == "scan_kernel") {
      const std::string s = get_string(v, key);
      if (s == "parallel") c.scan_kernel = ScanKernel::parallel;
      else if (s == "sequential") c.scan_kernel = ScanKernel::sequential;
      else throw ConfigError(key, "'" + s + "' is not one of parallel, sequential");
    } else {
      throw ConfigError(key, "unknown key");
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["channels"] = c.channels;
  j["num_blocks"] = c.num_blocks;
  j["heads"] = c.heads;
  j["points"] = c.points;
  j["state_dim"] = c.state_dim;
  j["k"] = c.k;
  j["renormalize"] = c.renormalize;
  j["num_proposals"] = c.num_proposals;
  j["num_points"] = c.num_points;
  j["decoder_layers"] = c.decoder_layers;
  j["lambda_cls"] = c.lambda_cls;
  j["lambda_seg"] = c.lambda_seg;
  j["lambda_reg"] = c.lambda_reg;
  j["dtype"] = c.dtype;
  j["seed"] = c.seed;
  j["enable_ss2d"] = c.enable_ss2d;
  j["enable_dsffn"] = c.enable_dsffn;
  j["enable_epem"] = c.enable_epem;
  j["enable_topk"] = c.enable_topk;
  j["share_scan_params"] = c.share_scan_params;
  j["scan_kernel"] = c.scan_kernel == ScanKernel::parallel ? "parallel" : "sequential";
  return j.dump(2);
}

}  // namespace textmamba::io
