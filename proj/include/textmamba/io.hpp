#pragma once

// Tensor interchange (JSON manifest + raw little-endian row-major binaries)
// and run-config parsing.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "textmamba/model.hpp"
#include "textmamba/ndarray.hpp"

namespace textmamba::io {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";

/// Input that is readable but inconsistent; `field` names the offending key or tensor.
struct InputError : std::runtime_error {
  std::string field;
  InputError(std::string f, const std::string& what)
      : std::runtime_error(f + ": " + what), field(std::move(f)) {}
};

/// The output location cannot be written.
struct WriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

const char* dtype_name(DType d);
std::size_t dtype_size(DType d);

struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  NdArray<double> values;  // f32 tensors hold exactly representable floats
};

/// Ordered set of named tensors, as written to or read from a directory.
class TensorStore {
 public:
  std::uint64_t seed = 0;

  void add(const std::string& name, const NdArray<double>& t);
  void add(const std::string& name, const NdArray<float>& t);

  bool contains(const std::string& name) const;
  const StoredTensor& get(const std::string& name) const;  // throws InputError when missing
  const std::vector<StoredTensor>& tensors() const { return tensors_; }

 private:
  std::vector<StoredTensor> tensors_;
};

/// Writes manifest.json and one <name>.bin per tensor. Throws WriteError.
void write_store(const std::filesystem::path& dir, const TensorStore& store);

/// Reads and validates a directory written by write_store: names unique,
/// dtype/byte order/layout recognised, every file's length equal to
/// numel * dtype size. Throws InputError.
TensorStore read_store(const std::filesystem::path& dir);

/// Flat JSON object; every key optional, unknown keys rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const RunConfig& cfg);

}  // namespace textmamba::io
