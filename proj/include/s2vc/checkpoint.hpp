#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "s2vc/tensor.hpp"

namespace s2vc {

/// Malformed checkpoint text; `line()` is 1-based (0 when not line-specific).
class CheckpointError : public Error {
 public:
  CheckpointError(std::size_t line, const std::string& what)
      : Error(line ? "checkpoint line " + std::to_string(line) + ": " + what : "checkpoint: " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct NamedTensor {
  std::string name;
  Tensor value;  // always rank 2
};

/// Plain-text parameter file shared by flow and encoder checkpoints:
///
///   <magic> d=<d> layers=<k> seed=<seed>
///   param <name> <rows> <cols>
///   <row 0 values, %.9g, space separated>
///   ...
///
/// Nine significant digits round-trip every float, so parse followed by
/// format reproduces the input byte for byte.
struct ParamFile {
  std::string magic;  // e.g. "S2VC-FLOW v1"
  std::size_t dim = 0;
  std::size_t layers = 0;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> params;

  const Tensor& get(std::string_view name) const;
  bool has(std::string_view name) const;
};

std::string format_param_file(const ParamFile& file);
ParamFile parse_param_file(std::string_view text, std::string_view expected_magic);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace s2vc
