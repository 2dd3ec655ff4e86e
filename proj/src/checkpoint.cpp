#include "s2vc/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace s2vc {
namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_float(std::string_view s, float& out) {
  // strtof accepts the %.9g forms (including exponents) without locale surprises
  // for the C locale that the tools run under.
  std::string tmp(s);
  char* end = nullptr;
  out = std::strtof(tmp.c_str(), &end);
  return end == tmp.c_str() + tmp.size() && !tmp.empty() && std::isfinite(out);
}

template <typename Int>
bool parse_field(std::string_view token, std::string_view key, Int& out) {
  if (token.size() <= key.size() + 1 || token.substr(0, key.size()) != key || token[key.size()] != '=') {
    return false;
  }
  return parse_int(token.substr(key.size() + 1), out);
}

}  // namespace

const Tensor& ParamFile::get(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw CheckpointError(0, "missing parameter '" + std::string(name) + "'");
}

bool ParamFile::has(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return true;
  }
  return false;
}

std::string format_param_file(const ParamFile& file) {
  std::string out = file.magic + " d=" + std::to_string(file.dim) + " layers=" +
                    std::to_string(file.layers) + " seed=" + std::to_string(file.seed) + "\n";
  char buf[32];
  for (const auto& p : file.params) {
    const std::size_t rows = p.value.rows(), cols = p.value.cols();
    out += "param " + p.name + " " + std::to_string(rows) + " " + std::to_string(cols) + "\n";
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(p.value.at(r, c)));
        if (c) out += ' ';
        out += buf;
      }
      out += '\n';
    }
  }
  return out;
}

ParamFile parse_param_file(std::string_view text, std::string_view expected_magic) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  if (lines.empty()) throw CheckpointError(1, "empty file");

  ParamFile file;
  const auto head = split_ws(lines[0]);
  const auto magic_tokens = split_ws(expected_magic);
  if (head.size() != magic_tokens.size() + 3) throw CheckpointError(1, "malformed header");
  for (std::size_t i = 0; i < magic_tokens.size(); ++i) {
    if (head[i] != magic_tokens[i]) {
      throw CheckpointError(1, "expected magic '" + std::string(expected_magic) + "'");
    }
  }
  file.magic = std::string(expected_magic);
  const std::size_t k = magic_tokens.size();
  if (!parse_field(head[k], "d", file.dim) || !parse_field(head[k + 1], "layers", file.layers) ||
      !parse_field(head[k + 2], "seed", file.seed)) {
    throw CheckpointError(1, "malformed header fields");
  }

  std::size_t li = 1;
  while (li < lines.size()) {
    const auto tokens = split_ws(lines[li]);
    if (tokens.empty()) {
      ++li;
      continue;
    }
    std::size_t rows = 0, cols = 0;
    if (tokens.size() != 4 || tokens[0] != "param" || !parse_int(tokens[2], rows) ||
        !parse_int(tokens[3], cols)) {
      throw CheckpointError(li + 1, "expected 'param <name> <rows> <cols>'");
    }
    NamedTensor p{std::string(tokens[1]), Tensor({rows, cols})};
    const std::size_t header_line = li + 1;
    ++li;
    std::size_t filled = 0;
    while (filled < p.value.size()) {
      if (li >= lines.size()) {
        throw CheckpointError(header_line, "parameter '" + p.name + "' truncated");
      }
      for (const auto tok : split_ws(lines[li])) {
        if (filled == p.value.size()) throw CheckpointError(li + 1, "too many values");
        float v = 0.0f;
        if (!parse_float(tok, v)) {
          throw CheckpointError(li + 1, "bad value '" + std::string(tok) + "'");
        }
        p.value[filled++] = v;
      }
      ++li;
    }
    if (file.has(p.name)) throw CheckpointError(header_line, "duplicate parameter '" + p.name + "'");
    file.params.push_back(std::move(p));
  }
  return file;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace s2vc
