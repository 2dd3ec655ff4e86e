#include "run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "s2vc/checkpoint.hpp"

namespace s2vc::cli {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("expected a non-negative integer, got '" + s + "'");
  return v;
}

double parse_real(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw Error("expected a finite number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error("expected true or false, got '" + s + "'");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& s, F parse_item) {
  std::vector<T> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_item(trim(item)));
  if (out.empty()) throw Error("expected a comma-separated list");
  return out;
}

std::string real_text(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T, typename F>
std::string list_text(const std::vector<T>& v, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

std::string bool_text(bool b) { return b ? "true" : "false"; }
std::string uint_text(std::uint64_t v) { return std::to_string(v); }

struct Field {
  const char* section;  // "" for root keys
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define S2VC_UINT(SEC, KEY, MEMBER)                                              \
  Field {                                                                        \
    SEC, KEY, [](const RunConfig& c) { return uint_text(c.MEMBER); },            \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_uint(v); }     \
  }
#define S2VC_REAL(SEC, KEY, MEMBER)                                              \
  Field {                                                                        \
    SEC, KEY, [](const RunConfig& c) { return real_text(c.MEMBER); },            \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_real(v); }     \
  }
#define S2VC_BOOL(SEC, KEY, MEMBER)                                              \
  Field {                                                                        \
    SEC, KEY, [](const RunConfig& c) { return bool_text(c.MEMBER); },            \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(v); }     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      S2VC_UINT("", "seed", seed),

      S2VC_UINT("data", "classes", data.num_classes),
      S2VC_UINT("data", "clips_per_class", data.clips_per_class),
      S2VC_UINT("data", "length", data.geometry.length),
      S2VC_UINT("data", "height", data.geometry.height),
      S2VC_UINT("data", "width", data.geometry.width),
      S2VC_UINT("data", "channels", data.geometry.channels),
      S2VC_REAL("data", "confound", data.confound),
      S2VC_UINT("data", "backgrounds", data.num_backgrounds),

      S2VC_UINT("flow", "downsample", flow.downsample),
      S2VC_UINT("flow", "couplings", flow.train.arch.couplings),
      S2VC_UINT("flow", "hidden", flow.train.arch.hidden),
      S2VC_REAL("flow", "s_max", flow.train.arch.s_max),
      S2VC_UINT("flow", "epochs", flow.train.epochs),
      S2VC_UINT("flow", "batch_size", flow.train.batch_size),
      S2VC_REAL("flow", "learning_rate", flow.train.learning_rate),
      S2VC_REAL("flow", "clip_norm", flow.train.clip_norm),
      S2VC_UINT("flow", "checkpoint_every", flow.train.checkpoint_every),

      S2VC_REAL("suppress", "alpha", suppress.alpha),
      Field{"suppress", "strategy", [](const RunConfig& c) { return c.suppress.strategy; },
            [](RunConfig& c, const std::string& v) {
              if (v != "tfd") parse_strategy(v);
              c.suppress.strategy = v;
            }},
      S2VC_REAL("suppress", "tfd_keep", suppress.tfd_keep),
      Field{"suppress", "alpha_sweep",
            [](const RunConfig& c) { return list_text(c.suppress.alpha_sweep, real_text); },
            [](RunConfig& c, const std::string& v) { c.suppress.alpha_sweep = parse_list<double>(v, parse_real); }},

      S2VC_BOOL("contrast", "suppress", contrast.suppress),
      S2VC_UINT("contrast", "steps", contrast.steps),
      S2VC_UINT("contrast", "batch_size", contrast.batch_size),
      S2VC_REAL("contrast", "learning_rate", contrast.learning_rate),
      S2VC_REAL("contrast", "clip_norm", contrast.clip_norm),
      S2VC_REAL("contrast", "momentum", contrast.momentum),
      S2VC_UINT("contrast", "queue_size", contrast.queue_size),
      S2VC_REAL("contrast", "tau", contrast.tau),
      S2VC_UINT("contrast", "hidden", contrast.encoder.hidden),
      S2VC_UINT("contrast", "features", contrast.encoder.features),
      S2VC_UINT("contrast", "embed_dim", contrast.encoder.embed_dim),
      S2VC_BOOL("contrast", "use_difference", contrast.encoder.use_difference),
      S2VC_REAL("contrast", "init_gain", contrast.encoder.init_gain),
      S2VC_REAL("contrast", "crop_min", contrast.augment.crop_min),
      S2VC_REAL("contrast", "crop_max", contrast.augment.crop_max),
      S2VC_REAL("contrast", "flip_p", contrast.augment.flip_p),
      S2VC_REAL("contrast", "jitter_p", contrast.augment.jitter_p),
      S2VC_REAL("contrast", "brightness", contrast.augment.brightness),
      S2VC_REAL("contrast", "contrast", contrast.augment.contrast),
      S2VC_REAL("contrast", "blur_p", contrast.augment.blur_p),
      S2VC_UINT("contrast", "blur_kernel", contrast.augment.blur_kernel),

      S2VC_UINT("eval", "probe_epochs", eval.probe.epochs),
      S2VC_REAL("eval", "probe_learning_rate", eval.probe.learning_rate),
      S2VC_REAL("eval", "probe_weight_decay", eval.probe.weight_decay),
      Field{"eval", "recall_k", [](const RunConfig& c) { return list_text(c.eval.recall_k, uint_text); },
            [](RunConfig& c, const std::string& v) {
              c.eval.recall_k.clear();
              for (const auto k : parse_list<std::uint64_t>(v, parse_uint)) c.eval.recall_k.push_back(k);
            }},
      S2VC_UINT("eval", "fit_bins", eval.fit_bins),
      S2VC_REAL("eval", "ks_coefficient", eval.ks_coefficient),
      S2VC_UINT("eval", "strip_clips", eval.strip_clips),
  };
  return table;
}

#undef S2VC_UINT
#undef S2VC_REAL
#undef S2VC_BOOL

const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (section == f.section && key == f.key) return &f;
  return nullptr;
}

std::string key_label(std::string_view section, std::string_view key) {
  return section.empty() ? std::string(key) : "[" + std::string(section) + "] " + std::string(key);
}

void assign(RunConfig& config, std::string_view section, const std::string& key, const std::string& value) {
  const Field* f = find_field(section, key);
  if (!f) throw Error("unknown config key " + key_label(section, key));
  try {
    // Inline comments: no value contains ';' or '#'.
    f->set(config, trim(value.substr(0, value.find_first_of(";#"))));
  } catch (const Error& e) {
    throw Error("invalid value for " + key_label(section, key) + ": " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() {
  data.num_classes = 4;
  data.clips_per_class = 16;
  data.confound = 1.0;
  flow.train.arch = {256, 6, 64, 2.0};
  flow.train.epochs = 20;
  flow.train.batch_size = 64;
  flow.train.learning_rate = 0.01;
  resolve();
}

void RunConfig::resolve() {
  data.seed = seed;
  flow.train.seed = seed;
  contrast.seed = seed;
  eval.probe.seed = seed;
  const auto& g = data.geometry;
  const std::size_t f = flow.downsample;
  if (f == 0 || (f & (f - 1)) != 0) throw Error("[flow] downsample must be a power of two");
  if (g.height % f || g.width % f) throw Error("[flow] downsample must divide the frame height and width");
  flow.train.arch.dim = (g.height / f) * (g.width / f) * g.channels;
  contrast.encoder.frame_dim = g.height * g.width * g.channels;
  contrast.alpha = suppress.alpha;
  if (suppress.strategy != "tfd") contrast.strategy = parse_strategy(suppress.strategy);
}

RunConfig parse_run_config(std::string_view text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in{std::string(text)};
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  static const char* sections[] = {"data", "flow", "suppress", "contrast", "eval"};
  const auto is_section = [](const std::string& name) {
    return std::find(std::begin(sections), std::end(sections), name) != std::end(sections);
  };
  RunConfig config;
  for (const auto& [name, node] : tree) {
    if (node.empty() && !(is_section(name) && node.data().empty())) {
      assign(config, "", name, node.data());
      continue;
    }
    if (!is_section(name)) throw Error("unknown config section [" + name + "]");
    for (const auto& [key, value] : node) assign(config, name, key, value.data());
  }
  config.resolve();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return parse_run_config(read_text_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string format_run_config(const RunConfig& config) {
  std::string out;
  std::string_view current = "";
  for (const auto& f : fields()) {
    if (current != f.section) {
      current = f.section;
      out += "\n[" + std::string(current) + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : format_run_config(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace s2vc::cli
