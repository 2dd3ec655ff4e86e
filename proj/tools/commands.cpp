#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "run_config.hpp"
#include "s2vc/checkpoint.hpp"
#include "s2vc/contrast.hpp"
#include "s2vc/evaluate.hpp"
#include "s2vc/rng.hpp"
#include "s2vc/statlab.hpp"
#include "s2vc/suppress.hpp"
#include "s2vc/synthvid.hpp"

namespace s2vc::cli {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

/// Set when a command starts so the manifest reports the whole run.
Clock::time_point g_start = Clock::now();

/// Options shared by every subcommand.
struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::size_t threads = 1;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run seed (overrides the config)");
  cmd->add_flag("--force", o.force, "replace an existing output directory from an earlier run");
  cmd->add_option("--threads", o.threads, "worker threads for per-clip work")->check(CLI::PositiveNumber);
  cmd->add_option("--out", o.out, "output directory");
}

/// Runs fn(0..n-1) on up to `threads` workers. Results must go to per-index
/// slots; the lowest-index failure is rethrown so errors are deterministic.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t count = std::min(threads, n);
  if (count <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// An output directory plus the list of files written into it.
class RunDirectory {
 public:
  RunDirectory(std::string command, const CommonOptions& options, const RunConfig& config)
      : command_(std::move(command)), config_(config), start_(g_start) {
    if (!options.out.empty()) {
      root_ = options.out;
    } else {
      const char* env = std::getenv(kOutputRootEnv);
      root_ = fs::path(env && *env ? env : "s2vc-runs") / command_;
    }
    if (fs::exists(root_) && !fs::is_empty(root_)) {
      if (!options.force) throw Error("output directory " + root_.string() + " is not empty (pass --force to replace it)");
      if (!fs::exists(root_ / kRunManifestName)) {
        throw Error("refusing to replace " + root_.string() + ": it has no " + kRunManifestName);
      }
      fs::remove_all(root_);
    }
    fs::create_directories(root_);
  }

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& name) const { return root_ / name; }

  void write(const std::string& name, std::string_view text) {
    write_text_file(path(name), text);
    record(name);
  }
  void record(const std::string& name) { artifacts_.push_back(name); }

  /// Echoes the configuration and writes the run manifest.
  void finish() {
    write(kResolvedConfigName, format_run_config(config_));
    auto artifacts = artifacts_;
    artifacts.push_back(kRunManifestName);
    std::sort(artifacts.begin(), artifacts.end());
    const double seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    nlohmann::ordered_json manifest = {
        {"command", command_},
        {"config_hash", config_hash(config_)},
        {"seeds", {{"run", config_.seed}}},
        {"artifacts", artifacts},
        {"wall_clock_seconds", seconds},
        {"tool_version", std::string(kToolVersion)},
    };
    write_text_file(path(kRunManifestName), manifest.dump(2) + "\n");
  }

 private:
  std::string command_;
  RunConfig config_;
  Clock::time_point start_;
  fs::path root_;
  std::vector<std::string> artifacts_;
};

RunConfig load_config(const CommonOptions& o) {
  RunConfig config = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) config.seed = *o.seed;
  config.resolve();
  return config;
}

/// Clips at flow resolution.
VideoClip flow_frames(const VideoClip& clip, std::size_t downsample) {
  return downsample == 1 ? clip : average_pool(clip, downsample);
}

Tensor training_frames(const Dataset& ds, std::size_t downsample) {
  std::vector<VideoClip> pooled;
  for (const auto& c : ds.clips) pooled.push_back(flow_frames(c.clip, downsample));
  std::size_t rows = 0;
  for (const auto& p : pooled) rows += p.length();
  const std::size_t d = pooled.front().frame_size();
  Tensor data({rows, d});
  std::size_t r = 0;
  for (const auto& p : pooled)
    for (std::size_t l = 0; l < p.length(); ++l, ++r) {
      const auto f = p.frame(l);
      for (std::size_t i = 0; i < d; ++i) data.at(r, i) = static_cast<float>(PixelNormalization::normalize(f[i]));
    }
  return data;
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds = read_dataset(dir);
  if (ds.clips.empty()) throw Error("dataset " + dir + " has no clips");
  return ds;
}

void check_flow_matches(const FlowModel& model, const Dataset& ds, std::size_t downsample) {
  const std::size_t d = flow_frames(ds.clips.front().clip, downsample).frame_size();
  if (model.dim() != d) {
    throw Error("flow dimension " + std::to_string(model.dim()) + " does not match the data (" + std::to_string(d) +
                " at downsample " + std::to_string(downsample) + ")");
  }
}

std::uint64_t clip_seed(const RunConfig& config, std::string_view stage, std::size_t index) {
  return Rng(config.seed).substream(stage).substream(index).next_u64();
}

/// Writes a dataset directory's clips and manifest through `dir`.
void write_dataset_artifacts(RunDirectory& dir, const Dataset& ds) {
  write_dataset(dir.root(), ds);
  for (const auto& c : ds.clips) dir.record(c.path);
  dir.record(std::string(kManifestName));
}

std::vector<double> read_loss_column(const fs::path& csv, std::size_t& last_epoch) {
  std::istringstream in(read_text_file(csv));
  std::string line;
  std::getline(in, line);
  if (line != "epoch,nll") throw Error(csv.string() + ": unexpected header");
  std::vector<double> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing column");
      last_epoch = std::stoul(line.substr(0, comma));
      values.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw Error(csv.string() + " line " + std::to_string(lineno) + ": malformed row");
    }
  }
  return values;
}

// --- gen-data ---------------------------------------------------------------

struct GenDataOptions {
  CommonOptions common;
  std::optional<double> confound;
};

void cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  RunConfig config = load_config(o.common);
  if (o.confound) config.data.confound = *o.confound;
  RunDirectory dir("gen-data", o.common, config);
  const Dataset ds = gen_dataset(config.data);
  write_dataset_artifacts(dir, ds);
  dir.finish();
  const auto& g = config.data.geometry;
  out << "wrote " << ds.clips.size() << " clips (" << config.data.num_classes << " classes, " << g.length << "x"
      << g.height << "x" << g.width << "x" << g.channels << ") to " << dir.root().string() << "\n";
}

// --- train-flow -------------------------------------------------------------

struct TrainFlowOptions {
  CommonOptions common;
  std::string data;
  std::string resume;
};

void cmd_train_flow(const TrainFlowOptions& o, std::ostream& out) {
  const RunConfig config = load_config(o.common);
  const Dataset ds = load_dataset(o.data);
  const Tensor frames = training_frames(ds, config.flow.downsample);
  TrainConfig train = config.flow.train;
  train.arch.dim = frames.cols();

  std::vector<double> history;
  std::optional<FlowModel> initial;
  if (!o.resume.empty()) {
    const fs::path prev(o.resume);
    initial = load_flow(prev / "flow.ckpt");
    std::size_t last_epoch = 0;
    history = read_loss_column(prev / "loss.csv", last_epoch);
    train.first_epoch = last_epoch + 1;
    check_flow_matches(*initial, ds, config.flow.downsample);
  }

  RunDirectory dir("train-flow", o.common, config);
  if (train.checkpoint_every > 0) train.checkpoint_path = dir.path("flow.ckpt");
  TrainResult result = [&] {
    try {
      return initial ? train_mle(frames, *initial, train) : train_mle(frames, train);
    } catch (const TrainingError& e) {
      save_flow(e.last_good(), dir.path("flow.ckpt"));
      throw;
    }
  }();
  history.insert(history.end(), result.epoch_nll.begin(), result.epoch_nll.end());

  save_flow(result.model, dir.path("flow.ckpt"));
  dir.record("flow.ckpt");
  std::string csv = "epoch,nll\n";
  const std::size_t first = train.first_epoch - (history.size() - result.epoch_nll.size());
  for (std::size_t i = 0; i < history.size(); ++i) csv += std::to_string(first + i) + "," + csv_number(history[i]) + "\n";
  dir.write("loss.csv", csv);
  dir.finish();
  out << "trained " << result.epoch_nll.size() << " epochs on " << frames.rows() << " frames (d=" << frames.cols()
      << "): nll " << csv_number(result.initial_nll) << " -> " << csv_number(result.final_nll) << "\n";
}

// --- suppress ---------------------------------------------------------------

struct SuppressOptions {
  CommonOptions common;
  std::string data;
  std::string flow;
  std::optional<double> alpha;
  std::optional<std::string> strategy;
  bool alpha_sweep = false;
};

void cmd_suppress(const SuppressOptions& o, std::ostream& out) {
  RunConfig config = load_config(o.common);
  if (o.alpha) config.suppress.alpha = *o.alpha;
  if (o.strategy) {
    if (*o.strategy != "tfd") parse_strategy(*o.strategy);
    config.suppress.strategy = *o.strategy;
  }
  config.resolve();
  const Dataset ds = load_dataset(o.data);
  const FlowModel model = load_flow(o.flow);
  const std::size_t down = config.flow.downsample;
  check_flow_matches(model, ds, down);
  const bool tfd = config.suppress.strategy == "tfd";

  RunDirectory dir("suppress", o.common, config);
  const std::size_t n = ds.clips.size();
  Dataset result = ds;
  std::vector<std::string> rows(n), sweep_rows(n);
  parallel_for(n, o.common.threads, [&](std::size_t i) {
    const auto& c = ds.clips[i];
    std::optional<TemporalStats> stats;
    if (tfd) {
      result.clips[i].clip = tfd_suppress(c.clip, config.suppress.tfd_keep);
      const std::size_t d = c.clip.frame_size();
      const auto kept = static_cast<std::size_t>(std::ceil(config.suppress.tfd_keep * double(d) - 1e-9));
      rows[i] = c.path + ",tfd,," + std::to_string(d - kept) + "," + std::to_string(d) + "," +
                csv_number(double(d - kept) / double(d)) + "\n";
    } else {
      const auto r = s2vc_run(c.clip, model, config.suppress.alpha, parse_strategy(config.suppress.strategy),
                              clip_seed(config, "suppress", i));
      result.clips[i].clip = r.clip;
      const std::size_t d = model.dim();
      rows[i] = c.path + "," + config.suppress.strategy + "," + csv_number(config.suppress.alpha) + "," +
                std::to_string(r.plan.static_set.size()) + "," + std::to_string(d) + "," +
                csv_number(double(r.plan.static_set.size()) / double(d)) + "\n";
      stats = r.stats;
    }
    if (o.alpha_sweep) {
      if (!stats) stats = temporal_std(encode_clip(flow_frames(c.clip, down), model));
      const std::size_t d = model.dim();
      for (const double a : config.suppress.alpha_sweep) {
        const std::size_t count = select_static(*stats, a).size();
        sweep_rows[i] += c.path + "," + csv_number(a) + "," + std::to_string(count) + "," + std::to_string(d) + "," +
                         csv_number(double(count) / double(d)) + "\n";
      }
    }
  });

  write_dataset_artifacts(dir, result);
  std::string csv = "clip_path,strategy,alpha,static_count,dim,static_fraction\n";
  for (const auto& r : rows) csv += r;
  dir.write("stats.csv", csv);
  if (o.alpha_sweep) {
    std::string sweep = "clip_path,alpha,static_count,dim,static_fraction\n";
    for (const auto& r : sweep_rows) sweep += r;
    dir.write("alpha_sweep.csv", sweep);
  }
  dir.finish();
  out << "suppressed " << n << " clips with " << config.suppress.strategy;
  if (!tfd) out << " at alpha " << csv_number(config.suppress.alpha);
  out << " into " << dir.root().string() << "\n";
}

// --- pretrain ---------------------------------------------------------------

struct PretrainOptions {
  CommonOptions common;
  std::string data;
  std::string flow;
  bool no_suppress = false;
};

void cmd_pretrain(const PretrainOptions& o, std::ostream& out) {
  RunConfig config = load_config(o.common);
  if (o.no_suppress) config.contrast.suppress = false;
  const Dataset ds = load_dataset(o.data);
  PretrainConfig cfg = config.contrast;
  cfg.encoder.frame_dim = ds.clips.front().clip.frame_size();

  std::optional<FlowModel> model;
  if (cfg.suppress) {
    if (config.suppress.strategy == "tfd") throw Error("pretraining needs a latent suppression strategy, not tfd");
    if (o.flow.empty()) throw Error("pretraining with suppression needs --flow (or pass --no-suppress)");
    model = load_flow(o.flow);
  }

  RunDirectory dir("pretrain", o.common, config);
  std::vector<VideoClip> clips;
  for (const auto& c : ds.clips) clips.push_back(c.clip);
  const EncoderState state = pretrain(clips, model ? &*model : nullptr, cfg);

  save_encoder(state, dir.path("encoder.ckpt"));
  dir.record("encoder.ckpt");
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < state.loss_history.size(); ++i)
    csv += std::to_string(i + 1) + "," + csv_number(state.loss_history[i]) + "\n";
  dir.write("loss.csv", csv);
  dir.finish();
  const auto& h = state.loss_history;
  out << "pretrained " << h.size() << " steps (" << (cfg.suppress ? "suppressed positives" : "baseline") << ")";
  if (!h.empty()) out << ": loss " << csv_number(h.front()) << " -> " << csv_number(h.back());
  out << "\n";
}

// --- eval -------------------------------------------------------------------

struct EvalOptions {
  CommonOptions common;
  std::string data;
  std::string encoder;
  std::string baseline;
};

void cmd_eval(const EvalOptions& o, std::ostream& out) {
  const RunConfig config = load_config(o.common);
  const Dataset ds = load_dataset(o.data);
  const auto run_eval = [&](const std::string& path) {
    const EncoderState state = load_encoder(path);
    if (state.config.frame_dim != ds.clips.front().clip.frame_size()) {
      throw Error("encoder " + path + " expects frames of " + std::to_string(state.config.frame_dim) + " values");
    }
    return evaluate_encoder(ds, state, config.eval.probe, config.eval.recall_k);
  };
  const EvalReport report = run_eval(o.encoder);
  std::optional<EvalReport> baseline;
  if (!o.baseline.empty()) baseline = run_eval(o.baseline);

  RunDirectory dir("eval", o.common, config);
  dir.write("metrics.csv", format_eval_csv(report));
  if (baseline) {
    dir.write("baseline_metrics.csv", format_eval_csv(*baseline));
    dir.write("paired.csv", format_paired_csv(report, *baseline));
  }
  dir.finish();
  for (const auto& r : report.recall) out << "R@" << r.k << " " << csv_number(r.recall) << "  ";
  out << "shuffle-probe " << csv_number(report.shuffle_probe_accuracy) << "\n";
}

// --- stats ------------------------------------------------------------------

struct StatsOptions {
  CommonOptions common;
  std::string data;
  std::string flow;
};

void cmd_stats(const StatsOptions& o, std::ostream& out) {
  const RunConfig config = load_config(o.common);
  const Dataset ds = load_dataset(o.data);
  const FlowModel model = load_flow(o.flow);
  const std::size_t down = config.flow.downsample;
  check_flow_matches(model, ds, down);
  const bool tfd = config.suppress.strategy == "tfd";

  const std::size_t n = ds.clips.size();
  std::vector<LatentPair> latents(n);
  std::vector<VideoClip> suppressed(n);
  const std::size_t strips = std::min(config.eval.strip_clips, n);
  parallel_for(n, o.common.threads, [&](std::size_t i) {
    const auto& c = ds.clips[i];
    const LatentClip z = encode_clip(flow_frames(c.clip, down), model);
    LatentClip zp;
    if (tfd) {
      suppressed[i] = tfd_suppress(c.clip, config.suppress.tfd_keep);
      zp = encode_clip(flow_frames(suppressed[i], down), model);
    } else {
      const std::uint64_t seed = clip_seed(config, "suppress", i);
      const auto plan = make_plan(temporal_std(z), config.suppress.alpha, parse_strategy(config.suppress.strategy), seed);
      zp = apply_strategy(z, plan);
      if (i < strips) {
        suppressed[i] = s2vc_algorithm(c.clip, model, config.suppress.alpha, parse_strategy(config.suppress.strategy), seed);
      }
    }
    latents[i] = {z.latents, zp.latents, c.label};
  });

  std::size_t rows = 0;
  for (const auto& l : latents) rows += l.z.rows();
  Tensor all({rows, model.dim()});
  std::size_t r = 0;
  for (const auto& l : latents)
    for (std::size_t i = 0; i < l.z.rows(); ++i, ++r)
      std::copy(l.z.row(i).begin(), l.z.row(i).end(), all.row(r).begin());

  KsOptions ks;
  ks.critical_coefficient = config.eval.ks_coefficient;
  const auto fits = fit_report(all, config.eval.fit_bins, ks);

  RunDirectory dir("stats", o.common, config);
  dir.write("fit.csv", format_fit_csv(fits));
  std::size_t rejected = 0, degenerate = 0;
  for (const auto& f : fits) {
    degenerate += f.ks.degenerate;
    rejected += !f.ks.degenerate && f.ks.reject;
  }
  const std::string name = fs::path(o.data).lexically_normal().filename().string();
  dir.write("ks_summary.csv", "dataset,samples,dimensions,degenerate,rejected,reject_rate\n" + name + "," +
                                  std::to_string(rows) + "," + std::to_string(fits.size()) + "," +
                                  std::to_string(degenerate) + "," + std::to_string(rejected) + "," +
                                  csv_number(reject_rate(fits)) + "\n");

  std::string similarity;
  for (const auto mode : {SimilarityMode::intra_class, SimilarityMode::intra_video, SimilarityMode::inter_class}) {
    const auto report = cosine_suite(latents, mode);
    const std::string csv = format_similarity_csv(report);
    similarity += similarity.empty() ? csv : csv.substr(csv.find('\n') + 1);
    for (const auto& note : report.notices) out << "note: " << note << "\n";
  }
  dir.write("similarity.csv", similarity);

  for (std::size_t i = 0; i < strips; ++i) {
    char name_buf[32];
    std::snprintf(name_buf, sizeof name_buf, "strip_%05zu.pgm", i);
    const VideoClip pair[] = {ds.clips[i].clip, suppressed[i]};
    write_pgm(dir.path(name_buf), frame_strip(pair));
    dir.record(name_buf);
  }
  dir.finish();
  out << "KS reject rate " << csv_number(reject_rate(fits)) << " over " << fits.size() << " dimensions; wrote "
      << strips << " strips to " << dir.root().string() << "\n";
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Motion-preserving background suppression toolkit for video contrastive learning"};
  app.name(args.empty() ? "s2vc" : args.front());
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic labelled video dataset");
  add_common(gen_cmd, gen.common);
  gen_cmd->add_option("--confound", gen.confound, "probability that a clip uses its class background")
      ->check(CLI::Range(0.0, 1.0));

  TrainFlowOptions tf;
  auto* tf_cmd = app.add_subcommand("train-flow", "train the normalizing flow on dataset frames");
  add_common(tf_cmd, tf.common);
  tf_cmd->add_option("--data", tf.data, "dataset directory")->required();
  tf_cmd->add_option("--resume", tf.resume, "earlier train-flow output directory to continue from");

  SuppressOptions sp;
  auto* sp_cmd = app.add_subcommand("suppress", "write motion-preserved copies of a dataset");
  add_common(sp_cmd, sp.common);
  sp_cmd->add_option("--data", sp.data, "dataset directory")->required();
  sp_cmd->add_option("--flow", sp.flow, "flow checkpoint")->required();
  sp_cmd->add_option("--alpha", sp.alpha, "static-dimension threshold");
  sp_cmd->add_option("--strategy", sp.strategy, "set-to-zero, random-noise, shuffle-in-clip, shuffle-in-frame or tfd");
  sp_cmd->add_flag("--alpha-sweep", sp.alpha_sweep, "also report the static fraction for every sweep alpha");

  PretrainOptions pt;
  auto* pt_cmd = app.add_subcommand("pretrain", "contrastive pretraining of the clip encoder");
  add_common(pt_cmd, pt.common);
  pt_cmd->add_option("--data", pt.data, "dataset directory")->required();
  pt_cmd->add_option("--flow", pt.flow, "flow checkpoint (needed unless --no-suppress)");
  pt_cmd->add_flag("--no-suppress", pt.no_suppress, "plain two-augmentation baseline");

  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "retrieval and shuffled-clip probe on frozen encoder features");
  add_common(ev_cmd, ev.common);
  ev_cmd->add_option("--data", ev.data, "dataset directory")->required();
  ev_cmd->add_option("--encoder", ev.encoder, "encoder checkpoint")->required();
  ev_cmd->add_option("--baseline", ev.baseline, "second encoder checkpoint for a paired comparison");

  StatsOptions st;
  auto* st_cmd = app.add_subcommand("stats", "latent normality fits, similarity suites and frame strips");
  add_common(st_cmd, st.common);
  st_cmd->add_option("--data", st.data, "dataset directory")->required();
  st_cmd->add_option("--flow", st.flow, "flow checkpoint")->required();

  try {
    std::vector<std::string> rest(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  g_start = Clock::now();
  try {
    if (*gen_cmd) cmd_gen_data(gen, out);
    if (*tf_cmd) cmd_train_flow(tf, out);
    if (*sp_cmd) cmd_suppress(sp, out);
    if (*pt_cmd) cmd_pretrain(pt, out);
    if (*ev_cmd) cmd_eval(ev, out);
    if (*st_cmd) cmd_stats(st, out);
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace s2vc::cli
