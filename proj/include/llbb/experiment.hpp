#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "llbb/ballworld.hpp"
#include "llbb/errors.hpp"
#include "llbb/png.hpp"
#include "llbb/rollout.hpp"
#include "llbb/stream_store.hpp"
#include "llbb/trainer.hpp"

namespace llbb {

namespace fs = std::filesystem;

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// SHA-1 over "blob <size>\0" + content, as git computes object ids.
inline std::string git_blob_sha1(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for hashing");
  const auto size = fs::file_size(path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1) throw IoError("sha1: digest init failed");
  const std::string head = "blob " + std::to_string(size);
  EVP_DigestUpdate(ctx.get(), head.data(), head.size() + 1);  // includes the NUL terminator
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

// Config echo plus content hashes of every input; no timestamps, so reruns
// produce identical manifests.
inline void write_manifest(const fs::path& path, const std::string& command, const nlohmann::json& config,
                           const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["inputs"] = nlohmann::json::array();
  for (const auto& p : inputs) j["inputs"].push_back({{"path", p.string()}, {"git_sha1", git_blob_sha1(p)}});
  j["outputs"] = nlohmann::json::array();
  for (const auto& p : outputs) j["outputs"].push_back(p.string());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << j.dump(2) << '\n';
}

// ---- metric CSV ----

struct MetricRow {
  std::string window_index;  // stream start index, or "all" for aggregates
  std::string stream;        // "train" or "test"
  std::string metric;        // eval_loss, min_ade, color_kl
  double value = 0.0;
  std::string regime;
  std::uint64_t train_step = 0;
  std::string seed;  // sampling seed, or "mean" / "sd" for summary rows
};

inline constexpr const char* kMetricHeader = "window_index,stream,metric,value,regime,train_step,seed";

inline void write_metric_csv(const fs::path& path, const std::vector<MetricRow>& rows, bool append = false) {
  const bool fresh = !append || !fs::exists(path);
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  if (fresh) f << kMetricHeader << '\n';
  for (const auto& r : rows) {
    f << r.window_index << ',' << r.stream << ',' << r.metric << ',' << format_double(r.value) << ',' << r.regime
      << ',' << r.train_step << ',' << r.seed << '\n';
  }
  if (!f) throw IoError(path.string() + ": write failed");
}

inline std::vector<MetricRow> read_metric_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(f, line) || line != kMetricHeader) throw FormatError(path.string() + ": missing metric CSV header");
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (cells.size() != 7) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    MetricRow r;
    r.window_index = cells[0];
    r.stream = cells[1];
    r.metric = cells[2];
    try {
      r.value = cells[3] == "nan" ? std::nan("") : std::stod(cells[3]);
      r.train_step = std::stoull(cells[5]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
    r.regime = cells[4];
    r.seed = cells[6];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- training log ----

class TrainingLog {
 public:
  TrainingLog(const fs::path& path, bool append) : path_(path) {
    const bool fresh = !append || !fs::exists(path);
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError(path.string() + ": cannot open for writing");
    if (fresh) out_ << "step,regime,loss,grad_norm,wallclock_ms\n";
  }

  void append(const StepStats& st, Regime regime, double wallclock_ms) {
    out_ << st.step << ',' << to_string(regime) << ',' << format_double(st.loss) << ',' << format_double(st.grad_norm)
         << ',' << format_double(wallclock_ms) << '\n';
  }
  void flush() {
    out_.flush();
    if (!out_) throw IoError(path_.string() + ": write failed");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

// ---- model loading ----

struct LoadedModel {
  TrainConfig config;
  std::uint64_t steps_done = 0;
  std::unique_ptr<UNet<float>> net;
  ParamSet<float> params;
  NoiseSchedule schedule;

  DenoiseFn<float> denoiser() const { return unet_denoiser<float>(*net, params); }
};

inline LoadedModel load_model(const fs::path& checkpoint) {
  auto ck = read_checkpoint(checkpoint);
  LoadedModel m;
  m.config = ck.config;
  m.steps_done = ck.steps_done;
  m.net = std::make_unique<UNet<float>>(ck.config.arch);
  Rng dummy(0);
  check_manifest(ck.params, m.net->init_params(dummy));
  m.params = std::move(ck.params);
  m.schedule = make_schedule(ck.config.diffusion_steps, ck.config.beta_start, ck.config.beta_end);
  return m;
}

// ---- training run ----

struct TrainRunOptions {
  TrainConfig config;
  fs::path stream;
  fs::path out_dir;
  std::optional<fs::path> eval_stream;  // periodic eval-loss curve when set
  std::uint64_t eval_windows = 100;
  std::uint64_t eval_seed = 0;
  std::optional<fs::path> resume;
  std::uint64_t log_every = 1;
};

struct TrainRunResult {
  fs::path checkpoint;
  std::vector<double> losses;  // losses of the steps run by this invocation
  std::uint64_t steps_done = 0;
};

inline fs::path final_checkpoint_path(const fs::path& out_dir) { return out_dir / "checkpoint.llck"; }

inline std::vector<MetricRow> eval_loss_rows(const EvalLossResult& r, const std::string& stream_label,
                                             const std::string& regime, std::uint64_t step, std::uint64_t seed,
                                             bool per_window) {
  std::vector<MetricRow> rows;
  if (per_window) {
    for (std::size_t i = 0; i < r.windows.size(); ++i) {
      rows.push_back({std::to_string(r.windows[i]), stream_label, "eval_loss", r.per_window[i], regime, step,
                      std::to_string(seed)});
    }
  }
  rows.push_back({"all", stream_label, "eval_loss", r.mean, regime, step, std::to_string(seed)});
  return rows;
}

inline TrainRunResult run_training(const TrainRunOptions& opt,
                                   const std::function<void(const StepStats&)>& progress = {}) {
  fs::create_directories(opt.out_dir);
  const auto stream = VideoStream::open(opt.stream);
  Trainer trainer(opt.config, stream);
  if (opt.resume) trainer.load_checkpoint(*opt.resume);
  const auto& cfg = trainer.config();

  std::optional<VideoStream> eval_stream;
  std::vector<std::uint64_t> eval_windows;
  if (opt.eval_stream && cfg.eval_every > 0) {
    eval_stream.emplace(VideoStream::open(*opt.eval_stream));
    eval_windows = select_eval_windows(eval_stream->frame_count(), default_selection(eval_stream->dataset_version()),
                                       std::min(opt.eval_windows, lifelong_step_count(eval_stream->frame_count(), cfg.K)),
                                       cfg.K);
  }
  const auto curve_path = opt.out_dir / "eval_curve.csv";
  auto eval_now = [&] {
    const auto r = eval_loss(unet_denoiser<float>(trainer.net(), trainer.params()), *eval_stream, eval_windows,
                             trainer.schedule(), opt.eval_seed, cfg.K);
    write_metric_csv(curve_path, eval_loss_rows(r, "test", to_string(cfg.regime), trainer.steps_done(), opt.eval_seed, false),
                     true);
  };
  if (eval_stream && !opt.resume && fs::exists(curve_path)) fs::remove(curve_path);

  TrainingLog log(opt.out_dir / "train_log.csv", opt.resume.has_value());
  TrainRunResult res;
  const auto t0 = std::chrono::steady_clock::now();
  while (!trainer.finished()) {
    const auto st = trainer.step();
    res.losses.push_back(st.loss);
    const auto done = trainer.steps_done();
    if (opt.log_every <= 1 || done % opt.log_every == 0 || trainer.finished()) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log.append(st, cfg.regime, ms);
    }
    if (progress) progress(st);
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.finished()) {
      log.flush();
      trainer.save_checkpoint(opt.out_dir / ("checkpoint_" + std::to_string(done) + ".llck"));
    }
    if (eval_stream && done % cfg.eval_every == 0) eval_now();
  }
  log.flush();
  res.checkpoint = final_checkpoint_path(opt.out_dir);
  trainer.save_checkpoint(res.checkpoint);
  res.steps_done = trainer.steps_done();

  if (eval_stream && fs::exists(curve_path)) {
    png::Series s{to_string(cfg.regime), {}};
    for (const auto& r : read_metric_csv(curve_path)) s.points.emplace_back(static_cast<double>(r.train_step), r.value);
    auto [img, text] = png::line_plot({s}, "test eval loss vs training step");
    png::write(opt.out_dir / "eval_curve.png", img, text);
  }
  std::vector<fs::path> inputs{opt.stream};
  if (opt.eval_stream) inputs.push_back(*opt.eval_stream);
  if (opt.resume) inputs.push_back(*opt.resume);
  write_manifest(opt.out_dir / "manifest.json", "train", to_json(cfg), inputs, {res.checkpoint});
  return res;
}

// ---- evaluation ----

struct EvaluateOptions {
  fs::path checkpoint;
  fs::path stream;
  std::string stream_label = "test";
  std::optional<WindowSelection> selection;  // defaults by dataset version
  std::uint64_t windows = 1000;
  std::uint64_t rollout_windows = 10;  // 0 disables rollout metrics
  RolloutEvalConfig rollout;
  std::vector<std::uint64_t> sampling_seeds = {0, 1, 2};
  bool per_window_rows = true;
};

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return std::nan("");
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// Picks n entries spread evenly over `from` (keeping its order).
inline std::vector<std::uint64_t> spread_subset(const std::vector<std::uint64_t>& from, std::uint64_t n) {
  if (n >= from.size()) return from;
  std::vector<std::uint64_t> out;
  for (std::uint64_t k = 0; k < n; ++k) {
    const double pos = n == 1 ? 0.0 : static_cast<double>(k) * static_cast<double>(from.size() - 1) / static_cast<double>(n - 1);
    out.push_back(from[static_cast<std::size_t>(std::llround(pos))]);
  }
  return out;
}

inline std::vector<MetricRow> run_evaluate(const EvaluateOptions& opt) {
  if (opt.sampling_seeds.empty()) throw ConfigError("evaluate: at least one sampling seed is required");
  const auto model = load_model(opt.checkpoint);
  const auto stream = VideoStream::open(opt.stream);
  const int K = model.config.K;
  if (stream.width() != model.config.arch.resolution) throw ConfigError("evaluate: stream resolution does not match the checkpoint");
  const auto mode = opt.selection.value_or(default_selection(stream.dataset_version()));
  const auto windows = select_eval_windows(stream.frame_count(), mode, opt.windows, K);
  const std::string regime = to_string(model.config.regime);
  const auto f = model.denoiser();

  std::optional<Sidecar> truth;
  std::vector<std::uint64_t> rollout_starts;
  if (opt.rollout_windows > 0) {
    truth = read_sidecar(sidecar_path(opt.stream));
    const std::uint64_t need = static_cast<std::uint64_t>(K / 2) * (1 + opt.rollout.rounds);
    std::vector<std::uint64_t> fits;
    for (auto w : windows)
      if (w + need <= stream.frame_count()) fits.push_back(w);
    rollout_starts = spread_subset(fits, opt.rollout_windows);
  }

  std::vector<MetricRow> rows;
  std::map<std::string, std::vector<double>> per_seed;
  for (auto seed : opt.sampling_seeds) {
    const auto el = eval_loss(f, stream, windows, model.schedule, seed, K);
    auto r = eval_loss_rows(el, opt.stream_label, regime, model.steps_done, seed, opt.per_window_rows);
    rows.insert(rows.end(), r.begin(), r.end());
    per_seed["eval_loss"].push_back(el.mean);
    if (!rollout_starts.empty()) {
      const auto ro = evaluate_rollouts(f, stream, *truth, rollout_starts, model.schedule, opt.rollout, seed, K);
      if (opt.per_window_rows) {
        for (std::size_t i = 0; i < ro.windows.size(); ++i) {
          rows.push_back({std::to_string(ro.windows[i]), opt.stream_label, "min_ade", ro.min_ade[i], regime,
                          model.steps_done, std::to_string(seed)});
        }
      }
      rows.push_back({"all", opt.stream_label, "min_ade", ro.mean_min_ade, regime, model.steps_done, std::to_string(seed)});
      rows.push_back({"all", opt.stream_label, "color_kl", ro.color_kl, regime, model.steps_done, std::to_string(seed)});
      per_seed["min_ade"].push_back(ro.mean_min_ade);
      per_seed["color_kl"].push_back(ro.color_kl);
    }
  }
  for (const char* metric : {"eval_loss", "min_ade", "color_kl"}) {
    auto it = per_seed.find(metric);
    if (it == per_seed.end()) continue;
    const auto& v = it->second;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    rows.push_back({"all", opt.stream_label, metric, mean, regime, model.steps_done, "mean"});
    rows.push_back({"all", opt.stream_label, metric, sample_sd(v), regime, model.steps_done, "sd"});
  }
  return rows;
}

// ---- timeline ----

// Anchor k sits at floor(k * (F - K) / (n - 1)), pulled back so that `span`
// consecutive windows fit after it.
inline std::vector<std::uint64_t> timeline_anchors(std::uint64_t frame_count, int K, int n, std::uint64_t span) {
  if (n < 1) throw ConfigError("timeline needs at least one anchor");
  if (span < 1) throw ConfigError("timeline span must be positive");
  const std::uint64_t last_window = frame_count - K;
  if (frame_count < static_cast<std::uint64_t>(K) || span - 1 > last_window) {
    throw BoundsError("timeline span of " + std::to_string(span) + " windows does not fit the stream");
  }
  const std::uint64_t limit = last_window - (span - 1);
  std::vector<std::uint64_t> out;
  for (int k = 0; k < n; ++k) {
    const std::uint64_t a = n == 1 ? 0 : static_cast<std::uint64_t>(k) * last_window / static_cast<std::uint64_t>(n - 1);
    out.push_back(std::min(a, limit));
  }
  return out;
}

struct TimelinePoint {
  std::string regime;
  std::uint64_t train_step = 0;
  std::size_t anchor_index = 0;
  std::uint64_t anchor = 0;
  double eval_loss = 0.0;
};

inline std::vector<TimelinePoint> run_timeline(const std::vector<fs::path>& checkpoints, const fs::path& stream_path,
                                               int n_anchors, std::uint64_t span, std::uint64_t seed) {
  const auto stream = VideoStream::open(stream_path);
  std::vector<TimelinePoint> out;
  for (const auto& ck : checkpoints) {
    const auto model = load_model(ck);
    const auto anchors = timeline_anchors(stream.frame_count(), model.config.K, n_anchors, span);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      std::vector<std::uint64_t> windows(span);
      std::iota(windows.begin(), windows.end(), anchors[a]);
      const auto r = eval_loss(model.denoiser(), stream, windows, model.schedule, seed, model.config.K);
      out.push_back({to_string(model.config.regime), model.steps_done, a, anchors[a], r.mean});
    }
  }
  return out;
}

inline void write_timeline(const fs::path& out_dir, const std::vector<TimelinePoint>& pts) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir / "timeline.csv", std::ios::trunc);
  if (!f) throw IoError((out_dir / "timeline.csv").string() + ": cannot open for writing");
  f << "anchor_index,anchor_start,regime,train_step,metric,value\n";
  std::vector<png::Series> series;
  for (const auto& p : pts) {
    f << p.anchor_index << ',' << p.anchor << ',' << p.regime << ',' << p.train_step << ",eval_loss,"
      << format_double(p.eval_loss) << '\n';
    const std::string name = p.regime + "@" + std::to_string(p.train_step);
    auto it = std::find_if(series.begin(), series.end(), [&](const auto& s) { return s.name == name; });
    if (it == series.end()) {
      series.push_back({name, {}});
      it = series.end() - 1;
    }
    it->points.emplace_back(static_cast<double>(p.anchor), p.eval_loss);
  }
  auto [img, text] = png::line_plot(series, "eval loss vs train-stream position");
  png::write(out_dir / "timeline.png", img, text);
}

// ---- report ----

struct ReportCell {
  std::string regime;
  std::string stream;
  std::string metric;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation over seeds
  std::size_t n = 0;
};

// Aggregates the per-seed "all" rows; each (file, seed) pair is one sample,
// so files from different training seeds pool together.
inline std::vector<ReportCell> aggregate_report(const std::vector<std::vector<MetricRow>>& files) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  for (const auto& rows : files)
    for (const auto& r : rows) {
      if (r.window_index != "all" || r.seed == "mean" || r.seed == "sd") continue;
      groups[{r.regime, r.stream, r.metric}].push_back(r.value);
    }
  std::vector<ReportCell> cells;
  for (const auto& [key, v] : groups) {
    ReportCell c;
    std::tie(c.regime, c.stream, c.metric) = key;
    c.n = v.size();
    c.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    c.sd = sample_sd(v);
    cells.push_back(c);
  }
  return cells;
}

struct ParityCheck {
  std::string regime;
  std::string stream;
  double relative_gap = 0.0;
  bool parity = false;
};

inline constexpr double kParityTolerance = 0.15;

// |lifelong - offline| / offline on mean eval loss, per stream.
inline std::vector<ParityCheck> parity_checks(const std::vector<ReportCell>& cells) {
  std::vector<ParityCheck> out;
  for (const auto& c : cells) {
    if (c.metric != "eval_loss" || c.regime == "offline") continue;
    for (const auto& o : cells) {
      if (o.metric == "eval_loss" && o.regime == "offline" && o.stream == c.stream) {
        const double gap = std::abs(c.mean - o.mean) / o.mean;
        out.push_back({c.regime, c.stream, gap, gap <= kParityTolerance});
      }
    }
  }
  return out;
}

inline std::string format_report(const std::vector<ReportCell>& cells, const std::vector<ParityCheck>& parity) {
  std::ostringstream os;
  os << "regime,stream,metric,mean,sd,n\n";
  for (const auto& c : cells) {
    os << c.regime << ',' << c.stream << ',' << c.metric << ',' << format_double(c.mean) << ',' << format_double(c.sd)
       << ',' << c.n << '\n';
  }
  if (!parity.empty()) {
    os << "\nregime,stream,relative_gap_vs_offline,parity\n";
    for (const auto& p : parity) {
      os << p.regime << ',' << p.stream << ',' << format_double(p.relative_gap) << ',' << (p.parity ? "yes" : "no") << '\n';
    }
  }
  return os.str();
}

}  // namespace llbb
