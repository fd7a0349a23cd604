#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "llbb/ballworld.hpp"
#include "llbb/experiment.hpp"
#include "llbb/png.hpp"
#include "llbb/rollout.hpp"
#include "llbb/trainer.hpp"

namespace fs = std::filesystem;
using namespace llbb;

namespace {

DatasetVersion parse_version(const std::string& s) {
  if (s == "o" || s == "O") return DatasetVersion::O;
  if (s == "c" || s == "C") return DatasetVersion::C;
  throw ConfigError("--version must be o or c, got '" + s + "'");
}

std::vector<std::uint64_t> seed_list(int n) {
  if (n < 1) throw ConfigError("--sampling-seeds must be >= 1");
  std::vector<std::uint64_t> out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint64_t>(i));
  return out;
}

struct GenArgs {
  std::string version;
  std::uint64_t frames = 0;
  std::uint64_t seed = 0;
  std::string out;
  int resolution = kDefaultResolution;
};

int cmd_gen_stream(const GenArgs& a) {
  const auto v = parse_version(a.version);
  if (a.frames < static_cast<std::uint64_t>(kDefaultContext)) throw ConfigError("--frames must be at least K = 10");
  const auto g = generate_stream(a.seed, v, a.frames, a.out, a.resolution);
  nlohmann::json cfg = {{"version", to_string(v)}, {"frames", a.frames}, {"seed", a.seed}, {"resolution", a.resolution}};
  write_manifest(a.out + ".manifest.json", "gen-stream", cfg, {}, {g.stream, g.sidecar});
  std::cout << "wrote " << g.stream.string() << " and " << g.sidecar.string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string stream, out_dir, regime = "offline";
  std::optional<std::uint64_t> steps;
  int batch_size = 2, context = kDefaultContext, diffusion_steps = 1000;
  double lr = 1e-4, weight_decay = 1e-5;
  std::optional<double> grad_clip;
  double buffer_fraction = 0.05;
  std::uint64_t init_seed = 0, data_seed = 1, noise_seed = 2;
  std::uint64_t checkpoint_every = 0, eval_every = 0, eval_windows = 100, eval_seed = 0, log_every = 1;
  std::string eval_stream, resume;
  int ch1 = 32, ch2 = 64, ch3 = 128;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  TrainRunOptions opt;
  auto& c = opt.config;
  c.regime = parse_regime(a.regime);
  c.batch_size = a.batch_size;
  c.K = a.context;
  c.diffusion_steps = a.diffusion_steps;
  c.optimizer.lr = a.lr;
  c.optimizer.weight_decay = a.weight_decay;
  c.grad_clip = a.grad_clip;
  c.buffer_fraction = a.buffer_fraction;
  c.seeds = {a.init_seed, a.data_seed, a.noise_seed};
  c.checkpoint_every = a.checkpoint_every;
  c.eval_every = a.eval_every;
  {
    const auto s = VideoStream::open(a.stream);
    c.arch = UNetConfig::reference(a.context, s.width());
    c.arch.ch1 = a.ch1;
    c.arch.ch2 = a.ch2;
    c.arch.ch3 = a.ch3;
    c.total_steps = a.steps.value_or(lifelong_step_count(s.frame_count(), a.context));
  }
  opt.stream = a.stream;
  opt.out_dir = a.out_dir;
  if (!a.eval_stream.empty()) opt.eval_stream = fs::path(a.eval_stream);
  opt.eval_windows = a.eval_windows;
  opt.eval_seed = a.eval_seed;
  if (!a.resume.empty()) opt.resume = fs::path(a.resume);
  opt.log_every = a.log_every;

  const std::uint64_t report_every = std::max<std::uint64_t>(1, c.total_steps / 20);
  double running = 0.0;
  std::uint64_t count = 0;
  const auto res = run_training(opt, [&](const StepStats& st) {
    running += st.loss;
    ++count;
    if (!a.quiet && (st.step + 1) % report_every == 0) {
      std::cerr << "step " << st.step + 1 << "/" << c.total_steps << " mean loss " << format_double(running / count)
                << '\n';
      running = 0.0;
      count = 0;
    }
  });
  std::cout << "trained " << res.steps_done << " steps; checkpoint " << res.checkpoint.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint, stream, stream_label = "test", selection, out;
  std::uint64_t windows = 1000, rollout_windows = 10;
  int trajectories = 3, rounds = 9, sampler_steps = 50, sampling_seeds = 3;
  double churn = 40.0;
  bool no_per_window = false;
};

int cmd_evaluate(const EvalArgs& a) {
  EvaluateOptions opt;
  opt.checkpoint = a.checkpoint;
  opt.stream = a.stream;
  opt.stream_label = a.stream_label;
  if (a.selection == "first") opt.selection = WindowSelection::FirstN;
  else if (a.selection == "even") opt.selection = WindowSelection::EvenlySpaced;
  else if (!a.selection.empty()) throw ConfigError("--selection must be first or even");
  opt.windows = a.windows;
  opt.rollout_windows = a.rollout_windows;
  opt.rollout.trajectories = a.trajectories;
  opt.rollout.rounds = a.rounds;
  opt.rollout.sampler.n_steps = a.sampler_steps;
  opt.rollout.sampler.churn = a.churn;
  opt.sampling_seeds = seed_list(a.sampling_seeds);
  opt.per_window_rows = !a.no_per_window;
  const auto rows = run_evaluate(opt);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_metric_csv(a.out, rows);
  nlohmann::json cfg = {{"windows", a.windows},         {"rollout_windows", a.rollout_windows},
                        {"trajectories", a.trajectories}, {"rounds", a.rounds},
                        {"sampler_steps", a.sampler_steps}, {"churn", a.churn},
                        {"sampling_seeds", a.sampling_seeds}, {"stream_label", a.stream_label},
                        {"selection", a.selection.empty() ? "default" : a.selection}};
  write_manifest(a.out + ".manifest.json", "evaluate", cfg, {a.checkpoint, a.stream}, {a.out});
  for (const auto& r : rows) {
    if (r.window_index == "all" && (r.seed == "mean" || r.seed == "sd")) {
      std::cout << r.metric << " " << r.seed << " " << format_double(r.value) << '\n';
    }
  }
  return 0;
}

struct RolloutArgs {
  std::string checkpoint, stream, out_dir;
  std::uint64_t start = 0, seed = 0;
  int rounds = 9, trajectories = 3, sampler_steps = 50;
  double churn = 40.0;
};

int cmd_rollout(const RolloutArgs& a) {
  const auto model = load_model(a.checkpoint);
  const auto stream = VideoStream::open(a.stream);
  fs::create_directories(a.out_dir);
  SamplerConfig sc;
  sc.n_steps = a.sampler_steps;
  sc.churn = a.churn;
  const int K = model.config.K;
  const int R = stream.width();
  const auto f = model.denoiser();

  std::vector<std::vector<std::vector<std::uint8_t>>> sheet;
  std::vector<Rollout> trajs;
  std::vector<fs::path> outputs;
  {
    std::vector<std::vector<std::uint8_t>> gt;
    const std::uint64_t total = static_cast<std::uint64_t>(K / 2) * (1 + a.rounds);
    for (std::uint64_t k = 0; k < total && a.start + k < stream.frame_count(); ++k) gt.push_back(stream.read_frame(a.start + k));
    sheet.push_back(std::move(gt));
  }
  for (int t = 0; t < a.trajectories; ++t) {
    Rng rng(mix_seed(mix_seed(a.seed, a.start), static_cast<std::uint64_t>(t)));
    auto r = autoregressive_rollout(f, stream, a.start, a.rounds, K, model.schedule, sc, rng);
    StreamHeader h = stream.header();
    h.frame_count = static_cast<std::uint64_t>(K / 2) + r.generated_frames();
    const auto path = fs::path(a.out_dir) / ("rollout_" + std::to_string(t) + ".llvs");
    StreamWriter w(path, h);
    std::vector<std::vector<std::uint8_t>> row;
    const std::size_t fv = r.frame_values();
    for (int k = 0; k < K / 2; ++k) {
      auto bytes = to_bytes(std::span<const float>(r.conditioning).subspan(k * fv, fv));
      w.write_frame(bytes);
      row.push_back(std::move(bytes));
    }
    for (std::size_t k = 0; k < r.generated_frames(); ++k) {
      auto bytes = to_bytes(r.generated_frame(k));
      w.write_frame(bytes);
      row.push_back(std::move(bytes));
    }
    w.finish();
    outputs.push_back(path);
    sheet.push_back(std::move(row));
    trajs.push_back(std::move(r));
  }
  const auto sheet_path = fs::path(a.out_dir) / "contact_sheet.png";
  png::write(sheet_path, png::contact_sheet(sheet, R, 3),
             {{"Title", "row 0: ground truth; rows 1+: sampled rollouts"}});
  outputs.push_back(sheet_path);

  const auto gt_path = sidecar_path(a.stream);
  if (fs::exists(gt_path)) {
    const auto truth = read_sidecar(gt_path);
    if (trajs.front().target_index(trajs.front().generated_frames() - 1) < truth.records.size()) {
      const auto ade = rollout_min_ade(trajs, truth);
      std::cout << "min_ade " << format_double(ade.min_ade) << '\n';
    }
  }
  nlohmann::json cfg = {{"start", a.start},         {"seed", a.seed},       {"rounds", a.rounds},
                        {"trajectories", a.trajectories}, {"sampler_steps", a.sampler_steps}, {"churn", a.churn}};
  write_manifest(fs::path(a.out_dir) / "manifest.json", "rollout", cfg, {a.checkpoint, a.stream}, outputs);
  std::cout << "wrote " << outputs.size() << " files to " << a.out_dir << '\n';
  return 0;
}

struct TimelineArgs {
  std::vector<std::string> checkpoints;
  std::string stream, out_dir;
  int anchors = 5;
  std::uint64_t span = 1000, seed = 0;
};

int cmd_timeline(const TimelineArgs& a) {
  std::vector<fs::path> cks(a.checkpoints.begin(), a.checkpoints.end());
  const auto pts = run_timeline(cks, a.stream, a.anchors, a.span, a.seed);
  write_timeline(a.out_dir, pts);
  std::vector<fs::path> inputs = cks;
  inputs.emplace_back(a.stream);
  write_manifest(fs::path(a.out_dir) / "manifest.json", "timeline",
                 {{"anchors", a.anchors}, {"span", a.span}, {"seed", a.seed}}, inputs,
                 {fs::path(a.out_dir) / "timeline.csv", fs::path(a.out_dir) / "timeline.png"});
  for (const auto& p : pts) {
    std::cout << p.regime << " anchor " << p.anchor << " eval_loss " << format_double(p.eval_loss) << '\n';
  }
  return 0;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out = "report.csv";
};

int cmd_report(const ReportArgs& a) {
  std::vector<std::string> missing;
  for (const auto& p : a.inputs)
    if (!fs::exists(p)) missing.push_back(p);
  if (!missing.empty()) {
    std::string msg = "missing input files:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  std::vector<std::vector<MetricRow>> files;
  for (const auto& p : a.inputs) files.push_back(read_metric_csv(p));
  const auto cells = aggregate_report(files);
  const auto parity = parity_checks(cells);
  const auto text = format_report(cells, parity);
  std::ofstream f(a.out, std::ios::trunc);
  if (!f) throw IoError(a.out + ": cannot open for writing");
  f << text;
  std::vector<fs::path> inputs(a.inputs.begin(), a.inputs.end());
  write_manifest(a.out + ".manifest.json", "report", {{"inputs", a.inputs.size()}}, inputs, {a.out});
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong bouncing-balls video diffusion experiments"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file; [subcommand] sections hold key=value option defaults");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-stream", "Generate a bouncing-balls stream and its ground-truth sidecar");
  g->add_option("--version", gen.version, "Dataset version: o (stationary) or c (blue drift)")->required();
  g->add_option("--frames", gen.frames, "Number of frames")->required();
  g->add_option("--seed", gen.seed, "Initial-state seed");
  g->add_option("--out", gen.out, "Output stream path (sidecar gets a .gt suffix)")->required();
  g->add_option("--resolution", gen.resolution, "Frame width and height in pixels");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one regime on a stream");
  t->add_option("--stream", tr.stream, "Training stream")->required();
  t->add_option("--out-dir", tr.out_dir, "Directory for checkpoints, log and manifest")->required();
  t->add_option("--regime", tr.regime, "offline | no-replay | replay | full-replay");
  t->add_option("--steps", tr.steps, "Optimizer steps (default: frames - K + 1)");
  t->add_option("--batch-size", tr.batch_size, "Loss terms per step");
  t->add_option("--context", tr.context, "Window length K");
  t->add_option("--diffusion-steps", tr.diffusion_steps, "Noise schedule length S");
  t->add_option("--lr", tr.lr, "AdamW learning rate");
  t->add_option("--weight-decay", tr.weight_decay, "AdamW decoupled weight decay");
  t->add_option("--grad-clip", tr.grad_clip, "Global gradient-norm threshold (off when absent)");
  t->add_option("--buffer-fraction", tr.buffer_fraction, "Replay buffer size as a fraction of stream frames");
  t->add_option("--init-seed", tr.init_seed, "Parameter initialization seed");
  t->add_option("--data-seed", tr.data_seed, "Window sampling and buffer seed");
  t->add_option("--noise-seed", tr.noise_seed, "Diffusion noise seed");
  t->add_option("--checkpoint-every", tr.checkpoint_every, "Intermediate checkpoint cadence (0 = off)");
  t->add_option("--eval-every", tr.eval_every, "Eval-loss cadence on --eval-stream (0 = off)");
  t->add_option("--eval-stream", tr.eval_stream, "Held-out stream for the periodic eval curve");
  t->add_option("--eval-windows", tr.eval_windows, "Windows per periodic evaluation");
  t->add_option("--eval-seed", tr.eval_seed, "Noise seed for periodic evaluation");
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");
  t->add_option("--log-every", tr.log_every, "Write every n-th step to the training log");
  t->add_option("--ch1", tr.ch1, "U-Net channels at full resolution");
  t->add_option("--ch2", tr.ch2, "U-Net channels at half resolution");
  t->add_option("--ch3", tr.ch3, "U-Net bottleneck channels");
  t->add_flag("--quiet", tr.quiet, "No progress output");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint: eval loss, minADE, ColorKL");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--stream", ev.stream, "Stream to evaluate on (sidecar needed for rollout metrics)")->required();
  e->add_option("--stream-label", ev.stream_label, "Label for the stream column (train or test)");
  e->add_option("--selection", ev.selection, "first | even (default: first for O, even for C)");
  e->add_option("--windows", ev.windows, "Eval-loss windows");
  e->add_option("--rollout-windows", ev.rollout_windows, "Windows used for rollout metrics (0 = skip)");
  e->add_option("--trajectories", ev.trajectories, "Sampled trajectories per rollout window");
  e->add_option("--rounds", ev.rounds, "Autoregressive rounds per rollout");
  e->add_option("--sampler-steps", ev.sampler_steps, "Sampler steps per round");
  e->add_option("--churn", ev.churn, "Sampler churn");
  e->add_option("--sampling-seeds", ev.sampling_seeds, "Number of sampling seeds (0..n-1)");
  e->add_option("--out", ev.out, "Metric CSV path")->required();
  e->add_flag("--no-per-window", ev.no_per_window, "Only write aggregate rows");

  RolloutArgs ro;
  auto* r = app.add_subcommand("rollout", "Export sampled rollouts and a contact sheet");
  r->add_option("--checkpoint", ro.checkpoint, "Checkpoint file")->required();
  r->add_option("--stream", ro.stream, "Stream providing the conditioning frames")->required();
  r->add_option("--start", ro.start, "First conditioning frame");
  r->add_option("--rounds", ro.rounds, "Autoregressive rounds");
  r->add_option("--trajectories", ro.trajectories, "Number of sampled rollouts");
  r->add_option("--seed", ro.seed, "Sampling seed");
  r->add_option("--sampler-steps", ro.sampler_steps, "Sampler steps per round");
  r->add_option("--churn", ro.churn, "Sampler churn");
  r->add_option("--out-dir", ro.out_dir, "Output directory")->required();

  TimelineArgs tl;
  auto* m = app.add_subcommand("timeline", "Eval loss at evenly spaced train-stream positions");
  m->add_option("--checkpoint", tl.checkpoints, "Checkpoint(s); one series per checkpoint")->required();
  m->add_option("--stream", tl.stream, "Training stream")->required();
  m->add_option("--anchors", tl.anchors, "Number of anchor positions");
  m->add_option("--span", tl.span, "Consecutive windows scored after each anchor");
  m->add_option("--seed", tl.seed, "Noise seed");
  m->add_option("--out-dir", tl.out_dir, "Output directory")->required();

  ReportArgs rp;
  auto* p = app.add_subcommand("report", "Aggregate metric CSVs into a summary table");
  p->add_option("--input", rp.inputs, "Metric CSV files")->required();
  p->add_option("--out", rp.out, "Summary CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::Config);
  }

  try {
    if (*g) return cmd_gen_stream(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_evaluate(ev);
    if (*r) return cmd_rollout(ro);
    if (*m) return cmd_timeline(tl);
    if (*p) return cmd_report(rp);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(err.exit_code());
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::Io);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::Config);
  }
  return static_cast<int>(ExitCode::Config);
}
