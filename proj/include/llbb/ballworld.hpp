#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "llbb/binary_io.hpp"
#include "llbb/errors.hpp"
#include "llbb/rng.hpp"
#include "llbb/stream_store.hpp"

namespace llbb {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
  double& operator[](int axis) { return axis == 0 ? x : y; }
  double operator[](int axis) const { return axis == 0 ? x : y; }
  bool operator==(const Vec2&) const = default;
};

enum class BallColor : std::uint8_t { Red = 0, Yellow = 1, Green = 2 };

inline constexpr std::array<BallColor, 4> kPhaseColors = {BallColor::Red, BallColor::Yellow, BallColor::Red,
                                                         BallColor::Green};

inline const char* to_string(BallColor c) {
  switch (c) {
    case BallColor::Red: return "red";
    case BallColor::Yellow: return "yellow";
    case BallColor::Green: return "green";
  }
  return "?";
}

inline std::array<std::uint8_t, 3> base_rgb(BallColor c) {
  switch (c) {
    case BallColor::Red: return {255, 0, 0};
    case BallColor::Yellow: return {255, 255, 0};
    case BallColor::Green: return {0, 255, 0};
  }
  return {0, 0, 0};
}

struct Ball {
  Vec2 pos;
  Vec2 vel;
  double radius = 0.15;
  std::uint8_t color_phase = 0;  // 0..3 -> red, yellow, red, green

  BallColor color() const { return kPhaseColors[color_phase & 3]; }
  bool operator==(const Ball&) const = default;
};

struct WorldState {
  std::array<Ball, 2> balls;
  std::uint64_t frame_index = 0;
  std::uint64_t stream_length = 1;
  DatasetVersion version = DatasetVersion::O;
  std::uint64_t rng_seed = 0;

  bool operator==(const WorldState&) const = default;
};

struct CollisionEvent {
  enum class Kind { Wall, BallBall };
  Kind kind = Kind::Wall;
  std::array<bool, 2> involved{false, false};
  std::uint64_t frame_index = 0;
};

struct WorldConfig {
  double radius = 0.15;
  double min_speed = 0.03;
  double max_speed = 0.06;
  int max_init_attempts = 10000;
};

// Sidecar event bitmask.
inline constexpr std::uint8_t kEventBall0Wall = 1u << 0;
inline constexpr std::uint8_t kEventBall1Wall = 1u << 1;
inline constexpr std::uint8_t kEventBallBall = 1u << 2;

inline std::uint8_t event_mask(const std::vector<CollisionEvent>& events) {
  std::uint8_t mask = 0;
  for (const auto& e : events) {
    if (e.kind == CollisionEvent::Kind::BallBall) {
      mask |= kEventBallBall;
    } else {
      if (e.involved[0]) mask |= kEventBall0Wall;
      if (e.involved[1]) mask |= kEventBall1Wall;
    }
  }
  return mask;
}

inline WorldState init_world(std::uint64_t seed, DatasetVersion version, std::uint64_t stream_length,
                             const WorldConfig& cfg = {}, int K = kDefaultContext) {
  if (stream_length < static_cast<std::uint64_t>(K)) {
    throw ConfigError("stream_length " + std::to_string(stream_length) + " is shorter than K=" + std::to_string(K));
  }
  if (cfg.radius <= 0.0 || cfg.radius >= 0.25) throw ConfigError("ball radius must lie in (0, 0.25)");
  WorldState s;
  s.version = version;
  s.stream_length = stream_length;
  s.rng_seed = seed;
  Rng rng(seed);
  const double r = cfg.radius;
  int attempts = 0;
  while (true) {
    if (++attempts > cfg.max_init_attempts) {
      throw ConfigError("init_world: could not place non-overlapping balls after " +
                        std::to_string(cfg.max_init_attempts) + " attempts");
    }
    for (auto& b : s.balls) b.pos = {rng.uniform(r, 1.0 - r), rng.uniform(r, 1.0 - r)};
    if ((s.balls[0].pos - s.balls[1].pos).norm() >= 2.0 * r) break;
  }
  for (auto& b : s.balls) {
    b.radius = r;
    const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    b.vel = {speed * std::cos(angle), speed * std::sin(angle)};
    b.color_phase = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  }
  return s;
}

// Equal-mass elastic exchange of the velocity components along the line of
// centers. Returns false (and leaves velocities alone) when the balls are
// already separating.
inline bool resolve_ball_ball(Ball& a, Ball& b) {
  const Vec2 d = b.pos - a.pos;
  const double dist = d.norm();
  if (dist == 0.0) return false;
  const Vec2 n = d * (1.0 / dist);
  const double approach = (a.vel - b.vel).dot(n);
  if (approach <= 0.0) return false;
  a.vel -= n * approach;
  b.vel += n * approach;
  return true;
}

inline double kinetic_energy(const WorldState& s) {
  return 0.5 * (s.balls[0].vel.dot(s.balls[0].vel) + s.balls[1].vel.dot(s.balls[1].vel));
}

inline Vec2 total_momentum(const WorldState& s) { return s.balls[0].vel + s.balls[1].vel; }

namespace detail {

// Reflect a ball that left the arena back about the wall line; returns true
// when the velocity component was flipped.
inline bool reflect_walls(Ball& b) {
  bool hit = false;
  for (int axis = 0; axis < 2; ++axis) {
    const double lo = b.radius;
    const double hi = 1.0 - b.radius;
    if (b.pos[axis] < lo) {
      b.pos[axis] = 2.0 * lo - b.pos[axis];
      if (b.vel[axis] < 0.0) {
        b.vel[axis] = -b.vel[axis];
        hit = true;
      }
    } else if (b.pos[axis] > hi) {
      b.pos[axis] = 2.0 * hi - b.pos[axis];
      if (b.vel[axis] > 0.0) {
        b.vel[axis] = -b.vel[axis];
        hit = true;
      }
    }
    b.pos[axis] = std::clamp(b.pos[axis], lo, hi);
  }
  return hit;
}

inline double overlap(const Ball& a, const Ball& b) {
  return a.radius + b.radius - (b.pos - a.pos).norm();
}

inline bool in_bounds(const Ball& b) {
  return b.pos.x >= b.radius && b.pos.x <= 1.0 - b.radius && b.pos.y >= b.radius && b.pos.y <= 1.0 - b.radius;
}

inline void separate(Ball& a, Ball& b, double gap) {
  Vec2 d = b.pos - a.pos;
  double dist = d.norm();
  if (dist == 0.0) {
    d = {1.0, 0.0};
    dist = 1.0;
  }
  const Vec2 n = d * (1.0 / dist);
  a.pos -= n * (0.5 * gap);
  b.pos += n * (0.5 * gap);
}

}  // namespace detail

// Advances one frame. Velocities change only by wall reflection or by the
// elastic normal exchange, so kinetic energy is preserved exactly up to
// rounding. Each ball advances its color phase at most once per frame.
inline std::pair<WorldState, std::vector<CollisionEvent>> step_world(const WorldState& state) {
  WorldState s = state;
  s.frame_index += 1;
  std::vector<CollisionEvent> events;
  std::array<bool, 2> advanced{false, false};
  auto& a = s.balls[0];
  auto& b = s.balls[1];

  a.pos += a.vel;
  b.pos += b.vel;

  constexpr double kContactTol = 1e-12;
  if (detail::overlap(a, b) > kContactTol) {
    if (resolve_ball_ball(a, b)) {
      events.push_back({CollisionEvent::Kind::BallBall, {true, true}, s.frame_index});
      advanced = {true, true};
    }
    detail::separate(a, b, detail::overlap(a, b));
  }

  std::array<bool, 2> wall_hit{false, false};
  for (int pass = 0; pass < 8; ++pass) {
    for (int i = 0; i < 2; ++i) wall_hit[i] = detail::reflect_walls(s.balls[i]) || wall_hit[i];
    const double ov = detail::overlap(a, b);
    if (ov <= 0.0) break;
    // Wall correction pushed the balls back into contact; separate again,
    // letting the next pass pull either ball back inside the arena.
    if (resolve_ball_ball(a, b) && !advanced[0]) {
      events.push_back({CollisionEvent::Kind::BallBall, {true, true}, s.frame_index});
      advanced = {true, true};
    }
    detail::separate(a, b, ov + 1e-12);
  }
  if (detail::overlap(a, b) > 0.0) {
    // Both balls pinned near walls: place one at exact contact distance from
    // the other, preferring a placement that stays inside the arena.
    for (Ball* mover : {&b, &a}) {
      Ball& other = (mover == &a) ? b : a;
      const Vec2 d = mover->pos - other.pos;
      const double dist = d.norm();
      const Vec2 n = dist > 0.0 ? d * (1.0 / dist) : Vec2{1.0, 0.0};
      Ball trial = *mover;
      trial.pos = other.pos + n * (mover->radius + other.radius + 1e-12);
      if (detail::in_bounds(trial)) {
        mover->pos = trial.pos;
        break;
      }
    }
  }

  for (int i = 0; i < 2; ++i) {
    if (wall_hit[i]) {
      CollisionEvent e{CollisionEvent::Kind::Wall, {false, false}, s.frame_index};
      e.involved[i] = true;
      events.push_back(e);
      advanced[i] = true;
    }
  }
  for (int i = 0; i < 2; ++i) {
    if (advanced[i]) s.balls[i].color_phase = static_cast<std::uint8_t>((s.balls[i].color_phase + 1) & 3);
  }
  return {s, std::move(events)};
}

// RGB color of a ball in the given state, including the version-C blue drift.
inline std::array<std::uint8_t, 3> ball_rgb(const WorldState& s, const Ball& b) {
  auto rgb = base_rgb(b.color());
  if (s.version == DatasetVersion::C) {
    const double denom = s.stream_length > 1 ? static_cast<double>(s.stream_length - 1) : 1.0;
    rgb[2] = static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(s.frame_index) / denom));
  }
  return rgb;
}

// Renders both balls as anti-aliased discs; coverage is estimated on a 4x4
// subpixel grid and overlapping contributions are summed then clamped.
inline std::vector<std::uint8_t> render_frame(const WorldState& s, int resolution = kDefaultResolution) {
  const int n = resolution;
  std::vector<double> accum(static_cast<std::size_t>(n) * n * 3, 0.0);
  for (const auto& b : s.balls) {
    const auto rgb = ball_rgb(s, b);
    const double cx = b.pos.x * n;
    const double cy = b.pos.y * n;
    const double rad = b.radius * n;
    const double r2 = rad * rad;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rad)));
    const int x1 = std::min(n - 1, static_cast<int>(std::floor(cx + rad)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - rad)));
    const int y1 = std::min(n - 1, static_cast<int>(std::floor(cy + rad)));
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        int covered = 0;
        for (int j = 0; j < 4; ++j) {
          const double sy = py + (j + 0.5) / 4.0 - cy;
          for (int i = 0; i < 4; ++i) {
            const double sx = px + (i + 0.5) / 4.0 - cx;
            if (sx * sx + sy * sy <= r2) ++covered;
          }
        }
        if (covered == 0) continue;
        const double cov = covered / 16.0;
        double* dst = &accum[(static_cast<std::size_t>(py) * n + px) * 3];
        for (int c = 0; c < 3; ++c) dst[c] += cov * rgb[c];
      }
    }
  }
  std::vector<std::uint8_t> frame(accum.size());
  for (std::size_t i = 0; i < accum.size(); ++i) {
    frame[i] = static_cast<std::uint8_t>(std::clamp(std::lround(accum[i]), 0L, 255L));
  }
  return frame;
}

struct BallRecord {
  Vec2 pos;
  Vec2 vel;
  std::uint8_t color_phase = 0;
};

struct SidecarRecord {
  std::array<BallRecord, 2> balls;
  std::uint8_t events = 0;
};

inline constexpr std::size_t kSidecarRecordBytes = 2 * (4 * 8 + 1) + 1;

inline std::filesystem::path sidecar_path(const std::filesystem::path& stream_path) {
  return std::filesystem::path(stream_path.string() + ".gt");
}

struct Sidecar {
  StreamHeader header;
  std::vector<SidecarRecord> records;

  // Ball centers of frame i in pixel units.
  std::array<Vec2, 2> centers_px(std::uint64_t i) const {
    const double w = header.width;
    return {records[i].balls[0].pos * w, records[i].balls[1].pos * w};
  }
};

inline Sidecar read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open sidecar");
  std::uint8_t head[StreamHeader::kSize];
  io::get_bytes(in, head, sizeof head, "sidecar header");
  Sidecar sc;
  try {
    sc.header = StreamHeader::parse(head, "BBGT");
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  sc.records.resize(sc.header.frame_count);
  for (auto& rec : sc.records) {
    for (auto& b : rec.balls) {
      b.pos.x = io::get<double>(in, "pos.x");
      b.pos.y = io::get<double>(in, "pos.y");
      b.vel.x = io::get<double>(in, "vel.x");
      b.vel.y = io::get<double>(in, "vel.y");
      b.color_phase = io::get<std::uint8_t>(in, "color_phase");
    }
    rec.events = io::get<std::uint8_t>(in, "events");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes in sidecar");
  return sc;
}

struct GeneratedStream {
  std::filesystem::path stream;
  std::filesystem::path sidecar;
};

inline GeneratedStream generate_stream(std::uint64_t seed, DatasetVersion version, std::uint64_t stream_length,
                                       const std::filesystem::path& out_path, int resolution = kDefaultResolution,
                                       const WorldConfig& cfg = {}) {
  if (resolution < 8 || resolution > 1024) throw ConfigError("resolution must lie in [8, 1024]");
  StreamHeader header;
  header.width = static_cast<std::uint16_t>(resolution);
  header.height = static_cast<std::uint16_t>(resolution);
  header.dataset_version = version;
  header.frame_count = stream_length;

  WorldState state = init_world(seed, version, stream_length, cfg);
  if (out_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(out_path.parent_path(), ec);
    if (ec) throw IoError(out_path.parent_path().string() + ": cannot create directory (" + ec.message() + ")");
  }
  StreamWriter writer(out_path, header);
  const auto gt_path = sidecar_path(out_path);
  std::ofstream gt(gt_path, std::ios::binary | std::ios::trunc);
  if (!gt) throw IoError(gt_path.string() + ": cannot open for writing");
  StreamHeader gt_header = header;
  std::memcpy(gt_header.magic, "BBGT", 4);
  gt_header.write(gt);

  std::uint8_t events = 0;
  for (std::uint64_t i = 0; i < stream_length; ++i) {
    writer.write_frame(render_frame(state, resolution));
    for (const auto& b : state.balls) {
      io::put(gt, b.pos.x);
      io::put(gt, b.pos.y);
      io::put(gt, b.vel.x);
      io::put(gt, b.vel.y);
      io::put(gt, b.color_phase);
    }
    io::put(gt, events);
    if (i + 1 < stream_length) {
      auto [next, evs] = step_world(state);
      state = next;
      events = event_mask(evs);
    }
  }
  writer.finish();
  gt.flush();
  if (!gt) throw IoError(gt_path.string() + ": write failed");
  return {out_path, gt_path};
}

}  // namespace llbb
