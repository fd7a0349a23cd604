#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "llbb/ballworld.hpp"
#include "llbb/errors.hpp"

namespace llbb {

struct BallObservation {
  Vec2 center;  // pixel units, origin at the top-left corner of the frame
  std::optional<BallColor> color;
  double match_score = 0.0;
};

struct ExtractConfig {
  double radius_fraction = 0.15;  // ball radius as a fraction of the frame width
  double score_floor = 0.35;      // mean template intensity below which a peak is dropped
  double suppression_factor = 1.5;  // non-maximum suppression radius in ball radii
};

namespace detail {

struct DiscTemplate {
  int half = 0;  // template spans [-half, half] in both axes
  std::vector<double> weights;
  double sum = 0.0;

  double at(int dy, int dx) const { return weights[static_cast<std::size_t>(dy + half) * (2 * half + 1) + dx + half]; }
};

// Anti-aliased disc centred on a pixel centre, same 4x4 coverage rule as the renderer.
inline DiscTemplate make_disc_template(double radius) {
  DiscTemplate t;
  t.half = static_cast<int>(std::ceil(radius));
  const int n = 2 * t.half + 1;
  t.weights.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int dy = -t.half; dy <= t.half; ++dy) {
    for (int dx = -t.half; dx <= t.half; ++dx) {
      int covered = 0;
      for (int j = 0; j < 4; ++j) {
        const double sy = dy - 0.5 + (j + 0.5) / 4.0;
        for (int i = 0; i < 4; ++i) {
          const double sx = dx - 0.5 + (i + 0.5) / 4.0;
          if (sx * sx + sy * sy <= radius * radius) ++covered;
        }
      }
      const double w = covered / 16.0;
      t.weights[static_cast<std::size_t>(dy + t.half) * n + dx + t.half] = w;
      t.sum += w;
    }
  }
  return t;
}

}  // namespace detail

// Locates up to two balls by cross-correlating ball intensity with a disc
// template. Intensity is max(R, G): every ball color has a saturated red or
// green channel, so all balls are equally bright and blue drift is ignored.
// `frame` holds normalized [-1, 1] HWC values of a square frame.
inline std::vector<BallObservation> extract_balls(std::span<const float> frame, int resolution,
                                                  const ExtractConfig& cfg = {}) {
  const int n = resolution;
  if (frame.size() != static_cast<std::size_t>(n) * n * 3) throw ContractError("extract_balls: wrong frame size");
  const double radius = cfg.radius_fraction * n;
  const auto tmpl = detail::make_disc_template(radius);

  std::vector<double> lum(static_cast<std::size_t>(n) * n);
  for (std::size_t p = 0; p < lum.size(); ++p) {
    const double r = (frame[p * 3] + 1.0) * 0.5;
    const double g = (frame[p * 3 + 1] + 1.0) * 0.5;
    lum[p] = std::clamp(std::max(r, g), 0.0, 1.0);
  }
  std::vector<double> score(lum.size(), 0.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int dy = -tmpl.half; dy <= tmpl.half; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= n) continue;
        for (int dx = -tmpl.half; dx <= tmpl.half; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= n) continue;
          acc += tmpl.at(dy, dx) * lum[static_cast<std::size_t>(yy) * n + xx];
        }
      }
      score[static_cast<std::size_t>(y) * n + x] = acc / tmpl.sum;
    }
  }

  std::vector<BallObservation> out;
  std::vector<bool> suppressed(score.size(), false);
  const double supp = cfg.suppression_factor * radius;
  for (int k = 0; k < 2; ++k) {
    std::size_t best = score.size();
    for (std::size_t p = 0; p < score.size(); ++p) {
      if (!suppressed[p] && (best == score.size() || score[p] > score[best])) best = p;
    }
    if (best == score.size() || score[best] < cfg.score_floor) break;
    const int py = static_cast<int>(best) / n;
    const int px = static_cast<int>(best) % n;

    // Sub-pixel refinement: centroid of the baseline-subtracted 3x3 neighbourhood.
    double base = score[best];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int yy = std::clamp(py + dy, 0, n - 1);
        const int xx = std::clamp(px + dx, 0, n - 1);
        base = std::min(base, score[static_cast<std::size_t>(yy) * n + xx]);
      }
    double wsum = 0.0, ox = 0.0, oy = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int yy = py + dy;
        const int xx = px + dx;
        if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
        const double w = score[static_cast<std::size_t>(yy) * n + xx] - base;
        wsum += w;
        ox += w * dx;
        oy += w * dy;
      }
    BallObservation obs;
    obs.center = {px + 0.5 + (wsum > 0 ? ox / wsum : 0.0), py + 0.5 + (wsum > 0 ? oy / wsum : 0.0)};
    obs.match_score = score[best];

    // Color: mean red/green over the disc interior; blue is ignored so the
    // version-C drift does not move the label.
    double rs = 0.0, gs = 0.0, cnt = 0.0;
    const double inner = 0.6 * radius;
    for (int y = std::max(0, static_cast<int>(obs.center.y - inner)); y <= std::min(n - 1, static_cast<int>(obs.center.y + inner)); ++y) {
      for (int x = std::max(0, static_cast<int>(obs.center.x - inner)); x <= std::min(n - 1, static_cast<int>(obs.center.x + inner)); ++x) {
        const double ddx = x + 0.5 - obs.center.x;
        const double ddy = y + 0.5 - obs.center.y;
        if (ddx * ddx + ddy * ddy > inner * inner) continue;
        const std::size_t p = static_cast<std::size_t>(y) * n + x;
        rs += (frame[p * 3] + 1.0) * 0.5;
        gs += (frame[p * 3 + 1] + 1.0) * 0.5;
        cnt += 1.0;
      }
    }
    if (cnt > 0) {
      const double r = rs / cnt, g = gs / cnt;
      const std::array<std::pair<BallColor, Vec2>, 3> refs = {
          {{BallColor::Red, {1.0, 0.0}}, {BallColor::Yellow, {1.0, 1.0}}, {BallColor::Green, {0.0, 1.0}}}};
      double best_d = 1e30;
      for (const auto& [c, ref] : refs) {
        const double d = (Vec2{r, g} - ref).norm();
        if (d < best_d) {
          best_d = d;
          obs.color = c;
        }
      }
    }
    out.push_back(obs);

    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double ddx = x - px, ddy = y - py;
        if (ddx * ddx + ddy * ddy < supp * supp) suppressed[static_cast<std::size_t>(y) * n + x] = true;
      }
  }
  return out;
}

inline std::vector<BallObservation> extract_balls(std::span<const std::uint8_t> frame, int resolution,
                                                  const ExtractConfig& cfg = {}) {
  std::vector<float> f(frame.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(frame[i]) / 127.5f - 1.0f;
  return extract_balls(std::span<const float>(f), resolution, cfg);
}

// Sum of distances for the best assignment of observations to the two true
// centers; unmatched true balls cost `penalty` each.
inline double frame_displacement(const std::vector<BallObservation>& obs, const std::array<Vec2, 2>& truth,
                                 double penalty) {
  if (obs.size() >= 2) {
    const double direct = (obs[0].center - truth[0]).norm() + (obs[1].center - truth[1]).norm();
    const double swapped = (obs[0].center - truth[1]).norm() + (obs[1].center - truth[0]).norm();
    return std::min(direct, swapped);
  }
  if (obs.size() == 1) {
    return std::min((obs[0].center - truth[0]).norm(), (obs[0].center - truth[1]).norm()) + penalty;
  }
  return 2.0 * penalty;
}

struct AdeResult {
  double min_ade = 0.0;
  std::vector<double> per_trajectory;
};

// predicted[r][f]: extracted balls of frame f of trajectory r; truth[f]: true centers.
inline AdeResult min_ade(const std::vector<std::vector<std::vector<BallObservation>>>& predicted,
                         const std::vector<std::array<Vec2, 2>>& truth, int resolution) {
  if (predicted.empty()) throw ContractError("min_ade: no trajectories");
  const double penalty = std::sqrt(2.0) * resolution;
  AdeResult r;
  for (const auto& traj : predicted) {
    if (traj.size() != truth.size()) {
      throw ContractError("min_ade: trajectory has " + std::to_string(traj.size()) + " frames, ground truth has " +
                          std::to_string(truth.size()));
    }
    if (traj.empty()) throw ContractError("min_ade: empty trajectory");
    double total = 0.0;
    for (std::size_t f = 0; f < traj.size(); ++f) total += frame_displacement(traj[f], truth[f], penalty);
    r.per_trajectory.push_back(total / (2.0 * static_cast<double>(traj.size())));
  }
  r.min_ade = *std::min_element(r.per_trajectory.begin(), r.per_trajectory.end());
  return r;
}

struct TransitionTally {
  std::array<std::array<std::uint64_t, 3>, 3> counts{};  // [old][new], indexed by BallColor

  void add(BallColor from, BallColor to, std::uint64_t n = 1) {
    counts[static_cast<int>(from)][static_cast<int>(to)] += n;
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts)
      for (auto c : row) t += c;
    return t;
  }
  TransitionTally& operator+=(const TransitionTally& o) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
};

// Records a transition whenever a tracked ball's label changes between
// consecutive frames. Balls are matched across frames by nearest center.
inline TransitionTally tally_transitions(const std::vector<std::vector<BallObservation>>& frames, double max_jump) {
  TransitionTally tally;
  for (std::size_t f = 1; f < frames.size(); ++f) {
    const auto& prev = frames[f - 1];
    const auto& cur = frames[f];
    if (prev.empty() || cur.empty()) continue;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (prev.size() >= 2 && cur.size() >= 2) {
      const double direct = (prev[0].center - cur[0].center).norm() + (prev[1].center - cur[1].center).norm();
      const double swapped = (prev[0].center - cur[1].center).norm() + (prev[1].center - cur[0].center).norm();
      if (direct <= swapped) pairs = {{0, 0}, {1, 1}};
      else pairs = {{0, 1}, {1, 0}};
    } else {
      double best = 1e30;
      std::pair<std::size_t, std::size_t> bp{0, 0};
      for (std::size_t i = 0; i < prev.size(); ++i)
        for (std::size_t j = 0; j < cur.size(); ++j) {
          const double d = (prev[i].center - cur[j].center).norm();
          if (d < best) {
            best = d;
            bp = {i, j};
          }
        }
      pairs = {bp};
    }
    for (auto [i, j] : pairs) {
      if ((prev[i].center - cur[j].center).norm() > max_jump) continue;
      if (!prev[i].color || !cur[j].color) continue;
      if (*prev[i].color != *cur[j].color) tally.add(*prev[i].color, *cur[j].color);
    }
  }
  return tally;
}

// Ground-truth transition law: red -> yellow/green at 50/50, yellow -> red, green -> red.
inline std::array<std::array<double, 3>, 3> true_transition_probs() {
  return {{{0.0, 0.5, 0.5}, {1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}}};
}

// Mean over source colors of KL(p* || p_model), with p_model Laplace-smoothed by alpha.
inline double color_kl(const TransitionTally& tally, double alpha = 1.0) {
  if (tally.total() == 0) throw UndefinedMetricError("color_kl: no transitions were tallied");
  if (!(alpha > 0.0)) throw ConfigError("color_kl: smoothing alpha must be positive");
  const auto truth = true_transition_probs();
  double acc = 0.0;
  for (int from = 0; from < 3; ++from) {
    double row_total = 0.0;
    for (int to = 0; to < 3; ++to) row_total += static_cast<double>(tally.counts[from][to]);
    double kl = 0.0;
    for (int to = 0; to < 3; ++to) {
      const double p = truth[from][to];
      if (p == 0.0) continue;
      const double q = (static_cast<double>(tally.counts[from][to]) + alpha) / (row_total + 3.0 * alpha);
      kl += p * std::log(p / q);
    }
    acc += kl;
  }
  return acc / 3.0;
}

}  // namespace llbb
