/*
 Copyright 2026 The driftcpp Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftcpp/vehicle.hpp"

namespace driftcpp {

inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

// One clothoid segment: curvature varies linearly from kappa0 at rate
// kappa_rate over the arc length.
struct ClothoidSegment {
  double length = 0.0;
  double kappa0 = 0.0;
  double kappa_rate = 0.0;
};

struct PathSample {
  double s = 0.0;
  double X = 0.0;
  double Y = 0.0;
  double phi = 0.0;
  double kappa = 0.0;
};

// Arc-length-parameterized reference path with a precomputed sample table
// at 0.1 m spacing.
struct ClothoidPath {
  std::vector<ClothoidSegment> segments;
  std::vector<PathSample> samples;
  bool closed = false;
  double total_length = 0.0;

  double wrap_s(double s) const {
    if (!closed) return std::clamp(s, 0.0, total_length);
    s = std::fmod(s, total_length);
    if (s < 0) s += total_length;
    return s;
  }

  // Linear interpolation in the sample table.
  PathSample at(double s) const {
    const double sw = wrap_s(s);
    const double spacing = samples[1].s - samples[0].s;
    const size_t n = samples.size();
    size_t i = std::min(size_t(sw / spacing), n - 2);
    const PathSample& a = samples[i];
    const PathSample& b = samples[i + 1];
    const double t = (sw - a.s) / (b.s - a.s);
    PathSample out;
    out.s = sw;
    out.X = a.X + t * (b.X - a.X);
    out.Y = a.Y + t * (b.Y - a.Y);
    out.phi = a.phi + t * wrap_angle(b.phi - a.phi);
    out.kappa = a.kappa + t * (b.kappa - a.kappa);
    return out;
  }
};

// Integrates X' = cos(phi), Y' = sin(phi), phi' = kappa(s) over the segment
// list. Rejects specs whose curvature jumps at a joint.
inline ClothoidPath build_clothoid_path(
    const std::vector<ClothoidSegment>& segments, bool closed,
    double sample_spacing = 0.1) {
  if (segments.empty())
    throw std::invalid_argument("build_clothoid_path: no segments");
  for (size_t i = 1; i < segments.size(); ++i) {
    const double k_end =
        segments[i - 1].kappa0 + segments[i - 1].kappa_rate * segments[i - 1].length;
    if (std::abs(k_end - segments[i].kappa0) > 1e-9)
      throw std::invalid_argument(
          "build_clothoid_path: curvature discontinuity at segment joint");
  }
  ClothoidPath path;
  path.segments = segments;
  path.closed = closed;
  for (const auto& seg : segments) path.total_length += seg.length;

  // fine RK4 integration, sampled at sample_spacing
  const double h = sample_spacing / 10.0;
  double s = 0.0, X = 0.0, Y = 0.0, phi = 0.0;
  double next_sample = 0.0;
  size_t seg_idx = 0;
  double seg_start = 0.0;
  auto kappa_at = [&](double sq) {
    while (seg_idx + 1 < segments.size() &&
           sq > seg_start + segments[seg_idx].length + 1e-12) {
      seg_start += segments[seg_idx].length;
      ++seg_idx;
    }
    const auto& seg = segments[seg_idx];
    return seg.kappa0 + seg.kappa_rate * (sq - seg_start);
  };
  while (true) {
    if (s >= next_sample - 1e-9) {
      path.samples.push_back({s, X, Y, wrap_angle(phi), kappa_at(s)});
      next_sample += sample_spacing;
    }
    if (s >= path.total_length - 1e-9) {
      // make sure the table ends exactly at the path end
      if (path.samples.back().s < path.total_length - 1e-9)
        path.samples.push_back(
            {path.total_length, X, Y, wrap_angle(phi), kappa_at(s)});
      break;
    }
    const double step = std::min(h, path.total_length - s);
    // phi advances independently of X, Y; use the exact quadratic of the
    // linear curvature profile and Simpson for the position
    const double k1 = kappa_at(s);
    const double km = kappa_at(s + step / 2.0);
    const double k2 = kappa_at(s + step);
    const double phi_mid = phi + (step / 2.0) * (k1 + km) / 2.0;
    const double phi_end = phi + step * (k1 + 4.0 * km + k2) / 6.0;
    X += step * (std::cos(phi) + 4.0 * std::cos(phi_mid) + std::cos(phi_end)) / 6.0;
    Y += step * (std::sin(phi) + 4.0 * std::sin(phi_mid) + std::sin(phi_end)) / 6.0;
    phi = phi_end;
    s += step;
  }
  return path;
}

// Built-in closed drift loop: two symmetric halves, each an R=20 arc, a
// clothoid ramp to R=45, an R=45 arc and a ramp back. The half-turn is
// exactly pi so the loop closes by central symmetry.
inline ClothoidPath default_drift_loop() {
  const double k_hi = 1.0 / 20.0;
  const double k_lo = 1.0 / 45.0;
  const double L_ramp = 20.0;
  // Short dwell on the gentle radius: the drift equilibrium speed scales
  // with sqrt(R), and with no braking the car can only shed speed slowly,
  // so a long gentle arc sends it into the tight arc far above that arc's
  // equilibrium speed and the lateral excursion eats the off-path margin.
  const double L_lo = 5.0;
  // heading budget per half: L_hi*k_hi + 2 ramps + L_lo*k_lo = pi
  const double ramp_turn = L_ramp * (k_hi + k_lo) / 2.0;
  const double L_hi = (M_PI - L_lo * k_lo - 2.0 * ramp_turn) / k_hi;
  const double rate = (k_lo - k_hi) / L_ramp;
  std::vector<ClothoidSegment> half = {
      {L_hi, k_hi, 0.0},
      {L_ramp, k_hi, rate},
      {L_lo, k_lo, 0.0},
      {L_ramp, k_lo, -rate},
  };
  std::vector<ClothoidSegment> segs = half;
  segs.insert(segs.end(), half.begin(), half.end());
  return build_clothoid_path(segs, /*closed=*/true);
}

struct TrackingError {
  double e = 0.0;         // signed lateral error, positive left of tangent
  double delta_phi = 0.0; // course direction error, wrapped
  double s_proj = 0.0;
  double k_p = 0.0;
  bool off_path = false;  // > 10 m from the path
};

// Projects a pose onto the path: coarse scan of the sample table near
// s_hint, then parabolic refinement of the squared distance.
inline TrackingError project_to_path(double X, double Y, double phi,
                                     double beta, const ClothoidPath& path,
                                     double s_hint) {
  const double spacing = path.samples[1].s - path.samples[0].s;
  const size_t n = path.samples.size();

  const double window = 25.0;  // m, scan range around the hint
  size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  auto consider = [&](size_t i) {
    const double dx = X - path.samples[i].X;
    const double dy = Y - path.samples[i].Y;
    const double d2 = dx * dx + dy * dy;
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  };
  if (s_hint < 0.0) {
    for (size_t i = 0; i < n; ++i) consider(i);  // global scan
  } else {
    const long span = long(window / spacing);
    const long center = long(path.wrap_s(s_hint) / spacing);
    for (long off = -span; off <= span; ++off) {
      long i = center + off;
      if (path.closed) {
        i %= long(n - 1);
        if (i < 0) i += long(n - 1);
      } else {
        i = std::clamp(i, 0L, long(n - 1));
      }
      consider(size_t(i));
    }
  }

  // refine: project onto the two table segments adjacent to the best sample
  double s_star = path.samples[best].s;
  double d2_star = best_d2;
  for (int adj = -1; adj <= 0; ++adj) {
    long ia = long(best) + adj;
    if (path.closed) {
      ia %= long(n - 1);
      if (ia < 0) ia += long(n - 1);
    } else if (ia < 0 || size_t(ia) + 1 >= n) {
      continue;
    }
    const PathSample& a = path.samples[size_t(ia)];
    const PathSample& b = path.samples[size_t(ia) + 1];
    const double tx = b.X - a.X, ty = b.Y - a.Y;
    const double len2 = tx * tx + ty * ty;
    if (len2 < 1e-12) continue;
    double t = ((X - a.X) * tx + (Y - a.Y) * ty) / len2;
    t = std::clamp(t, 0.0, 1.0);
    const double px = a.X + t * tx, py = a.Y + t * ty;
    const double d2 = (X - px) * (X - px) + (Y - py) * (Y - py);
    if (d2 < d2_star) {
      d2_star = d2;
      s_star = a.s + t * (b.s - a.s);  // the tail interval can be short
    }
  }

  const PathSample ref = path.at(s_star);
  TrackingError err;
  err.s_proj = s_star;
  err.k_p = ref.kappa;
  // signed distance along the left normal (-sin phi_p, cos phi_p)
  err.e = -(X - ref.X) * std::sin(ref.phi) + (Y - ref.Y) * std::cos(ref.phi);
  err.delta_phi = wrap_angle(phi + beta - ref.phi);
  err.off_path = std::sqrt(d2_star) > 10.0;
  return err;
}

struct PidConfig {
  double kp = 0.002;
  double ki = 0.0001;
  double kd = 0.004;
  double x_la = 30.0;           // look-ahead distance [m]
  double integral_limit = 0.02; // anti-windup bound on ki * integral [1/m]
  double output_limit = 0.015;  // max |delta k| [1/m]
  // The raw look-ahead error is dominated by the x_la*sin(delta_phi) term,
  // which kinks sharply during sideslip transients; an unfiltered
  // derivative then saturates the output limit and the reference curvature
  // jumps between distant equilibria step to step. The derivative acts on
  // a low-pass filtered error and the correction is rate limited.
  double deriv_tau = 0.4;       // derivative filter time constant [s]
  double rate_limit = 0.02;     // max |d(delta k)/dt| [1/m/s]
  // The commanded curvature indexes the drift-equilibrium family; values
  // far outside the path's own curvature band select equilibria with
  // wildly different speeds and destabilize tracking, so the output is
  // clamped to a band slightly wider than [1/45, 1/20].
  double k_eq_min = 1.0 / 50.0;
  double k_eq_max = 1.0 / 15.0;
};

// Look-ahead PID on the lateral error; output is the reference curvature
// k_eq = k_p + delta_k. Holds the integrator, derivative and rate-limiter
// states.
class LookaheadPid {
 public:
  explicit LookaheadPid(const PidConfig& cfg) : cfg_(cfg) {}

  double update(const TrackingError& err, double dt) {
    if (dt <= 0.0) throw std::invalid_argument("LookaheadPid: dt must be > 0");
    const double e_la = err.e + cfg_.x_la * std::sin(err.delta_phi);
    integral_ += e_la * dt;
    // anti-windup on the integral contribution
    if (cfg_.ki > 0.0) {
      const double lim = cfg_.integral_limit / cfg_.ki;
      integral_ = std::clamp(integral_, -lim, lim);
    }
    const double alpha =
        cfg_.deriv_tau > 0.0 ? dt / (cfg_.deriv_tau + dt) : 1.0;
    const double filt = has_prev_ ? prev_ + alpha * (e_la - prev_) : e_la;
    const double deriv = has_prev_ ? (filt - prev_) / dt : 0.0;
    prev_ = filt;
    // positive e (left of path) demands less leftward curvature
    double dk = -(cfg_.kp * e_la + cfg_.ki * integral_ + cfg_.kd * deriv);
    dk = std::clamp(dk, -cfg_.output_limit, cfg_.output_limit);
    if (has_prev_ && cfg_.rate_limit > 0.0) {
      const double step = cfg_.rate_limit * dt;
      dk = std::clamp(dk, dk_prev_ - step, dk_prev_ + step);
    }
    has_prev_ = true;
    dk_prev_ = dk;
    return std::clamp(err.k_p + dk, cfg_.k_eq_min, cfg_.k_eq_max);
  }

  void reset() {
    integral_ = 0.0;
    prev_ = 0.0;
    dk_prev_ = 0.0;
    has_prev_ = false;
  }

 private:
  PidConfig cfg_;
  double integral_ = 0.0;
  double prev_ = 0.0;
  double dk_prev_ = 0.0;
  bool has_prev_ = false;
};

}  // namespace driftcpp
