"""Oval reference trajectory generation and reference-point matching.

The centerline is a stadium shape whose curvature steps are smoothed by
linear ramps (clothoid segments) of a configurable transition length, so the
path, heading, and curvature stay mutually consistent. The speed profile is
curvature-limited and blended under a longitudinal acceleration limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..errors import ConfigurationError


@dataclass(frozen=True)
class TrackConfig:
    straight_length: float = 150.0
    radius: float = 30.0
    transition: float = 8.0     # curvature ramp length, 0 = sharp stadium
    spacing: float = 0.5        # waypoint spacing upper bound [m]
    v_max: float = 20.0         # m/s
    a_lat_max: float = 7.0      # m/s^2
    a_lon_max: float = 2.0      # m/s^2
    # CG-to-rear-axle distance assumed by the planner when it converts path
    # tangents into state-space reference headings (heading = tangent minus
    # the kinematic sideslip asin(kappa * l_r))
    sideslip_ref_length: float = 1.56


@dataclass
class ReferenceTrajectory:
    """Closed waypoint path; arrays have one duplicated seam point at s = L.

    ``heading`` is the unwrapped path tangent (continuous, ends at
    heading[0] + 2*pi) and defines the lateral-error direction;
    ``ref_heading`` is the state-space heading reference, offset from the
    tangent by the kinematic cornering sideslip.
    """

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    ref_heading: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    length: float
    closed: bool = True
    closure_error: float = 0.0

    @property
    def n_segments(self) -> int:
        return self.s.size - 1

    def mirrored(self) -> "ReferenceTrajectory":
        """Reflection across the track's long axis (y -> -y)."""
        return ReferenceTrajectory(
            s=self.s.copy(), x=self.x.copy(), y=-self.y,
            heading=-self.heading, ref_heading=-self.ref_heading,
            curvature=-self.curvature,
            speed=self.speed.copy(), length=self.length, closed=self.closed,
            closure_error=self.closure_error)


def _curvature_profile(cfg: TrackConfig):
    """Piecewise-linear curvature pieces (length, kappa_start, kappa_end)."""
    R, T = cfg.radius, cfg.transition
    if cfg.straight_length <= 0 or R <= 0:
        raise ConfigurationError("straight length and radius must be positive")
    if T < 0 or T > cfg.straight_length or T > math.pi * R:
        raise ConfigurationError("transition length is infeasible for this "
                                 "geometry")
    k = 1.0 / R
    straight = cfg.straight_length - T
    arc = math.pi * R - T
    pieces = []
    for _ in range(2):    # two identical halves
        pieces.append((straight, 0.0, 0.0))
        if T > 0:
            pieces.append((T, 0.0, k))
        pieces.append((arc, k, k))
        if T > 0:
            pieces.append((T, k, 0.0))
    return pieces


def generate_oval_reference(cfg: TrackConfig = TrackConfig()) -> ReferenceTrajectory:
    """Stadium-shaped closed centerline with a curvature-limited speed profile."""
    pieces = _curvature_profile(cfg)
    total = sum(p[0] for p in pieces)

    n_way = int(math.ceil(total / cfg.spacing))
    s_way = np.linspace(0.0, total, n_way + 1)

    def kappa_at(s):
        pos = s
        for length, k0, k1 in pieces:
            if pos <= length:
                return k0 + (k1 - k0) * (pos / length)
            pos -= length
        return pieces[-1][2]

    # heading: exact integral of the piecewise-linear curvature
    def heading_at(s):
        pos = s
        h = 0.0
        for length, k0, k1 in pieces:
            if pos <= length:
                return h + k0 * pos + 0.5 * (k1 - k0) * pos * pos / length
            h += 0.5 * (k0 + k1) * length
            pos -= length
        return h

    # position: Simpson quadrature of (cos, sin)(heading) on a fine grid
    fine = max(4, int(math.ceil(cfg.spacing / 0.01)))
    x = np.empty(n_way + 1)
    y = np.empty(n_way + 1)
    x[0] = 0.0
    y[0] = 0.0
    for i in range(n_way):
        a, b = s_way[i], s_way[i + 1]
        ss = np.linspace(a, b, 2 * fine + 1)
        hh = np.array([heading_at(si) for si in ss])
        w = np.ones(ss.size)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        h_step = (b - a) / (ss.size - 1)
        x[i + 1] = x[i] + h_step / 3.0 * float(w @ np.cos(hh))
        y[i + 1] = y[i] + h_step / 3.0 * float(w @ np.sin(hh))

    closure = float(math.hypot(x[-1] - x[0], y[-1] - y[0]))
    x[-1], y[-1] = x[0], y[0]     # snap the seam

    heading = np.array([heading_at(si) for si in s_way])
    heading[-1] = heading[0] + 2.0 * math.pi
    kappa = np.array([kappa_at(si) for si in s_way])
    kappa[-1] = kappa[0]

    # curvature-limited speed, then forward/backward acceleration blending
    with np.errstate(divide="ignore"):
        v = np.minimum(cfg.v_max,
                       np.sqrt(np.where(np.abs(kappa) > 1e-12,
                                        cfg.a_lat_max / np.maximum(np.abs(kappa), 1e-12),
                                        np.inf)))
    v = np.minimum(v, cfg.v_max)
    ds = np.diff(s_way)
    for _ in range(3):    # closed loop: iterate passes to a fixed point
        for i in range(n_way):
            v[i + 1] = min(v[i + 1],
                           math.sqrt(v[i] ** 2 + 2 * cfg.a_lon_max * ds[i]))
        v[0] = min(v[0], v[-1])
        for i in range(n_way - 1, -1, -1):
            v[i] = min(v[i], math.sqrt(v[i + 1] ** 2
                                       + 2 * cfg.a_lon_max * ds[i]))
        v[-1] = min(v[-1], v[0])

    beta = np.arcsin(np.clip(kappa * cfg.sideslip_ref_length, -0.99, 0.99))
    return ReferenceTrajectory(
        s=s_way, x=x, y=y, heading=heading, ref_heading=heading - beta,
        curvature=kappa, speed=v, length=total, closure_error=closure)


@njit(cache=True)
def _match_core(tx, ty, ts, theading, tref, tkappa, tv, idx0, px, py, psi):
    """Local nearest-segment search, monotone forward from idx0.

    The tangent array defines the signed lateral error; the reference-heading
    array defines the heading error. Returns (segment index, s_matched, e_y,
    e_psi, kappa_ref, v_ref, distance).
    """
    n_seg = ts.size - 1
    best_d2 = 1e30
    best_i = idx0
    best_t = 0.0
    # forward segments first so that ties cannot re-match the seam segment
    # behind the start point
    for j in (0, 1, 2, 3, 4, -1):
        i = (idx0 + j) % n_seg
        ax, ay = tx[i], ty[i]
        ex, ey = tx[i + 1] - ax, ty[i + 1] - ay
        seg2 = ex * ex + ey * ey
        t = ((px - ax) * ex + (py - ay) * ey) / seg2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        cx = ax + t * ex
        cy = ay + t * ey
        d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy)
        if d2 < best_d2:
            best_d2 = d2
            best_i = i
            best_t = t
    i, t = best_i, best_t
    cx = tx[i] + t * (tx[i + 1] - tx[i])
    cy = ty[i] + t * (ty[i + 1] - ty[i])
    s_m = ts[i] + t * (ts[i + 1] - ts[i])
    tangent = theading[i] + t * (theading[i + 1] - theading[i])
    h_ref = tref[i] + t * (tref[i + 1] - tref[i])
    k_ref = tkappa[i] + t * (tkappa[i + 1] - tkappa[i])
    v_ref = tv[i] + t * (tv[i + 1] - tv[i])
    # signed lateral offset, positive when left of the path
    e_y = math.cos(tangent) * (py - cy) - math.sin(tangent) * (px - cx)
    e_psi = psi - h_ref
    while e_psi > math.pi:
        e_psi -= 2.0 * math.pi
    while e_psi <= -math.pi:
        e_psi += 2.0 * math.pi
    return i, s_m, e_y, e_psi, k_ref, v_ref, math.sqrt(best_d2)


def match_reference(traj: ReferenceTrajectory, state, prev_index: int = 0):
    """Match a vehicle state to the reference; returns a dict of reference
    fields plus the signed lateral and heading errors."""
    state = np.asarray(state, dtype=float)
    i, s_m, e_y, e_psi, k_ref, v_ref, dist = _match_core(
        traj.x, traj.y, traj.s, traj.heading, traj.ref_heading,
        traj.curvature, traj.speed,
        int(prev_index), state[0], state[1], state[2])
    return {
        "index": int(i), "s": float(s_m), "e_y": float(e_y),
        "e_psi": float(e_psi), "kappa": float(k_ref), "v_ref": float(v_ref),
        "distance": float(dist),
    }
