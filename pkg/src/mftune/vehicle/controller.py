"""Lateral (feedforward + filtered PID) and longitudinal (PI) controllers.

The lateral feedback is a PID on the lateral error with a first-order
low-pass on the derivative term, a proportional heading-error term, and a
first-order low-pass on the total feedback output. The feedforward combines
the kinematic steering angle with a fixed understeer correction. Gains come
from the affine [0,1] -> physical mapping in ControllerRanges.

Controller state layout (one float64 array per closed loop):
  [0] lateral integrator   [1] previous e_y      [2] filtered derivative
  [3] filtered feedback    [4] speed integrator  [5] first-step flag
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LAT_STATE_SIZE = 6


def new_controller_state() -> np.ndarray:
    return np.zeros(LAT_STATE_SIZE)


@njit(cache=True)
def _lateral_step(cs, gains, e_y, e_psi, kappa, v_ref, dt, wheelbase,
                  understeer_gain, delta_max):
    kp, ki, kd, t_d, k_psi, t_out = (gains[0], gains[1], gains[2], gains[3],
                                     gains[4], gains[5])
    first = cs[5] == 0.0
    if first:
        d_raw = 0.0
        cs[5] = 1.0
    else:
        d_raw = (e_y - cs[1]) / dt
    cs[1] = e_y
    if t_d > 0.0:
        cs[2] += (dt / (t_d + dt)) * (d_raw - cs[2])
    else:
        cs[2] = d_raw
    fb = -(kp * e_y + ki * cs[0] + kd * cs[2] + k_psi * e_psi)
    ffw = math.atan(wheelbase * kappa) + understeer_gain * v_ref * v_ref * kappa
    cmd_raw = ffw + fb
    # first-order output filter on the total steering command; it also
    # bounds the second derivative of delta against reference-interpolation
    # kinks in the feedforward path
    if first:
        cs[3] = cmd_raw
    elif t_out > 0.0:
        cs[3] += (dt / (t_out + dt)) * (cmd_raw - cs[3])
    else:
        cs[3] = cmd_raw
    cmd = cs[3]
    delta = cmd
    if delta > delta_max:
        delta = delta_max
    elif delta < -delta_max:
        delta = -delta_max
    # anti-windup: hold the integrator when it would deepen saturation
    if ki > 0.0 and not ((cmd > delta_max and e_y < 0.0)
                         or (cmd < -delta_max and e_y > 0.0)):
        cs[0] += e_y * dt
    return delta


@njit(cache=True)
def _longitudinal_step(cs, k_v, k_vi, v_ref, vx, dt, f_max):
    err = v_ref - vx
    f = k_v * err + k_vi * cs[4]
    f_sat = f
    if f_sat > f_max:
        f_sat = f_max
    elif f_sat < -f_max:
        f_sat = -f_max
    if not ((f > f_max and err > 0.0) or (f < -f_max and err < 0.0)):
        cs[4] += err * dt
    return f_sat


def lateral_controller(gains, e_y, e_psi, kappa, v_ref, state, dt,
                       wheelbase, understeer_gain=5e-4, delta_max=0.6):
    """One controller update; mutates ``state`` in place and returns delta."""
    return float(_lateral_step(state, np.asarray(gains, dtype=float),
                               float(e_y), float(e_psi), float(kappa),
                               float(v_ref), float(dt), float(wheelbase),
                               float(understeer_gain), float(delta_max)))


def longitudinal_controller(v_ref, vx, state, dt, k_v=1500.0, k_vi=300.0,
                            f_max=5000.0):
    """PI force command with saturation and conditional anti-windup."""
    return float(_longitudinal_step(state, float(k_v), float(k_vi),
                                    float(v_ref), float(vx), float(dt),
                                    float(f_max)))
