"""Single-track vehicle dynamics with Magic Formula tires and RK4 stepping.

The numba kernels operate on a packed plant array
[m, I_z, l_f, l_r, B_f, C_f, D_f, B_r, C_r, D_r]; the thin Python wrappers
accept the dataclasses.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..errors import NumericalError
from .params import VehicleParams


@njit(cache=True)
def _tire_forces(vx, vy, om, delta, plant, v_floor):
    lf, lr = plant[2], plant[3]
    vx_eff = vx if vx > v_floor else v_floor
    alpha_f = delta - math.atan((vy + om * lf) / vx_eff)
    alpha_r = -math.atan((vy - om * lr) / vx_eff)
    F_f = plant[6] * math.sin(plant[5] * math.atan(plant[4] * alpha_f))
    F_r = plant[9] * math.sin(plant[8] * math.atan(plant[7] * alpha_r))
    return F_f, F_r


@njit(cache=True)
def _state_deriv(state, delta, fx, plant, v_floor, out):
    m, iz, lf, lr = plant[0], plant[1], plant[2], plant[3]
    psi, vx, vy, om = state[2], state[3], state[4], state[5]
    F_f, F_r = _tire_forces(vx, vy, om, delta, plant, v_floor)
    cd, sd = math.cos(delta), math.sin(delta)
    cp, sp = math.cos(psi), math.sin(psi)
    # global-frame kinematics: body velocities rotated by the heading
    out[0] = vx * cp - vy * sp
    out[1] = vx * sp + vy * cp
    out[2] = om
    out[3] = (fx * cd - F_f * sd + m * vy * om) / m
    out[4] = (fx * sd + F_f * cd + F_r - m * vx * om) / m
    out[5] = ((fx * sd + F_f * cd) * lf - F_r * lr) / iz


@njit(cache=True)
def _rk4_step(state, delta, fx, plant, v_floor, dt, k1, k2, k3, k4, tmp):
    _state_deriv(state, delta, fx, plant, v_floor, k1)
    for i in range(6):
        tmp[i] = state[i] + 0.5 * dt * k1[i]
    _state_deriv(tmp, delta, fx, plant, v_floor, k2)
    for i in range(6):
        tmp[i] = state[i] + 0.5 * dt * k2[i]
    _state_deriv(tmp, delta, fx, plant, v_floor, k3)
    for i in range(6):
        tmp[i] = state[i] + dt * k3[i]
    _state_deriv(tmp, delta, fx, plant, v_floor, k4)
    for i in range(6):
        state[i] = state[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i]
                                            + 2.0 * k3[i] + k4[i])
    # wrap heading to (-pi, pi]
    if state[2] > math.pi:
        state[2] -= 2.0 * math.pi
    elif state[2] <= -math.pi:
        state[2] += 2.0 * math.pi


def tire_forces(state, delta: float, params: VehicleParams,
                v_floor: float = 1.0):
    """Front/rear lateral tire forces for a state [px, py, psi, vx, vy, om]."""
    state = np.asarray(state, dtype=float)
    return _tire_forces(state[3], state[4], state[5], float(delta),
                        params.as_array(), v_floor)


def dynamics(state, delta: float, fx: float, params: VehicleParams,
             v_floor: float = 1.0) -> np.ndarray:
    """Continuous-time state derivative of the single-track model."""
    state = np.asarray(state, dtype=float)
    out = np.empty(6)
    _state_deriv(state, float(delta), float(fx), params.as_array(), v_floor,
                 out)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite dynamics at state {state}")
    return out


def integrate_step(state, delta: float, fx: float, params: VehicleParams,
                   dt: float, v_floor: float = 1.0) -> np.ndarray:
    """One classical RK4 step with zero-order-hold inputs."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = np.asarray(state, dtype=float).copy()
    scratch = [np.empty(6) for _ in range(5)]
    _rk4_step(s, float(delta), float(fx), params.as_array(), v_floor,
              float(dt), *scratch)
    if not np.all(np.isfinite(s)):
        raise NumericalError(f"non-finite state after integration step: {s}")
    return s
