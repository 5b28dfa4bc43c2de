"""Plant parameters, controller gain mapping, and simulation settings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigurationError

GRAVITY = 9.81


@dataclass(frozen=True)
class VehicleParams:
    """Single-track plant: mass, yaw inertia, axle distances, tire coefficients."""

    m: float
    I_z: float
    l_f: float
    l_r: float
    B_f: float
    C_f: float
    D_f: float
    B_r: float
    C_r: float
    D_r: float

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "B_f", "C_f", "D_f",
                     "B_r", "C_r", "D_r"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"vehicle parameter {name} must be "
                                         f"positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def as_array(self) -> np.ndarray:
        return np.array([self.m, self.I_z, self.l_f, self.l_r,
                         self.B_f, self.C_f, self.D_f,
                         self.B_r, self.C_r, self.D_r])


def nominal_vehicle(m: float = 1500.0, I_z: float = 2500.0,
                    l_f: float = 1.04, l_r: float = 1.56,
                    mu: float = 0.9) -> VehicleParams:
    """Default compact-car plant.

    Tire peak forces follow the static axle load split; the front axle is
    softer than the rear (B_f < B_r) so the car understeers, which makes
    feedback authority genuinely necessary near the lateral limit.
    """
    wb = l_f + l_r
    share_f = l_r / wb
    share_r = l_f / wb
    w = m * GRAVITY
    return VehicleParams(
        m=m, I_z=I_z, l_f=l_f, l_r=l_r,
        B_f=9.0, C_f=1.9, D_f=mu * w * share_f,
        B_r=11.0, C_r=1.9, D_r=mu * w * share_r,
    )


@dataclass(frozen=True)
class PerturbationSpec:
    """Additive/multiplicative changes applied to a nominal plant.

    ``l_f_add`` keeps the total wheelbase fixed by adjusting l_r;
    ``d_scale`` scales D_f and D_r simultaneously.
    """

    m_add: float = 0.0
    l_f_add: float = 0.0
    d_scale: float = 1.0

    def describe(self) -> str:
        parts = []
        if self.m_add:
            parts.append(f"m{self.m_add:+g}kg")
        if self.l_f_add:
            parts.append(f"l_f{self.l_f_add:+g}m")
        if self.d_scale != 1.0:
            parts.append(f"D x{self.d_scale:g}")
        return ", ".join(parts) if parts else "identity"


def perturb_plant(nominal: VehicleParams,
                  spec: PerturbationSpec) -> VehicleParams:
    """Copy of the plant with exactly the specified fields changed."""
    changes = {}
    if spec.m_add:
        changes["m"] = nominal.m + spec.m_add
    if spec.l_f_add:
        changes["l_f"] = nominal.l_f + spec.l_f_add
        changes["l_r"] = nominal.l_r - spec.l_f_add   # preserve wheelbase
    if spec.d_scale != 1.0:
        changes["D_f"] = nominal.D_f * spec.d_scale
        changes["D_r"] = nominal.D_r * spec.d_scale
    if not changes:
        return nominal
    try:
        return replace(nominal, **changes)
    except ConfigurationError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"invalid perturbed plant: {exc}") from exc


@dataclass(frozen=True)
class ControllerRanges:
    """Affine mapping from normalized theta in [0,1]^6 to physical gains.

    theta_1..theta_3: PID gains on the lateral error; theta_4: derivative
    low-pass time constant; theta_5: heading-error gain; theta_6: output
    low-pass time constant. Zero integral gain and zero filter constants are
    exactly representable (lower bounds are 0).
    """

    kp: tuple = (0.0, 1.2)        # rad/m
    ki: tuple = (0.0, 0.8)        # rad/(m s)
    kd: tuple = (0.0, 0.25)       # rad s/m
    t_deriv: tuple = (0.0, 0.12)  # s
    k_psi: tuple = (0.0, 2.5)     # rad/rad
    t_out: tuple = (0.0, 0.15)    # s

    def map(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (6,):
            raise ValueError("theta must have exactly 6 coordinates")
        if np.any(theta < 0) or np.any(theta > 1):
            raise ValueError("theta coordinates must lie in [0, 1]")
        ranges = (self.kp, self.ki, self.kd, self.t_deriv, self.k_psi,
                  self.t_out)
        return np.array([lo + t * (hi - lo)
                         for t, (lo, hi) in zip(theta, ranges)])


@dataclass(frozen=True)
class SimConfig:
    """Integration, controller-synchronous timing, and the DNF rule."""

    dt: float = 1e-3
    v_floor: float = 1.0           # m/s, slip-angle singularity guard
    delta_max: float = 0.6         # rad, steering saturation
    dnf_lateral_error: float = 3.0  # m, abort threshold on |e_y|
    dnf_cost: float = 0.5          # heuristic cost for aborted laps
    understeer_gain: float = 5e-4  # rad s^2/m, feedforward understeer term
    k_v: float = 6000.0            # N/(m/s), speed tracking
    k_vi: float = 1000.0           # N/m
    traction_limit: float = 6000.0  # N
    max_lap_time: float = 120.0    # s, stall guard
    weights: tuple = (1.0, 3.0, 0.03)
