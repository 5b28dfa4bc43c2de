"""Acquisition functions and the two-stage Bayesian optimization loop.

Stage 1 (low fidelity) runs a single-fidelity GP with integrated posterior
variance (IPV) for global coverage, then expected improvement (EI) to zoom
into promising regions. Stage 2 (high fidelity) freezes the low data set and
queries only the expensive objective, with the surrogate conditioned on both
levels. All randomness is derived from explicit seeds; campaigns with equal
seeds and objectives reproduce identical query sequences.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import NumericalError, ObjectiveError
from .gp import (
    Dataset,
    GpPosterior,
    HyperPriorConfig,
    KernelHyperparams,
    fit_hyperparameters,
    fit_posterior,
    matern52_gram,
)
from .multifidelity import Ar1Model, MultiFidelityDataset, fit_ar1, fit_nargp

SURROGATE_KINDS = ("single", "ar1", "nargp")


@dataclass(frozen=True)
class SearchDomain:
    """Unit-cube search domain (inputs are normalized upstream)."""

    dimension: int
    candidates: int = 4096

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


@dataclass(frozen=True)
class BoConfig:
    """Loop-level knobs; defaults reproduce the benchmark protocol."""

    domain: SearchDomain
    n_init: int = 5
    quad_points: int = 512
    refine_top: int = 5
    refine_iters: int = 30
    fit_restarts: int = 3
    fit_every: int = 1          # refit hyperparameters every k-th iteration


# ---------------------------------------------------------------------------
# Acquisition functions
# ---------------------------------------------------------------------------

def expected_improvement(mean, variance, best):
    """EI for minimization; accepts scalars or arrays, always >= 0."""
    scalar = np.isscalar(mean) or np.ndim(mean) == 0
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sigma = np.sqrt(np.maximum(np.atleast_1d(variance), 0.0))
    improve = best - mean
    out = np.maximum(improve, 0.0)           # sigma = 0 limit
    pos = sigma > 0
    z = np.divide(improve, sigma, out=np.zeros_like(improve), where=pos)
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    ei = improve * ndtr(z) + sigma * phi
    out[pos] = np.maximum(ei[pos], 0.0)
    return float(out[0]) if scalar else out


def integrated_posterior_variance(post: GpPosterior, candidates, quad_points):
    """Negative average fantasized posterior variance after observing each
    candidate (no fantasy targets are needed; the posterior variance is
    target-independent). Higher is better.
    """
    cand = np.asarray(candidates, dtype=float)
    single = cand.ndim == 1
    C = np.atleast_2d(cand)
    Q = np.atleast_2d(np.asarray(quad_points, dtype=float))
    hp = post.hyperparams
    sf2 = hp.signal_variance
    if post.train_data.m == 0:
        cov = matern52_gram(Q, C, hp)
        var_q = np.full(Q.shape[0], sf2)
        var_c = np.full(C.shape[0], sf2)
    else:
        A = matern52_gram(Q, post.train_data.inputs, hp)
        B = matern52_gram(C, post.train_data.inputs, hp)
        VA = solve_triangular(post.chol_factor, A.T, lower=True)
        VB = solve_triangular(post.chol_factor, B.T, lower=True)
        cov = matern52_gram(Q, C, hp) - VA.T @ VB
        var_q = np.maximum(sf2 - np.sum(VA * VA, axis=0), 0.0)
        var_c = np.maximum(sf2 - np.sum(VB * VB, axis=0), 0.0)
    denom = var_c + hp.noise_variance
    reduction = np.where(denom > 1e-12, cov * cov / denom, 0.0)
    new_var = var_q[:, None] - reduction
    std2 = post.train_data.target_std ** 2
    values = -np.mean(new_var, axis=0) * std2
    return float(values[0]) if single else values


# ---------------------------------------------------------------------------
# Acquisition maximization
# ---------------------------------------------------------------------------

def _sobol(dim, n, seed):
    return qmc.Sobol(d=dim, scramble=True, seed=seed).random(n)


def _polish(acq_batch, x0, dim, iters):
    """Bounded local ascent with a batched central-difference gradient."""
    eps = 1e-5

    def neg_f_and_grad(x):
        pts = np.tile(x, (2 * dim + 1, 1))
        for d in range(dim):
            pts[1 + 2 * d, d] += eps
            pts[2 + 2 * d, d] -= eps
        vals = acq_batch(pts)
        g = np.array([(vals[1 + 2 * d] - vals[2 + 2 * d]) / (2 * eps)
                      for d in range(dim)])
        return -vals[0], -g

    try:
        res = minimize(neg_f_and_grad, x0, jac=True, method="L-BFGS-B",
                       bounds=[(0.0, 1.0)] * dim,
                       options={"maxiter": iters})
        return res.x, -res.fun
    except Exception:
        return x0, -np.inf


def maximize_acquisition(acq_batch, domain: SearchDomain, seed: int,
                         refine_top: int = 5, refine_iters: int = 30):
    """Seeded quasi-random candidate sweep plus bounded local ascent.

    Returns the argmax with lowest-index tie-breaking; a refined point only
    replaces the sweep winner when its acquisition value is strictly larger.
    """
    X = _sobol(domain.dimension, domain.candidates, seed)
    vals = np.asarray(acq_batch(X), dtype=float)
    if not np.any(np.isfinite(vals)):
        raise NumericalError("acquisition is non-finite on every candidate")
    best_idx = int(np.argmax(vals))
    best_x, best_v = X[best_idx].copy(), float(vals[best_idx])
    order = np.argsort(-vals, kind="stable")[:refine_top]
    for idx in order:
        x_r, v_r = _polish(acq_batch, X[idx].copy(), domain.dimension,
                           refine_iters)
        if np.isfinite(v_r) and v_r > best_v:
            best_x, best_v = np.clip(x_r, 0.0, 1.0), float(v_r)
    return best_x, best_v


# ---------------------------------------------------------------------------
# Campaign bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class RegretTrace:
    """Per-iteration simple regret against a reference optimum."""

    best_costs: list
    regrets: list
    reference_optimum: float
    seed: int | None = None


def simple_regret(best_so_far, reference_optimum: float,
                  seed: int | None = None) -> RegretTrace:
    """regret_n = best_so_far_n - reference_optimum, clamped at zero."""
    best_so_far = list(best_so_far)
    if not best_so_far:
        raise ValueError("empty best-so-far trace")
    if min(best_so_far) < reference_optimum - 1e-12:
        warnings.warn(
            "reference optimum exceeds an observed cost; regret clamped at 0",
            stacklevel=2)
    regrets = [max(b - reference_optimum, 0.0) for b in best_so_far]
    return RegretTrace(best_so_far, regrets, float(reference_optimum), seed)


@dataclass
class CampaignState:
    """Full state of one optimization campaign (serializable to JSON)."""

    surrogate_kind: str
    data: MultiFidelityDataset
    iteration: int
    best_cost: float
    best_param: np.ndarray
    seed: int
    acquisition_schedule: list = field(default_factory=list)
    best_so_far: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        def dataset_dict(d: Dataset):
            return {
                "fidelity_level": d.fidelity_level,
                "inputs": d.inputs.tolist(),
                "targets": d.targets.tolist(),
                "target_mean": d.target_mean,
                "target_std": d.target_std,
                "frozen": d.frozen,
            }
        return {
            "version": 1,
            "surrogate_kind": self.surrogate_kind,
            "iteration": self.iteration,
            "best_cost": self.best_cost,
            "best_param": np.asarray(self.best_param).tolist(),
            "seed": self.seed,
            "acquisition_schedule": list(self.acquisition_schedule),
            "best_so_far": list(self.best_so_far),
            "low": dataset_dict(self.data.low),
            "high": dataset_dict(self.data.high),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "CampaignState":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported campaign state version: "
                             f"{doc.get('version')}")

        def dataset_from(key):
            entry = doc[key]
            d = Dataset(np.asarray(entry["inputs"], dtype=float),
                        np.asarray(entry["targets"], dtype=float),
                        fidelity_level=entry["fidelity_level"])
            d.pin_standardization(entry["target_mean"], entry["target_std"])
            if entry["frozen"]:
                d.freeze()
            return d

        low = dataset_from("low")
        high = dataset_from("high")
        data = MultiFidelityDataset(low, high)
        # re-pin: MultiFidelityDataset pins high to low's stats, which is
        # exactly what the serialized campaign used
        return CampaignState(
            surrogate_kind=doc["surrogate_kind"],
            data=data,
            iteration=doc["iteration"],
            best_cost=doc["best_cost"],
            best_param=np.asarray(doc["best_param"], dtype=float),
            seed=doc["seed"],
            acquisition_schedule=doc["acquisition_schedule"],
            best_so_far=doc["best_so_far"],
        )


def _call_objective(objective, x):
    try:
        return float(objective(np.asarray(x, dtype=float)))
    except ObjectiveError:
        raise
    except Exception as exc:
        raise ObjectiveError(f"objective evaluation failed: {exc}",
                             theta=x) from exc


# ---------------------------------------------------------------------------
# Stage 1: low-fidelity data generation (IPV then EI)
# ---------------------------------------------------------------------------

def run_low_fidelity_stage(objective, budget_ipv: int = 40,
                           budget_ei: int = 40, seed: int = 0,
                           bo: BoConfig | None = None,
                           priors: HyperPriorConfig | None = None) -> Dataset:
    """Seed with quasi-random points, then IPV and EI iterations.

    Returns the frozen fidelity-1 dataset of 5 + budget_ipv + budget_ei
    evaluations.
    """
    if budget_ipv < 0 or budget_ei < 0:
        raise ValueError("budgets must be non-negative")
    if bo is None:
        bo = BoConfig(SearchDomain(6))
    if priors is None:
        priors = HyperPriorConfig()
    dim = bo.domain.dimension

    rng = np.random.default_rng(seed)
    total = budget_ipv + budget_ei
    iter_seeds = rng.integers(0, 2 ** 31 - 1, size=2 * total + 2)
    quad = _sobol(dim, bo.quad_points, int(iter_seeds[0]))

    X0 = _sobol(dim, bo.n_init, int(iter_seeds[1]))
    data = Dataset(np.zeros((0, dim)), np.zeros(0), fidelity_level=1)
    for x in X0:
        data.append(x, _call_objective(objective, x))

    hp = None
    for it in range(total):
        acq_seed = int(iter_seeds[2 + 2 * it])
        fit_seed = int(iter_seeds[3 + 2 * it])
        warm = (hp,) if hp is not None else ()
        hp = fit_hyperparameters(data, priors, restarts=bo.fit_restarts,
                                 seed=fit_seed, warm_starts=warm)
        post = fit_posterior(data, hp)
        if it < budget_ipv:
            acq = lambda X: integrated_posterior_variance(post, X, quad)
        else:
            best = float(np.min(data.targets))
            acq = lambda X: expected_improvement(*post.predict(X), best)
        x, _ = maximize_acquisition(acq, bo.domain, acq_seed,
                                    bo.refine_top, bo.refine_iters)
        data.append(x, _call_objective(objective, x))

    data.freeze()
    return data


# ---------------------------------------------------------------------------
# Stage 2: high-fidelity optimization on the frozen low data
# ---------------------------------------------------------------------------

def _fit_surrogate(kind, mfd, priors_low, priors_high, restarts, seed,
                   warm=None, low_gp=None):
    if kind == "single":
        high = Dataset(mfd.high.inputs.copy(), mfd.high.targets.copy(),
                       fidelity_level=2)
        if high.m >= 2:
            hp = fit_hyperparameters(high, priors_low, restarts=restarts,
                                     seed=seed,
                                     warm_starts=(warm,) if warm else ())
        else:
            hp = priors_low.default_hyperparams(mfd.n_dims)
        return fit_posterior(high, hp)
    if kind == "ar1":
        return fit_ar1(mfd, priors_low, priors_high, restarts=restarts,
                       seed=seed, warm=warm)
    if kind == "nargp":
        if mfd.high.m == 0:
            # first-query surrogate: AR1 conditioned on low data alone
            return fit_ar1(mfd, priors_low, priors_high, restarts=restarts,
                           seed=seed)
        return fit_nargp(mfd, priors_low, priors_high, restarts=restarts,
                         seed=seed, low_gp=low_gp)
    raise ValueError(f"unknown surrogate kind: {kind}")


def run_high_fidelity_stage(objective, low_data: Dataset,
                            surrogate: str = "ar1", budget: int = 40,
                            seed: int = 0, bo: BoConfig | None = None,
                            priors_low: HyperPriorConfig | None = None,
                            priors_high: HyperPriorConfig | None = None):
    """Frozen-low BO: evaluate only the high-fidelity objective.

    The first query is chosen from the low data alone (for the
    single-fidelity baseline: the low incumbent parameter); every further
    iteration refits the surrogate on (frozen low + accumulated high) and
    maximizes EI. Returns (CampaignState, RegretTrace-ready best-so-far list).
    """
    if surrogate not in SURROGATE_KINDS:
        raise ValueError(f"surrogate must be one of {SURROGATE_KINDS}")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not low_data.frozen:
        raise ValueError("low-fidelity dataset must be frozen before the "
                         "high-fidelity stage")
    if bo is None:
        bo = BoConfig(SearchDomain(low_data.n_dims))
    if priors_low is None:
        priors_low = HyperPriorConfig()
    if priors_high is None:
        priors_high = HyperPriorConfig(lengthscale_gamma=None,
                                       noise_box=priors_low.noise_box)

    rng = np.random.default_rng(seed)
    iter_seeds = rng.integers(0, 2 ** 31 - 1, size=2 * budget + 1)
    mfd = MultiFidelityDataset(low_data)
    m_low = low_data.m
    schedule = []
    best_so_far = []
    best_cost = np.inf
    best_param = None
    warm = None
    low_gp_cache = None
    last_fit = None

    for it in range(budget):
        if mfd.low.m != m_low:
            raise RuntimeError("frozen low-fidelity dataset changed size")
        acq_seed = int(iter_seeds[2 * it])
        fit_seed = int(iter_seeds[2 * it + 1])
        if it == 0:
            if surrogate == "single":
                x = low_data.inputs[int(np.argmin(low_data.targets))].copy()
                schedule.append("low-incumbent")
            else:
                model = _fit_surrogate(surrogate, mfd, priors_low,
                                       priors_high, bo.fit_restarts, fit_seed)
                if surrogate == "ar1":
                    warm = model
                best = float(np.min(low_data.targets))
                acq = lambda X: expected_improvement(*model.predict(X), best)
                x, _ = maximize_acquisition(acq, bo.domain, acq_seed,
                                            bo.refine_top, bo.refine_iters)
                schedule.append("ei")
        else:
            refit = (it - 1) % bo.fit_every == 0 or last_fit is None
            if refit:
                if surrogate == "nargp" and low_gp_cache is None:
                    low_hp = fit_hyperparameters(
                        mfd.low, priors_low, restarts=bo.fit_restarts,
                        seed=fit_seed)
                    low_gp_cache = fit_posterior(mfd.low, low_hp)
                model = _fit_surrogate(surrogate, mfd, priors_low,
                                       priors_high, bo.fit_restarts, fit_seed,
                                       warm=warm, low_gp=low_gp_cache)
                if surrogate == "ar1":
                    warm = model
                last_fit = model
            else:
                model = _refresh_surrogate(surrogate, last_fit, mfd)
                last_fit = model
            best = float(np.min(mfd.high.targets))
            acq = lambda X: expected_improvement(*model.predict(X), best)
            x, _ = maximize_acquisition(acq, bo.domain, acq_seed,
                                        bo.refine_top, bo.refine_iters)
            schedule.append("ei")

        y = _call_objective(objective, x)
        mfd.append_high(x, y)
        if y < best_cost:
            best_cost = y
            best_param = np.asarray(x, dtype=float)
        best_so_far.append(best_cost)

    state = CampaignState(
        surrogate_kind=surrogate,
        data=mfd,
        iteration=budget,
        best_cost=best_cost,
        best_param=best_param,
        seed=seed,
        acquisition_schedule=schedule,
        best_so_far=best_so_far,
    )
    return state, best_so_far


def _refresh_surrogate(kind, prev, mfd):
    """Recondition the previous hyperparameters on the grown dataset."""
    if kind == "single":
        high = Dataset(mfd.high.inputs.copy(), mfd.high.targets.copy(),
                       fidelity_level=2)
        return fit_posterior(high, prev.hyperparams)
    if kind == "ar1":
        return Ar1Model(mfd, prev.low_hp, prev.bias_gp_hp, prev.rho)
    # NARGP: rebuild the warp data with the cached low GP and previous params
    from .multifidelity import NargpModel
    mu_raw, _ = prev.low_gp.predict(mfd.high.inputs)
    z = mfd.low.standardize(mu_raw)
    U = np.hstack([mfd.high.inputs, z[:, None]])
    return NargpModel(prev.low_gp, prev._v, U, mfd.high.targets_std, mfd)
