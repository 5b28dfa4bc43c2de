"""Two-level multi-fidelity surrogates: linear auto-regressive co-kriging
(AR1) and its nonlinear warp variant (NARGP), both built on the single-level
GP machinery.

Both fidelity levels are standardized with the LOW level's target statistics
so that the cross-level linear structure survives standardization. The high
level models
    g2(x) = rho * g1(x) + bias(x)          (AR1)
    g2(x) = warp(x, g1(x))                 (NARGP, deterministic propagation)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import FitError, NumericalError
from .gp import (
    SQRT5,
    Dataset,
    GpPosterior,
    HyperPriorConfig,
    KernelHyperparams,
    _chol_with_jitter,
    _gamma_log_pdf_and_grad,
    _log_bounds,
    _draw_init,
    fit_hyperparameters,
    fit_posterior,
    matern52_gram,
)

RHO_BOUNDS = (-5.0, 5.0)


class MultiFidelityDataset:
    """Low (fidelity 1) and high (fidelity 2) data with shared standardization.

    The low level is standardized with its own statistics; the high level is
    pinned to the same statistics. Freezing the low level enforces the
    two-stage protocol: once the high-fidelity phase starts, the low data set
    must remain unaltered.
    """

    def __init__(self, low: Dataset, high: Dataset | None = None):
        if high is None:
            high = Dataset(np.zeros((0, low.n_dims)), np.zeros(0),
                           fidelity_level=2)
        if low.n_dims != high.n_dims and high.m > 0:
            raise ValueError("fidelity levels must share the input dimension")
        self.low = low
        self.high = high
        self.high.pin_standardization(low.target_mean, low.target_std)

    @property
    def n_dims(self) -> int:
        return self.low.n_dims

    def freeze_low(self) -> None:
        self.low.freeze()

    def append_high(self, x, y) -> None:
        self.high.append(x, y)


# ---------------------------------------------------------------------------
# AR1 (linear auto-regressive co-kriging)
# ---------------------------------------------------------------------------

def ar1_cross_level_cov(hp1: KernelHyperparams, rho: float, A, B) -> np.ndarray:
    """Implied Cov(g2(a), g1(b)) = rho * k1(a, b)."""
    return rho * matern52_gram(A, B, hp1)


def ar1_level2_prior_cov(hp1: KernelHyperparams, hp2: KernelHyperparams,
                         rho: float, A, B) -> np.ndarray:
    """Implied Cov(g2(a), g2(b)) = rho^2 k1(a, b) + k2(a, b)."""
    return rho * rho * matern52_gram(A, B, hp1) + matern52_gram(A, B, hp2)


def ar1_stacked_covariance(X1, X2, hp1, hp2, rho) -> np.ndarray:
    """Noisy joint covariance of (g1(X1) + eps1, g2(X2) + eps2)."""
    m1, m2 = X1.shape[0], X2.shape[0]
    K = np.empty((m1 + m2, m1 + m2))
    K11 = matern52_gram(X1, X1, hp1)
    K11[np.diag_indices_from(K11)] += hp1.noise_variance
    K[:m1, :m1] = K11
    if m2:
        K12 = ar1_cross_level_cov(hp1, rho, X1, X2)
        K22 = ar1_level2_prior_cov(hp1, hp2, rho, X2, X2)
        K22[np.diag_indices_from(K22)] += hp2.noise_variance
        K[:m1, m1:] = K12
        K[m1:, :m1] = K12.T
        K[m1:, m1:] = K22
    return K


def _unit_gram_with_grads(XA, XB, lengthscales):
    """Unit-signal Matern gram plus per-log-lengthscale gradient factors."""
    diff = (XA[:, None, :] - XB[None, :, :]) / lengthscales
    S = diff * diff
    r = np.sqrt(np.sum(S, axis=2))
    E = np.exp(-SQRT5 * r)
    M = (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * E
    common = (5.0 / 3.0) * (1.0 + SQRT5 * r) * E
    grads = [common * S[:, :, d] for d in range(lengthscales.size)]
    return M, grads


def _split_ar1_params(v, n):
    hp1 = KernelHyperparams.from_log_vector(v[: n + 2])
    hp2 = KernelHyperparams.from_log_vector(v[n + 2: 2 * n + 4])
    rho = float(v[-1])
    return hp1, hp2, rho


def _ar1_neg_map(v, n, X1, X2, resid, priors_low: HyperPriorConfig):
    """Negative stacked-data MAP objective and gradient for the AR1 model."""
    m1, m2 = X1.shape[0], X2.shape[0]
    hp1, hp2, rho = _split_ar1_params(v, n)
    s1, s2 = hp1.signal_variance, hp2.signal_variance

    M11, G11 = _unit_gram_with_grads(X1, X1, hp1.lengthscales)
    M12, G12 = _unit_gram_with_grads(X1, X2, hp1.lengthscales)
    M22, G22 = _unit_gram_with_grads(X2, X2, hp1.lengthscales)
    N22, H22 = _unit_gram_with_grads(X2, X2, hp2.lengthscales)

    M = m1 + m2
    K = np.empty((M, M))
    K[:m1, :m1] = s1 * M11 + hp1.noise_variance * np.eye(m1)
    K[:m1, m1:] = rho * s1 * M12
    K[m1:, :m1] = K[:m1, m1:].T
    K[m1:, m1:] = (rho * rho * s1 * M22 + s2 * N22
                   + hp2.noise_variance * np.eye(m2))
    L, _ = _chol_with_jitter(K)
    alpha = cho_solve((L, True), resid)
    value = (
        -0.5 * float(resid @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * M * np.log(2.0 * np.pi)
    )
    Kinv = cho_solve((L, True), np.eye(M))
    W = np.outer(alpha, alpha) - Kinv
    W11 = W[:m1, :m1]
    W12 = W[:m1, m1:]
    W22 = W[m1:, m1:]

    grad = np.empty(2 * n + 5)
    for d in range(n):
        grad[d] = 0.5 * (
            s1 * np.sum(W11 * G11[d])
            + 2.0 * rho * s1 * np.sum(W12 * G12[d])
            + rho * rho * s1 * np.sum(W22 * G22[d])
        )
        grad[n + 2 + d] = 0.5 * s2 * np.sum(W22 * H22[d])
    grad[n] = 0.5 * (
        s1 * np.sum(W11 * M11)
        + 2.0 * rho * s1 * np.sum(W12 * M12)
        + rho * rho * s1 * np.sum(W22 * M22)
    )
    grad[n + 1] = 0.5 * hp1.noise_variance * float(np.trace(W11))
    grad[2 * n + 2] = 0.5 * s2 * np.sum(W22 * N22)
    grad[2 * n + 3] = 0.5 * hp2.noise_variance * float(np.trace(W22))
    grad[2 * n + 4] = 0.5 * (
        2.0 * s1 * np.sum(W12 * M12) + 2.0 * rho * s1 * np.sum(W22 * M22)
    )

    if priors_low.lengthscale_gamma is not None:
        a, b = priors_low.lengthscale_gamma
        pv, pg = _gamma_log_pdf_and_grad(hp1.lengthscales, a, b)
        value += pv
        grad[:n] += pg

    if not np.isfinite(value):
        return np.inf, np.zeros_like(v)
    return -value, -grad


class Ar1Model:
    """Fitted two-level auto-regressive co-kriging surrogate.

    Immutable after construction; all predictions condition the stacked joint
    Gaussian on the observations of both levels and return level-2 values in
    raw target units.
    """

    def __init__(self, data: MultiFidelityDataset, low_hp: KernelHyperparams,
                 bias_hp: KernelHyperparams, rho: float):
        self.data = data
        self.low_hp = low_hp
        self.bias_gp_hp = bias_hp
        self.rho = float(rho)
        self.fitted = True
        self._X1 = data.low.inputs
        self._X2 = data.high.inputs
        resid = np.concatenate([data.low.targets_std, data.high.targets_std])
        K = ar1_stacked_covariance(self._X1, self._X2, low_hp, bias_hp, self.rho)
        L, jit = _chol_with_jitter(K)
        self.joint_chol = L
        self.alpha = cho_solve((L, True), resid)
        self.jitter_used = jit
        # low-side posterior reused by diagnostics and the NARGP-style checks
        self.low_gp = fit_posterior(data.low, low_hp)

    def predict(self, X_star):
        """Level-2 posterior mean/variance, raw units, variance clamped >= 0."""
        X_star = np.asarray(X_star, dtype=float)
        single = X_star.ndim == 1
        Xq = np.atleast_2d(X_star)
        c1 = ar1_cross_level_cov(self.low_hp, self.rho, Xq, self._X1)
        c2 = ar1_level2_prior_cov(self.low_hp, self.bias_gp_hp, self.rho,
                                  Xq, self._X2)
        C = np.hstack([c1, c2])
        prior = (self.rho ** 2 * self.low_hp.signal_variance
                 + self.bias_gp_hp.signal_variance)
        mean_s = C @ self.alpha
        V = solve_triangular(self.joint_chol, C.T, lower=True)
        var_s = prior - np.sum(V * V, axis=0)
        np.maximum(var_s, 0.0, out=var_s)
        d = self.data.low
        mean = mean_s * d.target_std + d.target_mean
        var = var_s * d.target_std ** 2
        if single:
            return float(mean[0]), float(var[0])
        return mean, var


def _rho_least_squares(data: MultiFidelityDataset,
                       low_post: GpPosterior) -> float:
    """Init policy: slope of high targets against low-GP means at the high
    inputs; 1.0 when fewer than two high points are available."""
    if data.high.m < 2:
        return 1.0
    mu_raw, _ = low_post.predict(data.high.inputs)
    z = data.low.standardize(mu_raw)
    y = data.high.targets_std
    denom = float(z @ z)
    if denom < 1e-12:
        return 1.0
    return float(z @ y / denom)


def fit_ar1(data: MultiFidelityDataset, priors_low: HyperPriorConfig | None = None,
            priors_high: HyperPriorConfig | None = None, restarts: int = 3,
            seed: int = 0, warm: Ar1Model | None = None) -> Ar1Model:
    """Jointly maximize the stacked-data MAP objective over (hp1, hp2, rho).

    With an empty high level the model degenerates to the scaled low GP with
    rho from the initialization policy and the bias GP at its prior defaults.
    """
    if data.low.m < 2:
        raise ValueError("AR1 fitting requires at least 2 low-fidelity points")
    if priors_low is None:
        priors_low = HyperPriorConfig()
    if priors_high is None:
        priors_high = HyperPriorConfig(lengthscale_gamma=None)
    n = data.n_dims

    if data.high.m == 0:
        low_hp = fit_hyperparameters(data.low, priors_low,
                                     restarts=max(restarts, 3), seed=seed)
        bias_hp = priors_high.default_hyperparams(n)
        return Ar1Model(data, low_hp, bias_hp, rho=1.0)

    rng = np.random.default_rng(seed)
    if warm is not None:
        hp1_0, hp2_0 = warm.low_hp, warm.bias_gp_hp
    else:
        hp1_0 = fit_hyperparameters(data.low, priors_low, restarts=3,
                                    seed=seed)
        hp2_0 = priors_high.default_hyperparams(n)
    rho0 = (_rho_least_squares(data, fit_posterior(data.low, hp1_0))
            if warm is None else warm.rho)

    inits = [(hp1_0, hp2_0, rho0)]
    for _ in range(max(restarts - 1, 0)):
        inits.append((
            _draw_init(rng, n, priors_low),
            _draw_init(rng, n, priors_high),
            float(rng.uniform(-2.0, 2.0)),
        ))

    resid = np.concatenate([data.low.targets_std, data.high.targets_std])
    X1, X2 = data.low.inputs, data.high.inputs
    bounds = (_log_bounds(n, priors_low) + _log_bounds(n, priors_high)
              + [RHO_BOUNDS])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def pack(hp1, hp2, rho):
        return np.clip(np.concatenate([
            hp1.to_log_vector(), hp2.to_log_vector(), [rho]]), lo, hi)

    best_f = np.inf
    best_v = None
    for hp1, hp2, rho in inits:
        v0 = pack(hp1, hp2, rho)
        f0, _ = _ar1_neg_map(v0, n, X1, X2, resid, priors_low)
        try:
            res = minimize(_ar1_neg_map, v0, jac=True, method="L-BFGS-B",
                           args=(n, X1, X2, resid, priors_low),
                           bounds=bounds, options={"maxiter": 200})
            cand_v, cand_f = (res.x, res.fun) if res.fun <= f0 else (v0, f0)
        except Exception:
            cand_v, cand_f = v0, f0
        if np.isfinite(cand_f) and cand_f < best_f:
            best_f, best_v = cand_f, cand_v
    if best_v is None:
        raise FitError("all AR1 restarts failed to produce a finite objective")
    hp1, hp2, rho = _split_ar1_params(best_v, n)
    return Ar1Model(data, hp1, hp2, rho)


def predict_ar1(model: Ar1Model, x):
    return model.predict(x)


# ---------------------------------------------------------------------------
# NARGP (nonlinear warp on the low-fidelity posterior mean)
# ---------------------------------------------------------------------------

def _unit_matern(P, Q, lengthscales):
    from .gp import _matern52_from_r, _scaled_sq_dists
    r = np.sqrt(_scaled_sq_dists(P, Q, lengthscales))
    return _matern52_from_r(r)


def _warp_gram(UA, UB, v, n):
    """Product-plus-bias warp kernel on augmented inputs (xi, z).

    k((xi, z), (xi', z')) =
        sp2 * M(xi, xi'; l_rho) * M(z, z'; l_y) + sd2 * M(xi, xi'; l_delta)
    """
    l_rho = np.exp(v[0:n])
    sp2 = np.exp(v[n])
    l_y = np.exp(v[n + 1: n + 2])
    l_delta = np.exp(v[n + 2: 2 * n + 2])
    sd2 = np.exp(v[2 * n + 2])
    A_x, B_x = UA[:, :n], UB[:, :n]
    A_z, B_z = UA[:, n:], UB[:, n:]
    Kp = _unit_matern(A_x, B_x, l_rho) * _unit_matern(A_z, B_z, l_y)
    Kd = _unit_matern(A_x, B_x, l_delta)
    return sp2 * Kp + sd2 * Kd


def _warp_noise(v, n):
    return float(np.exp(v[2 * n + 3]))


def _warp_neg_lml(v, U, y, n):
    m = U.shape[0]
    try:
        K = _warp_gram(U, U, v, n) + _warp_noise(v, n) * np.eye(m)
        L, _ = _chol_with_jitter(K)
    except NumericalError:
        return np.inf
    alpha = cho_solve((L, True), y)
    val = (-0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L))))
           - 0.5 * m * np.log(2.0 * np.pi))
    return -val if np.isfinite(val) else np.inf


class NargpModel:
    """Low-fidelity GP plus a GP over (xi, low posterior mean) inputs.

    Prediction propagates the low posterior mean deterministically; the low
    level's predictive variance is not carried through the warp.
    """

    def __init__(self, low_gp: GpPosterior, warp_params: np.ndarray,
                 U: np.ndarray, y_std: np.ndarray, data: MultiFidelityDataset):
        self.low_gp = low_gp
        self.data = data
        self._v = np.asarray(warp_params, dtype=float)
        self._U = U
        n = data.n_dims
        K = _warp_gram(U, U, self._v, n) + _warp_noise(self._v, n) * np.eye(U.shape[0])
        L, jit = _chol_with_jitter(K)
        self._chol = L
        self._alpha = cho_solve((L, True), y_std)
        self.jitter_used = jit
        self.fitted = True

    def _augment(self, Xq):
        mu_raw, _ = self.low_gp.predict(Xq)
        z = self.data.low.standardize(mu_raw)
        return np.hstack([Xq, z[:, None]])

    def predict(self, X_star):
        X_star = np.asarray(X_star, dtype=float)
        single = X_star.ndim == 1
        Xq = np.atleast_2d(X_star)
        n = self.data.n_dims
        Uq = self._augment(Xq)
        Ks = _warp_gram(Uq, self._U, self._v, n)
        prior = float(np.exp(self._v[n]) + np.exp(self._v[2 * n + 2]))
        mean_s = Ks @ self._alpha
        V = solve_triangular(self._chol, Ks.T, lower=True)
        var_s = prior - np.sum(V * V, axis=0)
        np.maximum(var_s, 0.0, out=var_s)
        d = self.data.low
        mean = mean_s * d.target_std + d.target_mean
        var = var_s * d.target_std ** 2
        if single:
            return float(mean[0]), float(var[0])
        return mean, var


def fit_nargp(data: MultiFidelityDataset, priors_low: HyperPriorConfig | None = None,
              priors_high: HyperPriorConfig | None = None, restarts: int = 4,
              seed: int = 0, low_gp: GpPosterior | None = None) -> NargpModel:
    """Train the low GP on level 1 and the warp GP on ((xi, mu1+(xi)), y2)."""
    if data.low.m < 2:
        raise ValueError("NARGP requires at least 2 low-fidelity points")
    if data.high.m < 1:
        raise ValueError("NARGP requires at least 1 high-fidelity point")
    if priors_low is None:
        priors_low = HyperPriorConfig()
    if priors_high is None:
        priors_high = HyperPriorConfig(lengthscale_gamma=None)
    n = data.n_dims

    if low_gp is None:
        low_hp = fit_hyperparameters(data.low, priors_low, restarts=3, seed=seed)
        low_gp = fit_posterior(data.low, low_hp)

    mu_raw, _ = low_gp.predict(data.high.inputs)
    z = data.low.standardize(mu_raw)
    U = np.hstack([data.high.inputs, z[:, None]])
    y = data.high.targets_std

    rng = np.random.default_rng(seed)
    ls_lo, ls_hi = priors_low.lengthscale_init
    sig_lo, sig_hi = priors_low.signal_init
    noi_lo, noi_hi = priors_high.noise_init_range()

    def draw():
        logu = lambda lo, hi: rng.uniform(np.log(lo), np.log(hi))
        return np.concatenate([
            [logu(ls_lo, ls_hi) for _ in range(n)],   # l_rho
            [logu(sig_lo, sig_hi)],                   # sp2
            [logu(ls_lo, ls_hi)],                     # l_y
            [logu(ls_lo, ls_hi) for _ in range(n)],   # l_delta
            [logu(sig_lo, sig_hi)],                   # sd2
            [logu(noi_lo, noi_hi)],                   # noise
        ])

    from .gp import (LOG_LENGTHSCALE_BOUNDS, LOG_SIGNAL_BOUNDS,
                     LOG_NOISE_BOUNDS)
    noise_b = (tuple(np.log(priors_high.noise_box))
               if priors_high.noise_box is not None else LOG_NOISE_BOUNDS)
    bounds = ([LOG_LENGTHSCALE_BOUNDS] * n + [LOG_SIGNAL_BOUNDS]
              + [LOG_LENGTHSCALE_BOUNDS] * (n + 1) + [LOG_SIGNAL_BOUNDS]
              + [noise_b])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    best_f, best_v = np.inf, None
    for k in range(max(restarts, 1)):
        v0 = np.clip(draw(), lo, hi)
        f0 = _warp_neg_lml(v0, U, y, n)
        if data.high.m == 1:
            cand_v, cand_f = v0, f0     # nothing to fit from one point
        else:
            try:
                res = minimize(_warp_neg_lml, v0, args=(U, y, n),
                               method="L-BFGS-B", bounds=bounds,
                               options={"maxiter": 150})
                cand_v, cand_f = (res.x, res.fun) if res.fun <= f0 else (v0, f0)
            except Exception:
                cand_v, cand_f = v0, f0
        if np.isfinite(cand_f) and cand_f < best_f:
            best_f, best_v = cand_f, cand_v
    if best_v is None:
        raise FitError("all NARGP restarts failed to produce a finite objective")
    return NargpModel(low_gp, best_v, U, y, data)


def predict_nargp(model: NargpModel, x):
    return model.predict(x)
