"""Single-fidelity Gaussian process regression with a Matérn-5/2 ARD kernel.

Targets are standardized internally; predictions are reported in the raw
target units of the training dataset. Hyperparameters are fitted by
multi-start quasi-Newton ascent of the (optionally Gamma-penalized) log
marginal likelihood in log-hyperparameter space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .errors import FitError, NumericalError

SQRT5 = np.sqrt(5.0)

# Jitter escalation on Cholesky failure: start at 1e-10 * mean(diag),
# escalate by 10x up to 1e-4 * mean(diag), then give up.
JITTER_START = 1e-10
JITTER_MAX = 1e-4

# Optimizer box in log space when no explicit constraint is configured.
LOG_LENGTHSCALE_BOUNDS = (np.log(1e-3), np.log(1e3))
LOG_SIGNAL_BOUNDS = (np.log(1e-6), np.log(1e6))
LOG_NOISE_BOUNDS = (np.log(1e-9), np.log(1e2))


@dataclass(frozen=True)
class KernelHyperparams:
    """Matérn-5/2 ARD hyperparameters (all strictly positive)."""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.all(ls > 0):
            raise ValueError("lengthscales must be strictly positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be strictly positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be strictly positive")

    @property
    def n_dims(self) -> int:
        return self.lengthscales.size

    def to_log_vector(self) -> np.ndarray:
        return np.concatenate([
            np.log(self.lengthscales),
            [np.log(self.signal_variance), np.log(self.noise_variance)],
        ])

    @staticmethod
    def from_log_vector(v: np.ndarray) -> "KernelHyperparams":
        v = np.asarray(v, dtype=float)
        return KernelHyperparams(
            lengthscales=np.exp(v[:-2]),
            signal_variance=float(np.exp(v[-2])),
            noise_variance=float(np.exp(v[-1])),
        )


@dataclass(frozen=True)
class HyperPriorConfig:
    """Hyperprior and initialization policy for evidence maximization.

    ``lengthscale_gamma`` is a (shape, rate) pair for a Gamma penalty on each
    lengthscale; ``noise_box`` is an inclusive box constraint on the noise
    variance. Init ranges are sampled log-uniformly at each restart.
    """

    lengthscale_gamma: tuple | None = (3.0, 6.0)
    noise_box: tuple | None = None
    lengthscale_init: tuple = (0.05, 2.0)
    signal_init: tuple = (0.1, 10.0)
    noise_init: tuple = (1e-6, 1e-2)

    def noise_init_range(self) -> tuple:
        return self.noise_box if self.noise_box is not None else self.noise_init

    def default_hyperparams(self, n_dims: int) -> KernelHyperparams:
        """Geometric midpoints of the init ranges (used when m < 2)."""
        mid = lambda r: float(np.sqrt(r[0] * r[1]))
        return KernelHyperparams(
            lengthscales=np.full(n_dims, mid(self.lengthscale_init)),
            signal_variance=mid(self.signal_init),
            noise_variance=mid(self.noise_init_range()),
        )


class Dataset:
    """Fidelity-tagged training data with target standardization metadata.

    Raw targets are stored; ``target_mean`` / ``target_std`` default to the
    empirical statistics and can be pinned externally (the multi-fidelity
    models standardize every level with the low-fidelity statistics).
    """

    def __init__(self, inputs, targets, fidelity_level=1,
                 target_mean=None, target_std=None):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        if inputs.size == 0:
            inputs = inputs.reshape(0, inputs.shape[-1] if inputs.ndim > 1 else 0)
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError(
                f"row count mismatch: {inputs.shape[0]} inputs vs "
                f"{targets.shape[0]} targets")
        self._inputs = inputs
        self._targets = targets
        self.fidelity_level = int(fidelity_level)
        self._frozen = False
        self._pinned = target_mean is not None or target_std is not None
        if self._pinned:
            self._mean = float(target_mean if target_mean is not None else 0.0)
            self._std = float(target_std if target_std is not None else 1.0)
        else:
            self._mean, self._std = self._own_stats()

    def _own_stats(self):
        m = self._targets.size
        if m == 0:
            return 0.0, 1.0
        if m == 1:
            return float(self._targets[0]), 1.0
        mean = float(np.mean(self._targets))
        std = float(np.std(self._targets))
        if std < 1e-12:
            std = 1.0
        return mean, std

    @property
    def inputs(self) -> np.ndarray:
        return self._inputs

    @property
    def targets(self) -> np.ndarray:
        return self._targets

    @property
    def m(self) -> int:
        return self._targets.size

    @property
    def n_dims(self) -> int:
        return self._inputs.shape[1]

    @property
    def target_mean(self) -> float:
        return self._mean

    @property
    def target_std(self) -> float:
        return self._std

    @property
    def frozen(self) -> bool:
        return self._frozen

    def standardize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self._mean) / self._std

    def destandardize(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) * self._std + self._mean

    @property
    def targets_std(self) -> np.ndarray:
        return self.standardize(self._targets)

    def pin_standardization(self, mean: float, std: float) -> None:
        self._pinned = True
        self._mean = float(mean)
        self._std = float(std)

    def append(self, x, y) -> None:
        if self._frozen:
            from .errors import FrozenDatasetError
            raise FrozenDatasetError(
                "dataset is frozen; no observations may be added")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.m > 0 and x.size != self.n_dims:
            raise ValueError(f"expected dimension {self.n_dims}, got {x.size}")
        self._inputs = np.vstack([self._inputs, x[None, :]]) if self.m else x[None, :]
        self._targets = np.append(self._targets, float(y))
        if not self._pinned:
            self._mean, self._std = self._own_stats()

    def freeze(self) -> None:
        self._frozen = True

    def copy(self) -> "Dataset":
        d = Dataset(self._inputs.copy(), self._targets.copy(),
                    fidelity_level=self.fidelity_level)
        if self._pinned:
            d.pin_standardization(self._mean, self._std)
        return d


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def _scaled_sq_dists(X1, X2, lengthscales):
    """Pairwise squared distances after per-dimension scaling, shape (m1, m2)."""
    A = X1 / lengthscales
    B = X2 / lengthscales
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return sq


def _matern52_from_r(r):
    return (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def matern52_gram(X1, X2, hp: KernelHyperparams) -> np.ndarray:
    """Dense kernel matrix k(X1, X2), without noise."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != hp.n_dims or X2.shape[1] != hp.n_dims:
        raise ValueError("input dimension does not match lengthscales")
    r = np.sqrt(_scaled_sq_dists(X1, X2, hp.lengthscales))
    return hp.signal_variance * _matern52_from_r(r)


def matern52_ard(a, b, hp: KernelHyperparams) -> float:
    """Scalar kernel value between two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.size != b.size or a.size != hp.n_dims:
        raise ValueError("dimensions of a, b and lengthscales must agree")
    return float(matern52_gram(a[None, :], b[None, :], hp)[0, 0])


def _gram_with_grads(X, hp: KernelHyperparams):
    """Training Gram matrix plus dk/dlog(lengthscale_d) factors.

    Returns (K_signal, grads) where grads[d] = dK/dlog(l_d); K_signal excludes
    the noise term.
    """
    diff = (X[:, None, :] - X[None, :, :]) / hp.lengthscales
    S = diff * diff                        # (m, m, n) per-dim scaled sq dists
    r = np.sqrt(np.sum(S, axis=2))
    E = np.exp(-SQRT5 * r)
    K = hp.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * E
    # dk/dr = -sigma^2 (5r/3)(1 + sqrt5 r) e^(-sqrt5 r); dr/dlog l_d = -S_d / r
    common = hp.signal_variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * E
    grads = [common * S[:, :, d] for d in range(hp.n_dims)]
    return K, grads


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------

def _chol_with_jitter(K):
    """Cholesky with bounded jitter escalation. Returns (L, jitter_used)."""
    mean_diag = float(np.mean(np.diag(K))) if K.shape[0] else 1.0
    attempts = []
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
            return L, jitter
        except np.linalg.LinAlgError:
            attempts.append(jitter)
            if jitter == 0.0:
                jitter = JITTER_START * mean_diag
            else:
                jitter *= 10.0
            if jitter > JITTER_MAX * mean_diag * (1 + 1e-12):
                raise NumericalError(
                    "Cholesky factorization failed after jitter escalation",
                    jitter_attempts=attempts)


class GpPosterior:
    """Fitted GP: cached Cholesky factor and alpha vector, immutable."""

    def __init__(self, data: Dataset, hyperparams: KernelHyperparams,
                 prior_mean: float = 0.0):
        if data.n_dims and data.m and data.n_dims != hyperparams.n_dims:
            raise ValueError("dataset dimension does not match hyperparams")
        self.train_data = data
        self.hyperparams = hyperparams
        self.prior_mean_const = float(prior_mean)
        self._X = data.inputs
        m = data.m
        if m == 0:
            self.chol_factor = None
            self.alpha = np.zeros(0)
            self.jitter_used = 0.0
        else:
            K = matern52_gram(self._X, self._X, hyperparams)
            K[np.diag_indices_from(K)] += hyperparams.noise_variance
            L, jit = _chol_with_jitter(K)
            resid = data.targets_std - self.prior_mean_const
            self.chol_factor = L
            self.alpha = cho_solve((L, True), resid)
            self.jitter_used = jit

    def predict(self, X_star):
        """Posterior mean and variance at one point (n,) or a batch (k, n).

        Values are in raw target units; variances are clamped at zero.
        """
        X_star = np.asarray(X_star, dtype=float)
        single = X_star.ndim == 1
        Xq = np.atleast_2d(X_star)
        hp = self.hyperparams
        if self.train_data.m == 0:
            mean_s = np.full(Xq.shape[0], self.prior_mean_const)
            var_s = np.full(Xq.shape[0], hp.signal_variance)
        else:
            Ks = matern52_gram(Xq, self._X, hp)
            mean_s = self.prior_mean_const + Ks @ self.alpha
            V = solve_triangular(self.chol_factor, Ks.T, lower=True)
            var_s = hp.signal_variance - np.sum(V * V, axis=0)
            np.maximum(var_s, 0.0, out=var_s)
        d = self.train_data
        mean = mean_s * d.target_std + d.target_mean
        var = var_s * d.target_std ** 2
        if single:
            return float(mean[0]), float(var[0])
        return mean, var


def fit_posterior(data: Dataset, hp: KernelHyperparams,
                  prior_mean: float = 0.0) -> GpPosterior:
    return GpPosterior(data, hp, prior_mean)


def predict(post: GpPosterior, x):
    return post.predict(x)


# ---------------------------------------------------------------------------
# Marginal likelihood and MAP fitting
# ---------------------------------------------------------------------------

def log_marginal_likelihood(data: Dataset, hp: KernelHyperparams,
                            prior_mean: float = 0.0):
    """Log marginal likelihood of the standardized targets and its gradient.

    Gradient order: [dlog l_1 .. dlog l_n, dlog signal_var, dlog noise_var].
    """
    if data.m == 0:
        raise ValueError("log marginal likelihood requires a non-empty dataset")
    X = data.inputs
    m = data.m
    K_sig, ls_grads = _gram_with_grads(X, hp)
    K = K_sig + hp.noise_variance * np.eye(m)
    L, _ = _chol_with_jitter(K)
    resid = data.targets_std - prior_mean
    alpha = cho_solve((L, True), resid)
    value = (
        -0.5 * float(resid @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * m * np.log(2.0 * np.pi)
    )
    Kinv = cho_solve((L, True), np.eye(m))
    # dL/dtheta = 0.5 * (alpha alpha^T - K^-1) : dK/dtheta
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(hp.n_dims + 2)
    for d in range(hp.n_dims):
        grad[d] = 0.5 * float(np.sum(W * ls_grads[d]))
    grad[-2] = 0.5 * float(np.sum(W * K_sig))
    grad[-1] = 0.5 * hp.noise_variance * float(np.trace(W))
    return value, grad


def _gamma_log_pdf_and_grad(ell, shape, rate):
    """Sum of Gamma(shape, rate) log-densities over lengthscales.

    Gradient is with respect to log-lengthscales.
    """
    val = float(np.sum(
        shape * np.log(rate) - gammaln(shape)
        + (shape - 1.0) * np.log(ell) - rate * ell))
    grad = (shape - 1.0) - rate * ell
    return val, grad


def map_objective(data: Dataset, hp: KernelHyperparams,
                  priors: HyperPriorConfig, prior_mean: float = 0.0):
    """Penalized evidence (LML + lengthscale Gamma penalty) and gradient."""
    value, grad = log_marginal_likelihood(data, hp, prior_mean)
    if priors.lengthscale_gamma is not None:
        a, b = priors.lengthscale_gamma
        pv, pg = _gamma_log_pdf_and_grad(hp.lengthscales, a, b)
        value += pv
        grad = grad.copy()
        grad[:hp.n_dims] += pg
    return value, grad


def _log_bounds(n_dims, priors: HyperPriorConfig):
    bounds = [LOG_LENGTHSCALE_BOUNDS] * n_dims + [LOG_SIGNAL_BOUNDS]
    if priors.noise_box is not None:
        lo, hi = priors.noise_box
        bounds.append((np.log(lo), np.log(hi)))
    else:
        bounds.append(LOG_NOISE_BOUNDS)
    return bounds


def _draw_init(rng, n_dims, priors: HyperPriorConfig):
    def logu(lo, hi):
        return rng.uniform(np.log(lo), np.log(hi))
    ls = np.exp([logu(*priors.lengthscale_init) for _ in range(n_dims)])
    sig = float(np.exp(logu(*priors.signal_init)))
    noi = float(np.exp(logu(*priors.noise_init_range())))
    return KernelHyperparams(ls, sig, noi)


def fit_hyperparameters(data: Dataset, priors: HyperPriorConfig | None = None,
                        restarts: int = 10, seed: int = 0,
                        prior_mean: float = 0.0,
                        warm_starts=()) -> KernelHyperparams:
    """MAP hyperparameters via multi-start L-BFGS in log space.

    Deterministic for a fixed seed; the best restart wins with index-order
    tie-breaking. Warm starts (if any) are prepended to the random restarts.
    """
    if data.m < 2:
        raise ValueError("hyperparameter fitting requires at least 2 points")
    if priors is None:
        priors = HyperPriorConfig()
    n = data.n_dims
    rng = np.random.default_rng(seed)
    inits = list(warm_starts) + [_draw_init(rng, n, priors)
                                 for _ in range(restarts)]
    bounds = _log_bounds(n, priors)

    def neg_obj(v):
        try:
            hp = KernelHyperparams.from_log_vector(v)
            val, grad = map_objective(data, hp, priors, prior_mean)
        except NumericalError:
            return np.inf, np.zeros_like(v)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(v)
        return -val, -grad

    best_val = -np.inf
    best_hp = None
    for hp0 in inits:
        v0 = np.clip(hp0.to_log_vector(),
                     [b[0] for b in bounds], [b[1] for b in bounds])
        f0, _ = neg_obj(v0)
        try:
            res = minimize(neg_obj, v0, jac=True, method="L-BFGS-B",
                           bounds=bounds, options={"maxiter": 200})
            cand_v, cand_f = (res.x, res.fun) if res.fun <= f0 else (v0, f0)
        except Exception:
            cand_v, cand_f = v0, f0
        if np.isfinite(cand_f) and -cand_f > best_val:
            best_val = -cand_f
            best_hp = KernelHyperparams.from_log_vector(cand_v)
    if best_hp is None:
        raise FitError("all hyperparameter restarts failed to produce a "
                       "finite objective")
    return best_hp
