"""Model fitting and scoring for linear Gaussian ancestral-graph models.

``ricf_fit`` runs residual iterative conditional fitting: block-coordinate
ascent that cycles over vertices, regressing each variable on its parents
and on pseudo-variables built from its bidirected neighbors. All regressions
are expressed through the sample covariance, so the fit depends on the data
only via ``S`` and the sample count.

``bic_score`` turns the fitted log-likelihood into the penalized score
``U(G) = -2*loglik + |E|*log(m) + 2*|E|*log(n)`` and ``reward`` maps scores
to the positive sampling target ``exp((mu - U)/(T*sigma))``.
"""

from __future__ import annotations

import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from .errors import NotAncestralError
from .graphs import AncestralGraph, is_ancestral
from .scm import Dataset

RICF_TOL = 1e-6
RICF_MAX_ITER = 200
SIGMA_FLOOR = 1e-6
EXP_CLAMP = 500.0


@dataclass(frozen=True)
class FitResult:
    B: np.ndarray
    Omega: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    ridge_used: bool = False
    loglik_path: tuple[float, ...] = ()


@dataclass(frozen=True)
class RewardSpec:
    """Centering/scale constants and sampling temperature for the reward map."""

    mu: float
    sigma: float
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (self.temperature > 0):
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def with_temperature(self, t: float) -> "RewardSpec":
        return replace(self, temperature=float(t))

    def to_json_obj(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "temperature": self.temperature}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RewardSpec":
        return cls(float(obj["mu"]), float(obj["sigma"]), float(obj.get("temperature", 1.0)))


def sample_covariance(data: Dataset) -> np.ndarray:
    """Centered second-moment matrix with the 1/m convention."""
    y = data.values - data.values.mean(axis=0)
    return (y.T @ y) / data.m


def gaussian_loglik(sigma: np.ndarray, S: np.ndarray, m: int) -> float:
    """-(m/2) (n log 2*pi + log det Sigma + tr(Sigma^{-1} S))."""
    n = sigma.shape[0]
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return -np.inf
    trace_term = float(np.trace(np.linalg.solve(sigma, S)))
    return -0.5 * m * (n * np.log(2 * np.pi) + logdet + trace_term)


def _solve_gram(G: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve the normal equations, falling back to a tiny ridge when singular."""
    try:
        coef = np.linalg.solve(G, c)
        if np.isfinite(coef).all():
            return coef, False
    except np.linalg.LinAlgError:
        pass
    k = G.shape[0]
    lam = 1e-8 * max(1.0, float(np.trace(G)) / max(k, 1))
    coef = np.linalg.solve(G + lam * np.eye(k), c)
    return coef, True


def ricf_fit(
    g: AncestralGraph,
    data: Dataset,
    tol: float = RICF_TOL,
    max_iter: int = RICF_MAX_ITER,
) -> FitResult:
    """Maximum-likelihood fit of (B, Omega) constrained to the graph's edges.

    Per vertex ``i``: form residuals of the other variables under the current
    coefficients, map them through the inverse of Omega restricted to those
    variables (pseudo-variables), and regress variable ``i`` on its parents'
    values and its spouses' pseudo-variables. The regression coefficients
    update row ``i`` of B and the spouse entries of Omega; the diagonal entry
    becomes the residual variance plus a spouse correction term. Sweeps repeat
    until the largest parameter change drops below ``tol``.
    """
    if not is_ancestral(g):
        raise NotAncestralError("ricf_fit requires an ancestral graph")
    n = g.n
    if data.n != n:
        raise ValueError(f"data has {data.n} columns, graph has {n} nodes")
    m = data.m
    S = sample_covariance(data)
    dirm = np.asarray(g.dir, dtype=bool)
    bim = np.asarray(g.bidir, dtype=bool)

    B = np.zeros((n, n))
    Om = np.diag(np.diag(S)).copy()
    eye = np.eye(n)
    ridge_used = False
    loglik_path: list[float] = []
    converged = False
    iterations = 0

    for it in range(1, max_iter + 1):
        iterations = it
        B_prev, Om_prev = B.copy(), Om.copy()
        for i in range(n):
            pa = np.flatnonzero(dirm[i])
            sp = np.flatnonzero(bim[i])
            if pa.size == 0 and sp.size == 0:
                Om[i, i] = S[i, i]
                continue
            oth = np.delete(np.arange(n), i)
            M_oth = (eye - B)[oth]
            # covariances of the pseudo-variables Z = Omega_oo^{-1} eps_oth
            K = np.linalg.inv(Om[np.ix_(oth, oth)])
            cov_y_eps = S @ M_oth.T          # n x (n-1), cov(Y, eps_oth)
            cov_y_z = cov_y_eps @ K          # cov(Y, Z)
            cov_z_z = K @ (M_oth @ cov_y_eps) @ K  # cov(Z, Z)
            pos = {j: k for k, j in enumerate(oth)}
            sp_pos = np.array([pos[s] for s in sp], dtype=int)
            k_pa, k_sp = pa.size, sp.size
            dim = k_pa + k_sp
            G = np.empty((dim, dim))
            c = np.empty(dim)
            G[:k_pa, :k_pa] = S[np.ix_(pa, pa)]
            G[:k_pa, k_pa:] = cov_y_z[np.ix_(pa, sp_pos)]
            G[k_pa:, :k_pa] = G[:k_pa, k_pa:].T
            G[k_pa:, k_pa:] = cov_z_z[np.ix_(sp_pos, sp_pos)]
            c[:k_pa] = S[pa, i]
            c[k_pa:] = cov_y_z[i, sp_pos]
            coef, used = _solve_gram(G, c)
            ridge_used = ridge_used or used
            B[i, :] = 0.0
            B[i, pa] = coef[:k_pa]
            w_sp = coef[k_pa:]
            Om[i, sp] = w_sp
            Om[sp, i] = w_sp
            # general quadratic form: stays correct under the ridge fallback
            resid_var = float(S[i, i] - 2.0 * (coef @ c) + coef @ G @ coef)
            correction = float(w_sp @ K[np.ix_(sp_pos, sp_pos)] @ w_sp)
            Om[i, i] = resid_var + correction
        sigma_hat = np.linalg.solve(eye - B, np.linalg.solve(eye - B, Om).T)
        loglik_path.append(gaussian_loglik(sigma_hat, S, m))
        delta = max(np.abs(B - B_prev).max(), np.abs(Om - Om_prev).max())
        if delta < tol:
            converged = True
            break

    return FitResult(
        B=B,
        Omega=Om,
        loglik=loglik_path[-1],
        iterations=iterations,
        converged=converged,
        ridge_used=ridge_used,
        loglik_path=tuple(loglik_path),
    )


def bic_score(g: AncestralGraph, data: Dataset, tol: float = RICF_TOL,
              max_iter: int = RICF_MAX_ITER) -> float:
    fit = ricf_fit(g, data, tol=tol, max_iter=max_iter)
    penalty = g.num_edges() * (np.log(data.m) + 2.0 * np.log(g.n))
    return float(-2.0 * fit.loglik + penalty)


def calibrate_reward(scores) -> RewardSpec:
    """Centering constants from a batch of scores: mean and population std."""
    arr = np.asarray(list(scores), dtype=float)
    if arr.size < 2:
        raise ValueError("need at least 2 scores to calibrate")
    if not np.isfinite(arr).all():
        raise ValueError("scores must be finite")
    mu = float(arr.mean())
    sigma = float(arr.std())
    if sigma < SIGMA_FLOOR:
        warnings.warn(f"score spread {sigma:.3g} below floor; using {SIGMA_FLOOR}")
        sigma = SIGMA_FLOOR
    return RewardSpec(mu=mu, sigma=sigma)


def log_reward(u, spec: RewardSpec):
    """(mu - u) / (T * sigma), clamped to +/-500 to keep exp() finite."""
    x = (spec.mu - np.asarray(u, dtype=float)) / (spec.temperature * spec.sigma)
    if np.any(np.abs(x) > EXP_CLAMP):
        warnings.warn("reward exponent clamped")
        x = np.clip(x, -EXP_CLAMP, EXP_CLAMP)
    if np.ndim(u) == 0:
        return float(x)
    return x


def reward(u, spec: RewardSpec):
    r = np.exp(log_reward(u, spec))
    return float(r) if np.ndim(u) == 0 else r


class GraphScorer:
    """Dataset-bound scorer with a bounded, thread-safe LRU cache.

    Policy training revisits the same graphs constantly, so ``score`` caches
    (U, loglik) keyed by the graph's canonical per-pair encoding.
    """

    def __init__(self, data: Dataset, tol: float = RICF_TOL,
                 max_iter: int = RICF_MAX_ITER, cache_size: int = 1_000_000):
        self.data = data
        self.tol = tol
        self.max_iter = max_iter
        self.cache_size = cache_size
        self._cache: OrderedDict[bytes, tuple[float, float]] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def n(self) -> int:
        return self.data.n

    def fit(self, g: AncestralGraph) -> FitResult:
        return ricf_fit(g, self.data, tol=self.tol, max_iter=self.max_iter)

    def _entry(self, g: AncestralGraph) -> tuple[float, float]:
        key = g.key
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                self.hits += 1
                return self._cache[key]
        fit = self.fit(g)
        penalty = g.num_edges() * (np.log(self.data.m) + 2.0 * np.log(g.n))
        entry = (float(-2.0 * fit.loglik + penalty), fit.loglik)
        with self._lock:
            self.misses += 1
            self._cache[key] = entry
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return entry

    def score(self, g: AncestralGraph) -> float:
        return self._entry(g)[0]

    def loglik(self, g: AncestralGraph) -> float:
        return self._entry(g)[1]

    def score_many(self, graphs) -> np.ndarray:
        return np.array([self.score(g) for g in graphs], dtype=float)
