"""Gaussian-process regression with an ARD Matern-5/2 kernel.

One instance is the local surrogate inside a single trust region: inputs live
in the unit box, targets are standardized internally, and hyperparameters are
fitted by Adam ascent on the exact log marginal likelihood with analytic
gradients. The smoothness is fixed at 5/2, whose half-integer closed form
needs no Bessel evaluations:

    k(a, b) = sf2 * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r),
    r^2 = sum_i (a_i - b_i)^2 / ls_i^2

Models are immutable once built and safe to share across parallel workers;
fitting and posterior sampling are pure functions of their inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from latentune.params import DimensionMismatch, InvalidConfig

SQRT5 = math.sqrt(5.0)

LENGTHSCALE_MIN = 1e-3
LENGTHSCALE_MAX = 1e3
NOISE_VARIANCE_MIN = 1e-8
SIGNAL_VARIANCE_MIN = 1e-9
SIGNAL_VARIANCE_MAX = 1e9

# jitter ladder used whenever a Cholesky factorization fails; the accepted
# jitter is folded into the stored noise variance so the factor always
# reconstructs K + sigma_n^2 I exactly
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class CholeskyFailure(RuntimeError):
    """Kernel matrix stayed indefinite through the whole jitter ladder."""


@dataclass(frozen=True)
class KernelParams:
    """ARD kernel hyperparameters in log space; nu is fixed at 5/2."""

    log_lengthscales: np.ndarray
    log_signal_variance: float
    log_noise_variance: float
    nu: float = 2.5

    def __post_init__(self):
        arr = np.asarray(self.log_lengthscales, dtype=float).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "log_lengthscales", arr)
        # the noise floor is an invariant, not just a fitting clamp
        object.__setattr__(
            self,
            "log_noise_variance",
            max(float(self.log_noise_variance), math.log(NOISE_VARIANCE_MIN)),
        )

    @property
    def dim(self) -> int:
        return self.log_lengthscales.size

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)


def default_params(dim: int, lengthscale: float = 0.3) -> KernelParams:
    """Reasonable prior for unit-box inputs and standardized targets."""
    return KernelParams(
        log_lengthscales=np.full(dim, math.log(lengthscale)),
        log_signal_variance=0.0,
        log_noise_variance=math.log(1e-6),
    )


def _clamp_params(p: KernelParams) -> KernelParams:
    return KernelParams(
        log_lengthscales=np.clip(
            p.log_lengthscales, math.log(LENGTHSCALE_MIN), math.log(LENGTHSCALE_MAX)
        ),
        log_signal_variance=float(
            np.clip(
                p.log_signal_variance,
                math.log(SIGNAL_VARIANCE_MIN),
                math.log(SIGNAL_VARIANCE_MAX),
            )
        ),
        log_noise_variance=float(
            max(p.log_noise_variance, math.log(NOISE_VARIANCE_MIN))
        ),
    )


def _scaled_sqdists(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise squared Mahalanobis distances with per-dimension scales."""
    sa = a / lengthscales
    sb = b / lengthscales
    d2 = (
        np.sum(sa**2, axis=1)[:, None]
        + np.sum(sb**2, axis=1)[None, :]
        - 2.0 * (sa @ sb.T)
    )
    return np.maximum(d2, 0.0)


def matern_gram(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Cross-covariance matrix between two sets of points."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1] or a.shape[1] != params.dim:
        raise DimensionMismatch(
            f"inputs have {a.shape[1]} and {b.shape[1]} columns, "
            f"kernel expects {params.dim}"
        )
    r = np.sqrt(_scaled_sqdists(a, b, params.lengthscales))
    return params.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r**2) * np.exp(
        -SQRT5 * r
    )


def matern_kernel(a: np.ndarray, b: np.ndarray, params: KernelParams) -> float:
    """Kernel value between two points; symmetric in (a, b)."""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    b = np.asarray(b, dtype=float).reshape(1, -1)
    return float(matern_gram(a, b, params)[0, 0])


def _chol_with_ladder(k_signal: np.ndarray, noise_variance: float):
    """Cholesky of k_signal + noise*I, escalating jitter into the noise term.

    Returns (lower factor, effective noise variance).
    """
    n = k_signal.shape[0]
    for jitter in JITTER_LADDER:
        eff = noise_variance + jitter
        try:
            low = cholesky(k_signal + eff * np.eye(n), lower=True)
            return low, eff
        except np.linalg.LinAlgError:
            continue
        except ValueError:
            continue
    raise CholeskyFailure(
        f"kernel matrix of size {n} not positive definite even with jitter "
        f"{JITTER_LADDER[-1]}"
    )


def _merge_duplicates(x: np.ndarray, y: np.ndarray):
    """Average targets of exactly repeated rows to protect the factorization."""
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    if uniq.shape[0] == x.shape[0]:
        return x, y
    sums = np.zeros(uniq.shape[0])
    counts = np.zeros(uniq.shape[0])
    np.add.at(sums, inverse, y)
    np.add.at(counts, inverse, 1.0)
    return uniq, sums / counts


@dataclass(frozen=True)
class GpModel:
    """Conditioned GP: cached Cholesky factor and weights, immutable."""

    x: np.ndarray  # (n, d) training inputs, duplicates merged
    y_std: np.ndarray  # (n,) standardized targets
    params: KernelParams
    chol: np.ndarray  # lower factor of K + sigma_n^2 I
    alpha: np.ndarray
    y_mean: float
    y_scale: float

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def condition(x: np.ndarray, y: np.ndarray, params: KernelParams) -> GpModel:
    """Build the posterior machinery at fixed hyperparameters."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size:
        raise DimensionMismatch(f"{x.shape[0]} inputs but {y.size} targets")
    if x.shape[0] < 1:
        raise InvalidConfig("need at least one training point")
    if x.shape[1] != params.dim:
        raise DimensionMismatch(
            f"inputs have {x.shape[1]} columns, kernel expects {params.dim}"
        )
    x, y = _merge_duplicates(x, y)
    y_mean = float(np.mean(y))
    spread = float(np.std(y))
    y_scale = spread if spread > 1e-12 else 1.0
    y_std = (y - y_mean) / y_scale

    k_signal = matern_gram(x, x, params)
    low, eff_noise = _chol_with_ladder(k_signal, params.noise_variance)
    if eff_noise != params.noise_variance:
        params = replace(params, log_noise_variance=math.log(eff_noise))
    alpha = cho_solve((low, True), y_std)
    return GpModel(
        x=x,
        y_std=y_std,
        params=params,
        chol=low,
        alpha=alpha,
        y_mean=y_mean,
        y_scale=y_scale,
    )


def log_marginal_likelihood_and_grad(
    x: np.ndarray, y_std: np.ndarray, params: KernelParams, d2_per_dim=None
):
    """Exact LML of standardized targets and its gradient in log-parameters.

    Gradient order: d log-lengthscales, then log signal variance, then log
    noise variance. d2_per_dim caches the (n, n, d) squared coordinate
    differences across calls with the same x.
    """
    n = x.shape[0]
    ls = params.lengthscales
    sf2 = params.signal_variance

    if d2_per_dim is None:
        diff = x[:, None, :] - x[None, :, :]  # (n, n, d)
        d2_per_dim = diff**2
    r2 = np.maximum((d2_per_dim / ls**2).sum(axis=2), 0.0)
    r = np.sqrt(r2)
    expterm = np.exp(-SQRT5 * r)
    k_signal = sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * expterm

    low, eff_noise = _chol_with_ladder(k_signal, params.noise_variance)
    alpha = cho_solve((low, True), y_std)
    lml = (
        -0.5 * float(y_std @ alpha)
        - float(np.sum(np.log(np.diag(low))))
        - 0.5 * n * math.log(2.0 * math.pi)
    )

    low_inv = solve_triangular(low, np.eye(n), lower=True)
    k_inv = low_inv.T @ low_inv
    w = np.outer(alpha, alpha) - k_inv

    # dK/d log ls_i = sf2 * (5/3) (1 + sqrt5 r) exp(-sqrt5 r) * d_i^2 / ls_i^2
    g = sf2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * expterm
    wg = w * g
    grad_ls = 0.5 * (d2_per_dim.reshape(n * n, -1).T @ wg.reshape(n * n)) / ls**2

    grad_sf = 0.5 * float(np.sum(w * k_signal))
    grad_noise = 0.5 * eff_noise * float(np.trace(w))
    return lml, np.concatenate([grad_ls, [grad_sf, grad_noise]])


def _pack(params: KernelParams) -> np.ndarray:
    return np.concatenate(
        [
            params.log_lengthscales,
            [params.log_signal_variance, params.log_noise_variance],
        ]
    )


def _unpack(psi: np.ndarray, dim: int) -> KernelParams:
    return KernelParams(
        log_lengthscales=psi[:dim],
        log_signal_variance=float(psi[dim]),
        log_noise_variance=float(psi[dim + 1]),
    )


def _adam_ascend(x, y_std, start: KernelParams, iters: int, lr: float = 0.08):
    dim = start.dim
    psi = _pack(_clamp_params(start))
    m = np.zeros_like(psi)
    v = np.zeros_like(psi)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best_psi = psi.copy()
    best_lml = -np.inf
    diff = x[:, None, :] - x[None, :, :]
    d2_per_dim = diff**2
    for t in range(1, iters + 1):
        try:
            lml, grad = log_marginal_likelihood_and_grad(
                x, y_std, _unpack(psi, dim), d2_per_dim=d2_per_dim
            )
        except CholeskyFailure:
            break
        if lml > best_lml:
            best_lml = lml
            best_psi = psi.copy()
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        psi = psi + lr * m_hat / (np.sqrt(v_hat) + eps)
        psi = _pack(_clamp_params(_unpack(psi, dim)))
    return best_lml, _unpack(best_psi, dim)


def fit(
    x: np.ndarray,
    y: np.ndarray,
    init: KernelParams | None = None,
    iters: int = 50,
    restarts: int = 2,
    seed: int = 0,
) -> GpModel:
    """Condition on (x, y) with hyperparameters maximizing the LML locally.

    Runs Adam from the init point plus `restarts` seeded random perturbations
    and keeps the best final likelihood. A single point or constant targets
    skip optimization: the former has no likelihood structure, the latter is
    handled by the standardization offset and the noise floor.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if init is None:
        init = default_params(x.shape[1])
    x, y = _merge_duplicates(x, y)
    if x.shape[0] == 1 or float(np.std(y)) <= 1e-12:
        return condition(x, y, init)

    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    y_std = (y - y_mean) / y_scale

    rng = np.random.default_rng(seed)
    starts = [init]
    for _ in range(restarts):
        starts.append(
            KernelParams(
                log_lengthscales=rng.uniform(
                    math.log(0.05), math.log(2.0), size=init.dim
                ),
                log_signal_variance=float(rng.uniform(math.log(0.3), math.log(3.0))),
                log_noise_variance=float(
                    rng.uniform(math.log(1e-7), math.log(1e-3))
                ),
            )
        )
    best_lml = -np.inf
    best_params = init
    for start in starts:
        lml, cand = _adam_ascend(x, y_std, start, iters=iters)
        if lml > best_lml:
            best_lml = lml
            best_params = cand
    return condition(x, y, best_params)


def predict(model: GpModel, xq: np.ndarray):
    """Posterior mean and standard deviation of the latent function at xq."""
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    if xq.shape[1] != model.dim:
        raise DimensionMismatch(
            f"query has {xq.shape[1]} columns, model expects {model.dim}"
        )
    k_qn = matern_gram(xq, model.x, model.params)
    mean = model.y_mean + model.y_scale * (k_qn @ model.alpha)
    v = solve_triangular(model.chol, k_qn.T, lower=True)
    var = np.maximum(model.params.signal_variance - np.sum(v**2, axis=0), 0.0)
    std = model.y_scale * np.sqrt(var)
    return mean, std


def sample_posterior(
    model: GpModel, xq: np.ndarray, seed: int, count: int = 1
) -> np.ndarray:
    """Draw joint posterior samples over xq via the posterior covariance.

    Exact but cubic in len(xq); prefer sample_pathwise for large candidate
    pools. Deterministic given seed; returns (count, len(xq)).
    """
    if count < 1:
        raise InvalidConfig("count must be >= 1")
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    k_qn = matern_gram(xq, model.x, model.params)
    mean = k_qn @ model.alpha
    v = solve_triangular(model.chol, k_qn.T, lower=True)
    cov = matern_gram(xq, xq, model.params) - v.T @ v
    low, _ = _chol_with_ladder(cov, 0.0)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, xq.shape[0]))
    draws = mean[None, :] + z @ low.T
    return model.y_mean + model.y_scale * draws


def sample_pathwise(
    model: GpModel,
    xq: np.ndarray,
    seed: int,
    count: int = 1,
    n_features: int = 512,
) -> np.ndarray:
    """Approximate joint posterior draws via random-feature path conditioning.

    A prior path is synthesized from random Fourier features of the Matern-5/2
    spectrum (frequencies are Student-t with 2 nu degrees of freedom) and
    corrected by the exact data update, so each draw is a coherent function
    evaluated at all query points with cost linear in len(xq). Used for
    candidate pools too large for an exact joint factorization.
    """
    if count < 1:
        raise InvalidConfig("count must be >= 1")
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    rng = np.random.default_rng(seed)
    d = model.dim
    ls = model.params.lengthscales
    sf2 = model.params.signal_variance

    normal = rng.standard_normal((n_features, d)) / ls[None, :]
    chi2 = rng.chisquare(df=5.0, size=n_features)  # 2 * nu with nu = 5/2
    omega = normal / np.sqrt(chi2 / 5.0)[:, None]
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
    weights = rng.standard_normal((count, n_features))
    scale = math.sqrt(2.0 * sf2 / n_features)

    def prior(points: np.ndarray) -> np.ndarray:
        feats = scale * np.cos(points @ omega.T + phase[None, :])
        return weights @ feats.T  # (count, len(points))

    prior_q = prior(xq)
    prior_n = prior(model.x)
    noise = math.sqrt(model.params.noise_variance) * rng.standard_normal(
        (count, model.n)
    )
    resid = model.y_std[None, :] - prior_n - noise
    update = cho_solve((model.chol, True), resid.T).T  # (count, n)
    k_qn = matern_gram(xq, model.x, model.params)
    draws = prior_q + update @ k_qn.T
    return model.y_mean + model.y_scale * draws
