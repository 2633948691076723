"""Trust-region Bayesian optimization over the unit box.

Maintains several hyperrectangular regions, each with its own local GP
surrogate fitted to the points evaluated inside it. Candidates are proposed
by Thompson sampling: every region draws one joint realization of its
posterior over a candidate pool confined to its (lengthscale-shaped) box, and
the batch is filled with the lowest sampled values across the union of all
regions, which doubles as the bandit allocation between regions. Regions grow
on repeated improvement, shrink on repeated failure, and are re-seeded with a
fresh space-filling design once they collapse below the minimum side length.

All randomness is derived from the state seed, so a run is a pure function of
(config, seed, objective).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from latentune import gp
from latentune.params import (
    CostSample,
    InvalidConfig,
    ParamVector,
    ReplayBuffer,
    Space,
)

# sub-stream tags so the per-purpose generators never collide
_STREAM_INIT = 11
_STREAM_SUGGEST = 13
_STREAM_RESTART = 17
_STREAM_FIT = 19


class UnknownCandidate(ValueError):
    """observe() got a vector that suggest()/init() never produced."""


class NoActiveRegions(RuntimeError):
    """Every region is retired and restarts are disabled."""


class EvaluationError(RuntimeError):
    """An objective evaluation failed; carries the offending point."""

    def __init__(self, theta: np.ndarray, cause: BaseException):
        self.theta = theta
        super().__init__(f"objective evaluation failed at {theta!r}: {cause}")


@dataclass
class TurboConfig:
    m: int = 10
    n_init_per_region: Optional[int] = None  # default min(2 * dim, 20)
    batch: int = 1
    seed: int = 0
    length_init: float = 0.8
    length_max: float = 1.6
    length_min: float = 0.5**7
    success_tolerance: int = 3
    failure_tolerance: Optional[int] = None  # default max(4, ceil(dim / batch))
    pool_size: Optional[int] = None  # default min(100 * dim, 5000)
    perturb_prob: Optional[float] = None  # default min(20 / dim, 1)
    refit_interval: int = 5  # hyperparameter refit cadence, in observations
    fit_iters: int = 50
    fit_restarts: int = 2
    warm_fit_iters: int = 10
    exact_sample_limit: int = 256  # pools above this use the pathwise sampler
    rff_features: int = 512
    restarts_enabled: bool = True

    def resolved(self, dim: int) -> "TurboConfig":
        cfg = TurboConfig(**self.__dict__)
        if cfg.n_init_per_region is None:
            cfg.n_init_per_region = min(2 * dim, 20)
        if cfg.failure_tolerance is None:
            cfg.failure_tolerance = max(4, math.ceil(dim / cfg.batch))
        if cfg.pool_size is None:
            cfg.pool_size = min(100 * dim, 5000)
        if cfg.perturb_prob is None:
            cfg.perturb_prob = min(20.0 / dim, 1.0)
        if cfg.m < 1 or cfg.n_init_per_region < 2 or cfg.batch < 1:
            raise InvalidConfig("need m >= 1, n_init_per_region >= 2, batch >= 1")
        return cfg


@dataclass
class TraceRow:
    iteration: int
    eval_cost: float
    best_cost_so_far: float
    region_id: int
    side_length: float


@dataclass
class TrustRegion:
    region_id: int
    dim: int
    length: float
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    success_count: int = 0
    failure_count: int = 0
    best_cost: float = math.inf
    center: Optional[np.ndarray] = None
    params: Optional[gp.KernelParams] = None
    obs_since_fit: int = 0
    restarts: int = 0
    dead: bool = False

    @property
    def n_obs(self) -> int:
        return len(self.xs)


@dataclass
class TurboState:
    dim: int
    config: TurboConfig
    regions: list
    rng_seed: int
    eval_count: int = 0
    suggest_counter: int = 0
    global_best: Optional[CostSample] = None
    global_best_cost: float = math.inf
    trace: list = field(default_factory=list)
    issued: dict = field(default_factory=dict)  # theta bytes -> (region_id, is_init)

    def pending_points(self) -> list[tuple[int, np.ndarray]]:
        out = []
        for r in self.regions:
            for p in r.pending:
                out.append((r.region_id, p))
        return out

    def active_regions(self) -> list[TrustRegion]:
        return [r for r in self.regions if not r.dead]


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One stratified point per 1/n slab in every dimension."""
    out = np.empty((n, dim))
    for j in range(dim):
        out[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return out


def _seed_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([abs(int(p)) for p in parts])


def _issue_design(state: TurboState, region: TrustRegion, design: np.ndarray) -> None:
    for row in design:
        row = np.ascontiguousarray(row)
        region.pending.append(row)
        state.issued[row.tobytes()] = (region.region_id, True)


def init(
    dim: int,
    m: int = 10,
    n_init_per_region: Optional[int] = None,
    seed: int = 0,
    config: Optional[TurboConfig] = None,
) -> TurboState:
    """Create m regions, each holding a fresh Latin-hypercube design to evaluate."""
    if dim < 1:
        raise InvalidConfig("dim must be >= 1")
    cfg = config or TurboConfig()
    cfg.seed = seed
    if n_init_per_region is not None:
        cfg.n_init_per_region = n_init_per_region
    cfg.m = m
    cfg = cfg.resolved(dim)
    state = TurboState(dim=dim, config=cfg, regions=[], rng_seed=seed)
    for r_id in range(cfg.m):
        region = TrustRegion(region_id=r_id, dim=dim, length=cfg.length_init)
        design = latin_hypercube(
            cfg.n_init_per_region, dim, _seed_rng(seed, _STREAM_INIT, r_id)
        )
        _issue_design(state, region, design)
        state.regions.append(region)
    return state


def _condition_region(region: TrustRegion) -> gp.GpModel:
    return gp.condition(
        np.asarray(region.xs), np.asarray(region.ys), region.params
    )


def _region_box(region: TrustRegion) -> tuple[np.ndarray, np.ndarray]:
    """Side lengths shaped by the fitted lengthscales, clipped to the unit box."""
    ls = region.params.lengthscales
    weights = ls / np.exp(np.mean(np.log(ls)))
    half = 0.5 * region.length * weights
    lo = np.clip(region.center - half, 0.0, 1.0)
    hi = np.clip(region.center + half, 0.0, 1.0)
    return lo, hi


def suggest(
    state: TurboState, batch: int, objective_models_only: bool = True
) -> list[np.ndarray]:
    """Thompson-sample candidates across all regions and keep the best batch.

    objective_models_only is part of the interface for symmetry with
    constrained variants; this optimizer only ever has objective surrogates,
    so the flag has no effect.
    """
    del objective_models_only
    if batch < 1:
        raise InvalidConfig("batch must be >= 1")
    if state.pending_points():
        raise InvalidConfig("evaluate pending initial points before suggesting")
    regions = state.active_regions()
    if not regions:
        raise NoActiveRegions("all trust regions are retired")
    cfg = state.config

    all_cands = []
    all_vals = []
    all_region_ids = []
    for region in regions:
        rng = _seed_rng(state.rng_seed, _STREAM_SUGGEST, state.suggest_counter)
        model = _condition_region(region)
        lo, hi = _region_box(region)
        pool = lo + rng.uniform(size=(cfg.pool_size, state.dim)) * (hi - lo)
        mask = rng.uniform(size=(cfg.pool_size, state.dim)) <= cfg.perturb_prob
        rows_without = ~mask.any(axis=1)
        if rows_without.any():
            cols = rng.integers(0, state.dim, size=int(rows_without.sum()))
            mask[np.flatnonzero(rows_without), cols] = True
        cands = np.where(mask, pool, region.center[None, :])

        # the draw stream is shared across regions: identical regions then
        # produce identical realizations and ties resolve to the lowest index
        draw_seed = [abs(state.rng_seed), _STREAM_SUGGEST, state.suggest_counter, 1]
        if cfg.pool_size <= cfg.exact_sample_limit:
            vals = gp.sample_posterior(model, cands, seed=draw_seed, count=1)[0]
        else:
            vals = gp.sample_pathwise(
                model, cands, seed=draw_seed, count=1, n_features=cfg.rff_features
            )[0]
        all_cands.append(cands)
        all_vals.append(vals)
        all_region_ids.append(np.full(cfg.pool_size, region.region_id))

    cands = np.vstack(all_cands)
    vals = np.concatenate(all_vals)
    region_ids = np.concatenate(all_region_ids)
    order = np.argsort(vals, kind="stable")  # ties: lowest region, then candidate

    selected: list[np.ndarray] = []
    seen = set()
    for idx in order:
        key = cands[idx].tobytes()
        if key in seen:
            continue
        seen.add(key)
        point = np.ascontiguousarray(cands[idx])
        state.issued[point.tobytes()] = (int(region_ids[idx]), False)
        selected.append(point)
        if len(selected) == batch:
            break
    state.suggest_counter += 1
    return selected


def _restart_region(state: TurboState, region: TrustRegion) -> None:
    cfg = state.config
    region.restarts += 1
    region.xs = []
    region.ys = []
    region.length = cfg.length_init
    region.success_count = 0
    region.failure_count = 0
    region.best_cost = math.inf
    region.center = None
    region.params = None
    region.obs_since_fit = 0
    design = latin_hypercube(
        cfg.n_init_per_region,
        state.dim,
        _seed_rng(state.rng_seed, _STREAM_RESTART, region.region_id, region.restarts),
    )
    _issue_design(state, region, design)


def _fit_seed(state: TurboState, region: TrustRegion) -> list[int]:
    return [
        abs(state.rng_seed),
        _STREAM_FIT,
        region.region_id,
        region.restarts,
        region.n_obs,
    ]


def _maybe_refit(state: TurboState, region: TrustRegion) -> None:
    cfg = state.config
    if region.pending:
        return
    if region.params is None:
        # first fit after the initial design: full optimization
        region.params = gp.fit(
            np.asarray(region.xs),
            np.asarray(region.ys),
            init=gp.default_params(state.dim),
            iters=cfg.fit_iters,
            restarts=cfg.fit_restarts,
            seed=_fit_seed(state, region),
        ).params
        region.obs_since_fit = 0
    elif region.obs_since_fit >= cfg.refit_interval:
        # warm refit from the current hyperparameters
        region.params = gp.fit(
            np.asarray(region.xs),
            np.asarray(region.ys),
            init=region.params,
            iters=cfg.warm_fit_iters,
            restarts=0,
            seed=_fit_seed(state, region),
        ).params
        region.obs_since_fit = 0


def observe(
    state: TurboState,
    theta: np.ndarray,
    cost: float,
    sample: Optional[CostSample] = None,
) -> TurboState:
    """Feed one evaluated candidate back into its region.

    Initial-design points establish the region baseline without driving the
    success/failure counters; counted resizing starts with the first suggested
    candidate.
    """
    theta = np.ascontiguousarray(np.asarray(theta, dtype=float))
    key = theta.tobytes()
    if key not in state.issued:
        raise UnknownCandidate("theta was not produced by init or suggest")
    region_id, is_init = state.issued.pop(key)
    region = state.regions[region_id]
    cfg = state.config

    if is_init:
        region.pending = [p for p in region.pending if p.tobytes() != key]
    region.xs.append(theta)
    region.ys.append(float(cost))
    region.obs_since_fit += 1

    improved = cost < region.best_cost
    if improved:
        region.best_cost = float(cost)
        region.center = theta
    if not is_init:
        if improved:
            region.success_count += 1
            region.failure_count = 0
        else:
            region.failure_count += 1
            region.success_count = 0
        if region.success_count >= cfg.success_tolerance:
            region.length = min(2.0 * region.length, cfg.length_max)
            region.success_count = 0
            region.failure_count = 0
        elif region.failure_count >= cfg.failure_tolerance:
            region.length = 0.5 * region.length
            region.success_count = 0
            region.failure_count = 0
            if region.length < cfg.length_min:
                if cfg.restarts_enabled:
                    _restart_region(state, region)
                else:
                    region.dead = True

    state.eval_count += 1
    if cost < state.global_best_cost:
        state.global_best_cost = float(cost)
        if sample is not None:
            state.global_best = sample
    state.trace.append(
        TraceRow(
            iteration=state.eval_count,
            eval_cost=float(cost),
            best_cost_so_far=state.global_best_cost,
            region_id=region_id,
            side_length=region.length,
        )
    )
    if not region.dead:
        _maybe_refit(state, region)
    return state


def run(
    f: Callable[[np.ndarray], CostSample],
    dim: int,
    budget: int,
    config: Optional[TurboConfig] = None,
) -> tuple[CostSample, list[TraceRow], ReplayBuffer]:
    """Optimize for exactly `budget` evaluations of the objective callback.

    The callback receives a unit-box vector and returns a CostSample carrying
    the original-space parameters and metadata; run() stamps the iteration
    number and accumulates the replay buffer and the per-evaluation trace.
    """
    cfg = (config or TurboConfig()).resolved(dim)
    if budget < cfg.m * cfg.n_init_per_region:
        raise InvalidConfig(
            f"budget {budget} below the initial design size "
            f"{cfg.m * cfg.n_init_per_region}"
        )
    state = init(dim, m=cfg.m, seed=cfg.seed, config=cfg)
    buffer: Optional[ReplayBuffer] = None

    def consume(u: np.ndarray) -> None:
        nonlocal buffer
        try:
            sample = f(u)
        except Exception as exc:  # attach the offending point
            raise EvaluationError(u, exc) from exc
        sample.iteration = state.eval_count + 1
        observe(state, u, sample.cost, sample=sample)
        if buffer is None:
            buffer = ReplayBuffer(d=sample.theta.dim)
        buffer.append(sample)

    while state.eval_count < budget:
        pending = state.pending_points()
        if pending:
            for _, point in pending[: budget - state.eval_count]:
                consume(point)
            continue
        want = min(cfg.batch, budget - state.eval_count)
        for point in suggest(state, want):
            consume(point)
    return state.global_best, state.trace, buffer


def write_trace_csv(trace: list[TraceRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "eval_cost", "best_cost_so_far", "region_id", "side_length"]
        )
        for row in trace:
            writer.writerow(
                [
                    row.iteration,
                    repr(row.eval_cost),
                    repr(row.best_cost_so_far),
                    row.region_id,
                    repr(row.side_length),
                ]
            )


def unit_objective(
    env_eval: Callable[[ParamVector], float],
    bounds,
    env_id: str,
    phase,
    seed: int,
    stability_threshold: float = 100.0,
) -> Callable[[np.ndarray], CostSample]:
    """Wrap an original-space evaluator into the unit-box callback run() wants."""
    from latentune.params import denormalize

    def objective(u: np.ndarray) -> CostSample:
        theta = denormalize(ParamVector(np.clip(u, 0.0, 1.0), Space.UNIT), bounds)
        cost = env_eval(theta)
        return CostSample(
            theta=theta,
            cost=cost,
            phase=phase,
            iteration=0,
            seed=seed,
            env_id=env_id,
            stable=cost < stability_threshold,
        )

    return objective
