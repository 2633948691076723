"""Built-in evaluation environments and the rollout interface.

Each environment exposes the same black-box contract: evaluate(env, theta,
seed) simulates the closed loop and returns the accumulated tracking cost,
where every step contributes the squared error of the observed quantity
against the task target, and a detected fall contributes the fall penalty
once and terminates the episode.

Three desk-scale environments are built in:

* ``synthetic77`` - a cost with a known low-dimensional structure: the value
  depends on theta only through a fixed random projection to a small subspace,
  so the intrinsic dimension of the well-performing set is known by
  construction.
* ``cartpole25`` - cart-pole velocity tracking under a segmented state
  feedback gain schedule (5 gains per segment).
* ``dintmpc`` - a double integrator driven by a finite-horizon quadratic MPC
  whose stage and terminal weights are the tuned parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from latentune import _accel
from latentune.params import Bounds, InvalidConfig, OutOfBounds, ParamVector, Space

DEFAULT_FALL_PENALTY = 100.0

# construction seed for the registry's synthetic environment; fixed so that
# "synthetic77" denotes the same projection everywhere
_SYNTHETIC_REGISTRY_SEED = 90127


@dataclass(frozen=True)
class EnvSpec:
    """Immutable environment definition; safe to share across workers."""

    env_id: str
    kind: str
    dim: int
    bounds: Bounds
    horizon: int
    fall_penalty: float
    target: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidConfig(f"horizon must be >= 1, got {self.horizon}")
        if self.fall_penalty <= 0:
            raise InvalidConfig(f"fall_penalty must be > 0, got {self.fall_penalty}")
        if self.bounds.dim != self.dim:
            raise InvalidConfig(
                f"bounds dimension {self.bounds.dim} != env dim {self.dim}"
            )


@dataclass(frozen=True)
class RolloutResult:
    cost: float
    fell: bool
    fall_step: Optional[int]
    observations: np.ndarray


@dataclass(frozen=True)
class MpcActorConfig:
    """Static description of the quadratic MPC actor on a linear plant."""

    horizon: int
    state_weights: np.ndarray  # diagonal of the stage state cost
    input_weight: float
    terminal_weights: np.ndarray  # diagonal of the terminal cost
    u_lower: float
    u_upper: float
    a_matrix: np.ndarray
    b_matrix: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidConfig("MPC horizon must be >= 1")
        if not (self.u_lower < self.u_upper):
            raise InvalidConfig("input bounds must satisfy u_lower < u_upper")
        if np.any(np.asarray(self.state_weights) < 0) or self.input_weight < 0:
            raise InvalidConfig("cost weights must be >= 0")
        if np.any(np.asarray(self.terminal_weights) < 0):
            raise InvalidConfig("terminal weights must be >= 0")


def riccati_gain(cfg: MpcActorConfig, r_floor: float = 1e-9) -> np.ndarray:
    """First-step feedback gain of the finite-horizon LQR via backward Riccati.

    Reference implementation in plain numpy; the rollout kernels inline the
    same recursion for the 2-state plant.
    """
    a = np.asarray(cfg.a_matrix, dtype=float)
    b = np.asarray(cfg.b_matrix, dtype=float).reshape(-1, 1)
    q = np.diag(np.asarray(cfg.state_weights, dtype=float))
    r = float(cfg.input_weight) + r_floor
    p = np.diag(np.asarray(cfg.terminal_weights, dtype=float))
    k = np.zeros((1, a.shape[0]))
    for _ in range(cfg.horizon):
        btpb = float((b.T @ p @ b)[0, 0])
        btpa = b.T @ p @ a
        k = btpa / (r + btpb)
        p = q + a.T @ p @ a - btpa.T @ k
    return k.ravel()


# ---------------------------------------------------------------------------
# environment builders


def synthetic_embedded(
    dim_high: int = 77,
    dim_true: int = 5,
    seed: int = 0,
    ripple: float = 1.0,
    fall_level: float = 4.0,
    fall_penalty: float = DEFAULT_FALL_PENALTY,
    env_id: Optional[str] = None,
) -> EnvSpec:
    """Cost landscape with a planted low-dimensional structure.

    cost(theta) = g(P (theta_unit - theta0)) where P is a seeded row-orthonormal
    dim_true x dim_high projection, theta0 a seeded interior offset, and
    g(s) = ||s||^2 + ripple * sum_j (1 - cos(2 pi s_j)), which has a known
    global minimum of exactly 0 at s = 0. Values above fall_level count as a
    fall. Directions in the null space of P provably do not affect the cost.
    """
    if dim_true >= dim_high:
        raise InvalidConfig(
            f"dim_true ({dim_true}) must be smaller than dim_high ({dim_high})"
        )
    if dim_true < 1:
        raise InvalidConfig("dim_true must be >= 1")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((dim_high, dim_true))
    q, _ = np.linalg.qr(gauss)
    projection = np.ascontiguousarray(q.T)  # rows orthonormal
    offset = rng.uniform(0.25, 0.75, size=dim_high)
    bounds = Bounds(-np.ones(dim_high), np.ones(dim_high))
    return EnvSpec(
        env_id=env_id or f"synthetic{dim_high}",
        kind="synthetic",
        dim=dim_high,
        bounds=bounds,
        horizon=1,
        fall_penalty=fall_penalty,
        target=0.0,
        params={
            "projection": projection,
            "offset": offset,
            "ripple": float(ripple),
            "fall_level": float(fall_level),
        },
    )


def cartpole_tracking(
    segments: int = 5,
    target_velocity: float = 0.5,
    horizon: int = 5000,
    fall_penalty: float = DEFAULT_FALL_PENALTY,
    perturb_scale: float = 0.01,
) -> EnvSpec:
    """Cart-pole velocity tracking with a segmented gain schedule.

    The schedule has ``segments`` time segments, each with 4 state-feedback
    gains on (position error, velocity error, pole angle, pole rate) plus one
    velocity feed-forward coefficient, giving dim = 5 * segments. The cart
    position is measured relative to the moving reference v_des * t; a fall is
    |angle| > 0.5 rad or |relative position| > 5 m.

    Gain boxes are sign-restricted on the angle and rate channels (actuation
    direction is known, as it would be on hardware); position and velocity
    gains straddle zero.
    """
    if segments < 1:
        raise InvalidConfig("segments must be >= 1")
    dim = 5 * segments
    lo = np.tile([-8.0, -20.0, -90.0, -25.0, -4.0], segments)
    hi = np.tile([2.0, 0.0, -15.0, -1.0, 4.0], segments)
    suffix = "" if target_velocity == 0.5 else f"@v{target_velocity:g}"
    return EnvSpec(
        env_id=f"cartpole{dim}{suffix}",
        kind="cartpole",
        dim=dim,
        bounds=Bounds(lo, hi),
        horizon=horizon,
        fall_penalty=fall_penalty,
        target=float(target_velocity),
        params={
            "segments": segments,
            "dt": 0.02,
            "fall_angle": 0.5,
            "fall_pos": 5.0,
            "u_max": 10.0,
            "m_cart": 1.0,
            "m_pole": 0.1,
            "half_len": 0.5,
            "gravity": 9.81,
            "perturb_scale": float(perturb_scale),
        },
    )


def double_integrator_mpc(
    schedule_len: int = 2,
    target_velocity: float = 0.5,
    horizon: int = 300,
    fall_penalty: float = DEFAULT_FALL_PENALTY,
    initial_velocity: float = 0.0,
    perturb_scale: float = 0.05,
) -> EnvSpec:
    """Double integrator with a quadratic MPC actor solved by Riccati recursion.

    Tuned parameters per segment: stage weights diag(Q) = (q_p, q_v), input
    weight r, and terminal weights (qT_p, qT_v); dim = 5 * schedule_len. The
    actor re-solves a 20-step horizon each time the schedule segment changes
    and clamps the input to [-2, 2]. A fall is |absolute position| > 10 m.
    """
    if schedule_len < 1:
        raise InvalidConfig("schedule_len must be >= 1")
    dim = 5 * schedule_len
    lo = np.tile([0.0, 0.0, 0.0, 0.0, 0.0], schedule_len)
    hi = np.tile([50.0, 50.0, 10.0, 50.0, 50.0], schedule_len)
    suffix = "" if target_velocity == 0.5 else f"@v{target_velocity:g}"
    name = "dintmpc" if dim == 10 else f"dintmpc{dim}"
    return EnvSpec(
        env_id=f"{name}{suffix}",
        kind="dint",
        dim=dim,
        bounds=Bounds(lo, hi),
        horizon=horizon,
        fall_penalty=fall_penalty,
        target=float(target_velocity),
        params={
            "schedule_len": schedule_len,
            "dt": 0.05,
            "mpc_horizon": 20,
            "u_lo": -2.0,
            "u_hi": 2.0,
            "fall_pos": 10.0,
            "r_floor": 1e-9,
            "initial_velocity": float(initial_velocity),
            "perturb_scale": float(perturb_scale),
        },
    )


# ---------------------------------------------------------------------------
# evaluation


def _check_theta(env: EnvSpec, theta: ParamVector) -> np.ndarray:
    if theta.dim != env.dim:
        raise InvalidConfig(
            f"theta has dimension {theta.dim}, env {env.env_id} expects {env.dim}"
        )
    v = theta.values
    bad = (v < env.bounds.lower) | (v > env.bounds.upper)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise OutOfBounds(
            i, float(v[i]), float(env.bounds.lower[i]), float(env.bounds.upper[i])
        )
    return v


def evaluate(env: EnvSpec, theta: ParamVector, seed: int = 0) -> RolloutResult:
    """Roll out the closed loop; pure function of (env, theta, seed)."""
    values = _check_theta(env, theta)
    if env.kind == "synthetic":
        return _evaluate_synthetic(env, values)
    if env.kind == "cartpole":
        return _evaluate_cartpole(env, values, seed)
    if env.kind == "dint":
        return _evaluate_dint(env, values, seed)
    raise InvalidConfig(f"unknown environment kind {env.kind!r}")


def _evaluate_synthetic(env: EnvSpec, values: np.ndarray) -> RolloutResult:
    p = env.params
    unit = (values - env.bounds.lower) / env.bounds.span
    s = p["projection"] @ (unit - p["offset"])
    g = float(s @ s + p["ripple"] * np.sum(1.0 - np.cos(2.0 * np.pi * s)))
    obs = np.array([g])
    if not np.isfinite(g) or g > p["fall_level"]:
        return RolloutResult(
            cost=env.fall_penalty, fell=True, fall_step=0, observations=obs
        )
    return RolloutResult(cost=g, fell=False, fall_step=None, observations=obs)


def _evaluate_cartpole(env: EnvSpec, values: np.ndarray, seed: int) -> RolloutResult:
    p = env.params
    gains = np.ascontiguousarray(values.reshape(p["segments"], 5))
    rng = np.random.default_rng(seed)
    jitter = rng.standard_normal(2)
    state0 = np.array([0.0, 0.0, p["perturb_scale"] * jitter[0],
                       p["perturb_scale"] * jitter[1]])
    cost, fell, fall_step, obs, done = _accel.cartpole_rollout(
        state0,
        gains,
        env.target,
        p["dt"],
        env.horizon,
        p["fall_angle"],
        p["fall_pos"],
        p["u_max"],
        p["m_cart"],
        p["m_pole"],
        p["half_len"],
        p["gravity"],
        env.fall_penalty,
    )
    return RolloutResult(
        cost=float(cost),
        fell=bool(fell),
        fall_step=int(fall_step) if fell else None,
        observations=obs[:done],
    )


def _evaluate_dint(env: EnvSpec, values: np.ndarray, seed: int) -> RolloutResult:
    p = env.params
    weights = np.ascontiguousarray(values.reshape(p["schedule_len"], 5))
    rng = np.random.default_rng(seed)
    # only the initial position is perturbed: velocity stays exact so that
    # open-loop costs have closed forms
    e_p0 = p["perturb_scale"] * rng.standard_normal()
    e_v0 = p["initial_velocity"] - env.target
    state0 = np.array([e_p0, e_v0])
    cost, fell, fall_step, obs, done = _accel.dint_mpc_rollout(
        state0,
        weights,
        env.target,
        p["dt"],
        env.horizon,
        p["mpc_horizon"],
        p["u_lo"],
        p["u_hi"],
        p["fall_pos"],
        p["r_floor"],
        env.fall_penalty,
    )
    return RolloutResult(
        cost=float(cost),
        fell=bool(fell),
        fall_step=int(fall_step) if fell else None,
        observations=obs[:done],
    )


def write_rollout_trace(
    env: EnvSpec, result: RolloutResult, path: str | Path
) -> None:
    """Dump the per-step trace as CSV (step, observed, target, running_cost)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "observed", "target", "running_cost"])
        for i, obs in enumerate(result.observations):
            if result.fell and i == result.fall_step:
                running = env.fall_penalty
            else:
                running = (obs - env.target) ** 2
            writer.writerow([i, repr(float(obs)), repr(env.target), repr(float(running))])


# ---------------------------------------------------------------------------
# registry

_REGISTRY = {
    "synthetic77": lambda **kw: synthetic_embedded(
        77, 5, seed=_SYNTHETIC_REGISTRY_SEED, **kw
    ),
    "cartpole25": lambda **kw: cartpole_tracking(5, **kw),
    "dintmpc": lambda **kw: double_integrator_mpc(2, **kw),
}


def registered_env_ids() -> list[str]:
    return sorted(_REGISTRY)


def get_env(env_id: str, **overrides) -> EnvSpec:
    """Build a registered environment.

    A ``@v<float>`` suffix overrides the target velocity, e.g.
    ``cartpole25@v0.8`` is the cart-pole task at 0.8 m/s; this is how a decoder
    trained on one task is reused for another.
    """
    base = env_id
    if "@v" in env_id:
        base, _, spd = env_id.partition("@v")
        try:
            overrides.setdefault("target_velocity", float(spd))
        except ValueError:
            raise InvalidConfig(f"bad velocity suffix in env id {env_id!r}") from None
    if base not in _REGISTRY:
        raise InvalidConfig(
            f"unknown env id {env_id!r}; registered: {registered_env_ids()}"
        )
    return _REGISTRY[base](**overrides)
