"""Parameter vectors, box bounds, unit-box normalization, and the replay buffer.

Everything the optimizer touches lives in the unit box [0, 1]^d; engineering
units appear only at the environment boundary. The replay buffer is the
persistent record of evaluated (theta, cost) pairs and doubles as the training
set for the latent model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterator

import numpy as np


class DimensionMismatch(ValueError):
    """Vector length does not match the expected dimension."""


class OutOfBounds(ValueError):
    """A coordinate lies outside its box bound (clamping is never silent)."""

    def __init__(self, index: int, value: float, lo: float, hi: float):
        self.index = index
        super().__init__(f"coordinate {index} = {value} outside [{lo}, {hi}]")


class OutOfUnitBox(ValueError):
    """A unit-space coordinate lies outside [0, 1]."""

    def __init__(self, index: int, value: float):
        self.index = index
        super().__init__(f"coordinate {index} = {value} outside [0, 1]")


class EmptyResult(RuntimeError):
    """A filter produced no samples (e.g. nothing below the cost threshold)."""


class InvalidConfig(ValueError):
    """Structurally invalid configuration value."""


class Space(Enum):
    ORIGINAL = "original"
    UNIT = "unit"
    LATENT = "latent"


class Phase(IntEnum):
    PHASE1 = 1
    PHASE3 = 3


def _as_float_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise InvalidConfig(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidConfig(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Bounds:
    """Per-dimension box constraints in engineering units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_float_vector(self.lower, "lower")
        hi = _as_float_vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise DimensionMismatch(
                f"lower has length {lo.size}, upper has length {hi.size}"
            )
        if np.any(lo >= hi):
            i = int(np.argmax(lo >= hi))
            raise InvalidConfig(
                f"bounds must satisfy lower < upper strictly; dimension {i} "
                f"has [{lo[i]}, {hi[i]}]"
            )
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, values: np.ndarray) -> bool:
        return bool(np.all(values >= self.lower) and np.all(values <= self.upper))


@dataclass(frozen=True)
class ParamVector:
    """A parameter vector tagged with the space its coordinates live in."""

    values: np.ndarray
    space: Space = Space.ORIGINAL

    def __post_init__(self):
        arr = _as_float_vector(self.values, "values").copy()
        if self.space in (Space.UNIT, Space.LATENT):
            bad = (arr < 0.0) | (arr > 1.0)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise OutOfUnitBox(i, float(arr[i]))
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


def normalize(theta: ParamVector, bounds: Bounds) -> ParamVector:
    """Map an original-space vector to the unit box via the affine bound map.

    Raises OutOfBounds rather than clamping: a vector outside its box is a
    caller bug, and silently clamping would corrupt optimizer bookkeeping.
    """
    if theta.dim != bounds.dim:
        raise DimensionMismatch(
            f"vector has length {theta.dim}, bounds have length {bounds.dim}"
        )
    v = theta.values
    bad = (v < bounds.lower) | (v > bounds.upper)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise OutOfBounds(i, float(v[i]), float(bounds.lower[i]), float(bounds.upper[i]))
    u = (v - bounds.lower) / bounds.span
    return ParamVector(u, Space.UNIT)


def denormalize(u: ParamVector, bounds: Bounds) -> ParamVector:
    """Exact inverse of normalize up to floating-point round-off."""
    if u.dim != bounds.dim:
        raise DimensionMismatch(
            f"vector has length {u.dim}, bounds have length {bounds.dim}"
        )
    v = u.values
    bad = (v < 0.0) | (v > 1.0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise OutOfUnitBox(i, float(v[i]))
    return ParamVector(bounds.lower + v * bounds.span, Space.ORIGINAL)


@dataclass
class CostSample:
    """One evaluated parameter vector: (theta, cost) plus run metadata."""

    theta: ParamVector
    cost: float
    phase: Phase
    iteration: int
    seed: int
    env_id: str
    stable: bool

    def __post_init__(self):
        if not math.isfinite(self.cost) or self.cost < 0.0:
            raise InvalidConfig(f"cost must be finite and >= 0, got {self.cost}")
        if self.theta.space is not Space.ORIGINAL:
            raise InvalidConfig("CostSample.theta must be in original space")
        self.phase = Phase(self.phase)

    def to_json_line(self) -> str:
        rec = {
            "theta": list(self.theta.values),
            "cost": self.cost,
            "phase": int(self.phase),
            "iteration": self.iteration,
            "seed": self.seed,
            "env_id": self.env_id,
            "stable": self.stable,
        }
        return json.dumps(rec)

    @classmethod
    def from_json_line(cls, line: str) -> "CostSample":
        rec = json.loads(line)
        return cls(
            theta=ParamVector(np.array(rec["theta"], dtype=float), Space.ORIGINAL),
            cost=float(rec["cost"]),
            phase=Phase(rec["phase"]),
            iteration=int(rec["iteration"]),
            seed=int(rec["seed"]),
            env_id=str(rec["env_id"]),
            stable=bool(rec["stable"]),
        )


@dataclass
class ReplayBuffer:
    """Append-only store of cost samples; the latent model's training set.

    Single writer, append-only during a run; concurrent readers are safe
    between appends. All samples of a phase must share dimension and env_id.
    """

    d: int
    samples: list[CostSample] = field(default_factory=list)

    def append(self, sample: CostSample) -> None:
        if sample.theta.dim != self.d:
            raise DimensionMismatch(
                f"sample has dimension {sample.theta.dim}, buffer expects {self.d}"
            )
        for prev in reversed(self.samples):
            if prev.phase == sample.phase:
                if prev.env_id != sample.env_id:
                    raise InvalidConfig(
                        f"phase {int(sample.phase)} mixes env_id {prev.env_id!r} "
                        f"and {sample.env_id!r}"
                    )
                break
        self.samples.append(sample)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[CostSample]:
        return iter(self.samples)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for s in self.samples:
                fh.write(s.to_json_line())
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        path = Path(path)
        samples = []
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    samples.append(CostSample.from_json_line(line))
        if not samples:
            raise EmptyResult(f"no samples in {path}")
        buf = cls(d=samples[0].theta.dim)
        for s in samples:
            buf.append(s)
        return buf


def filter_stable(buffer: ReplayBuffer, threshold: float) -> list[ParamVector]:
    """Return the theta of every sample with cost strictly below threshold.

    Order is preserved and each passing sample is marked stable in place.
    Raises EmptyResult when nothing passes: downstream latent training cannot
    proceed on an empty set, and the caller must decide how to react.
    """
    if len(buffer) == 0:
        raise EmptyResult("replay buffer is empty")
    out: list[ParamVector] = []
    for s in buffer:
        if s.cost < threshold:
            s.stable = True
            out.append(s.theta)
    if not out:
        raise EmptyResult(
            f"no sample has cost below {threshold} (buffer size {len(buffer)})"
        )
    return out
