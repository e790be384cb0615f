"""Training-point designs and the fixed validation set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Domain",
    "SampleDesign",
    "ValidationSet",
    "draw_batch",
    "make_validation",
    "stream_seeds",
    "SAMPLING_KINDS",
]

SAMPLING_KINDS = ("uniform", "rad", "t_stratified")
STREAMS = ("init", "batches", "validation", "mc")


@dataclass(frozen=True)
class Domain:
    """Space-time box ``[0, T] x prod_i [lo_i, hi_i]``."""

    T: float
    box: tuple

    @classmethod
    def of(cls, problem) -> "Domain":
        return cls(problem.T, tuple(problem.domain))

    @property
    def d(self) -> int:
        return len(self.box)

    def uniform(self, rng: np.random.Generator, n: int, t_range=None):
        lo_t, hi_t = (0.0, self.T) if t_range is None else t_range
        t = rng.uniform(lo_t, hi_t, n)
        x = np.column_stack([rng.uniform(lo, hi, n) for lo, hi in self.box]) if self.box else np.zeros((n, 0))
        return t, x

    def contains(self, t, x) -> np.ndarray:
        t = np.asarray(t)
        x = np.asarray(x).reshape(t.shape[0], -1)
        ok = (t >= 0) & (t <= self.T)
        for i, (lo, hi) in enumerate(self.box):
            ok &= (x[:, i] >= lo) & (x[:, i] <= hi)
        return ok


@dataclass(frozen=True)
class SampleDesign:
    kind: str = "uniform"
    # residual-adaptive: score pool_multiplier*M candidates, keep the top
    # keep_fraction*M, top up the rest at random from the remaining pool
    pool_multiplier: int = 4
    keep_fraction: float = 0.8
    # t-stratified: early_mass of the batch with t in [0, split_time]
    split_time: float = 0.3
    early_mass: float = 0.5

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise ValueError(f"unknown sampling design {self.kind!r}; choose from {SAMPLING_KINDS}")
        if self.pool_multiplier < 1 or not 0.0 <= self.keep_fraction <= 1.0:
            raise ValueError("rad needs pool_multiplier >= 1 and keep_fraction in [0, 1]")
        if not 0.0 <= self.early_mass <= 1.0 or self.split_time < 0:
            raise ValueError("invalid stratification settings")


def draw_batch(design: SampleDesign, M: int, domain: Domain, rng: np.random.Generator, residual_fn=None):
    """Draw ``M`` training points ``(t (M,), x (M, d))``.

    For ``rad`` the candidates are ranked by ``|residual_fn(t, x)|``; ties keep
    candidate order (stable sort).
    """
    if M < 1:
        raise ValueError("batch size must be positive")
    if design.kind == "uniform":
        return domain.uniform(rng, M)

    if design.kind == "t_stratified":
        split = min(design.split_time, domain.T)
        n_early = int(math.floor(M * design.early_mass))
        t1, x1 = domain.uniform(rng, n_early, (0.0, split))
        t2, x2 = domain.uniform(rng, M - n_early, (split, domain.T))
        return np.concatenate([t1, t2]), np.concatenate([x1, x2])

    if residual_fn is None:
        raise ValueError("rad sampling needs a residual function")
    pool = design.pool_multiplier * M
    tc, xc = domain.uniform(rng, pool)
    score = np.abs(np.asarray(residual_fn(tc, xc), dtype=np.float64)).reshape(-1)
    if score.shape[0] != pool:
        raise ValueError("residual_fn must return one value per candidate")
    score = np.where(np.isfinite(score), score, np.inf)
    order = np.argsort(-score, kind="stable")
    n_keep = min(int(math.ceil(design.keep_fraction * M)), M)
    top = order[:n_keep]
    rest = order[n_keep:]
    extra = rng.choice(rest.shape[0], size=M - n_keep, replace=False)
    idx = np.concatenate([top, rest[np.sort(extra)]])
    return tc[idx], xc[idx]


class ValidationSet:
    """Fixed validation points; arrays are read-only."""

    __slots__ = ("t", "x", "seed")

    def __init__(self, t, x, seed):
        t = np.array(t, dtype=np.float64)
        x = np.array(x, dtype=np.float64)
        t.flags.writeable = False
        x.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "seed", seed)

    def __setattr__(self, name, value):
        raise AttributeError("ValidationSet is immutable")

    def __len__(self):
        return self.t.shape[0]


def make_validation(domain: Domain, M_V: int = 2000, seed: int = 0) -> ValidationSet:
    if M_V < 1:
        raise ValueError("validation set needs at least one point")
    t, x = domain.uniform(np.random.default_rng(seed), M_V)
    return ValidationSet(t, x, seed)


def stream_seeds(master_seed: int) -> dict:
    """Independent integer seeds for each random stream, derived from one master seed."""
    children = np.random.SeedSequence(int(master_seed)).spawn(len(STREAMS))
    return {name: int(c.generate_state(1, np.uint32)[0]) for name, c in zip(STREAMS, children)}
