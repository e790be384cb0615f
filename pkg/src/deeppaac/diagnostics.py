"""Validation metrics, evaluation grids, property checks and Monte Carlo rollouts."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NonFiniteError, Tape
from .problems import UnsupportedError

__all__ = [
    "MetricRecord",
    "pointwise",
    "validate",
    "GridSpec",
    "parse_grid",
    "analytic_error_grid",
    "ErrorSummary",
    "monotonicity_checks",
    "MonotonicityResult",
    "interior_argmax",
    "RolloutConfig",
    "RolloutError",
    "rollout_mc",
    "export_grid",
    "grid_header",
]


@dataclass(frozen=True)
class MetricRecord:
    """Validation metrics.  ``L_int`` is the squared HJB residual per point."""

    L2_int: float
    Linf_int: float
    Linf_ctrl: float
    P1: float
    Pinf: float

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def pointwise(problem, value, control, t, x) -> dict:
    """Surrogate outputs and loss integrands at each point (plain arrays).

    Keys: ``V``, ``u`` ``(N, a)``, ``residual`` (``V_t + H``, signed),
    ``foc`` ``(N, n_foc)``, ``penalty``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
    jet = value.value_jet(t, x, Tape()).detached()
    u = control.forward_control(t, x)
    uc = [u[:, k] for k in range(u.shape[1])]
    H = problem.hamiltonian(t, x, uc, jet)
    foc = problem.foc_residuals(t, x, uc, jet)
    pen = np.broadcast_to(np.asarray(problem.penalty(uc), dtype=np.float64), t.shape)
    return {
        "V": np.asarray(jet.v),
        "u": u,
        "residual": np.asarray(jet.dt + H),
        "foc": np.column_stack([np.broadcast_to(f, t.shape) for f in foc]),
        "penalty": pen,
    }


def validate(problem, value, control, vset) -> MetricRecord:
    if len(vset) == 0:
        raise ValueError("empty validation set")
    try:
        pw = pointwise(problem, value, control, vset.t, vset.x)
    except NonFiniteError:
        nan = float("nan")
        return MetricRecord(nan, nan, nan, nan, nan)
    L = pw["residual"] ** 2
    return MetricRecord(
        L2_int=float(np.sqrt(np.sum(L * L))),
        Linf_int=float(np.max(L)),
        Linf_ctrl=float(np.max(np.abs(pw["foc"]))),
        P1=float(np.mean(pw["penalty"])),
        Pinf=float(np.max(pw["penalty"])),
    )


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Time values plus one ``(name, lo, hi, count)`` axis per state.

    Points are ordered with t outermost and the states in row-major order.
    """

    t_values: tuple
    axes: tuple

    def __post_init__(self):
        if len(self.t_values) < 1:
            raise ValueError("grid needs at least one time value")
        for name, lo, hi, n in self.axes:
            if n < 2:
                raise ValueError(f"axis {name} needs count >= 2")
            if not hi > lo:
                raise ValueError(f"axis {name} needs max > min")

    @property
    def shape(self) -> tuple:
        return (len(self.t_values),) + tuple(n for _, _, _, n in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axis_values(self, k: int) -> np.ndarray:
        _, lo, hi, n = self.axes[k]
        return np.linspace(lo, hi, n)

    def points(self):
        grids = np.meshgrid(np.asarray(self.t_values, dtype=np.float64), *[self.axis_values(k) for k in range(len(self.axes))], indexing="ij")
        t = grids[0].reshape(-1)
        x = np.column_stack([g.reshape(-1) for g in grids[1:]])
        return t, x

    def check(self, problem) -> "GridSpec":
        """Raise if the grid leaves the problem's space-time domain."""
        names = list(problem.state_names)
        if [a[0] for a in self.axes] != names:
            raise ValueError(f"grid axes must be {names} for {problem.name}")
        tol = 1e-12
        if min(self.t_values) < -tol or max(self.t_values) > problem.T + tol:
            raise ValueError(f"grid times must lie in [0, {problem.T}]")
        for (name, lo, hi, _), (dlo, dhi) in zip(self.axes, problem.domain):
            if lo < dlo - tol or hi > dhi + tol:
                raise ValueError(f"grid axis {name}=[{lo}, {hi}] leaves the domain [{dlo}, {dhi}]")
        return self

    @classmethod
    def default(cls, problem, count: int = 21, t_values=(0.0,)) -> "GridSpec":
        axes = tuple((n, lo, hi, count) for n, (lo, hi) in zip(problem.state_names, problem.domain))
        return cls(tuple(float(v) for v in t_values), axes)

    def describe(self) -> str:
        t = ",".join(f"{v:g}" for v in self.t_values)
        parts = [f"t={t}"] + [f"{n}={lo:g}:{hi:g}:{c}" for n, lo, hi, c in self.axes]
        return ";".join(parts)


def _parse_values(text: str):
    text = text.strip()
    if ":" in text:
        lo, hi, n = text.split(":")
        return float(lo), float(hi), int(n)
    return tuple(float(v) for v in text.split(","))


def parse_grid(text: str, problem) -> GridSpec:
    """Parse ``"t=0;x=0:1:101;w=0:1:101"``.

    ``lo:hi:n`` gives ``n`` evenly spaced values; a comma list gives explicit
    time slices.  Unlisted states default to their full domain with 21 points,
    an unlisted time to ``t=0``.
    """
    spec = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ValueError(f"grid entry {part!r} is not name=values")
        k, v = part.split("=", 1)
        spec[k.strip()] = _parse_values(v)
    unknown = set(spec) - {"t", *problem.state_names}
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)} for {problem.name}")
    tv = spec.get("t", (0.0,))
    if len(tv) == 3 and isinstance(tv[2], int):
        tv = tuple(np.linspace(tv[0], tv[1], tv[2]))
    axes = []
    for name, (lo, hi) in zip(problem.state_names, problem.domain):
        v = spec.get(name, (lo, hi, 21))
        if not (len(v) == 3 and isinstance(v[2], int)):
            raise ValueError(f"state axis {name} needs lo:hi:count")
        axes.append((name, float(v[0]), float(v[1]), int(v[2])))
    return GridSpec(tuple(float(s) for s in tv), tuple(axes)).check(problem)


@dataclass
class ErrorSummary:
    value_max: float
    value_mean: float
    controls: dict  # feature -> (max_abs, mean_abs)
    table: np.ndarray
    header: list

    def max_abs(self, feature: str) -> float:
        return self.controls[feature][0]


def analytic_error_grid(problem, value, control, grid: GridSpec) -> ErrorSummary:
    """Absolute errors of the learned value and identified control features."""
    if not problem.has_analytic:
        raise UnsupportedError(f"{problem.name} has no closed-form solution")
    t, x = grid.points()
    V = value.forward_value(t, x)
    Vs = problem.analytic_value(t, x)
    u = control.forward_control(t, x)
    us = problem.analytic_control(t, x)
    fl = problem.control_features([u[:, k] for k in range(u.shape[1])])
    fs = problem.control_features([us[:, k] for k in range(us.shape[1])])
    ev = np.abs(V - Vs)
    controls, cols, header = {}, [t, *x.T, ev], ["t", *problem.state_names, "V_abs_err"]
    for name in problem.identified_controls:
        e = np.abs(np.asarray(fl[name]) - np.asarray(fs[name]))
        controls[name] = (float(e.max()), float(e.mean()))
        cols.append(e)
        header.append(f"{name}_abs_err")
    return ErrorSummary(float(ev.max()), float(ev.mean()), controls, np.column_stack(cols), header)


# ---------------------------------------------------------------------------
# qualitative properties


@dataclass
class MonotonicityResult:
    target: object
    axis: str
    direction: str
    violation_fraction: float
    passed: bool


def _as_value_fn(value):
    return value.forward_value if hasattr(value, "forward_value") else value


def _as_control_fn(control):
    return control.forward_control if hasattr(control, "forward_control") else control


def monotonicity_checks(problem, value, control, grid: GridSpec, tol: float = 1e-3, max_fraction: float = 0.05, properties=None):
    """Check the problem's declared monotonicity properties on each time slice.

    ``value``/``control`` are surrogates or plain callables ``f(t, x)``.  A
    difference between grid neighbours counts as a violation when it goes the
    wrong way by more than ``tol``.
    """
    props = problem.monotone if properties is None else properties
    t, x = grid.points()
    shape = grid.shape
    cache = {}
    out = []
    for prop in props:
        if prop.target not in cache:
            if prop.target == "value":
                cache[prop.target] = np.asarray(_as_value_fn(value)(t, x)).reshape(shape)
            else:
                cache[prop.target] = np.asarray(_as_control_fn(control)(t, x))[:, prop.target].reshape(shape)
        f = cache[prop.target]
        diff = np.diff(f, axis=1 + prop.axis)
        viol = prop.sign * diff < -tol
        frac = float(viol.mean())
        name = "V" if prop.target == "value" else problem.control_names[prop.target]
        out.append(
            MonotonicityResult(
                name,
                problem.state_names[prop.axis],
                "nondecreasing" if prop.sign > 0 else "nonincreasing",
                frac,
                frac <= max_fraction,
            )
        )
    return out


def interior_argmax(values: np.ndarray):
    """Index of the maximum of a 2-D surface and whether it avoids the boundary."""
    values = np.asarray(values)
    idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(values)), values.shape))
    interior = all(0 < i < n - 1 for i, n in zip(idx, values.shape))
    return idx, interior


# ---------------------------------------------------------------------------
# Monte Carlo verification


@dataclass(frozen=True)
class RolloutConfig:
    n_paths: int = 100000
    n_steps: int = 200
    x0: tuple = (0.0,)
    t0: float = 0.0
    seed: int = 0
    chunk: int = 20000

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("n_paths and n_steps must be >= 1")


class RolloutError(FloatingPointError):
    def __init__(self, seed, path):
        super().__init__(f"non-finite rollout path (seed={seed}, path={path})")
        self.seed = seed
        self.path = path


def _path_normals(seed: int, first: int, count: int, n_steps: int) -> np.ndarray:
    # one generator per path so the result does not depend on chunking
    return np.stack(
        [np.random.default_rng(np.random.SeedSequence([seed, i])).standard_normal(n_steps) for i in range(first, first + count)]
    )


def rollout_mc(problem, policy, config: RolloutConfig = RolloutConfig()):
    """Euler-Maruyama estimate of the Principal's objective under a feedback policy.

    ``policy(t (N,), x (N, d)) -> (N, a)`` or a control surrogate.  Returns
    ``(estimate, std_error)``.
    """
    if not problem.has_rollout:
        raise UnsupportedError(f"no reduced state dynamics for {problem.name}")
    pol = _as_control_fn(policy)
    T = problem.T
    h = (T - config.t0) / config.n_steps
    sq = math.sqrt(h)
    x0 = np.asarray(config.x0, dtype=np.float64).reshape(problem.d)
    payoff = np.empty(config.n_paths)
    for start in range(0, config.n_paths, config.chunk):
        n = min(config.chunk, config.n_paths - start)
        xi = _path_normals(config.seed, start, n, config.n_steps)
        X = np.tile(x0, (n, 1))
        run = np.zeros(n)
        for k in range(config.n_steps):
            tk = np.full(n, config.t0 + k * h)
            u = np.asarray(pol(tk, X), dtype=np.float64).reshape(n, problem.a)
            drift, vol, r = problem.rollout_coefficients(tk, X, u)
            run += r * h
            X = X + drift * h + vol * (sq * xi[:, k])[:, None]
        val = run + problem.terminal(X)
        bad = ~np.isfinite(val)
        if np.any(bad):
            raise RolloutError(config.seed, start + int(np.flatnonzero(bad)[0]))
        payoff[start : start + n] = val
    est = float(payoff.mean())
    # shift-invariant; keeps identical payoffs at exactly zero spread
    dev = payoff - payoff[0]
    se = float(dev.std(ddof=1) / math.sqrt(config.n_paths)) if config.n_paths > 1 else float("nan")
    return est, se


# ---------------------------------------------------------------------------
# export


def grid_header(problem) -> list:
    cols = ["t", *problem.state_names, "V", *problem.control_names, "residual"]
    if problem.has_analytic:
        cols += ["V_exact", "V_abs_err"]
    return cols


def export_grid(problem, value, control, grid: GridSpec, path=None):
    """Evaluate surrogates on ``grid``; returns ``(header, rows)`` and writes CSV if ``path``.

    ``residual`` is the signed HJB residual ``V_t + H``; the training loss
    integrand is its square.
    """
    t, x = grid.points()
    pw = pointwise(problem, value, control, t, x)
    cols = [t, *x.T, pw["V"], *pw["u"].T, pw["residual"]]
    if problem.has_analytic:
        Vs = problem.analytic_value(t, x)
        cols += [Vs, np.abs(pw["V"] - Vs)]
    rows = np.column_stack(cols)
    header = grid_header(problem)
    if path is not None:
        write_csv(path, header, rows)
    return header, rows


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(repr(float(v)) for v in r) + "\n")
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(header, rows))
