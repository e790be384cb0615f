"""Actor-critic training loop.

Each step takes one Adam step on the value network against the squared HJB
residual (controls frozen), then one Adam step on the control network(s)
against ``-sum H + weight * sum P`` using the just-updated value network
(value frozen).  ``B`` steps share one batch; validation metrics are
recomputed after every epoch and drive the stopping rule.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .diagnostics import MetricRecord, validate
from .networks import ControlSurrogate, NetConfig, Network, ValueSurrogate, save_checkpoint
from .sampling import Domain, SampleDesign, draw_batch, make_validation, stream_seeds

__all__ = [
    "ALGORITHMS",
    "TrainConfig",
    "Adam",
    "lr_at",
    "build_surrogates",
    "loss_interior",
    "loss_control",
    "PaacState",
    "init_state",
    "paac_step",
    "train",
    "RunReport",
    "LOSS_COLUMNS",
]

ALGORITHMS = ("deeppaac", "dgm")
LOSS_COLUMNS = ("step", "L2_int", "Linf_int", "Linf_ctrl", "P1", "Pinf", "lr")


@dataclass(frozen=True)
class TrainConfig:
    M: int = 2000
    B: int = 10
    tol_int: float = 1e-2
    tol_ctrl: float = 1e-3
    lr0: float = 1e-3
    lr_end: float = 1e-4
    power: float = 0.8
    decay_steps: int | None = None  # None: decay over max_steps
    max_steps: int = 10000
    penalty_weight: float = 1.0
    seed: int = 0
    validation_size: int = 2000
    validation_seed: int | None = None  # None: derived from seed
    sampling: str = "uniform"
    # surrogates
    algorithm: str = "deeppaac"
    layers: int = 3
    width: int = 32
    shared_controls: bool = True
    control_box: tuple | None = (-10.0, 10.0)
    gamma: float = 1.0
    terminal_batch: int = 1000  # dgm comparator only
    # Adam
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.tol_int <= 0 or self.tol_ctrl <= 0:
            raise ValueError("tolerances must be positive")
        if not self.lr0 >= self.lr_end > 0:
            raise ValueError("need lr0 >= lr_end > 0")
        if self.B < 1 or self.M < 1:
            raise ValueError("B and M must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be >= 0")
        SampleDesign(self.sampling)

    @classmethod
    def for_problem(cls, problem, **overrides) -> "TrainConfig":
        """Problem-specific defaults (tolerances, decay horizon...) plus overrides."""
        kw = dict(problem.train_defaults)
        kw.update(overrides)
        return cls(**kw)

    @property
    def horizon(self) -> int:
        return self.decay_steps if self.decay_steps is not None else max(self.max_steps, 1)

    @property
    def architecture(self) -> str:
        return "paac_residual" if self.algorithm == "deeppaac" else "dgm_gated"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["decay_steps"] = self.horizon
        return d


def lr_at(n: int, lr0: float = 1e-3, lr_end: float = 1e-4, power: float = 0.8, N: int = 10000) -> float:
    """Polynomial decay ``(lr0 - lr_end)(1 - min(n, N)/N)^power + lr_end``."""
    if n < 0:
        raise ValueError("step must be >= 0")
    frac = 1.0 - min(n, N) / N
    return (lr0 - lr_end) * frac**power + lr_end


class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0

    def update(self, params, grads, lr):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def build_surrogates(problem, config: TrainConfig, init_seed: int = 0):
    arch = config.architecture
    vcfg = NetConfig(arch, config.layers, config.width, 1, init_seed, config.gamma)
    value = ValueSurrogate(Network(vcfg, 1 + problem.d), problem, hard_terminal=config.algorithm == "deeppaac")
    ccfg = NetConfig(arch, config.layers, config.width, problem.a, init_seed + 1)
    control = ControlSurrogate.build(ccfg, 1 + problem.d, problem.a, config.shared_controls, config.control_box)
    return value, control


def _controls(control, t, x):
    u = control.forward_control(t, x)
    return [u[:, k] for k in range(u.shape[1])]


def loss_interior(problem, value, control, t, x, tape: Tape | None = None, jet=None, terminal_x=None):
    """Sum of squared HJB residuals with the controls held fixed.

    Returns ``(loss, residual, jet)``; ``jet`` may be passed in when already
    computed on ``tape`` for the current value parameters.  With
    ``terminal_x`` the squared terminal mismatch of the raw network is added
    (used by the comparator without hard terminal injection).
    """
    if jet is None:
        tape = Tape() if tape is None else tape
        jet = value.value_jet(t, x, tape)
    u = _controls(control, t, x)
    r = jet.dt + problem.hamiltonian(t, x, u, jet)
    loss = ad.total(r * r)
    if terminal_x is not None:
        tT = np.full(terminal_x.shape[0], problem.T)
        out = value.net.value_nodes(jet.v.tape, tT, terminal_x, jet.params)[:, 0]
        e = out - problem.terminal(terminal_x)
        loss = loss + ad.total(e * e)
    return loss, r, jet


def loss_control(problem, jet, control, t, x, weight: float = 1.0, tape: Tape | None = None):
    """``-sum H(u) + weight * sum P(u)`` with the value jet held fixed.

    Returns ``(loss, param_nodes)``.
    """
    tape = Tape() if tape is None else tape
    jd = jet.detached()
    u, pnodes = control.control_nodes(tape, t, x)
    loss = -ad.total(problem.hamiltonian(t, x, u, jd))
    if problem.constrained and weight != 0:
        loss = loss + weight * ad.total(problem.penalty(u))
    return loss, pnodes


@dataclass
class PaacState:
    value: ValueSurrogate
    control: ControlSurrogate
    adam_v: Adam
    adam_u: Adam
    step: int = 0
    t: np.ndarray | None = None
    x: np.ndarray | None = None
    terminal_x: np.ndarray | None = None
    # value jet on the current batch for the current value parameters; the
    # control update computes it and the next value update reuses it
    _jet: object = None

    def set_batch(self, t, x, terminal_x=None):
        self.t, self.x, self.terminal_x = t, x, terminal_x
        self._jet = None


def init_state(problem, config: TrainConfig, init_seed: int = 0) -> PaacState:
    value, control = build_surrogates(problem, config, init_seed)
    b = (config.beta1, config.beta2, config.eps)
    return PaacState(
        value,
        control,
        Adam([p.shape for p in value.params], *b),
        Adam([p.shape for p in control.params], *b),
    )


def paac_step(state: PaacState, problem, config: TrainConfig) -> PaacState:
    """One value update followed by one control update on the current batch."""
    if state.t is None:
        raise ValueError("draw a batch (state.set_batch) before stepping")
    lr = lr_at(state.step, config.lr0, config.lr_end, config.power, config.horizon)
    t, x = state.t, state.x

    loss, _, jet = loss_interior(problem, state.value, state.control, t, x, jet=state._jet, terminal_x=state.terminal_x)
    gv = ad.grad_params(loss, jet.params)
    state.value.params = state.adam_v.update(state.value.params, gv, lr)

    jet = state.value.value_jet(t, x, Tape())
    lu, pn = loss_control(problem, jet, state.control, t, x, config.penalty_weight)
    gu = ad.grad_params(lu, pn)
    state.control.params = state.adam_u.update(state.control.params, gu, lr)

    state._jet = jet
    state.step += 1
    return state


def converged(metrics: MetricRecord, problem, config: TrainConfig) -> bool:
    ok = metrics.Linf_int <= config.tol_int and metrics.Linf_ctrl <= config.tol_ctrl
    if problem.constrained:
        ok = ok and metrics.Pinf == 0.0
    return bool(ok)


@dataclass
class RunReport:
    problem: dict
    config: dict
    seeds: dict
    history: list = field(default_factory=list)
    status: str = "max_steps"  # converged | max_steps | diverged
    error: str | None = None
    steps: int = 0
    converged_step: int | None = None
    wall_time: float = 0.0
    value: ValueSurrogate | None = field(default=None, repr=False)
    control: ControlSurrogate | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}

    def manifest(self) -> dict:
        return {
            "problem": self.problem,
            "config": self.config,
            "seeds": self.seeds,
            "status": self.status,
            "converged": self.converged,
            "steps": self.steps,
            "converged_step": self.converged_step,
            "wall_time": self.wall_time,
            "final_metrics": self.final,
            "error": self.error,
        }

    def write_losses(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for row in self.history:
                w.writerow([row["step"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])

    def write(self, out_dir, extra_manifest: dict | None = None) -> Path:
        """manifest.json, losses.csv and one checkpoint per network."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_losses(out / "losses.csv")
        files = {}
        if self.value is not None:
            meta = {"role": "value", **asdict(self.value.net.config), "input_dim": self.value.net.input_dim}
            save_checkpoint(out / "value.ckpt", self.value.params, meta)
            files["value"] = "value.ckpt"
            for k, net in enumerate(self.control.nets):
                meta = {"role": "control", "head": k, **asdict(net.config), "input_dim": net.input_dim}
                name = f"control_{k}.ckpt"
                save_checkpoint(out / name, net.params, meta)
                files[f"control_{k}"] = name
        man = self.manifest()
        man["checkpoints"] = files
        if extra_manifest:
            man.update(extra_manifest)
        (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
        return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def train(problem, config: TrainConfig, callback=None, validation=None) -> RunReport:
    """Run the actor-critic loop until the stopping rule holds or ``max_steps``.

    ``callback(state, metrics)`` is invoked after every validation.
    """
    t0 = time.perf_counter()
    seeds = stream_seeds(config.seed)
    vseed = seeds["validation"] if config.validation_seed is None else config.validation_seed
    seeds = {**seeds, "validation": vseed}
    domain = Domain.of(problem)
    vset = make_validation(domain, config.validation_size, vseed) if validation is None else validation
    design = SampleDesign(config.sampling)
    rng = np.random.default_rng(seeds["batches"])
    state = init_state(problem, config, seeds["init"])
    report = RunReport(problem.describe(), config.as_dict(), seeds, value=state.value, control=state.control)

    def record(metrics: MetricRecord):
        lr = lr_at(state.step, config.lr0, config.lr_end, config.power, config.horizon)
        report.history.append({"step": state.step, **metrics.as_dict(), "lr": lr})
        if callback is not None:
            callback(state, metrics)

    record(validate(problem, state.value, state.control, vset))
    soft_terminal = config.algorithm == "dgm"

    while state.step < config.max_steps:
        residual_fn = None
        if design.kind == "rad":
            residual_fn = lambda tc, xc: _residual(problem, state, tc, xc)
        t, x = draw_batch(design, config.M, domain, rng, residual_fn)
        xT = domain.uniform(rng, config.terminal_batch)[1] if soft_terminal else None
        state.set_batch(t, x, xT)
        try:
            for _ in range(config.B):
                if state.step >= config.max_steps:
                    break
                paac_step(state, problem, config)
        except (NonFiniteError, FloatingPointError) as e:
            report.status = "diverged"
            report.error = str(e)
            break
        metrics = validate(problem, state.value, state.control, vset)
        record(metrics)
        if not metrics.finite:
            report.status = "diverged"
            break
        if converged(metrics, problem, config):
            report.status = "converged"
            report.converged_step = state.step
            break

    report.steps = state.step
    report.wall_time = time.perf_counter() - t0
    return report


def _residual(problem, state, t, x):
    from .diagnostics import pointwise

    return pointwise(problem, state.value, state.control, t, x)["residual"]
