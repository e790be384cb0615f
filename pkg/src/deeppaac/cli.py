"""Command line: ``deeppaac {run,benchmark,export,fdcheck}``.

Config files are flat ``key = value`` lines grouped under ``[section]``
headers; ``#`` starts a comment.  Every key is validated before any
computation starts and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

THREADS_ENV = "DEEPPAAC_THREADS"


def _apply_thread_env():
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, n)


# must run before numpy is imported for the BLAS pools to honour it
_apply_thread_env()

import numpy as np  # noqa: E402

from .autodiff import check_against_fd  # noqa: E402
from .diagnostics import GridSpec, export_grid, parse_grid  # noqa: E402
from .networks import ControlSurrogate, NetConfig, Network, ValueSurrogate, load_checkpoint  # noqa: E402
from .problems import PROBLEMS, get_problem  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = ["ConfigError", "RunConfig", "BenchmarkConfig", "parse_config", "load_config", "main", "run", "benchmark"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing

_TRAIN_KEYS = {
    "M": int,
    "B": int,
    "tol_int": float,
    "tol_ctrl": float,
    "lr0": float,
    "lr_end": float,
    "power": float,
    "decay_steps": int,
    "max_steps": int,
    "penalty_weight": float,
    "validation_size": int,
    "validation_seed": int,
    "sampling": str,
}
_NETWORK_KEYS = {
    "algorithm": str,
    "layers": int,
    "width": int,
    "shared_controls": "bool",
    "control_box": "box",
    "gamma": float,
    "terminal_batch": int,
}
_OUTPUT_KEYS = {"dir": str, "grid": str}
_BENCH_KEYS = {"arms": str, "runs": int}


def _to_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_box(s: str):
    if s.strip().lower() in ("none", "off", ""):
        return None
    lo, hi = (float(v) for v in s.split(","))
    if not hi > lo:
        raise ValueError("box needs lo < hi")
    return (lo, hi)


def _convert(kind, raw: str):
    if kind == "bool":
        return _to_bool(raw)
    if kind == "box":
        return _to_box(raw)
    if kind is str:
        return raw.strip()
    if kind is int:
        f = float(raw)
        if f != int(f):
            raise ValueError(f"not an integer: {raw!r}")
        return int(f)
    return kind(raw)


def _read_sections(text: str) -> dict:
    sections: dict = {"": {}}
    cur = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip()
            sections.setdefault(cur, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in sections[cur]:
            raise ConfigError(f"line {lineno}: duplicate key {_qual(cur, k)}")
        sections[cur][k] = v
    return sections


def _qual(sec, key):
    return f"{sec}.{key}" if sec else key


@dataclass
class RunConfig:
    problem: str
    problem_params: dict = field(default_factory=dict)
    train: TrainConfig | None = None
    train_overrides: dict = field(default_factory=dict)
    out: str = "runs/out"
    grid: str | None = None
    seed: int = 0
    arms: tuple = ("deeppaac:shared", "dgm:shared")
    runs: int = 5

    def build_problem(self):
        return get_problem(self.problem, **self.problem_params)

    def build_train(self, **extra) -> TrainConfig:
        prob = self.build_problem()
        kw = {**self.train_overrides, "seed": self.seed, **extra}
        return TrainConfig.for_problem(prob, **kw)

    def echo(self) -> dict:
        prob = self.build_problem()
        return {
            "problem": prob.describe(),
            "train": self.build_train().as_dict(),
            "grid": self.grid_spec(prob).describe(),
            "out": self.out,
            "seed": self.seed,
        }

    def grid_spec(self, problem=None) -> GridSpec:
        problem = problem or self.build_problem()
        return GridSpec.default(problem) if self.grid is None else parse_grid(self.grid, problem)


BenchmarkConfig = RunConfig


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a config; raises :class:`ConfigError`."""
    sec = _read_sections(text)
    known = {"", "problem", "train", "network", "output", "benchmark"}
    for s in sec:
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")
    top = dict(sec[""])
    seed = 0
    if "seed" in top:
        seed = _checked(int, top.pop("seed"), "seed")
    if top:
        raise ConfigError(f"unknown key {next(iter(top))!r}")

    psec = dict(sec.get("problem", {}))
    if "name" not in psec:
        raise ConfigError("missing key problem.name")
    name = psec.pop("name")
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; registered: {', '.join(sorted(PROBLEMS))}")
    cls = PROBLEMS[name]
    params: dict = {}
    for k, v in psec.items():
        if k == "T":
            params["T"] = _checked(float, v, "problem.T")
        elif k == "case" and name == "constrained_payment":
            params["case"] = _checked(int, v, "problem.case")
        elif k.endswith("_range") and k[: -len("_range")] in cls.state_names:
            params.setdefault("_ranges", {})[k[: -len("_range")]] = _checked(_to_box, v, f"problem.{k}")
        elif k in cls.defaults:
            params[k] = _checked(float, v, f"problem.{k}")
        else:
            raise ConfigError(f"unknown key problem.{k} for {name}")
    ranges = params.pop("_ranges", None)
    if ranges:
        dom = [ranges.get(s, b) for s, b in zip(cls.state_names, cls.default_domain)]
        params["domain"] = tuple(dom)
    try:
        problem = get_problem(name, **params)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"invalid problem parameters: {e}") from None

    overrides: dict = {}
    for secname, table in (("train", _TRAIN_KEYS), ("network", _NETWORK_KEYS)):
        for k, v in sec.get(secname, {}).items():
            if k not in table:
                raise ConfigError(f"unknown key {secname}.{k}")
            overrides[k] = _checked(table[k], v, f"{secname}.{k}")

    out, grid = "runs/out", None
    for k, v in sec.get("output", {}).items():
        if k not in _OUTPUT_KEYS:
            raise ConfigError(f"unknown key output.{k}")
        if k == "dir":
            out = v
        else:
            grid = v

    arms, runs = ("deeppaac:shared", "dgm:shared"), 5
    for k, v in sec.get("benchmark", {}).items():
        if k not in _BENCH_KEYS:
            raise ConfigError(f"unknown key benchmark.{k}")
        if k == "runs":
            runs = _checked(int, v, "benchmark.runs")
            if runs < 1:
                raise ConfigError("benchmark.runs must be >= 1")
        else:
            arms = tuple(a.strip() for a in v.split(",") if a.strip())
            for a in arms:
                _parse_arm(a)

    rc = RunConfig(name, params, None, overrides, out, grid, seed, arms, runs)
    try:
        rc.train = rc.build_train()
        rc.grid_spec(problem)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return rc


def _checked(kind, raw, key):
    try:
        return _convert(kind, raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {key}: {e}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def _parse_arm(arm: str):
    try:
        alg, heads = arm.split(":")
    except ValueError:
        raise ConfigError(f"arm {arm!r} must look like algorithm:shared|separate") from None
    if alg not in ("deeppaac", "dgm") or heads not in ("shared", "separate"):
        raise ConfigError(f"bad arm {arm!r}")
    return alg, heads == "shared"


# ---------------------------------------------------------------------------
# commands


def run(rc: RunConfig, out: str | None = None, log=print):
    """Train, then write manifest, losses, checkpoints and the evaluation grid."""
    problem = rc.build_problem()
    cfg = rc.build_train()
    grid = rc.grid_spec(problem)
    out_dir = Path(out or rc.out)

    def cb(state, m):
        if log is not None and state.step % (cfg.B * 10) == 0:
            log(f"step {state.step:6d}  Linf_int {m.Linf_int:.3e}  Linf_ctrl {m.Linf_ctrl:.3e}  Pinf {m.Pinf:.3e}")

    report = train(problem, cfg, callback=cb)
    report.write(out_dir, {"grid": grid.describe(), "run_config": rc.echo()})
    export_grid(problem, report.value, report.control, grid, out_dir / "grid.csv")
    if log is not None:
        log(f"{report.status} after {report.steps} steps ({report.wall_time:.1f}s) -> {out_dir}")
    return report, out_dir


def _fmt_steps(v):
    return "*" if not math.isfinite(v) else str(int(v))


def benchmark(rc: RunConfig, out: str | None = None, log=print):
    """Run every arm ``runs`` times; median / range of steps to convergence."""
    problem = rc.build_problem()
    out_dir = Path(out or rc.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summary = [], []
    for arm in rc.arms:
        alg, shared = _parse_arm(arm)
        steps, times = [], []
        for k in range(rc.runs):
            cfg = rc.build_train(algorithm=alg, shared_controls=shared, seed=rc.seed + k)
            rep = train(problem, cfg)
            s = rep.converged_step if rep.converged else math.inf
            steps.append(s)
            times.append(rep.wall_time)
            rows.append({"arm": arm, "run": k, "seed": cfg.seed, "status": rep.status, "steps": rep.steps, "wall_time": rep.wall_time})
            if log is not None:
                log(f"{arm} run {k}: {rep.status} at {rep.steps} steps ({rep.wall_time:.1f}s)")
        med = float(np.median(steps))
        summary.append(
            {
                "arm": arm,
                "median_steps": med,
                "min_steps": float(min(steps)),
                "max_steps": float(max(steps)),
                "range": f"[{_fmt_steps(min(steps))},{_fmt_steps(max(steps))}]",
                "median": _fmt_steps(med),
                "mean_wall_time": float(np.mean(times)),
                "runs": rc.runs,
            }
        )
    with open(out_dir / "benchmark_runs.csv", "w") as fh:
        fh.write("arm,run,seed,status,steps,wall_time\n")
        for r in rows:
            fh.write(f"{r['arm']},{r['run']},{r['seed']},{r['status']},{r['steps']},{r['wall_time']:.3f}\n")
    table = format_summary(summary)
    (out_dir / "benchmark.txt").write_text(table)
    # non-converged medians are inf; JSON has no inf, so write null
    clean = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in s.items()} for s in summary]
    (out_dir / "benchmark.json").write_text(json.dumps({"config": rc.echo(), "arms": clean}, indent=2) + "\n")
    if log is not None:
        log(table)
    return summary


def format_summary(summary) -> str:
    lines = [f"{'arm':<20} {'median':>8} {'range':>16} {'mean time (s)':>14}"]
    for s in summary:
        lines.append(f"{s['arm']:<20} {s['median']:>8} {s['range']:>16} {s['mean_wall_time']:>14.1f}")
    return "\n".join(lines) + "\n"


def load_surrogates(run_dir, problem, cfg: TrainConfig):
    """Rebuild the trained surrogates from a run directory's checkpoints."""
    run_dir = Path(run_dir)
    vpath = run_dir / "value.ckpt"
    if not vpath.is_file():
        raise FileNotFoundError(f"no value checkpoint in {run_dir}")
    vp, vmeta = load_checkpoint(vpath)
    _check_arch(vmeta, cfg, problem)
    vnet = Network(_netconfig(vmeta), 1 + problem.d, vp)
    value = ValueSurrogate(vnet, problem, hard_terminal=cfg.algorithm == "deeppaac")
    nets = []
    k = 0
    while (run_dir / f"control_{k}.ckpt").is_file():
        cp, cmeta = load_checkpoint(run_dir / f"control_{k}.ckpt")
        _check_arch(cmeta, cfg, problem)
        nets.append(Network(_netconfig(cmeta), 1 + problem.d, cp))
        k += 1
    if not nets:
        raise FileNotFoundError(f"no control checkpoints in {run_dir}")
    control = ControlSurrogate(nets, cfg.control_box)
    if control.a != problem.a:
        raise ValueError(f"checkpoint has {control.a} controls, problem needs {problem.a}")
    return value, control


def _check_arch(meta, cfg: TrainConfig, problem):
    got = (meta.get("architecture"), meta.get("layers"), meta.get("width"), meta.get("input_dim"))
    want = (cfg.architecture, cfg.layers, cfg.width, 1 + problem.d)
    if got != want:
        names = ("architecture", "layers", "width", "input_dim")
        diff = ", ".join(f"{n}: checkpoint {g} vs config {w}" for n, g, w in zip(names, got, want) if g != w)
        raise ValueError(f"{meta.get('role', 'network')} checkpoint does not match the config ({diff})")


def _netconfig(meta) -> NetConfig:
    keys = {f.name for f in fields(NetConfig)}
    return NetConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in meta.items() if k in keys})


def export(rc: RunConfig, run_dir, grid: str | None = None, out=None):
    problem = rc.build_problem()
    cfg = rc.build_train()
    value, control = load_surrogates(run_dir, problem, cfg)
    spec = parse_grid(grid, problem) if grid else rc.grid_spec(problem)
    out = Path(out) if out else Path(run_dir) / "grid.csv"
    header, rows = export_grid(problem, value, control, spec, out)
    return out, len(rows)


def fdcheck(n: int = 100, seed: int = 0, architecture: str = "paac_residual", dims=(1, 2), eps: float = 1e-4, log=print):
    """Finite-difference audit of the input jets of random networks."""
    rng = np.random.default_rng(seed)
    worst, failed = 0.0, 0
    for k in range(n):
        d = int(dims[k % len(dims)])
        net = Network(NetConfig(architecture, init_seed=int(rng.integers(2**31))), 1 + d)
        t = float(rng.uniform(0.05, 0.95))
        x = rng.uniform(-1.0, 1.0, d)
        rep = check_against_fd(lambda tt, xx: net.jet(tt, xx), lambda tt, xx: net.evaluate(tt, xx, dtype=np.longdouble)[:, 0], t, x, eps=eps)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed += 1
            if log is not None:
                log(f"network {k} (d={d}) FAILED: {rep}")
    if log is not None:
        log(f"fdcheck: {n - failed}/{n} networks passed; worst scaled error {worst:.3e}")
    return failed, worst


def _build_parser():
    ap = argparse.ArgumentParser(prog="deeppaac", description="Actor-critic deep Galerkin solver for Principal-Agent HJB equations.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("run", help="train one configuration and write artifacts")
    common(p)
    p.add_argument("--grid", default=None, help='evaluation grid, e.g. "t=0;x=0:1:101"')
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("benchmark", help="repeat runs per arm and summarise steps to convergence")
    common(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("export", help="evaluate saved checkpoints on a grid")
    common(p)
    p.add_argument("--checkpoint", required=True, help="run directory holding the .ckpt files")
    p.add_argument("--grid", default=None)

    p = sub.add_parser("fdcheck", help="finite-difference audit of the autodiff jets")
    p.add_argument("--n", type=int, default=100, help="number of random networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--architecture", default="paac_residual", choices=["paac_residual", "dgm_gated"])
    p.add_argument("--eps", type=float, default=1e-4)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "fdcheck":
            failed, _ = fdcheck(args.n, args.seed, args.architecture, eps=args.eps)
            return 0 if failed == 0 else 1
        rc = load_config(args.config)
        if args.seed is not None:
            rc = replace(rc, seed=args.seed)
        if args.command == "run":
            if args.grid is not None:
                rc = replace(rc, grid=args.grid)
                rc.grid_spec()
            report, _ = run(rc, args.out, log=None if args.quiet else print)
            return 0 if report.converged else 3
        if args.command == "benchmark":
            benchmark(rc, args.out, log=None if args.quiet else print)
            return 0
        if args.command == "export":
            path, n = export(rc, args.checkpoint, args.grid, args.out)
            print(f"wrote {n} rows to {path}")
            return 0
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
