"""Value and control surrogates.

Two interchangeable architectures share one interface:

``paac_residual``
    dense (1+d -> width) + swish, then ``layers`` residual blocks
    ``a <- swish(a W + b + a)``, then a linear read-out.
``dgm_gated``
    the LSTM-like gated layers of the original Deep Galerkin Method
    (tanh gates), ``layers`` of them, then a linear read-out.

Networks expose a tape path (``jet_forward``, used for training) and a plain
numpy path (``evaluate``) that also runs in extended precision for the
finite-difference audit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import JetLayout, JetValue, Tape

ARCHITECTURES = ("paac_residual", "dgm_gated")


@dataclass(frozen=True)
class NetConfig:
    architecture: str = "paac_residual"
    layers: int = 3
    width: int = 32
    output_dim: int = 1
    init_seed: int = 0
    terminal_exponent: float = 1.0
    activation: str | None = None  # swish for residual nets, tanh for DGM

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.layers < 1 or self.width < 1 or self.output_dim < 1:
            raise ValueError("layers, width and output_dim must all be >= 1")
        if not self.terminal_exponent > 0:
            raise ValueError("terminal_exponent must be positive")

    @property
    def act(self) -> str:
        if self.activation is not None:
            return self.activation
        return "swish" if self.architecture == "paac_residual" else "tanh"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param_shapes(config: NetConfig, input_dim: int) -> list[tuple]:
    w, L, out = config.width, config.layers, config.output_dim
    if config.architecture == "paac_residual":
        shapes = [(input_dim, w), (w,)]
        for _ in range(L):
            shapes += [(w, w), (w,)]
        return shapes + [(w, out), (out,)]
    shapes = [(input_dim, w), (w,)]
    for _ in range(L):
        for _gate in "zgrh":
            shapes += [(input_dim, w), (w, w), (w,)]
    return shapes + [(w, out), (out,)]


def init_network(config: NetConfig, input_dim: int) -> list[np.ndarray]:
    """Glorot-uniform weights, zero biases, reproducible from ``init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    params = []
    for shape in param_shapes(config, input_dim):
        if len(shape) == 2:
            params.append(glorot_uniform(rng, *shape))
        else:
            params.append(np.zeros(shape))
    return params


def _act_np(kind, z):
    if kind == "swish":
        return z / (1 + np.exp(-z))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 1 / (1 + np.exp(-z))
    raise ValueError(kind)


class Network:
    """Parameter container plus the two forward paths."""

    def __init__(self, config: NetConfig, input_dim: int, params=None):
        self.config = config
        self.input_dim = input_dim
        self.params = init_network(config, input_dim) if params is None else [np.asarray(p, dtype=np.float64) for p in params]
        expected = param_shapes(config, input_dim)
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match architecture {expected}")

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def jet_forward(self, J, p, layout: JetLayout):
        act = self.config.act
        if self.config.architecture == "paac_residual":
            a = ad.jet_activation(ad.jet_dense(J, p[0], p[1]), act, layout)
            for l in range(self.config.layers):
                W, b = p[2 + 2 * l], p[3 + 2 * l]
                a = ad.jet_activation(ad.jet_dense(a, W, b, skip=a), act, layout)
            return ad.jet_dense(a, p[-2], p[-1])

        # gated DGM layers; X is the input jet, S the running state
        X = J
        S = ad.jet_activation(ad.jet_dense(X, p[0], p[1]), act, layout)
        one = np.zeros((layout.K, 1, 1))
        one[0] = 1.0
        k = 2
        for _ in range(self.config.layers):
            gates = []
            for gate in "zgr":
                U, W, b = p[k], p[k + 1], p[k + 2]
                k += 3
                gates.append(ad.jet_activation(ad.jet_affine([(X, U), (S, W)], b), act, layout))
            Zg, Gg, Rg = gates
            U, W, b = p[k], p[k + 1], p[k + 2]
            k += 3
            H = ad.jet_activation(ad.jet_affine([(X, U), (ad.jet_mul(S, Rg, layout), W)], b), act, layout)
            S = ad.jet_mul(one - Gg, H, layout) + ad.jet_mul(Zg, S, layout)
        return ad.jet_dense(S, p[-2], p[-1])

    def evaluate(self, t, x, dtype=np.float64, params=None) -> np.ndarray:
        """Plain forward pass, ``(N, output_dim)``; independent of the tape."""
        p = [np.asarray(q, dtype=dtype) for q in (self.params if params is None else params)]
        t = np.atleast_1d(np.asarray(t, dtype=dtype))
        x = np.asarray(x, dtype=dtype).reshape(t.shape[0], -1)
        inp = np.concatenate([t[:, None], x], axis=1)
        act = self.config.act
        if self.config.architecture == "paac_residual":
            a = _act_np(act, inp @ p[0] + p[1])
            for l in range(self.config.layers):
                a = _act_np(act, a @ p[2 + 2 * l] + p[3 + 2 * l] + a)
            return a @ p[-2] + p[-1]
        S = _act_np(act, inp @ p[0] + p[1])
        k = 2
        for _ in range(self.config.layers):
            g = []
            for _gate in "zgr":
                g.append(_act_np(act, inp @ p[k] + S @ p[k + 1] + p[k + 2]))
                k += 3
            Zg, Gg, Rg = g
            H = _act_np(act, inp @ p[k] + (S * Rg) @ p[k + 1] + p[k + 2])
            k += 3
            S = (1 - Gg) * H + Zg * S
        return S @ p[-2] + p[-1]

    def jet(self, t, x, tape: Tape | None = None, column: int = 0, pnodes=None) -> JetValue:
        """Raw (unwrapped) jet of one output column."""
        if column == 0 and self.config.output_dim == 1:
            return ad.input_jet(self.jet_forward, t, x, self.params, tape, pnodes)
        tape = Tape() if tape is None else tape
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
        layout = JetLayout(x.shape[1])
        pn = [tape.leaf(q, "param") for q in self.params] if pnodes is None else pnodes
        out = ad.unpack_jet(self.jet_forward(ad.seed_input(tape, t, x, layout), pn, layout), layout, column)
        out.params = pn
        return out


    def value_nodes(self, tape: Tape, t, x, pnodes) -> Node:
        """Outputs ``(N, output_dim)`` on ``tape`` without input derivatives."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
        layout = JetLayout(x.shape[1], derivatives=False)
        return self.jet_forward(ad.seed_input(tape, t, x, layout), pnodes, layout)[0]


def make_network(config: NetConfig, input_dim: int, params=None) -> Network:
    return Network(config, input_dim, params)


class ValueSurrogate:
    """Value network with the terminal condition injected exactly.

    Output is ``G(x) + (T - t)**gamma * v(t, x)``; with ``hard_terminal``
    off the raw network is used directly (the DGM comparator learns the
    terminal condition through a loss term instead).
    """

    def __init__(self, net: Network, problem, gamma: float | None = None, hard_terminal: bool = True):
        self.net = net
        self.problem = problem
        self.gamma = net.config.terminal_exponent if gamma is None else float(gamma)
        self.hard_terminal = hard_terminal
        self.T = problem.T

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = value

    def _time_factor(self, t):
        tau = self.T - t
        s = tau**self.gamma
        with np.errstate(divide="ignore"):
            ds = -self.gamma * tau ** (self.gamma - 1.0)
        return s, ds

    def forward_value(self, t, x) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
        raw = self.net.evaluate(t, x)[:, 0]
        if not self.hard_terminal:
            return raw
        return self.problem.terminal(x) + (self.T - t) ** self.gamma * raw

    def value_jet(self, t, x, tape: Tape | None = None) -> JetValue:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
        raw = self.net.jet(t, x, tape)
        if not self.hard_terminal:
            return raw
        G, Gx, Gxx = self.problem.terminal_jet(x)
        s, ds = self._time_factor(t)
        d = x.shape[1]
        dxx = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(i, d):
                dxx[i][j] = dxx[j][i] = Gxx[:, i, j] + s * raw.dxx[i][j]
        return JetValue(
            v=G + s * raw.v,
            dt=ds * raw.v + s * raw.dt,
            dx=[Gx[:, i] + s * raw.dx[i] for i in range(d)],
            dxx=dxx,
            params=raw.params,
        )


class ControlSurrogate:
    """Feedback control ``u(t, x)`` from one shared multi-output network or
    from one network per control coordinate, optionally clamped to a box."""

    def __init__(self, nets: list[Network], box=None):
        self.nets = nets
        self.shared = len(nets) == 1
        self.a = nets[0].config.output_dim if self.shared else len(nets)
        if not self.shared and any(n.config.output_dim != 1 for n in nets):
            raise ValueError("separate control heads must each have output_dim 1")
        if box is not None:
            lo, hi = box
            self.lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (self.a,)).copy()
            self.hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (self.a,)).copy()
        else:
            self.lo = self.hi = None

    @classmethod
    def build(cls, config: NetConfig, input_dim: int, a: int, shared: bool = True, box=None):
        if shared:
            return cls([Network(_with(config, output_dim=a), input_dim)], box)
        nets = [Network(_with(config, output_dim=1, init_seed=config.init_seed + k), input_dim) for k in range(a)]
        return cls(nets, box)

    @property
    def params(self):
        return [p for n in self.nets for p in n.params]

    @params.setter
    def params(self, flat):
        flat = list(flat)
        k = 0
        for n in self.nets:
            m = len(n.params)
            n.params = flat[k : k + m]
            k += m

    def _raw(self, t, x):
        outs = [n.evaluate(t, x) for n in self.nets]
        return np.concatenate(outs, axis=1)

    def forward_control(self, t, x) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        raw = self._raw(t, np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1))
        if self.lo is None:
            return raw
        return np.clip(raw, self.lo, self.hi)

    def control_nodes(self, tape: Tape, t, x):
        """Per-coordinate control nodes ``(N,)`` and the parameter leaves."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
        layout = JetLayout(x.shape[1], derivatives=False)
        J = ad.seed_input(tape, t, x, layout)
        pnodes, cols = [], []
        for n in self.nets:
            pn = [tape.leaf(q, "param") for q in n.params]
            pnodes += pn
            out = n.jet_forward(J, pn, layout)
            cols += [out[0, :, k] for k in range(n.config.output_dim)]
        if self.lo is not None:
            cols = [ad.clip(c, self.lo[k], self.hi[k]) for k, c in enumerate(cols)]
        return cols, pnodes


def _with(config: NetConfig, **kw) -> NetConfig:
    d = asdict(config)
    d.update(kw)
    return NetConfig(**d)


# ---------------------------------------------------------------------------
# checkpoints: a small text format, exact round trip via %.17g

_MAGIC = "# deeppaac checkpoint v1"


def save_checkpoint(path, params, meta: dict) -> None:
    lines = [_MAGIC, json.dumps(meta, sort_keys=True), str(len(params))]
    for p in params:
        p = np.asarray(p, dtype=np.float64)
        lines.append("shape " + " ".join(str(s) for s in p.shape))
        lines.append(" ".join(f"{v:.17g}" for v in p.ravel(order="C")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Return ``(params, meta)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != _MAGIC:
        raise ValueError(f"{path} is not a deeppaac checkpoint")
    meta = json.loads(text[1])
    n = int(text[2])
    params = []
    for k in range(n):
        shape = tuple(int(s) for s in text[3 + 2 * k].split()[1:])
        body = text[4 + 2 * k].split()
        params.append(np.array([float(v) for v in body], dtype=np.float64).reshape(shape))
    return params, meta
