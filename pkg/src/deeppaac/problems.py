"""Built-in Principal-Agent case studies.

Each problem supplies the pieces the solver needs: the Hamiltonian integrand
``H(t, x, u, jet)`` (generator applied to V plus running reward, before the
sup over u), the terminal condition with its derivatives, first-order
condition residuals, a constraint penalty and, where one exists, a closed
form solution.

All problem functions accept either plain numpy arrays or tape nodes for the
jet entries and controls, so the same code serves training (differentiated)
and diagnostics (plain arrays).  Shapes: ``t`` is ``(N,)``, ``x`` is
``(N, d)``, ``u`` is a list of ``a`` arrays/nodes of shape ``(N,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import JetValue, NonFiniteError, first_bad_point

__all__ = [
    "UnsupportedError",
    "ProblemSpec",
    "HMMixture",
    "ContinuousPayment",
    "ConstrainedPayment",
    "GBMScalarControl",
    "FirstBestTwoControl",
    "PROBLEMS",
    "CONSTRAINT_CASES",
    "get_problem",
    "Monotonicity",
]


class UnsupportedError(NotImplementedError):
    """Requested feature (closed form, rollout dynamics) does not exist for this problem."""


@dataclass(frozen=True)
class Monotonicity:
    """Declared qualitative property: ``target`` is monotone along state ``axis``.

    target is ``"value"`` or a control index; sign +1 = nondecreasing, -1 = nonincreasing.
    """

    target: object
    axis: int
    sign: int


def _pos(z):
    return ad.relu(z)


class ProblemSpec:
    """Base class; subclasses fill in the class attributes and the hooks."""

    name = ""
    state_names: tuple = ()
    control_names: tuple = ()
    defaults: dict = {}
    default_domain: tuple = ()
    # training defaults the cli/trainer pick up unless overridden
    train_defaults: dict = {}
    constrained = False
    monotone: tuple = ()
    # control features a closed-form optimum pins down (see control_features)
    identified: tuple | None = None

    def __init__(self, T: float = 1.0, domain=None, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise KeyError(f"unknown parameter(s) for {self.name}: {sorted(unknown)}")
        self.T = float(T)
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        p = dict(self.defaults)
        p.update({k: float(v) for k, v in params.items()})
        self.params = p
        dom = self.default_domain if domain is None else domain
        dom = tuple((float(lo), float(hi)) for lo, hi in dom)
        if len(dom) != self.d or any(not hi > lo for lo, hi in dom):
            raise ValueError(f"domain for {self.name} must be {self.d} increasing (lo, hi) pairs")
        self.domain = dom
        self._check_params()

    # -- structure -------------------------------------------------------
    @property
    def d(self) -> int:
        return len(self.state_names)

    @property
    def a(self) -> int:
        return len(self.control_names)

    @property
    def n_foc(self) -> int:
        return self.a

    def _check_params(self):
        pass

    def replace(self, **kw) -> "ProblemSpec":
        p = dict(self.params)
        T = kw.pop("T", self.T)
        domain = kw.pop("domain", self.domain)
        p.update(kw)
        return type(self)(T=T, domain=domain, **p)

    def describe(self) -> dict:
        return {"name": self.name, "T": self.T, "domain": [list(b) for b in self.domain], **self.params}

    def __repr__(self):
        args = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"

    # -- hooks ----------------------------------------------------------------
    def _hamiltonian(self, t, x, u, jet):
        raise NotImplementedError

    def _foc(self, t, x, u, jet):
        raise NotImplementedError

    def terminal_jet(self, x):
        """``(G, G_x, G_xx)`` with shapes ``(N,)``, ``(N, d)``, ``(N, d, d)``."""
        raise NotImplementedError

    def penalty(self, u):
        """Zero for unconstrained problems."""
        return np.zeros(np.shape(ad.value_of(u[0])))

    # -- public interface ----------------------------------------------------
    def hamiltonian(self, t, x, u, jet: JetValue):
        """``L^u V + F`` at each point (before taking the sup over u)."""
        self._check_u(u)
        h = self._hamiltonian(t, x, u, jet)
        self._check_finite(h, t, x, u, "hamiltonian")
        return h

    def foc_residuals(self, t, x, u, jet: JetValue) -> list:
        """dH/du_k for the unconstrained control coordinates."""
        self._check_u(u)
        r = self._foc(t, x, u, jet)
        for k, rk in enumerate(r):
            self._check_finite(rk, t, x, u, f"foc[{k}]")
        return r

    def terminal(self, x) -> np.ndarray:
        x = self._as_states(x)
        return self.terminal_jet(x)[0]

    def _as_states(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(-1, self.d)

    def _check_u(self, u):
        if len(u) != self.a:
            raise ValueError(f"{self.name} expects {self.a} controls, got {len(u)}")

    @staticmethod
    def _check_finite(h, t, x, u, what):
        hv = ad.value_of(h)
        bad = ~np.isfinite(hv)
        if np.any(bad):
            bad = np.broadcast_to(bad, np.shape(t))
            pt = first_bad_point(bad, t, x)
            k = int(np.flatnonzero(bad)[0])
            uk = [float(np.broadcast_to(ad.value_of(c), np.shape(t))[k]) for c in u]
            raise NonFiniteError(f"non-finite {what} with u={uk}", pt)

    # -- closed form ---------------------------------------------------------
    @property
    def has_analytic(self) -> bool:
        return False

    def analytic_jet(self, t, x) -> JetValue:
        raise UnsupportedError(f"{self.name} has no closed-form solution")

    def analytic_value(self, t, x) -> np.ndarray:
        return self.analytic_jet(t, x).v

    def analytic_control(self, t, x) -> np.ndarray:
        """Optimal control, shape ``(N, a)``."""
        raise UnsupportedError(f"{self.name} has no closed-form solution")

    @property
    def identified_controls(self) -> tuple:
        return self.control_names if self.identified is None else self.identified

    def control_features(self, u) -> dict:
        """Named control coordinates plus derived combinations."""
        return {name: u[k] for k, name in enumerate(self.control_names)}

    # -- Monte Carlo dynamics --------------------------------------------------
    @property
    def has_rollout(self) -> bool:
        return False

    def rollout_coefficients(self, t, x, u):
        """``(drift (N, d), vol (N, d), running reward (N,))`` of the controlled state."""
        raise UnsupportedError(f"no reduced state dynamics for {self.name}")


def _grid_t(t, x):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
    return t, x


# ---------------------------------------------------------------------------
# P1: Holmstrom-Milgrom with a mixture-of-exponentials Principal utility


class HMMixture(ProblemSpec):
    """Holmstrom-Milgrom contracting with utility
    ``-lam*exp(-gP x) - (1-lam)*exp(-gPt x)``.

    HJB: ``V_t + sup_Z { V_x (Z - (1+gA)/2 Z^2) + 1/2 V_xx (1-Z)^2 } = 0``.
    """

    name = "hm_mixture"
    state_names = ("x",)
    control_names = ("Z",)
    defaults = {"gamma_A": 0.5, "gamma_P": 1.0, "gamma_P_tilde": 2.0, "lam": 0.5}
    default_domain = ((0.0, 1.0),)
    train_defaults = {"tol_int": 1e-3, "tol_ctrl": 1e-3}

    def _check_params(self):
        p = self.params
        if not 0.0 <= p["lam"] <= 1.0:
            raise ValueError("mixture weight lam must lie in [0, 1]")
        if min(p["gamma_A"], p["gamma_P"], p["gamma_P_tilde"]) <= 0:
            raise ValueError("risk aversions must be positive")

    def _hamiltonian(self, t, x, u, jet):
        (Z,) = u
        gA = self.params["gamma_A"]
        Vx, Vxx = jet.dx[0], jet.dxx[0][0]
        drift = Z - (1.0 + gA) / 2.0 * Z * Z
        vol = 1.0 - Z
        return Vx * drift + 0.5 * Vxx * vol * vol

    def _foc(self, t, x, u, jet):
        (Z,) = u
        gA = self.params["gamma_A"]
        Vx, Vxx = jet.dx[0], jet.dxx[0][0]
        return [Vx * (1.0 - (1.0 + gA) * Z) + Vxx * (Z - 1.0)]

    def terminal_jet(self, x):
        x = self._as_states(x)[:, 0]
        p = self.params
        lam, g1, g2 = p["lam"], p["gamma_P"], p["gamma_P_tilde"]
        e1, e2 = np.exp(-g1 * x), np.exp(-g2 * x)
        G = -lam * e1 - (1 - lam) * e2
        Gx = lam * g1 * e1 + (1 - lam) * g2 * e2
        Gxx = -lam * g1**2 * e1 - (1 - lam) * g2**2 * e2
        return G, Gx[:, None], Gxx[:, None, None]

    # closed form exists only at the pure-exponential endpoints
    @property
    def has_analytic(self) -> bool:
        return self.params["lam"] in (0.0, 1.0)

    def _pure_gamma(self):
        if not self.has_analytic:
            raise UnsupportedError("hm_mixture has a closed form only for lam in {0, 1}")
        p = self.params
        return p["gamma_P"] if p["lam"] == 1.0 else p["gamma_P_tilde"]

    def certainty_rate(self, gP: float | None = None) -> float:
        """``c`` in ``V = -exp(-gP (x + c (T - t)))``."""
        gP = self._pure_gamma() if gP is None else gP
        gA = self.params["gamma_A"]
        return 0.5 * (1 + gP) ** 2 / (1 + gA + gP) - gP / 2

    def optimal_Z(self, gP: float | None = None) -> float:
        gP = self._pure_gamma() if gP is None else gP
        return (1 + gP) / (1 + self.params["gamma_A"] + gP)

    def linear_interpolated_control(self) -> float:
        """Mixture-weighted average of the two pure-exponential optima."""
        p = self.params
        return p["lam"] * self.optimal_Z(p["gamma_P"]) + (1 - p["lam"]) * self.optimal_Z(p["gamma_P_tilde"])

    def analytic_jet(self, t, x):
        t, x = _grid_t(t, x)
        g = self._pure_gamma()
        c = self.certainty_rate(g)
        V = -np.exp(-g * (x[:, 0] + c * (self.T - t)))
        return JetValue.from_arrays(V, g * c * V, [-g * V], [[g * g * V]])

    def analytic_control(self, t, x):
        t, x = _grid_t(t, x)
        return np.full((t.shape[0], 1), self.optimal_Z())

    @property
    def has_rollout(self) -> bool:
        return True

    def rollout_coefficients(self, t, x, u):
        Z = u[:, 0]
        gA = self.params["gamma_A"]
        return (Z - (1 + gA) / 2 * Z * Z)[:, None], (1 - Z)[:, None], np.zeros_like(Z)


# ---------------------------------------------------------------------------
# P2 / P3: solely continuous payment


class ContinuousPayment(ProblemSpec):
    """Continuous payment with controls ``(alpha, beta, Z)`` and state w.

    ``H = (-C0 + Z^2/2 - beta^2/2 - alpha) V_w + Z^2/2 V_ww + (1-beta)(beta+Z) - alpha``,
    ``V(T, w) = -w``.
    """

    name = "continuous_payment"
    state_names = ("w",)
    control_names = ("alpha", "beta", "Z")
    defaults = {"C0": 0.0}
    default_domain = ((0.0, 1.0),)
    # alpha enters H linearly, so any finite box binds; train unclipped
    train_defaults = {"tol_int": 1e-2, "tol_ctrl": 1e-3, "control_box": None}
    # only the Agent's effort beta + Z is determined at the optimum
    identified = ("effort",)

    def _hamiltonian(self, t, x, u, jet):
        al, be, Z = u
        Vw, Vww = jet.dx[0], jet.dxx[0][0]
        drift = -self.params["C0"] + 0.5 * Z * Z - 0.5 * be * be - al
        return drift * Vw + 0.5 * Z * Z * Vww + (1.0 - be) * (be + Z) - al

    def _all_foc(self, u, jet):
        al, be, Z = u
        Vw, Vww = jet.dx[0], jet.dxx[0][0]
        return [
            -Vw - 1.0,
            -be * Vw + 1.0 - 2.0 * be - Z,
            Z * Vw + Z * Vww + 1.0 - be,
        ]

    def _foc(self, t, x, u, jet):
        return self._all_foc(u, jet)

    def terminal_jet(self, x):
        x = self._as_states(x)
        n = x.shape[0]
        return -x[:, 0], -np.ones((n, 1)), np.zeros((n, 1, 1))

    def optimal_effort(self) -> float:
        return 1.0

    @property
    def has_analytic(self) -> bool:
        return True

    def analytic_jet(self, t, x):
        t, x = _grid_t(t, x)
        s = self.optimal_effort()
        rate = self.params["C0"] + 0.5 - 0.5 * (s - 1.0) ** 2
        n = t.shape[0]
        V = rate * (self.T - t) - x[:, 0]
        return JetValue.from_arrays(V, np.full(n, -rate), [-np.ones(n)], [[np.zeros(n)]])

    def analytic_control(self, t, x):
        # only beta + Z is identified (alpha drops out once V_w = -1); report the
        # representative with alpha = 0 and the smallest feasible beta
        t, x = _grid_t(t, x)
        be, s = self._representative()
        n = t.shape[0]
        return np.column_stack([np.zeros(n), np.full(n, be), np.full(n, s - be)])

    def _representative(self):
        return 0.0, self.optimal_effort()

    def control_features(self, u) -> dict:
        return {"alpha": u[0], "beta": u[1], "Z": u[2], "effort": u[1] + u[2]}

    @property
    def has_rollout(self) -> bool:
        return True

    def rollout_coefficients(self, t, x, u):
        al, be, Z = u[:, 0], u[:, 1], u[:, 2]
        drift = -self.params["C0"] + 0.5 * Z * Z - 0.5 * be * be - al
        return drift[:, None], Z[:, None], (1 - be) * (be + Z) - al


CONSTRAINT_CASES = {
    1: {"beta_lo": 0.0, "beta_hi": 0.1, "u_lo": 0.0, "u_hi": 0.5},
    2: {"beta_lo": 0.0, "beta_hi": 0.2, "u_lo": -math.inf, "u_hi": math.inf},
    3: {"beta_lo": -math.inf, "beta_hi": 0.5, "u_lo": -math.inf, "u_hi": 1.2},
}


class ConstrainedPayment(ContinuousPayment):
    """:class:`ContinuousPayment` with ``beta_lo <= beta <= beta_hi`` and
    ``u_lo <= beta + Z <= u_hi``; infinite bounds are inactive."""

    name = "constrained_payment"
    defaults = {"C0": 0.0, **CONSTRAINT_CASES[1]}
    constrained = True

    def _check_params(self):
        p = self.params
        if p["beta_lo"] > p["beta_hi"] or p["u_lo"] > p["u_hi"]:
            raise ValueError("constraint bounds must satisfy lo <= hi")

    @property
    def n_foc(self) -> int:
        return 1

    def _foc(self, t, x, u, jet):
        # beta and Z are governed by the penalty; only alpha is free
        return self._all_foc(u, jet)[:1]

    def penalty(self, u):
        _, be, Z = u
        p = self.params
        s = be + Z
        terms = []
        if np.isfinite(p["beta_lo"]):
            terms.append(_pos(p["beta_lo"] - be))
        if np.isfinite(p["beta_hi"]):
            terms.append(_pos(be - p["beta_hi"]))
        if np.isfinite(p["u_lo"]):
            terms.append(_pos(p["u_lo"] - s))
        if np.isfinite(p["u_hi"]):
            terms.append(_pos(s - p["u_hi"]))
        if not terms:
            return 0.0 * be
        out = terms[0]
        for term in terms[1:]:
            out = out + term
        return out

    def feasible(self, u) -> np.ndarray:
        _, be, Z = (np.asarray(c) for c in u)
        p = self.params
        s = be + Z
        return (be >= p["beta_lo"]) & (be <= p["beta_hi"]) & (s >= p["u_lo"]) & (s <= p["u_hi"])

    def optimal_effort(self) -> float:
        p = self.params
        return float(np.clip(1.0, p["u_lo"], p["u_hi"]))

    def _representative(self):
        p = self.params
        return float(np.clip(0.0, p["beta_lo"], p["beta_hi"])), self.optimal_effort()


# ---------------------------------------------------------------------------
# P4: GBM output with log utility Agent, scalar control


class GBMScalarControl(ProblemSpec):
    """Two states ``(x, w)``, control Z:
    ``H = s^2 x^2 [Z V_x + Z^2/2 V_w + (V_xx + Z^2 V_ww)/2 + Z V_xw]``, ``V(T) = x - e^w``.
    """

    name = "gbm_scalar_control"
    state_names = ("x", "w")
    control_names = ("Z",)
    defaults = {"sigma": 1.0}
    default_domain = ((0.0, 2.0), (-1.0, 1.0))
    train_defaults = {
        "tol_int": 1e-3,
        "tol_ctrl": 1e-3,
        "decay_steps": 100000,
        "lr_end": 1e-5,
        "max_steps": 100000,
    }

    def _hamiltonian(self, t, x, u, jet):
        (Z,) = u
        s2x2 = self.params["sigma"] ** 2 * x[:, 0] ** 2
        Vx, Vw = jet.dx
        Vxx, Vxw, Vww = jet.dxx[0][0], jet.dxx[0][1], jet.dxx[1][1]
        inner = Z * Vx + 0.5 * Z * Z * Vw + 0.5 * (Vxx + Z * Z * Vww) + Z * Vxw
        return s2x2 * inner

    def _foc(self, t, x, u, jet):
        (Z,) = u
        s2x2 = self.params["sigma"] ** 2 * x[:, 0] ** 2
        Vx, Vw = jet.dx
        Vxw, Vww = jet.dxx[0][1], jet.dxx[1][1]
        return [s2x2 * ((Vw + Vww) * Z + Vx + Vxw)]

    def terminal_jet(self, x):
        x = self._as_states(x)
        n = x.shape[0]
        ew = np.exp(x[:, 1])
        Gx = np.column_stack([np.ones(n), -ew])
        Gxx = np.zeros((n, 2, 2))
        Gxx[:, 1, 1] = -ew
        return x[:, 0] - ew, Gx, Gxx

    @property
    def has_analytic(self) -> bool:
        return True

    def analytic_jet(self, t, x):
        t, x = _grid_t(t, x)
        s2 = self.params["sigma"] ** 2
        X, w = x[:, 0], x[:, 1]
        ew, emw = np.exp(w), np.exp(-w)
        k = np.expm1(s2 * (self.T - t))
        dk = -s2 * np.exp(s2 * (self.T - t))
        q = 0.25 * emw * X * X
        V = X - ew + q * k
        Vt = q * dk
        Vx = 1.0 + 0.5 * emw * X * k
        Vw = -ew - q * k
        Vxx = 0.5 * emw * k
        Vxw = -0.5 * emw * X * k
        Vww = -ew + q * k
        return JetValue.from_arrays(V, Vt, [Vx, Vw], [[Vxx, Vxw], [Vxw, Vww]])

    def analytic_control(self, t, x):
        t, x = _grid_t(t, x)
        return (0.5 * np.exp(-x[:, 1]))[:, None]


# ---------------------------------------------------------------------------
# P5: first-best problem, Agent controls drift and volatility


class FirstBestTwoControl(ProblemSpec):
    """Two states ``(x, w)``, controls ``(Z, a)``:
    ``H = a V_x + a^2/2 (V_xx + Z^2 V_ww) + a^2 Z V_xw``,
    ``V(T) = -exp(-gP x) (-w)^(-gP/gA)`` (requires w < 0).
    """

    name = "first_best_2control"
    state_names = ("x", "w")
    control_names = ("Z", "a")
    defaults = {"gamma_A": 1.0, "gamma_P": 1.0}
    default_domain = ((0.0, 1.0), (-2.5, -0.5))
    train_defaults = {"tol_int": 1e-3, "tol_ctrl": 1e-3, "B": 30, "decay_steps": 100000, "max_steps": 100000}
    monotone = (
        Monotonicity("value", 0, +1),
        Monotonicity("value", 1, -1),
        Monotonicity(0, 0, -1),
        Monotonicity(0, 1, -1),
    )

    def _check_params(self):
        if min(self.params["gamma_A"], self.params["gamma_P"]) <= 0:
            raise ValueError("risk aversions must be positive")
        if self.domain[1][1] >= 0:
            raise ValueError("the w-range must lie strictly below 0")

    def _hamiltonian(self, t, x, u, jet):
        Z, a = u
        Vx = jet.dx[0]
        Vxx, Vxw, Vww = jet.dxx[0][0], jet.dxx[0][1], jet.dxx[1][1]
        a2 = a * a
        return a * Vx + 0.5 * a2 * (Vxx + Z * Z * Vww) + a2 * Z * Vxw

    def _foc(self, t, x, u, jet):
        Z, a = u
        Vx = jet.dx[0]
        Vxx, Vxw, Vww = jet.dxx[0][0], jet.dxx[0][1], jet.dxx[1][1]
        a2 = a * a
        return [
            a2 * Z * Vww + a2 * Vxw,
            Vx + a * (Vxx + Z * Z * Vww) + 2.0 * a * Z * Vxw,
        ]

    def terminal_jet(self, x):
        x = self._as_states(x)
        w = x[:, 1]
        if np.any(w >= 0):
            raise ValueError("terminal condition undefined for w >= 0: (-w)^(-gamma_P/gamma_A)")
        gP = self.params["gamma_P"]
        k = gP / self.params["gamma_A"]
        q = -w
        G = -np.exp(-gP * x[:, 0]) * q ** (-k)
        Gx = np.column_stack([-gP * G, k * G / q])
        Gxx = np.empty((x.shape[0], 2, 2))
        Gxx[:, 0, 0] = gP * gP * G
        Gxx[:, 0, 1] = Gxx[:, 1, 0] = -gP * k * G / q
        Gxx[:, 1, 1] = k * (k + 1) * G / (q * q)
        return G, Gx, Gxx


PROBLEMS = {
    cls.name: cls for cls in (HMMixture, ContinuousPayment, ConstrainedPayment, GBMScalarControl, FirstBestTwoControl)
}


def get_problem(name: str, **overrides) -> ProblemSpec:
    """Instantiate a registered problem; ``case=1|2|3`` selects a preset
    constraint set for ``constrained_payment``."""
    if name not in PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; registered: {', '.join(sorted(PROBLEMS))}")
    if "case" in overrides:
        case = int(overrides.pop("case"))
        if name != "constrained_payment" or case not in CONSTRAINT_CASES:
            raise ValueError(f"case={case} is only valid for constrained_payment (1, 2 or 3)")
        overrides = {**CONSTRAINT_CASES[case], **overrides}
    return PROBLEMS[name](**overrides)
