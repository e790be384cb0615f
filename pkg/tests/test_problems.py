import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeppaac import autodiff as ad
from deeppaac.autodiff import JetValue, NonFiniteError
from deeppaac.problems import PROBLEMS, UnsupportedError, get_problem


def _jet(d, n=1, v=0.0, dt=0.0, dx=None, dxx=None):
    dx = np.zeros((n, d)) if dx is None else np.broadcast_to(np.asarray(dx, float), (n, d))
    dxx = np.zeros((n, d, d)) if dxx is None else np.broadcast_to(np.asarray(dxx, float), (n, d, d))
    return JetValue.from_arrays(np.full(n, v), np.full(n, dt), dx, dxx)


def _H(prob, u, jet, t=0.5, x=None):
    x = np.full((1, prob.d), 0.5) if x is None else np.asarray(x, float).reshape(1, -1)
    return prob.hamiltonian(np.array([t]), x, [np.array([c], float) for c in u], jet)


# ---------------------------------------------------------------------------
# worked examples


def test_p2_hamiltonian_at_optimum_any_alpha():
    prob = get_problem("continuous_payment")
    jet = _jet(1, dx=[-1.0])
    for al in (-3.0, 0.0, 7.5):
        for be in (0.0, 0.3, 1.4):
            assert _H(prob, (al, be, 1.0 - be), jet)[0] == pytest.approx(0.5, abs=1e-15)


def test_p2_hamiltonian_half_effort():
    prob = get_problem("continuous_payment")
    assert _H(prob, (0.2, 0.1, 0.4), _jet(1, dx=[-1.0]))[0] == pytest.approx(0.375, abs=1e-15)


def test_p4_foc_zero_at_vertex():
    prob = get_problem("gbm_scalar_control")
    rng = np.random.default_rng(0)
    for _ in range(10):
        dx = rng.normal(size=2)
        h = rng.normal(size=(2, 2))
        h = h + h.T
        h[1, 1] = -abs(h[1, 1]) - 1.0 - abs(dx[1])
        jet = _jet(2, dx=dx, dxx=h)
        Z = -(dx[0] + h[0, 1]) / (dx[1] + h[1, 1])
        (f,) = prob.foc_residuals(np.array([0.3]), np.array([[1.1, 0.2]]), [np.array([Z])], jet)
        assert abs(f[0]) <= 1e-13


def test_terminal_values():
    assert get_problem("continuous_payment").terminal([0.7])[0] == -0.7
    assert get_problem("gbm_scalar_control").terminal([[1.0, 0.0]])[0] == 0.0
    assert get_problem("first_best_2control").terminal([[0.0, -1.0]])[0] == -1.0


def test_p5_terminal_rejects_nonnegative_w():
    with pytest.raises(ValueError):
        get_problem("first_best_2control").terminal([[0.0, 0.0]])
    with pytest.raises(ValueError):
        get_problem("first_best_2control", domain=((0, 1), (-1, 0.5)))


def test_p2_foc_examples():
    prob = get_problem("continuous_payment")
    rng = np.random.default_rng(1)
    u = [np.array([c]) for c in rng.normal(size=3)]
    fa = prob.foc_residuals(np.array([0.2]), np.array([[0.3]]), u, _jet(1, dx=[-1.0], dxx=[[rng.normal()]]))[0]
    assert fa[0] == 0.0
    f = prob.foc_residuals(np.array([0.2]), np.array([[0.3]]), [np.array([0.0]), np.array([0.5]), np.array([0.5])], _jet(1, dx=[-1.0]))
    assert [float(r[0]) for r in f] == [0.0, 0.0, 0.0]


def test_p3_foc_length_one():
    prob = get_problem("constrained_payment", case=1)
    f = prob.foc_residuals(np.array([0.2]), np.array([[0.3]]), [np.zeros(1)] * 3, _jet(1, dx=[-1.0]))
    assert len(f) == 1 and prob.n_foc == 1


@pytest.mark.parametrize(
    "case,beta,Z,expected",
    [(1, 0.05, 0.3, 0.0), (1, 0.2, 0.4, 0.2), (2, -0.1, 5.0, 0.1)],
)
def test_penalty_examples(case, beta, Z, expected):
    prob = get_problem("constrained_payment", case=case)
    assert float(prob.penalty([np.array([0.0]), np.array([beta]), np.array([Z])])[0]) == pytest.approx(expected, abs=1e-15)


def test_analytic_examples():
    assert get_problem("continuous_payment").analytic_value([0.0], [[0.0]])[0] == 0.5
    p1 = get_problem("hm_mixture", lam=1.0)
    assert p1.analytic_control([0.3], [[0.5]])[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert get_problem("hm_mixture", lam=0.0).analytic_control([0.3], [[0.5]])[0, 0] == pytest.approx(6 / 7)
    p4 = get_problem("gbm_scalar_control")
    assert p4.analytic_value([0.0], [[1.0, 0.0]])[0] == pytest.approx((math.e - 1) / 4, rel=1e-14)
    assert p4.analytic_control([0.0], [[1.0, 0.0]])[0, 0] == 0.5


def test_unsupported_closed_form():
    with pytest.raises(UnsupportedError):
        get_problem("hm_mixture").analytic_value([0.0], [[0.5]])
    with pytest.raises(UnsupportedError):
        get_problem("first_best_2control").analytic_control([0.0], [[0.5, -1.0]])


def test_non_finite_hamiltonian_reports_point_and_u():
    prob = get_problem("continuous_payment")
    with pytest.raises(NonFiniteError) as err, np.errstate(invalid="ignore"):
        prob.hamiltonian(np.array([0.1, 0.2]), np.array([[0.0], [0.4]]), [np.array([0.0, np.inf]), np.zeros(2), np.zeros(2)], _jet(1, 2, dx=[-1.0]))
    assert err.value.point == (0.2, (0.4,))
    assert "inf" in str(err.value)


def test_wrong_control_count():
    with pytest.raises(ValueError):
        _H(get_problem("gbm_scalar_control"), (0.1, 0.2), _jet(2))


# ---------------------------------------------------------------------------
# registry and parameters


def test_registry_names_and_dims():
    dims = {name: (cls.__new__(cls).d, cls.__new__(cls).a) for name, cls in PROBLEMS.items()}
    assert dims == {
        "hm_mixture": (1, 1),
        "continuous_payment": (1, 3),
        "constrained_payment": (1, 3),
        "gbm_scalar_control": (2, 1),
        "first_best_2control": (2, 2),
    }


def test_unknown_problem_lists_names():
    with pytest.raises(KeyError, match="hm_mixture"):
        get_problem("nope")


def test_unknown_parameter_rejected():
    with pytest.raises(KeyError):
        get_problem("hm_mixture", C0=1.0)
    with pytest.raises(ValueError):
        get_problem("continuous_payment", case=1)
    with pytest.raises(ValueError):
        get_problem("hm_mixture", lam=1.5)


def test_replace_keeps_other_params():
    p = get_problem("hm_mixture", gamma_A=0.7).replace(lam=1.0)
    assert p.params["gamma_A"] == 0.7 and p.params["lam"] == 1.0


def test_default_domains():
    assert get_problem("hm_mixture").domain == ((0.0, 1.0),)
    assert get_problem("gbm_scalar_control").domain == ((0.0, 2.0), (-1.0, 1.0))
    assert get_problem("first_best_2control").domain == ((0.0, 1.0), (-2.5, -0.5))


# ---------------------------------------------------------------------------
# analytic self-consistency on a 20x20 grid

SOLVABLE = [
    ("hm_mixture", dict(lam=1.0)),
    ("hm_mixture", dict(lam=0.0)),
    ("continuous_payment", {}),
    ("continuous_payment", dict(C0=0.3)),
    ("constrained_payment", dict(case=1)),
    ("constrained_payment", dict(case=2)),
    ("constrained_payment", dict(case=3)),
    ("gbm_scalar_control", {}),
    ("gbm_scalar_control", dict(sigma=0.7)),
]


def _grid(prob, n=20):
    ts = np.linspace(0, prob.T, n)
    if prob.d == 1:
        lo, hi = prob.domain[0]
        tt, xx = np.meshgrid(ts, np.linspace(lo, hi, n), indexing="ij")
        return tt.ravel(), xx.reshape(-1, 1)
    # 20 x 20 in time and the first state, middle values for the second
    (lo0, hi0), (lo1, hi1) = prob.domain
    tt, x0, x1 = np.meshgrid(ts, np.linspace(lo0, hi0, n), np.linspace(lo1, hi1, 5), indexing="ij")
    return tt.ravel(), np.column_stack([x0.ravel(), x1.ravel()])


@pytest.mark.parametrize("name,kw", SOLVABLE)
def test_analytic_self_consistency(name, kw):
    prob = get_problem(name, **kw)
    t, x = _grid(prob)
    jet = prob.analytic_jet(t, x)
    u = prob.analytic_control(t, x)
    r = jet.dt + prob.hamiltonian(t, x, [u[:, k] for k in range(prob.a)], jet)
    assert np.max(np.abs(r)) <= 1e-10
    np.testing.assert_array_equal(jet.v, prob.analytic_value(t, x))
    # terminal condition of the closed form
    np.testing.assert_allclose(prob.analytic_value(np.full(len(t), prob.T), x), prob.terminal(x), atol=1e-14)
    if prob.constrained:
        assert np.all(ad.value_of(prob.penalty([u[:, k] for k in range(3)])) == 0)
    else:
        for f in prob.foc_residuals(t, x, [u[:, k] for k in range(prob.a)], jet):
            assert np.max(np.abs(f)) <= 1e-10


@pytest.mark.parametrize("name,kw", SOLVABLE)
def test_analytic_jet_matches_finite_differences(name, kw):
    prob = get_problem(name, **kw)
    rng = np.random.default_rng(0)
    for _ in range(5):
        t = rng.uniform(0.1, 0.9)
        x = np.array([rng.uniform(lo, hi) for lo, hi in prob.domain])
        rep = ad.check_against_fd(
            lambda tt, xx: prob.analytic_jet([tt], [xx]),
            lambda tt, xx: prob.analytic_value([float(tt)], [np.asarray(xx, float)])[0],
            t,
            x,
            eps=1e-4,
            rtol=1e-6,
            atol=1e-8,
        )
        assert rep.passed, str(rep)


def test_hm_mixture_closed_form_against_sympy():
    sp = pytest.importorskip("sympy")
    t, x, gA, gP, T = sp.symbols("t x gamma_A gamma_P T", positive=True)
    Z = (1 + gP) / (1 + gA + gP)
    c = sp.Rational(1, 2) * (1 + gP) ** 2 / (1 + gA + gP) - gP / 2
    V = -sp.exp(-gP * (x + c * (T - t)))
    H = sp.diff(V, x) * (Z - (1 + gA) / 2 * Z**2) + sp.Rational(1, 2) * sp.diff(V, x, 2) * (1 - Z) ** 2
    assert sp.simplify((sp.diff(V, t) + H) / V) == 0


# ---------------------------------------------------------------------------
# first-best two-control problem: sympy-derived closed form used as an oracle


def _p5_closed_form(prob, t, x):
    gA, gP = prob.params["gamma_A"], prob.params["gamma_P"]
    G = prob.terminal(x)
    V = G * np.exp(-0.5 * (1 + gP / gA) * (prob.T - t))
    a = (gA + gP) / (gA * gP)
    Z = gA * gP * (-x[:, 1]) / (gA + gP)
    return V, np.full_like(V, a), Z


def test_p5_closed_form_verified_by_sympy():
    sp = pytest.importorskip("sympy")
    t, x, T = sp.symbols("t x T", real=True)
    q, gA, gP = sp.symbols("q gamma_A gamma_P", positive=True)  # q = -w
    w = -q
    k = gP / gA
    V = -sp.exp(-gP * x) * q ** (-k) * sp.exp(-(1 + k) * (T - t) / 2)
    Vx = sp.diff(V, x)
    Vxx = sp.diff(V, x, 2)
    Vw = -sp.diff(V, q)
    Vww = sp.diff(V, q, 2)
    Vxw = -sp.diff(V, x, q)
    Zs, As = sp.symbols("Z a")
    H = As * Vx + As**2 / 2 * (Vxx + Zs**2 * Vww) + As**2 * Zs * Vxw
    Zstar = gA * gP * q / (gA + gP)
    Astar = (gA + gP) / (gA * gP)
    sub = {Zs: Zstar, As: Astar}
    assert sp.simplify((sp.diff(V, t) + H.subs(sub)) / V) == 0
    assert sp.simplify(sp.diff(H, Zs).subs(sub) / V) == 0
    assert sp.simplify(sp.diff(H, As).subs(sub) / V) == 0
    del w, Vw


@pytest.mark.parametrize("gA,gP", [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)])
def test_p5_hamiltonian_and_foc_against_closed_form(gA, gP):
    prob = get_problem("first_best_2control", gamma_A=gA, gamma_P=gP)
    rng = np.random.default_rng(2)
    n = 50
    t = rng.uniform(0, 1, n)
    x = np.column_stack([rng.uniform(0, 1, n), rng.uniform(-2.5, -0.5, n)])
    V, a, Z = _p5_closed_form(prob, t, x)
    k = gP / gA
    q = -x[:, 1]
    jet = JetValue.from_arrays(
        V,
        0.5 * (1 + k) * V,
        [-gP * V, k * V / q],
        [[gP * gP * V, -gP * k * V / q], [-gP * k * V / q, k * (k + 1) * V / q**2]],
    )
    r = jet.dt + prob.hamiltonian(t, x, [Z, a], jet)
    assert np.max(np.abs(r)) <= 1e-12
    for f in prob.foc_residuals(t, x, [Z, a], jet):
        assert np.max(np.abs(f)) <= 1e-12


# ---------------------------------------------------------------------------
# invariants


def _random_jet(rng, d, n):
    h = rng.normal(size=(n, d, d))
    return JetValue.from_arrays(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, d)), h + np.swapaxes(h, 1, 2))


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_foc_matches_finite_differences_of_hamiltonian(name):
    prob = get_problem(name)
    rng = np.random.default_rng(11)
    n = 100
    t = rng.uniform(0, prob.T, n)
    x = np.column_stack([rng.uniform(lo, hi, n) for lo, hi in prob.domain])
    jet = _random_jet(rng, prob.d, n)
    u = [rng.uniform(-1.5, 1.5, n) for _ in range(prob.a)]
    foc = prob.foc_residuals(t, x, u, jet)
    h = 1e-6
    # constrained problems report only the free coordinate (alpha)
    coords = range(prob.n_foc)
    for k in coords:
        up = [c + (h if j == k else 0.0) for j, c in enumerate(u)]
        um = [c - (h if j == k else 0.0) for j, c in enumerate(u)]
        fd = (prob.hamiltonian(t, x, up, jet) - prob.hamiltonian(t, x, um, jet)) / (2 * h)
        np.testing.assert_allclose(foc[k], fd, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("case", [1, 2, 3])
def test_penalty_zero_set(case):
    prob = get_problem("constrained_payment", case=case)
    p = prob.params
    rng = np.random.default_rng(case)
    # random points plus every finite bound hit exactly
    beta_edges = [v for v in (p["beta_lo"], p["beta_hi"]) if np.isfinite(v)]
    u_edges = [v for v in (p["u_lo"], p["u_hi"]) if np.isfinite(v)]
    be = np.concatenate([rng.uniform(-1, 2, 400), beta_edges, np.full(len(u_edges), 0.05)])
    s = np.concatenate([rng.uniform(-1, 2, 400), np.full(len(beta_edges), 0.3), u_edges])
    u = [np.zeros_like(be), be, s - be]
    pen = ad.value_of(prob.penalty(u))
    feasible = (be >= p["beta_lo"]) & (be <= p["beta_hi"]) & (s >= p["u_lo"]) & (s <= p["u_hi"])
    assert np.all(pen >= 0)
    assert np.array_equal(pen == 0, feasible)
    assert np.array_equal(prob.feasible(u), feasible)


def test_unconstrained_penalty_is_zero():
    prob = get_problem("continuous_payment")
    pen = prob.penalty([np.ones(3), np.full(3, 9.0), np.full(3, -4.0)])
    assert np.array_equal(pen, np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(
    lo=st.floats(-1.0, 2.0),
    width=st.floats(0.0, 2.0),
    C0=st.floats(0.0, 1.0),
)
def test_p2_argmax_is_clamped_unit_effort(lo, width, C0):
    hi = lo + width
    prob = get_problem("continuous_payment", C0=C0)
    jet = _jet(1, n=1, dx=[-1.0])
    grid = np.linspace(lo, hi, 4001)
    # H depends on (beta, Z) only through beta + Z when V_w = -1, V_ww = 0
    hs = np.array([_H(prob, (0.0, 0.25, s - 0.25), jet)[0] for s in grid])
    best = grid[np.argmax(hs)]
    assert abs(best - min(max(1.0, lo), hi)) <= (hi - lo) / 4000 + 1e-12


@pytest.mark.parametrize("case", [1, 2, 3])
def test_constrained_analytic_is_feasible_and_optimal(case):
    prob = get_problem("constrained_payment", case=case)
    p = prob.params
    jet = _jet(1, dx=[-1.0])
    u_star = prob.analytic_control([0.4], [[0.5]])[0]
    best = _H(prob, u_star, jet)[0]
    lo_b = p["beta_lo"] if np.isfinite(p["beta_lo"]) else -3.0
    hi_b = p["beta_hi"]
    lo_s = p["u_lo"] if np.isfinite(p["u_lo"]) else -3.0
    hi_s = p["u_hi"] if np.isfinite(p["u_hi"]) else 3.0
    for be, s in itertools.product(np.linspace(lo_b, hi_b, 21), np.linspace(lo_s, hi_s, 121)):
        assert _H(prob, (0.0, be, s - be), jet)[0] <= best + 1e-12


def test_rollout_coefficients_shapes():
    for name in ("hm_mixture", "continuous_payment"):
        prob = get_problem(name)
        u = np.full((4, prob.a), 0.3)
        drift, vol, run = prob.rollout_coefficients(np.zeros(4), np.zeros((4, 1)), u)
        assert drift.shape == (4, 1) and vol.shape == (4, 1) and run.shape == (4,)
    with pytest.raises(UnsupportedError):
        get_problem("gbm_scalar_control").rollout_coefficients(None, None, None)


def test_linear_interpolated_control():
    # lam*0.8 + (1-lam)*6/7 at lam = 0.5
    assert get_problem("hm_mixture").linear_interpolated_control() == pytest.approx(0.5 * 0.8 + 0.5 * 6 / 7)
