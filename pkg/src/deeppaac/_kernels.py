"""Compiled kernels for the fused jet layers.

Activation derivatives are computed with numpy ufuncs (vectorised
transcendentals); these kernels only do the slot-combination arithmetic,
walking each ``(n, :)`` row contiguously so the inner loops vectorise.
The numpy implementations in :mod:`deeppaac.autodiff` remain the reference;
tests compare the two.
"""

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:

    @njit(cache=True, fastmath=True)
    def act_forward(jv, ng, pi, pj, f1, f2, out):
        K, N, W = jv.shape
        hs = 1 + ng
        P = pi.shape[0]
        for n in range(N):
            for k in range(1, hs):
                for w in range(W):
                    out[k, n, w] = f1[n, w] * jv[k, n, w]
            for p in range(P):
                i = pi[p]
                j = pj[p]
                for w in range(W):
                    out[hs + p, n, w] = f2[n, w] * jv[i, n, w] * jv[j, n, w] + f1[n, w] * jv[hs + p, n, w]

    @njit(cache=True, fastmath=True)
    def act_backward(g, jv, ng, pi, pj, f1, f2, f3, gin):
        K, N, W = jv.shape
        hs = 1 + ng
        P = pi.shape[0]
        for n in range(N):
            for w in range(W):
                gin[0, n, w] = f1[n, w] * g[0, n, w]
            for k in range(1, hs):
                for w in range(W):
                    gin[0, n, w] += f2[n, w] * g[k, n, w] * jv[k, n, w]
                    gin[k, n, w] = f1[n, w] * g[k, n, w]
            for p in range(P):
                i = pi[p]
                j = pj[p]
                h = hs + p
                for w in range(W):
                    gh = g[h, n, w]
                    a = jv[i, n, w]
                    b = jv[j, n, w]
                    gin[0, n, w] += f3[n, w] * gh * a * b + f2[n, w] * gh * jv[h, n, w]
                    gin[i, n, w] += f2[n, w] * gh * b
                    gin[j, n, w] += f2[n, w] * gh * a
                    gin[h, n, w] = f1[n, w] * gh

    @njit(cache=True, fastmath=True)
    def mul_forward(av, bv, ng, pi, pj, out):
        K, N, W = av.shape
        hs = 1 + ng
        P = pi.shape[0]
        for n in range(N):
            for w in range(W):
                out[0, n, w] = av[0, n, w] * bv[0, n, w]
            for k in range(1, hs):
                for w in range(W):
                    out[k, n, w] = av[k, n, w] * bv[0, n, w] + av[0, n, w] * bv[k, n, w]
            for p in range(P):
                i = pi[p]
                j = pj[p]
                h = hs + p
                for w in range(W):
                    out[h, n, w] = (
                        av[h, n, w] * bv[0, n, w]
                        + av[i, n, w] * bv[j, n, w]
                        + av[j, n, w] * bv[i, n, w]
                        + av[0, n, w] * bv[h, n, w]
                    )

    @njit(cache=True, fastmath=True)
    def mul_backward(g, av, bv, ng, pi, pj, ga, gb):
        K, N, W = av.shape
        hs = 1 + ng
        P = pi.shape[0]
        for n in range(N):
            for w in range(W):
                ga[0, n, w] = g[0, n, w] * bv[0, n, w]
                gb[0, n, w] = g[0, n, w] * av[0, n, w]
            for k in range(1, hs):
                for w in range(W):
                    gk = g[k, n, w]
                    ga[0, n, w] += gk * bv[k, n, w]
                    gb[0, n, w] += gk * av[k, n, w]
                    ga[k, n, w] = gk * bv[0, n, w]
                    gb[k, n, w] = gk * av[0, n, w]
            for p in range(P):
                i = pi[p]
                j = pj[p]
                h = hs + p
                for w in range(W):
                    gh = g[h, n, w]
                    ga[0, n, w] += gh * bv[h, n, w]
                    gb[0, n, w] += gh * av[h, n, w]
                    ga[h, n, w] = gh * bv[0, n, w]
                    gb[h, n, w] = gh * av[0, n, w]
                    ga[i, n, w] += gh * bv[j, n, w]
                    ga[j, n, w] += gh * bv[i, n, w]
                    gb[j, n, w] += gh * av[i, n, w]
                    gb[i, n, w] += gh * av[j, n, w]

    AVAILABLE = True
else:  # pragma: no cover
    AVAILABLE = False
