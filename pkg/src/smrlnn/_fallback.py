"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def jacobi_eigh(a_in, tol=1e-15, max_sweeps=100):
    a = np.array(a_in, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    fro = np.sqrt(np.sum(a * a))
    if fro == 0.0 or n < 2:
        return np.diag(a).copy(), v, 0
    iu = np.triu_indices(n, 1)
    sweep = 0
    while sweep < max_sweeps:
        if np.sqrt(2.0 * np.sum(a[iu] ** 2)) <= tol * fro:
            break
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                tau = s / (1.0 + c)
                g = a[:, p].copy()
                h = a[:, q].copy()
                a[:, p] = g - s * (h + tau * g)
                a[:, q] = h + s * (g - tau * h)
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                g = v[:, p].copy()
                h = v[:, q].copy()
                v[:, p] = g - s * (h + tau * g)
                v[:, q] = h + s * (g - tau * h)
    return np.diag(a).copy(), v, sweep


def cholesky(s_in):
    s = np.asarray(s_in, dtype=np.float64)
    n = s.shape[0]
    l = np.zeros((n, n))
    for j in range(n):
        acc = s[j, j] - l[j, :j] @ l[j, :j]
        if not acc > 0.0:
            raise ValueError(j)
        l[j, j] = np.sqrt(acc)
        l[j + 1:, j] = (s[j + 1:, j] - l[j + 1:, :j] @ l[j, :j]) / l[j, j]
    return l


def cho_solve_factored(l, b_in):
    x = np.array(b_in, dtype=np.float64, copy=True)
    n = l.shape[0]
    for i in range(n):
        x[i] = (x[i] - l[i, :i] @ x[:i]) / l[i, i]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - l[i + 1:, i] @ x[i + 1:]) / l[i, i]
    return x


def greedy_match(p_treated, p_control, order):
    p_control = np.asarray(p_control, dtype=np.float64)
    out = np.full(len(p_treated), -1, dtype=np.int64)
    used = np.zeros(len(p_control), dtype=bool)
    for i in order:
        if used.all():
            break
        d = np.abs(p_control - p_treated[i])
        d[used] = np.inf
        best = int(np.argmin(d))
        used[best] = True
        out[i] = best
    return out
