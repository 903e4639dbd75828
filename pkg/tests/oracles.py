"""Independent reference solvers used only by the tests."""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def fraction_simplex(c, A, b):
    """min c.x s.t. A x <= b, x >= 0 with b >= 0, exact arithmetic, Bland's rule.

    Returns (value, x) as Fractions, or ("unbounded", None).
    """
    m, n = len(A), len(c)
    c = [Fraction(v) for v in c]
    T = [[Fraction(A[i][j]) for j in range(n)] + [Fraction(int(i == k)) for k in range(m)] + [Fraction(b[i])]
         for i in range(m)]
    assert all(row[-1] >= 0 for row in T)
    basis = [n + i for i in range(m)]
    cost = c + [Fraction(0)] * m
    while True:
        # reduced costs
        red = []
        for j in range(n + m):
            r = cost[j] - sum(cost[basis[i]] * T[i][j] for i in range(m))
            red.append(r)
        enter = next((j for j in range(n + m) if red[j] < 0), None)
        if enter is None:
            break
        ratios = [(T[i][-1] / T[i][enter], basis[i], i) for i in range(m) if T[i][enter] > 0]
        if not ratios:
            return "unbounded", None
        _, _, leave = min(ratios)
        piv = T[leave][enter]
        T[leave] = [v / piv for v in T[leave]]
        for i in range(m):
            if i != leave and T[i][enter] != 0:
                f = T[i][enter]
                T[i] = [a - f * p for a, p in zip(T[i], T[leave])]
        basis[leave] = enter
    x = [Fraction(0)] * (n + m)
    for i, j in enumerate(basis):
        x[j] = T[i][-1]
    val = sum(c[j] * x[j] for j in range(n))
    return val, x[:n]


def enumerate_binary(c, A, b, sense="min"):
    """Exhaustive search over {0,1}^n for min/max c.x s.t. A x <= b."""
    best, arg = None, None
    c = np.asarray(c, float)
    A = np.asarray(A, float)
    for bits in itertools.product((0, 1), repeat=len(c)):
        x = np.array(bits, float)
        if np.all(A @ x <= np.asarray(b) + 1e-12):
            v = float(c @ x)
            if best is None or (v < best if sense == "min" else v > best):
                best, arg = v, x
    return best, arg


def l1_box_vertices(dim: int, budget: float):
    """Vertices of {s : |s_i| <= 1, sum|s_i| <= budget}."""
    if budget <= 0:
        return [np.zeros(dim)]
    if budget >= dim:
        return [np.array(v, float) for v in itertools.product((-1.0, 1.0), repeat=dim)]
    k = int(np.floor(budget + 1e-12))
    frac = budget - k
    out = []
    for full in itertools.combinations(range(dim), k):
        rest = [i for i in range(dim) if i not in full] if frac > 1e-12 else [None]
        for extra in rest:
            for signs in itertools.product((-1.0, 1.0), repeat=k + (extra is not None)):
                v = np.zeros(dim)
                for i, s in zip(full, signs):
                    v[i] = s
                if extra is not None:
                    v[extra] = signs[-1] * frac
                out.append(v)
    return out


def dfs_paths(links, origin, dest):
    """All simple directed paths as tuples of link ids (plain recursive DFS)."""
    out = []

    def walk(node, seen, acc):
        if node == dest:
            out.append(tuple(acc))
            return
        for lid, tail, head in links:
            if tail == node and head not in seen:
                walk(head, seen | {head}, acc + [lid])

    walk(origin, {origin}, [])
    return out


def l1_ball_fraction(dim: int, radius: float) -> float:
    """Share of the cube [-1,1]^dim with L1 norm <= radius under the uniform law.

    |s_i| are iid uniform(0,1), so this is the Irwin-Hall CDF.
    """
    from math import comb, factorial, floor
    r = min(max(radius, 0.0), dim)
    return sum((-1) ** k * comb(dim, k) * (r - k) ** dim for k in range(int(floor(r)) + 1)) / factorial(dim)


def extensive_form_dro(cm, budgets, increments, free_eta=True, time_limit=600.0):
    """Worst-case expected cost by vertex enumeration, as one MILP.

    For each slot t and shell m, every vertex of the shell gets its own copy
    of the recourse variables. With eta_t free the model is

        min c.x + sum_t sum_m inc[t, m] * g[t, m]
        g[t, m] >= b_t.y_v - eta_t.sigma_v   for every vertex v of shell m
        B_t x + C_t y_v <= d_t + D_t sigma_v

    Built directly on scipy's milp, no decomposition or dualization.
    Returns (objective, x).
    """
    import scipy.sparse as sp
    from scipy.optimize import Bounds, LinearConstraint, milp

    nx, dim, T = cm.n_x, cm.dim, cm.T
    cost = [np.asarray(cm.c, float)]
    lo, hi = [cm.x_lb], [cm.x_ub]
    integ = [cm.x_int.astype(int)]
    ncol = nx
    r_i, r_j, r_v, r_hi = [], [], [], []

    def add_rows(mat, col0, row0):
        coo = sp.coo_matrix(mat)
        r_i.extend((coo.row + row0).tolist())
        r_j.extend((coo.col + col0).tolist())
        r_v.extend(coo.data.tolist())

    nrow = 0
    add_rows(cm.A, 0, 0)
    r_hi.extend(cm.h.tolist())
    nrow += cm.A.shape[0]
    for t in range(T):
        blk = cm.slots[t]
        ny = blk.C.shape[1]
        eta0 = ncol
        ncol += dim
        cost.append(np.zeros(dim))
        box = np.inf if free_eta else 0.0
        lo.append(np.full(dim, -box)), hi.append(np.full(dim, box)), integ.append(np.zeros(dim, int))
        g0 = ncol
        ncol += len(budgets[t])
        cost.append(np.asarray(increments[t], float))
        lo.append(np.full(len(budgets[t]), -np.inf)), hi.append(np.full(len(budgets[t]), np.inf))
        integ.append(np.zeros(len(budgets[t]), int))
        for m, gam in enumerate(budgets[t]):
            for v in l1_box_vertices(dim, gam):
                y0 = ncol
                ncol += ny
                cost.append(np.zeros(ny))
                lo.append(np.full(ny, -np.inf)), hi.append(np.full(ny, np.inf)), integ.append(np.zeros(ny, int))
                add_rows(blk.B, 0, nrow)
                add_rows(blk.C, y0, nrow)
                r_hi.extend((blk.d + blk.D @ v).tolist())
                nrow += blk.C.shape[0]
                # b.y - eta.v - g <= 0
                for j in np.nonzero(blk.b)[0]:
                    r_i.append(nrow), r_j.append(y0 + j), r_v.append(float(blk.b[j]))
                for i in np.nonzero(v)[0]:
                    r_i.append(nrow), r_j.append(eta0 + i), r_v.append(-float(v[i]))
                r_i.append(nrow), r_j.append(g0 + m), r_v.append(-1.0)
                r_hi.append(0.0)
                nrow += 1
    A = sp.csr_matrix((r_v, (r_i, r_j)), shape=(nrow, ncol))
    c = np.concatenate(cost)
    res = milp(c, constraints=LinearConstraint(A, -np.inf, np.array(r_hi)), integrality=np.concatenate(integ),
               bounds=Bounds(np.concatenate(lo), np.concatenate(hi)),
               options={"mip_rel_gap": 1e-9, "time_limit": time_limit})
    if res.x is None:
        raise RuntimeError(f"extensive form failed: {res.message}")
    return float(res.fun + cm.const), res.x[:nx]


def recourse_lp(cm, t, x, sigma):
    """Plain recourse value min b.y s.t. C y <= d + D sigma - B x."""
    from scipy.optimize import linprog
    blk = cm.slots[t]
    r = blk.d + blk.D @ np.asarray(sigma, float) - blk.B @ x
    res = linprog(blk.b, A_ub=blk.C, b_ub=r, bounds=(None, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def vertex_max(cm, t, x, eta, budget):
    """max over the vertices of {|s|_inf <= 1, |s|_1 <= budget} of recourse - eta.s"""
    eta = np.zeros(cm.dim) if eta is None else np.asarray(eta, float)
    return max(recourse_lp(cm, t, x, v) - float(eta @ v) for v in l1_box_vertices(cm.dim, budget))


def enumerate_first_stage(lp):
    """Optimum of a small MIP by fixing every integer pattern and solving the LP with scipy."""
    from scipy.optimize import linprog
    import scipy.sparse as sp
    n = lp.n_cols
    ri, rj, rv = [], [], []
    ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
    for r in range(lp.n_rows):
        sense = lp.row_sense[r]
        sign = -1.0 if sense == ">=" else 1.0
        target = eq_rows if sense == "=" else ub_rows
        (eq_rhs if sense == "=" else ub_rhs).append(sign * lp.rhs[r])
        k = len(target)
        target.append(r)
        for j, v in zip(lp.row_cols[r], lp.row_vals[r]):
            ri.append((sense == "=", k)), rj.append(j), rv.append(sign * v)
    def build(flag, m):
        rows = [(k, j, v) for (e, k), j, v in zip(ri, rj, rv) if e == flag]
        if not rows:
            return None
        k, j, v = zip(*rows)
        return sp.csr_matrix((v, (k, j)), shape=(m, n))
    A_ub, A_eq = build(False, len(ub_rows)), build(True, len(eq_rows))
    c = np.array([lp.obj.get(j, 0.0) for j in range(n)]) * (1 if lp.sense == "min" else -1)
    ints = [j for j in range(n) if lp.integer[j]]
    best = np.inf
    for bits in itertools.product(*[range(int(lp.lb[j]), int(lp.ub[j]) + 1) for j in ints]):
        lb, ub = np.array(lp.lb, float), np.array(lp.ub, float)
        lb[ints] = ub[ints] = bits
        res = linprog(c, A_ub=A_ub, b_ub=ub_rhs or None, A_eq=A_eq, b_eq=eq_rhs or None,
                      bounds=np.column_stack([lb, ub]), method="highs")
        if res.status == 0:
            best = min(best, res.fun)
    return best * (1 if lp.sense == "min" else -1) + lp.obj_constant
