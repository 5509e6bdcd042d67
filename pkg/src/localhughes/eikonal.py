"""Eikonal solvers (fast sweeping, fast marching, graph oracle) and local potentials.

All kernels work on vertex arrays of shape ``(nx, ny)``; 1D problems use
``ny == 1``. Impassable vertices carry infinite cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import ConfigurationError, Grid, VisionSpec, vision_mask

INF = np.inf


class EikonalConvergenceError(RuntimeError):
    """Fast sweeping did not reach the tolerance within the sweep budget."""

    def __init__(self, message: str, residual: float, sweeps: int):
        super().__init__(f"{message} (residual {residual:.3e} after {sweeps} sweeps)")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class CostModel:
    """Walking cost ``c(rho) = min(1/f_c(rho), c_max)``; ``lwr`` evaluates at ``max(rho, floor)``.

    law: ``"linear"`` uses ``f_c = 1 - rho/rho_max``; ``"lwr"`` uses
    ``f_c = rho (rho_max - rho) / rho_max**2``.
    """

    law: str = "linear"
    rho_max: float = 1.0
    rho_hidden: float = 0.0
    c_max: float = 1e3
    floor: float = 1e-7

    def __post_init__(self):
        if self.law not in ("linear", "lwr"):
            raise ConfigurationError(f"unknown cost law {self.law!r}")
        if not self.floor > 0:
            raise ConfigurationError("density floor must be positive")
        if not 0 <= self.rho_hidden < self.rho_max:
            raise ConfigurationError("hidden density must lie in [0, rho_max)")
        if not self.c_max > 0:
            raise ConfigurationError("cost cap must be positive")

    def speed(self, rho):
        rho = np.clip(np.asarray(rho, float), 0.0, self.rho_max)
        if self.law == "linear":
            return 1.0 - rho / self.rho_max
        return rho * (self.rho_max - rho) / self.rho_max**2

    def cost(self, rho):
        r = np.asarray(rho, float)
        if self.law == "lwr":  # the floor only matters where the speed vanishes at zero density
            r = np.maximum(r, self.floor)
        with np.errstate(divide="ignore"):
            c = 1.0 / self.speed(r)
        return np.minimum(c, self.c_max)

    @property
    def hidden_cost(self) -> float:
        return float(self.cost(self.rho_hidden))

    @property
    def nondecreasing(self) -> bool:
        """Whether the cost is non-decreasing in the density."""
        return self.law == "linear"


@dataclass
class EikonalProblem:
    """``||grad phi|| = cost`` with ``phi = values`` on ``boundary``."""

    grid: Grid
    cost: np.ndarray
    boundary: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        self.cost = np.asarray(self.cost, float)
        self.boundary = np.asarray(self.boundary, bool)
        if self.cost.shape != self.grid.vshape or self.boundary.shape != self.grid.vshape:
            raise ValueError("cost and boundary must be vertex arrays")
        if not self.boundary.any():
            raise ValueError("empty boundary set")
        finite = np.isfinite(self.cost)
        if np.any(self.cost[finite] <= 0):
            raise ValueError("cost must be positive")
        if self.values is None:
            self.values = np.zeros(self.grid.vshape)

    def default_tol(self) -> float:
        c = self.cost[np.isfinite(self.cost)]
        return 1e-8 * self.grid.domain.diameter * float(c.max() if c.size else 1.0)


@dataclass
class EikonalSolution:
    grid: Grid
    phi: np.ndarray
    method: str
    sweeps: int = 0
    residual: float = 0.0
    order: np.ndarray | None = field(default=None, repr=False)

    def gradient(self) -> np.ndarray:
        """Vertex gradient (central inside, one-sided at borders and next to unreachable nodes)."""
        phi2 = _as2d(self.phi)
        nodes = np.arange(phi2.size, dtype=np.int64)
        val = np.empty(phi2.size)
        grad = np.empty((phi2.size, 2))
        hx, hy = _spacing2(self.grid)
        _gradients_at(phi2.ravel(), phi2.shape[0], phi2.shape[1], hx, hy, nodes, val, grad)
        return grad[:, : self.grid.dim].reshape(self.grid.vshape + (self.grid.dim,))


def _as2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _spacing2(grid: Grid) -> tuple[float, float]:
    return (grid.spacing[0], grid.spacing[1]) if grid.dim == 2 else (grid.spacing[0], 1.0)


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _godunov(a, ha, b, hb, c):
    """Upwind update from the axis minima ``a`` (spacing ``ha``) and ``b`` (``hb``)."""
    if b < a:
        a, b = b, a
        ha, hb = hb, ha
    if a == INF:
        return INF
    t = a + c * ha
    if t <= b:
        return t
    s = ha * ha + hb * hb
    disc = c * c * s - (a - b) * (a - b)
    if disc < 0.0:
        disc = 0.0
    return (a * hb * hb + b * ha * ha + ha * hb * math.sqrt(disc)) / s

@njit(cache=True)
def _sift_up(hk, hi, i):
    # hk: keys by slot; hi[0]: node by slot, hi[1]: slot by node
    k = hk[i]
    n = hi[0, i]
    while i > 0:
        p = (i - 1) >> 1
        if hk[p] <= k:
            break
        hk[i] = hk[p]
        hi[0, i] = hi[0, p]
        hi[1, hi[0, i]] = i
        i = p
    hk[i] = k
    hi[0, i] = n
    hi[1, n] = i


@njit(cache=True)
def _heap_pop(hk, hi, size):
    n = hi[0, 0]
    hi[1, n] = -1
    size -= 1
    if size > 0:
        k = hk[size]
        m = hi[0, size]
        i = 0
        while True:
            c = 2 * i + 1
            if c >= size:
                break
            if c + 1 < size and hk[c + 1] < hk[c]:
                c += 1
            if hk[c] >= k:
                break
            hk[i] = hk[c]
            hi[0, i] = hi[0, c]
            hi[1, hi[0, i]] = i
            i = c
        hk[i] = k
        hi[0, i] = m
        hi[1, m] = i
    return n, size


@njit(cache=True)
def _heap_set(hk, hi, size, node, key):
    """Insert ``node`` or lower its key; returns the new heap size."""
    i = hi[1, node]
    if i < 0:
        hk[size] = key
        hi[0, size] = node
        _sift_up(hk, hi, size)
        return size + 1
    hk[i] = key
    _sift_up(hk, hi, i)
    return size


@njit(cache=True)
def _fsm_kernel(phi, cost, fixed, hx, hy, tol, max_sweeps, i0, i1, j0, j1):
    nx, ny = phi.shape
    ndir = 4 if ny > 1 else 2
    sweeps = 0
    resid = INF
    while sweeps < max_sweeps:
        change = 0.0
        for d in range(ndir):
            if d == 0 or d == 2:
                ia, ib, si = i0, i1, 1
            else:
                ia, ib, si = i1 - 1, i0 - 1, -1
            if d < 2:
                ja, jb, sj = j0, j1, 1
            else:
                ja, jb, sj = j1 - 1, j0 - 1, -1
            for i in range(ia, ib, si):
                for j in range(ja, jb, sj):
                    if fixed[i, j]:
                        continue
                    c = cost[i, j]
                    if c == INF:
                        continue
                    a = INF
                    if i > 0:
                        a = phi[i - 1, j]
                    if i < nx - 1 and phi[i + 1, j] < a:
                        a = phi[i + 1, j]
                    b = INF
                    if j > 0:
                        b = phi[i, j - 1]
                    if j < ny - 1 and phi[i, j + 1] < b:
                        b = phi[i, j + 1]
                    new = _godunov(a, hx, b, hy, c)
                    old = phi[i, j]
                    if new < old:
                        diff = old - new
                        if diff > change:
                            change = diff
                        phi[i, j] = new
            sweeps += 1
            if sweeps >= max_sweeps and d < ndir - 1:
                return sweeps, INF, False
        resid = change
        if change <= tol:
            return sweeps, resid, True
    return sweeps, resid, False


@njit(cache=True)
def _fmm_kernel(p, cost, fixed, nx, ny, hx, hy, targets, order):
    """Fast marching on flat arrays; ``p`` holds boundary values on ``fixed`` nodes.

    Returns the number of accepted nodes (listed in ``order``). Stops early
    once every node in ``targets`` is accepted (if ``targets`` is non-empty).
    """
    N = nx * ny
    state = np.zeros(N, np.int8)
    hk = np.empty(N)
    hi = np.empty((2, N), np.int64)
    hi[1, :] = -1
    size = 0
    for n in range(N):
        if fixed[n]:
            if p[n] < INF:
                size = _heap_set(hk, hi, size, n, p[n])
                state[n] = 1
        else:
            p[n] = INF
    is_t = np.zeros(N, np.bool_)
    remaining = 0
    for t in targets:
        if not is_t[t]:
            is_t[t] = True
            remaining += 1
    cnt = 0
    while size > 0:
        n, size = _heap_pop(hk, hi, size)
        state[n] = 2
        order[cnt] = n
        cnt += 1
        if is_t[n]:
            remaining -= 1
            if remaining == 0:
                break
        i = n // ny
        j = n - i * ny
        for q in range(4):
            if q == 0:
                if i == 0:
                    continue
                m = n - ny
            elif q == 1:
                if i == nx - 1:
                    continue
                m = n + ny
            elif q == 2:
                if j == 0:
                    continue
                m = n - 1
            else:
                if j == ny - 1:
                    continue
                m = n + 1
            c = cost[m]
            if state[m] == 2 or fixed[m] or c == INF:
                continue
            mi = m // ny
            mj = m - mi * ny
            a = INF
            if mi > 0 and state[m - ny] == 2:
                a = p[m - ny]
            if mi < nx - 1 and state[m + ny] == 2 and p[m + ny] < a:
                a = p[m + ny]
            b = INF
            if mj > 0 and state[m - 1] == 2:
                b = p[m - 1]
            if mj < ny - 1 and state[m + 1] == 2 and p[m + 1] < b:
                b = p[m + 1]
            val = _godunov(a, hx, b, hy, c)
            if val < p[m]:
                p[m] = val
                size = _heap_set(hk, hi, size, m, val)
                state[m] = 1
    for n in range(N):
        if state[n] != 2:
            p[n] = INF
    return cnt


@njit(cache=True)
def _gradients_at(p, nx, ny, hx, hy, nodes, out_val, out_grad):
    """Value and finite-difference gradient of a flat vertex field at ``nodes``."""
    for s in range(nodes.shape[0]):
        n = nodes[s]
        i = n // ny
        j = n - i * ny
        v = p[n]
        out_val[s] = v
        lo = p[n - ny] if i > 0 else INF
        hi = p[n + ny] if i < nx - 1 else INF
        out_grad[s, 0] = _diff(lo, v, hi, hx)
        if ny > 1:
            lo = p[n - 1] if j > 0 else INF
            hi = p[n + 1] if j < ny - 1 else INF
            out_grad[s, 1] = _diff(lo, v, hi, hy)
        else:
            out_grad[s, 1] = 0.0


@njit(cache=True)
def _diff(lo, v, hi, h):
    if v == INF:
        return 0.0
    if lo < INF and hi < INF:
        return (hi - lo) / (2.0 * h)
    if hi < INF:
        return (hi - v) / h
    if lo < INF:
        return (v - lo) / h
    return 0.0


@njit(cache=True)
def _dependencies(p, cost, fixed, nx, ny):
    """Upwind neighbour per axis used by the Godunov update of each node (-1 if none)."""
    N = nx * ny
    depx = -np.ones(N, np.int64)
    depy = -np.ones(N, np.int64)
    for n in range(N):
        if fixed[n] or cost[n] == INF or p[n] == INF:
            continue
        i = n // ny
        j = n - i * ny
        a = INF
        ia = -1
        if i > 0 and p[n - ny] < a:
            a = p[n - ny]
            ia = n - ny
        if i < nx - 1 and p[n + ny] < a:
            a = p[n + ny]
            ia = n + ny
        if a < p[n]:
            depx[n] = ia
        b = INF
        ib = -1
        if j > 0 and p[n - 1] < b:
            b = p[n - 1]
            ib = n - 1
        if j < ny - 1 and p[n + 1] < b:
            b = p[n + 1]
            ib = n + 1
        if b < p[n]:
            depy[n] = ib
    return depx, depy


# Per-node bookkeeping for the observer kernels lives in one int64 array
# ``info`` with rows: 0 x-dependency, 1 y-dependency, 2 vision stamp,
# 3 memo (2*stamp + flag), 4 free (not fixed and passable).


@njit(cache=True)
def _closure_slow(n, stamp, mH, ref, info, stack):
    """Dependency closure membership, memoised per observer stamp."""
    top = 0
    stack[0] = n
    while top >= 0:
        t = stack[top]
        if (info[3, t] >> 1) == stamp:
            top -= 1
            continue
        if info[4, t] == 0 or ref[t] < mH:
            info[3, t] = 2 * stamp
            top -= 1
            continue
        if info[2, t] == stamp:
            info[3, t] = 2 * stamp + 1
            top -= 1
            continue
        dx = info[0, t]
        dy = info[1, t]
        pending = False
        if dx >= 0 and (info[3, dx] >> 1) != stamp:
            top += 1
            stack[top] = dx
            pending = True
        if dy >= 0 and (info[3, dy] >> 1) != stamp:
            top += 1
            stack[top] = dy
            pending = True
        if pending:
            continue
        val = 0
        if dx >= 0 and (info[3, dx] & 1) == 1:
            val = 1
        if dy >= 0 and (info[3, dy] & 1) == 1:
            val = 1
        info[3, t] = 2 * stamp + val
        top -= 1
    return (info[3, n] & 1) == 1


@njit(cache=True)
def _in_region(n, mode, stamp, mH, ref, info, stack):
    """Membership of node ``n`` in the recomputation region.

    mode 0: every free node; 1: superlevel set ``ref >= mH``; 2: nodes whose
    reference value depends (through upwind neighbours) on a visible node.
    """
    if info[4, n] == 0:
        return False
    if mode == 0:
        return True
    if ref[n] < mH:
        return False
    if mode == 1:
        return True
    if (info[3, n] >> 1) == stamp:
        return (info[3, n] & 1) == 1
    return _closure_slow(n, stamp, mH, ref, info, stack)


@njit(cache=True)
def _mark_disc(oi, oj, nx, ny, hx, hy, radius, ref, info, stamp):
    """Stamp visible nodes of an observer at vertex (oi, oj); return min reference value."""
    ri = int(math.floor(radius / hx + 1e-9)) + 1
    rj = int(math.floor(radius / hy + 1e-9)) + 1 if ny > 1 else 0
    lim = radius * (1.0 + 1e-12) + 1e-12
    mH = INF
    for i in range(max(0, oi - ri), min(nx, oi + ri + 1)):
        for j in range(max(0, oj - rj), min(ny, oj + rj + 1)):
            dx = (i - oi) * hx
            dy = (j - oj) * hy if ny > 1 else 0.0
            if math.sqrt(dx * dx + dy * dy) <= lim or (i == oi and j == oj):
                n = i * ny + j
                if ref[n] < INF:
                    info[2, n] = stamp
                    if ref[n] < mH:
                        mH = ref[n]
    return mH


@njit(cache=True)
def _make_info(depx, depy, free, N):
    info = np.zeros((5, N), np.int64)
    for n in range(N):
        info[0, n] = depx[n]
        info[1, n] = depy[n]
        info[4, n] = 1 if free[n] else 0
    return info


@njit(cache=True)
def _observer_fmm(nx, ny, hx, hy, cost_vis, cost_hid, ref, order, sorted_vals, info,
                  obs_nodes, radius, mode, band, full, out_val, out_grad, out_phi, stats):
    """Local potentials for a batch of observers by region-restricted fast marching.

    Nodes outside the region keep their reference values; the march merges
    those known values (in reference order) with the heap of region nodes.
    ``stats`` accumulates [heap pops, observers].
    """
    N = nx * ny
    work = np.full(N, INF)
    state = np.zeros(N, np.int8)
    hk = np.empty(N)
    hi = np.empty((2, N), np.int64)
    hi[1, :] = -1
    touched = np.empty(N, np.int64)
    targ_st = np.zeros(N, np.int64)
    stack = np.empty(2 * N + 2, np.int64)
    nb = np.empty(5, np.int64)
    for s in range(obs_nodes.shape[0]):
        stamp = s + 1
        on = obs_nodes[s]
        oi = on // ny
        oj = on - oi * ny
        mH = _mark_disc(oi, oj, nx, ny, hx, hy, radius, ref, info, stamp)
        p = 0 if mode == 0 else np.searchsorted(sorted_vals, mH - band)
        nt = 0
        nb[nt] = on
        nt += 1
        if oi > 0:
            nb[nt] = on - ny
            nt += 1
        if oi < nx - 1:
            nb[nt] = on + ny
            nt += 1
        if oj > 0:
            nb[nt] = on - 1
            nt += 1
        if oj < ny - 1:
            nb[nt] = on + 1
            nt += 1
        remaining = 0
        for q in range(nt):
            t = nb[q]
            if _in_region(t, mode, stamp, mH, ref, info, stack) and targ_st[t] != stamp:
                targ_st[t] = stamp
                remaining += 1
        size = 0
        ntouch = 0
        if remaining > 0 or full:
            while True:
                # next known node outside the region, in reference order
                while p < N:
                    w = order[p]
                    if sorted_vals[p] == INF:
                        p = N
                        break
                    if info[4, w] == 0:
                        reg = False
                    elif mode == 0:
                        reg = True
                    elif ref[w] < mH:
                        reg = False
                    elif mode == 1:
                        reg = True
                    elif (info[3, w] >> 1) == stamp:
                        reg = (info[3, w] & 1) == 1
                    else:
                        reg = _closure_slow(w, stamp, mH, ref, info, stack)
                    if reg:
                        p += 1
                        continue
                    break
                wv = sorted_vals[p] if p < N else INF
                hv = hk[0] if size > 0 else INF
                if wv == INF and hv == INF:
                    break
                if wv <= hv:
                    n = order[p]
                    p += 1
                    work[n] = ref[n]
                    if state[n] == 0:
                        touched[ntouch] = n
                        ntouch += 1
                    state[n] = 2
                else:
                    n = hi[0, 0]
                    hi[1, n] = -1
                    size -= 1
                    if size > 0:
                        k = hk[size]
                        u = hi[0, size]
                        x = 0
                        while True:
                            c2 = 2 * x + 1
                            if c2 >= size:
                                break
                            if c2 + 1 < size and hk[c2 + 1] < hk[c2]:
                                c2 += 1
                            if hk[c2] >= k:
                                break
                            hk[x] = hk[c2]
                            hi[0, x] = hi[0, c2]
                            hi[1, hi[0, x]] = x
                            x = c2
                        hk[x] = k
                        hi[0, x] = u
                        hi[1, u] = x
                    state[n] = 2
                    stats[0] += 1
                    if targ_st[n] == stamp:
                        remaining -= 1
                        if remaining == 0 and not full:
                            break
                i = n // ny
                j = n - i * ny
                for q in range(4):
                    if q == 0:
                        if i == 0:
                            continue
                        m = n - ny
                    elif q == 1:
                        if i == nx - 1:
                            continue
                        m = n + ny
                    elif q == 2:
                        if j == 0:
                            continue
                        m = n - 1
                    else:
                        if j == ny - 1:
                            continue
                        m = n + 1
                    if state[m] == 2:
                        continue
                    if info[4, m] == 0:
                        continue
                    elif mode == 0:
                        pass
                    elif ref[m] < mH:
                        continue
                    elif mode == 1:
                        pass
                    elif (info[3, m] >> 1) == stamp:
                        if (info[3, m] & 1) == 0:
                            continue
                    elif not _closure_slow(m, stamp, mH, ref, info, stack):
                        continue
                    c = cost_vis[m] if info[2, m] == stamp else cost_hid[m]
                    mi = m // ny
                    mj = m - mi * ny
                    a = INF
                    if mi > 0 and state[m - ny] == 2:
                        a = work[m - ny]
                    if mi < nx - 1 and state[m + ny] == 2 and work[m + ny] < a:
                        a = work[m + ny]
                    b = INF
                    if mj > 0 and state[m - 1] == 2:
                        b = work[m - 1]
                    if mj < ny - 1 and state[m + 1] == 2 and work[m + 1] < b:
                        b = work[m + 1]
                    val = _godunov(a, hx, b, hy, c)
                    if val < work[m]:
                        if state[m] == 0:
                            touched[ntouch] = m
                            ntouch += 1
                        work[m] = val
                        x = hi[1, m]
                        if x < 0:
                            x = size
                            size += 1
                        while x > 0:
                            par = (x - 1) >> 1
                            if hk[par] <= val:
                                break
                            hk[x] = hk[par]
                            hi[0, x] = hi[0, par]
                            hi[1, hi[0, x]] = x
                            x = par
                        hk[x] = val
                        hi[0, x] = m
                        hi[1, m] = x
                        state[m] = 1
        # unresolved targets: region -> unreachable, outside -> reference
        for q in range(nt):
            t = nb[q]
            if state[t] != 2:
                if _in_region(t, mode, stamp, mH, ref, info, stack):
                    work[t] = INF
                else:
                    work[t] = ref[t]
                if state[t] == 0:
                    touched[ntouch] = t
                    ntouch += 1
                    state[t] = 3
        out_val[s] = work[on]
        lo = work[on - ny] if oi > 0 else INF
        hi_ = work[on + ny] if oi < nx - 1 else INF
        out_grad[s, 0] = _diff(lo, work[on], hi_, hx)
        if ny > 1:
            lo = work[on - 1] if oj > 0 else INF
            hi_ = work[on + 1] if oj < ny - 1 else INF
            out_grad[s, 1] = _diff(lo, work[on], hi_, hy)
        else:
            out_grad[s, 1] = 0.0
        if full:
            for n in range(N):
                if state[n] == 2:
                    out_phi[n] = work[n]
                elif _in_region(n, mode, stamp, mH, ref, info, stack):
                    out_phi[n] = INF
                else:
                    out_phi[n] = ref[n]
        for q in range(ntouch):
            t = touched[q]
            work[t] = INF
            state[t] = 0
            hi[1, t] = -1
        stats[1] += 1


@njit(cache=True)
def _observer_fsm(nx, ny, hx, hy, cost_vis, cost_hid, ref, order, sorted_vals, info,
                  obs_nodes, radius, mode, band, tol, max_sweeps, full, out_val, out_grad, out_phi, stats):
    """Fast-sweeping counterpart of :func:`_observer_fmm` on the region's bounding box.

    Returns 0 on success or ``-(s + 1)`` if observer ``s`` did not converge.
    """
    N = nx * ny
    work = ref.copy()
    work2 = work.reshape(nx, ny)
    cost2 = np.empty((nx, ny))
    isfix = np.ones((nx, ny), np.bool_)
    stack = np.empty(2 * N + 2, np.int64)
    region = np.empty(N, np.int64)
    for s in range(obs_nodes.shape[0]):
        stamp = s + 1
        on = obs_nodes[s]
        oi = on // ny
        oj = on - oi * ny
        mH = _mark_disc(oi, oj, nx, ny, hx, hy, radius, ref, info, stamp)
        p = 0 if mode == 0 else np.searchsorted(sorted_vals, mH - band)
        nr = 0
        i0, i1, j0, j1 = nx, -1, ny, -1
        for r in range(p, N):
            if sorted_vals[r] == INF:
                break
            n = order[r]
            if _in_region(n, mode, stamp, mH, ref, info, stack):
                region[nr] = n
                nr += 1
                i = n // ny
                j = n - i * ny
                i0 = min(i0, i)
                i1 = max(i1, i)
                j0 = min(j0, j)
                j1 = max(j1, j)
        for r in range(nr):
            n = region[r]
            i = n // ny
            j = n - i * ny
            work2[i, j] = INF
            isfix[i, j] = False
            cost2[i, j] = cost_vis[n] if info[2, n] == stamp else cost_hid[n]
        if nr > 0:
            sw, res, ok = _fsm_kernel(work2, cost2, isfix, hx, hy, tol, max_sweeps, i0, i1 + 1, j0, j1 + 1)
            stats[0] += nr * sw
            if not ok:
                return -(s + 1)
        out_val[s] = work[on]
        lo = work[on - ny] if oi > 0 else INF
        hi_ = work[on + ny] if oi < nx - 1 else INF
        out_grad[s, 0] = _diff(lo, work[on], hi_, hx)
        if ny > 1:
            lo = work[on - 1] if oj > 0 else INF
            hi_ = work[on + 1] if oj < ny - 1 else INF
            out_grad[s, 1] = _diff(lo, work[on], hi_, hy)
        else:
            out_grad[s, 1] = 0.0
        if full:
            for n in range(N):
                out_phi[n] = work[n]
        for r in range(nr):
            n = region[r]
            i = n // ny
            j = n - i * ny
            work2[i, j] = ref[n]
            isfix[i, j] = True
        stats[1] += 1
    return 0


# ------------------------------------------------------------ public API


def flat_vertex(grid: Grid, idx) -> int:
    """Flat index of a vertex in the ``(nx, ny)`` kernel layout."""
    if grid.dim == 1:
        return int(idx[0])
    return int(idx[0]) * grid.vshape[1] + int(idx[1])


def fsm_solve(p: EikonalProblem, tol: float | None = None, max_sweeps: int = 100) -> EikonalSolution:
    """Fast sweeping with Godunov upwind updates and alternating orderings."""
    tol = p.default_tol() if tol is None else tol
    phi = np.where(p.boundary, p.values, INF).astype(float)
    phi2 = _as2d(phi)
    hx, hy = _spacing2(p.grid)
    nx, ny = phi2.shape
    sweeps, resid, ok = _fsm_kernel(phi2, _as2d(p.cost), _as2d(p.boundary), hx, hy, tol, max_sweeps, 0, nx, 0, ny)
    if not ok:
        raise EikonalConvergenceError("fast sweeping did not converge", resid, sweeps)
    return EikonalSolution(p.grid, phi2.reshape(p.grid.vshape), "fsm", sweeps, resid)


def fmm_solve(p: EikonalProblem, targets=None) -> EikonalSolution:
    """Fast marching; accepted values are final and promoted in nondecreasing order.

    With ``targets`` (vertex index tuples) the march stops once all of them
    are accepted; every other non-accepted node is returned as ``inf``.
    """
    phi = np.where(p.boundary, p.values, INF).astype(float)
    phi2 = _as2d(phi)
    nx, ny = phi2.shape
    hx, hy = _spacing2(p.grid)
    flat = phi2.ravel()
    if targets is None:
        tg = np.empty(0, np.int64)
    else:
        tg = np.array([flat_vertex(p.grid, np.atleast_1d(t)) for t in targets], np.int64)
    order = np.empty(nx * ny, np.int64)
    cnt = _fmm_kernel(flat, _as2d(p.cost).ravel(), _as2d(p.boundary).ravel(), nx, ny, hx, hy, tg, order)
    return EikonalSolution(p.grid, flat.reshape(p.grid.vshape), "fmm", order=order[:cnt])


def dijkstra_oracle(p: EikonalProblem) -> EikonalSolution:
    """Shortest paths on the 8-neighbour graph, edge weight = mean cost times length."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    cost = _as2d(p.cost)
    nx, ny = cost.shape
    if nx * ny > 65 * 65:
        raise ValueError("graph oracle is meant for small grids")
    hx, hy = _spacing2(p.grid)
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, w = [], [], []
    offsets = [(1, 0), (0, 1), (1, 1), (1, -1)] if ny > 1 else [(1, 0)]
    for di, dj in offsets:
        a = idx[max(0, -di): nx - max(0, di), max(0, -dj): ny - max(0, dj)]
        b = idx[max(0, di): nx - max(0, -di), max(0, dj): ny - max(0, -dj)]
        a = a.ravel()
        b = b.ravel()
        ca = cost.ravel()[a]
        cb = cost.ravel()[b]
        ok = np.isfinite(ca) & np.isfinite(cb)
        length = math.hypot(di * hx, dj * hy)
        rows += [a[ok], b[ok]]
        cols += [b[ok], a[ok]]
        w += [0.5 * (ca[ok] + cb[ok]) * length] * 2
    g = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(nx * ny, nx * ny)).tocsr()
    # a virtual source joined to every boundary node with its boundary value
    src = np.flatnonzero(_as2d(p.boundary).ravel())
    vals = _as2d(p.values).ravel()[src]
    dist = np.full(nx * ny, INF)
    if np.any(vals == 0.0):
        dist = dijkstra(g, directed=False, indices=src[vals == 0.0], min_only=True)
    for s, v in zip(src, vals):
        if v != 0.0:
            dist = np.minimum(dist, v + dijkstra(g, directed=False, indices=s))
    return EikonalSolution(p.grid, dist.reshape(p.grid.vshape), "dijkstra")


def assemble_cost(rho: np.ndarray, mask: np.ndarray, W: np.ndarray | float, cm: CostModel,
                  passable: np.ndarray | None = None) -> np.ndarray:
    """Vertex cost: visible nodes pay ``c(rho) + W``, hidden nodes pay ``c(rho_H)``."""
    vis = cm.cost(rho) + np.asarray(W, float)
    c = np.where(mask, vis, cm.hidden_cost)
    if passable is not None:
        c = np.where(passable, c, INF)
    return c


def _solve(p: EikonalProblem, solver: str, tol=None) -> EikonalSolution:
    if solver == "fsm":
        return fsm_solve(p, tol)
    if solver == "fmm":
        return fmm_solve(p)
    raise ConfigurationError(f"unknown eikonal solver {solver!r}")


def local_potential(grid: Grid, x, rho: np.ndarray, k: int, vision: VisionSpec, cm: CostModel,
                    W: np.ndarray | float = 0.0, solver: str = "fsm", tol: float | None = None) -> EikonalSolution:
    """Potential towards exit ``k`` as seen by an observer at ``x`` (vertex density ``rho``)."""
    mask = vision_mask(grid, x, vision)
    cost = assemble_cost(rho, mask, W, cm, grid.passable)
    return _solve(EikonalProblem(grid, cost, grid.exit_vertices(k)), solver, tol)


def compute_reference_potential(cm: CostModel, grid: Grid, exits=None, solver: str = "fmm") -> EikonalSolution:
    """Constant hidden-cost potential towards ``exits`` (all exits by default); cached per grid."""
    key = ("ref", cm.hidden_cost, None if exits is None else tuple(np.atleast_1d(exits)), solver)
    if key not in grid._cache:
        cost = np.where(grid.passable, cm.hidden_cost, INF)
        grid._cache[key] = _solve(EikonalProblem(grid, cost, grid.exit_vertices(exits)), solver)
    return grid._cache[key]


def compute_MH(phi_H: EikonalSolution | np.ndarray, grid: Grid, x, vision: VisionSpec):
    """Minimum ``m_H`` of the reference potential over the vision set and its superlevel set ``M_H``."""
    phi = phi_H.phi if isinstance(phi_H, EikonalSolution) else np.asarray(phi_H)
    mask = vision_mask(grid, x, vision)
    m_H = float(phi[mask].min())
    return m_H, phi >= m_H


def _bilinear(values: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Interpolate vertex ``values`` (trailing axes allowed) at points ``pts`` (n, dim)."""
    lo = np.array([b[0] for b in grid.domain.bounds])
    h = np.array(grid.spacing)
    s = (pts - lo) / h
    if grid.dim == 1:
        i = np.clip(np.floor(s[:, 0]).astype(int), 0, grid.shape[0] - 1)
        t = np.clip(s[:, 0] - i, 0, 1)
        t = t.reshape((-1,) + (1,) * (values.ndim - 1))
        return (1 - t) * values[i] + t * values[i + 1]
    i = np.clip(np.floor(s[:, 0]).astype(int), 0, grid.shape[0] - 1)
    j = np.clip(np.floor(s[:, 1]).astype(int), 0, grid.shape[1] - 1)
    tx = np.clip(s[:, 0] - i, 0, 1).reshape((-1,) + (1,) * (values.ndim - 2))
    ty = np.clip(s[:, 1] - j, 0, 1).reshape((-1,) + (1,) * (values.ndim - 2))
    return ((1 - tx) * (1 - ty) * values[i, j] + tx * (1 - ty) * values[i + 1, j]
            + (1 - tx) * ty * values[i, j + 1] + tx * ty * values[i + 1, j + 1])


def compute_Vsharp(phi_H: EikonalSolution, grid: Grid, x, vision: VisionSpec, step_budget: float = 10.0) -> np.ndarray:
    """Nodes whose steepest-descent path of ``phi_H`` passes through the open vision set.

    Paths are explicit Euler walks of step ``h/2`` ending within one cell of
    an exit. Walks exceeding ``step_budget * diameter / h`` steps count as
    inside. The result is intersected with ``M_H``.
    """
    if math.isinf(vision.L):
        return grid.passable.copy()
    _, MH = compute_MH(phi_H, grid, x, vision)
    phi = np.where(np.isfinite(phi_H.phi), phi_H.phi, np.nan)
    grad = np.nan_to_num(np.asarray(phi_H.gradient()))
    h = grid.h
    cmin = float(np.nanmin(np.where(phi > 0, phi, np.nan)) / h) if np.any(phi > 0) else 1.0
    stop = 0.999 * cmin * h
    x = np.asarray(x, float).reshape(-1)
    r = vision.radius
    pts = grid.vertex_coords().reshape(-1, grid.dim).copy()
    flat_phi = np.nan_to_num(phi.ravel(), nan=np.inf)
    inside = np.zeros(len(pts), bool)
    alive = np.isfinite(flat_phi) & MH.ravel()
    inside |= alive & (np.linalg.norm(pts - x, axis=1) < r)
    alive &= ~inside & (flat_phi > stop)
    nmax = int(step_budget * grid.domain.diameter / h)
    lo = np.array([b[0] for b in grid.domain.bounds])
    hi = np.array([b[1] for b in grid.domain.bounds])
    for _ in range(nmax):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        g = _bilinear(grad, grid, pts[idx])
        gn = np.linalg.norm(g, axis=1)
        ok = gn > 0
        move = np.zeros_like(g)
        move[ok] = -0.5 * h * g[ok] / gn[ok, None]
        pts[idx] = np.clip(pts[idx] + move, lo, hi)
        hit = np.linalg.norm(pts[idx] - x, axis=1) < r
        inside[idx[hit]] = True
        val = _bilinear(np.nan_to_num(phi, nan=1e300), grid, pts[idx])
        done = hit | (val <= stop)
        alive[idx[done]] = False
    inside |= alive  # budget exhausted: conservative
    own = np.zeros(grid.vshape, bool)
    own[grid.nearest_vertex(x)] = True
    return (inside.reshape(grid.vshape) | own) & MH


@dataclass
class ReferenceData:
    """Per-exit reference potential with its sort order and upwind dependencies."""

    phi: np.ndarray
    order: np.ndarray
    sorted_vals: np.ndarray
    depx: np.ndarray
    depy: np.ndarray
    free: np.ndarray
    cost_hid: np.ndarray

    def info(self) -> np.ndarray:
        """Fresh bookkeeping array for the observer kernels."""
        return _make_info(self.depx, self.depy, self.free, self.phi.size)


def reference_data(grid: Grid, cm: CostModel, k: int) -> ReferenceData:
    key = ("refdata", cm.hidden_cost, k)
    if key not in grid._cache:
        sol = compute_reference_potential(cm, grid, [k])
        phi2 = _as2d(sol.phi)
        nx, ny = phi2.shape
        fixed = _as2d(grid.exit_vertices(k)).ravel()
        passable = _as2d(grid.passable).ravel()
        cost_hid = np.where(passable, cm.hidden_cost, INF)
        flat = phi2.ravel().copy()
        depx, depy = _dependencies(flat, cost_hid, fixed, nx, ny)
        order = np.argsort(flat, kind="stable")
        free = passable & ~fixed & np.isfinite(flat)
        grid._cache[key] = ReferenceData(flat, order, flat[order], depx, depy, free, cost_hid)
    return grid._cache[key]


MODES = {"none": 0, "mh": 1, "vsharp": 2}


def reduction_exact(cm: CostModel, visible_cost: np.ndarray) -> bool:
    """Whether restricted solves reproduce the full local solve exactly.

    Holds when every visible cost dominates the hidden cost pointwise.
    """
    vc = visible_cost[np.isfinite(visible_cost)]
    return bool(vc.size == 0 or vc.min() >= cm.hidden_cost)


@dataclass
class ObserverResult:
    values: np.ndarray      # (M, n_obs) self values
    grads: np.ndarray       # (M, n_obs, dim) self gradients
    mode: str
    accepted: int = 0


def observer_potentials(grid: Grid, rho: np.ndarray, cm: CostModel, W, vision: VisionSpec,
                        obs_nodes: np.ndarray, mode: str = "vsharp", solver: str = "fmm",
                        tol: float | None = None, max_sweeps: int = 100) -> ObserverResult:
    """Self values and self gradients of every exit potential at the observer vertices.

    ``obs_nodes`` are flat vertex indices. ``mode`` selects the recomputation
    region; reductions fall back to full solves when they are not exact.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown reduction {mode!r}")
    M = grid.domain.n_exits
    nx, ny = _as2d(np.empty(grid.vshape)).shape
    hx, hy = _spacing2(grid)
    passable = _as2d(grid.passable).ravel()
    cost_vis = np.where(passable, (cm.cost(_as2d(rho)) + _as2d(np.broadcast_to(W, grid.vshape))).ravel(), INF)
    nobs = len(obs_nodes)
    values = np.empty((M, nobs))
    grads = np.empty((M, nobs, 2))
    if mode != "none" and not reduction_exact(cm, cost_vis):
        mode = "none"
    tol = 1e-8 * grid.domain.diameter * float(cost_vis[np.isfinite(cost_vis)].max()) if tol is None else tol
    stats = np.zeros(2, np.int64)

    # observers whose vision disc covers the whole domain share one global solve
    coords = grid.vertex_coords().reshape(-1, grid.dim)[obs_nodes]
    corners = np.array(np.meshgrid(*[list(b) for b in grid.domain.bounds], indexing="ij")).reshape(grid.dim, -1).T
    far = np.max(np.linalg.norm(coords[:, None, :] - corners[None], axis=-1), axis=1)
    covered = np.isinf(vision.L) | (far <= vision.radius * (1 + 1e-12) + 1e-12)
    if covered.any():
        sel = obs_nodes[covered]
        v = np.empty(len(sel))
        gr = np.empty((len(sel), 2))
        for k in range(M):
            prob = EikonalProblem(grid, cost_vis.reshape(grid.vshape), grid.exit_vertices(k))
            sol = _solve(prob, solver, tol)
            _gradients_at(_as2d(sol.phi).ravel(), nx, ny, hx, hy, sel, v, gr)
            values[k, covered] = v
            grads[k, covered] = gr
        if covered.all():
            return ObserverResult(values, grads[..., : grid.dim], "global")

    rest = obs_nodes[~covered]
    v = np.empty(len(rest))
    gr = np.empty((len(rest), 2))
    band = cm.hidden_cost * max(hx, hy) * (1 + 1e-9)
    dummy = np.empty(0)
    for k in range(M):
        ref = reference_data(grid, cm, k)
        args = (nx, ny, hx, hy, cost_vis, ref.cost_hid, ref.phi, ref.order, ref.sorted_vals, ref.info(),
                rest, vision.radius, MODES[mode], band)
        if solver == "fmm":
            _observer_fmm(*args, False, v, gr, dummy, stats)
        elif solver == "fsm":
            status = _observer_fsm(*args, tol, max_sweeps, False, v, gr, dummy, stats)
            if status < 0:
                raise EikonalConvergenceError(f"observer {-status - 1} did not converge", INF, max_sweeps)
        else:
            raise ConfigurationError(f"unknown eikonal solver {solver!r}")
        values[k, ~covered] = v
        grads[k, ~covered] = gr
    return ObserverResult(values, grads[..., : grid.dim], mode, int(stats[0]))


def reduced_local_potential(grid: Grid, x, rho: np.ndarray, k: int, vision: VisionSpec, cm: CostModel,
                            W: np.ndarray | float = 0.0, mode: str = "vsharp", solver: str = "fmm",
                            tol: float | None = None) -> EikonalSolution:
    """Local potential computed only on a reduced region with reference data outside it.

    ``mode="mh"`` recomputes the superlevel set of the reference potential,
    ``mode="vsharp"`` only the nodes whose upwind dependencies reach the
    vision set. Falls back to the full solve when the reduction is not exact.
    The observer is the vertex nearest to ``x``.
    """
    vi = grid.nearest_vertex(x)
    x = grid.vertex_coords()[vi]
    obs = np.array([flat_vertex(grid, vi)], np.int64)
    mask = vision_mask(grid, x, vision)
    cost = assemble_cost(rho, mask, W, cm, grid.passable)
    if not reduction_exact(cm, np.where(mask, cost, INF)) or math.isinf(vision.L):
        return _solve(EikonalProblem(grid, cost, grid.exit_vertices(k)), solver, tol)
    nx, ny = _as2d(cost).shape
    hx, hy = _spacing2(grid)
    ref = reference_data(grid, cm, k)
    cost_vis = np.where(_as2d(grid.passable).ravel(), (cm.cost(_as2d(rho)) + _as2d(np.broadcast_to(W, grid.vshape))).ravel(), INF)
    out_phi = np.empty(nx * ny)
    val = np.empty(1)
    grd = np.empty((1, 2))
    stats = np.zeros(2, np.int64)
    band = cm.hidden_cost * max(hx, hy) * (1 + 1e-9)
    args = (nx, ny, hx, hy, cost_vis, ref.cost_hid, ref.phi, ref.order, ref.sorted_vals, ref.info(),
            obs, vision.radius, MODES[mode], band)
    if solver == "fmm":
        _observer_fmm(*args, True, val, grd, out_phi, stats)
    else:
        tol = 1e-8 * grid.domain.diameter * float(cost_vis[np.isfinite(cost_vis)].max()) if tol is None else tol
        if _observer_fsm(*args, tol, 100, True, val, grd, out_phi, stats) < 0:
            raise EikonalConvergenceError("restricted sweep did not converge", INF, 100)
    return EikonalSolution(grid, out_phi.reshape(grid.vshape), f"{solver}-{mode}")


def region_mask(grid: Grid, x, vision: VisionSpec, cm: CostModel, k: int, mode: str = "vsharp") -> np.ndarray:
    """Recomputation region used by :func:`reduced_local_potential` (dependency closure or ``M_H``)."""
    nx, ny = _as2d(np.empty(grid.vshape)).shape
    hx, hy = _spacing2(grid)
    ref = reference_data(grid, cm, k)
    oi = grid.nearest_vertex(x)
    oi, oj = (oi[0], oi[1]) if grid.dim == 2 else (oi[0], 0)
    N = nx * ny
    info = ref.info()
    stack = np.empty(2 * N + 2, np.int64)
    radius = vision.radius if math.isfinite(vision.L) else 1e300
    mH = _mark_disc(oi, oj, nx, ny, hx, hy, radius, ref.phi, info, 1)
    out = np.array([_in_region(n, MODES[mode], 1, mH, ref.phi, info, stack) for n in range(N)])
    return out.reshape(grid.vshape)
