"""Numba kernels: tau-leap stepping and large-lattice mean integration.

Everything here works on flat arrays unpacked from a compiled network
(see stochsim._compile).  The voxel layout is C-order over the lattice
shape; directions are encoded 0..5 as (+x, -x, +y, -y, +z, -z).

All randomness comes from numba's per-process np.random state, seeded
once per replicate, with a fixed draw order, so a (spec, seed, tau,
grid) tuple maps to a bit-identical trajectory.
"""

import numpy as np
from numba import njit, prange

POLICY_REJECT = 0
POLICY_LOCAL = 1

STATUS_OK = 0
STATUS_STEP_LIMIT = 1


@njit(cache=True, inline="always")
def _poisson(lam):
    if lam <= 0.0:
        return 0
    return np.random.poisson(lam)


@njit(cache=True)
def _leap_once(h, counts, nx, ny, nz, dd, deg,
               voxel_lin, lin_voxel, lin_f, lin_km, lin_c,
               voxel_mm, mm_voxel, mm_g1p, mm_g1m, mm_g2, mm_g3, mm_e, mm_i, mm_c,
               active, n_active, in_active,
               delta, touched, in_touched,
               d_lin, d_mm_e, d_mm_i, d_mm_c,
               dirs, policy):
    """One tau-leap of length h over the current state.

    Draws a Poisson count per jump channel at start-of-step propensities
    (per-voxel totals split multinomially, which is the same law), stages
    all increments, and applies them only if no count would go negative.
    Under POLICY_LOCAL the per-voxel draws are resampled locally so the
    check cannot fail.  Returns (ok, n_active).
    """
    nyz = ny * nz
    n_touch = 0
    n_lin = lin_voxel.size
    n_mm = mm_voxel.size

    # compact the active list, drawing departures as we go
    w = 0
    for r in range(n_active):
        v = active[r]
        n = counts[v]
        if n == 0:
            in_active[v] = 0
            continue
        active[w] = v
        w += 1

        ndir = deg[v]
        lam_diff = dd * h * n * ndir
        ls = voxel_lin[v]
        ms = voxel_mm[v]
        lam_bind = 0.0
        if ls >= 0:
            lam_bind = lin_f[ls] * n * h
        elif ms >= 0:
            lam_bind = mm_g1p[ms] * n * mm_e[ms] * h
        lam_out = lam_diff + lam_bind

        d_out = _poisson(lam_out)
        if policy == POLICY_LOCAL:
            tries = 0
            while d_out > n and tries < 64:
                d_out = _poisson(lam_out)
                tries += 1
            if d_out > n:
                d_out = n

        if d_out == 0:
            continue
        # neighbour targets built lazily: most visits draw no event
        i = v // nyz
        rem = v - i * nyz
        j = rem // nz
        k = rem - j * nz
        nd = 0
        if i + 1 < nx:
            dirs[nd] = v + nyz
            nd += 1
        if i - 1 >= 0:
            dirs[nd] = v - nyz
            nd += 1
        if j + 1 < ny:
            dirs[nd] = v + nz
            nd += 1
        if j - 1 >= 0:
            dirs[nd] = v - nz
            nd += 1
        if k + 1 < nz:
            dirs[nd] = v + 1
            nd += 1
        if k - 1 >= 0:
            dirs[nd] = v - 1
            nd += 1
        # split drain between binding and diffusion (thinning)
        d_bind = 0
        if lam_bind > 0.0:
            d_bind = np.random.binomial(d_out, lam_bind / lam_out)
        if ms >= 0 and d_bind > mm_e[ms]:
            # enzymes limit the binding channel
            if policy == POLICY_LOCAL:
                d_bind = mm_e[ms]
        d_diff = d_out - d_bind

        if not in_touched[v]:
            in_touched[v] = 1
            touched[n_touch] = v
            n_touch += 1
        delta[v] -= d_out
        for _ in range(d_diff):
            dst = dirs[np.random.randint(0, ndir)]
            if not in_touched[dst]:
                in_touched[dst] = 1
                touched[n_touch] = dst
                n_touch += 1
            delta[dst] += 1
        if d_bind > 0:
            if ls >= 0:
                d_lin[ls] += d_bind
            else:
                d_mm_e[ms] -= d_bind
                d_mm_i[ms] += d_bind
    n_active = w

    # reverse / site-local channels
    for s in range(n_lin):
        nc = lin_c[s]
        if nc == 0:
            continue
        d_u = _poisson(lin_km[s] * nc * h)
        if policy == POLICY_LOCAL and d_u > nc:
            d_u = nc
        if d_u:
            d_lin[s] -= d_u
            v = lin_voxel[s]
            if not in_touched[v]:
                in_touched[v] = 1
                touched[n_touch] = v
                n_touch += 1
            delta[v] += d_u
    for s in range(n_mm):
        ni = mm_i[s]
        if ni > 0:
            lam_i = (mm_g1m[s] + mm_g2[s]) * ni * h
            d_i = _poisson(lam_i)
            if policy == POLICY_LOCAL and d_i > ni:
                d_i = ni
            if d_i:
                d_back = np.random.binomial(d_i, mm_g1m[s] / (mm_g1m[s] + mm_g2[s]))
                d_fwd = d_i - d_back
                d_mm_i[s] -= d_i
                d_mm_e[s] += d_i
                d_mm_c[s] += d_fwd
                if d_back:
                    v = mm_voxel[s]
                    if not in_touched[v]:
                        in_touched[v] = 1
                        touched[n_touch] = v
                        n_touch += 1
                    delta[v] += d_back
        ncv = mm_c[s]
        if ncv > 0:
            d_r = _poisson(mm_g3[s] * ncv * h)
            if policy == POLICY_LOCAL and d_r > ncv:
                d_r = ncv
            if d_r:
                d_mm_c[s] -= d_r
                v = mm_voxel[s]
                if not in_touched[v]:
                    in_touched[v] = 1
                    touched[n_touch] = v
                    n_touch += 1
                delta[v] += d_r

    # validity check over staged increments
    ok = True
    for r in range(n_touch):
        if counts[touched[r]] + delta[touched[r]] < 0:
            ok = False
            break
    if ok:
        for s in range(n_lin):
            if lin_c[s] + d_lin[s] < 0:
                ok = False
                break
    if ok:
        for s in range(n_mm):
            if (mm_e[s] + d_mm_e[s] < 0 or mm_i[s] + d_mm_i[s] < 0
                    or mm_c[s] + d_mm_c[s] < 0):
                ok = False
                break

    if ok:
        for r in range(n_touch):
            v = touched[r]
            counts[v] += delta[v]
            delta[v] = 0
            in_touched[v] = 0
            if counts[v] > 0 and not in_active[v]:
                active[n_active] = v
                in_active[v] = 1
                n_active += 1
        for s in range(n_lin):
            lin_c[s] += d_lin[s]
            d_lin[s] = 0
        for s in range(n_mm):
            mm_e[s] += d_mm_e[s]
            mm_i[s] += d_mm_i[s]
            mm_c[s] += d_mm_c[s]
            d_mm_e[s] = 0
            d_mm_i[s] = 0
            d_mm_c[s] = 0
    else:
        for r in range(n_touch):
            delta[touched[r]] = 0
            in_touched[touched[r]] = 0
        for s in range(n_lin):
            d_lin[s] = 0
        for s in range(n_mm):
            d_mm_e[s] = 0
            d_mm_i[s] = 0
            d_mm_c[s] = 0
    return ok, n_active


@njit(cache=True)
def _advance(duration, tau, counts, nx, ny, nz, dd, deg,
             voxel_lin, lin_voxel, lin_f, lin_km, lin_c,
             voxel_mm, mm_voxel, mm_g1p, mm_g1m, mm_g2, mm_g3, mm_e, mm_i, mm_c,
             active, n_active, in_active, delta, touched, in_touched,
             d_lin, d_mm_e, d_mm_i, d_mm_c, dirs, policy, max_halvings):
    """Advance the state by `duration` in leaps of at most tau.

    On a rejected leap (a count would go negative) the current leap size
    halves, up to max_halvings below tau; after a run of successes it
    grows back.  Returns (status, n_active).
    """
    remaining = duration
    cur = tau if tau < duration else duration
    depth = 0
    tiny = 1e-12 * tau
    while remaining > tiny:
        h = cur if cur < remaining else remaining
        ok, n_active = _leap_once(
            h, counts, nx, ny, nz, dd, deg,
            voxel_lin, lin_voxel, lin_f, lin_km, lin_c,
            voxel_mm, mm_voxel, mm_g1p, mm_g1m, mm_g2, mm_g3, mm_e, mm_i, mm_c,
            active, n_active, in_active, delta, touched, in_touched,
            d_lin, d_mm_e, d_mm_i, d_mm_c, dirs, policy)
        if ok:
            remaining -= h
            if depth > 0:
                cur = cur * 2.0
                depth -= 1
                if cur > tau:
                    cur = tau
        else:
            depth += 1
            if depth > max_halvings:
                return STATUS_STEP_LIMIT, n_active
            cur = cur * 0.5
    return STATUS_OK, n_active


@njit(cache=True)
def _run_tau(seed, tau, horizon, counts0, nx, ny, nz, dd, deg,
             voxel_lin, lin_voxel, lin_f, lin_km, lin_rx,
             voxel_mm, mm_voxel, mm_g1p, mm_g1m, mm_g2, mm_g3, mm_e0, mm_rx,
             arr_time, arr_mean, arr_poisson, arr_ptr, arr_voxel,
             grid, n_receivers, policy, max_halvings,
             lin_c0, mm_i0, mm_c0):
    """Full tau-leap trajectory; returns per-grid receiver outputs.

    Outputs: (status, rx_complex[n_grid, n_receivers], free_total[n_grid],
    bound_total[n_grid], final counts).
    """
    np.random.seed(seed)
    n_vox = nx * ny * nz
    counts = counts0.copy()
    lin_c = lin_c0.copy()
    mm_e = mm_e0.copy()
    mm_i = mm_i0.copy()
    mm_c = mm_c0.copy()
    mm_e = mm_e - mm_i  # e0 holds the total enzyme pool per site

    delta = np.zeros(n_vox, np.int64)
    touched = np.empty(n_vox, np.int64)
    in_touched = np.zeros(n_vox, np.uint8)
    active = np.empty(n_vox, np.int64)
    in_active = np.zeros(n_vox, np.uint8)
    n_active = 0
    for v in range(n_vox):
        if counts[v] > 0:
            active[n_active] = v
            in_active[v] = 1
            n_active += 1
    d_lin = np.zeros(lin_voxel.size, np.int64)
    d_mm_e = np.zeros(mm_voxel.size, np.int64)
    d_mm_i = np.zeros(mm_voxel.size, np.int64)
    d_mm_c = np.zeros(mm_voxel.size, np.int64)
    dirs = np.empty(6, np.int64)

    n_grid = grid.size
    rx = np.zeros((n_grid, n_receivers), np.int64)
    free_tot = np.zeros(n_grid, np.int64)
    bound_tot = np.zeros(n_grid, np.int64)

    t = 0.0
    gi = 0
    ai = 0
    eps = 1e-9 * tau
    while True:
        # next boundary: arrival, grid point, or horizon
        t_stop = horizon
        if ai < arr_time.size and arr_time[ai] < t_stop:
            t_stop = arr_time[ai]
        if gi < n_grid and grid[gi] < t_stop:
            t_stop = grid[gi]
        if t_stop > t + eps:
            status, n_active = _advance(
                t_stop - t, tau, counts, nx, ny, nz, dd, deg,
                voxel_lin, lin_voxel, lin_f, lin_km, lin_c,
                voxel_mm, mm_voxel, mm_g1p, mm_g1m, mm_g2, mm_g3, mm_e, mm_i, mm_c,
                active, n_active, in_active, delta, touched, in_touched,
                d_lin, d_mm_e, d_mm_i, d_mm_c, dirs, policy, max_halvings)
            if status != STATUS_OK:
                return status, rx, free_tot, bound_tot, counts
        t = t_stop
        # arrivals exactly at t (state is right-continuous across the jump)
        while ai < arr_time.size and arr_time[ai] <= t + eps:
            total = arr_mean[ai]
            if arr_poisson[ai]:
                kk = np.random.poisson(total)
            else:
                kk = np.int64(total + 0.5)
            nv = arr_ptr[ai + 1] - arr_ptr[ai]
            base = kk // nv
            remn = kk - base * nv
            for q in range(nv):
                add = base + (1 if q < remn else 0)
                if add > 0:
                    v = arr_voxel[arr_ptr[ai] + q]
                    counts[v] += add
                    if not in_active[v]:
                        active[n_active] = v
                        in_active[v] = 1
                        n_active += 1
            ai += 1
        # record grid points at t
        while gi < n_grid and grid[gi] <= t + eps:
            b = np.int64(0)
            for s in range(lin_c.size):
                rx[gi, lin_rx[s]] += lin_c[s]
                b += lin_c[s]
            for s in range(mm_c.size):
                rx[gi, mm_rx[s]] += mm_c[s]
                b += mm_c[s] + mm_i[s]
            fr = np.int64(0)
            for v in range(n_vox):
                fr += counts[v]
            free_tot[gi] = fr
            bound_tot[gi] = b
            gi += 1
        if t >= horizon - eps and gi >= n_grid:
            break
    return STATUS_OK, rx, free_tot, bound_tot, counts


# ------------------------------------------------------- mean ODE stencil

@njit(cache=True, parallel=True)
def _mean_rhs(m, mc, nx, ny, nz, dd, voxel_lin, lin_voxel, lin_f, lin_km,
              dm, dmc):
    nyz = ny * nz
    for i in prange(nx):
        for j in range(ny):
            base = i * nyz + j * nz
            for k in range(nz):
                v = base + k
                x = m[v]
                acc = 0.0
                deg = 0
                if i + 1 < nx:
                    acc += m[v + nyz]
                    deg += 1
                if i - 1 >= 0:
                    acc += m[v - nyz]
                    deg += 1
                if j + 1 < ny:
                    acc += m[v + nz]
                    deg += 1
                if j - 1 >= 0:
                    acc += m[v - nz]
                    deg += 1
                if k + 1 < nz:
                    acc += m[v + 1]
                    deg += 1
                if k - 1 >= 0:
                    acc += m[v - 1]
                    deg += 1
                val = dd * (acc - deg * x)
                ls = voxel_lin[v]
                if ls >= 0:
                    val += lin_km[ls] * mc[ls] - lin_f[ls] * x
                dm[v] = val
    for s in prange(lin_voxel.size):
        dmc[s] = lin_f[s] * m[lin_voxel[s]] - lin_km[s] * mc[s]


@njit(cache=True, parallel=True)
def _axpy(out, a, x, b, y):
    for i in prange(out.size):
        out[i] = a * x[i] + b * y[i]


@njit(cache=True)
def _rk4_span(duration, dt_max, m, mc, nx, ny, nz, dd,
              voxel_lin, lin_voxel, lin_f, lin_km,
              k1, k2, k3, k4, tmp, kc1, kc2, kc3, kc4, tmpc):
    """Integrate the mean ODE over `duration` with fixed RK4 steps."""
    if duration <= 0.0:
        return
    nsteps = int(np.ceil(duration / dt_max))
    h = duration / nsteps
    for _ in range(nsteps):
        _mean_rhs(m, mc, nx, ny, nz, dd, voxel_lin, lin_voxel, lin_f, lin_km, k1, kc1)
        _axpy(tmp, 1.0, m, 0.5 * h, k1)
        _axpy(tmpc, 1.0, mc, 0.5 * h, kc1)
        _mean_rhs(tmp, tmpc, nx, ny, nz, dd, voxel_lin, lin_voxel, lin_f, lin_km, k2, kc2)
        _axpy(tmp, 1.0, m, 0.5 * h, k2)
        _axpy(tmpc, 1.0, mc, 0.5 * h, kc2)
        _mean_rhs(tmp, tmpc, nx, ny, nz, dd, voxel_lin, lin_voxel, lin_f, lin_km, k3, kc3)
        _axpy(tmp, 1.0, m, h, k3)
        _axpy(tmpc, 1.0, mc, h, kc3)
        _mean_rhs(tmp, tmpc, nx, ny, nz, dd, voxel_lin, lin_voxel, lin_f, lin_km, k4, kc4)
        for i in prange(m.size):
            m[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for s in range(mc.size):
            mc[s] += (h / 6.0) * (kc1[s] + 2.0 * kc2[s] + 2.0 * kc3[s] + kc4[s])


@njit(cache=True)
def _mean_rk4(horizon, dt_max, m, mc, nx, ny, nz, dd,
              voxel_lin, lin_voxel, lin_f, lin_km, lin_rx,
              arr_time, arr_add, arr_ptr, arr_voxel,
              grid, n_receivers):
    """Mean trajectory on a large lattice: RK4 between breakpoints with
    impulses applied exactly at arrival times.

    Returns (rx_mean[n_grid, n_rx], free_total[n_grid], min_running).
    """
    n = m.size
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    ns = mc.size
    kc1 = np.empty(ns)
    kc2 = np.empty(ns)
    kc3 = np.empty(ns)
    kc4 = np.empty(ns)
    tmpc = np.empty(ns)

    n_grid = grid.size
    rx = np.zeros((n_grid, n_receivers))
    free_tot = np.zeros(n_grid)
    min_running = 0.0

    t = 0.0
    gi = 0
    ai = 0
    eps = 1e-12 * max(horizon, 1.0)
    while True:
        t_stop = horizon
        if ai < arr_time.size and arr_time[ai] < t_stop:
            t_stop = arr_time[ai]
        if gi < n_grid and grid[gi] < t_stop:
            t_stop = grid[gi]
        if t_stop > t + eps:
            _rk4_span(t_stop - t, dt_max, m, mc, nx, ny, nz, dd,
                      voxel_lin, lin_voxel, lin_f, lin_km,
                      k1, k2, k3, k4, tmp, kc1, kc2, kc3, kc4, tmpc)
        t = t_stop
        while ai < arr_time.size and arr_time[ai] <= t + eps:
            for q in range(arr_ptr[ai], arr_ptr[ai + 1]):
                m[arr_voxel[q]] += arr_add[q]
            ai += 1
        while gi < n_grid and grid[gi] <= t + eps:
            for s in range(ns):
                rx[gi, lin_rx[s]] += mc[s]
            acc = 0.0
            mn = 0.0
            for v in range(n):
                acc += m[v]
                if m[v] < mn:
                    mn = m[v]
            for s in range(ns):
                if mc[s] < mn:
                    mn = mc[s]
            free_tot[gi] = acc
            if mn < min_running:
                min_running = mn
            gi += 1
        if t >= horizon - eps and gi >= n_grid:
            break
    return rx, free_tot, min_running


# ------------------------------------------------- lattice kernel helpers

@njit(cache=True, parallel=True)
def _dispersion_root_grid(cgrid, z):
    """Inside-unit-circle root of W^2 - (C + z) W + 1 = 0 over a real grid
    C of dispersion offsets.  Returns (a, a*a - 1, degenerate_flag)."""
    n = cgrid.size
    a = np.empty(n, np.complex128)
    denom = np.empty(n, np.complex128)
    bad = 0
    for i in prange(n):
        b = cgrid[i] + z
        rt = np.sqrt(b * b - 4.0)
        if (np.conj(b) * rt).real < 0.0:
            rt = -rt
        ai = 2.0 / (b + rt)
        a[i] = ai
        denom[i] = ai * ai - 1.0
        m = np.abs(ai)
        if m > 1.0 - 1e-12:
            bad += 1
    return a, denom, bad
