"""Mean and covariance dynamics of the lattice jump process.

With linear receiver kinetics every propensity is linear in the state,
so the mean obeys d<Q>/dt = A<Q> between arrivals and jumps by the
emitted counts at each arrival, while the covariance obeys
dS/dt = A S + S A^T + B(<Q>) with B the channel-weighted diffusion
matrix; deterministic arrivals shift the mean and leave S continuous
(random emission counts add their covariance at the arrival instant).

mean_ode propagates exactly through an eigendecomposition of the
(symmetrizable) generator for moderate dimensions and falls back to a
stencil RK4 integrator on large lattices; covariance_ode integrates the
Lyapunov system with fixed Runge-Kutta steps aligned to every arrival.
cme_exact enumerates the truncated state space of tiny systems and
integrates the full master equation as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from molchan import _kernels, netmodel, stochsim
from molchan.netmodel import NetworkSpec, NonlinearKinetics, require_valid


class DimensionCap(ValueError):
    pass


class IntegratorFailure(RuntimeError):
    pass


class TruncationMassExceeded(RuntimeError):
    pass


DENSE_CAP = 2500   # above this, mean_ode uses the lattice stencil path


@dataclass
class MomentSolution:
    grid: np.ndarray
    receiver_mean: np.ndarray            # (n_receivers, n_times)
    free_total: np.ndarray               # (n_times,)
    receiver_std: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None   # (n_times, n_obs, n_obs)
    obs_components: Optional[np.ndarray] = None
    mean_full: Optional[np.ndarray] = None    # (n_times, dim)
    min_component: float = 0.0
    meta: dict = field(default_factory=dict)

    def conserved_total(self) -> np.ndarray:
        return self.free_total + self.receiver_mean.sum(axis=0)


def build_generator(spec: NetworkSpec) -> sp.csr_matrix:
    """Assemble A = sum_j r_j w_j^T from the jump-channel catalogue.

    Requires linear kinetics; Michaelis-Menten receivers are rejected.
    """
    require_valid(spec)
    if spec.has_nonlinear:
        raise NonlinearKinetics("generator requires linear receiver kinetics")
    table = stochsim.build_channels(spec)
    dim = table.layout.dim
    rows, cols, vals = [], [], []
    for j in range(table.n_channels):
        for p in range(table.ptr[j], table.ptr[j + 1]):
            rows.append(table.tgt[p])
            cols.append(table.idx1[j])
            vals.append(table.dlt[p] * table.rate[j])
    a = sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))
    a.sum_duplicates()
    return a


def _timeline(arr_times: np.ndarray, grid: np.ndarray, horizon: float):
    """Merged breakpoints: list of (time, is_arrival_index_list, grid_index_list)."""
    eps = 1e-12 * max(horizon, 1.0)
    times = np.concatenate([arr_times, grid])
    uniq = np.unique(times)
    out = []
    for t in uniq:
        a_idx = np.nonzero(np.abs(arr_times - t) <= eps)[0]
        g_idx = np.nonzero(np.abs(grid - t) <= eps)[0]
        out.append((float(t), a_idx, g_idx))
    return out


def _arrival_vectors(spec: NetworkSpec, dim: int):
    """Mean impulse vector per arrival event (exact deterministic splits;
    Poisson counts use their mean split uniformly)."""
    times, means, pflag, ptr, voxels, adds = stochsim.merged_arrivals(spec)
    vecs = []
    for n in range(times.size):
        sl = slice(ptr[n], ptr[n + 1])
        vecs.append((voxels[sl], adds[sl]))
    return times, means, pflag, vecs


def _symmetrize_weights(lay: stochsim.StateLayout):
    """Detailed-balance weights if they exist: voxels 1, complex f/km."""
    if lay.n_lin and (np.any(lay.lin_f <= 0) or np.any(lay.lin_km <= 0)):
        return None
    d = np.ones(lay.dim)
    if lay.n_lin:
        d[lay.lin_comp] = np.sqrt(lay.lin_f / lay.lin_km)
    return d


def mean_ode(spec: NetworkSpec, grid: Sequence[float],
             initial: Optional[np.ndarray] = None,
             record_full: Optional[bool] = None) -> MomentSolution:
    """Mean state trajectory with arrivals applied exactly.

    Dimensions up to DENSE_CAP use an exact dense propagator (eigenbasis
    of the symmetrized generator, or fixed-step RK4 when a receiver rate
    vanishes and no symmetrization exists); larger lattices integrate with
    the stencil RK4 kernel at a stability-bounded step.
    """
    require_valid(spec)
    if spec.has_nonlinear:
        raise NonlinearKinetics("mean_ode requires linear receiver kinetics")
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0 or grid[-1] > spec.horizon:
        raise ValueError("grid must be ascending within [0, horizon]")
    lay = stochsim.build_layout(spec)
    if lay.dim > DENSE_CAP:
        return _mean_big(spec, lay, grid, initial)
    return _mean_dense(spec, lay, grid, initial, record_full)


def _receiver_sums(lay, site_values):
    n_rx_arr = lay.lin_receiver
    n_rx = int(n_rx_arr.max()) + 1 if n_rx_arr.size else 0
    out = np.zeros((n_rx, site_values.shape[-1]))
    for s in range(lay.n_lin):
        out[lay.lin_receiver[s]] += site_values[s]
    return out


def _mean_dense(spec, lay, grid, initial, record_full):
    a = build_generator(spec).toarray()
    dim = lay.dim
    x0 = np.zeros(dim) if initial is None else np.asarray(initial, dtype=float)
    times, _means, _pflag, vecs = _arrival_vectors(spec, dim)

    d = _symmetrize_weights(lay)
    if d is not None:
        asym = (a / d[:, None]) * d[None, :]
        asym = 0.5 * (asym + asym.T)
        lam, v = np.linalg.eigh(asym)

        def to_modal(x):
            return v.T @ (x / d)

        def from_modal(y):
            return d * (v @ y)
    else:
        # no detailed balance (some rate is zero): general eigensystem
        lam, vr = np.linalg.eig(a)
        vri = np.linalg.inv(vr)

        def to_modal(x):
            return vri @ x.astype(complex)

        def from_modal(y):
            return (vr @ y).real

    y = to_modal(x0)
    ygrid = np.empty((grid.size, y.size), dtype=y.dtype)
    t = 0.0
    for tb, a_idx, g_idx in _timeline(times, grid, spec.horizon):
        if tb > t:
            y = y * np.exp(lam * (tb - t))
            t = tb
        for ai in a_idx:
            vox, add = vecs[ai]
            p = np.zeros(dim)
            p[vox] = add
            y = y + to_modal(p)
        for gi in g_idx:
            ygrid[gi] = y

    xgrid = np.empty((grid.size, dim))
    for n in range(grid.size):
        xgrid[n] = from_modal(ygrid[n])
    site_vals = xgrid[:, lay.lin_comp].T if lay.n_lin else np.zeros((0, grid.size))
    keep_full = record_full if record_full is not None else True
    shell = netmodel.outer_shell_fraction(xgrid[-1, : lay.n_voxels], spec.lattice)
    return MomentSolution(
        grid=grid,
        receiver_mean=_receiver_sums(lay, site_vals) if lay.n_lin else np.zeros((len(spec.receivers), grid.size)),
        free_total=xgrid[:, : lay.n_voxels].sum(axis=1),
        mean_full=xgrid if keep_full else None,
        min_component=float(xgrid.min()) if xgrid.size else 0.0,
        meta={"engine": "dense-eig" if d is not None else "dense-geig",
              "shell_fraction": shell},
    )


def _mean_big(spec, lay, grid, initial):
    nx, ny, nz = lay.shape
    dd = netmodel.jump_rate(spec.lattice)
    voxel_lin = np.full(lay.n_voxels, -1, dtype=np.int64)
    voxel_lin[lay.lin_voxel] = np.arange(lay.n_lin)
    times, _means, _pflag, ptr_, vox_, adds_ = stochsim.merged_arrivals(spec)

    m = np.zeros(lay.n_voxels)
    mc = np.zeros(lay.n_lin)
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        m[:] = initial[: lay.n_voxels]
        mc[:] = initial[lay.lin_comp]

    lam_bound = 2.0 * (6.0 * dd + (lay.lin_f.max() if lay.n_lin else 0.0))
    lam_bound = max(lam_bound, 2.0 * (lay.lin_km.max() if lay.n_lin else 0.0))
    dt_max = 2.4 / lam_bound

    rx, free_tot, min_run = _kernels._mean_rk4(
        float(spec.horizon), dt_max, m, mc, nx, ny, nz, dd,
        voxel_lin, lay.lin_voxel, lay.lin_f, lay.lin_km, lay.lin_receiver,
        times, adds_, ptr_, vox_, grid, len(spec.receivers))
    if not np.all(np.isfinite(free_tot)):
        raise IntegratorFailure("stencil RK4 produced non-finite values")
    return MomentSolution(
        grid=grid,
        receiver_mean=np.asarray(rx).T.copy(),
        free_total=np.asarray(free_tot),
        min_component=float(min_run),
        meta={"engine": "stencil-rk4", "dt_max": dt_max,
              "shell_fraction": netmodel.outer_shell_fraction(m, spec.lattice)},
    )


def covariance_ode(spec: NetworkSpec, grid: Sequence[float],
                   initial: Optional[np.ndarray] = None,
                   observables: str = "receivers",
                   dim_cap: int = 2000,
                   dt_scale: float = 1.0) -> MomentSolution:
    """Joint mean and covariance trajectory (linear kinetics).

    Fixed-step RK4 on dS/dt = A S + S A^T + B(<Q>) with steps aligned to
    every arrival; S stays continuous across deterministic arrivals, and
    Poisson emission counts add var(K) at their arrival instants.  The
    state dimension is capped (covariance is dense).
    """
    require_valid(spec)
    if spec.has_nonlinear:
        raise NonlinearKinetics("covariance_ode requires linear receiver kinetics")
    grid = np.asarray(grid, dtype=float)
    lay = stochsim.build_layout(spec)
    dim = lay.dim
    if dim > dim_cap:
        raise DimensionCap(f"state dimension {dim} exceeds covariance cap {dim_cap}")

    a = build_generator(spec)
    a_csr = a.tocsr()
    table = stochsim.build_channels(spec)

    # B(m) = sum_j w_j(m) r_j r_j^T assembled from static patterns
    b_rows, b_cols, b_chan, b_coef = [], [], [], []
    for j in range(table.n_channels):
        sl = slice(table.ptr[j], table.ptr[j + 1])
        tgts = table.tgt[sl]
        dlts = table.dlt[sl]
        for t1, d1 in zip(tgts, dlts):
            for t2, d2 in zip(tgts, dlts):
                b_rows.append(t1)
                b_cols.append(t2)
                b_chan.append(j)
                b_coef.append(d1 * d2)
    b_rows = np.array(b_rows, dtype=np.int64)
    b_cols = np.array(b_cols, dtype=np.int64)
    b_chan = np.array(b_chan, dtype=np.int64)
    b_coef = np.array(b_coef, dtype=float)

    def bmat(m):
        w = table.rate * m[table.idx1]
        b = np.zeros((dim, dim))
        np.add.at(b, (b_rows, b_cols), b_coef * w[b_chan])
        return b

    def rhs(m, s_):
        p = a_csr @ s_
        return a_csr @ m, p + p.T + bmat(m)

    times, means, pflag, vecs = _arrival_vectors(spec, dim)
    m = np.zeros(dim) if initial is None else np.asarray(initial, dtype=float).copy()
    s_ = np.zeros((dim, dim))

    # stability-bounded step for the Lyapunov modes (pairs of generator
    # eigenvalues); dt_scale < 1 trades time for extra accuracy
    lam_bound = 2.0 * max(np.abs(a.diagonal()).max(), 1e-300)
    dt_max = dt_scale * 1.2 / lam_bound

    if observables == "receivers":
        obs = lay.lin_comp.copy()
    elif observables == "all":
        obs = np.arange(dim)
    else:
        obs = np.asarray(observables, dtype=np.int64)

    n_grid = grid.size
    cov_out = np.empty((n_grid, obs.size, obs.size))
    mean_out = np.empty((n_grid, dim))

    t = 0.0
    for tb, a_idx, g_idx in _timeline(times, grid, spec.horizon):
        span = tb - t
        if span > 1e-14:
            nsteps = int(np.ceil(span / dt_max))
            h = span / nsteps
            for _ in range(nsteps):
                k1m, k1s = rhs(m, s_)
                k2m, k2s = rhs(m + 0.5 * h * k1m, s_ + 0.5 * h * k1s)
                k3m, k3s = rhs(m + 0.5 * h * k2m, s_ + 0.5 * h * k2s)
                k4m, k4s = rhs(m + h * k3m, s_ + h * k3s)
                m = m + (h / 6) * (k1m + 2 * k2m + 2 * k3m + k4m)
                s_ = s_ + (h / 6) * (k1s + 2 * k2s + 2 * k3s + k4s)
                s_ = 0.5 * (s_ + s_.T)
        t = tb
        for ai in a_idx:
            vox, add = vecs[ai]
            m[vox] += add
            if pflag[ai]:
                # Poisson count: cov(K) = mean; uniform weights across voxels
                wv = np.zeros(dim)
                wv[vox] = add / add.sum() if add.sum() else 0.0
                s_ = s_ + means[ai] * np.outer(wv, wv)
        for gi in g_idx:
            mean_out[gi] = m
            cov_out[gi] = s_[np.ix_(obs, obs)]
    if not np.all(np.isfinite(mean_out)):
        raise IntegratorFailure("covariance RK4 produced non-finite values")

    site_vals = mean_out[:, lay.lin_comp].T if lay.n_lin else np.zeros((0, n_grid))
    rx_mean = _receiver_sums(lay, site_vals) if lay.n_lin else np.zeros((len(spec.receivers), n_grid))
    # per-receiver std of the summed site outputs
    n_rx = len(spec.receivers)
    rx_std = np.zeros((n_rx, n_grid))
    if observables == "receivers" and lay.n_lin:
        for r in range(n_rx):
            sel = np.nonzero(lay.lin_receiver == r)[0]
            rx_std[r] = np.sqrt(np.maximum(
                cov_out[:, sel[:, None], sel[None, :]].sum(axis=(1, 2)), 0.0))
    return MomentSolution(
        grid=grid,
        receiver_mean=rx_mean,
        free_total=mean_out[:, : lay.n_voxels].sum(axis=1),
        receiver_std=rx_std if observables == "receivers" else None,
        covariance=cov_out,
        obs_components=obs,
        mean_full=mean_out,
        min_component=float(mean_out.min()),
        meta={"engine": "cov-rk4", "dt_max": dt_max},
    )


# ------------------------------------------------------------- exact CME

@dataclass
class CmeSolution:
    grid: np.ndarray
    receiver_mean: np.ndarray
    receiver_var: np.ndarray
    free_total: np.ndarray
    norm_defect: float
    boundary_mass: float
    states: np.ndarray                      # (n_states, dim)
    probabilities: np.ndarray               # (n_times, n_states)
    layout: stochsim.StateLayout

    def receiver_marginal(self, receiver: int, gi: int):
        """Marginal pmf of one receiver's complex count at grid index gi."""
        sel = np.nonzero(self.layout.lin_receiver == receiver)[0]
        comps = self.layout.lin_comp[sel]
        vals = self.states[:, comps].sum(axis=1)
        nmax = int(vals.max())
        pmf = np.zeros(nmax + 1)
        np.add.at(pmf, vals, self.probabilities[gi])
        return pmf


def _enumerate_states(dim: int, cap: int) -> np.ndarray:
    """All non-negative integer vectors of length dim with sum <= cap."""
    if dim == 1:
        return np.arange(cap + 1, dtype=np.int64)[:, None]
    rows = []
    for first in range(cap + 1):
        rest = _enumerate_states(dim - 1, cap - first)
        block = np.empty((rest.shape[0], dim), dtype=np.int64)
        block[:, 0] = first
        block[:, 1:] = rest
        rows.append(block)
    return np.vstack(rows)


def cme_exact(spec: NetworkSpec, grid: Sequence[float],
              total_cap: Optional[int] = None,
              initial: Optional[np.ndarray] = None,
              max_states: int = 1_000_000) -> CmeSolution:
    """Integrate the full master equation on a truncated state space.

    The state space is every configuration with total molecule count at
    most total_cap (default: everything ever emitted plus the initial
    content, which closes the space exactly on a reflective lattice).
    Probability landing outside the truncation at an arrival is tracked
    and reported; more than 1e-8 raises TruncationMassExceeded.
    """
    require_valid(spec)
    if spec.has_nonlinear:
        raise NonlinearKinetics("cme_exact requires linear receiver kinetics")
    grid = np.asarray(grid, dtype=float)
    table = stochsim.build_channels(spec)
    lay = table.layout
    dim = lay.dim

    q0 = lay.zero_state() if initial is None else np.asarray(initial, dtype=np.int64)
    if total_cap is None:
        total_cap = int(q0.sum() + netmodel.total_emitted_by(spec, spec.horizon))
    states = _enumerate_states(dim, int(total_cap))
    n_states = states.shape[0]
    if n_states > max_states:
        raise DimensionCap(f"{n_states} states exceed max_states={max_states}")
    index = {tuple(s): i for i, s in enumerate(states)}

    rows, cols, vals = [], [], []
    for j in range(table.n_channels):
        sl = slice(table.ptr[j], table.ptr[j + 1])
        tgts, dlts = table.tgt[sl], table.dlt[sl]
        w = table.rate[j] * states[:, table.idx1[j]].astype(float)
        live = np.nonzero(w > 0)[0]
        for i in live:
            dest = states[i].copy()
            dest[tgts] += dlts
            k = index.get(tuple(dest))
            if k is None:
                continue  # conservation-closed spaces never hit this
            rows.append(k)
            cols.append(i)
            vals.append(w[i])
            rows.append(i)
            cols.append(i)
            vals.append(-w[i])
    gen = sp.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states))

    times, means, pflag, vecs = _arrival_vectors(spec, dim)
    if np.any(pflag):
        raise ValueError("cme_exact supports deterministic emission counts only")

    # arrival shift permutations
    shifts = []
    for vox, add in vecs:
        delta = np.zeros(dim, dtype=np.int64)
        delta[vox] = np.asarray(add + 0.5, dtype=np.int64)
        perm = np.full(n_states, -1, dtype=np.int64)
        for i in range(n_states):
            k = index.get(tuple(states[i] + delta))
            if k is not None:
                perm[i] = k
        shifts.append(perm)

    from scipy.sparse.linalg import expm_multiply

    p = np.zeros(n_states)
    p[index[tuple(q0)]] = 1.0
    probs = np.empty((grid.size, n_states))
    lost = 0.0
    t = 0.0
    arr_i = 0
    for tb, a_idx, g_idx in _timeline(times, grid, spec.horizon):
        if tb > t:
            p = expm_multiply(gen * (tb - t), p)
            t = tb
        for ai in a_idx:
            perm = shifts[ai]
            pn = np.zeros(n_states)
            ok = perm >= 0
            np.add.at(pn, perm[ok], p[ok])
            lost += float(p[~ok].sum())
            p = pn
            arr_i += 1
        for gi in g_idx:
            probs[gi] = p
    if lost > 1e-8:
        raise TruncationMassExceeded(f"truncation lost probability {lost:.3e}")

    norm_defect = float(np.max(np.abs(probs.sum(axis=1) + lost - 1.0)))
    n_rx = len(spec.receivers)
    rx_mean = np.zeros((n_rx, grid.size))
    rx_var = np.zeros((n_rx, grid.size))
    for r in range(n_rx):
        sel = np.nonzero(lay.lin_receiver == r)[0]
        vals_r = states[:, lay.lin_comp[sel]].sum(axis=1).astype(float)
        rx_mean[r] = probs @ vals_r
        rx_var[r] = probs @ vals_r**2 - rx_mean[r] ** 2
    free_vals = states[:, : lay.n_voxels].sum(axis=1).astype(float)
    return CmeSolution(
        grid=grid, receiver_mean=rx_mean, receiver_var=rx_var,
        free_total=probs @ free_vals, norm_defect=norm_defect,
        boundary_mass=lost, states=states, probabilities=probs, layout=lay)
