"""Frequency-domain solution of the mean receiver outputs.

Two interchangeable diffusion kernels evaluated at a complex Laplace
variable s (s = i*omega recovers the Fourier convention):

* continuum kernel  phi(v, s) = exp(-sqrt(s/D)*|v|) / (4*pi*D*|v|),
  the transform of the free-space diffusion Green's function; undefined
  at zero displacement.
* lattice kernel    psi(xi, s), the Green's function of the discrete
  diffusion operator, computed as a double contour integral over two
  z-transform variables with the third closed analytically through the
  root of a per-node quadratic; finite at zero offset, which is what
  makes the receiver self-coupling term well defined.

Receiver kinetics enter through rho(s) = k_plus / (s + k_minus).  The
mean receiver outputs solve (I + s*Rho*Psi0) C = Rho*Psi*K, a negative
feedback loop in which bound molecules deplete the local concentration.
Dropping the feedback gives the decoupled approximation C = Rho*Psi*K.

The dispersion quadratic uses the per-axis factor (W + 1/W - 2) obtained
by z-transforming the spatial difference equation; an alternative
"printed" form with per-axis (W - 1/W)**2 is kept behind a flag for
comparison and is not used by any solver (it disagrees with the
difference equation and with the moment oracle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from molchan import netmodel
from molchan.invlaplace import InversionRequest, invert
from molchan.netmodel import NetworkSpec, require_valid


class ZeroDisplacement(ValueError):
    """Continuum self-kernel requested at zero displacement."""


class DegenerateRoots(ArithmeticError):
    """Both dispersion roots sit on the unit circle (needs Re(s) <= 0)."""


class QuadratureNotConverged(ArithmeticError):
    """Doubling the node count moved the contour integral too much."""


class PoleHit(ZeroDivisionError):
    """Receiver kinetics evaluated exactly at s = -k_minus."""


class SingularSystem(np.linalg.LinAlgError):
    pass


from molchan.netmodel import NonlinearKinetics  # noqa: E402  (shared error type)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel selection for the transfer assembly.

    kind: "lattice" uses psi everywhere; "continuum" uses phi for all
    nonzero separations with the receiver self-term chosen by
    phi0_strategy ("lattice_psi0" substitutes psi(0, s); "cutoff" uses
    the constant 1/(2*pi*D*delta)).  quad_points is the trapezoid node
    count per contour axis.
    """

    kind: str = "lattice"
    phi0_strategy: str = "lattice_psi0"
    quad_points: int = 256
    dispersion: str = "difference"  # or "printed" (comparison only)

    def __post_init__(self):
        if self.kind not in ("lattice", "continuum"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.phi0_strategy not in ("lattice_psi0", "cutoff"):
            raise ValueError(f"unknown phi0 strategy {self.phi0_strategy!r}")
        if self.kind == "lattice" and self.phi0_strategy == "cutoff":
            raise ValueError("cutoff self-term is only valid with the continuum kernel")
        if self.quad_points < 16 or self.quad_points % 2:
            raise ValueError("quad_points must be an even integer >= 16")
        if self.dispersion not in ("difference", "printed"):
            raise ValueError(f"unknown dispersion form {self.dispersion!r}")


def phi_kernel(displacement, s, diffusion: float):
    """Continuum diffusion kernel at a physical displacement vector."""
    v = np.asarray(displacement, dtype=float)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise ZeroDisplacement("phi is undefined at zero displacement")
    s = np.asarray(s, dtype=complex)
    return np.exp(-np.sqrt(s / diffusion) * r) / (4.0 * np.pi * diffusion * r)


def _quadratic_b(wx, wy, s, diffusion, delta, form):
    if form == "difference":
        # z-transform of the difference operator: per-axis W + 1/W - 2
        return (2.0 + (2.0 - wx - 1.0 / wx) + (2.0 - wy - 1.0 / wy)
                + s * delta * delta / diffusion)
    # form printed in the source derivation; kept for comparison only
    return (2.0 + (wx - 1.0 / wx) ** 2 + (wy - 1.0 / wy) ** 2
            + s * delta * delta / diffusion)


def _root_inside(b):
    """Root of W^2 - b W + 1 = 0 with |W| < 1 (the two roots multiply to 1)."""
    b = np.asarray(b, dtype=complex)
    rt = np.sqrt(b * b - 4.0)
    rt = np.where((np.conj(b) * rt).real < 0.0, -rt, rt)
    return 2.0 / (b + rt)


def lattice_dispersion_root(wx, wy, s, diffusion: float, delta: float,
                            form: str = "difference"):
    """Solve the per-node dispersion quadratic; return the root inside
    the unit circle.  The product of the two roots is exactly 1."""
    b = _quadratic_b(np.asarray(wx, complex), np.asarray(wy, complex),
                     complex(s), diffusion, delta, form)
    w = _root_inside(b)
    if np.any(np.abs(np.abs(w) - 1.0) < 1e-12):
        raise DegenerateRoots("dispersion roots on the unit circle; need Re(s) > 0")
    return w


_DISPERSION_GRID_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _dispersion_offsets(m: int, form: str) -> np.ndarray:
    """Real part of the dispersion-quadratic coefficient on the angle grid
    (everything except the s-dependent term), flattened to m*m."""
    key = (m, form)
    grid = _DISPERSION_GRID_CACHE.get(key)
    if grid is None:
        theta = 2.0 * np.pi * np.arange(m) / m
        if form == "difference":
            per_axis = 2.0 - 2.0 * np.cos(theta)
            grid = 2.0 + per_axis[:, None] + per_axis[None, :]
        else:
            w = np.exp(1j * theta)
            sq = (w - 1.0 / w) ** 2
            grid = (2.0 + sq[:, None] + sq[None, :]).real
        grid = np.ascontiguousarray(grid.ravel())
        _DISPERSION_GRID_CACHE[key] = grid
    return grid


class _LatticeKernelBatch:
    """psi values for many integer offsets at one s, sharing the angular grid.

    The two contour variables are parameterized on the unit circle and the
    root of the per-node dispersion quadratic is computed once; each
    distinct |k| (third offset component) costs one FFT, after which every
    (i, j) offset is a table lookup.
    """

    def __init__(self, s, diffusion, delta, m, form="difference"):
        from molchan import _kernels
        self.s = complex(s)
        self.diffusion = diffusion
        self.delta = delta
        self.m = m
        cgrid = _dispersion_offsets(m, form)
        z = self.s * delta * delta / diffusion
        a, denom, bad = _kernels._dispersion_root_grid(cgrid, z)
        if bad:
            raise DegenerateRoots("dispersion roots on the unit circle; need Re(s) > 0")
        self._a = a.reshape(m, m)
        self._denom = denom.reshape(m, m)
        self._ffts: dict[int, np.ndarray] = {}

    def _table(self, abs_k: int) -> np.ndarray:
        tab = self._ffts.get(abs_k)
        if tab is None:
            g = self._a ** (abs_k + 1) / self._denom
            # fft sign convention: mean(G * exp(+i(i*tx + j*ty))) lives at
            # index (-i mod m, -j mod m); the integrand is even in both
            # angles so the sign of the offset is immaterial.
            tab = np.fft.fft2(g) / (self.m * self.m)
            self._ffts[abs_k] = tab
        return tab

    def value(self, offset) -> complex:
        i, j, k = (int(c) for c in offset)
        tab = self._table(abs(k))
        return -tab[(-i) % self.m, (-j) % self.m] / (self.diffusion * self.delta)

    def values(self, offsets: np.ndarray) -> np.ndarray:
        """Vectorized lookup for an (n, 3) integer offset array."""
        offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
        out = np.empty(offsets.shape[0], dtype=complex)
        scale = -1.0 / (self.diffusion * self.delta)
        for abs_k in np.unique(np.abs(offsets[:, 2])):
            tab = self._table(int(abs_k))
            sel = np.nonzero(np.abs(offsets[:, 2]) == abs_k)[0]
            out[sel] = scale * tab[(-offsets[sel, 0]) % self.m,
                                   (-offsets[sel, 1]) % self.m]
        return out


def psi_kernel(offset, s, diffusion: float, delta: float, m: int = 256,
               form: str = "difference", verify: bool = False) -> complex:
    """Lattice diffusion kernel at an integer voxel offset.

    Evaluates the double contour integral by tensor-product trapezoid
    quadrature with m nodes per axis (spectrally accurate for periodic
    integrands).  Finite at offset (0,0,0).  With verify=True the node
    count is doubled and QuadratureNotConverged is raised if the value
    moves by more than 1e-8 relative.
    """
    if m < 16 or m % 2:
        raise ValueError("m must be an even integer >= 16")
    val = _LatticeKernelBatch(s, diffusion, delta, m, form).value(offset)
    if verify:
        val2 = _LatticeKernelBatch(s, diffusion, delta, 2 * m, form).value(offset)
        denom = max(abs(val2), 1e-300)
        if abs(val - val2) / denom > 1e-8:
            raise QuadratureNotConverged(
                f"psi changed by {abs(val - val2) / denom:.2e} under node doubling")
        val = val2
    return val


def rho_kernel(s, k_plus: float, k_minus: float):
    """Receiver kinetics transfer function k_plus / (s + k_minus)."""
    s = np.asarray(s, dtype=complex)
    if np.any(s + k_minus == 0):
        raise PoleHit(f"rho evaluated at its pole s = {-k_minus}")
    return k_plus / (s + k_minus)


def input_transform(events: Sequence[tuple[float, int]], s):
    """Transform of an impulse train: sum_b k_b * exp(-s*t_b)."""
    s = np.asarray(s, dtype=complex)
    if len(events) == 0:
        return np.zeros(s.shape, dtype=complex) if s.shape else 0j
    t = np.array([e[0] for e in events], dtype=float)
    k = np.array([e[1] for e in events], dtype=float)
    return (k * np.exp(-np.multiply.outer(s, t))).sum(axis=-1)


# --------------------------------------------------------------- assembly

@dataclass
class TransferEvaluation:
    """One evaluation of the multivariate transfer solve at complex s.

    Matrices are indexed by receiver *sites* (one per receiver voxel) and
    transmitter devices; device_outputs sums sites per receiver device.
    """

    s: complex
    psi: np.ndarray          # (n_sites, n_tx)
    psi0: np.ndarray         # (n_sites, n_sites)
    rho: np.ndarray          # (n_sites,)
    k: np.ndarray            # (n_tx,)
    c_sites: np.ndarray      # (n_sites,)
    site_receiver: np.ndarray  # site -> receiver-device index

    @property
    def device_outputs(self) -> np.ndarray:
        n_dev = int(self.site_receiver.max()) + 1 if self.site_receiver.size else 0
        out = np.zeros(n_dev, dtype=complex)
        np.add.at(out, self.site_receiver, self.c_sites)
        return out

    def residual(self) -> float:
        lhs = self.c_sites + self.s * self.rho * (self.psi0 @ self.c_sites)
        rhs = self.rho * (self.psi @ self.k)
        scale = max(np.max(np.abs(rhs)), 1e-300)
        return float(np.max(np.abs(lhs - rhs)) / scale)


class _Assembler:
    """Caches the network geometry for repeated per-s transfer solves."""

    def __init__(self, spec: NetworkSpec, config: KernelConfig):
        require_valid(spec)
        if spec.has_nonlinear:
            raise NonlinearKinetics("transfer solve requires linear receivers")
        self.spec = spec
        self.config = config
        self.delta = spec.lattice.delta
        self.diffusion = spec.lattice.diffusion

        sites = []
        for ri, r in enumerate(spec.receivers):
            for v in r.voxels:
                sites.append((ri, v, r.k_plus, r.k_minus))
        self.site_receiver = np.array([srec[0] for srec in sites], dtype=np.int64)
        self.site_voxel = [srec[1] for srec in sites]
        self.site_kp = np.array([srec[2] for srec in sites], dtype=float)
        self.site_km = np.array([srec[3] for srec in sites], dtype=float)
        self.n_sites = len(sites)
        self.n_tx = len(spec.transmitters)
        # uniform fractional source split across each transmitter's voxels
        self.tx_voxels = [t.voxels for t in spec.transmitters]
        self.tx_events = [netmodel.expand_schedule(t.schedule) for t in spec.transmitters]

        sv = np.array(self.site_voxel, dtype=np.int64).reshape(-1, 3)
        # receiver-receiver offsets, flattened (n_sites^2, 3)
        self._rr = (sv[:, None, :] - sv[None, :, :]).reshape(-1, 3)
        # receiver-transmitter-voxel offsets, concatenated with group sizes
        rt_offs = []
        self._rt_group = []  # (site, tx, start, stop)
        pos = 0
        for i in range(self.n_sites):
            for a, tv in enumerate(self.tx_voxels):
                for v in tv:
                    rt_offs.append((sv[i, 0] - v[0], sv[i, 1] - v[1], sv[i, 2] - v[2]))
                self._rt_group.append((i, a, pos, pos + len(tv)))
                pos += len(tv)
        self._rt = np.array(rt_offs, dtype=np.int64).reshape(-1, 3)

    def _lattice_batch(self, s):
        if getattr(self, "_batch_s", None) != complex(s):
            # the integrand's boundary layer has width ~sqrt(|s| delta^2 / D);
            # node counts beyond ~20/sqrt(z) only add roundoff (verified by
            # the node-doubling scan), so large |s| can use coarser grids
            z = abs(complex(s)) * self.delta ** 2 / self.diffusion
            m = self.config.quad_points
            if z > 0:
                need = 20.0 / math.sqrt(z)
                m_eff = 32
                while m_eff < need and m_eff < m:
                    m_eff *= 2
                m = min(m, m_eff)
            self._batch = _LatticeKernelBatch(complex(s), self.diffusion, self.delta,
                                              m, self.config.dispersion)
            self._batch_s = complex(s)
        return self._batch

    def _kernel_values(self, s, offsets):
        """Kernel at integer voxel offsets per the config (vectorized)."""
        cfg = self.config
        if cfg.kind == "lattice":
            return self._lattice_batch(s).values(offsets)
        out = np.empty(offsets.shape[0], dtype=complex)
        disp = offsets * self.delta
        r = np.linalg.norm(disp, axis=1)
        zero = r == 0
        if np.any(zero):
            if cfg.phi0_strategy == "lattice_psi0":
                self_val = self._lattice_batch(s).value((0, 0, 0))
            else:
                self_val = 1.0 / (2.0 * np.pi * self.diffusion * self.delta) + 0j
            out[zero] = self_val
        nz = ~zero
        out[nz] = np.exp(-np.sqrt(complex(s) / self.diffusion) * r[nz]) / (
            4.0 * np.pi * self.diffusion * r[nz])
        return out

    def matrices(self, s):
        psi0 = self._kernel_values(s, self._rr).reshape(self.n_sites, self.n_sites)
        rt_vals = self._kernel_values(s, self._rt)
        psi = np.empty((self.n_sites, self.n_tx), dtype=complex)
        for i, a, lo, hi in self._rt_group:
            psi[i, a] = rt_vals[lo:hi].mean()
        if np.any(complex(s) + self.site_km == 0):
            raise PoleHit(f"rho evaluated at its pole s = {s}")
        rho = self.site_kp / (complex(s) + self.site_km)
        return psi, psi0, rho

    def solve(self, s, k_vector=None, coupled=True) -> TransferEvaluation:
        s = complex(s)
        psi, psi0, rho = self.matrices(s)
        if k_vector is None:
            k_vector = np.array([input_transform(ev, s) for ev in self.tx_events])
        k_vector = np.asarray(k_vector, dtype=complex)
        rhs = rho * (psi @ k_vector)
        if coupled:
            a = np.eye(self.n_sites, dtype=complex) + s * (rho[:, None] * psi0)
            try:
                c = np.linalg.solve(a, rhs)
            except np.linalg.LinAlgError as exc:
                raise SingularSystem(str(exc)) from None
        else:
            c = rhs
        return TransferEvaluation(s=s, psi=psi, psi0=psi0, rho=rho, k=k_vector,
                                  c_sites=c, site_receiver=self.site_receiver)


def assemble_transfer(spec: NetworkSpec, config: KernelConfig, s,
                      k_vector=None) -> TransferEvaluation:
    """Build the kernel matrices at s and solve the coupled system
    (I + s*Rho*Psi0) C = Rho*Psi*K for the receiver-site outputs."""
    return _Assembler(spec, config).solve(s, k_vector, coupled=True)


def decoupled_transfer(spec: NetworkSpec, config: KernelConfig, s,
                       k_vector=None) -> TransferEvaluation:
    """Feedback-free approximation C = Rho*Psi*K (local depletion ignored)."""
    return _Assembler(spec, config).solve(s, k_vector, coupled=False)


# ------------------------------------------------------------- time series

def _offset_grid(u_min: float, u_max: float, per_decade: int) -> np.ndarray:
    lo = math.log10(u_min)
    hi = math.log10(u_max)
    n = max(8, int(math.ceil((hi - lo) * per_decade)) + 1)
    return np.logspace(lo, hi, n)


def receiver_output_series(spec: NetworkSpec, config: KernelConfig,
                           grid: Sequence[float], model: str = "coupled",
                           degree: int = 24, rel_tol: float = 1e-4,
                           per_decade: int = 48) -> np.ndarray:
    """Mean complex-count time series per receiver device on the grid.

    The emission input is an impulse train, so the output superposes the
    unit-emission response g at every (grid time - event time) offset.
    g is obtained by numerically inverting the transfer solve on a dense
    logarithmic offset grid (each offset gets its own inversion contour,
    keeping the contour matched to the elapsed time) and interpolated
    between nodes; offsets at or before an event contribute exactly zero.

    Returns an array of shape (n_receivers, len(grid)).
    """
    if model not in ("coupled", "decoupled"):
        raise ValueError(f"unknown model {model!r}")
    grid = np.asarray(grid, dtype=float)
    asm = _Assembler(spec, config)
    n_dev = len(spec.receivers)
    out = np.zeros((n_dev, grid.size), dtype=float)

    for a in range(asm.n_tx):
        events = asm.tx_events[a]
        if not events:
            continue
        times = np.array([e[0] for e in events])
        counts = np.array([e[1] for e in events], dtype=float)
        offsets = grid[None, :] - times[:, None]          # (n_events, n_grid)
        pos = offsets > 0
        if not np.any(pos):
            continue
        u_max = float(offsets[pos].max()) * (1.0 + 1e-9)
        u_min = float(offsets[pos].min()) * (1.0 - 1e-9)
        nodes = _offset_grid(u_min, u_max, per_decade)

        unit_k = np.zeros(asm.n_tx)
        unit_k[a] = 1.0

        def evaluator(svals, _a=a, _unit=unit_k):
            rows = np.empty((svals.size, n_dev), dtype=complex)
            for i, s in enumerate(svals):
                ev = asm.solve(s, k_vector=_unit, coupled=(model == "coupled"))
                rows[i] = ev.device_outputs
            return rows

        res = invert(InversionRequest(evaluator, nodes, rel_tol=rel_tol, degree=degree))
        g = res.values                                     # (n_nodes, n_dev)

        from scipy.interpolate import PchipInterpolator
        logn = np.log(nodes)
        logu = np.log(np.clip(offsets[pos], nodes[0], nodes[-1]))
        for d in range(n_dev):
            gi = PchipInterpolator(logn, g[:, d], extrapolate=False)(logu)
            contrib = np.zeros_like(offsets)
            contrib[pos] = np.nan_to_num(gi)
            out[d] += counts @ contrib
    return out
