"""Network definition: lattice geometry, emission schedules, devices.

Every solver in the package consumes the same validated :class:`NetworkSpec`.
The medium is an isotropic cubic voxel lattice with reflective boundaries;
molecules hop between face-adjacent voxels at rate ``diffusion / delta**2``
per molecule.  Transmitters inject timed bursts of molecules into their
voxels; receivers convert free molecules to bound complexes with either
linear or enzyme-mediated (Michaelis-Menten) kinetics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

Voxel = tuple[int, int, int]
Extent = tuple[int, int, int]

# violation codes used by validate()
OVERLAPPING_VOXELS = "OverlappingVoxels"
NON_POSITIVE_PARAMETER = "NonPositiveParameter"
EVENT_BEYOND_HORIZON = "EventBeyondHorizon"
INDEX_OUT_OF_LATTICE = "IndexOutOfLattice"
NON_MONOTONE_TIMES = "NonMonotoneTimes"
EMPTY_DEVICE = "EmptyDevice"
DUPLICATE_VOXELS = "DuplicateVoxels"
BAD_COUNT_MODEL = "BadCountModel"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class InvalidNetwork(ValueError):
    """Raised by require_valid() when a spec breaks one or more invariants."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in violations))


class IndexOutOfLattice(ValueError):
    pass


class NonMonotoneTimes(ValueError):
    pass


class NonlinearKinetics(ValueError):
    """Raised by solvers that require linear receiver kinetics."""


@dataclass(frozen=True)
class LatticeSpec:
    """Cubic voxel lattice with reflective boundary.

    delta: voxel edge length, extent: voxel counts per axis,
    diffusion: macroscopic diffusion coefficient D.  The per-molecule
    hop rate to each face-adjacent neighbour is D / delta**2.
    """

    delta: float
    extent: Extent
    diffusion: float

    @property
    def n_voxels(self) -> int:
        return self.extent[0] * self.extent[1] * self.extent[2]

    @property
    def volume(self) -> float:
        return self.delta ** 3

    def contains(self, v: Voxel) -> bool:
        return all(0 <= v[a] < self.extent[a] for a in range(3))

    def flat(self, v: Voxel) -> int:
        """C-order flat index of a voxel."""
        return (v[0] * self.extent[1] + v[1]) * self.extent[2] + v[2]

    def unflat(self, i: int) -> Voxel:
        nz = self.extent[2]
        ny = self.extent[1]
        return (i // (ny * nz), (i // nz) % ny, i % nz)


def jump_rate(lattice: LatticeSpec) -> float:
    """Per-molecule hop rate to one neighbouring voxel: D / delta**2."""
    return lattice.diffusion / lattice.delta ** 2


_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def neighbors(v: Voxel, lattice: LatticeSpec) -> list[Voxel]:
    """Face-adjacent voxels of v that lie inside the lattice.

    Reflective boundary: there is no jump channel out of the domain, so
    boundary voxels simply have fewer neighbours.
    """
    if not lattice.contains(v):
        raise IndexOutOfLattice(f"voxel {v} outside extent {lattice.extent}")
    out = []
    for dx, dy, dz in _FACE_OFFSETS:
        w = (v[0] + dx, v[1] + dy, v[2] + dz)
        if lattice.contains(w):
            out.append(w)
    return out


@dataclass(frozen=True)
class BurstTrain:
    """Periodic emission generator: `count` molecules every `period`,
    starting at `start`, for events strictly inside [start, start+duration)."""

    start: float
    period: float
    count: int
    duration: float

    def n_events(self) -> int:
        ratio = self.duration / self.period
        nearest = round(ratio)
        if abs(ratio - nearest) <= 1e-9 * max(1.0, abs(ratio)):
            return int(nearest)
        return int(math.ceil(ratio))

    def times(self) -> np.ndarray:
        return self.start + self.period * np.arange(self.n_events())


@dataclass(frozen=True)
class EmissionSchedule:
    """Timed impulses of molecule counts for one transmitter.

    `events` are explicit (time, count) pairs; `bursts` are periodic
    generators expanded by expand_schedule().  With count_model
    "poisson", each event's count is redrawn per stochastic replicate
    from a Poisson law whose mean is the listed count; deterministic
    solvers use the mean.
    """

    events: tuple[tuple[float, int], ...] = ()
    bursts: tuple[BurstTrain, ...] = ()
    count_model: str = "deterministic"  # or "poisson"

    def is_empty(self) -> bool:
        return not self.events and not self.bursts


def expand_schedule(schedule: EmissionSchedule) -> list[tuple[float, int]]:
    """Expand periodic generators and merge with explicit events.

    Returns (time, count) pairs sorted strictly ascending.  Expansion is
    deterministic and idempotent; coincident times raise NonMonotoneTimes.
    """
    out: list[tuple[float, int]] = [(float(t), int(k)) for t, k in schedule.events]
    for b in schedule.bursts:
        out.extend((float(t), int(b.count)) for t in b.times())
    out.sort(key=lambda e: e[0])
    for a, b2 in zip(out, out[1:]):
        if not (a[0] < b2[0]):
            raise NonMonotoneTimes(f"coincident emission times at t={a[0]!r}")
    return out


@dataclass(frozen=True)
class MichaelisMenten:
    """Enzyme-mediated receiver kinetics:
    L + E <-> I (g1_plus / g1_minus), I -> C + E (g2), C -> L (g3),
    with e_total enzymes per receiver voxel site."""

    g1_plus: float
    g1_minus: float
    g2: float
    g3: float
    e_total: int


def mm_effective_k_plus(kinetics: "MichaelisMenten") -> float:
    """Quasi-steady-state linear equivalent of Michaelis-Menten binding.

    With intermediates relaxing fast, the enzyme pathway behaves like
    linear binding with k_plus ~ e_total * g2 * g1_plus / (g1_minus + g2)
    (volume/time convention) and k_minus = g3.  A tuning heuristic, not an
    invariant: validate numerically against the linear model before use.
    """
    return kinetics.e_total * kinetics.g2 * kinetics.g1_plus / (
        kinetics.g1_minus + kinetics.g2)


@dataclass(frozen=True)
class TransmitterSpec:
    voxels: tuple[Voxel, ...]
    schedule: EmissionSchedule


@dataclass(frozen=True)
class ReceiverSpec:
    """Receiver device. k_plus uses the 3-D volumetric convention: the
    forward propensity in a voxel holding n free molecules is
    (k_plus / delta**3) * n.  kinetics=None means linear binding."""

    voxels: tuple[Voxel, ...]
    k_plus: float
    k_minus: float
    kinetics: Optional[MichaelisMenten] = None


@dataclass(frozen=True)
class NetworkSpec:
    lattice: LatticeSpec
    transmitters: tuple[TransmitterSpec, ...]
    receivers: tuple[ReceiverSpec, ...]
    horizon: float

    @property
    def has_nonlinear(self) -> bool:
        return any(r.kinetics is not None for r in self.receivers)


def split_count(k: int, n: int) -> list[int]:
    """Deterministic uniform split of k molecules across n voxels.

    Remainder molecules go to the voxels earliest in the device's voxel
    list (devices keep their voxels in lexicographic order after
    validation), so replays are reproducible.
    """
    base, rem = divmod(int(k), n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def validate(spec: NetworkSpec) -> list[Violation]:
    """Check every type invariant; return one Violation per breach.

    An empty list means the spec is usable by every solver unchanged.
    """
    v: list[Violation] = []
    lat = spec.lattice
    if not (lat.delta > 0):
        v.append(Violation(NON_POSITIVE_PARAMETER, f"lattice.delta = {lat.delta}"))
    if not (lat.diffusion > 0):
        v.append(Violation(NON_POSITIVE_PARAMETER, f"lattice.diffusion = {lat.diffusion}"))
    if any(e < 1 for e in lat.extent):
        v.append(Violation(NON_POSITIVE_PARAMETER, f"lattice.extent = {lat.extent}"))
    if not (spec.horizon > 0):
        v.append(Violation(NON_POSITIVE_PARAMETER, f"horizon = {spec.horizon}"))
    if lat.delta > 0 and not math.isfinite(jump_rate(lat)):
        v.append(Violation(NON_POSITIVE_PARAMETER, "jump rate D/delta^2 not finite"))

    seen: dict[Voxel, str] = {}
    devices = [(f"transmitter[{i}]", t.voxels) for i, t in enumerate(spec.transmitters)]
    devices += [(f"receiver[{i}]", r.voxels) for i, r in enumerate(spec.receivers)]
    for name, voxels in devices:
        if len(voxels) == 0:
            v.append(Violation(EMPTY_DEVICE, f"{name} has no voxels"))
        if len(set(voxels)) != len(voxels):
            v.append(Violation(DUPLICATE_VOXELS, f"{name} lists a voxel twice"))
        for vox in voxels:
            if all(e >= 1 for e in lat.extent) and not lat.contains(vox):
                v.append(Violation(INDEX_OUT_OF_LATTICE, f"{name} voxel {vox} outside {lat.extent}"))
            if vox in seen:
                v.append(Violation(OVERLAPPING_VOXELS, f"{name} and {seen[vox]} share voxel {vox}"))
            else:
                seen[vox] = name

    for i, t in enumerate(spec.transmitters):
        if t.schedule.count_model not in ("deterministic", "poisson"):
            v.append(Violation(BAD_COUNT_MODEL, f"transmitter[{i}] count_model {t.schedule.count_model!r}"))
        try:
            events = expand_schedule(t.schedule)
        except NonMonotoneTimes as exc:
            v.append(Violation(NON_MONOTONE_TIMES, f"transmitter[{i}]: {exc}"))
            continue
        for tb, kb in events:
            if kb < 1:
                v.append(Violation(NON_POSITIVE_PARAMETER, f"transmitter[{i}] count {kb} at t={tb}"))
            if tb < 0:
                v.append(Violation(NON_POSITIVE_PARAMETER, f"transmitter[{i}] event at t={tb} < 0"))
            if tb >= spec.horizon:
                v.append(Violation(EVENT_BEYOND_HORIZON, f"transmitter[{i}] event at t={tb} >= horizon {spec.horizon}"))

    for i, r in enumerate(spec.receivers):
        if r.k_plus < 0:
            v.append(Violation(NON_POSITIVE_PARAMETER, f"receiver[{i}].k_plus = {r.k_plus}"))
        if r.k_minus < 0:
            v.append(Violation(NON_POSITIVE_PARAMETER, f"receiver[{i}].k_minus = {r.k_minus}"))
        mm = r.kinetics
        if mm is not None:
            if min(mm.g1_plus, mm.g1_minus, mm.g2, mm.g3) < 0:
                v.append(Violation(NON_POSITIVE_PARAMETER, f"receiver[{i}] MM rate < 0"))
            if mm.e_total < 1:
                v.append(Violation(NON_POSITIVE_PARAMETER, f"receiver[{i}] e_total = {mm.e_total}"))
    return v


def require_valid(spec: NetworkSpec) -> NetworkSpec:
    """Return the spec unchanged if valid, else raise InvalidNetwork."""
    violations = validate(spec)
    if violations:
        raise InvalidNetwork(violations)
    return spec


def device_emissions(t: TransmitterSpec) -> tuple[np.ndarray, np.ndarray]:
    """Expanded per-voxel integer emissions for one transmitter.

    Returns (times, counts) with counts of shape (n_events, n_voxels),
    using the deterministic uniform split.
    """
    events = expand_schedule(t.schedule)
    n = len(t.voxels)
    times = np.array([e[0] for e in events], dtype=float)
    counts = np.array([split_count(e[1], n) for e in events], dtype=np.int64)
    counts = counts.reshape(len(events), n)
    return times, counts


def total_emitted_by(spec: NetworkSpec, t: float) -> int:
    """Cumulative molecules scheduled at times <= t (deterministic counts)."""
    tot = 0
    for tx in spec.transmitters:
        for tb, kb in expand_schedule(tx.schedule):
            if tb <= t:
                tot += kb
    return tot


def clearance_voxels(lattice_delta: float, diffusion: float, horizon: float,
                     min_clearance: int = 8, sigmas: float = 1.25) -> int:
    """Boundary clearance (in voxels) for near-infinite-medium scenarios.

    The analytic kernels assume an unbounded lattice; simulations run on a
    finite reflective box.  A clearance of `sigmas` diffusion lengths
    sqrt(2*D*T) keeps image-source contamination of receiver outputs at
    the few-tenths-of-a-percent level (verified against the lattice
    transfer solution); 8 voxels is the floor for short-horizon runs.
    """
    spread = math.sqrt(2.0 * diffusion * horizon) / lattice_delta
    return max(min_clearance, int(math.ceil(sigmas * spread)))


def auto_extent(device_voxels: Iterable[Voxel], clearance: int) -> tuple[Extent, Voxel]:
    """Extent and index offset wrapping the devices with the given clearance.

    Returns (extent, shift): add `shift` to device voxel indices so the
    device bounding box sits `clearance` voxels from every face.
    """
    vox = list(device_voxels)
    lo = tuple(min(v[a] for v in vox) for a in range(3))
    hi = tuple(max(v[a] for v in vox) for a in range(3))
    extent = tuple(hi[a] - lo[a] + 1 + 2 * clearance for a in range(3))
    shift = tuple(clearance - lo[a] for a in range(3))
    return extent, shift  # type: ignore[return-value]


def outer_shell_fraction(free_counts: np.ndarray, lattice: LatticeSpec) -> float:
    """Fraction of free molecules in the outermost voxel shell.

    Reported by the scenario runner as a boundary-contamination
    diagnostic for the reflective-box approximation of an infinite
    medium.  Returns 0 when no molecules are free.
    """
    arr = np.asarray(free_counts, dtype=float).reshape(lattice.extent)
    total = arr.sum()
    if total <= 0:
        return 0.0
    interior = arr[1:-1, 1:-1, 1:-1].sum() if min(lattice.extent) >= 3 else 0.0
    return float((total - interior) / total)
