"""Scenario configuration, experiment orchestration and comparison metrics.

A scenario YAML file describes one network plus run settings; the runner
executes every requested method, writes one CSV per method with the
schema ``time,method,receiver,mean[,std]`` (17 significant digits, so
identical configs and seeds reproduce byte-identical files) and a JSON
report with pairwise comparison metrics, standard-error bands for the
stochastic methods and the boundary-contamination diagnostic.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from molchan import moments, netmodel, stochsim, xfer
from molchan.netmodel import (
    BurstTrain, EmissionSchedule, LatticeSpec, MichaelisMenten,
    NetworkSpec, ReceiverSpec, TransmitterSpec,
)

METHODS = ("tauSim", "ssaSim", "meanOde", "covOde",
           "xferLattice", "xferContinuum", "xferCutoff", "decoupled")

# preferred reference when comparing a method pair (most trusted first)
_REFERENCE_ORDER = ("meanOde", "covOde", "xferLattice", "xferContinuum",
                    "decoupled", "xferCutoff", "tauSim", "ssaSim")


class ConfigError(ValueError):
    pass


class GridMismatch(ValueError):
    pass


class EmptyWindow(ValueError):
    pass


class NonDivisibleDelta(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    network: NetworkSpec
    methods: tuple[str, ...]
    grid: np.ndarray
    replicates: int = 125
    tau: float = 1e-4
    seed: int = 1
    negativity: str = "reject"
    kernel: xfer.KernelConfig = field(default_factory=xfer.KernelConfig)
    sweep: Optional[dict] = None


@dataclass
class MethodResult:
    method: str
    mean: np.ndarray              # (n_receivers, n_times)
    std: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    shell_fraction: Optional[float] = None
    runtime: float = 0.0


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _as_voxels(raw, what):
    _require(isinstance(raw, list) and raw, f"{what}: non-empty voxel list required")
    out = []
    for v in raw:
        _require(isinstance(v, list) and len(v) == 3, f"{what}: voxels are [i, j, k] triples")
        out.append(tuple(int(c) for c in v))
    return tuple(out)


def _schedule_from(raw) -> EmissionSchedule:
    events = tuple((float(t), int(k)) for t, k in raw.get("events", []))
    bursts = tuple(BurstTrain(start=float(b["start"]), period=float(b["period"]),
                              count=int(b["count"]), duration=float(b["duration"]))
                   for b in raw.get("bursts", []))
    return EmissionSchedule(events=events, bursts=bursts,
                            count_model=raw.get("count_model", "deterministic"))


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; raises ConfigError on any issue."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    _require(isinstance(raw, dict), "scenario must be a mapping")
    try:
        lat_raw = raw["lattice"]
        med = raw["medium"]
        run = raw["run"]
        txs_raw = raw["transmitters"]
        rxs_raw = raw.get("receivers", [])
    except KeyError as exc:
        raise ConfigError(f"missing scenario section {exc}") from None

    horizon = float(run.get("horizon", 0.0))
    _require(horizon > 0, "run.horizon must be positive")
    diffusion = float(med["diffusion"])
    delta = float(lat_raw["delta"])

    txs = []
    for n, t in enumerate(txs_raw):
        txs.append(TransmitterSpec(voxels=_as_voxels(t["voxels"], f"transmitter[{n}]"),
                                   schedule=_schedule_from(t.get("schedule", {}))))
    rxs = []
    for n, r in enumerate(rxs_raw):
        kin = None
        if "kinetics" in r:
            k = r["kinetics"]
            kin = MichaelisMenten(g1_plus=float(k["g1_plus"]), g1_minus=float(k["g1_minus"]),
                                  g2=float(k["g2"]), g3=float(k["g3"]),
                                  e_total=int(k["e_total"]))
        rxs.append(ReceiverSpec(voxels=_as_voxels(r["voxels"], f"receiver[{n}]"),
                                k_plus=float(r.get("k_plus", 0.0)),
                                k_minus=float(r.get("k_minus", 0.0)), kinetics=kin))

    extent_raw = lat_raw.get("extent", "auto")
    if extent_raw == "auto":
        # clearance rule: wrap the devices in enough reflective padding that
        # the finite box approximates an unbounded medium over the horizon
        cl_cfg = lat_raw.get("clearance", {})
        clearance = netmodel.clearance_voxels(
            delta, diffusion, horizon,
            min_clearance=int(cl_cfg.get("min", 8)),
            sigmas=float(cl_cfg.get("sigmas", 1.25)))
        devices = [v for t in txs for v in t.voxels] + [v for r in rxs for v in r.voxels]
        extent, shift = netmodel.auto_extent(devices, clearance)
        txs = [TransmitterSpec(voxels=tuple((v[0] + shift[0], v[1] + shift[1], v[2] + shift[2])
                                            for v in t.voxels), schedule=t.schedule) for t in txs]
        rxs = [ReceiverSpec(voxels=tuple((v[0] + shift[0], v[1] + shift[1], v[2] + shift[2])
                                         for v in r.voxels), k_plus=r.k_plus,
                            k_minus=r.k_minus, kinetics=r.kinetics) for r in rxs]
    else:
        _require(isinstance(extent_raw, list) and len(extent_raw) == 3,
                 "lattice.extent must be [nx, ny, nz] or 'auto'")
        extent = tuple(int(e) for e in extent_raw)

    spec = NetworkSpec(
        lattice=LatticeSpec(delta=delta, extent=extent, diffusion=diffusion),
        transmitters=tuple(txs), receivers=tuple(rxs), horizon=horizon)
    violations = netmodel.validate(spec)
    if violations:
        raise ConfigError("invalid network: " + "; ".join(str(v) for v in violations))

    methods = tuple(run.get("methods", []))
    _require(len(methods) > 0, "run.methods must list at least one method")
    for m in methods:
        _require(m in METHODS, f"unknown method {m!r}; choose from {METHODS}")

    g = run.get("grid", {})
    grid = np.linspace(float(g.get("start", 0.0)), float(g.get("stop", horizon)),
                       int(g.get("points", 201)))
    _require(grid[-1] <= horizon + 1e-12, "grid extends past the horizon")

    kcfg_raw = raw.get("kernel", {})
    kernel = xfer.KernelConfig(
        kind=kcfg_raw.get("kind", "lattice"),
        phi0_strategy=kcfg_raw.get("phi0_strategy", "lattice_psi0"),
        quad_points=int(kcfg_raw.get("quad_points", 256)),
        dispersion=kcfg_raw.get("dispersion", "difference"))

    return Scenario(
        name=raw.get("name", path.stem),
        network=spec,
        methods=methods,
        grid=grid,
        replicates=int(run.get("replicates", 125)),
        tau=float(run.get("tau", 1e-4)),
        seed=int(run.get("seed", 1)),
        negativity=run.get("negativity", "reject"),
        kernel=kernel,
        sweep=raw.get("sweep"),
    )


# ----------------------------------------------------------------- methods

def _kernel_for(method: str, base: xfer.KernelConfig) -> xfer.KernelConfig:
    if method == "xferLattice":
        return xfer.KernelConfig(kind="lattice", quad_points=base.quad_points,
                                 dispersion=base.dispersion)
    if method == "xferContinuum":
        return xfer.KernelConfig(kind="continuum", phi0_strategy="lattice_psi0",
                                 quad_points=base.quad_points, dispersion=base.dispersion)
    if method == "xferCutoff":
        return xfer.KernelConfig(kind="continuum", phi0_strategy="cutoff",
                                 quad_points=base.quad_points, dispersion=base.dispersion)
    return base  # decoupled uses the scenario's configured kernel


def run_method(sc: Scenario, method: str, workers: Optional[int] = None) -> MethodResult:
    spec = sc.network
    t0 = time.time()
    if method in ("tauSim", "ssaSim"):
        es = stochsim.ensemble(spec, sc.replicates, sc.tau, sc.seed, sc.grid,
                               negativity=sc.negativity,
                               engine="tau" if method == "tauSim" else "ssa",
                               workers=workers)
        return MethodResult(method, es.mean, std=es.std, stderr=es.stderr,
                            shell_fraction=es.shell_fraction, runtime=time.time() - t0)
    if method == "meanOde":
        sol = moments.mean_ode(spec, sc.grid)
        return MethodResult(method, sol.receiver_mean,
                            shell_fraction=sol.meta.get("shell_fraction"),
                            runtime=time.time() - t0)
    if method == "covOde":
        sol = moments.covariance_ode(spec, sc.grid)
        return MethodResult(method, sol.receiver_mean, std=sol.receiver_std,
                            runtime=time.time() - t0)
    if method in ("xferLattice", "xferContinuum", "xferCutoff", "decoupled"):
        cfg = _kernel_for(method, sc.kernel)
        series = xfer.receiver_output_series(
            spec, cfg, sc.grid, model="decoupled" if method == "decoupled" else "coupled")
        return MethodResult(method, series, runtime=time.time() - t0)
    raise ConfigError(f"unknown method {method!r}")


# ------------------------------------------------------------- comparison

@dataclass
class PairComparison:
    method: str
    reference: str
    receiver: int
    rel_rmse: float
    absolute: bool            # True when the reference is all-zero
    peak_diff: float
    peak_time_diff: float


def compare_series(a: np.ndarray, b_ref: np.ndarray, grid_a: np.ndarray,
                   grid_b: np.ndarray) -> tuple[float, bool, float, float]:
    """Comparison metrics of series a against reference b on a shared grid.

    Relative RMSE is ||a-b|| / ||b||; a zero reference flips the metric to
    absolute RMSE with a flag.  Also reports peak-value and peak-time
    differences.
    """
    if grid_a.shape != grid_b.shape or not np.allclose(grid_a, grid_b, rtol=0, atol=1e-12):
        raise GridMismatch("series grids differ")
    diff = np.linalg.norm(a - b_ref)
    ref_norm = np.linalg.norm(b_ref)
    if ref_norm == 0.0:
        rel, absolute = diff / math.sqrt(a.size), True
    else:
        rel, absolute = diff / ref_norm, False
    ia, ib = int(np.argmax(a)), int(np.argmax(b_ref))
    return rel, absolute, float(a[ia] - b_ref[ib]), float(grid_a[ia] - grid_b[ib])


def comparison_report(results: dict[str, MethodResult], grid: np.ndarray) -> list[PairComparison]:
    rows = []
    methods = list(results)
    for i, m1 in enumerate(methods):
        for m2 in methods[i + 1:]:
            ref, other = (m1, m2)
            if _REFERENCE_ORDER.index(m1) > _REFERENCE_ORDER.index(m2):
                ref, other = m2, m1
            for r in range(results[other].mean.shape[0]):
                rel, absolute, pd, ptd = compare_series(
                    results[other].mean[r], results[ref].mean[r], grid, grid)
                rows.append(PairComparison(other, ref, r, rel, absolute, pd, ptd))
    return rows


# ---------------------------------------------------------------- symbols

def detect_symbols(series: np.ndarray, grid: np.ndarray, threshold: float,
                   duration: float) -> str:
    """Threshold detector: one symbol per window of `duration`.

    Emits '1' when the window's peak is at or above the threshold (ties
    resolve to '1'), else '0'.  A window containing no samples is an error.
    """
    if threshold <= 0 or duration <= 0:
        raise ValueError("threshold and duration must be positive")
    n_sym = max(1, int(math.ceil((grid[-1] - 1e-12) / duration)))
    out = []
    for w in range(n_sym):
        lo, hi = w * duration, (w + 1) * duration
        sel = (grid >= lo - 1e-12) & (grid < hi - 1e-12)
        if not np.any(sel):
            raise EmptyWindow(f"no samples in symbol window [{lo}, {hi})")
        out.append("1" if series[sel].max() >= threshold else "0")
    return "".join(out)


# --------------------------------------------------------------------- CSV

def write_csv(path, grid: np.ndarray, result: MethodResult) -> None:
    with open(path, "w") as fh:
        cols = "time,method,receiver,mean" + (",std" if result.std is not None else "")
        fh.write(cols + "\n")
        for gi, t in enumerate(grid):
            for r in range(result.mean.shape[0]):
                row = f"{t:.17g},{result.method},{r},{result.mean[r, gi]:.17g}"
                if result.std is not None:
                    row += f",{result.std[r, gi]:.17g}"
                fh.write(row + "\n")


def read_csv(path):
    """Read a method CSV back into (grid, method, mean, std|None)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        has_std = "std" in header
        rows = [line.strip().split(",") for line in fh if line.strip()]
    method = rows[0][1]
    times = sorted({float(r[0]) for r in rows})
    rx = sorted({int(r[2]) for r in rows})
    t_index = {t: i for i, t in enumerate(times)}
    mean = np.zeros((len(rx), len(times)))
    std = np.zeros_like(mean) if has_std else None
    for r in rows:
        gi, ri = t_index[float(r[0])], int(r[2])
        mean[ri, gi] = float(r[3])
        if has_std:
            std[ri, gi] = float(r[4])
    return np.array(times), method, mean, std


# ------------------------------------------------------------------ runner

def run_scenario(sc: Scenario, out_dir, workers: Optional[int] = None,
                 seed: Optional[int] = None) -> dict:
    """Execute every requested method, write per-method CSVs and a JSON
    report; returns the report as a dict."""
    if seed is not None:
        sc.seed = int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, MethodResult] = {}
    for m in sc.methods:
        results[m] = run_method(sc, m, workers=workers)
        write_csv(out / f"{m}.csv", sc.grid, results[m])

    report = {
        "scenario": sc.name,
        "seed": sc.seed,
        "replicates": sc.replicates if any(m in ("tauSim", "ssaSim") for m in sc.methods) else None,
        "methods": {
            m: {
                "runtime_s": round(r.runtime, 3),
                "shell_fraction": r.shell_fraction,
                "max_stderr": float(r.stderr.max()) if r.stderr is not None else None,
            } for m, r in results.items()
        },
        "comparisons": [vars(c) for c in comparison_report(results, sc.grid)],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def sweep_delta(sc: Scenario, out_dir, workers: Optional[int] = None) -> dict:
    """Voxel-size sweep: rebuild the device voxelizations for each delta,
    run the scenario's transfer method, and report successive-pair
    convergence of the per-device outputs.

    The sweep section gives the device edge length chi and the divisors m
    (delta = chi/m): a device cube occupies m^3 voxels, its forward rate
    constant splits as k_plus/m^3 per voxel (fixed total binding capacity)
    and emissions split uniformly across its voxels.
    """
    if not sc.sweep:
        raise ConfigError("scenario lacks a sweep section")
    sw = sc.sweep
    chi = float(sw["chi"])
    divisors = [int(d) for d in sw["divisors"]]
    if any(d < 1 for d in divisors):
        raise NonDivisibleDelta("divisors must be positive integers")
    tx_cubes = [tuple(int(c) for c in v) for v in sw["transmitter_cubes"]]
    rx_cubes = [tuple(int(c) for c in v) for v in sw["receiver_cubes"]]
    method = sw.get("method", "xferLattice")

    base = sc.network
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series_by_m: dict[int, MethodResult] = {}
    report = {"scenario": sc.name, "sweep": {}, "convergence": []}
    for m in divisors:
        delta = chi / m

        def cube_voxels(corner):
            return tuple((corner[0] * m + a, corner[1] * m + b, corner[2] * m + c)
                         for a in range(m) for b in range(m) for c in range(m))

        txs = tuple(TransmitterSpec(voxels=cube_voxels(c), schedule=t.schedule)
                    for c, t in zip(tx_cubes, base.transmitters))
        rxs = tuple(ReceiverSpec(voxels=cube_voxels(c), k_plus=r.k_plus / m**3,
                                 k_minus=r.k_minus, kinetics=r.kinetics)
                    for c, r in zip(rx_cubes, base.receivers))
        devices = [v for t in txs for v in t.voxels] + [v for r in rxs for v in r.voxels]
        extent, shift = netmodel.auto_extent(devices, clearance=2)
        txs = tuple(TransmitterSpec(voxels=tuple((v[0] + shift[0], v[1] + shift[1], v[2] + shift[2])
                                                 for v in t.voxels), schedule=t.schedule)
                    for t in txs)
        rxs = tuple(ReceiverSpec(voxels=tuple((v[0] + shift[0], v[1] + shift[1], v[2] + shift[2])
                                              for v in r.voxels), k_plus=r.k_plus,
                                 k_minus=r.k_minus, kinetics=r.kinetics) for r in rxs)
        spec = NetworkSpec(lattice=LatticeSpec(delta=delta, extent=extent,
                                               diffusion=base.lattice.diffusion),
                           transmitters=txs, receivers=rxs, horizon=base.horizon)
        netmodel.require_valid(spec)
        swsc = Scenario(name=f"{sc.name}-m{m}", network=spec, methods=(method,),
                        grid=sc.grid, replicates=sc.replicates, tau=sc.tau,
                        seed=sc.seed, negativity=sc.negativity, kernel=sc.kernel)
        res = run_method(swsc, method, workers=workers)
        series_by_m[m] = res
        write_csv(out / f"delta-chi-over-{m}.csv", sc.grid, res)
        report["sweep"][m] = {"delta": delta, "voxels_per_device": m**3,
                              "runtime_s": round(res.runtime, 3)}

    for m1, m2 in zip(divisors, divisors[1:]):
        for r in range(len(base.receivers)):
            rel, absolute, pd, ptd = compare_series(
                series_by_m[m1].mean[r], series_by_m[m2].mean[r], sc.grid, sc.grid)
            report["convergence"].append(
                {"pair": [m1, m2], "receiver": r, "rel_rmse": rel,
                 "peak_diff": pd, "peak_time_diff": ptd})
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
