"""Lattice geometry, schedules and validation."""

from fractions import Fraction

import numpy as np
import pytest

from molchan.netmodel import (
    BurstTrain,
    EmissionSchedule,
    InvalidNetwork,
    LatticeSpec,
    NetworkSpec,
    ReceiverSpec,
    TransmitterSpec,
    EVENT_BEYOND_HORIZON,
    NON_POSITIVE_PARAMETER,
    OVERLAPPING_VOXELS,
    auto_extent,
    clearance_voxels,
    device_emissions,
    expand_schedule,
    jump_rate,
    neighbors,
    require_valid,
    split_count,
    validate,
)


def lat(extent=(5, 5, 5), delta=0.01, diffusion=0.05):
    return LatticeSpec(delta=delta, extent=extent, diffusion=diffusion)


def one_t_one_r(extent=(8, 5, 5), k_plus=2.5e-3, k_minus=0.05, horizon=2.0):
    # the single-transmitter single-receiver layout used throughout
    return NetworkSpec(
        lattice=lat(extent),
        transmitters=(TransmitterSpec(voxels=((0, 0, 0),),
                                      schedule=EmissionSchedule(events=((0.0, 10),))),),
        receivers=(ReceiverSpec(voxels=((3, 0, 0),), k_plus=k_plus, k_minus=k_minus),),
        horizon=horizon,
    )


# ---------------------------------------------------------------- neighbors

def test_neighbors_interior_has_six():
    assert len(neighbors((2, 2, 2), lat())) == 6


def test_neighbors_corner_has_three():
    assert len(neighbors((0, 0, 0), lat())) == 3


def test_neighbors_degenerate_axis():
    # extent (N,1,1): the 3-D lattice degenerates to a 1-D chain
    assert len(neighbors((3, 0, 0), lat(extent=(7, 1, 1)))) == 2
    assert len(neighbors((0, 0, 0), lat(extent=(7, 1, 1)))) == 1


def test_neighbors_rejects_outside_voxel():
    from molchan.netmodel import IndexOutOfLattice
    with pytest.raises(IndexOutOfLattice):
        neighbors((5, 0, 0), lat())


def test_neighbors_symmetric_and_edge_count():
    rng = np.random.default_rng(7)
    for _ in range(20):
        extent = tuple(int(e) for e in rng.integers(1, 6, size=3))
        lattice = lat(extent=extent)
        voxels = [(i, j, k) for i in range(extent[0]) for j in range(extent[1]) for k in range(extent[2])]
        nbrs = {v: set(neighbors(v, lattice)) for v in voxels}
        for v, ns in nbrs.items():
            for u in ns:
                assert v in nbrs[u]
        # sum of degrees is twice the number of undirected lattice edges
        nx, ny, nz = extent
        edges = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
        assert sum(len(ns) for ns in nbrs.values()) == 2 * edges


# ---------------------------------------------------------------- jump rate

def test_jump_rate_values():
    assert jump_rate(lat(delta=0.01, diffusion=0.05)) == pytest.approx(500.0)
    assert jump_rate(lat(delta=1.0, diffusion=0.05)) == pytest.approx(0.05)


def test_jump_rate_scaling():
    base = jump_rate(lat(delta=0.02, diffusion=0.05))
    assert jump_rate(lat(delta=0.01, diffusion=0.05)) == pytest.approx(4 * base)


# ---------------------------------------------------------------- schedules

def _brute_force_burst(start, period, count, duration):
    # independent enumeration with exact rational arithmetic
    s, p, d = Fraction(start), Fraction(period), Fraction(duration)
    times, i = [], 0
    while s + i * p < s + d:
        times.append(float(s + i * p))
        i += 1
    return [(t, count) for t in times]


def test_expand_burst_matches_brute_force():
    # "10 molecules every 1e-4 time units for 0.2 time units"
    burst = BurstTrain(start=0.0, period=1e-4, count=10, duration=0.2)
    oracle = _brute_force_burst(Fraction(0), Fraction(1, 10000), 10, Fraction(2, 10))
    got = expand_schedule(EmissionSchedule(bursts=(burst,)))
    assert len(oracle) == 2000
    assert sum(k for _, k in oracle) == 20000
    assert len(got) == 2000
    assert sum(k for _, k in got) == 20000
    np.testing.assert_allclose([t for t, _ in got], [t for t, _ in oracle], rtol=0, atol=1e-12)


def test_expand_empty_schedule():
    assert expand_schedule(EmissionSchedule()) == []


def test_expand_single_event_identity():
    assert expand_schedule(EmissionSchedule(events=((0.0, 10),))) == [(0.0, 10)]


def test_expand_idempotent():
    sched = EmissionSchedule(events=((0.05, 3),),
                             bursts=(BurstTrain(0.1, 0.01, 2, 0.05),))
    once = expand_schedule(sched)
    again = expand_schedule(EmissionSchedule(events=tuple(once)))
    assert once == again


def test_expand_rejects_coincident_times():
    from molchan.netmodel import NonMonotoneTimes
    sched = EmissionSchedule(events=((0.1, 1), (0.1, 2)))
    with pytest.raises(NonMonotoneTimes):
        expand_schedule(sched)


def test_split_count_lexicographic_remainder():
    assert split_count(10, 4) == [3, 3, 2, 2]
    assert split_count(8, 4) == [2, 2, 2, 2]
    assert split_count(1, 3) == [1, 0, 0]


def test_device_emissions_total():
    t = TransmitterSpec(voxels=((0, 0, 0), (1, 0, 0)),
                        schedule=EmissionSchedule(events=((0.0, 5), (0.1, 4))))
    times, counts = device_emissions(t)
    assert counts.shape == (2, 2)
    assert counts.sum() == 9
    assert counts[0].tolist() == [3, 2]


# ---------------------------------------------------------------- validate

def test_validate_accepts_well_formed_1t1r():
    spec = one_t_one_r()
    assert validate(spec) == []
    assert require_valid(spec) is spec


def test_validate_overlapping_voxels():
    spec = NetworkSpec(
        lattice=lat(),
        transmitters=(TransmitterSpec(voxels=((0, 0, 0),), schedule=EmissionSchedule(events=((0.0, 1),))),),
        receivers=(ReceiverSpec(voxels=((0, 0, 0),), k_plus=1e-3, k_minus=1.0),),
        horizon=1.0,
    )
    assert any(v.code == OVERLAPPING_VOXELS for v in validate(spec))


def test_validate_negative_k_plus():
    spec = one_t_one_r(k_plus=-1.0)
    assert any(v.code == NON_POSITIVE_PARAMETER for v in validate(spec))


def test_validate_event_beyond_horizon():
    spec = NetworkSpec(
        lattice=lat(),
        transmitters=(TransmitterSpec(voxels=((0, 0, 0),), schedule=EmissionSchedule(events=((3.0, 1),))),),
        receivers=(ReceiverSpec(voxels=((3, 0, 0),), k_plus=1e-3, k_minus=1.0),),
        horizon=2.0,
    )
    assert any(v.code == EVENT_BEYOND_HORIZON for v in validate(spec))


def test_require_valid_raises_with_all_violations():
    spec = NetworkSpec(
        lattice=lat(delta=-1.0),
        transmitters=(TransmitterSpec(voxels=((0, 0, 0),), schedule=EmissionSchedule(events=((9.0, 1),))),),
        receivers=(ReceiverSpec(voxels=((0, 0, 0),), k_plus=-2.0, k_minus=1.0),),
        horizon=2.0,
    )
    with pytest.raises(InvalidNetwork) as exc:
        require_valid(spec)
    codes = {v.code for v in exc.value.violations}
    assert {NON_POSITIVE_PARAMETER, OVERLAPPING_VOXELS, EVENT_BEYOND_HORIZON} <= codes


def test_validate_random_mutations():
    # validate() accepts a spec iff every invariant holds: mutate one field
    # at a time and check the verdict flips exactly when it should
    good = one_t_one_r()
    assert validate(good) == []

    from dataclasses import replace
    bad_specs = [
        replace(good, horizon=-1.0),
        replace(good, lattice=lat(delta=0.0)),
        replace(good, lattice=lat(diffusion=-0.5)),
        replace(good, lattice=lat(extent=(0, 5, 5))),
        replace(good, receivers=(ReceiverSpec(voxels=(), k_plus=1e-3, k_minus=1.0),)),
        replace(good, receivers=(ReceiverSpec(voxels=((3, 0, 0), (3, 0, 0)), k_plus=1e-3, k_minus=1.0),)),
        replace(good, receivers=(ReceiverSpec(voxels=((9, 0, 0),), k_plus=1e-3, k_minus=1.0),)),
    ]
    for bad in bad_specs:
        assert validate(bad) != [], f"expected violation for {bad}"


# ---------------------------------------------------------------- clearance

def test_clearance_floor_and_scaling():
    assert clearance_voxels(0.01, 0.05, 1e-6) == 8
    c = clearance_voxels(0.01, 0.05, 2.0)
    # 1.25 diffusion lengths of sqrt(2*0.05*2) = 0.447 is ~56 voxels
    assert c == 56


def test_auto_extent_wraps_devices():
    extent, shift = auto_extent([(0, 0, 0), (3, 0, 0)], clearance=8)
    assert extent == (20, 17, 17)
    assert shift == (8, 8, 8)
