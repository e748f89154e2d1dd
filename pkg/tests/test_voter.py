from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pamvoter.graphical import LazyEnvironment
from pamvoter.kernels import Kernel, simple
from pamvoter.rng import stream
from pamvoter.voter import (
    Configuration,
    FormatError,
    GraphicalRecord,
    Torus,
    build_record,
    coalescence_probability,
    dual_walk,
    environment_initial,
    evolve,
    marginal_estimate,
    query_dual,
    record_from_environment,
    sample_initial,
    torus_side_for,
    two_point_estimate,
)


def _record(torus, events, horizon=10.0):
    sites, sources, times = zip(*events) if events else ((), (), ())
    return GraphicalRecord(torus, horizon, np.array(sites, dtype=np.int64),
                           np.array(sources, dtype=np.int64), np.array(times, dtype=float))


# --- torus and configurations ------------------------------------------------


def test_torus_index_roundtrip():
    t = Torus(3, 4)
    for i in range(t.n_sites):
        assert t.index(t.coords(i)) == i
    assert t.index((-1, 0, 5)) == t.index((3, 0, 1))
    assert np.array_equal(t.all_coords()[7], t.coords(7))


def test_torus_shift_wraps():
    t = Torus(2, 5)
    i = t.index((4, 0))
    assert t.shift(i, (1, -1))[0] == t.index((0, 4))


def test_torus_rejects_degenerate():
    with pytest.raises(ValueError):
        Torus(0, 4)
    with pytest.raises(ValueError):
        Torus(1, 1)


def test_torus_side_for_is_even_and_large_enough():
    for rate, h in [(1.0, 1.0), (2.0, 5.0), (1.0, 50.0)]:
        L = torus_side_for(rate, h)
        assert L % 2 == 0 and 6 * math.sqrt(rate * h) < L / 2


@pytest.mark.parametrize("rho,expect", [(0.0, 0), (1.0, 1)])
def test_sample_initial_endpoints(rho, expect):
    c = sample_initial(Torus(2, 6), rho, stream(1))
    assert np.all(c.bits == expect)


def test_sample_initial_density():
    c = sample_initial(Torus(1, 100_000), 0.3, stream(2))
    assert abs(c.density - 0.3) < 4 * math.sqrt(0.21 / 100_000)


def test_sample_initial_rejects_bad_rho():
    with pytest.raises(ValueError):
        sample_initial(Torus(1, 4), 1.5, stream(0))


def test_configuration_validation_and_bytes():
    t = Torus(2, 3)
    with pytest.raises(ValueError):
        Configuration(t, np.zeros(8))
    with pytest.raises(ValueError):
        Configuration(t, np.full(9, 2))
    c = sample_initial(t, 0.5, stream(3))
    assert Configuration.from_bytes(c.to_bytes()) == c
    with pytest.raises(FormatError):
        Configuration.from_bytes(b"XXXX" + c.to_bytes()[4:])


# --- graphical records -------------------------------------------------------


def test_build_record_zero_horizon_is_empty():
    rec = build_record(Torus(1, 8), simple(1), 0.0, stream(4))
    assert len(rec) == 0


def test_build_record_event_count():
    rec = build_record(Torus(1, 8), simple(1), 100.0, stream(5))
    assert abs(len(rec) - 800) < 4 * math.sqrt(800)
    assert np.all(np.diff(rec.times) > 0)
    diff = (rec.sources - rec.sites) % 8
    assert set(diff.tolist()) <= {1, 7}


def test_build_record_budget():
    from pamvoter.voter import EventBudgetError

    with pytest.raises(EventBudgetError):
        build_record(Torus(1, 8), simple(1), 100.0, stream(5), max_events=10)


def test_build_record_dimension_mismatch():
    with pytest.raises(ValueError):
        build_record(Torus(2, 4), simple(1), 1.0, stream(0))


def test_record_serialization_is_byte_identical():
    rec = build_record(Torus(2, 4), simple(2), 3.0, stream(6))
    data = rec.to_bytes()
    back = GraphicalRecord.from_bytes(data)
    assert back == rec
    assert back.to_bytes() == data
    with pytest.raises(FormatError):
        GraphicalRecord.from_bytes(data[:-3])
    with pytest.raises(FormatError):
        GraphicalRecord.from_bytes(b"NOPE" + data[4:])


def test_record_rejects_unsorted_times():
    with pytest.raises(ValueError):
        _record(Torus(1, 3), [(0, 1, 2.0), (1, 0, 1.0)])
    with pytest.raises(ValueError):
        _record(Torus(1, 3), [(0, 1, 11.0)])


def test_same_seed_same_record():
    a = build_record(Torus(1, 10), simple(1), 5.0, stream(9, 1))
    b = build_record(Torus(1, 10), simple(1), 5.0, stream(9, 1))
    assert a == b


# --- evolution and duality ---------------------------------------------------


def test_evolve_hand_cases():
    t = Torus(1, 3)
    init = Configuration(t, np.array([1, 0, 0]))
    rec = _record(t, [(1, 0, 1.0), (2, 1, 2.0), (0, 2, 3.0)])
    assert list(evolve(init, rec, 0.5).bits) == [1, 0, 0]
    assert list(evolve(init, rec, 1.0).bits) == [1, 1, 0]
    assert list(evolve(init, rec, 2.5).bits) == [1, 1, 1]
    # the order of events matters: reversed order gives a different result
    rec2 = _record(t, [(0, 2, 1.0), (2, 1, 2.0), (1, 0, 3.0)])
    assert list(evolve(init, rec2, 10.0).bits) == [0, 0, 0]


def test_evolve_rejects_time_outside_horizon():
    t = Torus(1, 3)
    rec = _record(t, [], horizon=1.0)
    with pytest.raises(ValueError):
        evolve(Configuration(t, np.zeros(3)), rec, 2.0)


def test_dual_walk_hand_case():
    t = Torus(1, 3)
    rec = _record(t, [(1, 0, 1.0), (2, 1, 2.0), (0, 2, 3.0)])
    w = dual_walk(2, 2.5, rec)
    assert w.jump_times == (2.0, 1.0)
    assert w.positions == (2, 1, 0)
    assert w.position(2.2) == 2 and w.position(1.5) == 1 and w.position(0.0) == 0


def _check_duality(torus, kernel, horizon, rng, n_times=4):
    init = sample_initial(torus, 0.5, rng)
    rec = build_record(torus, kernel, horizon, rng)
    for t in np.linspace(0.0, horizon, n_times):
        cfg = evolve(init, rec, t)
        for x in range(torus.n_sites):
            assert query_dual(x, t, rec, init) == cfg.bits[x]


@pytest.mark.parametrize("d,L", [(1, 2), (1, 5), (2, 2)])
def test_duality_exhaustive_small_grids(d, L):
    for r in range(100):
        _check_duality(Torus(d, L), simple(d), 3.0, stream(11, d, L, r))


def test_duality_exhaustive_all_initial_configurations():
    t = Torus(1, 4)
    rec = build_record(t, simple(1), 2.0, stream(12))
    for bits in itertools.product((0, 1), repeat=4):
        init = Configuration(t, np.array(bits))
        cfg = evolve(init, rec, 2.0)
        assert [query_dual(x, 2.0, rec, init) for x in range(4)] == list(cfg.bits)


@given(seed=st.integers(0, 2**32), L=st.integers(2, 5), horizon=st.floats(0.0, 4.0))
def test_duality_property(seed, L, horizon):
    _check_duality(Torus(1, L), simple(1), horizon, stream(seed), n_times=3)


@given(seed=st.integers(0, 2**32))
def test_monotone_coupling(seed):
    g = stream(seed)
    t = Torus(1, 6)
    rec = build_record(t, simple(1), 3.0, g)
    lo = sample_initial(t, 0.3, g)
    hi = Configuration(t, np.maximum(lo.bits, sample_initial(t, 0.5, g).bits))
    assert np.all(evolve(lo, rec, 3.0).bits <= evolve(hi, rec, 3.0).bits)


def test_consensus_is_absorbing():
    t = Torus(2, 4)
    rec = build_record(t, simple(2), 5.0, stream(13))
    for v in (0, 1):
        init = Configuration(t, np.full(16, v))
        assert np.all(evolve(init, rec, 5.0).bits == v)


# --- Monte Carlo checks -----------------------------------------------------


@pytest.mark.parametrize("t", [1.0, 5.0, 25.0])
def test_marginal_is_rho(t):
    mean, se = marginal_estimate(0, t, 0.4, simple(1), Torus(1, 16), 4000, 21)
    assert abs(mean - 0.4) < 4 * se


def test_two_point_limits():
    torus, k = Torus(1, 8), simple(1)
    m, _ = two_point_estimate(3, 3, 2.0, 0.3, k, torus, 4000, 22)
    m2, _ = marginal_estimate(3, 2.0, 0.3, k, torus, 4000, 22)
    assert m == m2
    m0, se0 = two_point_estimate(0, 1, 0.0, 0.3, k, torus, 20_000, 23)
    assert abs(m0 - 0.09) < 4 * se0


def test_two_point_matches_coalescence_formula():
    torus, k, rho, t = Torus(1, 32), simple(1), 0.5, 5.0
    est, se = two_point_estimate(0, 2, t, rho, k, torus, 20_000, 24)
    meet, se_meet = coalescence_probability(0, 2, t, k, torus, 20_000, 25)
    predicted = rho * rho + rho * (1 - rho) * meet
    combined = math.hypot(se, rho * (1 - rho) * se_meet)
    assert abs(est - predicted) < 3 * combined


def test_coalescence_probability_same_site():
    m, _ = coalescence_probability(1, 1, 1.0, simple(1), Torus(1, 8), 10, 0)
    assert m == 1.0


def test_estimates_independent_of_workers():
    args = (0, 1, 3.0, 0.5, simple(2), Torus(2, 6), 300, 26)
    assert two_point_estimate(*args, workers=1) == two_point_estimate(*args, workers=3)


# --- lazy environment ------------------------------------------------------


def test_lazy_environment_matches_materialized_record():
    k = simple(2)
    env = LazyEnvironment.from_seed(k, 0.5, 31, 0, side=4)
    rec = record_from_environment(env, 3.0)
    init = environment_initial(env)
    torus = rec.torus
    for t in (0.0, 0.7, 1.9, 3.0):
        cfg = evolve(init, rec, t)
        for c in torus.all_coords():
            assert env.value(c, t) == cfg.bits[torus.index(c)]
            end = env.dual(c, t)
            assert torus.index(end) == dual_walk(torus.index(c), t, rec).endpoint


def test_lazy_environment_is_deterministic():
    k = simple(3)
    a = LazyEnvironment.from_seed(k, 0.5, 7, 1)
    b = LazyEnvironment.from_seed(k, 0.5, 7, 1)
    x = (5, -3, 100)
    assert a.arrows(x, 0.0, 20.0) == b.arrows(x, 0.0, 20.0)
    assert a.dual(x, 20.0) == b.dual(x, 20.0)
    # arrows over a split window are the union of the parts
    assert a.arrows(x, 0.0, 20.0) == a.arrows(x, 0.0, 8.5) + a.arrows(x, 8.5, 20.0)


def test_lazy_environment_arrow_rate():
    k = Kernel(1, (((1,), 0.5), ((-1,), 0.5)), jump_rate=2.0)
    env = LazyEnvironment.from_seed(k, 0.5, 8, 0)
    n = sum(len(env.arrows((x,), 0.0, 50.0)) for x in range(40))
    assert abs(n - 4000) < 4 * math.sqrt(4000)
