from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pamvoter.exact import build_generator, exact_moment
from pamvoter.feynman_kac import (
    CheckpointError,
    ExperimentPlan,
    Interrupted,
    LogMeanExp,
    ReactantPath,
    accumulated_potential,
    estimate_moment,
    estimate_moment_reversed,
    fit_inverse_t,
    lyapunov_curve,
    replica_log_weights,
    sample_reactant,
)
from pamvoter.graphical import LazyEnvironment
from pamvoter.kernels import simple
from pamvoter.rng import combine, derive, root_key, stream
from pamvoter.voter import (
    Configuration,
    GraphicalRecord,
    Torus,
    build_record,
    evolve,
    record_from_environment,
    environment_initial,
    sample_initial,
)


# --- reactant paths ----------------------------------------------------------


def test_reactant_kappa_zero_stays_home():
    path = sample_reactant(0.0, 3, 10.0, stream(1))
    assert path.n_jumps == 0
    assert np.array_equal(path.position(7.0), [0, 0, 0])


def test_reactant_jump_count_and_steps():
    counts = [sample_reactant(0.5, 5, 2.0, stream(2, r)).n_jumps for r in range(2000)]
    # rate 2 d kappa = 5, so 10 jumps on average
    assert abs(np.mean(counts) - 10.0) < 4 * math.sqrt(10.0 / 2000)
    path = sample_reactant(0.5, 2, 5.0, stream(3))
    steps = np.diff(path.positions, axis=0)
    assert np.all(np.abs(steps).sum(axis=1) == 1)
    assert np.all(np.diff(path.jump_times) > 0) and path.jump_times[-1] <= 5.0


def test_reactant_deterministic_and_validated():
    a = sample_reactant(1.0, 2, 3.0, stream(4))
    b = sample_reactant(1.0, 2, 3.0, stream(4))
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.positions, b.positions)
    with pytest.raises(ValueError):
        sample_reactant(-1.0, 1, 1.0, stream(0))


# --- potential along a path --------------------------------------------------


def _still(d, t):
    return ReactantPath(0.0, d, t, np.empty(0), np.zeros((1, d), dtype=np.int64))


@pytest.mark.parametrize("v,expect", [(1, 3.0), (0, 0.0)])
def test_potential_constant_configurations(v, expect):
    torus = Torus(1, 5)
    rec = build_record(torus, simple(1), 3.0, stream(5))
    init = Configuration(torus, np.full(5, v))
    path = sample_reactant(1.0, 1, 3.0, stream(6))
    for direction in ("forward", "reversed"):
        assert accumulated_potential(path, rec, init, direction) == expect


def _midpoint_oracle(path, rec, init, direction, n=4000):
    # Riemann sum of xi at cell midpoints; exact up to O(1/n) per event crossing
    t = path.t
    torus = rec.torus
    total = 0.0
    for k in range(n):
        s = (k + 0.5) * t / n
        s_env = s if direction == "forward" else t - s
        cfg = evolve(init, rec, s_env)
        total += cfg.bits[torus.index(path.position(s))]
    return total * t / n


@pytest.mark.parametrize("direction", ["forward", "reversed"])
def test_potential_matches_riemann_sum(direction):
    torus = Torus(1, 4)
    g = stream(7)
    rec = build_record(torus, simple(1), 2.0, g)
    init = sample_initial(torus, 0.5, g)
    path = sample_reactant(1.0, 1, 2.0, g)
    exact = accumulated_potential(path, rec, init, direction)
    approx = _midpoint_oracle(path, rec, init, direction)
    n_cross = len(rec) + path.n_jumps
    assert abs(exact - approx) <= n_cross * 2.0 / 4000 + 1e-12


def test_potential_hand_case():
    torus = Torus(1, 2)
    rec = GraphicalRecord(torus, 4.0, np.array([0]), np.array([1]), np.array([1.0]))
    init = Configuration(torus, np.array([0, 1]))
    path = ReactantPath(1.0, 1, 4.0, np.array([3.0]), np.array([[0], [1]]))
    # site 0 is 0 on [0,1) then 1; walker at 0 on [0,3), at 1 after
    assert accumulated_potential(path, rec, init, "forward") == pytest.approx(3.0)
    # reversed: environment at 4 - s, so site 0 reads 1 for s in [0, 3)
    assert accumulated_potential(path, rec, init, "reversed") == pytest.approx(4.0)


def test_potential_rejects_bad_input():
    torus = Torus(1, 3)
    rec = build_record(torus, simple(1), 1.0, stream(8))
    init = sample_initial(torus, 0.5, stream(8))
    with pytest.raises(ValueError):
        accumulated_potential(_still(1, 2.0), rec, init)
    with pytest.raises(ValueError):
        accumulated_potential(_still(1, 1.0), rec, init, "sideways")


@pytest.mark.parametrize("direction", ["forward", "reversed"])
def test_lazy_weights_match_materialized_environment(direction):
    k, side, t, gamma, rho, seed, cell = simple(1), 6, 3.0, 0.7, 0.5, 41, 3
    logw = replica_log_weights(k, 1, 0.0, t, gamma, rho, seed, cell, 0, 20,
                               direction, side)
    for r in range(20):
        key = np.uint64(derive(root_key(seed), cell, r))
        env = LazyEnvironment(k, rho, int(combine(key, 1)), int(combine(key, 2)), side)
        rec = record_from_environment(env, t)
        init = environment_initial(env)
        ref = gamma * accumulated_potential(_still(1, t), rec, init, direction)
        assert logw[r] == pytest.approx(ref, abs=1e-12)


def test_replica_weights_are_pure_functions_of_index():
    k = simple(2)
    full = replica_log_weights(k, 2, 0.5, 2.0, 1.0, 0.5, 9, 0, 0, 40)
    part = replica_log_weights(k, 2, 0.5, 2.0, 1.0, 0.5, 9, 0, 25, 40)
    assert np.array_equal(full[25:], part)
    other = replica_log_weights(k, 2, 0.5, 2.0, 1.0, 0.5, 9, 1, 0, 40)
    assert not np.array_equal(full, other)


def test_replica_weights_independent_of_workers():
    k = simple(3)
    a = replica_log_weights(k, 2, 1.0, 5.0, 1.0, 0.5, 10, 0, 0, 600, workers=1)
    b = replica_log_weights(k, 2, 1.0, 5.0, 1.0, 0.5, 10, 0, 0, 600, workers=4)
    assert np.array_equal(a, b)


# --- estimators ----------------------------------------------------------------


@pytest.mark.parametrize("engine,side", [("lazy", 0), ("record", 5)])
def test_full_density_gives_gamma_exactly(engine, side):
    row = estimate_moment(2, 0.5, 3.0, 0.8, 1.0, 50, 11, side=side, engine=engine)
    assert abs(row.lambda_hat - 0.8) <= 1e-12
    assert row.se == 0.0


def test_pathwise_weights_for_full_density():
    logw = replica_log_weights(simple(2), 3, 1.0, 4.0, 0.5, 1.0, 12, 0, 0, 200)
    assert np.all(logw == 0.5 * 3 * 4.0)


def test_gamma_zero_gives_unit_moment():
    row = estimate_moment(2, 0.5, 3.0, 0.0, 0.5, 100, 13)
    assert abs(row.mean - 1.0) <= 1e-12


@pytest.mark.parametrize("p,kappa,t", [(1, 0.5, 1.0), (2, 0.0, 2.0), (2, 0.5, 1.0)])
def test_record_engine_matches_exact(p, kappa, t):
    gen = build_generator(Torus(1, 3), simple(1), p, kappa, 1.0)
    ref = exact_moment(gen, 0.5, t)
    row = estimate_moment(p, kappa, t, 1.0, 0.5, 4000, 14, side=3, engine="record")
    assert abs(row.mean - ref) < 3 * row.se_mean


@pytest.mark.parametrize("p,kappa,t", [(1, 0.5, 2.0), (2, 0.5, 2.0), (2, 0.0, 1.0)])
def test_lazy_engine_matches_exact(p, kappa, t):
    gen = build_generator(Torus(1, 4), simple(1), p, kappa, 1.0)
    ref = exact_moment(gen, 0.5, t)
    row = estimate_moment(p, kappa, t, 1.0, 0.5, 20_000, 15, side=4, cell=p * 10 + int(t))
    assert abs(row.mean - ref) < 3 * row.se_mean


def test_reversed_lazy_engine_matches_exact():
    gen = build_generator(Torus(1, 4), simple(1), 2, 0.5, 1.0)
    ref = exact_moment(gen, 0.5, 2.0, direction="reversed")
    row = estimate_moment_reversed(2, 0.5, 2.0, 1.0, 0.5, 20_000, 16, side=4)
    assert row.direction == "reversed"
    assert abs(row.mean - ref) < 3 * row.se_mean


def test_estimates_respect_bounds():
    row = estimate_moment(1, 1.0, 5.0, 1.0, 0.5, 500, 17, kernel=simple(3))
    assert 0.5 - 4 * row.se <= row.lambda_hat <= 1.0
    assert row.max_log_weight <= 5.0


def test_estimator_options_validated():
    with pytest.raises(ValueError):
        estimate_moment(1, 0.5, 1.0, 1.0, 0.5, 1, 0)
    with pytest.raises(ValueError):
        estimate_moment(1, 0.5, 1.0, 1.0, 0.5, 10, 0, engine="record")
    with pytest.raises(ValueError):
        estimate_moment(1, 0.5, 1.0, 1.0, 0.5, 10, 0, engine="warp")


# --- log-mean-exp aggregation --------------------------------------------------


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=60), st.integers(1, 10))
def test_logmeanexp_batch_invariance(xs, size):
    x = np.array(xs)
    whole = LogMeanExp()
    whole.update(x)
    parts = LogMeanExp()
    for i in range(0, len(x), size):
        parts.update(x[i:i + size])
    assert parts.count == whole.count
    assert parts.log_mean == pytest.approx(whole.log_mean, rel=1e-12, abs=1e-12)
    ref = float(np.log(np.mean(np.exp(x - x.max()))) + x.max())
    assert whole.log_mean == pytest.approx(ref, rel=1e-12, abs=1e-12)


@given(st.floats(500, 5000))
def test_logmeanexp_survives_huge_weights(offset):
    agg = LogMeanExp()
    agg.update(np.array([offset, offset + math.log(3.0)]))
    assert agg.log_mean == pytest.approx(offset + math.log(2.0), rel=1e-12)
    assert math.isfinite(agg.se_log_mean)


def test_logmeanexp_roundtrip_and_nan():
    agg = LogMeanExp()
    agg.update(np.array([0.0, 1.0, 2.0]))
    assert LogMeanExp.from_dict(json.loads(json.dumps(agg.to_dict()))) == agg
    with pytest.raises(FloatingPointError):
        agg.update(np.array([math.nan]))


def test_logmeanexp_standard_error_formula():
    x = np.log(np.array([1.0, 2.0, 3.0, 6.0]))
    agg = LogMeanExp()
    agg.update(x)
    w = np.exp(x)
    assert agg.se_mean == pytest.approx(w.std(ddof=1) / 2.0, rel=1e-12)


# --- curves and checkpoints -------------------------------------------------------


def _plan(**kw):
    base = dict(catalyst="simple(1)", kappas=(0.0, 1.0), ps=(1, 2), gamma=1.0, rho=0.5,
                ts=(1.0, 2.0), replicas=300, seed=5, batch_size=100)
    base.update(kw)
    return ExperimentPlan(**base)


def test_curve_full_density_is_exact():
    res = lyapunov_curve(_plan(rho=1.0))
    assert all(abs(r.lambda_hat - 1.0) <= 1e-12 for r in res.rows)
    assert len(res.rows) == 8 and len(res.fits) == 4


def test_checkpoint_resume_is_identical(tmp_path):
    plan = _plan()
    ref = lyapunov_curve(plan)
    ck = tmp_path / "ck.json"
    with pytest.raises(Interrupted):
        lyapunov_curve(plan, checkpoint=ck, stop_after=5)
    assert ck.exists()
    resumed = lyapunov_curve(plan, checkpoint=ck)
    assert resumed.rows == ref.rows
    # a finished checkpoint reproduces without recomputing
    assert lyapunov_curve(plan, checkpoint=ck, stop_after=0).rows == ref.rows


def test_checkpoint_rejects_corruption_and_other_plans(tmp_path):
    ck = tmp_path / "ck.json"
    lyapunov_curve(_plan(replicas=100), checkpoint=ck)
    with pytest.raises(CheckpointError):
        lyapunov_curve(_plan(replicas=200), checkpoint=ck)
    ck.write_text("{not json")
    with pytest.raises(CheckpointError):
        lyapunov_curve(_plan(replicas=100), checkpoint=ck)


def test_curve_independent_of_workers():
    plan = _plan(catalyst="simple(2)")
    assert lyapunov_curve(plan, workers=1).rows == lyapunov_curve(plan, workers=3).rows


def test_plan_validation_and_digest():
    assert _plan().digest() == _plan().digest()
    assert _plan().digest() != _plan(seed=6).digest()
    with pytest.raises(ValueError):
        _plan(kappas=())
    with pytest.raises(ValueError):
        _plan(directions=("up",))
    assert _plan(side=-1).resolved_side() >= 2


def test_fit_inverse_t_recovers_line():
    ts = np.array([10.0, 20.0, 40.0, 80.0])
    fit = fit_inverse_t(ts, 0.7 + 3.0 / ts, np.full(4, 0.01))
    assert fit["intercept"] == pytest.approx(0.7)
    assert fit["slope"] == pytest.approx(3.0)
    assert not fit["curvature_warning"]
    curved = fit_inverse_t(ts, 0.7 + 30.0 / ts ** 2, np.full(4, 1e-4))
    assert curved["curvature_warning"]
    assert math.isnan(fit_inverse_t([1.0], [1.0], [0.1])["intercept"])


def test_forward_and_reversed_estimates_agree_for_one_walker():
    fwd = estimate_moment(1, 0.5, 2.0, 1.0, 0.5, 100_000, 18, side=4, workers=4)
    rev = estimate_moment_reversed(1, 0.5, 2.0, 1.0, 0.5, 100_000, 18, side=4, workers=4,
                                   cell=1)
    assert abs(fwd.mean - rev.mean) < 3 * math.hypot(fwd.se_mean, rev.se_mean)
