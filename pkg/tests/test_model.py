import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ascontrol import chains
from ascontrol.errors import DimensionMismatchError
from ascontrol.instances import random_instance, random_state
from ascontrol.logspace import logsumexp
from ascontrol.model import (CompleteState, ConditionalTable, GenerativeModel,
                             ModelSpec, RecognitionContext, RecognitionModel,
                             load_models, recognition_logprob, sample_trajectory,
                             sample_transition, save_models, tick_levels,
                             trajectory_logprob, transition_logprob)
from conftest import uniform_instance

SPEC2 = ModelSpec(2, 2, 2, 2, 2, 2)


# ---------------------------------------------------------------------------
# tick schedule


def test_tick_levels_examples():
    assert tick_levels(1, SPEC2) == {1, 2}
    assert tick_levels(2, SPEC2) == {1}
    assert tick_levels(3, SPEC2) == {1, 2}


def test_tick_levels_rejects_zero():
    with pytest.raises(ValueError):
        tick_levels(0, SPEC2)


@given(t=st.integers(min_value=1, max_value=1000),
       period=st.integers(min_value=1, max_value=7))
def test_tick_levels_period(t, period):
    spec = ModelSpec(2, 2, 2, 2, 2, 2, tick_period_level2=period)
    levels = tick_levels(t, spec)
    assert 1 in levels
    assert (2 in levels) == ((t - 1) % period == 0)


# ---------------------------------------------------------------------------
# conditional tables


def test_table_rejects_bad_rows():
    with pytest.raises(ValueError):
        ConditionalTable((2,), 2, np.array([[0.7, 0.2], [0.5, 0.5]]))


def test_table_floor_keeps_rows_normalized():
    t = ConditionalTable((1,), 3, np.array([[1.0, 0.0, 0.0]]), strictly_positive=True)
    assert abs(t.probs.sum() - 1.0) < 1e-12
    assert t.probs.min() >= 1e-12


def test_table_row_indexing_row_major():
    probs = np.arange(8, dtype=float).reshape(4, 2)
    probs /= probs.sum(axis=1, keepdims=True)
    t = ConditionalTable((2, 2), 2, probs, strictly_positive=False)
    assert t.row_index((1, 0)) == 2
    assert np.array_equal(t.row((0, 1)), probs[1])


# ---------------------------------------------------------------------------
# transition log-probabilities


def test_transition_uniform_tick():
    gen, _, _ = uniform_instance()
    x = CompleteState(0, 0, 0, 0, 0, 0)
    for flat in range(SPEC2.n_states):
        lp = transition_logprob(gen, x, CompleteState.from_flat(flat, SPEC2), t=1)
        assert lp == pytest.approx(math.log(1 / 64), abs=1e-12)


def test_transition_hold_blocks_s2_change():
    gen, _, _ = uniform_instance()
    x = CompleteState(0, 0, 0, 0, 0, 0)
    flipped = CompleteState(0, 0, 1, 0, 0, 0)
    assert transition_logprob(gen, x, flipped, t=2) == -math.inf
    held = CompleteState(1, 1, 0, 1, 1, 1)
    assert transition_logprob(gen, x, held, t=2) == pytest.approx(
        math.log(1 / 32), abs=1e-12)


def test_transition_dimension_error():
    gen, _, _ = uniform_instance()
    small = CompleteState(0, 0, 0, 0, 0, 0)
    with pytest.raises(DimensionMismatchError):
        transition_logprob(gen, small, CompleteState(5, 0, 0, 0, 0, 0), t=1)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("t", [1, 2])
def test_transition_normalizes(seed, t):
    gen, _, _ = random_instance(seed)
    rng = np.random.default_rng(seed)
    x = random_state(rng, gen.spec)
    lps = [transition_logprob(gen, x, CompleteState.from_flat(i, gen.spec), t)
           for i in range(gen.spec.n_states)]
    assert np.exp(logsumexp(np.array(lps))) == pytest.approx(1.0, abs=1e-10)


def test_transition_matches_matrix_builder():
    gen, _, _ = random_instance(5)
    rng = np.random.default_rng(5)
    x = random_state(rng, gen.spec)
    for t, tick in ((1, True), (2, False)):
        mat = chains.transition_matrix(gen, tick)
        for flat in (0, 17, 63):
            lp = transition_logprob(gen, x, CompleteState.from_flat(flat, gen.spec), t)
            assert np.exp(lp) == pytest.approx(mat[x.flat(gen.spec), flat], abs=1e-12)


# ---------------------------------------------------------------------------
# trajectories


def test_trajectory_logprob_uniform():
    gen, _, _ = uniform_instance()
    x0 = CompleteState(0, 0, 0, 0, 0, 0)
    rng = np.random.default_rng(1)
    traj = sample_trajectory(gen, x0, 2, rng)
    assert trajectory_logprob(gen, traj) == pytest.approx(
        math.log(1 / 64) + math.log(1 / 32), abs=1e-12)


def test_trajectory_logprob_is_sum_of_steps():
    gen, _, _ = random_instance(7)
    x0 = CompleteState(0, 0, 0, 0, 0, 0)
    rng = np.random.default_rng(7)
    traj = sample_trajectory(gen, x0, 3, rng)
    total = sum(transition_logprob(gen, prev, cur, t)
                for t, (prev, cur) in enumerate(
                    zip((x0,) + traj.steps[:-1], traj.steps), start=1))
    assert trajectory_logprob(gen, traj) == pytest.approx(total, abs=1e-12)


def test_trajectory_hold_violation_is_minus_inf():
    gen, _, _ = random_instance(7)
    x0 = CompleteState(0, 0, 0, 0, 0, 0)
    rng = np.random.default_rng(7)
    traj = sample_trajectory(gen, x0, 2, rng)
    bad_second = CompleteState(traj.steps[1].o, traj.steps[1].s1,
                               1 - traj.steps[0].s2, traj.steps[1].a,
                               traj.steps[1].a1, traj.steps[1].a2)
    from ascontrol.model import Trajectory
    bad = Trajectory(x0, (traj.steps[0], bad_second))
    assert trajectory_logprob(gen, bad) == -math.inf
    assert not bad.hold_respected(gen.spec)


def test_sampled_trajectories_respect_hold():
    gen, _, _ = random_instance(3)
    x0 = CompleteState(0, 0, 0, 0, 0, 0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        assert sample_trajectory(gen, x0, 6, rng).hold_respected(gen.spec)


# ---------------------------------------------------------------------------
# sampling


def test_sample_transition_deterministic_model():
    spec = ModelSpec(2, 2, 2, 2, 2, 2)
    gen = GenerativeModel(
        spec,
        lik=ConditionalTable.one_hot((2, 2), 2, lambda a1, s1: s1),
        dyn1=ConditionalTable.one_hot((2, 2, 2), 2, lambda s1, s2, a: 1 - s1),
        dyn2=ConditionalTable.one_hot((2, 2), 2, lambda s2, a: s2),
        pol0=ConditionalTable.one_hot((2, 2), 2, lambda o, a1: o),
        pol1=ConditionalTable.one_hot((2, 2), 2, lambda s1, a2: s1),
        pol2=ConditionalTable.one_hot((2,), 2, lambda s2: s2),
    )
    x = CompleteState(0, 0, 1, 0, 0, 0)
    got = sample_transition(gen, x, 1, np.random.default_rng(0))
    assert got == CompleteState(o=1, s1=1, s2=1, a=1, a1=1, a2=1)


def test_sample_transition_same_seed_same_result():
    gen, _, _ = random_instance(11)
    x = CompleteState(1, 0, 1, 0, 1, 0)
    a = sample_transition(gen, x, 2, np.random.default_rng(123))
    b = sample_transition(gen, x, 2, np.random.default_rng(123))
    assert a == b


def test_sample_transition_frequencies():
    gen, _, _ = uniform_instance()
    spec = gen.spec
    x = CompleteState(0, 0, 0, 0, 0, 0)
    n = 100_000
    rng = np.random.default_rng(99)
    counts = np.zeros(spec.n_states)
    for _ in range(n):
        counts[sample_transition(gen, x, 1, rng).flat(spec)] += 1
    p = 1 / 64
    se = math.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * se + 1e-9)


# ---------------------------------------------------------------------------
# recognition model


def test_recognition_uniform_logprob():
    _, rec, _ = uniform_instance()
    ctx = RecognitionContext(o=0, a=1, x_prev=CompleteState(0, 0, 0, 0, 0, 0),
                             future=None)
    lp = recognition_logprob(rec, (0, 1, 0, 1), ctx)
    assert lp == pytest.approx(math.log(1 / 16), abs=1e-12)


def test_recognition_one_hot_logprob():
    spec = ModelSpec(2, 2, 2, 2, 2, 2)
    shapes = RecognitionModel.factor_shapes(spec)
    tables = {}
    for name, shape in shapes.items():
        t = np.zeros(shape)
        t[..., 0] = 1.0
        tables[name] = t
    rec = RecognitionModel.from_tables(spec, tables)
    ctx = RecognitionContext(o=1, a=0, x_prev=CompleteState(0, 0, 0, 0, 0, 0),
                             future=2)
    assert recognition_logprob(rec, (0, 0, 0, 0), ctx) == 0.0
    assert recognition_logprob(rec, (1, 0, 0, 0), ctx) == -math.inf


@pytest.mark.parametrize("seed", [0, 4])
@pytest.mark.parametrize("tick", [True, False])
def test_recognition_normalizes(seed, tick):
    _, rec, _ = random_instance(seed)
    rng = np.random.default_rng(seed)
    spec = rec.spec
    ctx = RecognitionContext(o=int(rng.integers(2)), a=int(rng.integers(2)),
                             x_prev=random_state(rng, spec), future=None)
    total = 0.0
    for s1 in range(2):
        for s2 in range(2):
            for a1 in range(2):
                for a2 in range(2):
                    total += math.exp(
                        recognition_logprob(rec, (s1, s2, a1, a2), ctx, tick=tick))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_recognition_hold_pins_s2():
    _, rec, _ = random_instance(2)
    ctx = RecognitionContext(o=0, a=0, x_prev=CompleteState(0, 0, 1, 0, 0, 0),
                             future=None)
    joint = rec.joint(ctx, tick=False)
    assert joint.sum(axis=(0, 2, 3))[0] == 0.0
    assert joint.sum(axis=(0, 2, 3))[1] == pytest.approx(1.0, abs=1e-12)


def test_recognition_logits_deterministic():
    spec = ModelSpec(2, 2, 2, 2, 2, 2)
    a = RecognitionModel.from_seed(spec, 42)
    b = RecognitionModel.from_seed(spec, 42)
    assert all(np.array_equal(a.tables[k], b.tables[k]) for k in a.tables)


def test_recognition_latent_range_check():
    _, rec, _ = random_instance(2)
    ctx = RecognitionContext(o=0, a=0, x_prev=CompleteState(0, 0, 0, 0, 0, 0))
    with pytest.raises(DimensionMismatchError):
        recognition_logprob(rec, (2, 0, 0, 0), ctx)


# ---------------------------------------------------------------------------
# serialization


def test_round_trip_bit_exact(tmp_path):
    gen, rec, ref = random_instance(9, floor=True)
    path = tmp_path / "model.json"
    save_models(path, gen, rec, ref)
    gen2, rec2, ref2 = load_models(path)
    for name in gen.table_names:
        assert np.array_equal(getattr(gen, name).probs, getattr(gen2, name).probs)
    for name in ref.table_names:
        assert np.array_equal(getattr(ref, name).probs, getattr(ref2, name).probs)
    for name in rec.tables:
        assert np.array_equal(rec.tables[name], rec2.tables[name])


def test_loader_rejects_denormalized_rows(tmp_path):
    gen, rec, ref = random_instance(9)
    path = tmp_path / "model.json"
    save_models(path, gen, rec, ref)
    import json

    doc = json.loads(path.read_text())
    doc["tables"]["lik"]["rows"][0][0] += 1e-3
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_models(path)


def test_loader_renormalizes_small_deviations(tmp_path):
    gen, rec, ref = random_instance(9)
    path = tmp_path / "model.json"
    save_models(path, gen, rec, ref)
    import json

    doc = json.loads(path.read_text())
    doc["tables"]["lik"]["rows"][0][0] += 1e-9
    path.write_text(json.dumps(doc))
    gen2, _, _ = load_models(path)
    assert abs(gen2.lik.probs[0].sum() - 1.0) < 1e-12
