import numpy as np
import pytest

from ascontrol.instances import random_instance, random_state
from ascontrol.model import (CompleteState, ConditionalTable, GenerativeModel,
                             ModelSpec, RecognitionModel, ReferenceModel)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def uniform_instance(cards=(2, 2, 2, 2, 2, 2), floor=False):
    """Uniform tables everywhere, including the recognition factors."""
    spec = ModelSpec(*cards)
    gen = GenerativeModel.uniform(spec, strictly_positive=floor)
    ref = ReferenceModel.uniform(spec, strictly_positive=floor)
    shapes = RecognitionModel.factor_shapes(spec)
    rec = RecognitionModel.from_tables(
        spec, {k: np.full(s, 1.0 / s[-1]) for k, s in shapes.items()})
    return gen, rec, ref


def two_cycle_instance(cost_hi=1.0):
    """Deterministic two-state cycle with edge costs {0, cost_hi} (up to a
    constant) and no action choice: entering o=1 costs `cost_hi` nats more
    than entering o=0 via the observation-reference table."""
    spec = ModelSpec(2, 2, 1, 1, 1, 1)
    e = np.exp(-cost_hi)
    gen = GenerativeModel(
        spec,
        lik=ConditionalTable.one_hot((1, 2), 2, lambda a1, s1: s1),
        dyn1=ConditionalTable.one_hot((2, 1, 1), 2, lambda s1, s2, a: 1 - s1),
        dyn2=ConditionalTable.uniform((1, 1), 1, False),
        pol0=ConditionalTable.uniform((2, 1), 1, False),
        pol1=ConditionalTable.uniform((2, 1), 1, False),
        pol2=ConditionalTable.uniform((1,), 1, False),
    )
    ref = ReferenceModel(
        spec,
        ref_o=ConditionalTable((1,), 2, np.array([[1 - e, e]]),
                               strictly_positive=False),
        ref_s1=ConditionalTable.uniform((1,), 2, False),
    )
    shapes = RecognitionModel.factor_shapes(spec)
    tables = {k: np.full(s, 1.0 / s[-1]) for k, s in shapes.items()}
    exact_s1 = np.zeros(shapes["s1"])
    for o in range(2):
        exact_s1[:, o, :, :, :, :, o] = 1.0
    tables["s1"] = exact_s1
    rec = RecognitionModel.from_tables(spec, tables)
    return gen, rec, ref


__all__ = ["random_instance", "random_state", "uniform_instance",
           "two_cycle_instance", "CompleteState"]
