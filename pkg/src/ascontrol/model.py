"""Hierarchical categorical models on a two-timescale tick schedule.

The complete state of a time step is x = (o, s1, s2, a, a1, a2): an
observation, a fast and a slow latent, and three action/reference
variables. One-step dynamics factor as

    p(x_t | x_{t-1}) = dyn2(s2 | s2_prev, a_prev)   [level 2, only on ticks]
                     * pol2(a2 | s2)
                     * dyn1(s1 | s1_prev, s2, a_prev)
                     * pol1(a1 | s1, a2)
                     * lik(o | a1, s1)
                     * pol0(a | o, a1)

On non-tick steps the slow latent holds deterministically. Reference
tables score states (ref_o over observations, ref_s1 over fast latents),
and a recognition model carries per-step beliefs over the four latent
variables, conditioned on (o_t, a_t, x_{t-1}) and a summary of the next
step (the next observation, or a designated no-future sentinel).

Everything is immutable after construction; sampling takes an explicit
numpy Generator so parallel callers use independent streams.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from .logspace import safe_log

TABLE_ROW_TOL = 1e-12
LOAD_REJECT_TOL = 1e-6
POSITIVITY_FLOOR = 1e-12

FILE_VERSION = 1


# ---------------------------------------------------------------------------
# specs and states


@dataclass(frozen=True)
class ModelSpec:
    """Domain cardinalities and the level-2 tick period."""

    card_o: int
    card_s1: int
    card_s2: int
    card_a: int
    card_a1: int
    card_a2: int
    tick_period_level2: int = 2

    def __post_init__(self):
        for name in ("card_o", "card_s1", "card_s2", "card_a", "card_a1", "card_a2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tick_period_level2 < 1:
            raise ValueError("tick_period_level2 must be >= 1")

    @property
    def dims(self):
        """Component cardinalities in complete-state order (o, s1, s2, a, a1, a2)."""
        return (self.card_o, self.card_s1, self.card_s2,
                self.card_a, self.card_a1, self.card_a2)

    @property
    def n_states(self):
        return int(np.prod(self.dims))

    @property
    def n_latents(self):
        """Joint cardinality of (s1, s2, a1, a2)."""
        return self.card_s1 * self.card_s2 * self.card_a1 * self.card_a2

    @property
    def latent_dims(self):
        return (self.card_s1, self.card_s2, self.card_a1, self.card_a2)

    def to_dict(self):
        return {
            "card_o": self.card_o, "card_s1": self.card_s1, "card_s2": self.card_s2,
            "card_a": self.card_a, "card_a1": self.card_a1, "card_a2": self.card_a2,
            "tick_period_level2": self.tick_period_level2,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class CompleteState:
    """One time slice x = (o, s1, s2, a, a1, a2), all index-valued."""

    o: int
    s1: int
    s2: int
    a: int
    a1: int
    a2: int

    def validate(self, spec):
        vals = (self.o, self.s1, self.s2, self.a, self.a1, self.a2)
        for v, dim, name in zip(vals, spec.dims, ("o", "s1", "s2", "a", "a1", "a2")):
            if not 0 <= v < dim:
                raise DimensionMismatchError(
                    f"state component {name}={v} out of range [0, {dim})")
        return self

    def flat(self, spec):
        return int(np.ravel_multi_index(
            (self.o, self.s1, self.s2, self.a, self.a1, self.a2), spec.dims))

    @classmethod
    def from_flat(cls, idx, spec):
        o, s1, s2, a, a1, a2 = np.unravel_index(idx, spec.dims)
        return cls(int(o), int(s1), int(s2), int(a), int(a1), int(a2))

    def astuple(self):
        return (self.o, self.s1, self.s2, self.a, self.a1, self.a2)


@dataclass(frozen=True)
class Trajectory:
    """An episode: context x0 plus the states for t = 1..T."""

    x0: CompleteState
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self):
        return len(self.steps)

    def hold_respected(self, spec):
        """True iff s2 is unchanged on every non-tick step."""
        prev = self.x0
        for t, x in enumerate(self.steps, start=1):
            if 2 not in tick_levels(t, spec) and x.s2 != prev.s2:
                return False
            prev = x
        return True


def tick_levels(t, spec):
    """Which hierarchy levels transition at step t (level 1 always does)."""
    if t < 1:
        raise ValueError("time index starts at 1")
    levels = {1}
    if (t - 1) % spec.tick_period_level2 == 0:
        levels.add(2)
    return levels


def tick_at(t, spec):
    return (t - 1) % spec.tick_period_level2 == 0


# ---------------------------------------------------------------------------
# conditional tables


def _floor_rows(rows, child_dim, eps=POSITIVITY_FLOOR):
    # mixture with uniform: keeps rows normalized and every entry >= eps
    return (1.0 - child_dim * eps) * rows + eps


class ConditionalTable:
    """A normalized categorical distribution per parent configuration.

    Rows are indexed row-major over `parent_dims`. With the strictly
    positive flag (default) every entry is floored at 1e-12 by mixing
    with the uniform distribution, so logs stay finite.
    """

    __slots__ = ("parent_dims", "child_dim", "probs", "strictly_positive")

    def __init__(self, parent_dims, child_dim, probs, strictly_positive=True,
                 _renormalize=True):
        parent_dims = tuple(int(d) for d in parent_dims)
        n_rows = int(np.prod(parent_dims)) if parent_dims else 1
        probs = np.array(probs, dtype=float).reshape(n_rows, child_dim)
        if np.any(probs < 0):
            raise ValueError("negative probability entry")
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > LOAD_REJECT_TOL):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ValueError(f"row normalization off by {worst:.3e}")
        if _renormalize:
            bad = np.abs(sums - 1.0) > TABLE_ROW_TOL
            if np.any(bad):
                probs = probs.copy()
                probs[bad] /= sums[bad, None]
        if strictly_positive:
            probs = _floor_rows(probs, child_dim)
        probs = np.ascontiguousarray(probs)
        probs.setflags(write=False)
        self.parent_dims = parent_dims
        self.child_dim = int(child_dim)
        self.probs = probs
        self.strictly_positive = bool(strictly_positive)

    @property
    def n_rows(self):
        return self.probs.shape[0]

    def row_index(self, parents):
        if len(parents) != len(self.parent_dims):
            raise DimensionMismatchError(
                f"expected {len(self.parent_dims)} parents, got {len(parents)}")
        if not self.parent_dims:
            return 0
        return int(np.ravel_multi_index(tuple(parents), self.parent_dims))

    def row(self, parents):
        return self.probs[self.row_index(parents)]

    def prob(self, parents, child):
        return float(self.probs[self.row_index(parents), child])

    def logprob(self, parents, child):
        return float(safe_log(self.prob(parents, child)))

    def sample(self, parents, rng):
        r = self.probs[self.row_index(parents)]
        return int(np.searchsorted(np.cumsum(r), rng.random(), side="right").clip(0, self.child_dim - 1))

    def reshaped(self):
        """View shaped parent_dims + (child_dim,)."""
        return self.probs.reshape(self.parent_dims + (self.child_dim,))

    # constructors ----------------------------------------------------------

    @classmethod
    def uniform(cls, parent_dims, child_dim, strictly_positive=True):
        n_rows = int(np.prod(parent_dims)) if parent_dims else 1
        probs = np.full((n_rows, child_dim), 1.0 / child_dim)
        return cls(parent_dims, child_dim, probs, strictly_positive)

    @classmethod
    def one_hot(cls, parent_dims, child_dim, pick, strictly_positive=False):
        """`pick` maps a parent index tuple to the selected child index."""
        parent_dims = tuple(parent_dims)
        n_rows = int(np.prod(parent_dims)) if parent_dims else 1
        probs = np.zeros((n_rows, child_dim))
        for flat in range(n_rows):
            parents = np.unravel_index(flat, parent_dims) if parent_dims else ()
            probs[flat, pick(*(int(p) for p in parents))] = 1.0
        return cls(parent_dims, child_dim, probs, strictly_positive)

    @classmethod
    def random(cls, parent_dims, child_dim, rng, strictly_positive=True,
               concentration=1.0):
        n_rows = int(np.prod(parent_dims)) if parent_dims else 1
        probs = rng.dirichlet(np.full(child_dim, concentration), size=n_rows)
        return cls(parent_dims, child_dim, probs, strictly_positive)

    @classmethod
    def from_logits(cls, parent_dims, child_dim, logits, strictly_positive=False):
        return cls(parent_dims, child_dim, softmax_rows(np.asarray(logits, dtype=float)),
                   strictly_positive, _renormalize=False)

    def to_dict(self):
        return {
            "parents": list(self.parent_dims),
            "child": self.child_dim,
            "rows": self.probs.tolist(),
            "strictly_positive": self.strictly_positive,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["parents"]), d["child"], np.array(d["rows"], dtype=float),
                   strictly_positive=False)


def softmax_rows(logits):
    """Row-wise softmax tolerating -inf logits (zero probability)."""
    logits = np.atleast_2d(logits)
    m = np.max(logits, axis=1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise ValueError("softmax row with no finite logit")
    with np.errstate(over="ignore"):
        e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# generative, reference, recognition models


def _expect_dims(table, parent_dims, child_dim, name):
    if table.parent_dims != tuple(parent_dims) or table.child_dim != child_dim:
        raise DimensionMismatchError(
            f"table {name}: expected parents {tuple(parent_dims)} -> {child_dim}, "
            f"got {table.parent_dims} -> {table.child_dim}")


@dataclass(frozen=True)
class GenerativeModel:
    """The six conditional tables of the hierarchical model."""

    spec: ModelSpec
    lik: ConditionalTable    # (a1, s1) -> o
    dyn1: ConditionalTable   # (s1_prev, s2, a_prev) -> s1
    dyn2: ConditionalTable   # (s2_prev, a_prev) -> s2
    pol0: ConditionalTable   # (o, a1) -> a
    pol1: ConditionalTable   # (s1, a2) -> a1
    pol2: ConditionalTable   # (s2,) -> a2

    def __post_init__(self):
        s = self.spec
        _expect_dims(self.lik, (s.card_a1, s.card_s1), s.card_o, "lik")
        _expect_dims(self.dyn1, (s.card_s1, s.card_s2, s.card_a), s.card_s1, "dyn1")
        _expect_dims(self.dyn2, (s.card_s2, s.card_a), s.card_s2, "dyn2")
        _expect_dims(self.pol0, (s.card_o, s.card_a1), s.card_a, "pol0")
        _expect_dims(self.pol1, (s.card_s1, s.card_a2), s.card_a1, "pol1")
        _expect_dims(self.pol2, (s.card_s2,), s.card_a2, "pol2")

    table_names = ("lik", "dyn1", "dyn2", "pol0", "pol1", "pol2")

    @classmethod
    def uniform(cls, spec, strictly_positive=True):
        s = spec
        return cls(
            spec,
            lik=ConditionalTable.uniform((s.card_a1, s.card_s1), s.card_o, strictly_positive),
            dyn1=ConditionalTable.uniform((s.card_s1, s.card_s2, s.card_a), s.card_s1, strictly_positive),
            dyn2=ConditionalTable.uniform((s.card_s2, s.card_a), s.card_s2, strictly_positive),
            pol0=ConditionalTable.uniform((s.card_o, s.card_a1), s.card_a, strictly_positive),
            pol1=ConditionalTable.uniform((s.card_s1, s.card_a2), s.card_a1, strictly_positive),
            pol2=ConditionalTable.uniform((s.card_s2,), s.card_a2, strictly_positive),
        )

    @classmethod
    def random(cls, spec, rng, strictly_positive=True):
        s = spec
        make = lambda parents, child: ConditionalTable.random(parents, child, rng, strictly_positive)
        return cls(
            spec,
            lik=make((s.card_a1, s.card_s1), s.card_o),
            dyn1=make((s.card_s1, s.card_s2, s.card_a), s.card_s1),
            dyn2=make((s.card_s2, s.card_a), s.card_s2),
            pol0=make((s.card_o, s.card_a1), s.card_a),
            pol1=make((s.card_s1, s.card_a2), s.card_a1),
            pol2=make((s.card_s2,), s.card_a2),
        )

    def replace_policies(self, pol0=None, pol1=None, pol2=None):
        return GenerativeModel(self.spec, self.lik, self.dyn1, self.dyn2,
                               pol0 or self.pol0, pol1 or self.pol1, pol2 or self.pol2)


@dataclass(frozen=True)
class ReferenceModel:
    """Preference densities: ref_o scores observations given a1, ref_s1 scores
    fast latents given a2."""

    spec: ModelSpec
    ref_o: ConditionalTable   # (a1,) -> o
    ref_s1: ConditionalTable  # (a2,) -> s1

    def __post_init__(self):
        s = self.spec
        _expect_dims(self.ref_o, (s.card_a1,), s.card_o, "ref_o")
        _expect_dims(self.ref_s1, (s.card_a2,), s.card_s1, "ref_s1")

    table_names = ("ref_o", "ref_s1")

    @classmethod
    def uniform(cls, spec, strictly_positive=True):
        return cls(spec,
                   ConditionalTable.uniform((spec.card_a1,), spec.card_o, strictly_positive),
                   ConditionalTable.uniform((spec.card_a2,), spec.card_s1, strictly_positive))

    @classmethod
    def random(cls, spec, rng, strictly_positive=True):
        return cls(spec,
                   ConditionalTable.random((spec.card_a1,), spec.card_o, rng, strictly_positive),
                   ConditionalTable.random((spec.card_a2,), spec.card_s1, rng, strictly_positive))


@dataclass(frozen=True)
class RecognitionContext:
    """Conditioning set for a per-step belief: (o_t, a_t, x_{t-1}, future).

    `future` is the next observation index, or None for the no-future
    (filtering) sentinel.
    """

    o: int
    a: int
    x_prev: CompleteState
    future: object = None  # int | None


# recognition factor order: s2, then a2 | s2, then s1 | (s2, a2), then a1 | (s1, a2)
REC_FACTORS = ("s2", "a2", "s1", "a1")


class RecognitionModel:
    """Per-step belief over (s1, s2, a1, a2), factored in topological order.

    Each factor is parameterized by unconstrained logits; tables are the
    row-softmax of the logits, computed once at construction (the mapping
    is deterministic). The future-summary axis has card_o + 1 entries,
    the last being the no-future sentinel. On non-tick steps the s2
    factor is replaced by the deterministic level-2 hold.
    """

    __slots__ = ("spec", "logits", "tables")

    def __init__(self, spec, logits, _tables=None):
        self.spec = spec
        shapes = self.factor_shapes(spec)
        clean = {}
        for name in REC_FACTORS:
            arr = np.ascontiguousarray(np.array(logits[name], dtype=float))
            if arr.shape != shapes[name]:
                raise DimensionMismatchError(
                    f"recognition factor {name}: expected logits {shapes[name]}, got {arr.shape}")
            arr.setflags(write=False)
            clean[name] = arr
        self.logits = clean
        if _tables is None:
            self.tables = {name: softmax_rows(self.logits[name].reshape(-1, shapes[name][-1]))
                           .reshape(shapes[name]) for name in REC_FACTORS}
        else:
            self.tables = {name: np.ascontiguousarray(np.array(_tables[name], dtype=float))
                           for name in REC_FACTORS}
        for t in self.tables.values():
            t.setflags(write=False)

    @property
    def n_future(self):
        return self.spec.card_o + 1

    @property
    def future_sentinel(self):
        return self.spec.card_o

    @staticmethod
    def factor_shapes(spec):
        n, o, a, f = spec.n_states, spec.card_o, spec.card_a, spec.card_o + 1
        return {
            "s2": (n, o, a, f, spec.card_s2),
            "a2": (n, o, a, f, spec.card_s2, spec.card_a2),
            "s1": (n, o, a, f, spec.card_s2, spec.card_a2, spec.card_s1),
            "a1": (n, o, a, f, spec.card_s1, spec.card_a2, spec.card_a1),
        }

    @classmethod
    def from_seed(cls, spec, seed):
        rng = np.random.default_rng(seed)
        shapes = cls.factor_shapes(spec)
        return cls(spec, {name: rng.standard_normal(shapes[name]) for name in REC_FACTORS})

    @classmethod
    def from_tables(cls, spec, tables):
        """Build from explicit probability tables, kept bit-exact; the logits
        are their logs, so the softmax mapping reproduces them (including
        hard zeros)."""
        tables = {name: np.asarray(tables[name], dtype=float)
                  for name in REC_FACTORS}
        return cls(spec, {name: safe_log(tables[name]) for name in REC_FACTORS},
                   _tables=tables)

    def _fut_index(self, future):
        return self.future_sentinel if future is None else int(future)

    def joint(self, context, tick=True):
        """Belief over latent tuples, shaped (card_s1, card_s2, card_a1, card_a2)."""
        sp = self.spec
        xp = context.x_prev.validate(sp).flat(sp)
        o, a, f = int(context.o), int(context.a), self._fut_index(context.future)
        if not 0 <= o < sp.card_o or not 0 <= a < sp.card_a or not 0 <= f < self.n_future:
            raise DimensionMismatchError("recognition context index out of range")
        if tick:
            q_s2 = self.tables["s2"][xp, o, a, f]
        else:
            q_s2 = np.zeros(sp.card_s2)
            q_s2[context.x_prev.s2] = 1.0
        q_a2 = self.tables["a2"][xp, o, a, f]          # (s2, a2)
        q_s1 = self.tables["s1"][xp, o, a, f]          # (s2, a2, s1)
        q_a1 = self.tables["a1"][xp, o, a, f]          # (s1, a2, a1)
        joint = np.einsum("X,XA,XAs,sAb->sXbA", q_s2, q_a2, q_s1, q_a1)
        return joint  # axes (s1, s2, a1, a2)

    def with_logits(self, logits):
        return RecognitionModel(self.spec, logits)


def recognition_logprob(rec, latents, context, tick=True):
    """Log-probability of a latent tuple (s1, s2, a1, a2) under the factored
    belief for the given context."""
    s1, s2, a1, a2 = latents
    sp = rec.spec
    for v, dim, name in zip((s1, s2, a1, a2),
                            (sp.card_s1, sp.card_s2, sp.card_a1, sp.card_a2),
                            ("s1", "s2", "a1", "a2")):
        if not 0 <= v < dim:
            raise DimensionMismatchError(f"latent {name}={v} out of range [0, {dim})")
    joint = rec.joint(context, tick=tick)
    return float(safe_log(joint[s1, s2, a1, a2]))


# ---------------------------------------------------------------------------
# transition evaluation and sampling


def transition_logprob(gen, x_prev, x, t):
    """Log p(x_t = x | x_{t-1} = x_prev) under the tick schedule."""
    spec = gen.spec
    x_prev.validate(spec)
    x.validate(spec)
    tick = tick_at(t, spec)
    lp = 0.0
    if tick:
        lp += gen.dyn2.logprob((x_prev.s2, x_prev.a), x.s2)
    elif x.s2 != x_prev.s2:
        return float("-inf")
    lp += gen.pol2.logprob((x.s2,), x.a2)
    lp += gen.dyn1.logprob((x_prev.s1, x.s2, x_prev.a), x.s1)
    lp += gen.pol1.logprob((x.s1, x.a2), x.a1)
    lp += gen.lik.logprob((x.a1, x.s1), x.o)
    lp += gen.pol0.logprob((x.o, x.a1), x.a)
    return lp


def trajectory_logprob(gen, traj):
    """Sum of per-step transition log-probabilities; -inf propagates."""
    if not traj.steps:
        raise ValueError("trajectory has no steps")
    total = 0.0
    prev = traj.x0
    for t, x in enumerate(traj.steps, start=1):
        lp = transition_logprob(gen, prev, x, t)
        if lp == float("-inf"):
            return float("-inf")
        total += lp
        prev = x
    return total


def sample_transition(gen, x_prev, t, rng):
    """Ancestral sample of x_t in the factor order (s2, a2, s1, a1, o, a)."""
    spec = gen.spec
    x_prev.validate(spec)
    if tick_at(t, spec):
        s2 = gen.dyn2.sample((x_prev.s2, x_prev.a), rng)
    else:
        s2 = x_prev.s2
    a2 = gen.pol2.sample((s2,), rng)
    s1 = gen.dyn1.sample((x_prev.s1, s2, x_prev.a), rng)
    a1 = gen.pol1.sample((s1, a2), rng)
    o = gen.lik.sample((a1, s1), rng)
    a = gen.pol0.sample((o, a1), rng)
    return CompleteState(o, s1, s2, a, a1, a2)


def sample_trajectory(gen, x0, T, rng):
    steps = []
    x = x0
    for t in range(1, T + 1):
        x = sample_transition(gen, x, t, rng)
        steps.append(x)
    return Trajectory(x0, steps)


# ---------------------------------------------------------------------------
# serialization


def _bundle_tables(gen, rec, ref):
    tables = {}
    for name in GenerativeModel.table_names:
        tables[name] = getattr(gen, name).to_dict()
    for name in ReferenceModel.table_names:
        tables[name] = getattr(ref, name).to_dict()
    for name in REC_FACTORS:
        shape = rec.tables[name].shape
        tables["rec_" + name] = {
            "dims": list(shape),
            "rows": rec.tables[name].reshape(-1, shape[-1]).tolist(),
        }
    return tables


def save_models(path, gen, rec, ref):
    """Write the generative, recognition, and reference tables as one JSON
    document (version 1, named row-major arrays)."""
    doc = {
        "version": FILE_VERSION,
        "spec": gen.spec.to_dict(),
        "tables": _bundle_tables(gen, rec, ref),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_models(path):
    """Load a model bundle. Rows further than 1e-6 from normalization are
    rejected; rows within float error are kept bit-exact."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != FILE_VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    tables = doc["tables"]
    gen_tables = {name: ConditionalTable.from_dict(tables[name])
                  for name in GenerativeModel.table_names}
    ref_tables = {name: ConditionalTable.from_dict(tables[name])
                  for name in ReferenceModel.table_names}
    gen = GenerativeModel(spec, **gen_tables)
    ref = ReferenceModel(spec, **ref_tables)
    rec_tables = {}
    for name in REC_FACTORS:
        entry = tables["rec_" + name]
        arr = np.array(entry["rows"], dtype=float).reshape(entry["dims"])
        sums = arr.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > LOAD_REJECT_TOL):
            raise ValueError(f"recognition table {name} rows not normalized")
        bad = np.abs(sums - 1.0) > TABLE_ROW_TOL
        if np.any(bad):
            arr = arr.copy()
            arr[bad] /= sums[bad][..., None]
        rec_tables[name] = arr
    rec = RecognitionModel.from_tables(spec, rec_tables)
    return gen, rec, ref
