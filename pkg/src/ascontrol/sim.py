"""Environments, the agent-environment episode loop, and trace logging.

The environment owns ground-truth emission and latent dynamics; the agent
never reads environment latents, only the emitted observation. Belief
updates are fixed-lag: acting at step t uses filtering beliefs over the
previous step (no-future sentinel), and the logged objective for step t
is finalized once o_{t+1} is available (the final step logs with the
sentinel).
"""

import csv
import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np

from . import objectives
from .errors import DimensionMismatchError, NonFiniteObjectiveError
from .logspace import safe_log
from .model import (CompleteState, ConditionalTable, GenerativeModel,
                    ModelSpec, RecognitionContext, RecognitionModel,
                    ReferenceModel, tick_at)

TRACE_COLUMNS = ("t", "o", "s1", "s2", "a", "a1", "a2",
                 "J", "L", "KL", "total", "running_rate", "advantage")


@dataclass(frozen=True)
class Environment:
    """Ground-truth world: emission and latent dynamics with the same shapes
    as the agent's generative tables."""

    spec: ModelSpec
    lik: ConditionalTable
    dyn1: ConditionalTable
    dyn2: ConditionalTable
    label: str

    def __post_init__(self):
        s = self.spec
        for table, parents, child in (
                (self.lik, (s.card_a1, s.card_s1), s.card_o),
                (self.dyn1, (s.card_s1, s.card_s2, s.card_a), s.card_s1),
                (self.dyn2, (s.card_s2, s.card_a), s.card_s2)):
            if table.parent_dims != parents or table.child_dim != child:
                raise DimensionMismatchError(
                    f"environment table shape mismatch for {self.label}")


@dataclass(frozen=True)
class TraceRow:
    t: int
    state: CompleteState
    j: float
    l: float
    kl: float
    total: float
    running_rate: float
    advantage: float


@dataclass(frozen=True)
class Trace:
    episode_id: int
    seed: int
    config_digest: str
    rows: tuple

    def totals(self):
        return np.array([r.total for r in self.rows])

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.rows:
            s = r.state
            writer.writerow([r.t, s.o, s.s1, s.s2, s.a, s.a1, s.a2,
                             repr(r.j), repr(r.l), repr(r.kl), repr(r.total),
                             repr(r.running_rate), repr(r.advantage)])

    def to_csv(self, path=None):
        if path is None:
            buf = io.StringIO()
            self.write_csv(buf)
            return buf.getvalue()
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)
        return None


# ---------------------------------------------------------------------------
# thermostat task


def _temp_ref_rows(n_levels, n_phase, targets, sharpness):
    rows = np.empty((len(targets), n_levels * n_phase))
    for i, target in enumerate(targets):
        w = np.exp(-sharpness * np.abs(np.arange(n_levels) - target))
        rows[i] = np.repeat(w / w.sum(), n_phase) / n_phase
    return rows


def thermostat_env(n_temp_levels, setpoint_schedule, heat_success=0.85,
                   phase_advance=0.1, ref_sharpness=2.0):
    """A temperature chain with a phase-indexed setpoint schedule.

    Observations and fast latents both encode (temperature, phase); the
    slow latent is the phase, advancing with probability `phase_advance`
    per tick (final phase absorbing). Action 1 heats one level with
    probability `heat_success`, action 0 cools likewise. The reference
    concentrates observations on the level indexed by a1 and fast latents
    on the scheduled level for a2, so the schedule encodes a reference
    trajectory.
    """
    schedule = [int(s) for s in setpoint_schedule]
    if n_temp_levels < 2:
        raise ValueError("need at least two temperature levels")
    if not schedule:
        raise ValueError("empty setpoint schedule")
    for s in schedule:
        if not 0 <= s < n_temp_levels:
            raise ValueError(f"schedule entry {s} is not a valid a1 index")
    n_ph = len(schedule)
    spec = ModelSpec(card_o=n_temp_levels * n_ph, card_s1=n_temp_levels * n_ph,
                     card_s2=n_ph, card_a=2, card_a1=n_temp_levels, card_a2=n_ph)

    dyn2 = np.zeros((n_ph, 2, n_ph))
    for ph in range(n_ph):
        for a in range(2):
            if ph == n_ph - 1:
                dyn2[ph, a, ph] = 1.0
            else:
                dyn2[ph, a, ph] = 1.0 - phase_advance
                dyn2[ph, a, ph + 1] = phase_advance

    dyn1 = np.zeros((spec.card_s1, n_ph, 2, spec.card_s1))
    for s1 in range(spec.card_s1):
        temp = s1 // n_ph
        for ph2 in range(n_ph):
            for a in range(2):
                moved = min(temp + 1, n_temp_levels - 1) if a == 1 else max(temp - 1, 0)
                dyn1[s1, ph2, a, moved * n_ph + ph2] += heat_success
                dyn1[s1, ph2, a, temp * n_ph + ph2] += 1.0 - heat_success

    lik = np.zeros((n_temp_levels, spec.card_s1, spec.card_o))
    for a1 in range(n_temp_levels):
        lik[a1, np.arange(spec.card_s1), np.arange(spec.card_s1)] = 1.0

    env = Environment(
        spec=spec,
        lik=ConditionalTable((spec.card_a1, spec.card_s1), spec.card_o,
                             lik.reshape(-1, spec.card_o)),
        dyn1=ConditionalTable((spec.card_s1, n_ph, 2), spec.card_s1,
                              dyn1.reshape(-1, spec.card_s1)),
        dyn2=ConditionalTable((n_ph, 2), n_ph, dyn2.reshape(-1, n_ph)),
        label="thermostat",
    )
    ref = ReferenceModel(
        spec=spec,
        ref_o=ConditionalTable((spec.card_a1,), spec.card_o,
                               _temp_ref_rows(n_temp_levels, n_ph,
                                              range(n_temp_levels), ref_sharpness)),
        ref_s1=ConditionalTable((spec.card_a2,), spec.card_s1,
                                _temp_ref_rows(n_temp_levels, n_ph,
                                               schedule, ref_sharpness)),
    )
    return env, ref


def thermostat_agent(env, setpoint_schedule, seed):
    """Agent for the thermostat task: the environment's own tables as the
    generative model, reference-setting policies pinned to the schedule
    (a2 = phase, a1 = schedule[a2]), a free seeded low-level policy, and
    recognition tables initialized at the exact one-step filtering
    posterior. Train with trainable_policies=("pol0",)."""
    from . import chains

    spec = env.spec
    schedule = [int(s) for s in setpoint_schedule]
    rng = np.random.default_rng(seed)
    pol0 = ConditionalTable.from_logits(
        (spec.card_o, spec.card_a1), spec.card_a,
        rng.standard_normal((spec.card_o * spec.card_a1, spec.card_a)))
    pol1 = ConditionalTable.one_hot((spec.card_s1, spec.card_a2), spec.card_a1,
                                    lambda s1, a2: schedule[a2],
                                    strictly_positive=True)
    pol2 = ConditionalTable.one_hot((spec.card_s2,), spec.card_a2,
                                    lambda s2: s2, strictly_positive=True)
    gen = GenerativeModel(spec, lik=env.lik, dyn1=env.dyn1, dyn2=env.dyn2,
                          pol0=pol0, pol1=pol1, pol2=pol2)
    rec = RecognitionModel.from_tables(
        spec, chains.posterior_recognition_tables(gen))
    return gen, rec


def with_uniform_pol0(gen):
    """Same agent with a uniform low-level policy (random-action baseline)."""
    return gen.replace_policies(pol0=ConditionalTable.uniform(
        (gen.spec.card_o, gen.spec.card_a1), gen.spec.card_a))


# ---------------------------------------------------------------------------
# episode loop


def _digest(gen, rec, ref, env, T, seed, x0):
    h = hashlib.sha256()
    h.update(json.dumps(gen.spec.to_dict(), sort_keys=True).encode())
    h.update(json.dumps([T, seed, env.label, x0.astuple()]).encode())
    for table in (gen.lik, gen.dyn1, gen.dyn2, gen.pol0, gen.pol1, gen.pol2,
                  ref.ref_o, ref.ref_s1, env.lik, env.dyn1, env.dyn2):
        h.update(table.probs.tobytes())
    for name in sorted(rec.tables):
        h.update(rec.tables[name].tobytes())
    return h.hexdigest()


def _sample_categorical(probs, rng):
    return int(np.searchsorted(np.cumsum(probs), rng.random(),
                               side="right").clip(0, probs.size - 1))


def run_episode(gen, rec, ref, env, T, seed, x0=None, episode_id=0):
    """One logged episode. Deterministic given (models, env, T, seed, x0)."""
    spec = gen.spec
    if env.spec != spec:
        raise DimensionMismatchError("agent and environment specs differ")
    if x0 is None:
        x0 = CompleteState(0, 0, 0, 0, 0, 0)
    x0.validate(spec)
    rng = np.random.default_rng(seed)
    believed = [x0]
    env_s1, env_s2 = x0.s1, x0.s2
    contexts = []  # (t, RecognitionContext without future) per step
    for t in range(1, T + 1):
        tick = tick_at(t, spec)
        xprev = believed[t - 1]
        if t >= 2:
            # filtering correction of the previous step's latent state from
            # the belief's (s1, s2) marginal; the executed a1/a2 stay as
            # facts but are not treated as evidence (they came from the
            # agent's own earlier belief, so conditioning on them would
            # only echo it)
            ctx = RecognitionContext(o=xprev.o, a=xprev.a,
                                     x_prev=believed[t - 2], future=None)
            joint = rec.joint(ctx, tick=tick_at(t - 1, spec))
            marg = joint.sum(axis=(2, 3))
            z = marg.sum()
            if z > 0.0:
                flat = _sample_categorical(marg.reshape(-1) / z, rng)
                s1b, s2b = np.unravel_index(flat, (spec.card_s1, spec.card_s2))
                xprev = CompleteState(xprev.o, int(s1b), int(s2b), xprev.a,
                                      xprev.a1, xprev.a2)
                believed[t - 1] = xprev
        # hierarchically propagate beliefs and pick reference actions
        s2_b = gen.dyn2.sample((xprev.s2, xprev.a), rng) if tick else xprev.s2
        a2_t = gen.pol2.sample((s2_b,), rng)
        s1_b = gen.dyn1.sample((xprev.s1, s2_b, xprev.a), rng)
        a1_t = gen.pol1.sample((s1_b, a2_t), rng)
        # environment transitions on the executed action and emits
        env_s2 = env.dyn2.sample((env_s2, xprev.a), rng) if tick else env_s2
        env_s1 = env.dyn1.sample((env_s1, env_s2, xprev.a), rng)
        o_t = env.lik.sample((a1_t, env_s1), rng)
        a_t = gen.pol0.sample((o_t, a1_t), rng)
        believed.append(CompleteState(o_t, s1_b, s2_b, a_t, a1_t, a2_t))
        contexts.append(RecognitionContext(o=o_t, a=a_t, x_prev=believed[t - 1],
                                           future=None))
    # lag-1 smoothing: step t's objective conditions on o_{t+1}; the final
    # step keeps the sentinel
    rows = []
    running_sum = 0.0
    for t in range(1, T + 1):
        fut = believed[t + 1].o if t < T else None
        ctx = RecognitionContext(o=contexts[t - 1].o, a=contexts[t - 1].a,
                                 x_prev=contexts[t - 1].x_prev, future=fut)
        step = objectives.step_objective(gen, rec, ref, ctx,
                                         tick=tick_at(t, spec))
        if not np.isfinite(step.total):
            raise NonFiniteObjectiveError(
                f"non-finite step objective at t={t}; enable the positivity "
                f"floor on the model tables", iteration=t)
        running_sum += step.total
        running_rate = running_sum / t
        rows.append(TraceRow(t=t, state=believed[t], j=step.j, l=step.l,
                             kl=step.kl, total=step.total,
                             running_rate=running_rate,
                             advantage=step.total - running_rate))
    return Trace(episode_id=episode_id, seed=seed,
                 config_digest=_digest(gen, rec, ref, env, T, seed, x0),
                 rows=tuple(rows))


def observed_reference_surprisal(trace, ref):
    """Mean realized -log R(o_t | a1_t) along a trace: how well the emitted
    observations track the agent's own reference settings."""
    vals = [-float(safe_log(ref.ref_o.prob((r.state.a1,), r.state.o)))
            for r in trace.rows]
    return float(np.mean(vals))


def realized_reference_surprisal(trace, ref):
    """Mean realized J over believed states along a trace."""
    vals = [objectives.reference_surprisal(ref, r.state) for r in trace.rows]
    return float(np.mean(vals))


@dataclass(frozen=True)
class EvalSummary:
    rates: np.ndarray
    mean_rate: float
    stderr_rate: float
    obs_ref: np.ndarray
    mean_obs_ref: float
    stderr_obs_ref: float
    seeds: tuple


def evaluate(gen, rec, ref, env, n_episodes, T, seed, x0=None, seeds=None):
    """Per-episode global rates (mean step objective) and realized
    observation-reference surprisals, with means and standard errors."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if seeds is None:
        seeds = [int(s.generate_state(1)[0])
                 for s in np.random.SeedSequence(seed).spawn(n_episodes)]
    rates, obs_ref = [], []
    for i, s in enumerate(seeds):
        trace = run_episode(gen, rec, ref, env, T, s, x0=x0, episode_id=i)
        rates.append(float(trace.totals().mean()))
        obs_ref.append(observed_reference_surprisal(trace, ref))
    rates = np.array(rates)
    obs_ref = np.array(obs_ref)
    n = len(seeds)
    se = lambda v: float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EvalSummary(rates=rates, mean_rate=float(rates.mean()),
                       stderr_rate=se(rates), obs_ref=obs_ref,
                       mean_obs_ref=float(obs_ref.mean()),
                       stderr_obs_ref=se(obs_ref), seeds=tuple(seeds))
